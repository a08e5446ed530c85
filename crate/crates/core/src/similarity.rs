//! Mean ratings and Pearson similarity over sparse rating rows.
//!
//! Means are taken over each user's full rated set; the correlation sums run
//! over co-rated items only. No overlap, or a zero factor in the
//! denominator, yields similarity 0.

use crate::data::RatingMatrix;
use crate::error::{Error, Result};
use crate::{ItemId, UserId};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Values further than this outside `[-1, 1]` indicate a bug, not rounding.
const CLAMP_SLACK: f64 = 1e-9;
/// Sums of squared deviations at or below this count as zero.
const ZERO_VARIANCE: f64 = 1e-12;

pub fn mean_rating(matrix: &RatingMatrix, u: UserId) -> Result<f64> {
    Ok(matrix.mean_at(matrix.require_index(u)?))
}

/// Centered correlation of two sorted sparse rows around the given means,
/// summed over their common support.
pub fn centered_correlation<A, B>(a: &[(ItemId, A)], mean_a: f64, b: &[(ItemId, B)], mean_b: f64) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    let (mut i, mut j) = (0, 0);
    let (mut cross, mut sq_a, mut sq_b) = (0.0, 0.0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let da = a[i].1.into() - mean_a;
                let db = b[j].1.into() - mean_b;
                cross += da * db;
                sq_a += da * da;
                sq_b += db * db;
                i += 1;
                j += 1;
            }
        }
    }
    if sq_a <= ZERO_VARIANCE || sq_b <= ZERO_VARIANCE {
        return 0.0;
    }
    clamp_unit(cross / (sq_a * sq_b).sqrt())
}

fn clamp_unit(value: f64) -> f64 {
    debug_assert!(
        value.abs() <= 1.0 + CLAMP_SLACK,
        "correlation {value} outside [-1, 1] beyond rounding"
    );
    value.clamp(-1.0, 1.0)
}

/// Number of items two sorted rows have in common.
pub fn co_rated_count<A, B>(a: &[(ItemId, A)], b: &[(ItemId, B)]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

pub(crate) fn pearson_at(matrix: &RatingMatrix, a: usize, b: usize) -> f64 {
    centered_correlation(matrix.row_at(a), matrix.mean_at(a), matrix.row_at(b), matrix.mean_at(b))
}

/// Pearson similarity of users `u` and `v`.
pub fn pearson(matrix: &RatingMatrix, u: UserId, v: UserId) -> Result<f64> {
    if u == v {
        return Err(Error::SelfSimilarity(u));
    }
    let a = matrix.require_index(u)?;
    let b = matrix.require_index(v)?;
    Ok(pearson_at(matrix, a, b))
}

/// Similarities of one target user against a candidate set.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVector {
    pub target: UserId,
    pub entries: BTreeMap<UserId, f64>,
}

impl SimilarityVector {
    pub fn get(&self, v: UserId) -> Option<f64> {
        self.entries.get(&v).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Anything that can answer `Sim(u, v)` for users of one rating matrix.
pub trait SimilaritySource: Sync {
    fn similarity(&self, u: UserId, v: UserId) -> Result<f64>;

    /// `|I_uv|`, the number of items both users rated.
    fn co_rated(&self, u: UserId, v: UserId) -> Result<usize>;
}

impl SimilaritySource for RatingMatrix {
    fn similarity(&self, u: UserId, v: UserId) -> Result<f64> {
        pearson(self, u, v)
    }

    fn co_rated(&self, u: UserId, v: UserId) -> Result<usize> {
        let a = self.require_index(u)?;
        let b = self.require_index(v)?;
        Ok(co_rated_count(self.row_at(a), self.row_at(b)))
    }
}

pub fn similarity_vector<I>(matrix: &RatingMatrix, u: UserId, candidates: I) -> Result<SimilarityVector>
where
    I: IntoIterator<Item = UserId>,
{
    similarity_vector_with(matrix, matrix, u, candidates)
}

pub fn similarity_vector_with<S, I>(
    matrix: &RatingMatrix,
    sims: &S,
    u: UserId,
    candidates: I,
) -> Result<SimilarityVector>
where
    S: SimilaritySource + ?Sized,
    I: IntoIterator<Item = UserId>,
{
    matrix.require_index(u)?;
    let mut entries = BTreeMap::new();
    for v in candidates {
        if v != u {
            entries.insert(v, sims.similarity(u, v)?);
        }
    }
    Ok(SimilarityVector { target: u, entries })
}

/// Precomputed dense table of all pairwise similarities of one matrix.
///
/// Built once in parallel; afterwards read-only, so it can be shared across
/// threads. Gives exactly the values [`pearson`] would.
#[derive(Clone, Debug)]
pub struct SimilarityTable {
    users: Vec<UserId>,
    index: std::collections::HashMap<UserId, usize>,
    values: Vec<f64>,
    overlaps: Vec<u32>,
}

impl SimilarityTable {
    pub fn build(matrix: &RatingMatrix) -> Self {
        let n = matrix.n_users();
        let values: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|a| {
                (0..n).map(move |b| {
                    if a == b {
                        0.0
                    } else {
                        pearson_at(matrix, a.min(b), a.max(b))
                    }
                })
            })
            .collect();
        let overlaps: Vec<u32> = (0..n)
            .into_par_iter()
            .flat_map_iter(|a| (0..n).map(move |b| co_rated_count(matrix.row_at(a), matrix.row_at(b)) as u32))
            .collect();
        Self {
            users: matrix.users().to_vec(),
            index: matrix.users().iter().enumerate().map(|(i, &u)| (u, i)).collect(),
            values,
            overlaps,
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Similarities of user `u` against every user, in ascending user order.
    pub fn row(&self, u: UserId) -> Result<&[f64]> {
        let a = *self.index.get(&u).ok_or(Error::UnknownUser(u))?;
        let n = self.users.len();
        Ok(&self.values[a * n..(a + 1) * n])
    }
}

impl SimilarityTable {
    fn cell(&self, u: UserId, v: UserId) -> Result<usize> {
        let a = *self.index.get(&u).ok_or(Error::UnknownUser(u))?;
        let b = *self.index.get(&v).ok_or(Error::UnknownUser(v))?;
        Ok(a * self.users.len() + b)
    }
}

impl SimilaritySource for SimilarityTable {
    fn similarity(&self, u: UserId, v: UserId) -> Result<f64> {
        if u == v {
            return Err(Error::SelfSimilarity(u));
        }
        Ok(self.values[self.cell(u, v)?])
    }

    fn co_rated(&self, u: UserId, v: UserId) -> Result<usize> {
        Ok(self.overlaps[self.cell(u, v)?] as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::sibyl_matrix;
    use proptest::prelude::*;

    /// Direct evaluation of the Pearson formula with explicit set
    /// intersection, used as an oracle for the merge-join path.
    fn brute_force(m: &RatingMatrix, u: UserId, v: UserId) -> f64 {
        let ru: BTreeMap<_, _> = m.row(u).unwrap().iter().copied().collect();
        let rv: BTreeMap<_, _> = m.row(v).unwrap().iter().copied().collect();
        let mu = ru.values().map(|&r| r as f64).sum::<f64>() / ru.len() as f64;
        let mv = rv.values().map(|&r| r as f64).sum::<f64>() / rv.len() as f64;
        let common: Vec<_> = ru.keys().filter(|k| rv.contains_key(k)).collect();
        let num: f64 = common.iter().map(|i| (ru[i] as f64 - mu) * (rv[i] as f64 - mv)).sum();
        let su: f64 = common.iter().map(|i| (ru[i] as f64 - mu).powi(2)).sum();
        let sv: f64 = common.iter().map(|i| (rv[i] as f64 - mv).powi(2)).sum();
        if common.is_empty() || su == 0.0 || sv == 0.0 {
            0.0
        } else {
            num / (su * sv).sqrt()
        }
    }

    #[test]
    fn mean_rating_cases() {
        let m = RatingMatrix::from_triples([(1, 1, 3), (2, 1, 2), (2, 2, 4), (2, 3, 5)]);
        assert_eq!(mean_rating(&m, 1).unwrap(), 3.0);
        assert!((mean_rating(&m, 2).unwrap() - 11.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_rating(&sibyl_matrix(), 3).unwrap(), 4.0);
        assert!(matches!(mean_rating(&m, 9), Err(Error::UnknownUser(9))));
    }

    #[test]
    fn pearson_cases() {
        let disjoint = RatingMatrix::from_triples([(1, 1, 1), (1, 2, 5), (2, 3, 1), (2, 4, 5)]);
        assert_eq!(pearson(&disjoint, 1, 2).unwrap(), 0.0);

        let same = RatingMatrix::from_triples([(1, 1, 1), (1, 2, 5), (2, 1, 1), (2, 2, 5)]);
        assert_eq!(pearson(&same, 1, 2).unwrap(), 1.0);

        let opposite = RatingMatrix::from_triples([(1, 1, 2), (1, 2, 4), (2, 1, 4), (2, 2, 2)]);
        assert_eq!(pearson(&opposite, 1, 2).unwrap(), -1.0);

        let m = sibyl_matrix();
        assert!((pearson(&m, 5, 3).unwrap() - 1.0).abs() < 1e-12);

        assert!(matches!(pearson(&m, 2, 2), Err(Error::SelfSimilarity(2))));
        assert!(matches!(pearson(&m, 2, 42), Err(Error::UnknownUser(42))));
    }

    #[test]
    fn constant_profile_is_zero_not_nan() {
        let m = RatingMatrix::from_triples([(1, 1, 1), (1, 2, 5), (2, 1, 3), (2, 2, 3)]);
        assert_eq!(pearson(&m, 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn similarity_vector_cases() {
        let m = sibyl_matrix();
        assert!(similarity_vector(&m, 5, [5]).unwrap().is_empty());
        assert!(similarity_vector(&m, 5, []).unwrap().is_empty());

        let sv = similarity_vector(&m, 5, 1..=5).unwrap();
        assert_eq!(sv.len(), 4);
        for v in 1..=4 {
            assert!((sv.get(v).unwrap() - brute_force(&m, 5, v)).abs() < 1e-12);
        }
        assert!((sv.get(3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_matches_direct() {
        let m = sibyl_matrix();
        let table = SimilarityTable::build(&m);
        for &u in m.users() {
            for &v in m.users() {
                if u != v {
                    assert_eq!(table.similarity(u, v).unwrap(), pearson(&m, u, v).unwrap());
                    assert_eq!(table.co_rated(u, v).unwrap(), m.co_rated(u, v).unwrap());
                }
            }
        }
    }

    fn small_matrix() -> impl Strategy<Value = RatingMatrix> {
        prop::collection::vec((1u32..=4, 1u32..=8, 1u8..=5), 1..40).prop_map(RatingMatrix::from_triples)
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_matches_oracle(m in small_matrix()) {
            for &u in m.users() {
                for &v in m.users() {
                    if u == v { continue; }
                    let s = pearson(&m, u, v).unwrap();
                    prop_assert!(s.abs() <= 1.0);
                    prop_assert!(!s.is_nan());
                    prop_assert_eq!(s, pearson(&m, v, u).unwrap());
                    prop_assert!((s - brute_force(&m, u, v).clamp(-1.0, 1.0)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn translation_invariant(rows in prop::collection::vec((1u32..=2, 1u32..=6, 1u8..=3), 2..20), shift in 1u8..=2) {
            let m = RatingMatrix::from_triples(rows.iter().copied());
            let shifted = RatingMatrix::from_triples(rows.iter().map(|&(u, i, r)| (u, i, r + shift)));
            if m.n_users() == 2 {
                let a = pearson(&m, 1, 2).unwrap();
                let b = pearson(&shifted, 1, 2).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
