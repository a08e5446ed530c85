//! Neighbor-set selection with one exponential mechanism.
//!
//! The quality of a candidate neighbor set is the sum of the members'
//! absolute similarities to the target, so the mechanism's weight of a set,
//! `exp(eps * q(S) / (2 * dq))`, factorizes into a product of per-user
//! weights `w_v = exp(eps * |Sim(u, v)| / (2 * dq))`. Drawing a set of size N
//! with probability `prod_{v in S} w_v / e_N(w)` is therefore the same
//! mechanism, and it can be sampled exactly in `O(|candidates| * N)` with
//! elementary symmetric polynomials instead of enumerating every N-subset.
//!
//! [`enumerate_distribution`] keeps the explicit enumeration for small
//! inputs. It works from the quality function directly and serves as the
//! oracle for the sampler and for [`audit_dp`].

use crate::error::{Error, Result};
use crate::similarity::SimilarityVector;
use crate::UserId;
use itertools::Itertools;
use rand::Rng;
use std::collections::BTreeSet;

/// Sensitivity of the set quality: one user's ratings move one |Sim| by at
/// most 1.
pub const SENSITIVITY: f64 = 1.0;

/// Largest support [`enumerate_distribution`] will build.
pub const MAX_ENUMERATION: f64 = 1e6;

/// Per-candidate mechanism weights for one target user.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    candidates: Vec<UserId>,
    scores: Vec<f64>,
    log_weights: Vec<f64>,
    epsilon: f64,
    delta_q: f64,
}

impl WeightVector {
    /// Weights for the given candidates (sorted ascending, target excluded)
    /// from a similarity vector.
    pub fn from_similarities<I>(sims: &SimilarityVector, candidates: I, epsilon: f64, delta_q: f64) -> Result<Self>
    where
        I: IntoIterator<Item = UserId>,
    {
        let mut ids: Vec<UserId> = candidates.into_iter().filter(|&v| v != sims.target).collect();
        ids.sort_unstable();
        let scores = ids
            .iter()
            .map(|&v| sims.get(v).map(f64::abs).ok_or(Error::MissingSimilarity(v)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_scores(ids, scores, epsilon, delta_q)
    }

    /// Weights from explicit quality contributions (absolute similarities).
    pub fn from_scores(candidates: Vec<UserId>, scores: Vec<f64>, epsilon: f64, delta_q: f64) -> Result<Self> {
        if candidates.len() != scores.len() {
            return Err(Error::InvalidParameter(format!(
                "{} candidates but {} scores",
                candidates.len(),
                scores.len()
            )));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon {epsilon} must be finite and >= 0"
            )));
        }
        if !(delta_q > 0.0 && delta_q.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sensitivity {delta_q} must be positive"
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::InvalidParameter(format!("score {bad} must be finite and >= 0")));
        }
        let mut seen = BTreeSet::new();
        if let Some(&dup) = candidates.iter().find(|&&v| !seen.insert(v)) {
            return Err(Error::DuplicateCandidate(dup));
        }
        let log_weights = scores.iter().map(|s| epsilon * s / (2.0 * delta_q)).collect();
        Ok(Self {
            candidates,
            scores,
            log_weights,
            epsilon,
            delta_q,
        })
    }

    pub fn candidates(&self) -> &[UserId] {
        &self.candidates
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// `ln w_v` per candidate.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `w_v` per candidate. May overflow for extreme budgets; the sampler
    /// works from [`Self::log_weights`].
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta_q(&self) -> f64 {
        self.delta_q
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSet {
    pub members: BTreeSet<UserId>,
}

impl NeighborSet {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, v: UserId) -> bool {
        self.members.contains(&v)
    }
}

impl FromIterator<UserId> for NeighborSet {
    fn from_iter<T: IntoIterator<Item = UserId>>(iter: T) -> Self {
        Self {
            members: iter.into_iter().collect(),
        }
    }
}

/// Explicit distribution over every N-subset of the candidates.
#[derive(Clone, Debug)]
pub struct SetDistribution {
    /// `(set, probability, ln probability)` in lexicographic candidate order.
    pub support: Vec<(BTreeSet<UserId>, f64, f64)>,
}

impl SetDistribution {
    pub fn total(&self) -> f64 {
        self.support.iter().map(|(_, p, _)| p).sum()
    }

    pub fn probability(&self, set: &BTreeSet<UserId>) -> f64 {
        self.support
            .iter()
            .find(|(s, _, _)| s == set)
            .map_or(0.0, |(_, p, _)| *p)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// Total-variation distance between observed set counts and this
    /// distribution. Observed sets outside the support count in full.
    pub fn total_variation<'a, I>(&self, counts: I, draws: usize) -> f64
    where
        I: IntoIterator<Item = (&'a BTreeSet<UserId>, &'a usize)>,
    {
        let counts: std::collections::BTreeMap<_, _> = counts.into_iter().collect();
        let draws = draws as f64;
        let mut tv = 0.0;
        for (set, p, _) in &self.support {
            let observed = counts.get(set).map_or(0.0, |&&c| c as f64 / draws);
            tv += (observed - p).abs();
        }
        for (set, &&c) in &counts {
            if !self.support.iter().any(|(s, _, _)| s == *set) {
                tv += c as f64 / draws;
            }
        }
        tv / 2.0
    }
}

/// Sum of absolute similarities of the members.
pub fn quality(sims: &SimilarityVector, members: &BTreeSet<UserId>) -> Result<f64> {
    members
        .iter()
        .map(|&v| sims.get(v).map(f64::abs).ok_or(Error::MissingSimilarity(v)))
        .sum()
}

/// Keeps each non-target member of `category` independently with
/// probability `p`. If fewer than `n` survive, retries up to 10 times, then
/// returns every non-target member. Never looks at ratings.
pub fn bernoulli_subsample<R: Rng + ?Sized>(
    category: &BTreeSet<UserId>,
    target: UserId,
    p: f64,
    n: usize,
    rng: &mut R,
) -> Result<BTreeSet<UserId>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subsample probability {p} must lie in (0, 1]"
        )));
    }
    let pool = category.iter().copied().filter(|&v| v != target);
    if p == 1.0 {
        return Ok(pool.collect());
    }
    for _ in 0..=10 {
        let kept: BTreeSet<UserId> = pool.clone().filter(|_| rng.random::<f64>() < p).collect();
        if kept.len() >= n {
            return Ok(kept);
        }
    }
    Ok(pool.collect())
}

/// Elementary symmetric polynomials `e_0..e_n` of `weights`, stored as
/// `scaled[j] * exp(log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledSymmetric {
    pub scaled: Vec<f64>,
    pub log_scale: f64,
}

impl ScaledSymmetric {
    pub fn values(&self) -> Vec<f64> {
        self.scaled.iter().map(|v| v * self.log_scale.exp()).collect()
    }

    pub fn ln(&self, j: usize) -> f64 {
        self.scaled[j].ln() + self.log_scale
    }
}

/// `e_j(weights)` for `j = 0..=n` by the standard one-weight-at-a-time
/// recurrence, renormalizing after every step so the largest entry is 1.
pub fn elementary_symmetric_scaled(weights: &[f64], n: usize) -> ScaledSymmetric {
    let mut scaled = vec![0.0; n + 1];
    scaled[0] = 1.0;
    let mut log_scale = 0.0;
    for &w in weights {
        for j in (1..=n).rev() {
            scaled[j] += w * scaled[j - 1];
        }
        let peak = scaled.iter().copied().fold(0.0, f64::max);
        if peak > 0.0 && peak.is_finite() {
            for v in &mut scaled {
                *v /= peak;
            }
            log_scale += peak.ln();
        }
    }
    ScaledSymmetric { scaled, log_scale }
}

pub fn elementary_symmetric(weights: &[f64], n: usize) -> Vec<f64> {
    elementary_symmetric_scaled(weights, n).values()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln e_j` of every suffix of `log_weights`: entry `[i][j]` covers
/// candidates `i..`. Row `len` is the empty suffix.
fn suffix_log_symmetric(log_weights: &[f64], n: usize) -> Vec<Vec<f64>> {
    let len = log_weights.len();
    let mut table = vec![vec![f64::NEG_INFINITY; n + 1]; len + 1];
    table[len][0] = 0.0;
    for i in (0..len).rev() {
        let (head, tail) = table.split_at_mut(i + 1);
        let next = &tail[0];
        let row = &mut head[i];
        row[0] = 0.0;
        for j in 1..=n {
            row[j] = log_add_exp(next[j], log_weights[i] + next[j - 1]);
        }
    }
    table
}

/// Draws a neighbor set of exactly `n` candidates with probability
/// proportional to `exp(eps * q(S) / (2 * dq))`.
///
/// Candidates are scanned in order; with `j` slots left, candidate `i` is
/// taken with probability `w_i * e_{j-1}(after i) / e_j(from i)`.
pub fn sample_neighbor_set<R: Rng + ?Sized>(wv: &WeightVector, n: usize, rng: &mut R) -> Result<NeighborSet> {
    let len = wv.len();
    if n > len {
        return Err(Error::TooFewCandidates {
            requested: n,
            available: len,
        });
    }
    if n == 1 {
        return Ok(std::iter::once(wv.candidates[sample_one(&wv.log_weights, rng)]).collect());
    }
    let table = suffix_log_symmetric(&wv.log_weights, n);
    let mut members = BTreeSet::new();
    let mut slots = n;
    for i in 0..len {
        if slots == 0 {
            break;
        }
        let take = if len - i == slots {
            true
        } else {
            let log_p = wv.log_weights[i] + table[i + 1][slots - 1] - table[i][slots];
            rng.random::<f64>() < log_p.exp()
        };
        if take {
            members.insert(wv.candidates[i]);
            slots -= 1;
        }
    }
    debug_assert_eq!(members.len(), n);
    Ok(NeighborSet { members })
}

/// Index drawn with probability proportional to `exp(log_weights[i])`;
/// `-inf` entries are never drawn.
pub(crate) fn sample_one<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let target = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    // rounding left `target` at the total; fall back to the last positive weight
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .expect("the maximum has weight 1")
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Every N-subset with its mechanism probability, evaluated from the set
/// quality `sum |Sim|` and normalized by log-sum-exp.
pub fn enumerate_distribution(wv: &WeightVector, n: usize) -> Result<SetDistribution> {
    let len = wv.len();
    if n > len {
        return Err(Error::TooFewCandidates {
            requested: n,
            available: len,
        });
    }
    let size = binomial(len, n);
    if size > MAX_ENUMERATION {
        return Err(Error::SupportTooLarge(size));
    }
    let scale = wv.epsilon / (2.0 * wv.delta_q);
    let sets: Vec<(BTreeSet<UserId>, f64)> = (0..len)
        .combinations(n)
        .map(|idx| {
            let q: f64 = idx.iter().map(|&i| wv.scores[i]).sum();
            (idx.iter().map(|&i| wv.candidates[i]).collect(), scale * q)
        })
        .collect();
    let peak = sets.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let log_norm = peak + sets.iter().map(|(_, l)| (l - peak).exp()).sum::<f64>().ln();
    Ok(SetDistribution {
        support: sets
            .into_iter()
            .map(|(s, l)| {
                let lp = l - log_norm;
                (s, lp.exp(), lp)
            })
            .collect(),
    })
}

/// Largest `|ln P1(S) - ln P2(S)|` over all N-subsets, for two weight
/// vectors over the same candidates (bounded adjacency: same users, one
/// user's ratings changed).
pub fn audit_dp(pair: (&WeightVector, &WeightVector), n: usize) -> Result<f64> {
    let (a, b) = pair;
    if a.candidates != b.candidates {
        return Err(Error::MismatchedCandidates);
    }
    let da = enumerate_distribution(a, n)?;
    let db = enumerate_distribution(b, n)?;
    Ok(da
        .support
        .iter()
        .zip(&db.support)
        .map(|((sa, _, la), (sb, _, lb))| {
            debug_assert_eq!(sa, sb);
            (la - lb).abs()
        })
        .fold(0.0, f64::max))
}

/// Records every exponential-mechanism invocation and its budget.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrivacyAccountant {
    charges: Vec<f64>,
}

impl PrivacyAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, epsilon: f64) {
        self.charges.push(epsilon);
    }

    pub fn invocations(&self) -> usize {
        self.charges.len()
    }

    pub fn charges(&self) -> &[f64] {
        &self.charges
    }

    /// Total budget under simple composition.
    pub fn total_epsilon(&self) -> f64 {
        self.charges.iter().fold(0.0, |acc, c| acc + c)
    }
}
