//! CF, DPCF and KDPCF recommenders.
//!
//! All three share the prediction stage: candidate items are the union of
//! the neighbors' rated items minus the target's own, each scored by the
//! mean-centered weighted average
//! `r_u + sum Sim(u,v) (r_vi - r_v) / sum |Sim(u,v)|` over the neighbors who
//! rated the item, clamped to `[1, 5]`.

use crate::clustering::{
    adjust_target_category, default_k, kmeans_with, AdjustedCategory, AdjustmentConfig, CategoryBounds, Clustering,
    DEFAULT_MAX_ITERATIONS, DEFAULT_MAX_ROUNDS,
};
use crate::data::RatingMatrix;
use crate::dp_sampler::{
    bernoulli_subsample, sample_neighbor_set, sample_one, NeighborSet, PrivacyAccountant, WeightVector, SENSITIVITY,
};
use crate::error::{Error, Result};
use crate::similarity::{similarity_vector_with, SimilaritySource, SimilarityVector};
use crate::{ItemId, UserId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

#[derive(Clone, Debug, PartialEq)]
pub struct RecommendationList {
    pub target: UserId,
    /// `(item, predicted rating)`, best first; ties by ascending item id.
    pub items: Vec<(ItemId, f64)>,
}

impl RecommendationList {
    pub fn item_ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.iter().map(|&(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The first `m` entries.
    pub fn truncated(&self, m: usize) -> Self {
        Self {
            target: self.target,
            items: self.items.iter().take(m).copied().collect(),
        }
    }
}

/// A recommendation together with how it was produced.
#[derive(Clone, Debug)]
pub struct Recommendation {
    pub list: RecommendationList,
    pub neighbors: NeighborSet,
    /// Every exponential-mechanism invocation made for this recommendation.
    pub privacy: PrivacyAccountant,
    /// KDPCF only: the adjusted target category.
    pub category: Option<AdjustedCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdpcfParams {
    /// Recommendation list length.
    pub m: usize,
    /// Neighbor set size.
    pub n: usize,
    pub epsilon: f64,
    /// Defaults to `5 * n`.
    pub c_min: Option<usize>,
    /// Defaults to `10 * n`.
    pub c_max: Option<usize>,
    /// Defaults to `ceil(2|U| / (c_min + c_max))`.
    pub k: Option<usize>,
    pub subsample_p: f64,
    pub delta_q: f64,
    pub max_iterations: usize,
    pub max_rounds: usize,
}

impl Default for KdpcfParams {
    fn default() -> Self {
        Self {
            m: 30,
            n: 30,
            epsilon: 1.0,
            c_min: None,
            c_max: None,
            k: None,
            subsample_p: 1.0,
            delta_q: SENSITIVITY,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

impl KdpcfParams {
    pub fn bounds(&self) -> Result<CategoryBounds> {
        let defaults = CategoryBounds::for_neighbor_size(self.n);
        CategoryBounds::new(
            self.c_min.unwrap_or(defaults.c_min),
            self.c_max.unwrap_or(defaults.c_max),
            self.n,
        )
    }

    /// Cluster count for a population, never above the population size.
    pub fn k_for(&self, n_users: usize) -> Result<usize> {
        let k = match self.k {
            Some(k) => k,
            None => default_k(n_users, self.bounds()?),
        };
        if k == 0 {
            return Err(Error::InvalidParameter("k must be positive".into()));
        }
        Ok(k.min(n_users.max(1)))
    }

    pub fn adjustment(&self) -> Result<AdjustmentConfig> {
        Ok(AdjustmentConfig {
            bounds: self.bounds()?,
            neighbor_size: self.n,
            max_rounds: self.max_rounds,
            max_iterations: self.max_iterations,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidParameter("m and N must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon {} must be finite and >= 0",
                self.epsilon
            )));
        }
        if !(self.subsample_p > 0.0 && self.subsample_p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "subsample probability {} must lie in (0, 1]",
                self.subsample_p
            )));
        }
        if !(self.delta_q > 0.0 && self.delta_q.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sensitivity {} must be positive",
                self.delta_q
            )));
        }
        self.bounds()?;
        if self.k == Some(0) {
            return Err(Error::InvalidParameter("k must be positive".into()));
        }
        Ok(())
    }
}

/// Accumulated numerator and denominator of one item's prediction.
#[derive(Clone, Copy, Default)]
struct Accumulator {
    weighted_deviation: f64,
    weight: f64,
}

/// Predicted rating of item `i` for user `u` from the neighbors who rated
/// it, or `None` when none did.
pub fn predict_rating<S: SimilaritySource + ?Sized>(
    matrix: &RatingMatrix,
    u: UserId,
    neighbors: &NeighborSet,
    sims: &S,
    i: ItemId,
) -> Result<Option<f64>> {
    let u_idx = matrix.require_index(u)?;
    if matrix.rating(u, i).is_some() {
        return Err(Error::InvalidParameter(format!("user {u} already rated item {i}")));
    }
    let mut acc = Accumulator::default();
    let mut rated = false;
    for &v in &neighbors.members {
        let v_idx = matrix.require_index(v)?;
        if let Some(r) = matrix.rating(v, i) {
            let s = sims.similarity(u, v)?;
            acc.weighted_deviation += s * (f64::from(r) - matrix.mean_at(v_idx));
            acc.weight += s.abs();
            rated = true;
        }
    }
    Ok(rated.then(|| finish(matrix.mean_at(u_idx), acc)))
}

fn finish(mean_u: f64, acc: Accumulator) -> f64 {
    let raw = if acc.weight > 0.0 {
        mean_u + acc.weighted_deviation / acc.weight
    } else {
        mean_u
    };
    raw.clamp(1.0, 5.0)
}

/// Predictions for every item rated by at least one neighbor and not by `u`.
pub fn predict_all<S: SimilaritySource + ?Sized>(
    matrix: &RatingMatrix,
    u: UserId,
    neighbors: &NeighborSet,
    sims: &S,
) -> Result<BTreeMap<ItemId, f64>> {
    let u_idx = matrix.require_index(u)?;
    let own: BTreeSet<ItemId> = matrix.row_at(u_idx).iter().map(|&(i, _)| i).collect();
    let mut acc: HashMap<ItemId, Accumulator> = HashMap::new();
    for &v in &neighbors.members {
        let v_idx = matrix.require_index(v)?;
        let s = sims.similarity(u, v)?;
        let mean_v = matrix.mean_at(v_idx);
        for &(i, r) in matrix.row_at(v_idx) {
            if !own.contains(&i) {
                let a = acc.entry(i).or_default();
                a.weighted_deviation += s * (f64::from(r) - mean_v);
                a.weight += s.abs();
            }
        }
    }
    let mean_u = matrix.mean_at(u_idx);
    Ok(acc.into_iter().map(|(i, a)| (i, finish(mean_u, a))).collect())
}

/// The `m` best predictions, descending; ties by ascending item id.
pub fn top_m(predictions: &BTreeMap<ItemId, f64>, m: usize) -> Vec<(ItemId, f64)> {
    let mut ranked: Vec<(ItemId, f64)> = predictions.iter().map(|(&i, &p)| (i, p)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(m);
    ranked
}

/// Predicts and ranks from an already chosen neighbor set.
pub fn recommend_from_neighbors<S: SimilaritySource + ?Sized>(
    matrix: &RatingMatrix,
    sims: &S,
    u: UserId,
    neighbors: &NeighborSet,
    m: usize,
) -> Result<RecommendationList> {
    let predictions = predict_all(matrix, u, neighbors, sims)?;
    Ok(RecommendationList {
        target: u,
        items: top_m(&predictions, m),
    })
}

fn others(matrix: &RatingMatrix, u: UserId) -> impl Iterator<Item = UserId> + '_ {
    matrix.users().iter().copied().filter(move |&v| v != u)
}

/// Top-N users of `sim_vec` by |Sim|. Ties go to the user with more
/// co-rated items, then to the smaller user id.
pub fn top_neighbors<S: SimilaritySource + ?Sized>(
    sims: &S,
    sim_vec: &SimilarityVector,
    n: usize,
) -> Result<NeighborSet> {
    let mut ranked = sim_vec
        .entries
        .iter()
        .map(|(&v, &s)| Ok((v, s.abs(), sims.co_rated(sim_vec.target, v)?)))
        .collect::<Result<Vec<(UserId, f64, usize)>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(n).map(|(v, _, _)| v).collect())
}

pub fn run_cf(matrix: &RatingMatrix, u: UserId, n: usize, m: usize) -> Result<Recommendation> {
    run_cf_with(matrix, matrix, u, n, m)
}

/// Plain user-based CF: the `n` most strongly correlated users (or all of
/// them, when fewer exist) drive the prediction. Consumes no randomness.
pub fn run_cf_with<S: SimilaritySource + ?Sized>(
    matrix: &RatingMatrix,
    sims: &S,
    u: UserId,
    n: usize,
    m: usize,
) -> Result<Recommendation> {
    let sim_vec = similarity_vector_with(matrix, sims, u, others(matrix, u))?;
    let neighbors = top_neighbors(sims, &sim_vec, n)?;
    Ok(Recommendation {
        list: recommend_from_neighbors(matrix, sims, u, &neighbors, m)?,
        neighbors,
        privacy: PrivacyAccountant::new(),
        category: None,
    })
}

pub fn run_dpcf<R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    u: UserId,
    n: usize,
    m: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Recommendation> {
    run_dpcf_with(matrix, matrix, u, n, m, epsilon, rng)
}

/// Neighbors drawn one at a time without replacement over every other
/// user, each draw an exponential mechanism with quality `|Sim(u, v)|` and
/// budget `epsilon / n`.
pub fn dpcf_neighbors<R: Rng + ?Sized>(
    sim_vec: &SimilarityVector,
    n: usize,
    epsilon: f64,
    rng: &mut R,
    privacy: &mut PrivacyAccountant,
) -> Result<NeighborSet> {
    let per_draw = epsilon / n as f64;
    let wv = WeightVector::from_similarities(sim_vec, sim_vec.entries.keys().copied(), per_draw, SENSITIVITY)?;
    // Drawing from the remaining users is the single-draw mechanism over the
    // same weights with the chosen ones masked out.
    let mut log_weights = wv.log_weights().to_vec();
    let mut chosen = BTreeSet::new();
    for _ in 0..n.min(wv.len()) {
        let i = sample_one(&log_weights, rng);
        privacy.charge(per_draw);
        log_weights[i] = f64::NEG_INFINITY;
        chosen.insert(wv.candidates()[i]);
    }
    Ok(NeighborSet { members: chosen })
}

pub fn run_dpcf_with<S: SimilaritySource + ?Sized, R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    sims: &S,
    u: UserId,
    n: usize,
    m: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Recommendation> {
    if n == 0 {
        return Err(Error::InvalidParameter("N must be positive".into()));
    }
    let sim_vec = similarity_vector_with(matrix, sims, u, others(matrix, u))?;
    let mut privacy = PrivacyAccountant::new();
    let neighbors = dpcf_neighbors(&sim_vec, n, epsilon, rng, &mut privacy)?;
    Ok(Recommendation {
        list: recommend_from_neighbors(matrix, sims, u, &neighbors, m)?,
        neighbors,
        privacy,
        category: None,
    })
}

/// Step 3 of KDPCF: subsample the adjusted category and draw the whole
/// neighbor set with one exponential mechanism at the full budget. Draws
/// `min(n, |subsample|)` members when the category is too small.
pub fn kdpcf_neighbors<S: SimilaritySource + ?Sized, R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    sims: &S,
    u: UserId,
    category: &BTreeSet<UserId>,
    params: &KdpcfParams,
    rng: &mut R,
    privacy: &mut PrivacyAccountant,
) -> Result<NeighborSet> {
    let sampled = bernoulli_subsample(category, u, params.subsample_p, params.n, rng)?;
    let sim_vec = similarity_vector_with(matrix, sims, u, sampled.iter().copied())?;
    let wv = WeightVector::from_similarities(&sim_vec, sampled, params.epsilon, params.delta_q)?;
    let neighbors = sample_neighbor_set(&wv, params.n.min(wv.len()), rng)?;
    privacy.charge(params.epsilon);
    Ok(neighbors)
}

/// KDPCF end to end, including Step-1 clustering of the whole matrix.
pub fn run_kdpcf<R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    u: UserId,
    params: &KdpcfParams,
    rng: &mut R,
) -> Result<Recommendation> {
    params.validate()?;
    matrix.require_index(u)?;
    let k = params.k_for(matrix.n_users())?;
    let clustering = kmeans_with(matrix, matrix.users(), k, rng, None, params.max_iterations)?;
    run_kdpcf_with(matrix, matrix, &clustering, u, params, rng)
}

/// KDPCF from a precomputed Step-1 clustering.
pub fn run_kdpcf_with<S: SimilaritySource + ?Sized, R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    sims: &S,
    clustering: &Clustering,
    u: UserId,
    params: &KdpcfParams,
    rng: &mut R,
) -> Result<Recommendation> {
    params.validate()?;
    let category = adjust_target_category(matrix, clustering, u, &params.adjustment()?, rng)?;
    let mut privacy = PrivacyAccountant::new();
    let neighbors = kdpcf_neighbors(matrix, sims, u, &category.members, params, rng, &mut privacy)?;
    Ok(Recommendation {
        list: recommend_from_neighbors(matrix, sims, u, &neighbors, params.m)?,
        neighbors,
        privacy,
        category: Some(category),
    })
}
