//! k-means over sparse user rows and target-category adjustment.
//!
//! The distance between a user and a centroid is `1 - Pearson`, where the
//! centroid's sparse mean-rating row plays the other user and its own mean
//! is the mean of its stored values. Centroid entries are per-item means over
//! the assigned users who rated the item. Because the mean does not minimize
//! a correlation distance, Lloyd keeps a recomputed centroid after the first
//! update only when it does not raise its category's summed distance, which
//! makes the objective non-increasing.

use crate::data::RatingMatrix;
use crate::error::{Error, Result};
use crate::similarity::centered_correlation;
use crate::{ItemId, UserId};
use rand::Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

pub const DEFAULT_MAX_ITERATIONS: usize = 50;
pub const DEFAULT_MAX_ROUNDS: usize = 20;

/// Sparse mean-rating row of a cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroid {
    ratings: Vec<(ItemId, f64)>,
    mean: f64,
}

impl Centroid {
    /// Builds a centroid from `(item, mean rating)` pairs; items must be
    /// distinct.
    pub fn new(mut ratings: Vec<(ItemId, f64)>) -> Self {
        ratings.sort_by_key(|&(i, _)| i);
        let mean = if ratings.is_empty() {
            0.0
        } else {
            ratings.iter().map(|&(_, r)| r).sum::<f64>() / ratings.len() as f64
        };
        Self { ratings, mean }
    }

    pub fn from_user(matrix: &RatingMatrix, u: UserId) -> Result<Self> {
        let row = matrix.row(u).ok_or(Error::UnknownUser(u))?;
        Ok(Self::new(row.iter().map(|&(i, r)| (i, f64::from(r))).collect()))
    }

    /// Per-item mean over the given users who rated each item.
    pub fn mean_of(matrix: &RatingMatrix, users: &[UserId]) -> Result<Self> {
        let members = users
            .iter()
            .map(|&u| matrix.require_index(u))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseCentroid::mean_of(matrix, &members).to_sparse(matrix))
    }

    pub fn ratings(&self) -> &[(ItemId, f64)] {
        &self.ratings
    }

    pub fn support(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.ratings.iter().map(|&(i, _)| i)
    }

    pub fn get(&self, item: ItemId) -> Option<f64> {
        self.ratings
            .binary_search_by_key(&item, |&(i, _)| i)
            .ok()
            .map(|pos| self.ratings[pos].1)
    }

    /// Mean of the stored values.
    pub fn mean(&self) -> f64 {
        self.mean
    }
}

/// `1 - Pearson(u, c)`, in `[0, 2]`. No overlap gives 1.
pub fn user_centroid_distance(matrix: &RatingMatrix, u: UserId, c: &Centroid) -> Result<f64> {
    let idx = matrix.require_index(u)?;
    Ok(1.0 - centered_correlation(matrix.row_at(idx), matrix.mean_at(idx), &c.ratings, c.mean))
}

/// `1 - Pearson` between two centroid rows.
pub fn centroid_distance(a: &Centroid, b: &Centroid) -> f64 {
    1.0 - centered_correlation(&a.ratings, a.mean, &b.ratings, b.mean)
}

/// Centroid over dense item positions; `NaN` marks an item outside the
/// support.
#[derive(Clone, Debug)]
struct DenseCentroid {
    values: Vec<f64>,
    mean: f64,
}

impl DenseCentroid {
    fn from_row(matrix: &RatingMatrix, idx: usize) -> Self {
        let mut values = vec![f64::NAN; matrix.n_items()];
        for (&pos, &(_, r)) in matrix.positions_at(idx).iter().zip(matrix.row_at(idx)) {
            values[pos as usize] = f64::from(r);
        }
        Self {
            values,
            mean: matrix.mean_at(idx),
        }
    }

    fn from_sparse(matrix: &RatingMatrix, c: &Centroid) -> Self {
        let mut values = vec![f64::NAN; matrix.n_items()];
        for &(item, r) in &c.ratings {
            if let Some(pos) = matrix.item_position(item) {
                values[pos] = r;
            }
        }
        Self { values, mean: c.mean }
    }

    fn mean_of(matrix: &RatingMatrix, members: &[usize]) -> Self {
        let n_items = matrix.n_items();
        let mut sums = vec![0.0; n_items];
        let mut counts = vec![0u32; n_items];
        for &idx in members {
            for (&pos, &(_, r)) in matrix.positions_at(idx).iter().zip(matrix.row_at(idx)) {
                sums[pos as usize] += f64::from(r);
                counts[pos as usize] += 1;
            }
        }
        let (mut total, mut stored) = (0.0, 0usize);
        let values = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| {
                if c == 0 {
                    f64::NAN
                } else {
                    let v = s / f64::from(c);
                    total += v;
                    stored += 1;
                    v
                }
            })
            .collect();
        Self {
            values,
            mean: if stored == 0 { 0.0 } else { total / stored as f64 },
        }
    }

    fn to_sparse(&self, matrix: &RatingMatrix) -> Centroid {
        let ratings = self
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan())
            .map(|(pos, &v)| (matrix.items()[pos], v))
            .collect();
        Centroid {
            ratings,
            mean: self.mean,
        }
    }

    fn distance_to_user(&self, matrix: &RatingMatrix, idx: usize) -> f64 {
        let mean_u = matrix.mean_at(idx);
        let (mut cross, mut sq_u, mut sq_c) = (0.0, 0.0, 0.0);
        for (&pos, &(_, r)) in matrix.positions_at(idx).iter().zip(matrix.row_at(idx)) {
            let c = self.values[pos as usize];
            if c.is_nan() {
                continue;
            }
            let du = f64::from(r) - mean_u;
            let dc = c - self.mean;
            cross += du * dc;
            sq_u += du * du;
            sq_c += dc * dc;
        }
        1.0 - correlation_from_sums(cross, sq_u, sq_c)
    }

    fn distance_to(&self, other: &DenseCentroid) -> f64 {
        let (mut cross, mut sq_a, mut sq_b) = (0.0, 0.0, 0.0);
        for (&a, &b) in self.values.iter().zip(&other.values) {
            if a.is_nan() || b.is_nan() {
                continue;
            }
            let da = a - self.mean;
            let db = b - other.mean;
            cross += da * db;
            sq_a += da * da;
            sq_b += db * db;
        }
        1.0 - correlation_from_sums(cross, sq_a, sq_b)
    }
}

// Same degenerate rules as `centered_correlation`.
fn correlation_from_sums(cross: f64, sq_a: f64, sq_b: f64) -> f64 {
    if sq_a <= 1e-12 || sq_b <= 1e-12 {
        0.0
    } else {
        (cross / (sq_a * sq_b).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Result of k-means: centroids plus the category of every user.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Centroid>,
    pub assignment: BTreeMap<UserId, usize>,
    pub k: usize,
    /// Lloyd iterations performed.
    pub iterations: usize,
    /// Sum of user-to-own-centroid distances after each iteration.
    pub objective_trace: Vec<f64>,
}

impl Clustering {
    pub fn category_of(&self, u: UserId) -> Option<usize> {
        self.assignment.get(&u).copied()
    }

    /// Users of category `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<UserId> {
        self.assignment
            .iter()
            .filter(|&(_, &cat)| cat == c)
            .map(|(&u, _)| u)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignment.values() {
            sizes[c] += 1;
        }
        sizes
    }

    /// Line-oriented form: `user_id<TAB>category_index` per user.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (u, c) in &self.assignment {
            let _ = writeln!(out, "{u}\t{c}");
        }
        out
    }

    /// Rebuilds a clustering from [`Self::to_tsv`] output; centroids are
    /// recomputed from the assignment.
    pub fn from_tsv(matrix: &RatingMatrix, text: &str) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let parsed = match (fields.next(), fields.next(), fields.next()) {
                (Some(u), Some(c), None) => u.parse::<UserId>().ok().zip(c.parse::<usize>().ok()),
                _ => None,
            };
            let (u, c) = parsed.ok_or_else(|| Error::ClusterCache(format!("line {}: {line:?}", n + 1)))?;
            if !matrix.contains_user(u) {
                return Err(Error::ClusterCache(format!("unknown user {u}")));
            }
            assignment.insert(u, c);
        }
        let k = assignment.values().max().map_or(0, |&c| c + 1);
        if assignment.len() != matrix.n_users() {
            return Err(Error::ClusterCache(format!(
                "{} users assigned, matrix has {}",
                assignment.len(),
                matrix.n_users()
            )));
        }
        let mut members = vec![Vec::new(); k];
        for (&u, &c) in &assignment {
            members[c].push(matrix.require_index(u)?);
        }
        if members.iter().any(Vec::is_empty) {
            return Err(Error::ClusterCache("empty category".into()));
        }
        let centroids = members
            .iter()
            .map(|m| DenseCentroid::mean_of(matrix, m).to_sparse(matrix))
            .collect();
        Ok(Self {
            centroids,
            assignment,
            k,
            iterations: 0,
            objective_trace: Vec::new(),
        })
    }
}

/// k-means++ seeding over `users`. Returns `k` distinct user rows as
/// centroids, the first being `forced_first` when given.
pub fn kmeanspp_init<R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    users: &[UserId],
    k: usize,
    rng: &mut R,
    forced_first: Option<UserId>,
) -> Result<Vec<Centroid>> {
    let members = resolve_members(matrix, users)?;
    let forced = forced_position(matrix, &members, forced_first)?;
    check_k(k, members.len())?;
    let seeds = seed_positions(matrix, &members, k, rng, forced);
    Ok(seeds
        .into_iter()
        .map(|p| DenseCentroid::from_row(matrix, members[p]).to_sparse(matrix))
        .collect())
}

/// Lloyd's k-means over `users` with k-means++ seeding.
pub fn kmeans<R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    users: &[UserId],
    k: usize,
    rng: &mut R,
    forced_first: Option<UserId>,
) -> Result<Clustering> {
    kmeans_with(matrix, users, k, rng, forced_first, DEFAULT_MAX_ITERATIONS)
}

pub fn kmeans_with<R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    users: &[UserId],
    k: usize,
    rng: &mut R,
    forced_first: Option<UserId>,
    max_iterations: usize,
) -> Result<Clustering> {
    let members = resolve_members(matrix, users)?;
    let forced = forced_position(matrix, &members, forced_first)?;
    check_k(k, members.len())?;
    let fit = lloyd(matrix, &members, k, rng, forced, max_iterations);
    let assignment = members
        .iter()
        .zip(&fit.assignment)
        .map(|(&idx, &c)| (matrix.user_at(idx), c))
        .collect();
    Ok(Clustering {
        centroids: fit.centroids.iter().map(|c| c.to_sparse(matrix)).collect(),
        assignment,
        k,
        iterations: fit.iterations,
        objective_trace: fit.objective_trace,
    })
}

fn resolve_members(matrix: &RatingMatrix, users: &[UserId]) -> Result<Vec<usize>> {
    let mut members = users
        .iter()
        .map(|&u| matrix.require_index(u))
        .collect::<Result<Vec<_>>>()?;
    members.sort_unstable();
    members.dedup();
    Ok(members)
}

fn forced_position(matrix: &RatingMatrix, members: &[usize], forced: Option<UserId>) -> Result<Option<usize>> {
    forced
        .map(|u| {
            let idx = matrix.require_index(u)?;
            members
                .binary_search(&idx)
                .map_err(|_| Error::InvalidParameter(format!("forced seed {u} is not among the clustered users")))
        })
        .transpose()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        Err(Error::TooManyClusters { k, users: n })
    } else {
        Ok(())
    }
}

/// k-means++ over member positions; returns positions into `members`.
fn seed_positions<R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    members: &[usize],
    k: usize,
    rng: &mut R,
    forced: Option<usize>,
) -> Vec<usize> {
    let n = members.len();
    let first = forced.unwrap_or_else(|| rng.random_range(0..n));
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let center = DenseCentroid::from_row(matrix, members[first]);
    let mut nearest: Vec<f64> = members
        .iter()
        .map(|&idx| center.distance_to_user(matrix, idx))
        .collect();

    while chosen.len() < k {
        let total: f64 = (0..n).filter(|&p| !taken[p]).map(|p| nearest[p] * nearest[p]).sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for p in (0..n).filter(|&p| !taken[p]) {
                let w = nearest[p] * nearest[p];
                if w == 0.0 {
                    continue;
                }
                pick = Some(p);
                acc += w;
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining user coincides with a center
            let free: Vec<usize> = (0..n).filter(|&p| !taken[p]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[next] = true;
        chosen.push(next);
        let center = DenseCentroid::from_row(matrix, members[next]);
        for (p, &idx) in members.iter().enumerate() {
            let d = center.distance_to_user(matrix, idx);
            if d < nearest[p] {
                nearest[p] = d;
            }
        }
    }
    chosen
}

struct LloydFit {
    assignment: Vec<usize>,
    centroids: Vec<DenseCentroid>,
    iterations: usize,
    objective_trace: Vec<f64>,
}

fn nearest_centroid(matrix: &RatingMatrix, idx: usize, centroids: &[DenseCentroid]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = centroid.distance_to_user(matrix, idx);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd<R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    members: &[usize],
    k: usize,
    rng: &mut R,
    forced: Option<usize>,
    max_iterations: usize,
) -> LloydFit {
    let mut centroids: Vec<DenseCentroid> = seed_positions(matrix, members, k, rng, forced)
        .into_iter()
        .map(|p| DenseCentroid::from_row(matrix, members[p]))
        .collect();
    let mut assignment = vec![usize::MAX; members.len()];
    let mut objective_trace = Vec::new();
    let mut iterations = 0;

    while iterations < max_iterations {
        iterations += 1;
        let nearest: Vec<(usize, f64)> = members
            .par_iter()
            .map(|&idx| nearest_centroid(matrix, idx, &centroids))
            .collect();
        let mut next: Vec<usize> = nearest.iter().map(|&(c, _)| c).collect();
        let mut dist: Vec<f64> = nearest.iter().map(|&(_, d)| d).collect();

        let mut sizes = vec![0usize; k];
        for &c in &next {
            sizes[c] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            // farthest user among categories that can spare one
            let donor = (0..members.len())
                .filter(|&p| sizes[next[p]] > 1)
                .fold(None, |best: Option<usize>, p| match best {
                    Some(b) if dist[b] >= dist[p] => Some(b),
                    _ => Some(p),
                })
                .expect("k <= |users| leaves a category with two members");
            sizes[next[donor]] -= 1;
            sizes[empty] = 1;
            next[donor] = empty;
            centroids[empty] = DenseCentroid::from_row(matrix, members[donor]);
            dist[donor] = centroids[empty].distance_to_user(matrix, members[donor]);
        }

        let changed = next != assignment;
        assignment = next;

        let mut groups = vec![Vec::new(); k];
        for (p, &c) in assignment.iter().enumerate() {
            groups[c].push(members[p]);
        }
        // The member mean need not minimize a correlation distance, so after
        // the first update (which replaces the seeds) it replaces the old
        // centroid only when the category's cost does not rise.
        let first = iterations == 1;
        centroids = groups
            .par_iter()
            .zip(centroids.par_iter())
            .map(|(g, old)| {
                let fresh = DenseCentroid::mean_of(matrix, g);
                let cost = |c: &DenseCentroid| g.iter().map(|&idx| c.distance_to_user(matrix, idx)).sum::<f64>();
                if first || cost(&fresh) <= cost(old) {
                    fresh
                } else {
                    old.clone()
                }
            })
            .collect();

        let per_user: Vec<f64> = members
            .par_iter()
            .zip(assignment.par_iter())
            .map(|(&idx, &c)| centroids[c].distance_to_user(matrix, idx))
            .collect();
        objective_trace.push(per_user.iter().sum());

        if !changed {
            break;
        }
    }

    LloydFit {
        assignment,
        centroids,
        iterations,
        objective_trace,
    }
}

/// Size thresholds for the target category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CategoryBounds {
    pub c_min: usize,
    pub c_max: usize,
}

impl CategoryBounds {
    /// Requires `neighbor_size < c_min < c_max`.
    pub fn new(c_min: usize, c_max: usize, neighbor_size: usize) -> Result<Self> {
        if c_min <= neighbor_size {
            return Err(Error::InvalidParameter(format!(
                "c_min ({c_min}) must exceed the neighbor set size ({neighbor_size})"
            )));
        }
        if c_min >= c_max {
            return Err(Error::InvalidParameter(format!(
                "c_min ({c_min}) must be below c_max ({c_max})"
            )));
        }
        Ok(Self { c_min, c_max })
    }

    /// `[5N, 10N]`.
    pub fn for_neighbor_size(n: usize) -> Self {
        Self {
            c_min: 5 * n,
            c_max: 10 * n,
        }
    }

    pub fn contains(&self, size: usize) -> bool {
        (self.c_min..=self.c_max).contains(&size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdjustmentConfig {
    pub bounds: CategoryBounds,
    pub neighbor_size: usize,
    pub max_rounds: usize,
    pub max_iterations: usize,
}

impl AdjustmentConfig {
    pub fn new(bounds: CategoryBounds, neighbor_size: usize) -> Self {
        Self {
            bounds,
            neighbor_size,
            max_rounds: DEFAULT_MAX_ROUNDS,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjustmentOutcome {
    /// Size landed in `[c_min, c_max]`.
    InRange,
    /// Rounds ran out; the current category already exceeds N.
    KeptCurrent,
    /// Rounds ran out with a category of at most N users; every user is
    /// returned instead.
    WholePopulation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjustedCategory {
    pub members: BTreeSet<UserId>,
    pub rounds: usize,
    pub outcome: AdjustmentOutcome,
}

struct WorkingCategory {
    members: Vec<usize>,
    centroid: DenseCentroid,
}

/// Resizes the target's category: bisect it (target as a forced seed, keep
/// the target's half) while it exceeds `c_max`, merge it with the category
/// whose centroid is nearest while it is below `c_min`.
pub fn adjust_target_category<R: Rng + ?Sized>(
    matrix: &RatingMatrix,
    clustering: &Clustering,
    target: UserId,
    config: &AdjustmentConfig,
    rng: &mut R,
) -> Result<AdjustedCategory> {
    let target_cat = clustering.category_of(target).ok_or(Error::UnknownUser(target))?;
    let target_idx = matrix.require_index(target)?;

    let mut groups = vec![Vec::new(); clustering.k];
    for (&u, &c) in &clustering.assignment {
        groups[c].push(matrix.require_index(u)?);
    }
    let mut cats: Vec<WorkingCategory> = groups
        .into_iter()
        .zip(&clustering.centroids)
        .map(|(mut members, c)| {
            members.sort_unstable();
            WorkingCategory {
                members,
                centroid: DenseCentroid::from_sparse(matrix, c),
            }
        })
        .collect();
    let mut t = target_cat;
    let bounds = config.bounds;

    let mut rounds = 0;
    while rounds < config.max_rounds && !bounds.contains(cats[t].members.len()) {
        rounds += 1;
        if cats[t].members.len() > bounds.c_max {
            let members = std::mem::take(&mut cats[t].members);
            let forced = members.binary_search(&target_idx).ok();
            let fit = lloyd(matrix, &members, 2, rng, forced, config.max_iterations);
            let own = fit.assignment[forced.expect("target is in its category")];
            let mut halves = [Vec::new(), Vec::new()];
            for (&idx, &c) in members.iter().zip(&fit.assignment) {
                halves[c].push(idx);
            }
            let [a, b] = halves;
            let (kept, other) = if own == 0 { (a, b) } else { (b, a) };
            let mut centroids = fit.centroids.into_iter();
            let (ca, cb) = (centroids.next().unwrap(), centroids.next().unwrap());
            let (kept_c, other_c) = if own == 0 { (ca, cb) } else { (cb, ca) };
            cats[t] = WorkingCategory {
                members: kept,
                centroid: kept_c,
            };
            cats.push(WorkingCategory {
                members: other,
                centroid: other_c,
            });
        } else {
            let nearest = cats
                .iter()
                .enumerate()
                .filter(|&(j, c)| j != t && !c.members.is_empty())
                .map(|(j, c)| (j, cats[t].centroid.distance_to(&c.centroid)))
                .fold(None, |best: Option<(usize, f64)>, (j, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((j, d)),
                });
            let Some((j, _)) = nearest else { break };
            let absorbed = cats.remove(j);
            if j < t {
                t -= 1;
            }
            let mut members = std::mem::take(&mut cats[t].members);
            members.extend(absorbed.members);
            members.sort_unstable();
            cats[t].centroid = DenseCentroid::mean_of(matrix, &members);
            cats[t].members = members;
        }
    }

    let size = cats[t].members.len();
    let (members, outcome): (BTreeSet<UserId>, _) = if bounds.contains(size) {
        (to_ids(matrix, &cats[t].members), AdjustmentOutcome::InRange)
    } else if size > config.neighbor_size {
        (to_ids(matrix, &cats[t].members), AdjustmentOutcome::KeptCurrent)
    } else {
        (
            clustering.assignment.keys().copied().collect(),
            AdjustmentOutcome::WholePopulation,
        )
    };
    Ok(AdjustedCategory {
        members,
        rounds,
        outcome,
    })
}

fn to_ids(matrix: &RatingMatrix, members: &[usize]) -> BTreeSet<UserId> {
    members.iter().map(|&idx| matrix.user_at(idx)).collect()
}

/// Default cluster count `ceil(2|U| / (c_min + c_max))`, at least 1.
pub fn default_k(n_users: usize, bounds: CategoryBounds) -> usize {
    (2 * n_users).div_ceil(bounds.c_min + bounds.c_max).max(1)
}
