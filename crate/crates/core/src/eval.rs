//! Recall/precision and the multi-run experiment harness.

use crate::clustering::{adjust_target_category, kmeans_with, Clustering};
use crate::data::{split, RatingMatrix, SplitDataset};
use crate::dp_sampler::PrivacyAccountant;
use crate::error::{Error, Result};
use crate::recommend::{
    dpcf_neighbors, kdpcf_neighbors, recommend_from_neighbors, top_neighbors, KdpcfParams, RecommendationList,
};
use crate::rng::{self, DefaultRng};
use crate::similarity::{similarity_vector_with, SimilarityTable};
use crate::{ItemId, UserId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

/// Micro-averaged recall and precision over a user population.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub users_evaluated: usize,
    pub hits: usize,
    pub test_total: usize,
    pub recommended_total: usize,
}

impl Metrics {
    /// No test ratings among the evaluated users; recall reported as 0.
    pub fn recall_undefined(&self) -> bool {
        self.test_total == 0
    }

    /// Every list was empty; precision reported as 0.
    pub fn precision_undefined(&self) -> bool {
        self.recommended_total == 0
    }
}

/// `sum |R_u & T_u| / sum |T_u|` and `sum |R_u & T_u| / sum |R_u|` over the
/// users that have both a list and at least one test rating.
pub fn compute_metrics(rec_lists: &BTreeMap<UserId, RecommendationList>, test: &RatingMatrix) -> Metrics {
    let mut m = Metrics::default();
    for (&u, list) in rec_lists {
        let Some(row) = test.row(u) else { continue };
        let relevant: BTreeSet<ItemId> = row.iter().map(|&(i, _)| i).collect();
        let recommended: BTreeSet<ItemId> = list.item_ids().collect();
        m.users_evaluated += 1;
        m.hits += recommended.intersection(&relevant).count();
        m.test_total += relevant.len();
        m.recommended_total += recommended.len();
    }
    if m.test_total > 0 {
        m.recall = m.hits as f64 / m.test_total as f64;
    }
    if m.recommended_total > 0 {
        m.precision = m.hits as f64 / m.recommended_total as f64;
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "CF")]
    Cf,
    #[serde(rename = "DPCF")]
    Dpcf,
    #[serde(rename = "KDPCF")]
    Kdpcf,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Cf, Scheme::Dpcf, Scheme::Kdpcf];

    pub fn is_randomized(self) -> bool {
        self != Scheme::Cf
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Cf => "CF",
            Scheme::Dpcf => "DPCF",
            Scheme::Kdpcf => "KDPCF",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cf" => Ok(Scheme::Cf),
            "dpcf" => Ok(Scheme::Dpcf),
            "kdpcf" => Ok(Scheme::Kdpcf),
            other => Err(Error::InvalidParameter(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "m")]
    M,
    #[serde(rename = "N")]
    N,
    #[serde(rename = "epsilon")]
    Epsilon,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::M => "m",
            SweepParam::N => "N",
            SweepParam::Epsilon => "epsilon",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(SweepParam::M),
            "N" | "n" => Ok(SweepParam::N),
            "epsilon" | "eps" => Ok(SweepParam::Epsilon),
            other => Err(Error::InvalidParameter(format!("cannot sweep {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = Error;

    /// `name=v1,v2,...`, e.g. `epsilon=0.2,0.6,1.0`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, list) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidParameter(format!("sweep {s:?} is not name=v1,v2,...")))?;
        let param: SweepParam = name.trim().parse()?;
        let values = list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidParameter(format!("bad sweep value {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::InvalidParameter("empty sweep".into()));
        }
        Ok(Sweep { param, values })
    }
}

impl Sweep {
    fn apply(&self, base: &KdpcfParams, value: f64) -> Result<KdpcfParams> {
        let mut p = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidParameter(format!(
                    "{} must be a positive integer, got {value}",
                    self.param
                )))
            }
        };
        match self.param {
            SweepParam::M => p.m = count()?,
            SweepParam::N => p.n = count()?,
            SweepParam::Epsilon => p.epsilon = value,
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub params: KdpcfParams,
    pub runs: usize,
    pub base_seed: u64,
    pub sweep: Option<Sweep>,
    /// Draw a fresh train/test split for every run instead of reusing one.
    pub resplit: bool,
    pub test_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Kdpcf,
            params: KdpcfParams::default(),
            runs: 100,
            base_seed: 0,
            sweep: None,
            resplit: false,
            test_fraction: 0.2,
        }
    }
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub scheme: Scheme,
    /// Swept parameter, or `default` without a sweep.
    pub param: String,
    pub value: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    pub stddev_recall: f64,
    pub stddev_precision: f64,
    pub runs: usize,
    /// Metrics of each run, in run order.
    pub per_run: Vec<Metrics>,
}

impl ExperimentRow {
    /// Standard error of the mean recall.
    pub fn se_recall(&self) -> f64 {
        self.stddev_recall / (self.runs as f64).sqrt()
    }

    pub fn se_precision(&self) -> f64 {
        self.stddev_precision / (self.runs as f64).sqrt()
    }
}

pub const CSV_HEADER: &str = "scheme,param,value,recall,precision,stddev_recall,stddev_precision,runs";

pub fn write_csv<W: Write>(rows: &[ExperimentRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        let value = r.value.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scheme, r.param, value, r.recall, r.precision, r.stddev_recall, r.stddev_precision, r.runs
        )?;
    }
    out.flush()
}

pub fn write_json<W: Write>(rows: &[ExperimentRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Seed, k, users, ratings, iteration cap.
type CacheKey = (u64, usize, usize, usize, usize);

/// Step-1 clusterings keyed by `(seed, k)` and, when a directory is given,
/// persisted as `user<TAB>category` files so later invocations reuse them.
#[derive(Debug, Default)]
pub struct ClusterCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<CacheKey, Arc<Clustering>>>,
}

impl ClusterCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            memory: Mutex::default(),
        })
    }

    pub fn get_or_compute(
        &self,
        matrix: &RatingMatrix,
        k: usize,
        seed: u64,
        max_iterations: usize,
    ) -> Result<Arc<Clustering>> {
        let key = (seed, k, matrix.n_users(), matrix.n_ratings(), max_iterations);
        if let Some(c) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(c));
        }
        let file = self.dir.as_ref().map(|d| {
            d.join(format!(
                "clusters-s{seed}-k{k}-u{}-r{}-i{max_iterations}.tsv",
                matrix.n_users(),
                matrix.n_ratings()
            ))
        });
        let clustering = match file.as_ref().filter(|f| f.exists()) {
            Some(f) => Clustering::from_tsv(matrix, &std::fs::read_to_string(f)?)?,
            None => {
                let c = kmeans_with(matrix, matrix.users(), k, &mut rng::seeded(seed), None, max_iterations)?;
                if let Some(f) = &file {
                    std::fs::write(f, c.to_tsv())?;
                }
                c
            }
        };
        let clustering = Arc::new(clustering);
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key, Arc::clone(&clustering));
        Ok(clustering)
    }
}

/// A split with its similarity table, ready for repeated experiments.
pub struct ExperimentData {
    pub split: SplitDataset,
    pub table: SimilarityTable,
}

impl ExperimentData {
    pub fn new(split: SplitDataset) -> Self {
        let table = SimilarityTable::build(&split.train);
        Self { split, table }
    }

    /// Users evaluated: those with at least one test rating and a training
    /// profile.
    pub fn test_users(&self) -> Vec<UserId> {
        self.split
            .test
            .users()
            .iter()
            .copied()
            .filter(|&u| self.split.train.contains_user(u))
            .collect()
    }
}

/// Per-user state after the parts of a recommender that do not depend on
/// `m` or `epsilon`: the candidate pool and the generator positioned just
/// past any randomness already consumed.
struct Prepared {
    user: UserId,
    pool: BTreeSet<UserId>,
    rng: DefaultRng,
}

fn prepare(
    scheme: Scheme,
    data: &ExperimentData,
    params: &KdpcfParams,
    seed: u64,
    cache: &ClusterCache,
) -> Result<Vec<Prepared>> {
    let train = &data.split.train;
    let users = data.test_users();
    match scheme {
        Scheme::Cf | Scheme::Dpcf => Ok(users
            .into_iter()
            .map(|u| Prepared {
                user: u,
                pool: BTreeSet::new(),
                rng: rng::for_user(seed, u),
            })
            .collect()),
        Scheme::Kdpcf => {
            let k = params.k_for(train.n_users())?;
            let clustering = cache.get_or_compute(train, k, seed, params.max_iterations)?;
            let config = params.adjustment()?;
            users
                .into_par_iter()
                .map(|u| {
                    let mut rng = rng::for_user(seed, u);
                    let category = adjust_target_category(train, &clustering, u, &config, &mut rng)?;
                    Ok(Prepared {
                        user: u,
                        pool: category.members,
                        rng,
                    })
                })
                .collect()
        }
    }
}

fn recommend_prepared(
    scheme: Scheme,
    data: &ExperimentData,
    prepared: &Prepared,
    params: &KdpcfParams,
) -> Result<RecommendationList> {
    let train = &data.split.train;
    let u = prepared.user;
    let mut rng = prepared.rng.clone();
    let mut privacy = PrivacyAccountant::new();
    let neighbors = match scheme {
        Scheme::Cf => {
            let sims = similarity_vector_with(train, &data.table, u, train.users().iter().copied())?;
            top_neighbors(&data.table, &sims, params.n)?
        }
        Scheme::Dpcf => {
            let sims = similarity_vector_with(train, &data.table, u, train.users().iter().copied())?;
            dpcf_neighbors(&sims, params.n, params.epsilon, &mut rng, &mut privacy)?
        }
        Scheme::Kdpcf => kdpcf_neighbors(train, &data.table, u, &prepared.pool, params, &mut rng, &mut privacy)?,
    };
    recommend_from_neighbors(train, &data.table, u, &neighbors, params.m)
}

/// Runs one scheme over every test user for `runs` seeds (`base_seed ^ r`)
/// and each sweep value, averaging recall and precision across runs. CF is
/// deterministic and always runs once.
///
/// Work that a sweep value cannot change is shared: lists are built once at
/// the largest `m` and truncated, and KDPCF's clustering and category
/// adjustment are reused across `m` and `epsilon`. Results are identical to
/// running every value separately.
pub fn run_experiment(config: &ExperimentConfig, data: &SplitDataset) -> Result<Vec<ExperimentRow>> {
    let prepared = ExperimentData::new(data.clone());
    run_experiment_with(config, &prepared, &ClusterCache::in_memory())
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    data: &ExperimentData,
    cache: &ClusterCache,
) -> Result<Vec<ExperimentRow>> {
    if config.runs == 0 {
        return Err(Error::InvalidParameter("runs must be at least 1".into()));
    }
    config.params.validate()?;
    let runs = if config.scheme.is_randomized() { config.runs } else { 1 };

    let (param_name, values): (String, Vec<Option<f64>>) = match &config.sweep {
        Some(s) => (s.param.to_string(), s.values.iter().copied().map(Some).collect()),
        None => ("default".into(), vec![None]),
    };
    let settings = values
        .iter()
        .map(|v| match (v, &config.sweep) {
            (Some(v), Some(s)) => s.apply(&config.params, *v),
            _ => Ok(config.params.clone()),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_value: Vec<Vec<Metrics>> = vec![Vec::with_capacity(runs); settings.len()];
    let resplit_source = config
        .resplit
        .then(|| RatingMatrix::from_triples(data.split.train.triples().chain(data.split.test.triples())));

    for r in 0..runs {
        let seed = rng::run_seed(config.base_seed, r as u64);
        let owned;
        let run_data = match &resplit_source {
            Some(source) => {
                owned = ExperimentData::new(split(source, config.test_fraction, seed)?);
                &owned
            }
            None => data,
        };

        // Settings that differ only in m share one set of lists; settings
        // that differ in N need their own preparation.
        let mut by_n: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (idx, p) in settings.iter().enumerate() {
            by_n.entry(p.n).or_default().push(idx);
        }
        for (_, idxs) in by_n {
            let base = &settings[idxs[0]];
            let prepared = prepare(config.scheme, run_data, base, seed, cache)?;
            let mut by_eps: Vec<(f64, Vec<usize>)> = Vec::new();
            for &idx in &idxs {
                let eps = settings[idx].epsilon;
                match by_eps.iter_mut().find(|(e, _)| e.to_bits() == eps.to_bits()) {
                    Some((_, v)) => v.push(idx),
                    None => by_eps.push((eps, vec![idx])),
                }
            }
            for (_, group) in by_eps {
                let widest = group.iter().map(|&i| settings[i].m).max().expect("non-empty group");
                let params = KdpcfParams {
                    m: widest,
                    ..settings[group[0]].clone()
                };
                let lists: Vec<RecommendationList> = prepared
                    .par_iter()
                    .map(|p| recommend_prepared(config.scheme, run_data, p, &params))
                    .collect::<Result<_>>()?;
                for &idx in &group {
                    let m = settings[idx].m;
                    let truncated: BTreeMap<UserId, RecommendationList> =
                        lists.iter().map(|l| (l.target, l.truncated(m))).collect();
                    per_value[idx].push(compute_metrics(&truncated, &run_data.split.test));
                }
            }
        }
    }

    Ok(values
        .into_iter()
        .zip(per_value)
        .map(|(value, metrics)| {
            let (recall, stddev_recall) = mean_std(metrics.iter().map(|m| m.recall));
            let (precision, stddev_precision) = mean_std(metrics.iter().map(|m| m.precision));
            ExperimentRow {
                scheme: config.scheme,
                param: param_name.clone(),
                value,
                recall,
                precision,
                stddev_recall,
                stddev_precision,
                runs,
                per_run: metrics,
            }
        })
        .collect())
}
