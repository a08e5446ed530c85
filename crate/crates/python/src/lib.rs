//! Python bindings for `kdpcf-core`.

use kdpcf_core::data::{load_movielens, split as split_matrix};
use kdpcf_core::dp_sampler::{audit_dp, enumerate_distribution, sample_neighbor_set, SENSITIVITY};
use kdpcf_core::eval::{compute_metrics, run_experiment_with, ClusterCache, ExperimentData, Sweep};
use kdpcf_core::recommend::{run_cf, run_dpcf, run_kdpcf};
use kdpcf_core::{rng, similarity, Error, ExperimentConfig, KdpcfParams, RecommendationList, Scheme, UserId};
use pyo3::exceptions::{PyKeyError, PyOSError, PyValueError};
use pyo3::prelude::*;
use std::collections::BTreeMap;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::UnknownUser(_) | Error::UnknownItem(_) => PyKeyError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Sparse user-item rating matrix with ratings in 1..=5.
#[pyclass(name = "RatingMatrix", module = "kdpcf", frozen)]
struct PyRatingMatrix {
    inner: kdpcf_core::RatingMatrix,
}

#[pymethods]
impl PyRatingMatrix {
    /// Builds a matrix from `(user, item, rating)` triples; the last duplicate wins.
    #[new]
    fn new(triples: Vec<(UserId, u32, u8)>) -> PyResult<Self> {
        if let Some(&(u, i, r)) = triples.iter().find(|t| !(1..=5).contains(&t.2)) {
            return Err(PyValueError::new_err(format!(
                "rating {r} of ({u}, {i}) outside [1, 5]"
            )));
        }
        Ok(Self {
            inner: kdpcf_core::RatingMatrix::from_triples(triples),
        })
    }

    /// Reads a tab-separated `user item rating timestamp` file.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let records = load_movielens(path).map_err(py_err)?;
        Ok(Self {
            inner: kdpcf_core::RatingMatrix::from_records(&records),
        })
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    #[getter]
    fn n_ratings(&self) -> usize {
        self.inner.n_ratings()
    }

    fn users(&self) -> Vec<UserId> {
        self.inner.users().to_vec()
    }

    fn row(&self, u: UserId) -> PyResult<Vec<(u32, u8)>> {
        self.inner
            .row(u)
            .map(<[_]>::to_vec)
            .ok_or_else(|| py_err(Error::UnknownUser(u)))
    }

    fn rating(&self, u: UserId, i: u32) -> Option<u8> {
        self.inner.rating(u, i)
    }

    fn mean(&self, u: UserId) -> PyResult<f64> {
        similarity::mean_rating(&self.inner, u).map_err(py_err)
    }

    fn triples(&self) -> Vec<(UserId, u32, u8)> {
        self.inner.triples().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_ratings()
    }

    fn __repr__(&self) -> String {
        format!(
            "RatingMatrix(users={}, items={}, ratings={})",
            self.inner.n_users(),
            self.inner.n_items(),
            self.inner.n_ratings()
        )
    }
}

/// A recommendation list with the neighbors and budget behind it.
#[pyclass(name = "Recommendation", module = "kdpcf", frozen, get_all)]
struct PyRecommendation {
    target: UserId,
    items: Vec<(u32, f64)>,
    neighbors: Vec<UserId>,
    epsilon_spent: f64,
    invocations: usize,
    category: Option<Vec<UserId>>,
}

#[pymethods]
impl PyRecommendation {
    fn item_ids(&self) -> Vec<u32> {
        self.items.iter().map(|&(i, _)| i).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Recommendation(target={}, items={}, neighbors={}, epsilon_spent={})",
            self.target,
            self.items.len(),
            self.neighbors.len(),
            self.epsilon_spent
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn params(
    m: usize,
    n: usize,
    epsilon: f64,
    c_min: Option<usize>,
    c_max: Option<usize>,
    k: Option<usize>,
    subsample_p: f64,
) -> PyResult<KdpcfParams> {
    let p = KdpcfParams {
        m,
        n,
        epsilon,
        c_min,
        c_max,
        k,
        subsample_p,
        ..KdpcfParams::default()
    };
    p.validate().map_err(py_err)?;
    Ok(p)
}

fn weights(candidates: Vec<UserId>, scores: Vec<f64>, epsilon: f64) -> PyResult<kdpcf_core::WeightVector> {
    kdpcf_core::WeightVector::from_scores(candidates, scores, epsilon, SENSITIVITY).map_err(py_err)
}

/// Splits into `(train, test)` with `round(test_fraction * ratings)` test ratings.
#[pyfunction]
#[pyo3(signature = (matrix, test_fraction = 0.2, seed = 42))]
fn split(matrix: &PyRatingMatrix, test_fraction: f64, seed: u64) -> PyResult<(PyRatingMatrix, PyRatingMatrix)> {
    let s = split_matrix(&matrix.inner, test_fraction, seed).map_err(py_err)?;
    Ok((PyRatingMatrix { inner: s.train }, PyRatingMatrix { inner: s.test }))
}

/// Pearson correlation of two users over their co-rated items.
#[pyfunction]
fn pearson(matrix: &PyRatingMatrix, u: UserId, v: UserId) -> PyResult<f64> {
    similarity::pearson(&matrix.inner, u, v).map_err(py_err)
}

/// Recommends `m` items to `user` with the `cf`, `dpcf` or `kdpcf` scheme.
#[pyfunction]
#[pyo3(signature = (
    matrix, user, scheme = "kdpcf", *, m = 30, n = 30, epsilon = 1.0,
    c_min = None, c_max = None, k = None, subsample_p = 1.0, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn recommend(
    py: Python<'_>,
    matrix: &PyRatingMatrix,
    user: UserId,
    scheme: &str,
    m: usize,
    n: usize,
    epsilon: f64,
    c_min: Option<usize>,
    c_max: Option<usize>,
    k: Option<usize>,
    subsample_p: f64,
    seed: u64,
) -> PyResult<PyRecommendation> {
    let scheme: Scheme = scheme.parse().map_err(py_err)?;
    let p = params(m, n, epsilon, c_min, c_max, k, subsample_p)?;
    let matrix = &matrix.inner;
    let rec = py
        .detach(|| match scheme {
            Scheme::Cf => run_cf(matrix, user, p.n, p.m),
            Scheme::Dpcf => run_dpcf(matrix, user, p.n, p.m, p.epsilon, &mut rng::for_user(seed, user)),
            Scheme::Kdpcf => run_kdpcf(matrix, user, &p, &mut rng::seeded(seed)),
        })
        .map_err(py_err)?;
    Ok(PyRecommendation {
        target: rec.list.target,
        items: rec.list.items,
        neighbors: rec.neighbors.members.into_iter().collect(),
        epsilon_spent: rec.privacy.total_epsilon(),
        invocations: rec.privacy.invocations(),
        category: rec.category.map(|c| c.members.into_iter().collect()),
    })
}

/// Draws one `n`-subset of `candidates` with probability proportional to
/// `exp(epsilon * sum(scores) / 2)`.
#[pyfunction]
#[pyo3(signature = (candidates, scores, n, epsilon, seed = 0))]
fn sample(candidates: Vec<UserId>, scores: Vec<f64>, n: usize, epsilon: f64, seed: u64) -> PyResult<Vec<UserId>> {
    let wv = weights(candidates, scores, epsilon)?;
    let set = sample_neighbor_set(&wv, n, &mut rng::seeded(seed)).map_err(py_err)?;
    Ok(set.members.into_iter().collect())
}

/// The exact distribution over every `n`-subset as `(set, probability)` pairs.
#[pyfunction]
fn enumerate(candidates: Vec<UserId>, scores: Vec<f64>, n: usize, epsilon: f64) -> PyResult<Vec<(Vec<UserId>, f64)>> {
    let wv = weights(candidates, scores, epsilon)?;
    let dist = enumerate_distribution(&wv, n).map_err(py_err)?;
    Ok(dist
        .support
        .into_iter()
        .map(|(set, p, _)| (set.into_iter().collect(), p))
        .collect())
}

/// Largest absolute log-probability ratio between two score vectors over
/// the same candidates.
#[pyfunction]
fn audit(candidates: Vec<UserId>, scores_a: Vec<f64>, scores_b: Vec<f64>, n: usize, epsilon: f64) -> PyResult<f64> {
    let a = weights(candidates.clone(), scores_a, epsilon)?;
    let b = weights(candidates, scores_b, epsilon)?;
    audit_dp((&a, &b), n).map_err(py_err)
}

/// Micro-averaged recall and precision of `{user: [item, ...]}` against a test matrix.
#[pyfunction]
fn metrics(lists: BTreeMap<UserId, Vec<u32>>, test: &PyRatingMatrix) -> BTreeMap<&'static str, f64> {
    let lists: BTreeMap<UserId, RecommendationList> = lists
        .into_iter()
        .map(|(u, items)| {
            let list = RecommendationList {
                target: u,
                items: items.into_iter().map(|i| (i, 0.0)).collect(),
            };
            (u, list)
        })
        .collect();
    let m = compute_metrics(&lists, &test.inner);
    BTreeMap::from([
        ("recall", m.recall),
        ("precision", m.precision),
        ("users_evaluated", m.users_evaluated as f64),
        ("hits", m.hits as f64),
    ])
}

/// Runs `runs` repetitions on one train/test split and returns one dict per
/// scheme and swept value.
#[pyfunction]
#[pyo3(signature = (
    matrix, scheme = "all", *, runs = 10, base_seed = 0, sweep = None, test_fraction = 0.2,
    split_seed = 42, resplit = false, m = 30, n = 30, epsilon = 1.0, c_min = None, c_max = None,
    k = None, subsample_p = 1.0
))]
#[allow(clippy::too_many_arguments)]
fn experiment(
    py: Python<'_>,
    matrix: &PyRatingMatrix,
    scheme: &str,
    runs: usize,
    base_seed: u64,
    sweep: Option<&str>,
    test_fraction: f64,
    split_seed: u64,
    resplit: bool,
    m: usize,
    n: usize,
    epsilon: f64,
    c_min: Option<usize>,
    c_max: Option<usize>,
    k: Option<usize>,
    subsample_p: f64,
) -> PyResult<Vec<BTreeMap<&'static str, Py<PyAny>>>> {
    let schemes = if scheme.eq_ignore_ascii_case("all") {
        Scheme::ALL.to_vec()
    } else {
        vec![scheme.parse().map_err(py_err)?]
    };
    let sweep: Option<Sweep> = sweep.map(str::parse).transpose().map_err(py_err)?;
    let p = params(m, n, epsilon, c_min, c_max, k, subsample_p)?;
    let matrix = &matrix.inner;
    let rows = py
        .detach(|| {
            let data = ExperimentData::new(split_matrix(matrix, test_fraction, split_seed)?);
            let cache = ClusterCache::in_memory();
            let mut rows = Vec::new();
            for scheme in schemes {
                let config = ExperimentConfig {
                    scheme,
                    params: p.clone(),
                    runs,
                    base_seed,
                    sweep: sweep.clone(),
                    resplit,
                    test_fraction,
                };
                rows.extend(run_experiment_with(&config, &data, &cache)?);
            }
            Ok(rows)
        })
        .map_err(py_err)?;
    rows.into_iter()
        .map(|r| {
            Ok(BTreeMap::from([
                ("scheme", r.scheme.to_string().into_pyobject(py)?.into_any().unbind()),
                ("param", r.param.into_pyobject(py)?.into_any().unbind()),
                ("value", r.value.into_pyobject(py)?.into_any().unbind()),
                ("recall", r.recall.into_pyobject(py)?.into_any().unbind()),
                ("precision", r.precision.into_pyobject(py)?.into_any().unbind()),
                ("stddev_recall", r.stddev_recall.into_pyobject(py)?.into_any().unbind()),
                (
                    "stddev_precision",
                    r.stddev_precision.into_pyobject(py)?.into_any().unbind(),
                ),
                ("runs", r.runs.into_pyobject(py)?.into_any().unbind()),
            ]))
        })
        .collect()
}

#[pymodule]
fn kdpcf(module: &Bound<'_, PyModule>) -> PyResult<()> {
    module.add_class::<PyRatingMatrix>()?;
    module.add_class::<PyRecommendation>()?;
    module.add_function(wrap_pyfunction!(split, module)?)?;
    module.add_function(wrap_pyfunction!(pearson, module)?)?;
    module.add_function(wrap_pyfunction!(recommend, module)?)?;
    module.add_function(wrap_pyfunction!(sample, module)?)?;
    module.add_function(wrap_pyfunction!(enumerate, module)?)?;
    module.add_function(wrap_pyfunction!(audit, module)?)?;
    module.add_function(wrap_pyfunction!(metrics, module)?)?;
    module.add_function(wrap_pyfunction!(experiment, module)?)?;
    module.add("SENSITIVITY", SENSITIVITY)?;
    Ok(())
}
