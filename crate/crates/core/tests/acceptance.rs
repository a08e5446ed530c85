//! Acceptance suite. Runs as a plain binary (`harness = false`) so every
//! criterion prints one PASS/FAIL line whether or not it holds.
//!
//! Criteria 6-8 need MovieLens 100K (`u.data`, see `common::movielens_path`).
//! Without it they print SKIP, unless `KDPCF_REQUIRE_DATA=1` turns that into
//! a failure.

mod common;

use kdpcf_core::clustering::{adjust_target_category, kmeans, AdjustmentOutcome};
use kdpcf_core::data::split;
use kdpcf_core::dp_sampler::{audit_dp, enumerate_distribution, sample_neighbor_set};
use kdpcf_core::eval::{run_experiment_with, ClusterCache, ExperimentData, Sweep, SweepParam};
use kdpcf_core::recommend::{run_dpcf, run_kdpcf};
use kdpcf_core::similarity::similarity_vector;
use kdpcf_core::{rng, ExperimentConfig, ExperimentRow, KdpcfParams, RatingMatrix, Scheme, UserId, WeightVector};
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

/// Random |Sim| values.
fn random_scores(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(0.0..=1.0)).collect()
}

fn candidates(len: usize) -> Vec<UserId> {
    (1..=len as UserId).collect()
}

fn draw_counts(wv: &WeightVector, n: usize, draws: usize, seed: u64) -> BTreeMap<BTreeSet<UserId>, usize> {
    let mut rng = rng::seeded(seed);
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        let set = sample_neighbor_set(wv, n, &mut rng).unwrap();
        *counts.entry(set.members).or_insert(0) += 1;
    }
    counts
}

fn sampler_exactness() -> Verdict {
    let start = Instant::now();
    let mut rng = rng::seeded(1);
    let mut fixtures: Vec<(String, WeightVector, usize)> = Vec::new();
    for eps in [0.0, 0.5, 1.0, 2.0] {
        for len in [4, 6, 8] {
            let scores = random_scores(&mut rng, len);
            for n in 1..=4 {
                let wv = WeightVector::from_scores(candidates(len), scores.clone(), eps, 1.0).unwrap();
                fixtures.push((format!("len={len} N={n} eps={eps}"), wv, n));
            }
        }
        let m = kdpcf_core::fixtures::sibyl_matrix();
        let sims = similarity_vector(&m, kdpcf_core::fixtures::SIBYL, [1, 2, 3, 4]).unwrap();
        for n in 1..=4 {
            let wv = WeightVector::from_similarities(&sims, [1, 2, 3, 4], eps, 1.0).unwrap();
            fixtures.push((format!("sibyl N={n} eps={eps}"), wv, n));
        }
    }
    let mut worst = (0.0, String::new());
    for (i, (name, wv, n)) in fixtures.iter().enumerate() {
        let dist = enumerate_distribution(wv, *n).unwrap();
        let draws = 100_000;
        let counts = draw_counts(wv, *n, draws, 100 + i as u64);
        let tv = dist.total_variation(&counts, draws);
        if tv > worst.0 {
            worst = (tv, name.clone());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.0 < 0.02 && elapsed < Duration::from_secs(30),
        format!(
            "{} fixtures, max TV {:.4} ({}), {:.1}s",
            fixtures.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn factorization_identity() -> Verdict {
    let mut rng = rng::seeded(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=12);
        let eps = rng.random_range(0.0..=4.0);
        let scores = random_scores(&mut rng, len);
        let wv = WeightVector::from_scores(candidates(len), scores.clone(), eps, 1.0).unwrap();
        let weights = wv.weights();
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(rng.random_range(1..=len));
        let q: f64 = idx.iter().map(|&i| scores[i].abs()).sum();
        let lhs = (eps * q / 2.0).exp();
        let rhs: f64 = idx.iter().map(|&i| weights[i]).product();
        worst = worst.max(((lhs - rhs) / lhs).abs());
    }
    verdict(worst <= 1e-12, format!("1000 fixtures, max relative error {worst:.2e}"))
}

fn dp_bound() -> Verdict {
    let mut rng = rng::seeded(3);
    let mut worst: Vec<(f64, f64)> = [0.5, 1.0, 2.0].iter().map(|&e| (e, 0.0)).collect();
    for pair in 0..100 {
        let users = rng.random_range(3..=9u32);
        let before = common::random_matrix(1000 + pair, users, 10, 0.5);
        let target: UserId = rng.random_range(1..=users);
        let others: Vec<UserId> = (1..=users).filter(|&v| v != target).collect();
        let changed = others[rng.random_range(0..others.len())];
        let after = common::perturb_user(&before, changed, 2000 + pair);
        let n = rng.random_range(1..=others.len().min(4));
        let s1 = similarity_vector(&before, target, others.iter().copied()).unwrap();
        let s2 = similarity_vector(&after, target, others.iter().copied()).unwrap();
        for (eps, w) in &mut worst {
            let a = WeightVector::from_similarities(&s1, others.iter().copied(), *eps, 1.0).unwrap();
            let b = WeightVector::from_similarities(&s2, others.iter().copied(), *eps, 1.0).unwrap();
            *w = w.max(audit_dp((&a, &b), n).unwrap());
        }
    }
    let ok = worst.iter().all(|&(eps, w)| w <= eps + 1e-9);
    let detail = worst
        .iter()
        .map(|(e, w)| format!("eps={e}: max log-ratio {w:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(ok, format!("100 adjacent pairs, {detail}"))
}

fn em_limits() -> Verdict {
    let len = 8;
    let n = 3;
    let mut rng = rng::seeded(4);
    let mut scores: Vec<f64> = (1..=len).map(|i| i as f64 / 10.0).collect();
    scores.shuffle(&mut rng);
    let wv = WeightVector::from_scores(candidates(len), scores.clone(), 200.0, 1.0).unwrap();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let top: BTreeSet<UserId> = order[..n].iter().map(|&i| i as UserId + 1).collect();
    let counts = draw_counts(&wv, n, 1000, 5);
    let hits = counts.get(&top).copied().unwrap_or(0);

    let uniform = WeightVector::from_scores(candidates(len), scores, 0.0, 1.0).unwrap();
    let sets = enumerate_distribution(&uniform, n).unwrap();
    let draws = 56_000;
    let counts = draw_counts(&uniform, n, draws, 7);
    let expected = draws as f64 / sets.len() as f64;
    let chi2: f64 = sets
        .support
        .iter()
        .map(|(s, _, _)| {
            let o = counts.get(s).copied().unwrap_or(0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    let p = 1.0 - ChiSquared::new((sets.len() - 1) as f64).unwrap().cdf(chi2);
    verdict(
        hits >= 999 && p > 0.01,
        format!(
            "eps=200 top-N in {hits}/1000 draws; eps=0 chi-square {chi2:.1} on {} sets, p={p:.3}",
            sets.len()
        ),
    )
}

fn budget_accounting() -> Verdict {
    let m = common::random_matrix(5, 60, 40, 0.3);
    let params = KdpcfParams {
        n: 3,
        m: 5,
        epsilon: 0.8,
        c_min: Some(10),
        c_max: Some(25),
        ..KdpcfParams::default()
    };
    let mut failures = Vec::new();
    for u in [1, 17, 33, 60] {
        let mut rng = rng::seeded(u64::from(u));
        let k = run_kdpcf(&m, u, &params, &mut rng).unwrap();
        if k.privacy.invocations() != 1 || k.privacy.charges() != [params.epsilon] {
            failures.push(format!("KDPCF u{u}: {:?}", k.privacy.charges()));
        }
        let d = run_dpcf(&m, u, params.n, params.m, params.epsilon, &mut rng).unwrap();
        let per = params.epsilon / params.n as f64;
        if d.privacy.invocations() != params.n
            || d.privacy.charges().iter().any(|&c| c != per)
            || (d.privacy.total_epsilon() - params.epsilon).abs() > 1e-12
        {
            failures.push(format!("DPCF u{u}: {:?}", d.privacy.charges()));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "KDPCF 1 call at eps, DPCF N calls at eps/N, over 4 targets".into()
        } else {
            failures.join("; ")
        },
    )
}

fn pooled_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

fn row(rows: &[ExperimentRow], scheme: Scheme) -> &ExperimentRow {
    rows.iter().find(|r| r.scheme == scheme).unwrap()
}

fn experiment(data: &ExperimentData, cache: &ClusterCache, scheme: Scheme, sweep: Option<Sweep>) -> Vec<ExperimentRow> {
    let config = ExperimentConfig {
        scheme,
        runs: 20,
        base_seed: 0,
        sweep,
        ..ExperimentConfig::default()
    };
    run_experiment_with(&config, data, cache).unwrap()
}

fn qualitative_ordering(data: &ExperimentData, cache: &ClusterCache, prep: Duration) -> Verdict {
    let start = Instant::now();
    let rows: Vec<ExperimentRow> = Scheme::ALL
        .iter()
        .flat_map(|&s| experiment(data, cache, s, None))
        .collect();
    let elapsed = start.elapsed() + prep;
    let (cf, dp, k) = (
        row(&rows, Scheme::Cf),
        row(&rows, Scheme::Dpcf),
        row(&rows, Scheme::Kdpcf),
    );
    let se_r = pooled_se(k.se_recall(), dp.se_recall());
    let se_p = pooled_se(k.se_precision(), dp.se_precision());
    let ok = cf.recall > k.recall
        && k.recall > dp.recall
        && cf.precision > k.precision
        && k.precision > dp.precision
        && k.recall - dp.recall > 2.0 * se_r
        && k.precision - dp.precision > 2.0 * se_p
        && elapsed < Duration::from_secs(600);
    verdict(
        ok,
        format!(
            "recall CF {:.4} / KDPCF {:.4} / DPCF {:.4} (gap {:.4}, 2SE {:.4}); precision {:.4} / {:.4} / {:.4} (gap {:.4}, 2SE {:.4}); {:.0}s",
            cf.recall,
            k.recall,
            dp.recall,
            k.recall - dp.recall,
            2.0 * se_r,
            cf.precision,
            k.precision,
            dp.precision,
            k.precision - dp.precision,
            2.0 * se_p,
            elapsed.as_secs_f64()
        ),
    )
}

/// Counts steps where `values` moves against `direction` (+1 up, -1 down),
/// and the worst such step relative to the pooled standard error.
fn inversions(rows: &[ExperimentRow], recall: bool, direction: f64) -> (usize, f64) {
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for w in rows.windows(2) {
        let (a, b, se) = if recall {
            (w[0].recall, w[1].recall, pooled_se(w[0].se_recall(), w[1].se_recall()))
        } else {
            (
                w[0].precision,
                w[1].precision,
                pooled_se(w[0].se_precision(), w[1].se_precision()),
            )
        };
        let step = (b - a) * direction;
        if step < 0.0 {
            count += 1;
            worst = worst.max(if se > 0.0 { -step / se } else { f64::INFINITY });
        }
    }
    (count, worst)
}

fn trend_shapes(data: &ExperimentData, cache: &ClusterCache) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for scheme in Scheme::ALL {
        let rows = experiment(
            data,
            cache,
            scheme,
            Some(Sweep {
                param: SweepParam::M,
                values: vec![10.0, 30.0, 50.0],
            }),
        );
        let (ri, _) = inversions(&rows, true, 1.0);
        let (pi, _) = inversions(&rows, false, -1.0);
        ok &= ri == 0 && pi == 0;
        notes.push(format!(
            "{scheme} m: recall {} precision {}",
            rows.iter()
                .map(|r| format!("{:.4}", r.recall))
                .collect::<Vec<_>>()
                .join(">"),
            rows.iter()
                .map(|r| format!("{:.4}", r.precision))
                .collect::<Vec<_>>()
                .join(">"),
        ));
    }
    for scheme in [Scheme::Kdpcf, Scheme::Dpcf] {
        let rows = experiment(
            data,
            cache,
            scheme,
            Some(Sweep {
                param: SweepParam::Epsilon,
                values: vec![0.2, 0.6, 1.0],
            }),
        );
        let (count, worst) = inversions(&rows, true, 1.0);
        ok &= count == 0 || (count == 1 && worst <= 1.0);
        notes.push(format!(
            "{scheme} eps: recall {} ({count} inversions, worst {worst:.2} SE)",
            rows.iter()
                .map(|r| format!("{:.4}", r.recall))
                .collect::<Vec<_>>()
                .join(">"),
        ));
    }
    verdict(ok, notes.join("; ").replace('>', " -> "))
}

fn adjustment_contract(matrix: &RatingMatrix) -> Verdict {
    let params = KdpcfParams::default();
    let config = params.adjustment().unwrap();
    let k = params.k_for(matrix.n_users()).unwrap();
    let clustering = kmeans(matrix, matrix.users(), k, &mut rng::seeded(8), None).unwrap();
    let mut users = matrix.users().to_vec();
    users.shuffle(&mut rng::seeded(9));
    let mut outcomes: BTreeMap<String, usize> = BTreeMap::new();
    let mut violations = Vec::new();
    for &u in &users[..100] {
        let adj = adjust_target_category(matrix, &clustering, u, &config, &mut rng::for_user(10, u)).unwrap();
        let size = adj.members.len();
        let in_range = config.bounds.contains(size);
        let valid = adj.members.contains(&u)
            && size > params.n
            && match adj.outcome {
                AdjustmentOutcome::InRange => in_range,
                AdjustmentOutcome::KeptCurrent | AdjustmentOutcome::WholePopulation => !in_range,
            };
        if !valid {
            violations.push(format!("user {u}: size {size} {:?}", adj.outcome));
        }
        *outcomes.entry(format!("{:?}", adj.outcome)).or_insert(0) += 1;
    }
    verdict(
        violations.is_empty(),
        format!(
            "100 targets, bounds [{}, {}], outcomes {outcomes:?}{}",
            config.bounds.c_min,
            config.bounds.c_max,
            if violations.is_empty() {
                String::new()
            } else {
                format!(", violations: {}", violations.join("; "))
            }
        ),
    )
}

fn clustering_sanity(movielens: Option<&RatingMatrix>) -> Verdict {
    let synthetic = common::random_matrix(11, 200, 60, 0.2);
    let (matrix, label) = match movielens {
        Some(m) => (m, "MovieLens"),
        None => (&synthetic, "synthetic"),
    };
    let k = KdpcfParams::default().k_for(matrix.n_users()).unwrap();
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for seed in 0..50 {
        let c = kmeans(matrix, matrix.users(), k, &mut rng::seeded(1000 + seed), None).unwrap();
        for w in c.objective_trace.windows(2) {
            worst = worst.max(w[1] - w[0]);
            steps += 1;
        }
    }
    verdict(
        worst <= 1e-9,
        format!("{label}, k={k}, 50 seeds, {steps} steps, largest increase {worst:.2e}"),
    )
}

fn main() {
    let require_data = std::env::var("KDPCF_REQUIRE_DATA").is_ok_and(|v| v == "1");
    let mut results: Vec<(&str, Verdict)> = vec![
        ("1 sampler exactness", sampler_exactness()),
        ("2 factorization identity", factorization_identity()),
        ("3 DP bound", dp_bound()),
        ("4 EM limits", em_limits()),
        ("5 budget accounting", budget_accounting()),
    ];

    let movielens = common::movielens();
    match &movielens {
        Some(matrix) => {
            let start = Instant::now();
            let data = ExperimentData::new(split(matrix, 0.2, 42).unwrap());
            let cache = ClusterCache::in_memory();
            let prep = start.elapsed();
            results.push(("6 qualitative ordering", qualitative_ordering(&data, &cache, prep)));
            results.push(("7 trend shapes", trend_shapes(&data, &cache)));
            results.push(("8 adjustment contract", adjustment_contract(matrix)));
        }
        None => {
            let why = format!("MovieLens not found at {}", common::movielens_path().display());
            for name in ["6 qualitative ordering", "7 trend shapes", "8 adjustment contract"] {
                results.push((
                    name,
                    if require_data {
                        Fail(why.clone())
                    } else {
                        Skip(why.clone())
                    },
                ));
            }
        }
    }
    results.push(("9 clustering sanity", clustering_sanity(movielens.as_ref())));

    let mut failed = 0;
    for (name, v) in &results {
        let (tag, detail) = match v {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] criterion {name}: {detail}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
