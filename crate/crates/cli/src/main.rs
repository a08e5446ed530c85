use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kdpcf_core::data::{build_matrix, load_movielens, split};
use kdpcf_core::dp_sampler::{audit_dp, enumerate_distribution, sample_neighbor_set};
use kdpcf_core::eval::{run_experiment_with, write_csv, write_json, ClusterCache, ExperimentData, Sweep};
use kdpcf_core::fixtures::{sibyl_matrix, sibyl_matrix_after, SIBYL, VICTIM};
use kdpcf_core::recommend::{run_cf, run_dpcf, run_kdpcf};
use kdpcf_core::similarity::similarity_vector;
use kdpcf_core::{rng, ExperimentConfig, KdpcfParams, RatingMatrix, Scheme, UserId, WeightVector};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "kdpcf",
    version,
    about = "Differentially private user-based collaborative filtering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a rating file into <prefix>.train and <prefix>.test.
    Split(SplitArgs),
    /// Print the top-m list for one user.
    Recommend(RecommendArgs),
    /// Average recall/precision over many runs, optionally sweeping m, N or epsilon.
    Experiment(ExperimentArgs),
    /// Largest log probability ratio of the neighbor-set mechanism on an adjacent fixture pair.
    Audit(AuditArgs),
    /// Total-variation distance between sampled and enumerated neighbor sets.
    SampleOracle(OracleArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Rating file in `user item rating timestamp` form.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory holding `u.data`, used when --input is absent.
    #[arg(long, env = "KDPCF_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn path(&self) -> Result<PathBuf> {
        match (&self.input, &self.data_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join("u.data")),
            (None, None) => bail!("no input: pass --input or set KDPCF_DATA_DIR"),
        }
    }

    fn load(&self) -> Result<RatingMatrix> {
        let path = self.path()?;
        let records = load_movielens(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(build_matrix(&records))
    }
}

#[derive(Args)]
struct ParamArgs {
    /// Recommendation list length.
    #[arg(long, default_value_t = 30)]
    m: usize,
    /// Neighbor set size.
    #[arg(long = "neighbors", short = 'n', default_value_t = 30)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Smallest target category; defaults to 5N.
    #[arg(long)]
    c_min: Option<usize>,
    /// Largest target category; defaults to 10N.
    #[arg(long)]
    c_max: Option<usize>,
    /// Cluster count; defaults to ceil(2|U| / (c_min + c_max)).
    #[arg(long)]
    k: Option<usize>,
    /// Probability of keeping each category member before the draw.
    #[arg(long, default_value_t = 1.0)]
    subsample_p: f64,
}

impl ParamArgs {
    fn params(&self) -> Result<KdpcfParams> {
        let p = KdpcfParams {
            m: self.m,
            n: self.n,
            epsilon: self.epsilon,
            c_min: self.c_min,
            c_max: self.c_max,
            k: self.k,
            subsample_p: self.subsample_p,
            ..KdpcfParams::default()
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fraction of ratings held out for testing.
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Cf,
    Dpcf,
    Kdpcf,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Cf => Scheme::Cf,
            SchemeArg::Dpcf => Scheme::Dpcf,
            SchemeArg::Kdpcf => Scheme::Kdpcf,
        }
    }
}

#[derive(Args)]
struct RecommendArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    user: UserId,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    #[command(flatten)]
    params: ParamArgs,
    /// Ignored for cf.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeChoice {
    Cf,
    Dpcf,
    Kdpcf,
    All,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "all")]
    scheme: SchemeChoice,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Base seed; run r uses seed ^ r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `m=10,30,50`, `N=10,20,30` or `epsilon=0.2,0.6,1.0`.
    #[arg(long)]
    sweep: Option<Sweep>,
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    /// Seed of the train/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Draw a new split for every run.
    #[arg(long)]
    resplit: bool,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Directory where Step-1 clusterings are stored and reused.
    #[arg(long)]
    cluster_cache: Option<PathBuf>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the rows, with per-run metrics, as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    /// Four users plus a sibyl copying user 3, before and after user 3 rates item 5.
    Tiny,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    fixture: Fixture,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Neighbor set size; every size from 1 to the candidate count when absent.
    #[arg(long = "neighbors", short = 'n')]
    n: Option<usize>,
    /// The victim's new rating in the second dataset.
    #[arg(long, default_value_t = 1)]
    rating: u8,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    fixture: Fixture,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long = "neighbors", short = 'n', default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Split(a) => split_cmd(a),
        Command::Recommend(a) => recommend_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Audit(a) => audit_cmd(a),
        Command::SampleOracle(a) => oracle_cmd(a),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn split_cmd(a: SplitArgs) -> Result<()> {
    let matrix = a.data.load()?;
    let s = split(&matrix, a.ratio, a.seed)?;
    for (suffix, part) in [(".train", &s.train), (".test", &s.test)] {
        let path = with_suffix(&a.out_prefix, suffix);
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        part.write_movielens(&mut out)?;
        out.flush()?;
        println!("{}\t{}", path.display(), part.n_ratings());
    }
    Ok(())
}

fn recommend_cmd(a: RecommendArgs) -> Result<()> {
    let matrix = a.data.load()?;
    let params = a.params.params()?;
    let seed = a.seed.unwrap_or(0);
    let rec = match a.scheme {
        SchemeArg::Cf => {
            if a.seed.is_some() {
                eprintln!("warning: cf is deterministic; --seed is ignored");
            }
            run_cf(&matrix, a.user, params.n, params.m)?
        }
        SchemeArg::Dpcf => run_dpcf(
            &matrix,
            a.user,
            params.n,
            params.m,
            params.epsilon,
            &mut rng::for_user(seed, a.user),
        )?,
        SchemeArg::Kdpcf => run_kdpcf(&matrix, a.user, &params, &mut rng::seeded(seed))?,
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "rank\titem\tpredicted")?;
    for (rank, (item, p)) in rec.list.items.iter().enumerate() {
        writeln!(out, "{}\t{item}\t{p:.4}", rank + 1)?;
    }
    eprintln!(
        "{} neighbors, {} mechanism calls, total epsilon {}",
        rec.neighbors.size(),
        rec.privacy.invocations(),
        rec.privacy.total_epsilon()
    );
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    if let Some(t) = a.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let params = a.params.params()?;
    let matrix = a.data.load()?;
    let data = ExperimentData::new(split(&matrix, a.ratio, a.split_seed)?);
    let cache = match &a.cluster_cache {
        Some(dir) => ClusterCache::persistent(dir)?,
        None => ClusterCache::in_memory(),
    };
    let schemes: Vec<Scheme> = match a.scheme {
        SchemeChoice::Cf => vec![Scheme::Cf],
        SchemeChoice::Dpcf => vec![Scheme::Dpcf],
        SchemeChoice::Kdpcf => vec![Scheme::Kdpcf],
        SchemeChoice::All => Scheme::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for scheme in schemes {
        let config = ExperimentConfig {
            scheme,
            params: params.clone(),
            runs: a.runs,
            base_seed: a.seed,
            sweep: a.sweep.clone(),
            resplit: a.resplit,
            test_fraction: a.ratio,
        };
        rows.extend(run_experiment_with(&config, &data, &cache)?);
    }
    match &a.out {
        Some(path) => write_csv(&rows, BufWriter::new(File::create(path)?))?,
        None => write_csv(&rows, io::stdout().lock())?,
    }
    if let Some(path) = &a.json {
        write_json(&rows, BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

/// Weight vectors of the sibyl over users 1-4, before and after the victim's rating.
fn tiny_pair(epsilon: f64, rating: u8) -> Result<(WeightVector, WeightVector)> {
    if !(1..=5).contains(&rating) {
        bail!("--rating must be in 1..=5");
    }
    let candidates: Vec<UserId> = vec![1, 2, 3, 4];
    let weights = |m: &RatingMatrix| -> Result<WeightVector> {
        let sims = similarity_vector(m, SIBYL, candidates.iter().copied())?;
        Ok(WeightVector::from_similarities(
            &sims,
            candidates.iter().copied(),
            epsilon,
            1.0,
        )?)
    };
    Ok((weights(&sibyl_matrix())?, weights(&sibyl_matrix_after(rating))?))
}

fn audit_cmd(a: AuditArgs) -> Result<()> {
    let Fixture::Tiny = a.fixture;
    let (before, after) = tiny_pair(a.epsilon, a.rating)?;
    let sizes: Vec<usize> = match a.n {
        Some(n) => vec![n],
        None => (1..=before.len()).collect(),
    };
    let mut worst: f64 = 0.0;
    for &n in &sizes {
        let ratio = audit_dp((&before, &after), n)?;
        eprintln!("N={n}\tmax_log_ratio={ratio:.6}");
        worst = worst.max(ratio);
    }
    println!("{worst:.6}");
    eprintln!(
        "victim {VICTIM} rates item 5 with {}; bound {}: {}",
        a.rating,
        a.epsilon,
        if worst <= a.epsilon + 1e-9 { "holds" } else { "VIOLATED" }
    );
    Ok(())
}

fn oracle_cmd(a: OracleArgs) -> Result<()> {
    let Fixture::Tiny = a.fixture;
    let (wv, _) = tiny_pair(a.epsilon, 1)?;
    let dist = enumerate_distribution(&wv, a.n)?;
    let mut rng = rng::seeded(a.seed);
    let mut counts = BTreeMap::new();
    for _ in 0..a.draws {
        *counts
            .entry(sample_neighbor_set(&wv, a.n, &mut rng)?.members)
            .or_insert(0usize) += 1;
    }
    let tv = dist.total_variation(&counts, a.draws);
    for (set, p, _) in &dist.support {
        let observed = counts.get(set).copied().unwrap_or(0) as f64 / a.draws as f64;
        eprintln!("{set:?}\texact={p:.5}\tobserved={observed:.5}");
    }
    println!("{tv:.6}");
    Ok(())
}
