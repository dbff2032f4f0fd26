use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use predictor_lab::bench::{benchmark_predictors, Backend, BenchCorpus};
use predictor_lab::config::{
    generation_config, parse_list, simulation_config, training_config, KeyValues,
};
use predictor_lab::dataset::{generate_dataset, PredictorDataset};
use predictor_lab::neural::{load_model, save_model, train};
use predictor_lab::predictor::FixedPointOptions;
use predictor_lab::simulation::{run, SimulationConfig};
use predictor_lab::systems::SystemName;
use predictor_lab::verify::{format_table, run_suite, Suite};
use predictor_lab::{Error, Result};

/// Delay-adaptive predictor feedback toolkit.
#[derive(Parser, Debug)]
#[command(name = "predictor-lab", version)]
struct Cli {
    /// Worker threads for dataset generation and training.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one closed-loop simulation and write its trace as CSV.
    Simulate(SimulateArgs),
    /// Generate a predictor training dataset from closed-loop runs.
    GenDataset(GenArgs),
    /// Train a neural operator on a dataset.
    Train(TrainArgs),
    /// Time predictor backends on a shared corpus.
    Benchmark(BenchArgs),
    /// Run the property suites and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Flat `key = value` file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    /// numeric_fixed_point, numeric_march, neural or none.
    #[arg(long)]
    predictor: Option<String>,
    /// Model file for the neural predictor.
    #[arg(long)]
    model: Option<String>,
    /// measured, unmeasured or frozen.
    #[arg(long)]
    law: Option<String>,
    /// Control applied without a predictor: open_loop or uncompensated.
    #[arg(long)]
    baseline: Option<String>,
    /// True input delay.
    #[arg(long = "D", allow_hyphen_values = true)]
    d: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    dhat0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    dmin: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    dmax: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    dt: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    tf: Option<String>,
    /// Points of the predictor grid.
    #[arg(long = "N", allow_hyphen_values = true)]
    n: Option<String>,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// Control saturation `lo,hi` or `none`.
    #[arg(long, allow_hyphen_values = true)]
    clip: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    tol: Option<String>,
    #[arg(long = "max-iter", allow_hyphen_values = true)]
    max_iter: Option<String>,
    #[arg(long = "functional-stride", allow_hyphen_values = true)]
    functional_stride: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    /// Trace CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    /// Number of samples.
    #[arg(long, allow_hyphen_values = true)]
    n: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    /// Simulated seconds between harvested samples.
    #[arg(long, allow_hyphen_values = true)]
    stride: Option<String>,
    #[arg(long = "per-run", allow_hyphen_values = true)]
    per_run: Option<String>,
    #[arg(long = "output-points", allow_hyphen_values = true)]
    output_points: Option<String>,
    #[arg(long = "N", allow_hyphen_values = true)]
    grid: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    dt: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    tol: Option<String>,
    #[arg(long = "max-iter", allow_hyphen_values = true)]
    max_iter: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    epochs: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    batch: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    patience: Option<String>,
    #[arg(long = "val-fraction", allow_hyphen_values = true)]
    val_fraction: Option<String>,
    #[arg(long = "test-fraction", allow_hyphen_values = true)]
    test_fraction: Option<String>,
    #[arg(long = "lr-decay", allow_hyphen_values = true)]
    lr_decay: Option<String>,
    #[arg(long = "max-seconds", allow_hyphen_values = true)]
    max_seconds: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    /// Channel width.
    #[arg(long = "d-c", allow_hyphen_values = true)]
    d_c: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    layers: Option<String>,
    #[arg(long = "input-points", allow_hyphen_values = true)]
    input_points: Option<String>,
    /// tanh or softplus.
    #[arg(long)]
    activation: Option<String>,
    /// Learn the offset from the current state (true or false).
    #[arg(long)]
    residual: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    /// Model file; adds the neural backend.
    #[arg(long)]
    model: Option<String>,
    /// Step sizes, comma separated.
    #[arg(long)]
    dx: Option<String>,
    /// Timed solves per cell.
    #[arg(long, allow_hyphen_values = true)]
    trials: Option<String>,
    /// Corpus size.
    #[arg(long, allow_hyphen_values = true)]
    inputs: Option<String>,
    /// Dataset whose samples form the corpus; random inputs otherwise.
    #[arg(long)]
    corpus: Option<String>,
    /// Backends, comma separated: fixed_point, march, neural. The first is the baseline.
    #[arg(long)]
    backends: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    /// Report CSV path; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suite name or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const BENCH_KEYS: &[&str] = &["system", "model", "dx", "trials", "inputs", "corpus", "backends", "seed"];

/// Loads `config` if given and applies the set flags on top.
fn merged(config: &Option<PathBuf>, flags: &[(&str, &Option<String>)]) -> Result<KeyValues> {
    let mut kv = match config {
        Some(p) => KeyValues::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", p.display())),
            other => other,
        })?,
        None => KeyValues::new(),
    };
    let set: Vec<(String, String)> =
        flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect();
    kv.override_with(&set);
    Ok(kv)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let kv = merged(
        &a.config,
        &[
            ("system", &a.system),
            ("predictor", &a.predictor),
            ("model", &a.model),
            ("law", &a.law),
            ("baseline", &a.baseline),
            ("D", &a.d),
            ("dhat0", &a.dhat0),
            ("dmin", &a.dmin),
            ("dmax", &a.dmax),
            ("gamma", &a.gamma),
            ("b", &a.b),
            ("dt", &a.dt),
            ("tf", &a.tf),
            ("N", &a.n),
            ("x0", &a.x0),
            ("clip", &a.clip),
            ("tol", &a.tol),
            ("max_iter", &a.max_iter),
            ("functional_stride", &a.functional_stride),
            ("seed", &a.seed),
        ],
    )?;
    let cfg: SimulationConfig = simulation_config(&kv)?;
    let started = Instant::now();
    let trace = run(&cfg)?;
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        trace.write_csv(&mut w)?;
        w.flush()?;
    }
    let last = trace.last().ok_or_else(|| Error::Config("empty trace".into()))?;
    println!(
        "{} {:?}: t={} X={:?} |X-X*|={:.6} d_hat={:.6} wall={:.2}s",
        trace.system,
        cfg.predictor,
        last.t,
        last.x,
        trace.max_distance_after(last.t),
        last.d_hat,
        started.elapsed().as_secs_f64()
    );
    if let Some((t, reason)) = &trace.divergence {
        return Err(Error::Diverged { t: *t, reason: reason.clone() });
    }
    Ok(())
}

fn gen_dataset(a: &GenArgs) -> Result<()> {
    let kv = merged(
        &a.config,
        &[
            ("system", &a.system),
            ("n", &a.n),
            ("seed", &a.seed),
            ("stride", &a.stride),
            ("per_run", &a.per_run),
            ("output_points", &a.output_points),
            ("N", &a.grid),
            ("dt", &a.dt),
            ("tol", &a.tol),
            ("max_iter", &a.max_iter),
        ],
    )?;
    let cfg = generation_config(&kv)?;
    let started = Instant::now();
    let ds = generate_dataset(&cfg)?;
    ds.save(&a.out)?;
    println!(
        "{} samples of {} written to {} in {:.1}s ({} source runs skipped, config {})",
        ds.len(),
        ds.provenance.system,
        a.out.display(),
        started.elapsed().as_secs_f64(),
        ds.provenance.skipped_runs,
        &ds.provenance.config_hash[..12]
    );
    Ok(())
}

fn train_model(a: &TrainArgs) -> Result<()> {
    let kv = merged(
        &a.config,
        &[
            ("epochs", &a.epochs),
            ("lr", &a.lr),
            ("batch", &a.batch),
            ("patience", &a.patience),
            ("val_fraction", &a.val_fraction),
            ("test_fraction", &a.test_fraction),
            ("lr_decay", &a.lr_decay),
            ("max_seconds", &a.max_seconds),
            ("seed", &a.seed),
            ("d_c", &a.d_c),
            ("layers", &a.layers),
            ("input_points", &a.input_points),
            ("activation", &a.activation),
            ("residual", &a.residual),
        ],
    )?;
    let cfg = training_config(&kv)?;
    let ds = PredictorDataset::load(&a.data)?;
    let (model, report) = train(&ds, &cfg)?;
    save_model(&model, &a.out)?;
    println!(
        "trained {} parameters in {:.1}s: best epoch {} of {}, val loss {:.4e}, test sup error {:.4e}, test rmse {:.4e}",
        model.n_params(),
        report.seconds,
        report.best_epoch,
        report.epochs_run,
        report.best_val_loss,
        report.test_err,
        report.test_rmse
    );
    Ok(())
}

fn benchmark(a: &BenchArgs) -> Result<()> {
    let kv = merged(
        &a.config,
        &[
            ("system", &a.system),
            ("model", &a.model),
            ("dx", &a.dx),
            ("trials", &a.trials),
            ("inputs", &a.inputs),
            ("corpus", &a.corpus),
            ("backends", &a.backends),
            ("seed", &a.seed),
        ],
    )?;
    kv.check_keys(BENCH_KEYS)?;
    let dx = parse_list(kv.get("dx").unwrap_or("0.01,0.005,0.001"))?;
    let trials = kv.parsed::<usize>("trials")?.unwrap_or(1000);
    let inputs = kv.parsed::<usize>("inputs")?.unwrap_or(1000);
    let seed = kv.parsed::<u64>("seed")?.unwrap_or(0);
    let model = kv.get("model").map(|p| load_model(Path::new(p))).transpose()?.map(Arc::new);
    let default_backends = if model.is_some() { "fixed_point,neural" } else { "fixed_point,march" };
    let backends = kv
        .get("backends")
        .unwrap_or(default_backends)
        .split(',')
        .map(|b| match b.trim() {
            "fixed_point" | "numeric_fixed_point" => Ok(Backend::FixedPoint(FixedPointOptions::default())),
            "march" | "numeric_march" => Ok(Backend::OdeMarch),
            "neural" => model
                .clone()
                .map(Backend::Neural)
                .ok_or_else(|| Error::Config("backend `neural` requires --model".into())),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = match kv.get("corpus") {
        Some(path) => BenchCorpus::from_dataset(&PredictorDataset::load(Path::new(path))?, inputs)?,
        None => {
            let system: SystemName = kv.parsed("system")?.unwrap_or(SystemName::Protein);
            let preset = SimulationConfig::preset(&system);
            BenchCorpus::random(&system, inputs, (preset.d_min, preset.d_max), seed)?
        }
    };
    let report = benchmark_predictors(&corpus, &backends, &dx, trials)?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            eprintln!("corpus sha256 {}; report written to {}", report.corpus_hash, path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn verify(a: &VerifyArgs) -> Result<()> {
    let suites: Vec<Suite> = if a.suite.trim() == "all" { Suite::ALL.to_vec() } else { vec![a.suite.parse()?] };
    let reports = suites.iter().map(|&s| run_suite(s, a.seed)).collect::<Result<Vec<_>>>()?;
    print!("{}", format_table(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite.name()).collect();
    if failed.is_empty() {
        println!("all checks passed (seed {})", a.seed);
        Ok(())
    } else {
        Err(Error::Training(format!("suites failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PREDICTOR_LAB_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 || rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().is_err() {
            eprintln!("error: --jobs must be a positive integer");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::GenDataset(a) => gen_dataset(a),
        Command::Train(a) => train_model(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
