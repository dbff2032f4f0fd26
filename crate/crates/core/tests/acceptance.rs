//! Acceptance run. Prints one PASS/FAIL line per criterion; exits nonzero on a
//! failure only when `ACCEPTANCE_STRICT=1`. Datasets and trained models are
//! cached under the cargo target tmp directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use predictor_lab::adaptation::AdaptationLaw;
use predictor_lab::bench::{benchmark_predictors, Backend, BenchCorpus};
use predictor_lab::dataset::{generate_dataset, GenerationConfig, PredictorDataset};
use predictor_lab::neural::{load_model, save_model, train, NeuralOperatorModel, TrainingConfig};
use predictor_lab::predictor::FixedPointOptions;
use predictor_lab::simulation::{run, Baseline, PredictorChoice, SimulationConfig, SimulationTrace};
use predictor_lab::systems::SystemName;
use predictor_lab::verify::{run_suite, Suite};

const PROTEIN_SAMPLES: usize = 2000;
const CHEMOSTAT_SAMPLES: usize = 2000;
const TRAIN_SECONDS: f64 = 900.0;
const EARLY_EPOCHS: usize = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn cache_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("cache directory");
    dir
}

fn dataset(system: SystemName, n: usize) -> PredictorDataset {
    let cfg = GenerationConfig::preset(&system, n, 0);
    let path = cache_dir().join(format!("{system}_{}.ds", &cfg.hash()[..16]));
    if let Ok(ds) = PredictorDataset::load(&path) {
        return ds;
    }
    let t = Instant::now();
    let ds = generate_dataset(&cfg).expect("dataset generation");
    eprintln!("  generated {} {system} samples in {:.0}s", ds.len(), t.elapsed().as_secs_f64());
    ds.save(&path).expect("dataset save");
    ds
}

fn model(ds: &PredictorDataset, tag: &str, cfg: &TrainingConfig) -> Arc<NeuralOperatorModel> {
    let name = format!(
        "{}_{}_{}_{}e_{}c.model",
        ds.provenance.system,
        &ds.provenance.config_hash[..16],
        tag,
        cfg.epochs,
        cfg.d_c
    );
    let path = cache_dir().join(name);
    if let Ok(m) = load_model(&path) {
        return Arc::new(m);
    }
    let (m, rep) = train(ds, cfg).expect("training");
    eprintln!(
        "  trained {tag} {} model: {} epochs (best {}), test sup error {:.3e}, {:.0}s",
        ds.provenance.system, rep.epochs_run, rep.best_epoch, rep.test_err, rep.seconds
    );
    save_model(&m, &path).expect("model save");
    Arc::new(m)
}

fn optimal_config() -> TrainingConfig {
    TrainingConfig { max_seconds: Some(TRAIN_SECONDS), ..TrainingConfig::default() }
}

fn early_config() -> TrainingConfig {
    TrainingConfig { epochs: EARLY_EPOCHS, ..TrainingConfig::default() }
}

fn x2_radius(tr: &SimulationTrace, t_from: f64) -> f64 {
    if tr.diverged() {
        return f64::INFINITY;
    }
    tr.steps.iter().filter(|s| s.t >= t_from).map(|s| (s.x[1] - tr.setpoint[1]).abs()).fold(0.0, f64::max)
}

fn relative_distances(tr: &SimulationTrace, t_from: f64) -> Vec<f64> {
    let scale = tr.setpoint.iter().map(|v| v * v).sum::<f64>().sqrt();
    tr.steps
        .iter()
        .filter(|s| s.t >= t_from)
        .map(|s| s.x.iter().zip(&tr.setpoint).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / scale)
        .collect()
}

fn quiet(mut c: SimulationConfig) -> SimulationConfig {
    c.functional_stride = 0;
    c
}

fn protein_limit_cycle() -> Outcome {
    let mut c = quiet(SimulationConfig::protein());
    c.predictor = PredictorChoice::None;
    c.baseline = Baseline::OpenLoop;
    let tr = run(&c).expect("simulation");
    let min = tr.min_distance_after(20.0);
    let max = tr.max_distance_after(20.0);
    let range = |k: usize| {
        tr.steps
            .iter()
            .filter(|s| s.t >= 20.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(s.x[k]), h.max(s.x[k])))
    };
    let ((lo1, hi1), (lo2, hi2)) = (range(0), range(1));
    outcome(
        min > 0.5,
        format!(
            "min |X-X*| on [20,40] = {min:.4} (needs > 0.5), max = {max:.3}; x2 swings over [{lo2:.2}, {hi2:.2}] \
             while x1 stays in [{lo1:.3}, {hi1:.3}], so each crossing of x2 = 5.25 passes near the equilibrium"
        ),
    )
}

fn protein_numeric() -> Outcome {
    let tr = run(&quiet(SimulationConfig::protein())).expect("simulation");
    let x = &tr.last().unwrap().x;
    let (e1, e2) = ((x[0] - 0.0939).abs(), (x[1] - 5.2525).abs());
    outcome(
        !tr.diverged() && e1 < 0.01 && e2 < 0.5,
        format!("X(40) = ({:.5}, {:.4}), |dx1| = {e1:.2e}, |dx2| = {e2:.2e}", x[0], x[1]),
    )
}

fn protein_neural(optimal: &Arc<NeuralOperatorModel>, early: &Arc<NeuralOperatorModel>) -> Outcome {
    let radius = |m: &Arc<NeuralOperatorModel>| {
        let mut c = quiet(SimulationConfig::protein());
        c.predictor = PredictorChoice::Neural(m.clone());
        let tr = run(&c).expect("simulation");
        (x2_radius(&tr, 30.0), tr.last().unwrap().x.clone())
    };
    let (r_opt, x_opt) = radius(optimal);
    let (r_early, _) = radius(early);
    outcome(
        r_opt <= 0.2 && r_opt < r_early + 0.01,
        format!(
            "x2 radius on [30,40]: trained {r_opt:.4} (X(40) = ({:.4}, {:.4})), early-stopped after {EARLY_EPOCHS} epochs {r_early:.4}",
            x_opt[0], x_opt[1]
        ),
    )
}

fn chemostat(model: &Arc<NeuralOperatorModel>) -> Outcome {
    let mut c = quiet(SimulationConfig::chemostat());
    c.predictor = PredictorChoice::None;
    c.baseline = Baseline::Uncompensated;
    c.law = AdaptationLaw::Frozen;
    let unc = run(&c).expect("simulation");
    let quarter = 0.75 * c.t_final;
    let unc_max = relative_distances(&unc, quarter).into_iter().fold(0.0, f64::max);
    let mut c = quiet(SimulationConfig::chemostat());
    c.predictor = PredictorChoice::Neural(model.clone());
    let no = run(&c).expect("simulation");
    let no_end = if no.diverged() { f64::INFINITY } else { *relative_distances(&no, c.t_final).last().unwrap() };
    let no_x = &no.last().unwrap().x;
    outcome(
        unc_max > 0.05 && no_end < 0.02,
        format!(
            "uncompensated max relative distance over last quarter {:.1}% (needs > 5%); \
             neural predictor X({}) = ({:.4}, {:.4}), relative distance {:.2}% (needs < 2%)",
            100.0 * unc_max,
            c.t_final,
            no_x[0],
            no_x[1],
            100.0 * no_end
        ),
    )
}

fn lipschitz() -> Outcome {
    let rep = run_suite(Suite::Lipschitz, 0).expect("lipschitz suite");
    let ratio = &rep.checks[0];
    let finite = ratio.bound.is_finite();
    outcome(
        rep.passed(),
        format!(
            "max empirical ratio {:.3e} vs bound {}; {}",
            ratio.value,
            if finite { format!("{:.3e}", ratio.bound) } else { "inf".into() },
            if finite {
                "bound finite".to_string()
            } else {
                format!("the bound overflows ({}), so the comparison is vacuous", rep.notes.join("; "))
            }
        ),
    )
}

fn latency(model: &Arc<NeuralOperatorModel>) -> Outcome {
    let corpus = BenchCorpus::random(&SystemName::Protein, 1000, (0.5, 3.0), 0).expect("corpus");
    let backends = [Backend::FixedPoint(FixedPointOptions::default()), Backend::Neural(model.clone())];
    let rep = benchmark_predictors(&corpus, &backends, &[0.01, 0.001], 1000).expect("benchmark");
    let fp_coarse = rep.cell(0.01, "numeric_fixed_point").unwrap();
    let fp_fine = rep.cell(0.001, "numeric_fixed_point").unwrap();
    let no_fine = rep.cell(0.001, "neural").unwrap();
    let speedup = fp_fine.mean_s / no_fine.mean_s;
    let growth = fp_fine.mean_s / fp_coarse.mean_s;
    outcome(
        speedup >= 2.0 && growth >= 5.0 && fp_fine.failures == 0,
        format!(
            "dx=0.001: numeric {:.4} ms, neural {:.4} ms, speedup {speedup:.2}x; numeric growth 0.01 -> 0.001 {growth:.2}x; corpus {}",
            1e3 * fp_fine.mean_s,
            1e3 * no_fine.mean_s,
            &rep.corpus_hash[..12]
        ),
    )
}

fn suite_outcome(suites: &[Suite]) -> Outcome {
    let mut detail = Vec::new();
    let mut passed = true;
    for &s in suites {
        let rep = run_suite(s, 0).expect("suite");
        passed &= rep.passed();
        let worst = rep
            .checks
            .iter()
            .map(|c| format!("{} {:.2e} <= {:.2e}", c.name, c.value, c.bound))
            .collect::<Vec<_>>()
            .join(", ");
        detail.push(format!("{}: {}", s.name(), worst));
    }
    outcome(passed, detail.join(" | "))
}

fn unmeasured_local() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = SimulationConfig::protein();
    let mut worst_norm_margin = f64::INFINITY;
    let mut worst_upsilon = f64::NEG_INFINITY;
    let mut worst_peak_t = f64::NAN;
    let mut lines = Vec::new();
    let mut passed = true;
    for _ in 0..5 {
        let mut c = base.clone();
        c.law = AdaptationLaw::Unmeasured;
        c.functional_stride = c.t_final as usize * 1000;
        c.d_hat0 = c.d_true + rng.gen_range(-0.2..0.2);
        let star = [0.0939, 5.2525];
        let r = 0.5 * rng.gen::<f64>().sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        c.x0 = vec![star[0] + r * a.cos(), star[1] + r * a.sin()];
        c.x0[0] = c.x0[0].max(1e-3);
        let tr = run(&c).expect("simulation");
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d0 = norm(&[c.x0[0] - tr.setpoint[0], c.x0[1] - tr.setpoint[1]]);
        let bound = 10.0 * d0 + norm(&tr.setpoint);
        let (peak, t_peak) = if tr.diverged() {
            (f64::INFINITY, f64::NAN)
        } else {
            tr.steps.iter().map(|s| (norm(&s.x), s.t)).fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a })
        };
        let ups0 = tr.steps.first().unwrap().upsilon_functional;
        let upsf = tr.last().unwrap().upsilon_functional;
        let ok = peak < bound && upsf < ups0 + 0.5;
        passed &= ok;
        if bound - peak < worst_norm_margin {
            worst_norm_margin = bound - peak;
            worst_peak_t = t_peak;
        }
        worst_upsilon = worst_upsilon.max(upsf - ups0);
        lines.push(format!(
            "X0=({:.3},{:.3}) dhat0={:.3}: peak |X| {peak:.2} at t = {t_peak:.2} vs {bound:.2}, Upsilon {ups0:.3} -> {upsf:.3}",
            c.x0[0], c.x0[1], c.d_hat0
        ));
    }
    for l in &lines {
        eprintln!("    {l}");
    }
    outcome(
        passed,
        format!(
            "5 runs: smallest norm margin {worst_norm_margin:.3} (peak at t = {worst_peak_t:.2}, delay D = 1), \
             largest Upsilon increase {worst_upsilon:.3}"
        ),
    )
}

fn report(id: usize, name: &str, limit_s: f64, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    let secs = t.elapsed().as_secs_f64();
    let within = secs <= limit_s;
    let passed = o.passed && within;
    println!(
        "criterion {id} {name}: {} ({}; {secs:.1}s of {limit_s:.0}s)",
        if passed { "PASS" } else { "FAIL" },
        o.detail
    );
    passed
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut results = Vec::new();

    results.push(report(1, "protein limit cycle", 5.0, protein_limit_cycle));
    results.push(report(2, "protein numeric predictor", 120.0, protein_numeric));

    let protein = dataset(SystemName::Protein, PROTEIN_SAMPLES);
    let t = Instant::now();
    let optimal = model(&protein, "optimal", &optimal_config());
    let early = model(&protein, "early", &early_config());
    eprintln!("  protein models ready in {:.0}s", t.elapsed().as_secs_f64());
    results.push(report(3, "neural predictor radius and ordering", 300.0, || protein_neural(&optimal, &early)));

    let chem = dataset(SystemName::Chemostat, CHEMOSTAT_SAMPLES);
    let chem_model = model(&chem, "optimal", &optimal_config());
    results.push(report(4, "chemostat", 180.0, || chemostat(&chem_model)));

    results.push(report(5, "predictor Lipschitz bound", 30.0, lipschitz));
    results.push(report(6, "latency direction", 300.0, || latency(&optimal)));
    results.push(report(7, "oracle equivalence", 10.0, || suite_outcome(&[Suite::SolverAgreement])));
    results.push(report(8, "property suites", 120.0, || {
        suite_outcome(&[Suite::Projection, Suite::Transport, Suite::W1Consistency, Suite::Gradient, Suite::Serialization])
    }));
    results.push(report(9, "unmeasured-input local stability", 300.0, unmeasured_local));

    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
