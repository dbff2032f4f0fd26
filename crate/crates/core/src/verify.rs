//! Property suites run by the `verify` subcommand.
//!
//! Every suite is serial and seeded, so its table is identical across runs
//! with the same seed.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{step_delay_estimate, AdaptationLaw, AdaptationState};
use crate::dataset::{DatasetLayout, PredictorDataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::history::InputHistory;
use crate::neural::{
    gradient, loss, model_from_text, model_to_text, prepare, Activation, InputLayout, NeuralOperatorModel,
    Normalization,
};
use crate::predictor::{solve_fixed_point, solve_ode_march, FixedPointOptions, PredictorGrid, PredictorProfile};
use crate::simulation::{run_with_observer, PredictorChoice, SimulationConfig, StepObservation};
use crate::systems::{make_system, LinearScalarSystem, SystemName};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Lipschitz,
    SolverAgreement,
    Transport,
    Projection,
    W1Consistency,
    Gradient,
    Serialization,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Lipschitz,
        Suite::SolverAgreement,
        Suite::Transport,
        Suite::Projection,
        Suite::W1Consistency,
        Suite::Gradient,
        Suite::Serialization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lipschitz => "lipschitz",
            Suite::SolverAgreement => "solver",
            Suite::Transport => "transport",
            Suite::Projection => "projection",
            Suite::W1Consistency => "w1",
            Suite::Gradient => "gradient",
            Suite::Serialization => "serialization",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown suite `{s}` (expected one of {}, or all)", names.join(", ")))
            })
    }
}

/// One measured quantity against its bound; passes when `value <= bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, bound, passed: value <= bound }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
    /// Informational lines printed under the table.
    pub notes: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (checks, notes) = match suite {
        Suite::Lipschitz => lipschitz(&mut rng)?,
        Suite::SolverAgreement => solver_agreement(&mut rng)?,
        Suite::Transport => transport(&mut rng)?,
        Suite::Projection => projection(&mut rng)?,
        Suite::W1Consistency => w1_consistency(&mut rng)?,
        Suite::Gradient => gradient_check(&mut rng)?,
        Suite::Serialization => serialization(&mut rng)?,
    };
    Ok(SuiteReport { suite, seed, checks, notes })
}

/// Fixed-width pass/fail table.
pub fn format_table(reports: &[SuiteReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:<34} {:>12} {:>12}  result", "suite", "check", "value", "bound");
    for r in reports {
        for c in &r.checks {
            let _ = writeln!(
                s,
                "{:<14} {:<34} {:>12.4e} {:>12.4e}  {}",
                r.suite.name(),
                c.name,
                c.value,
                c.bound,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        for n in &r.notes {
            let _ = writeln!(s, "{:<14} note: {n}", r.suite.name());
        }
    }
    s
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Largest node-wise Euclidean distance between two profiles.
fn profile_distance(a: &PredictorProfile, b: &PredictorProfile) -> f64 {
    let n = a.state_dim;
    a.values.chunks_exact(n).zip(b.values.chunks_exact(n)).map(|(p, q)| {
        p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }).fold(0.0, f64::max)
}

/// Random smooth profile `c + sum_k a_k sin(2 pi k s + phase_k)` on `[0, 1]`.
fn random_wave(rng: &mut ChaCha8Rng, center: f64, amplitude: f64) -> impl Fn(f64) -> f64 {
    let terms: Vec<(f64, f64, f64)> = (1..=3)
        .map(|k| (rng.gen_range(-amplitude..amplitude) / k as f64, k as f64, rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    move |s| center + terms.iter().map(|(a, k, ph)| a * (std::f64::consts::TAU * k * s + ph).sin()).sum::<f64>()
}

/// Lipschitz constant of the predictor map over a compact set:
/// `C_P = e^{D C_f} max{1, Xi, D C_f}`, `Xi = C_f [U + e^{D C_f} (X + C_f D U)]`.
pub fn predictor_lipschitz_bound(c_f: f64, d_max: f64, x_bar: f64, u_bar: f64) -> f64 {
    let e = (d_max * c_f).exp();
    let xi = c_f * (u_bar + e * (x_bar + c_f * d_max * u_bar));
    e * 1f64.max(xi).max(d_max * c_f)
}

const LIPSCHITZ_PAIRS: usize = 200;

fn lipschitz(rng: &mut ChaCha8Rng) -> Result<(Vec<Check>, Vec<String>)> {
    let sys = make_system(SystemName::Protein)?;
    let cfg = SimulationConfig::protein();
    let bx = sys.compact_box().clone();
    let c = *sys.constants();
    let grid = PredictorGrid::new(201)?;
    let opts = FixedPointOptions::default();
    let (ulo, uhi) = (bx.input_lo, bx.input_hi);
    let draw = |rng: &mut ChaCha8Rng| {
        let x = bx.sample_state(rng);
        let wave = random_wave(rng, 0.5 * (ulo + uhi), 0.5 * (uhi - ulo));
        let u: Vec<f64> = grid.sample(|s| wave(s).clamp(ulo, uhi));
        (x, u, rng.gen_range(cfg.d_min..=cfg.d_max))
    };
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    for _ in 0..LIPSCHITZ_PAIRS {
        let (x1, u1, d1) = draw(rng);
        // Second point: a perturbation of random relative size toward a fresh draw.
        let (x2, u2, d2) = draw(rng);
        let eps = 10f64.powf(rng.gen_range(-4.0..0.0));
        let mix = |a: f64, b: f64| a + eps * (b - a);
        let x2: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| mix(*a, *b)).collect();
        let u2: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| mix(*a, *b)).collect();
        let d2 = mix(d1, d2);
        let (Ok(p1), Ok(p2)) = (
            solve_fixed_point(sys.as_ref(), &x1, &u1, d1, grid, opts, None),
            solve_fixed_point(sys.as_ref(), &x2, &u2, d2, grid, opts, None),
        ) else {
            failures += 1;
            continue;
        };
        let dx: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
        let du = u1.iter().zip(&u2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let denom = norm(&dx) + du + (d1 - d2).abs();
        if denom > 0.0 {
            worst = worst.max(profile_distance(&p1, &p2) / denom);
        }
    }
    let bound = predictor_lipschitz_bound(c.lipschitz, cfg.d_max, c.state_bound, c.input_bound);
    let notes = vec![format!(
        "C_f = {:.4e}, D_max = {}, X_bar = {:.4e}, U_bar = {:.4e}; log10 C_P = {:.1}",
        c.lipschitz,
        cfg.d_max,
        c.state_bound,
        c.input_bound,
        if bound.is_finite() { bound.log10() } else { f64::INFINITY }
    )];
    Ok((
        vec![
            Check::at_most("max ratio |dP| / (|dX|+|dU|+|dD|)", worst, bound),
            Check::at_most("solver failures", failures as f64, 0.0),
        ],
        notes,
    ))
}

const AGREEMENT_INPUTS: usize = 50;

fn solver_agreement(rng: &mut ChaCha8Rng) -> Result<(Vec<Check>, Vec<String>)> {
    let lin = LinearScalarSystem::new(1.0, 1.0)?;
    let grid = PredictorGrid::new(1001)?;
    let opts = FixedPointOptions::default();
    let (mut fp_err, mut march_err) = (0.0f64, 0.0f64);
    for _ in 0..AGREEMENT_INPUTS {
        let x0 = rng.gen_range(-1.0..1.0);
        let delay = rng.gen_range(0.5..2.0);
        let center = rng.gen_range(-0.5..0.5);
        let wave = random_wave(rng, center, 1.0);
        let u = grid.sample(&wave);
        let fp = solve_fixed_point(&lin, &[x0], &u, delay, grid, opts, None)?;
        let march = solve_ode_march(&lin, &[x0], &wave, delay, grid)?;
        for i in (0..grid.n_points()).step_by(25) {
            let exact = lin.closed_form_predictor(x0, &wave, delay, grid.x(i), 2000);
            fp_err = fp_err.max((fp.at(i)[0] - exact).abs());
            march_err = march_err.max((march.at(i)[0] - exact).abs());
        }
    }
    Ok((
        vec![
            Check::at_most("fixed point vs closed form", fp_err, 1e-4),
            Check::at_most("rk4 march vs closed form", march_err, 1e-4),
        ],
        vec![format!("{AGREEMENT_INPUTS} inputs, N = 1001, a = 1, b_in = 1")],
    ))
}

fn transport(rng: &mut ChaCha8Rng) -> Result<(Vec<Check>, Vec<String>)> {
    let dt = 1e-3;
    let omegas: Vec<(f64, f64)> = (0..3).map(|_| (rng.gen_range(0.2..1.0), rng.gen_range(0.5..4.0))).collect();
    let signal = |t: f64| omegas.iter().map(|(a, w)| a * (w * t).sin()).sum::<f64>();
    // Interpolation error of a piecewise-linear interpolant: h^2 / 8 max|U''|.
    let curvature: f64 = omegas.iter().map(|(a, w)| a * w * w).sum();
    let interp_bound = dt * dt / 8.0 * curvature + 1e-12;
    let mut h = InputHistory::new(dt, 2.5)?;
    let steps = 6000;
    for k in 0..=steps {
        let t = k as f64 * dt;
        h.push(t, signal(t))?;
    }
    let t_now = steps as f64 * dt;
    let (mut pointwise, mut shift) = (0.0f64, 0.0f64);
    for _ in 0..2000 {
        let delay = rng.gen_range(0.3..2.0);
        let x = rng.gen_range(0.0..1.0);
        let t1 = t_now - rng.gen_range(0.0..0.4);
        let lag: f64 = rng.gen_range(0.0..(1.0 - x) * delay);
        let lag = lag.min(t_now - t1);
        let v = h.distributed_input_at(t1, delay, x)?;
        pointwise = pointwise.max((v - signal(t1 + delay * (x - 1.0))).abs());
        // u(x, t1 + lag) = u(x + lag / D, t1): transport at speed 1 / D.
        let later = h.distributed_input_at(t1 + lag, delay, x)?;
        let moved = h.distributed_input_at(t1, delay, x + lag / delay)?;
        shift = shift.max((later - moved).abs());
    }
    Ok((
        vec![
            Check::at_most("|u(x,t) - U(t+D(x-1))|", pointwise, interp_bound),
            Check::at_most("|u(x,t+s) - u(x+s/D,t)|", shift, 2.0 * interp_bound),
        ],
        vec![format!("interpolation bound h^2/8 max|U''| = {interp_bound:.4e}")],
    ))
}

const PROJECTION_STEPS: usize = 100_000;

fn projection(rng: &mut ChaCha8Rng) -> Result<(Vec<Check>, Vec<String>)> {
    let d_min = rng.gen_range(0.1..1.0);
    let d_max = d_min + rng.gen_range(0.1..3.0);
    let mut st = AdaptationState::new(0.5 * (d_min + d_max), d_min, d_max, 1.0, 1.0, AdaptationLaw::Measured)?;
    let mut violation = 0.0f64;
    let mut at_bound = 0usize;
    for k in 0..PROJECTION_STEPS {
        if k % 1000 == 0 {
            st.d_hat = rng.gen_range(d_min..=d_max);
        }
        st.gamma = 10f64.powf(rng.gen_range(-3.0..4.0));
        // Heavy-tailed update signal.
        let phi = (std::f64::consts::PI * (rng.gen::<f64>() - 0.5)).tan();
        let dt = 10f64.powf(rng.gen_range(-5.0..-1.0));
        st = step_delay_estimate(st, phi, dt);
        violation = violation.max(d_min - st.d_hat).max(st.d_hat - d_max);
        if st.d_hat == d_min || st.d_hat == d_max {
            at_bound += 1;
        }
    }
    Ok((
        vec![Check::at_most("max bound violation", violation.max(0.0), 0.0)],
        vec![format!("{PROJECTION_STEPS} steps in [{d_min:.4}, {d_max:.4}], {at_bound} ended on a bound")],
    ))
}

fn w1_consistency(_rng: &mut ChaCha8Rng) -> Result<(Vec<Check>, Vec<String>)> {
    let mut cfg = SimulationConfig::protein();
    cfg.t_final = 5.0;
    cfg.functional_stride = 0;
    cfg.predictor = PredictorChoice::FixedPoint;
    let sys = make_system(SystemName::Protein)?;
    let grid = PredictorGrid::new(cfg.grid_points)?;
    let opts = FixedPointOptions { tol: cfg.tol, max_iter: cfg.max_iter };
    let mut cold: Vec<(usize, f64)> = Vec::new();
    let mut failures = 0usize;
    let mut observer = |obs: &StepObservation<'_>| {
        if obs.step % 10 != 0 {
            return;
        }
        match solve_fixed_point(sys.as_ref(), obs.x, obs.u_profile, obs.d_hat_used, grid, opts, None) {
            Ok(p) => cold.push((obs.step, sys.controller(p.terminal()))),
            Err(_) => failures += 1,
        }
    };
    let trace = run_with_observer(&cfg, &mut observer)?;
    // With exact predictor feedback, w(1, t) = U(t) - kappa(p(1, t)) vanishes.
    let worst = cold.iter().map(|&(k, kappa)| (trace.steps[k].u - kappa).abs()).fold(0.0, f64::max);
    Ok((
        vec![
            Check::at_most("max |w(1,t)| vs cold re-solve", worst, 1e-6),
            Check::at_most("re-solve failures", failures as f64, 0.0),
        ],
        vec![format!("{} steps checked on the protein run, t_f = {}", cold.len(), cfg.t_final)],
    ))
}

fn gradient_check(rng: &mut ChaCha8Rng) -> Result<(Vec<Check>, Vec<String>)> {
    let mut checks = Vec::new();
    for act in [Activation::Tanh, Activation::Softplus] {
        let layout = InputLayout { state_dim: 2, input_points: 6, includes_delay: true };
        let mut m = NeuralOperatorModel::new(layout, 4, 2, 5, act, true, rng.gen())?;
        m.norm_in = Normalization { mean: vec![0.1, -0.2, 0.3, 1.0], scale: vec![0.5, 2.0, 1.5, 0.7] };
        m.norm_out = Normalization { mean: vec![0.05, -0.1], scale: vec![0.3, 1.7] };
        let samples: Vec<_> = (0..3)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let u: Vec<f64> = (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let raw: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
                prepare(&m, &x, &u, rng.gen_range(0.5..2.0), &raw)
            })
            .collect();
        let (_, g) = gradient(&m, &samples);
        let mut worst = 0.0f64;
        for i in 0..m.params.len() {
            let h = 1e-4 * (1.0 + m.params[i].abs());
            let orig = m.params[i];
            let mut at = |delta: f64| {
                m.params[i] = orig + delta;
                loss(&m, &samples)
            };
            let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            m.params[i] = orig;
            worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6));
        }
        checks.push(Check::at_most(format!("{act} relative gradient error"), worst, 1e-4));
    }
    Ok((checks, vec!["fourth-order central differences over every parameter".into()]))
}

fn serialization(rng: &mut ChaCha8Rng) -> Result<(Vec<Check>, Vec<String>)> {
    let layout = InputLayout { state_dim: 2, input_points: 9, includes_delay: true };
    let mut m = NeuralOperatorModel::new(layout, 6, 2, 5, Activation::Tanh, true, rng.gen())?;
    m.norm_in = Normalization { mean: (0..4).map(|_| rng.gen()).collect(), scale: (0..4).map(|_| rng.gen_range(0.1..3.0)).collect() };
    m.norm_out = Normalization { mean: vec![rng.gen(), rng.gen()], scale: vec![rng.gen_range(0.1..3.0), 1.0 / 3.0] };
    let back = model_from_text(&model_to_text(&m))?;
    let model_mismatch = m.params.iter().zip(&back.params).filter(|(a, b)| a.to_bits() != b.to_bits()).count()
        + usize::from(back != m);

    let ds = PredictorDataset {
        layout: DatasetLayout { state_dim: 2, input_points: 9, output_points: 5 },
        samples: (0..20)
            .map(|_| Sample {
                x: vec![rng.gen(), rng.gen::<f64>() * 1e3],
                u: (0..9).map(|_| rng.gen::<f64>() - 0.5).collect(),
                d_hat: rng.gen_range(0.5..2.0),
                target: (0..10).map(|_| rng.gen::<f64>() * 1e-7).collect(),
            })
            .collect(),
        provenance: Provenance {
            system: "protein".into(),
            dx: 0.125,
            dt: 1e-3,
            seed: 7,
            config_hash: "0".repeat(64),
            tolerance: 1e-10,
            skipped_runs: 0,
        },
    };
    let mut bytes = Vec::new();
    ds.write_to(&mut bytes)?;
    let ds_back = PredictorDataset::read_from(&mut bytes.as_slice())?;
    let ds_mismatch = usize::from(ds_back != ds);
    Ok((
        vec![
            Check::at_most("model text round trip mismatches", model_mismatch as f64, 0.0),
            Check::at_most("dataset binary round trip mismatches", ds_mismatch as f64, 0.0),
        ],
        vec![format!("model with {} parameters, dataset with {} records", m.n_params(), ds.len())],
    ))
}
