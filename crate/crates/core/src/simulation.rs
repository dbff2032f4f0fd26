//! Closed-loop simulation of the delayed plant under predictor feedback with
//! online delay adaptation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::adaptation::{
    estimated_input_xderiv_profile, phi_measured, phi_unmeasured, AdaptationLaw, AdaptationState,
};
use crate::error::{Error, Result};
use crate::history::InputHistory;
use crate::neural::NeuralOperatorModel;
use crate::predictor::{
    backstepping_w, q1_profile, solve_fixed_point, solve_ode_march, transition_matrix, FixedPointOptions,
    PredictorGrid, PredictorProfile,
};
use crate::systems::{make_system, norm, SystemModel, SystemName};

/// States beyond this norm are treated as divergence.
const DIVERGENCE_NORM: f64 = 1e6;
/// Consecutive predictor failures tolerated before aborting.
const MAX_PREDICTOR_FAILURES: usize = 10;

#[derive(Clone)]
pub enum PredictorChoice {
    FixedPoint,
    OdeMarch,
    Neural(Arc<NeuralOperatorModel>),
    None,
}

impl fmt::Debug for PredictorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictorChoice::FixedPoint => "numeric_fixed_point",
            PredictorChoice::OdeMarch => "numeric_march",
            PredictorChoice::Neural(_) => "neural",
            PredictorChoice::None => "none",
        })
    }
}

impl PartialEq for PredictorChoice {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (PredictorChoice::Neural(a), PredictorChoice::Neural(b)) => Arc::ptr_eq(a, b),
            _ => std::mem::discriminant(self) == std::mem::discriminant(other),
        }
    }
}

/// Behaviour when no predictor is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// `U = 0`.
    OpenLoop,
    /// `U = kappa(X(t))`, ignoring the delay.
    Uncompensated,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "open_loop" | "open-loop" | "openloop" => Ok(Baseline::OpenLoop),
            "uncompensated" => Ok(Baseline::Uncompensated),
            other => Err(Error::Config(format!("unknown baseline `{other}` (expected open_loop or uncompensated)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub system: SystemName,
    pub x0: Vec<f64>,
    pub d_true: f64,
    pub d_hat0: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub gamma: f64,
    pub b: f64,
    pub dt: f64,
    pub t_final: f64,
    pub predictor: PredictorChoice,
    pub law: AdaptationLaw,
    pub baseline: Baseline,
    /// Points of the numerical predictor grid.
    pub grid_points: usize,
    pub control_clip: Option<(f64, f64)>,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Steps between evaluations of the Gamma and Upsilon functionals; 0
    /// disables them. Skipped steps record NaN.
    pub functional_stride: usize,
}

impl SimulationConfig {
    /// Protein system, measured-input adaptation from `D_hat(0) = 2` with true `D = 1`.
    pub fn protein() -> Self {
        SimulationConfig {
            system: SystemName::Protein,
            x0: vec![0.03, 30.0],
            d_true: 1.0,
            d_hat0: 2.0,
            d_min: 0.5,
            d_max: 3.0,
            gamma: 1000.0,
            b: 1.0,
            dt: 1e-3,
            t_final: 40.0,
            predictor: PredictorChoice::FixedPoint,
            law: AdaptationLaw::Measured,
            baseline: Baseline::OpenLoop,
            grid_points: 201,
            control_clip: None,
            tol: 1e-10,
            max_iter: 200,
            seed: 0,
            functional_stride: 1,
        }
    }

    /// Chemostat, unmeasured-input adaptation from `D_hat(0) = 1.8` with true `D = 1.6`.
    pub fn chemostat() -> Self {
        SimulationConfig {
            system: SystemName::Chemostat,
            x0: vec![2.0, 2.0],
            d_true: 1.6,
            d_hat0: 1.8,
            d_min: 1.0,
            d_max: 2.5,
            gamma: 0.1,
            b: 1.0,
            dt: 1e-3,
            t_final: 60.0,
            predictor: PredictorChoice::FixedPoint,
            law: AdaptationLaw::Unmeasured,
            baseline: Baseline::Uncompensated,
            grid_points: 201,
            control_clip: Some((0.0, 5.0)),
            tol: 1e-10,
            max_iter: 200,
            seed: 0,
            functional_stride: 1,
        }
    }

    pub fn preset(name: &SystemName) -> Self {
        match name {
            SystemName::Protein => Self::protein(),
            SystemName::Chemostat => Self::chemostat(),
            SystemName::Linear { .. } => SimulationConfig {
                system: name.clone(),
                x0: vec![1.0],
                d_true: 1.0,
                d_hat0: 1.0,
                d_min: 0.5,
                d_max: 2.0,
                gamma: 1.0,
                b: 1.0,
                t_final: 10.0,
                control_clip: None,
                law: AdaptationLaw::Measured,
                ..Self::protein()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return bad(format!("t_final must be positive, got {}", self.t_final));
        }
        if !(self.d_true > 0.0) {
            return bad(format!("true delay must be positive, got {}", self.d_true));
        }
        if self.t_final <= self.d_true {
            return bad(format!("t_final {} must exceed the true delay {}", self.t_final, self.d_true));
        }
        if self.grid_points < 2 {
            return bad("grid needs at least 2 points".into());
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return bad("solver tolerance and iteration cap must be positive".into());
        }
        if let Some((lo, hi)) = self.control_clip {
            if !(lo <= hi) {
                return bad(format!("control clip [{lo}, {hi}] is empty"));
            }
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return bad("initial state must be finite".into());
        }
        AdaptationState::new(self.d_hat0, self.d_min, self.d_max, self.gamma, self.b, self.law)?;
        if self.d_true < self.d_min || self.d_true > self.d_max {
            log::warn!("true delay {} outside the adaptation bounds [{}, {}]", self.d_true, self.d_min, self.d_max);
        }
        Ok(())
    }

    fn history_window(&self) -> f64 {
        (2.0 * self.d_max).max(self.d_true) + 4.0 * self.dt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: f64,
    pub x: Vec<f64>,
    /// Control applied at `t` (after clipping).
    pub u: f64,
    /// Control before clipping.
    pub u_unclipped: f64,
    /// `U(t - D)`, the input reaching the plant.
    pub u_delayed: f64,
    pub d_hat: f64,
    pub phi: f64,
    pub gamma_functional: f64,
    pub upsilon_functional: f64,
    /// `w(1, t) = U(t) - kappa(p(1, t))` for the unclipped control.
    pub w1: f64,
    pub predictor_residual: f64,
    pub predictor_time: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub system: String,
    pub setpoint: Vec<f64>,
    pub steps: Vec<TraceStep>,
    /// Time and reason of a divergence, if the run stopped early.
    pub divergence: Option<(f64, String)>,
}

impl SimulationTrace {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn last(&self) -> Option<&TraceStep> {
        self.steps.last()
    }

    /// Max of `|X(t) - X*|` over `t >= t_from`.
    pub fn max_distance_after(&self, t_from: f64) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.t >= t_from)
            .map(|s| crate::systems::dist(&s.x, &self.setpoint))
            .fold(0.0, f64::max)
    }

    /// Min of `|X(t) - X*|` over `t >= t_from`.
    pub fn min_distance_after(&self, t_from: f64) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.t >= t_from)
            .map(|s| crate::systems::dist(&s.x, &self.setpoint))
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes the trace as CSV:
    /// `t, X_1..X_n, U, d_hat, phi, gamma, upsilon, pred_residual, pred_time_s`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let n = self.setpoint.len();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("X_{i}")));
        header.extend(["U", "d_hat", "phi", "gamma", "upsilon", "pred_residual", "pred_time_s"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for s in &self.steps {
            write!(w, "{}", s.t)?;
            for v in &s.x {
                write!(w, ",{v}")?;
            }
            writeln!(
                w,
                ",{},{},{},{},{},{},{}",
                s.u, s.d_hat, s.phi, s.gamma_functional, s.upsilon_functional, s.predictor_residual, s.predictor_time
            )?;
        }
        Ok(())
    }
}

/// Snapshot handed to observers after each control computation.
pub struct StepObservation<'a> {
    pub step: usize,
    pub t: f64,
    pub x: &'a [f64],
    /// Distributed input fed to the predictor, on the profile grid.
    pub u_profile: &'a [f64],
    /// Delay used to assemble `u_profile` from the history.
    pub u_delay: f64,
    pub d_hat_used: f64,
    pub profile: Option<&'a PredictorProfile>,
    pub history: &'a InputHistory,
}

/// `|X - X*|^2 + int_{t-D}^t (U - U*)^2 + (D - d_hat)^2`.
pub fn gamma_functional(x_err: &[f64], h: &InputHistory, d_true: f64, d_hat: f64, u_star: f64) -> Result<f64> {
    let wf = h.window_functionals_about(d_true, u_star)?;
    let x2: f64 = x_err.iter().map(|v| v * v).sum();
    Ok(x2 + wf.int_u2 + (d_true - d_hat).powi(2))
}

/// `|X - X*| + int (|U - U*| + |U'| + |U''|)` over `[t - max(D, d_hat), t]` plus `(D - d_hat)^2`.
pub fn upsilon_functional(x_err: &[f64], h: &InputHistory, d_true: f64, d_hat: f64, u_star: f64) -> Result<f64> {
    let wf = h.window_functionals_about(d_true.max(d_hat), u_star)?;
    Ok(norm(x_err) + wf.int_abs_u + wf.int_abs_udot + wf.int_abs_uddot + (d_true - d_hat).powi(2))
}

/// Actuator profile `U(t + delay (x_i - 1))` on `grid`, each node holding
/// the mean of the recorded input over its cell. Times past the newest
/// sample hold the newest value.
pub fn input_profile(h: &InputHistory, t: f64, delay: f64, grid: PredictorGrid) -> Vec<f64> {
    let half = 0.5 * delay * grid.dx();
    grid.sample(|x| {
        let theta = t + delay * (x - 1.0);
        h.average_clamped(theta - half, theta + half)
    })
}

pub fn run(cfg: &SimulationConfig) -> Result<SimulationTrace> {
    run_with_observer(cfg, &mut |_: &StepObservation<'_>| {})
}

/// Runs the closed loop, calling `observer` once per step after the
/// predictor solve.
pub fn run_with_observer(cfg: &SimulationConfig, observer: &mut dyn FnMut(&StepObservation<'_>)) -> Result<SimulationTrace> {
    cfg.validate()?;
    let sys = make_system(cfg.system.clone())?;
    let sys = sys.as_ref();
    let n = sys.state_dim();
    if cfg.x0.len() != n {
        return Err(Error::Config(format!("x0 has {} components, system `{}` has {n}", cfg.x0.len(), sys.name())));
    }
    if let PredictorChoice::Neural(model) = &cfg.predictor {
        if model.state_dim() != n {
            return Err(Error::Config(format!(
                "neural model has state dimension {}, system has {n}",
                model.state_dim()
            )));
        }
    }
    let setpoint = sys.setpoint().to_vec();
    let u_star = sys.controller(&setpoint);
    let steps = (cfg.t_final / cfg.dt).round() as usize;
    let mut hist = InputHistory::prefilled(cfg.dt, cfg.history_window(), -cfg.dt, 0.0)?;
    let mut adapt = AdaptationState::new(cfg.d_hat0, cfg.d_min, cfg.d_max, cfg.gamma, cfg.b, cfg.law)?;
    let num_grid = PredictorGrid::new(cfg.grid_points)?;
    let opts = FixedPointOptions { tol: cfg.tol, max_iter: cfg.max_iter };
    let measured_input = cfg.law != AdaptationLaw::Unmeasured;
    let mut x = cfg.x0.clone();
    let mut fx = vec![0.0; n];
    let mut trace = SimulationTrace { system: sys.name().to_string(), setpoint: setpoint.clone(), steps: Vec::with_capacity(steps + 1), divergence: None };
    let mut warm: Option<PredictorProfile> = None;
    let mut last_u = 0.0;
    let mut failures = 0usize;
    let mut warned = false;
    let start = Instant::now();

    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        if x.iter().any(|v| !v.is_finite()) || norm(&x) > DIVERGENCE_NORM {
            trace.divergence = Some((t, format!("state left the finite region: {x:?}")));
            break;
        }
        let d_hat = adapt.d_hat;
        let u_delay = if measured_input { cfg.d_true } else { d_hat };
        let grid = match &cfg.predictor {
            PredictorChoice::Neural(m) => m.output_grid(),
            _ => num_grid,
        };

        // Predictor solve and control.
        let t_solve = Instant::now();
        let mut u_profile = Vec::new();
        let solved: Option<std::result::Result<PredictorProfile, crate::error::SolveError>> = match &cfg.predictor {
            PredictorChoice::None => None,
            PredictorChoice::FixedPoint => {
                u_profile = input_profile(&hist, t, u_delay, grid);
                Some(solve_fixed_point(sys, &x, &u_profile, d_hat, grid, opts, warm.as_ref()))
            }
            PredictorChoice::OdeMarch => {
                u_profile = input_profile(&hist, t, u_delay, grid);
                let half = 0.25 * u_delay * grid.dx();
                let u_at = |s: f64| {
                    let theta = t + u_delay * (s - 1.0);
                    hist.average_clamped(theta - half, theta + half)
                };
                Some(solve_ode_march(sys, &x, &u_at, d_hat, grid))
            }
            PredictorChoice::Neural(model) => {
                u_profile = input_profile(&hist, t, u_delay, grid);
                let u_fine = input_profile(&hist, t, u_delay, num_grid);
                Some(model.predict_profile(&x, &model.resample_input(&u_fine), d_hat))
            }
        };
        let pred_time = t_solve.elapsed().as_secs_f64();
        let (u_raw, profile) = match solved {
            None => match cfg.baseline {
                Baseline::OpenLoop => (0.0, None),
                Baseline::Uncompensated => (sys.controller(&x), None),
            },
            Some(Ok(p)) => {
                failures = 0;
                (sys.controller(p.terminal()), Some(p))
            }
            Some(Err(e)) => {
                failures += 1;
                if !warned {
                    log::warn!("predictor failed at t={t}: {e}; holding the previous control");
                    warned = true;
                }
                if failures > MAX_PREDICTOR_FAILURES {
                    return Err(Error::Diverged { t, reason: format!("predictor failed {failures} consecutive steps: {e}") });
                }
                (last_u, None)
            }
        };
        let u_applied = match cfg.control_clip {
            Some((lo, hi)) => u_raw.clamp(lo, hi),
            None => u_raw,
        };
        observer(&StepObservation {
            step: k,
            t,
            x: &x,
            u_profile: &u_profile,
            u_delay,
            d_hat_used: d_hat,
            profile: profile.as_ref(),
            history: &hist,
        });
        hist.push(t, u_applied)?;
        last_u = u_applied;

        // Update law, using the actuator state including U(t).
        let mut phi = 0.0;
        let mut w1 = 0.0;
        if let Some(p) = &profile {
            w1 = u_raw - sys.controller(p.terminal());
            if adapt.law != AdaptationLaw::Frozen {
                let u_now = input_profile(&hist, t, u_delay, grid);
                phi = match adapt.law {
                    AdaptationLaw::Measured => {
                        let half = 0.25 * u_delay * grid.dx();
                        let u_at = |s: f64| {
                            let theta = t + u_delay * (s - 1.0);
                            hist.average_clamped(theta - half, theta + half)
                        };
                        let w = backstepping_w(sys, p, &u_now);
                        match transition_matrix(sys, p, &u_at, d_hat) {
                            Ok(tm) => phi_measured(sys, &w, &q1_profile(sys, p, &tm, u_now[0]), &x, adapt.b, grid).phi,
                            Err(_) => 0.0,
                        }
                    }
                    AdaptationLaw::Unmeasured => {
                        let u_x = estimated_input_xderiv_profile(&hist, d_hat, grid)?;
                        phi_unmeasured(sys, p, &u_now, &u_x, d_hat).signal.phi
                    }
                    AdaptationLaw::Frozen => 0.0,
                };
            }
        }

        // Diagnostics at time t.
        let x_err: Vec<f64> = x.iter().zip(&setpoint).map(|(a, b)| a - b).collect();
        let (gamma_f, upsilon_f) = if cfg.functional_stride > 0 && (k % cfg.functional_stride == 0 || k == steps) {
            (
                gamma_functional(&x_err, &hist, cfg.d_true, d_hat, u_star).unwrap_or(f64::NAN),
                upsilon_functional(&x_err, &hist, cfg.d_true, d_hat, u_star).unwrap_or(f64::NAN),
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let u_delayed = hist.sample(t - cfg.d_true)?;
        trace.steps.push(TraceStep {
            t,
            x: x.clone(),
            u: u_applied,
            u_unclipped: u_raw,
            u_delayed,
            d_hat,
            phi,
            gamma_functional: gamma_f,
            upsilon_functional: upsilon_f,
            w1,
            predictor_residual: profile.as_ref().map_or(0.0, |p| p.residual),
            predictor_time: pred_time,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if k == steps {
            break;
        }

        // Plant and estimate updates.
        sys.dynamics(&x, u_delayed, &mut fx);
        for (xi, fi) in x.iter_mut().zip(&fx) {
            *xi += cfg.dt * fi;
        }
        adapt.step(phi, cfg.dt);
        if profile.is_some() {
            warm = profile;
        }
    }
    Ok(trace)
}

/// Shared handle used by callers that evaluate many configurations.
pub fn system_for(cfg: &SimulationConfig) -> Result<Arc<dyn SystemModel>> {
    make_system(cfg.system.clone())
}
