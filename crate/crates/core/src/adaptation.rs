//! Delay-estimate update laws with boundary projection.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, HistoryError, Result};
use crate::history::InputHistory;
use crate::predictor::{PredictorGrid, PredictorProfile};
use crate::systems::SystemModel;

/// Dead zone of the sign function used by the unmeasured-input law.
pub const SIGN_DEAD_ZONE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptationLaw {
    Measured,
    Unmeasured,
    Frozen,
}

impl FromStr for AdaptationLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "measured" => Ok(AdaptationLaw::Measured),
            "unmeasured" => Ok(AdaptationLaw::Unmeasured),
            "frozen" => Ok(AdaptationLaw::Frozen),
            other => Err(Error::Config(format!("unknown adaptation law `{other}` (expected measured, unmeasured or frozen)"))),
        }
    }
}

impl fmt::Display for AdaptationLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptationLaw::Measured => "measured",
            AdaptationLaw::Unmeasured => "unmeasured",
            AdaptationLaw::Frozen => "frozen",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationState {
    pub d_hat: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub gamma: f64,
    pub b: f64,
    pub law: AdaptationLaw,
}

impl AdaptationState {
    pub fn new(d_hat: f64, d_min: f64, d_max: f64, gamma: f64, b: f64, law: AdaptationLaw) -> Result<Self> {
        if !(d_min > 0.0) || !(d_max >= d_min) || !d_max.is_finite() {
            return Err(Error::Config(format!("delay bounds must satisfy 0 < d_min <= d_max (got [{d_min}, {d_max}])")));
        }
        if !(d_min..=d_max).contains(&d_hat) {
            return Err(Error::Config(format!("initial estimate {d_hat} outside [{d_min}, {d_max}]")));
        }
        if !(gamma > 0.0) || !(b > 0.0) || !gamma.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!("gamma and b must be positive (got gamma={gamma}, b={b})")));
        }
        Ok(AdaptationState { d_hat, d_min, d_max, gamma, b, law })
    }

    /// One explicit Euler step of `d_hat' = gamma Proj(phi)`, clamped to the bounds.
    /// Frozen states never move.
    pub fn step(&mut self, phi: f64, dt: f64) {
        if self.law == AdaptationLaw::Frozen || !phi.is_finite() {
            return;
        }
        *self = step_delay_estimate(self.clone(), phi, dt);
    }

    /// `D - d_hat` for a known true delay.
    pub fn estimation_error(&self, d_true: f64) -> f64 {
        d_true - self.d_hat
    }
}

/// Zeroes outward pushes at the bounds, identity otherwise.
pub fn project(d_hat: f64, d_min: f64, d_max: f64, phi: f64) -> f64 {
    if (d_hat <= d_min && phi < 0.0) || (d_hat >= d_max && phi > 0.0) {
        0.0
    } else {
        phi
    }
}

pub fn step_delay_estimate(mut st: AdaptationState, phi: f64, dt: f64) -> AdaptationState {
    let rate = st.gamma * project(st.d_hat, st.d_min, st.d_max, phi);
    st.d_hat = (st.d_hat + dt * rate).clamp(st.d_min, st.d_max);
    st
}

/// Update signal together with its per-call magnitude bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateSignal {
    pub phi: f64,
    pub bound: f64,
}

/// Measured-input law
/// `phi = -int (1+x) q1 w dx / (1 + V(X) + b int (1+x) w^2 dx)`.
pub fn phi_measured(sys: &dyn SystemModel, w: &[f64], q1: &[f64], x: &[f64], b: f64, grid: PredictorGrid) -> UpdateSignal {
    let pts = grid.points();
    let num: Vec<f64> = pts.iter().zip(w.iter().zip(q1)).map(|(s, (wi, qi))| (1.0 + s) * qi * wi).collect();
    let energy: Vec<f64> = pts.iter().zip(w).map(|(s, wi)| (1.0 + s) * wi * wi).collect();
    let abs: Vec<f64> = num.iter().map(|v| v.abs()).collect();
    let denom = 1.0 + sys.lyapunov(x) + b * grid.integrate(&energy);
    UpdateSignal { phi: -grid.integrate(&num) / denom, bound: grid.integrate(&abs) }
}

/// `u_hat(x_i) = U(t + d_hat (x_i - 1))`.
pub fn estimated_input_profile(h: &InputHistory, d_hat: f64, grid: PredictorGrid) -> Result<Vec<f64>, HistoryError> {
    (0..grid.n_points()).map(|i| h.distributed_input(d_hat, grid.x(i))).collect()
}

/// `du_hat/dx (x_i) = d_hat U'(t + d_hat (x_i - 1))`.
///
/// The newest sample has no forward neighbour, so the derivative at `x = 1`
/// is evaluated one sample period earlier.
pub fn estimated_input_xderiv_profile(h: &InputHistory, d_hat: f64, grid: PredictorGrid) -> Result<Vec<f64>, HistoryError> {
    let t = h.current_time().ok_or(HistoryError::Invalid("empty history".into()))?;
    let back = h.sample_period() / d_hat;
    (0..grid.n_points())
        .map(|i| {
            let x = grid.x(i).min(1.0 - back).max(0.0);
            h.distributed_input_xderiv_at(t, d_hat, x)
        })
        .collect()
}

pub fn sgn(z: f64) -> f64 {
    if z > SIGN_DEAD_ZONE {
        1.0
    } else if z < -SIGN_DEAD_ZONE {
        -1.0
    } else {
        0.0
    }
}

/// Intermediate fields of the unmeasured-input law, exposed for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmeasuredTerms {
    pub w_hat: Vec<f64>,
    pub w_hat_x: Vec<f64>,
    pub q3: Vec<f64>,
    pub q4: Vec<f64>,
    pub signal: UpdateSignal,
}

/// Unmeasured-input law
/// `phi = 2 sgn(w_x(1)) q3(1) + int (1+x) [q3 sgn(w) + q4 sgn(w_x)] dx`
/// with `q3 = grad kappa(p) . f0`, `q4 = p_x' H_kappa(p) f0`,
/// `p_x = d_hat f(p, u_hat)` and `f0 = f(p(0), u_hat(0))`.
pub fn phi_unmeasured(sys: &dyn SystemModel, p_hat: &PredictorProfile, u_hat: &[f64], u_hat_x: &[f64], d_hat: f64) -> UnmeasuredTerms {
    let n = p_hat.state_dim;
    let grid = p_hat.grid;
    let nodes = grid.n_points();
    let mut f0 = vec![0.0; n];
    sys.dynamics(p_hat.at(0), u_hat[0], &mut f0);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    let mut px = vec![0.0; n];
    let mut terms = UnmeasuredTerms {
        w_hat: Vec::with_capacity(nodes),
        w_hat_x: Vec::with_capacity(nodes),
        q3: Vec::with_capacity(nodes),
        q4: Vec::with_capacity(nodes),
        signal: UpdateSignal { phi: 0.0, bound: 0.0 },
    };
    for i in 0..nodes {
        let p = p_hat.at(i);
        sys.dynamics(p, u_hat[i], &mut px);
        px.iter_mut().for_each(|v| *v *= d_hat);
        sys.controller_grad(p, &mut grad);
        sys.controller_hessian(p, &mut hess);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        terms.w_hat.push(u_hat[i] - sys.controller(p));
        terms.w_hat_x.push(u_hat_x[i] - dot(&grad, &px));
        terms.q3.push(dot(&grad, &f0));
        let mut q4 = 0.0;
        for r in 0..n {
            for c in 0..n {
                q4 += px[r] * hess[r * n + c] * f0[c];
            }
        }
        terms.q4.push(q4);
    }
    let pts = grid.points();
    let integrand: Vec<f64> = (0..nodes)
        .map(|i| (1.0 + pts[i]) * (terms.q3[i] * sgn(terms.w_hat[i]) + terms.q4[i] * sgn(terms.w_hat_x[i])))
        .collect();
    let abs: Vec<f64> = (0..nodes).map(|i| (1.0 + pts[i]) * (terms.q3[i].abs() + terms.q4[i].abs())).collect();
    let last = nodes - 1;
    terms.signal = UpdateSignal {
        phi: 2.0 * sgn(terms.w_hat_x[last]) * terms.q3[last] + grid.integrate(&integrand),
        bound: 2.0 * terms.q3[last].abs() + grid.integrate(&abs),
    };
    terms
}
