//! Plant and nominal-controller models.
//!
//! A [`SystemModel`] bundles the plant vector field `f(X, u)`, its Jacobians,
//! the delay-free stabilizing feedback `kappa(X)` with its derivatives, a
//! Lyapunov function, and growth/Lipschitz constants estimated over a compact
//! operating box. Matrices are passed as row-major slices of length `n*n`.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Compact operating box used to estimate the growth and Lipschitz constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactBox {
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub input_lo: f64,
    pub input_hi: f64,
}

impl CompactBox {
    pub fn sample_state(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.state_lo
            .iter()
            .zip(&self.state_hi)
            .map(|(&lo, &hi)| rng.gen_range(lo..=hi))
            .collect()
    }

    pub fn sample_input(&self, rng: &mut impl Rng) -> f64 {
        rng.gen_range(self.input_lo..=self.input_hi)
    }
}

/// Constants of the Lipschitz and growth conditions, measured in coordinates
/// shifted to the setpoint (so that `f(0, 0) = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemConstants {
    /// `C_f`: Lipschitz constant of `f` in `|dX| + |du|`.
    pub lipschitz: f64,
    /// `M1`: `|f(X, U)| <= M1 (|X| + |U|)`.
    pub growth_f: f64,
    /// `M2`: bound on the state Jacobian norm.
    pub jacobian_bound: f64,
    /// `M3`: `|kappa(X)| <= M3 |X|`.
    pub controller_growth: f64,
    /// `M4`: bound on the controller gradient norm.
    pub controller_slope: f64,
    /// `X̄`: largest shifted state norm in the box.
    pub state_bound: f64,
    /// `Ū`: largest shifted input magnitude in the box.
    pub input_bound: f64,
}

impl SystemConstants {
    /// Sampling-based maximization of the constants over `bx`.
    pub fn estimate(sys: &dyn SystemModel, bx: &CompactBox, samples: usize, seed: u64) -> Self {
        let n = sys.state_dim();
        let xs = sys.setpoint().to_vec();
        let us = sys.controller(&xs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jx = vec![0.0; n * n];
        let mut ju = vec![0.0; n];
        let mut fx = vec![0.0; n];
        let mut grad = vec![0.0; n];
        let mut c = SystemConstants {
            lipschitz: 0.0,
            growth_f: 0.0,
            jacobian_bound: 0.0,
            controller_growth: 0.0,
            controller_slope: 0.0,
            state_bound: 0.0,
            input_bound: 0.0,
        };
        for _ in 0..samples {
            let x = bx.sample_state(&mut rng);
            let u = bx.sample_input(&mut rng);
            sys.jacobian_state(&x, u, &mut jx);
            sys.jacobian_input(&x, u, &mut ju);
            sys.dynamics(&x, u, &mut fx);
            sys.controller_grad(&x, &mut grad);
            let jnorm = spectral_norm(&jx, n);
            let unorm = norm(&ju);
            c.jacobian_bound = c.jacobian_bound.max(jnorm);
            c.lipschitz = c.lipschitz.max(jnorm.max(unorm));
            let dx = dist(&x, &xs);
            let du = (u - us).abs();
            if dx + du > 1e-8 {
                c.growth_f = c.growth_f.max(norm(&fx) / (dx + du));
            }
            if dx > 1e-8 {
                c.controller_growth = c
                    .controller_growth
                    .max((sys.controller(&x) - us).abs() / dx);
            }
            c.controller_slope = c.controller_slope.max(norm(&grad));
        }
        // Box extremes are attained at corners.
        for mask in 0..(1usize << n) {
            let corner: Vec<f64> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { bx.state_hi[i] } else { bx.state_lo[i] })
                .collect();
            c.state_bound = c.state_bound.max(dist(&corner, &xs));
        }
        c.input_bound = (bx.input_lo - us).abs().max((bx.input_hi - us).abs());
        c
    }
}

/// A plant `Xdot = f(X, u)` together with its nominal controller.
pub trait SystemModel: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn dynamics(&self, x: &[f64], u: f64, out: &mut [f64]);
    /// `df/dX`, row-major.
    fn jacobian_state(&self, x: &[f64], u: f64, out: &mut [f64]);
    /// `df/du`.
    fn jacobian_input(&self, x: &[f64], u: f64, out: &mut [f64]);
    fn controller(&self, x: &[f64]) -> f64;
    fn controller_grad(&self, x: &[f64], out: &mut [f64]);

    /// Second derivative of the controller, row-major. Falls back to central
    /// differences of the gradient with step `1e-5 (1 + |X|)`.
    fn controller_hessian(&self, x: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let h = 1e-5 * (1.0 + norm(x));
        let mut xp = x.to_vec();
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        for j in 0..n {
            xp[j] = x[j] + h;
            self.controller_grad(&xp, &mut gp);
            xp[j] = x[j] - h;
            self.controller_grad(&xp, &mut gm);
            xp[j] = x[j];
            for i in 0..n {
                out[i * n + j] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
    }

    fn lyapunov(&self, x: &[f64]) -> f64;
    fn setpoint(&self) -> &[f64];
    fn compact_box(&self) -> &CompactBox;
    fn constants(&self) -> &SystemConstants;
}

impl fmt::Debug for dyn SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SystemModel({})", self.name())
    }
}

const CONSTANT_SAMPLES: usize = 100_000;
const CONSTANT_SEED: u64 = 0xC0FFEE;

/// Which benchmark plant to build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SystemName {
    Protein,
    Chemostat,
    Linear { a: f64, b_in: f64 },
}

impl FromStr for SystemName {
    type Err = Error;

    /// Accepts `protein`, `chemostat`, `linear` (a=0, b_in=1) or `linear(a,b_in)`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "protein" => Ok(SystemName::Protein),
            "chemostat" => Ok(SystemName::Chemostat),
            "linear" => Ok(SystemName::Linear { a: 0.0, b_in: 1.0 }),
            _ => {
                let inner = t
                    .strip_prefix("linear(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::UnknownSystem(s.to_string()))?;
                let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(Error::UnknownSystem(s.to_string()));
                }
                let parse = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad linear system parameter `{v}`")))
                };
                Ok(SystemName::Linear { a: parse(parts[0])?, b_in: parse(parts[1])? })
            }
        }
    }
}

impl fmt::Display for SystemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemName::Protein => write!(f, "protein"),
            SystemName::Chemostat => write!(f, "chemostat"),
            SystemName::Linear { a, b_in } => write!(f, "linear({a},{b_in})"),
        }
    }
}

/// Built-in plant by name. The parameter-free plants are constructed once
/// per process and shared.
pub fn make_system(name: SystemName) -> Result<Arc<dyn SystemModel>> {
    static PROTEIN: OnceLock<Arc<dyn SystemModel>> = OnceLock::new();
    static CHEMOSTAT: OnceLock<Arc<dyn SystemModel>> = OnceLock::new();
    Ok(match name {
        SystemName::Protein => PROTEIN.get_or_init(|| Arc::new(ProteinSystem::new())).clone(),
        SystemName::Chemostat => CHEMOSTAT.get_or_init(|| Arc::new(ChemostatSystem::new())).clone(),
        SystemName::Linear { a, b_in } => Arc::new(LinearScalarSystem::new(a, b_in)?),
    })
}

fn placeholder_constants() -> SystemConstants {
    SystemConstants {
        lipschitz: 0.0,
        growth_f: 0.0,
        jacobian_bound: 0.0,
        controller_growth: 0.0,
        controller_slope: 0.0,
        state_bound: 0.0,
        input_bound: 0.0,
    }
}

/// Activator/repressor protein pair with Hill-function kinetics.
#[derive(Debug, Clone)]
pub struct ProteinSystem {
    pub k1: f64,
    pub k2: f64,
    pub ka: f64,
    pub kb: f64,
    setpoint: [f64; 2],
    f1_star: f64,
    bx: CompactBox,
    constants: SystemConstants,
}

impl ProteinSystem {
    pub fn new() -> Self {
        let mut sys = ProteinSystem {
            k1: 300.0,
            k2: 300.0,
            ka: 0.04,
            kb: 0.004,
            setpoint: [0.0939, 5.2525],
            f1_star: 0.0,
            bx: CompactBox {
                state_lo: vec![0.0, 0.0],
                state_hi: vec![0.5, 35.0],
                input_lo: -1.0,
                input_hi: 1.0,
            },
            constants: placeholder_constants(),
        };
        sys.f1_star = sys.f1(sys.setpoint[0], sys.setpoint[1]);
        sys.constants = SystemConstants::estimate(&sys, &sys.bx, CONSTANT_SAMPLES, CONSTANT_SEED);
        sys
    }

    pub fn f1(&self, x1: f64, x2: f64) -> f64 {
        (self.k1 * x1 * x1 + self.ka) / (1.0 + x1 * x1 + x2 * x2)
    }

    pub fn f2(&self, x1: f64) -> f64 {
        (self.k2 * x1 * x1 + self.kb) / (1.0 + x1 * x1)
    }

    fn f1_grad(&self, x1: f64, x2: f64) -> [f64; 2] {
        let num = self.k1 * x1 * x1 + self.ka;
        let den = 1.0 + x1 * x1 + x2 * x2;
        let d2 = den * den;
        [2.0 * x1 * (self.k1 * den - num) / d2, -2.0 * x2 * num / d2]
    }

    /// Hessian of `f1 = N / Q` with `N = k1 x1^2 + ka`, `Q = 1 + x1^2 + x2^2`.
    fn f1_hessian(&self, x1: f64, x2: f64) -> [f64; 4] {
        let n = self.k1 * x1 * x1 + self.ka;
        let q = 1.0 + x1 * x1 + x2 * x2;
        let ni = [2.0 * self.k1 * x1, 0.0];
        let nii = [[2.0 * self.k1, 0.0], [0.0, 0.0]];
        let qi = [2.0 * x1, 2.0 * x2];
        let qii = [[2.0, 0.0], [0.0, 2.0]];
        let mut h = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                let a = (nii[i][j] * q + ni[i] * qi[j] - ni[j] * qi[i] - n * qii[i][j]) / (q * q);
                let b = 2.0 * (ni[i] * q - n * qi[i]) * qi[j] / (q * q * q);
                h[i * 2 + j] = a - b;
            }
        }
        h
    }
}

impl Default for ProteinSystem {
    fn default() -> Self {
        Self::new()
    }
}

impl SystemModel for ProteinSystem {
    fn name(&self) -> &str {
        "protein"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &[f64], u: f64, out: &mut [f64]) {
        out[0] = -x[0] + self.f1(x[0], x[1]) + u;
        out[1] = -0.5 * x[1] + self.f2(x[0]);
    }

    fn jacobian_state(&self, x: &[f64], _u: f64, out: &mut [f64]) {
        let g = self.f1_grad(x[0], x[1]);
        let s = 1.0 + x[0] * x[0];
        out[0] = -1.0 + g[0];
        out[1] = g[1];
        out[2] = 2.0 * x[0] * (self.k2 - self.kb) / (s * s);
        out[3] = -0.5;
    }

    fn jacobian_input(&self, _x: &[f64], _u: f64, out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = 0.0;
    }

    fn controller(&self, x: &[f64]) -> f64 {
        -self.f1(x[0], x[1]) + self.f1_star
    }

    fn controller_grad(&self, x: &[f64], out: &mut [f64]) {
        let g = self.f1_grad(x[0], x[1]);
        out[0] = -g[0];
        out[1] = -g[1];
    }

    fn controller_hessian(&self, x: &[f64], out: &mut [f64]) {
        let h = self.f1_hessian(x[0], x[1]);
        for (o, v) in out.iter_mut().zip(h) {
            *o = -v;
        }
    }

    fn lyapunov(&self, x: &[f64]) -> f64 {
        dist(x, &self.setpoint).powi(2)
    }

    fn setpoint(&self) -> &[f64] {
        &self.setpoint
    }

    fn compact_box(&self) -> &CompactBox {
        &self.bx
    }

    fn constants(&self) -> &SystemConstants {
        &self.constants
    }
}

/// Chemostat with population mortality; state is `(Z, S)`.
#[derive(Debug, Clone)]
pub struct ChemostatSystem {
    pub z_star: f64,
    pub s_star: f64,
    pub u_star: f64,
    pub varsigma: f64,
    pub chi: f64,
    pub s_in: f64,
    pub xi: f64,
    pub rho0: f64,
    setpoint: [f64; 2],
    mu_star: f64,
    bx: CompactBox,
    constants: SystemConstants,
}

impl ChemostatSystem {
    pub fn new() -> Self {
        let mut sys = ChemostatSystem {
            z_star: 3.0,
            s_star: 2.0,
            u_star: 0.9,
            varsigma: 10.0,
            chi: 0.1,
            s_in: 5.33,
            xi: 0.5,
            rho0: 1.0,
            setpoint: [3.0, 2.0],
            mu_star: 0.0,
            bx: CompactBox {
                state_lo: vec![0.5, 0.2],
                state_hi: vec![6.0, 5.0],
                input_lo: 0.0,
                input_hi: 5.0,
            },
            constants: placeholder_constants(),
        };
        sys.mu_star = sys.mu(sys.s_star);
        sys.constants = SystemConstants::estimate(&sys, &sys.bx, CONSTANT_SAMPLES, CONSTANT_SEED);
        sys
    }

    /// Growth rate `mu(S) = 7S / (2(1 + S + S^2))`.
    pub fn mu(&self, s: f64) -> f64 {
        7.0 * s / (2.0 * (1.0 + s + s * s))
    }

    pub fn mu_prime(&self, s: f64) -> f64 {
        let q = 1.0 + s + s * s;
        3.5 * (1.0 - s * s) / (q * q)
    }

    pub fn mu_second(&self, s: f64) -> f64 {
        let q = 1.0 + s + s * s;
        3.5 * (-2.0 * s / (q * q) - 2.0 * (1.0 - s * s) * (1.0 + 2.0 * s) / (q * q * q))
    }

    fn correction_gain(&self) -> f64 {
        self.varsigma * self.chi / self.mu_star.powf(1.0 + self.xi)
    }

    /// The uncorrected dilution rate `U* mu(S) Z / (mu(S*) Z*)`.
    fn proportional_gain(&self) -> f64 {
        self.u_star / (self.mu_star * self.z_star)
    }
}

impl Default for ChemostatSystem {
    fn default() -> Self {
        Self::new()
    }
}

impl SystemModel for ChemostatSystem {
    fn name(&self) -> &str {
        "chemostat"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &[f64], u: f64, out: &mut [f64]) {
        let (z, s) = (x[0], x[1]);
        let mu = self.mu(s);
        out[0] = (self.rho0 * mu - self.chi - u) * z;
        out[1] = u * (self.s_in - s) - mu * z;
    }

    fn jacobian_state(&self, x: &[f64], u: f64, out: &mut [f64]) {
        let (z, s) = (x[0], x[1]);
        let mu = self.mu(s);
        let dmu = self.mu_prime(s);
        out[0] = self.rho0 * mu - self.chi - u;
        out[1] = self.rho0 * dmu * z;
        out[2] = -mu;
        out[3] = -u - dmu * z;
    }

    fn jacobian_input(&self, x: &[f64], _u: f64, out: &mut [f64]) {
        out[0] = -x[0];
        out[1] = self.s_in - x[1];
    }

    fn controller(&self, x: &[f64]) -> f64 {
        let (z, s) = (x[0], x[1]);
        let mu = self.mu(s);
        let base = self.proportional_gain() * mu * z;
        if s <= self.s_star {
            base + self.correction_gain() * (mu - self.mu_star).abs().powf(1.0 + self.xi)
        } else {
            base
        }
    }

    fn controller_grad(&self, x: &[f64], out: &mut [f64]) {
        let (z, s) = (x[0], x[1]);
        let mu = self.mu(s);
        let dmu = self.mu_prime(s);
        let k = self.proportional_gain();
        out[0] = k * mu;
        out[1] = k * dmu * z;
        if s <= self.s_star {
            let e = mu - self.mu_star;
            out[1] += self.correction_gain() * (1.0 + self.xi) * e.abs().powf(self.xi) * e.signum() * dmu;
        }
    }

    fn controller_hessian(&self, x: &[f64], out: &mut [f64]) {
        let (z, s) = (x[0], x[1]);
        let mu = self.mu(s);
        let dmu = self.mu_prime(s);
        let ddmu = self.mu_second(s);
        let k = self.proportional_gain();
        out[0] = 0.0;
        out[1] = k * dmu;
        out[2] = k * dmu;
        out[3] = k * ddmu * z;
        if s <= self.s_star {
            let e = mu - self.mu_star;
            let c = self.correction_gain() * (1.0 + self.xi);
            let mut extra = c * e.abs().powf(self.xi) * e.signum() * ddmu;
            // |e|^(xi-1) is singular at e = 0; the term is dropped there.
            if e.abs() > 1e-12 {
                extra += c * self.xi * e.abs().powf(self.xi - 1.0) * dmu * dmu;
            }
            out[3] += extra;
        }
    }

    fn lyapunov(&self, x: &[f64]) -> f64 {
        dist(x, &self.setpoint).powi(2)
    }

    fn setpoint(&self) -> &[f64] {
        &self.setpoint
    }

    fn compact_box(&self) -> &CompactBox {
        &self.bx
    }

    fn constants(&self) -> &SystemConstants {
        &self.constants
    }
}

/// Scalar linear plant `Xdot = a X + b_in u` with `kappa(X) = -(a + 1) X / b_in`.
#[derive(Debug, Clone)]
pub struct LinearScalarSystem {
    pub a: f64,
    pub b_in: f64,
    bx: CompactBox,
    constants: SystemConstants,
}

impl LinearScalarSystem {
    pub fn new(a: f64, b_in: f64) -> Result<Self> {
        if b_in == 0.0 || !b_in.is_finite() || !a.is_finite() {
            return Err(Error::Config(format!(
                "linear system requires finite a and nonzero b_in (got a={a}, b_in={b_in})"
            )));
        }
        let mut sys = LinearScalarSystem {
            a,
            b_in,
            bx: CompactBox { state_lo: vec![-2.0], state_hi: vec![2.0], input_lo: -2.0, input_hi: 2.0 },
            constants: placeholder_constants(),
        };
        sys.constants = SystemConstants::estimate(&sys, &sys.bx, 1_000, CONSTANT_SEED);
        Ok(sys)
    }

    /// Closed-form predictor `p(x) = e^{a d x} X + b_in d int_0^x e^{a d (x - y)} u(y) dy`,
    /// with the integral evaluated by composite Simpson on `panels` panels.
    pub fn closed_form_predictor(&self, x0: f64, u: impl Fn(f64) -> f64, delay: f64, x: f64, panels: usize) -> f64 {
        let panels = panels.max(2) + panels % 2;
        let h = x / panels as f64;
        let g = |y: f64| (self.a * delay * (x - y)).exp() * u(y);
        let mut acc = g(0.0) + g(x);
        for k in 1..panels {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * g(k as f64 * h);
        }
        (self.a * delay * x).exp() * x0 + self.b_in * delay * acc * h / 3.0
    }
}

impl SystemModel for LinearScalarSystem {
    fn name(&self) -> &str {
        "linear"
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &[f64], u: f64, out: &mut [f64]) {
        out[0] = self.a * x[0] + self.b_in * u;
    }

    fn jacobian_state(&self, _x: &[f64], _u: f64, out: &mut [f64]) {
        out[0] = self.a;
    }

    fn jacobian_input(&self, _x: &[f64], _u: f64, out: &mut [f64]) {
        out[0] = self.b_in;
    }

    fn controller(&self, x: &[f64]) -> f64 {
        -(self.a + 1.0) * x[0] / self.b_in
    }

    fn controller_grad(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = -(self.a + 1.0) / self.b_in;
    }

    fn controller_hessian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn lyapunov(&self, x: &[f64]) -> f64 {
        x[0] * x[0]
    }

    fn setpoint(&self) -> &[f64] {
        &[0.0]
    }

    fn compact_box(&self) -> &CompactBox {
        &self.bx
    }

    fn constants(&self) -> &SystemConstants {
        &self.constants
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest singular value of a small row-major square matrix (power iteration on `A^T A`).
pub(crate) fn spectral_norm(a: &[f64], n: usize) -> f64 {
    if n == 1 {
        return a[0].abs();
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut av = vec![0.0; n];
    let mut sigma = 0.0;
    for _ in 0..50 {
        for i in 0..n {
            av[i] = (0..n).map(|j| a[i * n + j] * v[j]).sum();
        }
        let mut w = vec![0.0; n];
        for j in 0..n {
            w[j] = (0..n).map(|i| a[i * n + j] * av[i]).sum();
        }
        let wn = norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        sigma = wn.sqrt();
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    fn systems() -> Vec<Arc<dyn SystemModel>> {
        vec![
            make_system(SystemName::Protein).unwrap(),
            make_system(SystemName::Chemostat).unwrap(),
            make_system(SystemName::Linear { a: 0.7, b_in: -1.3 }).unwrap(),
        ]
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for sys in systems() {
            let n = sys.state_dim();
            let bx = sys.compact_box().clone();
            for _ in 0..100 {
                let x = bx.sample_state(&mut rng);
                let u = bx.sample_input(&mut rng);
                let mut jac = vec![0.0; n * n];
                sys.jacobian_state(&x, u, &mut jac);
                let mut fp = vec![0.0; n];
                let mut fm = vec![0.0; n];
                for j in 0..n {
                    let h = 1e-6 * (1.0 + x[j].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    sys.dynamics(&xp, u, &mut fp);
                    sys.dynamics(&xm, u, &mut fm);
                    for i in 0..n {
                        let fd = (fp[i] - fm[i]) / (2.0 * h);
                        assert!(rel_err(jac[i * n + j], fd) < 1e-5, "{} d f{i}/dx{j}", sys.name());
                    }
                }
                let mut ju = vec![0.0; n];
                sys.jacobian_input(&x, u, &mut ju);
                let h = 1e-6;
                sys.dynamics(&x, u + h, &mut fp);
                sys.dynamics(&x, u - h, &mut fm);
                for i in 0..n {
                    assert!(rel_err(ju[i], (fp[i] - fm[i]) / (2.0 * h)) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn controller_gradient_and_hessian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for sys in systems() {
            let n = sys.state_dim();
            let bx = sys.compact_box().clone();
            for _ in 0..100 {
                let x = bx.sample_state(&mut rng);
                let mut g = vec![0.0; n];
                sys.controller_grad(&x, &mut g);
                let mut hess = vec![0.0; n * n];
                sys.controller_hessian(&x, &mut hess);
                let mut gp = vec![0.0; n];
                let mut gm = vec![0.0; n];
                for j in 0..n {
                    let h = 1e-6 * (1.0 + x[j].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (sys.controller(&xp) - sys.controller(&xm)) / (2.0 * h);
                    assert!(rel_err(g[j], fd) < 1e-5, "{} dk/dx{j}: {} vs {fd}", sys.name(), g[j]);
                    sys.controller_grad(&xp, &mut gp);
                    sys.controller_grad(&xm, &mut gm);
                    for i in 0..n {
                        let fd2 = (gp[i] - gm[i]) / (2.0 * h);
                        assert!(rel_err(hess[i * n + j], fd2) < 1e-4, "{} hessian", sys.name());
                    }
                }
            }
        }
    }

    #[test]
    fn protein_equilibrium() {
        let sys = make_system(SystemName::Protein).unwrap();
        let xs = sys.setpoint().to_vec();
        assert_eq!(xs, vec![0.0939, 5.2525]);
        let mut f = [0.0; 2];
        sys.dynamics(&xs, sys.controller(&xs), &mut f);
        assert!(f[0].abs() < 1e-3 && f[1].abs() < 1e-3, "{f:?}");
        assert_eq!(sys.lyapunov(&xs), 0.0);
    }

    #[test]
    fn protein_hill_functions() {
        let p = ProteinSystem::new();
        assert!((p.f1(0.0, 0.0) - 0.04).abs() < 1e-15);
        assert!((p.f2(1.0) - 300.004 / 2.0).abs() < 1e-12);
        let x = [0.03, 30.0];
        assert!((p.controller(&x) - (p.f1(0.0939, 5.2525) - p.f1(0.03, 30.0))).abs() < 1e-15);
    }

    #[test]
    fn chemostat_growth_rate_and_continuity() {
        let c = ChemostatSystem::new();
        assert!((c.mu(2.0) - 1.0).abs() < 1e-15);
        let below = c.controller(&[2.5, 2.0 - 1e-9]);
        let above = c.controller(&[2.5, 2.0 + 1e-9]);
        assert!((below - above).abs() < 1e-6);
        let sys = make_system(SystemName::Chemostat).unwrap();
        let xs = sys.setpoint().to_vec();
        assert_eq!(sys.lyapunov(&xs), 0.0);
        assert!((sys.controller(&xs) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn linear_zero_drift_is_pure_input() {
        let sys = make_system(SystemName::Linear { a: 0.0, b_in: 1.0 }).unwrap();
        let mut f = [0.0];
        for (x, u) in [(0.0, 1.0), (3.5, -0.25), (-7.0, 2.0)] {
            sys.dynamics(&[x], u, &mut f);
            assert_eq!(f[0], u);
        }
    }

    #[test]
    fn linear_rejects_zero_input_gain() {
        assert!(matches!(make_system(SystemName::Linear { a: 1.0, b_in: 0.0 }), Err(Error::Config(_))));
    }

    #[test]
    fn system_names_parse() {
        assert_eq!("protein".parse::<SystemName>().unwrap(), SystemName::Protein);
        assert_eq!("chemostat".parse::<SystemName>().unwrap(), SystemName::Chemostat);
        assert_eq!("linear(-1,2)".parse::<SystemName>().unwrap(), SystemName::Linear { a: -1.0, b_in: 2.0 });
        assert!(matches!("pendulum".parse::<SystemName>(), Err(Error::UnknownSystem(_))));
    }

    #[test]
    fn lyapunov_positive_away_from_setpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for sys in systems() {
            let bx = sys.compact_box().clone();
            for _ in 0..200 {
                let x = bx.sample_state(&mut rng);
                if dist(&x, sys.setpoint()) > 1e-9 {
                    assert!(sys.lyapunov(&x) > 0.0);
                }
            }
        }
    }

    #[test]
    fn constants_are_positive_and_finite() {
        for sys in systems() {
            let c = sys.constants();
            for v in [c.lipschitz, c.growth_f, c.jacobian_bound, c.controller_growth, c.controller_slope, c.state_bound, c.input_bound] {
                assert!(v.is_finite() && v > 0.0, "{} {c:?}", sys.name());
            }
        }
    }

    #[test]
    fn linear_closed_form_constant_input() {
        let sys = LinearScalarSystem::new(-1.0, 2.0).unwrap();
        // p(x) = e^{-d x} X + 2 (1 - e^{-d x}) for u = 1
        let d: f64 = 1.5;
        for x in [0.0f64, 0.3, 1.0] {
            let exact = (-d * x).exp() * 0.5 + 2.0 * (1.0 - (-d * x).exp());
            assert!((sys.closed_form_predictor(0.5, |_| 1.0, d, x, 200) - exact).abs() < 1e-10);
        }
    }
}
