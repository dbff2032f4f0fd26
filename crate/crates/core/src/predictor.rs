//! Numerical predictors on a uniform grid of `[0, 1]`.
//!
//! The predictor satisfies `p(x) = X + d * int_0^x f(p(y), u(y)) dy`. Two
//! solvers are provided: successive approximation with trapezoid quadrature
//! and a classical fourth-order march of `dp/dx = d f(p, u(x))`. This module
//! also integrates the transition matrix of the linearized profile and the
//! signals consumed by the measured-input update law.

use crate::error::SolveError;
use crate::systems::SystemModel;

/// Uniform grid `x_i = i / (N - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorGrid {
    n_points: usize,
}

impl PredictorGrid {
    pub fn new(n_points: usize) -> Result<Self, SolveError> {
        if n_points < 2 {
            return Err(SolveError::Invalid(format!("grid needs at least 2 points, got {n_points}")));
        }
        Ok(PredictorGrid { n_points })
    }

    /// Grid with `N = round(1/dx) + 1` points.
    pub fn from_dx(dx: f64) -> Result<Self, SolveError> {
        if !(dx > 0.0 && dx <= 1.0) {
            return Err(SolveError::Invalid(format!("dx must lie in (0, 1], got {dx}")));
        }
        Self::new((1.0 / dx).round() as usize + 1)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.n_points - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            1.0
        } else {
            i as f64 / (self.n_points - 1) as f64
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    /// Samples `g` at every grid point.
    pub fn sample(&self, g: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n_points).map(|i| g(self.x(i))).collect()
    }

    /// Trapezoid rule for `int_0^1 g(x) dx` given grid values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_points);
        let inner: f64 = values[1..values.len() - 1].iter().sum();
        self.dx() * (inner + 0.5 * (values[0] + values[values.len() - 1]))
    }

    /// Linear interpolation of grid values at `x` in `[0, 1]`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let pos = x.clamp(0.0, 1.0) * (self.n_points - 1) as f64;
        let j = (pos.floor() as usize).min(self.n_points - 2);
        let w = pos - j as f64;
        (1.0 - w) * values[j] + w * values[j + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    FixedPoint,
    OdeMarch,
    Neural,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::FixedPoint => "fixed_point",
            SolverKind::OdeMarch => "ode_march",
            SolverKind::Neural => "neural",
        })
    }
}

/// Predictor curve on a grid, stored row-major as `N x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorProfile {
    pub grid: PredictorGrid,
    pub state_dim: usize,
    pub values: Vec<f64>,
    pub delay_used: f64,
    pub solver: SolverKind,
    pub iterations: usize,
    pub residual: f64,
}

impl PredictorProfile {
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// `p(1)`, the state predicted one delay ahead.
    pub fn terminal(&self) -> &[f64] {
        self.at(self.grid.n_points() - 1)
    }

    /// Sup-norm distance between two profiles on the same grid.
    pub fn sup_distance(&self, other: &PredictorProfile) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Transition matrices `Phi(x_i, 0)`, stored as `N` row-major `n x n` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub state_dim: usize,
    pub values: Vec<f64>,
}

impl TransitionMatrix {
    pub fn at(&self, i: usize) -> &[f64] {
        let nn = self.state_dim * self.state_dim;
        &self.values[i * nn..(i + 1) * nn]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { tol: 1e-10, max_iter: 200 }
    }
}

fn check_inputs(sys: &dyn SystemModel, x: &[f64], delay: f64) -> Result<(), SolveError> {
    if x.len() != sys.state_dim() {
        return Err(SolveError::Invalid(format!("state has length {}, system expects {}", x.len(), sys.state_dim())));
    }
    if !(delay >= 0.0) || !delay.is_finite() {
        return Err(SolveError::Invalid(format!("delay must be finite and nonnegative, got {delay}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::Divergence { node: 0 });
    }
    Ok(())
}

/// Evaluates `f(p_i, u_i)` at every node into `g`.
fn eval_field(sys: &dyn SystemModel, p: &[f64], u: &[f64], g: &mut [f64]) -> Result<(), SolveError> {
    let n = sys.state_dim();
    for (i, (pi, gi)) in p.chunks_exact(n).zip(g.chunks_exact_mut(n)).enumerate() {
        sys.dynamics(pi, u[i], gi);
        if gi.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::Divergence { node: i });
        }
    }
    Ok(())
}

/// Writes `X + d * cumulative_trapezoid(g)` into `out` and returns the sup
/// distance between `out` and `prev`.
fn integral_map(x: &[f64], delay: f64, dx: f64, g: &[f64], prev: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len();
    let half = 0.5 * dx * delay;
    let mut diff = 0.0f64;
    out[..n].copy_from_slice(x);
    for k in 0..n {
        diff = diff.max((out[k] - prev[k]).abs());
    }
    let nodes = g.len() / n;
    for i in 1..nodes {
        for k in 0..n {
            let v = out[(i - 1) * n + k] + half * (g[(i - 1) * n + k] + g[i * n + k]);
            out[i * n + k] = v;
            diff = diff.max((v - prev[i * n + k]).abs());
        }
    }
    diff
}

/// Max deviation of `p` from the trapezoid integral form.
pub fn integral_residual(sys: &dyn SystemModel, x: &[f64], u: &[f64], delay: f64, grid: PredictorGrid, p: &[f64]) -> Result<f64, SolveError> {
    let mut g = vec![0.0; p.len()];
    eval_field(sys, p, u, &mut g)?;
    let mut out = vec![0.0; p.len()];
    Ok(integral_map(x, delay, grid.dx(), &g, p, &mut out))
}

/// Successive approximation of the predictor equation on `grid`.
///
/// `u` holds the distributed input at the grid nodes. Iteration starts from
/// `warm` when given (and compatible), otherwise from `p = X`. The returned
/// profile is the last iterate whose integral-form residual is below `tol`.
pub fn solve_fixed_point(
    sys: &dyn SystemModel,
    x: &[f64],
    u: &[f64],
    delay: f64,
    grid: PredictorGrid,
    opts: FixedPointOptions,
    warm: Option<&PredictorProfile>,
) -> Result<PredictorProfile, SolveError> {
    check_inputs(sys, x, delay)?;
    let n = sys.state_dim();
    let nodes = grid.n_points();
    if u.len() != nodes {
        return Err(SolveError::Invalid(format!("input profile has {} samples, grid has {nodes}", u.len())));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(SolveError::Invalid("tolerance must be positive and max_iter nonzero".into()));
    }
    let mut p = match warm {
        Some(w) if w.grid == grid && w.state_dim == n && w.values.iter().all(|v| v.is_finite()) => {
            let mut v = w.values.clone();
            v[..n].copy_from_slice(x);
            v
        }
        _ => x.repeat(nodes),
    };
    let mut next = vec![0.0; nodes * n];
    let mut g = vec![0.0; nodes * n];
    let dx = grid.dx();
    let mut residual = f64::INFINITY;
    for k in 1..=opts.max_iter {
        eval_field(sys, &p, u, &mut g)?;
        residual = integral_map(x, delay, dx, &g, &p, &mut next);
        if !residual.is_finite() {
            return Err(SolveError::Divergence { node: next.iter().position(|v| !v.is_finite()).unwrap_or(0) / n });
        }
        if residual < opts.tol {
            return Ok(PredictorProfile {
                grid,
                state_dim: n,
                values: p,
                delay_used: delay,
                solver: SolverKind::FixedPoint,
                iterations: k,
                residual,
            });
        }
        std::mem::swap(&mut p, &mut next);
    }
    Err(SolveError::NonConvergence { iterations: opts.max_iter, residual })
}

/// Classical RK4 march of `dp/dx = d f(p, u(x))`, `p(0) = X`.
///
/// `u_at` is queried at nodes and midpoints. The residual is computed a
/// posteriori against the trapezoid integral form.
pub fn solve_ode_march(
    sys: &dyn SystemModel,
    x: &[f64],
    u_at: &dyn Fn(f64) -> f64,
    delay: f64,
    grid: PredictorGrid,
) -> Result<PredictorProfile, SolveError> {
    check_inputs(sys, x, delay)?;
    let n = sys.state_dim();
    let nodes = grid.n_points();
    let h = grid.dx();
    let mut values = vec![0.0; nodes * n];
    values[..n].copy_from_slice(x);
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut u_nodes = vec![0.0; nodes];
    u_nodes[0] = u_at(0.0);
    for i in 0..nodes - 1 {
        let xi = grid.x(i);
        let u0 = u_nodes[i];
        let um = u_at(xi + 0.5 * h);
        let u1 = u_at(grid.x(i + 1));
        u_nodes[i + 1] = u1;
        let (done, rest) = values.split_at_mut((i + 1) * n);
        let p = &done[i * n..];
        sys.dynamics(p, u0, &mut k1);
        for k in 0..n {
            tmp[k] = p[k] + 0.5 * h * delay * k1[k];
        }
        sys.dynamics(&tmp, um, &mut k2);
        for k in 0..n {
            tmp[k] = p[k] + 0.5 * h * delay * k2[k];
        }
        sys.dynamics(&tmp, um, &mut k3);
        for k in 0..n {
            tmp[k] = p[k] + h * delay * k3[k];
        }
        sys.dynamics(&tmp, u1, &mut k4);
        for k in 0..n {
            let v = p[k] + h * delay / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            if !v.is_finite() {
                return Err(SolveError::Divergence { node: i + 1 });
            }
            rest[k] = v;
        }
    }
    let residual = integral_residual(sys, x, &u_nodes, delay, grid, &values)?;
    Ok(PredictorProfile {
        grid,
        state_dim: n,
        values,
        delay_used: delay,
        solver: SolverKind::OdeMarch,
        iterations: nodes - 1,
        residual,
    })
}

fn matmul(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = s;
        }
    }
}

/// Integrates `dPhi/dx = d J(p(x), u(x)) Phi`, `Phi(0) = I`, by RK4 on the
/// profile's grid. Midpoint states come from cubic Hermite interpolation of
/// the profile using `p' = d f(p, u)`.
pub fn transition_matrix(
    sys: &dyn SystemModel,
    profile: &PredictorProfile,
    u_at: &dyn Fn(f64) -> f64,
    delay: f64,
) -> Result<TransitionMatrix, SolveError> {
    let n = profile.state_dim;
    let nn = n * n;
    let grid = profile.grid;
    let nodes = grid.n_points();
    let h = grid.dx();
    let mut out = vec![0.0; nodes * nn];
    for k in 0..n {
        out[k * n + k] = 1.0;
    }
    let mut slope = vec![0.0; nodes * n];
    let u_nodes = grid.sample(u_at);
    eval_field(sys, &profile.values, &u_nodes, &mut slope)?;
    let mut j0 = vec![0.0; nn];
    let mut jm = vec![0.0; nn];
    let mut j1 = vec![0.0; nn];
    let mut pm = vec![0.0; n];
    let mut stage = vec![0.0; nn];
    let mut k1 = vec![0.0; nn];
    let mut k2 = vec![0.0; nn];
    let mut k3 = vec![0.0; nn];
    let mut k4 = vec![0.0; nn];
    for i in 0..nodes - 1 {
        let p0 = profile.at(i);
        let p1 = profile.at(i + 1);
        for k in 0..n {
            pm[k] = 0.5 * (p0[k] + p1[k]) + h * delay / 8.0 * (slope[i * n + k] - slope[(i + 1) * n + k]);
        }
        let um = u_at(grid.x(i) + 0.5 * h);
        sys.jacobian_state(p0, u_nodes[i], &mut j0);
        sys.jacobian_state(&pm, um, &mut jm);
        sys.jacobian_state(p1, u_nodes[i + 1], &mut j1);
        for m in [&mut j0, &mut jm, &mut j1] {
            m.iter_mut().for_each(|v| *v *= delay);
        }
        let (done, rest) = out.split_at_mut((i + 1) * nn);
        let phi = &done[i * nn..];
        matmul(&j0, phi, n, &mut k1);
        for k in 0..nn {
            stage[k] = phi[k] + 0.5 * h * k1[k];
        }
        matmul(&jm, &stage, n, &mut k2);
        for k in 0..nn {
            stage[k] = phi[k] + 0.5 * h * k2[k];
        }
        matmul(&jm, &stage, n, &mut k3);
        for k in 0..nn {
            stage[k] = phi[k] + h * k3[k];
        }
        matmul(&j1, &stage, n, &mut k4);
        for k in 0..nn {
            let v = phi[k] + h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            if !v.is_finite() {
                return Err(SolveError::Divergence { node: i + 1 });
            }
            rest[k] = v;
        }
    }
    Ok(TransitionMatrix { state_dim: n, values: out })
}

/// `w_i = u(x_i) - kappa(p(x_i))`.
pub fn backstepping_w(sys: &dyn SystemModel, profile: &PredictorProfile, u: &[f64]) -> Vec<f64> {
    (0..profile.grid.n_points()).map(|i| u[i] - sys.controller(profile.at(i))).collect()
}

/// `q1_i = grad kappa(p(x_i)) . Phi(x_i, 0) . f(X, u0)`.
pub fn q1_profile(sys: &dyn SystemModel, profile: &PredictorProfile, tm: &TransitionMatrix, u0: f64) -> Vec<f64> {
    let n = profile.state_dim;
    let mut f0 = vec![0.0; n];
    sys.dynamics(profile.at(0), u0, &mut f0);
    let mut grad = vec![0.0; n];
    (0..profile.grid.n_points())
        .map(|i| {
            sys.controller_grad(profile.at(i), &mut grad);
            let phi = tm.at(i);
            let mut s = 0.0;
            for r in 0..n {
                let row: f64 = (0..n).map(|c| phi[r * n + c] * f0[c]).sum();
                s += grad[r] * row;
            }
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_system, LinearScalarSystem, SystemName};

    #[test]
    fn grid_basics() {
        let g = PredictorGrid::from_dx(0.005).unwrap();
        assert_eq!(g.n_points(), 201);
        assert_eq!(g.x(0), 0.0);
        assert_eq!(g.x(200), 1.0);
        assert!(PredictorGrid::new(1).is_err());
        assert!((g.integrate(&g.sample(|x| 1.0 + x)) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn zero_drift_gives_constant_profile_in_one_iteration() {
        let sys = LinearScalarSystem::new(0.0, 1.0).unwrap();
        let grid = PredictorGrid::new(51).unwrap();
        let u = vec![0.0; 51];
        let p = solve_fixed_point(&sys, &[1.7], &u, 1.3, grid, FixedPointOptions::default(), None).unwrap();
        assert_eq!(p.iterations, 1);
        assert!(p.values.iter().all(|&v| v == 1.7));
        let m = solve_ode_march(&sys, &[1.7], &|_| 0.0, 1.3, grid).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.7));
    }

    #[test]
    fn first_node_is_state_exactly() {
        let sys = make_system(SystemName::Protein).unwrap();
        let grid = PredictorGrid::new(101).unwrap();
        let x = [0.03, 30.0];
        let p = solve_fixed_point(sys.as_ref(), &x, &vec![0.0; 101], 1.0, grid, FixedPointOptions::default(), None).unwrap();
        assert_eq!(p.at(0), &x);
        assert!(p.residual < 1e-10);
        let r = integral_residual(sys.as_ref(), &x, &vec![0.0; 101], 1.0, grid, &p.values).unwrap();
        assert_eq!(r, p.residual);
    }

    #[test]
    fn protein_solvers_agree() {
        let sys = make_system(SystemName::Protein).unwrap();
        let grid = PredictorGrid::new(101).unwrap();
        let x = [0.03, 30.0];
        let fp = solve_fixed_point(sys.as_ref(), &x, &vec![0.0; 101], 1.0, grid, FixedPointOptions::default(), None).unwrap();
        let ode = solve_ode_march(sys.as_ref(), &x, &|_| 0.0, 1.0, grid).unwrap();
        let dx = grid.dx();
        assert!(fp.sup_distance(&ode) <= 10.0 * dx * dx, "{}", fp.sup_distance(&ode));
    }

    #[test]
    fn warm_start_reduces_iterations() {
        let sys = make_system(SystemName::Protein).unwrap();
        let grid = PredictorGrid::new(201).unwrap();
        let u: Vec<f64> = grid.points().iter().map(|x| 0.1 * x).collect();
        let cold = solve_fixed_point(sys.as_ref(), &[0.1, 5.0], &u, 1.0, grid, FixedPointOptions::default(), None).unwrap();
        let warm = solve_fixed_point(sys.as_ref(), &[0.1001, 5.0], &u, 1.0, grid, FixedPointOptions::default(), Some(&cold)).unwrap();
        assert!(warm.iterations < cold.iterations, "{} vs {}", warm.iterations, cold.iterations);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let sys = make_system(SystemName::Protein).unwrap();
        let grid = PredictorGrid::new(101).unwrap();
        let opts = FixedPointOptions { tol: 1e-14, max_iter: 2 };
        match solve_fixed_point(sys.as_ref(), &[0.03, 30.0], &vec![0.0; 101], 1.0, grid, opts, None) {
            Err(SolveError::NonConvergence { iterations: 2, residual }) => assert!(residual > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn divergence_on_non_finite_state() {
        let sys = make_system(SystemName::Protein).unwrap();
        let grid = PredictorGrid::new(11).unwrap();
        let r = solve_fixed_point(sys.as_ref(), &[f64::NAN, 1.0], &[0.0; 11], 1.0, grid, FixedPointOptions::default(), None);
        assert!(matches!(r, Err(SolveError::Divergence { .. })));
    }

    #[test]
    fn vanishing_delay_keeps_profile_near_state() {
        let sys = make_system(SystemName::Protein).unwrap();
        let grid = PredictorGrid::new(51).unwrap();
        let x = [0.2, 3.0];
        let p = solve_ode_march(sys.as_ref(), &x, &|_| 0.0, 1e-6, grid).unwrap();
        for i in 0..51 {
            assert!(crate::systems::dist(p.at(i), &x) < 1e-3);
        }
    }

    fn expm_series(a: &[f64], n: usize) -> Vec<f64> {
        // Scaling and squaring with a truncated Taylor series.
        let norm: f64 = a.iter().map(|v| v.abs()).sum();
        let s = (norm.max(1.0).log2().ceil() as i32 + 1).max(0);
        let scale = 2f64.powi(-s);
        let a: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let mut result = vec![0.0; n * n];
        let mut term = vec![0.0; n * n];
        for k in 0..n {
            result[k * n + k] = 1.0;
            term[k * n + k] = 1.0;
        }
        let mut tmp = vec![0.0; n * n];
        for k in 1..30 {
            matmul(&term, &a, n, &mut tmp);
            term.iter_mut().zip(&tmp).for_each(|(t, v)| *t = v / k as f64);
            result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
        }
        for _ in 0..s {
            matmul(&result.clone(), &result.clone(), n, &mut tmp);
            result.copy_from_slice(&tmp);
        }
        result
    }

    /// Linear 2x2 plant with constant Jacobian, for the matrix-exponential oracle.
    struct Linear2 {
        a: [f64; 4],
        inner: crate::systems::LinearScalarSystem,
    }

    impl SystemModel for Linear2 {
        fn name(&self) -> &str {
            "linear2"
        }
        fn state_dim(&self) -> usize {
            2
        }
        fn dynamics(&self, x: &[f64], u: f64, out: &mut [f64]) {
            out[0] = self.a[0] * x[0] + self.a[1] * x[1];
            out[1] = self.a[2] * x[0] + self.a[3] * x[1] + u;
        }
        fn jacobian_state(&self, _x: &[f64], _u: f64, out: &mut [f64]) {
            out.copy_from_slice(&self.a);
        }
        fn jacobian_input(&self, _x: &[f64], _u: f64, out: &mut [f64]) {
            out.copy_from_slice(&[0.0, 1.0]);
        }
        fn controller(&self, x: &[f64]) -> f64 {
            -x[0] - x[1]
        }
        fn controller_grad(&self, _x: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[-1.0, -1.0]);
        }
        fn lyapunov(&self, x: &[f64]) -> f64 {
            x[0] * x[0] + x[1] * x[1]
        }
        fn setpoint(&self) -> &[f64] {
            &[0.0, 0.0]
        }
        fn compact_box(&self) -> &crate::systems::CompactBox {
            self.inner.compact_box()
        }
        fn constants(&self) -> &crate::systems::SystemConstants {
            self.inner.constants()
        }
    }

    #[test]
    fn transition_matrix_matches_matrix_exponential() {
        let sys = Linear2 { a: [0.0, 1.0, -2.0, -0.3], inner: LinearScalarSystem::new(0.0, 1.0).unwrap() };
        let grid = PredictorGrid::new(101).unwrap();
        let delay = 1.4;
        let u = |x: f64| x.sin();
        let prof = solve_ode_march(&sys, &[0.5, -0.2], &u, delay, grid).unwrap();
        let tm = transition_matrix(&sys, &prof, &u, delay).unwrap();
        for i in [0, 10, 50, 100] {
            let scaled: Vec<f64> = sys.a.iter().map(|v| v * delay * grid.x(i)).collect();
            let oracle = expm_series(&scaled, 2);
            for k in 0..4 {
                assert!((tm.at(i)[k] - oracle[k]).abs() < 1e-8, "node {i}: {:?} vs {oracle:?}", tm.at(i));
            }
        }
    }

    #[test]
    fn transition_matrix_scalar_exponential() {
        let sys = LinearScalarSystem::new(-1.0, 1.0).unwrap();
        let grid = PredictorGrid::new(101).unwrap();
        let prof = solve_ode_march(&sys, &[1.0], &|_| 0.0, 2.0, grid).unwrap();
        let tm = transition_matrix(&sys, &prof, &|_| 0.0, 2.0).unwrap();
        assert!((tm.at(100)[0] - (-2.0f64).exp()).abs() < 1e-6);
        let zero = LinearScalarSystem::new(0.0, 1.0).unwrap();
        let tm0 = transition_matrix(&zero, &prof, &|_| 0.0, 2.0).unwrap();
        assert!(tm0.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backstepping_examples() {
        let sys = make_system(SystemName::Protein).unwrap();
        let grid = PredictorGrid::new(101).unwrap();
        let x = [0.03, 30.0];
        let u = vec![0.0; 101];
        let prof = solve_fixed_point(sys.as_ref(), &x, &u, 1.0, grid, FixedPointOptions::default(), None).unwrap();
        let w = backstepping_w(sys.as_ref(), &prof, &u);
        let p = crate::systems::ProteinSystem::new();
        assert!((w[0] - (p.f1(0.03, 30.0) - p.f1(0.0939, 5.2525))).abs() < 1e-14);
        let matched: Vec<f64> = (0..101).map(|i| sys.controller(prof.at(i))).collect();
        assert!(backstepping_w(sys.as_ref(), &prof, &matched).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q1_vanishes_at_rest() {
        let sys = make_system(SystemName::Linear { a: 0.5, b_in: 1.0 }).unwrap();
        let grid = PredictorGrid::new(21).unwrap();
        // f(X, u0) = 0.5 X + u0 = 0 for X = 2, u0 = -1.
        let prof = solve_ode_march(sys.as_ref(), &[2.0], &|_| -1.0, 1.0, grid).unwrap();
        let tm = transition_matrix(sys.as_ref(), &prof, &|_| -1.0, 1.0).unwrap();
        assert!(q1_profile(sys.as_ref(), &prof, &tm, -1.0).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn q1_matches_linear_closed_form() {
        // kappa' = -(a+1)/b, Phi(x) = e^{a d x}, f(X, u0) = a X + b u0
        let (a, b, d) = (-0.4, 2.0, 1.5);
        let sys = make_system(SystemName::Linear { a, b_in: b }).unwrap();
        let grid = PredictorGrid::new(201).unwrap();
        let prof = solve_ode_march(sys.as_ref(), &[0.7], &|x| x, d, grid).unwrap();
        let tm = transition_matrix(sys.as_ref(), &prof, &|x| x, d).unwrap();
        let q1 = q1_profile(sys.as_ref(), &prof, &tm, 0.0);
        for (i, q) in q1.iter().enumerate() {
            let exact = -(a + 1.0) / b * (a * d * grid.x(i)).exp() * (a * 0.7);
            assert!((q - exact).abs() < 1e-9);
        }
    }
}
