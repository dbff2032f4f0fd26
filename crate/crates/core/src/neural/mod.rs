//! Averaging-kernel neural operator approximating the predictor map
//! `(X, u, d_hat) -> p(.)`.
//!
//! Each input grid node `j` carries the features `[u_j, X, d_hat]` and its
//! coordinate `x_j`; two extra nodes carry `X` (coordinate -1) and `d_hat`
//! (coordinate -2). A lifting layer maps node features to `d_c` channels,
//! hidden layers apply `s(W v_j + b + V mean(v))`, and a projection network
//! evaluates the mean-pooled field at query coordinates.

mod io;
mod train;

pub use io::{from_text as model_from_text, load_model, save_model, to_text as model_to_text, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use train::{
    evaluate, gradient, loss, prepare, split_indices, train, PreparedSample, TrainingConfig, TrainingReport,
    BOUNDARY_WEIGHT,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, SolveError};
use crate::predictor::{PredictorGrid, PredictorProfile, SolverKind};

/// Coordinate of the node carrying the state.
pub const STATE_NODE_COORD: f64 = -1.0;
/// Coordinate of the node carrying the delay estimate.
pub const DELAY_NODE_COORD: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let e = (-2.0 * a.abs()).exp();
                ((1.0 - e) / (1.0 + e)).copysign(a)
            }
            Activation::Softplus => {
                if a > 30.0 {
                    a
                } else {
                    a.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation `a` and output `v`.
    #[inline]
    pub fn derivative(self, a: f64, v: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - v * v,
            Activation::Softplus => 1.0 / (1.0 + (-a).exp()),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputLayout {
    pub state_dim: usize,
    pub input_points: usize,
    pub includes_delay: bool,
}

impl InputLayout {
    /// Features per node: `u`, the state, and the delay estimate.
    pub fn features(&self) -> usize {
        self.state_dim + 2
    }

    /// Input grid nodes plus the state and delay nodes.
    pub fn nodes(&self) -> usize {
        self.input_points + 2
    }
}

/// Per-feature affine normalization `z = (y - mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Mean and standard deviation of the rows of `data` (each of length `dim`).
    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            count += 1;
            for k in 0..dim {
                let delta = row[k] - mean[k];
                mean[k] += delta / count as f64;
                m2[k] += delta * (row[k] - mean[k]);
            }
        }
        let scale = m2
            .iter()
            .map(|v| {
                let sd = if count > 1 { (v / (count - 1) as f64).sqrt() } else { 0.0 };
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Normalization { mean, scale }
    }

    #[inline]
    pub fn normalize(&self, k: usize, y: f64) -> f64 {
        (y - self.mean[k]) / self.scale[k]
    }

    #[inline]
    pub fn denormalize(&self, k: usize, z: f64) -> f64 {
        z * self.scale[k] + self.mean[k]
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub lift_w: usize,
    pub lift_b: usize,
    /// `(W, b, V)` offsets per hidden layer.
    pub hidden: Vec<(usize, usize, usize)>,
    pub proj_w1: usize,
    pub proj_b1: usize,
    pub proj_w2: usize,
    pub proj_b2: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(layout: InputLayout, d_c: usize, n_layers: usize) -> Self {
        let f = layout.features() + 1;
        let n = layout.state_dim;
        let mut off = 0;
        let mut take = |len: usize| {
            let o = off;
            off += len;
            o
        };
        let lift_w = take(d_c * f);
        let lift_b = take(d_c);
        let hidden = (0..n_layers).map(|_| (take(d_c * d_c), take(d_c), take(d_c * d_c))).collect();
        let proj_w1 = take(d_c * (d_c + 1));
        let proj_b1 = take(d_c);
        let proj_w2 = take(n * d_c);
        let proj_b2 = take(n);
        ParamLayout { lift_w, lift_b, hidden, proj_w1, proj_b1, proj_w2, proj_b2, total: off }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOperatorModel {
    pub layout: InputLayout,
    pub d_c: usize,
    pub n_layers: usize,
    pub activation: Activation,
    pub output_points: usize,
    /// When set, the network output is added to `X`.
    pub residual: bool,
    /// Normalization of the node features `[u, X, d_hat]`.
    pub norm_in: Normalization,
    /// Normalization of the per-dimension outputs.
    pub norm_out: Normalization,
    pub params: Vec<f64>,
    pub(crate) offsets: ParamLayout,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// Node inputs `[features, coordinate]`, `M x (F + 1)`.
    pub z: Vec<f64>,
    /// Pre-activations and outputs per layer (lifting first), each `M x d_c`.
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
    /// Channel means feeding each hidden layer.
    pub means: Vec<Vec<f64>>,
    /// Pooled field.
    pub pooled: Vec<f64>,
    /// Projection pre-activations and outputs per query, `Q x d_c`.
    pub proj_pre: Vec<f64>,
    pub proj_post: Vec<f64>,
    /// Normalized outputs, `Q x n`.
    pub out: Vec<f64>,
}

impl NeuralOperatorModel {
    /// Randomly initialized model with uniform fan-in scaled weights.
    pub fn new(
        layout: InputLayout,
        d_c: usize,
        n_layers: usize,
        output_points: usize,
        activation: Activation,
        residual: bool,
        seed: u64,
    ) -> Result<Self, Error> {
        if layout.state_dim == 0 || layout.input_points < 2 || output_points < 2 || d_c == 0 {
            return Err(Error::Config("model dimensions must be positive (grids need 2+ points)".into()));
        }
        let offsets = ParamLayout::new(layout, d_c, n_layers);
        let mut params = vec![0.0; offsets.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = layout.features() + 1;
        let n = layout.state_dim;
        let mut fill = |start: usize, len: usize, fan_in: usize| {
            let lim = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[start..start + len] {
                *v = rng.gen_range(-lim..lim);
            }
        };
        fill(offsets.lift_w, d_c * f, f);
        fill(offsets.lift_b, d_c, f);
        for &(w, b, v) in &offsets.hidden {
            fill(w, d_c * d_c, 2 * d_c);
            fill(b, d_c, 2 * d_c);
            fill(v, d_c * d_c, 2 * d_c);
        }
        fill(offsets.proj_w1, d_c * (d_c + 1), d_c + 1);
        fill(offsets.proj_b1, d_c, d_c + 1);
        fill(offsets.proj_w2, n * d_c, d_c);
        fill(offsets.proj_b2, n, d_c);
        Ok(NeuralOperatorModel {
            layout,
            d_c,
            n_layers,
            activation,
            output_points,
            residual,
            norm_in: Normalization::identity(layout.features()),
            norm_out: Normalization::identity(n),
            params,
            offsets,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.layout.state_dim
    }

    pub fn input_grid(&self) -> PredictorGrid {
        PredictorGrid::new(self.layout.input_points).expect("validated at construction")
    }

    /// Maps an input profile of cell means on any uniform grid onto the
    /// model's input grid by cell averaging.
    pub fn resample_input(&self, u_fine: &[f64]) -> Vec<f64> {
        train::resample(u_fine, self.input_grid())
    }

    pub fn output_grid(&self) -> PredictorGrid {
        PredictorGrid::new(self.output_points).expect("validated at construction")
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Fills the node input matrix `M x (F + 1)` from raw inputs.
    pub(crate) fn encode(&self, x: &[f64], u: &[f64], d_hat: f64, z: &mut Vec<f64>) {
        let n = self.layout.state_dim;
        let m = self.layout.input_points;
        let f = self.layout.features() + 1;
        let ni = &self.norm_in;
        z.clear();
        z.resize(self.layout.nodes() * f, 0.0);
        let xn: Vec<f64> = (0..n).map(|k| ni.normalize(1 + k, x[k])).collect();
        let dn = ni.normalize(n + 1, d_hat);
        let step = 1.0 / (m - 1) as f64;
        for j in 0..m {
            let row = &mut z[j * f..(j + 1) * f];
            row[0] = ni.normalize(0, u[j]);
            row[1..=n].copy_from_slice(&xn);
            row[n + 1] = dn;
            row[n + 2] = j as f64 * step;
        }
        let row = &mut z[m * f..(m + 1) * f];
        row[1..=n].copy_from_slice(&xn);
        row[n + 2] = STATE_NODE_COORD;
        let row = &mut z[(m + 1) * f..(m + 2) * f];
        row[n + 1] = dn;
        row[n + 2] = DELAY_NODE_COORD;
    }

    /// Normalized forward pass keeping every intermediate.
    pub(crate) fn forward_cached(&self, x: &[f64], u: &[f64], d_hat: f64, queries: &[f64]) -> ForwardCache {
        let d = self.d_c;
        let nodes = self.layout.nodes();
        let f = self.layout.features() + 1;
        let n = self.layout.state_dim;
        let p = &self.params;
        let o = &self.offsets;
        let act = self.activation;
        let mut z = Vec::new();
        self.encode(x, u, d_hat, &mut z);

        let mut pre = Vec::with_capacity(self.n_layers + 1);
        let mut post = Vec::with_capacity(self.n_layers + 1);
        let mut a0 = vec![0.0; nodes * d];
        let lw = &p[o.lift_w..o.lift_w + d * f];
        let lb = &p[o.lift_b..o.lift_b + d];
        for j in 0..nodes {
            let zj = &z[j * f..(j + 1) * f];
            for r in 0..d {
                a0[j * d + r] = lb[r] + dot(&lw[r * f..(r + 1) * f], zj);
            }
        }
        let v0: Vec<f64> = a0.iter().map(|&a| act.apply(a)).collect();
        pre.push(a0);
        post.push(v0);

        let mut means = Vec::with_capacity(self.n_layers);
        for &(wo, bo, vo) in &o.hidden {
            let prev = post.last().unwrap();
            let mean = channel_mean(prev, nodes, d);
            let w = &p[wo..wo + d * d];
            let vk = &p[vo..vo + d * d];
            let mut shared = p[bo..bo + d].to_vec();
            for r in 0..d {
                shared[r] += dot(&vk[r * d..(r + 1) * d], &mean);
            }
            let mut a = vec![0.0; nodes * d];
            for j in 0..nodes {
                let vj = &prev[j * d..(j + 1) * d];
                for r in 0..d {
                    a[j * d + r] = shared[r] + dot(&w[r * d..(r + 1) * d], vj);
                }
            }
            let v: Vec<f64> = a.iter().map(|&a| act.apply(a)).collect();
            means.push(mean);
            pre.push(a);
            post.push(v);
        }
        let pooled = channel_mean(post.last().unwrap(), nodes, d);

        let q = queries.len();
        let w1 = &p[o.proj_w1..o.proj_w1 + d * (d + 1)];
        let b1 = &p[o.proj_b1..o.proj_b1 + d];
        let w2 = &p[o.proj_w2..o.proj_w2 + n * d];
        let b2 = &p[o.proj_b2..o.proj_b2 + n];
        let mut base = b1.to_vec();
        for r in 0..d {
            base[r] += dot(&w1[r * (d + 1)..r * (d + 1) + d], &pooled);
        }
        let mut proj_pre = vec![0.0; q * d];
        let mut proj_post = vec![0.0; q * d];
        let mut out = vec![0.0; q * n];
        for (qi, &s) in queries.iter().enumerate() {
            for r in 0..d {
                let a = base[r] + w1[r * (d + 1) + d] * s;
                proj_pre[qi * d + r] = a;
                proj_post[qi * d + r] = act.apply(a);
            }
            let h = &proj_post[qi * d..(qi + 1) * d];
            for k in 0..n {
                out[qi * n + k] = b2[k] + dot(&w2[k * d..(k + 1) * d], h);
            }
        }
        ForwardCache { z, pre, post, means, pooled, proj_pre, proj_post, out }
    }

    /// Maps normalized network outputs to predictor values.
    #[inline]
    pub(crate) fn decode(&self, x: &[f64], k: usize, z: f64) -> f64 {
        let y = self.norm_out.denormalize(k, z);
        if self.residual {
            x[k] + y
        } else {
            y
        }
    }

    /// Normalized training target for predictor value `p_k` at state `x`.
    #[inline]
    pub(crate) fn encode_target(&self, x: &[f64], k: usize, p: f64) -> f64 {
        let y = if self.residual { p - x[k] } else { p };
        self.norm_out.normalize(k, y)
    }

    fn check_inputs(&self, x: &[f64], u: &[f64], queries: &[f64]) -> Result<(), SolveError> {
        if x.len() != self.layout.state_dim {
            return Err(SolveError::Invalid(format!("state has {} components, model expects {}", x.len(), self.layout.state_dim)));
        }
        if u.len() != self.layout.input_points {
            return Err(SolveError::Invalid(format!("input has {} samples, model expects {}", u.len(), self.layout.input_points)));
        }
        if let Some(s) = queries.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(SolveError::Invalid(format!("query {s} outside [0, 1]")));
        }
        Ok(())
    }

    /// Inference pass without intermediates. Activations are stored channel
    /// major so the hidden layers reduce to contiguous axpy loops, and grid
    /// nodes share the `X` and `d_hat` features, so lifting costs two terms
    /// per node.
    fn forward_lean(&self, x: &[f64], u: &[f64], d_hat: f64, queries: &[f64]) -> Vec<f64> {
        let d = self.d_c;
        let n = self.layout.state_dim;
        let m = self.layout.input_points;
        let nodes = self.layout.nodes();
        let f = self.layout.features() + 1;
        let p = &self.params;
        let o = &self.offsets;
        let act = self.activation;
        let ni = &self.norm_in;
        let xn: Vec<f64> = (0..n).map(|k| ni.normalize(1 + k, x[k])).collect();
        let dn = ni.normalize(n + 1, d_hat);
        let un: Vec<f64> = u.iter().map(|&v| ni.normalize(0, v)).collect();
        let step = 1.0 / (m - 1) as f64;

        let lw = &p[o.lift_w..o.lift_w + d * f];
        let lb = &p[o.lift_b..o.lift_b + d];
        let mut cur = vec![0.0; d * nodes];
        let mut next = vec![0.0; d * nodes];
        for (r, row) in cur.chunks_exact_mut(nodes).enumerate() {
            let w = &lw[r * f..(r + 1) * f];
            let state_part = lb[r] + dot(&w[1..=n], &xn);
            let shared = state_part + w[n + 1] * dn;
            for j in 0..m {
                row[j] = shared + w[0] * un[j] + w[n + 2] * (j as f64 * step);
            }
            row[m] = state_part + w[n + 2] * STATE_NODE_COORD;
            row[m + 1] = lb[r] + w[n + 1] * dn + w[n + 2] * DELAY_NODE_COORD;
        }
        cur.iter_mut().for_each(|a| *a = act.apply(*a));

        let inv = 1.0 / nodes as f64;
        let row_mean = |v: &[f64]| -> Vec<f64> { v.chunks_exact(nodes).map(|row| row.iter().sum::<f64>() * inv).collect() };
        for &(wo, bo, vo) in &o.hidden {
            let mean = row_mean(&cur);
            let w = &p[wo..wo + d * d];
            let vk = &p[vo..vo + d * d];
            for (r, out_row) in next.chunks_exact_mut(nodes).enumerate() {
                let shared = p[bo + r] + dot(&vk[r * d..(r + 1) * d], &mean);
                out_row.iter_mut().for_each(|a| *a = shared);
                for (c, in_row) in cur.chunks_exact(nodes).enumerate() {
                    let wc = w[r * d + c];
                    for (a, &v) in out_row.iter_mut().zip(in_row) {
                        *a += wc * v;
                    }
                }
                out_row.iter_mut().for_each(|a| *a = act.apply(*a));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let pooled = row_mean(&cur);

        let w1 = &p[o.proj_w1..o.proj_w1 + d * (d + 1)];
        let b1 = &p[o.proj_b1..o.proj_b1 + d];
        let w2 = &p[o.proj_w2..o.proj_w2 + n * d];
        let b2 = &p[o.proj_b2..o.proj_b2 + n];
        let mut base = b1.to_vec();
        let mut slope = vec![0.0; d];
        for r in 0..d {
            base[r] += dot(&w1[r * (d + 1)..r * (d + 1) + d], &pooled);
            slope[r] = w1[r * (d + 1) + d];
        }
        let mut h = vec![0.0; d];
        let mut out = vec![0.0; queries.len() * n];
        for (qi, &s) in queries.iter().enumerate() {
            for r in 0..d {
                h[r] = act.apply(base[r] + slope[r] * s);
            }
            for k in 0..n {
                out[qi * n + k] = self.decode(x, k, b2[k] + dot(&w2[k * d..(k + 1) * d], &h));
            }
        }
        out
    }

    /// Predictor values at `queries`, row-major `Q x n`.
    pub fn forward(&self, x: &[f64], u: &[f64], d_hat: f64, queries: &[f64]) -> Result<Vec<f64>, SolveError> {
        self.check_inputs(x, u, queries)?;
        let n = self.layout.state_dim;
        let out = self.forward_lean(x, u, d_hat, queries);
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(SolveError::Divergence { node: i / n });
        }
        Ok(out)
    }

    /// Profile on the model's output grid, for use as a drop-in predictor.
    pub fn predict_profile(&self, x: &[f64], u: &[f64], d_hat: f64) -> Result<PredictorProfile, SolveError> {
        let grid = self.output_grid();
        let values = self.forward(x, u, d_hat, &grid.points())?;
        Ok(PredictorProfile {
            grid,
            state_dim: self.layout.state_dim,
            values,
            delay_used: d_hat,
            solver: SolverKind::Neural,
            iterations: 1,
            residual: 0.0,
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn channel_mean(v: &[f64], nodes: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for j in 0..nodes {
        for r in 0..d {
            mean[r] += v[j * d + r];
        }
    }
    let inv = 1.0 / nodes as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}
