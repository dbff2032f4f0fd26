//! Loss, analytic gradients and minibatch Adam training.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Activation, InputLayout, NeuralOperatorModel, Normalization};
use crate::dataset::PredictorDataset;
use crate::error::{Error, Result};
use crate::predictor::PredictorGrid;

/// Weight of the `|p(0) - X|^2` boundary term.
pub const BOUNDARY_WEIGHT: f64 = 0.1;
/// Samples per gradient partition; fixed so the reduction order never depends
/// on the worker count.
const PARTITION: usize = 16;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    /// Wall-clock cap on training, in seconds.
    pub max_seconds: Option<f64>,
    pub seed: u64,
    pub d_c: usize,
    pub n_layers: usize,
    pub input_points: usize,
    pub activation: Activation,
    pub residual: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 300,
            early_stop_patience: 60,
            validation_fraction: 0.1,
            test_fraction: 0.1,
            lr_decay: 0.99,
            max_seconds: None,
            seed: 0,
            d_c: 48,
            n_layers: 2,
            input_points: 41,
            activation: Activation::Tanh,
            residual: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.early_stop_patience > 0
            && self.validation_fraction > 0.0
            && self.test_fraction > 0.0
            && self.validation_fraction + self.test_fraction < 1.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.d_c > 0
            && self.input_points >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Sup-norm error on the training split.
    pub train_err: f64,
    /// Sup-norm error on the test split: the empirical approximation error.
    pub test_err: f64,
    pub test_rmse: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seconds: f64,
}

/// A sample prepared for the loss: inputs on the model grid and normalized targets.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub d_hat: f64,
    /// Normalized targets at the output grid, `Q x n`.
    pub target: Vec<f64>,
    /// Normalized boundary target at `s = 0`.
    pub boundary: Vec<f64>,
    /// Raw profile values, `Q x n`.
    pub raw: Vec<f64>,
}

/// Maps nodal cell means onto `to`. Coarsening averages the fine cells that
/// overlap each coarse cell, holding the end values beyond `[0, 1]`;
/// refining interpolates.
pub(crate) fn resample(values: &[f64], to: PredictorGrid) -> Vec<f64> {
    let from = PredictorGrid::new(values.len()).expect("at least two samples");
    if to.n_points() == from.n_points() {
        return values.to_vec();
    }
    if to.n_points() > from.n_points() {
        return to.sample(|x| from.interpolate(values, x));
    }
    let last = values.len() as i64 - 1;
    let ratio = to.dx() / from.dx();
    (0..to.n_points())
        .map(|i| {
            // Coarse cell in fine-cell units, where fine cell j spans [j, j + 1).
            let a = i as f64 * ratio - 0.5 * ratio + 0.5;
            let b = a + ratio;
            let mut acc = 0.0;
            for j in a.floor() as i64..b.ceil() as i64 {
                let overlap = b.min(j as f64 + 1.0) - a.max(j as f64);
                acc += overlap * values[j.clamp(0, last) as usize];
            }
            acc / ratio
        })
        .collect()
}

pub fn prepare(model: &NeuralOperatorModel, x: &[f64], u_fine: &[f64], d_hat: f64, raw: &[f64]) -> PreparedSample {
    let n = model.layout.state_dim;
    let u = resample(u_fine, model.input_grid());
    let target = raw.iter().enumerate().map(|(i, &p)| model.encode_target(x, i % n, p)).collect();
    let boundary = (0..n).map(|k| model.encode_target(x, k, x[k])).collect();
    PreparedSample { x: x.to_vec(), u, d_hat, target, boundary, raw: raw.to_vec() }
}

fn queries(model: &NeuralOperatorModel) -> Vec<f64> {
    let mut q = model.output_grid().points();
    q.push(0.0);
    q
}

/// Mean loss over `samples`.
pub fn loss(model: &NeuralOperatorModel, samples: &[PreparedSample]) -> f64 {
    let qs = queries(model);
    let total: f64 = samples.par_iter().with_min_len(PARTITION).map(|s| sample_loss(model, s, &qs).0).collect::<Vec<_>>().iter().sum();
    total / samples.len() as f64
}

/// Loss of one sample and the gradient of that loss w.r.t. the normalized outputs.
fn sample_loss(model: &NeuralOperatorModel, s: &PreparedSample, qs: &[f64]) -> (f64, Vec<f64>, super::ForwardCache) {
    let n = model.layout.state_dim;
    let q = model.output_points;
    let cache = model.forward_cached(&s.x, &s.u, s.d_hat, qs);
    let mut dout = vec![0.0; (q + 1) * n];
    let mut l = 0.0;
    let w_mse = 1.0 / (q * n) as f64;
    for i in 0..q * n {
        let e = cache.out[i] - s.target[i];
        l += w_mse * e * e;
        dout[i] = 2.0 * w_mse * e;
    }
    let w_b = BOUNDARY_WEIGHT / n as f64;
    for k in 0..n {
        let e = cache.out[q * n + k] - s.boundary[k];
        l += w_b * e * e;
        dout[q * n + k] = 2.0 * w_b * e;
    }
    (l, dout, cache)
}

/// Accumulates the parameter gradient of one sample's loss into `g`.
fn backprop(model: &NeuralOperatorModel, s: &PreparedSample, qs: &[f64], g: &mut [f64]) -> f64 {
    let (l, dout, c) = sample_loss(model, s, qs);
    let d = model.d_c;
    let n = model.layout.state_dim;
    let nodes = model.layout.nodes();
    let f = model.layout.features() + 1;
    let p = &model.params;
    let o = &model.offsets;
    let act = model.activation;

    let mut dpooled = vec![0.0; d];
    let mut da = vec![0.0; d];
    for (qi, &sq) in qs.iter().enumerate() {
        let dq = &dout[qi * n..(qi + 1) * n];
        let h = &c.proj_post[qi * d..(qi + 1) * d];
        let a = &c.proj_pre[qi * d..(qi + 1) * d];
        for k in 0..n {
            g[o.proj_b2 + k] += dq[k];
            let row = o.proj_w2 + k * d;
            for r in 0..d {
                g[row + r] += dq[k] * h[r];
            }
        }
        for r in 0..d {
            let mut dh = 0.0;
            for k in 0..n {
                dh += p[o.proj_w2 + k * d + r] * dq[k];
            }
            da[r] = dh * act.derivative(a[r], h[r]);
        }
        for r in 0..d {
            let row = o.proj_w1 + r * (d + 1);
            let dr = da[r];
            g[o.proj_b1 + r] += dr;
            g[row + d] += dr * sq;
            for cc in 0..d {
                g[row + cc] += dr * c.pooled[cc];
                dpooled[cc] += p[row + cc] * dr;
            }
        }
    }

    let inv = 1.0 / nodes as f64;
    let mut dv: Vec<f64> = (0..nodes * d).map(|i| dpooled[i % d] * inv).collect();
    for (li, &(wo, bo, vo)) in o.hidden.iter().enumerate().rev() {
        let pre = &c.pre[li + 1];
        let post = &c.post[li + 1];
        let input = &c.post[li];
        let mut dal = vec![0.0; nodes * d];
        for i in 0..nodes * d {
            dal[i] = dv[i] * act.derivative(pre[i], post[i]);
        }
        let mut sum = vec![0.0; d];
        let mut dprev = vec![0.0; nodes * d];
        for j in 0..nodes {
            let daj = &dal[j * d..(j + 1) * d];
            let vj = &input[j * d..(j + 1) * d];
            let dpj = &mut dprev[j * d..(j + 1) * d];
            for r in 0..d {
                let dr = daj[r];
                sum[r] += dr;
                let row = wo + r * d;
                let gw = &mut g[row..row + d];
                for cc in 0..d {
                    gw[cc] += dr * vj[cc];
                }
                let w = &p[row..row + d];
                for cc in 0..d {
                    dpj[cc] += w[cc] * dr;
                }
            }
        }
        let mut vt_sum = vec![0.0; d];
        for r in 0..d {
            g[bo + r] += sum[r];
            let row = vo + r * d;
            for cc in 0..d {
                g[row + cc] += sum[r] * c.means[li][cc];
                vt_sum[cc] += p[row + cc] * sum[r];
            }
        }
        for j in 0..nodes {
            for cc in 0..d {
                dprev[j * d + cc] += vt_sum[cc] * inv;
            }
        }
        dv = dprev;
    }

    for j in 0..nodes {
        let zj = &c.z[j * f..(j + 1) * f];
        for r in 0..d {
            let i = j * d + r;
            let dr = dv[i] * act.derivative(c.pre[0][i], c.post[0][i]);
            g[o.lift_b + r] += dr;
            let row = o.lift_w + r * f;
            for cc in 0..f {
                g[row + cc] += dr * zj[cc];
            }
        }
    }
    l
}

/// Mean loss and its gradient over `samples`, reduced in a fixed order.
pub fn gradient(model: &NeuralOperatorModel, samples: &[PreparedSample]) -> (f64, Vec<f64>) {
    let qs = queries(model);
    let parts: Vec<(f64, Vec<f64>)> = samples
        .par_chunks(PARTITION)
        .map(|chunk| {
            let mut g = vec![0.0; model.params.len()];
            let mut l = 0.0;
            for s in chunk {
                l += backprop(model, s, &qs, &mut g);
            }
            (l, g)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; model.params.len()];
    for (l, g) in parts {
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / samples.len() as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    (total * inv, grad)
}

/// Sup-norm and root-mean-square errors of raw predictions on `samples`.
pub fn evaluate(model: &NeuralOperatorModel, samples: &[PreparedSample]) -> (f64, f64) {
    let qs = model.output_grid().points();
    let errs: Vec<(f64, f64, usize)> = samples
        .par_iter()
        .with_min_len(PARTITION)
        .map(|s| {
            let out = model.forward(&s.x, &s.u, s.d_hat, &qs).unwrap_or_else(|_| vec![f64::INFINITY; s.raw.len()]);
            let mut sup = 0.0f64;
            let mut sq = 0.0;
            for (a, b) in out.iter().zip(&s.raw) {
                let e = (a - b).abs();
                sup = sup.max(e);
                sq += e * e;
            }
            (sup, sq, out.len())
        })
        .collect();
    let sup = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let (sq, cnt) = errs.iter().fold((0.0, 0usize), |acc, e| (acc.0 + e.1, acc.1 + e.2));
    (sup, (sq / cnt.max(1) as f64).sqrt())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Deterministic train/validation/test split of `len` indices.
pub fn split_indices(len: usize, cfg: &TrainingConfig) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5711));
    let n_val = ((cfg.validation_fraction * len as f64).round() as usize).max(1);
    let n_test = ((cfg.test_fraction * len as f64).round() as usize).max(1);
    let test = idx.split_off(len - n_test);
    let val = idx.split_off(idx.len() - n_val);
    (idx, val, test)
}

/// Trains a model on `ds`, returning the best-validation checkpoint.
pub fn train(ds: &PredictorDataset, cfg: &TrainingConfig) -> Result<(NeuralOperatorModel, TrainingReport)> {
    cfg.validate()?;
    if ds.len() < 3 {
        return Err(Error::Training(format!("dataset has {} samples; at least 3 are needed to split", ds.len())));
    }
    ds.validate()?;
    let n = ds.layout.state_dim;
    let started = Instant::now();
    let layout = InputLayout { state_dim: n, input_points: cfg.input_points, includes_delay: true };
    let mut model = NeuralOperatorModel::new(layout, cfg.d_c, cfg.n_layers, ds.layout.output_points, cfg.activation, cfg.residual, cfg.seed)?;
    let (train_idx, val_idx, test_idx) = split_indices(ds.len(), cfg);
    if train_idx.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }

    // Normalization from the training split only.
    let in_grid = model.input_grid();
    let feature_rows: Vec<Vec<f64>> = train_idx
        .iter()
        .flat_map(|&i| {
            let s = &ds.samples[i];
            let u = resample(&s.u, in_grid);
            u.into_iter().map(move |uj| {
                let mut row = vec![uj];
                row.extend_from_slice(&s.x);
                row.push(s.d_hat);
                row
            })
        })
        .collect();
    model.norm_in = Normalization::fit(layout.features(), feature_rows.iter().map(|r| r.as_slice()));
    let out_rows: Vec<Vec<f64>> = train_idx
        .iter()
        .flat_map(|&i| {
            let s = &ds.samples[i];
            s.target.chunks_exact(n).map(move |p| {
                if cfg.residual {
                    p.iter().zip(&s.x).map(|(a, b)| a - b).collect()
                } else {
                    p.to_vec()
                }
            })
        })
        .collect();
    model.norm_out = Normalization::fit(n, out_rows.iter().map(|r| r.as_slice()));

    let prep = |ids: &[usize], m: &NeuralOperatorModel| -> Vec<PreparedSample> {
        ids.iter().map(|&i| {
            let s = &ds.samples[i];
            prepare(m, &s.x, &s.u, s.d_hat, &s.target)
        }).collect()
    };
    let train_set = prep(&train_idx, &model);
    let val_set = prep(&val_idx, &model);
    let test_set = prep(&test_idx, &model);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(model.params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (loss(&model, &val_set), model.params.clone(), 0usize);
    let mut since_best = 0usize;
    let mut lr = cfg.learning_rate;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<PreparedSample> = batch.iter().map(|&i| train_set[i].clone()).collect();
            let (l, g) = gradient(&model, &samples);
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite loss {l} at epoch {epoch}, batch {bi}")));
            }
            adam.step(&mut model.params, &g, lr);
        }
        lr *= cfg.lr_decay;
        epochs_run = epoch;
        let val = loss(&model, &val_set);
        if !val.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        if val < best.0 {
            best = (val, model.params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::debug!("epoch {epoch}: validation loss {val:.3e} (best {:.3e} at {})", best.0, best.2);
        if since_best >= cfg.early_stop_patience {
            break;
        }
        if cfg.max_seconds.is_some_and(|cap| started.elapsed().as_secs_f64() > cap) {
            log::info!("training stopped at the time cap after {epoch} epochs");
            break;
        }
    }
    model.params = best.1;
    let (train_err, _) = evaluate(&model, &train_set);
    let (test_err, test_rmse) = evaluate(&model, &test_set);
    let report = TrainingReport {
        train_err,
        test_err,
        test_rmse,
        best_val_loss: best.0,
        best_epoch: best.2,
        epochs_run,
        seed: cfg.seed,
        train_size: train_set.len(),
        val_size: val_set.len(),
        test_size: test_set.len(),
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
