//! Predictor latency benchmarks.
//!
//! Every backend in a report consumes the same corpus. Inputs are stored on a
//! fine master grid and resampled to each cell's resolution before timing.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::PredictorDataset;
use crate::error::{Error, Result};
use crate::neural::NeuralOperatorModel;
use crate::predictor::{solve_fixed_point, solve_ode_march, FixedPointOptions, PredictorGrid};
use crate::systems::{make_system, SystemModel, SystemName};

/// Solves discarded before timing each cell.
pub const WARMUP_SOLVES: usize = 50;

/// Points of the master grid every corpus input is stored on (dx = 0.001).
pub const MASTER_POINTS: usize = 1001;

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub x: Vec<f64>,
    /// Input profile on the master grid.
    pub u: Vec<f64>,
    pub d_hat: f64,
}

#[derive(Debug, Clone)]
pub struct BenchCorpus {
    pub system: SystemName,
    pub items: Vec<CorpusItem>,
}

impl BenchCorpus {
    /// Random inputs: states in the compact box, smooth inputs of a few
    /// low-frequency modes, delay estimates in `delay_range`.
    pub fn random(system: &SystemName, n: usize, delay_range: (f64, f64), seed: u64) -> Result<Self> {
        let sys = make_system(system.clone())?;
        let bx = sys.compact_box().clone();
        let us = sys.controller(sys.setpoint());
        let amp = 0.25 * (bx.input_hi - bx.input_lo);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PredictorGrid::new(MASTER_POINTS)?;
        let items = (0..n)
            .map(|_| {
                let x = bx.sample_state(&mut rng);
                let modes: Vec<(f64, f64, f64)> = (0..3)
                    .map(|k| (rng.gen_range(-amp..=amp) / (k + 1) as f64, (k + 1) as f64, rng.gen_range(0.0..std::f64::consts::TAU)))
                    .collect();
                let u = grid.sample(|s| {
                    let v: f64 = modes.iter().map(|(a, w, ph)| a * (std::f64::consts::PI * w * s + ph).sin()).sum();
                    (us + v).clamp(bx.input_lo, bx.input_hi)
                });
                CorpusItem { x, u, d_hat: rng.gen_range(delay_range.0..=delay_range.1) }
            })
            .collect();
        Ok(BenchCorpus { system: system.clone(), items })
    }

    /// The first `n` dataset samples, inputs interpolated onto the master grid.
    pub fn from_dataset(ds: &PredictorDataset, n: usize) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Dataset("cannot build a corpus from an empty dataset".into()));
        }
        let system: SystemName = ds.provenance.system.parse()?;
        let src = ds.layout.input_grid();
        let master = PredictorGrid::new(MASTER_POINTS)?;
        let items = ds
            .samples
            .iter()
            .cycle()
            .take(n)
            .map(|s| CorpusItem { x: s.x.clone(), u: master.sample(|x| src.interpolate(&s.u, x)), d_hat: s.d_hat })
            .collect();
        Ok(BenchCorpus { system, items })
    }

    /// SHA-256 over the little-endian bytes of every stored number.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.to_string().as_bytes());
        for it in &self.items {
            for v in it.x.iter().chain(&it.u).chain(std::iter::once(&it.d_hat)) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    FixedPoint(FixedPointOptions),
    OdeMarch,
    Neural(Arc<NeuralOperatorModel>),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::FixedPoint(_) => "numeric_fixed_point",
            Backend::OdeMarch => "numeric_march",
            Backend::Neural(_) => "neural",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub dx: f64,
    pub backend: String,
    pub mean_s: f64,
    pub std_s: f64,
    /// Baseline mean over this backend's mean; `None` when either cell failed.
    pub speedup: Option<f64>,
    pub solves: usize,
    pub failures: usize,
}

impl BenchCell {
    pub fn failed(&self) -> bool {
        self.failures > 0
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub system: String,
    pub corpus_hash: String,
    pub backends: Vec<String>,
    pub dx: Vec<f64>,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, dx: f64, backend: &str) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.backend == backend && (c.dx - dx).abs() < 1e-12)
    }

    /// One row per step size: mean and standard deviation per backend in
    /// milliseconds, then speedups of every non-baseline backend.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dx");
        for b in &self.backends {
            let _ = write!(out, ",{b}_ms,{b}_std_ms");
        }
        for b in self.backends.iter().skip(1) {
            let _ = write!(out, ",{b}_speedup");
        }
        out.push('\n');
        for &dx in &self.dx {
            let _ = write!(out, "{dx}");
            for b in &self.backends {
                match self.cell(dx, b) {
                    Some(c) if !c.failed() => {
                        let _ = write!(out, ",{:.6},{:.6}", c.mean_s * 1e3, c.std_s * 1e3);
                    }
                    _ => out.push_str(",failed,failed"),
                }
            }
            for b in self.backends.iter().skip(1) {
                match self.cell(dx, b).and_then(|c| c.speedup) {
                    Some(s) => {
                        let _ = write!(out, ",{s:.3}");
                    }
                    None => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }
}

fn grid_for_dx(dx: f64) -> Result<PredictorGrid> {
    let intervals = (1.0 / dx).round();
    if !(dx > 0.0) || intervals < 1.0 || (intervals * dx - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("step size {dx} does not divide [0, 1]")));
    }
    Ok(PredictorGrid::new(intervals as usize + 1)?)
}

fn resample(u: &[f64], grid: PredictorGrid) -> Vec<f64> {
    let master = PredictorGrid::new(u.len()).expect("corpus inputs have at least two points");
    grid.sample(|x| master.interpolate(u, x))
}

fn solve_once(sys: &dyn SystemModel, backend: &Backend, item: &CorpusItem, u: &[f64], grid: PredictorGrid) -> bool {
    match backend {
        Backend::FixedPoint(opts) => solve_fixed_point(sys, &item.x, u, item.d_hat, grid, *opts, None).is_ok(),
        Backend::OdeMarch => {
            let u_at = |s: f64| grid.interpolate(u, s);
            solve_ode_march(sys, &item.x, &u_at, item.d_hat, grid).is_ok()
        }
        Backend::Neural(m) => m.predict_profile(&item.x, &m.resample_input(u), item.d_hat).is_ok(),
    }
}

/// Times every backend at every step size over the first `n_trials` corpus
/// items. The first backend is the speedup baseline. Failures mark the cell
/// and the run continues.
pub fn benchmark_predictors(corpus: &BenchCorpus, backends: &[Backend], dx_list: &[f64], n_trials: usize) -> Result<BenchReport> {
    if corpus.items.is_empty() {
        return Err(Error::Config("benchmark corpus is empty".into()));
    }
    if backends.is_empty() || dx_list.is_empty() {
        return Err(Error::Config("benchmark needs at least one backend and one step size".into()));
    }
    let sys = make_system(corpus.system.clone())?;
    let sys = sys.as_ref();
    for b in backends {
        if let Backend::Neural(m) = b {
            if m.state_dim() != sys.state_dim() {
                return Err(Error::Config("neural model does not match the corpus system".into()));
            }
        }
    }
    let items: Vec<&CorpusItem> = corpus.items.iter().cycle().take(n_trials.max(1)).collect();
    let hash = corpus.hash();
    log::info!("benchmark corpus sha256 {hash}");
    let mut cells = Vec::new();
    for &dx in dx_list {
        let grid = grid_for_dx(dx)?;
        let inputs: Vec<Vec<f64>> = items.iter().map(|it| resample(&it.u, grid)).collect();
        let mut baseline: Option<f64> = None;
        for (bi, backend) in backends.iter().enumerate() {
            for k in 0..WARMUP_SOLVES {
                let j = k % items.len();
                solve_once(sys, backend, items[j], &inputs[j], grid);
            }
            let mut times = Vec::with_capacity(items.len());
            let mut failures = 0;
            for (it, u) in items.iter().zip(&inputs) {
                let start = Instant::now();
                let ok = solve_once(sys, backend, it, u, grid);
                let el = start.elapsed().as_secs_f64();
                if ok {
                    times.push(el);
                } else {
                    failures += 1;
                }
            }
            let count = times.len().max(1) as f64;
            let mean = times.iter().sum::<f64>() / count;
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / count;
            if failures > 0 {
                log::warn!("{} failed on {failures} of {} inputs at dx={dx}", backend.name(), items.len());
            }
            if bi == 0 && failures == 0 {
                baseline = Some(mean);
            }
            let speedup = match (baseline, failures) {
                (Some(b), 0) if mean > 0.0 => Some(b / mean),
                _ => None,
            };
            cells.push(BenchCell {
                dx,
                backend: backend.name().to_string(),
                mean_s: mean,
                std_s: var.sqrt(),
                speedup,
                solves: times.len(),
                failures,
            });
        }
    }
    Ok(BenchReport {
        system: corpus.system.to_string(),
        corpus_hash: hash,
        backends: backends.iter().map(|b| b.name().to_string()).collect(),
        dx: dx_list.to_vec(),
        cells,
    })
}
