//! Predictor training datasets: generation from closed-loop runs and a
//! versioned binary container.
//!
//! File layout: an ASCII header terminated by a line `end_header`, followed by
//! little-endian `f64` records. Each record is `X (n)`, `u (m)`, `d_hat`,
//! `target (Q x n)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::predictor::{solve_fixed_point, FixedPointOptions, PredictorGrid};
use crate::simulation::{run_with_observer, PredictorChoice, SimulationConfig, StepObservation};
use crate::systems::{make_system, SystemName};

pub const DATASET_MAGIC: &str = "predictor-lab-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetLayout {
    pub state_dim: usize,
    pub input_points: usize,
    pub output_points: usize,
}

impl DatasetLayout {
    pub fn record_len(&self) -> usize {
        self.state_dim + self.input_points + 1 + self.output_points * self.state_dim
    }

    pub fn input_grid(&self) -> PredictorGrid {
        PredictorGrid::new(self.input_points).expect("layout validated")
    }

    pub fn output_grid(&self) -> PredictorGrid {
        PredictorGrid::new(self.output_points).expect("layout validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub d_hat: f64,
    /// Predictor profile on the output grid, row-major `Q x n`.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub system: String,
    pub dx: f64,
    pub dt: f64,
    pub seed: u64,
    pub config_hash: String,
    pub tolerance: f64,
    pub skipped_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorDataset {
    pub layout: DatasetLayout,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl PredictorDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let l = self.layout;
        for s in &self.samples {
            let checks = [
                ("x", l.state_dim, s.x.len()),
                ("u", l.input_points, s.u.len()),
                ("target", l.output_points * l.state_dim, s.target.len()),
            ];
            for (what, expected, found) in checks {
                if expected != found {
                    return Err(FormatError::DimensionMismatch { what: what.into(), expected, found });
                }
            }
        }
        Ok(())
    }

    /// Writes the dataset to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let l = self.layout;
        let p = &self.provenance;
        writeln!(w, "{DATASET_MAGIC}")?;
        writeln!(w, "format_version {DATASET_VERSION}")?;
        writeln!(w, "state_dim {}", l.state_dim)?;
        writeln!(w, "input_points {}", l.input_points)?;
        writeln!(w, "output_points {}", l.output_points)?;
        writeln!(w, "samples {}", self.samples.len())?;
        writeln!(w, "system {}", p.system)?;
        writeln!(w, "dx {}", p.dx)?;
        writeln!(w, "dt {}", p.dt)?;
        writeln!(w, "seed {}", p.seed)?;
        writeln!(w, "config_hash {}", p.config_hash)?;
        writeln!(w, "tolerance {}", p.tolerance)?;
        writeln!(w, "skipped_runs {}", p.skipped_runs)?;
        writeln!(w, "end_header")?;
        let mut buf = Vec::with_capacity(l.record_len() * 8);
        for s in &self.samples {
            buf.clear();
            for v in s.x.iter().chain(&s.u).chain(std::iter::once(&s.d_hat)).chain(&s.target) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut line = String::new();
        let mut first = true;
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(FormatError::CorruptHeader("missing end_header".into()).into());
            }
            let text = line.trim_end();
            if first {
                if text != DATASET_MAGIC {
                    return Err(FormatError::CorruptHeader(format!("bad magic `{text}`")).into());
                }
                first = false;
                continue;
            }
            if text == "end_header" {
                break;
            }
            let (k, v) = text
                .split_once(' ')
                .ok_or_else(|| FormatError::CorruptHeader(format!("malformed header line `{text}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String, FormatError> {
            fields.get(k).ok_or_else(|| FormatError::CorruptHeader(format!("missing header field `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, FormatError> {
            v.parse().map_err(|_| FormatError::CorruptHeader(format!("field `{k}` has invalid value `{v}`")))
        }
        let version: u32 = num("format_version", get("format_version")?)?;
        if version != DATASET_VERSION {
            return Err(FormatError::UnsupportedVersion { found: version, supported: DATASET_VERSION }.into());
        }
        let layout = DatasetLayout {
            state_dim: num("state_dim", get("state_dim")?)?,
            input_points: num("input_points", get("input_points")?)?,
            output_points: num("output_points", get("output_points")?)?,
        };
        if layout.state_dim == 0 || layout.input_points < 2 || layout.output_points < 2 {
            return Err(FormatError::CorruptHeader("layout dimensions out of range".into()).into());
        }
        let count: usize = num("samples", get("samples")?)?;
        let provenance = Provenance {
            system: get("system")?.clone(),
            dx: num("dx", get("dx")?)?,
            dt: num("dt", get("dt")?)?,
            seed: num("seed", get("seed")?)?,
            config_hash: get("config_hash")?.clone(),
            tolerance: num("tolerance", get("tolerance")?)?,
            skipped_runs: num("skipped_runs", get("skipped_runs")?)?,
        };
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.is_empty() {
            return Err(FormatError::EmptyPayload.into());
        }
        let rec = layout.record_len();
        let expected = count * rec;
        if payload.len() % 8 != 0 || payload.len() / 8 != expected {
            return Err(FormatError::LengthMismatch { expected, actual: payload.len() / 8 }.into());
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let n = layout.state_dim;
        let m = layout.input_points;
        let samples = values
            .chunks_exact(rec)
            .map(|c| Sample {
                x: c[..n].to_vec(),
                u: c[n..n + m].to_vec(),
                d_hat: c[n + m],
                target: c[n + m + 1..].to_vec(),
            })
            .collect();
        Ok(PredictorDataset { layout, samples, provenance })
    }
}

/// Sampling ranges for the source simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingRanges {
    pub x0_lo: Vec<f64>,
    pub x0_hi: Vec<f64>,
    pub d_true: (f64, f64),
    pub d_hat0: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub system: SystemName,
    pub n_samples: usize,
    pub ranges: SamplingRanges,
    /// Template for the source runs; `x0`, `d_true`, `d_hat0` and `t_final`
    /// are overwritten.
    pub sim: SimulationConfig,
    /// Simulated seconds between harvested tuples.
    pub stride: f64,
    /// Tuples harvested per source run.
    pub samples_per_run: usize,
    /// Points of the stored target grid; must subsample the predictor grid.
    pub output_points: usize,
    pub seed: u64,
}

impl GenerationConfig {
    /// SHA-256 of the configuration's debug rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(format!("{self:?}").as_bytes()))
    }

    /// Default generation settings for a built-in system.
    pub fn preset(system: &SystemName, n_samples: usize, seed: u64) -> Self {
        let mut sim = SimulationConfig::preset(system);
        if *system == SystemName::Chemostat {
            sim.max_iter = 1000;
        }
        let ranges = match system {
            SystemName::Protein => SamplingRanges {
                x0_lo: vec![0.0, 0.0],
                x0_hi: vec![0.2, 40.0],
                d_true: (0.8, 1.2),
                d_hat0: (0.5, 2.5),
            },
            SystemName::Chemostat => SamplingRanges {
                x0_lo: vec![0.5, 0.5],
                x0_hi: vec![4.5, 4.0],
                d_true: (1.3, 1.9),
                d_hat0: (1.2, 2.4),
            },
            SystemName::Linear { .. } => SamplingRanges {
                x0_lo: vec![-1.0],
                x0_hi: vec![1.0],
                d_true: (0.8, 1.2),
                d_hat0: (0.5, 1.5),
            },
        };
        GenerationConfig {
            system: system.clone(),
            n_samples,
            ranges,
            sim,
            stride: if *system == SystemName::Chemostat { 0.5 } else { 1.0 },
            samples_per_run: 20,
            output_points: 41,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.ranges;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if !(self.stride > 0.0) {
            return Err(Error::Config(format!("harvest stride must be positive, got {}", self.stride)));
        }
        if self.samples_per_run == 0 {
            return Err(Error::Config("samples_per_run must be positive".into()));
        }
        if self.output_points < 2 {
            return Err(Error::Config("the output grid needs at least 2 points".into()));
        }
        let fine = self.sim.grid_points;
        if (fine - 1) % (self.output_points - 1) != 0 {
            return Err(Error::Config(format!(
                "output grid of {} points does not subsample the predictor grid of {fine} points",
                self.output_points
            )));
        }
        let pairs = [r.d_true, r.d_hat0];
        if pairs.iter().any(|(lo, hi)| !(lo <= hi) || !(*lo > 0.0)) || r.x0_lo.len() != r.x0_hi.len() {
            return Err(Error::Config("invalid sampling ranges".into()));
        }
        if r.d_hat0.1 > self.sim.d_max || r.d_hat0.0 < self.sim.d_min {
            return Err(Error::Config("initial delay estimates must lie in [d_min, d_max]".into()));
        }
        Ok(())
    }
}

/// Runs closed-loop simulations under sampled initial conditions and delays
/// and harvests `(X, u, d_hat) -> profile` tuples every `stride` seconds.
/// Source runs use the RK4 predictor; each harvested target is the
/// fixed-point solution for the stored input, warm-started from the march.
/// Tuples whose target does not converge are dropped; runs are a quarter
/// longer than the harvest needs so they can still fill their quota.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<PredictorDataset> {
    cfg.validate()?;
    let sys = make_system(cfg.system.clone())?;
    let n = sys.state_dim();
    if cfg.ranges.x0_lo.len() != n {
        return Err(Error::Config(format!("x0 ranges have dimension {}, system has {n}", cfg.ranges.x0_lo.len())));
    }
    let runs = cfg.n_samples.div_ceil(cfg.samples_per_run);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let run_cfgs: Vec<SimulationConfig> = (0..runs)
        .map(|_| {
            let mut sc = cfg.sim.clone();
            sc.system = cfg.system.clone();
            sc.x0 = cfg.ranges.x0_lo.iter().zip(&cfg.ranges.x0_hi).map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect();
            sc.d_true = rng.gen_range(cfg.ranges.d_true.0..=cfg.ranges.d_true.1);
            sc.d_hat0 = rng.gen_range(cfg.ranges.d_hat0.0..=cfg.ranges.d_hat0.1);
            sc.predictor = PredictorChoice::OdeMarch;
            sc.functional_stride = 0;
            sc.t_final = cfg.stride * (cfg.samples_per_run + cfg.samples_per_run.div_ceil(4)) as f64 + cfg.sim.dt;
            sc
        })
        .collect();
    let stride_steps = ((cfg.stride / cfg.sim.dt).round() as usize).max(1);
    let sub = (cfg.sim.grid_points - 1) / (cfg.output_points - 1);
    let per_run = cfg.samples_per_run;
    let grid = PredictorGrid::new(cfg.sim.grid_points)?;
    let opts = FixedPointOptions { tol: cfg.sim.tol, max_iter: cfg.sim.max_iter };
    let results: Vec<(Option<Vec<Sample>>, usize)> = run_cfgs
        .par_iter()
        .map(|sc| {
            let mut harvested = Vec::new();
            let mut dropped = 0usize;
            let mut observer = |obs: &StepObservation<'_>| {
                if obs.step % stride_steps != 0 || obs.step == 0 || harvested.len() >= per_run {
                    return;
                }
                let u = obs.u_profile.to_vec();
                match solve_fixed_point(sys.as_ref(), obs.x, &u, obs.d_hat_used, grid, opts, obs.profile) {
                    Ok(profile) => {
                        let target: Vec<f64> =
                            (0..cfg.output_points).flat_map(|q| profile.at(q * sub).to_vec()).collect();
                        harvested.push(Sample { x: obs.x.to_vec(), u, d_hat: obs.d_hat_used, target });
                    }
                    Err(_) => dropped += 1,
                }
            };
            let kept = match run_with_observer(sc, &mut observer) {
                Ok(trace) if !trace.diverged() && harvested.len() == per_run => Some(harvested),
                Ok(_) | Err(_) => None,
            };
            (kept, dropped)
        })
        .collect();
    let dropped: usize = results.iter().map(|r| r.1).sum();
    if dropped > 0 {
        log::info!("dropped {dropped} tuples whose fixed-point target did not converge");
    }
    let results: Vec<Option<Vec<Sample>>> = results.into_iter().map(|r| r.0).collect();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped * 5 > runs {
        return Err(Error::Dataset(format!("{skipped} of {runs} source runs diverged or were too short")));
    }
    if skipped > 0 {
        log::warn!("dataset generation skipped {skipped} of {runs} source runs");
    }
    let mut samples: Vec<Sample> = results.into_iter().flatten().flatten().collect();
    samples.shuffle(&mut rng);
    if samples.len() < cfg.n_samples {
        log::warn!("dataset has {} samples, {} requested", samples.len(), cfg.n_samples);
    }
    samples.truncate(cfg.n_samples);
    Ok(PredictorDataset {
        layout: DatasetLayout { state_dim: n, input_points: cfg.sim.grid_points, output_points: cfg.output_points },
        samples,
        provenance: Provenance {
            system: cfg.system.to_string(),
            dx: 1.0 / (cfg.sim.grid_points - 1) as f64,
            dt: cfg.sim.dt,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            tolerance: cfg.sim.tol,
            skipped_runs: skipped,
        },
    })
}

/// Re-solves a sample from scratch with the fixed-point solver on the stored
/// input grid and returns the profile at the output grid.
pub fn resolve_sample(ds: &PredictorDataset, sample: &Sample, opts: FixedPointOptions) -> Result<Vec<f64>> {
    let name: SystemName = ds.provenance.system.parse()?;
    let sys = make_system(name)?;
    let grid = ds.layout.input_grid();
    let prof = solve_fixed_point(sys.as_ref(), &sample.x, &sample.u, sample.d_hat, grid, opts, None)?;
    let sub = (grid.n_points() - 1) / (ds.layout.output_points - 1);
    Ok((0..ds.layout.output_points).flat_map(|q| prof.at(q * sub).to_vec()).collect())
}
