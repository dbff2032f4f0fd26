//! Flat `key = value` experiment files.
//!
//! ```text
//! # Fig. 1 style run
//! system = protein
//! predictor = numeric_fixed_point
//! D = 1
//! dhat0 = 2
//! x0 = 0.03, 30
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::adaptation::AdaptationLaw;
use crate::dataset::GenerationConfig;
use crate::error::{Error, Result};
use crate::neural::{load_model, Activation, TrainingConfig};
use crate::simulation::{Baseline, PredictorChoice, SimulationConfig};
use crate::systems::SystemName;

/// Keys understood by [`simulation_config`].
pub const SIMULATION_KEYS: &[&str] = &[
    "system", "predictor", "model", "law", "baseline", "D", "dhat0", "dmin", "dmax", "gamma", "b", "dt", "tf", "N",
    "x0", "clip", "tol", "max_iter", "seed", "functional_stride",
];

/// Ordered key/value pairs with the line each key came from (0 for flags).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String, usize)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if let Some((_, _, first)) = kv.entries.iter().find(|(key, _, _)| key == k) {
                return Err(Error::Config(format!("line {}: key `{k}` already set on line {first}", i + 1)));
            }
            kv.entries.push((k.to_string(), v.to_string(), i + 1));
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: &str, value: &str) {
        match self.entries.iter_mut().find(|(k, _, _)| k == key) {
            Some(e) => {
                e.1 = value.to_string();
                e.2 = 0;
            }
            None => self.entries.push((key.to_string(), value.to_string(), 0)),
        }
    }

    /// Applies command-line flags on top of file values. Flags win; each
    /// conflicting key is logged.
    pub fn override_with(&mut self, flags: &[(String, String)]) {
        for (k, v) in flags {
            if let Some(old) = self.get(k) {
                if old != v {
                    log::info!("flag --{k}={v} overrides config value `{old}`");
                }
            }
            self.set(k, v);
        }
    }

    /// Parses `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("invalid value `{v}` for `{key}`: {e}"))),
        }
    }

    /// Fails on keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self.keys().filter(|k| !allowed.contains(k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

/// Parses a comma-separated list of reals.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("invalid number `{}` in list `{s}`", t.trim()))))
        .collect()
}

fn parse_predictor(s: &str, kv: &KeyValues) -> Result<PredictorChoice> {
    match s.trim().to_ascii_lowercase().as_str() {
        "numeric_fixed_point" | "fixed_point" | "numeric" => Ok(PredictorChoice::FixedPoint),
        "numeric_march" | "march" | "ode" => Ok(PredictorChoice::OdeMarch),
        "none" => Ok(PredictorChoice::None),
        "neural" => {
            let path = kv.get("model").ok_or_else(|| Error::Config("predictor `neural` requires `model`".into()))?;
            Ok(PredictorChoice::Neural(Arc::new(load_model(Path::new(path))?)))
        }
        other => Err(Error::Config(format!(
            "unknown predictor `{other}` (expected numeric_fixed_point, numeric_march, neural or none)"
        ))),
    }
}

/// Builds a simulation configuration from the system's preset and the keys
/// in `kv`.
pub fn simulation_config(kv: &KeyValues) -> Result<SimulationConfig> {
    kv.check_keys(SIMULATION_KEYS)?;
    let system: SystemName = kv.parsed("system")?.unwrap_or(SystemName::Protein);
    let mut c = SimulationConfig::preset(&system);
    if let Some(p) = kv.get("predictor") {
        c.predictor = parse_predictor(p, kv)?;
    }
    if let Some(law) = kv.parsed::<AdaptationLaw>("law")? {
        c.law = law;
    }
    if let Some(b) = kv.parsed::<Baseline>("baseline")? {
        c.baseline = b;
    }
    let reals: [(&str, &mut f64); 8] = [
        ("D", &mut c.d_true),
        ("dhat0", &mut c.d_hat0),
        ("dmin", &mut c.d_min),
        ("dmax", &mut c.d_max),
        ("gamma", &mut c.gamma),
        ("b", &mut c.b),
        ("dt", &mut c.dt),
        ("tf", &mut c.t_final),
    ];
    for (key, slot) in reals {
        if let Some(v) = kv.parsed::<f64>(key)? {
            *slot = v;
        }
    }
    if let Some(v) = kv.parsed::<f64>("tol")? {
        c.tol = v;
    }
    if let Some(v) = kv.parsed::<usize>("N")? {
        c.grid_points = v;
    }
    if let Some(v) = kv.parsed::<usize>("max_iter")? {
        c.max_iter = v;
    }
    if let Some(v) = kv.parsed::<usize>("functional_stride")? {
        c.functional_stride = v;
    }
    if let Some(v) = kv.parsed::<u64>("seed")? {
        c.seed = v;
    }
    if let Some(v) = kv.get("x0") {
        c.x0 = parse_list(v)?;
    }
    if let Some(v) = kv.get("clip") {
        c.control_clip = if v.trim().eq_ignore_ascii_case("none") {
            None
        } else {
            match parse_list(v)?.as_slice() {
                [lo, hi] => Some((*lo, *hi)),
                _ => return Err(Error::Config(format!("clip expects `lo,hi` or `none`, got `{v}`"))),
            }
        };
    }
    c.validate()?;
    Ok(c)
}

/// Keys understood by [`generation_config`].
pub const GENERATION_KEYS: &[&str] = &["system", "n", "seed", "stride", "per_run", "output_points", "N", "dt", "tol", "max_iter"];

/// Builds a dataset generation configuration from the system's preset.
pub fn generation_config(kv: &KeyValues) -> Result<GenerationConfig> {
    kv.check_keys(GENERATION_KEYS)?;
    let system: SystemName = kv.parsed("system")?.unwrap_or(SystemName::Protein);
    let n = kv.parsed::<usize>("n")?.unwrap_or(if system == SystemName::Chemostat { 5000 } else { 2000 });
    let seed = kv.parsed::<u64>("seed")?.unwrap_or(0);
    let mut g = GenerationConfig::preset(&system, n, seed);
    if let Some(v) = kv.parsed::<f64>("stride")? {
        g.stride = v;
    }
    if let Some(v) = kv.parsed::<usize>("per_run")? {
        g.samples_per_run = v;
    }
    if let Some(v) = kv.parsed::<usize>("output_points")? {
        g.output_points = v;
    }
    if let Some(v) = kv.parsed::<usize>("N")? {
        g.sim.grid_points = v;
    }
    if let Some(v) = kv.parsed::<f64>("dt")? {
        g.sim.dt = v;
    }
    if let Some(v) = kv.parsed::<f64>("tol")? {
        g.sim.tol = v;
    }
    if let Some(v) = kv.parsed::<usize>("max_iter")? {
        g.sim.max_iter = v;
    }
    g.validate()?;
    Ok(g)
}

/// Keys understood by [`training_config`].
pub const TRAINING_KEYS: &[&str] = &[
    "epochs", "lr", "batch", "patience", "val_fraction", "test_fraction", "lr_decay", "max_seconds", "seed", "d_c",
    "layers", "input_points", "activation", "residual",
];

/// Builds a training configuration from the defaults.
pub fn training_config(kv: &KeyValues) -> Result<TrainingConfig> {
    kv.check_keys(TRAINING_KEYS)?;
    let mut c = TrainingConfig::default();
    let sizes: [(&str, &mut usize); 6] = [
        ("epochs", &mut c.epochs),
        ("batch", &mut c.batch_size),
        ("patience", &mut c.early_stop_patience),
        ("d_c", &mut c.d_c),
        ("layers", &mut c.n_layers),
        ("input_points", &mut c.input_points),
    ];
    for (key, slot) in sizes {
        if let Some(v) = kv.parsed::<usize>(key)? {
            *slot = v;
        }
    }
    let reals: [(&str, &mut f64); 4] = [
        ("lr", &mut c.learning_rate),
        ("val_fraction", &mut c.validation_fraction),
        ("test_fraction", &mut c.test_fraction),
        ("lr_decay", &mut c.lr_decay),
    ];
    for (key, slot) in reals {
        if let Some(v) = kv.parsed::<f64>(key)? {
            *slot = v;
        }
    }
    if let Some(v) = kv.parsed::<f64>("max_seconds")? {
        c.max_seconds = Some(v);
    }
    if let Some(v) = kv.parsed::<u64>("seed")? {
        c.seed = v;
    }
    if let Some(v) = kv.parsed::<Activation>("activation")? {
        c.activation = v;
    }
    if let Some(v) = kv.parsed::<bool>("residual")? {
        c.residual = v;
    }
    c.validate()?;
    Ok(c)
}
