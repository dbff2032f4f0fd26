//! Versioned structured-text model files.
//!
//! ```text
//! predictor-lab-neural-operator
//! format_version 1
//! [layout]
//! state_dim 2
//! ...
//! [weights]
//! lift_w 160 0.1 -0.2 ...
//! [end]
//! ```
//! Floats are written in shortest round-trip form, so loading reproduces the
//! saved model bit for bit.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Activation, InputLayout, NeuralOperatorModel, Normalization, ParamLayout};
use crate::error::{Error, FormatError, Result};

pub const MODEL_MAGIC: &str = "predictor-lab-neural-operator";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const SECTIONS: [&str; 5] = ["layout", "architecture", "normalization", "weights", "end"];

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Renders the model file contents.
pub fn to_text(m: &NeuralOperatorModel) -> String {
    let mut out = Vec::new();
    let o = &m.offsets;
    let p = &m.params;
    let d = m.d_c;
    let w = &mut out;
    // Writes to a Vec cannot fail.
    let _ = (|| -> std::io::Result<()> {
        writeln!(w, "{MODEL_MAGIC}")?;
        writeln!(w, "format_version {MODEL_FORMAT_VERSION}")?;
        writeln!(w, "[layout]")?;
        writeln!(w, "state_dim {}", m.layout.state_dim)?;
        writeln!(w, "input_points {}", m.layout.input_points)?;
        writeln!(w, "includes_delay {}", u8::from(m.layout.includes_delay))?;
        writeln!(w, "[architecture]")?;
        writeln!(w, "d_c {d}")?;
        writeln!(w, "n_layers {}", m.n_layers)?;
        writeln!(w, "activation {}", m.activation)?;
        writeln!(w, "output_points {}", m.output_points)?;
        writeln!(w, "residual {}", u8::from(m.residual))?;
        writeln!(w, "[normalization]")?;
        writeln!(w, "in_mean {} {}", m.norm_in.mean.len(), join(&m.norm_in.mean))?;
        writeln!(w, "in_scale {} {}", m.norm_in.scale.len(), join(&m.norm_in.scale))?;
        writeln!(w, "out_mean {} {}", m.norm_out.mean.len(), join(&m.norm_out.mean))?;
        writeln!(w, "out_scale {} {}", m.norm_out.scale.len(), join(&m.norm_out.scale))?;
        writeln!(w, "[weights]")?;
        for (name, start, len) in blocks(m, o) {
            writeln!(w, "{name} {len} {}", join(&p[start..start + len]))?;
        }
        writeln!(w, "[end]")?;
        Ok(())
    })();
    String::from_utf8(out).expect("ascii output")
}

fn blocks(m: &NeuralOperatorModel, o: &ParamLayout) -> Vec<(String, usize, usize)> {
    let d = m.d_c;
    let f = m.layout.features() + 1;
    let n = m.layout.state_dim;
    let mut b = vec![("lift_w".to_string(), o.lift_w, d * f), ("lift_b".to_string(), o.lift_b, d)];
    for (l, &(wo, bo, vo)) in o.hidden.iter().enumerate() {
        b.push((format!("hidden{l}_w"), wo, d * d));
        b.push((format!("hidden{l}_b"), bo, d));
        b.push((format!("hidden{l}_v"), vo, d * d));
    }
    b.push(("proj_w1".into(), o.proj_w1, d * (d + 1)));
    b.push(("proj_b1".into(), o.proj_b1, d));
    b.push(("proj_w2".into(), o.proj_w2, n * d));
    b.push(("proj_b2".into(), o.proj_b2, n));
    b
}

pub fn save_model(m: &NeuralOperatorModel, path: &Path) -> Result<()> {
    fs::write(path, to_text(m))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NeuralOperatorModel> {
    from_text(&fs::read_to_string(path)?)
}

struct Parsed {
    sections: HashMap<String, HashMap<String, (usize, String)>>,
}

impl Parsed {
    fn field(&self, section: &str, key: &str) -> Result<(usize, &str), FormatError> {
        let sec = self.sections.get(section).ok_or_else(|| FormatError::MissingSection(section.into()))?;
        sec.get(key)
            .map(|(line, v)| (*line, v.as_str()))
            .ok_or_else(|| FormatError::MissingSection(format!("{section}.{key}")))
    }

    fn scalar<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T, FormatError> {
        let (line, v) = self.field(section, key)?;
        v.trim().parse().map_err(|_| FormatError::Parse { line, msg: format!("invalid value `{v}` for `{key}`") })
    }

    fn array(&self, section: &str, key: &str, expected: usize) -> Result<Vec<f64>, FormatError> {
        let (line, v) = self.field(section, key)?;
        let mut it = v.split_ascii_whitespace();
        let count: usize = it
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| FormatError::Parse { line, msg: format!("`{key}` lacks a length prefix") })?;
        if count != expected {
            return Err(FormatError::DimensionMismatch { what: key.into(), expected, found: count });
        }
        let values: Vec<f64> = it
            .map(|t| t.parse::<f64>().map_err(|_| FormatError::Parse { line, msg: format!("invalid number `{t}` in `{key}`") }))
            .collect::<Result<_, _>>()?;
        if values.len() != expected {
            return Err(FormatError::DimensionMismatch { what: key.into(), expected, found: values.len() });
        }
        Ok(values)
    }
}

pub fn from_text(text: &str) -> Result<NeuralOperatorModel> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MODEL_MAGIC => {}
        _ => return Err(FormatError::Parse { line: 1, msg: format!("expected `{MODEL_MAGIC}` header") }.into()),
    }
    let version = match lines.next() {
        Some((i, l)) => {
            let v = l.trim().strip_prefix("format_version ").ok_or(FormatError::Parse { line: i + 1, msg: "expected format_version".into() })?;
            v.trim().parse::<u32>().map_err(|_| FormatError::Parse { line: i + 1, msg: format!("invalid version `{v}`") })?
        }
        None => return Err(FormatError::MissingSection("format_version".into()).into()),
    };
    if version != MODEL_FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { found: version, supported: MODEL_FORMAT_VERSION }.into());
    }
    let mut parsed = Parsed { sections: HashMap::new() };
    let mut current: Option<String> = None;
    for (i, raw) in lines {
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            parsed.sections.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        let sec = current.as_ref().ok_or(FormatError::Parse { line: i + 1, msg: "field outside a section".into() })?;
        let (k, v) = l.split_once(' ').ok_or(FormatError::Parse { line: i + 1, msg: format!("malformed line `{l}`") })?;
        parsed.sections.get_mut(sec).unwrap().insert(k.to_string(), (i + 1, v.to_string()));
    }
    for s in SECTIONS {
        if !parsed.sections.contains_key(s) {
            return Err(FormatError::MissingSection(s.into()).into());
        }
    }
    let layout = InputLayout {
        state_dim: parsed.scalar("layout", "state_dim")?,
        input_points: parsed.scalar("layout", "input_points")?,
        includes_delay: parsed.scalar::<u8>("layout", "includes_delay")? != 0,
    };
    let d_c: usize = parsed.scalar("architecture", "d_c")?;
    let n_layers: usize = parsed.scalar("architecture", "n_layers")?;
    let activation: Activation = parsed
        .field("architecture", "activation")
        .map_err(Error::from)
        .and_then(|(_, v)| v.parse())?;
    let output_points: usize = parsed.scalar("architecture", "output_points")?;
    let residual = parsed.scalar::<u8>("architecture", "residual")? != 0;
    let mut m = NeuralOperatorModel::new(layout, d_c, n_layers, output_points, activation, residual, 0)?;
    let fdim = layout.features();
    let n = layout.state_dim;
    m.norm_in = Normalization { mean: parsed.array("normalization", "in_mean", fdim)?, scale: parsed.array("normalization", "in_scale", fdim)? };
    m.norm_out = Normalization { mean: parsed.array("normalization", "out_mean", n)?, scale: parsed.array("normalization", "out_scale", n)? };
    let offsets = m.offsets.clone();
    for (name, start, len) in blocks(&m, &offsets) {
        let values = parsed.array("weights", &name, len)?;
        m.params[start..start + len].copy_from_slice(&values);
    }
    Ok(m)
}
