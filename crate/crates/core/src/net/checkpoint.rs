//! Binary checkpoint format.
//!
//! ```text
//! "ASFNET1"                 7 magic bytes
//! u32 LE                    format version
//! u32 LE                    descriptor length in bytes
//! descriptor                UTF-8 `key: value` lines
//! f32 LE ...                every block's weights (row-major) then biases
//! ```

use std::fs;
use std::path::Path;

use super::{Architecture, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"ASFNET1";
pub const CHECKPOINT_VERSION: u32 = 1;

const WHAT: &str = "checkpoint";

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn descriptor(p: &ModelParams) -> String {
    let a = &p.arch;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(": ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("frequency_hz", a.frequency_hz.to_string());
    kv("k", a.k.to_string());
    kv("latent_dim", a.latent_dim().to_string());
    kv("pooling", a.pooling.to_string());
    kv("ablation", a.ablation.to_string());
    kv("rbf_scale", a.rbf_scale.to_string());
    kv("target_scale", a.target_scale.to_string());
    kv("input_points", a.input_points.to_string());
    kv("encoder", join(&a.encoder));
    kv("conv_channels", a.conv_channels.to_string());
    kv("mlp", join(&a.mlp));
    kv("fc", join(&a.fc));
    for (name, o, i) in a.blocks() {
        kv("layer", format!("{name} {o}x{i}"));
    }
    kv("parameters", p.parameter_count().to_string());
    s
}

/// Serializes a model to checkpoint bytes.
pub(crate) fn to_bytes(p: &ModelParams) -> Vec<u8> {
    let desc = descriptor(p);
    let mut out = Vec::with_capacity(15 + desc.len() + 4 * p.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    for v in p.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::format(WHAT, format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::format(WHAT, format!("bad width list {v:?}"))))
        .collect()
}

fn parse_descriptor(text: &str) -> Result<(Architecture, usize)> {
    let mut freq = None;
    let mut arch_fields: Vec<(String, String)> = Vec::new();
    let mut count = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::format(WHAT, format!("bad descriptor line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "frequency_hz" => freq = Some(v.parse::<u32>().map_err(|_| Error::format(WHAT, "bad frequency"))?),
            "parameters" => count = Some(v.parse::<usize>().map_err(|_| Error::format(WHAT, "bad parameter count"))?),
            _ => arch_fields.push((k.to_string(), v.to_string())),
        }
    }
    let freq = freq.ok_or_else(|| Error::format(WHAT, "descriptor lacks frequency_hz"))?;
    let mut a = Architecture::new(freq).map_err(|e| Error::format(WHAT, e.to_string()))?;
    let num = |v: &str| v.parse::<f64>().map_err(|_| Error::format(WHAT, format!("bad number {v:?}")));
    let int = |v: &str| v.parse::<usize>().map_err(|_| Error::format(WHAT, format!("bad integer {v:?}")));
    for (k, v) in &arch_fields {
        match k.as_str() {
            "k" => a.k = int(v)?,
            "pooling" => a.pooling = v.parse().map_err(|e: Error| Error::format(WHAT, e.to_string()))?,
            "ablation" => a.ablation = v.parse().map_err(|e: Error| Error::format(WHAT, e.to_string()))?,
            "rbf_scale" => a.rbf_scale = num(v)?,
            "target_scale" => a.target_scale = num(v)?,
            "input_points" => a.input_points = int(v)?,
            "encoder" => a.encoder = parse_list(v)?,
            "conv_channels" => a.conv_channels = int(v)?,
            "mlp" => a.mlp = parse_list(v)?,
            "fc" => a.fc = parse_list(v)?,
            "latent_dim" | "layer" => {}
            _ => return Err(Error::format(WHAT, format!("unknown descriptor key {k:?}"))),
        }
    }
    a.validate().map_err(|e| Error::format(WHAT, e.to_string()))?;
    let count = count.ok_or_else(|| Error::format(WHAT, "descriptor lacks parameters"))?;
    Ok((a, count))
}

/// Parses checkpoint bytes; any inconsistency is an error and no partial
/// model is returned.
pub(crate) fn from_bytes(mut bytes: &[u8]) -> Result<ModelParams> {
    let magic = take(&mut bytes, CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(WHAT, "bad magic bytes"));
    }
    let version = read_u32(&mut bytes, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: WHAT,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = read_u32(&mut bytes, "descriptor length")? as usize;
    let desc = std::str::from_utf8(take(&mut bytes, len, "descriptor")?)
        .map_err(|_| Error::format(WHAT, "descriptor is not UTF-8"))?;
    let (arch, count) = parse_descriptor(desc)?;
    let mut p = ModelParams::zeros(arch)?;
    if p.parameter_count() != count {
        return Err(Error::format(
            WHAT,
            format!("descriptor declares {count} parameters, layers need {}", p.parameter_count()),
        ));
    }
    if bytes.len() != 4 * count {
        return Err(Error::format(
            WHAT,
            format!("expected {} parameter bytes, found {}", 4 * count, bytes.len()),
        ));
    }
    for (v, chunk) in p.values_mut().zip(bytes.chunks_exact(4)) {
        let f = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !f.is_finite() {
            return Err(Error::format(WHAT, "non-finite parameter"));
        }
        *v = f as f64;
    }
    Ok(p)
}

/// Writes a checkpoint atomically (temporary file in the same directory,
/// then rename).
pub fn save_model(p: &ModelParams, path: &Path) -> Result<()> {
    if let Some(v) = p.values().find(|v| !v.is_finite()) {
        return Err(Error::param(format!("refusing to save non-finite parameter {v}")));
    }
    crate::textio::write_bytes(path, &to_bytes(p))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
