//! Parameter snapshots: one JSON header line followed by the flattened
//! scalars as little-endian `f64`.
//!
//! The header lists every tensor by name and shape in the layout order of
//! [`ParamSet`], so a reader can reject a snapshot whose structure differs
//! from the template it is loading into, and carries free-form `meta` (the
//! experiment configuration, typically) for rebuilding that template.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numcore::ParamSet;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub format: String,
    pub tensors: Vec<TensorInfo>,
    pub num_scalars: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CheckpointHeader {
    pub fn describe<P: ParamSet>(params: &P, meta: serde_json::Value) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, m)| TensorInfo {
                name,
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            format: CHECKPOINT_FORMAT.to_string(),
            tensors,
            num_scalars: params.num_scalars(),
            meta,
        }
    }
}

/// Writes `params` with `meta` attached. Returns the payload size in bytes
/// (header excluded), always `8 * num_scalars`.
pub fn write_params<P: ParamSet, W: Write>(
    params: &P,
    meta: serde_json::Value,
    mut out: W,
) -> Result<usize> {
    let header = CheckpointHeader::describe(params, meta);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let flat = params.flatten();
    let mut payload = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(payload.len())
}

/// Reads only the header line, leaving `input` positioned at the payload.
pub fn read_header<R: BufRead>(input: &mut R) -> Result<CheckpointHeader> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.is_empty() {
        return config_err("checkpoint is empty");
    }
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return config_err(format!(
            "checkpoint schema_version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
            header.schema_version
        ));
    }
    if header.format != CHECKPOINT_FORMAT {
        return config_err(format!(
            "checkpoint format {:?} is not supported",
            header.format
        ));
    }
    Ok(header)
}

/// Loads a snapshot into `template`, which must have exactly the recorded
/// tensor names and shapes. Returns the header (for its `meta`).
pub fn read_params<P: ParamSet, R: BufRead>(
    template: &mut P,
    mut input: R,
) -> Result<CheckpointHeader> {
    let header = read_header(&mut input)?;
    let expected = CheckpointHeader::describe(template, serde_json::Value::Null);
    if header.tensors != expected.tensors {
        let first = header
            .tensors
            .iter()
            .zip(&expected.tensors)
            .find(|(a, b)| a != b)
            .map(|(a, b)| {
                format!(
                    "found {}:{}x{}, expected {}:{}x{}",
                    a.name, a.rows, a.cols, b.name, b.rows, b.cols
                )
            })
            .unwrap_or_else(|| {
                format!(
                    "{} tensors, expected {}",
                    header.tensors.len(),
                    expected.tensors.len()
                )
            });
        return config_err(format!("checkpoint layout does not match: {first}"));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * expected.num_scalars {
        return config_err(format!(
            "checkpoint payload has {} bytes, expected {}",
            bytes.len(),
            8 * expected.num_scalars
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    template.assign_flat(&flat)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelParams};
    use crate::numcore::Rng;

    fn arch() -> Arch {
        Arch {
            input_dim: 8,
            width: 4,
            blocks: 2,
            focal_levels: 2,
            tokens: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let params = ModelParams::random(&arch(), &mut Rng::new(3));
        let meta = serde_json::json!({"seed": 3});
        let mut buf = Vec::new();
        let bytes = write_params(&params, meta.clone(), &mut buf).unwrap();
        assert_eq!(bytes, 8 * params.num_scalars());
        let mut loaded = ModelParams::zeros(&arch());
        let header = read_params(&mut loaded, buf.as_slice()).unwrap();
        assert!(loaded.bitwise_eq(&params));
        assert_eq!(header.meta, meta);
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let params = ModelParams::random(&arch(), &mut Rng::new(3));
        let mut buf = Vec::new();
        write_params(&params, serde_json::Value::Null, &mut buf).unwrap();
        let mut other = ModelParams::zeros(&Arch { width: 5, ..arch() });
        let err = read_params(&mut other, buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("layout"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let params = ModelParams::random(&arch(), &mut Rng::new(3));
        let mut buf = Vec::new();
        write_params(&params, serde_json::Value::Null, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(read_params(&mut ModelParams::zeros(&arch()), buf.as_slice()).is_err());
    }
}
