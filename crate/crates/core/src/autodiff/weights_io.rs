//! Weight file: one JSON header line, a newline, then every parameter as a
//! little-endian f64 in [`MlpParams::to_flat`] order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::MlpParams;
use crate::error::{Result, VfmError};

pub const WEIGHT_FORMAT: &str = "vfm-mlp-weights";
pub const WEIGHT_VERSION: u32 = 1;

/// Affine maps between physical and network units, stored with the weights
/// so a warm start can tell what the parameters were trained against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub r_min: f64,
    pub r_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Physical velocity represented by one network output unit (m/s).
    pub vel_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightFileHeader {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub n_params: usize,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

pub fn encode_weights(params: &MlpParams, normalization: Option<Normalization>) -> Result<Vec<u8>> {
    let flat = params.to_flat();
    let header = WeightFileHeader {
        format: WEIGHT_FORMAT.into(),
        version: WEIGHT_VERSION,
        layer_sizes: params.layer_sizes(),
        activation: "tanh".into(),
        n_params: flat.len(),
        normalization,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(flat.len() * 8);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(WeightFileHeader, &[u8])> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| VfmError::Parse("weight file has no header line".into()))?;
    let header: WeightFileHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| VfmError::Parse(format!("weight header: {e}")))?;
    Ok((header, &bytes[split + 1..]))
}

pub fn decode_weights(bytes: &[u8]) -> Result<(MlpParams, WeightFileHeader)> {
    let (header, body) = split_header(bytes)?;
    if header.format != WEIGHT_FORMAT || header.version != WEIGHT_VERSION {
        return Err(VfmError::Parse(format!(
            "unsupported weight file {} v{}",
            header.format, header.version
        )));
    }
    if header.activation != "tanh" {
        return Err(VfmError::Parse(format!("unsupported activation {}", header.activation)));
    }
    if body.len() != header.n_params * 8 {
        return Err(VfmError::Parse(format!(
            "weight payload has {} bytes, header promises {} parameters",
            body.len(),
            header.n_params
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(VfmError::NonFinite("weight file parameters".into()));
    }
    let params = MlpParams::from_flat(&header.layer_sizes, &flat)
        .map_err(|e| VfmError::Parse(format!("weight payload: {e}")))?;
    Ok((params, header))
}

pub fn save_weights(params: &MlpParams, normalization: Option<Normalization>, path: &Path) -> Result<()> {
    let bytes = encode_weights(params, normalization)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Load a weight file, requiring the given architecture.
pub fn load_weights(path: &Path, expected_sizes: &[usize]) -> Result<(MlpParams, WeightFileHeader)> {
    let bytes = fs::read(path)?;
    let (header, _) = split_header(&bytes)?;
    if header.layer_sizes != expected_sizes {
        return Err(VfmError::ArchitectureMismatch {
            expected: expected_sizes.to_vec(),
            found: header.layer_sizes,
        });
    }
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LAYER_SIZES;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = MlpParams::init(3);
        let norm = Normalization {
            r_min: 0.02,
            r_max: 0.12,
            theta_min: -0.6,
            theta_max: 0.6,
            vel_scale: 0.37,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&p, Some(norm), &path).unwrap();
        let (q, h) = load_weights(&path, &LAYER_SIZES).unwrap();
        assert_eq!(h.normalization, Some(norm));
        for (a, b) in p.to_flat().iter().zip(q.to_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_architecture_rejected() {
        let p = MlpParams::init_with(&[2, 8, 2], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&p, None, &path).unwrap();
        assert!(matches!(
            load_weights(&path, &LAYER_SIZES),
            Err(VfmError::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = encode_weights(&MlpParams::init(0), None).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_weights(cut), Err(VfmError::Parse(_))));
        assert!(matches!(decode_weights(b"{}"), Err(VfmError::Parse(_))));
    }
}
