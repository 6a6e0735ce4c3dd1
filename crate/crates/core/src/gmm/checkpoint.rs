//! Checkpoint container: one line of JSON header, then length-prefixed
//! little-endian `f32` arrays (`u64` element count, then the values).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::write_atomic;
use crate::error::{Error, Result};

use super::GmmParams;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const GMM_FORMAT: &str = "ar-gmm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub grid_side: usize,
    pub stddev_floor: f64,
    pub seed: u64,
}

impl CheckpointHeader {
    pub fn for_params(params: &GmmParams<f32>, format: &str) -> Self {
        Self {
            format: format.to_string(),
            version: CHECKPOINT_VERSION,
            k: params.k(),
            dim: params.dim(),
            grid_side: params.grid_side(),
            stddev_floor: params.stddev_floor() as f64,
            seed: params.seed(),
        }
    }
}

pub(crate) fn encode_container(header: &Value, arrays: &[&[f32]]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    for a in arrays {
        out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode_container(bytes: &[u8]) -> Result<(Value, Vec<Vec<f32>>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Value = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut rest = &bytes[nl + 1..];
    let mut arrays = Vec::new();
    while !rest.is_empty() {
        if rest.len() < 8 {
            return Err(Error::Checkpoint("truncated array length".into()));
        }
        let n = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        rest = &rest[8..];
        let need = n
            .checked_mul(4)
            .ok_or_else(|| Error::Checkpoint("array length overflow".into()))?;
        if rest.len() < need {
            return Err(Error::Checkpoint(format!(
                "array of {n} floats truncated ({} bytes left)",
                rest.len()
            )));
        }
        arrays.push(
            rest[..need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
        rest = &rest[need..];
    }
    Ok((header, arrays))
}

pub(crate) fn params_from_arrays(
    header: &CheckpointHeader,
    arrays: &mut impl Iterator<Item = Vec<f32>>,
) -> Result<GmmParams<f32>> {
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let mut next = |what: &str| {
        arrays
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing {what} array")))
    };
    let logits = next("weight_logits")?;
    let centroids = next("centroids")?;
    let log_stddevs = next("log_stddevs")?;
    let params = GmmParams::from_parts(header.k, header.dim, logits, centroids, log_stddevs)?
        .with_stddev_floor(header.stddev_floor as f32)
        .with_seed(header.seed);
    if params.grid_side() != header.grid_side {
        return Err(Error::Checkpoint(format!(
            "grid side {} does not match K={}",
            header.grid_side, header.k
        )));
    }
    Ok(params)
}

impl GmmParams<f32> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_value(CheckpointHeader::for_params(self, GMM_FORMAT))
            .expect("header serializes");
        encode_container(
            &header,
            &[self.weight_logits(), self.centroids(), self.log_stddevs()],
        )
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, arrays) = decode_container(bytes)?;
        let header: CheckpointHeader = serde_json::from_value(header)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != GMM_FORMAT {
            return Err(Error::Checkpoint(format!(
                "expected format {GMM_FORMAT:?}, found {:?}",
                header.format
            )));
        }
        params_from_arrays(&header, &mut arrays.into_iter())
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &GmmParams<f32>) -> Result<()> {
    write_atomic(path.as_ref(), &params.to_checkpoint_bytes())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<GmmParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GmmParams::from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ImageSet;

    #[test]
    fn round_trip_is_bit_exact() {
        let batch = ImageSet::new((0..30).map(|i| i as f32 / 30.0).collect(), 3).unwrap();
        let mut p = GmmParams::<f32>::init(9, 3, 42, &batch).unwrap();
        crate::gmm::sgd_step(&mut p, &batch, 0.05, 1.0).unwrap();
        let bytes = p.to_checkpoint_bytes();
        let back = GmmParams::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        let header =
            std::str::from_utf8(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).unwrap();
        assert!(header.contains("\"K\":9"));
        assert!(header.contains("\"seed\":42"));
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let batch = ImageSet::new(vec![0.5, 0.5], 2).unwrap();
        let p = GmmParams::<f32>::init(4, 2, 0, &batch).unwrap();
        let bytes = p.to_checkpoint_bytes();
        assert!(GmmParams::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(GmmParams::from_checkpoint_bytes(b"no newline").is_err());
    }

    #[test]
    fn wrong_format_rejected() {
        let bytes = encode_container(&serde_json::json!({"format": "other"}), &[]);
        assert!(GmmParams::from_checkpoint_bytes(&bytes).is_err());
    }
}
