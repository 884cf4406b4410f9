//! Checkpoint files.
//!
//! Layout, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `FSWA0001` |
//! | 4     | header length `h` (u32) |
//! | h     | UTF-8 JSON header |
//! | 8·n   | `n` IEEE-754 f64 parameters in [`ParamVector`] layout |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Activation, MlpSpec, ParamVector};

pub const MAGIC: &[u8; 8] = b"FSWA0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Student,
    Teacher,
    Swa,
    FastSwa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub schedule_position: f64,
    pub role: Role,
    pub param_count: usize,
}

fn default_activation() -> String {
    "relu".to_string()
}

impl CheckpointHeader {
    pub fn new(spec: &MlpSpec, role: Role, epoch: usize, step: usize, seed: u64, schedule_position: f64) -> Self {
        Self {
            widths: spec.widths().to_vec(),
            activation: spec.activation().name().to_string(),
            epoch,
            step,
            seed,
            schedule_position,
            role,
            param_count: spec.param_count(),
        }
    }

    /// Network described by the header, without dropout.
    pub fn spec(&self) -> Result<MlpSpec> {
        let act: Activation = self.activation.parse()?;
        Ok(MlpSpec::new(self.widths.clone(), 0.0)?.with_activation(act))
    }

    fn expected_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Serializes `w` with `header` into bytes.
pub fn encode_checkpoint(w: &ParamVector, header: &CheckpointHeader) -> Result<Vec<u8>> {
    if header.param_count != w.len() || header.expected_params() != w.len() {
        return Err(Error::HeaderMismatch(format!(
            "header describes {} parameters (widths imply {}), vector has {}",
            header.param_count,
            header.expected_params(),
            w.len()
        )));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::BadHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * w.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in w.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamVector, CheckpointHeader)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            found: rest.len(),
        });
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(Error::Truncated {
            expected: hlen,
            found: rest.len(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::BadHeader(e.to_string()))?;
    if header.expected_params() != header.param_count {
        return Err(Error::HeaderMismatch(format!(
            "widths {:?} imply {} parameters, header says {}",
            header.widths,
            header.expected_params(),
            header.param_count
        )));
    }
    let payload = &rest[hlen..];
    let need = header.param_count * 8;
    if payload.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: payload.len(),
        });
    }
    if payload.len() > need {
        return Err(Error::HeaderMismatch(format!(
            "payload has {} bytes, header implies {need}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((ParamVector::new(values), header))
}

pub fn save_checkpoint(path: impl AsRef<Path>, w: &ParamVector, header: &CheckpointHeader) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(w, header)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamVector, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(n: usize) -> CheckpointHeader {
        CheckpointHeader {
            widths: vec![2, n - 2],
            activation: "relu".into(),
            epoch: 3,
            step: 120,
            seed: 9,
            schedule_position: 3.5,
            role: Role::FastSwa,
            param_count: 2 * (n - 2) + (n - 2),
        }
    }

    fn sample() -> (ParamVector, CheckpointHeader) {
        let h = header(5);
        let w = ParamVector::new((0..h.param_count).map(|i| i as f64 * 0.1 - 0.3).collect());
        (w, h)
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fswa");
        let (w, h) = sample();
        save_checkpoint(&path, &w, &h).unwrap();
        let (w2, h2) = load_checkpoint(&path).unwrap();
        assert_eq!(h, h2);
        assert!(w.as_slice().iter().zip(w2.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn distinct_error_variants() {
        let (w, h) = sample();
        let bytes = encode_checkpoint(&w, &h).unwrap();

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic)));

        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(short), Err(Error::Truncated { .. })));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0u8; 8]);
        assert!(matches!(decode_checkpoint(&long), Err(Error::HeaderMismatch(_))));

        let mut h2 = h.clone();
        h2.param_count += 1;
        assert!(matches!(encode_checkpoint(&w, &h2), Err(Error::HeaderMismatch(_))));

        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Truncated { .. })));
        let mut garbled = bytes.clone();
        garbled[12] = b'#';
        assert!(matches!(decode_checkpoint(&garbled), Err(Error::BadHeader(_))));
    }

    #[test]
    fn role_spelling() {
        let s = serde_json::to_string(&Role::FastSwa).unwrap();
        assert_eq!(s, "\"fast-swa\"");
    }

    proptest! {
        #[test]
        fn bytes_round_trip(vals in prop::collection::vec(prop::num::f64::ANY, 6)) {
            let mut h = header(4);
            h.param_count = 6;
            h.widths = vec![2, 2];
            let w = ParamVector::new(vals);
            let (w2, _) = decode_checkpoint(&encode_checkpoint(&w, &h).unwrap()).unwrap();
            for (a, b) in w.as_slice().iter().zip(w2.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
