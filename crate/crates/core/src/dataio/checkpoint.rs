//! Checkpoint container.
//!
//! ```text
//! "QAVATCKP"  u32 version
//! section*    u32 tag, u64 length, payload
//! [u8; 32]    SHA-256 of everything before it
//! ```
//!
//! All integers are little-endian. The first block is a JSON header (network,
//! quantizers, layer statistics, provenance, tensor shapes); the second is the
//! tensors as consecutive f64 values. The fingerprint is the hex digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, Params, QuantState};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainSummary};
use crate::variability::LayerStats;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"QAVATCKP";
const TAG_HEADER: u32 = 1;
const TAG_TENSORS: u32 = 2;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub train: Option<TrainConfig>,
    pub summary: Option<TrainSummary>,
    /// Fingerprint of the checkpoint this one was derived from.
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkSpec,
    pub params: Params<f64>,
    pub quant: QuantState,
    pub stats: LayerStats,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkSpec,
    quant: QuantState,
    stats: LayerStats,
    provenance: Provenance,
    tensors: Vec<Vec<usize>>,
}

fn section(out: &mut Vec<u8>, tag: u32, payload: &[u8]) {
    out.extend(tag.to_le_bytes());
    out.extend((payload.len() as u64).to_le_bytes());
    out.extend(payload);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.params.tensors();
        let header = Header {
            network: self.network.clone(),
            quant: self.quant.clone(),
            stats: self.stats.clone(),
            provenance: self.provenance.clone(),
            tensors: tensors.iter().map(|t| t.shape().to_vec()).collect(),
        };
        let mut payload = Vec::with_capacity(tensors.iter().map(|t| t.len() * 8).sum());
        for t in &tensors {
            for v in t.data() {
                payload.extend(v.to_le_bytes());
            }
        }
        let mut out = MAGIC.to_vec();
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        section(&mut out, TAG_HEADER, &serde_json::to_vec(&header)?);
        section(&mut out, TAG_TENSORS, &payload);
        let digest = Sha256::digest(&out);
        out.extend(digest);
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < MAGIC.len() + 4 + 32 || &b[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
        }
        let (body, digest) = b.split_at(b.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("content hash mismatch".into()));
        }
        let mut at = 12;
        let mut header = None;
        let mut payload = None;
        while at < body.len() {
            let head = body.get(at..at + 12).ok_or_else(|| Error::Corrupt("truncated section header".into()))?;
            let tag = u32::from_le_bytes(head[..4].try_into().expect("4 bytes"));
            let len = u64::from_le_bytes(head[4..].try_into().expect("8 bytes")) as usize;
            let data = body
                .get(at + 12..at + 12 + len)
                .ok_or_else(|| Error::Corrupt(format!("section {tag} overruns the file")))?;
            match tag {
                TAG_HEADER => header = Some(serde_json::from_slice::<Header>(data)?),
                TAG_TENSORS => payload = Some(data),
                other => return Err(Error::Corrupt(format!("unknown section tag {other}"))),
            }
            at += 12 + len;
        }
        let header = header.ok_or_else(|| Error::Corrupt("missing header section".into()))?;
        let payload = payload.ok_or_else(|| Error::Corrupt("missing tensor section".into()))?;
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for shape in header.tensors {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Corrupt("tensor section shorter than the declared shapes".into()));
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        if values.next().is_some() {
            return Err(Error::Corrupt("trailing tensor data".into()));
        }
        let params = Params::from_tensors(tensors)?;
        params.check(&header.network)?;
        Ok(Self {
            network: header.network,
            params,
            quant: header.quant,
            stats: header.stats,
            provenance: header.provenance,
        })
    }

    pub fn fingerprint(&self) -> Result<String> {
        let b = self.to_bytes()?;
        Ok(hex::encode(&b[b.len() - 32..]))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let b = ckpt.to_bytes()?;
    std::fs::write(path, &b)?;
    Ok(hex::encode(&b[b.len() - 32..]))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_synthetic;

    fn sample() -> Checkpoint {
        let net = build_synthetic();
        let params = Params::init(&net, 5).unwrap();
        let stats = LayerStats { w_max: params.weight.iter().map(|w| w.max_abs()).collect() };
        Checkpoint { quant: QuantState::empty(&net), network: net, params, stats, provenance: Provenance::default() }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b);
    }

    #[test]
    fn flipped_payload_byte_is_detected() {
        let mut b = sample().to_bytes().unwrap();
        let i = b.len() - 100;
        b[i] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Corrupt(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut b = sample().to_bytes().unwrap();
        b[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::UnsupportedVersion { found: 0, supported: 1 })));
    }
}
