//! Checkpoint container for a [`FmdPrior`].
//!
//! Layout: a little-endian `u32` byte length, that many bytes of UTF-8 JSON
//! header, then one block of little-endian `f32` parameters per network in
//! header order. See `schemas/checkpoint-header.schema.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::prior::FmdPrior;
use crate::schedule::{FractionLayout, NoiseSchedule, ScheduleKind};

pub const FORMAT: &str = "fmd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetEntry {
    pub fraction: usize,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub steps: usize,
    pub fractions: usize,
    pub phase: u32,
    pub step_size: usize,
    pub schedule: ScheduleKind,
    pub denoiser: DenoiserConfig,
    pub nets: Vec<NetEntry>,
}

impl CheckpointHeader {
    pub fn for_prior(prior: &FmdPrior) -> Self {
        CheckpointHeader {
            format: FORMAT.to_string(),
            version: VERSION,
            steps: prior.schedule().steps(),
            fractions: prior.layout().fractions(),
            phase: prior.phase(),
            step_size: prior.step_size(),
            schedule: prior.schedule().kind(),
            denoiser: prior.denoiser_config().clone(),
            nets: prior
                .nets()
                .iter()
                .enumerate()
                .map(|(i, n)| NetEntry {
                    fraction: i + 1,
                    param_count: n.param_count(),
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Checkpoint(msg));
        if self.format != FORMAT {
            return fail(format!("unexpected format tag {:?}", self.format));
        }
        if self.version != VERSION {
            return fail(format!(
                "version mismatch: file has {}, reader supports {VERSION}",
                self.version
            ));
        }
        if self.steps < 2 {
            return fail(format!("steps {} < 2", self.steps));
        }
        if self.fractions == 0 || !self.steps.is_multiple_of(self.fractions) {
            return fail(format!(
                "steps {} not divisible into {} fractions",
                self.steps, self.fractions
            ));
        }
        if self.phase >= usize::BITS || self.step_size != 1usize << self.phase {
            return fail(format!(
                "step_size {} inconsistent with phase {}",
                self.step_size, self.phase
            ));
        }
        if !(self.steps / self.fractions).is_multiple_of(self.step_size) {
            return fail(format!(
                "step_size {} does not divide fraction length {}",
                self.step_size,
                self.steps / self.fractions
            ));
        }
        if self.nets.len() != self.fractions {
            return fail(format!(
                "{} network entries for {} fractions",
                self.nets.len(),
                self.fractions
            ));
        }
        self.denoiser
            .validate()
            .map_err(|e| Error::Checkpoint(format!("denoiser config: {e}")))?;
        Ok(())
    }
}

pub fn to_bytes(prior: &FmdPrior) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader::for_prior(prior))?;
    let len = u32::try_from(header.len())
        .map_err(|_| Error::Checkpoint("header exceeds u32 length".into()))?;
    let payload: usize = prior.nets().iter().map(|n| n.param_count() * 4).sum();
    let mut out = Vec::with_capacity(4 + header.len() + payload);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    for net in prior.nets() {
        for &p in net.params() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<FmdPrior> {
    let len_bytes: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("file shorter than the length prefix".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(4..4 + len)
        .ok_or_else(|| Error::Checkpoint(format!("header truncated: declared {len} bytes")))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.validate()?;

    let sched = NoiseSchedule::new(header.steps, header.schedule)?;
    let layout = FractionLayout::new(header.steps, header.fractions)?;
    let expected = DenoiserNet::new(&header.denoiser, header.steps)?.param_count();
    let mut cursor = 4 + len;
    let mut nets = Vec::with_capacity(header.fractions);
    for (i, entry) in header.nets.iter().enumerate() {
        if entry.fraction != i + 1 {
            return Err(Error::Checkpoint(format!(
                "net {i}: declared fraction {} out of order",
                entry.fraction
            )));
        }
        if entry.param_count != expected {
            return Err(Error::Checkpoint(format!(
                "net {i}: header declares {} parameters, architecture needs {expected}",
                entry.param_count
            )));
        }
        let need = entry.param_count * 4;
        let block = bytes.get(cursor..cursor + need).ok_or_else(|| {
            Error::Checkpoint(format!(
                "net {i}: payload truncated, expected {need} bytes, found {}",
                bytes.len().saturating_sub(cursor)
            ))
        })?;
        let params: Vec<f64> = block
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let net = DenoiserNet::from_params(&header.denoiser, header.steps, params)
            .map_err(|e| Error::Checkpoint(format!("net {i}: {e}")))?;
        nets.push(net);
        cursor += need;
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after net {}",
            bytes.len() - cursor,
            header.fractions - 1
        )));
    }
    FmdPrior::new(sched, layout, nets, header.phase)
}

pub fn save(prior: &FmdPrior, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(prior)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<FmdPrior> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Arch;

    fn prior(arch: Arch) -> FmdPrior {
        let sched = NoiseSchedule::new(32, ScheduleKind::Cosine).unwrap();
        let layout = FractionLayout::new(32, 4).unwrap();
        let cfg = DenoiserConfig {
            arch,
            hidden_dim: 5,
            time_embed_dim: 4,
            window_len: 2,
            regions: 2,
            timepoints: 4,
            seed: 3,
        };
        let nets = (0..4)
            .map(|i| DenoiserNet::with_init_seed(&cfg, 32, i).unwrap())
            .collect();
        FmdPrior::new(sched, layout, nets, 2).unwrap()
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + len]).unwrap();
        edit(&mut header);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = (new_header.len() as u32).to_le_bytes().to_vec();
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[4 + len..]);
        out
    }

    #[test]
    fn roundtrip_is_exact() {
        for arch in [Arch::Dense, Arch::WindowedAttention] {
            let p = prior(arch);
            let bytes = to_bytes(&p).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, p);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_payload_names_net() {
        let bytes = to_bytes(&prior(Arch::Dense)).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("net 3"), "{err}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn inconsistent_headers_rejected() {
        let bytes = to_bytes(&prior(Arch::Dense)).unwrap();
        let bad_steps = rewrite_header(&bytes, |h| h["steps"] = 30.into());
        assert!(matches!(from_bytes(&bad_steps), Err(Error::Checkpoint(_))));
        let bad_grid = rewrite_header(&bytes, |h| h["steps"] = 40.into());
        let err = from_bytes(&bad_grid).unwrap_err().to_string();
        assert!(err.contains("step_size"), "{err}");
        let bad_version = rewrite_header(&bytes, |h| h["version"] = 9.into());
        assert!(from_bytes(&bad_version).unwrap_err().to_string().contains("version"));
        let bad_count = rewrite_header(&bytes, |h| h["nets"][1]["param_count"] = 1.into());
        assert!(from_bytes(&bad_count).unwrap_err().to_string().contains("net 1"));
        assert!(from_bytes(&[1, 0]).is_err());
    }
}
