//! Binary checkpoints.
//!
//! Layout: the 4-byte magic `CFM1`, a little-endian `u32` byte count, that
//! many bytes of UTF-8 JSON metadata, then the online parameters and the EMA
//! parameters as little-endian `f64`. Both arrays are sliced by the layout
//! manifest: layer-major, weights then bias per layer, weights row-major.

use std::path::Path;

use cfm_core::nd::NumArray;
use cfm_core::net::{ParamSet, VelocityField};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"CFM1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Where the data stream stood when the checkpoint was written.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngDescriptor {
    pub generator: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngDescriptor,
    pub layout: Vec<LayoutEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub field: VelocityField,
}

fn layout_of(field: &VelocityField) -> Vec<LayoutEntry> {
    field
        .config()
        .layout()
        .into_iter()
        .map(|(name, shape)| LayoutEntry { name, shape })
        .collect()
}

impl Checkpoint {
    pub fn new(config: RunConfig, step: u64, rng: RngDescriptor, field: VelocityField) -> Self {
        let layout = layout_of(&field);
        Self {
            meta: CheckpointMeta {
                config,
                step,
                rng,
                layout,
            },
            field,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| CliError::Runtime(format!("checkpoint metadata: {e}")))?;
        let len = u32::try_from(meta.len())
            .map_err(|_| CliError::Runtime("checkpoint metadata over 4 GiB".into()))?;
        let count: usize = self.field.config().param_count();
        let mut out = Vec::with_capacity(8 + meta.len() + 16 * count);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&meta);
        for set in [ParamSet::Online, ParamSet::Ema] {
            for p in self.field.params(set) {
                for v in p.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Runtime(format!("corrupt checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad(format!(
                "{} bytes is shorter than the 8-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                MAGIC
            )));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < len {
            return Err(bad(format!(
                "metadata needs {len} bytes, file has {}",
                body.len()
            )));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("metadata: {e}")))?;
        let expected = meta.config.net.layout();
        if expected.len() != meta.layout.len()
            || expected
                .iter()
                .zip(&meta.layout)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(bad(
                "layout manifest does not match the network configuration".into(),
            ));
        }
        let count: usize = meta
            .layout
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        let floats = &body[len..];
        if floats.len() != 16 * count {
            return Err(bad(format!(
                "parameter block has {} bytes, layout needs {}",
                floats.len(),
                16 * count
            )));
        }
        let mut values = floats
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read_set = || -> Result<Vec<NumArray>, CliError> {
            meta.layout
                .iter()
                .map(|e| {
                    let n = e.shape.iter().product();
                    Ok(NumArray::new(
                        e.shape.clone(),
                        values.by_ref().take(n).collect(),
                    )?)
                })
                .collect()
        };
        let online = read_set()?;
        let ema = read_set()?;
        let field = VelocityField::from_params(meta.config.net.clone(), online, ema)?;
        Ok(Self { meta, field })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::Runtime(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}
