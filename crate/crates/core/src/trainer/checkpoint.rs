//! Binary checkpoint container: an eight-byte magic, a little-endian JSON
//! header length, the header itself, then every network's parameters as
//! consecutive little-endian f64 values — bodies first, then heads grouped
//! by body. Writes go to a sibling temp file and land via rename, so a
//! checkpoint on disk is always complete. The header pins the config hash
//! and architecture specs, which lets a loader reject mismatched weights
//! before touching the payload.

use super::TrainError;
use crate::nn::{Mlp, MlpSpec, MultiHeadModel};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"UPINN01\n";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub problem: String,
    pub config_hash: String,
    pub seed: u64,
    pub trained_epochs: usize,
    /// Family-parameter value bound to each head, in head order.
    pub head_grid: Vec<f64>,
    /// Empty for head-only (transfer) checkpoints.
    pub body_specs: Vec<MlpSpec>,
    /// One spec per body; with empty `body_specs` this still sets the head
    /// count per body slot.
    pub head_specs: Vec<MlpSpec>,
}

/// Parameters plus enough structure to rebuild the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Flat parameters per body, in body order.
    pub bodies: Vec<Vec<f64>>,
    /// Flat parameters per head: `heads[body][member]`.
    pub heads: Vec<Vec<Vec<f64>>>,
}

impl Checkpoint {
    /// Snapshots a full model.
    pub fn from_model(
        model: &MultiHeadModel,
        problem: &str,
        config_hash: &str,
        seed: u64,
        trained_epochs: usize,
        head_grid: Vec<f64>,
    ) -> Checkpoint {
        let header = CheckpointHeader {
            version: CKPT_VERSION,
            problem: problem.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            trained_epochs,
            head_grid,
            body_specs: model.bodies.iter().map(|m| m.spec.clone()).collect(),
            head_specs: model
                .heads
                .iter()
                .map(|hs| hs[0].spec.clone())
                .collect(),
        };
        Checkpoint {
            header,
            bodies: model.bodies.iter().map(|m| m.params_flat()).collect(),
            heads: model
                .heads
                .iter()
                .map(|hs| hs.iter().map(|h| h.params_flat()).collect())
                .collect(),
        }
    }

    /// Snapshots transfer-learned heads (one per body slot) without the
    /// frozen body parameters.
    pub fn from_heads(
        heads: &[Mlp],
        problem: &str,
        config_hash: &str,
        seed: u64,
        trained_epochs: usize,
        param: f64,
    ) -> Checkpoint {
        let header = CheckpointHeader {
            version: CKPT_VERSION,
            problem: problem.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            trained_epochs,
            head_grid: vec![param],
            body_specs: Vec::new(),
            head_specs: heads.iter().map(|h| h.spec.clone()).collect(),
        };
        Checkpoint {
            header,
            bodies: Vec::new(),
            heads: heads.iter().map(|h| vec![h.params_flat()]).collect(),
        }
    }

    /// Rebuilds a full model. Errors if this is a head-only checkpoint.
    pub fn into_model(&self) -> Result<MultiHeadModel, TrainError> {
        if self.header.body_specs.is_empty() {
            return Err(TrainError::Checkpoint(
                "head-only checkpoint cannot rebuild a full model".into(),
            ));
        }
        let mut model = MultiHeadModel::init(
            &self.header.body_specs,
            &self.header.head_specs,
            self.header.head_grid.len(),
            self.header.seed,
        );
        for (b, flat) in self.bodies.iter().enumerate() {
            model.bodies[b].set_params_flat(flat);
        }
        for (b, members) in self.heads.iter().enumerate() {
            for (a, flat) in members.iter().enumerate() {
                model.heads[b][a].set_params_flat(flat);
            }
        }
        Ok(model)
    }

    /// Rebuilds the heads of a head-only (transfer) checkpoint, one per
    /// body slot.
    pub fn into_heads(&self) -> Result<Vec<Mlp>, TrainError> {
        let mut out = Vec::with_capacity(self.heads.len());
        for (b, members) in self.heads.iter().enumerate() {
            if members.len() != 1 {
                return Err(TrainError::Checkpoint(format!(
                    "expected one member per body slot, got {} at slot {b}",
                    members.len()
                )));
            }
            let mut mlp = Mlp::init(self.header.head_specs[b].clone(), 0);
            mlp.set_params_flat(&members[0]);
            out.push(mlp);
        }
        Ok(out)
    }

    fn payload_len(&self) -> usize {
        self.bodies.iter().map(Vec::len).sum::<usize>()
            + self
                .heads
                .iter()
                .flat_map(|m| m.iter().map(Vec::len))
                .sum::<usize>()
    }
}

/// Serializes and atomically replaces `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let header_json = serde_json::to_vec(&ckpt.header)?;
    let mut buf =
        Vec::with_capacity(12 + header_json.len() + 8 * ckpt.payload_len());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for body in &ckpt.bodies {
        for v in body {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for members in &ckpt.heads {
        for flat in members {
            for v in flat {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| TrainError::Checkpoint("file too short for magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "bad magic {magic:?}; not a checkpoint file"
        )));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)
        .map_err(|_| TrainError::Checkpoint("file too short for header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| TrainError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| TrainError::Checkpoint(format!("header parse failed: {e}")))?;
    if header.version != CKPT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if !header.body_specs.is_empty() && header.body_specs.len() != header.head_specs.len() {
        return Err(TrainError::Checkpoint(
            "body/head spec count mismatch".into(),
        ));
    }

    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let n_members = header.head_grid.len();
    let expect: usize = header.body_specs.iter().map(MlpSpec::param_count).sum::<usize>()
        + header
            .head_specs
            .iter()
            .map(|s| n_members * s.param_count())
            .sum::<usize>();
    if rest.len() != 8 * expect {
        return Err(TrainError::Checkpoint(format!(
            "payload holds {} bytes, specs require {}",
            rest.len(),
            8 * expect
        )));
    }
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Vec<f64> {
        let out = rest[cursor..cursor + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += 8 * n;
        out
    };
    let bodies: Vec<Vec<f64>> = header
        .body_specs
        .iter()
        .map(|s| take(s.param_count()))
        .collect();
    let heads: Vec<Vec<Vec<f64>>> = header
        .head_specs
        .iter()
        .map(|s| (0..n_members).map(|_| take(s.param_count())).collect())
        .collect();
    Ok(Checkpoint {
        header,
        bodies,
        heads,
    })
}
