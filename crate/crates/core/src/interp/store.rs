//! Residual vectors of every (example, depth, position), cached once per
//! model so probe sweeps and lens grids do not rerun the network.
//!
//! On disk: `activations.bin` (8-byte magic, `u32` version, then
//! little-endian `f32` residuals) next to `activations.json` (shapes,
//! roles, instances, predictions).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout_batch, ANALYSIS_BATCH};
use crate::error::{Error, Result};
use crate::nnkernel::ops::argmax;
use crate::nnkernel::{ForwardOptions, Model};
use crate::taskgen::{Regime, Role, TaskInstance};

const MAGIC: &[u8; 8] = b"LCOTACTS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStore {
    pub regime: Regime,
    pub roles: Vec<Role>,
    pub depths: usize,
    pub d_model: usize,
    pub instances: Vec<TaskInstance>,
    /// Greedy answer at `ANS` per example.
    pub predictions: Vec<u32>,
    /// `[example][depth][position][d_model]`
    #[serde(skip)]
    pub residuals: Vec<f32>,
}

impl ActivationStore {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.roles.len()
    }

    pub fn residual(&self, example: usize, depth: usize, position: usize) -> &[f32] {
        let off = ((example * self.depths + depth) * self.positions() + position) * self.d_model;
        &self.residuals[off..off + self.d_model]
    }

    pub fn is_correct(&self, example: usize) -> bool {
        self.predictions[example] == self.instances[example].answer()
    }

    pub fn correct_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_correct(i)).collect()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct_indices().len() as f64 / self.len().max(1) as f64
    }

    pub fn position_of(&self, role: Role) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("activations.json");
        fs::write(&manifest, serde_json::to_vec(self)?).map_err(|e| Error::io(&manifest, e))?;
        let mut bytes = Vec::with_capacity(12 + 4 * self.residuals.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        for &x in &self.residuals {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let bin = dir.join("activations.bin");
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("activations.json");
        let text = fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut store: ActivationStore = serde_json::from_slice(&text)?;
        let bin = dir.join("activations.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not an activation file", bin.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported activation file version {version}")));
        }
        let expect = store.len() * store.depths * store.positions() * store.d_model;
        if bytes.len() != 12 + 4 * expect {
            return Err(Error::Checkpoint(format!(
                "activation file holds {} values, manifest implies {expect}",
                (bytes.len() - 12) / 4
            )));
        }
        store.residuals = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(store)
    }
}

/// Runs every instance (all of one length) through the model in the
/// `regime` layout and keeps all residuals.
pub fn build_activation_store(
    model: &Model<f32>,
    instances: &[TaskInstance],
    regime: Regime,
) -> Result<ActivationStore> {
    let (ex, _) = layout_batch(model, &instances[..instances.len().min(1)], regime)?;
    let roles = ex[0].roles.clone();
    let depths = model.config.depths();
    let d = model.config.d_model;
    let mut store = ActivationStore {
        regime,
        roles,
        depths,
        d_model: d,
        instances: instances.to_vec(),
        predictions: Vec::with_capacity(instances.len()),
        residuals: Vec::with_capacity(instances.len() * depths * ex[0].len() * d),
    };
    for chunk in instances.chunks(ANALYSIS_BATCH) {
        let (_, seq) = layout_batch(model, chunk, regime)?;
        let opts = ForwardOptions {
            mode: seq.mode,
            ..ForwardOptions::plain()
        }
        .with_capture();
        let out = model.forward(&seq.tokens, opts)?;
        let cache = out.cache.as_ref().expect("capture requested");
        for b in 0..seq.batch() {
            store.predictions.push(argmax(out.logits_at(b, seq.ans_position)) as u32);
            for depth in 0..depths {
                for pos in 0..seq.tokens.len {
                    store.residuals.extend_from_slice(cache.residual(depth, pos, b));
                }
            }
        }
    }
    Ok(store)
}
