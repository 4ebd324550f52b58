//! Activation patching: rerun a corrupted input with one residual site
//! overwritten by its clean value and measure recovery of the clean answer.

use serde::{Deserialize, Serialize};

use super::{layout_batch, ANALYSIS_BATCH};
use crate::error::{Error, Result};
use crate::nnkernel::ops::argmax;
use crate::nnkernel::{Depth, ForwardOptions, Model, Patch, SeqBatch};
use crate::taskgen::{corrupt_input, Regime, Role, TaskInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSite {
    pub depth: usize,
    pub position: usize,
}

/// Every (depth, position) of a layout.
pub fn patch_sites(depths: usize, positions: usize) -> Vec<PatchSite> {
    (0..depths)
        .flat_map(|depth| (0..positions).map(move |position| PatchSite { depth, position }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    /// 1-indexed corrupted input.
    pub corrupted_position: usize,
    pub depth: String,
    pub depth_index: usize,
    pub position: usize,
    pub role: Role,
    pub baseline: f64,
    pub patched: f64,
    pub clean: f64,
    /// `(patched - baseline) / (clean - baseline)`; undefined when the
    /// corruption never changes the prediction.
    pub lift: Option<f64>,
    /// `100 * lift`.
    pub recovery: Option<f64>,
    pub samples: usize,
}

fn answers(model: &Model<f32>, seq: &SeqBatch, patches: &[Patch<f32>]) -> Result<Vec<u32>> {
    let opts = ForwardOptions {
        mode: seq.mode,
        patches,
        ..ForwardOptions::plain()
    };
    let out = model.forward(&seq.tokens, opts)?;
    Ok((0..seq.batch())
        .map(|b| argmax(out.logits_at(b, seq.ans_position)) as u32)
        .collect())
}

/// Patching sweep for inputs corrupted at `corrupt_position`, restricted to
/// examples the model answers correctly when clean.
pub fn run_patching(
    model: &Model<f32>,
    instances: &[TaskInstance],
    regime: Regime,
    corrupt_position: usize,
    sites: &[PatchSite],
) -> Result<Vec<PatchResult>> {
    let (probe, _) = layout_batch(model, &instances[..instances.len().min(1)], regime)?;
    let roles = probe[0].roles.clone();
    let depths = model.config.depths();
    for s in sites {
        if s.depth >= depths || s.position >= roles.len() {
            return Err(Error::Layout(format!(
                "patch site (depth {}, position {}) outside a {depths}-depth, {}-position layout",
                s.depth,
                s.position,
                roles.len()
            )));
        }
    }
    let d = model.config.d_model;
    let mut kept = 0usize;
    let mut baseline_hits = 0usize;
    let mut patched_hits = vec![0usize; sites.len()];
    for chunk in instances.chunks(ANALYSIS_BATCH) {
        let (_, clean_seq) = layout_batch(model, chunk, regime)?;
        let opts = ForwardOptions {
            mode: clean_seq.mode,
            ..ForwardOptions::plain()
        };
        let clean_out = model.forward(&clean_seq.tokens, opts.with_capture())?;
        let correct: Vec<usize> = (0..chunk.len())
            .filter(|&b| argmax(clean_out.logits_at(b, clean_seq.ans_position)) as u32 == chunk[b].answer())
            .collect();
        if correct.is_empty() {
            continue;
        }
        let cache = clean_out.cache.as_ref().expect("capture requested");
        let corrupted: Vec<TaskInstance> = correct
            .iter()
            .map(|&b| corrupt_input(&chunk[b], corrupt_position))
            .collect::<Result<_>>()?;
        let targets: Vec<u32> = correct.iter().map(|&b| chunk[b].answer()).collect();
        let (_, seq) = layout_batch(model, &corrupted, regime)?;
        let hits = |pred: Vec<u32>| pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
        kept += correct.len();
        baseline_hits += hits(answers(model, &seq, &[])?);
        for (k, site) in sites.iter().enumerate() {
            let values = correct
                .iter()
                .flat_map(|&b| cache.residual(site.depth, site.position, b).iter().copied())
                .collect::<Vec<f32>>();
            debug_assert_eq!(values.len(), correct.len() * d);
            let patch = Patch {
                depth: site.depth,
                position: site.position,
                values,
            };
            patched_hits[k] += hits(answers(model, &seq, std::slice::from_ref(&patch))?);
        }
    }
    if kept == 0 {
        return Err(Error::NoCorrectRuns(format!(
            "none of {} clean examples answered correctly",
            instances.len()
        )));
    }
    let n = kept as f64;
    let baseline = baseline_hits as f64 / n;
    Ok(sites
        .iter()
        .zip(patched_hits)
        .map(|(s, hits)| {
            let patched = hits as f64 / n;
            let lift = lift(baseline, patched, 1.0);
            PatchResult {
                corrupted_position: corrupt_position,
                depth: Depth(s.depth).to_string(),
                depth_index: s.depth,
                position: s.position,
                role: roles[s.position],
                baseline,
                patched,
                clean: 1.0,
                lift,
                recovery: lift.map(|l| 100.0 * l),
                samples: kept,
            }
        })
        .collect())
}

/// Normalized recovery; `None` when clean does not exceed baseline.
pub fn lift(baseline: f64, patched: f64, clean: f64) -> Option<f64> {
    (clean > baseline).then(|| (patched - baseline) / (clean - baseline))
}
