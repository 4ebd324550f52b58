//! Logit lens: decode intermediate residuals through the final norm and
//! unembedding and record the probability of a ground-truth symbol.

use serde::{Deserialize, Serialize};

use super::store::ActivationStore;
use super::{depth_labels, Symbol};
use crate::error::{Error, Result};
use crate::nnkernel::Model;
use crate::taskgen::{Role, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitLensGrid {
    pub target: Symbol,
    pub depths: Vec<String>,
    pub roles: Vec<Role>,
    /// Mean probability of the target, `[depth][position]`.
    pub mean: Vec<Vec<f64>>,
    /// Per position, averaged over depths (`L1-Pre` included only when
    /// `include_pre`).
    pub per_position: Vec<f64>,
    pub include_pre: bool,
    pub samples: usize,
}

impl LogitLensGrid {
    /// Mean of `per_position` over positions whose role matches.
    pub fn mean_over(&self, pred: impl Fn(Role) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self.selected(pred);
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Max of `per_position` over positions whose role matches.
    pub fn max_over(&self, pred: impl Fn(Role) -> bool) -> Option<f64> {
        self.selected(pred).into_iter().reduce(f64::max)
    }

    fn selected(&self, pred: impl Fn(Role) -> bool) -> Vec<f64> {
        self.roles
            .iter()
            .zip(&self.per_position)
            .filter(|(r, _)| pred(**r))
            .map(|(_, &v)| v)
            .collect()
    }
}

/// Lens grids for each target over the correctly answered examples of the
/// store.
pub fn logit_lens(
    model: &Model<f32>,
    store: &ActivationStore,
    targets: &[Symbol],
    include_pre: bool,
) -> Result<Vec<LogitLensGrid>> {
    let keep = store.correct_indices();
    if keep.is_empty() {
        return Err(Error::NoCorrectRuns(format!(
            "none of {} examples answered correctly",
            store.len()
        )));
    }
    let (depths, positions) = (store.depths, store.positions());
    let labels: Vec<Vec<u32>> = keep
        .iter()
        .map(|&i| {
            targets
                .iter()
                .map(|t| t.value(&store.instances[i]).map(Vocabulary::value))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![vec![vec![0.0f64; positions]; depths]; targets.len()];
    for (k, &i) in keep.iter().enumerate() {
        for depth in 0..depths {
            for pos in 0..positions {
                let probs = model.lens_distribution(store.residual(i, depth, pos));
                for (ti, &label) in labels[k].iter().enumerate() {
                    sums[ti][depth][pos] += probs[label as usize] as f64;
                }
            }
        }
    }
    let n = keep.len() as f64;
    let first_depth = if include_pre { 0 } else { 1 };
    Ok(targets
        .iter()
        .zip(sums)
        .map(|(&target, grid)| {
            let mean: Vec<Vec<f64>> = grid.into_iter().map(|row| row.into_iter().map(|s| s / n).collect()).collect();
            let per_position = (0..positions)
                .map(|p| {
                    let used = &mean[first_depth..];
                    used.iter().map(|row| row[p]).sum::<f64>() / used.len() as f64
                })
                .collect();
            LogitLensGrid {
                target,
                depths: depth_labels(depths),
                roles: store.roles.clone(),
                mean,
                per_position,
                include_pre,
                samples: keep.len(),
            }
        })
        .collect())
}
