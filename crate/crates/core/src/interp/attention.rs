//! Per-head attention maps averaged over a batch of same-layout examples.

use serde::{Deserialize, Serialize};

use super::ANALYSIS_BATCH;
use crate::error::{Error, Result};
use crate::nnkernel::{ForwardOptions, Model, SeqBatch};
use crate::taskgen::{Role, SerializedExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub roles: Vec<Role>,
    pub layers: usize,
    pub heads: usize,
    pub samples: usize,
    /// `[layer * heads + head]` -> row-major `[query, key]` mean weights.
    pub mean: Vec<Vec<f64>>,
}

impl AttentionSummary {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.mean[layer * self.heads + head][query * self.len() + key]
    }

    pub fn matrix(&self, layer: usize, head: usize) -> Vec<Vec<f64>> {
        self.mean[layer * self.heads + head]
            .chunks(self.len())
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Largest `|row sum - 1|` over all heads and queries.
    pub fn row_sum_error(&self) -> f64 {
        self.mean
            .iter()
            .flat_map(|m| m.chunks(self.len()))
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Strongest head for one (query, key) pair: `(layer, head, weight)`.
    pub fn strongest(&self, query: usize, key: usize) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for l in 0..self.layers {
            for h in 0..self.heads {
                let w = self.weight(l, h, query, key);
                if w > best.2 {
                    best = (l, h, w);
                }
            }
        }
        best
    }
}

/// Averages attention over examples sharing one layout.
pub fn collect_attention(model: &Model<f32>, examples: &[SerializedExample]) -> Result<AttentionSummary> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Layout("no examples".into()))?;
    if examples.iter().any(|e| e.roles != first.roles) {
        return Err(Error::Layout("attention examples must share one layout".into()));
    }
    let (layers, heads, len) = (model.config.layers, model.config.heads, first.len());
    let mut sums = vec![vec![0.0f64; len * len]; layers * heads];
    for chunk in examples.chunks(ANALYSIS_BATCH) {
        let seq = SeqBatch::from_examples(&chunk.iter().collect::<Vec<_>>())?;
        let opts = ForwardOptions {
            mode: seq.mode,
            ..ForwardOptions::plain()
        };
        let out = model.forward(&seq.tokens, opts.with_capture())?;
        let cache = out.cache.expect("capture requested");
        for l in 0..layers {
            for h in 0..heads {
                let acc = &mut sums[l * heads + h];
                for b in 0..seq.batch() {
                    for t in 0..len {
                        for (j, &w) in cache.attention_row(l, h, b, t).iter().enumerate() {
                            acc[t * len + j] += w as f64;
                        }
                    }
                }
            }
        }
    }
    let n = examples.len() as f64;
    for m in sums.iter_mut() {
        for w in m.iter_mut() {
            *w /= n;
        }
    }
    Ok(AttentionSummary {
        roles: first.roles.clone(),
        layers,
        heads,
        samples: examples.len(),
        mean: sums,
    })
}
