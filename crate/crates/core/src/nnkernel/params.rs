//! Flat parameter storage with a named layout.
//!
//! All parameters live in one contiguous vector; gradients and optimizer
//! moments use the same layout. The order below is also the checkpoint order.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::ModelConfig;

/// How a tensor is initialized and whether weight decay applies to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Dense weight matrix: normal(0, 0.02), decayed.
    Weight,
    /// Embedding table: normal(0, 0.02), not decayed.
    Embedding,
    /// Layer-norm scale: ones, not decayed.
    NormScale,
    /// Layer-norm shift or bias: zeros, not decayed.
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

impl ParamEntry {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    /// `[d, d]`, stored `[in, out]`.
    pub w_q: Range<usize>,
    pub b_q: Range<usize>,
    pub w_k: Range<usize>,
    pub b_k: Range<usize>,
    pub w_v: Range<usize>,
    pub b_v: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    /// `[d, 4d]`.
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    /// `[4d, d]`.
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

/// Offsets of every named tensor in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    /// `[V, d]`
    pub tok_emb: Range<usize>,
    /// `[context, d]`
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    /// Unembedding `W_U`, `[V, d]`.
    pub w_u: Range<usize>,
    /// `b_U`, `[V]`.
    pub b_u: Range<usize>,
    /// Latent projection `[d, d]` stored `[in, out]`.
    pub w_lat: Range<usize>,
    pub b_lat: Range<usize>,
    pub ln_lat_g: Range<usize>,
    pub ln_lat_b: Range<usize>,
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

struct Builder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: &[usize], kind: ParamKind) -> Range<usize> {
        let len = shape.iter().product();
        let entry = ParamEntry {
            name,
            shape: shape.to_vec(),
            kind,
            offset: self.total,
            len,
        };
        let range = entry.range();
        self.total += len;
        self.entries.push(entry);
        range
    }
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let v = config.vocab_size;
        let ff = config.d_ff();
        let mut b = Builder {
            entries: Vec::new(),
            total: 0,
        };
        use ParamKind::*;
        let tok_emb = b.alloc("tok_emb".into(), &[v, d], Embedding);
        let pos_emb = b.alloc("pos_emb".into(), &[config.context_length, d], Embedding);
        let layers = (0..config.layers)
            .map(|l| {
                let mut a = |n: &str, shape: &[usize], kind| b.alloc(format!("layer{l}.{n}"), shape, kind);
                LayerParams {
                    ln1_g: a("ln1.g", &[d], NormScale),
                    ln1_b: a("ln1.b", &[d], Bias),
                    w_q: a("attn.w_q", &[d, d], Weight),
                    b_q: a("attn.b_q", &[d], Bias),
                    w_k: a("attn.w_k", &[d, d], Weight),
                    b_k: a("attn.b_k", &[d], Bias),
                    w_v: a("attn.w_v", &[d, d], Weight),
                    b_v: a("attn.b_v", &[d], Bias),
                    w_o: a("attn.w_o", &[d, d], Weight),
                    b_o: a("attn.b_o", &[d], Bias),
                    ln2_g: a("ln2.g", &[d], NormScale),
                    ln2_b: a("ln2.b", &[d], Bias),
                    w_fc: a("mlp.w_fc", &[d, ff], Weight),
                    b_fc: a("mlp.b_fc", &[ff], Bias),
                    w_proj: a("mlp.w_proj", &[ff, d], Weight),
                    b_proj: a("mlp.b_proj", &[d], Bias),
                }
            })
            .collect();
        let lnf_g = b.alloc("ln_f.g".into(), &[d], NormScale);
        let lnf_b = b.alloc("ln_f.b".into(), &[d], Bias);
        let w_u = b.alloc("unembed.w".into(), &[v, d], Weight);
        let b_u = b.alloc("unembed.b".into(), &[v], Bias);
        let w_lat = b.alloc("latent.w".into(), &[d, d], Weight);
        let b_lat = b.alloc("latent.b".into(), &[d], Bias);
        let ln_lat_g = b.alloc("latent.ln.g".into(), &[d], NormScale);
        let ln_lat_b = b.alloc("latent.ln.b".into(), &[d], Bias);
        ParamLayout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_u,
            b_u,
            w_lat,
            b_lat,
            ln_lat_g,
            ln_lat_b,
            entries: b.entries,
            total: b.total,
        }
    }

    /// Per-element weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in &self.entries {
            if e.kind == ParamKind::Weight {
                mask[e.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Model parameters plus their layout.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar = f32> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<F>,
}

impl<F: Scalar> Model<F> {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit norm scales.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> crate::Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut params = vec![F::zero(); layout.total];
        for e in &layout.entries {
            let slot = &mut params[e.range()];
            match e.kind {
                ParamKind::Weight | ParamKind::Embedding => {
                    for p in slot.iter_mut() {
                        *p = F::from_f64_lossy(normal.sample(rng));
                    }
                }
                ParamKind::NormScale => slot.iter_mut().for_each(|p| *p = F::one()),
                ParamKind::Bias => {}
            }
        }
        Ok(Model {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn from_params(config: &ModelConfig, params: Vec<F>) -> crate::Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if params.len() != layout.total {
            return Err(crate::Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Model {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn zeros_like(&self) -> Vec<F> {
        vec![F::zero(); self.layout.total]
    }

    pub fn slice(&self, r: &Range<usize>) -> &[F] {
        &self.params[r.clone()]
    }

    /// Converts to another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|&p| G::from_f64_lossy(p.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
