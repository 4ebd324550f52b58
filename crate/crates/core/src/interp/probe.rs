//! Bias-free linear probes `h -> W h` trained with Adam on cached residuals.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::store::ActivationStore;
use super::Symbol;
use crate::error::{Error, Result};
use crate::nnkernel::ops::argmax;
use crate::nnkernel::scalar::{matmul, Op};
use crate::nnkernel::Depth;
use crate::taskgen::{Role, NUM_VALUES};

/// Fewer retained examples than this produce a warning on the result.
pub const MIN_PROBE_EXAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub target: Symbol,
    pub role: Role,
    pub position: usize,
    pub depth: usize,
    pub d: usize,
    /// `[n, d]`
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warning: Option<String>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `(train, val, test)` sizes: 80/20 then 80/20 of the first part.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let trval = n * 4 / 5;
    let train = trval * 4 / 5;
    (train, trval - train, n - trval)
}

/// Residuals at one (position, depth) of the correctly answered examples,
/// labelled with `target`, split with a seeded shuffle.
pub fn build_probe_dataset(
    store: &ActivationStore,
    position: usize,
    depth: usize,
    target: Symbol,
    seed: u64,
) -> Result<ProbeDataset> {
    if position >= store.positions() || depth >= store.depths {
        return Err(Error::Index {
            what: "probe site",
            index: position,
            range: format!("positions 0..{}, depths 0..{}", store.positions(), store.depths),
        });
    }
    let keep = store.correct_indices();
    let mut features = Vec::with_capacity(keep.len() * store.d_model);
    let mut labels = Vec::with_capacity(keep.len());
    for &i in &keep {
        features.extend_from_slice(store.residual(i, depth, position));
        labels.push(target.value(&store.instances[i])?);
    }
    let mut order: Vec<usize> = (0..keep.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = split_sizes(keep.len());
    let warning = (keep.len() < MIN_PROBE_EXAMPLES)
        .then(|| format!("only {} correctly answered examples retained", keep.len()));
    Ok(ProbeDataset {
        target,
        role: store.roles[position],
        position,
        depth,
        d: store.d_model,
        features,
        labels,
        train: order[..a].to_vec(),
        val: order[a..a + b].to_vec(),
        test: order[a + b..].to_vec(),
        warning,
    })
}

/// Copy of the dataset with labels permuted across examples.
pub fn shuffle_labels(ds: &ProbeDataset, seed: u64) -> ProbeDataset {
    let mut out = ds.clone();
    out.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            classes: NUM_VALUES as usize,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: Symbol,
    pub role: Role,
    pub depth: String,
    /// Test accuracy of the best-validation checkpoint.
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub warning: Option<String>,
}

fn accuracy(ds: &ProbeDataset, w: &[f32], idx: &[usize], classes: usize) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut logits = vec![0.0f32; classes];
    let hits = idx
        .iter()
        .filter(|&&i| {
            let x = &ds.features[i * ds.d..(i + 1) * ds.d];
            matmul(1, ds.d, classes, x, Op::N, w, Op::N, 0.0, &mut logits);
            argmax(&logits) as u32 == ds.labels[i]
        })
        .count();
    hits as f64 / idx.len() as f64
}

/// Trains `W: [d, classes]` from zero with Adam on softmax cross-entropy and
/// reports test accuracy at the epoch with the best validation accuracy.
pub fn train_probe(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if ds.train.is_empty() {
        return Err(Error::Config("probe dataset has no training examples".into()));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| l as usize >= cfg.classes) {
        return Err(Error::Config(format!("label {bad} outside {} classes", cfg.classes)));
    }
    let (d, c) = (ds.d, cfg.classes);
    let mut w = vec![0.0f32; d * c];
    let mut m = vec![0.0f32; d * c];
    let mut v = vec![0.0f32; d * c];
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let lr = cfg.lr as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = ds.train.clone();
    let mut best = (f64::NEG_INFINITY, 0usize, w.clone());
    let mut step = 0i32;
    let mut x = Vec::new();
    let mut logits = Vec::new();
    let mut grad = vec![0.0f32; d * c];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            x.clear();
            for &i in batch {
                x.extend_from_slice(&ds.features[i * d..(i + 1) * d]);
            }
            logits.resize(n * c, 0.0);
            matmul(n, d, c, &x, Op::N, &w, Op::N, 0.0, &mut logits);
            for (row, &i) in logits.chunks_exact_mut(c).zip(batch) {
                let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let mut sum = 0.0;
                for z in row.iter_mut() {
                    *z = (*z - max).exp();
                    sum += *z;
                }
                for z in row.iter_mut() {
                    *z /= sum * n as f32;
                }
                row[ds.labels[i] as usize] -= 1.0 / n as f32;
            }
            // dW = Xᵀ · dlogits
            matmul(d, n, c, &x, Op::T, &logits, Op::N, 0.0, &mut grad);
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for k in 0..d * c {
                m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
                v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        let val = accuracy(ds, &w, &ds.val, c);
        if val > best.0 {
            best = (val, epoch, w.clone());
        }
    }
    let (val_accuracy, best_epoch, w_best) = best;
    Ok(ProbeResult {
        target: ds.target,
        role: ds.role,
        depth: Depth(ds.depth).to_string(),
        accuracy: accuracy(ds, &w_best, &ds.test, c),
        val_accuracy,
        best_epoch,
        train_size: ds.train.len(),
        val_size: ds.val.len(),
        test_size: ds.test.len(),
        warning: ds.warning.clone(),
    })
}
