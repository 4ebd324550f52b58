//! Training objectives: teacher cross-entropy over the explicit trace,
//! student cross-entropy at `ANS`, and L1 feature distillation that pulls the
//! student's `ANS` residuals towards the (stop-gradient) teacher's.

use serde::{Deserialize, Serialize};

use super::backward::ResidGrad;
use super::forward::{ForwardMode, Tape, TokenBatch};
use super::ops::{argmax, log_softmax_at, softmax};
use super::params::Model;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::taskgen::{Role, SerializedExample};

/// Sequences sharing one layout, with per-position targets.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub tokens: TokenBatch,
    /// Example-major `[batch, len]`.
    pub targets: Vec<Option<u32>>,
    pub mode: ForwardMode,
    pub ans_position: usize,
    pub roles: Vec<Role>,
}

impl SeqBatch {
    pub fn from_examples(examples: &[&SerializedExample]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Layout("empty batch".into()))?;
        if examples.iter().any(|e| e.roles != first.roles) {
            return Err(Error::Layout("examples in a batch must share one layout".into()));
        }
        let tokens = TokenBatch::from_examples(examples)?;
        let targets = examples.iter().flat_map(|e| e.targets()).collect();
        let mode = if first.roles.iter().any(|r| matches!(r, Role::Latent(_))) {
            ForwardMode::LatentFeedback
        } else {
            ForwardMode::Plain
        };
        Ok(SeqBatch {
            tokens,
            targets,
            mode,
            ans_position: first.ans_position(),
            roles: first.roles.clone(),
        })
    }

    pub fn batch(&self) -> usize {
        self.tokens.batch
    }

    pub fn supervised(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Teacher and/or student views of the same instances (same order).
#[derive(Clone, Debug, Default)]
pub struct PairedBatch {
    pub teacher: Option<SeqBatch>,
    pub student: Option<SeqBatch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub teacher_ce: f64,
    pub student_ce: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            teacher_ce: 1.0,
            student_ce: 1.0,
            distill: 1.0,
        }
    }
}

/// Residual depths compared by the distillation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillDepths {
    /// Every post-layer depth `L1-Post..LL-Post`.
    #[default]
    All,
    /// Only `LL-Post`.
    Last,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub depths: DistillDepths,
}

/// Running scale of the distillation target, one entry per compared depth.
///
/// Each step the standard deviation of the teacher's `ANS` residual entries is
/// folded into an exponential moving average; the distillation term at that
/// depth is divided by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillNormalizer {
    pub decay: f64,
    /// Lower bound on the divisor, so the normalizer never amplifies.
    #[serde(default = "unit_floor")]
    pub floor: f64,
    pub sigma: Vec<f64>,
    pub initialized: bool,
}

fn unit_floor() -> f64 {
    1.0
}

impl Default for DistillNormalizer {
    fn default() -> Self {
        DistillNormalizer {
            decay: 0.99,
            floor: 1.0,
            sigma: Vec::new(),
            initialized: false,
        }
    }
}

impl DistillNormalizer {
    fn update(&mut self, batch_sigma: &[f64]) {
        if !self.initialized || self.sigma.len() != batch_sigma.len() {
            self.sigma = batch_sigma.to_vec();
            self.initialized = true;
        } else {
            for (s, &b) in self.sigma.iter_mut().zip(batch_sigma) {
                *s = self.decay * *s + (1.0 - self.decay) * b;
            }
        }
    }

    fn current(&self, batch_sigma: &[f64]) -> Vec<f64> {
        let raw = if self.initialized && self.sigma.len() == batch_sigma.len() {
            &self.sigma[..]
        } else {
            batch_sigma
        };
        raw.iter().map(|&s| s.max(self.floor)).collect()
    }
}

/// Mean loss components over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub teacher_ce: f64,
    pub student_ce: f64,
    pub distill: f64,
    pub total: f64,
}

struct Counts {
    teacher_tokens: usize,
    student_tokens: usize,
    distill_examples: usize,
}

fn counts(batches: &[PairedBatch], cfg: &LossConfig) -> Counts {
    let w = &cfg.weights;
    let mut c = Counts {
        teacher_tokens: 0,
        student_tokens: 0,
        distill_examples: 0,
    };
    for pb in batches {
        if let Some(t) = &pb.teacher {
            c.teacher_tokens += t.supervised();
        }
        if let Some(s) = &pb.student {
            c.student_tokens += s.supervised();
            if pb.teacher.is_some() && w.distill > 0.0 {
                c.distill_examples += s.batch();
            }
        }
    }
    c
}

fn depth_list(cfg: &LossConfig, layers: usize) -> Vec<usize> {
    match cfg.depths {
        DistillDepths::All => (1..=layers).collect(),
        DistillDepths::Last => vec![layers],
    }
}

/// Cross-entropy summed over supervised positions; fills `dlogits` (scaled by
/// `grad_scale`) when given.
fn cross_entropy<F: Scalar>(
    tape: &Tape<F>,
    seq: &SeqBatch,
    vocab: usize,
    grad_scale: F,
    mut dlogits: Option<&mut [F]>,
) -> f64 {
    let (bsz, len) = (seq.tokens.batch, seq.tokens.len);
    let mut total = 0.0;
    let mut probs = vec![F::zero(); vocab];
    for b in 0..bsz {
        for t in 0..len {
            let Some(target) = seq.targets[b * len + t] else {
                continue;
            };
            let row = t * bsz + b;
            let z = &tape.logits[row * vocab..(row + 1) * vocab];
            total -= log_softmax_at(z, target as usize).to_f64().unwrap();
            if let Some(dl) = dlogits.as_deref_mut() {
                softmax(z, &mut probs);
                let g = &mut dl[row * vocab..(row + 1) * vocab];
                for k in 0..vocab {
                    g[k] = probs[k] * grad_scale;
                }
                g[target as usize] -= grad_scale;
            }
        }
    }
    total
}

/// Per-depth standard deviation of teacher `ANS` residual entries.
fn target_sigma<F: Scalar>(
    teachers: &[(&Tape<F>, usize)],
    depths: &[usize],
) -> Vec<f64> {
    depths
        .iter()
        .map(|&depth| {
            let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
            for &(tape, pos) in teachers {
                for b in 0..tape.batch() {
                    for &x in tape.cache.residual(depth, pos, b) {
                        let x = x.to_f64().unwrap();
                        n += 1;
                        s += x;
                        s2 += x * x;
                    }
                }
            }
            let mean = s / n.max(1) as f64;
            (s2 / n.max(1) as f64 - mean * mean).max(0.0).sqrt().max(1e-6)
        })
        .collect()
}

struct GroupState<F> {
    teacher: Option<Tape<F>>,
    student: Option<Tape<F>>,
}

fn run<F: Scalar>(
    model: &Model<F>,
    batches: &[PairedBatch],
    cfg: &LossConfig,
    normalizer: &mut DistillNormalizer,
    update_normalizer: bool,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<F>>)> {
    let w = cfg.weights;
    let vocab = model.config.vocab_size;
    let c = counts(batches, cfg);
    let use_teacher = w.teacher_ce > 0.0 || w.distill > 0.0;
    let mut states = Vec::with_capacity(batches.len());
    for pb in batches {
        let teacher = match (&pb.teacher, use_teacher) {
            (Some(t), true) => Some(model.forward_tape(&t.tokens, t.mode, &[])?),
            _ => None,
        };
        let student = match &pb.student {
            Some(s) => Some(model.forward_tape(&s.tokens, s.mode, &[])?),
            None => None,
        };
        states.push(GroupState { teacher, student });
    }

    let depths = depth_list(cfg, model.config.layers);
    let distill_on = w.distill > 0.0 && c.distill_examples > 0;
    let sigma = if distill_on {
        let teachers: Vec<_> = batches
            .iter()
            .zip(&states)
            .filter(|(pb, _)| pb.student.is_some())
            .filter_map(|(pb, st)| Some((st.teacher.as_ref()?, pb.teacher.as_ref()?.ans_position)))
            .collect();
        let batch_sigma = target_sigma(&teachers, &depths);
        if update_normalizer {
            normalizer.update(&batch_sigma);
        }
        normalizer.current(&batch_sigma)
    } else {
        Vec::new()
    };

    let mut grads = want_grads.then(|| model.zeros_like());
    let mut out = LossBreakdown::default();
    let d = model.config.d_model;
    for (pb, st) in batches.iter().zip(&states) {
        if let (Some(seq), Some(tape)) = (&pb.teacher, &st.teacher) {
            if w.teacher_ce > 0.0 {
                let scale = F::from_f64_lossy(w.teacher_ce / c.teacher_tokens.max(1) as f64);
                let mut dl = grads.as_ref().map(|_| vec![F::zero(); tape.logits.len()]);
                out.teacher_ce += cross_entropy(tape, seq, vocab, scale, dl.as_deref_mut());
                if let (Some(g), Some(dl)) = (grads.as_mut(), dl) {
                    model.backward(tape, &dl, &[], g);
                }
            }
        }
        if let (Some(seq), Some(tape)) = (&pb.student, &st.student) {
            let scale = F::from_f64_lossy(w.student_ce / c.student_tokens.max(1) as f64);
            let mut dl = grads
                .as_ref()
                .filter(|_| w.student_ce > 0.0 || distill_on)
                .map(|_| vec![F::zero(); tape.logits.len()]);
            let ce = cross_entropy(
                tape,
                seq,
                vocab,
                scale,
                dl.as_deref_mut().filter(|_| w.student_ce > 0.0),
            );
            out.student_ce += ce;
            let mut injections = Vec::new();
            if distill_on {
                if let (Some(tseq), Some(ttape)) = (&pb.teacher, &st.teacher) {
                    let bsz = seq.batch();
                    let (sp, tp) = (seq.ans_position, tseq.ans_position);
                    for (k, &depth) in depths.iter().enumerate() {
                        let inv = 1.0 / (d as f64 * sigma[k]);
                        let gscale = F::from_f64_lossy(w.distill * inv / c.distill_examples as f64);
                        let mut grad = vec![F::zero(); bsz * d];
                        for b in 0..bsz {
                            let s = tape.cache.residual(depth, sp, b);
                            let t = ttape.cache.residual(depth, tp, b);
                            let mut l1 = 0.0;
                            for i in 0..d {
                                let diff = s[i] - t[i];
                                l1 += diff.abs().to_f64().unwrap();
                                grad[b * d + i] = if diff > F::zero() {
                                    gscale
                                } else if diff < F::zero() {
                                    -gscale
                                } else {
                                    F::zero()
                                };
                            }
                            out.distill += l1 * inv;
                        }
                        injections.push(ResidGrad {
                            depth,
                            position: sp,
                            grad,
                        });
                    }
                }
            }
            if let (Some(g), Some(dl)) = (grads.as_mut(), dl) {
                model.backward(tape, &dl, &injections, g);
            }
        }
    }
    out.teacher_ce /= c.teacher_tokens.max(1) as f64;
    out.student_ce /= c.student_tokens.max(1) as f64;
    out.distill /= c.distill_examples.max(1) as f64;
    if w.teacher_ce == 0.0 {
        out.teacher_ce = 0.0;
    }
    if !distill_on {
        out.distill = 0.0;
    }
    out.total = w.teacher_ce * out.teacher_ce + w.student_ce * out.student_ce + w.distill * out.distill;
    if !out.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss: teacher_ce={} student_ce={} distill={}",
            out.teacher_ce, out.student_ce, out.distill
        )));
    }
    if let Some(g) = &grads {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            let name = model
                .layout
                .entries
                .iter()
                .find(|e| e.range().contains(&i))
                .map_or("?", |e| e.name.as_str());
            return Err(Error::Numerical(format!("non-finite gradient in {name} (index {i})")));
        }
    }
    Ok((out, grads))
}

/// Loss components and exact gradients of the weighted total.
///
/// Teacher residuals are treated as constants inside the distillation term,
/// so no gradient reaches the teacher branch through it. Updates the
/// distillation normalizer.
pub fn loss_and_grads<F: Scalar>(
    model: &Model<F>,
    batches: &[PairedBatch],
    cfg: &LossConfig,
    normalizer: &mut DistillNormalizer,
) -> Result<(LossBreakdown, Vec<F>)> {
    let (loss, grads) = run(model, batches, cfg, normalizer, true, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Loss components without gradients; the normalizer is read, not updated.
pub fn loss_value<F: Scalar>(
    model: &Model<F>,
    batches: &[PairedBatch],
    cfg: &LossConfig,
    normalizer: &DistillNormalizer,
) -> Result<LossBreakdown> {
    let mut n = normalizer.clone();
    Ok(run(model, batches, cfg, &mut n, false, false)?.0)
}

/// Greedy argmax at the `ANS` position of every example.
pub fn predict_answers<F: Scalar>(
    model: &Model<F>,
    seq: &SeqBatch,
    patches: &[super::forward::Patch<F>],
) -> Result<Vec<u32>> {
    let tape = model.forward_tape(&seq.tokens, seq.mode, patches)?;
    let v = model.config.vocab_size;
    let bsz = seq.batch();
    Ok((0..bsz)
        .map(|b| {
            let row = seq.ans_position * bsz + b;
            argmax(&tape.logits[row * v..(row + 1) * v]) as u32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::DistillNormalizer;

    #[test]
    fn normalizer_averages_raw_scale_and_floors_the_divisor() {
        let mut n = DistillNormalizer::default();
        assert_eq!(n.current(&[0.5, 4.0]), vec![1.0, 4.0]);
        n.update(&[0.5, 4.0]);
        n.update(&[1.5, 2.0]);
        assert!((n.sigma[0] - 0.51).abs() < 1e-12);
        assert!((n.sigma[1] - 3.98).abs() < 1e-12);
        assert_eq!(n.current(&[9.0, 9.0]), vec![1.0, n.sigma[1]]);
        // A depth-count change restarts from the batch value.
        assert_eq!(n.current(&[3.0]), vec![3.0]);
        n.update(&[3.0]);
        assert_eq!(n.sigma, vec![3.0]);
    }
}
