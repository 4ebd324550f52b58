use std::fmt;

use super::ops::{gelu, layer_norm, linear, softmax};
use super::params::Model;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::taskgen::{SerializedExample, Vocabulary};

/// Residual-stream depth: `0` is the input to layer 1 (`L1-Pre`), `l` is the
/// output of layer `l` (`Ll-Post`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Depth(pub usize);

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("L1-Pre"),
            l => write!(f, "L{l}-Post"),
        }
    }
}

/// Equal-length token sequences, stored example-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<u32>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::Layout("sequences in a batch must share one length".into()));
        }
        Ok(TokenBatch {
            ids: rows.concat(),
            batch: rows.len(),
            len,
        })
    }

    pub fn from_examples(examples: &[&SerializedExample]) -> Result<Self> {
        let rows: Vec<Vec<u32>> = examples.iter().map(|e| e.token_ids.clone()).collect();
        Self::new(&rows)
    }

    pub fn id(&self, b: usize, t: usize) -> u32 {
        self.ids[b * self.len + t]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Standard causal transformer; every position is embedded from its token.
    Plain,
    /// Latent placeholder positions are fed the projected final-layer residual
    /// of the preceding position.
    LatentFeedback,
}

/// Overwrites the residual at one (depth, position) for every example of the
/// batch before anything downstream is computed.
#[derive(Clone, Debug)]
pub struct Patch<F> {
    pub depth: usize,
    pub position: usize,
    /// `[batch, d_model]`
    pub values: Vec<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a, F> {
    pub mode: ForwardMode,
    pub capture: bool,
    /// Sites overwritten during the pass, applied in order.
    pub patches: &'a [Patch<F>],
}

impl<F> ForwardOptions<'_, F> {
    pub fn plain() -> Self {
        ForwardOptions {
            mode: ForwardMode::Plain,
            capture: false,
            patches: &[],
        }
    }

    pub fn latent() -> Self {
        ForwardOptions {
            mode: ForwardMode::LatentFeedback,
            capture: false,
            patches: &[],
        }
    }

    pub fn with_capture(mut self) -> Self {
        self.capture = true;
        self
    }
}

/// Residual vectors at every depth and position plus per-head attention.
///
/// Residuals are stored time-major: row `t * batch + b`.
#[derive(Clone, Debug)]
pub struct ActivationCache<F> {
    pub batch: usize,
    pub len: usize,
    pub d_model: usize,
    pub heads: usize,
    /// `depths` vectors of `[len * batch, d_model]`.
    pub resid: Vec<Vec<F>>,
    /// Per layer `[batch, heads, len, len]` attention probabilities.
    pub attn: Vec<Vec<F>>,
}

impl<F: Scalar> ActivationCache<F> {
    pub fn depths(&self) -> usize {
        self.resid.len()
    }

    pub fn layers(&self) -> usize {
        self.attn.len()
    }

    pub fn residual(&self, depth: usize, position: usize, b: usize) -> &[F] {
        let row = position * self.batch + b;
        &self.resid[depth][row * self.d_model..(row + 1) * self.d_model]
    }

    /// Attention row of query `t` for (layer, head, example): `len` weights.
    pub fn attention_row(&self, layer: usize, head: usize, b: usize, t: usize) -> &[F] {
        let base = ((b * self.heads + head) * self.len + t) * self.len;
        &self.attn[layer][base..base + self.len]
    }

    /// Largest deviation from row-stochastic causal attention.
    pub fn attention_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in 0..self.layers() {
            for h in 0..self.heads {
                for b in 0..self.batch {
                    for t in 0..self.len {
                        let row = self.attention_row(l, h, b, t);
                        let mut sum = 0.0;
                        for (j, &p) in row.iter().enumerate() {
                            let p = p.to_f64().unwrap();
                            if j > t || p < 0.0 {
                                worst = worst.max(p.abs());
                            }
                            sum += p;
                        }
                        worst = worst.max((sum - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Logits for every position (time-major) and an optional activation cache.
#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub logits: Vec<F>,
    pub cache: Option<ActivationCache<F>>,
}

impl<F: Scalar> ForwardOutput<F> {
    /// Next-token logits at position `t` of example `b`.
    pub fn logits_at(&self, b: usize, t: usize) -> &[F] {
        let row = t * self.batch + b;
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }
}

pub(crate) struct LayerTape<F> {
    pub ln1: Vec<F>,
    pub ln1_mean: Vec<F>,
    pub ln1_rstd: Vec<F>,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    pub ctx: Vec<F>,
    pub mid: Vec<F>,
    pub ln2: Vec<F>,
    pub ln2_mean: Vec<F>,
    pub ln2_rstd: Vec<F>,
    pub fc: Vec<F>,
    pub act: Vec<F>,
}

/// Everything the backward pass needs.
pub(crate) struct Tape<F> {
    pub ids: Vec<u32>,
    pub key_valid: Vec<bool>,
    pub latent_positions: Vec<usize>,
    pub cache: ActivationCache<F>,
    pub layers: Vec<LayerTape<F>>,
    pub lnf: Vec<F>,
    pub lnf_mean: Vec<F>,
    pub lnf_rstd: Vec<F>,
    pub logits: Vec<F>,
    /// Pre-norm latent projection output (rows of latent positions only).
    pub lat_z: Vec<F>,
    pub lat_mean: Vec<F>,
    pub lat_rstd: Vec<F>,
}

impl<F: Scalar> Tape<F> {
    pub fn batch(&self) -> usize {
        self.cache.batch
    }

    pub fn len(&self) -> usize {
        self.cache.len
    }

    /// Position ranges processed together: a new chunk starts at every latent
    /// position because its input depends on the previous chunk's output.
    pub fn chunks(&self) -> Vec<(usize, usize)> {
        chunk_bounds(self.len(), &self.latent_positions)
    }
}

fn chunk_bounds(len: usize, latent: &[usize]) -> Vec<(usize, usize)> {
    let mut starts = vec![0];
    starts.extend(latent.iter().copied().filter(|&p| p > 0));
    starts.dedup();
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, starts.get(i + 1).copied().unwrap_or(len)))
        .collect()
}

impl<F: Scalar> Model<F> {
    /// Runs the model on a batch. Returns next-token logits for every position
    /// and, when `opts.capture` is set, the activation cache.
    pub fn forward(&self, tokens: &TokenBatch, opts: ForwardOptions<'_, F>) -> Result<ForwardOutput<F>> {
        let tape = self.forward_tape(tokens, opts.mode, opts.patches)?;
        Ok(ForwardOutput {
            batch: tokens.batch,
            len: tokens.len,
            vocab: self.config.vocab_size,
            logits: tape.logits,
            cache: opts.capture.then_some(tape.cache),
        })
    }

    fn validate_tokens(&self, tokens: &TokenBatch, mode: ForwardMode) -> Result<Vec<usize>> {
        if tokens.len > self.config.context_length {
            return Err(Error::ContextOverflow {
                len: tokens.len,
                context: self.config.context_length,
            });
        }
        if tokens.batch == 0 || tokens.len == 0 {
            return Err(Error::Layout("empty batch".into()));
        }
        let vocab = self.config.vocab_size as u32;
        for (i, &id) in tokens.ids.iter().enumerate() {
            let latent_ok = mode == ForwardMode::LatentFeedback && id == Vocabulary::LATENT;
            if id >= vocab && !latent_ok {
                return Err(Error::UnknownToken {
                    id,
                    position: i % tokens.len,
                });
            }
        }
        if mode == ForwardMode::Plain {
            return Ok(Vec::new());
        }
        let latent: Vec<usize> = (0..tokens.len)
            .filter(|&t| tokens.id(0, t) == Vocabulary::LATENT)
            .collect();
        for b in 1..tokens.batch {
            for t in 0..tokens.len {
                if (tokens.id(b, t) == Vocabulary::LATENT) != latent.binary_search(&t).is_ok() {
                    return Err(Error::Layout(
                        "latent positions must agree across the batch".into(),
                    ));
                }
            }
        }
        if latent.first() == Some(&0) {
            return Err(Error::Layout("a latent position needs a predecessor".into()));
        }
        Ok(latent)
    }

    pub(crate) fn forward_tape(
        &self,
        tokens: &TokenBatch,
        mode: ForwardMode,
        patches: &[Patch<F>],
    ) -> Result<Tape<F>> {
        let latent_positions = self.validate_tokens(tokens, mode)?;
        let cfg = &self.config;
        let (bsz, len, d, ff, v) = (tokens.batch, tokens.len, cfg.d_model, cfg.d_ff(), cfg.vocab_size);
        for p in patches {
            if p.depth > cfg.layers || p.position >= len || p.values.len() != bsz * d {
                return Err(Error::Layout(format!(
                    "patch site (depth {}, position {}) outside a {}-depth, {len}-position layout",
                    p.depth,
                    p.position,
                    cfg.layers + 1
                )));
            }
        }
        let rows = bsz * len;
        let zeros = |n: usize| vec![F::zero(); n];
        let key_valid = tokens.ids.iter().map(|&id| id != Vocabulary::PAD).collect();
        let layers = (0..cfg.layers)
            .map(|_| LayerTape {
                ln1: zeros(rows * d),
                ln1_mean: zeros(rows),
                ln1_rstd: zeros(rows),
                q: zeros(rows * d),
                k: zeros(rows * d),
                v: zeros(rows * d),
                ctx: zeros(rows * d),
                mid: zeros(rows * d),
                ln2: zeros(rows * d),
                ln2_mean: zeros(rows),
                ln2_rstd: zeros(rows),
                fc: zeros(rows * ff),
                act: zeros(rows * ff),
            })
            .collect();
        let mut tape = Tape {
            ids: tokens.ids.clone(),
            key_valid,
            latent_positions,
            cache: ActivationCache {
                batch: bsz,
                len,
                d_model: d,
                heads: cfg.heads,
                resid: (0..=cfg.layers).map(|_| zeros(rows * d)).collect(),
                attn: (0..cfg.layers).map(|_| zeros(bsz * cfg.heads * len * len)).collect(),
            },
            layers,
            lnf: zeros(rows * d),
            lnf_mean: zeros(rows),
            lnf_rstd: zeros(rows),
            logits: zeros(rows * v),
            lat_z: zeros(rows * d),
            lat_mean: zeros(rows),
            lat_rstd: zeros(rows),
        };
        for (a, e) in tape.chunks() {
            self.forward_chunk(&mut tape, a, e, patches);
        }
        Ok(tape)
    }

    fn forward_chunk(&self, tape: &mut Tape<F>, a: usize, e: usize, patches: &[Patch<F>]) {
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let (bsz, len, d, ff, v) = (tape.batch(), tape.len(), cfg.d_model, cfg.d_ff(), cfg.vocab_size);
        let (r0, r1) = (a * bsz, e * bsz);
        let n = r1 - r0;
        let rd = r0 * d..r1 * d;

        // Input embeddings.
        {
            let tok = &p[lay.tok_emb.clone()];
            let pos = &p[lay.pos_emb.clone()];
            let is_latent = tape.latent_positions.binary_search(&a).is_ok();
            if is_latent {
                // z = W_lat h_L[a-1] + b_lat, embedding = LN_lat(z) + pos[a]
                let h_prev = &tape.cache.resid[cfg.layers][(r0 - bsz) * d..r0 * d];
                linear(
                    h_prev,
                    bsz,
                    &p[lay.w_lat.clone()],
                    &p[lay.b_lat.clone()],
                    d,
                    d,
                    &mut tape.lat_z[r0 * d..(r0 + bsz) * d],
                );
                let out = &mut tape.cache.resid[0][r0 * d..(r0 + bsz) * d];
                layer_norm(
                    &tape.lat_z[r0 * d..(r0 + bsz) * d],
                    d,
                    &p[lay.ln_lat_g.clone()],
                    &p[lay.ln_lat_b.clone()],
                    out,
                    &mut tape.lat_mean[r0..r0 + bsz],
                    &mut tape.lat_rstd[r0..r0 + bsz],
                );
                for row in out.chunks_exact_mut(d) {
                    for (x, &pe) in row.iter_mut().zip(&pos[a * d..(a + 1) * d]) {
                        *x += pe;
                    }
                }
            }
            let first_token_pos = if is_latent { a + 1 } else { a };
            for t in first_token_pos..e {
                for b in 0..bsz {
                    let id = tape.ids[b * len + t] as usize;
                    let row = t * bsz + b;
                    let out = &mut tape.cache.resid[0][row * d..(row + 1) * d];
                    let te = &tok[id * d..(id + 1) * d];
                    let pe = &pos[t * d..(t + 1) * d];
                    for i in 0..d {
                        out[i] = te[i] + pe[i];
                    }
                }
            }
        }
        apply_patch(&mut tape.cache.resid[0], patches, 0, a, e, bsz, d);

        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
        let mut scores = vec![F::zero(); len];
        let mut probs = vec![F::zero(); len];
        for (l, lp) in lay.layers.iter().enumerate() {
            let (before, after) = tape.cache.resid.split_at_mut(l + 1);
            let x_in = &before[l][rd.clone()];
            let x_out = &mut after[0][rd.clone()];
            let lt = &mut tape.layers[l];
            layer_norm(
                x_in,
                d,
                &p[lp.ln1_g.clone()],
                &p[lp.ln1_b.clone()],
                &mut lt.ln1[rd.clone()],
                &mut lt.ln1_mean[r0..r1],
                &mut lt.ln1_rstd[r0..r1],
            );
            let ln1 = &lt.ln1[rd.clone()];
            linear(ln1, n, &p[lp.w_q.clone()], &p[lp.b_q.clone()], d, d, &mut lt.q[rd.clone()]);
            linear(ln1, n, &p[lp.w_k.clone()], &p[lp.b_k.clone()], d, d, &mut lt.k[rd.clone()]);
            linear(ln1, n, &p[lp.w_v.clone()], &p[lp.b_v.clone()], d, d, &mut lt.v[rd.clone()]);

            // Causal attention for queries in [a, e) over keys [0, t].
            let attn = &mut tape.cache.attn[l];
            for b in 0..bsz {
                for h in 0..heads {
                    let off = h * hd;
                    for t in a..e {
                        let qrow = t * bsz + b;
                        let q = &lt.q[qrow * d + off..qrow * d + off + hd];
                        let mut any = false;
                        for j in 0..=t {
                            scores[j] = if tape.key_valid[b * len + j] {
                                any = true;
                                let krow = j * bsz + b;
                                let k = &lt.k[krow * d + off..krow * d + off + hd];
                                dot(q, k) * scale
                            } else {
                                F::neg_infinity()
                            };
                        }
                        let base = ((b * heads + h) * len + t) * len;
                        let prow = &mut attn[base..base + len];
                        prow.iter_mut().for_each(|x| *x = F::zero());
                        let ctx = &mut lt.ctx[qrow * d + off..qrow * d + off + hd];
                        ctx.iter_mut().for_each(|x| *x = F::zero());
                        if !any {
                            continue;
                        }
                        softmax(&scores[..=t], &mut probs[..=t]);
                        for j in 0..=t {
                            let pj = probs[j];
                            prow[j] = pj;
                            if pj == F::zero() {
                                continue;
                            }
                            let vrow = j * bsz + b;
                            let vv = &lt.v[vrow * d + off..vrow * d + off + hd];
                            for i in 0..hd {
                                ctx[i] += pj * vv[i];
                            }
                        }
                    }
                }
            }

            // mid = x + ctx W_o + b_o
            linear(
                &lt.ctx[rd.clone()],
                n,
                &p[lp.w_o.clone()],
                &p[lp.b_o.clone()],
                d,
                d,
                &mut lt.mid[rd.clone()],
            );
            for (m, &x) in lt.mid[rd.clone()].iter_mut().zip(x_in) {
                *m += x;
            }
            layer_norm(
                &lt.mid[rd.clone()],
                d,
                &p[lp.ln2_g.clone()],
                &p[lp.ln2_b.clone()],
                &mut lt.ln2[rd.clone()],
                &mut lt.ln2_mean[r0..r1],
                &mut lt.ln2_rstd[r0..r1],
            );
            let rf = r0 * ff..r1 * ff;
            linear(
                &lt.ln2[rd.clone()],
                n,
                &p[lp.w_fc.clone()],
                &p[lp.b_fc.clone()],
                d,
                ff,
                &mut lt.fc[rf.clone()],
            );
            for (o, &z) in lt.act[rf.clone()].iter_mut().zip(&lt.fc[rf.clone()]) {
                *o = gelu(z);
            }
            linear(
                &lt.act[rf],
                n,
                &p[lp.w_proj.clone()],
                &p[lp.b_proj.clone()],
                ff,
                d,
                x_out,
            );
            for (o, &m) in x_out.iter_mut().zip(&lt.mid[rd.clone()]) {
                *o += m;
            }
            apply_patch(&mut tape.cache.resid[l + 1], patches, l + 1, a, e, bsz, d);
        }

        let top = &tape.cache.resid[cfg.layers][rd.clone()];
        layer_norm(
            top,
            d,
            &p[lay.lnf_g.clone()],
            &p[lay.lnf_b.clone()],
            &mut tape.lnf[rd.clone()],
            &mut tape.lnf_mean[r0..r1],
            &mut tape.lnf_rstd[r0..r1],
        );
        // logits = LN_f(h) W_Uᵀ + b_U
        super::scalar::matmul(
            n,
            d,
            v,
            &tape.lnf[rd],
            super::scalar::Op::N,
            &p[lay.w_u.clone()],
            super::scalar::Op::T,
            F::zero(),
            &mut tape.logits[r0 * v..r1 * v],
        );
        let bu = &p[lay.b_u.clone()];
        for row in tape.logits[r0 * v..r1 * v].chunks_exact_mut(v) {
            for (z, &b) in row.iter_mut().zip(bu) {
                *z += b;
            }
        }
    }

    /// Logit lens: `softmax(W_U LN_f(h) + b_U)` for an arbitrary residual.
    pub fn lens_distribution(&self, h: &[F]) -> Vec<F> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let mut ln = vec![F::zero(); d];
        let (mut m, mut r) = ([F::zero()], [F::zero()]);
        layer_norm(
            h,
            d,
            &self.params[self.layout.lnf_g.clone()],
            &self.params[self.layout.lnf_b.clone()],
            &mut ln,
            &mut m,
            &mut r,
        );
        let w_u = &self.params[self.layout.w_u.clone()];
        let b_u = &self.params[self.layout.b_u.clone()];
        let logits: Vec<F> = (0..v)
            .map(|k| dot(&w_u[k * d..(k + 1) * d], &ln) + b_u[k])
            .collect();
        let mut probs = vec![F::zero(); v];
        softmax(&logits, &mut probs);
        probs
    }
}

fn apply_patch<F: Scalar>(
    resid: &mut [F],
    patches: &[Patch<F>],
    depth: usize,
    a: usize,
    e: usize,
    bsz: usize,
    d: usize,
) {
    for p in patches {
        if p.depth == depth && (a..e).contains(&p.position) {
            let r0 = p.position * bsz;
            resid[r0 * d..(r0 + bsz) * d].copy_from_slice(&p.values);
        }
    }
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::ModelConfig;
    use crate::taskgen::{serialize, Regime, TaskInstance, TaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            context_length: 32,
            vocab_size: Vocabulary::SIZE,
            latent_steps: 6,
        }
    }

    fn student_batch() -> TokenBatch {
        let spec = TaskSpec::new(50, 1, 2);
        let exs: Vec<_> = [[3, 4, 5], [7, 1, 1], [10, 20, 30]]
            .iter()
            .map(|x| {
                let inst = TaskInstance::from_inputs(spec, x.to_vec()).unwrap();
                serialize(&inst, Regime::Student, 6, 64).unwrap()
            })
            .collect();
        TokenBatch::from_examples(&exs.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn chunking_starts_at_each_latent() {
        assert_eq!(chunk_bounds(5, &[]), vec![(0, 5)]);
        assert_eq!(chunk_bounds(12, &[4, 5, 6]), vec![(0, 4), (4, 5), (5, 6), (6, 12)]);
    }

    #[test]
    fn attention_is_causal_and_normalized() {
        let model: Model<f64> = Model::init(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let out = model
            .forward(&student_batch(), ForwardOptions::latent().with_capture())
            .unwrap();
        let cache = out.cache.unwrap();
        assert!(cache.attention_violation() < 1e-12);
        assert_eq!(cache.depths(), 3);
        assert_eq!(cache.len, 12);
    }

    #[test]
    fn latent_feedback_is_deterministic_and_differs_from_plain_embedding() {
        let model: Model = Model::init(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let batch = student_batch();
        let a = model.forward(&batch, ForwardOptions::latent()).unwrap();
        let b = model.forward(&batch, ForwardOptions::latent()).unwrap();
        assert_eq!(a.logits, b.logits);
        // Plain mode rejects the placeholder.
        assert!(matches!(
            model.forward(&batch, ForwardOptions::plain()),
            Err(Error::UnknownToken { .. })
        ));
    }

    #[test]
    fn chunked_forward_matches_per_example_forward() {
        let model: Model<f64> = Model::init(&small(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let batch = student_batch();
        let full = model.forward(&batch, ForwardOptions::latent()).unwrap();
        for b in 0..batch.batch {
            let single = TokenBatch::new(&[batch.ids[b * batch.len..(b + 1) * batch.len].to_vec()]).unwrap();
            let one = model.forward(&single, ForwardOptions::latent()).unwrap();
            for t in 0..batch.len {
                for (x, y) in full.logits_at(b, t).iter().zip(one.logits_at(0, t)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn errors_on_overflow_and_unknown_ids() {
        let model: Model = Model::init(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let long = TokenBatch::new(&[vec![1; 33]]).unwrap();
        assert!(matches!(
            model.forward(&long, ForwardOptions::plain()),
            Err(Error::ContextOverflow { .. })
        ));
        let bad = TokenBatch::new(&[vec![1, 99]]).unwrap();
        assert!(matches!(
            model.forward(&bad, ForwardOptions::plain()),
            Err(Error::UnknownToken { id: 99, position: 1 })
        ));
    }

    #[test]
    fn lens_at_top_equals_output() {
        let model: Model<f64> = Model::init(&small(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let batch = student_batch();
        let out = model
            .forward(&batch, ForwardOptions::latent().with_capture())
            .unwrap();
        let cache = out.cache.as_ref().unwrap();
        for b in 0..batch.batch {
            for t in 0..batch.len {
                let lens = model.lens_distribution(cache.residual(2, t, b));
                let mut direct = vec![0.0; lens.len()];
                softmax(out.logits_at(b, t), &mut direct);
                for (x, y) in lens.iter().zip(&direct) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn patch_with_own_value_is_identity() {
        let model: Model<f64> = Model::init(&small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let batch = student_batch();
        let base = model
            .forward(&batch, ForwardOptions::latent().with_capture())
            .unwrap();
        let cache = base.cache.as_ref().unwrap();
        for depth in 0..3 {
            let pos = 5;
            let values: Vec<f64> = (0..batch.batch)
                .flat_map(|b| cache.residual(depth, pos, b).to_vec())
                .collect();
            let patch = Patch {
                depth,
                position: pos,
                values,
            };
            let opts = ForwardOptions {
                patches: std::slice::from_ref(&patch),
                ..ForwardOptions::latent()
            };
            let patched = model.forward(&batch, opts).unwrap();
            assert_eq!(patched.logits, base.logits);
        }
    }

    #[test]
    fn padding_keys_are_masked() {
        let model: Model<f64> = Model::init(&small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let padded = TokenBatch::new(&[vec![3, 4, Vocabulary::ANS, Vocabulary::PAD, Vocabulary::PAD]]).unwrap();
        let plain = TokenBatch::new(&[vec![3, 4, Vocabulary::ANS]]).unwrap();
        let a = model.forward(&padded, ForwardOptions::plain()).unwrap();
        let b = model.forward(&plain, ForwardOptions::plain()).unwrap();
        for t in 0..3 {
            for (x, y) in a.logits_at(0, t).iter().zip(b.logits_at(0, t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
