//! Reverse-mode pass over a [`Tape`].
//!
//! Chunks are processed in reverse order. Within a chunk the layers run top
//! to bottom; key/value gradients produced by later chunks are accumulated in
//! per-layer buffers before the chunk that owns those positions is reached,
//! and gradients flowing into a latent embedding are routed back to the
//! final-layer residual of the preceding position.

use super::forward::{dot, Tape};
use super::ops::{gelu_grad, layer_norm_backward, linear_backward};
use super::params::Model;
use super::scalar::{matmul, Op, Scalar};

/// Extra gradient on the residual stream at one (depth, position),
/// `[batch, d_model]`.
#[derive(Clone, Debug)]
pub(crate) struct ResidGrad<F> {
    pub depth: usize,
    pub position: usize,
    pub grad: Vec<F>,
}

impl<F: Scalar> Model<F> {
    /// Accumulates parameter gradients into `grads`.
    ///
    /// `dlogits` is time-major `[len * batch, vocab]`.
    pub(crate) fn backward(
        &self,
        tape: &Tape<F>,
        dlogits: &[F],
        injections: &[ResidGrad<F>],
        grads: &mut [F],
    ) {
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let (bsz, len, d, ff, v) = (tape.batch(), tape.len(), cfg.d_model, cfg.d_ff(), cfg.vocab_size);
        let rows = bsz * len;
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = F::one() / F::from_usize(hd).unwrap().sqrt();

        let mut dk_all: Vec<Vec<F>> = (0..cfg.layers).map(|_| vec![F::zero(); rows * d]).collect();
        let mut dv_all: Vec<Vec<F>> = (0..cfg.layers).map(|_| vec![F::zero(); rows * d]).collect();
        // Gradient reaching h_L of a position through the next latent input.
        let mut dfeed = vec![F::zero(); rows * d];

        let inject = |dres: &mut [F], depth: usize, a: usize, e: usize| {
            for g in injections.iter().filter(|g| g.depth == depth && (a..e).contains(&g.position)) {
                let off = (g.position - a) * bsz * d;
                for (x, &y) in dres[off..off + bsz * d].iter_mut().zip(&g.grad) {
                    *x += y;
                }
            }
        };

        for &(a, e) in tape.chunks().iter().rev() {
            let (r0, r1) = (a * bsz, e * bsz);
            let n = r1 - r0;
            let rd = r0 * d..r1 * d;
            let mut dres = vec![F::zero(); n * d];

            // Unembedding and final norm.
            let dl = &dlogits[r0 * v..r1 * v];
            if dl.iter().any(|&x| x != F::zero()) {
                let mut dlnf = vec![F::zero(); n * d];
                matmul(n, v, d, dl, Op::N, &p[lay.w_u.clone()], Op::N, F::zero(), &mut dlnf);
                // dW_U[v, d] += dlᵀ · lnf
                matmul(v, n, d, dl, Op::T, &tape.lnf[rd.clone()], Op::N, F::one(), &mut grads[lay.w_u.clone()]);
                let db = &mut grads[lay.b_u.clone()];
                for row in dl.chunks_exact(v) {
                    for (g, &x) in db.iter_mut().zip(row) {
                        *g += x;
                    }
                }
                let (dg, db) = split_pair(grads, &lay.lnf_g, &lay.lnf_b);
                layer_norm_backward(
                    &dlnf,
                    &tape.cache.resid[cfg.layers][rd.clone()],
                    d,
                    &p[lay.lnf_g.clone()],
                    &tape.lnf_mean[r0..r1],
                    &tape.lnf_rstd[r0..r1],
                    &mut dres,
                    dg,
                    db,
                );
            }
            for (x, &y) in dres.iter_mut().zip(&dfeed[rd.clone()]) {
                *x += y;
            }
            inject(&mut dres, cfg.layers, a, e);

            for l in (0..cfg.layers).rev() {
                let lp = &lay.layers[l];
                let lt = &tape.layers[l];
                let rf = r0 * ff..r1 * ff;

                // MLP: out = mid + gelu(LN2(mid) W_fc + b_fc) W_proj + b_proj
                let mut dact = vec![F::zero(); n * ff];
                {
                    let (dw, db) = split_pair(grads, &lp.w_proj, &lp.b_proj);
                    linear_backward(&dres, &lt.act[rf.clone()], n, &p[lp.w_proj.clone()], ff, d, Some(&mut dact), dw, db);
                }
                for (g, &z) in dact.iter_mut().zip(&lt.fc[rf.clone()]) {
                    *g *= gelu_grad(z);
                }
                let mut dln2 = vec![F::zero(); n * d];
                {
                    let (dw, db) = split_pair(grads, &lp.w_fc, &lp.b_fc);
                    linear_backward(&dact, &lt.ln2[rd.clone()], n, &p[lp.w_fc.clone()], d, ff, Some(&mut dln2), dw, db);
                }
                let mut dmid = dres;
                {
                    let (dg, db) = split_pair(grads, &lp.ln2_g, &lp.ln2_b);
                    layer_norm_backward(
                        &dln2,
                        &lt.mid[rd.clone()],
                        d,
                        &p[lp.ln2_g.clone()],
                        &lt.ln2_mean[r0..r1],
                        &lt.ln2_rstd[r0..r1],
                        &mut dmid,
                        dg,
                        db,
                    );
                }

                // Attention output projection: mid = x + ctx W_o + b_o
                let mut dctx = vec![F::zero(); n * d];
                {
                    let (dw, db) = split_pair(grads, &lp.w_o, &lp.b_o);
                    linear_backward(&dmid, &lt.ctx[rd.clone()], n, &p[lp.w_o.clone()], d, d, Some(&mut dctx), dw, db);
                }

                // Attention core for the chunk's queries.
                let mut dq = vec![F::zero(); n * d];
                let dk = &mut dk_all[l];
                let dv = &mut dv_all[l];
                let attn = &tape.cache.attn[l];
                let mut dp = vec![F::zero(); len];
                for b in 0..bsz {
                    for h in 0..heads {
                        let off = h * hd;
                        for t in a..e {
                            let qrow = t * bsz + b;
                            let base = ((b * heads + h) * len + t) * len;
                            let prow = &attn[base..base + len];
                            let dc = &dctx[(qrow - r0) * d + off..(qrow - r0) * d + off + hd];
                            let mut sum = F::zero();
                            for j in 0..=t {
                                if prow[j] == F::zero() {
                                    dp[j] = F::zero();
                                    continue;
                                }
                                let vrow = j * bsz + b;
                                dp[j] = dot(dc, &lt.v[vrow * d + off..vrow * d + off + hd]);
                                sum += prow[j] * dp[j];
                                let dvr = &mut dv[vrow * d + off..vrow * d + off + hd];
                                for i in 0..hd {
                                    dvr[i] += prow[j] * dc[i];
                                }
                            }
                            let q = &lt.q[qrow * d + off..qrow * d + off + hd];
                            for j in 0..=t {
                                if prow[j] == F::zero() {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - sum) * scale;
                                let krow = j * bsz + b;
                                let k = &lt.k[krow * d + off..krow * d + off + hd];
                                let dqr = &mut dq[(qrow - r0) * d + off..(qrow - r0) * d + off + hd];
                                for i in 0..hd {
                                    dqr[i] += ds * k[i];
                                }
                                let dkr = &mut dk[krow * d + off..krow * d + off + hd];
                                for i in 0..hd {
                                    dkr[i] += ds * q[i];
                                }
                            }
                        }
                    }
                }

                // Q/K/V projections; K/V rows of this chunk are complete now.
                let mut dln1 = vec![F::zero(); n * d];
                let ln1 = &lt.ln1[rd.clone()];
                for (dy, w, bias) in [
                    (&dq[..], &lp.w_q, &lp.b_q),
                    (&dk[rd.clone()], &lp.w_k, &lp.b_k),
                    (&dv[rd.clone()], &lp.w_v, &lp.b_v),
                ] {
                    let (dw, db) = split_pair(grads, w, bias);
                    linear_backward(dy, ln1, n, &p[w.clone()], d, d, Some(&mut dln1), dw, db);
                }
                let mut dx = dmid;
                {
                    let (dg, db) = split_pair(grads, &lp.ln1_g, &lp.ln1_b);
                    layer_norm_backward(
                        &dln1,
                        &tape.cache.resid[l][rd.clone()],
                        d,
                        &p[lp.ln1_g.clone()],
                        &lt.ln1_mean[r0..r1],
                        &lt.ln1_rstd[r0..r1],
                        &mut dx,
                        dg,
                        db,
                    );
                }
                inject(&mut dx, l, a, e);
                dres = dx;
            }

            // Embeddings.
            let is_latent = tape.latent_positions.binary_search(&a).is_ok();
            {
                let dpos = &mut grads[lay.pos_emb.clone()];
                for t in a..e {
                    for b in 0..bsz {
                        let row = (t - a) * bsz + b;
                        for i in 0..d {
                            dpos[t * d + i] += dres[row * d + i];
                        }
                    }
                }
            }
            let first_token_pos = if is_latent { a + 1 } else { a };
            {
                let dtok = &mut grads[lay.tok_emb.clone()];
                for t in first_token_pos..e {
                    for b in 0..bsz {
                        let id = tape.ids[b * len + t] as usize;
                        let row = (t - a) * bsz + b;
                        for i in 0..d {
                            dtok[id * d + i] += dres[row * d + i];
                        }
                    }
                }
            }
            if is_latent {
                let lat_rows = r0..r0 + bsz;
                let mut dz = vec![F::zero(); bsz * d];
                {
                    let (dg, db) = split_pair(grads, &lay.ln_lat_g, &lay.ln_lat_b);
                    layer_norm_backward(
                        &dres[..bsz * d],
                        &tape.lat_z[lat_rows.start * d..lat_rows.end * d],
                        d,
                        &p[lay.ln_lat_g.clone()],
                        &tape.lat_mean[lat_rows.clone()],
                        &tape.lat_rstd[lat_rows.clone()],
                        &mut dz,
                        dg,
                        db,
                    );
                }
                let prev = (r0 - bsz) * d..r0 * d;
                let h_prev = &tape.cache.resid[cfg.layers][prev.clone()];
                let (dw, db) = split_pair(grads, &lay.w_lat, &lay.b_lat);
                linear_backward(&dz, h_prev, bsz, &p[lay.w_lat.clone()], d, d, Some(&mut dfeed[prev]), dw, db);
            }
        }
    }
}

/// Two disjoint mutable sub-slices of the gradient vector.
fn split_pair<'a, F>(
    g: &'a mut [F],
    first: &std::ops::Range<usize>,
    second: &std::ops::Range<usize>,
) -> (&'a mut [F], &'a mut [F]) {
    assert!(first.end <= second.start || second.end <= first.start);
    if first.end <= second.start {
        let (lo, hi) = g.split_at_mut(second.start);
        (&mut lo[first.clone()], &mut hi[..second.len()])
    } else {
        let (lo, hi) = g.split_at_mut(first.start);
        (&mut hi[..first.len()], &mut lo[second.clone()])
    }
}
