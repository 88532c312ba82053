//! Exact reverse-mode differentiation of the forward pass.
//!
//! Hard skim decisions are handled straight-through: the masks are treated
//! as constants, so the gradient flows through the gate probabilities while
//! the 0.5 threshold itself contributes nothing. Away from threshold
//! crossings this is the exact derivative of the (piecewise-smooth) soft
//! efficiency surrogate and of the classification loss.

use alloc::vec;
use alloc::vec::Vec;

use super::ops::{matvec_t_add, outer_add, rmsnorm_bwd_add, silu_deriv};
use super::{ForwardTrace, ModelError, SkimTransformer, TraceDetail};
use crate::tokenizer::TokenSequence;

/// n×m matrix of ∂L_eff_soft/∂E_i^j — the derivative of the soft efficiency
/// surrogate with respect to each input embedding entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl GradientMatrix {
    pub(crate) fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Σ_j over one token row — the Eq.-style signed importance sum.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Output-side gradient seeds for one backward pass.
pub(crate) struct Seeds<'a> {
    /// Gradient of the scalar loss with respect to the logits.
    pub d_logits: Option<&'a [f64]>,
    /// Weight on the soft efficiency surrogate.
    pub d_soft: f64,
}

impl SkimTransformer {
    /// Reverse pass. Accumulates parameter gradients into `param_grads`
    /// (flat, layout-aligned) when given, and returns the gradient with
    /// respect to the input embeddings when `want_embeddings` is set.
    pub(crate) fn backward(
        &self,
        cache: &super::ForwardCache,
        seeds: Seeds<'_>,
        mut param_grads: Option<&mut Vec<f64>>,
        want_embeddings: bool,
    ) -> Option<Vec<f64>> {
        let cfg = &self.cfg;
        let (m, heads, ffn, gh) = (cfg.embed_dim, cfg.num_heads, cfg.ffn_dim, cfg.gate_hidden_dim);
        let hd = m / heads;
        let n = cache.n;
        let num_layers = cfg.num_layers;
        let scale = 1.0 / crate::math::sqrt(hd as f64);
        let p = &self.params;

        // Running gradient with respect to the current hidden matrix.
        let mut d_h = vec![0.0; n * m];

        if let Some(d_logits) = seeds.d_logits {
            let mut d_u_cls = vec![0.0; m];
            matvec_t_add(&p[self.layout.head_w()], d_logits, cfg.num_classes, m, &mut d_u_cls);
            if let Some(g) = param_grads.as_deref_mut() {
                outer_add(&mut g[self.layout.head_w()], d_logits, &cache.u_cls, cfg.num_classes, m);
                for (gb, d) in g[self.layout.head_b()].iter_mut().zip(d_logits) {
                    *gb += d;
                }
            }
            let h_last = &cache.hs[num_layers];
            rmsnorm_bwd_add(&d_u_cls, &h_last[0..m], cache.rms_cls, &mut d_h[0..m]);
        }

        // d(soft loss)/dp for a token whose previous-layer mask is 1.
        let dp_unit = seeds.d_soft / (num_layers as f64 * n as f64);

        let mut d_fo_buf = vec![0.0; m];
        let mut d_af = vec![0.0; ffn];
        let mut d_zf = vec![0.0; ffn];
        let mut d_u2 = vec![0.0; m];
        let mut d_z1 = vec![0.0; gh];

        for l in (0..num_layers).rev() {
            let lc = &cache.layers[l];
            let h_pre = &cache.hs[l];

            // ---- feed-forward sublayer ----
            let (w1, w2) = (&p[self.layout.w1(l)], &p[self.layout.w2(l)]);
            for &i in &lc.active {
                d_fo_buf.copy_from_slice(&d_h[i * m..(i + 1) * m]);
                if let Some(g) = param_grads.as_deref_mut() {
                    outer_add(&mut g[self.layout.w2(l)], &d_fo_buf, &lc.ffn_a[i * ffn..(i + 1) * ffn], m, ffn);
                    for (gb, d) in g[self.layout.b2(l)].iter_mut().zip(&d_fo_buf) {
                        *gb += d;
                    }
                }
                d_af.fill(0.0);
                matvec_t_add(w2, &d_fo_buf, m, ffn, &mut d_af);
                for t in 0..ffn {
                    d_zf[t] = d_af[t] * silu_deriv(lc.ffn_z[i * ffn + t]);
                }
                if let Some(g) = param_grads.as_deref_mut() {
                    outer_add(&mut g[self.layout.w1(l)], &d_zf, &lc.u_ffn[i * m..(i + 1) * m], ffn, m);
                    for (gb, d) in g[self.layout.b1(l)].iter_mut().zip(&d_zf) {
                        *gb += d;
                    }
                }
                d_u2.fill(0.0);
                matvec_t_add(w1, &d_zf, ffn, m, &mut d_u2);
                rmsnorm_bwd_add(&d_u2, &lc.h_mid[i * m..(i + 1) * m], lc.rms_ffn[i], &mut d_h[i * m..(i + 1) * m]);
            }

            // ---- attention sublayer ----
            // d_h now holds the gradient w.r.t. h_mid. Gather everything
            // into d_u first; the shared pre-norm is backpropagated once per
            // row at the end (the gate reads the same normalized input).
            let (wq, wk, wv, wo) = (
                &p[self.layout.wq(l)],
                &p[self.layout.wk(l)],
                &p[self.layout.wv(l)],
                &p[self.layout.wo(l)],
            );
            let mut d_u = vec![0.0; n * m];
            let mut d_q = vec![0.0; n * m];
            let mut d_k = vec![0.0; n * m];
            let mut d_v = vec![0.0; n * m];
            let mut d_cat = vec![0.0; n * m];
            for &i in &lc.active {
                let d_ao = &d_h[i * m..(i + 1) * m];
                if let Some(g) = param_grads.as_deref_mut() {
                    outer_add(&mut g[self.layout.wo(l)], d_ao, &lc.cat[i * m..(i + 1) * m], m, m);
                }
                matvec_t_add(wo, d_ao, m, m, &mut d_cat[i * m..(i + 1) * m]);
            }
            let na = lc.active.len();
            let mut d_alpha = vec![0.0; na];
            let mut d_s = vec![0.0; na];
            let mut dq_tmp = vec![0.0; hd];
            for hh in 0..heads {
                for &i in &lc.active {
                    let d_ctx = &d_cat[i * m + hh * hd..i * m + (hh + 1) * hd];
                    let wrow = &lc.attn_w[hh * n * n + i * n..hh * n * n + (i + 1) * n];
                    // d_v[j] += α_ij · d_ctx ; d_α_ij = d_ctx · v_j
                    for (slot, &j) in lc.active.iter().enumerate() {
                        let a = wrow[j];
                        let vj = &lc.v[j * m + hh * hd..j * m + (hh + 1) * hd];
                        let dv = &mut d_v[j * m + hh * hd..j * m + (hh + 1) * hd];
                        let mut da = 0.0;
                        for d in 0..hd {
                            dv[d] += a * d_ctx[d];
                            da += d_ctx[d] * vj[d];
                        }
                        d_alpha[slot] = da;
                    }
                    // softmax backward
                    let mut dot = 0.0;
                    for (slot, &j) in lc.active.iter().enumerate() {
                        dot += wrow[j] * d_alpha[slot];
                    }
                    for (slot, &j) in lc.active.iter().enumerate() {
                        d_s[slot] = wrow[j] * (d_alpha[slot] - dot);
                    }
                    // score backward: s_ij = scale·q_i·k_j
                    let qi = &lc.q[i * m + hh * hd..i * m + (hh + 1) * hd];
                    dq_tmp.fill(0.0);
                    for (slot, &j) in lc.active.iter().enumerate() {
                        let kj = &lc.k[j * m + hh * hd..j * m + (hh + 1) * hd];
                        let ds = d_s[slot] * scale;
                        let dkj = &mut d_k[j * m + hh * hd..j * m + (hh + 1) * hd];
                        for d in 0..hd {
                            dq_tmp[d] += ds * kj[d];
                            dkj[d] += ds * qi[d];
                        }
                    }
                    let dq = &mut d_q[i * m + hh * hd..i * m + (hh + 1) * hd];
                    for d in 0..hd {
                        dq[d] += dq_tmp[d];
                    }
                }
            }
            for &j in &lc.active {
                let uj = &lc.u[j * m..(j + 1) * m];
                if let Some(g) = param_grads.as_deref_mut() {
                    outer_add(&mut g[self.layout.wq(l)], &d_q[j * m..(j + 1) * m], uj, m, m);
                    outer_add(&mut g[self.layout.wk(l)], &d_k[j * m..(j + 1) * m], uj, m, m);
                    outer_add(&mut g[self.layout.wv(l)], &d_v[j * m..(j + 1) * m], uj, m, m);
                }
                let du = &mut d_u[j * m..(j + 1) * m];
                matvec_t_add(wq, &d_q[j * m..(j + 1) * m], m, m, du);
                matvec_t_add(wk, &d_k[j * m..(j + 1) * m], m, m, du);
                matvec_t_add(wv, &d_v[j * m..(j + 1) * m], m, m, du);
            }

            // ---- skim gate ----
            // Only tokens that were alive entering this layer carry loss
            // weight; their probabilities appear in the soft surrogate.
            let (g1p, g2p) = (&p[self.layout.g1(l)], &p[self.layout.g2(l)]);
            if dp_unit != 0.0 {
                for i in 0..n {
                    if !lc.mask_prev[i] {
                        continue;
                    }
                    let pi = lc.gate_p[i];
                    let dz2 = dp_unit * pi * (1.0 - pi);
                    let a1 = &lc.gate_a1[i * gh..(i + 1) * gh];
                    for t in 0..gh {
                        d_z1[t] = dz2 * g2p[t] * (1.0 - a1[t] * a1[t]);
                    }
                    if let Some(g) = param_grads.as_deref_mut() {
                        for (gt, at) in g[self.layout.g2(l)].iter_mut().zip(a1) {
                            *gt += dz2 * at;
                        }
                        g[self.layout.gb2(l).start] += dz2;
                        outer_add(&mut g[self.layout.g1(l)], &d_z1, &lc.u[i * m..(i + 1) * m], gh, m);
                        for (gb, d) in g[self.layout.gb1(l)].iter_mut().zip(&d_z1) {
                            *gb += d;
                        }
                    }
                    matvec_t_add(g1p, &d_z1, gh, m, &mut d_u[i * m..(i + 1) * m]);
                }
            }

            // ---- shared pre-norm ----
            for i in 0..n {
                if !lc.mask_prev[i] {
                    continue;
                }
                rmsnorm_bwd_add(
                    &d_u[i * m..(i + 1) * m],
                    &h_pre[i * m..(i + 1) * m],
                    lc.rms[i],
                    &mut d_h[i * m..(i + 1) * m],
                );
            }
        }

        if let Some(g) = param_grads.as_deref_mut() {
            let wte_range = self.layout.wte();
            let wpe_range = self.layout.wpe();
            for i in 0..n {
                let id = cache.token_ids[i] as usize;
                let d = &d_h[i * m..(i + 1) * m];
                for j in 0..m {
                    g[wte_range.start + id * m + j] += d[j];
                    g[wpe_range.start + i * m + j] += d[j];
                }
            }
        }

        want_embeddings.then_some(d_h)
    }

    /// Exact gradient of the soft efficiency surrogate with respect to each
    /// input embedding vector.
    pub fn grad_wrt_embeddings(&self, tokens: &TokenSequence) -> Result<GradientMatrix, ModelError> {
        Ok(self.forward_with_gradient(tokens)?.1)
    }

    /// One forward plus one reverse pass: the full trace and the embedding
    /// gradient of the soft surrogate, computed from a single model pass.
    pub fn forward_with_gradient(
        &self,
        tokens: &TokenSequence,
    ) -> Result<(ForwardTrace, GradientMatrix), ModelError> {
        self.validate_tokens(tokens)?;
        let emb = self.embed(&tokens.ids);
        let cache = self.run_forward(emb, tokens.ids.clone());
        let d_emb = self
            .backward(&cache, Seeds { d_logits: None, d_soft: 1.0 }, None, true)
            .expect("embedding gradient requested");
        self.note_gradient_invocation();
        let grad = GradientMatrix::new(cache.n, self.cfg.embed_dim, d_emb);
        Ok((cache.into_trace(TraceDetail::WithHiddenStates), grad))
    }
}
