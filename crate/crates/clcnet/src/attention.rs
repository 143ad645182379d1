//! Single-head scaled dot-product self-attention over feature positions,
//! shared across all decision steps. Each position's scalar value is embedded
//! into a small width together with a learned positional embedding; the
//! attention context is projected back to a scalar and residual-added.
//!
//! The value projection carries no bias, so a zeroed value projection makes
//! the whole module an exact identity.
//!

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mapping::softmax_backward;
use crate::nn::{dot, sum};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfAttention {
    /// Number of feature positions.
    pub m: usize,
    /// Embedding / head width.
    pub width: usize,
    pub w_embed: Vec<f64>,
    pub b_embed: Vec<f64>,
    /// Learned positional embeddings, row-major `m x width`.
    pub pos: Vec<f64>,
    /// Projections, row-major `width x width` (input index major).
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub w_out: Vec<f64>,
    #[serde(skip)]
    pub(crate) g_w_embed: Vec<f64>,
    #[serde(skip)]
    pub(crate) g_b_embed: Vec<f64>,
    #[serde(skip)]
    pub(crate) g_pos: Vec<f64>,
    #[serde(skip)]
    pub(crate) g_wq: Vec<f64>,
    #[serde(skip)]
    pub(crate) g_wk: Vec<f64>,
    #[serde(skip)]
    pub(crate) g_wv: Vec<f64>,
    #[serde(skip)]
    pub(crate) g_w_out: Vec<f64>,
}

/// Per-sample activations kept for the backward pass. Keys and values are
/// stored transposed (width-major) so position products run over contiguous
/// length-`m` rows.
#[derive(Debug, Clone)]
pub struct AttnSampleCache {
    e: Vec<f64>,
    q: Vec<f64>,
    k_t: Vec<f64>,
    v_t: Vec<f64>,
    /// Softmax'd rows, row-major m x m.
    attn: Vec<f64>,
    ctx: Vec<f64>,
}

pub struct AttnCache {
    samples: Vec<AttnSampleCache>,
}

/// Recomputes one softmax'd attention row into `row`.
fn attention_row(q_row: &[f64], k_t: &[f64], m: usize, scale: f64, row: &mut [f64]) {
    row.fill(0.0);
    for (a, &qa) in q_row.iter().enumerate() {
        if qa == 0.0 {
            continue;
        }
        let krow = &k_t[a * m..(a + 1) * m];
        for (r, kv) in row.iter_mut().zip(krow) {
            *r += qa * kv;
        }
    }
    let mut max = f64::NEG_INFINITY;
    for r in row.iter_mut() {
        *r *= scale;
        if *r > max {
            max = *r;
        }
    }
    for r in row.iter_mut() {
        *r = (*r - max).exp();
    }
    let inv = 1.0 / sum(row);
    for r in row.iter_mut() {
        *r *= inv;
    }
}

impl SelfAttention {
    /// The value projection starts at zero, so the module begins as an exact
    /// identity and learns its contribution gradually.
    pub fn init<R: Rng>(m: usize, width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let mut mat =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let w_embed = mat(width);
        let b_embed = mat(width);
        let mut pos = mat(m * width);
        for p in pos.iter_mut() {
            *p *= 0.1;
        }
        let wq = mat(width * width);
        let wk = mat(width * width);
        let w_out = mat(width);
        Self {
            m,
            width,
            w_embed,
            b_embed,
            pos,
            wq,
            wk,
            wv: vec![0.0; width * width],
            w_out,
            g_w_embed: Vec::new(),
            g_b_embed: Vec::new(),
            g_pos: Vec::new(),
            g_wq: Vec::new(),
            g_wk: Vec::new(),
            g_wv: Vec::new(),
            g_w_out: Vec::new(),
        }
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        let w = self.width;
        let mut e = vec![0.0; self.m * w];
        for i in 0..self.m {
            let xi = x[i];
            let row = &mut e[i * w..(i + 1) * w];
            let pos = &self.pos[i * w..(i + 1) * w];
            for b in 0..w {
                row[b] = xi * self.w_embed[b] + self.b_embed[b] + pos[b];
            }
        }
        e
    }

    /// Row-major projection: `out[i, a] = sum_b e[i, b] * proj[b, a]`.
    fn project(&self, e: &[f64], proj: &[f64]) -> Vec<f64> {
        let w = self.width;
        let mut out = vec![0.0; self.m * w];
        for i in 0..self.m {
            let er = &e[i * w..(i + 1) * w];
            let or = &mut out[i * w..(i + 1) * w];
            for (b, &eb) in er.iter().enumerate() {
                if eb == 0.0 {
                    continue;
                }
                let prow = &proj[b * w..(b + 1) * w];
                for (o, p) in or.iter_mut().zip(prow) {
                    *o += eb * p;
                }
            }
        }
        out
    }

    /// Transposed projection: `out[a, j] = sum_b e[j, b] * proj[b, a]`.
    fn project_t(&self, e: &[f64], proj: &[f64]) -> Vec<f64> {
        let m = self.m;
        let w = self.width;
        let mut out = vec![0.0; m * w];
        for j in 0..m {
            let er = &e[j * w..(j + 1) * w];
            for a in 0..w {
                let mut acc = 0.0;
                for (b, &eb) in er.iter().enumerate() {
                    acc += eb * proj[b * w + a];
                }
                out[a * m + j] = acc;
            }
        }
        out
    }

    fn forward_sample(&self, x: &[f64]) -> (Vec<f64>, AttnSampleCache) {
        let m = self.m;
        let w = self.width;
        let scale = 1.0 / (w as f64).sqrt();
        let e = self.embed(x);
        let q = self.project(&e, &self.wq);
        let k_t = self.project_t(&e, &self.wk);
        let v_t = self.project_t(&e, &self.wv);
        let mut ctx = vec![0.0; m * w];
        let mut attn = vec![0.0; m * m];
        let mut y = vec![0.0; m];
        for i in 0..m {
            let row = &mut attn[i * m..(i + 1) * m];
            attention_row(&q[i * w..(i + 1) * w], &k_t, m, scale, row);
            let crow = &mut ctx[i * w..(i + 1) * w];
            let mut acc = x[i];
            for (a, c) in crow.iter_mut().enumerate() {
                let d = dot(row, &v_t[a * m..(a + 1) * m]);
                *c = d;
                acc += d * self.w_out[a];
            }
            y[i] = acc;
        }
        (
            y,
            AttnSampleCache {
                e,
                q,
                k_t,
                v_t,
                attn,
                ctx,
            },
        )
    }

    pub fn forward(&self, x: &[f64], bsz: usize) -> (Vec<f64>, AttnCache) {
        let m = self.m;
        debug_assert_eq!(x.len(), bsz * m);
        let results: Vec<(Vec<f64>, AttnSampleCache)> = (0..bsz)
            .into_par_iter()
            .map(|b| self.forward_sample(&x[b * m..(b + 1) * m]))
            .collect();
        let mut y = Vec::with_capacity(bsz * m);
        let mut samples = Vec::with_capacity(bsz);
        for (row, cache) in results {
            y.extend_from_slice(&row);
            samples.push(cache);
        }
        (y, AttnCache { samples })
    }

    fn backward_sample(
        &self,
        x: &[f64],
        cache: &AttnSampleCache,
        dy: &[f64],
        grads: &mut AttnGrads,
    ) -> Vec<f64> {
        let m = self.m;
        let w = self.width;
        let scale = 1.0 / (w as f64).sqrt();
        let mut dx: Vec<f64> = dy.to_vec(); // residual path
        let mut dctx = vec![0.0; m * w];
        for i in 0..m {
            let g = dy[i];
            let crow = &cache.ctx[i * w..(i + 1) * w];
            let drow = &mut dctx[i * w..(i + 1) * w];
            for a in 0..w {
                drow[a] = g * self.w_out[a];
                grads.w_out[a] += g * crow[a];
            }
        }
        // Attention rows are recomputed one at a time; the softmax-input
        // gradient row feeds dq and dk_t immediately and is never stored.
        let mut dv_t = vec![0.0; m * w];
        let mut dk_t = vec![0.0; m * w];
        let mut dq = vec![0.0; m * w];
        let mut dattn = vec![0.0; m];
        for i in 0..m {
            let arow = &cache.attn[i * m..(i + 1) * m];
            let dcrow = &dctx[i * w..(i + 1) * w];
            dattn.fill(0.0);
            for (a, &dc) in dcrow.iter().enumerate() {
                if dc == 0.0 {
                    continue;
                }
                let vrow = &cache.v_t[a * m..(a + 1) * m];
                for (da, vv) in dattn.iter_mut().zip(vrow) {
                    *da += dc * vv;
                }
                let dvrow = &mut dv_t[a * m..(a + 1) * m];
                for (dvv, av) in dvrow.iter_mut().zip(arow) {
                    *dvv += dc * av;
                }
            }
            let ds_row = softmax_backward(arow, &dattn);
            let qi = &cache.q[i * w..(i + 1) * w];
            let dqi = &mut dq[i * w..(i + 1) * w];
            for a in 0..w {
                let krow = &cache.k_t[a * m..(a + 1) * m];
                dqi[a] = dot(&ds_row, krow) * scale;
                let dkrow = &mut dk_t[a * m..(a + 1) * m];
                let qa = qi[a] * scale;
                if qa != 0.0 {
                    for (dkv, s) in dkrow.iter_mut().zip(&ds_row) {
                        *dkv += qa * s;
                    }
                }
            }
        }
        // de = dq Wq^T + dk Wk^T + dv Wv^T; projection grads from e
        let mut de = vec![0.0; m * w];
        for i in 0..m {
            let er = &cache.e[i * w..(i + 1) * w];
            let der = &mut de[i * w..(i + 1) * w];
            let dqr = &dq[i * w..(i + 1) * w];
            for b in 0..w {
                let wq_row = &self.wq[b * w..(b + 1) * w];
                let wk_row = &self.wk[b * w..(b + 1) * w];
                let wv_row = &self.wv[b * w..(b + 1) * w];
                let mut acc = 0.0;
                for a in 0..w {
                    let dk_ia = dk_t[a * m + i];
                    let dv_ia = dv_t[a * m + i];
                    acc += dqr[a] * wq_row[a] + dk_ia * wk_row[a] + dv_ia * wv_row[a];
                    grads.wq[b * w + a] += er[b] * dqr[a];
                    grads.wk[b * w + a] += er[b] * dk_ia;
                    grads.wv[b * w + a] += er[b] * dv_ia;
                }
                der[b] = acc;
            }
        }
        for i in 0..m {
            let der = &de[i * w..(i + 1) * w];
            let xi = x[i];
            let mut acc = 0.0;
            for b in 0..w {
                acc += der[b] * self.w_embed[b];
                grads.w_embed[b] += der[b] * xi;
                grads.b_embed[b] += der[b];
                grads.pos[i * w + b] += der[b];
            }
            dx[i] += acc;
        }
        dx
    }

    pub fn backward(&mut self, x: &[f64], cache: &AttnCache, dy: &[f64], bsz: usize) -> Vec<f64> {
        let m = self.m;
        // Per-sample contributions computed in parallel, folded in batch
        // order so the result does not depend on thread scheduling.
        let partials: Vec<(Vec<f64>, AttnGrads)> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let mut grads = AttnGrads::zeros(m, self.width);
                let dx = self.backward_sample(
                    &x[b * m..(b + 1) * m],
                    &cache.samples[b],
                    &dy[b * m..(b + 1) * m],
                    &mut grads,
                );
                (dx, grads)
            })
            .collect();
        let mut dx = Vec::with_capacity(bsz * m);
        for (row, grads) in partials {
            dx.extend_from_slice(&row);
            grads.accumulate_into(self);
        }
        dx
    }

    pub(crate) fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.w_embed, &mut self.g_w_embed);
        f(&mut self.b_embed, &mut self.g_b_embed);
        f(&mut self.pos, &mut self.g_pos);
        f(&mut self.wq, &mut self.g_wq);
        f(&mut self.wk, &mut self.g_wk);
        f(&mut self.wv, &mut self.g_wv);
        f(&mut self.w_out, &mut self.g_w_out);
    }

    pub fn validate(&self) -> bool {
        let w = self.width;
        self.w_embed.len() == w
            && self.b_embed.len() == w
            && self.pos.len() == self.m * w
            && self.wq.len() == w * w
            && self.wk.len() == w * w
            && self.wv.len() == w * w
            && self.w_out.len() == w
            && self
                .w_embed
                .iter()
                .chain(&self.b_embed)
                .chain(&self.pos)
                .chain(&self.wq)
                .chain(&self.wk)
                .chain(&self.wv)
                .chain(&self.w_out)
                .all(|v| v.is_finite())
    }
}

struct AttnGrads {
    w_embed: Vec<f64>,
    b_embed: Vec<f64>,
    pos: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    w_out: Vec<f64>,
}

impl AttnGrads {
    fn zeros(m: usize, width: usize) -> Self {
        Self {
            w_embed: vec![0.0; width],
            b_embed: vec![0.0; width],
            pos: vec![0.0; m * width],
            wq: vec![0.0; width * width],
            wk: vec![0.0; width * width],
            wv: vec![0.0; width * width],
            w_out: vec![0.0; width],
        }
    }

    fn accumulate_into(&self, layer: &mut SelfAttention) {
        let pairs: [(&Vec<f64>, &mut Vec<f64>); 7] = [
            (&self.w_embed, &mut layer.g_w_embed),
            (&self.b_embed, &mut layer.g_b_embed),
            (&self.pos, &mut layer.g_pos),
            (&self.wq, &mut layer.g_wq),
            (&self.wk, &mut layer.g_wk),
            (&self.wv, &mut layer.g_wv),
            (&self.w_out, &mut layer.g_w_out),
        ];
        for (src, dst) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}
