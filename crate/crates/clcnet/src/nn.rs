//! Minimal batched neural-net layers with hand-written backward passes.
//!
//! Batches are row-major `Vec<f64>` buffers (`bsz` rows of `dim` entries).
//! Forward passes never mutate the layer, so scoring stays shareable across
//! threads; backward passes accumulate into per-layer gradient buffers.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Forward mode: training uses batch statistics in normalization layers,
/// evaluation uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dot product with four independent accumulators: breaks the loop-carried
/// dependency so the reduction runs at multiply-add throughput instead of
/// addition latency.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    let (a4, a_tail) = a.split_at(chunks * 4);
    let (b4, b_tail) = b.split_at(chunks * 4);
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_tail.iter().zip(b_tail) {
        s += x * y;
    }
    s
}

/// Four-chain sum, same rationale as [`dot`].
#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    let (a4, tail) = a.split_at(chunks * 4);
    for c in a4.chunks_exact(4) {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for x in tail {
        s += x;
    }
    s
}

/// Fully connected layer, weights row-major `out_dim x in_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(skip)]
    pub(crate) gw: Vec<f64>,
    #[serde(skip)]
    pub(crate) gb: Vec<f64>,
}

impl Dense {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            b: vec![0.0; out_dim],
            gw: Vec::new(),
            gb: Vec::new(),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            gw: Vec::new(),
            gb: Vec::new(),
        }
    }

    pub fn forward(&self, x: &[f64], bsz: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), bsz * self.in_dim);
        let mut y = vec![0.0; bsz * self.out_dim];
        y.par_chunks_mut(self.out_dim)
            .zip(x.par_chunks(self.in_dim))
            .for_each(|(yr, xr)| {
                for (o, yo) in yr.iter_mut().enumerate() {
                    let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                    *yo = self.b[o] + dot(row, xr);
                }
            });
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[f64], dout: &[f64], bsz: usize) -> Vec<f64> {
        debug_assert_eq!(dout.len(), bsz * self.out_dim);
        let in_dim = self.in_dim;
        let out_dim = self.out_dim;
        // Weight gradient rows are independent; within a row the batch is
        // summed in index order, which keeps results thread-count invariant.
        self.gw
            .par_chunks_mut(in_dim)
            .enumerate()
            .for_each(|(o, grow)| {
                for b in 0..bsz {
                    let g = dout[b * out_dim + o];
                    if g == 0.0 {
                        continue;
                    }
                    let xr = &x[b * in_dim..(b + 1) * in_dim];
                    for (gi, xi) in grow.iter_mut().zip(xr) {
                        *gi += g * xi;
                    }
                }
            });
        for (o, gb) in self.gb.iter_mut().enumerate() {
            let mut acc = 0.0;
            for b in 0..bsz {
                acc += dout[b * out_dim + o];
            }
            *gb += acc;
        }
        let mut dx = vec![0.0; bsz * in_dim];
        dx.par_chunks_mut(in_dim)
            .zip(dout.par_chunks(out_dim))
            .for_each(|(dxr, dor)| {
                for (o, &g) in dor.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = &self.w[o * in_dim..(o + 1) * in_dim];
                    for (d, wi) in dxr.iter_mut().zip(row) {
                        *d += g * wi;
                    }
                }
            });
        dx
    }

    pub(crate) fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.w, &mut self.gw);
        f(&mut self.b, &mut self.gb);
    }

    pub fn validate(&self) -> bool {
        self.w.len() == self.in_dim * self.out_dim
            && self.b.len() == self.out_dim
            && self.w.iter().chain(&self.b).all(|v| v.is_finite())
    }
}

/// Batch normalization over features. Training normalizes by batch
/// statistics; running statistics are updated explicitly (not inside the
/// forward pass) so repeated forward calls are pure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub dim: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    #[serde(skip)]
    pub(crate) ggamma: Vec<f64>,
    #[serde(skip)]
    pub(crate) gbeta: Vec<f64>,
}

/// Activations retained for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub(crate) xhat: Vec<f64>,
    pub(crate) inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    mode: Mode,
    bsz: usize,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64) -> Self {
        Self {
            dim,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
            eps: 1e-5,
            ggamma: Vec::new(),
            gbeta: Vec::new(),
        }
    }

    pub fn forward(&self, x: &[f64], bsz: usize, mode: Mode) -> (Vec<f64>, BnCache) {
        debug_assert_eq!(x.len(), bsz * self.dim);
        let dim = self.dim;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; dim];
                let mut var = vec![0.0; dim];
                for b in 0..bsz {
                    for (m, &xi) in mean.iter_mut().zip(&x[b * dim..(b + 1) * dim]) {
                        *m += xi;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= bsz as f64;
                }
                for b in 0..bsz {
                    for ((v, &m), &xi) in var.iter_mut().zip(&mean).zip(&x[b * dim..(b + 1) * dim])
                    {
                        let d = xi - m;
                        *v += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= bsz as f64;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for b in 0..bsz {
            let xr = &x[b * dim..(b + 1) * dim];
            let hr = &mut xhat[b * dim..(b + 1) * dim];
            let yr = &mut y[b * dim..(b + 1) * dim];
            for i in 0..dim {
                let h = (xr[i] - mean[i]) * inv_std[i];
                hr[i] = h;
                yr[i] = self.gamma[i] * h + self.beta[i];
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                mode,
                bsz,
            },
        )
    }

    /// Folds the cached batch statistics into the running statistics.
    pub fn update_running(&mut self, cache: &BnCache) {
        debug_assert_eq!(cache.mode, Mode::Train);
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&cache.batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&cache.batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    pub fn backward(&mut self, cache: &BnCache, dout: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let bsz = cache.bsz;
        debug_assert_eq!(dout.len(), bsz * dim);
        for i in 0..dim {
            let mut gg = 0.0;
            let mut gb = 0.0;
            for b in 0..bsz {
                let d = dout[b * dim + i];
                gg += d * cache.xhat[b * dim + i];
                gb += d;
            }
            self.ggamma[i] += gg;
            self.gbeta[i] += gb;
        }
        let mut dx = vec![0.0; bsz * dim];
        match cache.mode {
            Mode::Eval => {
                for b in 0..bsz {
                    for i in 0..dim {
                        dx[b * dim + i] = dout[b * dim + i] * self.gamma[i] * cache.inv_std[i];
                    }
                }
            }
            Mode::Train => {
                // dx = (gamma * inv_std / B) * (B*dout - sum(dout) - xhat * sum(dout*xhat))
                let nb = bsz as f64;
                for i in 0..dim {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for b in 0..bsz {
                        let d = dout[b * dim + i];
                        sum_d += d;
                        sum_dh += d * cache.xhat[b * dim + i];
                    }
                    let scale = self.gamma[i] * cache.inv_std[i] / nb;
                    for b in 0..bsz {
                        let d = dout[b * dim + i];
                        let h = cache.xhat[b * dim + i];
                        dx[b * dim + i] = scale * (nb * d - sum_d - h * sum_dh);
                    }
                }
            }
        }
        dx
    }

    pub(crate) fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.gamma, &mut self.ggamma);
        f(&mut self.beta, &mut self.gbeta);
    }

    pub fn validate(&self) -> bool {
        self.gamma.len() == self.dim
            && self.beta.len() == self.dim
            && self.running_mean.len() == self.dim
            && self.running_var.len() == self.dim
            && self
                .gamma
                .iter()
                .chain(&self.beta)
                .chain(&self.running_mean)
                .chain(&self.running_var)
                .all(|v| v.is_finite())
    }
}

/// Dense -> batch-norm -> gated linear unit. The dense layer doubles the
/// width; the gate halves it back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GluBlock {
    pub fc: Dense,
    pub bn: BatchNorm,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct GluCache {
    input: Vec<f64>,
    bn_cache: BnCache,
    /// Linear half of the gate input.
    u1: Vec<f64>,
    /// Sigmoid of the gating half.
    gate: Vec<f64>,
    bsz: usize,
}

impl GluBlock {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, momentum: f64, rng: &mut R) -> Self {
        Self {
            fc: Dense::init(in_dim, 2 * out_dim, rng),
            bn: BatchNorm::new(2 * out_dim, momentum),
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f64], bsz: usize, mode: Mode) -> (Vec<f64>, GluCache) {
        let u0 = self.fc.forward(x, bsz);
        let (u, bn_cache) = self.bn.forward(&u0, bsz, mode);
        let w = self.out_dim;
        let mut y = vec![0.0; bsz * w];
        let mut u1 = vec![0.0; bsz * w];
        let mut gate = vec![0.0; bsz * w];
        for b in 0..bsz {
            let ur = &u[b * 2 * w..(b + 1) * 2 * w];
            for j in 0..w {
                let s = sigmoid(ur[w + j]);
                u1[b * w + j] = ur[j];
                gate[b * w + j] = s;
                y[b * w + j] = ur[j] * s;
            }
        }
        (
            y,
            GluCache {
                input: x.to_vec(),
                bn_cache,
                u1,
                gate,
                bsz,
            },
        )
    }

    pub fn backward(&mut self, cache: &GluCache, dout: &[f64]) -> Vec<f64> {
        let w = self.out_dim;
        let bsz = cache.bsz;
        let mut du = vec![0.0; bsz * 2 * w];
        for b in 0..bsz {
            for j in 0..w {
                let g = dout[b * w + j];
                let s = cache.gate[b * w + j];
                let u1 = cache.u1[b * w + j];
                du[b * 2 * w + j] = g * s;
                du[b * 2 * w + w + j] = g * u1 * s * (1.0 - s);
            }
        }
        let du0 = self.bn.backward(&cache.bn_cache, &du);
        self.fc.backward(&cache.input, &du0, bsz)
    }

    pub fn update_running(&mut self, cache: &GluCache) {
        self.bn.update_running(&cache.bn_cache);
    }

    pub(crate) fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        self.fc.visit_params(f);
        self.bn.visit_params(f);
    }

    pub fn validate(&self) -> bool {
        self.fc.validate() && self.bn.validate() && self.bn.dim == 2 * self.out_dim
    }
}

/// Resizes grad buffers to parameter shape and clears them.
pub(crate) fn zero_grad(param: &mut Vec<f64>, grad: &mut Vec<f64>) {
    grad.clear();
    grad.resize(param.len(), 0.0);
}
