//! Sequential-attention regressor over the mapped feature vector.
//!
//! Each decision step generates a sparse feature mask (attentive transformer:
//! dense, batch-norm, prior scaling, sparsemax), applies it to the input, and
//! runs the masked features through a feature transformer (shared
//! self-attention, a shared gated block, a step-specific gated block). The
//! decision halves of all steps are relu'd, summed, and squashed to a
//! confidence in (0, 1) by a dense head with a sigmoid.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnCache, SelfAttention};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, BatchNorm, BnCache, Dense, GluBlock, GluCache, Mode};
use crate::sparsemax::{sparsemax_backward_into, sparsemax_into};

const RESIDUAL_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// All learnable state of the regressor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabNetRegressor {
    pub m: usize,
    pub n_steps: usize,
    pub n_d: usize,
    pub n_a: usize,
    /// Prior relaxation: how much total attention each feature may receive
    /// across steps.
    pub gamma: f64,
    pub bn_in: BatchNorm,
    /// Self-attention shared by the initial splitter and every step.
    pub attn: SelfAttention,
    /// Feature-transformer block shared across steps (width m -> n_d + n_a).
    pub shared_block: GluBlock,
    /// Step-specific block of the initial splitter.
    pub initial_block: GluBlock,
    /// Step-specific blocks, one per decision step.
    pub step_blocks: Vec<GluBlock>,
    /// Attentive-transformer dense layers (n_a -> m), one per step.
    pub att_fc: Vec<Dense>,
    /// Attentive-transformer batch norms, one per step.
    pub att_bn: Vec<BatchNorm>,
    /// Final head (n_d -> 1).
    pub head: Dense,
}

/// Per-step inspection record: the sparse mask, the relu'd decision
/// contribution, and the prior state left for the next step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub mask: Vec<f64>,
    pub decision: Vec<f64>,
    pub prior: Vec<f64>,
}

struct FtCache {
    attn_input: Vec<f64>,
    attn_cache: AttnCache,
    shared_cache: GluCache,
    step_cache: GluCache,
}

struct StepCache {
    a_feat: Vec<f64>,
    att_bn_cache: BnCache,
    z_bn: Vec<f64>,
    prior: Vec<f64>,
    mask: Vec<f64>,
    ft: FtCache,
    d_pre: Vec<f64>,
}

pub struct TabNetCache {
    bsz: usize,
    bn_in_cache: BnCache,
    x0: Vec<f64>,
    initial_ft: FtCache,
    steps: Vec<StepCache>,
    agg: Vec<f64>,
    scores: Vec<f64>,
}

impl TabNetCache {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

impl TabNetRegressor {
    pub fn init<R: Rng>(
        m: usize,
        n_steps: usize,
        n_d: usize,
        n_a: usize,
        gamma: f64,
        attn_width: usize,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_steps < 1 || n_d < 1 || n_a < 1 {
            return Err(Error::Config(
                "n_steps, n_d and n_a must all be at least 1".into(),
            ));
        }
        if gamma < 1.0 {
            return Err(Error::Config(format!("gamma must be >= 1, got {gamma}")));
        }
        let w = n_d + n_a;
        Ok(Self {
            m,
            n_steps,
            n_d,
            n_a,
            gamma,
            bn_in: BatchNorm::new(m, bn_momentum),
            attn: SelfAttention::init(m, attn_width, rng),
            shared_block: GluBlock::init(m, w, bn_momentum, rng),
            initial_block: GluBlock::init(w, w, bn_momentum, rng),
            step_blocks: (0..n_steps)
                .map(|_| GluBlock::init(w, w, bn_momentum, rng))
                .collect(),
            att_fc: (0..n_steps).map(|_| Dense::init(n_a, m, rng)).collect(),
            att_bn: (0..n_steps)
                .map(|_| BatchNorm::new(m, bn_momentum))
                .collect(),
            head: Dense::init(n_d, 1, rng),
        })
    }

    fn ft_forward(
        &self,
        block: &GluBlock,
        input: &[f64],
        bsz: usize,
        mode: Mode,
    ) -> (Vec<f64>, FtCache) {
        let (ya, attn_cache) = self.attn.forward(input, bsz);
        let (h, shared_cache) = self.shared_block.forward(&ya, bsz, mode);
        let (z, step_cache) = block.forward(&h, bsz, mode);
        let out: Vec<f64> = h
            .iter()
            .zip(&z)
            .map(|(&a, &b)| (a + b) * RESIDUAL_SCALE)
            .collect();
        (
            out,
            FtCache {
                attn_input: input.to_vec(),
                attn_cache,
                shared_cache,
                step_cache,
            },
        )
    }

    fn split_a(&self, out: &[f64], bsz: usize) -> Vec<f64> {
        let w = self.n_d + self.n_a;
        let mut a = vec![0.0; bsz * self.n_a];
        for b in 0..bsz {
            a[b * self.n_a..(b + 1) * self.n_a]
                .copy_from_slice(&out[b * w + self.n_d..(b + 1) * w]);
        }
        a
    }

    pub fn forward(&self, x: &[f64], bsz: usize, mode: Mode) -> (Vec<f64>, TabNetCache) {
        let m = self.m;
        debug_assert_eq!(x.len(), bsz * m);
        let (x0, bn_in_cache) = self.bn_in.forward(x, bsz, mode);
        let (out0, initial_ft) = self.ft_forward(&self.initial_block, &x0, bsz, mode);
        let mut a_feat = self.split_a(&out0, bsz);
        let mut prior = vec![1.0; bsz * m];
        let mut agg = vec![0.0; bsz * self.n_d];
        let mut steps = Vec::with_capacity(self.n_steps);
        for t in 0..self.n_steps {
            let z0 = self.att_fc[t].forward(&a_feat, bsz);
            let (z_bn, att_bn_cache) = self.att_bn[t].forward(&z0, bsz, mode);
            // A prior of exactly zero means the feature's budget is spent
            // (gamma = 1 only); exclude it from the projection support so it
            // can never be selected again.
            let zp: Vec<f64> = prior
                .iter()
                .zip(&z_bn)
                .map(|(&p, &z)| if p == 0.0 { f64::NEG_INFINITY } else { p * z })
                .collect();
            let mut mask = vec![0.0; bsz * m];
            mask.par_chunks_mut(m)
                .zip(zp.par_chunks(m))
                .for_each(|(mr, zr)| {
                    if zr.iter().all(|v| v.is_infinite()) {
                        // Every feature exhausted: fall back to uniform.
                        mr.fill(1.0 / zr.len() as f64);
                    } else {
                        sparsemax_into(zr, mr);
                    }
                });
            let prior_snapshot = prior.clone();
            for (p, &mk) in prior.iter_mut().zip(&mask) {
                *p *= self.gamma - mk;
            }
            let masked: Vec<f64> = mask.iter().zip(&x0).map(|(&mk, &v)| mk * v).collect();
            let (out, ft) = self.ft_forward(&self.step_blocks[t], &masked, bsz, mode);
            let w = self.n_d + self.n_a;
            let mut d_pre = vec![0.0; bsz * self.n_d];
            for b in 0..bsz {
                d_pre[b * self.n_d..(b + 1) * self.n_d]
                    .copy_from_slice(&out[b * w..b * w + self.n_d]);
            }
            for (acc, &d) in agg.iter_mut().zip(&d_pre) {
                *acc += d.max(0.0);
            }
            let next_a = self.split_a(&out, bsz);
            steps.push(StepCache {
                a_feat,
                att_bn_cache,
                z_bn,
                prior: prior_snapshot,
                mask,
                ft,
                d_pre,
            });
            a_feat = next_a;
        }
        let logits = self.head.forward(&agg, bsz);
        let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        (
            scores.clone(),
            TabNetCache {
                bsz,
                bn_in_cache,
                x0,
                initial_ft,
                steps,
                agg,
                scores,
            },
        )
    }

    fn ft_backward(
        attn: &mut SelfAttention,
        shared: &mut GluBlock,
        block: &mut GluBlock,
        cache: &FtCache,
        dout: &[f64],
        bsz: usize,
    ) -> Vec<f64> {
        let dscaled: Vec<f64> = dout.iter().map(|&g| g * RESIDUAL_SCALE).collect();
        let mut dh = block.backward(&cache.step_cache, &dscaled);
        for (d, &g) in dh.iter_mut().zip(&dscaled) {
            *d += g;
        }
        let dya = shared.backward(&cache.shared_cache, &dh);
        attn.backward(&cache.attn_input, &cache.attn_cache, &dya, bsz)
    }

    /// Backward pass for a batch; `dscores` is dLoss/dscore. Returns the
    /// gradient with respect to the input feature vectors.
    pub fn backward(&mut self, cache: &TabNetCache, dscores: &[f64]) -> Vec<f64> {
        let bsz = cache.bsz;
        let m = self.m;
        let w = self.n_d + self.n_a;
        let dlogits: Vec<f64> = dscores
            .iter()
            .zip(&cache.scores)
            .map(|(&g, &s)| g * s * (1.0 - s))
            .collect();
        let dagg = self.head.backward(&cache.agg, &dlogits, bsz);
        let mut da_feat = vec![0.0; bsz * self.n_a];
        let mut dprior_next = vec![0.0; bsz * m];
        let mut dx0 = vec![0.0; bsz * m];
        for t in (0..self.n_steps).rev() {
            let step = &cache.steps[t];
            // Recombine decision and attention gradients into the
            // feature-transformer output layout.
            let mut dout = vec![0.0; bsz * w];
            for b in 0..bsz {
                for j in 0..self.n_d {
                    let pre = step.d_pre[b * self.n_d + j];
                    if pre > 0.0 {
                        dout[b * w + j] = dagg[b * self.n_d + j];
                    }
                }
                dout[b * w + self.n_d..(b + 1) * w]
                    .copy_from_slice(&da_feat[b * self.n_a..(b + 1) * self.n_a]);
            }
            let dmasked = Self::ft_backward(
                &mut self.attn,
                &mut self.shared_block,
                &mut self.step_blocks[t],
                &step.ft,
                &dout,
                bsz,
            );
            let mut dmask: Vec<f64> = dmasked
                .iter()
                .zip(&cache.x0)
                .map(|(&g, &v)| g * v)
                .collect();
            for ((dx, &g), &mk) in dx0.iter_mut().zip(&dmasked).zip(&step.mask) {
                *dx += g * mk;
            }
            // prior_{t+1} = prior_t * (gamma - mask_t)
            let mut dprior = vec![0.0; bsz * m];
            for i in 0..bsz * m {
                dmask[i] -= step.prior[i] * dprior_next[i];
                dprior[i] = (self.gamma - step.mask[i]) * dprior_next[i];
            }
            // sparsemax over prior * z_bn
            let mut dzp = vec![0.0; bsz * m];
            dzp.par_chunks_mut(m)
                .zip(step.mask.par_chunks(m).zip(dmask.par_chunks(m)))
                .for_each(|(dz, (mk, dm))| sparsemax_backward_into(mk, dm, dz));
            let mut dz_bn = vec![0.0; bsz * m];
            for i in 0..bsz * m {
                dprior[i] += dzp[i] * step.z_bn[i];
                dz_bn[i] = dzp[i] * step.prior[i];
            }
            let dz0 = self.att_bn[t].backward(&step.att_bn_cache, &dz_bn);
            da_feat = self.att_fc[t].backward(&step.a_feat, &dz0, bsz);
            dprior_next = dprior;
        }
        // The first prior is a constant; its gradient stops here.
        let mut dout0 = vec![0.0; bsz * w];
        for b in 0..bsz {
            dout0[b * w + self.n_d..(b + 1) * w]
                .copy_from_slice(&da_feat[b * self.n_a..(b + 1) * self.n_a]);
        }
        let dx0_init = Self::ft_backward(
            &mut self.attn,
            &mut self.shared_block,
            &mut self.initial_block,
            &cache.initial_ft,
            &dout0,
            bsz,
        );
        for (d, &g) in dx0.iter_mut().zip(&dx0_init) {
            *d += g;
        }
        self.bn_in.backward(&cache.bn_in_cache, &dx0)
    }

    /// Folds the cached batch statistics of every batch-norm layer into its
    /// running statistics; call once per training batch.
    pub fn update_running(&mut self, cache: &TabNetCache) {
        self.bn_in.update_running(&cache.bn_in_cache);
        self.shared_block
            .update_running(&cache.initial_ft.shared_cache);
        self.initial_block
            .update_running(&cache.initial_ft.step_cache);
        for (t, step) in cache.steps.iter().enumerate() {
            self.att_bn[t].update_running(&step.att_bn_cache);
            self.shared_block.update_running(&step.ft.shared_cache);
            self.step_blocks[t].update_running(&step.ft.step_cache);
        }
    }

    /// Single-sample inference score plus the per-step traces.
    pub fn forward_single_with_trace(&self, x: &[f64]) -> (f64, Vec<StepTrace>) {
        let (scores, cache) = self.forward(x, 1, Mode::Eval);
        let traces = cache
            .steps
            .iter()
            .map(|s| StepTrace {
                mask: s.mask.clone(),
                decision: s.d_pre.iter().map(|&d| d.max(0.0)).collect(),
                prior: s
                    .prior
                    .iter()
                    .zip(&s.mask)
                    .map(|(&p, &mk)| p * (self.gamma - mk))
                    .collect(),
            })
            .collect();
        (scores[0], traces)
    }

    pub(crate) fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        self.bn_in.visit_params(f);
        self.attn.visit_params(f);
        self.shared_block.visit_params(f);
        self.initial_block.visit_params(f);
        for b in &mut self.step_blocks {
            b.visit_params(f);
        }
        for d in &mut self.att_fc {
            d.visit_params(f);
        }
        for b in &mut self.att_bn {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.n_d + self.n_a;
        let ok = self.n_steps >= 1
            && self.n_d >= 1
            && self.n_a >= 1
            && self.gamma >= 1.0
            && self.bn_in.validate()
            && self.bn_in.dim == self.m
            && self.attn.validate()
            && self.attn.m == self.m
            && self.shared_block.validate()
            && self.shared_block.fc.in_dim == self.m
            && self.shared_block.out_dim == w
            && self.initial_block.validate()
            && self.step_blocks.len() == self.n_steps
            && self
                .step_blocks
                .iter()
                .all(|b| b.validate() && b.fc.in_dim == w)
            && self.att_fc.len() == self.n_steps
            && self
                .att_fc
                .iter()
                .all(|d| d.validate() && d.in_dim == self.n_a && d.out_dim == self.m)
            && self.att_bn.len() == self.n_steps
            && self.att_bn.iter().all(|b| b.validate() && b.dim == self.m)
            && self.head.validate()
            && self.head.in_dim == self.n_d
            && self.head.out_dim == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Corruption(
                "regressor parameter shapes are inconsistent".into(),
            ))
        }
    }
}
