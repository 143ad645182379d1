//! The full confidence model: dimension mapping plus the regressor.
//!
//! One trained model serves classification results of any dimension n >= 2;
//! only the internal mapped dimension `m` is fixed.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mapping::{
    map_with_grid, sort_desc, GaussianGrid, MappingParams, MappingTrace, ProbVector,
};
use crate::nn::{zero_grad, Mode};
use crate::tabnet::{StepTrace, TabNetCache, TabNetRegressor};

/// Hyperparameters for a fresh model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Mapped dimension.
    pub m: usize,
    /// Bell-shape width of the mapping columns.
    pub sigma: f64,
    /// Decision steps.
    pub n_steps: usize,
    /// Decision width.
    pub n_d: usize,
    /// Attention-feature width.
    pub n_a: usize,
    /// Prior relaxation.
    pub gamma: f64,
    /// Width of the shared self-attention head.
    pub attn_width: usize,
    /// Batch-norm running-statistics momentum.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 100,
            sigma: 0.01,
            n_steps: 3,
            n_d: 16,
            n_a: 16,
            gamma: 1.3,
            attn_width: 8,
            bn_momentum: 0.9,
        }
    }
}

/// Mapping parameters plus regressor parameters; everything needed to score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub mapping: MappingParams,
    pub regressor: TabNetRegressor,
    #[serde(skip)]
    pub(crate) gwq: Vec<f64>,
    #[serde(skip)]
    pub(crate) gwk: Vec<f64>,
}

impl ConfidenceModel {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mapping = MappingParams::init(cfg.m, cfg.sigma, &mut rng)?;
        let regressor = TabNetRegressor::init(
            cfg.m,
            cfg.n_steps,
            cfg.n_d,
            cfg.n_a,
            cfg.gamma,
            cfg.attn_width,
            cfg.bn_momentum,
            &mut rng,
        )?;
        Ok(Self {
            mapping,
            regressor,
            gwq: Vec::new(),
            gwk: Vec::new(),
        })
    }

    pub fn m(&self) -> usize {
        self.mapping.m
    }

    pub fn validate(&self) -> Result<()> {
        self.mapping.validate()?;
        self.regressor.validate()?;
        if self.regressor.m != self.mapping.m {
            return Err(crate::error::Error::Corruption(format!(
                "mapping dimension {} does not match regressor input {}",
                self.mapping.m, self.regressor.m
            )));
        }
        Ok(())
    }

    /// Confidence for one classification result: sort, map to `m`
    /// dimensions, score. Pure in the parameters, so callers may score from
    /// many threads at once.
    pub fn confidence(&self, p: &ProbVector) -> Result<f64> {
        let grid = self.mapping.gaussian_grid(p.len());
        self.confidence_with_grid(p, &grid)
    }

    fn confidence_with_grid(&self, p: &ProbVector, grid: &GaussianGrid) -> Result<f64> {
        let sorted = sort_desc(p);
        let trace = map_with_grid(&sorted, &self.mapping, grid)?;
        let (scores, _) = self.regressor.forward(&trace.mapped, 1, Mode::Eval);
        Ok(scores[0])
    }

    /// Confidence plus the per-step regressor traces.
    pub fn confidence_with_trace(&self, p: &ProbVector) -> Result<(f64, Vec<StepTrace>)> {
        let sorted = sort_desc(p);
        let grid = self.mapping.gaussian_grid(p.len());
        let trace = map_with_grid(&sorted, &self.mapping, &grid)?;
        Ok(self.regressor.forward_single_with_trace(&trace.mapped))
    }

    /// Scores many vectors, reusing mapping grids per input dimension and
    /// batching the regressor. Deterministic regardless of thread count.
    pub fn score_batch(&self, probs: &[ProbVector]) -> Result<Vec<f64>> {
        let grids = self.grids_for(probs);
        let mut out = Vec::with_capacity(probs.len());
        for chunk in probs.chunks(512) {
            let mapped = self.map_chunk(chunk, &grids)?;
            let (scores, _) = self.regressor.forward(&mapped, chunk.len(), Mode::Eval);
            out.extend_from_slice(&scores);
        }
        Ok(out)
    }

    pub(crate) fn grids_for(&self, probs: &[ProbVector]) -> HashMap<usize, GaussianGrid> {
        let mut grids = HashMap::new();
        for p in probs {
            grids
                .entry(p.len())
                .or_insert_with(|| self.mapping.gaussian_grid(p.len()));
        }
        grids
    }

    /// Maps a chunk of inputs to a row-major `chunk.len() x m` buffer.
    pub(crate) fn map_chunk(
        &self,
        chunk: &[ProbVector],
        grids: &HashMap<usize, GaussianGrid>,
    ) -> Result<Vec<f64>> {
        let traces = self.map_chunk_traced(chunk, grids)?;
        let m = self.mapping.m;
        let mut mapped = vec![0.0; chunk.len() * m];
        for (row, trace) in mapped.chunks_mut(m).zip(&traces) {
            row.copy_from_slice(&trace.mapped);
        }
        Ok(mapped)
    }

    pub(crate) fn map_chunk_traced(
        &self,
        chunk: &[ProbVector],
        grids: &HashMap<usize, GaussianGrid>,
    ) -> Result<Vec<MappingTrace>> {
        chunk
            .par_iter()
            .map(|p| {
                let grid = &grids[&p.len()];
                map_with_grid(&sort_desc(p), &self.mapping, grid)
            })
            .collect()
    }

    /// Regressor forward over an already-mapped batch.
    pub(crate) fn regressor_forward(
        &self,
        mapped: &[f64],
        bsz: usize,
        mode: Mode,
    ) -> (Vec<f64>, TabNetCache) {
        self.regressor.forward(mapped, bsz, mode)
    }

    pub(crate) fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.mapping.wq, &mut self.gwq);
        f(&mut self.mapping.wk, &mut self.gwk);
        self.regressor.visit_params(f);
    }

    pub(crate) fn zero_grads(&mut self) {
        self.visit_params(&mut |p, g| zero_grad(p, g));
    }

    /// Total learnable parameter count.
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }
}


impl ConfidenceModel {
    /// Temporary probe hook.
    pub fn zero_grads_pub(&mut self) {
        self.zero_grads();
    }
}
