//! Dimension mapping: converts a sorted classification vector of any
//! dimension n >= 2 into an equivalent sorted m-dimensional vector.
//!
//! The pipeline is: attention scores over the sorted input (a restricted
//! self-attention with a single query built from the largest element),
//! bell-shaped rule-based columns per input element, an attention-weighted
//! column sum, and a final descending sort.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a probability vector's sum from 1.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// A validated probability vector: n >= 2, entries >= 0, sum within
/// [`PROB_SUM_TOL`] of 1. Construction does not rescale; use
/// [`normalize_probs`] to coerce raw model outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    /// Validates `values` as-is (no rescaling). Negative zeros are
    /// canonicalized so that permutations of the same multiset stay
    /// bitwise-identical downstream.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "need at least 2 class probabilities, got {}",
                values.len()
            )));
        }
        let mut values = values;
        let mut sum = 0.0;
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::InvalidProbability(format!("non-finite entry {v}")));
            }
            if *v < 0.0 {
                return Err(Error::InvalidProbability(format!("negative entry {v}")));
            }
            if *v == 0.0 {
                *v = 0.0; // fold -0.0 into +0.0
            }
            sum += *v;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, expected 1 within {PROB_SUM_TOL}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Largest entry.
    pub fn max(&self) -> f64 {
        self.values[self.argmax()]
    }
}

/// Converts raw classifier output into a [`ProbVector`].
///
/// With `is_logits`, applies a max-shifted softmax. Otherwise the entries
/// must be nonnegative with positive total mass and are rescaled to sum 1.
pub fn normalize_probs(raw: &[f64], is_logits: bool) -> Result<ProbVector> {
    if raw.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 entries, got {}",
            raw.len()
        )));
    }
    for &v in raw {
        if !v.is_finite() {
            return Err(Error::InvalidProbability(format!("non-finite entry {v}")));
        }
    }
    let values = if is_logits {
        softmax(raw)
    } else {
        let mut sum = 0.0;
        for &v in raw {
            if v < 0.0 {
                return Err(Error::InvalidProbability(format!(
                    "negative entry {v} in probability input"
                )));
            }
            sum += v;
        }
        if sum <= 0.0 {
            return Err(Error::InvalidProbability(
                "all-zero probability input".into(),
            ));
        }
        raw.iter().map(|&v| v / sum).collect()
    };
    ProbVector::new(values)
}

/// Max-shifted softmax.
pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Backward pass of a softmax: given outputs `s` and upstream gradient `g`,
/// returns the gradient with respect to the softmax inputs.
pub(crate) fn softmax_backward(s: &[f64], g: &[f64]) -> Vec<f64> {
    let dot = crate::nn::dot(s, g);
    s.iter().zip(g).map(|(&si, &gi)| si * (gi - dot)).collect()
}

/// A probability vector reordered descending, with the argsort permutation
/// that produced it. Sorting removes the category information: two inputs
/// with the same multiset of values sort to identical `values` sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedProbVector {
    values: Vec<f64>,
    source_permutation: Vec<usize>,
}

impl SortedProbVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `values[i] == source.values()[source_permutation()[i]]`.
    pub fn source_permutation(&self) -> &[usize] {
        &self.source_permutation
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sorts a probability vector descending. Ties break stably by original
/// index, so the permutation is deterministic.
pub fn sort_desc(p: &ProbVector) -> SortedProbVector {
    let (values, source_permutation) = sort_desc_raw(p.values());
    SortedProbVector {
        values,
        source_permutation,
    }
}

/// Descending sort with argsort permutation for an arbitrary finite slice.
pub(crate) fn sort_desc_raw(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..values.len()).collect();
    perm.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .expect("finite values")
            .then(i.cmp(&j))
    });
    let sorted = perm.iter().map(|&i| values[i]).collect();
    (sorted, perm)
}

/// Learnable mapping parameters plus the two mapping hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingParams {
    /// Query projection, length `m` (applied to the largest element only).
    pub wq: Vec<f64>,
    /// Key projection, length `m`.
    pub wk: Vec<f64>,
    /// Output dimension of the mapping.
    pub m: usize,
    /// Width of the bell-shaped columns.
    pub sigma: f64,
}

impl MappingParams {
    /// Seeded initialization: `wq`, `wk` i.i.d. uniform in `[-1/sqrt(m), 1/sqrt(m)]`.
    pub fn init<R: Rng>(m: usize, sigma: f64, rng: &mut R) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!(
                "mapping dimension m must be >= 2, got {m}"
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let bound = 1.0 / (m as f64).sqrt();
        let mut draw = || -> Vec<f64> { (0..m).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let wq = draw();
        let wk = draw();
        Ok(Self { wq, wk, m, sigma })
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("m must be >= 2, got {}", self.m)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.wq.len() != self.m || self.wk.len() != self.m {
            return Err(Error::Corruption(format!(
                "wq/wk lengths ({}, {}) do not match m = {}",
                self.wq.len(),
                self.wk.len(),
                self.m
            )));
        }
        if !self.wq.iter().chain(&self.wk).all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow(
                "non-finite mapping parameter".into(),
            ));
        }
        Ok(())
    }

    /// Inner product of the key and query projections. Because both act on
    /// scalars, every attention score reduces to `coupling * a1 * ax`.
    pub(crate) fn coupling(&self) -> f64 {
        self.wq.iter().zip(&self.wk).map(|(&q, &k)| q * k).sum()
    }
}

/// Softmax-normalized attention over the sorted input elements.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVector {
    att: Vec<f64>,
}

impl AttentionVector {
    pub fn values(&self) -> &[f64] {
        &self.att
    }
}

/// Attention scores for a sorted vector: the single query comes from the
/// largest element, keys from every element, softmax over their products.
pub fn attention_scores(a: &SortedProbVector, params: &MappingParams) -> Result<AttentionVector> {
    params.validate()?;
    let vals = a.values();
    let a1 = vals[0];
    let c = params.coupling();
    let mut scores = Vec::with_capacity(vals.len());
    for &ax in vals {
        let s = c * a1 * ax;
        if !s.is_finite() {
            return Err(Error::NumericOverflow(format!(
                "attention score {s} for element {ax}"
            )));
        }
        scores.push(s);
    }
    Ok(AttentionVector {
        att: softmax(&scores),
    })
}

/// One bell-shaped column: entry `i` is
/// `a_x * exp(-((i/(m-1) - (x-1)/n)^2) / (2 sigma^2))`, `i` in `0..m`.
/// `x` is 1-based; the peak sits where `i/(m-1)` is closest to `(x-1)/n`.
pub fn gaussian_column(x: usize, a_x: f64, n: usize, m: usize, sigma: f64) -> Vec<f64> {
    debug_assert!(x >= 1 && x <= n);
    debug_assert!(m >= 2);
    let center = (x - 1) as f64 / n as f64;
    let denom = 2.0 * sigma * sigma;
    (0..m)
        .map(|i| {
            let d = i as f64 / (m - 1) as f64 - center;
            a_x * (-(d * d) / denom).exp()
        })
        .collect()
}

/// Precomputed bell-shape factors for a fixed input dimension `n`:
/// `factor(i, x) = exp(-((i/(m-1) - x/n)^2) / (2 sigma^2))` with 0-based `x`.
/// Multiplying column `x` by `a_x` yields the rule-based column matrix.
#[derive(Debug, Clone)]
pub struct GaussianGrid {
    n: usize,
    m: usize,
    /// Row-major m x n.
    factors: Vec<f64>,
}

impl GaussianGrid {
    pub fn new(n: usize, m: usize, sigma: f64) -> Self {
        let denom = 2.0 * sigma * sigma;
        let mut factors = Vec::with_capacity(m * n);
        for i in 0..m {
            let pos = i as f64 / (m - 1) as f64;
            for x in 0..n {
                let d = pos - x as f64 / n as f64;
                factors.push((-(d * d) / denom).exp());
            }
        }
        Self { n, m, factors }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.factors[i * self.n..(i + 1) * self.n]
    }
}

impl MappingParams {
    pub fn gaussian_grid(&self, n: usize) -> GaussianGrid {
        GaussianGrid::new(n, self.m, self.sigma)
    }
}

/// The mapped vector: length `m`, sorted descending, every entry bounded by
/// the input maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedVector {
    values: Vec<f64>,
}

impl MappedVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Forward activations of one mapping call, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct MappingTrace {
    /// Sorted input values.
    pub input: Vec<f64>,
    /// Attention over the sorted input.
    pub att: Vec<f64>,
    /// Column sum before the final sort.
    pub pre_sort: Vec<f64>,
    /// Argsort of `pre_sort`: `mapped[j] = pre_sort[out_perm[j]]`.
    pub out_perm: Vec<usize>,
    /// Final sorted output.
    pub mapped: Vec<f64>,
}

/// Maps a sorted vector to `m` dimensions: attention-weighted sum of the
/// bell-shaped columns (as one matrix-vector product), then a final sort.
pub fn map_to_fixed_dim(a: &SortedProbVector, params: &MappingParams) -> Result<MappedVector> {
    let grid = params.gaussian_grid(a.len());
    map_with_grid(a, params, &grid).map(|trace| MappedVector {
        values: trace.mapped,
    })
}

/// Same as [`map_to_fixed_dim`] but reuses a precomputed grid and returns the
/// full trace. The grid must have been built for this input's dimension.
pub fn map_with_grid(
    a: &SortedProbVector,
    params: &MappingParams,
    grid: &GaussianGrid,
) -> Result<MappingTrace> {
    let n = a.len();
    assert_eq!(grid.n, n, "grid dimension mismatch");
    assert_eq!(grid.m, params.m, "grid output dimension mismatch");
    let att = attention_scores(a, params)?;
    let vals = a.values();
    // Column x carries a_x; fold it into the attention weight so the column
    // sum becomes a single matrix-vector product against the grid factors.
    let weighted: Vec<f64> = att
        .values()
        .iter()
        .zip(vals)
        .map(|(&w, &ax)| w * ax)
        .collect();
    let mut pre_sort = Vec::with_capacity(params.m);
    for i in 0..params.m {
        pre_sort.push(crate::nn::dot(grid.row(i), &weighted));
    }
    let (mapped, out_perm) = sort_desc_raw(&pre_sort);
    Ok(MappingTrace {
        input: vals.to_vec(),
        att: att.att,
        pre_sort,
        out_perm,
        mapped,
    })
}

/// Gradient of the mapping with respect to `wq` and `wk`, given the gradient
/// of the loss with respect to the sorted mapped output. Inputs are data, not
/// parameters, so no gradient flows to them. The sort contributes a gather by
/// its (locally constant) permutation.
pub fn mapping_backward(
    trace: &MappingTrace,
    params: &MappingParams,
    grid: &GaussianGrid,
    d_mapped: &[f64],
    gwq: &mut [f64],
    gwk: &mut [f64],
) {
    let n = trace.input.len();
    let m = params.m;
    debug_assert_eq!(d_mapped.len(), m);
    let mut d_pre = vec![0.0; m];
    for (j, &g) in d_mapped.iter().enumerate() {
        d_pre[trace.out_perm[j]] = g;
    }
    // d att_x = sum_i d_pre_i * a_x * factor(i, x)
    let mut d_att = vec![0.0; n];
    for (i, &gp) in d_pre.iter().enumerate() {
        if gp == 0.0 {
            continue;
        }
        let row = grid.row(i);
        for (x, da) in d_att.iter_mut().enumerate() {
            *da += gp * trace.input[x] * row[x];
        }
    }
    let d_scores = softmax_backward(&trace.att, &d_att);
    // score_x = coupling * a1 * a_x
    let a1 = trace.input[0];
    let mut d_coupling = 0.0;
    for (x, &ds) in d_scores.iter().enumerate() {
        d_coupling += ds * a1 * trace.input[x];
    }
    for ((gq, gk), (&q, &k)) in gwq
        .iter_mut()
        .zip(gwk.iter_mut())
        .zip(params.wq.iter().zip(&params.wk))
    {
        *gq += d_coupling * k;
        *gk += d_coupling * q;
    }
}
