//! Two-stage cascade: accept the shallow model's prediction when its
//! confidence clears the threshold, otherwise run the deep model and accept
//! the prediction with the higher confidence. FLOPs are accounted per image
//! through an exact identity over the deep-routing fraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ModelRunRecords;
use crate::mapping::ProbVector;

/// A classifier's recorded run plus its cost; alias of the record-file type.
pub type ModelProfile = ModelRunRecords;

/// Shallow and deep runs over the same sample ids, aligned index-by-index.
#[derive(Debug, Clone)]
pub struct PairedRunRecords {
    pub shallow: ModelRunRecords,
    pub deep: ModelRunRecords,
}

impl PairedRunRecords {
    /// Validates that both runs cover the same ids with the same true labels
    /// and reorders the deep records to the shallow order.
    pub fn new(shallow: ModelRunRecords, mut deep: ModelRunRecords) -> Result<Self> {
        use std::collections::HashMap;
        let mut deep_pos: HashMap<&str, usize> = HashMap::with_capacity(deep.records.len());
        for (i, r) in deep.records.iter().enumerate() {
            deep_pos.insert(r.id.as_str(), i);
        }
        if deep.records.len() != shallow.records.len() {
            return Err(Error::PairedRecords(format!(
                "record counts differ: shallow {}, deep {}",
                shallow.records.len(),
                deep.records.len()
            )));
        }
        let mut order = Vec::with_capacity(shallow.records.len());
        for s in &shallow.records {
            match deep_pos.get(s.id.as_str()) {
                None => {
                    return Err(Error::PairedRecords(format!(
                        "id {:?} present in shallow but not deep records",
                        s.id
                    )))
                }
                Some(&i) => {
                    if deep.records[i].label != s.label {
                        return Err(Error::PairedRecords(format!(
                            "true label for id {:?} differs between runs ({} vs {})",
                            s.id, s.label, deep.records[i].label
                        )));
                    }
                    order.push(i);
                }
            }
        }
        let mut reordered = Vec::with_capacity(order.len());
        for &i in &order {
            reordered.push(deep.records[i].clone());
        }
        deep.records = reordered;
        Ok(Self { shallow, deep })
    }

    pub fn len(&self) -> usize {
        self.shallow.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shallow.records.is_empty()
    }

    /// A paired view restricted to the given indices (fold evaluation).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pick = |m: &ModelRunRecords| ModelRunRecords {
            name: m.name.clone(),
            flops_per_image: m.flops_per_image,
            records: indices.iter().map(|&i| m.records[i].clone()).collect(),
        };
        if indices.iter().any(|&i| i >= self.len()) {
            return Err(Error::PairedRecords("subset index out of range".into()));
        }
        Ok(Self {
            shallow: pick(&self.shallow),
            deep: pick(&self.deep),
        })
    }
}

/// Which prediction wins when shallow and deep confidences tie exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TieBreak {
    #[default]
    PreferDeep,
    PreferShallow,
}

/// Threshold and FLOPs-accounting settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Confidence cutoff in [0, 1]; shallow results at or above it are
    /// accepted without consulting the deep model.
    pub threshold: f64,
    /// Cost of one confidence evaluation.
    pub clcnet_flops: f64,
    /// Whether scorer invocations count toward average FLOPs (once on the
    /// shallow-only path, twice when routed).
    pub include_clcnet_flops: bool,
    pub tie_break: TieBreak,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            clcnet_flops: 2.7e6,
            include_clcnet_flops: true,
            tie_break: TieBreak::PreferDeep,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Average FLOPs per image from the deep-routing fraction; this identity
    /// is exact by construction.
    pub fn avg_flops(&self, shallow_flops: f64, deep_flops: f64, deep_fraction: f64) -> f64 {
        if self.include_clcnet_flops {
            shallow_flops + self.clcnet_flops + deep_fraction * (deep_flops + self.clcnet_flops)
        } else {
            shallow_flops + deep_fraction * deep_flops
        }
    }
}

/// Pluggable confidence function: the trained model and the max-probability
/// baseline both implement this, so cascades share all structural behavior.
pub trait ConfidenceScorer: Sync {
    fn confidence_of(&self, p: &ProbVector) -> Result<f64>;

    fn confidence_batch(&self, probs: &[ProbVector]) -> Result<Vec<f64>> {
        probs.iter().map(|p| self.confidence_of(p)).collect()
    }
}

/// The baseline confidence: the highest class probability.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxProbScorer;

impl ConfidenceScorer for MaxProbScorer {
    fn confidence_of(&self, p: &ProbVector) -> Result<f64> {
        Ok(maxprob_confidence(p))
    }
}

/// Highest probability of the classification result, used as a drop-in
/// confidence for baseline cascades.
pub fn maxprob_confidence(p: &ProbVector) -> f64 {
    p.max()
}

/// Outcome of routing one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub accepted_pred: usize,
    pub used_deep: bool,
}

/// Routing rule: accept shallow at or above the threshold; otherwise the
/// deep model runs and the prediction with the higher confidence wins.
pub fn route(
    shallow_conf: f64,
    deep_conf: Option<f64>,
    shallow_pred: usize,
    deep_pred: usize,
    cfg: &CascadeConfig,
) -> Result<Decision> {
    cfg.validate()?;
    if shallow_conf >= cfg.threshold {
        return Ok(Decision {
            accepted_pred: shallow_pred,
            used_deep: false,
        });
    }
    let deep_conf = deep_conf.ok_or_else(|| {
        Error::PairedRecords("deep confidence required below the threshold".into())
    })?;
    let deep_wins = match cfg.tie_break {
        TieBreak::PreferDeep => deep_conf >= shallow_conf,
        TieBreak::PreferShallow => deep_conf > shallow_conf,
    };
    Ok(Decision {
        accepted_pred: if deep_wins { deep_pred } else { shallow_pred },
        used_deep: true,
    })
}

/// One point of the accuracy-vs-FLOPs tradeoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub threshold: f64,
    pub top1_accuracy: f64,
    pub avg_flops_per_image: f64,
    pub deep_fraction: f64,
}

/// Raw counts behind one tradeoff point; summable across folds.
#[derive(Debug, Clone, Copy)]
pub struct PointCounts {
    pub threshold: f64,
    pub correct: usize,
    pub deep: usize,
    pub total: usize,
}

/// A threshold sweep, one point per grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    points: Vec<TradeoffPoint>,
}

impl TradeoffCurve {
    pub fn new(points: Vec<TradeoffPoint>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[TradeoffPoint] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Builds rate-form points from counts using the FLOPs identity.
    pub fn from_counts(
        counts: &[PointCounts],
        paired: &PairedRunRecords,
        cfg: &CascadeConfig,
    ) -> Self {
        let fs = paired.shallow.flops_per_image;
        let fd = paired.deep.flops_per_image;
        let points = counts
            .iter()
            .map(|c| {
                let df = c.deep as f64 / c.total as f64;
                TradeoffPoint {
                    threshold: c.threshold,
                    top1_accuracy: c.correct as f64 / c.total as f64,
                    avg_flops_per_image: cfg.avg_flops(fs, fd, df),
                    deep_fraction: df,
                }
            })
            .collect();
        Self { points }
    }

    pub fn closest_index(&self, threshold: f64) -> Option<usize> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = 0;
        for (i, p) in self.points.iter().enumerate() {
            if (p.threshold - threshold).abs() < (self.points[best].threshold - threshold).abs() {
                best = i;
            }
        }
        Some(best)
    }

    pub fn closest_threshold(&self, threshold: f64) -> Option<&TradeoffPoint> {
        self.closest_index(threshold).map(|i| &self.points[i])
    }

    /// Structural checks: thresholds strictly increasing, deep fraction
    /// monotone non-decreasing, rates within range, FLOPs identity.
    pub fn verify(&self, shallow_flops: f64, deep_flops: f64, cfg: &CascadeConfig) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyInput("curve has no points".into()));
        }
        for w in self.points.windows(2) {
            if w[1].threshold <= w[0].threshold {
                return Err(Error::Config(format!(
                    "thresholds not increasing: {} then {}",
                    w[0].threshold, w[1].threshold
                )));
            }
            if w[1].deep_fraction < w[0].deep_fraction {
                return Err(Error::Config(format!(
                    "deep fraction decreases at threshold {}",
                    w[1].threshold
                )));
            }
        }
        for p in &self.points {
            if !(0.0..=1.0).contains(&p.top1_accuracy) || !(0.0..=1.0).contains(&p.deep_fraction) {
                return Err(Error::Config(format!(
                    "point at threshold {} outside valid ranges",
                    p.threshold
                )));
            }
            let want = cfg.avg_flops(shallow_flops, deep_flops, p.deep_fraction);
            if (p.avg_flops_per_image - want).abs() > 1e-6 * want.abs().max(1.0) {
                return Err(Error::Config(format!(
                    "FLOPs identity violated at threshold {}: {} vs {}",
                    p.threshold, p.avg_flops_per_image, want
                )));
            }
        }
        Ok(())
    }
}

/// Per-sample confidences and correctness flags, computed once and reused
/// across the whole threshold grid (and by callers that also need the raw
/// confidences, like the fold protocol's separation metric).
pub struct PairedScores {
    pub s_conf: Vec<f64>,
    pub d_conf: Vec<f64>,
    pub s_correct: Vec<bool>,
    pub d_correct: Vec<bool>,
}

/// Scores both sides of every pair with the given confidence function.
pub fn score_paired(
    paired: &PairedRunRecords,
    scorer: &dyn ConfidenceScorer,
) -> Result<PairedScores> {
    let s_probs: Vec<ProbVector> = paired
        .shallow
        .records
        .iter()
        .map(|r| r.probs.clone())
        .collect();
    let d_probs: Vec<ProbVector> = paired
        .deep
        .records
        .iter()
        .map(|r| r.probs.clone())
        .collect();
    let s_conf = scorer.confidence_batch(&s_probs)?;
    let d_conf = scorer.confidence_batch(&d_probs)?;
    let s_correct = paired
        .shallow
        .records
        .iter()
        .map(|r| r.probs.argmax() == r.label)
        .collect();
    let d_correct = paired
        .deep
        .records
        .iter()
        .map(|r| r.probs.argmax() == r.label)
        .collect();
    Ok(PairedScores {
        s_conf,
        d_conf,
        s_correct,
        d_correct,
    })
}

impl PairedScores {
    fn routed_correct(&self, i: usize, tie_break: TieBreak) -> bool {
        let deep_wins = match tie_break {
            TieBreak::PreferDeep => self.d_conf[i] >= self.s_conf[i],
            TieBreak::PreferShallow => self.d_conf[i] > self.s_conf[i],
        };
        if deep_wins {
            self.d_correct[i]
        } else {
            self.s_correct[i]
        }
    }

    fn counts_at(&self, threshold: f64, tie_break: TieBreak) -> PointCounts {
        let mut correct = 0usize;
        let mut deep = 0usize;
        let n = self.s_conf.len();
        for i in 0..n {
            if self.s_conf[i] >= threshold {
                correct += self.s_correct[i] as usize;
            } else {
                deep += 1;
                correct += self.routed_correct(i, tie_break) as usize;
            }
        }
        PointCounts {
            threshold,
            correct,
            deep,
            total: n,
        }
    }
}

/// Cascade performance at the configured threshold. The deep model is only
/// scored for samples that actually route, matching the FLOPs accounting.
pub fn evaluate_cascade(
    paired: &PairedRunRecords,
    scorer: &dyn ConfidenceScorer,
    cfg: &CascadeConfig,
) -> Result<TradeoffPoint> {
    cfg.validate()?;
    if paired.is_empty() {
        return Err(Error::EmptyInput("no paired records".into()));
    }
    let s_probs: Vec<ProbVector> = paired
        .shallow
        .records
        .iter()
        .map(|r| r.probs.clone())
        .collect();
    let s_conf = scorer.confidence_batch(&s_probs)?;
    let routed: Vec<usize> = (0..paired.len())
        .filter(|&i| s_conf[i] < cfg.threshold)
        .collect();
    let d_probs: Vec<ProbVector> = routed
        .iter()
        .map(|&i| paired.deep.records[i].probs.clone())
        .collect();
    let d_conf = scorer.confidence_batch(&d_probs)?;
    let mut correct = 0usize;
    let mut routed_iter = routed.iter().zip(&d_conf);
    let mut next_routed = routed_iter.next();
    for i in 0..paired.len() {
        let s_rec = &paired.shallow.records[i];
        let decision = match next_routed {
            Some((&ri, &dc)) if ri == i => {
                next_routed = routed_iter.next();
                route(
                    s_conf[i],
                    Some(dc),
                    s_rec.probs.argmax(),
                    paired.deep.records[i].probs.argmax(),
                    cfg,
                )?
            }
            _ => route(s_conf[i], None, s_rec.probs.argmax(), 0, cfg)?,
        };
        let label = if decision.used_deep {
            paired.deep.records[i].label
        } else {
            s_rec.label
        };
        if decision.accepted_pred == label {
            correct += 1;
        }
    }
    let n = paired.len();
    let df = routed.len() as f64 / n as f64;
    Ok(TradeoffPoint {
        threshold: cfg.threshold,
        top1_accuracy: correct as f64 / n as f64,
        avg_flops_per_image: cfg.avg_flops(
            paired.shallow.flops_per_image,
            paired.deep.flops_per_image,
            df,
        ),
        deep_fraction: df,
    })
}

/// Grid counts from precomputed scores.
pub fn sweep_counts_from(
    scored: &PairedScores,
    grid_step: f64,
    cfg: &CascadeConfig,
) -> Result<Vec<PointCounts>> {
    if scored.s_conf.is_empty() {
        return Err(Error::EmptyInput("no paired records".into()));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::Config(format!(
            "grid step must be in (0, 1], got {grid_step}"
        )));
    }
    let n_points = (1.0 / grid_step).round() as usize + 1;
    let mut counts = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let t = if k + 1 == n_points {
            1.0
        } else {
            k as f64 * grid_step
        };
        counts.push(scored.counts_at(t, cfg.tie_break));
    }
    Ok(counts)
}

/// Raw counts over the threshold grid; both models are scored exactly once.
pub fn sweep_counts(
    paired: &PairedRunRecords,
    scorer: &dyn ConfidenceScorer,
    grid_step: f64,
    cfg: &CascadeConfig,
) -> Result<Vec<PointCounts>> {
    if paired.is_empty() {
        return Err(Error::EmptyInput("no paired records".into()));
    }
    let scored = score_paired(paired, scorer)?;
    sweep_counts_from(&scored, grid_step, cfg)
}

/// Full tradeoff curve over a threshold grid (step 0.01 gives 101 points).
pub fn sweep_thresholds(
    paired: &PairedRunRecords,
    scorer: &dyn ConfidenceScorer,
    grid_step: f64,
    cfg: &CascadeConfig,
) -> Result<TradeoffCurve> {
    let counts = sweep_counts(paired, scorer, grid_step, cfg)?;
    Ok(TradeoffCurve::from_counts(&counts, paired, cfg))
}

/// Target for threshold selection on a swept curve.
#[derive(Debug, Clone, Copy)]
pub enum SweepTarget {
    /// Smallest-FLOPs point whose accuracy is at least this.
    MinAccuracy(f64),
    /// Highest-accuracy point whose average FLOPs fit this budget.
    MaxAvgFlops(f64),
}

/// Picks the grid point that just meets the requirement; `None` when the
/// target is infeasible on this curve.
pub fn find_threshold(curve: &TradeoffCurve, target: SweepTarget) -> Option<&TradeoffPoint> {
    match target {
        SweepTarget::MinAccuracy(min_acc) => curve
            .points()
            .iter()
            .filter(|p| p.top1_accuracy >= min_acc)
            .min_by(|a, b| {
                a.avg_flops_per_image
                    .partial_cmp(&b.avg_flops_per_image)
                    .unwrap()
                    .then(a.threshold.partial_cmp(&b.threshold).unwrap())
            }),
        SweepTarget::MaxAvgFlops(budget) => curve
            .points()
            .iter()
            .filter(|p| p.avg_flops_per_image <= budget)
            .max_by(|a, b| {
                a.top1_accuracy
                    .partial_cmp(&b.top1_accuracy)
                    .unwrap()
                    .then(b.threshold.partial_cmp(&a.threshold).unwrap())
            }),
    }
}

/// Ensemble-averaging baseline: both models run on every sample and their
/// outputs are added; FLOPs are the plain sum of both models' costs.
pub struct GemResult {
    pub accuracy: f64,
    pub avg_flops: f64,
}

pub fn gem_baseline(paired: &PairedRunRecords) -> Result<GemResult> {
    if paired.is_empty() {
        return Err(Error::EmptyInput("no paired records".into()));
    }
    let mut correct = 0usize;
    for (s, d) in paired.shallow.records.iter().zip(&paired.deep.records) {
        if s.probs.len() != d.probs.len() {
            return Err(Error::PairedRecords(format!(
                "cannot ensemble different dimensions for id {:?} ({} vs {})",
                s.id,
                s.probs.len(),
                d.probs.len()
            )));
        }
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, (&a, &b)) in s.probs.values().iter().zip(d.probs.values()).enumerate() {
            let v = a + b;
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if best == s.label {
            correct += 1;
        }
    }
    Ok(GemResult {
        accuracy: correct as f64 / paired.len() as f64,
        avg_flops: paired.shallow.flops_per_image + paired.deep.flops_per_image,
    })
}

/// Fraction of samples correct under at least one of the two models: the
/// cascade's accuracy ceiling (the accepted prediction always comes from one
/// of them).
pub fn oracle_upper_bound(paired: &PairedRunRecords) -> f64 {
    let union = paired
        .shallow
        .records
        .iter()
        .zip(&paired.deep.records)
        .filter(|(s, d)| s.probs.argmax() == s.label || d.probs.argmax() == d.label)
        .count();
    union as f64 / paired.len() as f64
}
