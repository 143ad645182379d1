//! Dataset construction from classifier run records, seeded end-to-end
//! training of the confidence model (gradients flow through the regressor
//! and through the mapping projections), finite-difference gradient
//! checking, and the cross-validation fold protocol.

use std::collections::HashSet;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    score_paired, sweep_counts_from, CascadeConfig, ConfidenceScorer, PairedRunRecords,
    TradeoffCurve, TradeoffPoint,
};
use crate::error::{Error, Result};
use crate::io::{ModelRunRecords, RunRecord};
use crate::mapping::{mapping_backward, ProbVector};
use crate::metrics::auroc;
use crate::model::{ConfidenceModel, ModelConfig};
use crate::nn::Mode;

/// One training example: a recorded probability vector and whether the
/// classification it came from was correct.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSample {
    /// Underlying sample id (used to key fold assignments).
    pub id: String,
    pub probs: ProbVector,
    /// Exactly 0.0 or 1.0.
    pub label: f64,
    pub source_model: String,
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which model's records provide the training samples in the fold protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainSource {
    Shallow,
    Deep,
    /// Concatenate both models' outputs (doubles the sample count; fold
    /// membership is keyed by sample id so the two copies stay together).
    Both,
}

/// Cross-validation plan: fold count, inner train/validation split, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub inner_train_fraction: f64,
    pub seed: u64,
}

impl FoldPlan {
    pub fn new(n_folds: usize, inner_train_fraction: f64, seed: u64) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::Config(format!(
                "need at least 2 folds, got {n_folds}"
            )));
        }
        if !(inner_train_fraction > 0.0 && inner_train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "inner train fraction must be in (0, 1), got {inner_train_fraction}"
            )));
        }
        Ok(Self {
            n_folds,
            inner_train_fraction,
            seed,
        })
    }

    /// Assigns each of `n` positions a fold index; folds partition the
    /// positions with sizes differing by at most one.
    pub fn assignments(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = StdRng::seed_from_u64(derive_seed(self.seed, 0x0f01d));
        order.shuffle(&mut rng);
        let mut folds = vec![0usize; n];
        for (k, &pos) in order.iter().enumerate() {
            folds[pos] = k % self.n_folds;
        }
        folds
    }
}

/// Stable per-purpose seed derivation (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn sample_from_record(rec: &RunRecord, model_name: &str) -> LabeledSample {
    let correct = rec.probs.argmax() == rec.label;
    LabeledSample {
        id: rec.id.clone(),
        probs: rec.probs.clone(),
        label: if correct { 1.0 } else { 0.0 },
        source_model: model_name.to_string(),
    }
}

/// One labeled sample per record: label 1 when the recorded argmax matches
/// the true label, else 0.
pub fn build_training_set(records: &ModelRunRecords) -> Result<Vec<LabeledSample>> {
    if records.records.is_empty() {
        return Err(Error::EmptyInput("record set has no entries".into()));
    }
    Ok(records
        .records
        .iter()
        .map(|r| sample_from_record(r, &records.name))
        .collect())
}

/// Concatenation of both models' labeled samples over the same underlying
/// ids; errors when the id sets differ.
pub fn build_retrain_set(
    shallow: &ModelRunRecords,
    deep: &ModelRunRecords,
) -> Result<Vec<LabeledSample>> {
    let s_ids: HashSet<&str> = shallow.records.iter().map(|r| r.id.as_str()).collect();
    let d_ids: HashSet<&str> = deep.records.iter().map(|r| r.id.as_str()).collect();
    if s_ids != d_ids {
        return Err(Error::PairedRecords(format!(
            "shallow and deep id sets differ ({} vs {} ids, {} shared)",
            s_ids.len(),
            d_ids.len(),
            s_ids.intersection(&d_ids).count()
        )));
    }
    let mut out = build_training_set(shallow)?;
    out.extend(build_training_set(deep)?);
    Ok(out)
}

/// Adam with bias correction; slots are laid out in parameter visit order.
struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: u64,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            slots: Vec::new(),
        }
    }

    fn step(&mut self, model: &mut ConfidenceModel) {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.b1, self.b2, self.eps);
        let slots = &mut self.slots;
        let mut idx = 0usize;
        model.visit_params(&mut |p, g| {
            if slots.len() == idx {
                slots.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
            let (m, v) = &mut slots[idx];
            for ((pi, &gi), (mi, vi)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Per-epoch loss record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

pub struct TrainOutcome {
    /// Best-validation checkpoint.
    pub model: ConfidenceModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Mean squared error of the model's confidence against the labels,
/// evaluated with running statistics.
pub fn eval_mse(model: &ConfidenceModel, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let probs: Vec<ProbVector> = data.iter().map(|s| s.probs.clone()).collect();
    let scores = model.score_batch(&probs)?;
    let sum: f64 = scores
        .iter()
        .zip(data)
        .map(|(&s, d)| (s - d.label) * (s - d.label))
        .sum();
    Ok(sum / data.len() as f64)
}

/// Trains to minimize MSE between the model confidence and the labels.
/// Gradients flow through the regressor and through the mapping projections.
/// Stops when the validation MSE fails to improve for `patience` epochs and
/// returns the best-validation checkpoint. Deterministic given the seed.
pub fn train(
    train_data: &[LabeledSample],
    val_data: &[LabeledSample],
    cfg: &TrainConfig,
    init: ConfidenceModel,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if val_data.is_empty() {
        return Err(Error::EmptyInput("validation set is empty".into()));
    }
    let mut model = init;
    model.validate()?;
    let all_probs: Vec<ProbVector> = train_data
        .iter()
        .chain(val_data)
        .map(|s| s.probs.clone())
        .collect();
    let grids = model.grids_for(&all_probs);
    drop(all_probs);

    let mut adam = Adam::new(cfg);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut bad_epochs = 0usize;

    let mut indices: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let mut rng = StdRng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in indices.chunks(cfg.batch_size) {
            let chunk: Vec<ProbVector> =
                batch.iter().map(|&i| train_data[i].probs.clone()).collect();
            let bsz = chunk.len();
            let traces = model.map_chunk_traced(&chunk, &grids)?;
            let m = model.m();
            let mut mapped = vec![0.0; bsz * m];
            for (row, trace) in mapped.chunks_mut(m).zip(&traces) {
                row.copy_from_slice(&trace.mapped);
            }
            let (scores, cache) = model.regressor_forward(&mapped, bsz, Mode::Train);
            let mut batch_loss = 0.0;
            let mut dscores = vec![0.0; bsz];
            for (k, &i) in batch.iter().enumerate() {
                let err = scores[k] - train_data[i].label;
                batch_loss += err * err;
                dscores[k] = 2.0 * err / bsz as f64;
            }
            batch_loss /= bsz as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    message: format!("batch loss {batch_loss}"),
                });
            }
            loss_sum += batch_loss * bsz as f64;
            model.zero_grads();
            let dmapped = model.regressor.backward(&cache, &dscores);
            for (k, trace) in traces.iter().enumerate() {
                let grid = &grids[&trace.input.len()];
                mapping_backward(
                    trace,
                    &model.mapping,
                    grid,
                    &dmapped[k * m..(k + 1) * m],
                    &mut model.gwq,
                    &mut model.gwk,
                );
            }
            model.regressor.update_running(&cache);
            adam.step(&mut model);
        }
        let train_mse = loss_sum / train_data.len() as f64;
        let val_mse = eval_mse(&model, val_data)?;
        if !val_mse.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                message: format!("validation loss {val_mse}"),
            });
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best_model = model.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        best_val_mse: best_val,
    })
}

/// Splits samples into train/validation by underlying id, so duplicate ids
/// (retrain sets) never straddle the boundary.
pub fn split_by_id(
    samples: &[LabeledSample],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let mut ids: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for s in samples {
        if seen.insert(s.id.as_str()) {
            ids.push(s.id.as_str());
        }
    }
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0x5b117));
    ids.shuffle(&mut rng);
    let cut = (ids.len() as f64 * train_fraction).floor() as usize;
    if cut == 0 || cut == ids.len() {
        return Err(Error::FoldSize(format!(
            "cannot split {} ids at fraction {train_fraction}",
            ids.len()
        )));
    }
    let train_ids: HashSet<&str> = ids[..cut].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        if train_ids.contains(s.id.as_str()) {
            train.push(s.clone());
        } else {
            val.push(s.clone());
        }
    }
    Ok((train, val))
}

/// Compares the analytic gradient of the squared-error loss for every
/// parameter against central finite differences; returns the max relative
/// error over parameters whose analytic gradient exceeds 1e-8 in magnitude.
/// The forward runs in inference mode, so the loss is a pure function of the
/// parameters.
///
/// The loss is piecewise smooth (sparsemax supports, relu signs and sort
/// permutations switch at measure-zero boundaries). A parameter whose FD
/// stencil straddles such a boundary has no meaningful central-difference
/// estimate; those are detected by comparing the `h` and `h/2` estimates and
/// skipped. The relative error is guarded at 1e-6 in the denominator so
/// near-zero gradients are held to an absolute rather than relative bar.
pub fn gradient_check(
    model: &ConfidenceModel,
    sample: &LabeledSample,
    fd_step: f64,
) -> Result<f64> {
    gradient_check_verbose(model, sample, fd_step).map(|(err, ..)| err)
}

/// Like [`gradient_check`], also reporting where the worst error lives:
/// (max_rel_err, tensor index, element index, analytic, numeric).
pub fn gradient_check_verbose(
    model: &ConfidenceModel,
    sample: &LabeledSample,
    fd_step: f64,
) -> Result<(f64, usize, usize, f64, f64)> {
    let loss_of = |m: &ConfidenceModel| -> Result<f64> {
        let s = m.confidence(&sample.probs)?;
        let e = s - sample.label;
        Ok(e * e)
    };
    // Analytic pass (inference-mode forward with caches).
    let mut work = model.clone();
    work.zero_grads();
    let grid = work.mapping.gaussian_grid(sample.probs.len());
    let sorted = crate::mapping::sort_desc(&sample.probs);
    let trace = crate::mapping::map_with_grid(&sorted, &work.mapping, &grid)?;
    let (scores, cache) = work.regressor.forward(&trace.mapped, 1, Mode::Eval);
    let dscore = 2.0 * (scores[0] - sample.label);
    let dmapped = work.regressor.backward(&cache, &[dscore]);
    let (gwq, gwk) = (&mut work.gwq, &mut work.gwk);
    mapping_backward(&trace, &model.mapping, &grid, &dmapped, gwq, gwk);

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    work.visit_params(&mut |_p, g| analytic.push(g.clone()));

    let central = |ti: usize, pi: usize, h: f64| -> Result<f64> {
        let mut plus = model.clone();
        perturb(&mut plus, ti, pi, h);
        let mut minus = model.clone();
        perturb(&mut minus, ti, pi, -h);
        Ok((loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h))
    };
    let n_tensors = analytic.len();
    let mut max_rel: f64 = 0.0;
    let mut worst = (0usize, 0usize, 0.0f64, 0.0f64);
    for ti in 0..n_tensors {
        for pi in 0..analytic[ti].len() {
            let ga = analytic[ti][pi];
            if ga.abs() <= 1e-8 {
                continue;
            }
            let gn_h = central(ti, pi, fd_step)?;
            let gn = central(ti, pi, fd_step / 2.0)?;
            // Inconsistent estimates mean the stencil straddles a kink; the
            // derivative is not defined there, so nothing to compare.
            if (gn_h - gn).abs() > 1e-3 * gn_h.abs().max(gn.abs()).max(1e-6) {
                continue;
            }
            let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                worst = (ti, pi, ga, gn);
            }
        }
    }
    Ok((max_rel, worst.0, worst.1, worst.2, worst.3))
}

fn perturb(model: &mut ConfidenceModel, tensor: usize, elem: usize, delta: f64) {
    let mut k = 0usize;
    model.visit_params(&mut |p, _| {
        if k == tensor {
            p[elem] += delta;
        }
        k += 1;
    });
}

/// Per-fold outcome of the cross-validation protocol.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_eval: usize,
    pub n_train_samples: usize,
    pub n_val_samples: usize,
    /// Cascade performance on the held-out fold at the configured threshold.
    pub point: TradeoffPoint,
    /// Correct-vs-incorrect separation of the trained confidence on the
    /// held-out fold (both models' records pooled).
    pub auroc: Option<f64>,
    pub shallow_accuracy: f64,
    pub deep_accuracy: f64,
    pub oracle_upper_bound: f64,
    pub best_val_mse: f64,
    pub history: Vec<EpochStats>,
}

/// Aggregate outcome across folds; accuracy aggregates are exact count
/// ratios over the full id set (each id evaluated exactly once).
pub struct FoldReport {
    pub folds: Vec<FoldOutcome>,
    pub models: Vec<ConfidenceModel>,
    pub aggregate: TradeoffPoint,
    pub aggregate_curve: TradeoffCurve,
    pub aggregate_auroc: Option<f64>,
    pub shallow_accuracy: f64,
    pub deep_accuracy: f64,
    pub oracle_upper_bound: f64,
}

/// Runs the fold protocol: for each fold, train on the inner split of the
/// non-held-out part, then evaluate the cascade on the held-out fold.
/// Asserts zero id leakage between train/validation and evaluation.
pub fn run_fold_protocol(
    paired: &PairedRunRecords,
    plan: &FoldPlan,
    tcfg: &TrainConfig,
    ccfg: &CascadeConfig,
    source: TrainSource,
    mcfg: &ModelConfig,
    grid_step: f64,
) -> Result<FoldReport> {
    let n = paired.len();
    if n < plan.n_folds {
        return Err(Error::FoldSize(format!(
            "{n} samples cannot fill {} folds",
            plan.n_folds
        )));
    }
    let folds = plan.assignments(n);
    let mut outcomes = Vec::new();
    let mut models = Vec::new();
    let mut agg_counts: Option<Vec<crate::cascade::PointCounts>> = None;
    let mut agg_point_correct = 0usize;
    let mut agg_point_deep = 0usize;
    let mut pooled_scores: Vec<(f64, bool)> = Vec::new();
    let mut covered: HashSet<&str> = HashSet::new();

    for fold in 0..plan.n_folds {
        let eval_idx: Vec<usize> = (0..n).filter(|&i| folds[i] == fold).collect();
        let rest_idx: Vec<usize> = (0..n).filter(|&i| folds[i] != fold).collect();
        if eval_idx.is_empty() || rest_idx.len() < 2 {
            return Err(Error::FoldSize(format!(
                "fold {fold}: {} eval / {} rest",
                eval_idx.len(),
                rest_idx.len()
            )));
        }
        let mut samples: Vec<LabeledSample> = Vec::new();
        for &i in &rest_idx {
            match source {
                TrainSource::Shallow => {
                    samples.push(sample_from_record(
                        &paired.shallow.records[i],
                        &paired.shallow.name,
                    ));
                }
                TrainSource::Deep => {
                    samples.push(sample_from_record(
                        &paired.deep.records[i],
                        &paired.deep.name,
                    ));
                }
                TrainSource::Both => {
                    samples.push(sample_from_record(
                        &paired.shallow.records[i],
                        &paired.shallow.name,
                    ));
                    samples.push(sample_from_record(
                        &paired.deep.records[i],
                        &paired.deep.name,
                    ));
                }
            }
        }
        let (train_samples, val_samples) = split_by_id(
            &samples,
            plan.inner_train_fraction,
            derive_seed(plan.seed, fold as u64 + 1),
        )?;

        // Leakage check: no trained-on id may appear in the eval fold.
        let eval_ids: HashSet<&str> = eval_idx
            .iter()
            .map(|&i| paired.shallow.records[i].id.as_str())
            .collect();
        for s in train_samples.iter().chain(&val_samples) {
            assert!(
                !eval_ids.contains(s.id.as_str()),
                "id leakage between folds"
            );
        }
        for id in &eval_ids {
            assert!(covered.insert(id), "fold overlap on id {id}");
        }

        let init = ConfidenceModel::init(mcfg, derive_seed(tcfg.seed, 0xf01d + fold as u64))?;
        let fold_cfg = TrainConfig {
            seed: derive_seed(tcfg.seed, fold as u64),
            ..tcfg.clone()
        };
        let n_train = train_samples.len();
        let n_val = val_samples.len();
        let outcome = train(&train_samples, &val_samples, &fold_cfg, init)?;
        let model = outcome.model;

        let eval_paired = paired.subset(&eval_idx)?;
        let scored = score_paired(&eval_paired, &model)?;
        let counts = sweep_counts_from(&scored, grid_step, ccfg)?;
        let curve = TradeoffCurve::from_counts(&counts, &eval_paired, ccfg);
        let point = curve
            .closest_threshold(ccfg.threshold)
            .expect("non-empty grid")
            .clone();
        let idx_at = curve.closest_index(ccfg.threshold).unwrap();
        agg_point_correct += counts[idx_at].correct;
        agg_point_deep += counts[idx_at].deep;
        match &mut agg_counts {
            None => agg_counts = Some(counts.clone()),
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&counts) {
                    a.correct += c.correct;
                    a.deep += c.deep;
                    a.total += c.total;
                }
            }
        }

        let mut fold_scores: Vec<(f64, bool)> = Vec::new();
        for (conf, correct) in [
            (&scored.s_conf, &scored.s_correct),
            (&scored.d_conf, &scored.d_correct),
        ] {
            fold_scores.extend(conf.iter().zip(correct).map(|(&c, &ok)| (c, ok)));
        }
        let fold_auroc = auroc(&fold_scores);
        pooled_scores.extend_from_slice(&fold_scores);

        outcomes.push(FoldOutcome {
            fold,
            n_eval: eval_idx.len(),
            n_train_samples: n_train,
            n_val_samples: n_val,
            point,
            auroc: fold_auroc,
            shallow_accuracy: eval_paired.shallow.accuracy(),
            deep_accuracy: eval_paired.deep.accuracy(),
            oracle_upper_bound: crate::cascade::oracle_upper_bound(&eval_paired),
            best_val_mse: outcome.best_val_mse,
            history: outcome.history,
        });
        models.push(model);
    }
    assert_eq!(
        covered.len(),
        n,
        "eval folds must cover every id exactly once"
    );

    let agg_counts = agg_counts.expect("at least one fold");
    let aggregate_curve = TradeoffCurve::from_counts(&agg_counts, paired, ccfg);
    let idx_at = aggregate_curve.closest_index(ccfg.threshold).unwrap();
    let mut aggregate = aggregate_curve.points()[idx_at].clone();
    debug_assert_eq!(agg_counts[idx_at].correct, agg_point_correct);
    debug_assert_eq!(agg_counts[idx_at].deep, agg_point_deep);
    aggregate.top1_accuracy = agg_point_correct as f64 / n as f64;

    Ok(FoldReport {
        folds: outcomes,
        models,
        aggregate,
        aggregate_curve,
        aggregate_auroc: auroc(&pooled_scores),
        shallow_accuracy: paired.shallow.accuracy(),
        deep_accuracy: paired.deep.accuracy(),
        oracle_upper_bound: crate::cascade::oracle_upper_bound(paired),
    })
}

/// Plugs a trained model into the cascade as its confidence function.
impl ConfidenceScorer for ConfidenceModel {
    fn confidence_of(&self, p: &ProbVector) -> Result<f64> {
        self.confidence(p)
    }

    fn confidence_batch(&self, probs: &[ProbVector]) -> Result<Vec<f64>> {
        self.score_batch(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::normalize_probs;

    fn records(name: &str, rows: &[(&str, usize, &[f64])]) -> ModelRunRecords {
        ModelRunRecords {
            name: name.into(),
            flops_per_image: 1e9,
            records: rows
                .iter()
                .map(|(id, label, probs)| RunRecord {
                    id: (*id).into(),
                    label: *label,
                    probs: normalize_probs(probs, false).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn labels_follow_argmax_rule() {
        let recs = records(
            "m",
            &[
                ("a", 0, &[0.7, 0.2, 0.1]),
                ("b", 1, &[0.7, 0.2, 0.1]),
                ("c", 2, &[0.1, 0.2, 0.7]),
            ],
        );
        let set = build_training_set(&recs).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set[0].label, 1.0);
        assert_eq!(set[1].label, 0.0);
        assert_eq!(set[2].label, 1.0);
        // mean label == top-1 accuracy of the source records
        let mean: f64 = set.iter().map(|s| s.label).sum::<f64>() / set.len() as f64;
        assert_eq!(mean, recs.accuracy());
    }

    #[test]
    fn empty_record_set_is_an_error() {
        let recs = ModelRunRecords {
            name: "m".into(),
            flops_per_image: 1.0,
            records: vec![],
        };
        assert!(matches!(
            build_training_set(&recs),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn retrain_set_concatenates_and_validates_ids() {
        let s = records("s", &[("a", 0, &[0.9, 0.1]), ("b", 1, &[0.4, 0.6])]);
        let d = records("d", &[("a", 0, &[0.8, 0.2]), ("b", 1, &[0.3, 0.7])]);
        let set = build_retrain_set(&s, &d).unwrap();
        assert_eq!(set.len(), 4);
        let disjoint = records("d", &[("x", 0, &[0.8, 0.2]), ("b", 1, &[0.3, 0.7])]);
        assert!(matches!(
            build_retrain_set(&s, &disjoint),
            Err(Error::PairedRecords(_))
        ));
    }

    #[test]
    fn split_by_id_keeps_copies_together() {
        let s = records(
            "s",
            &[
                ("a", 0, &[0.9, 0.1]),
                ("b", 1, &[0.4, 0.6]),
                ("c", 0, &[0.6, 0.4]),
                ("d", 1, &[0.2, 0.8]),
            ],
        );
        let d = records(
            "d",
            &[
                ("a", 0, &[0.8, 0.2]),
                ("b", 1, &[0.3, 0.7]),
                ("c", 0, &[0.7, 0.3]),
                ("d", 1, &[0.1, 0.9]),
            ],
        );
        let set = build_retrain_set(&s, &d).unwrap();
        let (train, val) = split_by_id(&set, 0.5, 7).unwrap();
        let train_ids: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
        let val_ids: HashSet<&str> = val.iter().map(|s| s.id.as_str()).collect();
        assert!(train_ids.is_disjoint(&val_ids));
        assert_eq!(train.len() % 2, 0);
        assert_eq!(val.len() % 2, 0);
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            m: 16,
            n_steps: 1,
            n_d: 4,
            n_a: 4,
            attn_width: 4,
            ..ModelConfig::default()
        }
    }

    fn random_samples(seed: u64, count: usize, n: usize) -> Vec<LabeledSample> {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let probs = normalize_probs(&raw, false).unwrap();
                LabeledSample {
                    id: format!("t{i}"),
                    probs,
                    label: if rng.gen_bool(0.5) { 1.0 } else { 0.0 },
                    source_model: "test".into(),
                }
            })
            .collect()
    }

    #[test]
    fn constant_label_dataset_converges() {
        let mut samples = random_samples(71, 160, 6);
        for s in samples.iter_mut() {
            s.label = 1.0;
        }
        let (train_set, val_set) = split_by_id(&samples, 0.8, 71).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            max_epochs: 60,
            patience: 60,
            seed: 71,
            ..TrainConfig::default()
        };
        let init = ConfidenceModel::init(&tiny_model_cfg(), 71).unwrap();
        let outcome = train(&train_set, &val_set, &cfg, init).unwrap();
        let final_mse = eval_mse(&outcome.model, &train_set).unwrap();
        assert!(final_mse < 0.01, "train MSE {final_mse}");
    }

    #[test]
    fn fixed_seed_reproduces_loss_history() {
        let samples = random_samples(72, 120, 5);
        let (train_set, val_set) = split_by_id(&samples, 0.8, 72).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            max_epochs: 4,
            patience: 4,
            seed: 72,
            ..TrainConfig::default()
        };
        let run = || {
            let init = ConfidenceModel::init(&tiny_model_cfg(), 72).unwrap();
            train(&train_set, &val_set, &cfg, init).unwrap().history
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train_mse.to_bits(), y.train_mse.to_bits());
            assert_eq!(x.val_mse.to_bits(), y.val_mse.to_bits());
        }
    }

    #[test]
    fn separable_rule_is_learnable() {
        // label = 1 iff the top probability exceeds 0.5: readable straight
        // off the sorted input, so a trained model must separate well.
        let mut samples = random_samples(73, 2000, 6);
        for s in samples.iter_mut() {
            s.label = if s.probs.max() > 0.5 { 1.0 } else { 0.0 };
        }
        let (train_set, rest) = split_by_id(&samples, 0.7, 73).unwrap();
        let (val_set, held_out) = split_by_id(&rest, 0.5, 74).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            max_epochs: 80,
            patience: 20,
            seed: 73,
            ..TrainConfig::default()
        };
        let init = ConfidenceModel::init(&tiny_model_cfg(), 73).unwrap();
        let outcome = train(&train_set, &val_set, &cfg, init).unwrap();
        let scored: Vec<(f64, bool)> = held_out
            .iter()
            .map(|s| (outcome.model.confidence(&s.probs).unwrap(), s.label == 1.0))
            .collect();
        let a = auroc(&scored).unwrap();
        assert!(a > 0.95, "held-out AUROC {a}");
    }

    #[test]
    fn zeroed_head_gradient_matches_closed_form() {
        use crate::nn::{Dense, Mode};
        let mut model = ConfidenceModel::init(&tiny_model_cfg(), 75).unwrap();
        model.regressor.head = Dense::zeros(4, 1);
        let sample = &random_samples(75, 1, 5)[0];
        // score = sigmoid(0) = 0.5; dL/d(head bias) = 2(0.5 - y) * s(1 - s)
        model.zero_grads();
        let grid = model.mapping.gaussian_grid(sample.probs.len());
        let sorted = crate::mapping::sort_desc(&sample.probs);
        let trace = crate::mapping::map_with_grid(&sorted, &model.mapping, &grid).unwrap();
        let (scores, cache) = model.regressor.forward(&trace.mapped, 1, Mode::Eval);
        assert_eq!(scores[0], 0.5);
        let dscore = 2.0 * (scores[0] - sample.label);
        model.regressor.backward(&cache, &[dscore]);
        let want = 2.0 * (0.5 - sample.label) * 0.25;
        let got = model.regressor.head.gb[0];
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn fold_assignments_partition_evenly() {
        let plan = FoldPlan::new(5, 0.8, 3).unwrap();
        let folds = plan.assignments(50);
        for f in 0..5 {
            assert_eq!(folds.iter().filter(|&&x| x == f).count(), 10);
        }
    }

    #[test]
    fn derive_seed_is_stable() {
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
    }
}
