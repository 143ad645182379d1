//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them). Tolerances are pinned in the
//! assertions.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use clcnet::cascade::{
    gem_baseline, oracle_upper_bound, score_paired, sweep_thresholds, CascadeConfig,
    ConfidenceScorer, MaxProbScorer, PairedRunRecords,
};
use clcnet::io::{ModelRunRecords, RunRecord};
use clcnet::mapping::{
    attention_scores, gaussian_column, map_with_grid, normalize_probs, sort_desc, MappingParams,
    ProbVector,
};
use clcnet::model::{ConfidenceModel, ModelConfig};
use clcnet::sparsemax::sparsemax;
use clcnet::synth::{confounder_pairs, synth_generate, SynthConfig};
use clcnet::train::{
    gradient_check, run_fold_protocol, FoldPlan, LabeledSample, TrainConfig, TrainSource,
};

fn small_model_config() -> ModelConfig {
    ModelConfig {
        m: 16,
        n_steps: 2,
        n_d: 4,
        n_a: 4,
        attn_width: 4,
        ..ModelConfig::default()
    }
}

fn random_prob_vector(rng: &mut StdRng, n: usize) -> ProbVector {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..1.0)).collect();
    normalize_probs(&raw, false).unwrap()
}

/// Criterion 1: the matrix-product mapping agrees with an independent
/// scalar-summation oracle over 200 seeded configurations.
#[test]
fn criterion_1_mapping_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=64);
        let m = rng.gen_range(2..=256);
        let sigma = rng.gen_range(0.005..0.5);
        let params = MappingParams::init(m, sigma, &mut rng).unwrap();
        let p = random_prob_vector(&mut rng, n);
        let sorted = sort_desc(&p);
        let grid = params.gaussian_grid(n);
        let trace = map_with_grid(&sorted, &params, &grid).unwrap();
        // Independent oracle: explicit per-column accumulation.
        let att = attention_scores(&sorted, &params).unwrap();
        let mut oracle = vec![0.0; m];
        for x in 1..=n {
            let col = gaussian_column(x, sorted.values()[x - 1], n, m, sigma);
            for (o, c) in oracle.iter_mut().zip(&col) {
                *o += att.values()[x - 1] * c;
            }
        }
        for (got, want) in trace.pre_sort.iter().zip(&oracle) {
            let rel = (got - want).abs() / want.abs().max(1e-300);
            if want.abs() > 0.0 {
                worst = worst.max(rel);
            }
            assert!(
                rel <= 1e-10 || (got - want).abs() < 1e-300,
                "matrix vs summation mismatch: {got} vs {want}"
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "PASS criterion 1: mapping matrix form matches summation oracle over 200 configs \
         (max rel err {worst:.3e}, {elapsed:.2?})"
    );
}

/// Criterion 2: analytic reverse-mode gradients match central finite
/// differences on 20 seeded small models.
#[test]
fn criterion_2_gradient_correctness() {
    let started = Instant::now();
    let cfg = small_model_config();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = StdRng::seed_from_u64(200 + seed);
        let model = ConfidenceModel::init(&cfg, 1000 + seed).unwrap();
        let n = rng.gen_range(3..12);
        let sample = LabeledSample {
            id: format!("s{seed}"),
            probs: random_prob_vector(&mut rng, n),
            label: if rng.gen_bool(0.5) { 1.0 } else { 0.0 },
            source_model: "acceptance".into(),
        };
        let err = gradient_check(&model, &sample, 1e-5).unwrap();
        worst = worst.max(err);
        assert!(err <= 1e-4, "seed {seed}: max relative error {err}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "PASS criterion 2: gradients match finite differences on 20 models \
         (worst rel err {worst:.3e}, {elapsed:.2?})"
    );
}

/// Exhaustive-support simplex-projection oracle (test-side, quadratic-free).
fn sparsemax_bruteforce(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let k = idx.len() as f64;
        let sum: f64 = idx.iter().map(|&i| z[i]).sum();
        let tau = (sum - 1.0) / k;
        let mut p = vec![0.0; n];
        let mut feasible = true;
        for &i in &idx {
            let v = z[i] - tau;
            if v < 0.0 {
                feasible = false;
                break;
            }
            p[i] = v;
        }
        if !feasible {
            continue;
        }
        let dist: f64 = p
            .iter()
            .zip(z)
            .map(|(&pi, &zi)| (pi - zi) * (pi - zi))
            .sum();
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, p));
        }
    }
    best.expect("nonempty support exists").1
}

/// Criterion 3: sparsemax agrees with the exhaustive-support oracle and is
/// shift invariant.
#[test]
fn criterion_3_sparsemax_oracle() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(300);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=10);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let fast = sparsemax(&z);
        let slow = sparsemax_bruteforce(&z);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10, "{fast:?} vs {slow:?} for {z:?}");
        }
        let c: f64 = rng.gen_range(-8.0..8.0);
        let shifted: Vec<f64> = z.iter().map(|&v| v + c).collect();
        for (a, b) in sparsemax(&shifted).iter().zip(&fast) {
            assert!(
                (a - b).abs() <= 1e-12,
                "shift invariance broke for {z:?} + {c}"
            );
        }
    }
    println!(
        "PASS criterion 3: sparsemax matches the exhaustive-support oracle on 1000 vectors, \
         shift invariant to 1e-12 ({:.2?})",
        started.elapsed()
    );
}

/// Criterion 4: the confidence is bitwise invariant under input permutation.
#[test]
fn criterion_4_permutation_invariance() {
    let started = Instant::now();
    let model = ConfidenceModel::init(&ModelConfig::default(), 404).unwrap();
    let mut rng = StdRng::seed_from_u64(400);
    for _ in 0..100 {
        let n = rng.gen_range(2..50);
        let p = random_prob_vector(&mut rng, n);
        let base = model.confidence(&p).unwrap();
        let mut values = p.values().to_vec();
        for _ in 0..100 {
            for i in (1..values.len()).rev() {
                let j = rng.gen_range(0..=i);
                values.swap(i, j);
            }
            let q = ProbVector::new(values.clone()).unwrap();
            assert_eq!(
                base.to_bits(),
                model.confidence(&q).unwrap().to_bits(),
                "permutation changed the score"
            );
        }
    }
    println!(
        "PASS criterion 4: scores bitwise identical under 100 x 100 permutations ({:.2?})",
        started.elapsed()
    );
}

/// Pick-higher-confidence ensemble accuracy, computed independently of the
/// sweep machinery.
fn ensemble_accuracy(paired: &PairedRunRecords, scorer: &dyn ConfidenceScorer) -> f64 {
    let scored = score_paired(paired, scorer).unwrap();
    let mut correct = 0usize;
    for i in 0..paired.len() {
        let deep_wins = scored.d_conf[i] >= scored.s_conf[i];
        let ok = if deep_wins {
            scored.d_correct[i]
        } else {
            scored.s_correct[i]
        };
        correct += ok as usize;
    }
    correct as f64 / paired.len() as f64
}

/// Criterion 5: endpoint equivalence, monotone routing, and the oracle
/// ceiling, for both the trained-scorer plumbing and the baseline scorer.
#[test]
fn criterion_5_cascade_structure() {
    let started = Instant::now();
    let synth = SynthConfig {
        n_samples: 4_000,
        seed: 505,
        ..SynthConfig::default()
    };
    let (shallow, deep) = synth_generate(&synth).unwrap();
    let paired = PairedRunRecords::new(shallow, deep).unwrap();
    let model = ConfidenceModel::init(&ModelConfig::default(), 505).unwrap();
    let cfg = CascadeConfig::default();
    let ceiling = oracle_upper_bound(&paired);
    let scorers: [(&str, &dyn ConfidenceScorer); 2] =
        [("clcnet", &model), ("maxprob", &MaxProbScorer)];
    for (name, scorer) in scorers {
        let curve = sweep_thresholds(&paired, scorer, 0.01, &cfg).unwrap();
        assert_eq!(curve.len(), 101);
        let first = &curve.points()[0];
        assert_eq!(first.threshold, 0.0);
        assert_eq!(
            first.top1_accuracy,
            paired.shallow.accuracy(),
            "{name}: endpoint 0"
        );
        assert_eq!(first.deep_fraction, 0.0);
        let last = &curve.points()[100];
        assert_eq!(last.threshold, 1.0);
        assert_eq!(
            last.deep_fraction, 1.0,
            "{name}: all confidences < 1 must route"
        );
        assert_eq!(
            last.top1_accuracy,
            ensemble_accuracy(&paired, scorer),
            "{name}: endpoint 1 is the pick-higher-confidence ensemble"
        );
        for w in curve.points().windows(2) {
            assert!(
                w[1].deep_fraction >= w[0].deep_fraction,
                "{name}: monotone routing"
            );
        }
        for p in curve.points() {
            assert!(
                p.top1_accuracy <= ceiling,
                "{name}: ceiling violated at {}",
                p.threshold
            );
        }
    }
    println!(
        "PASS criterion 5: cascade endpoints exact, routing monotone, accuracy under the \
         oracle bound for both scorers ({:.2?})",
        started.elapsed()
    );
}

/// Criterion 6: FLOPs-identity consistency with the published constants.
#[test]
fn criterion_6_flops_identity() {
    let started = Instant::now();
    // 0.39B shallow, 4.2B deep, reported 0.74B average: the identity gives
    // a deep fraction of (0.74 - 0.39) / 4.2 = 1/12.
    let implied: f64 = (0.74e9 - 0.39e9) / 4.2e9;
    assert!((implied - 1.0 / 12.0).abs() < 1e-12);
    assert!((implied - 0.083).abs() < 5e-4);

    // Feed that fraction through the engine: 12 samples, exactly one routed.
    let n = 12;
    let mut shallow_recs = Vec::new();
    let mut deep_recs = Vec::new();
    for i in 0..n {
        let id = format!("r{i}");
        // One low-confidence shallow sample routes to the deep model.
        let s_probs = if i == 0 {
            ProbVector::new(vec![0.3, 0.25, 0.45]).unwrap()
        } else {
            ProbVector::new(vec![0.9, 0.05, 0.05]).unwrap()
        };
        shallow_recs.push(RunRecord {
            id: id.clone(),
            label: 0,
            probs: s_probs,
        });
        deep_recs.push(RunRecord {
            id,
            label: 0,
            probs: ProbVector::new(vec![0.8, 0.1, 0.1]).unwrap(),
        });
    }
    let paired = PairedRunRecords::new(
        ModelRunRecords {
            name: "shallow".into(),
            flops_per_image: 0.39e9,
            records: shallow_recs,
        },
        ModelRunRecords {
            name: "deep".into(),
            flops_per_image: 4.2e9,
            records: deep_recs,
        },
    )
    .unwrap();
    let cfg = CascadeConfig {
        threshold: 0.5,
        include_clcnet_flops: false,
        ..CascadeConfig::default()
    };
    let point = clcnet::cascade::evaluate_cascade(&paired, &MaxProbScorer, &cfg).unwrap();
    assert_eq!(point.deep_fraction, 1.0 / 12.0);
    assert!(
        (point.avg_flops_per_image - 0.74e9).abs() <= 0.01e9,
        "engine average {} vs reported 0.74B",
        point.avg_flops_per_image
    );

    // Ensemble-averaging cost is the exact sum of the two models' costs.
    let gem_paired = PairedRunRecords::new(
        ModelRunRecords {
            name: "vit".into(),
            flops_per_image: 33.03e9,
            records: vec![RunRecord {
                id: "a".into(),
                label: 0,
                probs: ProbVector::new(vec![0.7, 0.3]).unwrap(),
            }],
        },
        ModelRunRecords {
            name: "effnet".into(),
            flops_per_image: 37e9,
            records: vec![RunRecord {
                id: "a".into(),
                label: 0,
                probs: ProbVector::new(vec![0.6, 0.4]).unwrap(),
            }],
        },
    )
    .unwrap();
    let gem = gem_baseline(&gem_paired).unwrap();
    assert_eq!(gem.avg_flops, 70.03e9);
    println!(
        "PASS criterion 6: FLOPs identity reproduces the 0.74B average at deep fraction 1/12 \
         and 33.03B + 37B = 70.03B exactly ({:.2?})",
        started.elapsed()
    );
}

/// Criterion 7: synthetic end-to-end run of the qualitative claims.
#[test]
fn criterion_7_synthetic_end_to_end() {
    let started = Instant::now();
    let synth = SynthConfig {
        n_classes: 10,
        n_samples: 20_000,
        shallow_skill: 0.75,
        deep_skill: 0.85,
        confound_fraction: 0.3,
        seed: 707,
        ..SynthConfig::default()
    };
    let (shallow, deep) = synth_generate(&synth).unwrap();
    let paired = PairedRunRecords::new(shallow, deep).unwrap();
    let plan = FoldPlan::new(5, 0.8, 707).unwrap();
    let tcfg = TrainConfig {
        max_epochs: 8,
        patience: 2,
        seed: 707,
        ..TrainConfig::default()
    };
    let ccfg = CascadeConfig::default();
    let report = run_fold_protocol(
        &paired,
        &plan,
        &tcfg,
        &ccfg,
        TrainSource::Deep,
        &ModelConfig::default(),
        0.01,
    )
    .unwrap();

    // (a) some threshold reaches near-deep accuracy at <= 60% of the deep
    // model's average cost.
    let deep_acc = report.deep_accuracy;
    let budget = 0.6 * paired.deep.flops_per_image;
    let good = report
        .aggregate_curve
        .points()
        .iter()
        .find(|p| p.top1_accuracy >= deep_acc - 0.005 && p.avg_flops_per_image <= budget);
    assert!(
        good.is_some(),
        "no threshold reaches deep accuracy - 0.5pt ({}) within 60% of deep FLOPs ({budget})",
        deep_acc - 0.005
    );
    let good = good.unwrap();

    // (b) held-out correct-vs-incorrect separation.
    let auroc = report.aggregate_auroc.expect("both classes present");
    assert!(auroc >= 0.70, "held-out AUROC {auroc}");

    // (c) ranking of constructed confounder pairs; max-prob ties exactly.
    let pairs = confounder_pairs(10, 1000, 7007).unwrap();
    let model = &report.models[0];
    let rank_score = |scorer: &dyn ConfidenceScorer| -> f64 {
        let mut credit = 0.0;
        for (benign, confounded) in &pairs {
            let cb = scorer.confidence_of(benign).unwrap();
            let cc = scorer.confidence_of(confounded).unwrap();
            if cb > cc {
                credit += 1.0;
            } else if cb == cc {
                credit += 0.5;
            }
        }
        credit / pairs.len() as f64
    };
    let clc_rank = rank_score(model);
    let maxprob_rank = rank_score(&MaxProbScorer);
    assert!(
        clc_rank >= 0.90,
        "confidence net ranks only {clc_rank} of confounder pairs correctly"
    );
    assert_eq!(maxprob_rank, 0.5, "max-prob baseline must tie every pair");

    let elapsed = started.elapsed();
    println!(
        "PASS criterion 7: cascade {:.4} acc @ {:.2}G (deep {:.4} @ {:.2}G, threshold {:.2}), \
         held-out AUROC {:.3}, pair ranking {:.3} vs max-prob 0.500 ({:.1?})",
        good.top1_accuracy,
        good.avg_flops_per_image / 1e9,
        deep_acc,
        paired.deep.flops_per_image / 1e9,
        good.threshold,
        auroc,
        clc_rank,
        elapsed
    );
}

/// Criterion 8: fold protocol bookkeeping at the published scale.
#[test]
fn criterion_8_protocol_fidelity() {
    let started = Instant::now();
    let synth = SynthConfig {
        n_classes: 5,
        n_samples: 50_000,
        seed: 808,
        ..SynthConfig::default()
    };
    let (shallow, deep) = synth_generate(&synth).unwrap();
    let paired = PairedRunRecords::new(shallow, deep).unwrap();
    let plan = FoldPlan::new(5, 0.8, 808).unwrap();
    let tcfg = TrainConfig {
        max_epochs: 1,
        patience: 1,
        seed: 808,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig {
        m: 8,
        n_steps: 1,
        n_d: 2,
        n_a: 2,
        attn_width: 2,
        ..ModelConfig::default()
    };
    // Leakage and exact coverage are hard-asserted inside the protocol run.
    let report = run_fold_protocol(
        &paired,
        &plan,
        &tcfg,
        &CascadeConfig::default(),
        TrainSource::Deep,
        &mcfg,
        0.01,
    )
    .unwrap();
    assert_eq!(report.folds.len(), 5);
    let mut total_eval = 0;
    for fold in &report.folds {
        assert_eq!(fold.n_eval, 10_000);
        assert_eq!(fold.n_train_samples, 32_000);
        assert_eq!(fold.n_val_samples, 8_000);
        total_eval += fold.n_eval;
    }
    assert_eq!(total_eval, 50_000);
    println!(
        "PASS criterion 8: 5 folds of 40,000/10,000 with 32,000/8,000 inner splits, zero \
         leakage, exact coverage ({:.2?})",
        started.elapsed()
    );
}
