//! End-to-end tradeoff sweep on synthetic data: generate paired classifier
//! runs, train a confidence model, sweep the routing threshold, and print
//! selected tradeoff points next to the baselines.
//!
//! ```bash
//! cargo run --release --example cascade_sweep            # quick demo
//! cargo run --release --example cascade_sweep -- 20000 15  # more samples/epochs
//! ```

use clcnet::cascade::{
    gem_baseline, oracle_upper_bound, sweep_thresholds, CascadeConfig, MaxProbScorer,
    PairedRunRecords,
};
use clcnet::model::{ConfidenceModel, ModelConfig};
use clcnet::synth::{synth_generate, SynthConfig};
use clcnet::train::{build_retrain_set, split_by_id, train, TrainConfig};

fn main() -> clcnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_samples: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2_000);
    let max_epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);

    let synth = SynthConfig {
        n_samples,
        seed: 42,
        ..SynthConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (shallow, deep) = synth_generate(&synth)?;
    println!(
        "generated {} paired samples in {:.2?} (shallow acc {:.4}, deep acc {:.4})",
        n_samples,
        t0.elapsed(),
        shallow.accuracy(),
        deep.accuracy()
    );

    let samples = build_retrain_set(&shallow, &deep)?;
    let (train_set, val_set) = split_by_id(&samples, 0.8, 7)?;
    let tcfg = TrainConfig {
        max_epochs,
        patience: 3,
        seed: 7,
        ..TrainConfig::default()
    };
    let model = ConfidenceModel::init(&ModelConfig::default(), 7)?;
    let t0 = std::time::Instant::now();
    let outcome = train(&train_set, &val_set, &tcfg, model)?;
    println!(
        "trained {} epochs in {:.2?} (best val MSE {:.4} at epoch {})",
        outcome.history.len(),
        t0.elapsed(),
        outcome.best_val_mse,
        outcome.best_epoch
    );
    for e in &outcome.history {
        println!(
            "  epoch {:>3}  train_mse {:.5}  val_mse {:.5}",
            e.epoch, e.train_mse, e.val_mse
        );
    }

    let paired = PairedRunRecords::new(shallow, deep)?;
    let ccfg = CascadeConfig::default();
    let t0 = std::time::Instant::now();
    let curve = sweep_thresholds(&paired, &outcome.model, 0.01, &ccfg)?;
    println!("swept {} thresholds in {:.2?}", curve.len(), t0.elapsed());

    let oracle = oracle_upper_bound(&paired);
    let gem = gem_baseline(&paired)?;
    let base_curve = sweep_thresholds(&paired, &MaxProbScorer, 0.01, &ccfg)?;
    println!(
        "\nshallow acc {:.4} @ {:.2}G   deep acc {:.4} @ {:.2}G   oracle bound {:.4}   ensemble-avg {:.4} @ {:.2}G",
        paired.shallow.accuracy(),
        paired.shallow.flops_per_image / 1e9,
        paired.deep.accuracy(),
        paired.deep.flops_per_image / 1e9,
        oracle,
        gem.accuracy,
        gem.avg_flops / 1e9,
    );
    println!("\n  thr   confidence-net              max-prob baseline");
    println!("        acc     GFLOPs  deep%       acc     GFLOPs  deep%");
    for k in (0..=100).step_by(10) {
        let p = &curve.points()[k];
        let b = &base_curve.points()[k];
        println!(
            "  {:.2}  {:.4}  {:7.2}  {:5.1}      {:.4}  {:7.2}  {:5.1}",
            p.threshold,
            p.top1_accuracy,
            p.avg_flops_per_image / 1e9,
            p.deep_fraction * 100.0,
            b.top1_accuracy,
            b.avg_flops_per_image / 1e9,
            b.deep_fraction * 100.0,
        );
    }
    Ok(())
}
