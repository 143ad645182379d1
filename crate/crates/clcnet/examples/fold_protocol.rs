//! The cross-validation protocol: each fold trains a fresh model on the
//! non-held-out part (with an inner train/validation split) and evaluates
//! the cascade on the held-out fold. Aggregates cover every sample exactly
//! once.
//!
//! ```bash
//! cargo run --release --example fold_protocol
//! ```

use clcnet::cascade::{CascadeConfig, PairedRunRecords};
use clcnet::model::ModelConfig;
use clcnet::synth::{synth_generate, SynthConfig};
use clcnet::train::{run_fold_protocol, FoldPlan, TrainConfig, TrainSource};

fn main() -> clcnet::Result<()> {
    let synth = SynthConfig {
        n_samples: 5_000,
        seed: 31,
        ..SynthConfig::default()
    };
    let (shallow, deep) = synth_generate(&synth)?;
    let paired = PairedRunRecords::new(shallow, deep)?;

    let plan = FoldPlan::new(5, 0.8, 31)?;
    let tcfg = TrainConfig {
        max_epochs: 5,
        patience: 2,
        seed: 31,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig {
        m: 32,
        n_d: 8,
        n_a: 8,
        ..ModelConfig::default()
    };
    let ccfg = CascadeConfig {
        threshold: 0.5,
        ..CascadeConfig::default()
    };
    let report = run_fold_protocol(&paired, &plan, &tcfg, &ccfg, TrainSource::Both, &mcfg, 0.01)?;

    for f in &report.folds {
        println!(
            "fold {}: eval {:>4} ids (train/val {}/{} samples)  acc {:.4}  {:.2}G  deep {:>5.1}%  auroc {:.3}",
            f.fold,
            f.n_eval,
            f.n_train_samples,
            f.n_val_samples,
            f.point.top1_accuracy,
            f.point.avg_flops_per_image / 1e9,
            f.point.deep_fraction * 100.0,
            f.auroc.unwrap_or(f64::NAN),
        );
    }
    println!(
        "\naggregate @ threshold {:.2}: acc {:.4} at {:.2}G (shallow {:.4}, deep {:.4}, ceiling {:.4})",
        report.aggregate.threshold,
        report.aggregate.top1_accuracy,
        report.aggregate.avg_flops_per_image / 1e9,
        report.shallow_accuracy,
        report.deep_accuracy,
        report.oracle_upper_bound,
    );
    Ok(())
}
