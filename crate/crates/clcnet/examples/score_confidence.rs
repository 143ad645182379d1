//! Train a small confidence model and score the motivating pair: two results
//! with the same top probability but very different runner-up mass. The
//! max-probability baseline cannot tell them apart; a trained model gives
//! the concentrated-runner-up pattern a lower confidence.
//!
//! ```bash
//! cargo run --release --example score_confidence
//! ```

use clcnet::cascade::maxprob_confidence;
use clcnet::mapping::ProbVector;
use clcnet::model::{ConfidenceModel, ModelConfig};
use clcnet::synth::{synth_generate, SynthConfig};
use clcnet::train::{build_retrain_set, split_by_id, train, TrainConfig};

fn main() -> clcnet::Result<()> {
    let synth = SynthConfig {
        n_samples: 6_000,
        confound_fraction: 0.4,
        seed: 11,
        ..SynthConfig::default()
    };
    let (shallow, deep) = synth_generate(&synth)?;
    let samples = build_retrain_set(&shallow, &deep)?;
    let (train_set, val_set) = split_by_id(&samples, 0.8, 11)?;

    let cfg = ModelConfig {
        m: 48,
        n_d: 8,
        n_a: 8,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        max_epochs: 12,
        patience: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    println!("training on {} samples...", train_set.len());
    let outcome = train(
        &train_set,
        &val_set,
        &tcfg,
        ConfidenceModel::init(&cfg, 11)?,
    )?;
    println!(
        "best val MSE {:.4} at epoch {}",
        outcome.best_val_mse, outcome.best_epoch
    );
    let model = outcome.model;

    let spread = ProbVector::new(vec![
        0.6, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.03, 0.02,
    ])?;
    let concentrated = ProbVector::new(vec![
        0.6, 0.37, 0.003, 0.003, 0.003, 0.003, 0.003, 0.003, 0.006, 0.006,
    ])?;

    let conf_spread = model.confidence(&spread)?;
    let conf_conc = model.confidence(&concentrated)?;
    println!("\n                         spread tail   concentrated runner-up");
    println!(
        "max-probability baseline    {:.4}         {:.4}   (identical: blind)",
        maxprob_confidence(&spread),
        maxprob_confidence(&concentrated)
    );
    println!("trained confidence          {conf_spread:.4}         {conf_conc:.4}");
    assert!(
        conf_spread > conf_conc,
        "the concentrated runner-up should score lower"
    );
    println!("\nthe trained model flags the likely-confused result; the baseline cannot");
    Ok(())
}
