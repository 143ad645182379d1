//! Train, persist, reload: the weights file is versioned JSON and reloads
//! bit-exactly, so a saved model scores identically forever.
//!
//! ```bash
//! cargo run --release --example train_and_save
//! ```

use clcnet::io::{load_weights, save_weights, Provenance};
use clcnet::model::{ConfidenceModel, ModelConfig};
use clcnet::synth::{synth_generate, SynthConfig};
use clcnet::train::{build_training_set, split_by_id, train, TrainConfig};

fn main() -> clcnet::Result<()> {
    let synth = SynthConfig {
        n_samples: 3_000,
        seed: 21,
        ..SynthConfig::default()
    };
    let (shallow, _deep) = synth_generate(&synth)?;
    let samples = build_training_set(&shallow)?;
    let (train_set, val_set) = split_by_id(&samples, 0.8, 21)?;

    let cfg = ModelConfig {
        m: 32,
        n_d: 8,
        n_a: 8,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        max_epochs: 6,
        patience: 2,
        seed: 21,
        ..TrainConfig::default()
    };
    let outcome = train(
        &train_set,
        &val_set,
        &tcfg,
        ConfidenceModel::init(&cfg, 21)?,
    )?;
    println!(
        "trained {} epochs, best val MSE {:.4}",
        outcome.history.len(),
        outcome.best_val_mse
    );

    let dir = std::env::temp_dir().join("clcnet-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("weights.json");
    save_weights(
        &outcome.model,
        &Provenance {
            seed: 21,
            source_datasets: vec!["synthetic shallow run".into()],
            fold: None,
        },
        &path,
    )?;
    println!("saved {}", path.display());

    let (reloaded, provenance) = load_weights(&path)?;
    println!(
        "reloaded (seed {}, {} sources)",
        provenance.seed,
        provenance.source_datasets.len()
    );
    for sample in val_set.iter().take(50) {
        let a = outcome.model.confidence(&sample.probs)?;
        let b = reloaded.confidence(&sample.probs)?;
        assert_eq!(a.to_bits(), b.to_bits(), "reload must be bit-exact");
    }
    println!("50 validation scores identical to the last bit");
    Ok(())
}
