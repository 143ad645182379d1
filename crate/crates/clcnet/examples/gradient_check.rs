//! Finite-difference validation of the hand-written reverse-mode gradients:
//! every parameter of a small model is perturbed both ways and compared
//! against the analytic gradient of the squared-error loss.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use clcnet::mapping::normalize_probs;
use clcnet::model::{ConfidenceModel, ModelConfig};
use clcnet::train::{gradient_check, LabeledSample};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() -> clcnet::Result<()> {
    let cfg = ModelConfig {
        m: 16,
        n_steps: 2,
        n_d: 4,
        n_a: 4,
        attn_width: 4,
        ..ModelConfig::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..8u64 {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut model = ConfidenceModel::init(&cfg, 100 + seed)?;
        let n = rng.gen_range(3..12);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..1.0)).collect();
        let sample = LabeledSample {
            id: format!("s{seed}"),
            probs: normalize_probs(&raw, false)?,
            label: if rng.gen_bool(0.5) { 1.0 } else { 0.0 },
            source_model: "example".into(),
        };
        let params = model.param_count();
        let err = gradient_check(&model, &sample, 1e-5)?;
        println!("model {seed}: {params} parameters, max relative error {err:.3e}");
        worst = worst.max(err);
    }
    println!("\nworst over all models: {worst:.3e} (bound 1e-4)");
    assert!(worst <= 1e-4);
    Ok(())
}
