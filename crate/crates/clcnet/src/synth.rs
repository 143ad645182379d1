//! Synthetic paired-classifier generator: stands in for real validation-run
//! records so the whole pipeline can be exercised at desk scale.
//!
//! Correctness events for the two models are coupled through a shared latent
//! difficulty (Gaussian copula), so the shallow-correct/deep-wrong region is
//! non-empty whenever the correlation is below one. Probability vectors are
//! sampled from a concentration-parameterized simplex distribution centered
//! on the predicted class, with the top-1 margin coupled to correctness so
//! that confidence is learnable.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ModelRunRecords, RunRecord};
use crate::mapping::{normalize_probs, ProbVector};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_samples: usize,
    /// Target top-1 accuracy of the shallow model.
    pub shallow_skill: f64,
    /// Target top-1 accuracy of the deep model.
    pub deep_skill: f64,
    /// Shared-difficulty weight in [0, 1]; below 1 the two models disagree
    /// on some samples in both directions.
    pub correlation: f64,
    /// Peakedness of the generated probability vectors.
    pub concentration: f64,
    /// Strength of the margin-correctness coupling.
    pub margin_coupling: f64,
    /// Fraction of wrong predictions rewritten to carry a large runner-up
    /// mass (the high-top-probability-but-wrong pattern).
    pub confound_fraction: f64,
    pub seed: u64,
    pub shallow_name: String,
    pub shallow_flops: f64,
    pub deep_name: String,
    pub deep_flops: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_samples: 20_000,
            shallow_skill: 0.75,
            deep_skill: 0.85,
            correlation: 0.5,
            concentration: 2.0,
            margin_coupling: 1.0,
            confound_fraction: 0.0,
            seed: 0,
            shallow_name: "synth-shallow".into(),
            shallow_flops: 1e9,
            deep_name: "synth-deep".into(),
            deep_flops: 5e9,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("need at least 1 sample".into()));
        }
        if !(self.shallow_skill > 0.0
            && self.shallow_skill <= self.deep_skill
            && self.deep_skill < 1.0)
        {
            return Err(Error::Config(format!(
                "skills must satisfy 0 < shallow ({}) <= deep ({}) < 1",
                self.shallow_skill, self.deep_skill
            )));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::Config(format!(
                "correlation must be in [0, 1], got {}",
                self.correlation
            )));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::Config(format!(
                "concentration must be positive, got {}",
                self.concentration
            )));
        }
        if !(0.0..=1.0).contains(&self.confound_fraction) {
            return Err(Error::Config(format!(
                "confound fraction must be in [0, 1], got {}",
                self.confound_fraction
            )));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller.
fn gauss(rng: &mut StdRng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Inverse standard-normal CDF (Acklam's rational approximation,
/// |relative error| < 1.2e-9 on (0, 1)).
pub(crate) fn probit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

struct DrawnSample {
    correct: bool,
    probs: ProbVector,
}

fn draw_model_sample(
    rng: &mut StdRng,
    cfg: &SynthConfig,
    label: usize,
    z_shared: f64,
    skill: f64,
) -> DrawnSample {
    let rho = cfg.correlation;
    let z = rho.sqrt() * z_shared + (1.0 - rho).sqrt() * gauss(rng);
    let threshold = probit(skill);
    let correct = z < threshold;
    let easiness = threshold - z;
    let pred = if correct {
        label
    } else {
        let mut c = rng.gen_range(0..cfg.n_classes - 1);
        if c >= label {
            c += 1;
        }
        c
    };
    if !correct && rng.gen::<f64>() < cfg.confound_fraction {
        // High top probability with a large runner-up on the true class:
        // the pattern a max-probability confidence cannot flag.
        let top = rng.gen_range(0.52..0.68);
        let runner = (1.0 - top) * rng.gen_range(0.90..0.985);
        let rest = 1.0 - top - runner;
        let mut values = vec![rest / (cfg.n_classes - 2) as f64; cfg.n_classes];
        values[pred] = top;
        values[label] = runner;
        let probs = normalize_probs(&values, false).expect("constructed probs are valid");
        return DrawnSample { correct, probs };
    }
    // Logit sampling: competitors are standard normal, the predicted class
    // sits a positive margin above the best competitor, and the margin grows
    // with easiness (lognormal jitter keeps it positive).
    let mut logits = vec![0.0; cfg.n_classes];
    let mut best_other = f64::NEG_INFINITY;
    for (j, l) in logits.iter_mut().enumerate() {
        if j == pred {
            continue;
        }
        *l = gauss(rng);
        if *l > best_other {
            best_other = *l;
        }
    }
    let gap = cfg.concentration
        * (0.12 + cfg.margin_coupling * 0.5 * easiness.max(0.0))
        * (0.25 * gauss(rng)).exp();
    logits[pred] = best_other + gap;
    let probs = normalize_probs(&logits, true).expect("softmax output is valid");
    DrawnSample { correct, probs }
}

/// Generates paired shallow/deep run records. Deterministic per seed; the
/// empirical accuracies concentrate on the skill targets.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(ModelRunRecords, ModelRunRecords)> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut shallow = Vec::with_capacity(cfg.n_samples);
    let mut deep = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let id = format!("img{i:06}");
        let label = rng.gen_range(0..cfg.n_classes);
        let z_shared = gauss(&mut rng);
        let s = draw_model_sample(&mut rng, cfg, label, z_shared, cfg.shallow_skill);
        let d = draw_model_sample(&mut rng, cfg, label, z_shared, cfg.deep_skill);
        debug_assert_eq!(s.correct, s.probs.argmax() == label);
        debug_assert_eq!(d.correct, d.probs.argmax() == label);
        shallow.push(RunRecord {
            id: id.clone(),
            label,
            probs: s.probs,
        });
        deep.push(RunRecord {
            id,
            label,
            probs: d.probs,
        });
    }
    Ok((
        ModelRunRecords {
            name: cfg.shallow_name.clone(),
            flops_per_image: cfg.shallow_flops,
            records: shallow,
        },
        ModelRunRecords {
            name: cfg.deep_name.clone(),
            flops_per_image: cfg.deep_flops,
            records: deep,
        },
    ))
}

/// Constructed pairs with bitwise-equal top probabilities: the first member
/// spreads the remaining mass thinly, the second concentrates it on the
/// runner-up. A max-probability confidence cannot order such a pair.
pub fn confounder_pairs(
    n_classes: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(ProbVector, ProbVector)>> {
    if n_classes < 3 {
        return Err(Error::Config(
            "confounder pairs need at least 3 classes".into(),
        ));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let top = rng.gen_range(0.55..0.65);
        let rest = 1.0 - top;

        let benign_second = rest * rng.gen_range(0.25..0.45);
        let mut benign = vec![0.0; n_classes];
        benign[0] = top;
        benign[1] = benign_second;
        let tail = rest - benign_second;
        let mut weights: Vec<f64> = (0..n_classes - 2)
            .map(|j| 0.6_f64.powi(j as i32) * (1.0 + 0.1 * rng.gen::<f64>()))
            .collect();
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }
        for (slot, w) in benign[2..].iter_mut().zip(&weights) {
            *slot = tail * w;
        }

        let conf_second = rest * rng.gen_range(0.92..0.985);
        let conf_tail = rest - conf_second;
        let mut confounded = vec![conf_tail / (n_classes - 2) as f64; n_classes];
        confounded[0] = top;
        confounded[1] = conf_second;

        pairs.push((ProbVector::new(benign)?, ProbVector::new(confounded)?));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{maxprob_confidence, oracle_upper_bound, PairedRunRecords};
    use crate::metrics::auroc;

    #[test]
    fn probit_reference_values() {
        assert!(probit(0.5).abs() < 1e-9);
        assert!((probit(0.975) - 1.959963984540054).abs() < 1e-7);
        assert!((probit(0.75) - 0.6744897501960817).abs() < 1e-7);
        assert!((probit(0.01) + probit(0.99)).abs() < 1e-7);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            n_samples: 50,
            ..SynthConfig::default()
        };
        let (s1, d1) = synth_generate(&cfg).unwrap();
        let (s2, d2) = synth_generate(&cfg).unwrap();
        for (a, b) in s1.records.iter().zip(&s2.records) {
            assert_eq!(a.probs.values(), b.probs.values());
        }
        for (a, b) in d1.records.iter().zip(&d2.records) {
            assert_eq!(a.probs.values(), b.probs.values());
        }
    }

    #[test]
    fn accuracies_match_skill_targets() {
        let cfg = SynthConfig {
            n_samples: 20_000,
            seed: 11,
            ..SynthConfig::default()
        };
        let (s, d) = synth_generate(&cfg).unwrap();
        assert!(
            (s.accuracy() - 0.75).abs() < 0.015,
            "shallow {}",
            s.accuracy()
        );
        assert!((d.accuracy() - 0.85).abs() < 0.015, "deep {}", d.accuracy());
    }

    #[test]
    fn partial_correlation_leaves_green_region() {
        let cfg = SynthConfig {
            n_samples: 5_000,
            correlation: 0.5,
            seed: 3,
            ..SynthConfig::default()
        };
        let (s, d) = synth_generate(&cfg).unwrap();
        let shallow_only = s
            .records
            .iter()
            .zip(&d.records)
            .filter(|(sr, dr)| sr.probs.argmax() == sr.label && dr.probs.argmax() != dr.label)
            .count();
        assert!(
            shallow_only > 0,
            "expected shallow-correct/deep-wrong samples"
        );
        let paired = PairedRunRecords::new(s, d).unwrap();
        assert!(oracle_upper_bound(&paired) > paired.deep.accuracy());
    }

    #[test]
    fn margin_carries_correctness_signal() {
        let cfg = SynthConfig {
            n_samples: 4_000,
            seed: 5,
            ..SynthConfig::default()
        };
        let (s, _) = synth_generate(&cfg).unwrap();
        let scored: Vec<(f64, bool)> = s
            .records
            .iter()
            .map(|r| (maxprob_confidence(&r.probs), r.probs.argmax() == r.label))
            .collect();
        let a = auroc(&scored).unwrap();
        assert!(a > 0.7, "max-prob auroc {a}");
    }

    #[test]
    fn confounded_pairs_tie_on_max_probability() {
        let pairs = confounder_pairs(10, 100, 9).unwrap();
        for (benign, confounded) in &pairs {
            assert_eq!(
                maxprob_confidence(benign).to_bits(),
                maxprob_confidence(confounded).to_bits()
            );
            // runner-up masses differ sharply
            let b2 = benign.values()[1];
            let c2 = confounded.values()[1];
            assert!(c2 > 2.0 * b2);
        }
    }

    #[test]
    fn confound_injection_produces_high_top_wrong_samples() {
        let cfg = SynthConfig {
            n_samples: 3_000,
            confound_fraction: 1.0,
            seed: 7,
            ..SynthConfig::default()
        };
        let (s, _) = synth_generate(&cfg).unwrap();
        let wrong_high_top = s
            .records
            .iter()
            .filter(|r| r.probs.argmax() != r.label && maxprob_confidence(&r.probs) > 0.5)
            .count();
        assert!(wrong_high_top > 500);
    }
}
