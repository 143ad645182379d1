//! Sparsemax: Euclidean projection onto the probability simplex via the
//! sort-and-threshold closed form. Unlike softmax it can assign exact zeros,
//! which is what makes the feature masks sparse.

/// Projects `z` onto the probability simplex. Entries are >= 0 and sum to 1;
/// the support may be a strict subset of the coordinates.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    sparsemax_into(z, &mut out);
    out
}

/// In-place variant; writes the projection into `out`.
pub fn sparsemax_into(z: &[f64], out: &mut [f64]) {
    debug_assert_eq!(z.len(), out.len());
    let mut sorted: Vec<f64> = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cumsum = 0.0;
    let mut k = 0usize;
    let mut tau = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if v > candidate {
            k = i + 1;
            tau = candidate;
        }
    }
    debug_assert!(k >= 1);
    let _ = k;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - tau).max(0.0);
    }
}

/// Backward pass: given the projection `p` and upstream gradient `g`, the
/// Jacobian acts as identity minus the mean over the support, restricted to
/// the support.
pub fn sparsemax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    sparsemax_backward_into(p, g, &mut out);
    out
}

pub fn sparsemax_backward_into(p: &[f64], g: &[f64], out: &mut [f64]) {
    let mut support = 0usize;
    let mut sum = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        if pi > 0.0 {
            support += 1;
            sum += gi;
        }
    }
    if support == 0 {
        out.fill(0.0);
        return;
    }
    let mean = sum / support as f64;
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o = if pi > 0.0 { gi - mean } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Exhaustive-support oracle: for every nonempty support S, form the
    /// affine candidate and keep the feasible one closest to z.
    pub(crate) fn sparsemax_bruteforce(z: &[f64]) -> Vec<f64> {
        let n = z.len();
        assert!(n <= 16, "oracle is exponential");
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
        best.expect("some support is feasible").1
    }

    #[test]
    fn two_element_closed_form() {
        assert_eq!(sparsemax(&[2.0, 0.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn uniform_input_projects_to_uniform() {
        let p = sparsemax(&[3.7; 5]);
        for &v in &p {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let c: f64 = rng.gen_range(-10.0..10.0);
            let shifted: Vec<f64> = z.iter().map(|&v| v + c).collect();
            let a = sparsemax(&z);
            let b = sparsemax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matches_bruteforce_oracle() {
        let mut rng = StdRng::seed_from_u64(22);
        for _ in 0..200 {
            let n = rng.gen_range(2..=10);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let fast = sparsemax(&z);
            let slow = sparsemax_bruteforce(&z);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-10, "{fast:?} vs {slow:?} on {z:?}");
            }
        }
    }

    #[test]
    fn simplex_contract() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.gen_range(2..64);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p = sparsemax(&z);
            assert!(p.iter().all(|&v| v >= 0.0));
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(24);
        let h = 1e-6;
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = sparsemax(&z);
            let analytic = sparsemax_backward(&p, &g);
            for j in 0..n {
                let mut zp = z.clone();
                zp[j] += h;
                let mut zm = z.clone();
                zm[j] -= h;
                let lp: f64 = sparsemax(&zp).iter().zip(&g).map(|(a, b)| a * b).sum();
                let lm: f64 = sparsemax(&zm).iter().zip(&g).map(|(a, b)| a * b).sum();
                let numeric = (lp - lm) / (2.0 * h);
                // Skip points where the support changes inside the stencil.
                if p.iter().any(|&v| v.abs() < 1e-5) {
                    continue;
                }
                assert!(
                    (analytic[j] - numeric).abs() < 1e-6,
                    "dz[{j}]: analytic {} vs numeric {numeric}",
                    analytic[j]
                );
            }
        }
    }
}
