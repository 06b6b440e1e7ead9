//! Softmax head and the two training losses.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// `-ln p[target]`, clamping the probability at 1e-12.
pub fn cross_entropy(probabilities: &[f64], target: usize) -> f64 {
    let p = probabilities[target];
    if p < PROB_FLOOR {
        log::warn!("cross_entropy: target probability {p} clamped to {PROB_FLOOR}");
    }
    -p.max(PROB_FLOOR).ln()
}

/// Cross entropy plus the polynomial correction `epsilon * (1 - p[target])`.
pub fn poly_loss(probabilities: &[f64], target: usize, epsilon: f64) -> f64 {
    cross_entropy(probabilities, target) + epsilon * (1.0 - probabilities[target])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    PolyLoss,
}

/// Mean loss over a batch of logits plus the gradient with respect to the
/// logits (softmax folded in analytically).
///
/// For one example with probabilities `p` and one-hot target `y`:
/// cross entropy gives `dL/dz = p - y`; the poly term adds
/// `epsilon * p_t * (p - onehot_t)` where `t` is the target index.
pub fn batch_loss_and_grad(
    logits: &Tensor,
    targets: &[usize],
    kind: LossKind,
    epsilon: f64,
) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2_flat()?;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows but {} targets",
            targets.len()
        )));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = 0.0;
    for b in 0..n {
        let row = &logits.data()[b * k..(b + 1) * k];
        let p = softmax(row);
        let t = targets[b];
        if t >= k {
            return Err(Error::Domain(format!("target {t} out of range for {k} classes")));
        }
        total += match kind {
            LossKind::CrossEntropy => cross_entropy(&p, t),
            LossKind::PolyLoss => poly_loss(&p, t, epsilon),
        };
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        for j in 0..k {
            let y = if j == t { 1.0 } else { 0.0 };
            g[j] = (p[j] - y) / n as f64;
            if kind == LossKind::PolyLoss {
                g[j] += epsilon * p[t] * (p[j] - y) / n as f64;
            }
        }
    }
    Ok((total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry_and_stability() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let huge = softmax(&[1000.0, 0.0]);
        assert!(huge[0] > 0.999_999 && huge[1] < 1e-6);
        assert!(huge.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-20.0..20.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_argmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let shifted: Vec<f64> = logits.iter().map(|v| v + 123.456).collect();
            let am = |p: &[f64]| {
                p.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(am(&softmax(&logits)), am(&softmax(&shifted)));
        }
    }

    #[test]
    fn cross_entropy_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy(&[0.5, 0.5], 1) - ln2).abs() < 1e-12);
        assert_eq!(cross_entropy(&[0.0, 1.0], 1), 0.0);
        // clamped, not infinite
        assert!(cross_entropy(&[1.0, 0.0], 1).is_finite());
    }

    #[test]
    fn cross_entropy_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(0.0..1.0);
            assert!(cross_entropy(&[1.0 - a, a], 0) >= 0.0);
        }
    }

    #[test]
    fn poly_loss_reduces_to_cross_entropy_at_zero_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let a: f64 = rng.random_range(1e-6..1.0);
            let p = [1.0 - a, a];
            let t = rng.random_range(0..2usize);
            assert_eq!(poly_loss(&p, t, 0.0), cross_entropy(&p, t));
        }
    }

    #[test]
    fn poly_loss_worked_example() {
        let v = poly_loss(&[0.5, 0.5], 1, 2.5);
        assert!((v - (std::f64::consts::LN_2 + 1.25)).abs() < 1e-12);
        assert_eq!(poly_loss(&[0.0, 1.0], 1, 7.0), 0.0);
    }

    #[test]
    fn batch_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [LossKind::CrossEntropy, LossKind::PolyLoss] {
            let n = 3;
            let k = 2;
            let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let logits = Tensor::from_vec(&[n, k], data.clone()).unwrap();
            let targets = vec![0, 1, 1];
            let (_, grad) = batch_loss_and_grad(&logits, &targets, kind, 2.5).unwrap();
            let h = 1e-6;
            for i in 0..n * k {
                let mut plus = data.clone();
                plus[i] += h;
                let mut minus = data.clone();
                minus[i] -= h;
                let lp = batch_loss_and_grad(
                    &Tensor::from_vec(&[n, k], plus).unwrap(),
                    &targets,
                    kind,
                    2.5,
                )
                .unwrap()
                .0;
                let lm = batch_loss_and_grad(
                    &Tensor::from_vec(&[n, k], minus).unwrap(),
                    &targets,
                    kind,
                    2.5,
                )
                .unwrap()
                .0;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - grad.data()[i]).abs() < 1e-6,
                    "{kind:?} grad[{i}]: fd {fd} vs {}",
                    grad.data()[i]
                );
            }
        }
    }
}
