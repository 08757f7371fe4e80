//! Softmax cross-entropy against hard labels or target distributions.

use num_traits::Float;

use crate::error::{Error, Result};

/// Tolerance on `sum(pmf) == 1`.
pub const PMF_TOLERANCE: f64 = 1e-5;

pub(crate) fn check_pmf(pmf: &[f32]) -> Result<()> {
    let sum: f64 = pmf.iter().map(|&p| p as f64).sum();
    if pmf.iter().any(|&p| !p.is_finite() || p < 0.0) || (sum - 1.0).abs() > PMF_TOLERANCE {
        return Err(Error::Data(format!("target pmf is not normalized (sum {sum})")));
    }
    Ok(())
}

fn log_softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// `-sum_k p_k log softmax(z)_k`: the KL divergence to the target up to its entropy.
pub fn loss_distributional(logits: &[f32], target_pmf: &[f32]) -> Result<f32> {
    if logits.len() != target_pmf.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: target_pmf.len(),
        });
    }
    check_pmf(target_pmf)?;
    let logp = log_softmax(logits);
    let loss: f32 = -target_pmf.iter().zip(&logp).map(|(p, l)| p * l).sum::<f32>();
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(loss)
}

pub fn cross_entropy(logits: &[f32], label: usize) -> Result<f32> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)[label])
}

/// Mean loss over a batch of `N x K` logits and targets, and its gradient.
pub(crate) fn batch_loss_grad<T: Float>(logits: &[T], targets: &[T], classes: usize) -> (T, Vec<T>) {
    let n = logits.len() / classes;
    let scale = T::one() / T::from(n).unwrap();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for ((z, p), g) in logits
        .chunks(classes)
        .zip(targets.chunks(classes))
        .zip(grad.chunks_mut(classes))
    {
        let logp = log_softmax(z);
        for k in 0..classes {
            loss = loss - p[k] * logp[k];
            g[k] = (logp[k].exp() - p[k]) * scale;
        }
    }
    (loss * scale, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax(z: &[f32]) -> Vec<f32> {
        let e: Vec<f64> = z.iter().map(|&v| (v as f64).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| (v / s) as f32).collect()
    }

    #[test]
    fn self_target_gives_entropy() {
        let z = [0.3f32, -1.0, 2.0];
        let p = softmax(&z);
        let entropy: f32 = -p.iter().map(|q| q * q.ln()).sum::<f32>();
        assert_relative_eq!(loss_distributional(&z, &p).unwrap(), entropy, max_relative = 1e-5);
    }

    #[test]
    fn one_hot_is_cross_entropy() {
        let z = [0.3f32, -1.0, 2.0];
        let l = loss_distributional(&z, &[0.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(l, cross_entropy(&z, 1).unwrap(), max_relative = 1e-6);
    }

    #[test]
    fn random_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f32> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let raw: Vec<f32> = (0..10).map(|_| rng.gen()).collect();
        let s: f32 = raw.iter().sum();
        let p: Vec<f32> = raw.iter().map(|v| v / s).collect();
        let denom: f64 = z.iter().map(|&v| (v as f64).exp()).sum();
        let oracle: f64 = -p
            .iter()
            .zip(&z)
            .map(|(&q, &v)| q as f64 * ((v as f64).exp() / denom).ln())
            .sum::<f64>();
        assert_relative_eq!(loss_distributional(&z, &p).unwrap() as f64, oracle, max_relative = 1e-5);
    }

    #[test]
    fn unnormalized_target_rejected() {
        assert!(matches!(loss_distributional(&[0.0, 0.0], &[0.5, 0.6]), Err(Error::Data(_))));
        assert!(cross_entropy(&[0.0], 3).is_err());
    }

    #[test]
    fn batch_gradient_is_softmax_minus_target() {
        let z = [1.0f64, 2.0, 0.5, -1.0, 0.0, 3.0];
        let t = [0.0, 1.0, 0.0, 0.2, 0.3, 0.5];
        let (loss, g) = batch_loss_grad(&z, &t, 3);
        let h = 1e-6;
        for i in 0..6 {
            let mut zp = z;
            zp[i] += h;
            let mut zm = z;
            zm[i] -= h;
            let fd = (batch_loss_grad(&zp, &t, 3).0 - batch_loss_grad(&zm, &t, 3).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
        assert!(loss > 0.0);
    }
}
