//! Objective terms. Scalar losses are returned as `f64`; the batch variants
//! also return the gradient with respect to their first argument.

use ndarray::{Array4, Zip};

use crate::colourspace::AbChannels;
use crate::error::{Error, Result};
use crate::gamut::ColourDistribution;
use crate::nn::Real;

/// Probabilities are clamped here before the log.
pub const LOG_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_gan: f64,
    pub w_l1: f64,
    pub w_cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_gan: 1.0,
            w_l1: 1.0,
            w_cl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_gan", self.w_gan), ("w_l1", self.w_l1), ("w_cl", self.w_cl)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Multinomial cross-entropy between `(H, W, Q)` fields, averaged over pixels.
pub fn quantization_loss(z_hat: &ColourDistribution, z: &ColourDistribution) -> Result<f64> {
    if z_hat.0.dim() != z.0.dim() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", z_hat.0.dim(), z.0.dim())));
    }
    let pixels = (z.height() * z.width()).max(1) as f64;
    let total: f64 = Zip::from(&z_hat.0)
        .and(&z.0)
        .fold(0.0, |acc, &p, &t| acc - t as f64 * (p as f64).max(LOG_CLAMP).ln());
    Ok(total / pixels)
}

/// Batch cross-entropy over `(N, Q, H, W)` probabilities. The gradient is
/// with respect to the probabilities.
pub fn quantization_loss_batch<T: Real>(probs: &Array4<T>, target: &Array4<T>) -> Result<(f64, Array4<T>)> {
    if probs.dim() != target.dim() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", probs.dim(), target.dim())));
    }
    let (n, _, h, w) = probs.dim();
    let count = (n * h * w).max(1) as f64;
    let mut total = 0.0;
    let mut grad = Array4::<T>::zeros(probs.raw_dim());
    Zip::from(&mut grad).and(probs).and(target).for_each(|g, &p, &t| {
        let (p, t) = (p.as_f64(), t.as_f64());
        if t != 0.0 {
            total -= t * p.max(LOG_CLAMP).ln();
            if p > LOG_CLAMP {
                *g = T::lit(-t / (p * count));
            }
        }
    });
    Ok((total / count, grad))
}

/// Mean absolute difference.
pub fn l1_term(pred: &AbChannels, gt: &AbChannels) -> Result<f64> {
    if pred.0.dim() != gt.0.dim() {
        return Err(Error::shape(format!("ab {:?} vs {:?}", pred.0.dim(), gt.0.dim())));
    }
    let n = pred.0.len().max(1) as f64;
    Ok(Zip::from(&pred.0).and(&gt.0).fold(0.0, |acc, &p, &g| acc + (p as f64 - g as f64).abs()) / n)
}

pub fn l1_batch<T: Real>(pred: &Array4<T>, gt: &Array4<T>) -> Result<(f64, Array4<T>)> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("l1: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Array4::<T>::zeros(pred.raw_dim());
    let step = T::lit(1.0 / n);
    Zip::from(&mut grad).and(pred).and(gt).for_each(|g, &p, &t| {
        let d = p - t;
        total += d.as_f64().abs();
        *g = if d > T::zero() {
            step
        } else if d < T::zero() {
            -step
        } else {
            T::zero()
        };
    });
    Ok((total / n, grad))
}

/// Mean squared difference.
pub fn mse_term(pred: &AbChannels, gt: &AbChannels) -> Result<f64> {
    if pred.0.dim() != gt.0.dim() {
        return Err(Error::shape(format!("ab {:?} vs {:?}", pred.0.dim(), gt.0.dim())));
    }
    let n = pred.0.len().max(1) as f64;
    Ok(Zip::from(&pred.0).and(&gt.0).fold(0.0, |acc, &p, &g| acc + (p as f64 - g as f64).powi(2)) / n)
}

pub fn mse_batch<T: Real>(pred: &Array4<T>, gt: &Array4<T>) -> Result<(f64, Array4<T>)> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("mse: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Array4::<T>::zeros(pred.raw_dim());
    let scale = T::lit(2.0 / n);
    Zip::from(&mut grad).and(pred).and(gt).for_each(|g, &p, &t| {
        let d = p - t;
        total += d.as_f64() * d.as_f64();
        *g = scale * d;
    });
    Ok((total / n, grad))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adversarial losses from raw logits: `(d_loss, g_loss)`, where d_loss is
/// binary cross-entropy with targets 1 (real) and 0 (fake) and g_loss is the
/// non-saturating generator loss.
pub fn gan_terms<T: Real>(real: &Array4<T>, fake: &Array4<T>) -> (f64, f64) {
    let mean = |a: &Array4<T>, f: &dyn Fn(f64) -> f64| a.iter().map(|v| f(v.as_f64())).sum::<f64>() / a.len().max(1) as f64;
    let d_loss = mean(real, &|x| softplus(-x)) + mean(fake, &softplus);
    let g_loss = mean(fake, &|x| softplus(-x));
    (d_loss, g_loss)
}

/// Gradients of d_loss with respect to the real and fake logits.
pub fn d_loss_grads<T: Real>(real: &Array4<T>, fake: &Array4<T>) -> (Array4<T>, Array4<T>) {
    let nr = real.len().max(1) as f64;
    let nf = fake.len().max(1) as f64;
    (
        real.mapv(|x| T::lit(-sigmoid(-x.as_f64()) / nr)),
        fake.mapv(|x| T::lit(sigmoid(x.as_f64()) / nf)),
    )
}

/// Gradient of g_loss with respect to the fake logits.
pub fn g_loss_grad<T: Real>(fake: &Array4<T>) -> Array4<T> {
    let n = fake.len().max(1) as f64;
    fake.mapv(|x| T::lit(-sigmoid(-x.as_f64()) / n))
}

/// Weighted sum of the generator terms. For the direct-ab variant pass the
/// mean squared error as `cl`.
pub fn generator_objective(g_loss: f64, l1: f64, cl: f64, w: &LossWeights) -> f64 {
    let term = |weight: f64, v: f64| if weight == 0.0 { 0.0 } else { weight * v };
    term(w.w_gan, g_loss) + term(w.w_l1, l1) + term(w.w_cl, cl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn objective_arithmetic() {
        let w = LossWeights::default();
        assert!((generator_objective(0.5, 0.2, 5.0, &w) - 5.7).abs() < 1e-12);
        let zero = LossWeights {
            w_gan: 0.0,
            w_l1: 0.0,
            w_cl: 0.0,
        };
        assert_eq!(generator_objective(0.5, 0.2, 5.0, &zero), 0.0);
        assert!(LossWeights { w_gan: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn shape_errors() {
        let a = ColourDistribution(Array3::zeros((2, 2, 3)));
        let b = ColourDistribution(Array3::zeros((2, 2, 4)));
        assert!(quantization_loss(&a, &b).is_err());
        assert!(l1_term(&AbChannels::zeros(2, 2), &AbChannels::zeros(2, 3)).is_err());
        assert!(mse_term(&AbChannels::zeros(2, 2), &AbChannels::zeros(3, 2)).is_err());
    }

    #[test]
    fn ab_terms_simple_cases() {
        let a = AbChannels(Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y * x) as f32));
        let b = AbChannels(a.0.mapv(|v| v + 1.0));
        assert_eq!(l1_term(&a, &a).unwrap(), 0.0);
        assert!((l1_term(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mse_term(&a, &a).unwrap(), 0.0);
    }
}
