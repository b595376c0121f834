use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use super::{join, Mode, Param, Parameterized, Real, SlotKind, SlotMut};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    cache: Option<(Array4<T>, Array1<T>)>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch norm channel mismatch");
        let eps = T::lit(BN_EPS);
        let mut out = Array4::<T>::zeros(x.raw_dim());
        if mode == Mode::Eval {
            for ch in 0..c {
                let inv = T::one() / (self.running_var[[ch]] + eps).sqrt();
                let (g, b, m) = (self.gamma.value[[ch]], self.beta.value[[ch]], self.running_mean[[ch]]);
                let src = x.index_axis(Axis(1), ch);
                out.index_axis_mut(Axis(1), ch)
                    .zip_mut_with(&src, |o, &v| *o = (v - m) * inv * g + b);
            }
            self.cache = None;
            return out;
        }
        let count = (n * h * w) as f64;
        let mut xhat = Array4::<T>::zeros(x.raw_dim());
        let mut inv_std = Array1::<T>::zeros(c);
        for ch in 0..c {
            let src = x.index_axis(Axis(1), ch);
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / count;
            let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = T::lit(inv);
            let (mean_t, inv_t) = (T::lit(mean), T::lit(inv));
            let (g, b) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            xh.zip_mut_with(&src, |o, &v| *o = (v - mean_t) * inv_t);
            out.index_axis_mut(Axis(1), ch).zip_mut_with(&xh, |o, &v| *o = v * g + b);
            if mode == Mode::Train {
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let m = T::lit(BN_MOMENTUM);
                self.running_mean[[ch]] = (T::one() - m) * self.running_mean[[ch]] + m * mean_t;
                self.running_var[[ch]] = (T::one() - m) * self.running_var[[ch]] + m * T::lit(unbiased);
            }
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without a training forward");
        let (n, c, h, w) = grad.dim();
        let m = T::lit((n * h * w) as f64);
        let mut gx = Array4::<T>::zeros(grad.raw_dim());
        for ch in 0..c {
            let g = grad.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_g: T = g.sum();
            let sum_gx: T = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            self.beta.grad[[ch]] += sum_g;
            self.gamma.grad[[ch]] += sum_gx;
            let gamma = self.gamma.value[[ch]];
            let scale = gamma * inv_std[ch] / m;
            let mut dst = gx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dst)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gv, &xv| *o = scale * (m * gv - sum_g - xv * sum_gx));
        }
        gx
    }
}

impl<T: Real> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        f(&join(prefix, "gamma"), SlotKind::Param, &self.gamma.value);
        f(&join(prefix, "beta"), SlotKind::Param, &self.beta.value);
        f(&join(prefix, "running_mean"), SlotKind::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), SlotKind::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        f(&join(prefix, "gamma"), SlotMut::Param(&mut self.gamma));
        f(&join(prefix, "beta"), SlotMut::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), SlotMut::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), SlotMut::Buffer(&mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_standardised() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Array4::from_shape_fn((3, 2, 4, 4), |(a, b, c, d)| (a * 13 + b * 7 + c * 3 + d) as f64);
        let y = bn.forward(&x, Mode::Train);
        for ch in 0..2 {
            let v = y.index_axis(Axis(1), ch);
            let mean = v.mean().unwrap();
            let var = v.mapv(|t| (t - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean[[0]] > 0.0);
    }

    #[test]
    fn frozen_stats_leave_buffers() {
        let mut bn = BatchNorm2d::<f32>::new(1);
        let x = Array4::from_elem((1, 1, 2, 2), 3.0f32);
        bn.forward(&x, Mode::TrainFrozenStats);
        assert_eq!(bn.running_mean[[0]], 0.0);
        assert_eq!(bn.running_var[[0]], 1.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value[[1]] = 1.7;
        bn.beta.value[[0]] = -0.3;
        let x = Array4::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| ((a * 5 + b * 3 + c * 2 + d) as f64 * 0.61).sin());
        let weights = Array4::from_shape_fn(x.raw_dim(), |(a, b, c, d)| ((a + b + c * d) as f64 * 0.3).cos());
        let loss = |bn: &mut BatchNorm2d<f64>, x: &Array4<f64>| (bn.forward(x, Mode::TrainFrozenStats) * &weights).sum();
        bn.forward(&x, Mode::TrainFrozenStats);
        let gx = bn.backward(&weights);
        let h = 1e-5;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 1], [0, 1, 1, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h);
            assert!((num - gx[idx]).abs() < 1e-6, "{num} vs {}", gx[idx]);
        }
    }
}
