use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{Parameterized, Real, SlotMut};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: BTreeMap<String, ArrayD<T>>,
    pub second: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl Parameterized<T>) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(c.learning_rate / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let first = &mut self.first;
        let second = &mut self.second;
        model.visit_mut("", &mut |name, slot| {
            let SlotMut::Param(p) = slot else { return };
            let m = first
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = second
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Param, SlotKind};

    struct Quad(Param<f64>);

    impl Parameterized<f64> for Quad {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<f64>)) {
            f(&join(prefix, "w"), SlotKind::Param, &self.0.value);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, f64>)) {
            f(&join(prefix, "w"), SlotMut::Param(&mut self.0));
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quad(Param::filled(&[2], 1.0));
        q.0.grad[[0]] = 3.0;
        q.0.grad[[1]] = -0.5;
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        adam.step(&mut q);
        assert!((q.0.value[[0]] - 0.9).abs() < 1e-6);
        assert!((q.0.value[[1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut q = Quad(Param::filled(&[1], 5.0));
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            q.zero_grad();
            q.0.grad[[0]] = 2.0 * (q.0.value[[0]] - 1.5);
            adam.step(&mut q);
        }
        assert!((q.0.value[[0]] - 1.5).abs() < 1e-2);
    }
}
