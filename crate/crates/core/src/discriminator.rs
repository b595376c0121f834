//! Markovian patch discriminator over `(L, ab)` pairs.

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colourspace::{AbChannels, LChannel, AB_GAMUT_EXTENT};
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, join, BatchNorm2d, Conv2d, LeakyRelu, Mode, Parameterized, Real, SlotKind, SlotMut,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub kernel: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 3,
            widths: [64, 128, 256, 512],
            kernel: 4,
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.windows(2).any(|w| w[0] >= w[1]) || self.widths[0] == 0 {
            return Err(Error::Config(format!("discriminator widths {:?} must be strictly increasing", self.widths)));
        }
        if self.kernel < 3 {
            return Err(Error::Config(format!("discriminator kernel {} must be at least 3", self.kernel)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("discriminator needs input channels".into()));
        }
        Ok(())
    }

    /// Logit map side for a square input, or `None` if the stack collapses.
    pub fn output_side(&self, side: usize) -> Option<usize> {
        let mut s = side as isize;
        for stride in [2, 2, 2, 1, 1] {
            s = (s + 2 - self.kernel as isize) / stride + 1;
            if s < 1 {
                return None;
            }
        }
        Some(s as usize)
    }
}

#[derive(Debug, Clone)]
struct Layer<T: Real> {
    conv: Conv2d<T>,
    norm: Option<BatchNorm2d<T>>,
    act: Option<LeakyRelu<T>>,
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Real = f32> {
    pub cfg: DiscriminatorConfig,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.kernel;
        let w = cfg.widths;
        let plan = [
            (cfg.in_channels, w[0], 2, false, true),
            (w[0], w[1], 2, true, true),
            (w[1], w[2], 2, true, true),
            (w[2], w[3], 1, true, true),
            (w[3], 1, 1, false, false),
        ];
        let layers = plan
            .iter()
            .map(|&(cin, cout, stride, norm, act)| Layer {
                conv: Conv2d::with_std(cin, cout, k, stride, 1, !norm, 0.02, &mut rng),
                norm: norm.then(|| BatchNorm2d::new(cout)),
                act: act.then(|| LeakyRelu::new(cfg.leaky_slope)),
            })
            .collect();
        Ok(Discriminator { cfg, layers })
    }

    /// `(N, 3, S, S)` pairs to `(N, 1, s, s)` raw logits.
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels || h != w {
            return Err(Error::shape(format!(
                "discriminator expects {}xSxS input, got {c}x{h}x{w}",
                self.cfg.in_channels
            )));
        }
        if self.cfg.output_side(h).is_none() {
            return Err(Error::shape(format!("input side {h} too small for the patch discriminator")));
        }
        let mut y = x.clone();
        for layer in &mut self.layers {
            y = layer.conv.forward(&y, mode);
            if let Some(norm) = &mut layer.norm {
                y = norm.forward(&y, mode);
            }
            if let Some(act) = &mut layer.act {
                y = act.forward(y, mode);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            if let Some(act) = &mut layer.act {
                g = act.backward(g);
            }
            if let Some(norm) = &mut layer.norm {
                g = norm.backward(&g);
            }
            g = layer.conv.backward(&g);
        }
        g
    }

    /// Eval-mode logits for one pair. `l` is in `[0, 100]`, `ab` in ab units.
    pub fn discriminate(&mut self, l: &LChannel, ab: &AbChannels) -> Result<Array2<f32>> {
        let l4 = l.0.mapv(|v| T::lit(v as f64 / 100.0)).insert_axis(Axis(0)).insert_axis(Axis(0));
        let ab4 = ab.0.mapv(|v| T::lit(v as f64)).insert_axis(Axis(0));
        let x = pair_input(&l4, &ab4)?;
        let out = self.forward(&x, Mode::Eval)?;
        Ok(out.index_axis(Axis(0), 0).index_axis(Axis(0), 0).mapv(|v| v.as_f64() as f32))
    }
}

impl<T: Real> Parameterized<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            layer.conv.visit(&join(&p, "conv"), f);
            if let Some(norm) = &layer.norm {
                norm.visit(&join(&p, "norm"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            layer.conv.visit_mut(&join(&p, "conv"), f);
            if let Some(norm) = &mut layer.norm {
                norm.visit_mut(&join(&p, "norm"), f);
            }
        }
    }
}

/// Stacks normalised luminance `(N, 1, S, S)` with ab `(N, 2, S, S)` scaled
/// by the gamut extent.
pub fn pair_input<T: Real>(l: &Array4<T>, ab: &Array4<T>) -> Result<Array4<T>> {
    let (ln, lc, lh, lw) = l.dim();
    let (an, ac, ah, aw) = ab.dim();
    if lc != 1 || ac != 2 || (ln, lh, lw) != (an, ah, aw) {
        return Err(Error::shape(format!(
            "luminance {:?} and ab {:?} do not pair",
            l.dim(),
            ab.dim()
        )));
    }
    let scale = T::lit(1.0 / AB_GAMUT_EXTENT as f64);
    Ok(concat_channels(l, &ab.mapv(|v| v * scale)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_side_arithmetic() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.output_side(56), Some(5));
        assert_eq!(cfg.output_side(24), Some(1));
        assert_eq!(cfg.output_side(16), None);
    }

    #[test]
    fn validation() {
        let mut cfg = DiscriminatorConfig {
            widths: [64, 64, 128, 256],
            ..DiscriminatorConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.widths = [8, 16, 32, 64];
        cfg.kernel = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pair_shape_mismatch() {
        let l = Array4::<f32>::zeros((1, 1, 8, 8));
        let ab = Array4::<f32>::zeros((1, 2, 8, 6));
        assert!(pair_input(&l, &ab).is_err());
    }
}
