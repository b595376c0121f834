//! The U-shaped capsule generator.
//!
//! ```text
//! L (1 @ s) ─ preprocess ─ b @ s/2 ─┬─ pool ─────────────────────────────┐ skip b @ s/4
//!                                   DBD1 ─ 2b @ s/4 ───────────────────┐ │
//!                                   DBD2 ─ 4b @ s/8 ─────────────────┐ │ │
//!                                   DBD3 ─ 8b @ s/16                 │ │ │
//!                                   caps down ─ route ─ caps up      │ │ │
//!                                          4b @ s/8 ─ DBU1 (x2) ─────┘ │ │
//!                                                   4b @ s/4 ─ DBU2 ───┘ │
//!                                                   2b @ s/4 ─ DBU3 ─────┘
//!                                                    b @ s/4 ─ head
//! ```
//!
//! With `s = 224` and `b = 64` the bottleneck is 512 @ 14 and the head
//! emits 313 @ 56 (Q) or 2 @ 56 (AB).

use ndarray::{Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::{grid_tags, CapsuleTag, PrimaryCapsDown, PrimaryCapsUp, Router, RoutingConfig};
use crate::colourspace::{AbChannels, LChannel, AB_GAMUT_EXTENT};
use crate::error::{Error, Result};
use crate::gamut::ColourDistribution;
use crate::nn::{
    concat_channels, join, split_channels, BatchNorm2d, Conv2d, Dropout, MaxPool2, Mode, Parameterized, Real, Relu,
    SlotKind, SlotMut, Upsample2,
};

/// Standard deviation of the initial capsule transforms.
pub const TRANSFORM_INIT_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Per-pixel distribution over the palette.
    Q,
    /// Direct ab regression.
    Ab,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub input_side: usize,
    pub base_channels: usize,
    pub q_bins: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub routing: RoutingConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            variant: Variant::Q,
            input_side: 224,
            base_channels: 64,
            q_bins: 313,
            dropout_p: 0.5,
            seed: 0,
            routing: RoutingConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || !self.input_side.is_multiple_of(16) {
            return Err(Error::Config(format!("input_side {} must be a positive multiple of 16", self.input_side)));
        }
        if self.q_bins == 0 {
            return Err(Error::Config("Q must be positive".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        self.routing.validate()
    }

    pub fn output_side(&self) -> usize {
        self.input_side / 4
    }

    pub fn head_channels(&self) -> usize {
        match self.variant {
            Variant::Q => self.q_bins,
            Variant::Ab => 2,
        }
    }
}

/// One row of the shape table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: &'static str,
    pub channels: usize,
    pub side: usize,
}

/// Shape table for a configuration. Capsule stages report the capsule count
/// as `channels` and the capsule dimension as `side`.
pub fn stage_plan(cfg: &GeneratorConfig) -> Vec<Stage> {
    let (s, b) = (cfg.input_side, cfg.base_channels);
    let r = cfg.routing;
    vec![
        Stage { name: "preprocess", channels: b, side: s / 2 },
        Stage { name: "dbd1", channels: 2 * b, side: s / 4 },
        Stage { name: "dbd2", channels: 4 * b, side: s / 8 },
        Stage { name: "dbd3", channels: 8 * b, side: s / 16 },
        Stage { name: "caps_down", channels: r.n_types_in * (s / 16) * (s / 16), side: r.d_in },
        Stage { name: "route", channels: r.n_out, side: r.d_out },
        Stage { name: "caps_up", channels: 4 * b, side: s / 8 },
        Stage { name: "dbu1", channels: 4 * b, side: s / 4 },
        Stage { name: "dbu2", channels: 2 * b, side: s / 4 },
        Stage { name: "dbu3", channels: b, side: s / 4 },
        Stage { name: "head", channels: cfg.head_channels(), side: s / 4 },
    ]
}

/// conv (no bias) -> batch norm -> ReLU
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T: Real> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm2d<T>,
    relu: Relu<T>,
}

impl<T: Real> ConvBnRelu<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(cin, cout, kernel, stride, pad, false, rng),
            norm: BatchNorm2d::new(cout),
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let y = self.conv.forward(x, mode);
        let y = self.norm.forward(&y, mode);
        self.relu.forward(y, mode)
    }

    pub fn backward(&mut self, g: Array4<T>) -> Array4<T> {
        let g = self.relu.backward(g);
        let g = self.norm.backward(&g);
        self.conv.backward(&g)
    }
}

impl<T: Real> Parameterized<T> for ConvBnRelu<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// 7x7 stride-2 stem; the skip output is a 2x2 max pool of its features.
#[derive(Debug, Clone)]
pub struct PreprocessBlock<T: Real> {
    pub stem: ConvBnRelu<T>,
    pool: MaxPool2,
}

impl<T: Real> PreprocessBlock<T> {
    pub fn new(out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        PreprocessBlock {
            stem: ConvBnRelu::new(1, out_channels, 7, 2, 3, rng),
            pool: MaxPool2::new(),
        }
    }

    /// Returns `(features, skip)`.
    pub fn forward(&mut self, l: &Array4<T>, mode: Mode) -> Result<(Array4<T>, Array4<T>)> {
        let (_, c, h, w) = l.dim();
        if c != 1 || h != w || h % 4 != 0 {
            return Err(Error::shape(format!("preprocess expects 1xSxS with S divisible by 4, got {c}x{h}x{w}")));
        }
        let f = self.stem.forward(l, mode);
        let skip = self.pool.forward(&f, mode);
        Ok((f, skip))
    }

    pub fn backward(&mut self, g_features: Array4<T>, g_skip: &Array4<T>) -> Array4<T> {
        let g = g_features + self.pool.backward(g_skip);
        self.stem.backward(g)
    }
}

impl<T: Real> Parameterized<T> for PreprocessBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
    }
}

/// Two stride-1 3x3 conv/BN/ReLU layers doubling the channels, then a 2x2
/// max pool. The pooled output doubles as the skip tensor.
#[derive(Debug, Clone)]
pub struct DoubleBlockDown<T: Real> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
    pool: MaxPool2,
}

impl<T: Real> DoubleBlockDown<T> {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        DoubleBlockDown {
            first: ConvBnRelu::new(in_channels, 2 * in_channels, 3, 1, 1, rng),
            second: ConvBnRelu::new(2 * in_channels, 2 * in_channels, 3, 1, 1, rng),
            pool: MaxPool2::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let (_, c, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("double block down needs even sides, got {h}x{w}")));
        }
        if c != self.first.conv.in_channels() {
            return Err(Error::shape(format!("expected {} channels, got {c}", self.first.conv.in_channels())));
        }
        let y = self.first.forward(x, mode);
        let y = self.second.forward(&y, mode);
        Ok(self.pool.forward(&y, mode))
    }

    /// `g` is the summed gradient from the next stage and the skip consumer.
    pub fn backward(&mut self, g: &Array4<T>) -> Array4<T> {
        let g = self.pool.backward(g);
        let g = self.second.backward(g);
        self.first.backward(g)
    }
}

impl<T: Real> Parameterized<T> for DoubleBlockDown<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

/// Concatenates the skip tensor, applies two conv/BN/ReLU layers with dropout
/// after the first, and optionally upsamples x2.
#[derive(Debug, Clone)]
pub struct DoubleBlockUp<T: Real> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
    dropout: Dropout<T>,
    upsample: bool,
    x_channels: usize,
}

impl<T: Real> DoubleBlockUp<T> {
    pub fn new(
        x_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        upsample: bool,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DoubleBlockUp {
            first: ConvBnRelu::new(x_channels + skip_channels, out_channels, 3, 1, 1, rng),
            second: ConvBnRelu::new(out_channels, out_channels, 3, 1, 1, rng),
            dropout: Dropout::new(dropout_p),
            upsample,
            x_channels,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, skip: &Array4<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Array4<T>> {
        if x.dim().2 != skip.dim().2 || x.dim().3 != skip.dim().3 {
            return Err(Error::shape(format!(
                "skip is {}x{} but input is {}x{}",
                skip.dim().2,
                skip.dim().3,
                x.dim().2,
                x.dim().3
            )));
        }
        if x.dim().1 + skip.dim().1 != self.first.conv.in_channels() {
            return Err(Error::shape(format!(
                "double block up expects {} channels in total, got {} + {}",
                self.first.conv.in_channels(),
                x.dim().1,
                skip.dim().1
            )));
        }
        let y = self.first.forward(&concat_channels(x, skip), mode);
        let y = self.dropout.forward(y, mode, rng);
        let y = self.second.forward(&y, mode);
        Ok(if self.upsample { Upsample2::forward(&y) } else { y })
    }

    /// Returns `(grad_x, grad_skip)`.
    pub fn backward(&mut self, g: &Array4<T>) -> (Array4<T>, Array4<T>) {
        let g = if self.upsample { Upsample2::backward(g) } else { g.clone() };
        let g = self.second.backward(g);
        let g = self.dropout.backward(g);
        let g = self.first.backward(g);
        split_channels(&g, self.x_channels)
    }
}

impl<T: Real> Parameterized<T> for DoubleBlockUp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

/// Output of a single-image prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Distribution(ColourDistribution),
    Ab(AbChannels),
}

#[derive(Debug, Clone)]
pub struct Generator<T: Real = f32> {
    pub cfg: GeneratorConfig,
    pub pre: PreprocessBlock<T>,
    pub dbd1: DoubleBlockDown<T>,
    pub dbd2: DoubleBlockDown<T>,
    pub dbd3: DoubleBlockDown<T>,
    pub caps_down: PrimaryCapsDown<T>,
    pub router: Router<T>,
    pub caps_up: PrimaryCapsUp<T>,
    pub dbu1: DoubleBlockUp<T>,
    pub dbu2: DoubleBlockUp<T>,
    pub dbu3: DoubleBlockUp<T>,
    pub head: Conv2d<T>,
    /// Dropout stream.
    pub rng: ChaCha8Rng,
    tags: Vec<CapsuleTag>,
    head_out: Option<Array4<T>>,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let b = cfg.base_channels;
        let r = cfg.routing;
        let pre = PreprocessBlock::new(b, &mut rng);
        let dbd1 = DoubleBlockDown::new(b, &mut rng);
        let dbd2 = DoubleBlockDown::new(2 * b, &mut rng);
        let dbd3 = DoubleBlockDown::new(4 * b, &mut rng);
        let caps_down = PrimaryCapsDown::new(8 * b, r.n_types_in, r.d_in, &mut rng);
        let router = Router::new(r, TRANSFORM_INIT_STD, &mut rng)?;
        let caps_up = PrimaryCapsUp::new(r.n_out, r.d_out, 4 * b, &mut rng);
        let dbu1 = DoubleBlockUp::new(4 * b, 4 * b, 4 * b, true, cfg.dropout_p, &mut rng);
        let dbu2 = DoubleBlockUp::new(4 * b, 2 * b, 2 * b, false, cfg.dropout_p, &mut rng);
        let dbu3 = DoubleBlockUp::new(2 * b, b, b, false, cfg.dropout_p, &mut rng);
        let head = Conv2d::new(b, cfg.head_channels(), 1, 1, 0, true, &mut rng);
        Ok(Generator {
            cfg,
            pre,
            dbd1,
            dbd2,
            dbd3,
            caps_down,
            router,
            caps_up,
            dbu1,
            dbu2,
            dbu3,
            head,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f_u64),
            tags: grid_tags(r.n_types_in, cfg.input_side / 16),
            head_out: None,
        })
    }

    /// Batch forward on `(N, 1, s, s)` normalised luminance. Returns
    /// probabilities `(N, Q, s/4, s/4)` or ab values `(N, 2, s/4, s/4)`.
    pub fn forward(&mut self, l: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let side = self.cfg.input_side;
        if l.dim().1 != 1 || l.dim().2 != side || l.dim().3 != side {
            return Err(Error::shape(format!(
                "generator expects Nx1x{side}x{side}, got {:?}",
                l.dim()
            )));
        }
        let (f0, skip0) = self.pre.forward(l, mode)?;
        let f1 = self.dbd1.forward(&f0, mode)?;
        let f2 = self.dbd2.forward(&f1, mode)?;
        let f3 = self.dbd3.forward(&f2, mode)?;
        let caps = self.caps_down.forward(&f3, mode)?;
        let entities = self.router.forward(&caps, &self.tags, mode);
        let u0 = self.caps_up.forward(&entities, side / 16, mode)?;
        let u1 = self.dbu1.forward(&u0, &f2, mode, &mut self.rng)?;
        let u2 = self.dbu2.forward(&u1, &f1, mode, &mut self.rng)?;
        let u3 = self.dbu3.forward(&u2, &skip0, mode, &mut self.rng)?;
        let logits = self.head.forward(&u3, mode);
        let out = match self.cfg.variant {
            Variant::Q => softmax_channels(&logits),
            Variant::Ab => logits.mapv(|v| v.tanh() * T::lit(AB_GAMUT_EXTENT as f64)),
        };
        self.head_out = mode.is_training().then(|| out.clone());
        Ok(out)
    }

    /// Backpropagates a gradient on the forward output through every stage;
    /// returns the gradient on the input.
    pub fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let out = self.head_out.take().expect("generator backward without a training forward");
        let g_logits = match self.cfg.variant {
            Variant::Q => softmax_channels_backward(&out, grad),
            Variant::Ab => {
                let k = T::lit(AB_GAMUT_EXTENT as f64);
                let mut g = grad.clone();
                g.zip_mut_with(&out, |g, &y| {
                    let t = y / k;
                    *g = *g * k * (T::one() - t * t)
                });
                g
            }
        };
        let g_u3 = self.head.backward(&g_logits);
        let (g_u2, g_skip0) = self.dbu3.backward(&g_u3);
        let (g_u1, g_f1_skip) = self.dbu2.backward(&g_u2);
        let (g_u0, g_f2_skip) = self.dbu1.backward(&g_u1);
        let g_entities = self.caps_up.backward(&g_u0);
        let g_caps = self.router.backward(&g_entities);
        let g_f3 = self.caps_down.backward(&g_caps, self.cfg.input_side / 16);
        let g_f2 = self.dbd3.backward(&g_f3) + g_f2_skip;
        let g_f1 = self.dbd2.backward(&g_f2) + g_f1_skip;
        let g_f0 = self.dbd1.backward(&g_f1);
        self.pre.backward(g_f0, &g_skip0)
    }

    /// Eval-mode prediction for one luminance plane in `[0, 100]`.
    pub fn predict(&mut self, l: &LChannel) -> Result<Prediction> {
        let x = l.0.mapv(|v| T::lit(v as f64 / 100.0)).insert_axis(Axis(0)).insert_axis(Axis(0));
        let out = self.forward(&x, Mode::Eval)?;
        let out = out.index_axis(Axis(0), 0);
        Ok(match self.cfg.variant {
            Variant::Q => {
                let (q, h, w) = out.dim();
                let probs = Array3::from_shape_fn((h, w, q), |(y, x, k)| out[[k, y, x]].as_f64() as f32);
                Prediction::Distribution(ColourDistribution(probs))
            }
            Variant::Ab => Prediction::Ab(AbChannels(out.mapv(|v| v.as_f64() as f32))),
        })
    }

    pub fn capsule_tags(&self) -> &[CapsuleTag] {
        &self.tags
    }

    pub fn clear_caches(&mut self) {
        self.head_out = None;
    }
}

impl<T: Real> Parameterized<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        self.pre.visit(&join(prefix, "pre"), f);
        self.dbd1.visit(&join(prefix, "dbd1"), f);
        self.dbd2.visit(&join(prefix, "dbd2"), f);
        self.dbd3.visit(&join(prefix, "dbd3"), f);
        self.caps_down.visit(&join(prefix, "caps_down"), f);
        self.router.visit(&join(prefix, "router"), f);
        self.caps_up.visit(&join(prefix, "caps_up"), f);
        self.dbu1.visit(&join(prefix, "dbu1"), f);
        self.dbu2.visit(&join(prefix, "dbu2"), f);
        self.dbu3.visit(&join(prefix, "dbu3"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.pre.visit_mut(&join(prefix, "pre"), f);
        self.dbd1.visit_mut(&join(prefix, "dbd1"), f);
        self.dbd2.visit_mut(&join(prefix, "dbd2"), f);
        self.dbd3.visit_mut(&join(prefix, "dbd3"), f);
        self.caps_down.visit_mut(&join(prefix, "caps_down"), f);
        self.router.visit_mut(&join(prefix, "router"), f);
        self.caps_up.visit_mut(&join(prefix, "caps_up"), f);
        self.dbu1.visit_mut(&join(prefix, "dbu1"), f);
        self.dbu2.visit_mut(&join(prefix, "dbu2"), f);
        self.dbu3.visit_mut(&join(prefix, "dbu3"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Softmax over the channel axis of an `NCHW` tensor.
pub fn softmax_channels<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((n, c, h, w));
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(x[[b, k, y, xx]]);
                }
                let mut s = T::zero();
                for k in 0..c {
                    let e = (x[[b, k, y, xx]] - m).exp();
                    out[[b, k, y, xx]] = e;
                    s += e;
                }
                for k in 0..c {
                    out[[b, k, y, xx]] /= s;
                }
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Real>(probs: &Array4<T>, grad: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = probs.dim();
    let mut out = Array4::<T>::zeros((n, c, h, w));
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut dot = T::zero();
                for k in 0..c {
                    dot += probs[[b, k, y, x]] * grad[[b, k, y, x]];
                }
                for k in 0..c {
                    out[[b, k, y, x]] = probs[[b, k, y, x]] * (grad[[b, k, y, x]] - dot);
                }
            }
        }
    }
    out
}
