//! Minimal layer toolkit with hand-written backward passes.
//!
//! Tensors are `NCHW` [`Array4`]s. Layers are generic over [`Real`] so that
//! the same code runs in `f32` for training and in `f64` for finite
//! difference checks. Every layer caches what its backward pass needs during
//! a training-mode forward call.

mod adam;
mod conv;
mod norm;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

pub use adam::{Adam, AdamConfig};
pub use conv::Conv2d;
pub use norm::BatchNorm2d;
pub use ops::{
    concat_channels, split_channels, Dropout, LeakyRelu, MaxPool2, Relu, Upsample2,
};

pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, caches kept, running stats updated.
    Train,
    /// As `Train` but running statistics are left untouched.
    TrainFrozenStats,
    /// Running statistics, no dropout, no caches.
    Eval,
}

impl Mode {
    pub fn is_training(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Gaussian initialisation; draws in `f64` so both precisions agree.
    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        });
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// What a visited tensor is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Optimised parameter.
    Param,
    /// Non-trainable state (running statistics).
    Buffer,
}

pub enum SlotMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut ArrayD<T>),
}

/// Named traversal over parameters and buffers, in a fixed order.
pub trait Parameterized<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, slot| {
            if let SlotMut::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, v| {
            if kind == SlotKind::Param {
                n += v.len();
            }
        });
        n
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of every slot.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit("", &mut |name, _, v| {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for x in v.iter() {
                let bits = x.as_f64().to_bits();
                h = (h ^ bits).wrapping_mul(0x0100_0000_01b3);
            }
        });
        h
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Converts a model tensor between precisions.
pub fn cast<A: Real, B: Real>(a: &ArrayD<A>) -> ArrayD<B> {
    a.mapv(|v| B::lit(v.as_f64()))
}

/// Copies every slot of `src` into the identically named slot of `dst`.
pub fn copy_slots<A: Real, B: Real>(src: &impl Parameterized<A>, dst: &mut impl Parameterized<B>) {
    let mut values = Vec::new();
    src.visit("", &mut |name, _, v| values.push((name.to_string(), cast::<A, B>(v))));
    let mut it = values.into_iter();
    dst.visit_mut("", &mut |name, slot| {
        let (src_name, v) = it.next().expect("slot count mismatch");
        assert_eq!(src_name, name, "slot order mismatch");
        match slot {
            SlotMut::Param(p) => p.value.assign(&v),
            SlotMut::Buffer(b) => b.assign(&v),
        }
    });
}
