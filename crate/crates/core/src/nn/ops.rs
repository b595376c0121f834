use ndarray::{s, Array4, Axis};
use rand::Rng;

use super::{Mode, Real};

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Real> {
    output: Option<Array4<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Relu { output: None }
    }

    pub fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let y = x.mapv_into(|v| if v > T::zero() { v } else { T::zero() });
        self.output = mode.is_training().then(|| y.clone());
        y
    }

    pub fn backward(&mut self, mut grad: Array4<T>) -> Array4<T> {
        let y = self.output.take().expect("relu backward without forward");
        grad.zip_mut_with(&y, |g, &v| {
            if v <= T::zero() {
                *g = T::zero()
            }
        });
        grad
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<T: Real> {
    slope: T,
    input: Option<Array4<T>>,
}

impl<T: Real> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope: T::lit(slope),
            input: None,
        }
    }

    pub fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        if mode.is_training() {
            self.input = Some(x.clone());
        }
        let slope = self.slope;
        x.mapv_into(|v| if v > T::zero() { v } else { v * slope })
    }

    pub fn backward(&mut self, mut grad: Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("leaky relu backward without forward");
        let slope = self.slope;
        grad.zip_mut_with(&x, |g, &v| {
            if v <= T::zero() {
                *g *= slope
            }
        });
        grad
    }
}

/// 2x2 max pooling with stride 2. Ties keep the first element in scan order.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    /// Winning offset per output cell plus the input shape.
    argmax: Option<(Vec<u8>, Shape4)>,
}

type Shape4 = (usize, usize, usize, usize);

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 { argmax: None }
    }

    pub fn forward<T: Real>(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even sides, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        let mut arg = vec![0u8; n * c * oh * ow];
        for (idx, o) in out.iter_mut().enumerate() {
            let ox = idx % ow;
            let oy = (idx / ow) % oh;
            let ch = (idx / (ow * oh)) % c;
            let i = idx / (ow * oh * c);
            let mut best = x[[i, ch, 2 * oy, 2 * ox]];
            let mut which = 0u8;
            for k in 1..4u8 {
                let v = x[[i, ch, 2 * oy + (k / 2) as usize, 2 * ox + (k % 2) as usize]];
                if v > best {
                    best = v;
                    which = k;
                }
            }
            *o = best;
            arg[idx] = which;
        }
        self.argmax = mode.is_training().then_some((arg, (n, c, h, w)));
        out
    }

    pub fn backward<T: Real>(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (arg, dims) = self.argmax.take().expect("max pool backward without forward");
        let (_, c, oh, ow) = grad.dim();
        let mut gx = Array4::<T>::zeros(dims);
        for (idx, &g) in grad.iter().enumerate() {
            let ox = idx % ow;
            let oy = (idx / ow) % oh;
            let ch = (idx / (ow * oh)) % c;
            let i = idx / (ow * oh * c);
            let k = arg[idx];
            gx[[i, ch, 2 * oy + (k / 2) as usize, 2 * ox + (k % 2) as usize]] += g;
        }
        gx
    }
}

/// Nearest-neighbour x2 upsampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward<T: Real>(x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, ch, y, xx)| x[[i, ch, y / 2, xx / 2]])
    }

    pub fn backward<T: Real>(grad: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = grad.dim();
        let mut gx = Array4::<T>::zeros((n, c, h / 2, w / 2));
        for ((i, ch, y, x), &g) in grad.indexed_iter() {
            gx[[i, ch, y / 2, x / 2]] += g;
        }
        gx
    }
}

/// Inverted dropout; the mask stream comes from the caller's RNG.
#[derive(Debug, Clone)]
pub struct Dropout<T: Real> {
    p: f64,
    mask: Option<Array4<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
        Dropout { p, mask: None }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn forward<R: Rng>(&mut self, x: Array4<T>, mode: Mode, rng: &mut R) -> Array4<T> {
        if !mode.is_training() || self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let p = self.p;
        let mask = Array4::from_shape_simple_fn(x.raw_dim(), || {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let y = &x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        match self.mask.take() {
            Some(mask) => grad * &mask,
            None => grad,
        }
    }
}

pub fn concat_channels<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    assert_eq!(
        (a.dim().0, a.dim().2, a.dim().3),
        (b.dim().0, b.dim().2, b.dim().3),
        "concat needs matching batch and spatial dims"
    );
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat")
}

pub fn split_channels<T: Real>(g: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        g.slice(s![.., ..first, .., ..]).to_owned(),
        g.slice(s![.., first.., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_routes_gradient_to_max() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 0.0, 1.0]).unwrap();
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x, Mode::Train);
        assert_eq!(y.iter().copied().collect::<Vec<f64>>(), vec![5.0, 2.0]);
        let g = pool.backward(&Array4::from_elem((1, 1, 1, 2), 1.0));
        assert_eq!(g.iter().copied().collect::<Vec<f64>>(), vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_round_trip_sums() {
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, y, x)| (c * 9 + y * 3 + x) as f32);
        let up = Upsample2::forward(&x);
        assert_eq!(up.dim(), (1, 2, 6, 6));
        assert_eq!(up[[0, 1, 5, 4]], x[[0, 1, 2, 2]]);
        let back = Upsample2::backward(&up);
        assert_eq!(back, x * 4.0);
    }

    #[test]
    fn dropout_inactive_in_eval() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut d = Dropout::<f32>::new(0.5);
        let x = Array4::from_elem((1, 1, 4, 4), 2.0f32);
        assert_eq!(d.forward(x.clone(), Mode::Eval, &mut rng), x);
        let y = d.forward(x, Mode::Train, &mut rng);
        assert!(y.iter().all(|&v| v == 0.0 || v == 4.0));
    }
}
