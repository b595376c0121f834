use ndarray::{s, Array2, Array4, ArrayD, ArrayView3, Axis, Ix2, IxDyn};
use rand::Rng;
use rayon::prelude::*;

use super::{join, Mode, Param, Parameterized, Real, SlotKind, SlotMut};

/// 2D convolution via im2col and a GEMM per sample.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    input: Option<Array4<T>>,
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights; bias (when present) starts at zero.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self::with_std(in_channels, out_channels, kernel, stride, pad, bias, (2.0 / fan_in).sqrt(), rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        assert!(kernel > 0 && stride > 0, "degenerate convolution");
        let weight = Param::normal(&[out_channels, in_channels, kernel, kernel], std, rng);
        Conv2d {
            weight,
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            input: None,
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let k = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("rank 2")
    }

    fn im2col(&self, x: ArrayView3<T>, oh: usize, ow: usize) -> Array2<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("row-major cols");
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<T>, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> ndarray::Array3<T> {
        let k = self.kernel;
        let mut x = ndarray::Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = cols.row(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[[ci, iy as usize, ix as usize]] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv expects {} channels, got {c}", self.in_channels);
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let wm = self.weight_matrix();
        let bias = self.bias.as_ref().map(|b| b.value.view());
        let outs: Vec<Array2<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = self.im2col(x.index_axis(Axis(0), i), oh, ow);
                let mut y = wm.dot(&cols);
                if let Some(b) = &bias {
                    for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
                        row.mapv_inplace(|v| v + bv);
                    }
                }
                y
            })
            .collect();
        let mut out = Array4::<T>::zeros((n, self.out_channels, oh, ow));
        for (i, y) in outs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((self.out_channels, oh, ow)).expect("gemm output"));
        }
        self.input = mode.is_training().then(|| x.clone());
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("conv backward without a training forward");
        let (n, c, h, w) = x.dim();
        let (_, co, oh, ow) = grad.dim();
        let wm = self.weight_matrix().to_owned();
        let per_sample: Vec<(ndarray::Array3<T>, Array2<T>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = self.im2col(x.index_axis(Axis(0), i), oh, ow);
                let g = grad
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((co, oh * ow))
                    .expect("contiguous grad");
                let gw = g.dot(&cols.t());
                let gcols = wm.t().dot(&g);
                (self.col2im(&gcols, c, h, w, oh, ow), gw)
            })
            .collect();
        let mut gx = Array4::<T>::zeros((n, c, h, w));
        let mut gw_total = Array2::<T>::zeros((co, c * self.kernel * self.kernel));
        for (i, (gxi, gw)) in per_sample.into_iter().enumerate() {
            gx.index_axis_mut(Axis(0), i).assign(&gxi);
            gw_total += &gw;
        }
        let gw_total: ArrayD<T> = gw_total
            .into_shape_with_order(IxDyn(&[co, c, self.kernel, self.kernel]))
            .expect("weight shape");
        self.weight.grad += &gw_total;
        if let Some(b) = &mut self.bias {
            for o in 0..co {
                let mut acc = T::zero();
                for i in 0..n {
                    acc += grad.slice(s![i, o, .., ..]).sum();
                }
                b.grad[[o]] += acc;
            }
        }
        gx
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        f(&join(prefix, "weight"), SlotKind::Param, &self.weight.value);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), SlotKind::Param, &b.value);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), SlotMut::Param(b));
        }
    }
}
