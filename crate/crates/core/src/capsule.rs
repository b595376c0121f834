//! Capsule kernels: the squash nonlinearity, routing by agreement, and the
//! primary-capsule blocks that move between feature maps and capsules.
//!
//! Routing is global over all spatial positions. Transform matrices are
//! shared by capsule type, so a capsule's `(row, col)` tag never enters the
//! computation.

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, Ix2};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{
    join, BatchNorm2d, Conv2d, Mode, Param, Parameterized, Real, Relu, SlotKind, SlotMut, Upsample2,
};

/// Scale applied by squash to a vector of norm `n`: `n / (1 + n^2)`.
#[inline]
fn squash_scale(n: f64) -> f64 {
    n / (1.0 + n * n)
}

/// `v * |v|^2 / (1 + |v|^2) / |v|`; zero maps to zero.
pub fn squash<T: Real>(v: &[T]) -> Vec<T> {
    let n = v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![T::zero(); v.len()];
    }
    let k = T::lit(squash_scale(n));
    v.iter().map(|&x| x * k).collect()
}

/// Vector-Jacobian product of [`squash`] at `s` with upstream gradient `g`.
pub fn squash_backward<T: Real>(s: &[T], g: &[T]) -> Vec<T> {
    let n2: f64 = s.iter().map(|x| x.as_f64().powi(2)).sum();
    let n = n2.sqrt();
    if n < 1e-12 {
        // the map is O(|s|^2) near the origin
        return vec![T::zero(); s.len()];
    }
    let f = squash_scale(n);
    let df_over_n = (1.0 - n2) / (1.0 + n2).powi(2) / n;
    let sg: f64 = s.iter().zip(g).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    s.iter()
        .zip(g)
        .map(|(&si, &gi)| T::lit(f * gi.as_f64() + df_over_n * sg * si.as_f64()))
        .collect()
}

/// Where a primary capsule came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CapsuleTag {
    pub kind: usize,
    pub row: usize,
    pub col: usize,
}

/// `n` capsule activity vectors of dimension `d`, optionally tagged.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleStack<T: Real = f32> {
    pub vectors: Array2<T>,
    pub tags: Vec<CapsuleTag>,
}

impl<T: Real> CapsuleStack<T> {
    pub fn new(vectors: Array2<T>, tags: Vec<CapsuleTag>) -> Result<Self> {
        let (n, d) = vectors.dim();
        if n == 0 || d == 0 {
            return Err(Error::shape("capsule stack needs n, d > 0"));
        }
        if !tags.is_empty() && tags.len() != n {
            return Err(Error::shape(format!("{} tags for {n} capsules", tags.len())));
        }
        Ok(CapsuleStack { vectors, tags })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.vectors
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    fn kind(&self, i: usize) -> usize {
        self.tags.get(i).map_or(0, |t| t.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingConfig {
    pub n_types_in: usize,
    pub d_in: usize,
    pub n_out: usize,
    pub d_out: usize,
    pub iterations: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            n_types_in: 16,
            d_in: 8,
            n_out: 16,
            d_out: 32,
            iterations: 3,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
        }
        if self.n_types_in == 0 || self.d_in == 0 || self.n_out == 0 || self.d_out == 0 {
            return Err(Error::InvalidArgument(format!("degenerate routing geometry {self:?}")));
        }
        Ok(())
    }
}

/// Per-sample record of one routing pass.
#[derive(Debug, Clone)]
pub struct RoutingTrace<T: Real> {
    kinds: Vec<usize>,
    inputs: Array2<T>,
    /// Predictions `u_hat[i, j, :]`.
    predictions: Array3<T>,
    /// Coupling coefficients used in each iteration, `(n_in, n_out)`.
    pub couplings: Vec<Array2<T>>,
    /// Pre-squash outputs per iteration.
    totals: Vec<Array2<T>>,
    /// Squashed outputs per iteration.
    pub outputs: Vec<Array2<T>>,
}

/// Dynamic routing between an input capsule layer and `n_out` entity capsules.
#[derive(Debug, Clone)]
pub struct Router<T: Real> {
    pub cfg: RoutingConfig,
    /// Transforms laid out as `[type, d_in, n_out, d_out]`.
    pub transforms: Param<T>,
    traces: Vec<RoutingTrace<T>>,
}

impl<T: Real> Router<T> {
    pub fn new<R: Rng>(cfg: RoutingConfig, std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Router {
            cfg,
            transforms: Param::normal(&[cfg.n_types_in, cfg.d_in, cfg.n_out, cfg.d_out], std, rng),
            traces: Vec::new(),
        })
    }

    pub fn from_transforms(cfg: RoutingConfig, transforms: ArrayD<T>) -> Result<Self> {
        cfg.validate()?;
        let want = [cfg.n_types_in, cfg.d_in, cfg.n_out, cfg.d_out];
        if transforms.shape() != want {
            return Err(Error::shape(format!("transforms {:?}, expected {want:?}", transforms.shape())));
        }
        Ok(Router {
            cfg,
            transforms: Param::new(transforms),
            traces: Vec::new(),
        })
    }

    /// Matrix for type `t` as `(d_in, n_out * d_out)`.
    fn type_matrix(&self, t: usize) -> ndarray::ArrayView2<'_, T> {
        let c = self.cfg;
        self.transforms
            .value
            .slice(s![t, .., .., ..])
            .into_shape_with_order((c.d_in, c.n_out * c.d_out))
            .expect("contiguous transforms")
            .into_dimensionality::<Ix2>()
            .expect("rank 2")
    }

    fn groups(&self, kinds: &[usize]) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.cfg.n_types_in];
        for (i, &k) in kinds.iter().enumerate() {
            groups[k].push(i);
        }
        groups
    }

    fn check(&self, inputs: &CapsuleStack<T>) -> Result<()> {
        if inputs.dim() != self.cfg.d_in {
            return Err(Error::shape(format!(
                "input capsules have dim {}, routing expects {}",
                inputs.dim(),
                self.cfg.d_in
            )));
        }
        if let Some(bad) = (0..inputs.len()).find(|&i| inputs.kind(i) >= self.cfg.n_types_in) {
            return Err(Error::shape(format!("capsule {bad} has type outside 0..{}", self.cfg.n_types_in)));
        }
        Ok(())
    }

    /// Routes one stack; the trace holds every intermediate.
    pub fn route_traced(&self, inputs: &CapsuleStack<T>) -> Result<RoutingTrace<T>> {
        self.check(inputs)?;
        let c = self.cfg;
        let n_in = inputs.len();
        let kinds: Vec<usize> = (0..n_in).map(|i| inputs.kind(i)).collect();

        let mut predictions = Array3::<T>::zeros((n_in, c.n_out, c.d_out));
        for (t, idx) in self.groups(&kinds).into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let u = inputs.vectors.select(Axis(0), &idx);
            let uh = u.dot(&self.type_matrix(t));
            for (row, &i) in idx.iter().enumerate() {
                predictions
                    .index_axis_mut(Axis(0), i)
                    .assign(&uh.row(row).into_shape_with_order((c.n_out, c.d_out)).expect("row"));
            }
        }

        let mut logits = Array2::<T>::zeros((n_in, c.n_out));
        let mut trace = RoutingTrace {
            kinds,
            inputs: inputs.vectors.clone(),
            predictions,
            couplings: Vec::with_capacity(c.iterations),
            totals: Vec::with_capacity(c.iterations),
            outputs: Vec::with_capacity(c.iterations),
        };
        for it in 0..c.iterations {
            let coup = softmax_rows(&logits);
            let mut total = Array2::<T>::zeros((c.n_out, c.d_out));
            for i in 0..n_in {
                for j in 0..c.n_out {
                    let cij = coup[[i, j]];
                    total
                        .row_mut(j)
                        .scaled_add(cij, &trace.predictions.slice(s![i, j, ..]));
                }
            }
            let mut out = Array2::<T>::zeros((c.n_out, c.d_out));
            for j in 0..c.n_out {
                let v = squash(total.row(j).as_slice().expect("row-major"));
                out.row_mut(j).assign(&ndarray::Array1::from(v));
            }
            if it + 1 < c.iterations {
                for i in 0..n_in {
                    for j in 0..c.n_out {
                        logits[[i, j]] += trace.predictions.slice(s![i, j, ..]).dot(&out.row(j));
                    }
                }
            }
            trace.couplings.push(coup);
            trace.totals.push(total);
            trace.outputs.push(out);
        }
        Ok(trace)
    }

    pub fn route(&self, inputs: &CapsuleStack<T>) -> Result<CapsuleStack<T>> {
        let trace = self.route_traced(inputs)?;
        let out = trace.outputs.last().expect("at least one iteration").clone();
        CapsuleStack::new(out, Vec::new())
    }

    /// Routes every sample of a batch, `(N, n_in, d_in)` to `(N, n_out, d_out)`.
    pub fn forward(&mut self, inputs: &Array3<T>, kinds: &[CapsuleTag], mode: Mode) -> Array3<T> {
        let (n, n_in, _) = inputs.dim();
        assert_eq!(kinds.len(), n_in, "one tag per input capsule");
        let traces: Vec<RoutingTrace<T>> = (0..n)
            .into_par_iter()
            .map(|b| {
                let stack = CapsuleStack {
                    vectors: inputs.index_axis(Axis(0), b).to_owned(),
                    tags: kinds.to_vec(),
                };
                self.route_traced(&stack).expect("routing shapes checked by caller")
            })
            .collect();
        let c = self.cfg;
        let mut out = Array3::<T>::zeros((n, c.n_out, c.d_out));
        for (b, t) in traces.iter().enumerate() {
            out.index_axis_mut(Axis(0), b).assign(t.outputs.last().expect("iterations >= 1"));
        }
        self.traces = if mode.is_training() { traces } else { Vec::new() };
        out
    }

    pub fn backward(&mut self, grad: &Array3<T>) -> Array3<T> {
        let traces = std::mem::take(&mut self.traces);
        assert_eq!(traces.len(), grad.dim().0, "routing backward without a matching forward");
        let results: Vec<(Array2<T>, ArrayD<T>)> = traces
            .par_iter()
            .enumerate()
            .map(|(b, t)| self.backward_one(t, grad.index_axis(Axis(0), b).to_owned()))
            .collect();
        let (n, n_in, d_in) = (grad.dim().0, traces[0].inputs.nrows(), self.cfg.d_in);
        let mut gin = Array3::<T>::zeros((n, n_in, d_in));
        for (b, (gu, gw)) in results.into_iter().enumerate() {
            gin.index_axis_mut(Axis(0), b).assign(&gu);
            self.transforms.grad += &gw;
        }
        gin
    }

    fn backward_one(&self, t: &RoutingTrace<T>, grad_out: Array2<T>) -> (Array2<T>, ArrayD<T>) {
        let c = self.cfg;
        let n_in = t.inputs.nrows();
        let mut g_pred = Array3::<T>::zeros((n_in, c.n_out, c.d_out));
        // gradient w.r.t. the logits b^(r) produced at the end of iteration r
        let mut g_logits = Array2::<T>::zeros((n_in, c.n_out));
        for r in (0..c.iterations).rev() {
            let mut g_v = if r + 1 == c.iterations {
                grad_out.clone()
            } else {
                Array2::<T>::zeros((c.n_out, c.d_out))
            };
            if r + 1 < c.iterations {
                // b^(r) = b^(r-1) + <u_hat, v^(r)>
                let v = &t.outputs[r];
                for i in 0..n_in {
                    for j in 0..c.n_out {
                        let gb = g_logits[[i, j]];
                        if gb == T::zero() {
                            continue;
                        }
                        let uh = t.predictions.slice(s![i, j, ..]);
                        g_v.row_mut(j).scaled_add(gb, &uh);
                        g_pred.slice_mut(s![i, j, ..]).scaled_add(gb, &v.row(j));
                    }
                }
            }
            let mut g_total = Array2::<T>::zeros((c.n_out, c.d_out));
            for j in 0..c.n_out {
                let gs = squash_backward(
                    t.totals[r].row(j).as_slice().expect("row-major"),
                    g_v.row(j).as_slice().expect("row-major"),
                );
                g_total.row_mut(j).assign(&ndarray::Array1::from(gs));
            }
            let coup = &t.couplings[r];
            for i in 0..n_in {
                let mut g_c = vec![T::zero(); c.n_out];
                for j in 0..c.n_out {
                    let uh = t.predictions.slice(s![i, j, ..]);
                    g_c[j] = uh.dot(&g_total.row(j));
                    g_pred.slice_mut(s![i, j, ..]).scaled_add(coup[[i, j]], &g_total.row(j));
                }
                let dot: T = (0..c.n_out).map(|j| coup[[i, j]] * g_c[j]).sum();
                for j in 0..c.n_out {
                    g_logits[[i, j]] += coup[[i, j]] * (g_c[j] - dot);
                }
            }
        }

        let mut g_in = Array2::<T>::zeros((n_in, c.d_in));
        let mut g_w = ArrayD::<T>::zeros(self.transforms.value.raw_dim());
        for (k, idx) in self.groups(&t.kinds).into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let gp = g_pred
                .select(Axis(0), &idx)
                .into_shape_with_order((idx.len(), c.n_out * c.d_out))
                .expect("contiguous");
            let gu = gp.dot(&self.type_matrix(k).t());
            for (row, &i) in idx.iter().enumerate() {
                g_in.row_mut(i).assign(&gu.row(row));
            }
            let u = t.inputs.select(Axis(0), &idx);
            let gw = u.t().dot(&gp);
            let mut dst = g_w.slice_mut(s![k, .., .., ..]);
            dst += &gw.into_shape_with_order((c.d_in, c.n_out, c.d_out)).expect("transform block");
        }
        (g_in, g_w)
    }
}

fn softmax_rows<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: T = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

impl<T: Real> Parameterized<T> for Router<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        f(&join(prefix, "transforms"), SlotKind::Param, &self.transforms.value);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        f(&join(prefix, "transforms"), SlotMut::Param(&mut self.transforms));
    }
}

/// Tags for capsules laid out type-major over an `side x side` grid.
pub fn grid_tags(n_types: usize, side: usize) -> Vec<CapsuleTag> {
    let mut tags = Vec::with_capacity(n_types * side * side);
    for kind in 0..n_types {
        for row in 0..side {
            for col in 0..side {
                tags.push(CapsuleTag { kind, row, col });
            }
        }
    }
    tags
}

/// Convolutional features to primary capsules: 3x3 conv + batch norm to
/// `n_types * d` channels, reshaped to one capsule per type and position,
/// then squashed.
#[derive(Debug, Clone)]
pub struct PrimaryCapsDown<T: Real> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm2d<T>,
    n_types: usize,
    d: usize,
    pre_squash: Option<Array3<T>>,
}

impl<T: Real> PrimaryCapsDown<T> {
    pub fn new<R: Rng>(in_channels: usize, n_types: usize, d: usize, rng: &mut R) -> Self {
        PrimaryCapsDown {
            conv: Conv2d::new(in_channels, n_types * d, 3, 1, 1, false, rng),
            norm: BatchNorm2d::new(n_types * d),
            n_types,
            d,
            pre_squash: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    /// `(N, C, S, S)` to `(N, n_types * S * S, d)` capsules ordered by
    /// `(type, row, col)`.
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array3<T>> {
        if x.dim().1 != self.in_channels() {
            return Err(Error::shape(format!(
                "primary caps expect {} channels, got {}",
                self.in_channels(),
                x.dim().1
            )));
        }
        let y = self.conv.forward(x, mode);
        let y = self.norm.forward(&y, mode);
        let caps = self.to_capsules(&y);
        let (n, m, d) = caps.dim();
        let mut out = Array3::<T>::zeros((n, m, d));
        for b in 0..n {
            for i in 0..m {
                let v = squash(caps.slice(s![b, i, ..]).to_vec().as_slice());
                out.slice_mut(s![b, i, ..]).assign(&ndarray::Array1::from(v));
            }
        }
        self.pre_squash = mode.is_training().then_some(caps);
        Ok(out)
    }

    fn to_capsules(&self, y: &Array4<T>) -> Array3<T> {
        let (n, _, h, w) = y.dim();
        let mut caps = Array3::<T>::zeros((n, self.n_types * h * w, self.d));
        for b in 0..n {
            for t in 0..self.n_types {
                for k in 0..self.d {
                    let plane = y.slice(s![b, t * self.d + k, .., ..]);
                    for ((r, c), &v) in plane.indexed_iter() {
                        caps[[b, (t * h + r) * w + c, k]] = v;
                    }
                }
            }
        }
        caps
    }

    pub fn backward(&mut self, grad: &Array3<T>, side: usize) -> Array4<T> {
        let caps = self.pre_squash.take().expect("primary caps backward without forward");
        let (n, m, d) = caps.dim();
        let mut g_caps = Array3::<T>::zeros((n, m, d));
        for b in 0..n {
            for i in 0..m {
                let gs = squash_backward(
                    caps.slice(s![b, i, ..]).to_vec().as_slice(),
                    grad.slice(s![b, i, ..]).to_vec().as_slice(),
                );
                g_caps.slice_mut(s![b, i, ..]).assign(&ndarray::Array1::from(gs));
            }
        }
        let mut g_map = Array4::<T>::zeros((n, self.n_types * d, side, side));
        for b in 0..n {
            for t in 0..self.n_types {
                for k in 0..d {
                    for r in 0..side {
                        for c in 0..side {
                            g_map[[b, t * d + k, r, c]] = g_caps[[b, (t * side + r) * side + c, k]];
                        }
                    }
                }
            }
        }
        let g = self.norm.backward(&g_map);
        self.conv.backward(&g)
    }
}

impl<T: Real> Parameterized<T> for PrimaryCapsDown<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Entity capsules back to a feature map: the flattened capsule vector is
/// broadcast over an `S x S` grid, convolved (3x3) with batch norm and ReLU,
/// then upsampled x2.
#[derive(Debug, Clone)]
pub struct PrimaryCapsUp<T: Real> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm2d<T>,
    relu: Relu<T>,
    n_caps: usize,
    d: usize,
}

impl<T: Real> PrimaryCapsUp<T> {
    pub fn new<R: Rng>(n_caps: usize, d: usize, out_channels: usize, rng: &mut R) -> Self {
        PrimaryCapsUp {
            conv: Conv2d::new(n_caps * d, out_channels, 3, 1, 1, false, rng),
            norm: BatchNorm2d::new(out_channels),
            relu: Relu::new(),
            n_caps,
            d,
        }
    }

    pub fn broadcast(entities: &Array3<T>, side: usize) -> Array4<T> {
        let (n, caps, d) = entities.dim();
        Array4::from_shape_fn((n, caps * d, side, side), |(b, ch, _, _)| entities[[b, ch / d, ch % d]])
    }

    pub fn forward(&mut self, entities: &Array3<T>, side: usize, mode: Mode) -> Result<Array4<T>> {
        let (_, caps, d) = entities.dim();
        if caps != self.n_caps || d != self.d {
            return Err(Error::shape(format!(
                "expected {} capsules of dim {}, got {caps} of dim {d}",
                self.n_caps, self.d
            )));
        }
        let x = Self::broadcast(entities, side);
        let y = self.conv.forward(&x, mode);
        let y = self.norm.forward(&y, mode);
        let y = self.relu.forward(y, mode);
        Ok(Upsample2::forward(&y))
    }

    pub fn backward(&mut self, grad: &Array4<T>) -> Array3<T> {
        let g = Upsample2::backward(grad);
        let g = self.relu.backward(g);
        let g = self.norm.backward(&g);
        let g = self.conv.backward(&g);
        let n = g.dim().0;
        let mut out = Array3::<T>::zeros((n, self.n_caps, self.d));
        for b in 0..n {
            for ch in 0..self.n_caps * self.d {
                out[[b, ch / self.d, ch % self.d]] = g.slice(s![b, ch, .., ..]).sum();
            }
        }
        out
    }
}

impl<T: Real> Parameterized<T> for PrimaryCapsUp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squash_closed_forms() {
        assert_eq!(squash(&[0.0f64, 0.0]), vec![0.0, 0.0]);
        let v = squash(&[0.6f64, 0.8]);
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((n - 0.5).abs() < 1e-15);
        let v = squash(&[3.0f64, 4.0, 0.0]);
        assert!((v[0] - 15.0 / 26.0).abs() < 1e-12);
        assert!((v[1] - 20.0 / 26.0).abs() < 1e-12);
        assert_eq!(v[2], 0.0);
    }

    /// Transforms for the hand trace, `W[t][j]` as 2x2 row-vector maps.
    fn trace_router() -> Router<f64> {
        let cfg = RoutingConfig {
            n_types_in: 2,
            d_in: 2,
            n_out: 2,
            d_out: 2,
            iterations: 3,
        };
        let w = [
            [arr2(&[[1.0, 0.0], [0.0, 1.0]]), arr2(&[[0.5, -0.5], [0.2, 0.3]])],
            [arr2(&[[0.3, 0.1], [-0.2, 0.4]]), arr2(&[[1.0, 0.5], [0.5, -1.0]])],
        ];
        let mut t = ArrayD::zeros(ndarray::IxDyn(&[2, 2, 2, 2]));
        for ty in 0..2 {
            for j in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        t[[ty, a, j, b]] = w[ty][j][[a, b]];
                    }
                }
            }
        }
        Router::from_transforms(cfg, t).unwrap()
    }

    fn trace_inputs() -> CapsuleStack<f64> {
        CapsuleStack::new(
            arr2(&[[1.0, 0.5], [-0.5, 1.0]]),
            vec![CapsuleTag { kind: 0, row: 0, col: 0 }, CapsuleTag { kind: 1, row: 0, col: 1 }],
        )
        .unwrap()
    }

    #[test]
    fn hand_trace_oracle() {
        // values from an independent scalar evaluation of the routing loop
        let trace = trace_router().route_traced(&trace_inputs()).unwrap();
        let expect_c = [
            [[0.5, 0.5], [0.5, 0.5]],
            [[0.49909868357129944, 0.5009013164287005], [0.38241398788323916, 0.6175860121167609]],
            [[0.492699458415318, 0.5073005415846821], [0.25564302342588796, 0.744356976574112]],
        ];
        for (c, ec) in trace.couplings.iter().zip(&expect_c) {
            for ((i, j), v) in c.indexed_iter() {
                assert!((v - ec[i][j]).abs() < 1e-6);
            }
        }
        let expect_v = [[0.1659083008383902, 0.13817645913337795], [0.1507330262731247, -0.5486964563567682]];
        let v = trace.outputs.last().unwrap();
        for j in 0..2 {
            for k in 0..2 {
                assert!((v[[j, k]] - expect_v[j][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn routing_errors() {
        let mut r = trace_router();
        let bad = CapsuleStack::new(arr2(&[[1.0, 0.5, 0.0]]), vec![]).unwrap();
        assert!(r.route(&bad).is_err());
        r.cfg.iterations = 0;
        assert!(r.cfg.validate().is_err());
        assert!(Router::<f64>::from_transforms(r.cfg, r.transforms.value.clone()).is_err());
    }

    #[test]
    fn routing_backward_matches_finite_differences() {
        let router = trace_router();
        let mut r = router.clone();
        let inputs = trace_inputs();
        let x = inputs.vectors.clone().insert_axis(Axis(0));
        let weights = arr2(&[[0.3, -1.2], [0.7, 0.4]]).insert_axis(Axis(0));
        r.forward(&x, &inputs.tags, Mode::Train);
        let gx = r.backward(&weights);
        let loss = |r: &mut Router<f64>, x: &Array3<f64>| (r.forward(x, &inputs.tags, Mode::Eval) * &weights).sum();
        let h = 1e-6;
        for idx in [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(&mut r, &xp) - loss(&mut r, &xm)) / (2.0 * h);
            assert!((num - gx[idx]).abs() < 1e-7 * (1.0 + num.abs()), "{num} vs {}", gx[idx]);
        }
        let gw = r.transforms.grad.clone();
        for idx in [[0, 0, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1]] {
            let orig = r.transforms.value[idx];
            r.transforms.value[idx] = orig + h;
            let up = loss(&mut r, &x);
            r.transforms.value[idx] = orig - h;
            let dn = loss(&mut r, &x);
            r.transforms.value[idx] = orig;
            let num = (up - dn) / (2.0 * h);
            assert!((num - gw[idx]).abs() < 1e-7 * (1.0 + num.abs()), "{num} vs {}", gw[idx]);
        }
    }

    #[test]
    fn caps_up_broadcast_is_spatially_constant() {
        let e = Array3::from_shape_fn((1, 16, 32), |(_, i, k)| (i * 32 + k) as f32 * 0.01);
        let b = PrimaryCapsUp::broadcast(&e, 5);
        for ch in 0..512 {
            let plane: ndarray::ArrayView2<f32> = b.slice(s![0, ch, .., ..]);
            assert!(plane.iter().all(|&v| v == plane[[0, 0]]));
        }
    }

    #[test]
    fn caps_up_rejects_wrong_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut up = PrimaryCapsUp::<f32>::new(16, 32, 8, &mut rng);
        assert!(up.forward(&Array3::zeros((1, 15, 32)), 2, Mode::Eval).is_err());
        let mut down = PrimaryCapsDown::<f32>::new(16, 16, 8, &mut rng);
        assert!(down.forward(&Array4::zeros((1, 8, 2, 2)), Mode::Eval).is_err());
    }
}
