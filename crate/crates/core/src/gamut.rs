//! The in-gamut ab palette and the per-pixel colour distributions built on it.
//!
//! The palette is derived by converting every 8-bit sRGB colour to Lab and
//! marking the lattice cells (spacing `grid_size`, centres on multiples of
//! the grid) that the ab coordinates land in. Indices are ordered
//! lexicographically by `(a, b)`.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use ndarray::{Array3, ArrayView1};
use rayon::prelude::*;

use crate::colourspace::{linear_lut, linear_rgb_to_lab, AbChannels};
use crate::error::{Error, Result};

/// Half-width of the square ab window covered by the lattice.
pub const LATTICE_EXTENT: f32 = 120.0;

/// Default cell dilation, as a fraction of the grid size.
///
/// A cell is kept when an sRGB colour lands within its square grown by
/// `margin` on every side. With a margin of 0 only directly hit cells survive
/// (261 of them at grid 10). Any margin in roughly (6.05, 6.2) ab units yields
/// the 313-bin reference palette at grid 10; 6.125 sits mid-window.
pub const DEFAULT_MARGIN_FRACTION: f32 = 0.6125;

pub const DEFAULT_GRID: f32 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GamutPalette {
    grid_size: f32,
    centers: Vec<[f32; 2]>,
    /// Lattice side length in cells.
    side: usize,
    /// Dense lattice lookup, `None` for out-of-gamut cells.
    index_of: Vec<Option<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EncodeMode {
    #[default]
    Hard,
    Soft { k: usize, sigma: f32 },
}

impl EncodeMode {
    pub const SOFT_DEFAULT: EncodeMode = EncodeMode::Soft { k: 5, sigma: 5.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DecodeMethod {
    #[default]
    Mode,
    AnnealedMean { temperature: f32 },
}

/// Per-pixel probabilities over the palette, shape `(H, W, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColourDistribution(pub Array3<f32>);

impl ColourDistribution {
    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn bins(&self) -> usize {
        self.0.dim().2
    }

    /// Checks nonnegativity and unit row sums within `tol`.
    pub fn validate(&self, tol: f32) -> Result<()> {
        for ((h, w, _), &p) in self.0.indexed_iter() {
            if !(p >= 0.0) {
                return Err(Error::InvalidArgument(format!("negative or NaN probability at ({h},{w})")));
            }
        }
        for h in 0..self.height() {
            for w in 0..self.width() {
                let s: f32 = self.0.slice(ndarray::s![h, w, ..]).sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::InvalidArgument(format!(
                        "pixel ({h},{w}) sums to {s}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn lattice_half(grid: f32) -> i32 {
    (LATTICE_EXTENT / grid).floor() as i32
}

impl GamutPalette {
    /// Reference construction: exhaustive 8-bit sRGB enumeration with a
    /// margin of [`DEFAULT_MARGIN_FRACTION`] grid units.
    pub fn build(grid_size: f32) -> Result<Self> {
        Self::build_with_margin(grid_size, DEFAULT_MARGIN_FRACTION * grid_size)
    }

    pub fn build_with_margin(grid_size: f32, margin: f32) -> Result<Self> {
        if !(grid_size > 0.0) || !grid_size.is_finite() {
            return Err(Error::InvalidArgument(format!("grid size must be positive, got {grid_size}")));
        }
        if !(margin >= 0.0) || margin >= grid_size {
            return Err(Error::InvalidArgument(format!(
                "margin must lie in [0, grid_size), got {margin}"
            )));
        }
        let k = lattice_half(grid_size);
        let side = (2 * k + 1) as usize;
        let lut = linear_lut();
        let half = (grid_size / 2.0 + margin) as f64;
        let g = grid_size as f64;

        let marks = (0..256usize)
            .into_par_iter()
            .fold(
                || vec![false; side * side],
                |mut marks, r| {
                    for gch in 0..256usize {
                        for b in 0..256usize {
                            let lab = linear_rgb_to_lab([lut[r], lut[gch], lut[b]]);
                            mark_cells(&mut marks, lab[1], lab[2], g, half, k, side);
                        }
                    }
                    marks
                },
            )
            .reduce(
                || vec![false; side * side],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
                    a
                },
            );

        let mut centers = Vec::new();
        for ia in 0..side {
            for ib in 0..side {
                if marks[ia * side + ib] {
                    centers.push([
                        (ia as i32 - k) as f32 * grid_size,
                        (ib as i32 - k) as f32 * grid_size,
                    ]);
                }
            }
        }
        Self::from_centers(grid_size, centers)
    }

    /// Builds a palette from explicit centres, validating lattice placement,
    /// lexicographic order and uniqueness.
    pub fn from_centers(grid_size: f32, centers: Vec<[f32; 2]>) -> Result<Self> {
        if !(grid_size > 0.0) || !grid_size.is_finite() {
            return Err(Error::InvalidArgument(format!("grid size must be positive, got {grid_size}")));
        }
        let k = lattice_half(grid_size);
        let side = (2 * k + 1) as usize;
        let mut index_of = vec![None; side * side];
        let mut prev: Option<(i32, i32)> = None;
        for (i, c) in centers.iter().enumerate() {
            let (ia, ib) = (lattice_coord(c[0], grid_size)?, lattice_coord(c[1], grid_size)?);
            if ia.abs() > k || ib.abs() > k {
                return Err(Error::InvalidArgument(format!("centre {c:?} outside the lattice")));
            }
            if let Some(p) = prev {
                if (ia, ib) <= p {
                    return Err(Error::InvalidArgument(format!(
                        "centre {i} {c:?} breaks lexicographic order"
                    )));
                }
            }
            prev = Some((ia, ib));
            index_of[((ia + k) as usize) * side + (ib + k) as usize] = Some(i as u32);
        }
        Ok(GamutPalette {
            grid_size,
            centers,
            side,
            index_of,
        })
    }

    pub fn grid_size(&self) -> f32 {
        self.grid_size
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[[f32; 2]] {
        &self.centers
    }

    pub fn center(&self, q: usize) -> [f32; 2] {
        self.centers[q]
    }

    /// Palette index of the lattice cell containing `(a, b)`, if in gamut.
    pub fn cell_index(&self, a: f32, b: f32) -> Option<usize> {
        let k = (self.side / 2) as i32;
        let ia = (a / self.grid_size).round() as i32;
        let ib = (b / self.grid_size).round() as i32;
        if ia.abs() > k || ib.abs() > k {
            return None;
        }
        self.index_of[((ia + k) as usize) * self.side + (ib + k) as usize].map(|i| i as usize)
    }

    /// Nearest centre in Euclidean ab distance; ties go to the lowest index.
    pub fn nearest(&self, a: f32, b: f32) -> usize {
        assert!(!self.is_empty(), "nearest() on an empty palette");
        if self.cell_index(a, b).is_some() {
            // the own cell's centre is within half a diagonal; nothing outside
            // the 3x3 neighbourhood can beat it
            let k = (self.side / 2) as i32;
            let ia = (a / self.grid_size).round() as i32;
            let ib = (b / self.grid_size).round() as i32;
            let mut best = (f32::INFINITY, usize::MAX);
            for da in -1..=1 {
                for db in -1..=1 {
                    let (x, y) = (ia + da, ib + db);
                    if x.abs() > k || y.abs() > k {
                        continue;
                    }
                    if let Some(q) = self.index_of[((x + k) as usize) * self.side + (y + k) as usize] {
                        let q = q as usize;
                        let d = dist2(self.centers[q], a, b);
                        if d < best.0 || (d == best.0 && q < best.1) {
                            best = (d, q);
                        }
                    }
                }
            }
            return best.1;
        }
        let mut best = (f32::INFINITY, 0);
        for (q, &c) in self.centers.iter().enumerate() {
            let d = dist2(c, a, b);
            if d < best.0 {
                best = (d, q);
            }
        }
        best.1
    }

    /// The `k` nearest centres ordered by (distance, index).
    pub fn k_nearest(&self, a: f32, b: f32, k: usize) -> Vec<(usize, f32)> {
        let mut all: Vec<(usize, f32)> = self
            .centers
            .iter()
            .enumerate()
            .map(|(q, &c)| (q, dist2(c, a, b)))
            .collect();
        all.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        all.truncate(k.min(self.len()));
        all
    }

    /// Writes `index,a_center,b_center` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "a_center", "b_center"])?;
        for (i, c) in self.centers.iter().enumerate() {
            w.write_record([i.to_string(), c[0].to_string(), c[1].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, grid_size: f32) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["index", "a_center", "b_center"] {
            return Err(Error::parse("palette CSV", format!("unexpected header {header:?}")));
        }
        let mut centers = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::parse("palette CSV", format!("row {row} has {} fields", rec.len())));
            }
            let field = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse("palette CSV", format!("row {row}: {e}")))
            };
            let idx = field(0)?;
            if idx != row as f64 {
                return Err(Error::parse("palette CSV", format!("row {row} carries index {idx}")));
            }
            centers.push([field(1)? as f32, field(2)? as f32]);
        }
        Self::from_centers(grid_size, centers)
    }
}

fn lattice_coord(v: f32, grid: f32) -> Result<i32> {
    let r = v / grid;
    if !r.is_finite() || (r - r.round()).abs() > 1e-4 || r.abs() > 1e6 {
        return Err(Error::InvalidArgument(format!("{v} is not on a lattice of spacing {grid}")));
    }
    Ok(r.round() as i32)
}

#[inline]
fn dist2(c: [f32; 2], a: f32, b: f32) -> f32 {
    let da = c[0] - a;
    let db = c[1] - b;
    da * da + db * db
}

#[inline]
fn mark_cells(marks: &mut [bool], a: f64, b: f64, g: f64, half: f64, k: i32, side: usize) {
    // cells whose half-open window [c - half, c + half) contains the sample
    let lo_a = ((a - half) / g).floor() as i32 + 1;
    let hi_a = ((a + half) / g).floor() as i32;
    let lo_b = ((b - half) / g).floor() as i32 + 1;
    let hi_b = ((b + half) / g).floor() as i32;
    for ia in cell_range(lo_a, hi_a, a, half, g, k) {
        for ib in cell_range(lo_b, hi_b, b, half, g, k) {
            marks[((ia + k) as usize) * side + (ib + k) as usize] = true;
        }
    }
}

fn cell_range(lo: i32, hi: i32, v: f64, half: f64, g: f64, k: i32) -> impl Iterator<Item = i32> {
    // candidate cells c*g with c*g - half <= v < c*g + half
    let start = (lo - 1).max(-k);
    let end = (hi + 1).min(k);
    (start..=end).filter(move |&c| {
        let center = c as f64 * g;
        center - half <= v && v < center + half
    })
}

/// Encodes ground-truth ab planes into a per-pixel distribution.
pub fn encode_ab(ab: &AbChannels, palette: &GamutPalette, mode: EncodeMode) -> Result<ColourDistribution> {
    if palette.is_empty() {
        return Err(Error::InvalidArgument("empty palette".into()));
    }
    let (h, w) = (ab.height(), ab.width());
    let q = palette.len();
    let mut out = Array3::<f32>::zeros((h, w, q));
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (ab.0[[0, y, x]], ab.0[[1, y, x]]);
            match mode {
                EncodeMode::Hard => out[[y, x, palette.nearest(a, b)]] = 1.0,
                EncodeMode::Soft { k, sigma } => {
                    if k == 0 || !(sigma > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "soft encoding needs k >= 1 and sigma > 0, got k={k} sigma={sigma}"
                        )));
                    }
                    let near = palette.k_nearest(a, b, k);
                    let weights: Vec<f64> = near
                        .iter()
                        .map(|&(_, d2)| (-(d2 as f64) / (2.0 * (sigma as f64).powi(2))).exp())
                        .collect();
                    let total: f64 = weights.iter().sum();
                    if total > 0.0 {
                        for (&(qi, _), wgt) in near.iter().zip(&weights) {
                            out[[y, x, qi]] = (wgt / total) as f32;
                        }
                    } else {
                        out[[y, x, near[0].0]] = 1.0;
                    }
                }
            }
        }
    }
    Ok(ColourDistribution(out))
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: ArrayView1<f32>) -> usize {
    let mut best = (f32::NEG_INFINITY, 0);
    for (i, &p) in probs.iter().enumerate() {
        if p > best.0 {
            best = (p, i);
        }
    }
    best.1
}

/// Expectation of the centres under `probs^(1/T)`, renormalised.
pub fn annealed_mean(probs: &[f32], centers: &[[f32; 2]], temperature: f32) -> [f32; 2] {
    let inv_t = 1.0 / temperature as f64;
    let mut total = 0.0f64;
    let mut acc = [0.0f64; 2];
    for (p, c) in probs.iter().zip(centers) {
        let wgt = if temperature == 1.0 { *p as f64 } else { (*p as f64).max(0.0).powf(inv_t) };
        total += wgt;
        acc[0] += wgt * c[0] as f64;
        acc[1] += wgt * c[1] as f64;
    }
    if total <= 0.0 {
        return [0.0, 0.0];
    }
    [(acc[0] / total) as f32, (acc[1] / total) as f32]
}

/// Gradient of [`annealed_mean`] with respect to `probs`, accumulated into
/// `grad_probs`.
pub fn annealed_mean_backward(
    probs: &[f32],
    centers: &[[f32; 2]],
    temperature: f32,
    grad_ab: [f32; 2],
    grad_probs: &mut [f32],
) {
    let inv_t = 1.0 / temperature as f64;
    let weights: Vec<f64> = probs
        .iter()
        .map(|&p| if temperature == 1.0 { p as f64 } else { (p as f64).max(1e-10).powf(inv_t) })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return;
    }
    let mean = annealed_mean(probs, centers, temperature);
    for (j, (c, g)) in centers.iter().zip(grad_probs.iter_mut()).enumerate() {
        let proj = grad_ab[0] as f64 * (c[0] - mean[0]) as f64 + grad_ab[1] as f64 * (c[1] - mean[1]) as f64;
        let dw_dp = if temperature == 1.0 {
            1.0
        } else {
            inv_t * weights[j] / (probs[j] as f64).max(1e-10)
        };
        *g += (dw_dp / total * proj) as f32;
    }
}

/// Maps a distribution back to ab planes.
pub fn decode_distribution(
    z: &ColourDistribution,
    palette: &GamutPalette,
    method: DecodeMethod,
) -> Result<AbChannels> {
    if z.bins() != palette.len() {
        return Err(Error::shape(format!(
            "distribution has {} bins, palette has {}",
            z.bins(),
            palette.len()
        )));
    }
    if let DecodeMethod::AnnealedMean { temperature } = method {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
        }
    }
    let (h, w) = (z.height(), z.width());
    let mut out = AbChannels::zeros(h, w);
    let mut scratch = Vec::with_capacity(palette.len());
    for y in 0..h {
        for x in 0..w {
            let probs = z.0.slice(ndarray::s![y, x, ..]);
            let ab = match method {
                DecodeMethod::Mode => palette.center(argmax(probs)),
                DecodeMethod::AnnealedMean { temperature } => {
                    scratch.clear();
                    scratch.extend(probs.iter().copied());
                    annealed_mean(&scratch, palette.centers(), temperature)
                }
            };
            out.0[[0, y, x]] = ab[0];
            out.0[[1, y, x]] = ab[1];
        }
    }
    Ok(out)
}

/// Set of lattice coordinates hit directly by sRGB colours (no margin).
/// Exposed for diagnostics.
pub fn direct_hits(grid_size: f32) -> BTreeSet<(i32, i32)> {
    let lut = linear_lut();
    let g = grid_size as f64;
    (0..256usize)
        .into_par_iter()
        .fold(BTreeSet::new, |mut set, r| {
            for gch in 0..256usize {
                for b in 0..256usize {
                    let lab = linear_rgb_to_lab([lut[r], lut[gch], lut[b]]);
                    set.insert(((lab[1] / g).round() as i32, (lab[2] / g).round() as i32));
                }
            }
            set
        })
        .reduce(BTreeSet::new, |mut a, b| {
            a.extend(b);
            a
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_palette() -> GamutPalette {
        GamutPalette::from_centers(
            10.0,
            vec![[-10.0, 0.0], [0.0, -10.0], [0.0, 0.0], [0.0, 10.0], [10.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn from_centers_rejects_unsorted_and_off_lattice() {
        assert!(GamutPalette::from_centers(10.0, vec![[0.0, 0.0], [-10.0, 0.0]]).is_err());
        assert!(GamutPalette::from_centers(10.0, vec![[3.0, 0.0]]).is_err());
        assert!(GamutPalette::from_centers(0.0, vec![]).is_err());
    }

    #[test]
    fn nearest_prefers_lowest_index_on_ties() {
        let p = toy_palette();
        // (5, 0) is equidistant from (0,0) [2] and (10,0) [4]
        assert_eq!(p.nearest(5.0, 0.0), 2);
        assert_eq!(p.nearest(-5.0, 0.0), 0);
        // far outside every cell falls back to the full scan
        assert_eq!(p.nearest(100.0, 3.0), 4);
    }

    #[test]
    fn hard_encoding_is_one_hot() {
        let p = toy_palette();
        let mut ab = AbChannels::zeros(1, 2);
        ab.0[[0, 0, 1]] = 10.0;
        let z = encode_ab(&ab, &p, EncodeMode::Hard).unwrap();
        assert_eq!(z.0[[0, 0, 2]], 1.0);
        assert_eq!(z.0[[0, 1, 4]], 1.0);
        z.validate(0.0).unwrap();
    }

    #[test]
    fn soft_encoding_normalised() {
        let p = toy_palette();
        let mut ab = AbChannels::zeros(1, 1);
        ab.0[[0, 0, 0]] = 3.0;
        ab.0[[1, 0, 0]] = -2.0;
        let z = encode_ab(&ab, &p, EncodeMode::SOFT_DEFAULT).unwrap();
        let s: f32 = z.0.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(z.0.iter().all(|&v| v >= 0.0));
        assert_eq!(z.0.iter().filter(|&&v| v > 0.0).count(), 5);
    }

    #[test]
    fn empty_palette_rejected() {
        let p = GamutPalette::from_centers(10.0, vec![]).unwrap();
        assert!(encode_ab(&AbChannels::zeros(1, 1), &p, EncodeMode::Hard).is_err());
    }

    #[test]
    fn decode_mode_and_mean() {
        let p = toy_palette();
        let mut z = Array3::<f32>::zeros((1, 1, 5));
        z[[0, 0, 1]] = 0.6;
        z[[0, 0, 3]] = 0.4;
        let z = ColourDistribution(z);
        let m = decode_distribution(&z, &p, DecodeMethod::Mode).unwrap();
        assert_eq!((m.0[[0, 0, 0]], m.0[[1, 0, 0]]), (0.0, -10.0));
        let e = decode_distribution(&z, &p, DecodeMethod::AnnealedMean { temperature: 1.0 }).unwrap();
        assert!((e.0[[1, 0, 0]] - (-6.0 + 4.0)).abs() < 1e-6);
        assert!(decode_distribution(&z, &p, DecodeMethod::AnnealedMean { temperature: 0.0 }).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        let v = ndarray::arr1(&[0.25f32, 0.5, 0.5, 0.0]);
        assert_eq!(argmax(v.view()), 1);
    }

    #[test]
    fn annealed_backward_matches_differences() {
        let centers = [[-10.0f32, 0.0], [0.0, 10.0], [20.0, -10.0]];
        for &t in &[1.0f32, 0.38] {
            let probs = [0.2f32, 0.5, 0.3];
            let g = [0.7f32, -1.3];
            let mut analytic = [0.0f32; 3];
            annealed_mean_backward(&probs, &centers, t, g, &mut analytic);
            for j in 0..3 {
                let h = 1e-3f32;
                let mut up = probs;
                up[j] += h;
                let mut dn = probs;
                dn[j] -= h;
                let fu = annealed_mean(&up, &centers, t);
                let fd = annealed_mean(&dn, &centers, t);
                let num = (g[0] * (fu[0] - fd[0]) + g[1] * (fu[1] - fd[1])) / (2.0 * h);
                assert!((num - analytic[j]).abs() < 2e-2 * (1.0 + num.abs()), "t={t} j={j} {num} {}", analytic[j]);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_bad_header() {
        let p = toy_palette();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("index,a_center,b_center\n"));
        assert_eq!(GamutPalette::read_csv(&buf[..], 10.0).unwrap(), p);
        assert!(GamutPalette::read_csv(&b"idx,a,b\n0,0,0\n"[..], 10.0).is_err());
        assert!(GamutPalette::read_csv(&b"index,a_center,b_center\n1,0,0\n"[..], 10.0).is_err());
    }
}
