//! sRGB <-> CIELab conversion (D65), channel split/merge and square resizing.
//!
//! Conversions run in `f64` per pixel; Lab planes are stored as `f32`. The
//! sRGB transfer curve is the standard piecewise one and out-of-gamut Lab
//! values are clamped per channel after rounding on the way back.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// D65 reference white in XYZ, normalised so that Y = 1.
pub const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

/// Extent of the ab plane reached by 8-bit sRGB, rounded outward.
pub const AB_GAMUT_EXTENT: f32 = 110.0;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const DELTA: f64 = 6.0 / 29.0;

/// 8-bit sRGB image, row-major interleaved `r,g,b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "rgb buffer holds {} bytes, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(img)
    }

    /// Decodes PNG or JPEG bytes, sniffing the format from the content.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: image::DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        RgbImage::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// CIELab image stored as three planes `(L, a, b)` of shape `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage(pub Array3<f32>);

/// Luminance plane, `(H, W)`, values in `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LChannel(pub Array2<f32>);

/// Chrominance planes, `(2, H, W)`: index 0 is `a`, index 1 is `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbChannels(pub Array3<f32>);

impl LabImage {
    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }
}

impl LChannel {
    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }
}

impl AbChannels {
    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        AbChannels(Array3::zeros((2, height, width)))
    }

    /// Bilinear resize of both planes.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let mut out = Array3::zeros((2, height, width));
        for c in 0..2 {
            out.index_axis_mut(Axis(0), c)
                .assign(&resize_plane(self.0.index_axis(Axis(0), c), height, width));
        }
        AbChannels(out)
    }
}

#[inline]
fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Linearised sRGB lookup for all 256 code values.
pub fn linear_lut() -> [f64; 256] {
    let mut lut = [0.0; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        *v = srgb_decode(i as f64 / 255.0);
    }
    lut
}

/// Converts linear RGB in `[0, 1]` to Lab.
#[inline]
pub fn linear_rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let mut f = [0.0; 3];
    for (k, row) in RGB_TO_XYZ.iter().enumerate() {
        let xyz = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
        f[k] = lab_f(xyz / WHITE_D65[k]);
    }
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

pub fn srgb_to_lab(p: [u8; 3]) -> [f64; 3] {
    let lin = p.map(|v| srgb_decode(v as f64 / 255.0));
    linear_rgb_to_lab(lin)
}

pub fn lab_to_srgb(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE_D65[0],
        lab_f_inv(fy) * WHITE_D65[1],
        lab_f_inv(fz) * WHITE_D65[2],
    ];
    let mut out = [0u8; 3];
    for (k, row) in XYZ_TO_RGB.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        let v = srgb_encode(lin.max(0.0)) * 255.0;
        out[k] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let (w, h) = (img.width, img.height);
    let lut = linear_lut();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(x, y);
            let lab = linear_rgb_to_lab(p.map(|v| lut[v as usize]));
            for c in 0..3 {
                out[[c, y, x]] = lab[c] as f32;
            }
        }
    }
    LabImage(out)
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let lab = &img.0;
    let rows: Vec<Vec<u8>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w * 3);
            for x in 0..w {
                let p = [lab[[0, y, x]], lab[[1, y, x]], lab[[2, y, x]]].map(f64::from);
                row.extend_from_slice(&lab_to_srgb(p));
            }
            row
        })
        .collect();
    RgbImage {
        width: w,
        height: h,
        data: rows.concat(),
    }
}

pub fn split_lab(img: &LabImage) -> (LChannel, AbChannels) {
    let l = img.0.index_axis(Axis(0), 0).to_owned();
    let ab = img.0.slice(ndarray::s![1..3, .., ..]).to_owned();
    (LChannel(l), AbChannels(ab))
}

pub fn merge_lab(l: &LChannel, ab: &AbChannels) -> Result<LabImage> {
    if l.height() != ab.height() || l.width() != ab.width() {
        return Err(Error::shape(format!(
            "L is {}x{} but ab is {}x{}",
            l.height(),
            l.width(),
            ab.height(),
            ab.width()
        )));
    }
    let mut out = Array3::zeros((3, l.height(), l.width()));
    out.index_axis_mut(Axis(0), 0).assign(&l.0);
    out.slice_mut(ndarray::s![1..3, .., ..]).assign(&ab.0);
    Ok(LabImage(out))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_plane(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = src.dim();
    if in_h == out_h && in_w == out_w {
        return src.to_owned();
    }
    let ys = axis_taps(in_h, out_h);
    let xs = axis_taps(in_w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, wy) = ys[y];
        let (x0, x1, wx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
        let bottom = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
        top * (1.0 - wy) + bottom * wy
    })
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// Resizes the full frame to `side x side`. Aspect ratio is not preserved.
pub fn resize_to_input(img: &RgbImage, side: usize) -> Result<RgbImage> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArgument("cannot resize an empty image".into()));
    }
    if side < 8 {
        return Err(Error::InvalidArgument(format!("resize side {side} below minimum of 8")));
    }
    if img.width == side && img.height == side {
        return Ok(img.clone());
    }
    let mut data = vec![0u8; side * side * 3];
    for c in 0..3 {
        let plane = Array2::from_shape_fn((img.height, img.width), |(y, x)| {
            img.data[(y * img.width + x) * 3 + c] as f32
        });
        let resized = resize_plane(plane.view(), side, side);
        for (i, v) in resized.iter().enumerate() {
            data[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(RgbImage {
        width: side,
        height: side,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let w = srgb_to_lab([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-3 && w[2].abs() < 1e-3, "{w:?}");
        let k = srgb_to_lab([0, 0, 0]);
        assert!(k.iter().all(|v| v.abs() < 1e-3));
        assert_eq!(lab_to_srgb([100.0, 0.0, 0.0]), [255, 255, 255]);
        assert_eq!(lab_to_srgb([0.0, 0.0, 0.0]), [0, 0, 0]);
    }

    #[test]
    fn grey_axis_is_neutral_and_monotone() {
        let mut last = -1.0;
        for g in 0..=255u8 {
            let lab = srgb_to_lab([g, g, g]);
            assert!(lab[1].abs() <= 0.5 && lab[2].abs() <= 0.5);
            assert!(lab[0] > last);
            last = lab[0];
        }
    }

    #[test]
    fn split_merge_identity_and_shapes() {
        let img = RgbImage::from_fn(224, 224, |x, y| [x as u8, y as u8, (x ^ y) as u8]);
        let lab = rgb_to_lab(&img);
        let (l, ab) = split_lab(&lab);
        assert_eq!(l.0.dim(), (224, 224));
        assert_eq!(ab.0.dim(), (2, 224, 224));
        assert_eq!(merge_lab(&l, &ab).unwrap(), lab);
    }

    #[test]
    fn merge_rejects_mismatched_heights() {
        let l = LChannel(Array2::zeros((10, 8)));
        let ab = AbChannels::zeros(9, 8);
        assert!(matches!(merge_lab(&l, &ab), Err(Error::Shape(_))));
    }

    #[test]
    fn resize_identity_and_shape() {
        let img = RgbImage::from_fn(224, 224, |x, y| [(x * 7) as u8, (y * 3) as u8, 9]);
        assert_eq!(resize_to_input(&img, 224).unwrap(), img);
        let odd = RgbImage::from_fn(100, 50, |x, _| [x as u8, 0, 0]);
        let r = resize_to_input(&odd, 224).unwrap();
        assert_eq!((r.width(), r.height()), (224, 224));
    }

    #[test]
    fn resize_rejects_degenerate() {
        let empty = RgbImage::new(0, 4, vec![]).unwrap();
        assert!(resize_to_input(&empty, 224).is_err());
        let img = RgbImage::from_fn(4, 4, |_, _| [0, 0, 0]);
        assert!(resize_to_input(&img, 4).is_err());
    }

    #[test]
    fn rgb_buffer_length_checked() {
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
    }
}
