//! PSNR on ab planes, evaluation reports and comparison galleries.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array4, Axis};

use crate::checkpoint::Checkpoint;
use crate::colourspace::{
    lab_to_rgb, merge_lab, resize_to_input, rgb_to_lab, split_lab, AbChannels, LChannel, RgbImage,
};
use crate::error::{Error, Result};
use crate::gamut::{decode_distribution, ColourDistribution, DecodeMethod, GamutPalette};
use crate::generator::{Generator, Variant};
use crate::nn::Mode;
use crate::training::{DatasetManifest, Sample, Trainer};

/// Reported when the normalised MSE falls below 1e-10.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const GALLERY_GUTTER: usize = 4;

pub fn psnr_ab(pred: &AbChannels, gt: &AbChannels) -> Result<f64> {
    if pred.0.dim() != gt.0.dim() {
        return Err(Error::shape(format!("ab {:?} vs {:?}", pred.0.dim(), gt.0.dim())));
    }
    if pred.0.is_empty() {
        return Err(Error::InvalidArgument("PSNR of an empty image".into()));
    }
    let norm = |v: f32| (v as f64 + 128.0) / 256.0;
    let se: f64 = pred
        .0
        .iter()
        .zip(gt.0.iter())
        .map(|(&p, &g)| (norm(p) - norm(g)).powi(2))
        .sum();
    Ok(psnr_from_mse(se / pred.0.len() as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Batch prediction of ab at the network's output side. `l` is `(N, 1, s, s)`
/// in `[0, 1]`.
pub fn predict_ab_batch(
    generator: &mut Generator<f32>,
    palette: &GamutPalette,
    method: DecodeMethod,
    l: &Array4<f32>,
) -> Result<Vec<AbChannels>> {
    let out = generator.forward(l, Mode::Eval)?;
    out.axis_iter(Axis(0))
        .map(|o| match generator.cfg.variant {
            Variant::Q => {
                let z = ColourDistribution(o.view().permuted_axes([1, 2, 0]).to_owned());
                decode_distribution(&z, palette, method)
            }
            Variant::Ab => Ok(AbChannels(o.to_owned())),
        })
        .collect()
}

pub fn predict_ab(
    generator: &mut Generator<f32>,
    palette: &GamutPalette,
    method: DecodeMethod,
    l: &LChannel,
) -> Result<AbChannels> {
    let x = (&l.0 / 100.0).insert_axis(Axis(0)).insert_axis(Axis(0));
    Ok(predict_ab_batch(generator, palette, method, &x)?.remove(0))
}

/// Colourises an image at its own resolution: the prediction is upsampled and
/// merged with the full-resolution luminance.
pub fn colourise(
    generator: &mut Generator<f32>,
    palette: &GamutPalette,
    method: DecodeMethod,
    img: &RgbImage,
) -> Result<RgbImage> {
    let side = generator.cfg.input_side;
    let small = resize_to_input(img, side)?;
    let (l_small, _) = split_lab(&rgb_to_lab(&small));
    let ab = predict_ab(generator, palette, method, &l_small)?;
    let (l_full, _) = split_lab(&rgb_to_lab(img));
    let ab_full = ab.resized(img.height(), img.width());
    Ok(lab_to_rgb(&merge_lab(&l_full, &ab_full)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub path: String,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `key=value` lines echoed into the footer.
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn mean(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64)
    }

    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.psnr_db).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
    }

    /// Population standard deviation.
    pub fn stddev(&self) -> Option<f64> {
        let mean = self.mean()?;
        let var = self.rows.iter().map(|r| (r.psnr_db - mean).powi(2)).sum::<f64>() / self.rows.len() as f64;
        Some(var.sqrt())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "path,psnr_db")?;
        for r in &self.rows {
            writeln!(out, "{},{}", quote_field(&r.path), r.psnr_db)?;
        }
        let agg = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into());
        writeln!(out, "# count={}", self.rows.len())?;
        writeln!(out, "# mean={}", agg(self.mean()))?;
        writeln!(out, "# median={}", agg(self.median()))?;
        writeln!(out, "# stddev={}", agg(self.stddev()))?;
        for (k, v) in &self.config {
            writeln!(out, "# config {k}={v}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != ["path", "psnr_db"] {
            return Err(Error::parse("report", format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::parse("report", format!("expected 2 fields, got {}", rec.len())));
            }
            let psnr_db = rec[1]
                .parse::<f64>()
                .map_err(|e| Error::parse("report", format!("psnr `{}`: {e}", &rec[1])))?;
            rows.push(EvalRow {
                path: rec[0].to_string(),
                psnr_db,
            });
        }
        let mut config = Vec::new();
        let mut count = None;
        for line in text.lines().filter(|l| l.starts_with('#')) {
            let body = line[1..].trim();
            if let Some(kv) = body.strip_prefix("config ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::parse("report", format!("bad config line `{line}`")))?;
                config.push((k.to_string(), v.to_string()));
            } else if let Some(c) = body.strip_prefix("count=") {
                count = Some(
                    c.parse::<usize>()
                        .map_err(|e| Error::parse("report", format!("count: {e}")))?,
                );
            }
        }
        if let Some(c) = count {
            if c != rows.len() {
                return Err(Error::parse("report", format!("footer count {c} but {} rows", rows.len())));
            }
        }
        Ok(EvalReport { rows, config })
    }
}

fn quote_field(f: &str) -> String {
    if f.starts_with('#') || f.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_string()
    }
}

/// Scores every sample against its own ground truth.
pub fn evaluate_samples(
    generator: &mut Generator<f32>,
    palette: &GamutPalette,
    method: DecodeMethod,
    samples: &[Sample],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let side = generator.cfg.input_side;
        let mut l = Array4::zeros((chunk.len(), 1, side, side));
        for (i, s) in chunk.iter().enumerate() {
            if s.l.0.dim() != (side, side) {
                return Err(Error::shape(format!("{}: sample side does not match the model", s.path.display())));
            }
            l.slice_mut(s![i, 0, .., ..]).assign(&(&s.l.0 / 100.0));
        }
        let preds = predict_ab_batch(generator, palette, method, &l)?;
        for (s, p) in chunk.iter().zip(&preds) {
            rows.push(EvalRow {
                path: s.path.display().to_string(),
                psnr_db: psnr_ab(p, &s.ab)?,
            });
        }
    }
    Ok(EvalReport { rows, config: Vec::new() })
}

/// Constant ab = (0, 0) predictor.
pub fn gray_baseline(samples: &[Sample]) -> Result<EvalReport> {
    let rows = samples
        .iter()
        .map(|s| {
            Ok(EvalRow {
                path: s.path.display().to_string(),
                psnr_db: psnr_ab(&AbChannels::zeros(s.ab.height(), s.ab.width()), &s.ab)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { rows, config: Vec::new() })
}

/// Loads the model from `ckpt`, scores every readable manifest image and
/// echoes the checkpoint configuration. `method` overrides the configured
/// decode.
pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, method: Option<DecodeMethod>) -> Result<EvalReport> {
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    let method = method.unwrap_or(trainer.cfg.decode_method);
    let (samples, _) = manifest.load_samples(trainer.cfg.input_side);
    let mut report = evaluate_samples(&mut trainer.generator, &trainer.palette, method, &samples)?;
    report.config = crate::config::parse_key_values(&trainer.cfg.to_text())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GalleryEntry {
    /// Ground-truth colour image.
    pub original: RgbImage,
    /// Predicted ab at any resolution.
    pub predicted_ab: AbChannels,
}

/// Rows of (grayscale input, prediction, ground truth) tiles, each tile
/// `tile x tile`, separated by white gutters.
pub fn compose_gallery(entries: &[GalleryEntry], tile: usize) -> Result<RgbImage> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("gallery needs at least one image".into()));
    }
    let g = GALLERY_GUTTER;
    let width = 3 * tile + 4 * g;
    let height = entries.len() * tile + (entries.len() + 1) * g;
    let mut canvas = vec![255u8; width * height * 3];
    for (row, e) in entries.iter().enumerate() {
        let truth = resize_to_input(&e.original, tile)?;
        let (l, _) = split_lab(&rgb_to_lab(&truth));
        let gray = lab_to_rgb(&merge_lab(&l, &AbChannels::zeros(tile, tile))?);
        let ab = e.predicted_ab.resized(tile, tile);
        let pred = lab_to_rgb(&merge_lab(&l, &ab)?);
        let top = g + row * (tile + g);
        for (col, img) in [&gray, &pred, &truth].into_iter().enumerate() {
            let left = g + col * (tile + g);
            for y in 0..tile {
                let src = &img.data()[y * tile * 3..(y + 1) * tile * 3];
                let start = ((top + y) * width + left) * 3;
                canvas[start..start + tile * 3].copy_from_slice(src);
            }
        }
    }
    RgbImage::new(width, height, canvas)
}

pub fn emit_gallery(entries: &[GalleryEntry], tile: usize, path: &Path) -> Result<()> {
    compose_gallery(entries, tile)?.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn psnr_closed_forms() {
        let a = AbChannels(Array3::from_elem((2, 4, 4), 10.0));
        assert_eq!(psnr_ab(&a, &a).unwrap(), PSNR_CAP_DB);
        // Offset of 25.6 ab units is 0.1 after normalisation: MSE 0.01, 20 dB.
        let b = AbChannels(a.0.mapv(|v| v + 25.6));
        assert!((psnr_ab(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr_ab(&a, &AbChannels::zeros(3, 4)).is_err());
    }

    #[test]
    fn empty_report_aggregates_undefined() {
        let r = EvalReport::default();
        assert_eq!(r.mean(), None);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path,psnr_db\n"));
        assert!(text.contains("# mean=undefined"));
        assert_eq!(EvalReport::read_csv(text.as_bytes()).unwrap(), r);
    }

    #[test]
    fn median_even_and_odd() {
        let mk = |v: &[f64]| EvalReport {
            rows: v.iter().map(|&p| EvalRow { path: "x".into(), psnr_db: p }).collect(),
            config: vec![],
        };
        assert_eq!(mk(&[3.0, 1.0, 2.0]).median(), Some(2.0));
        assert_eq!(mk(&[4.0, 1.0, 2.0, 3.0]).median(), Some(2.5));
        assert_eq!(mk(&[2.0, 4.0]).stddev(), Some(1.0));
    }
}
