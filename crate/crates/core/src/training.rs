//! Self-supervised pairs, the adversarial training loop, metrics logging and
//! checkpoint state.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;

use ndarray::{s, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::capsule::RoutingConfig;
use crate::checkpoint::{Block, Checkpoint};
use crate::colourspace::{
    resize_plane, resize_to_input, rgb_to_lab, split_lab, AbChannels, LChannel, RgbImage, AB_GAMUT_EXTENT,
};
use crate::config::{parse_bool, parse_key_values, parse_value, unknown_key};
use crate::discriminator::{pair_input, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::gamut::{annealed_mean, annealed_mean_backward, encode_ab, ColourDistribution, DecodeMethod, EncodeMode, GamutPalette};
use crate::generator::{Generator, GeneratorConfig, Variant};
use crate::losses::{
    d_loss_grads, g_loss_grad, gan_terms, generator_objective, l1_batch, mse_batch, quantization_loss_batch,
    LossWeights,
};
use crate::nn::{Adam, AdamConfig, Mode, Parameterized, SlotMut};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainVariant {
    /// Quantization loss only.
    Q,
    /// Quantization loss with the adversarial and L1 terms.
    QGan,
    /// Direct ab regression, mean squared error in place of the
    /// quantization loss.
    AbGan,
}

impl TrainVariant {
    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::Q => "q",
            TrainVariant::QGan => "q_gan",
            TrainVariant::AbGan => "ab_gan",
        }
    }

    pub fn generator_variant(self) -> Variant {
        match self {
            TrainVariant::Q | TrainVariant::QGan => Variant::Q,
            TrainVariant::AbGan => Variant::Ab,
        }
    }

    pub fn adversarial(self) -> bool {
        self != TrainVariant::Q
    }
}

impl FromStr for TrainVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(TrainVariant::Q),
            "q_gan" => Ok(TrainVariant::QGan),
            "ab_gan" => Ok(TrainVariant::AbGan),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected q, q_gan or ab_gan)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: TrainVariant,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub encode_mode: EncodeMode,
    pub decode_method: DecodeMethod,
    pub deterministic: bool,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub grid: f32,
    pub input_side: usize,
    pub base_channels: usize,
    pub dropout_p: f64,
    pub routing_iterations: usize,
    pub d_widths: [usize; 4],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: TrainVariant::Q,
            seed: 0,
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            encode_mode: EncodeMode::Hard,
            decode_method: DecodeMethod::Mode,
            deterministic: false,
            checkpoint_every: 0,
            grid: 10.0,
            input_side: 224,
            base_channels: 64,
            dropout_p: 0.5,
            routing_iterations: 3,
            d_widths: [64, 128, 256, 512],
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "variant",
        "seed",
        "learning_rate",
        "batch_size",
        "epochs",
        "adam_beta1",
        "adam_beta2",
        "w_gan",
        "w_l1",
        "w_cl",
        "encode",
        "soft_k",
        "soft_sigma",
        "decode",
        "temperature",
        "deterministic",
        "checkpoint_every",
        "grid",
        "input_side",
        "base_channels",
        "dropout_p",
        "routing_iterations",
        "d_widths",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "w_gan" => self.weights.w_gan = parse_value(key, value)?,
            "w_l1" => self.weights.w_l1 = parse_value(key, value)?,
            "w_cl" => self.weights.w_cl = parse_value(key, value)?,
            "encode" => {
                self.encode_mode = match value {
                    "hard" => EncodeMode::Hard,
                    "soft" => match self.encode_mode {
                        EncodeMode::Soft { .. } => self.encode_mode,
                        EncodeMode::Hard => EncodeMode::SOFT_DEFAULT,
                    },
                    _ => return Err(Error::Config(format!("encode: expected hard or soft, got `{value}`"))),
                }
            }
            "soft_k" | "soft_sigma" => {
                let (mut k, mut sigma) = match self.encode_mode {
                    EncodeMode::Soft { k, sigma } => (k, sigma),
                    EncodeMode::Hard => match EncodeMode::SOFT_DEFAULT {
                        EncodeMode::Soft { k, sigma } => (k, sigma),
                        EncodeMode::Hard => unreachable!(),
                    },
                };
                if key == "soft_k" {
                    k = parse_value(key, value)?;
                } else {
                    sigma = parse_value(key, value)?;
                }
                self.encode_mode = EncodeMode::Soft { k, sigma };
            }
            "decode" => {
                self.decode_method = match value {
                    "mode" => DecodeMethod::Mode,
                    "annealed_mean" => match self.decode_method {
                        DecodeMethod::AnnealedMean { .. } => self.decode_method,
                        DecodeMethod::Mode => DecodeMethod::AnnealedMean { temperature: 1.0 },
                    },
                    _ => return Err(Error::Config(format!("decode: expected mode or annealed_mean, got `{value}`"))),
                }
            }
            "temperature" => {
                self.decode_method = DecodeMethod::AnnealedMean {
                    temperature: parse_value(key, value)?,
                }
            }
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "grid" => self.grid = parse_value(key, value)?,
            "input_side" => self.input_side = parse_value(key, value)?,
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "dropout_p" => self.dropout_p = parse_value(key, value)?,
            "routing_iterations" => self.routing_iterations = parse_value(key, value)?,
            "d_widths" => {
                let parts = value
                    .split(',')
                    .map(|p| parse_value::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.d_widths = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("d_widths: expected four comma-separated widths, got `{value}`")))?;
            }
            _ => return Err(unknown_key(key, Self::KEYS)),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("variant", self.variant.name().into());
        kv("seed", self.seed.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("w_gan", self.weights.w_gan.to_string());
        kv("w_l1", self.weights.w_l1.to_string());
        kv("w_cl", self.weights.w_cl.to_string());
        match self.encode_mode {
            EncodeMode::Hard => kv("encode", "hard".into()),
            EncodeMode::Soft { k, sigma } => {
                kv("encode", "soft".into());
                kv("soft_k", k.to_string());
                kv("soft_sigma", sigma.to_string());
            }
        }
        match self.decode_method {
            DecodeMethod::Mode => kv("decode", "mode".into()),
            DecodeMethod::AnnealedMean { temperature } => {
                kv("decode", "annealed_mean".into());
                kv("temperature", temperature.to_string());
            }
        }
        kv("deterministic", self.deterministic.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("grid", self.grid.to_string());
        kv("input_side", self.input_side.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("dropout_p", self.dropout_p.to_string());
        kv("routing_iterations", self.routing_iterations.to_string());
        kv(
            "d_widths",
            self.d_widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.grid > 0.0) {
            return Err(Error::Config(format!("grid must be > 0, got {}", self.grid)));
        }
        if let EncodeMode::Soft { k, sigma } = self.encode_mode {
            if k == 0 || !(sigma > 0.0) {
                return Err(Error::Config(format!("soft encoding needs k >= 1 and sigma > 0, got k={k} sigma={sigma}")));
            }
        }
        if let DecodeMethod::AnnealedMean { temperature } = self.decode_method {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
            }
        }
        self.weights.validate()?;
        self.generator_config(1).validate()?;
        let d = self.discriminator_config();
        d.validate()?;
        if self.variant.adversarial() && d.output_side(self.input_side / 4).is_none() {
            return Err(Error::Config(format!(
                "input_side {} leaves no room for the patch discriminator (needs at least 96)",
                self.input_side
            )));
        }
        Ok(())
    }

    pub fn generator_config(&self, q_bins: usize) -> GeneratorConfig {
        GeneratorConfig {
            variant: self.variant.generator_variant(),
            input_side: self.input_side,
            base_channels: self.base_channels,
            q_bins,
            dropout_p: self.dropout_p,
            seed: self.seed,
            routing: RoutingConfig {
                iterations: self.routing_iterations,
                ..RoutingConfig::default()
            },
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            widths: self.d_widths,
            seed: self.seed.wrapping_add(1),
            ..DiscriminatorConfig::default()
        }
    }

    /// Loss weights actually applied for the configured variant.
    pub fn effective_weights(&self) -> LossWeights {
        match self.variant {
            TrainVariant::Q => LossWeights {
                w_gan: 0.0,
                w_l1: 0.0,
                w_cl: self.weights.w_cl,
            },
            _ => self.weights,
        }
    }
}

/// Newline-separated image paths, relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub paths: Vec<PathBuf>,
    pub split: String,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path, split: &str) -> Result<Self> {
        let mut paths = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.contains('\0') {
                return Err(Error::parse("manifest", format!("line {}: NUL byte in path", i + 1)));
            }
            paths.push(PathBuf::from(line));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            paths,
            split: split.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        fs::File::open(path)?.read_to_string(&mut text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let split = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
        Self::parse(&text, &root, split)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Decodes every image in manifest order. Unreadable files are skipped
    /// with a warning and reported back.
    pub fn load_samples(&self, input_side: usize) -> (Vec<Sample>, Vec<(PathBuf, Error)>) {
        let results: Vec<(PathBuf, Result<Sample>)> = self
            .paths
            .par_iter()
            .map(|p| {
                let full = self.resolve(p);
                let r = RgbImage::load(&full).and_then(|img| prepare_sample(p.clone(), &img, input_side));
                (full, r)
            })
            .collect();
        let mut ok = Vec::new();
        let mut skipped = Vec::new();
        for (path, r) in results {
            match r {
                Ok(s) => ok.push(s),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push((path, e));
                }
            }
        }
        (ok, skipped)
    }
}

/// A decoded image at training resolution, before target encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    /// `s x s`, in `[0, 100]`.
    pub l: LChannel,
    /// Luminance at the prediction side.
    pub l_small: LChannel,
    /// Ground-truth ab at the prediction side.
    pub ab: AbChannels,
}

pub fn prepare_sample(path: PathBuf, img: &RgbImage, input_side: usize) -> Result<Sample> {
    let img = resize_to_input(img, input_side)?;
    let (l, ab) = split_lab(&rgb_to_lab(&img));
    let out = input_side / 4;
    let l_small = LChannel(resize_plane(l.0.view(), out, out));
    let ab = ab.resized(out, out);
    Ok(Sample { path, l, l_small, ab })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub l: LChannel,
    pub z: ColourDistribution,
    pub ab: AbChannels,
}

pub fn make_training_pair(
    img: &RgbImage,
    palette: &GamutPalette,
    input_side: usize,
    mode: EncodeMode,
) -> Result<TrainingPair> {
    let s = prepare_sample(PathBuf::new(), img, input_side)?;
    let z = encode_ab(&s.ab, palette, mode)?;
    Ok(TrainingPair { l: s.l, z, ab: s.ab })
}

/// Stacked network inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(N, 1, s, s)`, luminance / 100.
    pub l: Array4<f32>,
    /// `(N, 1, s/4, s/4)`, luminance / 100.
    pub l_small: Array4<f32>,
    /// `(N, Q, s/4, s/4)` target distributions.
    pub z: Array4<f32>,
    /// `(N, 2, s/4, s/4)` ground-truth ab.
    pub ab: Array4<f32>,
}

impl Batch {
    pub fn assemble(samples: &[&Sample], palette: &GamutPalette, mode: EncodeMode) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (side, out) = (first.l.0.nrows(), first.ab.height());
        let n = samples.len();
        let q = palette.len();
        let mut batch = Batch {
            l: Array4::zeros((n, 1, side, side)),
            l_small: Array4::zeros((n, 1, out, out)),
            z: Array4::zeros((n, q, out, out)),
            ab: Array4::zeros((n, 2, out, out)),
        };
        for (i, s) in samples.iter().enumerate() {
            if s.l.0.dim() != (side, side) || s.ab.0.dim() != (2, out, out) {
                return Err(Error::shape(format!("sample {} does not match the batch geometry", s.path.display())));
            }
            batch.l.slice_mut(s![i, 0, .., ..]).assign(&(&s.l.0 / 100.0));
            batch.l_small.slice_mut(s![i, 0, .., ..]).assign(&(&s.l_small.0 / 100.0));
            batch.ab.slice_mut(s![i, .., .., ..]).assign(&s.ab.0);
            let z = encode_ab(&s.ab, palette, mode)?;
            batch.z.slice_mut(s![i, .., .., ..]).assign(&z.0.view().permuted_axes([2, 0, 1]));
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.l.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-pixel expectation of the palette centres, `(N, Q, H, W)` to `(N, 2, H, W)`.
pub fn expected_ab(probs: &Array4<f32>, centers: &[[f32; 2]]) -> Array4<f32> {
    let (n, q, h, w) = probs.dim();
    let mut out = Array4::zeros((n, 2, h, w));
    let mut buf = vec![0.0f32; q];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = probs[[i, k, y, x]];
                }
                let ab = annealed_mean(&buf, centers, 1.0);
                out[[i, 0, y, x]] = ab[0];
                out[[i, 1, y, x]] = ab[1];
            }
        }
    }
    out
}

pub fn expected_ab_backward(probs: &Array4<f32>, centers: &[[f32; 2]], grad_ab: &Array4<f32>) -> Array4<f32> {
    let (n, q, h, w) = probs.dim();
    let mut grad = Array4::zeros((n, q, h, w));
    let mut buf = vec![0.0f32; q];
    let mut g = vec![0.0f32; q];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = probs[[i, k, y, x]];
                }
                g.fill(0.0);
                annealed_mean_backward(&buf, centers, 1.0, [grad_ab[[i, 0, y, x]], grad_ab[[i, 1, y, x]]], &mut g);
                for (k, v) in g.iter().enumerate() {
                    grad[[i, k, y, x]] = *v;
                }
            }
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    /// Mean absolute ab error, in units of the gamut extent.
    pub l1: f64,
    /// Quantization loss, or the ab mean squared error for the direct-ab
    /// variant.
    pub cl: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,d_loss,g_loss,l1,cl,total";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            opt(self.d_loss),
            opt(self.g_loss),
            self.l1,
            self.cl,
            self.total
        )
    }
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<StepMetrics>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::parse("metrics log", format!("unexpected header `{}`", header.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::parse("metrics log", format!("expected 7 fields, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::parse("metrics log", format!("field {i}: {e}")))
        };
        let opt = |i: usize| -> Result<Option<f64>> { if rec[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
        let int = |i: usize| -> Result<u64> {
            rec[i]
                .parse::<u64>()
                .map_err(|e| Error::parse("metrics log", format!("field {i}: {e}")))
        };
        out.push(StepMetrics {
            step: int(0)?,
            epoch: int(1)?,
            d_loss: opt(2)?,
            g_loss: opt(3)?,
            l1: num(4)?,
            cl: num(5)?,
            total: num(6)?,
        });
    }
    Ok(out)
}

/// Append-only CSV metrics log, flushed after every row.
pub struct MetricsLog {
    out: BufWriter<fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
            out.flush()?;
        }
        Ok(MetricsLog { out })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Periodic and final checkpoints are written here.
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Stop once the global step counter reaches this value.
    pub max_steps: Option<u64>,
}

pub const FINAL_CHECKPOINT: &str = "final.ucap";

pub fn periodic_checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ucap")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Start,
    /// Only reached by the adversarial variants.
    AfterDiscriminator,
    AfterGenerator,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub palette: GamutPalette,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, palette: GamutPalette) -> Result<Self> {
        cfg.validate()?;
        if palette.is_empty() {
            return Err(Error::InvalidArgument("empty palette".into()));
        }
        let adam = AdamConfig {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            ..AdamConfig::default()
        };
        Ok(Trainer {
            generator: Generator::new(cfg.generator_config(palette.len()))?,
            discriminator: Discriminator::new(cfg.discriminator_config())?,
            g_opt: Adam::new(adam),
            d_opt: Adam::new(adam),
            cfg,
            palette,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }

    fn non_finite(&self, detail: &str, out: &Array4<f32>) -> Error {
        let mut items: Vec<usize> = out
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(i, _)| i)
            .collect();
        if items.is_empty() {
            items = (0..out.dim().0).collect();
        }
        Error::NonFinite {
            step: self.step + 1,
            items,
            detail: detail.to_string(),
        }
    }

    /// One optimisation step: a discriminator update followed by a generator
    /// update for the adversarial variants, a generator update alone for Q.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        self.train_step_observed(batch, &mut |_, _| {})
    }

    /// [`Trainer::train_step`] with `observe` called on the discriminator at
    /// each phase boundary.
    pub fn train_step_observed(
        &mut self,
        batch: &Batch,
        observe: &mut dyn FnMut(StepPhase, &Discriminator<f32>),
    ) -> Result<StepMetrics> {
        observe(StepPhase::Start, &self.discriminator);
        let w = self.cfg.effective_weights();
        let k = AB_GAMUT_EXTENT;
        let real_n = batch.ab.mapv(|v| v / k);
        let out = self.generator.forward(&batch.l, Mode::Train)?;
        let centers = self.palette.centers().to_vec();

        let (metrics, grad_out) = match self.cfg.variant {
            TrainVariant::Q => {
                let (cl, g_probs) = quantization_loss_batch(&out, &batch.z)?;
                let fake = expected_ab(&out, &centers);
                let (l1, _) = l1_batch(&fake.mapv(|v| v / k), &real_n)?;
                let total = generator_objective(0.0, l1, cl, &w);
                if !total.is_finite() || !l1.is_finite() {
                    return Err(self.non_finite(&format!("cl={cl} l1={l1}"), &out));
                }
                let m = StepMetrics {
                    step: 0,
                    epoch: self.epoch,
                    d_loss: None,
                    g_loss: None,
                    l1,
                    cl,
                    total,
                };
                (m, g_probs.mapv(|g| g * w.w_cl as f32))
            }
            variant => {
                let fake = match variant {
                    TrainVariant::QGan => expected_ab(&out, &centers),
                    _ => out.clone(),
                };
                let real_pair = pair_input(&batch.l_small, &batch.ab)?;
                let fake_pair = pair_input(&batch.l_small, &fake)?;

                self.discriminator.zero_grad();
                let real_logits = self.discriminator.forward(&real_pair, Mode::Train)?;
                let (g_real, _) = d_loss_grads(&real_logits, &real_logits);
                self.discriminator.backward(&g_real);
                let fake_logits = self.discriminator.forward(&fake_pair, Mode::Train)?;
                let (_, g_fake) = d_loss_grads(&fake_logits, &fake_logits);
                let (d_loss, _) = gan_terms(&real_logits, &fake_logits);
                if !d_loss.is_finite() {
                    return Err(self.non_finite(&format!("d_loss={d_loss}"), &fake_logits));
                }
                self.discriminator.backward(&g_fake);
                self.d_opt.step(&mut self.discriminator);
                observe(StepPhase::AfterDiscriminator, &self.discriminator);

                let logits = self.discriminator.forward(&fake_pair, Mode::TrainFrozenStats)?;
                let (_, g_loss) = gan_terms(&real_logits, &logits);
                let g_pair = self.discriminator.backward(&g_loss_grad(&logits).mapv(|g| g * w.w_gan as f32));
                self.discriminator.zero_grad();
                let mut g_fake_ab = g_pair.slice(s![.., 1..3, .., ..]).mapv(|g| g / k);

                let fake_n = fake.mapv(|v| v / k);
                let (l1, g_l1) = l1_batch(&fake_n, &real_n)?;
                g_fake_ab.scaled_add((w.w_l1 / k as f64) as f32, &g_l1);
                let (cl, grad_out) = if variant == TrainVariant::QGan {
                    let (cl, g_probs) = quantization_loss_batch(&out, &batch.z)?;
                    let g = expected_ab_backward(&out, &centers, &g_fake_ab);
                    (cl, g + &g_probs.mapv(|v| v * w.w_cl as f32))
                } else {
                    let (mse, g_mse) = mse_batch(&fake_n, &real_n)?;
                    g_fake_ab.scaled_add((w.w_cl / k as f64) as f32, &g_mse);
                    (mse, g_fake_ab)
                };
                let total = generator_objective(g_loss, l1, cl, &w);
                if !total.is_finite() {
                    return Err(self.non_finite(&format!("g_loss={g_loss} l1={l1} cl={cl}"), &out));
                }
                let m = StepMetrics {
                    step: 0,
                    epoch: self.epoch,
                    d_loss: Some(d_loss),
                    g_loss: Some(g_loss),
                    l1,
                    cl,
                    total,
                };
                (m, grad_out)
            }
        };

        self.generator.zero_grad();
        self.generator.backward(&grad_out);
        self.g_opt.step(&mut self.generator);
        observe(StepPhase::AfterGenerator, &self.discriminator);
        self.step += 1;
        Ok(StepMetrics { step: self.step, ..metrics })
    }

    fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs the epoch loop from the current counters.
    pub fn fit(&mut self, samples: &[Sample], opts: &FitOptions) -> Result<Vec<StepMetrics>> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no usable training images".into()));
        }
        let mut log = opts.metrics_path.as_deref().map(MetricsLog::open).transpose()?;
        if let Some(dir) = &opts.checkpoint_dir {
            fs::create_dir_all(dir)?;
        }
        let bs = self.cfg.batch_size;
        let per_epoch = samples.len().div_ceil(bs) as u64;
        let mut history = Vec::new();
        let limit = opts.max_steps.unwrap_or(u64::MAX);

        while self.epoch < self.cfg.epochs && self.step < limit {
            let order = self.epoch_order(self.epoch, samples.len());
            let left = (limit - self.step).min(per_epoch - self.batch_in_epoch) as usize;
            let plan: Vec<Vec<usize>> = order
                .chunks(bs)
                .skip(self.batch_in_epoch as usize)
                .take(left)
                .map(<[usize]>::to_vec)
                .collect();
            let palette = self.palette.clone();
            let mode = self.cfg.encode_mode;
            let build = move |idx: &Vec<usize>| {
                let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
                Batch::assemble(&refs, &palette, mode)
            };

            if self.cfg.deterministic {
                for idx in &plan {
                    let batch = build(idx)?;
                    self.after_step(&batch, per_epoch, &mut log, &mut history, opts)?;
                }
            } else {
                std::thread::scope(|scope| -> Result<()> {
                    let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
                    let plan = &plan;
                    let build = &build;
                    scope.spawn(move || {
                        for idx in plan {
                            if tx.send(build(idx)).is_err() {
                                break;
                            }
                        }
                    });
                    for batch in rx {
                        self.after_step(&batch?, per_epoch, &mut log, &mut history, opts)?;
                    }
                    Ok(())
                })?;
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            self.to_checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(history)
    }

    fn after_step(
        &mut self,
        batch: &Batch,
        per_epoch: u64,
        log: &mut Option<MetricsLog>,
        history: &mut Vec<StepMetrics>,
        opts: &FitOptions,
    ) -> Result<()> {
        let m = self.train_step(batch)?;
        self.batch_in_epoch += 1;
        if self.batch_in_epoch == per_epoch {
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
        if let Some(log) = log {
            log.append(&m)?;
        }
        log::info!(
            "step {} epoch {} total {:.5} cl {:.5} l1 {:.5}",
            m.step,
            m.epoch,
            m.total,
            m.cl,
            m.l1
        );
        history.push(m);
        if let (Some(dir), true) = (&opts.checkpoint_dir, self.cfg.checkpoint_every > 0) {
            if self.step.is_multiple_of(self.cfg.checkpoint_every) {
                self.to_checkpoint().save(&dir.join(periodic_checkpoint_name(self.step)))?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = self.cfg.to_text();
        let rng = &self.generator.rng;
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(config, "state.q_bins={}", self.palette.len());
        let _ = writeln!(config, "state.step={}", self.step);
        let _ = writeln!(config, "state.epoch={}", self.epoch);
        let _ = writeln!(config, "state.batch_in_epoch={}", self.batch_in_epoch);
        let _ = writeln!(config, "state.g_adam_steps={}", self.g_opt.steps);
        let _ = writeln!(config, "state.d_adam_steps={}", self.d_opt.steps);
        let _ = writeln!(
            config,
            "state.dropout_rng={seed}:{}:{}",
            rng.get_stream(),
            rng.get_word_pos()
        );

        let mut blocks = Vec::new();
        let centers: Vec<f32> = self.palette.centers().iter().flat_map(|c| [c[0], c[1]]).collect();
        blocks.push(Block {
            name: "palette.centers".into(),
            shape: vec![self.palette.len(), 2],
            data: centers,
        });
        self.generator
            .visit("g", &mut |name, _, v| blocks.push(Block::from_array(name, v)));
        self.discriminator
            .visit("d", &mut |name, _, v| blocks.push(Block::from_array(name, v)));
        for (prefix, opt) in [("g_adam", &self.g_opt), ("d_adam", &self.d_opt)] {
            for (name, m) in &opt.first {
                blocks.push(Block::from_array(format!("{prefix}.m.{name}"), m));
            }
            for (name, v) in &opt.second {
                blocks.push(Block::from_array(format!("{prefix}.v.{name}"), v));
            }
        }
        Checkpoint { config, blocks }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let pairs = parse_key_values(&ckpt.config)?;
        let mut cfg = TrainConfig::default();
        let mut state = std::collections::BTreeMap::new();
        for (k, v) in pairs {
            match k.strip_prefix("state.") {
                Some(s) => {
                    state.insert(s.to_string(), v);
                }
                None => cfg.set(&k, &v)?,
            }
        }
        cfg.validate()?;
        let centers_block = ckpt
            .block("palette.centers")
            .ok_or_else(|| Error::parse("checkpoint", "missing palette.centers"))?;
        if centers_block.shape.len() != 2 || centers_block.shape[1] != 2 {
            return Err(Error::parse("checkpoint", format!("palette.centers has shape {:?}", centers_block.shape)));
        }
        let centers = centers_block.data.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let palette = GamutPalette::from_centers(cfg.grid, centers)?;
        let mut t = Trainer::new(cfg, palette)?;

        let get = |key: &str| -> Result<&String> {
            state
                .get(key)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing state.{key}")))
        };
        let num = |key: &str| -> Result<u64> { parse_value(key, get(key)?) };
        if num("q_bins")? as usize != t.palette.len() {
            return Err(Error::parse("checkpoint", "q_bins disagrees with palette".to_string()));
        }
        t.step = num("step")?;
        t.epoch = num("epoch")?;
        t.batch_in_epoch = num("batch_in_epoch")?;
        t.g_opt.steps = num("g_adam_steps")?;
        t.d_opt.steps = num("d_adam_steps")?;
        t.generator.rng = parse_rng(get("dropout_rng")?)?;

        load_slots(&mut t.generator, "g", ckpt)?;
        load_slots(&mut t.discriminator, "d", ckpt)?;
        for (prefix, opt) in [("g_adam", &mut t.g_opt), ("d_adam", &mut t.d_opt)] {
            for b in &ckpt.blocks {
                if let Some(rest) = b.name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                    if let Some(name) = rest.strip_prefix("m.") {
                        opt.first.insert(name.to_string(), b.to_array());
                    } else if let Some(name) = rest.strip_prefix("v.") {
                        opt.second.insert(name.to_string(), b.to_array());
                    } else {
                        return Err(Error::parse("checkpoint", format!("unexpected block {}", b.name)));
                    }
                }
            }
        }
        Ok(t)
    }
}

fn load_slots(model: &mut impl Parameterized<f32>, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    let mut err = None;
    model.visit_mut(prefix, &mut |name, slot| {
        if err.is_some() {
            return;
        }
        let Some(b) = ckpt.block(name) else {
            err = Some(Error::parse("checkpoint", format!("missing block {name}")));
            return;
        };
        let target: &mut ArrayD<f32> = match slot {
            SlotMut::Param(p) => &mut p.value,
            SlotMut::Buffer(v) => v,
        };
        if target.shape() != b.shape.as_slice() {
            err = Some(Error::shape(format!(
                "block {name}: stored {:?}, model expects {:?}",
                b.shape,
                target.shape()
            )));
            return;
        }
        target.assign(&b.to_array());
    });
    err.map_or(Ok(()), Err)
}

fn parse_rng(text: &str) -> Result<ChaCha8Rng> {
    let bad = || Error::parse("checkpoint", format!("bad rng state `{text}`"));
    let mut parts = text.split(':');
    let (Some(seed_hex), Some(stream), Some(pos), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    if seed_hex.len() != 64 || !seed_hex.is_ascii() {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream.parse().map_err(|_| bad())?);
    rng.set_word_pos(pos.parse().map_err(|_| bad())?);
    Ok(rng)
}
