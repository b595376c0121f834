use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use ucapsnet::checkpoint::{Checkpoint, FORMAT_VERSION};
use ucapsnet::colourspace::RgbImage;
use ucapsnet::evaluation::{colourise, compose_gallery, evaluate, predict_ab, GalleryEntry};
use ucapsnet::gamut::{DecodeMethod, GamutPalette};
use ucapsnet::generator::stage_plan;
use ucapsnet::nn::Parameterized;
use ucapsnet::training::{DatasetManifest, FitOptions, TrainConfig, TrainVariant, Trainer};
use ucapsnet::Error;

#[derive(Parser, Debug)]
#[command(name = "ucapsnet", version, about = "Capsule U-Net image colourisation")]
struct Cli {
    #[command(flatten)]
    global: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by all subcommands. Flags override the config file, which
/// overrides the built-in defaults.
#[derive(Args, Debug, Clone)]
struct Overrides {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// Palette grid size in ab units
    #[arg(long, global = true)]
    grid: Option<f32>,
    #[arg(long, global = true)]
    epochs: Option<u64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum VariantArg {
    Q,
    #[value(name = "q_gan")]
    QGan,
    #[value(name = "ab_gan")]
    AbGan,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum DecodeArg {
    Mode,
    #[value(name = "annealed_mean")]
    AnnealedMean,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the in-gamut palette and export it as CSV
    Palette {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a manifest of colour images
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoints and the metrics log
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Colourise one image or every image in a folder
    Colourise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        decode: Option<DecodeArg>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
    },
    /// Score a checkpoint on a manifest and write a CSV report
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        decode: Option<DecodeArg>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
    },
    /// Write a grayscale / prediction / ground-truth comparison grid
    Gallery {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        limit: usize,
    },
    /// Print a checkpoint's header, configuration and tensor table
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn decode_method(arg: Option<DecodeArg>, temperature: f32) -> Option<DecodeMethod> {
    arg.map(|a| match a {
        DecodeArg::Mode => DecodeMethod::Mode,
        DecodeArg::AnnealedMean => DecodeMethod::AnnealedMean { temperature },
    })
}

fn resolve(o: &Overrides) -> ucapsnet::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &o.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    apply_flags(&mut cfg, o);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_flags(cfg: &mut TrainConfig, o: &Overrides) {
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(v) = o.variant {
        cfg.variant = match v {
            VariantArg::Q => TrainVariant::Q,
            VariantArg::QGan => TrainVariant::QGan,
            VariantArg::AbGan => TrainVariant::AbGan,
        };
    }
    if let Some(g) = o.grid {
        cfg.grid = g;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = o.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.learning_rate = lr;
    }
    if o.deterministic {
        cfg.deterministic = true;
    }
}

fn print_config(title: &str, text: &str) {
    eprintln!("# {title}");
    for line in text.lines() {
        eprintln!("  {line}");
    }
}

fn load_trainer(path: &Path) -> ucapsnet::Result<Trainer> {
    let ckpt = Checkpoint::load(path)?;
    print_config(&format!("configuration from {}", path.display()), &ckpt.config);
    Trainer::from_checkpoint(&ckpt)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn run(cli: Cli) -> ucapsnet::Result<()> {
    match cli.command {
        Command::Palette { out } => {
            let cfg = resolve(&cli.global)?;
            print_config("resolved configuration", &format!("grid={}\n", cfg.grid));
            let palette = GamutPalette::build(cfg.grid)?;
            palette.write_csv(BufWriter::new(fs::File::create(&out)?))?;
            info!("wrote {} bins to {}", palette.len(), out.display());
        }
        Command::Train {
            manifest,
            out,
            ckpt,
            max_steps,
        } => {
            let mut trainer = match ckpt {
                Some(path) => {
                    let mut t = load_trainer(&path)?;
                    apply_flags(&mut t.cfg, &cli.global);
                    t.cfg.validate()?;
                    t
                }
                None => {
                    let cfg = resolve(&cli.global)?;
                    let palette = GamutPalette::build(cfg.grid)?;
                    Trainer::new(cfg, palette)?
                }
            };
            print_config("resolved configuration", &trainer.cfg.to_text());
            let manifest = DatasetManifest::load(&manifest)?;
            let (samples, skipped) = manifest.load_samples(trainer.cfg.input_side);
            if !skipped.is_empty() {
                warn!("skipped {} unreadable image(s)", skipped.len());
            }
            fs::create_dir_all(&out)?;
            let opts = FitOptions {
                checkpoint_dir: Some(out.clone()),
                metrics_path: Some(out.join("metrics.csv")),
                max_steps,
            };
            let history = trainer.fit(&samples, &opts)?;
            if let Some(last) = history.last() {
                info!("finished at step {} (total {:.5})", last.step, last.total);
            }
        }
        Command::Colourise {
            ckpt,
            input,
            out,
            decode,
            temperature,
        } => {
            let mut t = load_trainer(&ckpt)?;
            let method = decode_method(decode, temperature).unwrap_or(t.cfg.decode_method);
            let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
                fs::create_dir_all(&out)?;
                let mut files: Vec<PathBuf> = fs::read_dir(&input)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file() && is_image(p))
                    .collect();
                files.sort();
                files
                    .into_iter()
                    .map(|p| {
                        let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                        let dst = out.join(format!("{name}.png"));
                        (p, dst)
                    })
                    .collect()
            } else {
                vec![(input, out)]
            };
            for (src, dst) in jobs {
                let img = RgbImage::load(&src)?;
                let coloured = colourise(&mut t.generator, &t.palette, method, &img)?;
                coloured.save(&dst)?;
                info!("{} -> {}", src.display(), dst.display());
            }
        }
        Command::Evaluate {
            ckpt,
            manifest,
            out,
            decode,
            temperature,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            print_config(&format!("configuration from {}", ckpt.display()), &checkpoint.config);
            let manifest = DatasetManifest::load(&manifest)?;
            let report = evaluate(&checkpoint, &manifest, decode_method(decode, temperature))?;
            report.write_csv(BufWriter::new(fs::File::create(&out)?))?;
            match report.mean() {
                Some(m) => info!("{} image(s), mean PSNR {m:.3} dB", report.rows.len()),
                None => info!("no images evaluated"),
            }
        }
        Command::Gallery {
            ckpt,
            manifest,
            out,
            limit,
        } => {
            let mut t = load_trainer(&ckpt)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let side = t.cfg.input_side;
            let mut entries = Vec::new();
            for p in manifest.paths.iter().take(limit) {
                let img = match RgbImage::load(&manifest.resolve(p)) {
                    Ok(img) => img,
                    Err(e) => {
                        warn!("skipping {}: {e}", p.display());
                        continue;
                    }
                };
                let sample = ucapsnet::training::prepare_sample(p.clone(), &img, side)?;
                let predicted_ab = predict_ab(&mut t.generator, &t.palette, t.cfg.decode_method, &sample.l)?;
                entries.push(GalleryEntry {
                    original: img,
                    predicted_ab,
                });
            }
            compose_gallery(&entries, side)?.save(&out)?;
        }
        Command::Inspect { ckpt } => {
            let bytes = fs::read(&ckpt)?;
            let c = Checkpoint::from_bytes(&bytes)?;
            println!("file: {} ({} bytes)", ckpt.display(), bytes.len());
            println!("format version: {FORMAT_VERSION}, checksum ok");
            println!("configuration:");
            for line in c.config.lines() {
                println!("  {line}");
            }
            println!("blocks: {}", c.blocks.len());
            for b in &c.blocks {
                println!("  {:<48} {:?}", b.name, b.shape);
            }
            let t = Trainer::from_checkpoint(&c)?;
            println!("generator parameters: {}", t.generator.param_count());
            println!("discriminator parameters: {}", t.discriminator.param_count());
            println!("stage plan:");
            for s in stage_plan(&t.generator.cfg) {
                println!("  {:<12} {:>6} x {}", s.name, s.channels, s.side);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("UCAPS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
