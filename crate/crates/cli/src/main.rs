//! `olc-hdr`: data synthesis, two-stage training, inference, evaluation and
//! codebook inspection.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 checkpoint incompatible with the requested architecture.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Parser, Subcommand};
use olc_hdr::autoencoder::{self, load_olc};
use olc_hdr::datasets::{load_dataset, load_scene, synth_scene, write_hdr, write_preview, write_scene};
use olc_hdr::evaluation::{self, DEFAULT_OVERLAP, DEFAULT_TILE};
use olc_hdr::hdrnet::{self, load_hdr};

use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "olc-hdr", version, about = "Multi-exposure HDR reconstruction with an overlapped VQ codebook")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device (only `cpu` is available in this build).
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset in the scene directory layout.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 1: train the VQ autoencoder with the overlapped codebook.
    TrainOlc {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory (default: `<out>/step1`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory (default: `data` from the config).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Step 2: train the HDR network on top of a Step-1 checkpoint.
    TrainHdr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        step1: PathBuf,
        /// Checkpoint directory (default: `<out>/step2`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct one scene; writes Radiance HDR and a tone-mapped PNG preview.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-scene and mean PSNR/SSIM in the linear and tone-mapped domains.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Code-usage histograms for full and per-exposure quantization.
    InspectCodebook {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Checkpoint(String),
    Runtime(String),
}

impl From<olc_hdr::Error> for Failure {
    fn from(e: olc_hdr::Error) -> Self {
        match e {
            olc_hdr::Error::IncompatibleCheckpoint { .. } => Self::Checkpoint(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Usage(format!("invalid config: {e}"))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (2, m),
                Failure::Checkpoint(m) => (3, m),
                Failure::Runtime(m) => (1, m),
            };
            eprintln!("error: {}", msg.lines().next().unwrap_or_default());
            ExitCode::from(code)
        }
    }
}

fn device(name: &str) -> Result<Device, Failure> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => Err(Failure::Usage(format!("unsupported device `{other}` (available: cpu)"))),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(path)?.resolve(seed)?)
}

fn out_dir(cfg: &RunConfig, explicit: Option<PathBuf>, stage: &str) -> Result<PathBuf, Failure> {
    explicit
        .or_else(|| cfg.out.as_ref().map(|o| o.join(stage)))
        .ok_or_else(|| Failure::Usage(format!("no output directory: pass --out or set `out` in the config")))
}

fn data_dir(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf, Failure> {
    explicit
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Failure::Usage("no dataset: pass --data or set `data` in the config".into()))
}

fn run(cli: Cli) -> Outcome {
    let dev = device(&cli.device)?;
    match cli.command {
        Command::SynthData { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let base = cfg.seed.unwrap_or(0);
            fs::create_dir_all(&out)?;
            for i in 0..cfg.synth.scenes {
                let scene = synth_scene(&cfg.synth.scene, base.wrapping_add(i as u64))?;
                write_scene(&scene, &out.join(format!("scene_{i:04}")))?;
            }
            cfg.write_resolved(&out)?;
            log::info!("wrote {} scenes to {}", cfg.synth.scenes, out.display());
        }
        Command::TrainOlc { config, out, data } => {
            let cfg = load_config(&config, cli.seed)?;
            let out = out_dir(&cfg, out, "step1")?;
            let scenes = load_dataset(&data_dir(&cfg, data)?)?;
            let trainer = autoencoder::train_olc(cfg.olc.clone(), scenes, &out, &dev)?;
            cfg.write_resolved(&out)?;
            log::info!(
                "step 1 finished after {} steps (train PSNR-mu {:.2} dB) -> {}",
                trainer.step_count(),
                trainer.last_psnr().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::TrainHdr { config, step1, out, data } => {
            let cfg = load_config(&config, cli.seed)?;
            let out = out_dir(&cfg, out, "step2")?;
            let scenes = load_dataset(&data_dir(&cfg, data)?)?;
            let step1 = cfg.hdr.arch.use_dvq.then_some(step1.as_path());
            let trainer = hdrnet::train_hdr(cfg.hdr.clone(), scenes, step1, &out, &dev)?;
            cfg.write_resolved(&out)?;
            log::info!(
                "step 2 finished after {} steps (train PSNR-mu {:.2} dB) -> {}",
                trainer.step_count(),
                trainer.last_psnr().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Infer { ckpt, scene, out } => {
            let (model, _, manifest) = load_hdr(&ckpt, &dev)?;
            let scene = load_scene(&scene)?;
            let pred = model.predict(&scene.stack, manifest.config.gamma, DEFAULT_TILE, DEFAULT_OVERLAP)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_hdr(&out, &pred)?;
            let preview = out.with_extension("png");
            write_preview(&preview, &pred, manifest.config.mu)?;
            log::info!("wrote {} and {}", out.display(), preview.display());
        }
        Command::Eval { ckpt, data, report } => {
            let (model, _, manifest) = load_hdr(&ckpt, &dev)?;
            let scenes = load_dataset(&data)?;
            let reports = evaluation::evaluate_model(&model, &scenes, manifest.config.gamma, manifest.config.mu)?;
            let mut file = create(&report)?;
            evaluation::write_report(&mut file, &reports)?;
            let agg = evaluation::aggregate(&reports);
            log::info!("{} scenes: PSNR-mu {:.2} dB, PSNR-l {:.2} dB", agg.scenes, agg.psnr_mu, agg.psnr_l);
        }
        Command::InspectCodebook { ckpt, data, out } => {
            // A Step-2 checkpoint carries its Step-1 model in a subdirectory.
            let step1 = if ckpt.join(hdrnet::STEP1_DIR).is_dir() {
                ckpt.join(hdrnet::STEP1_DIR)
            } else {
                ckpt
            };
            let (model, _, manifest) = load_olc(&step1, true, &dev)?;
            let scenes = load_dataset(&data)?;
            let usage = evaluation::codebook_usage(&model, &scenes, manifest.config.gamma)?;
            let mut file = create(&out)?;
            for u in &usage {
                writeln!(file, "{}", serde_json::to_string(u).expect("usage serializes"))?;
                log::info!("class {}: {} of {} codes used", u.class, u.used, u.histogram.len());
            }
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>, Failure> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}
