//! The `dmsr` command line. [`run`] parses arguments, dispatches, and maps
//! outcomes to exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::degradation::{degrade, DegradationSpec, DEFAULT_KERNEL_SIZE, KERNEL_WIDTH_RANGE};
use crate::error::{Error, Result};
use crate::evaluation::{degradation_window, run_benchmark, BicubicBaseline, PerScale, Upscaler};
use crate::image::ImageTensor;
use crate::kernel_space::{build_kernel_pool, compute_pca, PcaProjection, DEFAULT_EMBED_DIM, DEFAULT_POOL_SIZE};
use crate::model::{default_projection, Dmsr, ModelConfig};
use crate::rng;
use crate::training::{finetune_noise_free, load_checkpoint, save_checkpoint, train, Dataset, RateRule, RunOutput, TrainState};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DMSR_OUT_DIR";
pub const SNAPSHOT_FILE: &str = "effective_config.toml";

#[derive(Debug, Parser)]
#[command(name = "dmsr", version, about = "Blind super-resolution with meta-learned denoising and deblurring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Settings the config file is layered on.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Root of all randomness for the run.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Output directory; defaults to $DMSR_OUT_DIR, then `dmsr_out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Validate inputs and configuration, write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size network and training schedule.
    Full,
    /// Tiny network, 5x5 kernels, short schedule.
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Blur, downsample and add noise to an image.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        kernel_width: f64,
        #[arg(long)]
        noise: f64,
        #[arg(long, default_value_t = DEFAULT_KERNEL_SIZE)]
        kernel_size: usize,
    },
    /// Build a Gaussian kernel pool and its principal-component projection.
    Pca {
        #[arg(long, default_value_t = DEFAULT_POOL_SIZE)]
        pool_size: usize,
        #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
        dim: usize,
        #[arg(long, default_value_t = DEFAULT_KERNEL_SIZE)]
        kernel_size: usize,
    },
    /// Train from scratch or resume.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continue a trained checkpoint with noise pinned to zero.
    FinetuneNf {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Super-resolve one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// PSNR/SSIM over a grid of degradations.
    Eval {
        /// Model checkpoints, one per scale. Repeatable.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Evaluate bicubic upsampling instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        bicubic: bool,
        /// `name=dir` or `dir`. Repeatable.
        #[arg(long, required = true)]
        dataset: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        kernel_widths: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        noise_levels: Option<Vec<f64>>,
    },
    /// Tile an image degraded under 6 noise levels x 4 kernel widths.
    Window {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scale: usize,
    },
}

/// What went wrong, sorted by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dmsr_out"))
}

/// Preset, then file, then overrides, then `--seed`.
fn effective_config(common: &Common) -> CliResult<RunConfig> {
    let base = match common.preset {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(2),
    };
    let mut cfg = RunConfig::load(&base, common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

fn seed_of(common: &Common, cfg: &RunConfig) -> u64 {
    common.seed.unwrap_or(cfg.train.seed)
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{} is not a file", p.display())))
    }
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SNAPSHOT_FILE), cfg.to_toml()?)?;
    Ok(())
}

fn write_toml(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let common = &cli.common;
    let cfg = effective_config(common)?;
    let out = out_dir(common);
    match &cli.command {
        Command::Degrade {
            input,
            scale,
            kernel_width,
            noise,
            kernel_size,
        } => {
            require_file(input)?;
            let spec = DegradationSpec::new(*kernel_width, *noise, *scale, seed_of(common, &cfg)).with_kernel_size(*kernel_size);
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            if common.dry_run {
                println!("degrade {}: {spec:?}", input.display());
                return Ok(());
            }
            let img = ImageTensor::read_png(input)?;
            let hr = img.crop_to_multiple(*scale)?;
            if hr.dims() != img.dims() {
                log::warn!("cropped {:?} to {:?} to fit x{scale}", img.dims(), hr.dims());
            }
            let s = degrade(&hr, &spec)?;
            prepare_out(&out, &cfg)?;
            s.lr.write_png(out.join("lr.png"))?;
            s.kernel_gt.write(out.join("kernel.dmkn"))?;
            s.noise_map_gt.write(out.join("noise.dmnm"))?;
            write_toml(&out.join("degradation.toml"), &spec)?;
            println!("wrote {}", out.join("lr.png").display());
        }
        Command::Pca {
            pool_size,
            dim,
            kernel_size,
        } => {
            if common.dry_run {
                println!("pca: {pool_size} kernels of {kernel_size}x{kernel_size}, dim {dim}");
                return Ok(());
            }
            let pool = build_kernel_pool(*pool_size, KERNEL_WIDTH_RANGE, *kernel_size, seed_of(common, &cfg))?;
            let pca = compute_pca(&pool, *dim)?;
            prepare_out(&out, &cfg)?;
            pca.write(out.join("pca.dmpc"))?;
            #[derive(Serialize)]
            struct Summary {
                dim: usize,
                input_dim: usize,
                explained_ratio: f64,
                hash: String,
                eigenvalues: Vec<f64>,
            }
            let ratio = pca.explained_ratio().unwrap_or(f64::NAN);
            write_toml(
                &out.join("pca.toml"),
                &Summary {
                    dim: pca.dim(),
                    input_dim: pca.input_dim(),
                    explained_ratio: ratio,
                    hash: pca.hash(),
                    eigenvalues: pca.eigenvalues().to_vec(),
                },
            )?;
            println!("explained variance at dim {dim}: {ratio:.6}");
        }
        Command::Train { resume } => {
            cfg.validate()?;
            let resume = resume.clone().or_else(|| cfg.paths.checkpoint.clone());
            if let Some(p) = &resume {
                require_file(p)?;
            }
            if let Some(d) = &cfg.paths.train_dir {
                if !d.is_dir() {
                    return Err(Failure::Usage(format!("{} is not a directory", d.display())));
                }
            }
            if common.dry_run {
                println!("train: config valid, {} iterations", cfg.train.total_iters);
                return Ok(());
            }
            let data = training_data(&cfg)?;
            let mut state = match &resume {
                Some(p) => load_checkpoint(p, Some(&cfg.model))?,
                None => {
                    let pca = projection(&cfg)?;
                    TrainState::new(Dmsr::new(cfg.model.clone(), &pca, cfg.train.seed)?, pca.hash(), cfg.train.seed)
                }
            };
            prepare_out(&out, &cfg)?;
            run_training(&mut state, &out, "train_log.csv", |st, o| {
                train(st, &data, &cfg.train_config(), cfg.train.total_iters, RateRule::Schedule, o).map(|_| ())
            })?;
            save_checkpoint(&state, out.join("model.dmcp"))?;
            println!("trained to iteration {}; wrote {}", state.iteration, out.join("model.dmcp").display());
        }
        Command::FinetuneNf { checkpoint } => {
            require_file(checkpoint)?;
            if common.dry_run {
                println!("finetune-nf: {} more iterations", cfg.train.finetune_iters);
                return Ok(());
            }
            let mut state = load_checkpoint(checkpoint, None)?;
            let mut tcfg = cfg.train_config();
            tcfg.ranges.scale = state.config.scale;
            tcfg.ranges.kernel_size = state.config.blur_kernel_size;
            let data = training_data(&cfg)?;
            prepare_out(&out, &cfg)?;
            run_training(&mut state, &out, "finetune_log.csv", |st, o| {
                finetune_noise_free(st, &data, &tcfg, o).map(|_| ())
            })?;
            save_checkpoint(&state, out.join("model_nf.dmcp"))?;
            println!("fine-tuned to iteration {}; wrote {}", state.iteration, out.join("model_nf.dmcp").display());
        }
        Command::Infer { checkpoint, input } => {
            require_file(checkpoint)?;
            require_file(input)?;
            if common.dry_run {
                println!("infer {} with {}", input.display(), checkpoint.display());
                return Ok(());
            }
            let model = load_checkpoint(checkpoint, None)?.into_model();
            let lr = ImageTensor::read_png(input)?;
            let (sr, est) = model.forward(&lr)?;
            prepare_out(&out, &cfg)?;
            sr.clamped().write_png(out.join("sr.png"))?;
            est.kernel_est.write(out.join("kernel_est.dmkn"))?;
            est.noise_map_est.write(out.join("noise_est.dmnm"))?;
            println!("wrote {}", out.join("sr.png").display());
        }
        Command::Eval {
            checkpoint,
            bicubic,
            dataset,
            scales,
            kernel_widths,
            noise_levels,
        } => {
            let mut grid = cfg.eval.clone();
            if let Some(v) = scales {
                grid.scales = v.clone();
            }
            if let Some(v) = kernel_widths {
                grid.kernel_widths = v.clone();
            }
            if let Some(v) = noise_levels {
                grid.noise_levels = v.clone();
            }
            if !*bicubic && checkpoint.is_empty() {
                return Err(Failure::Usage("eval needs --checkpoint or --bicubic".into()));
            }
            let sets = parse_datasets(dataset)?;
            for p in checkpoint {
                require_file(p)?;
            }
            if common.dry_run {
                println!("eval: {} cells x {} dataset(s)", grid.cells().len(), sets.len());
                return Ok(());
            }
            let model: Box<dyn Upscaler> = if *bicubic {
                Box::new(BicubicBaseline)
            } else {
                let mut by_scale = BTreeMap::new();
                for p in checkpoint {
                    let m = load_checkpoint(p, None)?.into_model();
                    by_scale.insert(m.config.scale, m);
                }
                Box::new(PerScale(by_scale))
            };
            let loaded: Vec<(String, Dataset)> = sets
                .into_iter()
                .map(|(n, d)| Dataset::load_dir(&d).map(|ds| (n, ds)))
                .collect::<Result<_>>()?;
            let report = run_benchmark(model.as_ref(), &loaded, &grid)?;
            prepare_out(&out, &cfg)?;
            std::fs::write(out.join("report.csv"), report.to_csv())?;
            std::fs::write(out.join("report.md"), report.to_markdown())?;
            print!("{}", report.to_markdown());
        }
        Command::Window { input, scale } => {
            require_file(input)?;
            crate::degradation::check_scale(*scale).map_err(|e| Failure::Usage(e.to_string()))?;
            if common.dry_run {
                println!("window {} at x{scale}", input.display());
                return Ok(());
            }
            let img = ImageTensor::read_png(input)?;
            let w = degradation_window(&img, *scale, seed_of(common, &cfg))?;
            prepare_out(&out, &cfg)?;
            w.mosaic.write_png(out.join("window.png"))?;
            std::fs::write(out.join("window_manifest.csv"), w.manifest_csv())?;
            println!("wrote {} tiles to {}", w.manifest.len(), out.join("window.png").display());
        }
    }
    Ok(())
}

fn parse_datasets(specs: &[String]) -> CliResult<Vec<(String, PathBuf)>> {
    specs
        .iter()
        .map(|s| {
            let (name, dir) = match s.split_once('=') {
                Some((n, d)) => (n.to_string(), PathBuf::from(d)),
                None => {
                    let d = PathBuf::from(s);
                    let n = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| s.clone());
                    (n, d)
                }
            };
            if !dir.is_dir() {
                return Err(Failure::Usage(format!("dataset {} is not a directory", dir.display())));
            }
            Ok((name, dir))
        })
        .collect()
}

fn training_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.paths.train_dir {
        Some(d) => Dataset::load_dir(d),
        None => {
            let n = cfg.data.synthetic_size;
            log::info!("no train_dir configured; using {} synthetic {n}x{n} images", cfg.data.synthetic_count);
            Ok(Dataset::synthetic(cfg.data.synthetic_count, n, n, rng::derive_seed(cfg.train.seed, 0xDA7A)))
        }
    }
}

fn projection(cfg: &RunConfig) -> Result<PcaProjection> {
    let Some(p) = &cfg.paths.pca else {
        return default_projection(&cfg.model, cfg.train.seed);
    };
    let pca = PcaProjection::read(p)?;
    let ModelConfig {
        embed_dim,
        blur_kernel_size: k,
        ..
    } = cfg.model;
    if pca.dim() != embed_dim || pca.input_dim() != k * k {
        return Err(Error::Config(format!(
            "projection {} is {}x{}, model needs {embed_dim}x{}",
            p.display(),
            pca.dim(),
            pca.input_dim(),
            k * k
        )));
    }
    Ok(pca)
}

fn run_training(
    state: &mut TrainState,
    out: &Path,
    log_name: &str,
    body: impl FnOnce(&mut TrainState, &mut RunOutput<'_>) -> Result<()>,
) -> Result<()> {
    let ckdir = out.join("checkpoints");
    std::fs::create_dir_all(&ckdir)?;
    let mut log = BufWriter::new(File::create(out.join(log_name))?);
    let mut o = RunOutput {
        log: Some(&mut log),
        checkpoint_dir: Some(ckdir),
    };
    body(state, &mut o)
}
