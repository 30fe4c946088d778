use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tsformer_core::ablation::run_ablation;
use tsformer_core::bench::run_bench;
use tsformer_core::checkpoint;
use tsformer_core::gradcheck::run_grad_check;
use tsformer_core::imageio::{load_image, save_image};
use tsformer_core::metrics::{psnr, ssim, SsimParams};
use tsformer_core::run::RunConfig;
use tsformer_core::tiling::tile_inference;
use tsformer_core::train::train_toy;
use tsformer_core::{Error, OpKind};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CONSISTENCY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "tsformer", version, about = "Sparse-attention image restoration toolkit")]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports, logs and checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` config entries, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Restore one image with a trained checkpoint.
    Restore {
        /// Degraded image (`.png` 8-bit RGB or `.ppm` P6).
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint file; defaults to the configured `checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restored image path (`.png` or `.ppm`); defaults to `<out>/restored.png`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Ground truth for PSNR / SSIM.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Train a toy restoration model on synthetic degradations.
    TrainToy,
    /// Compare the dense and sparse pipelines on one random image.
    Bench,
    /// Compare sampling strategies on planted supports and toy restoration.
    Ablate,
    /// Finite-difference check of every differentiable op.
    GradCheck {
        /// Scale the backward output of one op, e.g. `conv2d` or `gelu:1.5` (test fixture).
        #[arg(long, value_name = "OP[:FACTOR]")]
        inject_fault: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownKey(_) => EXIT_USAGE,
        Error::Format(_) | Error::Checksum { .. } | Error::ConfigMismatch { .. } | Error::Data(_) | Error::Io(_) => {
            EXIT_DATA
        }
        Error::ShapeMismatch { .. } | Error::Consistency(_) => EXIT_CONSISTENCY,
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?,
        None => String::new(),
    };
    Ok(RunConfig::from_text_with_overrides(&text, &overrides)?)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(Error::from)?;
    Ok(path)
}

fn restore(cfg: &RunConfig, input: &Path, ckpt: Option<PathBuf>, output: Option<PathBuf>, gt: Option<PathBuf>) -> CliResult<()> {
    let ckpt = ckpt
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| Failure::Usage("restore needs --checkpoint or a configured checkpoint".into()))?;
    if !ckpt.exists() {
        return Err(Error::Data(format!("checkpoint {} does not exist", ckpt.display())).into());
    }
    let model = checkpoint::load(&ckpt, Some(&cfg.model))?;
    let img = load_image(input)?;
    let restored = tile_inference(&img, cfg.tile, cfg.overlap, |t| model.infer(t))?;
    let output = output.unwrap_or_else(|| cfg.out.join("restored.png"));
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    save_image(&restored, &output)?;
    let (_, _, h, w) = img.dims();
    println!("restored {} ({h}x{w}) -> {}", input.display(), output.display());
    if let Some(gt) = gt {
        let clean = load_image(&gt)?;
        let out = restored.map(|v| v.clamp(0.0, 1.0));
        println!(
            "PSNR {:.4} dB SSIM {:.6} (input PSNR {:.4} dB)",
            psnr(&out, &clean, 1.0)?,
            ssim(&out, &clean, SsimParams::default())?,
            psnr(&img, &clean, 1.0)?
        );
    }
    Ok(())
}

fn parse_fault(spec: &str) -> CliResult<(OpKind, f32)> {
    let (name, factor) = match spec.split_once(':') {
        Some((n, f)) => (n, f.parse().map_err(|_| Failure::Usage(format!("bad fault factor `{f}`")))?),
        None => (spec, 2.0),
    };
    let kind = OpKind::parse(name).ok_or_else(|| {
        let known: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        Failure::Usage(format!("unknown op `{name}`; known ops: {}", known.join(", ")))
    })?;
    Ok((kind, factor))
}

fn run(cli: Cli) -> CliResult<u8> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Restore {
            input,
            checkpoint,
            output,
            gt,
        } => restore(&cfg, &input, checkpoint, output, gt)?,
        Command::TrainToy => {
            let outcome = train_toy(&cfg, &cfg.model, cfg.train.iterations)?;
            let log = write_out(&cfg.out, "loss.csv", &outcome.loss_csv(&cfg))?;
            let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.tsf"));
            if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(Error::from)?;
            }
            checkpoint::save(&outcome.model, &ckpt)?;
            println!("{}", outcome.summary());
            println!("loss log {}; checkpoint {}", log.display(), ckpt.display());
        }
        Command::Bench => {
            let report = run_bench(&cfg)?;
            for line in cfg.echo() {
                println!("# {line}");
            }
            println!("param_count {}", report.param_count);
            println!("{}", report.summary());
            let path = write_out(&cfg.out, "bench.csv", &report.csv(&cfg))?;
            write_out(&cfg.out, "bench_timing.csv", &report.timing_csv(&cfg))?;
            println!("report {}", path.display());
        }
        Command::Ablate => {
            let report = run_ablation(&cfg)?;
            let table = report.table_csv(&cfg);
            for line in table.lines().filter(|l| !l.starts_with('#')) {
                println!("{line}");
            }
            let path = write_out(&cfg.out, "ablation.csv", &table)?;
            write_out(&cfg.out, "ablation_histogram.csv", &report.histogram_csv(&cfg))?;
            println!("report {}", path.display());
        }
        Command::GradCheck { inject_fault } => {
            let fault = inject_fault.as_deref().map(parse_fault).transpose()?;
            let report = run_grad_check(cfg.seed, cfg.grad_seeds, cfg.grad_tolerance, fault)?;
            print!("{}", report.text());
            write_out(&cfg.out, "grad_check.csv", &report.csv(&cfg))?;
            if !report.passed() {
                return Ok(EXIT_CONSISTENCY);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
