//! `nht` command-line front end. [`run`] is the whole program; `main` only
//! forwards the process arguments and exit code.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nht_core::codec::{self, Model, QuantFlags};
use nht_core::imageio::{self, HdrImage};
use nht_core::metrics::{psnr_values, ssim};
use nht_core::splat2d::Scene;
use nht_core::trainer::{self, FitMode, LogEntry, TrainConfig};

/// Environment variable that caps the worker thread count.
pub const THREADS_ENV: &str = "NHT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "nht", version, about = "Fit, compress and evaluate neural harmonic texture image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on an image and write a float container plus a JSON-lines log.
    Fit {
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<FitMode>,
        /// Extra `key=value` config overrides, applied after `--config`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Log path; defaults to the output path with a `.jsonl` extension.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Linear value mapped to 1.0 (PNG inputs are scaled to it).
        #[arg(long)]
        white_level: Option<f64>,
    },
    /// Render a model to `.pfm` (HDR) or `.png` (16-bit linear).
    Render {
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write an 8-bit tonemapped image next to `--out`; only `png`.
        #[arg(long, value_name = "FORMAT")]
        tonemap: Option<String>,
    },
    /// Re-encode with quantization and Zstandard coding.
    Compress {
        model: PathBuf,
        #[arg(long, default_value = "int8,uint16,fp16")]
        quantize: String,
        #[arg(long)]
        out: PathBuf,
        /// Skip the entropy stage.
        #[arg(long)]
        no_entropy: bool,
    },
    /// Re-encode any container as an uncompressed float container.
    Decompress {
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print PSNR_μ, PSNR_tm and SSIM_tm against a reference image.
    Eval {
        model: PathBuf,
        reference: PathBuf,
        /// Print one JSON object instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Render a text splat scene through the deferred decoder.
    SplatDemo {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the program on `argv` (including the program name) and returns the
/// process exit code: 0 on success, 1 on a runtime error, 2 on bad usage.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return 2;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Fit {
            image,
            config,
            out,
            mode,
            overrides,
            log,
            white_level,
        } => fit(&image, config.as_deref(), &out, mode, &overrides, log, white_level),
        Command::Render { model, out, tonemap } => render(&model, &out, tonemap.as_deref()),
        Command::Compress {
            model,
            quantize,
            out,
            no_entropy,
        } => {
            let mut flags: QuantFlags = quantize.parse()?;
            flags.entropy = !no_entropy;
            let (m, _) = read_model(&model)?;
            let n = write_model(&out, &m, flags)?;
            let before = std::fs::metadata(&model).map(|md| md.len()).unwrap_or(0);
            println!("{} bytes -> {n} bytes ({flags})", before);
            Ok(())
        }
        Command::Decompress { model, out } => {
            let (m, _) = read_model(&model)?;
            let n = write_model(&out, &m, QuantFlags::NONE)?;
            println!("{n} bytes");
            Ok(())
        }
        Command::Eval { model, reference, json } => eval(&model, &reference, json),
        Command::SplatDemo { scene, out } => {
            let text = std::fs::read_to_string(&scene).with_context(|| format!("reading {}", scene.display()))?;
            let scene = Scene::parse(&text).context("parsing scene")?;
            let img = scene.render()?;
            save_image(&img, &out)
        }
    }
}

fn read_model(path: &Path) -> Result<(Model, QuantFlags)> {
    codec::read_file(path).with_context(|| format!("reading model {}", path.display()))
}

fn write_model(path: &Path, model: &Model, flags: QuantFlags) -> Result<usize> {
    codec::write_file(path, model, flags).with_context(|| format!("writing model {}", path.display()))
}

fn save_image(img: &HdrImage, path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "pfm" => imageio::save_pfm(img, path),
        "png" => imageio::save_png16(img, path),
        other => bail!("unsupported output extension `{other}`; use .pfm or .png"),
    }
    .with_context(|| format!("writing {}", path.display()))
}

fn load_reference(path: &Path, white_level: Option<f64>) -> Result<HdrImage> {
    match white_level {
        Some(w) => imageio::load_image_with_white(path, w),
        None => imageio::load_image(path),
    }
    .with_context(|| format!("loading image {}", path.display()))
}

fn fit(
    image: &Path,
    config: Option<&Path>,
    out: &Path,
    mode: Option<FitMode>,
    overrides: &[String],
    log: Option<PathBuf>,
    white_level: Option<f64>,
) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("parsing config {}", path.display()))?;
    }
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override `{kv}` is not key=value"))?;
        cfg.set(k, v)?;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    let img = load_reference(image, white_level)?;

    let log_path = log.unwrap_or_else(|| out.with_extension("jsonl"));
    let file = File::create(&log_path).with_context(|| format!("creating log {}", log_path.display()))?;
    let mut sink = BufWriter::new(file);
    let mut log_err: Option<std::io::Error> = None;
    let mut on_log = |e: &LogEntry| {
        if log_err.is_some() {
            return;
        }
        let line = serde_json::to_string(e).expect("log entries serialize");
        if let Err(err) = writeln!(sink, "{line}") {
            log_err = Some(err);
        }
    };
    let (model, final_loss) = match cfg.mode {
        FitMode::Mesh => {
            let fit = trainer::fit_image_with(&img, &cfg, &mut on_log)?;
            (Model::Mesh(fit.model), fit.final_loss)
        }
        FitMode::Splat => {
            let fit = trainer::fit_splats_with(&img, &cfg, &mut on_log)?;
            (Model::Splat(fit.model), fit.final_loss)
        }
    };
    if let Some(err) = log_err {
        return Err(err).with_context(|| format!("writing log {}", log_path.display()));
    }
    sink.flush().with_context(|| format!("writing log {}", log_path.display()))?;
    let bytes = write_model(out, &model, QuantFlags::NONE)?;
    let psnr = model.psnr_mulaw(&img)?;
    println!(
        "{} model: final loss {final_loss:.6e}, PSNR_mu {psnr:.2} dB, {bytes} bytes",
        model.kind()
    );
    Ok(())
}

fn render(model: &Path, out: &Path, tonemap: Option<&str>) -> Result<()> {
    let (m, _) = read_model(model)?;
    let img = m.render()?;
    save_image(&img, out)?;
    match tonemap {
        None => Ok(()),
        Some("png") => {
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("render");
            let path = out.with_file_name(format!("{stem}.tonemapped.png"));
            imageio::save_png_tonemapped(&img, &path).with_context(|| format!("writing {}", path.display()))
        }
        Some(other) => bail!("unsupported tonemap format `{other}`; only `png`"),
    }
}

/// Metrics in the column layout of the usual HDR image-fitting tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub psnr_mu: f64,
    pub psnr_tm: f64,
    pub ssim_tm: f64,
}

pub fn evaluate(model: &Model, reference: &HdrImage) -> Result<EvalRow> {
    let psnr_mu = model.psnr_mulaw(reference)?;
    let pred = imageio::tonemap(&model.render()?);
    let gt = imageio::tonemap(reference);
    Ok(EvalRow {
        psnr_mu,
        psnr_tm: psnr_values(&pred, &gt),
        ssim_tm: ssim(&pred, &gt, reference.width, reference.height, 3)?,
    })
}

fn eval(model: &Path, reference: &Path, json: bool) -> Result<()> {
    let (m, _) = read_model(model)?;
    let img = load_reference(reference, Some(m.mulaw().white_level))?;
    let row = evaluate(&m, &img)?;
    if json {
        let v = serde_json::json!({
            "psnr_mu": row.psnr_mu,
            "psnr_tm": row.psnr_tm,
            "ssim_tm": row.ssim_tm,
        });
        println!("{v}");
    } else {
        println!("| PSNR_mu | PSNR_tm | SSIM_tm |");
        println!("|---------|---------|---------|");
        println!("| {:7.2} | {:7.2} | {:7.4} |", row.psnr_mu, row.psnr_tm, row.ssim_tm);
    }
    Ok(())
}
