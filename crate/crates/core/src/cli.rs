//! `depthcast` command line.
//!
//! Exit codes: 0 success, 1 check or runtime failure, 2 usage, config or
//! input-format error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::frames::DepthMap;
use crate::losses::set_ssim_corruption;
use crate::pipeline::{
    atomic_write, configure_threads, evaluate_records, forecast_infer, load_checkpoint, min_window_t,
    train_loop_with, window_indices, TrainConfig, TrainOutput,
};
use crate::selftest::run_checks;
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, GeneratorConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Env var that makes `selftest` corrupt a constant on purpose (`ssim`).
pub const CORRUPT_ENV: &str = "DFN_SELFTEST_CORRUPT";

#[derive(Debug, Parser)]
#[command(name = "depthcast", version, about = "Self-supervised monocular depth forecasting")]
pub struct Cli {
    /// Where to write the run manifest instead of next to the outputs.
    #[arg(long, global = true, value_name = "PATH")]
    pub run_manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the forecasting and pose networks.
    Train(TrainArgs),
    /// Score a checkpoint against copy-last and oracle baselines.
    Eval(EvalArgs),
    /// Forecast one depth map and write it as PNG plus raw f32.
    Forecast(ForecastArgs),
    /// Run the fast invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON training config; the flags above and below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub no_median_scaling: bool,
    /// Evaluate every n-th window start.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sequence index or directory name (`seq_0003`).
    #[arg(long)]
    pub seq: String,
    #[arg(long)]
    pub t: usize,
    #[arg(long)]
    pub k: usize,
    /// PNG path; the raw depth goes next to it with a `.f32` extension.
    #[arg(long)]
    pub out: PathBuf,
}

/// Scene config for `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub sequences: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fx: f64,
    pub fy: f64,
    #[serde(default)]
    pub camera_object: bool,
}

impl DatasetConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            height: self.height,
            width: self.width,
            frames: self.frames,
            fx: self.fx,
            fy: self.fy,
            camera_object: self.camera_object,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub elapsed_seconds: f64,
    pub status: String,
}

/// What a finished command hands back for its manifest.
struct Ran {
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    /// Default manifest path when `--run-manifest` is absent.
    manifest_at: Option<PathBuf>,
    code: i32,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Format { .. } | Error::UnsupportedVersion { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // serde_json reports line, column and the offending field
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn gen_data(a: &GenDataArgs) -> Result<Ran> {
    let cfg: DatasetConfig = read_json(&a.config)?;
    if cfg.sequences == 0 {
        return Err(Error::invalid(format!("{}: sequences must be at least 1", a.config.display())));
    }
    let gen = cfg.generator();
    gen.validate()?;
    let scenes = generate_dataset(&gen, cfg.sequences, a.seed)?;
    let records: Vec<_> = scenes.into_iter().map(|(_, r)| r).collect();
    let manifest = write_dataset(&records, &a.out, a.seed)?;
    println!(
        "wrote {} sequences ({} frames, {}x{}) to {}",
        manifest.sequences.len(),
        cfg.frames,
        cfg.height,
        cfg.width,
        a.out.display()
    );
    Ok(Ran {
        config: to_value(&cfg),
        inputs: vec![a.config.clone()],
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        manifest_at: Some(a.out.join("run_manifest.json")),
        code: EXIT_OK,
    })
}

fn train(a: &TrainArgs) -> Result<Ran> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.k = a.k;
    cfg.epochs = a.epochs;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let records = read_dataset(&a.data)?.load_all()?;
    if let Some(r) = records.first() {
        if (r.height(), r.width()) != (cfg.model.height, cfg.model.width) {
            return Err(Error::invalid(format!(
                "dataset frames are {}x{} but the model is configured for {}x{}",
                r.height(),
                r.width(),
                cfg.model.height,
                cfg.model.width
            )));
        }
    }
    let out = TrainOutput {
        dir: Some(a.out.clone()),
    };
    let result = train_loop_with(&records, &cfg, &out, |step, r| {
        if step % 50 == 0 {
            eprintln!("step {step}: l_tot {:.5}", r.l_tot);
        }
    })?;
    println!(
        "trained {} steps; checkpoint {}",
        result.checkpoint.step,
        a.out.join("final.ckpt").display()
    );
    Ok(Ran {
        config: to_value(&cfg),
        inputs: vec![a.data.clone()],
        outputs: vec![a.out.join("final.ckpt"), a.out.join("curve.csv")],
        seed: Some(cfg.seed),
        manifest_at: Some(a.out.join("run_manifest.json")),
        code: EXIT_OK,
    })
}

fn eval(a: &EvalArgs) -> Result<Ran> {
    if a.stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let ck = load_checkpoint(&a.ckpt)?;
    let frame_interval = ck.train.as_ref().map_or(3, |t| t.frame_interval);
    let model = ck.inference_view()?;
    let records = read_dataset(&a.data)?.load_all()?;
    let cfg = EvalConfig {
        use_median_scaling: !a.no_median_scaling,
        ..EvalConfig::default()
    };
    let mut report = evaluate_records(&model, &records, a.k, frame_interval, a.stride, &cfg)?;
    report
        .context
        .insert("checkpoint".into(), a.ckpt.display().to_string().into());
    report.context.insert("data".into(), a.data.display().to_string().into());
    let bytes = serde_json::to_vec_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
    atomic_write(&a.report, &bytes)?;
    for row in &report.rows {
        println!(
            "{:<10} abs_rel {:.4} rmse {:.4} delta1 {:.4}",
            row.method, row.metrics.abs_rel, row.metrics.rmse, row.metrics.delta1
        );
    }
    Ok(Ran {
        config: json!({ "k": a.k, "stride": a.stride, "frame_interval": frame_interval, "eval": cfg }),
        inputs: vec![a.ckpt.clone(), a.data.clone()],
        outputs: vec![a.report.clone()],
        seed: None,
        manifest_at: Some(sidecar(&a.report)),
        code: EXIT_OK,
    })
}

fn sidecar(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(OsString::from).unwrap_or_default();
    name.push(".run.json");
    file.with_file_name(name)
}

fn sequence_index(arg: &str, count: usize) -> Result<usize> {
    let digits = arg.strip_prefix("seq_").unwrap_or(arg);
    let i: usize = digits
        .parse()
        .map_err(|_| Error::invalid(format!("--seq {arg:?} is neither an index nor a seq_NNNN name")))?;
    if i >= count {
        return Err(Error::invalid(format!("--seq {i} is out of range; the dataset has {count} sequences")));
    }
    Ok(i)
}

/// Polynomial approximation of the turbo colormap.
fn turbo(x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0);
    let poly = |c: [f64; 6]| c[0] + x * (c[1] + x * (c[2] + x * (c[3] + x * (c[4] + x * c[5]))));
    let r = poly([0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943]);
    let g = poly([0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604]);
    let b = poly([0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973]);
    [r, g, b].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Inverse depth normalised per image; near pixels map to the warm end.
pub fn colorize_depth(depth: &DepthMap) -> image::RgbImage {
    let (h, w) = (depth.height(), depth.width());
    let inv: Vec<f64> = depth.values().data().iter().map(|d| 1.0 / d).collect();
    let lo = inv.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = inv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(turbo((inv[y as usize * w + x as usize] - lo) / span))
    })
}

fn forecast(a: &ForecastArgs) -> Result<Ran> {
    let ck = load_checkpoint(&a.ckpt)?;
    if let Some(t) = &ck.train {
        if t.k != a.k {
            return Err(Error::invalid(format!(
                "checkpoint was trained for k = {} but --k is {}",
                t.k, a.k
            )));
        }
    }
    let frame_interval = ck.train.as_ref().map_or(3, |t| t.frame_interval);
    let model = ck.inference_view()?;
    let data = read_dataset(&a.data)?;
    let seq = sequence_index(&a.seq, data.len())?;
    let rec = data.load(seq)?;
    let lo = min_window_t(frame_interval);
    if a.t < lo || a.t >= rec.len() {
        return Err(Error::invalid(format!(
            "--t {} is out of range; sequence {seq} accepts {lo}..={}",
            a.t,
            rec.len() - 1
        )));
    }
    let idx = window_indices(a.t, frame_interval);
    let rgb: Vec<_> = idx.iter().map(|&i| rec.frames[i].clone()).collect();
    let flow: Vec<_> = idx.iter().map(|&i| rec.flows[i].clone()).collect();
    let depth = forecast_infer(&model, &rgb, &flow)?;

    let raw = a.out.with_extension("f32");
    let mut bytes = Vec::with_capacity(4 * depth.values().len());
    for v in depth.values().data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    atomic_write(&raw, &bytes)?;
    colorize_depth(&depth)
        .save_with_format(&a.out, image::ImageFormat::Png)
        .map_err(|e| Error::Io {
            path: a.out.clone(),
            source: std::io::Error::other(e),
        })?;
    println!("wrote {} and {}", a.out.display(), raw.display());
    Ok(Ran {
        config: json!({ "seq": seq, "t": a.t, "k": a.k, "frame_interval": frame_interval }),
        inputs: vec![a.ckpt.clone(), a.data.clone()],
        outputs: vec![a.out.clone(), raw],
        seed: None,
        manifest_at: Some(sidecar(&a.out)),
        code: EXIT_OK,
    })
}

fn selftest() -> Result<Ran> {
    match std::env::var(CORRUPT_ENV).as_deref() {
        Ok("ssim") => set_ssim_corruption(true),
        Ok(other) => return Err(Error::invalid(format!("{CORRUPT_ENV}={other:?} is not a known hook"))),
        Err(_) => {}
    }
    let checks = run_checks();
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name);
        }
    }
    let code = if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        EXIT_OK
    } else {
        println!("failed: {}", failed.join(", "));
        EXIT_FAILURE
    };
    Ok(Ran {
        config: json!({ "checks": checks.iter().map(|c| c.name).collect::<Vec<_>>(), "failed": failed }),
        inputs: Vec::new(),
        outputs: Vec::new(),
        seed: None,
        manifest_at: None,
        code,
    })
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(m).map_err(|e| Error::Internal(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    let start = Instant::now();
    let (name, result) = match &cli.command {
        Command::GenData(a) => ("gen-data", gen_data(a)),
        Command::Train(a) => ("train", train(a)),
        Command::Eval(a) => ("eval", eval(a)),
        Command::Forecast(a) => ("forecast", forecast(a)),
        Command::Selftest => ("selftest", selftest()),
    };
    let elapsed_seconds = start.elapsed().as_secs_f64();
    let (code, manifest, target) = match result {
        Ok(ran) => {
            let target = cli.run_manifest.clone().or(ran.manifest_at);
            let m = RunManifest {
                command: name.into(),
                config: ran.config,
                inputs: ran.inputs,
                outputs: ran.outputs,
                seed: ran.seed,
                code_version: env!("CARGO_PKG_VERSION").into(),
                elapsed_seconds,
                status: if ran.code == EXIT_OK { "ok".into() } else { "checks failed".into() },
            };
            (ran.code, m, target)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let m = RunManifest {
                command: name.into(),
                config: serde_json::Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                seed: None,
                code_version: env!("CARGO_PKG_VERSION").into(),
                elapsed_seconds,
                status: format!("error: {e}"),
            };
            // failed runs only leave a manifest where one was asked for
            (exit_code(&e), m, cli.run_manifest.clone())
        }
    };
    if let Some(path) = target {
        if let Err(e) = write_manifest(&path, &manifest) {
            eprintln!("error: {e}");
            return if code == EXIT_OK { EXIT_FAILURE } else { code };
        }
    }
    code
}
