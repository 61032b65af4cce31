//! Command implementations behind the `mast` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mast_core::calibration::{fit_degrees, generate_dataset};
use mast_core::diagnostics::{
    attention_entropy_profile, boundary_band_stats, laplacian_map, min_max_scale, paired_boundary_means,
    paired_composite, BoundaryReport, DEFAULT_BAND_PX,
};
use mast_core::masks::{encode_pgm, load_mask, MaskSet};
use mast_core::pipeline::{generate_fixture, generate_fixture_with_masks, run_step, sweep_pi_star, PipelineConfig, TauMode, TauPolicy};
use mast_core::sts::CoefficientFile;
use mast_core::{MastError, Matrix, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USER: i32 = 2;

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn user(msg: impl std::fmt::Display) -> Self {
        Self { code: EXIT_USER, error: anyhow::anyhow!("{msg}") }
    }
}

impl From<MastError> for CliError {
    fn from(e: MastError) -> Self {
        let code = if e.is_user_error() { EXIT_USER } else { EXIT_INTERNAL };
        Self { code, error: e.into() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self { code: EXIT_INTERNAL, error: e.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mast", version, about = "Multi-style attention control kernels on synthetic features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run pipeline steps on seeded synthetic features.
    Run(RunArgs),
    /// Fit the temperature polynomial on synthetic (delta, tau*) pairs.
    Calibrate(CalibrateArgs),
    /// Boundary Laplacian and attention entropy statistics.
    Diagnose(DiagnoseArgs),
    /// Style mass and entropy over a list of pi* values.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON pipeline config; unset keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Style mask (P5 PGM or MSTT), one per style, in style order.
    #[arg(long = "mask")]
    pub masks: Vec<PathBuf>,
    #[arg(long)]
    pub mask_sigma: Option<f64>,
    /// Divide masks by their coverage wherever it exceeds 1.
    #[arg(long)]
    pub renormalize: bool,
    /// Coefficient file for `--tau-mode fit`.
    #[arg(long)]
    pub coefficients: Option<PathBuf>,
    #[arg(long)]
    pub tau_mode: Option<TauMode>,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    /// Coefficient JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Attention weights (MSTT, last axis over keys, rows summing to 1).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Image (P5 PGM or rank-2 MSTT) whose boundary band is measured.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Mask defining the boundary for `--image`.
    #[arg(long = "mask")]
    pub masks: Vec<PathBuf>,
    /// Measure a generated hard/smooth composite pair.
    #[arg(long)]
    pub paired_composite: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BAND_PX)]
    pub band_px: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated pi* values.
    #[arg(long, default_value = "0.3,0.45,0.6,0.75,0.9,1.0")]
    pub pi_star_sweep: String,
    /// CSV file to write; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::Calibrate(a) => cmd_calibrate(&a).map(|_| ()),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

/// Sizes the global rayon pool from `MAST_THREADS` (0 or unset: automatic).
pub fn init_threads(value: Option<&str>) -> CliResult<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::user(format!("MAST_THREADS must be a non-negative integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError { code: EXIT_INTERNAL, error: e.into() })
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::user(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_config(path: Option<&Path>) -> CliResult<(PipelineConfig, Option<Vec<u8>>)> {
    match path {
        None => Ok((PipelineConfig::default(), None)),
        Some(p) => {
            let bytes = read(p)?;
            let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::user("config is not UTF-8"))?;
            Ok((PipelineConfig::from_json(&text)?, Some(bytes)))
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    version: &'static str,
    config: PipelineConfig,
    steps: usize,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    wall_clock_seconds: f64,
}

/// What `run` wrote, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub files: BTreeMap<String, String>,
}

pub fn cmd_run(args: &RunArgs) -> CliResult<RunOutputs> {
    let start = Instant::now();
    if args.steps == 0 {
        return Err(CliError::user("--steps must be positive"));
    }
    let (mut cfg, config_bytes) = load_config(args.config.as_deref())?;
    let mut inputs = BTreeMap::new();
    if let (Some(p), Some(b)) = (&args.config, &config_bytes) {
        inputs.insert(p.display().to_string(), sha256_hex(b));
    }
    if let Some(s) = args.mask_sigma {
        cfg.mask_sigma = s;
    }
    if let Some(m) = args.tau_mode {
        cfg.tau_mode = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let fitted = match &args.coefficients {
        Some(p) => {
            let bytes = read(p)?;
            inputs.insert(p.display().to_string(), sha256_hex(&bytes));
            let text = String::from_utf8(bytes).map_err(|_| CliError::user("coefficient file is not UTF-8"))?;
            Some(CoefficientFile::from_json(&text)?.model()?)
        }
        None => None,
    };
    let policy = TauPolicy::resolve(cfg.tau_mode, fitted)?;

    let masks = if args.masks.is_empty() {
        None
    } else {
        let mut sources = Vec::new();
        for p in &args.masks {
            inputs.insert(p.display().to_string(), sha256_hex(&read(p)?));
            sources.push(load_mask(p)?);
        }
        let grid = (cfg.token_grid[0], cfg.token_grid[1]);
        let ms = MaskSet::from_sources(&sources, grid, cfg.mask_sigma)?;
        cfg.n_styles = ms.n_styles();
        Some(if args.renormalize { ms.renormalized() } else { ms })
    };
    cfg.validate()?;

    let mut files = BTreeMap::new();
    let mut reports = Vec::with_capacity(args.steps);
    for step in 0..args.steps {
        let step_cfg = PipelineConfig { seed: cfg.seed.wrapping_add(step as u64), ..cfg.clone() };
        let scene = match &masks {
            Some(ms) => generate_fixture_with_masks(&step_cfg, ms.clone())?,
            None => generate_fixture(&step_cfg)?,
        };
        let (report, tensors) = run_step(&scene, &step_cfg, &policy)?;
        for (name, t) in tensors.named() {
            let rel = format!("step_{step:03}/{name}.mstt");
            let bytes = t.to_bytes();
            write(&args.out.join(&rel), &bytes)?;
            files.insert(rel, sha256_hex(&bytes));
        }
        reports.push(report);
    }
    let report = serde_json::to_vec_pretty(&serde_json::json!({ "steps": reports }))?;
    write(&args.out.join("report.json"), &report)?;
    files.insert("report.json".into(), sha256_hex(&report));

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        steps: args.steps,
        inputs,
        outputs: files.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write(&args.out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(RunOutputs { files })
}

/// Smallest sample count that leaves a non-empty held-out split.
pub const MIN_CALIBRATION_SAMPLES: usize = 20;

pub fn cmd_calibrate(args: &CalibrateArgs) -> CliResult<CoefficientFile> {
    if !(1..=4).contains(&args.degree) {
        return Err(CliError::user(format!("--degree must be 1..=4, got {}", args.degree)));
    }
    if args.samples < MIN_CALIBRATION_SAMPLES {
        return Err(CliError::user(format!(
            "insufficient samples: {} (need at least {MIN_CALIBRATION_SAMPLES})",
            args.samples
        )));
    }
    let (data, stats) = generate_dataset(args.samples, args.seed)?;
    log::info!("{} samples kept, {} at the temperature search boundary", stats.kept, stats.at_boundary);
    let report = fit_degrees(&data, &[args.degree])?.remove(0);
    log::info!(
        "degree {}: train R^2 {:.4}, held-out R^2 {:.4}",
        report.degree,
        report.fit.r_squared,
        report.heldout_r_squared
    );
    let file = CoefficientFile::from_fit(&report.fit, report.heldout_r_squared);
    write(&args.out, file.to_json().as_bytes())?;
    Ok(file)
}

fn write_map(out: &Path, name: &str, map: &Tensor) -> CliResult<()> {
    let (scaled, lo, hi) = min_max_scale(map);
    write(&out.join(format!("{name}.pgm")), &encode_pgm(&scaled)?)?;
    let sidecar = serde_json::json!({ "min": lo, "max": hi });
    write(&out.join(format!("{name}.json")), &serde_json::to_vec_pretty(&sidecar)?)
}

fn band_rows(rows: &mut Vec<(String, f64)>, prefix: &str, r: &BoundaryReport) {
    rows.push((format!("{prefix}boundary_band_mean"), r.boundary_band_mean));
    rows.push((format!("{prefix}interior_mean"), r.interior_mean));
    rows.push((format!("{prefix}band_pixels"), r.band_pixels as f64));
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> CliResult<()> {
    if args.weights.is_none() && args.image.is_none() && !args.paired_composite {
        return Err(CliError::user("nothing to diagnose: pass --weights, --image or --paired-composite"));
    }
    let mut rows: Vec<(String, f64)> = Vec::new();
    if let Some(p) = &args.weights {
        let w = Tensor::from_bytes(&read(p)?)?;
        // Leading axes (heads, queries) flatten into rows.
        let cols = *w.shape().last().unwrap_or(&0);
        if w.rank() < 2 || cols == 0 {
            return Err(CliError::user(format!("weights must have rank >= 2, got shape {:?}", w.shape())));
        }
        let n_rows = w.len() / cols;
        let w = w.reshape(vec![n_rows, cols])?;
        let profile = attention_entropy_profile(&Matrix::from_tensor(&w)?)?;
        rows.push(("mean_entropy".into(), profile.mean_entropy));
        rows.push(("mean_log_p_max".into(), profile.mean_log_p_max));
        rows.push(("entropy_q10".into(), profile.q10));
        rows.push(("entropy_q50".into(), profile.q50));
        rows.push(("entropy_q90".into(), profile.q90));
    }
    if let Some(p) = &args.image {
        if args.masks.is_empty() {
            return Err(CliError::user("--image needs at least one --mask"));
        }
        let img = load_mask(p)?;
        let (h, w) = img.dims2()?;
        let sources = args.masks.iter().map(load_mask).collect::<Result<Vec<_>, _>>()?;
        let ms = MaskSet::from_sources(&sources, (h, w), 0.0)?;
        let map = laplacian_map(&img)?;
        band_rows(&mut rows, "", &boundary_band_stats(&map, &ms, args.band_px)?);
        write_map(&args.out, "laplacian", &map)?;
    }
    if args.paired_composite {
        let pair = paired_composite(args.seed, 64, 64, 2.0)?;
        let (hard, smooth) = paired_boundary_means(&pair, args.band_px)?;
        band_rows(&mut rows, "hard_", &hard);
        band_rows(&mut rows, "smooth_", &smooth);
        write_map(&args.out, "laplacian_hard", &laplacian_map(&pair.hard)?)?;
        write_map(&args.out, "laplacian_smooth", &laplacian_map(&pair.smooth)?)?;
    }
    let mut csv = String::from("statistic,value\n");
    for (k, v) in &rows {
        writeln!(csv, "{k},{v}").unwrap();
    }
    write(&args.out.join("stats.csv"), csv.as_bytes())
}

pub fn parse_sweep(list: &str) -> CliResult<Vec<f64>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::user(format!("bad pi* value {s:?}")))
        })
        .collect()
}

pub fn sweep_csv(cfg: &PipelineConfig, values: &[f64]) -> CliResult<String> {
    let scene = generate_fixture(cfg)?;
    let rows = sweep_pi_star(&scene, cfg, values)?;
    let mut csv = String::from("pi_star,effective_pi_star,mean_style_mass,expected_style_mass,mean_entropy\n");
    for r in rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.pi_star, r.effective_pi_star, r.mean_style_mass, r.expected_style_mass, r.mean_entropy
        )
        .unwrap();
    }
    Ok(csv)
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let (cfg, _) = load_config(args.config.as_deref())?;
    let csv = sweep_csv(&cfg, &parse_sweep(&args.pi_star_sweep)?)?;
    match &args.out {
        Some(p) => write(p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
