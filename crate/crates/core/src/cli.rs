//! Command-line surface: dataset generation, training, evaluation, single
//! sample inference, inverse mold design, and attention export.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! error.

use crate::config::{ConfigError, RunConfig};
use crate::design::{design_mold, oracle_predictor, surrogate_predictor, DesignOptions};
use crate::geometry::Point3;
use crate::metrics::MetricsError;
use crate::model::{init_params, load_checkpoint, ModelError, ModelHandles, SampleTensors};
use crate::oracle::{
    generate_dataset, read_sample, sample_rng, sample_section, DatasetManifest, OracleError, Split,
};
use crate::section::{sdf_rasterize, write_pgm, SdfGrid};
use crate::tensor::{Tensor, TensorError};
use crate::train::{
    evaluate, export_attention, load_split_tensors, train_to_files, TrainConfig, TrainError,
};
use clap::{Args, Parser, Subcommand};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "stretchbend",
    about = "Stretch-bending surrogate: synthetic data, training, metrics, and mold design",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with manifest and 8:1:1 split
    GenData(GenDataArgs),
    /// Train the deformation model on a dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Run inference on one sample file
    Infer(InferArgs),
    /// Inverse mold design by displacement compensation
    Design(DesignArgs),
    /// Export attention maps for one sample
    ExportAttn(ExportAttnArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated weights for the five section types
    #[arg(long, default_value = "1,1,1,1,1")]
    types: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 240)]
    m: usize,
    #[arg(long, default_value_t = 128)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long, default_value_t = 16)]
    arc_segments: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// key=value config file; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from an existing checkpoint instead of a fresh initialization
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    split: Split,
    /// Write the JSON report here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pitch: f64,
    #[arg(long, default_value_t = 64)]
    tail_points: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DesignArgs {
    /// Target final line as CSV (x,y,z per row, '#' comments)
    #[arg(long)]
    target: PathBuf,
    /// Use the physics oracle as the predictor
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    /// Use a trained checkpoint as the predictor
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tol: f64,
    #[arg(long, default_value_t = 20)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    /// Workpiece length; drawn from the generator interval when omitted
    #[arg(long)]
    length: Option<f64>,
    #[arg(long, default_value_t = 1)]
    section_type: u32,
    #[arg(long, default_value_t = 0)]
    section_seed: u64,
    /// Points per line for the oracle predictor (checkpoints fix their own)
    #[arg(long, default_value_t = 240)]
    m: usize,
}

#[derive(Args)]
struct ExportAttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Anything a subcommand can fail with, mapped onto exit codes.
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::LengthMismatch(..) | MetricsError::Empty => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::Io(io) => io.into(),
            TrainError::Mismatch(m) => CliError::Usage(m),
            TrainError::NonFiniteGrad(_) => CliError::Numeric(e.to_string()),
            TrainError::EmptySplit => CliError::Data(e.to_string()),
            TrainError::Orphan(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<crate::design::DesignError> for CliError {
    fn from(e: crate::design::DesignError) -> Self {
        match e {
            crate::design::DesignError::Model(m) => m.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<crate::geometry::GeometryError> for CliError {
    fn from(e: crate::geometry::GeometryError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<crate::section::SectionError> for CliError {
    fn from(e: crate::section::SectionError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Parses argv and runs the selected subcommand; returns the process code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful outputs, everything else is usage
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Design(args) => cmd_design(args),
        Command::ExportAttn(args) => cmd_export_attn(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn parse_type_mix(text: &str) -> Result<[f64; 5], CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 5 {
        return Err(CliError::Usage(format!(
            "--types needs 5 comma-separated weights, got {}",
            parts.len()
        )));
    }
    let mut mix = [0.0; 5];
    for (i, p) in parts.iter().enumerate() {
        mix[i] = p
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("invalid weight '{p}' in --types")))?;
    }
    Ok(mix)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mix = parse_type_mix(&args.types)?;
    if args.m < 2 || args.h < 16 || args.w < 16 {
        return Err(CliError::Usage("need m >= 2 and grid at least 16x16".into()));
    }
    let manifest = generate_dataset(
        args.count,
        args.seed,
        &mix,
        args.m,
        args.h,
        args.w,
        args.arc_segments,
        &args.out,
    )?;
    println!(
        "wrote {} samples to {} (train {} / eval {} / test {})",
        manifest.count,
        args.out.display(),
        manifest.indices(Split::Train).len(),
        manifest.indices(Split::Eval).len(),
        manifest.indices(Split::Test).len()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut run_cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.epochs {
        run_cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        run_cfg.lr = v;
    }
    if let Some(v) = args.batch {
        run_cfg.batch = v;
    }
    if let Some(v) = args.seed {
        run_cfg.seed = v;
    }
    run_cfg.validate()?;
    // dataset dims take precedence over file defaults for the line/grid sizes
    let manifest = DatasetManifest::load(&args.data)?;
    run_cfg.model.m = manifest.m;
    run_cfg.model.h = manifest.h;
    run_cfg.model.w = manifest.w;
    run_cfg.model.validate().map_err(CliError::from)?;

    let initial = match &args.resume {
        Some(ckpt) => load_checkpoint(ckpt, Some(&run_cfg.model))?.0,
        None => init_params::<f32>(&run_cfg.model, run_cfg.seed)?,
    };
    let mut tc = TrainConfig::new(run_cfg.model);
    tc.lr = run_cfg.lr;
    tc.batch = run_cfg.batch;
    tc.epochs = run_cfg.epochs;
    tc.seed = run_cfg.seed;
    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("model.ckpt");
    let loss_csv = args.out.join("loss.csv");
    let outcome = train_to_files(&tc, &args.data, initial, &ckpt, &loss_csv)?;
    let last = outcome.log.last();
    println!(
        "trained {} epochs; final losses r={:.6} a={:.6} b={:.6}; checkpoint {}",
        run_cfg.epochs,
        last.map_or(f64::NAN, |r| r.loss_r),
        last.map_or(f64::NAN, |r| r.loss_p_a),
        last.map_or(f64::NAN, |r| r.loss_p_b),
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    if !(args.pitch > 0.0) {
        return Err(CliError::Usage("--pitch must be positive".into()));
    }
    let (store, cfg) = load_checkpoint(&args.ckpt, None)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let samples = load_split_tensors(&args.data, &manifest, args.split, &cfg)?;
    let report = evaluate(&store, &cfg, &samples, args.pitch, args.tail_points)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(out) = &args.out {
        std::fs::write(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

/// Writes a 3D polyline as `x,y,z` CSV rows.
pub fn write_line_csv(path: &Path, points: &[Point3]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# x_mm,y_mm,z_mm")?;
    for p in points {
        writeln!(f, "{:.6},{:.6},{:.6}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Reads a 3D polyline from `x,y,z` CSV rows ('#' comments allowed).
pub fn read_line_csv(path: &Path) -> Result<Vec<Point3>, CliReadError> {
    let text = std::fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != 3 {
            return Err(CliReadError::BadRow(lineno + 1, raw.to_string()));
        }
        let coords: Result<Vec<f64>, _> = vals.iter().map(|v| v.trim().parse()).collect();
        let coords = coords.map_err(|_| CliReadError::BadRow(lineno + 1, raw.to_string()))?;
        pts.push(Point3::new(coords[0], coords[1], coords[2]));
    }
    Ok(pts)
}

#[derive(Debug, thiserror::Error)]
pub enum CliReadError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected 'x,y,z', got '{1}'")]
    BadRow(usize, String),
}

impl From<CliReadError> for CliError {
    fn from(e: CliReadError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let (store, cfg) = load_checkpoint(&args.ckpt, None)?;
    let sample = read_sample(&args.sample)?;
    let tensors = SampleTensors::from_sample(&sample, &cfg)?;
    let handles = ModelHandles::resolve(&store, &cfg)?;
    let pred = crate::model::predict(&store, &handles, &cfg, &tensors)?;
    std::fs::create_dir_all(&args.out)?;
    write_line_csv(&args.out.join("pred_loaded.csv"), &pred.loaded)?;
    write_line_csv(&args.out.join("pred_final.csv"), &pred.final_line)?;
    write_pgm(&pred.recon_sdf, cfg.h, cfg.w, &args.out.join("recon_sdf.pgm"))?;
    println!("wrote predictions to {}", args.out.display());
    Ok(())
}

fn cmd_design(args: DesignArgs) -> Result<(), CliError> {
    if !args.oracle && args.ckpt.is_none() {
        return Err(CliError::Usage("design needs --oracle or --ckpt".into()));
    }
    if !(args.alpha > 0.0 && args.alpha <= 1.0) {
        return Err(CliError::Usage("--alpha must be in (0, 1]".into()));
    }
    let target_pts = read_line_csv(&args.target)?;
    if target_pts.len() < 2 {
        return Err(CliError::Data("target line needs at least 2 points".into()));
    }

    // section (for springback / grid) and workpiece length
    let mut rng = sample_rng(args.section_seed, 0);
    let (_, contour) = sample_section(args.section_type, &mut rng, 16)?;
    let eta = crate::oracle::stiffness_eta(&contour);
    let length = args.length.unwrap_or_else(|| {
        use rand::Rng;
        crate::oracle::LENGTH_RANGE.0
            + (crate::oracle::LENGTH_RANGE.1 - crate::oracle::LENGTH_RANGE.0)
                * rng.gen_range(0.0..1.0)
    });

    let opts = DesignOptions { alpha: args.alpha, tol_mm: args.tol, max_iter: args.max_iter };
    let result = if args.oracle {
        let m = args.m.max(2);
        let target = crate::design::project_mold(&target_pts, m)?;
        let mut predictor = oracle_predictor(length, eta, m);
        design_mold(&target, &mut predictor, &opts)?
    } else {
        let (store, cfg) = load_checkpoint(args.ckpt.as_ref().unwrap(), None)?;
        let handles = ModelHandles::resolve(&store, &cfg)?;
        let grid: SdfGrid = sdf_rasterize(&contour, cfg.h, cfg.w)?;
        let grid_t = Tensor::from_vec(
            &[1, cfg.h, cfg.w],
            grid.values.iter().map(|&v| v as f32).collect(),
        );
        let target = crate::design::project_mold(&target_pts, cfg.m)?;
        let mut predictor = surrogate_predictor(&store, &handles, &cfg, grid_t, length);
        design_mold(&target, &mut predictor, &opts)?
    };

    std::fs::create_dir_all(&args.out)?;
    write_line_csv(&args.out.join("mold.csv"), result.mold.points())?;
    write_line_csv(&args.out.join("predicted.csv"), &result.predicted_final)?;
    let mut f = std::fs::File::create(args.out.join("history.csv"))?;
    writeln!(f, "iteration,mad_mm,max_residual_mm").map_err(CliError::from)?;
    for step in &result.history {
        writeln!(f, "{},{:.6},{:.6}", step.iteration, step.mad_mm, step.max_residual_mm)
            .map_err(CliError::from)?;
    }
    let last = result.history.last().unwrap();
    println!(
        "{} after {} iterations: MAD {:.4} mm (tol {}), outputs in {}",
        if result.converged { "converged" } else { "stopped unconverged" },
        result.history.len() - 1,
        last.mad_mm,
        args.tol,
        args.out.display()
    );
    Ok(())
}

fn cmd_export_attn(args: ExportAttnArgs) -> Result<(), CliError> {
    let (store, cfg) = load_checkpoint(&args.ckpt, None)?;
    let sample = read_sample(&args.sample)?;
    let tensors = SampleTensors::from_sample(&sample, &cfg)?;
    let files = export_attention(&store, &cfg, &tensors, &args.out)?;
    println!("wrote {} attention files to {}", files.len(), args.out.display());
    Ok(())
}
