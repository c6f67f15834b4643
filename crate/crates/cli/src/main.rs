use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use planecal::geometry::{CameraIntrinsics, Se3};
use planecal::io::{self, IoError};
use planecal::metrics::calibration_error;
use planecal::pipeline::{run_pipeline, CalibrationInputs, Checkpoint, PipelineConfig, RunStatus, Stage};
use planecal::synth::{self, SceneKind, SceneSpec};

const EXIT_USAGE: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(
    name = "planecal",
    version,
    about = "Targetless camera/LiDAR calibration from planar scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory with ground truth.
    Synth(SynthArgs),
    /// Run the calibration pipeline on a dataset manifest.
    Calibrate(CalibrateArgs),
    /// Compare calibrated parameters against ground truth.
    Evaluate(EvaluateArgs),
    /// Color a frame's scan with its image under given parameters.
    Colorize(ColorizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description file; overrides --scene.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Built-in scene: courtyard, corridor or degenerate_z.
    #[arg(long, default_value = "courtyard")]
    scene: SceneKind,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the scene seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rotation of the initial extrinsics away from the truth.
    #[arg(long, default_value_t = 5.0)]
    rotation_deg: f64,
    /// Translation of the initial extrinsics away from the truth, meters.
    #[arg(long, default_value_t = 0.4)]
    translation_m: f64,
    /// Initial scale as a multiple of the true one. Omitted: estimated.
    #[arg(long)]
    scale_factor: Option<f64>,
    /// Seed of the initial-extrinsics perturbation; defaults to the scene seed.
    #[arg(long)]
    perturb_seed: Option<u64>,
    /// Skip rendering images.
    #[arg(long)]
    no_images: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Configuration file; overrides the manifest's embedded config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// First stage to run; earlier outputs come from the checkpoint.
    #[arg(long, default_value = "odometry")]
    from: Stage,
    /// Checkpoint to resume from; defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override one config key, e.g. `joint.alpha=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// File with `intrinsics` and `extrinsics`, such as calibration.json.
    #[arg(long)]
    params: PathBuf,
    /// Ground truth file with the same fields.
    #[arg(long)]
    gt: PathBuf,
    /// Grid stride of the intrinsic metric; 1 is the full grid.
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ColorizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// File with `intrinsics` and `extrinsics`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// PPM image; defaults to the frame's image in the manifest.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(IoError),
    Failed(u8, String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Failed(_, m) => f.write_str(m),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Failed(c, _) => *c,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Colorize(a) => cmd_colorize(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("planecal: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CliError::Io(IoError::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => {
            require_file(p, "scene spec")?;
            io::load_json(p)?
        }
        None => synth::default_scene(a.scene),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = synth::generate(&spec).map_err(|e| CliError::Io(IoError::Invalid(e.to_string())))?;
    let initial = synth::perturb_extrinsics(
        &ds.gt_extrinsics,
        a.rotation_deg,
        a.translation_m,
        a.perturb_seed.unwrap_or(spec.seed),
    );
    let inputs = CalibrationInputs::from_synthetic(&ds, initial, a.scale_factor.map(|f| f * ds.gt_scale));

    create_dir(&a.out.join("clouds"))?;
    let images = if a.no_images {
        None
    } else {
        create_dir(&a.out.join("images"))?;
        let mut names = Vec::with_capacity(ds.clouds.len());
        for k in 0..ds.clouds.len() {
            let rel = format!("images/{k:04}.ppm");
            io::save_ppm(&a.out.join(&rel), &synth::render_image(&ds, k))?;
            names.push(rel);
        }
        Some(names)
    };
    let manifest = io::save_inputs(&a.out, &inputs, None, images.as_deref())?;
    io::save_json(&a.out.join("scene.json"), &ds.spec)?;
    io::save_json(
        &a.out.join("gt.json"),
        inputs.ground_truth.as_ref().expect("synthetic inputs carry truth"),
    )?;
    println!(
        "wrote {} frames, {} tracks to {}",
        inputs.clouds.len(),
        inputs.tracks.len(),
        manifest.display()
    );
    Ok(())
}

/// Sets `key` (dotted path into the config) to `raw`, read as JSON or,
/// failing that, as a string. Only existing keys can be set.
fn apply_override(cfg: &PipelineConfig, assignment: &str) -> Result<PipelineConfig, CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("`{assignment}` is not KEY=VALUE")))?;
    let mut root = serde_json::to_value(cfg).expect("config serializes");
    let mut slot = &mut root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    serde_json::from_value(root).map_err(|e| CliError::Usage(format!("bad value for `{key}`: {e}")))
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<(), CliError> {
    require_file(&a.manifest, "manifest")?;
    if let Some(n) = a.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let manifest = io::load_manifest(&a.manifest)?;
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            io::load_config(p)?
        }
        None => manifest.config.clone().unwrap_or_default(),
    };
    for o in &a.overrides {
        cfg = apply_override(&cfg, o)?;
    }
    let inputs = io::load_inputs(&manifest)?;

    let resume = if a.from > Stage::Odometry {
        let path = a.checkpoint.clone().unwrap_or_else(|| a.out.join("checkpoint.json"));
        require_file(&path, "checkpoint")?;
        Some(io::load_json::<Checkpoint>(&path)?)
    } else {
        None
    };

    let run = run_pipeline(&inputs, &cfg, a.from, resume);
    create_dir(&a.out)?;
    io::save_json(&a.out.join("report.json"), &run.report)?;
    io::save_json(&a.out.join("checkpoint.json"), &run.checkpoint)?;
    if let Some(result) = &run.report.result {
        io::save_json(&a.out.join("calibration.json"), result)?;
    }

    let r = &run.report;
    println!("status: {:?}", r.status);
    if let Some(res) = &r.result {
        let d = &res.intrinsics;
        println!(
            "intrinsics: fx {} fy {} cx {} cy {} k1 {} k2 {}",
            d.fx, d.fy, d.cx, d.cy, d.k1, d.k2
        );
        println!("extrinsics: {:?}", res.extrinsics.to_array());
        println!("scale: {}", res.scale);
    }
    if let Some(e) = r.evaluation.as_ref().and_then(|e| e.final_error.as_ref()) {
        println!(
            "error: {:.4} deg  {:.4} cm  {:.4} px",
            e.rotation_deg, e.translation_cm, e.intrinsic_px
        );
    }
    if let Some(d) = &r.degeneracy {
        if d.degenerate {
            let w = d.weak_direction;
            println!(
                "weak direction: [{:.4}, {:.4}, {:.4}] (ratio {:.3e})",
                w.x, w.y, w.z, d.ratio
            );
        }
    }
    let msg = || {
        format!(
            "{:?} in stage {:?}: {}",
            r.status,
            r.failed_stage,
            r.error.as_deref().unwrap_or("no detail")
        )
    };
    match r.status {
        RunStatus::Converged => Ok(()),
        RunStatus::Degenerate => Err(CliError::Failed(EXIT_DEGENERATE, msg())),
        RunStatus::NotConverged | RunStatus::Failed => Err(CliError::Failed(EXIT_NOT_CONVERGED, msg())),
    }
}

/// Reads `intrinsics` and `extrinsics` from any parameter-carrying file.
fn load_params(path: &Path) -> Result<(CameraIntrinsics, Se3), CliError> {
    require_file(path, "parameter file")?;
    let v: Value = io::load_json(path)?;
    let field = |name: &str| {
        v.get(name).cloned().ok_or_else(|| IoError::Schema {
            path: path.to_path_buf(),
            errors: vec![format!("$.{name}: missing")],
        })
    };
    let schema = |e: serde_json::Error| IoError::Schema {
        path: path.to_path_buf(),
        errors: vec![e.to_string()],
    };
    let d = serde_json::from_value(field("intrinsics")?).map_err(schema)?;
    let x = serde_json::from_value(field("extrinsics")?).map_err(schema)?;
    Ok((d, x))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    if a.stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let (d, x) = load_params(&a.params)?;
    let (d_gt, x_gt) = load_params(&a.gt)?;
    let err =
        calibration_error(&x, &x_gt, &d, &d_gt, a.stride).map_err(|e| CliError::Io(IoError::Invalid(e.to_string())))?;
    println!("rotation_deg {}", err.rotation_deg);
    println!("translation_cm {}", err.translation_cm);
    println!("intrinsic_px {}", err.intrinsic_px);
    if let Some(out) = &a.out {
        io::save_json(out, &err)?;
    }
    Ok(())
}

fn cmd_colorize(a: &ColorizeArgs) -> Result<(), CliError> {
    require_file(&a.manifest, "manifest")?;
    let manifest = io::load_manifest(&a.manifest)?;
    let frame = manifest.frames.get(a.frame).ok_or_else(|| {
        CliError::Usage(format!(
            "frame {} out of range ({} frames)",
            a.frame,
            manifest.frames.len()
        ))
    })?;
    let image_path = a
        .image
        .clone()
        .or_else(|| frame.image.clone())
        .ok_or_else(|| CliError::Usage(format!("frame {} has no image; pass --image", a.frame)))?;
    require_file(&image_path, "image")?;
    let (d, x) = load_params(&a.params)?;
    let image = io::load_ppm(&image_path)?;
    if image.width != d.width || image.height != d.height {
        return Err(CliError::Io(IoError::Invalid(format!(
            "image is {}x{} but the intrinsics are {}x{}",
            image.width, image.height, d.width, d.height
        ))));
    }
    let cloud = io::load_cloud(&frame.cloud)?;
    let colored = io::colorize(&cloud, &image, &d, &x, &Se3::identity());
    io::save_colored_cloud(&a.out, &colored)?;
    println!(
        "colored {} of {} points into {}",
        colored.colored_count(),
        colored.points.len(),
        a.out.display()
    );
    Ok(())
}
