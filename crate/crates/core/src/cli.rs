//! Command-line front end. Diagnostics go to standard error; results are
//! only written to the paths given on the command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::em::{self, EmConfig};
use crate::error::{Error, Result};
use crate::eval::{self, DEFAULT_PERFECT_TOL};
use crate::geometry::{sign_mask, FanFile, SteepnessConfig};
use crate::image::{load_gray, load_image, load_mask, save_gray, save_mask, GrayImage};
use crate::inpaint::{self, InpaintConfig, ThresholdDirection};
use crate::intensity::{GmmConfig, IntensityModels};
use crate::lbfgs::LbfgsConfig;
use crate::par;
use crate::synth::{self, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "usfan",
    version,
    about = "Ultrasound fan-area detection and annotation removal"
)]
pub struct Cli {
    /// Worker threads; 0 uses one per logical core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Log level on standard error: 0 errors, 1 warnings, 2 info, 3 debug, 4 trace.
    #[arg(long, global = true, default_value_t = 1)]
    pub verbosity: u8,
    /// Base random seed for commands that draw random numbers.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate foreground and background intensity models from a directory of images.
    FitModels(FitModelsArgs),
    /// Fit the fan shape to one image and write its mask.
    Detect(DetectArgs),
    /// Remove annotations inside the fan of one image.
    Inpaint(InpaintArgs),
    /// Write seeded synthetic images with ground-truth masks and parameters.
    Synth(SynthArgs),
    /// Score predicted masks against ground-truth masks with matching file names.
    Eval(EvalArgs),
    /// Copy image and mask pairs into a numbered training layout with a manifest.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct FitModelsArgs {
    /// Directory of PNG/PGM/PPM images.
    #[arg(long)]
    pub images: PathBuf,
    /// Output model JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Mixture EM iteration cap.
    #[arg(long, default_value_t = 500)]
    pub gmm_max_iters: usize,
    /// Mixture EM stopping threshold on the mean per-sample log-likelihood gain.
    #[arg(long, default_value_t = 1e-8)]
    pub gmm_tol: f64,
}

#[derive(Debug, Args)]
pub struct EmArgs {
    /// Sigmoid steepness applied to the implicit field.
    #[arg(long, default_value_t = 0.25)]
    pub kappa: f64,
    /// EM iteration cap.
    #[arg(long, default_value_t = 50)]
    pub max_em_iters: usize,
    /// Stop when the log-likelihood gain per megapixel falls below this.
    #[arg(long, default_value_t = 1e-3)]
    pub loglik_tol: f64,
    /// L-BFGS history length.
    #[arg(long, default_value_t = 10)]
    pub lbfgs_memory: usize,
    /// L-BFGS iteration cap per M-step.
    #[arg(long, default_value_t = 200)]
    pub lbfgs_max_iters: usize,
    /// L-BFGS gradient-norm tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub lbfgs_grad_tol: f64,
}

impl EmArgs {
    pub fn config(&self) -> Result<EmConfig> {
        let cfg = EmConfig {
            max_em_iters: self.max_em_iters,
            loglik_tol: self.loglik_tol,
            lbfgs: LbfgsConfig {
                memory: self.lbfgs_memory,
                max_iters: self.lbfgs_max_iters,
                grad_tol: self.lbfgs_grad_tol,
                ..LbfgsConfig::default()
            },
            steep: SteepnessConfig::new(self.kappa)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Input image.
    #[arg(long)]
    pub image: PathBuf,
    /// Model JSON from `fit-models`. Required unless --self-models is given.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Estimate the intensity models from this image alone instead of a model file.
    #[arg(long, default_value_t = false)]
    pub self_models: bool,
    /// Starting parameters as fan JSON; defaults to the built-in symmetric start.
    #[arg(long)]
    pub theta_init: Option<PathBuf>,
    /// Output mask PNG.
    #[arg(long)]
    pub out_mask: PathBuf,
    /// Optional output fan JSON.
    #[arg(long)]
    pub out_theta: Option<PathBuf>,
    /// Optional CSV of the log-likelihood after every iteration.
    #[arg(long)]
    pub out_trace: Option<PathBuf>,
    #[command(flatten)]
    pub em: EmArgs,
}

#[derive(Debug, Args)]
pub struct InpaintFlags {
    /// Threshold on the contrast-stretched image.
    #[arg(long, default_value_t = 0.85)]
    pub annotation_threshold: f64,
    /// Mask pixels below the threshold instead of above it.
    #[arg(long, default_value_t = false)]
    pub mask_below: bool,
    /// Square dilation radius applied to the annotation mask.
    #[arg(long, default_value_t = 2)]
    pub mask_dilation: usize,
    /// Neighbourhood radius for inpainting.
    #[arg(long, default_value_t = 5)]
    pub telea_radius: usize,
    /// Patch side for non-local means (odd).
    #[arg(long, default_value_t = 7)]
    pub nlm_patch: usize,
    /// Search window side for non-local means (odd).
    #[arg(long, default_value_t = 21)]
    pub nlm_window: usize,
    /// Non-local means filter strength.
    #[arg(long, default_value_t = 0.08)]
    pub nlm_h: f64,
    /// Channel spread above which a pixel counts as coloured.
    #[arg(long, default_value_t = 0.15)]
    pub color_sat_threshold: f64,
}

impl InpaintFlags {
    pub fn config(&self, seed: u64) -> Result<InpaintConfig> {
        let cfg = InpaintConfig {
            annotation_threshold: self.annotation_threshold,
            threshold_direction: if self.mask_below {
                ThresholdDirection::Below
            } else {
                ThresholdDirection::Above
            },
            mask_dilation: self.mask_dilation,
            telea_radius: self.telea_radius,
            nlm_patch: self.nlm_patch,
            nlm_window: self.nlm_window,
            nlm_h: self.nlm_h,
            color_sat_threshold: self.color_sat_threshold,
            rng_seed: seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    /// Input image.
    #[arg(long)]
    pub image: PathBuf,
    /// Fan mask PNG.
    #[arg(long, conflicts_with = "theta", required_unless_present = "theta")]
    pub fan_mask: Option<PathBuf>,
    /// Fan JSON to rasterize instead of a mask.
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Output cleaned PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional output PNG of the inpainted annotation mask.
    #[arg(long)]
    pub out_annotations: Option<PathBuf>,
    #[command(flatten)]
    pub flags: InpaintFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; receives images/, fan/, annotations/ and theta/.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of images; image i uses seed + i.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Image width.
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    /// Image height.
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    /// Annotations stamped per image.
    #[arg(long, default_value_t = 0)]
    pub annotations: usize,
    /// Spec JSON overriding the size, model and annotation flags (its seed is replaced).
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks; every PNG here needs a namesake in --pred.
    #[arg(long)]
    pub gt: PathBuf,
    /// Optional per-image CSV.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// Largest mismatch fraction still labelled Perfect.
    #[arg(long, default_value_t = DEFAULT_PERFECT_TOL)]
    pub perfect_tol: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Directory of images.
    #[arg(long)]
    pub images: PathBuf,
    /// Directory of masks with the same file names.
    #[arg(long)]
    pub masks: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

/// Image files of `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn fit_models(args: &FitModelsArgs) -> Result<()> {
    let files = list_images(&args.images)?;
    if files.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no images found in {}",
            args.images.display()
        )));
    }
    let images = files.iter().map(load_gray).collect::<Result<Vec<_>>>()?;
    let cfg = GmmConfig {
        max_iters: args.gmm_max_iters,
        tol: args.gmm_tol,
    };
    let models = IntensityModels::fit(&images, &cfg)?;
    log::info!("fitted models from {} images: {:?}", images.len(), models);
    models.save(&args.out)
}

fn detect(args: &DetectArgs) -> Result<()> {
    let img = load_gray(&args.image)?;
    let models = match &args.models {
        Some(p) => IntensityModels::load(p)?,
        None => IntensityModels::fit(std::slice::from_ref(&img), &GmmConfig::default())?,
    };
    let cfg = args.em.config()?;
    let theta0 = match &args.theta_init {
        Some(p) => FanFile::load(p)?.theta,
        None => em::default_init(img.width(), img.height())?,
    };
    let (theta, trace) = em::fit(&img, &models.fg, &models.bg, &theta0, &cfg)?;
    log::info!(
        "{}: {} EM iterations, final log-likelihood {:.6}",
        args.image.display(),
        trace.iterations(),
        trace.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    save_mask(
        &sign_mask(&theta, img.width(), img.height()),
        &args.out_mask,
    )?;
    if let Some(p) = &args.out_theta {
        FanFile::new(theta, cfg.steep).save(p)?;
    }
    if let Some(p) = &args.out_trace {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["iter", "log_likelihood"])?;
        for (i, ll) in trace.log_likelihood.iter().enumerate() {
            w.write_record([i.to_string(), format!("{ll:e}")])?;
        }
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn inpaint_cmd(args: &InpaintArgs, seed: u64) -> Result<()> {
    let cfg = args.flags.config(seed)?;
    let img = load_image(&args.image)?;
    let fan = match (&args.fan_mask, &args.theta) {
        (Some(p), _) => load_mask(p)?,
        (None, Some(p)) => sign_mask(&FanFile::load(p)?.theta, img.width(), img.height()),
        (None, None) => unreachable!("clap requires one of the fan sources"),
    };
    let cleaned = inpaint::clean_image_with_mask(&img, &fan, &cfg)?;
    log::info!(
        "inpainted {} annotation pixels",
        cleaned.annotations.count()
    );
    save_gray(&cleaned.image, &args.out)?;
    if let Some(p) = &args.out_annotations {
        save_mask(&cleaned.annotations, p)?;
    }
    Ok(())
}

fn synth_cmd(args: &SynthArgs, seed: u64) -> Result<()> {
    let base = match &args.spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::random(args.width, args.height, args.annotations, seed),
    };
    let dirs = ["images", "fan", "annotations", "theta"].map(|d| args.out_dir.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let results = par::map_indices(args.count, |i| {
        let spec = SynthSpec {
            rng_seed: seed.wrapping_add(i as u64),
            ..base
        };
        synth::generate(&spec)
    });
    for (i, s) in results.into_iter().enumerate() {
        let s = s?;
        let name = format!("{i:04}");
        save_gray(&s.image, dirs[0].join(format!("{name}.png")))?;
        save_mask(&s.fan, dirs[1].join(format!("{name}.png")))?;
        save_mask(&s.annotations, dirs[2].join(format!("{name}.png")))?;
        FanFile::new(s.theta, SteepnessConfig::default())
            .save(dirs[3].join(format!("{name}.json")))?;
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let gts = list_images(&args.gt)?;
    let mut pairs = Vec::with_capacity(gts.len());
    let mut names = Vec::with_capacity(gts.len());
    for gt in &gts {
        let name = file_name(gt);
        let pred = args.pred.join(&name);
        pairs.push((load_mask(&pred)?, load_mask(gt)?));
        names.push(name);
    }
    let report = eval::batch_evaluate_with(&pairs, args.perfect_tol)?;
    print!("{}", report.to_table());
    if let Some(p) = &args.out_csv {
        report.write_csv(&names, p)?;
    }
    Ok(())
}

fn export_cmd(args: &ExportArgs) -> Result<()> {
    let files = list_images(&args.images)?;
    let mut images: Vec<GrayImage> = Vec::with_capacity(files.len());
    let mut masks = Vec::with_capacity(files.len());
    for f in &files {
        images.push(load_gray(f)?);
        masks.push(load_mask(args.masks.join(file_name(f)))?);
    }
    eval::export_dataset(&images, &masks, &args.out_dir)
}

fn usage_error(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => log::LevelFilter::Error,
        1 => log::LevelFilter::Warn,
        2 => log::LevelFilter::Info,
        3 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // A second call in the same process (tests) keeps the first logger.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .try_init();
    log::set_max_level(level);
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::FitModels(a) => fit_models(a),
        Command::Detect(a) => detect(a),
        Command::Inpaint(a) => inpaint_cmd(a, cli.seed),
        Command::Synth(a) => synth_cmd(a, cli.seed),
        Command::Eval(a) => eval_cmd(a),
        Command::Export(a) => export_cmd(a),
    }
}

/// Parses `argv` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Command::Detect(a) = &cli.command {
        if a.models.is_none() && !a.self_models {
            return usage_error(
                "detect needs --models <FILE> (or --self-models to estimate them from the image)",
            );
        }
    }
    init_logging(cli.verbosity);
    let result = if cli.threads == 0 {
        dispatch(&cli)
    } else {
        par::with_threads(cli.threads, || dispatch(&cli))
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
