//! Command-line surface. Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::enhancer::{enhance, export_maps};
use crate::error::{Error, Result};
use crate::gradcheck::run_gradcheck;
use crate::imageio::{load_image, save_png};
use crate::infer::{Backend, InferenceNet};
use crate::losses::{ColorMode, LossWeights};
use crate::menet::{count_macs, count_params, init_params, MeNetParams, DEFAULT_ITERATIONS, INIT_STD};
use crate::tensor::ImageTensor;
use crate::train::{list_images, train, FeatureSource, TrainConfig};
use crate::weights::{load_weights, params_from_weight_file, save_weights, WeightFile, STEP_TENSOR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const THREADS_ENV: &str = "DARKLIGHTER_THREADS";

#[derive(Debug, Parser)]
#[command(name = "darklighter", version, about = "Iterative Retinex low-light image enhancer")]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value file of flag defaults; flags on the command line take precedence
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance an image or every image in a directory
    Enhance(EnhanceArgs),
    /// Time ME-Net plus enhancement and print cost figures
    Bench(BenchArgs),
    /// Check every analytic gradient against finite differences
    Gradcheck(GradcheckArgs),
    /// Fit ME-Net on a directory of images without references
    Train(TrainArgs),
    /// List the tensors in a weight file
    Inspect(InspectArgs),
    /// Write freshly initialized weights
    Init(InitArgs),
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Image file or directory of images
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Must match the weight file when given
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Also write intermediates and E/N maps
    #[arg(long)]
    pub save_maps: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Defaults to freshly initialized weights
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 100)]
    pub repeat: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force the portable kernels
    #[arg(long)]
    pub portable: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate one component's analytic gradient (exercises the failure path)
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 193)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 256)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    /// Pretrained feature-extractor weights; a seeded random prefix otherwise
    #[arg(long)]
    pub fx_weights: Option<PathBuf>,
    /// `literal` or `channel_mean`
    #[arg(long, default_value = "literal")]
    pub color_mode: ColorMode,
    /// Checkpoint every N epochs (0: final only)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Clip the batch gradient to this global norm
    #[arg(long)]
    pub clip_grad: Option<f32>,
    #[arg(long, default_value_t = 1600.0)]
    pub lambda_col: f64,
    #[arg(long, default_value_t = 50.0)]
    pub lambda_cen: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_ill: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lambda_sem: f64,
    #[arg(long, default_value_t = 50.0)]
    pub lambda_noi: f64,
    #[arg(long, default_value_t = 0.6)]
    pub well_lit_level: f64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    /// All-zero weights, which make the enhancer an exact identity
    #[arg(long)]
    pub zero: bool,
}

/// A failure carrying its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Finds `--config PATH` / `--config=PATH` in raw arguments.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Turns `key = value` lines into flags for `subcommand`; `#` starts a comment.
fn config_flags(path: &Path, subcommand: &str) -> std::result::Result<Vec<OsString>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let root = Cli::command();
    let sub = root
        .find_subcommand(subcommand)
        .ok_or_else(|| usage(format!("unknown subcommand `{subcommand}`")))?;
    let mut flags = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| {
                usage(format!(
                    "{}:{}: unknown key `{key}` for {subcommand}",
                    path.display(),
                    n + 1
                ))
            })?;
        if arg.get_action().takes_values() {
            flags.push(format!("--{key}").into());
            flags.push(value.into());
        } else {
            match value {
                "true" => flags.push(format!("--{key}").into()),
                "false" => {}
                other => {
                    return Err(usage(format!(
                        "{}:{}: `{key}` expects true or false, got `{other}`",
                        path.display(),
                        n + 1
                    )))
                }
            }
        }
    }
    Ok(flags)
}

/// Inserts config-file flags right after the subcommand so explicit flags override them.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let names: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|s| s.get_name().to_owned())
        .collect();
    let Some(pos) = args.iter().position(|a| names.iter().any(|n| a.to_str() == Some(n))) else {
        return Ok(args);
    };
    let sub = args[pos].to_string_lossy().into_owned();
    let flags = config_flags(&path, &sub)?;
    let mut out = args[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool built by an earlier call in this process stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let result = expand_config(args).and_then(|args| {
        let cli = match Cli::try_parse_from(args) {
            Ok(cli) => cli,
            Err(e) => {
                let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
                let text = e.render().to_string();
                let _ = if code == EXIT_OK {
                    write!(out, "{text}")
                } else {
                    write!(err, "{text}")
                };
                return Ok(code);
            }
        };
        configure_threads()?;
        dispatch(cli.command, out, err)
    });
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    match command {
        Command::Enhance(a) => cmd_enhance(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out, err),
        Command::Train(a) => cmd_train(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
        Command::Init(a) => cmd_init(&a, out),
    }
}

fn io_fail(e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: format!("write failed: {e}"),
    }
}

fn cmd_enhance(a: &EnhanceArgs, out: &mut dyn Write) -> CmdResult {
    if !a.input.exists() {
        return Err(usage(format!("input {} does not exist", a.input.display())));
    }
    let params = load_weights(&a.weights)?;
    if let Some(it) = a.iterations {
        if it != params.iterations() {
            return Err(usage(format!(
                "--iterations {it} does not match {} ({} iterations)",
                a.weights.display(),
                params.iterations()
            )));
        }
    }
    let inputs = if a.input.is_dir() {
        let files = list_images(&a.input)?;
        if files.is_empty() {
            return Err(usage(format!("no images found in {}", a.input.display())));
        }
        files
    } else {
        vec![a.input.clone()]
    };
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;

    let mut net = InferenceNet::new(&params);
    for path in &inputs {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let image = load_image(path)?;
        let (e, n) = net.maps(&image)?;
        let result = enhance(&image, &e, &n)?;
        let target = a.output.join(format!("{stem}_enhanced.png"));
        save_png(&result.export, &target)?;
        if a.save_maps {
            export_maps(&a.output, &stem, &result, &e, &n)?;
        }
        writeln!(out, "{} -> {}", path.display(), target.display()).map_err(io_fail)?;
    }
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub size: usize,
    pub repeat: usize,
    pub backend: Backend,
    pub mspf: f64,
    pub fps: f64,
    pub params: usize,
    pub macs: u64,
}

impl BenchReport {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

fn giga(v: u64) -> String {
    format!("{:.2}G", v as f64 / 1e9)
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "input {0}x{0}, {1} timed runs, {2:?} kernels",
            self.size, self.repeat, self.backend
        )?;
        writeln!(
            f,
            "{:>10} {:>10} {:>10} {:>10} {:>10}",
            "MSPF", "FPS", "Params", "FLOPs", "MACs"
        )?;
        writeln!(
            f,
            "{:>10.3} {:>10.2} {:>10} {:>10} {:>10}",
            self.mspf,
            self.fps,
            self.params,
            giga(self.flops()),
            giga(self.macs)
        )?;
        write!(
            f,
            "FLOPs counts 2 per multiply-accumulate; MACs counts each multiply-accumulate once"
        )
    }
}

/// Times `repeat` runs of ME-Net plus enhancement on a seeded random image.
pub fn run_bench(
    params: &MeNetParams<f32>,
    size: usize,
    repeat: usize,
    warmup: usize,
    seed: u64,
    backend: Backend,
) -> Result<BenchReport> {
    if repeat < 1 {
        return Err(Error::InvalidArgument("--repeat must be at least 1".into()));
    }
    if size < 1 {
        return Err(Error::InvalidArgument("--size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = ImageTensor::from_fn(3, size, size, |_, _, _| rng.gen_range(0.0..1.0));
    let mut net = InferenceNet::with_backend(params, backend);
    let frame = |net: &mut InferenceNet| -> Result<()> {
        let (e, n) = net.maps(&image)?;
        std::hint::black_box(enhance(&image, &e, &n)?);
        Ok(())
    };
    for _ in 0..warmup {
        frame(&mut net)?;
    }
    let start = Instant::now();
    for _ in 0..repeat {
        frame(&mut net)?;
    }
    let mspf = start.elapsed().as_secs_f64() * 1e3 / repeat as f64;
    Ok(BenchReport {
        size,
        repeat,
        backend: net.backend(),
        mspf,
        fps: 1e3 / mspf,
        params: count_params(params),
        macs: count_macs(size, size),
    })
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CmdResult {
    let params = match &a.weights {
        Some(p) => load_weights(p)?,
        None => init_params(a.seed),
    };
    let backend = if a.portable {
        Backend::Portable
    } else {
        Backend::detect()
    };
    let report = run_bench(&params, a.size, a.repeat, a.warmup, a.seed, backend)?;
    writeln!(out, "{report}").map_err(io_fail)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let report = run_gradcheck(a.seed, a.inject_fault.as_deref())?;
    writeln!(out, "{report}").map_err(io_fail)?;
    if report.passed() {
        Ok(EXIT_OK)
    } else {
        writeln!(err, "gradient check failed: {}", report.failures().join(", ")).map_err(io_fail)?;
        Ok(EXIT_FAILURE)
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = TrainConfig::new(&a.data, &a.output);
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.learning_rate = a.lr;
    cfg.image_size = a.image_size;
    cfg.seed = a.seed;
    cfg.iterations = a.iterations;
    cfg.color_mode = a.color_mode;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.clip_grad_norm = a.clip_grad;
    cfg.feature_extractor = match &a.fx_weights {
        Some(p) => FeatureSource::Pretrained(p.clone()),
        None => FeatureSource::Random(a.seed),
    };
    cfg.loss_weights = LossWeights {
        lambda_col: a.lambda_col,
        lambda_cen: a.lambda_cen,
        lambda_ill: a.lambda_ill,
        lambda_sem: a.lambda_sem,
        lambda_noi: a.lambda_noi,
        well_lit_level: a.well_lit_level,
    };
    cfg.validate()?;
    if !a.data.is_dir() {
        return Err(usage(format!("data directory {} does not exist", a.data.display())));
    }
    let outcome = train(&cfg)?;
    let last = outcome.history.last().map(|r| r.total).unwrap_or(f64::NAN);
    writeln!(
        out,
        "trained {} steps, final loss {last:.6}, weights {}",
        outcome.history.len(),
        outcome.checkpoint.display()
    )
    .map_err(io_fail)?;
    Ok(EXIT_OK)
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> CmdResult {
    let file = WeightFile::read(&a.weights)?;
    let params = params_from_weight_file(&file)?;
    let mut count = 0;
    let mut lines = String::new();
    for t in &file.tensors {
        if t.name == STEP_TENSOR {
            continue;
        }
        count += 1;
        lines.push_str(&format!("{:<16} {:<12} {:>6}\n", t.name, t.dims_string(), t.data.len()));
    }
    write!(out, "{lines}").map_err(io_fail)?;
    if let Some(step) = file.get(STEP_TENSOR) {
        writeln!(out, "step {}", step.data.first().copied().unwrap_or(0.0)).map_err(io_fail)?;
    }
    writeln!(out, "iterations {}", params.iterations()).map_err(io_fail)?;
    writeln!(out, "tensors {count}").map_err(io_fail)?;
    writeln!(out, "total {}", count_params(&params)).map_err(io_fail)?;
    Ok(EXIT_OK)
}

fn cmd_init(a: &InitArgs, out: &mut dyn Write) -> CmdResult {
    if a.iterations < 1 {
        return Err(usage("--iterations must be at least 1"));
    }
    let params = if a.zero {
        MeNetParams::zeros(a.iterations)
    } else {
        MeNetParams::init(a.seed, a.iterations, INIT_STD)
    };
    save_weights(&params, &a.output, None)?;
    writeln!(out, "wrote {}", a.output.display()).map_err(io_fail)?;
    Ok(EXIT_OK)
}
