//! The `bcnn` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bitcore::{bin_gemm, BitMatrix, RealTensor};
use crate::blocks::{ConvModule1x1, WeightMode};
use crate::complexity::{count_ops, decoder_share, param_count_audit, render_csv, render_table, OpCountReport};
use crate::error::Error;
use crate::network::{
    format, load_image, load_model, preprocess, write_atomic, Model, NetworkConfig, Normalization,
};
use crate::training::{
    load_checkpoint, load_folder, read_teacher_pmf, save_checkpoint, synthetic_gratings, write_metrics_csv, Checkpoint, DataSplit,
    EpochMetrics, LossKind, Step, TrainConfig, Trainer, METRICS_FILE, STATE_FILE, SyntheticSpec,
};
use crate::ufa::{build_for_target, eval_ufa, point_rows, points_csv, summary, sweep, sweep_csv, Target};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bcnn", version, about = "Binary CNN toolkit")]
pub struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true, env = "BCNN_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and operation counts of a network.
    Count(CountArgs),
    /// Build and evaluate the 3-layer binary function approximator.
    Ufa(UfaArgs),
    /// Two-step training with checkpoints and a metrics log.
    Train(TrainArgs),
    /// Classify an image (or a seeded random input) with a saved model.
    Infer(InferArgs),
    /// Binary versus float throughput of the GEMM or 1x1 conv kernels.
    Bench(BenchArgs),
    /// Describe a model file or a training checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Built-in network: p1, p2 or toy. Repeat for several columns.
    #[arg(long, conflicts_with = "config")]
    pub preset: Vec<String>,
    /// Network config file.
    #[arg(long)]
    pub config: Vec<PathBuf>,
    /// Add the parameter-megabyte and normalized-operation rows.
    #[arg(long)]
    pub normalized: bool,
    /// Also write the counts as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Input resolution (default: the config's).
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct UfaArgs {
    /// sinewave, ramp, step or csv:<path>.
    #[arg(long = "fn", default_value = "sinewave")]
    pub target: String,
    /// Grid width; 1/d must be an integer.
    #[arg(long, default_value_t = 0.125)]
    pub d: f64,
    /// Quantization level.
    #[arg(long = "Q", default_value_t = 8)]
    pub q: u32,
    /// Number of (d/2, 2Q) refinements to tabulate instead of a single network.
    #[arg(long)]
    pub sweep: Option<usize>,
    /// Interior sample count for errors and the point table.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// CSV destination (points, or the sweep table with --sweep).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StepArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `synthetic` or a folder-per-class image directory.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Training images in the synthetic set (test split: one fifth of this).
    #[arg(long, default_value_t = 5000)]
    pub synthetic_train: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub step: StepArg,
    /// Continue an interrupted run from its checkpoint directory.
    #[arg(long, conflicts_with = "from")]
    pub resume: Option<PathBuf>,
    /// Start from the weights of a checkpoint with a fresh optimizer (step 2 or another cycle).
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Warm-up and decay epochs as `W+D`, or `W+D,W+D` for steps 1 and 2.
    #[arg(long)]
    pub epochs_override: Option<String>,
    #[arg(long)]
    pub max_lr_override: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Teacher pmf file: little-endian f32 rows, one per training image.
    #[arg(long)]
    pub teacher_pmf: Option<PathBuf>,
    /// Network preset (default toy).
    #[arg(long, default_value = "toy", conflicts_with = "config")]
    pub preset: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PNG or PPM image; 3-channel images gain the intensity channel.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    pub image: Option<PathBuf>,
    /// Use a seeded standard-normal input instead of an image.
    #[arg(long)]
    pub random: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchOp {
    Gemm,
    Conv,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "gemm")]
    pub op: BenchOp,
    /// Rows of A (gemm) or feature-map height (conv).
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    /// Inner dimension (gemm) or channels (conv).
    #[arg(long, default_value_t = 512)]
    pub k: usize,
    /// Columns of B (gemm) or feature-map width (conv).
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Model file, checkpoint directory or state file.
    pub path: PathBuf,
}

/// A failed command: message and exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

/// Data and file problems exit with 3, argument and configuration problems with 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::CheckpointIncompatible(_) | Error::ResourceLimit(_) => {
            EXIT_USAGE
        }
        _ => EXIT_DATA,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Count(a) => cmd_count(a, out),
        Command::Ufa(a) => cmd_ufa(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

fn io_fail(e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: e.to_string(),
    }
}

fn config_from(preset: Option<&str>, path: Option<&Path>) -> std::result::Result<NetworkConfig, Failure> {
    let res = match (path, preset) {
        (Some(p), _) => NetworkConfig::from_file(p),
        (None, Some(name)) => NetworkConfig::preset(name),
        (None, None) => NetworkConfig::preset("toy"),
    };
    res.map_err(|e| Failure::usage(e.to_string()))
}

fn column_label(preset: &str) -> String {
    match preset {
        "p1" => "P=1".into(),
        "p2" => "P=2".into(),
        other => other.into(),
    }
}

fn cmd_count(a: CountArgs, out: &mut dyn Write) -> CmdResult {
    let mut configs: Vec<(String, NetworkConfig)> = Vec::new();
    for p in &a.config {
        let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("config").to_string();
        configs.push((label, config_from(None, Some(p))?));
    }
    let presets = if a.preset.is_empty() && a.config.is_empty() {
        vec!["p1".to_string(), "p2".to_string()]
    } else {
        a.preset.clone()
    };
    for p in &presets {
        configs.push((column_label(p), config_from(Some(p), None)?));
    }
    let columns: Vec<(String, OpCountReport)> = configs
        .iter()
        .map(|(label, cfg)| (label.clone(), count_ops(cfg, a.input_size.unwrap_or(cfg.input_size))))
        .collect();
    write!(out, "{}", render_table(&columns, a.normalized)).map_err(io_fail)?;
    for (label, cfg) in &configs {
        writeln!(out, "{label}: decoder share of real parameters {:.1}%", 100.0 * decoder_share(cfg)).map_err(io_fail)?;
    }
    if let Some(path) = &a.csv {
        write_atomic(path, render_csv(&columns, a.normalized)?.as_bytes())?;
    }
    Ok(())
}

fn parse_target(spec: &str) -> std::result::Result<Target, Failure> {
    match spec {
        "sinewave" => Ok(Target::Sinewave),
        "ramp" => Ok(Target::Ramp),
        "step" => Ok(Target::Step),
        s => match s.strip_prefix("csv:") {
            Some(path) => Ok(Target::from_csv(Path::new(path))?),
            None => Err(Failure::usage(format!(
                "unknown function '{s}' (expected sinewave, ramp, step or csv:<path>)"
            ))),
        },
    }
}

fn cmd_ufa(a: UfaArgs, out: &mut dyn Write) -> CmdResult {
    let target = parse_target(&a.target)?;
    if a.samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    if let Some(steps) = a.sweep {
        if steps == 0 {
            return Err(Failure::usage("--sweep needs at least one setting"));
        }
        let rows = sweep(&target, a.d, a.q, steps, a.samples)?;
        let csv = sweep_csv(&rows)?;
        match &a.out {
            Some(p) => write_atomic(p, csv.as_bytes())?,
            None => write!(out, "{csv}").map_err(io_fail)?,
        }
        for r in &rows {
            writeln!(out, "d={} Q={} sup_error={:.6} sub_branches={}", r.d, r.q, r.sup_error, r.sub_branches)
                .map_err(io_fail)?;
        }
        return Ok(());
    }
    let net = build_for_target(&target, a.d, a.q, false)?;
    let rows = point_rows(&net, |x| target.eval(x), a.samples)?;
    let sup = rows.iter().map(|r| r.abs_error).fold(0.0, f64::max);
    let (lo, hi) = target.domain();
    let cells = (1.0 / a.d).round() as usize;
    let width = (hi - lo) / cells as f64;
    let mut center = 0.0f64;
    for k in 1..cells {
        let x = lo + k as f64 * width;
        if target.discontinuities().iter().all(|(x0, _)| (x - x0).abs() > 1e-12) {
            center = center.max((eval_ufa(&net, x)? - target.eval(x)).abs());
        }
    }
    writeln!(out, "{}", summary(&net)).map_err(io_fail)?;
    writeln!(
        out,
        "grid-center error {center:.6} (bound 1/(2Q) = {:.6}), sup error over {} interior samples {sup:.6}",
        0.5 / a.q as f64,
        rows.len()
    )
    .map_err(io_fail)?;
    if let Some(p) = &a.out {
        write_atomic(p, points_csv(&rows)?.as_bytes())?;
    }
    Ok(())
}

/// `W+D` or `W+D,W+D`.
fn parse_epochs(s: &str) -> std::result::Result<Vec<(usize, usize)>, Failure> {
    let bad = || Failure::usage(format!("--epochs-override expects W+D or W+D,W+D, got '{s}'"));
    let parts: Vec<(usize, usize)> = s
        .split(',')
        .map(|p| {
            let (w, d) = p.trim().split_once('+').ok_or_else(bad)?;
            Ok((w.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?))
        })
        .collect::<std::result::Result<_, Failure>>()?;
    if parts.is_empty() || parts.len() > 2 {
        return Err(bad());
    }
    Ok(parts)
}

struct TrainPlan {
    step1: TrainConfig,
    step2: TrainConfig,
}

fn plan(a: &TrainArgs) -> std::result::Result<TrainPlan, Failure> {
    let mut step1 = TrainConfig::step1();
    let mut step2 = TrainConfig::step2();
    if let Some(s) = &a.epochs_override {
        let e = parse_epochs(s)?;
        let (first, second) = (e[0], *e.get(1).unwrap_or(&e[0]));
        match a.step {
            StepArg::Two => step2 = step2.with_epochs(first.0, first.1),
            _ => {
                step1 = step1.with_epochs(first.0, first.1);
                step2 = step2.with_epochs(second.0, second.1);
            }
        }
    }
    for cfg in [&mut step1, &mut step2] {
        if let Some(lr) = a.max_lr_override {
            cfg.max_lr = lr;
        }
        if let Some(b) = a.batch_size {
            cfg.batch_size = b;
        }
        if a.teacher_pmf.is_some() {
            cfg.loss = LossKind::Distributional;
        }
        cfg.validate()?;
    }
    Ok(TrainPlan { step1, step2 })
}

fn step_dir(out: &Path, step: Step) -> PathBuf {
    out.join(format!("step{}", step.number()))
}

fn log_epoch(out: &mut dyn Write, step: Step, m: &EpochMetrics) {
    let _ = writeln!(
        out,
        "step {} epoch {:>3}  lr {:.3e}  loss {:.4}  train_acc {:.4}  eval_acc {:.4}",
        step.number(),
        m.epoch,
        m.lr,
        m.train_loss,
        m.train_acc,
        m.eval_acc
    );
}

fn run_trainer(
    mut t: Trainer,
    split: &DataSplit,
    teacher: &Option<Vec<f32>>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> std::result::Result<Trainer, Failure> {
    if let Some(pmf) = teacher {
        t = t.with_teacher(pmf.clone());
    }
    let step = t.cfg.step;
    // a resumed run may already be complete; still leave a consistent directory
    if t.is_finished() {
        save_checkpoint(&t.checkpoint(), out_dir)?;
        write_metrics_csv(&out_dir.join(METRICS_FILE), &t.cfg, &t.history)?;
    }
    t.run(split, Some(out_dir), |m| log_epoch(out, step, m))?;
    Ok(t)
}

fn check_compatible(ck: &Checkpoint, cfg: &NetworkConfig, split: &DataSplit) -> CmdResult {
    if ck.net.config != *cfg {
        return Err(Failure::from(Error::CheckpointIncompatible(
            "checkpoint network differs from the requested network".into(),
        )));
    }
    if split.train.classes() > cfg.classes {
        return Err(Failure::from(Error::CheckpointIncompatible(format!(
            "dataset has {} classes, checkpoint network {}",
            split.train.classes(),
            cfg.classes
        ))));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    let p = plan(&a)?;
    let mut cfg = config_from(Some(&a.preset), a.config.as_deref())?;
    let resumed = match &a.resume {
        Some(dir) => Some(load_checkpoint(dir)?),
        None => None,
    };
    let from = match &a.from {
        Some(dir) => Some(load_checkpoint(dir)?),
        None if a.step == StepArg::Two && resumed.is_none() => {
            let default = step_dir(&a.out, Step::One);
            if !default.join(STATE_FILE).is_file() {
                return Err(Failure::usage(format!(
                    "step 2 needs a step-1 checkpoint: pass --from or train step 1 into {}",
                    default.display()
                )));
            }
            Some(load_checkpoint(&default)?)
        }
        None => None,
    };
    if let Some(ck) = resumed.as_ref().or(from.as_ref()) {
        if a.config.is_none() {
            cfg = ck.net.config.clone();
        }
    }
    let seed = resumed.as_ref().map_or(a.seed, |ck| ck.seed);
    let split = if a.dataset == "synthetic" {
        synthetic_gratings(&SyntheticSpec {
            train: a.synthetic_train,
            test: (a.synthetic_train / 5).max(1),
            size: cfg.input_size,
            ..SyntheticSpec::default()
        })?
    } else {
        load_folder(Path::new(&a.dataset), cfg.input_size, seed)?
    };
    if let Some(ck) = resumed.as_ref().or(from.as_ref()) {
        check_compatible(ck, &cfg, &split)?;
    }
    let teacher = match &a.teacher_pmf {
        Some(path) => Some(read_teacher_pmf(path, split.train.len(), cfg.classes)?),
        None => None,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::from(Error::io(&a.out, e)))?;

    let final_trainer = match (a.step, resumed, from) {
        (step, Some(ck), _) => {
            let was = ck.train.step;
            if step == StepArg::One && was == Step::Two || step == StepArg::Two && was == Step::One {
                return Err(Failure::usage(format!(
                    "--resume checkpoint is from step {}, not the requested step",
                    was.number()
                )));
            }
            let t = run_trainer(Trainer::resume(ck)?, &split, &teacher, &step_dir(&a.out, was), out)?;
            if was == Step::One && step == StepArg::Both {
                let t2 = Trainer::continue_from(t.checkpoint(), p.step2.clone(), seed)?;
                run_trainer(t2, &split, &teacher, &step_dir(&a.out, Step::Two), out)?
            } else {
                t
            }
        }
        (StepArg::Two, None, Some(ck)) => {
            let t = Trainer::continue_from(ck, p.step2.clone(), seed)?;
            run_trainer(t, &split, &teacher, &step_dir(&a.out, Step::Two), out)?
        }
        (step, None, from) => {
            if from.is_some() {
                return Err(Failure::usage("--from starts step 2; use --step 2"));
            }
            let model = crate::network::build_model(&cfg, seed)?;
            let t1 = run_trainer(Trainer::new(&model, p.step1.clone(), seed)?, &split, &teacher, &step_dir(&a.out, Step::One), out)?;
            if step == StepArg::Both {
                let t2 = Trainer::continue_from(t1.checkpoint(), p.step2.clone(), seed)?;
                run_trainer(t2, &split, &teacher, &step_dir(&a.out, Step::Two), out)?
            } else {
                t1
            }
        }
    };
    let model_path = a.out.join("model.bcnn");
    crate::network::save_model(&final_trainer.model(), &model_path)?;
    let last = final_trainer.history.last().map_or(0.0, |m| m.eval_acc);
    writeln!(out, "final eval accuracy {last:.4}; model written to {}", model_path.display()).map_err(io_fail)?;
    Ok(())
}

fn input_for(model: &Model, a: &InferArgs) -> std::result::Result<RealTensor, Failure> {
    let cfg = &model.config;
    let size = cfg.input_size;
    match &a.image {
        Some(path) => {
            let img = load_image(path)?;
            let x = if img.shape()[0] == 3 && cfg.input_channels == 4 {
                preprocess(&img, &Normalization::default())?
            } else {
                img
            };
            if x.shape() != [cfg.input_channels, size, size] {
                return Err(Error::shape(&[cfg.input_channels, size, size], x.shape()).into());
            }
            Ok(x)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            Ok(RealTensor::from_fn(vec![cfg.input_channels, size, size], |_| rng.sample(StandardNormal)))
        }
    }
}

fn cmd_infer(a: InferArgs, out: &mut dyn Write) -> CmdResult {
    let model = load_model(&a.model)?;
    let x = input_for(&model, &a)?;
    let logits = model.forward(&x)?;
    let z = logits.values();
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let denom: f32 = z.iter().map(|v| (v - max).exp()).sum();
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&i, &j| z[j].total_cmp(&z[i]).then(i.cmp(&j)));
    writeln!(out, "rank,class,logit,probability").map_err(io_fail)?;
    for (rank, &c) in order.iter().take(a.top_k.max(1)).enumerate() {
        writeln!(out, "{},{c},{},{:.6}", rank + 1, z[c], (z[c] - max).exp() / denom).map_err(io_fail)?;
    }
    let all: Vec<String> = z.iter().map(|v| v.to_string()).collect();
    writeln!(out, "logits: {}", all.join(" ")).map_err(io_fail)?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Timing {
    seconds: f64,
    gops: f64,
}

fn time_iters(iters: usize, ops: f64, mut f: impl FnMut()) -> Timing {
    let start = Instant::now();
    for _ in 0..iters {
        f();
    }
    let seconds = start.elapsed().as_secs_f64().max(1e-9);
    Timing {
        seconds,
        gops: ops * iters as f64 / seconds / 1e9,
    }
}

fn cmd_bench(a: BenchArgs, out: &mut dyn Write) -> CmdResult {
    if a.m == 0 || a.k == 0 || a.n == 0 || a.iters == 0 {
        return Err(Failure::usage("--m, --k, --n and --iters must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (binary, float) = match a.op {
        BenchOp::Gemm => {
            let av: Vec<f32> = (0..a.m * a.k).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect();
            let btv: Vec<f32> = (0..a.n * a.k).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect();
            let am = BitMatrix::pack_rows(a.m, a.k, &av)?;
            let btm = BitMatrix::pack_rows(a.n, a.k, &btv)?;
            let mut reference = vec![0.0f32; a.m * a.n];
            let ops = 2.0 * (a.m * a.k * a.n) as f64;
            let float = time_iters(a.iters, ops, || {
                // SAFETY: `av` is m x k, `btv` is n x k read as k x n via strides, `reference` is m x n.
                unsafe {
                    matrixmultiply::sgemm(
                        a.m,
                        a.k,
                        a.n,
                        1.0,
                        av.as_ptr(),
                        a.k as isize,
                        1,
                        btv.as_ptr(),
                        1,
                        a.k as isize,
                        0.0,
                        reference.as_mut_ptr(),
                        a.n as isize,
                        1,
                    )
                }
            });
            let mut result = None;
            let binary = time_iters(a.iters, ops, || result = Some(bin_gemm(&am, &btm)));
            let result = result.expect("at least one iteration")?;
            if result.values().iter().zip(&reference).any(|(&b, &f)| b as f32 != f) {
                return Err(Error::Inconsistent("binary GEMM disagrees with the float reference".into()).into());
            }
            (binary, float)
        }
        BenchOp::Conv => {
            let c = a.k;
            let module = ConvModule1x1::new(c, 1, true, &mut rng);
            let mut real = module.clone();
            real.weight_mode = WeightMode::Real;
            for br in &mut real.branches {
                br.weights_real.iter_mut().for_each(|w| *w = if *w >= 0.0 { 1.0 } else { -1.0 });
            }
            let x = RealTensor::from_fn(vec![c, a.m, a.n], |_| rng.gen_range(-1.0..1.0));
            let ops = 2.0 * (c * c * a.m * a.n) as f64;
            let mut rb = None;
            let binary = time_iters(a.iters, ops, || rb = Some(module.forward(&x)));
            let mut rf = None;
            let float = time_iters(a.iters, ops, || rf = Some(real.forward(&x)));
            if rb.expect("at least one iteration")? != rf.expect("at least one iteration")? {
                return Err(Error::Inconsistent("binary conv disagrees with the float reference".into()).into());
            }
            (binary, float)
        }
    };
    let op = match a.op {
        BenchOp::Gemm => "gemm",
        BenchOp::Conv => "conv",
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["op", "path", "m", "k", "n", "iters", "seconds", "gops"]).map_err(Error::from)?;
    for (path, t) in [("binary", binary), ("float", float)] {
        w.write_record([
            op.to_string(),
            path.to_string(),
            a.m.to_string(),
            a.k.to_string(),
            a.n.to_string(),
            a.iters.to_string(),
            format!("{:.6}", t.seconds),
            format!("{:.3}", t.gops),
        ])
        .map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    out.write_all(&bytes).map_err(io_fail)?;
    let ratio = binary.gops / float.gops;
    writeln!(out, "results agree; binary/float throughput ratio {ratio:.2}").map_err(io_fail)?;
    if a.k >= 512 && ratio < 1.0 {
        writeln!(out, "warning: binary path slower than the float reference at k >= 512").map_err(io_fail)?;
    }
    if let Some(p) = &a.csv {
        write_atomic(p, &bytes)?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> CmdResult {
    let p = &a.path;
    let is_state = p.is_dir() || p.file_name().is_some_and(|n| n == STATE_FILE);
    if is_state {
        let ck = load_checkpoint(p)?;
        let t = &ck.train;
        writeln!(
            out,
            "checkpoint: step {} after {} of {} epochs, seed {}, adam step {}",
            t.step.number(),
            ck.epochs_done,
            t.total_epochs(),
            ck.seed,
            ck.adam.t
        )
        .map_err(io_fail)?;
        writeln!(
            out,
            "schedule: max_lr {:e} warmup {} decay {} batch {} weight decay {:e}",
            t.max_lr, t.warmup_epochs, t.decay_epochs, t.batch_size, t.weight_decay
        )
        .map_err(io_fail)?;
        writeln!(out, "trainable values {}, running statistics {}", ck.net.params.len(), ck.net.running.len())
            .map_err(io_fail)?;
        if let Some(m) = ck.history.last() {
            writeln!(out, "last epoch: loss {:.4} train_acc {:.4} eval_acc {:.4}", m.train_loss, m.train_acc, m.eval_acc)
                .map_err(io_fail)?;
        }
        write!(out, "{}", ck.net.config).map_err(io_fail)?;
        return Ok(());
    }
    let model = load_model(p)?;
    let cfg = &model.config;
    let bytes = std::fs::metadata(p).map_err(|e| Failure::from(Error::io(p, e)))?.len();
    writeln!(out, "model file {} ({} bytes, format version {})", p.display(), bytes, format::VERSION).map_err(io_fail)?;
    write!(out, "{cfg}").map_err(io_fail)?;
    let audit = param_count_audit(&model)?;
    writeln!(
        out,
        "blocks {}, binary parameters {}, real parameters {}",
        model.blocks.len(),
        audit.binary_params,
        audit.real_params
    )
    .map_err(io_fail)?;
    let counts = count_ops(cfg, cfg.input_size);
    write!(out, "{}", render_table(&[(format!("{}px", cfg.input_size), counts)], true)).map_err(io_fail)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with_args(std::iter::once("bcnn").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn epochs_override_parsing() {
        assert_eq!(parse_epochs("5+20").unwrap(), vec![(5, 20)]);
        assert_eq!(parse_epochs("1+2, 3+4").unwrap(), vec![(1, 2), (3, 4)]);
        for bad in ["5", "a+b", "1+2,3+4,5+6", ""] {
            assert_eq!(parse_epochs(bad).unwrap_err().code, EXIT_USAGE);
        }
    }

    #[test]
    fn count_presets() {
        let (code, out, _) = run_capture(&["count", "--preset", "p1", "--normalized"]);
        assert_eq!(code, 0);
        assert!(out.contains("9.04 e6"), "{out}");
        assert!(out.contains("Param MB"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_capture(&["count", "--config", "/nonexistent/x.cfg"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["ufa", "--d", "0.3"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["count", "--preset", "p9"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn data_errors_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.bcnn");
        std::fs::write(&junk, b"not a model").unwrap();
        let (code, _, err) = run_capture(&["infer", "--model", junk.to_str().unwrap(), "--random"]);
        assert_eq!(code, EXIT_DATA, "{err}");
    }

    #[test]
    fn bench_degenerate_sizes() {
        for op in ["gemm", "conv"] {
            let (code, out, err) = run_capture(&["bench", "--op", op, "--m", "1", "--k", "1", "--n", "1", "--iters", "2"]);
            assert_eq!(code, 0, "{err}");
            assert!(out.contains("results agree"));
        }
    }
}
