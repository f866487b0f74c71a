//! `retake` command line.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or runtime error.
//! Diagnostics go to stderr; with `--json` stdout carries one JSON document.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::checks::{run_suite, CheckOptions, CheckResult, Suite};
use crate::geometry::{
    make_trajectory_scaled, pluecker_map, read_trajectory, trajectory_to_jsonl, write_trajectory, Intrinsics,
    PoseErrors, Trajectory, TrajectoryKind,
};
use crate::roce::{build_camera_tokens, camera_features};
use crate::rope::{rope_3d, shared_rope_for_pair};
use crate::tensor_io::{DType, TensorDump};
use crate::toymodel::{
    evaluate_pose_proxy, generate_target, load_checkpoint, save_checkpoint, train, train_overfit, LogEntry,
    PhasePath, SyntheticScene, ToyBatchItem, ToyConfig, ValidationSet, D_LATENT,
};

pub const SEED_ENV: &str = "ROCE_SEED";

const EXIT_OK: i32 = 0;
const EXIT_CHECK_FAILED: i32 = 1;
const EXIT_ERROR: i32 = 2;

#[derive(Debug)]
struct CliError(String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

macro_rules! from_err {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError(e.to_string())
            }
        }
    )*};
}

from_err!(
    std::io::Error,
    serde_json::Error,
    crate::geometry::GeometryError,
    crate::tensor_io::TensorIoError,
    crate::toymodel::ToyError,
    crate::roce::RoceError,
    crate::rope::RopeError
);

type CliResult = Result<i32, CliError>;

#[derive(Debug, Parser)]
#[command(name = "retake", version, about = "Camera-conditioned rotary attention toolkit")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a per-frame camera trajectory as JSON lines.
    GenTraj(GenTrajArgs),
    /// Run invariant suites.
    Check(CheckArgs),
    /// Export the phase-only attention map of one token.
    PhaseMap(PhaseMapArgs),
    /// Train the toy model.
    Train(TrainArgs),
    /// Generate target latents for a synthetic scene.
    Sample(SampleArgs),
    /// Pose errors between trajectory files, or checkpoint evaluation.
    Eval(EvalArgs),
    /// Write or inspect tensor dumps.
    #[command(subcommand)]
    Dump(DumpCommand),
}

#[derive(Debug, Args)]
pub struct GenTrajArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: TrajectoryKind,
    #[arg(long)]
    pub frames: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Multiplier on the total motion.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 96.0)]
    pub focal: f64,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 96)]
    pub size: u32,
}

fn parse_kind(s: &str) -> Result<TrajectoryKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = TrajectoryKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown kind '{s}', expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Rope,
    Roce,
    Geometry,
    Flow,
    All,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    pub suite: SuiteArg,
    /// Suites run concurrently on up to this many threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frequency base of the main path (negative control).
    #[arg(long, hide = true)]
    pub rope_base: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PhaseMapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub traj_t: PathBuf,
    #[arg(long)]
    pub traj_s: PathBuf,
    /// Query token in `0..2N` (target block first).
    #[arg(long)]
    pub token: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub block: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long, value_enum, default_value_t = PhasePath::Qk)]
    pub path: PhasePath,
    /// Complex channels to average; all learned channels when omitted.
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<usize>,
    #[arg(long = "f64")]
    pub f64: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; unspecified fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub no_camera: bool,
    #[arg(long)]
    pub freeze_non_attention: bool,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines loss log; stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Fit a single fixed example instead of the dataset.
    #[arg(long)]
    pub overfit: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub traj_t: PathBuf,
    /// Source trajectory; a stationary camera when omitted.
    #[arg(long)]
    pub traj_s: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Scene and noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "f64")]
    pub f64: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "gt", conflicts_with = "ckpt")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Evaluate a checkpoint on its validation set.
    #[arg(long, required_unless_present = "pred")]
    pub ckpt: Option<PathBuf>,
    /// Validation items sampled for localization; the config value when omitted.
    #[arg(long)]
    pub loc_items: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum DumpCommand {
    /// 3D rotary field as `[tokens, d/2, 2]` (cos, sin).
    Rope {
        #[arg(long)]
        f: usize,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        d_head: usize,
        /// Field for a target + source pair (`2N` tokens).
        #[arg(long)]
        pair: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "f64")]
        f64: bool,
    },
    /// Plücker ray map of one frame as `[h, w, 6]`.
    Pluecker {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "f64")]
        f64: bool,
    },
    /// Print dtype, shape and value range of a dump.
    Inspect { file: PathBuf },
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::GenTraj(a) => gen_traj(a, cli.json),
        Command::Check(a) => check(a, cli.json),
        Command::PhaseMap(a) => phase_map(a, cli.json),
        Command::Train(a) => train_cmd(a, cli.json),
        Command::Sample(a) => sample_cmd(a, cli.json),
        Command::Eval(a) => eval_cmd(a),
        Command::Dump(d) => dump(d, cli.json),
    }
}

/// Flag, then `ROCE_SEED`, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("values serialize"));
}

fn dtype(f64: bool) -> DType {
    if f64 {
        DType::F64
    } else {
        DType::F32
    }
}

fn write_dump(path: &Path, dims: Vec<usize>, data: &[f64], f64: bool) -> Result<(), CliError> {
    TensorDump::with_dtype(dims, data, dtype(f64)).write(path)?;
    Ok(())
}

fn gen_traj(a: &GenTrajArgs, json: bool) -> CliResult {
    let k = Intrinsics::centered(a.focal, a.size)?;
    let traj = make_trajectory_scaled(a.kind, a.frames, k, a.scale)?;
    match &a.out {
        Some(p) => {
            write_trajectory(p, &traj)?;
            let last = traj.poses.last().expect("at least two frames");
            if json {
                print_json(&json!({
                    "kind": a.kind.name(),
                    "frames": a.frames,
                    "out": p,
                    "last_rotation_deg": last.rotation_angle().to_degrees(),
                    "last_translation": [last.translation.x, last.translation.y, last.translation.z],
                }));
            } else {
                eprintln!("wrote {} poses to {}", a.frames, p.display());
            }
        }
        None => print!("{}", trajectory_to_jsonl(&traj)),
    }
    Ok(EXIT_OK)
}

fn check(a: &CheckArgs, json: bool) -> CliResult {
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::Rope => vec![Suite::Rope],
        SuiteArg::Roce => vec![Suite::Roce],
        SuiteArg::Geometry => vec![Suite::Geometry],
        SuiteArg::Flow => vec![Suite::Flow],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let mut opts = CheckOptions { seed: resolve_seed(a.seed, 0)?, ..CheckOptions::default() };
    if let Some(b) = a.rope_base {
        opts.rope_base = b;
    }
    let jobs = a.jobs.clamp(1, suites.len());
    let mut results: Vec<Vec<CheckResult>> = vec![Vec::new(); suites.len()];
    std::thread::scope(|scope| {
        for (chunk, out) in suites.chunks(suites.len().div_ceil(jobs)).zip(results.chunks_mut(suites.len().div_ceil(jobs))) {
            scope.spawn(move || {
                for (s, r) in chunk.iter().zip(out.iter_mut()) {
                    *r = run_suite(*s, &opts);
                }
            });
        }
    });
    let results: Vec<CheckResult> = results.into_iter().flatten().collect();
    let failed = results.iter().filter(|r| !r.passed).count();
    if json {
        print_json(&json!({ "passed": failed == 0, "failed": failed, "results": results }));
    } else {
        for r in &results {
            println!("{r}");
        }
        println!("{} checks, {failed} failed", results.len());
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn phase_map(a: &PhaseMapArgs, json: bool) -> CliResult {
    let (model, store) = load_checkpoint(&a.ckpt)?;
    let cfg = model.config();
    let (traj_t, traj_s) = (read_trajectory(&a.traj_t)?, read_trajectory(&a.traj_s)?);
    let tokens = build_camera_tokens(&traj_t, &traj_s, cfg.f, cfg.h, cfg.w, cfg.stride)?;
    let tokens = if cfg.no_camera { tokens.zeroed() } else { tokens };
    let features = camera_features::<f32>(&tokens);
    let field = model.phase_field(&store, features.view(), a.block, a.head, a.path)?;
    let channels: Vec<usize> =
        if a.channels.is_empty() { (field.zero_width()..field.channels()).collect() } else { a.channels.clone() };
    let map = crate::roce::phase_attention_map(&field, a.token, &channels)?;
    write_dump(&a.out, vec![2, cfg.f, cfg.h, cfg.w], &map, a.f64)?;
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if json {
        print_json(&json!({ "tokens": map.len(), "min": lo, "max": hi, "out": a.out }));
    } else {
        eprintln!("phase map over {} tokens, range [{lo:.4}, {hi:.4}] -> {}", map.len(), a.out.display());
    }
    Ok(EXIT_OK)
}

fn load_config(path: Option<&Path>) -> Result<ToyConfig, CliError> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| CliError(format!("{}: {e}", p.display())))?,
        None => ToyConfig::default(),
    };
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, json: bool) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.no_camera |= a.no_camera;
    cfg.freeze_non_attention |= a.freeze_non_attention;
    cfg.validate()?;

    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut write_err = None;
    let mut log_line = |e: &LogEntry| {
        if let Err(err) = writeln!(sink, "{}", serde_json::to_string(e).expect("entries serialize")) {
            write_err.get_or_insert(err);
        }
    };

    if a.overfit {
        if a.out.is_some() {
            return Err(CliError("--overfit does not produce a checkpoint".into()));
        }
        let log = train_overfit(&cfg, cfg.steps, cfg.lr)?;
        log.iter().for_each(&mut log_line);
        sink.flush()?;
        let (first, last) = (log[0].train_loss, log[log.len() - 1].train_loss);
        if json && a.log.is_some() {
            print_json(&json!({ "steps": cfg.steps, "initial_loss": first, "final_loss": last, "ratio": last / first }));
        }
        eprintln!("overfit: loss {first:.4e} -> {last:.4e} ({:.2}%)", 100.0 * last / first);
        return Ok(EXIT_OK);
    }

    let outcome = train(&cfg, &mut log_line)?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    sink.flush()?;
    if let Some(dir) = &a.out {
        save_checkpoint(dir, &cfg, &outcome.store)?;
    }
    if json && a.log.is_some() {
        print_json(&json!({
            "steps": cfg.steps,
            "initial_val_loss": outcome.initial_val_loss,
            "final_val_loss": outcome.final_val_loss,
            "checkpoint": a.out,
        }));
    }
    eprintln!("val loss {:.4e} -> {:.4e}", outcome.initial_val_loss, outcome.final_val_loss);
    Ok(EXIT_OK)
}

fn sample_cmd(a: &SampleArgs, json: bool) -> CliResult {
    let (model, store) = load_checkpoint(&a.ckpt)?;
    let cfg = model.config().clone();
    let traj_t = read_trajectory(&a.traj_t)?;
    let traj_s = match &a.traj_s {
        Some(p) => read_trajectory(p)?,
        None => Trajectory::stationary(traj_t.frame_count(), traj_t.intrinsics)?,
    };
    let seed = resolve_seed(a.seed, 0)?;
    let steps = a.steps.unwrap_or(cfg.sample_steps);
    if steps == 0 {
        return Err(CliError("--steps must be at least 1".into()));
    }
    let scene = SyntheticScene::random(cfg.blobs, &mut ChaCha8Rng::seed_from_u64(seed));
    let item = ToyBatchItem::from_scene(scene, traj_s, traj_t, &cfg, seed)?;
    let latents = generate_target(&model, &store, &item, steps, seed)?;
    let data: Vec<f64> = latents.iter().copied().collect();
    write_dump(&a.out, vec![cfg.f, cfg.h, cfg.w, D_LATENT], &data, a.f64)?;
    if json {
        print_json(&json!({ "steps": steps, "seed": seed, "shape": [cfg.f, cfg.h, cfg.w, D_LATENT], "out": a.out }));
    } else {
        eprintln!("sampled {} latent frames in {steps} steps -> {}", cfg.f, a.out.display());
    }
    Ok(EXIT_OK)
}

fn eval_cmd(a: &EvalArgs) -> CliResult {
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let e = PoseErrors::compute(&read_trajectory(pred)?, &read_trajectory(gt)?)?;
        print_json(&serde_json::to_value(e)?);
        return Ok(EXIT_OK);
    }
    let ckpt = a.ckpt.as_ref().expect("clap requires --ckpt without --pred");
    let (model, store) = load_checkpoint(ckpt)?;
    let cfg = model.config();
    let val = ValidationSet::for_config(cfg)?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let report = evaluate_pose_proxy(&model, &store, &val, a.loc_items.unwrap_or(cfg.loc_items), seed)?;
    print_json(&serde_json::to_value(report)?);
    Ok(EXIT_OK)
}

fn dump(d: &DumpCommand, json: bool) -> CliResult {
    match d {
        DumpCommand::Rope { f, h, w, d_head, pair, out, f64 } => {
            let field = if *pair { shared_rope_for_pair::<f64>(*f, *h, *w, *d_head)? } else { rope_3d::<f64>(*f, *h, *w, *d_head)? };
            let (n, c) = field.cos().dim();
            let data: Vec<f64> =
                field.cos().iter().zip(field.sin().iter()).flat_map(|(&re, &im)| [re, im]).collect();
            write_dump(out, vec![n, c, 2], &data, *f64)?;
            report_written(json, out, &[n, c, 2]);
        }
        DumpCommand::Pluecker { traj, frame, h, w, out, f64 } => {
            let traj = read_trajectory(traj)?;
            let pose = traj
                .poses
                .get(*frame)
                .ok_or_else(|| CliError(format!("frame {frame} out of range ({} frames)", traj.frame_count())))?;
            let map = pluecker_map(pose, &traj.intrinsics, *h, *w)?;
            let mut data = Vec::with_capacity(h * w * 6);
            for r in 0..*h {
                for c in 0..*w {
                    data.extend(map.get(r, c).features());
                }
            }
            write_dump(out, vec![*h, *w, 6], &data, *f64)?;
            report_written(json, out, &[*h, *w, 6]);
        }
        DumpCommand::Inspect { file } => {
            let t = TensorDump::read(file)?;
            let v = t.data.to_f64();
            let finite = v.iter().all(|x| x.is_finite());
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            if json {
                print_json(&json!({
                    "dtype": t.data.dtype(), "dims": t.dims, "len": v.len(),
                    "min": lo, "max": hi, "mean": mean, "finite": finite,
                }));
            } else {
                println!("{:?} {:?} min {lo:.6e} max {hi:.6e} mean {mean:.6e} finite {finite}", t.data.dtype(), t.dims);
            }
        }
    }
    Ok(EXIT_OK)
}

fn report_written(json: bool, out: &Path, dims: &[usize]) {
    if json {
        print_json(&json!({ "out": out, "dims": dims }));
    } else {
        eprintln!("wrote {dims:?} -> {}", out.display());
    }
}
