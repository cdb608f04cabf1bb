//! Command-line front end: `gen-data`, `train`, `eval` and `interpolate`.
//!
//! Exit codes: 0 success, 1 divergence or internal failure, 2 configuration
//! or usage, 3 IO or unreadable data, 4 checkpoint, 5 domain precondition.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointKind, TtcMode};
use crate::config::RunConfig;
use crate::error::{MorphError, Result};
use crate::fsio::write_atomic;
use crate::morphnet::{interpolate_features, MorphNet};
use crate::phantom_data::{encode_volume, write_dataset, Dataset, PAIR_WINDOW_MONTHS};
use crate::trainer::{evaluate, train_ssl, train_ttc, write_eval_outputs, Predictor, TtcModel};

pub const THREADS_ENV: &str = "MORPHTRACK_THREADS";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "morphtrack", version, about = "Morphing self-supervision and time-to-conversion on phantom scan series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Ssl,
    Ttc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Scratch,
    Freeze,
    Finetune,
}

impl From<ModeArg> for TtcMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Scratch => TtcMode::Scratch,
            ModeArg::Freeze => TtcMode::Freeze,
            ModeArg::Finetune => TtcMode::Finetune,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the self-supervised stage or the time-to-conversion head.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long, value_enum, default_value = "scratch")]
        mode: ModeArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue an SSL run from `<out>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate one or more checkpoints on their held-out folds.
    Eval {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate intermediate scans between two visits of one eye.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eye: String,
        #[arg(long = "visit-a")]
        visit_a: usize,
        #[arg(long = "visit-b")]
        visit_b: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write each generated volume as a raw `.vol` file.
        #[arg(long)]
        dump_raw: bool,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &MorphError) -> i32 {
    match e {
        MorphError::Config(_) | MorphError::Json(_) => 2,
        MorphError::Io(_) | MorphError::Data(_) => 3,
        MorphError::Checkpoint(_) => 4,
        MorphError::Domain(_) => 5,
        _ => 1,
    }
}

/// Thread count from `MORPHTRACK_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(MorphError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    config: &'a RunConfig,
    code_version: String,
    code_hash: String,
    threads: usize,
    started_unix: u64,
    finished_unix: u64,
    artifacts: Vec<String>,
}

fn now_unix() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn code_version() -> (String, String) {
    let v = format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    let hash = Sha256::digest(v.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    (v, hash)
}

struct RunContext {
    command: &'static str,
    args: Vec<String>,
    threads: usize,
    started: u64,
}

impl RunContext {
    fn finish(&self, out: &Path, cfg: &RunConfig, artifacts: Vec<String>) -> Result<()> {
        let (code_version, code_hash) = code_version();
        let m = RunManifest {
            command: self.command,
            args: self.args.clone(),
            seed: cfg.seed,
            config: cfg,
            code_version,
            code_hash,
            threads: self.threads,
            started_unix: self.started,
            finished_unix: now_unix(),
            artifacts,
        };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        write_atomic(&out.join(RUN_MANIFEST), &bytes)?;
        Ok(())
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p).map_err(|e| match e {
            MorphError::Io(io) => MorphError::Config(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(MorphError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("data directory {} not found", dir.display()),
        )));
    }
    Dataset::open(dir)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(dir).map_err(|e| match e {
        MorphError::Io(io) => MorphError::Checkpoint(format!("cannot read checkpoint {}: {io}", dir.display())),
        other => other,
    })
}

/// Central B-scan (middle depth slice) as binary PGM with `[-1,1] -> [0,255]`.
pub fn pgm_central_slice(vol: &[f64], shape: [usize; 3]) -> Vec<u8> {
    let [h, w, d] = shape;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let z = d / 2;
    for r in 0..h {
        for c in 0..w {
            let v = vol[(r * w + c) * d + z].clamp(-1.0, 1.0);
            out.push(((v + 1.0) * 127.5).round() as u8);
        }
    }
    out
}

fn cmd_gen_data(ctx: &RunContext, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let index = write_dataset(out, &cfg.data, cfg.seed)?;
    let mut artifacts = vec![crate::phantom_data::INDEX_FILE.to_string()];
    for e in &index.eyes {
        for v in &e.visits {
            artifacts.push(v.volume.clone());
            artifacts.push(v.roi.clone());
        }
    }
    ctx.finish(out, &cfg, artifacts)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    ctx: &RunContext,
    stage: Stage,
    mode: TtcMode,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    resume: bool,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ds = open_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let mut artifacts = vec!["best".to_string(), "last".into(), "loss.csv".into(), "val.csv".into()];
    match stage {
        Stage::Ssl => {
            let resume_ck = if resume { Some(load_checkpoint(&out.join("last"))?) } else { None };
            if init.is_some() {
                return Err(MorphError::Config("--init is not used by the ssl stage".into()));
            }
            train_ssl(&cfg, &ds, out, resume_ck.as_ref())?;
        }
        Stage::Ttc => {
            if resume {
                return Err(MorphError::Config("--resume is supported for the ssl stage only".into()));
            }
            let init_ck = init.map(load_checkpoint).transpose()?;
            let report = train_ttc(&cfg, &ds, out, mode, init_ck.as_ref())?;
            log::info!("ttc best epoch {}", report.best_epoch);
        }
    }
    artifacts.sort();
    ctx.finish(out, &cfg, artifacts)
}

fn cmd_eval(ctx: &RunContext, ckpts: &[PathBuf], data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let ds = open_dataset(data)?;
    let mut bundles = Vec::new();
    let mut echo = None;
    for path in ckpts {
        let ck = load_checkpoint(path)?;
        let cfg = match config {
            Some(p) => load_config(Some(p), None)?,
            None => ck.manifest.config.clone(),
        };
        let fold = ck
            .manifest
            .fold
            .ok_or_else(|| MorphError::Checkpoint(format!("{}: checkpoint has no fold", path.display())))?;
        let bundle = match ck.manifest.kind {
            CheckpointKind::Oracle => evaluate(&Predictor::Oracle, &ds, fold, &cfg.eval.horizons)?,
            CheckpointKind::Ttc => {
                let model = TtcModel::from_checkpoint(&ck)?;
                if model.config().input_shape != ds.shape() {
                    return Err(MorphError::Checkpoint(format!(
                        "{}: network input {:?} differs from dataset shape {:?}",
                        path.display(),
                        model.config().input_shape,
                        ds.shape()
                    )));
                }
                evaluate(&Predictor::Model(&model), &ds, fold, &cfg.eval.horizons)?
            }
            CheckpointKind::Ssl => {
                return Err(MorphError::Checkpoint(format!("{}: ssl checkpoints have no classifier", path.display())))
            }
        };
        if let Some(first) = bundles.first() {
            let first: &crate::trainer::EvalBundle = first;
            if first.horizons != bundle.horizons {
                return Err(MorphError::Config("all checkpoints must share the evaluation horizons".into()));
            }
        }
        echo.get_or_insert(cfg);
        bundles.push(bundle);
    }
    std::fs::create_dir_all(out)?;
    let artifacts = write_eval_outputs(out, &bundles)?;
    ctx.finish(out, &echo.expect("at least one checkpoint"), artifacts)
}

/// Mean squared difference over voxels where `mask` is set.
pub fn masked_mse(a: &[f64], b: &[f64], mask: &[f64]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for ((x, y), m) in a.iter().zip(b).zip(mask) {
        s += m * (x - y) * (x - y);
        n += m;
    }
    if n > 0.0 {
        s / n
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_interpolate(
    ctx: &RunContext,
    ckpt: &Path,
    data: &Path,
    eye: &str,
    visit_a: usize,
    visit_b: usize,
    steps: usize,
    out: &Path,
    dump_raw: bool,
) -> Result<()> {
    if steps == 0 {
        return Err(MorphError::Config("--steps must be at least 1".into()));
    }
    let ck = load_checkpoint(ckpt)?;
    if ck.manifest.kind != CheckpointKind::Ssl {
        return Err(MorphError::Checkpoint(format!("{}: interpolation needs an ssl checkpoint", ckpt.display())));
    }
    let cfg = ck.manifest.config.clone();
    let mut net = MorphNet::new(&cfg.net, cfg.seed)?;
    ck.load_module(&mut net)?;
    let ds = open_dataset(data)?;
    if ds.shape() != cfg.net.input_shape {
        return Err(MorphError::Checkpoint("checkpoint input shape differs from the dataset".into()));
    }
    let entry = ds.index.eye(eye).map_err(|_| MorphError::Domain(format!("eye {eye} not in dataset")))?;
    let n = entry.visits.len();
    if visit_a >= n || visit_b >= n {
        return Err(MorphError::Domain(format!("eye {eye} has {n} visits")));
    }
    let (ta, tb) = (entry.visits[visit_a].time_months, entry.visits[visit_b].time_months);
    if !(ta < tb) || tb - ta > PAIR_WINDOW_MONTHS {
        return Err(MorphError::Domain(format!(
            "visits at {ta} and {tb} months are not an ordered pair within {PAIR_WINDOW_MONTHS} months"
        )));
    }
    let shape = ds.shape();
    let (vol_a, _) = ds.load_visit(&entry.visits[visit_a])?;
    let (vol_b, roi_b) = ds.load_visit(&entry.visits[visit_b])?;
    let i_t = crate::trainer::volume_tensor(vol_a.clone(), shape)?;
    let i_tk = crate::trainer::volume_tensor(vol_b.clone(), shape)?;
    let f_t = net.encode(&i_t)?;
    let f_tk = net.encode(&i_tk)?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("input_a.pgm"), &pgm_central_slice(&vol_a, shape))?;
    write_atomic(&out.join("input_b.pgm"), &pgm_central_slice(&vol_b, shape))?;
    let mut artifacts = vec!["input_a.pgm".to_string(), "input_b.pgm".into()];
    let mut rows = Vec::new();
    for k in 0..=steps {
        let rho = k as f64 / steps as f64;
        let f_rho = interpolate_features(&f_t, &f_tk, rho)?;
        let transform = net.decode(&f_rho.sub(&f_t)?)?;
        let generated = crate::warp::morph(&i_t, &transform.deformation, &transform.additive)?;
        let tag = format!("r{:03}", (100.0 * rho).round() as u32);
        let pgm = format!("slice_{tag}.pgm");
        write_atomic(&out.join(&pgm), &pgm_central_slice(generated.data(), shape))?;
        artifacts.push(pgm);
        if dump_raw {
            let raw = format!("volume_{tag}.vol");
            write_atomic(&out.join(&raw), &encode_volume(generated.data(), shape))?;
            artifacts.push(raw);
        }
        let d_norm = transform.deformation.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        rows.push(format!(
            "{},{},{}",
            crate::trainer::fmt_f64(rho),
            crate::trainer::fmt_f64(masked_mse(generated.data(), &vol_b, &roi_b)),
            crate::trainer::fmt_f64(d_norm)
        ));
    }
    crate::trainer::write_csv(&out.join("interpolation.csv"), "rho,masked_mse,deformation_norm", rows)?;
    artifacts.push("interpolation.csv".into());
    ctx.finish(out, &cfg, artifacts)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    crate::par::init_threads(threads);
    let command = match &cli.command {
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Interpolate { .. } => "interpolate",
    };
    let ctx = RunContext {
        command,
        args: args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        threads,
        started: now_unix(),
    };
    let result = match &cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(&ctx, config.as_deref(), out, *seed),
        Command::Train {
            stage,
            mode,
            data,
            out,
            init,
            config,
            seed,
            resume,
        } => cmd_train(&ctx, *stage, (*mode).into(), data, out, init.as_deref(), config.as_deref(), *seed, *resume),
        Command::Eval { ckpt, data, out, config } => cmd_eval(&ctx, ckpt, data, out, config.as_deref()),
        Command::Interpolate {
            ckpt,
            data,
            eye,
            visit_a,
            visit_b,
            steps,
            out,
            dump_raw,
        } => cmd_interpolate(&ctx, ckpt, data, eye, *visit_a, *visit_b, *steps, out, *dump_raw),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
