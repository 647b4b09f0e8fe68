//! `gimtp`: synthesize data, train, predict, evaluate and dump graphs.

mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gimtp_core::checkpoint::{load_checkpoint, save_checkpoint};
use gimtp_core::data::synth::{synth_generate, ScenarioSpec};
use gimtp_core::data::{write_csv, GroupWindow, LatIntention, LonIntention};
use gimtp_core::decoder::{GaussianSequence, ModePrediction};
use gimtp_core::eval::evaluate;
use gimtp_core::intention::IntentionDistribution;
use gimtp_core::model::Gimtp;
use gimtp_core::train::train;
use gimtp_core::{Error, Result};
use serde::{Deserialize, Serialize};

use config::{DataSection, RunConfig};

#[derive(Parser)]
#[command(name = "gimtp", version, about = "Interaction-aware multimodal trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic highway scene as a track CSV.
    Synth {
        /// Scenario spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a run config; writes checkpoint.bin and metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Predict every window of a CSV; writes a JSON array of records.
    Predict {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        select: WindowSelect,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        force_lat: Option<LatArg>,
        #[arg(long, value_enum)]
        force_lon: Option<LonArg>,
    },
    /// Evaluate a checkpoint on a CSV; writes the report as JSON.
    Eval {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the adjacency matrices of one window as JSON.
    Graph {
        #[arg(long)]
        data: PathBuf,
        /// Run config supplying the CSV schema and window settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        select: WindowSelect,
        #[arg(long)]
        out: PathBuf,
        /// Also dump future-step embedding similarities (needs --checkpoint).
        #[arg(long)]
        future: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AblationFlags {
    #[arg(long)]
    no_dgcn: bool,
    #[arg(long)]
    no_fg: bool,
    #[arg(long)]
    no_ff: bool,
}

#[derive(Args)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Run config supplying the CSV schema and window settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct WindowSelect {
    #[arg(long)]
    target: Option<i64>,
    /// Frame of the last history step.
    #[arg(long)]
    frame: Option<i64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LatArg {
    #[value(name = "LK")]
    Lk,
    #[value(name = "LLC")]
    Llc,
    #[value(name = "RLC")]
    Rlc,
}

#[derive(Clone, Copy, ValueEnum)]
enum LonArg {
    #[value(name = "CS")]
    Cs,
    #[value(name = "ACC")]
    Acc,
    #[value(name = "DEC")]
    Dec,
}

impl From<LatArg> for LatIntention {
    fn from(a: LatArg) -> Self {
        match a {
            LatArg::Lk => LatIntention::LaneKeep,
            LatArg::Llc => LatIntention::LeftChange,
            LatArg::Rlc => LatIntention::RightChange,
        }
    }
}

impl From<LonArg> for LonIntention {
    fn from(a: LonArg) -> Self {
        match a {
            LonArg::Cs => LonIntention::ConstantSpeed,
            LonArg::Acc => LonIntention::Accelerate,
            LonArg::Dec => LonIntention::Decelerate,
        }
    }
}

/// One predicted window. Positions are relative to `origin`.
#[derive(Serialize, Deserialize)]
pub struct PredictionRecord {
    pub target_id: i64,
    pub frame: i64,
    pub origin: [f64; 2],
    pub fused: GaussianSequence,
    pub modes: Vec<ModePrediction>,
    pub intentions: IntentionDistribution,
}

/// Adjacency dump; matrices are `[T][N][N]`, `future` is `[F][N][N]`.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub target_id: i64,
    pub frame: i64,
    pub neigh: Vec<Vec<Vec<f64>>>,
    pub dist: Vec<Vec<Vec<f64>>>,
    pub risk: Vec<Vec<Vec<f64>>>,
    pub combined: Vec<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<Vec<Vec<f64>>>>,
}

fn nested(t: &gimtp_core::tensor::Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    t.data()
        .chunks(s[1] * s[2])
        .map(|m| m.chunks(s[2]).map(<[f64]>::to_vec).collect())
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn cmd_synth(spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let text = fs::read_to_string(spec)
        .map_err(|e| Error::Usage(format!("cannot read spec {}: {e}", spec.display())))?;
    let spec: ScenarioSpec = serde_json::from_str(&text)?;
    let tracks = synth_generate(&spec, seed)?;
    let mut w = BufWriter::new(File::create(out)?);
    write_csv(&tracks, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, flags: &AblationFlags) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output.dir = o;
    }
    cfg.train.seed = cfg.seed;
    let a = &mut cfg.model.ablation;
    a.no_dgcn |= flags.no_dgcn;
    a.no_fg |= flags.no_fg;
    a.no_ff |= flags.no_ff;
    cfg.validate()?;

    let windows = cfg.data.windows_from(&cfg.data.path)?;
    let (mut model, start) = match &cfg.resume {
        Some(p) => {
            let loaded = load_checkpoint(p)?;
            if loaded.model.config != cfg.model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            (loaded.model, loaded.epochs_completed)
        }
        None => (Gimtp::new(cfg.model.clone(), cfg.seed)?, 0),
    };
    fs::create_dir_all(&cfg.output.dir)?;
    let ckpt = cfg.output.dir.join("checkpoint.bin");
    let metrics_path = cfg.output.dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(cfg.resume.is_some())
        .truncate(cfg.resume.is_none())
        .open(&metrics_path)?;
    if cfg.train.epochs <= start {
        save_checkpoint(&model, start, &ckpt)?;
        return Ok(());
    }
    let samples = windows.iter().map(|w| model.sample(w)).collect::<Result<Vec<_>>>()?;
    train(&mut model, &samples, &cfg.train, start, |rec, m| {
        writeln!(metrics, "{}", serde_json::to_string(rec)?)?;
        metrics.flush()?;
        save_checkpoint(m, rec.epoch, &ckpt)
    })?;
    Ok(())
}

fn data_section(config: Option<&Path>, model: Option<&Gimtp>) -> Result<DataSection> {
    let mut data = match config {
        Some(p) => RunConfig::load(p)?.data,
        None => DataSection::default(),
    };
    if let Some(m) = model {
        data.manifest.history = m.config.history;
        data.manifest.horizon = m.config.horizon;
    }
    Ok(data)
}

fn select(windows: Vec<GroupWindow>, sel: &WindowSelect) -> Vec<GroupWindow> {
    windows
        .into_iter()
        .filter(|w| sel.target.map_or(true, |t| w.target_id == t) && sel.frame.map_or(true, |f| w.frame == f))
        .collect()
}

fn cmd_predict(
    input: &ModelInput,
    sel: &WindowSelect,
    out: &Path,
    lat: Option<LatIntention>,
    lon: Option<LonIntention>,
) -> Result<()> {
    let model = load_checkpoint(&input.checkpoint)?.model;
    let data = data_section(input.config.as_deref(), Some(&model))?;
    let windows = select(data.windows_from(&input.data)?, sel);
    if windows.is_empty() {
        return Err(Error::Usage("no windows match the input and selection".into()));
    }
    let records = windows
        .iter()
        .map(|w| {
            let p = model.predict_forced(w, lat, lon)?;
            Ok(PredictionRecord {
                target_id: p.target_id,
                frame: p.frame,
                origin: w.origin,
                fused: p.fused,
                modes: p.modes,
                intentions: p.intentions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(out, &records)
}

fn cmd_eval(input: &ModelInput, out: &Path) -> Result<()> {
    let model = load_checkpoint(&input.checkpoint)?.model;
    let data = data_section(input.config.as_deref(), Some(&model))?;
    let windows = data.windows_from(&input.data)?;
    write_json(out, &evaluate(&model, &windows)?)
}

fn cmd_graph(
    data_path: &Path,
    config: Option<&Path>,
    sel: &WindowSelect,
    out: &Path,
    future: bool,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let model = match (future, checkpoint) {
        (true, None) => return Err(Error::Usage("--future needs --checkpoint".into())),
        (_, Some(p)) => Some(load_checkpoint(p)?.model),
        (false, None) => None,
    };
    let data = data_section(config, model.as_ref())?;
    let windows = select(data.windows_from(data_path)?, sel);
    let w = match windows.as_slice() {
        [w] => w,
        [] => return Err(Error::Usage("no window matches the selection".into())),
        _ => {
            return Err(Error::Usage(format!(
                "{} windows match; narrow the selection with --target and --frame",
                windows.len()
            )))
        }
    };
    let adj = gimtp_core::adjacency::build_adjacency(w)?;
    let future = match &model {
        Some(m) if future => Some(nested(&m.future_similarity(w)?.ok_or_else(|| {
            Error::Usage("checkpoint has no future-guided branch".into())
        })?)),
        _ => None,
    };
    write_json(
        out,
        &GraphDump {
            target_id: w.target_id,
            frame: w.frame,
            neigh: nested(&adj.neigh),
            dist: nested(&adj.dist),
            risk: nested(&adj.risk),
            combined: nested(&adj.combined),
            future,
        },
    )
}

fn run(cli: Cli) -> Result<()> {
    gimtp_core::init_threads_from_env()?;
    match cli.command {
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Command::Train { config, seed, out, ablation } => cmd_train(&config, seed, out, &ablation),
        Command::Predict { input, select, out, force_lat, force_lon } => {
            cmd_predict(&input, &select, &out, force_lat.map(Into::into), force_lon.map(Into::into))
        }
        Command::Eval { input, out } => cmd_eval(&input, &out),
        Command::Graph { data, config, select, out, future, checkpoint } => {
            cmd_graph(&data, config.as_deref(), &select, &out, future, checkpoint.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
