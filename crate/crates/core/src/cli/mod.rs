//! `sandwich` command line: one TOML config per run, overridable by flags.
//!
//! Exit codes: 0 success, 1 invariant violated, 2 usage or configuration,
//! 3 infeasible budget, 4 invalid layout, 5 streaming state mismatch,
//! 6 malformed file, 7 missing expert tuples, 8 memory guard, 9 numerical
//! failure, 10 I/O.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    build_model, cmd_attn_dump, cmd_bench, cmd_build_kd_cache, cmd_distill, cmd_grad_check, cmd_search, cmd_stream_sim, grad_check_cases,
    resolve_layout, run_grad_checks, worker_pool, BlockTiming, CmdOutcome, STREAM_ORACLE_TOL,
};
pub use config::{
    default_mask, reference_latency, toy_config, toy_teacher_config, AttnDumpSection, BenchSection, DeviceProfile, DistillSection,
    GradCheckSection, KdSection, Precision, RunConfig, SearchSection, StreamSection,
};

use crate::error::Error;

pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Infeasible { .. } => 3,
        Error::Layout(_) => 4,
        Error::StateMismatch(_) => 5,
        Error::Format(_) | Error::Json(_) => 6,
        Error::MissingExpert(_) => 7,
        Error::MemoryGuard(_) => 8,
        Error::Numerics(_) => 9,
        Error::Io(_) => 10,
    }
}

#[derive(Debug, Parser)]
#[command(name = "sandwich", version, about = "Sandwich diffusion transformer toolkit")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<Precision>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub layout: Option<PathBuf>,
    /// Device profile (TOML).
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Distillation cache file.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Allocate blocks under a budget and search the routing mask.
    Search {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Time each block type and the whole model.
    Bench {
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Generate chunks with the streaming engine.
    StreamSim(StreamArgs),
    /// Distil a student from a cache.
    Distill {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Check every VJP against finite differences.
    GradCheck {
        #[arg(long)]
        tol: Option<f64>,
        /// Corrupt the VJP of matching cases (negative control).
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Dump per-head linear-attention maps.
    AttnDump {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// Build a distillation cache from a teacher.
    BuildKdCache {
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        two_expert: bool,
    },
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub chunks: Option<usize>,
    /// KV window in chunks; 0 keeps every chunk.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub oracle: bool,
}

/// Reads the config file and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.dtype {
        cfg.dtype = v;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    for (slot, flag) in [(&mut cfg.layout, &cli.layout), (&mut cfg.profile, &cli.profile), (&mut cfg.weights, &cli.weights), (&mut cfg.cache, &cli.cache)] {
        if let Some(v) = flag {
            *slot = Some(v.clone());
        }
    }
    match &cli.command {
        Command::Search { steps } => {
            if let Some(v) = steps {
                cfg.search.schedule.steps = *v;
            }
        }
        Command::Bench { repeats } => {
            if let Some(v) = repeats {
                cfg.bench.repeats = *v;
            }
        }
        Command::StreamSim(a) => {
            if let Some(v) = a.chunks {
                cfg.stream.chunks = v;
            }
            if let Some(v) = a.window {
                cfg.stream.window = (v > 0).then_some(v);
            }
            if let Some(v) = a.steps {
                cfg.stream.steps = v;
            }
            cfg.stream.oracle |= a.oracle;
        }
        Command::Distill { steps, lr } => {
            if let Some(v) = steps {
                cfg.distill.schedule.steps = *v;
            }
            if let Some(v) = lr {
                cfg.distill.schedule.lr = *v;
            }
        }
        Command::GradCheck { tol, corrupt } => {
            if let Some(v) = tol {
                cfg.grad_check.tol = *v;
            }
            if corrupt.is_some() {
                cfg.grad_check.corrupt = corrupt.clone();
            }
        }
        Command::AttnDump { input, max_tokens } => {
            if input.is_some() {
                cfg.attn_dump.input = input.clone();
            }
            if let Some(v) = max_tokens {
                cfg.attn_dump.max_tokens = *v;
            }
        }
        Command::BuildKdCache { records, two_expert } => {
            if let Some(v) = records {
                cfg.kd.records = *v;
            }
            cfg.kd.two_expert |= *two_expert;
        }
    }
    Ok(cfg)
}

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<CmdOutcome, Error> {
    match command {
        Command::Search { .. } => cmd_search(cfg),
        Command::Bench { .. } => cmd_bench(cfg),
        Command::StreamSim(_) => cmd_stream_sim(cfg),
        Command::Distill { .. } => cmd_distill(cfg),
        Command::GradCheck { .. } => cmd_grad_check(cfg),
        Command::AttnDump { .. } => cmd_attn_dump(cfg),
        Command::BuildKdCache { .. } => cmd_build_kd_cache(cfg),
    }
}

/// Parses `args`, runs the subcommand, prints its report and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = resolve_config(&cli).and_then(|cfg| dispatch(&cli.command, &cfg));
    match result {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.manifest["report"]).unwrap_or_default());
            if outcome.passed {
                0
            } else {
                eprintln!("error: invariant violated; see manifest");
                EXIT_INVARIANT
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
