//! Command-line entry point: config resolution and subcommand dispatch.

mod config;

pub use config::Config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::advantage::AdvKind;
use crate::dynbench::{self, DynModelKind};
use crate::envs::{make_env, write_episode_csv, write_observations, EnvKind, Level, LogRow};
use crate::safety::SafetyMode;
use crate::trainer::{self, stream, Stream, CODE_HASH, CONFIG_FILE, FINAL_CHECKPOINT, MANIFEST_FILE, METRICS_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime(context: &str) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "cade", version, about = "Safe coverage RL with learned vision dynamics")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true, value_enum)]
    pub env: Option<EnvKind>,
    #[arg(long, global = true, value_enum)]
    pub level: Option<Level>,
    #[arg(long, global = true, value_enum)]
    pub adv: Option<AdvKind>,
    #[arg(long = "safety-layer", global = true, value_enum)]
    pub safety_layer: Option<SafetyMode>,
    /// Comma-separated seed list.
    #[arg(long = "seeds", alias = "seed", global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Environment step budget.
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    #[arg(long = "out-dir", global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long = "run-id", global = true)]
    pub run_id: Option<String>,
    /// Penalize the model-based cost advantage.
    #[arg(long, global = true, conflicts_with = "no_lagrangian")]
    pub lagrangian: bool,
    #[arg(long = "no-lagrangian", global = true)]
    pub no_lagrangian: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed.
    Train,
    /// Evaluate a checkpoint across difficulty levels.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        greedy: bool,
    },
    /// Train and compare the vision dynamics models.
    DynBench {
        #[arg(long, value_enum, value_delimiter = ',')]
        models: Option<Vec<DynModelKind>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Record random-policy episodes.
    Collect {
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Also write every observation as a PGM image.
        #[arg(long)]
        dump_obs: bool,
    },
}

/// Defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let o = &cli.overrides;
    if let Some(v) = o.env {
        cfg.env = v;
    }
    if let Some(v) = o.level {
        cfg.level = v;
    }
    if let Some(v) = o.adv {
        cfg.adv.kind = v;
    }
    if let Some(v) = o.safety_layer {
        cfg.safety.mode = v;
    }
    if let Some(v) = &o.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = o.steps {
        cfg.train.steps = Some(v);
    }
    if let Some(v) = &o.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &o.run_id {
        cfg.run_id = Some(v.clone());
    }
    if o.lagrangian {
        cfg.train.lagrangian = true;
    }
    if o.no_lagrangian {
        cfg.train.lagrangian = false;
    }
    match &cli.command {
        Some(Command::Eval { checkpoint, episodes, greedy }) => {
            if let Some(c) = checkpoint {
                cfg.eval.checkpoint = Some(c.clone());
            }
            if let Some(n) = episodes {
                cfg.eval.episodes = *n;
            }
            cfg.eval.greedy |= greedy;
        }
        Some(Command::DynBench { models, epochs }) => {
            if let Some(m) = models {
                cfg.dyn_bench.models = m.clone();
            }
            if let Some(e) = epochs {
                cfg.dyn_bench.epochs = *e;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    seed: u64,
    code_hash: &'a str,
    started_unix: f64,
    finished_unix: f64,
    config: &'a Config,
}

fn now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write_meta(dir: &Path, command: &str, seed: u64, started: f64, cfg: &Config) -> Result<(), CliError> {
    let meta = RunMeta {
        command,
        seed,
        code_hash: CODE_HASH,
        started_unix: started,
        finished_unix: now(),
        config: cfg,
    };
    let text = toml::to_string(&meta).map_err(|e| runtime("manifest")(&e))?;
    fs::write(dir.join(MANIFEST_FILE), text).map_err(|e| runtime("manifest")(&e))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| runtime("config")(&e))
}

fn prepare(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(&dir.display().to_string())(&e))
}

/// Runs the parsed command and returns its artifacts' directories.
pub fn run(cli: &Cli, cfg: &Config) -> Result<Vec<PathBuf>, CliError> {
    let Some(command) = &cli.command else {
        return Err(CliError::Config("no subcommand given (train, eval, dyn-bench, collect)".into()));
    };
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.run_dir(seed);
        let started = now();
        match command {
            Command::Train => {
                trainer::train(cfg, seed, &dir).map_err(|e| runtime("train")(&e))?;
            }
            Command::Eval { .. } => {
                let ckpt = cfg.eval.checkpoint.clone().unwrap_or_else(|| dir.join(FINAL_CHECKPOINT));
                let report = trainer::evaluate(cfg, &ckpt, seed).map_err(|e| runtime("eval")(&e))?;
                let out = dir.join("eval");
                prepare(&out)?;
                trainer::write_eval_csv(&out, &report).map_err(|e| runtime("eval")(&e))?;
                write_meta(&out, "eval", seed, started, cfg)?;
                dirs.push(out);
                continue;
            }
            Command::DynBench { .. } => {
                let dir = cfg.out_dir.join(match &cfg.run_id {
                    Some(id) => format!("{id}-s{seed}"),
                    None => format!("dyn-{}-{}-s{seed}", cfg.env.as_str(), cfg.level.as_str()),
                });
                prepare(&dir)?;
                let results = dynbench::run_bench(cfg.env, cfg.level, &cfg.envs, &cfg.dyn_bench, &cfg.nets, seed)
                    .map_err(|e| runtime("dyn-bench")(&e))?;
                let rows: Vec<_> = results.iter().flat_map(|(r, _)| r.steps.iter().cloned()).collect();
                dynbench::write_dyn_metrics(&dir.join(dynbench::DYN_METRICS_FILE), &rows).map_err(|e| runtime("dyn-bench")(&e))?;
                write_meta(&dir, "dyn-bench", seed, started, cfg)?;
                dirs.push(dir);
                continue;
            }
            Command::Collect { episodes, dump_obs } => {
                prepare(&dir)?;
                collect(cfg, seed, *episodes, *dump_obs, &dir)?;
                write_meta(&dir, "collect", seed, started, cfg)?;
                dirs.push(dir);
                continue;
            }
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Serialize)]
struct CollectRow {
    episode: usize,
    steps: usize,
    reward: f64,
    cost: f64,
    terminal_kind: &'static str,
}

fn collect(cfg: &Config, seed: u64, episodes: usize, dump_obs: bool, dir: &Path) -> Result<(), CliError> {
    let err = runtime("collect");
    let mut rng = stream(seed, Stream::Dataset);
    let mut env = make_env(cfg.env, cfg.level, &cfg.envs);
    let space = env.action_space();
    let mut summary = csv::Writer::from_path(dir.join(METRICS_FILE)).map_err(|e| err(&e))?;
    for k in 0..episodes {
        let mut obs = vec![env.reset(rng.random())];
        let mut rows = Vec::new();
        loop {
            let a: Vec<usize> = space.branches().iter().map(|&n| rng.random_range(0..n)).collect();
            let step = env.step(&a).map_err(|e| err(&e))?;
            rows.push(LogRow::new(rows.len(), &a, step.reward, step.cost, step.kind));
            let done = step.terminal();
            obs.push(step.obs);
            if done {
                break;
            }
        }
        write_episode_csv(&dir.join(format!("episode_{k:04}.csv")), &rows).map_err(|e| err(&e))?;
        if dump_obs {
            write_observations(&dir.join("obs"), &format!("episode_{k:04}"), &obs).map_err(|e| err(&e))?;
        }
        summary
            .serialize(CollectRow {
                episode: k,
                steps: rows.len(),
                reward: rows.iter().map(|r| r.reward).sum(),
                cost: rows.iter().map(|r| r.cost).sum(),
                terminal_kind: rows.last().map_or("none", |r| r.terminal_kind),
            })
            .map_err(|e| err(&e))?;
    }
    summary.flush().map_err(|e| err(&e))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve(&cli).and_then(|cfg| {
        if cli.print_config {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        run(&cli, &cfg).map(|dirs| {
            for d in dirs {
                println!("{}", d.display());
            }
        })
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests;
