//! The `ipn` command-line tool.

mod commands;
mod config;
mod gradcheck;

use std::path::PathBuf;

use clap::{Arg, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

pub use commands::{
    ablation_csv, cmd_ablate, cmd_eval, cmd_generate, cmd_gradcheck, cmd_sweep, cmd_train,
    dataset_summary, evaluate_model, mean_std, run_ablation, run_sweep, sweep_csv,
    train_and_score, AblationRow, RunScore, SweepRow, SWEEP_PARAMS, THRESHOLD_PRESETS,
};
pub use config::{write_provenance, RunConfig};
pub use gradcheck::{check_episode, micro_episode, STEP, TOLERANCE};

use crate::datasets::SyntheticSpec;
use crate::error::{Error, Result};
use crate::evaluation::Protocol;
use crate::training::{set_field, AblationVariant, Hyperparams};

#[derive(Parser, Debug)]
#[command(name = "ipn", version, about = "Train and evaluate dual-space prototype propagation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Load this dataset directory instead of the configured source.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Destination directory; defaults to the configured output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to <output_dir>/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// zsl, gzsl or both.
        #[arg(long)]
        protocol: Option<String>,
        /// Comma-separated hit@k cut-offs.
        #[arg(long, value_delimiter = ',')]
        hit_at_k: Vec<usize>,
        #[arg(long)]
        export_prototypes: bool,
    },
    /// Train and evaluate several model variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants; all when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values; thresholds accept cos<degrees>.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Check analytic gradients of the training objective against finite
    /// differences on a fixed micro-episode.
    Gradcheck {
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
        /// Finite-difference step.
        #[arg(long, default_value_t = STEP)]
        step: f64,
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
    },
}

const HP_PREFIX: &str = "hp.";
const SPEC_PREFIX: &str = "spec.";

fn field_names<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn with_fields(mut cmd: clap::Command, prefix: &str, names: &[String], heading: &'static str) -> clap::Command {
    for name in names {
        let mut arg = Arg::new(format!("{prefix}{name}"))
            .long(name.clone())
            .value_name("VALUE")
            .num_args(1)
            .help_heading(heading);
        if name.contains('_') {
            arg = arg.alias(name.replace('_', "-"));
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn command() -> clap::Command {
    let hp = field_names::<Hyperparams>();
    let spec = field_names::<SyntheticSpec>();
    let mut cmd = Cli::command();
    for sub in ["train", "ablate", "sweep"] {
        cmd = cmd.mut_subcommand(sub, |c| with_fields(c, HP_PREFIX, &hp, "Hyperparameters"));
    }
    cmd.mut_subcommand("generate", |c| with_fields(c, SPEC_PREFIX, &spec, "Dataset"))
}

fn overrides<'a>(m: &'a ArgMatches, prefix: &str, names: &'a [String]) -> Vec<(&'a str, &'a str)> {
    names
        .iter()
        .filter_map(|n| {
            m.try_get_one::<String>(&format!("{prefix}{n}"))
                .ok()
                .flatten()
                .map(|v| (n.as_str(), v.as_str()))
        })
        .collect()
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_common(common: &Common, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = load_config(common.config.as_ref())?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(ds) = &common.dataset {
        cfg.dataset = Some(ds.clone());
        cfg.synthetic = None;
    }
    if let Some(v) = &common.variant {
        cfg.variant = v.parse()?;
    }
    let names = field_names::<Hyperparams>();
    for (k, v) in overrides(m, HP_PREFIX, &names) {
        cfg.hyperparams.set(k, v)?;
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run(matches: &ArgMatches) -> Result<i32> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| Error::Config(e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(config.as_ref())?;
            let mut spec = cfg.synthetic.clone().unwrap_or_default();
            let names = field_names::<SyntheticSpec>();
            for (k, v) in overrides(sub, SPEC_PREFIX, &names) {
                set_field(&mut spec, k, v)?;
            }
            let out = out.unwrap_or(cfg.output_dir.clone());
            let ds = cmd_generate(&spec, &out)?;
            println!("{}", dataset_summary(&ds));
        }
        Command::Train { common, resume } => {
            let cfg = apply_common(&common, sub)?;
            let (_, log) = cmd_train(&cfg, resume.as_deref())?;
            if let Some(last) = log.last() {
                print_json(last)?;
            }
            eprintln!("checkpoint written to {}", cfg.output_dir.join("checkpoint").display());
        }
        Command::Eval {
            common,
            checkpoint,
            protocol,
            hit_at_k,
            export_prototypes,
        } => {
            let mut cfg = apply_common(&common, sub)?;
            if let Some(p) = protocol {
                cfg.protocols = match p.as_str() {
                    "both" => vec![Protocol::Gzsl, Protocol::Zsl],
                    other => vec![other.parse()?],
                };
            }
            if !hit_at_k.is_empty() {
                cfg.hit_at_k = hit_at_k;
            }
            cfg.export_prototypes |= export_prototypes;
            let ck = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint"));
            for r in cmd_eval(&cfg, &ck)? {
                print_json(&r)?;
            }
        }
        Command::Ablate {
            common,
            variants,
            seeds,
        } => {
            let mut cfg = apply_common(&common, sub)?;
            if !variants.is_empty() {
                cfg.variants = variants
                    .iter()
                    .map(|v| v.parse())
                    .collect::<Result<Vec<AblationVariant>>>()?;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            print!("{}", ablation_csv(&cmd_ablate(&cfg)?)?);
        }
        Command::Sweep {
            common,
            param,
            values,
            seeds,
        } => {
            let mut cfg = apply_common(&common, sub)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            print!("{}", sweep_csv(&cmd_sweep(&cfg, &param, &values)?)?);
        }
        Command::Gradcheck {
            config,
            seed,
            variant,
            step,
            corrupt_group,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.hyperparams.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v.parse()?;
            }
            let report = cmd_gradcheck(&cfg, step, corrupt_group.as_deref())?;
            println!(
                "{:<10} {:>8} {:>14} {:>14} {:>14}  status",
                "group", "scalars", "max_rel_err", "analytic", "numeric"
            );
            for g in &report.groups {
                let ok = g.max_rel_error <= TOLERANCE;
                println!(
                    "{:<10} {:>8} {:>14.3e} {:>14.6e} {:>14.6e}  {}",
                    g.group,
                    g.n_scalars,
                    g.max_rel_error,
                    g.worst.0,
                    g.worst.1,
                    if ok { "pass" } else { "FAIL" }
                );
            }
            if !report.passes(TOLERANCE) {
                eprintln!("gradient check failed (tolerance {TOLERANCE:e})");
                return Ok(4);
            }
        }
    }
    Ok(0)
}

/// Runs the tool with the process arguments; returns the exit code.
pub fn main() -> i32 {
    main_with(std::env::args_os())
}

pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
