use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glimpse::engine::EvalMode;
use glimpse::experiment::{
    cmd_data, cmd_eval, cmd_inspect_trace, cmd_sweep, cmd_train, exit_code, output_root, ExperimentConfig, SweepParam,
};

/// Data generation, two-stage training, evaluation and sweeps.
#[derive(Parser)]
#[command(name = "glimpse", version)]
struct Cli {
    /// TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to a per-config directory under $GLIMPSE_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the stage-1, stage-2 and test corpora.
    Data {
        /// Samples per training corpus.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test suite.
    Eval(EvalArgs),
    /// Train and evaluate over a range of eta or slot values.
    Sweep {
        #[arg(long, value_enum)]
        param: Option<Param>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Print a trace dump.
    InspectTrace { path: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Corpus directory written by `data`; rebuilt from the config otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Stage 2 from a fresh model (ablation).
    #[arg(long)]
    skip_stage1: bool,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query all four experts before answering.
    #[arg(long, conflicts_with = "force_random")]
    force_full: bool,
    /// Query this many random experts per trace (fractional means in expectation).
    #[arg(long)]
    force_random: Option<f64>,
    /// Test tasks.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dump_traces: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Eta,
    Slots,
}

fn load_config(cli: &Cli) -> glimpse::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, verb: &str, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .unwrap_or_else(|| output_root().join(format!("{verb}-{}", &cfg.hash()[..12])))
}

fn print_json<T: serde::Serialize>(v: &T) -> glimpse::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: &Cli) -> glimpse::Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Data { n } => {
            if let Some(n) = *n {
                cfg.data.stage1_samples = n;
                cfg.data.stage2_samples = n;
            }
            let out = out_dir(cli, "data", &cfg);
            let report = cmd_data(&cfg, &out)?;
            print_json(&report)?;
            eprintln!("corpora written to {}", out.display());
        }
        Command::Train(a) => {
            if let Some(n) = a.slots {
                cfg.set_slots(n);
            }
            let tc = if a.stage == 1 { &mut cfg.stage1 } else { &mut cfg.stage2 };
            if let Some(eta) = a.eta {
                tc.weights.eta = eta;
            }
            if let Some(steps) = a.steps {
                tc.steps = steps;
            }
            if a.skip_stage1 {
                cfg.stage2.skip_stage1 = true;
            }
            let out = out_dir(cli, &format!("train{}", a.stage), &cfg);
            let report = cmd_train(&cfg, a.stage, a.init.as_deref(), a.data.as_deref(), &out)?;
            print_json(&report)?;
            eprintln!("checkpoint written to {}", out.join("checkpoint.safetensors").display());
        }
        Command::Eval(a) => {
            if a.force_full {
                cfg.eval.mode = EvalMode::ForceFull;
            } else if let Some(k) = a.force_random {
                cfg.eval.mode = EvalMode::ForceRandom { k };
            }
            if let Some(n) = a.n {
                cfg.data.test_samples = n;
            }
            cfg.eval.dump_traces |= a.dump_traces;
            let out = out_dir(cli, "eval", &cfg);
            print_json(&cmd_eval(&cfg, &a.checkpoint, &out)?)?;
        }
        Command::Sweep { param, values, seeds } => {
            if let Some(p) = param {
                cfg.sweep.param = match p {
                    Param::Eta => SweepParam::Eta,
                    Param::Slots => SweepParam::Slots,
                };
            }
            if let Some(v) = values {
                cfg.sweep.values = v.clone();
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = *s;
            }
            let out = out_dir(cli, "sweep", &cfg);
            let report = cmd_sweep(&cfg, &out)?;
            print!("{}", report.table());
        }
        Command::InspectTrace { path } => print!("{}", cmd_inspect_trace(Path::new(path))?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
