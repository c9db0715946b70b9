//! `classsr`: data preparation, staged training, inference and evaluation.
//!
//! Exit codes: 0 on success, 1 when a command fails, 2 for invalid usage
//! or an invalid configuration.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use classsr::commands::{cmd_eval, cmd_infer, cmd_prepare, cmd_train};
use classsr::config::RunConfig;
use classsr::router::{CostTable, Routing};
use classsr::training::Stage;
use classsr::Error;

#[derive(Parser)]
#[command(name = "classsr", version, about = "Content-adaptive tiled super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `paths.workdir`.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build HR/LR pairs and tiles, score and partition them.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage: pretrain, classifier or joint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: String,
        /// Overrides the number of iterations of this stage.
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        w1: Option<f64>,
        #[arg(long)]
        w2: Option<f64>,
        #[arg(long)]
        w3: Option<f64>,
    },
    /// Super-resolve one LR image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        routing: RoutingArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON `{"branches": [...], "class_module": c}` used for FLOPs reporting.
        #[arg(long)]
        cost_table: Option<PathBuf>,
    },
    /// Routed versus forced-base evaluation.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory with `hr/` and `lr/` PNGs paired by name; the prepared
        /// validation set when absent.
        #[arg(long)]
        test_set: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cost_table: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RoutingArgs {
    /// Send every tile through this branch (1-based).
    #[arg(long, conflicts_with = "labels")]
    branch: Option<usize>,
    /// JSON list of 0-based branch labels, one per tile in grid order.
    #[arg(long)]
    labels: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(w) = &common.workdir {
        cfg.paths.workdir = w.clone();
    }
    if let Some(s) = common.seed {
        cfg.training.seed = s;
    }
    Ok(cfg)
}

fn checked(cfg: RunConfig) -> Result<RunConfig, Failure> {
    cfg.validate().map_err(|e| Failure::Usage(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn routing(args: &RoutingArgs) -> Result<Routing, Failure> {
    match (args.branch, &args.labels) {
        (Some(0), _) => Err(Failure::Usage("--branch is 1-based".into())),
        (Some(b), _) => Ok(Routing::Force(b - 1)),
        (None, Some(path)) => Ok(Routing::Labels(read_json(path)?)),
        (None, None) => Ok(Routing::Argmax),
    }
}

fn print(value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Run(e.into()))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Run(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Prepare { common } => {
            let cfg = checked(load_config(&common)?)?;
            let summary = cmd_prepare(&cfg)?;
            for (k, n) in summary.class_counts.iter().enumerate() {
                eprintln!("class {k}: {n} tiles");
            }
            print(&summary)
        }
        Command::Train {
            common,
            stage,
            iterations,
            w1,
            w2,
            w3,
        } => {
            let stage: Stage = stage.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let mut cfg = load_config(&common)?;
            let w = &mut cfg.training.weights;
            w.w1 = w1.unwrap_or(w.w1);
            w.w2 = w2.unwrap_or(w.w2);
            w.w3 = w3.unwrap_or(w.w3);
            if let Some(n) = iterations {
                let s = match stage {
                    Stage::Pretrain => &mut cfg.training.pretrain,
                    Stage::Classifier => &mut cfg.training.classifier,
                    Stage::Joint => &mut cfg.training.joint,
                };
                s.iterations = n;
            }
            let cfg = checked(cfg)?;
            print(&cmd_train(&cfg, stage)?)
        }
        Command::Infer {
            common,
            input,
            out,
            routing: r,
            checkpoint,
            cost_table,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = &cost_table {
                cfg.eval.cost_table = Some(read_json::<CostTable>(p)?);
            }
            let cfg = checked(cfg)?;
            let outputs = cmd_infer(&cfg, &input, &out, routing(&r)?, checkpoint.as_deref())?;
            let s = &outputs.summary;
            let shares: Vec<String> = s.percentages.iter().map(|p| format!("{p:.1}%")).collect();
            eprintln!(
                "{} -> {}x{}, classes {}, {:.1}M FLOPs per tile ({:.1}% of base)",
                input.display(),
                s.output_dims.0,
                s.output_dims.1,
                shares.join(" / "),
                s.flops.avg_flops / 1e6,
                s.flops.ratio_vs_base * 100.0
            );
            print(&outputs)
        }
        Command::Eval {
            common,
            test_set,
            checkpoint,
            cost_table,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = &cost_table {
                cfg.eval.cost_table = Some(read_json::<CostTable>(p)?);
            }
            let cfg = checked(cfg)?;
            let m = cmd_eval(&cfg, test_set.as_deref(), checkpoint.as_deref())?;
            eprintln!(
                "routed: {:.3} dB, {:.1}M FLOPs ({:.1}%)   forced base: {:.3} dB, {:.1}M FLOPs",
                m.routed.psnr,
                m.routed.avg_flops / 1e6,
                m.routed.ratio_vs_base * 100.0,
                m.forced_base.psnr,
                m.forced_base.avg_flops / 1e6
            );
            print(&m)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
