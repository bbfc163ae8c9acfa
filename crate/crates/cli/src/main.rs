use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use opssplit_cli::commands::{self, Axis, CompareArgs, EvalSource};
use opssplit_cli::{CliError, RunConfig, EXIT_OK, EXIT_PARTIAL};
use opssplit_core::datagen::Split;
use opssplit_core::dynamics::Mode;

#[derive(Parser)]
#[command(name = "opssplit", version, about = "Learn PDE operators by operator splitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.sets.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }

    fn text(&self) -> Result<Option<String>, CliError> {
        self.config
            .as_ref()
            .map(|p| std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display()))))
            .transpose()
    }

    fn resolve(&self, extra: Vec<String>) -> Result<RunConfig, CliError> {
        let mut o = self.overrides();
        o.extend(extra);
        opssplit_cli::resolve(self.text()?.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the train, test, extrapolation and OOD splits.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["incompressible", "compressible"])]
        system: Option<String>,
        /// Training trajectories.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one deployment mode.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["ar", "node", "opssplit"])]
        mode: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Initialise a slot from a checkpoint, `slot=path`.
        #[arg(long = "warm-start", value_name = "SLOT=PATH")]
        warm_start: Vec<String>,
    },
    /// Evaluate trained checkpoints (or the reference solver) on all splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Training output directory.
        #[arg(long, required_unless_present = "oracle")]
        checkpoints: Option<PathBuf>,
        /// Replay the reference solver instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one setting over values, training and evaluating each mode.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "ar,node,opssplit")]
        modes: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter-shift error table with oracle operators.
    Theorem {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a learned convection operator with its numerical counterpart.
    CompareOps {
        #[command(flatten)]
        common: Common,
        /// A `conv` checkpoint, or an OpsSplit training directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        trajectory: usize,
        #[arg(long)]
        frame: Option<usize>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    Mode::parse(s).ok_or_else(|| CliError::config(format!("unknown mode '{s}'")))
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Gen { common, out, system, n } => {
            let mut extra = Vec::new();
            if let Some(s) = system {
                extra.push(format!("data.system=\"{s}\""));
            }
            if let Some(n) = n {
                extra.push(format!("data.n_train={n}"));
            }
            let cfg = common.resolve(extra)?;
            let hash = commands::gen(&cfg, &out, common.force)?;
            println!("gen {} [{hash}]", out.display());
            Ok(EXIT_OK)
        }
        Command::Train {
            common,
            mode,
            data,
            out,
            epochs,
            warm_start,
        } => {
            let cfg = common.resolve(epochs.map(|e| format!("train.epochs={e}")).into_iter().collect())?;
            let ws = warm_start
                .iter()
                .map(|s| {
                    s.split_once('=')
                        .map(|(a, b)| (a.to_string(), PathBuf::from(b)))
                        .ok_or_else(|| CliError::config(format!("--warm-start '{s}' is not slot=path")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let r = commands::train_cmd(&cfg, parse_mode(&mode)?, &data, &out, &ws, common.force)?;
            println!(
                "train {} params={} final train={:.4e} test={:.4e} best_epoch={} [{}]",
                mode,
                r.summary.param_count,
                r.summary.final_train_loss,
                r.summary.final_test_loss,
                r.summary.best_epoch,
                r.summary.config_hash
            );
            Ok(EXIT_OK)
        }
        Command::Eval {
            common,
            checkpoints,
            oracle,
            data,
            out,
        } => {
            let cfg = common.resolve(Vec::new())?;
            let source = match (&checkpoints, oracle) {
                (_, true) => EvalSource::Oracle,
                (Some(dir), false) => EvalSource::Checkpoints(dir),
                (None, false) => return Err(CliError::config("eval needs --checkpoints or --oracle")),
            };
            let (report, complete) = commands::eval_cmd(&cfg, source, &data, &out, common.force)?;
            for (name, sc) in &report.scenarios {
                let v = sc.nrmse.map(|x| format!("{x:.4e}")).unwrap_or_else(|| format!("diverged ({})", sc.diverged));
                println!("{:>18} nrmse {v}", name);
            }
            Ok(if complete { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Ablate {
            common,
            axis,
            values,
            modes,
            data,
            out,
        } => {
            let modes = modes.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>, _>>()?;
            let (rows, complete) = commands::ablate_cmd(
                common.text()?.as_deref(),
                &common.overrides(),
                axis,
                &values,
                &modes,
                &data,
                &out,
                common.force,
            )?;
            println!("ablate {}: {} legs -> {}", axis.name(), rows.len(), out.join("ablate.csv").display());
            Ok(if complete { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Theorem { common, out } => {
            let cfg = common.resolve(Vec::new())?;
            let t = commands::theorem_cmd(&cfg, &out, common.force)?;
            println!(
                "slopes: AR {:.3} NODE {:.3} OpsSplit {:.3}",
                t.slope_ar, t.slope_node, t.slope_opssplit
            );
            Ok(EXIT_OK)
        }
        Command::CompareOps {
            common,
            checkpoint,
            data,
            out,
            split,
            trajectory,
            frame,
        } => {
            let cfg = common.resolve(Vec::new())?;
            let split = Split::parse(&split).ok_or_else(|| CliError::config(format!("unknown split '{split}'")))?;
            let corr = commands::compare_ops_cmd(
                &cfg,
                &CompareArgs {
                    checkpoint: &checkpoint,
                    data: &data,
                    split,
                    trajectory,
                    frame,
                    out: &out,
                    force: common.force,
                },
            )?;
            let show: Vec<String> = corr
                .iter()
                .map(|c| c.map(|v| format!("{v:.3}")).unwrap_or_else(|| "undefined".into()))
                .collect();
            println!("correlation per channel: {}", show.join(", "));
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("OPSSPLIT_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: OPSSPLIT_THREADS must be a positive integer, got '{n}'");
                return ExitCode::from(opssplit_cli::EXIT_CONFIG as u8);
            }
        }
    }
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
