use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wfnet::commands::{
    cmd_eval, cmd_explain, cmd_gradcheck, cmd_retrain_all, cmd_train, cmd_untrain, ClassSelection, BASELINE_FILE,
    GATED_FILE,
};
use wfnet::config::{Overrides, RunConfig};
use wfnet::diagnostics::write_gradcheck_table;
use wfnet::{Error, Result};

#[derive(Parser)]
#[command(name = "wfnet", version, about = "Per-class weight gating for multi-class unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model, training and untraining seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let path = self.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
        RunConfig::load(path, &Overrides { seed: self.seed, out: self.out.clone() })
    }

    /// Output directory for commands that work without a config file.
    fn out_dir(&self) -> Result<PathBuf> {
        match (&self.out, &self.config) {
            (Some(out), _) => Ok(out.clone()),
            (None, Some(_)) => Ok(self.load()?.out),
            (None, None) => Ok(PathBuf::from(".")),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train one leave-one-class-out oracle per class.
    RetrainAll {
        #[command(flatten)]
        common: Common,
    },
    /// Wrap the baseline with per-class gates and untrain every class.
    Untrain {
        #[command(flatten)]
        common: Common,
        /// Baseline checkpoint [default: <out>/baseline.ckpt].
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Score a gated checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Gated checkpoint [default: <out>/wf.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A class index or `all`.
        #[arg(long, default_value = "all")]
        class: ClassSelection,
        /// Directory of leave-one-out oracle checkpoints.
        #[arg(long)]
        oracles: Option<PathBuf>,
    },
    /// Export filter/class association graphs.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Gated layer name; every gated layer when omitted.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = 2)]
        min_classes: usize,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common } => print_json(&cmd_train(&common.load()?)?)?,
        Command::RetrainAll { common } => print_json(&cmd_retrain_all(&common.load()?)?)?,
        Command::Untrain { common, baseline } => {
            let cfg = common.load()?;
            let baseline = baseline.unwrap_or_else(|| cfg.path(BASELINE_FILE));
            print_json(&cmd_untrain(&cfg, &baseline)?)?;
        }
        Command::Eval { common, checkpoint, class, oracles } => {
            let cfg = common.load()?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.path(GATED_FILE));
            let report = cmd_eval(&cfg, &checkpoint, class, oracles.as_deref())?;
            let mut out = std::io::stdout().lock();
            report.unlearned.write_table(&mut out)?;
            writeln!(out)?;
            report.original.write_table(&mut out)?;
            if let Some(r) = &report.retrained {
                writeln!(out)?;
                r.write_table(&mut out)?;
            }
        }
        Command::Explain { common, checkpoint, layer, top_k, min_classes } => {
            let out = common.out_dir()?;
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(GATED_FILE));
            print_json(&cmd_explain(&checkpoint, &out, layer.as_deref(), top_k, min_classes)?)?;
        }
        Command::Gradcheck { common } => {
            let out = common.out.clone();
            let rows = cmd_gradcheck(out.as_deref())?;
            write_gradcheck_table(std::io::stdout().lock(), &rows)?;
            return Ok(rows.iter().all(|r| r.pass));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let line = serde_json::json!({ "error": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}
