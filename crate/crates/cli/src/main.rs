//! `m2ort`: synthesize corpora, select genes, train, evaluate, run ablation
//! grids, profile architectures, check gradients and render heatmaps.
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::Overrides;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs; exit code 1.
    Validation(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl From<m2ort_core::Error> for CliError {
    fn from(e: m2ort_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "m2ort", version, about = "Many-to-one multi-magnification regression for spot gene expression")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true, default_value_t = false)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Unset flags fall back to the config
/// file, then to built-in defaults.
#[derive(Debug, Args)]
struct Common {
    /// JSON config with flat dotted keys, e.g. {"model.mask_prob": 0.1} [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: none; required where the command writes files]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus root directory [default: none]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Size preset: small, base or large [default: base dimensions]
    #[arg(long)]
    variant: Option<String>,
    /// Active levels, comma separated, e.g. "0,1,2" [default: 0,1,2]
    #[arg(long)]
    levels: Option<String>,
    /// Attention mask probability [default: 0.1]
    #[arg(long)]
    m: Option<f64>,
    /// Ablation grid: table2, table3, table4, table8 or custom [default: table2]
    #[arg(long)]
    grid: Option<String>,
    /// Split to evaluate: train, val or test [default: test]
    #[arg(long)]
    split: Option<String>,
    /// Checkpoint directory to evaluate [default: none]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation output directory to render [default: none]
    #[arg(long)]
    dump: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Result<Overrides, CliError> {
        let mut o: Overrides = Vec::new();
        if let Some(s) = self.seed {
            o.push(("seed", Value::from(s)));
        }
        if let Some(c) = &self.corpus {
            o.push(("corpus", Value::from(c.display().to_string())));
        }
        if let Some(v) = &self.variant {
            o.push(("variant", Value::from(v.to_lowercase())));
        }
        if let Some(l) = &self.levels {
            let levels = l
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::Validation(format!("--levels {l:?} is not a comma-separated list of integers")))?;
            o.push(("model.levels", Value::from(levels)));
        }
        if let Some(m) = self.m {
            o.push(("model.mask_prob", Value::from(m)));
        }
        if let Some(g) = &self.grid {
            o.push(("ablate.grid", Value::from(g.as_str())));
        }
        if let Some(s) = &self.split {
            o.push(("eval.split", Value::from(s.as_str())));
        }
        if let Some(c) = &self.checkpoint {
            o.push(("eval.checkpoint", Value::from(c.display().to_string())));
        }
        if let Some(d) = &self.dump {
            o.push(("render.dump", Value::from(d.display().to_string())));
        }
        Ok(o)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus into --out.
    Synth(Common),
    /// Choose the gene panel from the corpus training slides; writes panel.json.
    SelectGenes(Common),
    /// Train on the corpus train split, validating on val.
    Train(Common),
    /// Score a checkpoint on a corpus split.
    Eval(Common),
    /// Train and score every member of a configuration grid.
    Ablate(Common),
    /// Print parameter and multiply-accumulate counts.
    Profile(Common),
    /// Compare analytic and finite-difference gradients of a tiny model.
    Gradcheck(Common),
    /// Draw ground-truth and predicted expression heatmaps from an eval dump.
    Render(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::Synth(a) => c::synth(&a),
        Command::SelectGenes(a) => c::select_genes(&a),
        Command::Train(a) => c::train(&a),
        Command::Eval(a) => c::eval(&a),
        Command::Ablate(a) => c::ablate(&a),
        Command::Profile(a) => c::profile(&a),
        Command::Gradcheck(a) => c::gradcheck(&a),
        Command::Render(a) => c::render(&a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(e.message()));
            ExitCode::from(e.exit_code())
        }
    }
}
