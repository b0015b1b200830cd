//! Command-line front end.
//!
//! Three subcommands:
//!
//! - `qpush run` — execute one experiment from a JSON config file and/or
//!   flag overrides, printing a summary and optionally writing the CSV
//!   trace with its JSON metadata sidecar.
//! - `qpush validate` — run the engine-vs-oracle equivalence suite; the
//!   exit status reflects the outcome.
//! - `qpush compare` — run a quantized and an exact config and print the
//!   cumulative bits each needed to reach the given relative error targets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qpush::config::{ExperimentConfig, Mode};
use qpush::error::Result;
use qpush::harness::{bits_to_error, run, RunOutcome};

#[derive(Parser)]
#[command(name = "qpush", version, about = "Quantized push-sum consensus and decentralized SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (config file, flag overrides, or both).
    Run(RunArgs),
    /// Run the engine-vs-matrix-oracle validation suite.
    Validate {
        /// Master seed for the suite's randomness.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare transmitted bits to reach target errors, quantized vs exact.
    Compare {
        /// Config file for the quantized run.
        #[arg(long)]
        quantized: PathBuf,
        /// Config file for the exact (identity-quantizer) run.
        #[arg(long)]
        exact: PathBuf,
        /// Comma-separated relative error targets, e.g. 1e-1,1e-2.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags below override its keys one-for-one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// gossip | convex | nonconvex | validate
    #[arg(long)]
    mode: Option<String>,
    /// Graph preset (g1, g2, ring:<n>, complete:<n>).
    #[arg(long)]
    graph: Option<String>,
    /// Quantizer (identity or levels:<s>).
    #[arg(long)]
    quant: Option<String>,
    /// Vector dimension (gossip mode).
    #[arg(long)]
    dim: Option<usize>,
    /// Number of rounds T.
    #[arg(long)]
    rounds: Option<u64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Step size; omit for the theorem default.
    #[arg(long)]
    alpha: Option<f64>,
    /// Decay the step size as alpha / sqrt(t).
    #[arg(long)]
    alpha_decay: bool,
    /// Objective preset (lsq:<n>x<m>:<d> or mlp:<h>:<p>).
    #[arg(long)]
    objective: Option<String>,
    /// Output directory for <name>.csv and <name>.meta.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run name override (defaults to a config-derived slug).
    #[arg(long)]
    name: Option<String>,
    /// Rounds between replica-consistency audits.
    #[arg(long)]
    audit_interval: Option<u64>,
    /// Allow quantizers with contraction factor >= 1 (divergent regime).
    #[arg(long)]
    allow_inadmissible: bool,
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "gossip" => Ok(Mode::Gossip),
        "convex" => Ok(Mode::Convex),
        "nonconvex" => Ok(Mode::Nonconvex),
        "validate" => Ok(Mode::Validate),
        other => Err(qpush::error::Error::ConfigInvalid {
            field: "mode",
            reason: format!("unknown mode `{other}` (expected gossip|convex|nonconvex|validate)"),
        }),
    }
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(Mode::Gossip),
    };
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if let Some(v) = &args.graph {
        cfg.graph = v.clone();
    }
    if let Some(v) = &args.quant {
        cfg.quant = v.clone();
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    if let Some(v) = args.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = Some(v);
    }
    if args.alpha_decay {
        cfg.alpha_decay = true;
    }
    if let Some(v) = &args.objective {
        cfg.objective = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = &args.name {
        cfg.name = Some(v.clone());
    }
    if let Some(v) = args.audit_interval {
        cfg.audit_interval = v;
    }
    if args.allow_inadmissible {
        cfg.enforce_admissibility = false;
    }
    Ok(cfg)
}

fn print_validation(checks: &[qpush::oracle::Check]) -> bool {
    let mut all_ok = true;
    for c in checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {} — {}", c.name, c.detail);
        all_ok &= c.passed;
    }
    let n_pass = checks.iter().filter(|c| c.passed).count();
    println!("{n_pass}/{} checks passed", checks.len());
    all_ok
}

fn cmd_run(args: &RunArgs) -> Result<bool> {
    let cfg = build_config(args)?;
    match run(&cfg)? {
        RunOutcome::Validation(checks) => Ok(print_validation(&checks)),
        RunOutcome::Trace(trace) => {
            let meta = &trace.meta;
            println!("run       {}", cfg.run_name());
            println!("verdict   {}", meta.verdict);
            println!("rounds    {}", meta.rounds);
            println!("bits      {}", meta.total_bits);
            let last = trace.len().saturating_sub(1);
            for col in trace.columns() {
                if *col == "round" {
                    continue;
                }
                let v = trace.column(col)?;
                println!("final {:<14} {:e}", col, v[last]);
            }
            if let Some(dir) = &cfg.out {
                let name = cfg.run_name();
                println!("wrote     {}", dir.join(format!("{name}.csv")).display());
                println!("wrote     {}", dir.join(format!("{name}.meta.json")).display());
            }
            Ok(true)
        }
    }
}

fn cmd_compare(quantized: &PathBuf, exact: &PathBuf, targets: &[f64]) -> Result<bool> {
    let q = ExperimentConfig::load(quantized)?;
    let e = ExperimentConfig::load(exact)?;
    let table = bits_to_error(&q, &e, targets)?;
    print!("{}", table.render_text());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate { seed } => {
            let mut cfg = ExperimentConfig::new(Mode::Validate);
            cfg.seed = *seed;
            match run(&cfg) {
                Ok(RunOutcome::Validation(checks)) => Ok(print_validation(&checks)),
                Ok(_) => unreachable!("validate mode returns checks"),
                Err(e) => Err(e),
            }
        }
        Command::Compare {
            quantized,
            exact,
            targets,
        } => cmd_compare(quantized, exact, targets),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
