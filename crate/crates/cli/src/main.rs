mod commands;
mod table;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctmit::cache_abs::CacheConfig;
use ctmit::sim::CostModel;
use ctmit::transform_branch::CtselMode;
use ctmit::transform_lut::Strategy;

use commands::{Outcome, PipelineConfig};

/// Finds and repairs secret-dependent timing in TIR programs.
///
/// Exit status: 0 when clean, 2 when leaks are found, 1 on errors.
#[derive(Parser)]
#[command(name = "ctmit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report secret-dependent branches and table accesses.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Remove secret-dependent branches and repair table accesses.
    Mitigate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        repair: Repair,
        /// Where to write the repaired program (default: stdout).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the original and repaired program and compare cycles and misses.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        repair: Repair,
        #[command(flatten)]
        sampling: Sampling,
        /// JSON file with one input object, or a list of them.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Include full traces in the JSON report.
        #[arg(long)]
        full_trace: bool,
    },
    /// Compare cycle counts over many secrets with public inputs fixed.
    Check {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        repair: Repair,
        #[command(flatten)]
        sampling: Sampling,
        /// JSON object with the public inputs (default: random from the seed).
        #[arg(long)]
        public: Option<PathBuf>,
        /// Enumerate every secret (at most 16 bits).
        #[arg(long)]
        exhaustive: bool,
        /// Also check the repaired program; the exit status then reflects it.
        #[arg(long)]
        mitigated: bool,
    },
    /// Predicted accesses, misses and hits for K lookups into an N-byte table.
    Predict {
        #[arg(short = 'k', long)]
        k: u64,
        #[arg(short = 'n', long)]
        n: u64,
        #[arg(long, default_value_t = 64)]
        cls: u64,
        #[command(flatten)]
        out: Output,
    },
    /// The bundled benchmark programs.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    List {
        #[command(flatten)]
        out: Output,
    },
    /// Print the source of one program.
    Show { name: String },
}

#[derive(Args)]
struct Output {
    /// Print the JSON report instead of tables.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    /// A TIR file, `-` for stdin, or `corpus:NAME`.
    input: String,
    #[arg(long, default_value_t = 512)]
    cache_lines: usize,
    /// Cache line size in bytes.
    #[arg(long, default_value_t = 64)]
    cls: u64,
    #[arg(long, default_value_t = 1)]
    hit_cost: u64,
    #[arg(long, default_value_t = 100)]
    miss_cost: u64,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct Repair {
    /// byte, line, preload or first-iter.
    #[arg(long, default_value = "first-iter")]
    strategy: Strategy,
    /// Repair every sensitive access, even those that must hit.
    #[arg(long)]
    no_cache_opt: bool,
    /// native or bitwise.
    #[arg(long, default_value = "native")]
    ctsel_mode: CtselMode,
}

impl Default for Repair {
    fn default() -> Self {
        Repair { strategy: Strategy::default(), no_cache_opt: false, ctsel_mode: CtselMode::default() }
    }
}

#[derive(Args)]
struct Sampling {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trials: Option<usize>,
}

fn config(c: &Common, r: &Repair, s: Option<&Sampling>, output: Option<PathBuf>) -> ctmit::Result<PipelineConfig> {
    let cfg = PipelineConfig {
        input: c.input.clone(),
        cache: CacheConfig::new(c.cache_lines, c.cls)?,
        cost: CostModel { hit: c.hit_cost, miss: c.miss_cost, ..Default::default() },
        strategy: r.strategy,
        ctsel: r.ctsel_mode,
        optimize: !r.no_cache_opt,
        seed: s.map_or(0, |s| s.seed),
        trials: s.and_then(|s| s.trials),
        output,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn emit(o: &Outcome, out: &Output) -> ctmit::Result<()> {
    let text = serde_json::to_string_pretty(&o.json).expect("serializable") + "\n";
    if let Some(path) = &out.report {
        std::fs::write(path, &text).map_err(|e| ctmit::Error::Input(format!("{}: {e}", path.display())))?;
    }
    if out.json {
        print!("{text}");
    } else {
        print!("{}", o.human);
    }
    Ok(())
}

fn run(cli: Cli) -> ctmit::Result<bool> {
    let outcome = match cli.command {
        Command::Analyze { common } => {
            let o = commands::cmd_analyze(&config(&common, &Repair::default(), None, None)?)?;
            emit(&o, &common.out)?;
            o
        }
        Command::Mitigate { common, repair, output } => {
            let to_stdout = output.is_none();
            let (o, tir) = commands::cmd_mitigate(&config(&common, &repair, None, output)?)?;
            if to_stdout && !common.out.json {
                print!("{tir}");
                eprint!("{}", o.human);
                if let Some(path) = &common.out.report {
                    let text = serde_json::to_string_pretty(&o.json).expect("serializable") + "\n";
                    std::fs::write(path, text).map_err(|e| ctmit::Error::Input(format!("{}: {e}", path.display())))?;
                }
            } else {
                emit(&o, &common.out)?;
            }
            o
        }
        Command::Simulate { common, repair, sampling, inputs, full_trace } => {
            let o = commands::cmd_simulate(&config(&common, &repair, Some(&sampling), None)?, inputs.as_ref(), full_trace)?;
            emit(&o, &common.out)?;
            o
        }
        Command::Check { common, repair, sampling, public, exhaustive, mitigated } => {
            let cfg = config(&common, &repair, Some(&sampling), None)?;
            let o = commands::cmd_check(&cfg, public.as_ref(), exhaustive, mitigated)?;
            emit(&o, &common.out)?;
            o
        }
        Command::Predict { k, n, cls, out } => {
            let o = commands::cmd_predict(k, n, cls)?;
            emit(&o, &out)?;
            o
        }
        Command::Corpus { action: CorpusAction::List { out } } => {
            let o = commands::cmd_corpus_list()?;
            emit(&o, &out)?;
            o
        }
        Command::Corpus { action: CorpusAction::Show { name } } => {
            print!("{}", commands::cmd_corpus_show(&name)?);
            return Ok(false);
        }
    };
    Ok(outcome.leaks)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    };
    let _ = std::io::stdout().flush();
    status
}
