use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pathwig_cli::report::RunReport;
use pathwig_cli::run::{self, Case, CommandOutput, PresetOptions, DEFAULT_TOLERANCE};
use pathwig_cli::CliError;

/// Sequential-measurement probabilities from virtual-path sums.
#[derive(Parser, Debug)]
#[command(name = "pathwig", version)]
struct Cli {
    /// Print the report as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Oracle-comparison tolerance.
    #[arg(long, global = true, env = "PATHWIG_TOLERANCE")]
    tolerance: Option<f64>,
    /// Seed for randomized sweeps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Warn about unknown fields instead of rejecting the document.
    #[arg(long, global = true)]
    lenient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct PresetArgs {
    /// Leave F's measurement unregistered.
    #[arg(long)]
    no_register: bool,
    /// Number of record qubits copied from F's probe.
    #[arg(long, default_value_t = 0)]
    chain: usize,
    /// Records W uncomputes before coupling, 1-based, comma separated.
    #[arg(long, value_delimiter = ',')]
    erase: Vec<usize>,
}

impl From<PresetArgs> for PresetOptions {
    fn from(a: PresetArgs) -> Self {
        PresetOptions {
            no_register: a.no_register,
            chain: a.chain,
            erase: a.erase,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full outcome distribution.
    Simulate { file: PathBuf },
    /// Virtual paths ending in a final outcome.
    Paths {
        file: PathBuf,
        #[arg(long = "final")]
        final_outcome: String,
    },
    /// Coherent vs incoherent accounting for a final outcome.
    Interference {
        file: PathBuf,
        #[arg(long = "final")]
        final_outcome: String,
    },
    /// Compare the path engine with the collapse oracle.
    CompareOracle {
        #[arg(required_unless_present = "random")]
        file: Option<PathBuf>,
        /// Compare on this many random protocols instead (see --seed).
        #[arg(long, conflicts_with = "file")]
        random: Option<usize>,
    },
    /// Wigner-Friend preset report.
    Wigner {
        #[arg(long, value_parser = parse_case)]
        case: Case,
        #[command(flatten)]
        preset: PresetArgs,
    },
    /// Write a preset scenario document to stdout.
    EmitPreset {
        #[arg(value_parser = parse_case)]
        name: Case,
        #[command(flatten)]
        preset: PresetArgs,
    },
    /// Re-emit a document in canonical form.
    Normalize { file: PathBuf },
    /// Run the queries listed in a document.
    Run { file: PathBuf },
}

fn parse_case(s: &str) -> Result<Case, String> {
    Case::parse(s).ok_or_else(|| format!("unknown case `{s}` (expected c, d, f or case-c, case-d, case-f)"))
}

fn report(command: &str, source: Option<&PathBuf>, warnings: Vec<String>, results: Vec<pathwig_cli::report::QueryResult>) -> RunReport {
    RunReport {
        command: command.into(),
        source: source.map(|p| p.display().to_string()),
        warnings,
        results,
    }
}

enum Output {
    Report(CommandOutput),
    Text(String),
}

fn execute(cli: Cli) -> Result<Output, CliError> {
    let tolerance = cli.tolerance.unwrap_or(DEFAULT_TOLERANCE);
    let lenient = cli.lenient;
    let out = match cli.command {
        Command::Simulate { file } => {
            let l = run::load(&file, lenient)?;
            let r = run::simulate(&l.protocol)?;
            report("simulate", Some(&file), l.warnings, vec![r]).into()
        }
        Command::Paths { file, final_outcome } => {
            let l = run::load(&file, lenient)?;
            let r = run::paths(&l.protocol, &final_outcome)?;
            report("paths", Some(&file), l.warnings, vec![r]).into()
        }
        Command::Interference { file, final_outcome } => {
            let l = run::load(&file, lenient)?;
            let r = run::interference(&l.protocol, &final_outcome)?;
            report("interference", Some(&file), l.warnings, vec![r]).into()
        }
        Command::CompareOracle { file, random } => match (file, random) {
            (Some(file), _) => {
                let l = run::load(&file, lenient)?;
                let (r, failure) = run::compare_oracle(&l.protocol, tolerance)?;
                CommandOutput {
                    report: report("compare-oracle", Some(&file), l.warnings, vec![r]),
                    failure,
                }
            }
            (None, Some(n)) => {
                let (r, failure) = run::oracle_sweep(n, cli.seed, tolerance)?;
                CommandOutput {
                    report: report("compare-oracle", None, Vec::new(), vec![r]),
                    failure,
                }
            }
            (None, None) => unreachable!("clap requires one"),
        },
        Command::Wigner { case, preset } => {
            let r = run::wigner(case, &preset.into())?;
            report("wigner", None, Vec::new(), vec![r]).into()
        }
        Command::EmitPreset { name, preset } => {
            return Ok(Output::Text(run::preset_document(name, &preset.into())?.to_json()));
        }
        Command::Normalize { file } => {
            let l = run::load(&file, lenient)?;
            for w in &l.warnings {
                eprintln!("warning: {w}");
            }
            return Ok(Output::Text(run::normalize(&l).to_json()));
        }
        Command::Run { file } => {
            let l = run::load(&file, lenient)?;
            let (results, failure) = run::run_queries(&l, tolerance)?;
            CommandOutput {
                report: report("run", Some(&file), l.warnings, results),
                failure,
            }
        }
    };
    Ok(Output::Report(out))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json = cli.json;
    match execute(cli) {
        Ok(Output::Text(t)) => {
            print!("{t}");
            ExitCode::SUCCESS
        }
        Ok(Output::Report(CommandOutput { report, failure })) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if json {
                print!("{}", report.json());
            } else {
                print!("{}", report.human());
            }
            match failure {
                Some(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
