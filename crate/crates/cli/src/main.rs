mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, LevelFilter};
use thiserror::Error;

use config::{ConfigArgs, ExperimentConfig, LogLevel};
use pipeline::{AuditReport, ModelArtifact};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unreadable artifact: {0}")]
    Artifact(String),
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Artifact(_) => 2,
            CliError::Io(_) | CliError::Numerical(_) => 1,
        }
    }
}

/// Quasi-periodic tori of Hamiltonian lattice equations.
#[derive(Parser, Debug)]
#[command(name = "kamtori", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normal form, KAM iteration, torus and audits; writes every artifact.
    Run(ConfigArgs),
    /// Recompute the audits of a finished run from its artifacts.
    Replay {
        /// Directory holding model.json, normal_form.json and torus.json.
        dir: PathBuf,
        /// Override the recorded `verify` flag.
        #[arg(long)]
        verify: Option<bool>,
        /// Also write the recomputed report here as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = LogLevel::Normal)]
        log_level: LogLevel,
    },
    /// Small divisors at the unperturbed frequencies.
    ScanDivisors(ConfigArgs),
    /// Birkhoff normal form only.
    NormalForm(ConfigArgs),
    /// Runtime checks of the structural hypotheses.
    CheckAssumptions(ConfigArgs),
}

fn init_logging(level: LogLevel) {
    let filter = match level {
        LogLevel::Quiet => LevelFilter::Warn,
        LogLevel::Normal => LevelFilter::Info,
        LogLevel::Debug => LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(filter).format_timestamp(None).try_init();
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let cfg = args.resolve()?;
    init_logging(cfg.log_level);
    info!("config hash {}", cfg.hash());
    Ok(cfg)
}

fn print_report(report: &AuditReport) {
    if !report.enabled {
        println!("verification disabled");
        return;
    }
    for c in &report.checks {
        let value = c.value.map_or("n/a".to_string(), |v| format!("{v:.3e}"));
        let op = match c.bound {
            pipeline::Bound::AtMost => "<=",
            pipeline::Bound::AtLeast => ">=",
        };
        println!("{} {:<28} {value} {op} {:.3e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.threshold);
    }
}

fn exit_for(report: &AuditReport) -> u8 {
    if report.passed {
        0
    } else {
        1
    }
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = resolve(&args)?;
            let out = pipeline::run_experiment(&cfg)?;
            print_report(&out.report);
            println!("artifacts in {}", out.dir.display());
            Ok(exit_for(&out.report))
        }
        Command::Replay { dir, verify, report: out, log_level } => {
            init_logging(log_level);
            let (cfg, report) = pipeline::replay(&dir, verify)?;
            info!("replayed run {}", cfg.hash());
            print_report(&report);
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
                std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
            Ok(exit_for(&report))
        }
        Command::ScanDivisors(args) => {
            let cfg = resolve(&args)?;
            let scan = pipeline::scan_divisors(&cfg)?;
            for r in &scan.rows {
                println!(
                    "K={:<4} tangent {:.3e} {:?}  first {:.3e} {:?}/{}  second {:.3e} {:?}/{:?}",
                    r.k_max, r.min_tangent, r.tangent_mode, r.min_first, r.first_mode, r.first_site, r.min_second, r.second_mode, r.second_sites
                );
            }
            let mut passed = true;
            if let Some(nr) = &scan.nonresonance {
                println!("cubic {:.3e} {:?}  quartic {:.3e} {:?}  floor {:.1e}", nr.min_cubic, nr.cubic_tuple, nr.min_quartic, nr.quartic_tuple, nr.floor);
                passed = nr.passed;
            }
            let dir = cfg.output_path();
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            pipeline::write_json(&dir, "divisors.json", &cfg, &scan)?;
            Ok(if passed { 0 } else { 1 })
        }
        Command::NormalForm(args) => {
            let cfg = resolve(&args)?;
            let prep = pipeline::build_normal_form(&cfg)?;
            let pkg = &prep.package;
            println!("omega0 {:?}", pkg.frequencies.tangent_base);
            println!("twist det {:.6e}, reduced terms {}", pkg.twist_det, pkg.reduced.len());
            let dir = cfg.output_path();
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            pipeline::write_json(&dir, pipeline::MODEL_FILE, &cfg, ModelArtifact { model: prep.model.clone() })?;
            pipeline::write_json(&dir, pipeline::NORMAL_FORM_FILE, &cfg, pkg)?;
            Ok(0)
        }
        Command::CheckAssumptions(args) => {
            let cfg = resolve(&args)?;
            let (_, report) = pipeline::assumptions(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?);
            let dir = cfg.output_path();
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            pipeline::write_json(&dir, "assumptions.json", &cfg, &report)?;
            Ok(if report.passed { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            init_logging(LogLevel::Normal);
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
