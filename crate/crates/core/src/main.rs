use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use gbpstack::environment::{FieldParams, SignalField};
use gbpstack::experiments::{execute, parse_override, Experiment, ExperimentError, Plan};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "gbpstack", version, about = "Multi-robot exploration with layered Gaussian belief propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment sweep and write CSV results.
    Run {
        /// source-seek, coverage, rc-sweep or comms-failure.
        #[arg(value_parser = |s: &str| s.parse::<Experiment>())]
        experiment: Experiment,
        /// JSON object of config keys; array values define sweep axes.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory; defaults to results/<experiment>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// key=value, applied after the config file. `a,b` sweeps.
        #[arg(long = "override", value_parser = parse_override)]
        overrides: Vec<(String, Value)>,
    },
    /// Print a generated ground-truth field as a text grid.
    ExportField {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100.0)]
        d: f64,
        #[arg(long, default_value_t = 10.0)]
        rd: f64,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: &PathBuf) -> Result<Map<String, Value>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(format!("{}: expected a JSON object", path.display())),
        Err(e) => Err(format!("{}: {e}", path.display())),
    }
}

fn run(
    experiment: Experiment,
    config: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    overrides: Vec<(String, Value)>,
) -> Result<(), (u8, String)> {
    let file = config.as_ref().map(read_config).transpose().map_err(|e| (EXIT_CONFIG, e))?;
    let code = |e: ExperimentError| {
        let code = if e.is_config() {
            EXIT_CONFIG
        } else if e.is_numerical() {
            EXIT_NUMERICAL
        } else {
            EXIT_FAILURE
        };
        (code, e.to_string())
    };
    let plan = Plan::resolve(experiment, file, &overrides, seeds).map_err(code)?;
    let out = out.unwrap_or_else(|| PathBuf::from("results").join(experiment.name()));
    eprintln!(
        "{}: {} cells x {} seeds -> {}",
        experiment.name(),
        plan.cells.len(),
        plan.seeds.len(),
        out.display()
    );
    execute(&plan, &out, |o| {
        let done = o.completion_time.map_or("censored".to_string(), |t| format!("{t:.1} s"));
        eprintln!(
            "  {} seed {}: {done}, coverage {:.6}, rms_psi {:.6}",
            o.cell, o.seed, o.final_coverage, o.final_rms_psi
        );
    })
    .map_err(code)?;
    Ok(())
}

fn export_field(seed: u64, d: f64, rd: f64, out: Option<PathBuf>) -> Result<(), (u8, String)> {
    let field = SignalField::generate(seed, d, rd, &FieldParams::default()).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    let text = field.to_grid_text();
    match out {
        Some(path) => fs::write(&path, text).map_err(|e| (EXIT_FAILURE, format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            experiment,
            config,
            seeds,
            out,
            overrides,
        } => run(experiment, config, seeds, out, overrides),
        Command::ExportField { seed, d, rd, out } => export_field(seed, d, rd, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
