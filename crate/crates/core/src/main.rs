use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use iskf::experiment::{
    bench_filters, run_experiment, ExperimentConfig, FilterSpec, GridConfig, ModelSource, Seeds,
    Tolerances, Variant,
};
use iskf::io::{self, IoError, OutputFormat};
use iskf::tune::ScoringMode;
use iskf::{simulate, IskfError, SystemModel};

#[derive(Parser)]
#[command(name = "iskf", version, about = "Outlier-robust Kalman filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Example {
    Vehicle,
    Cstr,
}

impl Example {
    fn name(self) -> &'static str {
        match self {
            Example::Vehicle => "vehicle",
            Example::Cstr => "cstr",
        }
    }

    fn source(self) -> ModelSource {
        match self {
            Example::Vehicle => ModelSource::Vehicle { h: 0.05, gamma: 0.05 },
            Example::Cstr => ModelSource::Cstr { h: 0.05 },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Structured,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Structured => OutputFormat::Structured,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scoring {
    PredictedMeasurement,
    State,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trajectory from a benchmark or a JSON model file.
    Simulate {
        #[arg(long, value_enum, conflicts_with = "model")]
        example: Option<Example>,
        /// JSON file with "A", "C", "F", "G" (Gaussian noise).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment described by a JSON config (or a previous manifest).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the test seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Grid-search the ISKF thresholds for one iteration count.
    Tune {
        #[arg(long, value_enum, default_value = "vehicle")]
        example: Example,
        #[arg(long, default_value_t = 1)]
        k_tilde: usize,
        /// Also search the step size.
        #[arg(long)]
        tune_eta: bool,
        #[arg(long, value_enum, default_value = "predicted-measurement")]
        scoring: Scoring,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed_tune: u64,
        #[arg(long, default_value_t = 42)]
        seed_test: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Full benchmark comparison: tuned KF, ISKF, Huberized reference,
    /// iteration sweep and step-size study.
    Reproduce {
        #[arg(long, value_enum)]
        example: Example,
        #[arg(long, default_value_t = 0)]
        seed_tune: u64,
        #[arg(long, default_value_t = 42)]
        seed_test: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Per-step timing of the full ISKF against the steady-state ISKF.
    Bench {
        /// State dimensions to time.
        #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100])]
        n: Vec<usize>,
        /// Measurement dimension; defaults to max(1, n / 10).
        #[arg(long)]
        p: Option<usize>,
        #[arg(long, default_value_t = 2)]
        k_tilde: usize,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Numerical(String),
    Output(String),
}

impl From<IskfError> for Failure {
    fn from(e: IskfError) -> Self {
        match e {
            IskfError::DimensionMismatch(_) | IskfError::InvalidParameter(_) | IskfError::EmptyInput => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

fn output_err(e: IoError) -> Failure {
    Failure::Output(e.to_string())
}

fn read_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    // A manifest embeds the config it was produced from.
    let value = match value.get("config") {
        Some(inner) if value.get("tool").is_some() => inner.clone(),
        _ => value,
    };
    serde_path_to_error::deserialize(value).map_err(|e| {
        Failure::Config(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner()))
    })
}

fn summarize(report: &iskf::experiment::Report) {
    println!("{:<22} {:>12} {:>10}", "method", "rmse", "improv_%");
    for m in &report.methods {
        let imp = m.improvement_pct.map_or("-".to_string(), |v| format!("{v:.2}"));
        println!("{:<22} {:>12.6} {:>10}", m.label, m.rmse, imp);
    }
    if let Some(s) = &report.sweep {
        println!("sweep ({}):", s.scoring.label());
        for r in &s.rows {
            println!("  k={} rmse={:.6}", r.k_tilde, r.rmse);
        }
    }
    if let Some(s) = &report.step_size {
        println!("step size (k={}):", s.k_tilde);
        for r in &s.rows {
            let eta = r.params.map_or("-".to_string(), |p| format!("{:.4}", p.eta));
            println!(
                "  {:<20} eta={eta} rmse={:.6} rmse_no_outliers={:.6}",
                r.label, r.rmse, r.rmse_no_outliers
            );
        }
    }
    for w in &report.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
}

fn execute(cfg: &ExperimentConfig, out: &Path, format: Format) -> Result<(), Failure> {
    let report = run_experiment(cfg)?;
    io::write_report(out, &report, format.into()).map_err(output_err)?;
    summarize(&report);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Simulate {
            example,
            model,
            steps,
            seed,
            out,
        } => {
            let (model, spec) = match (example, model) {
                (Some(e), None) => e.source().build()?,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                    let m: SystemModel = serde_json::from_str(&text)
                        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                    (m, iskf::OutlierSpec::gaussian())
                }
                _ => return Err(Failure::Config("give --example or --model".into())),
            };
            let traj = simulate(&model, &spec, steps, seed, None)?;
            std::fs::create_dir_all(&out).map_err(|e| output_err(e.into()))?;
            io::write_trajectory_csv(&out.join("trajectory.csv"), &traj).map_err(output_err)?;
            let text = serde_json::to_string_pretty(&model).map_err(|e| output_err(e.into()))?;
            std::fs::write(out.join("model.json"), text + "\n").map_err(|e| output_err(e.into()))?;
            println!("wrote {} steps to {}", traj.len(), out.display());
            Ok(())
        }
        Command::Run {
            config,
            seed,
            out,
            format,
        } => {
            let mut cfg = read_config(&config)?;
            if let Some(seed) = seed {
                cfg.seeds.test = seed;
            }
            execute(&cfg, &out, format)
        }
        Command::Tune {
            example,
            k_tilde,
            tune_eta,
            scoring,
            steps,
            seed_tune,
            seed_test,
            out,
            format,
        } => {
            let cfg = ExperimentConfig {
                model: example.source(),
                outliers: None,
                steps,
                seeds: Seeds {
                    tune: seed_tune,
                    test: seed_test,
                },
                trajectory_file: None,
                filters: vec![
                    FilterSpec::Kf {
                        variant: Variant::Steady,
                    },
                    FilterSpec::Iskf {
                        k_tilde,
                        lambda_x: None,
                        lambda_y: None,
                        eta: 1.0,
                        tune_eta,
                        variant: Variant::Steady,
                    },
                ],
                grid: GridConfig::default(),
                scoring: match scoring {
                    Scoring::PredictedMeasurement => ScoringMode::PredictedMeasurement,
                    Scoring::State => ScoringMode::State,
                },
                sweep: None,
                step_size_study: None,
                tolerances: Tolerances::default(),
            };
            execute(&cfg, &out, format)
        }
        Command::Reproduce {
            example,
            seed_tune,
            seed_test,
            out,
            format,
        } => execute(
            &ExperimentConfig::reproduce(example.name(), seed_tune, seed_test)?,
            &out,
            format,
        ),
        Command::Bench {
            n,
            p,
            k_tilde,
            steps,
            seed,
        } => {
            for n in n {
                let p = p.unwrap_or((n / 10).max(1));
                let row = bench_filters(n, p, k_tilde, steps, seed)?;
                println!(
                    "n={} p={} k={} steps={} full={:.0}ns steady={:.0}ns ratio={:.2}",
                    row.n, row.p, row.k_tilde, row.steps, row.median_full_ns, row.median_steady_ns, row.ratio
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Output(msg)) => {
            eprintln!("error writing output: {msg}");
            ExitCode::from(1)
        }
    }
}
