//! Command-line entry point: data generation, training, model comparison,
//! stabilization experiments and key-rate curves.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
//! Failures print one line `error[<category>]: <message>` to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use phasecast::config::{ConfigError, ExperimentConfig};
use phasecast::container::{encode_checkpoint, load_checkpoint, Checkpoint, ContainerError};
use phasecast::controller::{run_experiment, ExperimentMode};
use phasecast::dataset::{load_series, series_to_csv, DatasetError, RawRecord};
use phasecast::io::write_atomic;
use phasecast::metrics::{rate_curve, rate_curve_csv};
use phasecast::pipeline::{self, PipelineError};
use phasecast::training::{loss_history_csv, TrainedModel};

/// Environment variable naming the config file when `--config` is absent.
const CONFIG_ENV: &str = "PHASECAST_CONFIG";
const RESOLVED_CONFIG: &str = "config.resolved.toml";
const CHECKPOINT: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "phasecast", version, about = "Phase-drift forecasting and stabilization experiments")]
struct Cli {
    /// Directory every output path is relative to.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// TOML configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scan-tracked training series as CSV files.
    GenData {
        #[arg(long)]
        sets: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the forecaster; writes a checkpoint and the loss history.
    Train {
        /// Directory of `set_*.csv` files; generated from the config if absent.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Compare the forecaster against polynomial, MLP and RNN baselines.
    Compare {
        /// Series CSV; a drifting series is generated if absent.
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run the stabilization experiment in one or both modes.
    RunExperiment {
        #[arg(long)]
        distance_km: Option<f64>,
        #[arg(long, default_value_t = 2.0)]
        days: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Trained checkpoint; the model is trained from the config if absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Asymptotic secure key rate against distance.
    RateCurve {
        /// Comma-separated distances in km.
        #[arg(long, value_delimiter = ',')]
        distances: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.0)]
        from_km: f64,
        #[arg(long, default_value_t = 200.0)]
        to_km: f64,
        #[arg(long, default_value_t = 10.0)]
        step_km: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Predictive,
    Both,
}

impl From<ModeArg> for ExperimentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => ExperimentMode::Baseline,
            ModeArg::Predictive => ExperimentMode::Predictive,
            ModeArg::Both => ExperimentMode::Both,
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Container(_) => "model",
            CliError::Pipeline(PipelineError::Dataset(_)) => "data",
            CliError::Pipeline(PipelineError::Train(_)) => "train",
            CliError::Pipeline(PipelineError::Baseline(_)) => "compare",
            CliError::Pipeline(PipelineError::Controller(_)) => "experiment",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(explicit: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let path = explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    Ok(match path {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::default(),
    })
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, contents).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let out = Output { dir: cli.out_dir };
    match cli.command {
        Command::GenData { sets, points, seed } => {
            cfg.sets = sets.unwrap_or(cfg.sets);
            cfg.points = points.unwrap_or(cfg.points);
            cfg.validate()?;
            out.write(RESOLVED_CONFIG, cfg.resolved_toml().as_bytes())?;
            for (i, set) in pipeline::training_sets(&cfg, seed).iter().enumerate() {
                out.write(&format!("set_{i:02}.csv"), series_to_csv(set).as_bytes())?;
            }
            println!("wrote {} sets of {} points to {}", cfg.sets, cfg.points, out.dir.display());
        }
        Command::Train { data_dir, epochs, seed } => {
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.validate()?;
            out.write(RESOLVED_CONFIG, cfg.resolved_toml().as_bytes())?;
            let sets = match data_dir {
                Some(dir) => read_sets(&dir)?,
                None => pipeline::training_sets(&cfg, seed),
            };
            let model = train(&cfg, &sets, seed)?;
            out.write(CHECKPOINT, &encode_checkpoint(&Checkpoint::from(&model)))?;
            out.write("loss.csv", loss_history_csv(&model.history).as_bytes())?;
            if let Some(last) = model.history.last() {
                println!("final_loss = {}", last.mean_loss);
            }
        }
        Command::Compare { series, seed } => {
            out.write(RESOLVED_CONFIG, cfg.resolved_toml().as_bytes())?;
            let records = match series {
                Some(p) => load_series(&p)?,
                None => {
                    let s = pipeline::comparison_series(&cfg, seed);
                    out.write("compare_series.csv", series_to_csv(&s).as_bytes())?;
                    s
                }
            };
            let report = pipeline::compare(&cfg, &records, seed)?;
            out.write("rmse.csv", report.rmse_csv().as_bytes())?;
            for m in &report.models {
                out.write(&format!("predictions_{}.csv", m.name), report.predictions_csv(m).as_bytes())?;
            }
            print!("{}", report.rmse_csv());
        }
        Command::RunExperiment {
            distance_km,
            days,
            mode,
            seed,
            model,
        } => {
            if !(days.is_finite() && days > 0.0) {
                return Err(CliError::Usage(format!("--days must be positive, got {days}")));
            }
            cfg.distance_km = distance_km.unwrap_or(cfg.distance_km);
            cfg.validate()?;
            out.write(RESOLVED_CONFIG, cfg.resolved_toml().as_bytes())?;
            let model = match model {
                Some(p) => load_checkpoint(&p)?.into_model(),
                None => {
                    let m = train(&cfg, &pipeline::training_sets(&cfg, seed), seed)?;
                    out.write(CHECKPOINT, &encode_checkpoint(&Checkpoint::from(&m)))?;
                    m
                }
            };
            let scenario = pipeline::scenario(&cfg, days, seed, mode.into());
            let report = run_experiment(&scenario, &model).map_err(PipelineError::from)?;
            for r in [&report.baseline, &report.predictive].into_iter().flatten() {
                out.write(&format!("{}_series.csv", r.mode.name()), r.series_csv().as_bytes())?;
            }
            let summary = report.summary();
            out.write("summary.txt", summary.as_bytes())?;
            print!("{summary}");
        }
        Command::RateCurve {
            distances,
            from_km,
            to_km,
            step_km,
        } => {
            let distances = match distances {
                Some(d) => d,
                None => {
                    if !(step_km > 0.0 && to_km >= from_km && from_km >= 0.0) {
                        return Err(CliError::Usage("need 0 <= --from-km <= --to-km and --step-km > 0".into()));
                    }
                    let n = ((to_km - from_km) / step_km + 1e-9).floor() as usize;
                    (0..=n).map(|k| from_km + k as f64 * step_km).collect()
                }
            };
            if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                return Err(CliError::Usage("distances must be nonnegative".into()));
            }
            out.write(RESOLVED_CONFIG, cfg.resolved_toml().as_bytes())?;
            let csv = rate_curve_csv(&rate_curve(&cfg.optical(), &distances, cfg.f_ec));
            out.write("rate_curve.csv", csv.as_bytes())?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, sets: &[Vec<RawRecord>], seed: u64) -> Result<TrainedModel, CliError> {
    let epochs = cfg.epochs;
    Ok(pipeline::train_on_sets(cfg, sets, seed, |r| {
        if (r.epoch + 1) % 10 == 0 || r.epoch + 1 == epochs {
            eprintln!("epoch {:>4}/{epochs}  lr {:.2e}  loss {:.6}", r.epoch + 1, r.lr, r.mean_loss);
        }
    })?)
}

/// `set_*.csv` files of `dir` in name order.
fn read_sets(dir: &Path) -> Result<Vec<Vec<RawRecord>>, CliError> {
    let io = |source| CliError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("set_") && n.ends_with(".csv"))
    });
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no set_*.csv files in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(load_series(p)?)).collect()
}
