use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use posefuse::harness::{
    analyze_file, attention_profile, run_pipeline, training_scenes, write_attention_profile, write_results, GeometricConfig,
    HarnessError, Mode, SortKey,
};
use posefuse::neural::{load_weights, save_weights, train, NetworkWeights, NeuralError, TrainConfig};
use posefuse::parallel::Execution;
use posefuse::simulator::{generate_dataset, read_dataset, write_dataset, DatasetTemplate, ScenePair};

#[derive(Parser)]
#[command(
    name = "posefuse",
    version,
    about = "Two-view relative pose with geometric/learned uncertainty fusion"
)]
struct Cli {
    /// Run on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSON lines).
    Simulate {
        /// Scene template; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Geometric solve only.
    Solve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "geo")]
        mode: String,
        /// RANSAC/LM/noise settings.
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the learned branch through the fused loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model in one of the learned modes.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "fused")]
        mode: String,
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sort a results file and smooth its error columns.
    Analyze {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "total_trans_ivar")]
        sort_key: String,
        #[arg(long, default_value_t = 50)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention weight versus spatial distance profile.
    Attnprof {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn data_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(e.to_string())
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, HarnessError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn dataset(path: &Path) -> Result<Vec<ScenePair>, HarnessError> {
    read_dataset(path).map_err(data_err)
}

fn weights(path: &Path) -> Result<NetworkWeights, HarnessError> {
    load_weights(path).map_err(data_err)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::available()
    };
    match cli.command {
        Command::Simulate {
            config,
            count,
            seed,
            out,
        } => {
            let template: DatasetTemplate = read_json(config.as_deref())?;
            let scenes = generate_dataset(&template, count, seed, exec).map_err(data_err)?;
            write_dataset(&out, &scenes).map_err(data_err)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Solve {
            data,
            mode,
            geometry,
            out,
        } => {
            let mode: Mode = mode.parse()?;
            if mode != Mode::Geo {
                return Err(HarnessError::Usage(format!("solve runs mode geo only; use infer for {mode}")));
            }
            let geo: GeometricConfig = read_json(geometry.as_deref())?;
            let rows = run_pipeline(&dataset(&data)?, None, mode, &geo, exec)?;
            write_results(&out, &rows)?;
            let valid = rows.iter().filter(|r| r.geo_valid).count();
            eprintln!("solved {} scenes ({valid} geometric estimates valid)", rows.len());
        }
        Command::Train {
            data,
            config,
            geometry,
            out,
        } => {
            let cfg: TrainConfig = read_json(config.as_deref())?;
            let geo: GeometricConfig = read_json(geometry.as_deref())?;
            let scenes = training_scenes(&dataset(&data)?, &geo, exec);
            let w = train(&scenes, &cfg, exec).map_err(|e| match e {
                NeuralError::NonFiniteLoss { .. } => HarnessError::Numeric(e.to_string()),
                NeuralError::InvalidConfig(_) => HarnessError::Usage(e.to_string()),
                _ => HarnessError::Data(e.to_string()),
            })?;
            save_weights(&out, &w).map_err(data_err)?;
            if let (Some(first), Some(last)) = (w.epoch_losses.first(), w.epoch_losses.last()) {
                eprintln!("trained {} epochs: loss {first:.4} -> {last:.4}", w.epoch_losses.len());
            }
        }
        Command::Infer {
            data,
            weights: wpath,
            mode,
            geometry,
            out,
        } => {
            let mode: Mode = mode.parse()?;
            if !mode.needs_weights() {
                return Err(HarnessError::Usage("infer needs a learned mode; use solve for geo".into()));
            }
            let geo: GeometricConfig = read_json(geometry.as_deref())?;
            let scenes = dataset(&data)?;
            let w = weights(&wpath)?;
            let rows = run_pipeline(&scenes, Some(&w), mode, &geo, exec)?;
            write_results(&out, &rows)?;
            eprintln!("evaluated {} scenes in mode {mode}", rows.len());
        }
        Command::Analyze {
            results,
            sort_key,
            window,
            out,
        } => {
            let key: SortKey = sort_key.parse()?;
            analyze_file(&results, key, window, &out)?;
        }
        Command::Attnprof {
            data,
            weights: wpath,
            out,
        } => {
            let scenes = dataset(&data)?;
            let w = weights(&wpath)?;
            write_attention_profile(&out, &attention_profile(&scenes, &w, exec)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("posefuse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
