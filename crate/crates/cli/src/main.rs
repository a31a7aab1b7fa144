//! `lio`: LiDAR-inertial odometry over recorded datasets, synthetic dataset
//! generation, and trajectory evaluation.
//!
//! Exit codes: 0 on success, 1 on data errors, 2 on bad usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use lio_core::eval::{self, RpeResult};
use lio_core::io;
use lio_core::odometry::Config;
use lio_core::runner;
use lio_core::sim::{self, SimConfig, WorldModel};

#[derive(Parser)]
#[command(name = "lio", version, about = "Sensor-agnostic LiDAR-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry over a dataset directory (expects `manifest.cfg` inside).
    Run {
        /// Dataset directory.
        #[arg(long)]
        data_dir: PathBuf,
        /// Optional `key = value` config file overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output trajectory (TUM format).
        #[arg(long)]
        output: PathBuf,
        /// Disable the second (coarser) downsampling stage; useful for
        /// sparse scanners.
        #[arg(long)]
        no_double_downsample: bool,
        /// Disable the adaptive orientation regularization.
        #[arg(long)]
        no_adaptive_regularization: bool,
        /// Integrate IMU samples one by one instead of averaging the window
        /// (also disables the regularization, which needs the averages).
        #[arg(long)]
        no_imu_averaging: bool,
        /// Skip bias/orientation initialization (zero bias, orientation from
        /// a single accelerometer sample).
        #[arg(long)]
        no_init: bool,
    },
    /// Generate a synthetic dataset from a trajectory profile.
    Simulate {
        /// Profile name (stationary|constant_velocity|figure8|aggressive) or
        /// path to a profile spec file.
        #[arg(long)]
        profile: String,
        /// Output dataset directory.
        #[arg(long)]
        output: PathBuf,
        /// Noise seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Duration override, seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Compare two TUM trajectories (estimate against reference).
    Evaluate {
        estimate: PathBuf,
        reference: PathBuf,
        /// RPE segment lengths in meters.
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50,100")]
        segments: Vec<f64>,
        /// Also write machine-readable `metric,value` lines here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LIO_LOG")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            data_dir,
            config,
            output,
            no_double_downsample,
            no_adaptive_regularization,
            no_imu_averaging,
            no_init,
        } => {
            let mut cfg = match &config {
                Some(path) => io::load_config(path).context("loading config")?,
                None => Config::default(),
            };
            if no_double_downsample {
                cfg.double_downsample = false;
            }
            if no_adaptive_regularization {
                cfg.adaptive_regularization = false;
            }
            if no_imu_averaging {
                cfg.average_imu = false;
            }
            if no_init {
                cfg.run_initialization = false;
            }
            let stats = runner::run_to_file(&data_dir, &cfg, &output)
                .with_context(|| format!("running odometry over {}", data_dir.display()))?;
            println!(
                "processed {} scans ({} points) in {:.2} s ({:.1} scans/s) -> {}",
                stats.scans,
                stats.total_points,
                stats.processing_seconds,
                stats.scans_per_second(),
                output.display()
            );
            Ok(())
        }
        Command::Simulate {
            profile,
            output,
            seed,
            duration,
        } => {
            let mut cfg = sim_config(&profile)?;
            if let Some(seed) = seed {
                cfg.noise.seed = seed;
            }
            if let Some(duration) = duration {
                cfg.duration = duration;
            }
            let world = WorldModel::default_room();
            sim::generate_dataset(&cfg, &world, &output)
                .with_context(|| format!("simulating into {}", output.display()))?;
            println!("dataset written to {}", output.display());
            Ok(())
        }
        Command::Evaluate {
            estimate,
            reference,
            segments,
            csv,
        } => {
            let est = eval::read_trajectory(&estimate).context("reading estimate")?;
            let reference = eval::read_trajectory(&reference).context("reading reference")?;
            let ate = eval::ate(&est, &reference).context("computing ATE")?;
            let rpe = eval::rpe(&est, &reference, &segments).context("computing RPE")?;
            println!("ATE (RMSE after rigid SE(3) alignment): {ate:.4} m");
            let segments_text = segments
                .iter()
                .map(|s| format!("{s}"))
                .collect::<Vec<_>>()
                .join(", ");
            match rpe {
                RpeResult::Percent(p) => {
                    println!("RPE (mean translational drift, segments [{segments_text}] m): {p:.2} %")
                }
                RpeResult::NotApplicable => println!(
                    "RPE (segments [{segments_text}] m): n.a. (trajectory shorter than every segment)"
                ),
            }
            if let Some(csv_path) = csv {
                let rpe_value = match rpe {
                    RpeResult::Percent(p) => format!("{p:.6}"),
                    RpeResult::NotApplicable => "n.a.".to_string(),
                };
                std::fs::write(
                    &csv_path,
                    format!("metric,value\nate_rmse_m,{ate:.6}\nrpe_percent,{rpe_value}\n"),
                )
                .with_context(|| format!("writing {}", csv_path.display()))?;
            }
            Ok(())
        }
    }
}

fn sim_config(profile: &str) -> anyhow::Result<SimConfig> {
    let path = Path::new(profile);
    if path.is_file() {
        return Ok(sim::load_profile_spec(path)?);
    }
    SimConfig::named(profile, 0).ok_or_else(|| {
        anyhow::anyhow!(
            "unknown profile `{profile}` (expected a spec file or one of \
             stationary|constant_velocity|figure8|aggressive)"
        )
    })
}
