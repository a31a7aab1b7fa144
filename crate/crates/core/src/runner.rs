//! Drives the pipeline over an on-disk dataset: scans in stamp order, IMU
//! samples delivered ahead of each scan exactly as a live system would see
//! them.

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::io::{self, DatasetManifest, IoError};
use crate::odometry::{Config, Pipeline, PipelineError, State};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("dataset has no scans in {dir}")]
    NoScans { dir: String },
}

/// Wall-clock accounting for the throughput report.
#[derive(Debug, Clone, Copy)]
pub struct RunStats {
    pub scans: usize,
    pub total_points: usize,
    pub processing_seconds: f64,
}

impl RunStats {
    pub fn scans_per_second(&self) -> f64 {
        self.scans as f64 / self.processing_seconds.max(1e-12)
    }
}

/// Runs odometry over a dataset directory's manifest; returns the estimated
/// trajectory and timing stats.
pub fn run_dataset(manifest: &DatasetManifest, config: &Config) -> Result<(Vec<State>, RunStats), RunError> {
    let scans = io::list_scans(&manifest.scan_dir)?;
    if scans.is_empty() {
        return Err(RunError::NoScans {
            dir: manifest.scan_dir.display().to_string(),
        });
    }
    let imu = io::load_imu(&manifest.imu_file)?;

    let mut pipeline = Pipeline::new(*config, manifest.extrinsics).map_err(PipelineError::from)?;
    let mut imu_iter = imu.into_iter().peekable();
    let mut stats = RunStats {
        scans: 0,
        total_points: 0,
        processing_seconds: 0.0,
    };

    for (_, path) in &scans {
        let cloud = io::load_scan(path, manifest.stamp_convention)?;
        let Some(t_l) = cloud.max_stamp() else {
            log::warn!("skipping empty scan {}", path.display());
            continue;
        };
        let start = Instant::now();
        while imu_iter.peek().map(|s| s.stamp <= t_l).unwrap_or(false) {
            pipeline.ingest_imu(imu_iter.next().unwrap());
        }
        pipeline.process_scan(&cloud)?;
        stats.processing_seconds += start.elapsed().as_secs_f64();
        stats.scans += 1;
        stats.total_points += cloud.len();
    }
    Ok((pipeline.states().to_vec(), stats))
}

/// Convenience wrapper: run a dataset directory (containing `manifest.cfg`)
/// and write the TUM trajectory.
pub fn run_to_file(data_dir: &Path, config: &Config, output: &Path) -> Result<RunStats, RunError> {
    let manifest = DatasetManifest::load(&data_dir.join("manifest.cfg"))?;
    let (states, stats) = run_dataset(&manifest, config)?;
    io::write_trajectory(&states, output)?;
    Ok(stats)
}
