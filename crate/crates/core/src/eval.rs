//! Trajectory evaluation: TUM-format loading, timestamp association, rigid
//! SE(3) alignment, absolute trajectory error (RMSE) and KITTI-style relative
//! pose error over configurable segment lengths.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Translation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::io::IoError;

/// Stamped pose, one trajectory sample.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryPoint {
    pub stamp: f64,
    pub pose: Pose,
}

pub type Trajectory = Vec<TrajectoryPoint>;

/// Poses closer in time than this are considered the same instant when
/// pairing two trajectories.
pub const ASSOCIATION_WINDOW: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("only {found} associated pose pairs, need at least {needed}")]
    TooFewPairs { found: usize, needed: usize },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Reads a TUM trajectory: `timestamp tx ty tz qx qy qz qw` per line.
pub fn read_trajectory(path: &Path) -> Result<Trajectory, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::Io {
        path: path.to_owned(),
        source: e,
    })?;
    let mut out = Trajectory::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::Parse {
                path: path.to_owned(),
                line: idx + 1,
                msg: "expected 8 floats".into(),
            })?;
        if nums.len() != 8 {
            return Err(IoError::Parse {
                path: path.to_owned(),
                line: idx + 1,
                msg: format!("{} fields, expected 8", nums.len()),
            }
            .into());
        }
        let quat = Quaternion::new(nums[7], nums[4], nums[5], nums[6]);
        if (quat.norm() - 1.0).abs() > 1e-3 {
            return Err(IoError::Parse {
                path: path.to_owned(),
                line: idx + 1,
                msg: format!("quaternion norm {} is not 1", quat.norm()),
            }
            .into());
        }
        out.push(TrajectoryPoint {
            stamp: nums[0],
            pose: Pose::from_parts(
                Translation3::new(nums[1], nums[2], nums[3]),
                UnitQuaternion::from_quaternion(quat),
            ),
        });
    }
    Ok(out)
}

/// Pairs trajectory samples by nearest timestamp within `max_dt`; unmatched
/// poses are dropped, each reference sample is used at most once.
pub fn associate(estimate: &Trajectory, reference: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in estimate.iter().enumerate() {
        // Reference is stamp-sorted: binary search the insertion point.
        let pos = reference.partition_point(|r| r.stamp < e.stamp);
        for j in [pos.wrapping_sub(1), pos] {
            if let Some(r) = reference.get(j) {
                let dt = (r.stamp - e.stamp).abs();
                if dt <= max_dt {
                    candidates.push((dt, i, j));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut used_e = vec![false; estimate.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_r[j] {
            used_e[i] = true;
            used_r[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort();
    pairs
}

/// Rigid (no scale) least-squares alignment of `source` onto `target`.
fn align_se3(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Pose {
    let n = source.len() as f64;
    let s_mean = source.iter().sum::<Vector3<f64>>() / n;
    let t_mean = target.iter().sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        cross += (s - s_mean) * (t - t_mean).transpose();
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let d = (v_t.transpose() * u.transpose()).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let rotation_matrix = v_t.transpose() * fix * u.transpose();
    let rotation = UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(rotation_matrix),
    );
    let translation = t_mean - rotation * s_mean;
    Pose::from_parts(Translation3::from(translation), rotation)
}

/// Absolute trajectory error: RMSE of position residuals after rigid SE(3)
/// alignment of the estimate onto the reference.
pub fn ate(estimate: &Trajectory, reference: &Trajectory) -> Result<f64, EvalError> {
    let pairs = associate(estimate, reference, ASSOCIATION_WINDOW);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs {
            found: pairs.len(),
            needed: 3,
        });
    }
    let est: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(i, _)| estimate[*i].pose.translation.vector)
        .collect();
    let reference: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(_, j)| reference[*j].pose.translation.vector)
        .collect();
    let alignment = align_se3(&est, &reference);
    let sum_sq: f64 = est
        .iter()
        .zip(&reference)
        .map(|(e, r)| (crate::geometry::transform_point(&alignment, e) - r).norm_squared())
        .sum();
    Ok((sum_sq / est.len() as f64).sqrt())
}

/// Relative pose error outcome: short trajectories where no requested segment
/// fits report "not applicable" rather than a number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RpeResult {
    Percent(f64),
    NotApplicable,
}

impl std::fmt::Display for RpeResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RpeResult::Percent(p) => write!(f, "{p:.4} %"),
            RpeResult::NotApplicable => write!(f, "n.a."),
        }
    }
}

/// KITTI-style relative pose error: for segments of each requested reference
/// arc length starting at every pose, the translational residual of the
/// relative transform divided by the segment's arc length, averaged and
/// reported in percent.
pub fn rpe(
    estimate: &Trajectory,
    reference: &Trajectory,
    segment_lengths: &[f64],
) -> Result<RpeResult, EvalError> {
    let pairs = associate(estimate, reference, ASSOCIATION_WINDOW);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs {
            found: pairs.len(),
            needed: 2,
        });
    }
    let est: Vec<Pose> = pairs.iter().map(|(i, _)| estimate[*i].pose).collect();
    let refp: Vec<Pose> = pairs.iter().map(|(_, j)| reference[*j].pose).collect();

    // Cumulative arc length along the reference.
    let mut dist = Vec::with_capacity(refp.len());
    dist.push(0.0);
    for w in refp.windows(2) {
        let step = (w[1].translation.vector - w[0].translation.vector).norm();
        dist.push(dist.last().unwrap() + step);
    }

    let mut errors = Vec::new();
    for &length in segment_lengths {
        for start in 0..refp.len() {
            let target = dist[start] + length;
            let end = match dist[start..].iter().position(|&d| d >= target) {
                Some(offset) => start + offset,
                None => continue,
            };
            let arc = dist[end] - dist[start];
            if arc <= 0.0 {
                continue;
            }
            let rel_ref = refp[start].inverse() * refp[end];
            let rel_est = est[start].inverse() * est[end];
            let residual = rel_ref.inverse() * rel_est;
            errors.push(residual.translation.vector.norm() / arc);
        }
    }
    if errors.is_empty() {
        return Ok(RpeResult::NotApplicable);
    }
    Ok(RpeResult::Percent(
        100.0 * errors.iter().sum::<f64>() / errors.len() as f64,
    ))
}
