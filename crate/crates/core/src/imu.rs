//! IMU frontend: transforms raw samples into the body frame (lever-arm and
//! transport-rate compensation), buffers them per LiDAR interval, runs the
//! one-shot bias/orientation initialization, and condenses each interval into
//! the window summary consumed by the motion model and the regularizer.

use std::collections::VecDeque;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{so3_exp, Pose, Rotation};

/// Gravity magnitude, m/s^2. Fixed, not estimated online.
pub const GRAVITY: f64 = 9.81;

/// Gravity vector in the odometry frame (z up, gravity pulls down).
pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

/// One inertial measurement: specific force + angular rate, absolute stamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub stamp: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

/// Mounting transforms; the only user-provided calibration.
#[derive(Debug, Clone, Copy)]
pub struct Extrinsics {
    pub lidar_to_body: Pose,
    pub imu_to_body: Pose,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self {
            lidar_to_body: Pose::identity(),
            imu_to_body: Pose::identity(),
        }
    }
}

/// Constant sensor biases, estimated once and then frozen.
#[derive(Debug, Clone, Copy, Default)]
pub struct BiasEstimate {
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub frozen: bool,
}

/// Per-interval averages of the body-frame IMU stream.
///
/// `mean_accel` is bias- and gravity-compensated (expressed in the body frame
/// at the window start); `mean_raw_accel` is bias-compensated only, gravity
/// still included; `sigma_a` is the spread of the accelerometer magnitude used
/// by the adaptive regularization.
#[derive(Debug, Clone, Copy)]
pub struct ImuWindowSummary {
    pub mean_accel: Vector3<f64>,
    pub mean_gyro: Vector3<f64>,
    pub mean_raw_accel: Vector3<f64>,
    pub sigma_a: f64,
    pub dt: f64,
    pub sample_count: usize,
}

impl ImuWindowSummary {
    pub fn empty(dt: f64) -> Self {
        Self {
            mean_accel: Vector3::zeros(),
            mean_gyro: Vector3::zeros(),
            mean_raw_accel: Vector3::zeros(),
            sigma_a: 0.0,
            dt,
            sample_count: 0,
        }
    }

    /// Previous-window values carried over to a new interval when the cut
    /// came back empty (coasting on the constant-rate assumption).
    pub fn reused_for(&self, dt: f64) -> Self {
        Self { dt, ..*self }
    }
}

#[derive(Debug, Error)]
pub enum ImuError {
    #[error(
        "gravity alignment impossible: mean accelerometer norm {norm:.3} m/s^2 \
         is below 1 m/s^2 (sensor likely reports gravity-free acceleration)"
    )]
    GravityMissing { norm: f64 },
    #[error("initialization window is empty")]
    EmptyWindow,
}

/// Eq.-style body-frame conversion of one raw IMU sample.
///
/// `prev` is the previous *body-frame* sample, used for the backward finite
/// difference estimating the angular acceleration; with no predecessor the
/// transport-rate term involving it is dropped.
pub fn transform_sample_to_body(
    curr: &ImuSample,
    prev: Option<&ImuSample>,
    ext: &Extrinsics,
) -> (ImuSample, bool) {
    let rot = ext.imu_to_body.rotation;
    let lever = ext.imu_to_body.translation.vector;

    let gyro_body = rot * curr.gyro;
    let mut degenerate_gap = false;
    let omega_dot = match prev {
        Some(p) => {
            let gap = curr.stamp - p.stamp;
            if gap > 0.0 {
                (gyro_body - p.gyro) / gap
            } else {
                degenerate_gap = true;
                Vector3::zeros()
            }
        }
        None => Vector3::zeros(),
    };

    let accel_body =
        rot * curr.accel - omega_dot.cross(&lever) - gyro_body.cross(&gyro_body.cross(&lever));

    (
        ImuSample {
            stamp: curr.stamp,
            accel: accel_body,
            gyro: gyro_body,
        },
        degenerate_gap,
    )
}

/// One-shot bias and orientation estimation from a motionless window.
///
/// The gyro bias is the raw mean; the initial orientation is the minimal
/// (zero-yaw) rotation aligning the mean specific force with -g; whatever
/// residual remains after alignment becomes the accelerometer bias.
pub fn initialize(
    window: &[ImuSample],
    gravity: &Vector3<f64>,
) -> Result<(BiasEstimate, Rotation), ImuError> {
    if window.is_empty() {
        return Err(ImuError::EmptyWindow);
    }
    let n = window.len() as f64;
    let gyro_bias = window.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let mean_accel = window.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    if mean_accel.norm() < 1.0 {
        return Err(ImuError::GravityMissing {
            norm: mean_accel.norm(),
        });
    }
    let r0 = align_to_up(&mean_accel, gravity);
    let accel_bias = mean_accel + r0.inverse() * gravity;
    Ok((
        BiasEstimate {
            accel_bias,
            gyro_bias,
            frozen: true,
        },
        r0,
    ))
}

/// Minimal rotation taking `measured` onto the -gravity direction.
pub fn align_to_up(measured: &Vector3<f64>, gravity: &Vector3<f64>) -> Rotation {
    let up = -gravity;
    match Rotation::rotation_between(measured, &up) {
        Some(r) => r,
        // Anti-parallel: flip about any horizontal axis.
        None => so3_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)),
    }
}

/// Condenses the interval's samples into the window summary.
///
/// Orientation inside the window is propagated from `r_start` with the
/// bias-corrected gyro so gravity removal tracks the rotation; set
/// `fixed_orientation` to keep `r_start` for every sample instead.
pub fn summarize_window(
    samples: &[ImuSample],
    bias: &BiasEstimate,
    r_start: &Rotation,
    gravity: &Vector3<f64>,
    t_start: f64,
    t_end: f64,
    fixed_orientation: bool,
) -> ImuWindowSummary {
    let dt = t_end - t_start;
    assert!(dt > 0.0, "window must have positive duration");
    if samples.is_empty() {
        return ImuWindowSummary::empty(dt);
    }

    let n = samples.len() as f64;
    let mut rot = *r_start;
    let mut cursor = t_start;
    let mut sum_accel = Vector3::zeros();
    let mut sum_gyro = Vector3::zeros();
    let mut sum_raw = Vector3::zeros();
    let mut magnitudes = Vec::with_capacity(samples.len());

    for sample in samples {
        let omega = sample.gyro - bias.gyro_bias;
        if !fixed_orientation {
            let gap = (sample.stamp - cursor).max(0.0);
            rot *= so3_exp(&(omega * gap));
            cursor = sample.stamp;
        }
        let raw = sample.accel - bias.accel_bias;
        let compensated = raw + rot.inverse() * gravity;
        sum_accel += compensated;
        sum_gyro += omega;
        sum_raw += raw;
        magnitudes.push(raw.norm());
    }

    let mean_mag = magnitudes.iter().sum::<f64>() / n;
    // Population standard deviation: well defined (zero) at a single sample.
    let var = magnitudes
        .iter()
        .map(|m| (m - mean_mag) * (m - mean_mag))
        .sum::<f64>()
        / n;

    ImuWindowSummary {
        mean_accel: sum_accel / n,
        mean_gyro: sum_gyro / n,
        mean_raw_accel: sum_raw / n,
        sigma_a: var.sqrt(),
        dt,
        sample_count: samples.len(),
    }
}

/// Buffers body-frame samples between LiDAR frames.
///
/// Single writer ([`ImuFrontend::ingest`]) / single consumer
/// ([`ImuFrontend::cut`]); cuts are serialized by `&mut self`.
#[derive(Debug, Default)]
pub struct ImuFrontend {
    extrinsics: Extrinsics,
    buffer: VecDeque<ImuSample>,
    prev_body: Option<ImuSample>,
    /// Samples dropped or degraded: non-increasing stamps, zero gaps.
    pub warnings: u64,
}

impl ImuFrontend {
    pub fn new(extrinsics: Extrinsics) -> Self {
        Self {
            extrinsics,
            ..Default::default()
        }
    }

    /// Transforms a raw sample into the body frame and enqueues it.
    pub fn ingest(&mut self, raw: ImuSample) {
        if let Some(prev) = &self.prev_body {
            if raw.stamp <= prev.stamp {
                self.warnings += 1;
                return;
            }
        }
        let (body, degenerate) = transform_sample_to_body(&raw, self.prev_body.as_ref(), &self.extrinsics);
        if degenerate {
            self.warnings += 1;
        }
        self.prev_body = Some(body);
        self.buffer.push_back(body);
    }

    /// Returns the samples in `(t_prev, t_curr]`, removing them from the
    /// buffer; anything at or before `t_prev` is dropped.
    pub fn cut(&mut self, t_prev: f64, t_curr: f64) -> Vec<ImuSample> {
        assert!(t_prev < t_curr, "cut interval must be forward in time");
        while let Some(front) = self.buffer.front() {
            if front.stamp <= t_prev {
                self.buffer.pop_front();
            } else {
                break;
            }
        }
        let mut out = Vec::new();
        while let Some(front) = self.buffer.front() {
            if front.stamp <= t_curr {
                out.push(*front);
                self.buffer.pop_front();
            } else {
                break;
            }
        }
        out
    }

    /// Drains every buffered sample up to and including `t`. Used once, to
    /// collect the pre-first-scan lead-in for initialization.
    pub fn cut_up_to(&mut self, t: f64) -> Vec<ImuSample> {
        let mut out = Vec::new();
        while let Some(front) = self.buffer.front() {
            if front.stamp <= t {
                out.push(*front);
                self.buffer.pop_front();
            } else {
                break;
            }
        }
        out
    }

    /// Most recent body-frame sample seen so far, if any.
    pub fn latest(&self) -> Option<&ImuSample> {
        self.buffer.back().or(self.prev_body.as_ref())
    }
}
