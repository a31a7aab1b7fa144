//! Constant-acceleration / constant-angular-velocity kinematics: relative
//! motion prediction, intermediate poses for deskewing, and the closed-form
//! bound on what the constant-rate assumption can cost per interval.

use nalgebra::{Translation3, Vector3};

use crate::geometry::{so3_exp, Pose, Rotation};
use crate::imu::{BiasEstimate, ImuSample, ImuWindowSummary};
use crate::map::{Frame, TimedPointCloud};

/// Relative pose change over one interval, expressed in the body frame at the
/// window start.
#[derive(Debug, Clone, Copy)]
pub struct RelativeMotion {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    pub dt: f64,
}

impl RelativeMotion {
    pub fn pose(&self) -> Pose {
        Pose::from_parts(Translation3::from(self.translation), self.rotation)
    }
}

/// Single Euler step under constant body rates: the averaged-IMU path.
///
/// `accel` and `v_start` are expressed in the body frame at the window start;
/// `omega` is the body angular velocity.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRateMotion {
    pub accel: Vector3<f64>,
    pub omega: Vector3<f64>,
    pub v_start: Vector3<f64>,
    pub dt: f64,
}

impl ConstantRateMotion {
    pub fn from_summary(summary: &ImuWindowSummary, v_body: Vector3<f64>) -> Self {
        Self {
            accel: summary.mean_accel,
            omega: summary.mean_gyro,
            v_start: v_body,
            dt: summary.dt,
        }
    }

    /// Relative pose from window start to `tau` seconds in; `tau` is clamped
    /// to `[0, dt]`.
    pub fn pose_at(&self, tau: f64) -> Pose {
        let tau = tau.clamp(0.0, self.dt);
        let translation = self.v_start * tau + 0.5 * self.accel * tau * tau;
        Pose::from_parts(Translation3::from(translation), so3_exp(&(self.omega * tau)))
    }

    pub fn relative(&self) -> RelativeMotion {
        RelativeMotion {
            rotation: so3_exp(&(self.omega * self.dt)),
            translation: self.v_start * self.dt + 0.5 * self.accel * self.dt * self.dt,
            dt: self.dt,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    /// Seconds from window start.
    t: f64,
    /// State at segment start, in window-start body coordinates.
    position: Vector3<f64>,
    velocity: Vector3<f64>,
    rotation: Rotation,
    /// Constant rates over this segment: acceleration in window-start
    /// coordinates, angular velocity in the (current) body frame.
    accel: Vector3<f64>,
    omega: Vector3<f64>,
}

impl Segment {
    fn advance(&self, h: f64) -> (Vector3<f64>, Vector3<f64>, Rotation) {
        (
            self.position + self.velocity * h + 0.5 * self.accel * h * h,
            self.velocity + self.accel * h,
            self.rotation * so3_exp(&(self.omega * h)),
        )
    }

    fn pose_at(&self, h: f64) -> Pose {
        let (p, _, r) = self.advance(h);
        Pose::from_parts(Translation3::from(p), r)
    }
}

/// Sample-by-sample Euler integration: the path used when IMU averaging is
/// disabled. Each sample's rates are held constant over the gap preceding it,
/// the last sample extends to the window end.
#[derive(Debug, Clone)]
pub struct PiecewiseMotion {
    segments: Vec<Segment>,
    dt: f64,
}

impl PiecewiseMotion {
    pub fn integrate(
        samples: &[ImuSample],
        bias: &BiasEstimate,
        r_start: &Rotation,
        gravity: &Vector3<f64>,
        v_body: Vector3<f64>,
        t_start: f64,
        t_end: f64,
    ) -> Self {
        let dt = t_end - t_start;
        assert!(dt > 0.0);
        let mut segments = Vec::with_capacity(samples.len().max(1));
        let mut position = Vector3::zeros();
        let mut velocity = v_body;
        let mut rotation = Rotation::identity();
        let mut cursor = 0.0;

        let push_segment = |t: f64,
                                position: &mut Vector3<f64>,
                                velocity: &mut Vector3<f64>,
                                rotation: &mut Rotation,
                                end: f64,
                                sample: &ImuSample| {
            let omega = sample.gyro - bias.gyro_bias;
            let body_rot = *r_start * *rotation;
            let accel_body = sample.accel - bias.accel_bias + body_rot.inverse() * gravity;
            let seg = Segment {
                t,
                position: *position,
                velocity: *velocity,
                rotation: *rotation,
                accel: *rotation * accel_body,
                omega,
            };
            let (p, v, r) = seg.advance(end - t);
            *position = p;
            *velocity = v;
            *rotation = r;
            seg
        };

        for sample in samples {
            let t_rel = (sample.stamp - t_start).clamp(0.0, dt);
            if t_rel <= cursor && !segments.is_empty() {
                continue;
            }
            let seg = push_segment(
                cursor,
                &mut position,
                &mut velocity,
                &mut rotation,
                t_rel,
                sample,
            );
            segments.push(seg);
            cursor = t_rel;
        }
        if let Some(last) = samples.last() {
            if cursor < dt {
                let seg = push_segment(
                    cursor,
                    &mut position,
                    &mut velocity,
                    &mut rotation,
                    dt,
                    last,
                );
                segments.push(seg);
            }
        } else {
            // No samples at all: coast at constant velocity.
            segments.push(Segment {
                t: 0.0,
                position,
                velocity,
                rotation,
                accel: Vector3::zeros(),
                omega: Vector3::zeros(),
            });
        }
        Self { segments, dt }
    }

    pub fn pose_at(&self, tau: f64) -> Pose {
        let tau = tau.clamp(0.0, self.dt);
        let idx = self
            .segments
            .partition_point(|s| s.t <= tau)
            .saturating_sub(1);
        let seg = &self.segments[idx];
        seg.pose_at(tau - seg.t)
    }

    pub fn relative(&self) -> RelativeMotion {
        let end = self.pose_at(self.dt);
        RelativeMotion {
            rotation: end.rotation,
            translation: end.translation.vector,
            dt: self.dt,
        }
    }
}

/// Motion hypothesis over one scan interval, whichever way it was built.
#[derive(Debug, Clone)]
pub enum WindowMotion {
    Averaged(ConstantRateMotion),
    PerSample(PiecewiseMotion),
}

impl WindowMotion {
    pub fn dt(&self) -> f64 {
        match self {
            WindowMotion::Averaged(m) => m.dt,
            WindowMotion::PerSample(m) => m.dt,
        }
    }

    pub fn pose_at(&self, tau: f64) -> Pose {
        match self {
            WindowMotion::Averaged(m) => m.pose_at(tau),
            WindowMotion::PerSample(m) => m.pose_at(tau),
        }
    }

    pub fn relative(&self) -> RelativeMotion {
        match self {
            WindowMotion::Averaged(m) => m.relative(),
            WindowMotion::PerSample(m) => m.relative(),
        }
    }
}

/// Unifies every point at the scan end time by undoing intra-scan motion.
///
/// Points are expected in the body frame at their own stamps, the result is
/// the cloud in the body frame at `t_end = window_start + motion.dt()`.
/// Returns the number of stamps clamped into the window.
pub fn deskew(
    cloud: &TimedPointCloud,
    motion: &WindowMotion,
    window_start: f64,
) -> (TimedPointCloud, usize) {
    let dt = motion.dt();
    let t_end = window_start + dt;
    let end_inv = motion.pose_at(dt).inverse();
    let mut clamped = 0usize;
    let mut out = TimedPointCloud::with_capacity(cloud.len(), Frame::Body);
    for point in cloud.iter() {
        let tau = point.stamp - window_start;
        if !(0.0..=dt).contains(&tau) {
            clamped += 1;
        }
        let correction = end_inv * motion.pose_at(tau);
        out.push(crate::geometry::transform_point(&correction, &point.position), t_end);
    }
    (out, clamped)
}

/// Worst-case position / angle error of the constant-rate model over `dt`
/// given a jerk bound `j` (m/s^3) and angular-acceleration bound `alpha`
/// (rad/s^2): third- and second-order Taylor remainders.
pub fn model_error_bounds(j: f64, alpha: f64, dt: f64) -> (f64, f64) {
    (j * dt.powi(3) / 6.0, alpha * dt * dt / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_log;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn window(accel: [f64; 3], omega: [f64; 3], v: [f64; 3], dt: f64) -> ConstantRateMotion {
        ConstantRateMotion {
            accel: Vector3::from(accel),
            omega: Vector3::from(omega),
            v_start: Vector3::from(v),
            dt,
        }
    }

    #[test]
    fn constant_velocity_step() {
        let m = window([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], 0.1);
        let rel = m.relative();
        assert_relative_eq!(rel.translation, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
        assert_eq!(rel.rotation, Rotation::identity());
    }

    #[test]
    fn half_a_t_squared() {
        let m = window([2.0, 0.0, 0.0], [0.0; 3], [0.0; 3], 0.1);
        assert_relative_eq!(
            m.relative().translation,
            Vector3::new(0.01, 0.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn rotation_integrates_to_quarter_turn() {
        let m = window([0.0; 3], [0.0, 0.0, PI], [0.0; 3], 0.5);
        let expected = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let err = so3_log(&(expected.inverse() * m.relative().rotation)).norm();
        assert!(err < 1e-12);
    }

    #[test]
    fn pose_at_endpoints() {
        let m = window([1.0, -0.5, 0.2], [0.3, 0.1, -0.2], [0.4, 0.0, 0.1], 0.1);
        assert_eq!(m.pose_at(0.0), Pose::identity());
        let full = m.relative();
        let end = m.pose_at(0.1);
        assert_relative_eq!(end.translation.vector, full.translation, epsilon = 1e-15);
    }

    /// Restates the remaining half-window in the frame reached at `tau`;
    /// under constant rates the composition must equal the single step.
    fn second_half(m: &ConstantRateMotion, tau: f64) -> ConstantRateMotion {
        let r_tau = so3_exp(&(m.omega * tau));
        ConstantRateMotion {
            accel: r_tau.inverse() * m.accel,
            omega: m.omega,
            v_start: r_tau.inverse() * (m.v_start + m.accel * tau),
            dt: m.dt - tau,
        }
    }

    #[test]
    fn subdivision_is_exact_for_constant_rates() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let m = window(
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ],
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ],
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
                0.1,
            );
            let tau = rng.random_range(0.01..0.09);
            let composed = m.pose_at(tau) * second_half(&m, tau).relative().pose();
            let single = m.relative().pose();
            let residual = single.inverse() * composed;
            let err = residual.translation.vector.norm() + so3_log(&residual.rotation).norm();
            assert!(err <= 1e-9, "subdivision error {err}");
        }
    }

    #[test]
    fn per_sample_matches_averaged_for_constant_input() {
        // Constant samples: single-step and piecewise integration agree.
        let bias = BiasEstimate::default();
        let g = Vector3::zeros();
        let samples: Vec<_> = (1..=10)
            .map(|k| ImuSample {
                stamp: k as f64 * 0.01,
                accel: Vector3::new(0.5, 0.0, 0.0),
                gyro: Vector3::new(0.0, 0.0, 0.3),
            })
            .collect();
        let piecewise = PiecewiseMotion::integrate(
            &samples,
            &bias,
            &Rotation::identity(),
            &g,
            Vector3::new(0.2, 0.0, 0.0),
            0.0,
            0.1,
        );
        let averaged = window([0.5, 0.0, 0.0], [0.0, 0.0, 0.3], [0.2, 0.0, 0.0], 0.1);
        let (a, b) = (piecewise.relative(), averaged.relative());
        // Piecewise rotates the acceleration segment-by-segment; with a small
        // total rotation (0.03 rad) the two stay within the coupling term.
        assert!((a.translation - b.translation).norm() < 1e-4);
        let err = so3_log(&(a.rotation.inverse() * b.rotation)).norm();
        assert!(err < 1e-12);
    }

    #[test]
    fn deskew_zero_motion_is_identity() {
        let m = WindowMotion::Averaged(window([0.0; 3], [0.0; 3], [0.0; 3], 0.1));
        let mut cloud = TimedPointCloud::new(Frame::Body);
        cloud.push(Vector3::new(1.0, 2.0, 3.0), 0.02);
        cloud.push(Vector3::new(-1.0, 0.5, 0.0), 0.07);
        let (out, clamped) = deskew(&cloud, &m, 0.0);
        assert_eq!(clamped, 0);
        for (a, b) in out.iter().zip(cloud.iter()) {
            assert_relative_eq!(a.position, b.position, epsilon = 1e-15);
            assert_eq!(a.stamp, 0.1);
        }
    }

    #[test]
    fn deskew_point_at_scan_end_unchanged() {
        let m = WindowMotion::Averaged(window([1.0, 0.0, 0.0], [0.0, 0.0, 2.0], [0.5; 3], 0.1));
        let mut cloud = TimedPointCloud::new(Frame::Body);
        cloud.push(Vector3::new(4.0, -2.0, 1.0), 0.1);
        let (out, _) = deskew(&cloud, &m, 0.0);
        assert_relative_eq!(
            out.iter().next().unwrap().position,
            Vector3::new(4.0, -2.0, 1.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn deskew_constant_velocity_shifts_oldest_point() {
        let m = WindowMotion::Averaged(window([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], 0.1));
        let mut cloud = TimedPointCloud::new(Frame::Body);
        let p = Vector3::new(2.0, 1.0, 0.0);
        cloud.push(p, 0.0);
        let (out, _) = deskew(&cloud, &m, 0.0);
        assert_relative_eq!(
            out.iter().next().unwrap().position,
            p - Vector3::new(0.1, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn deskew_matches_composed_intermediate_poses() {
        // Numerical cross-check: T(t_end, t_i) = pose_at(dt)^-1 * pose_at(tau).
        let m = window([0.8, -0.3, 0.1], [0.2, -0.5, 1.0], [0.3, 0.2, -0.1], 0.1);
        let wm = WindowMotion::Averaged(m);
        let mut cloud = TimedPointCloud::new(Frame::Body);
        let p = Vector3::new(5.0, -1.0, 2.0);
        cloud.push(p, 0.04);
        let (out, _) = deskew(&cloud, &wm, 0.0);
        let correction = m.pose_at(0.1).inverse() * m.pose_at(0.04);
        let expected = crate::geometry::transform_point(&correction, &p);
        assert_relative_eq!(out.iter().next().unwrap().position, expected, epsilon = 1e-12);
    }

    #[test]
    fn deskew_of_unified_cloud_is_identity() {
        let m = WindowMotion::Averaged(window([1.0; 3], [0.5; 3], [1.0; 3], 0.1));
        let mut cloud = TimedPointCloud::new(Frame::Body);
        cloud.push(Vector3::new(1.0, 0.0, 0.0), 0.1);
        cloud.push(Vector3::new(0.0, 3.0, -2.0), 0.1);
        let (out, clamped) = deskew(&cloud, &m, 0.0);
        assert_eq!(clamped, 0);
        for (a, b) in out.iter().zip(cloud.iter()) {
            assert_relative_eq!(a.position, b.position, epsilon = 1e-12);
        }
    }

    #[test]
    fn deskew_clamps_out_of_window_stamps() {
        let m = WindowMotion::Averaged(window([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], 0.1));
        let mut cloud = TimedPointCloud::new(Frame::Body);
        cloud.push(Vector3::zeros(), -0.05);
        cloud.push(Vector3::zeros(), 0.2);
        let (_, clamped) = deskew(&cloud, &m, 0.0);
        assert_eq!(clamped, 2);
    }

    #[test]
    fn model_error_bounds_formula() {
        let (pos, ang) = model_error_bounds(3.0, 0.0, 0.1);
        assert_relative_eq!(pos, 0.5e-3, epsilon = 1e-12);
        assert_eq!(ang, 0.0);
        assert_eq!(model_error_bounds(0.0, 0.0, 0.1), (0.0, 0.0));
    }

    #[test]
    fn model_error_bounds_paper_point() {
        let (pos, ang) = model_error_bounds(5.0, 180f64.to_radians(), 0.1);
        assert!((pos * 1e3 - 0.833).abs() < 0.005, "pos {} mm", pos * 1e3);
        assert!((ang.to_degrees() - 0.9).abs() < 0.005, "ang {} deg", ang.to_degrees());
    }
}
