//! Scan-to-map ICP with an adaptive accelerometer-based orientation
//! regularization.
//!
//! Per scan, a tiny Kalman filter tracks the true body acceleration under a
//! bounded-jerk process model; the difference between the averaged raw
//! accelerometer reading and that estimate should rotate onto -g, which adds
//! an orientation cost to the ICP least squares, weighted by 1/beta with
//! beta = beta0 * (1 + sigma_a^2) so noisy or model-violating intervals trust
//! the LiDAR more.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{se3_boxplus, skew, transform_point, Pose};
use crate::imu::ImuWindowSummary;
use crate::map::{SearchRadiusError, TimedPointCloud, VoxelMap};

/// Kalman filter over the body acceleration, isotropic covariance blocks.
#[derive(Debug, Clone)]
pub struct BodyAccelFilter {
    pub accel: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub max_jerk: f64,
}

/// Floor on the measurement covariance so a perfectly constant accelerometer
/// magnitude (sigma_a = 0) cannot make the innovation covariance singular.
const MEASUREMENT_COV_FLOOR: f64 = 1e-6;

impl BodyAccelFilter {
    pub fn new(max_jerk: f64) -> Self {
        Self {
            accel: Vector3::zeros(),
            covariance: Matrix3::identity(),
            max_jerk,
        }
    }

    /// Constant-acceleration prediction; jerk uniform over `[-j, j]` adds
    /// `(j^2 dt^2 / 3) I` of process noise.
    pub fn predict(&mut self, dt: f64) {
        assert!(dt > 0.0);
        let q = self.max_jerk * self.max_jerk * dt * dt / 3.0;
        self.covariance += q * Matrix3::identity();
    }

    /// Measurement update with the window's mean acceleration; measurement
    /// covariance `(sigma_a^2 / 3) I`, floored.
    pub fn update(&mut self, measurement: &Vector3<f64>, sigma_a: f64) {
        assert!(sigma_a >= 0.0);
        let r = (sigma_a * sigma_a / 3.0).max(MEASUREMENT_COV_FLOOR);
        let innovation_cov = self.covariance + r * Matrix3::identity();
        let gain = self.covariance
            * innovation_cov
                .try_inverse()
                .expect("innovation covariance is floored positive definite");
        self.accel += gain * (measurement - self.accel);
        // Joseph form keeps the posterior symmetric PSD.
        let a = Matrix3::identity() - gain;
        let updated = a * self.covariance * a.transpose() + gain * (r * Matrix3::identity()) * gain.transpose();
        self.covariance = 0.5 * (updated + updated.transpose());
    }
}

/// beta = beta0 * (1 + sigma_a^2); beta0 is the minimum regularization.
pub fn compute_beta(beta0: f64, sigma_a: f64) -> f64 {
    assert!(beta0 > 0.0 && sigma_a >= 0.0);
    beta0 * (1.0 + sigma_a * sigma_a)
}

/// Orientation residual `R (z_a - a_b) + g`: zero when the pose's rotation
/// maps the gravity-dominated accelerometer mean onto -g.
pub fn orientation_residual(
    rotation: &crate::geometry::Rotation,
    mean_raw_accel: &Vector3<f64>,
    body_accel: &Vector3<f64>,
    gravity: &Vector3<f64>,
) -> Vector3<f64> {
    rotation * (mean_raw_accel - body_accel) + gravity
}

/// Inputs the regularizer needs from the IMU window.
#[derive(Debug, Clone, Copy)]
pub struct RegularizerInput {
    pub mean_accel: Vector3<f64>,
    pub mean_raw_accel: Vector3<f64>,
    pub sigma_a: f64,
    pub gravity: Vector3<f64>,
}

impl RegularizerInput {
    pub fn from_summary(summary: &ImuWindowSummary, gravity: Vector3<f64>) -> Self {
        Self {
            mean_accel: summary.mean_accel,
            mean_raw_accel: summary.mean_raw_accel,
            sigma_a: summary.sigma_a,
            gravity,
        }
    }
}

/// One source/map pair; the source point is in the body frame.
pub type Correspondence = (Vector3<f64>, Vector3<f64>);

/// Assembled normal equations plus the cost they linearize.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub hessian: Matrix6<f64>,
    pub gradient: Vector6<f64>,
    pub cost: f64,
}

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("no correspondences: the system is degenerate")]
    DegenerateSystem,
    #[error(transparent)]
    SearchRadius(#[from] SearchRadiusError),
}

/// Builds the combined Gauss-Newton system.
///
/// ICP block: residual `T q - m`, Jacobian `[I | -R [q]x]` (boxplus
/// convention from [`crate::geometry`]), accumulated as a mean over the
/// correspondence set. Orientation block: Jacobian `-R [(z_a - a_b)]x` on the
/// rotation only, weighted by `1/beta`.
pub fn build_system(
    correspondences: &[Correspondence],
    pose: &Pose,
    regularizer: Option<(&RegularizerInput, &Vector3<f64>, f64)>,
) -> Result<LinearSystem, RegistrationError> {
    if correspondences.is_empty() {
        return Err(RegistrationError::DegenerateSystem);
    }
    let rot = pose.rotation.to_rotation_matrix().into_inner();
    // J = [I | -R [q]x]; accumulate J^T J and J^T r blockwise.
    let mut h_tr = Matrix3::zeros();
    let mut h_rr = Matrix3::zeros();
    let mut b_t = Vector3::zeros();
    let mut b_r = Vector3::zeros();
    let mut cost = 0.0;

    for (source, target) in correspondences {
        let residual = transform_point(pose, source) - target;
        let j_rot = -rot * skew(source);
        h_tr += j_rot;
        h_rr += j_rot.transpose() * j_rot;
        b_t += residual;
        b_r += j_rot.transpose() * residual;
        cost += residual.norm_squared();
    }
    let inv_count = 1.0 / correspondences.len() as f64;
    // The translation-translation block is |C| identity summands, its mean is
    // exactly the identity.
    let h_tt = Matrix3::identity();
    h_tr *= inv_count;
    h_rr *= inv_count;
    b_t *= inv_count;
    b_r *= inv_count;
    cost *= inv_count;

    if let Some((input, body_accel, beta)) = regularizer {
        let weight = 1.0 / beta;
        if weight > 0.0 {
            let residual = orientation_residual(
                &pose.rotation,
                &input.mean_raw_accel,
                body_accel,
                &input.gravity,
            );
            let j_rot = -rot * skew(&(input.mean_raw_accel - body_accel));
            h_rr += weight * j_rot.transpose() * j_rot;
            b_r += weight * j_rot.transpose() * residual;
            cost += weight * residual.norm_squared();
        }
    }

    let mut hessian = Matrix6::zeros();
    hessian.fixed_view_mut::<3, 3>(0, 0).copy_from(&h_tt);
    hessian.fixed_view_mut::<3, 3>(0, 3).copy_from(&h_tr);
    hessian
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&h_tr.transpose());
    hessian.fixed_view_mut::<3, 3>(3, 3).copy_from(&h_rr);
    let mut gradient = Vector6::zeros();
    gradient.fixed_view_mut::<3, 1>(0, 0).copy_from(&b_t);
    gradient.fixed_view_mut::<3, 1>(3, 0).copy_from(&b_r);

    Ok(LinearSystem {
        hessian,
        gradient,
        cost,
    })
}

/// Diagnostics from one registration.
#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_cost: f64,
    pub correspondence_count: usize,
    pub converged: bool,
    pub delta_norm: f64,
}

/// Knobs the solver needs; a checked subset of the full pipeline config.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub association_threshold: f64,
    pub beta0: f64,
    pub convergence_eps: f64,
    pub max_iterations: usize,
}

/// Registers `source` (body frame, deskewed) against the map from the initial
/// guess.
///
/// When `regularizer` is present the acceleration filter is advanced once
/// (predict + update) before iterating and the orientation cost joins the
/// system with the adaptive beta; otherwise it is pure point-to-point ICP.
/// Correspondences are recomputed every iteration with the fixed threshold.
pub fn register(
    source: &TimedPointCloud,
    map: &VoxelMap,
    initial: &Pose,
    regularizer: Option<(&RegularizerInput, f64)>,
    filter: &mut BodyAccelFilter,
    config: &SolverConfig,
) -> Result<(Pose, SolveReport), RegistrationError> {
    // Complete-neighborhood precondition, checked once up front.
    if config.association_threshold > map.voxel_size() {
        return Err(SearchRadiusError {
            max_dist: config.association_threshold,
            voxel_size: map.voxel_size(),
        }
        .into());
    }

    let reg_context = regularizer.map(|(input, dt)| {
        filter.predict(dt);
        filter.update(&input.mean_accel, input.sigma_a);
        let beta = compute_beta(config.beta0, input.sigma_a);
        (input, filter.accel, beta)
    });

    let mut pose = *initial;
    let mut report = SolveReport {
        iterations: 0,
        final_cost: f64::INFINITY,
        correspondence_count: 0,
        converged: false,
        delta_norm: f64::INFINITY,
    };
    let mut correspondences: Vec<Correspondence> = Vec::with_capacity(source.len());

    for iteration in 0..config.max_iterations {
        correspondences.clear();
        for point in source.iter() {
            let transformed = transform_point(&pose, &point.position);
            if let Some((map_point, _)) = map
                .nearest_neighbor(&transformed, config.association_threshold)
                .expect("threshold checked against voxel size above")
            {
                correspondences.push((point.position, map_point));
            }
        }
        report.correspondence_count = correspondences.len();
        if correspondences.is_empty() {
            // Nothing to align against: keep the motion-model prediction
            // (pose is still the initial guess on the first iteration).
            report.iterations = iteration + 1;
            return Ok((pose, report));
        }

        let system = build_system(
            &correspondences,
            &pose,
            reg_context
                .as_ref()
                .map(|(input, accel, beta)| (*input, accel, *beta)),
        )?;
        report.final_cost = system.cost;

        let delta = match system.hessian.cholesky() {
            Some(chol) => chol.solve(&(-system.gradient)),
            None => {
                report.iterations = iteration + 1;
                return Ok((pose, report));
            }
        };
        pose = se3_boxplus(&pose, &delta);
        report.iterations = iteration + 1;
        report.delta_norm = delta.norm();
        if report.delta_norm < config.convergence_eps {
            report.converged = true;
            break;
        }
    }
    Ok((pose, report))
}
