//! Per-scan orchestration: owns pose, velocity, bias, acceleration filter and
//! the local map, and sequences preprocess -> summarize -> predict -> deskew
//! -> downsample -> register -> map update -> velocity update.

use nalgebra::{Translation3, Vector3};
use thiserror::Error;

use crate::geometry::{se3_log_translation, Pose};
use crate::imu::{
    self, gravity_vector, BiasEstimate, Extrinsics, ImuError, ImuFrontend, ImuSample,
    ImuWindowSummary,
};
use crate::map::{voxel_downsample, Frame, TimedPointCloud, VoxelMap};
use crate::motion::{deskew, ConstantRateMotion, PiecewiseMotion, WindowMotion};
use crate::registration::{
    register, BodyAccelFilter, RegistrationError, RegularizerInput, SolverConfig,
};

/// Estimator output: body pose in the odometry frame, linear velocity in the
/// odometry frame, scan end stamp.
#[derive(Debug, Clone, Copy)]
pub struct State {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub stamp: f64,
}

/// All tunables, with the single default set used everywhere.
#[derive(Debug, Clone, Copy)]
pub struct Config {
    pub voxel_size: f64,
    pub association_threshold: f64,
    pub max_jerk: f64,
    pub beta0: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub max_points_per_voxel: usize,
    pub double_downsample: bool,
    pub adaptive_regularization: bool,
    pub average_imu: bool,
    pub run_initialization: bool,
    pub convergence_eps: f64,
    pub max_iterations: usize,
    /// Keep the window-start orientation for every sample when averaging
    /// instead of propagating it with the gyro.
    pub fixed_window_orientation: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            association_threshold: 0.5,
            max_jerk: 3.0,
            beta0: 200.0,
            min_range: 1.0,
            max_range: 100.0,
            max_points_per_voxel: 20,
            double_downsample: true,
            adaptive_regularization: true,
            average_imu: true,
            run_initialization: true,
            convergence_eps: 1e-4,
            max_iterations: 500,
            fixed_window_orientation: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("association_threshold {threshold} must not exceed voxel_size {voxel} (nearest-neighbor completeness)")]
    ThresholdExceedsVoxel { threshold: f64, voxel: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("min_range {min} must be below max_range {max}")]
    RangeOrder { min: f64, max: f64 },
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, value) in [
            ("voxel_size", self.voxel_size),
            ("association_threshold", self.association_threshold),
            ("min_range", self.min_range),
            ("max_range", self.max_range),
            ("beta0", self.beta0),
            ("convergence_eps", self.convergence_eps),
            ("max_points_per_voxel", self.max_points_per_voxel as f64),
            ("max_iterations", self.max_iterations as f64),
        ] {
            if !(value > 0.0) {
                return Err(ConfigError::NonPositive { name, value });
            }
        }
        if self.max_jerk < 0.0 {
            return Err(ConfigError::NonPositive {
                name: "max_jerk",
                value: self.max_jerk,
            });
        }
        if self.association_threshold > self.voxel_size {
            return Err(ConfigError::ThresholdExceedsVoxel {
                threshold: self.association_threshold,
                voxel: self.voxel_size,
            });
        }
        if self.min_range >= self.max_range {
            return Err(ConfigError::RangeOrder {
                min: self.min_range,
                max: self.max_range,
            });
        }
        Ok(())
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            association_threshold: self.association_threshold,
            beta0: self.beta0,
            convergence_eps: self.convergence_eps,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scan contains no points")]
    EmptyScan,
    #[error("scan stamp {curr} is not after the previous stamp {prev}")]
    NonMonotonicScan { prev: f64, curr: f64 },
    #[error("initialization failed: {0}")]
    Init(#[from] ImuError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

enum Boot {
    AwaitingFirstScan,
    AwaitingInit {
        first_cloud: TimedPointCloud,
        lead_in: Vec<ImuSample>,
    },
    Running,
}

/// The odometry pipeline. Feed IMU with [`Pipeline::ingest_imu`] and scans in
/// stamp order with [`Pipeline::process_scan`].
///
/// With initialization enabled the first returned state is provisional (the
/// initial orientation is only known once the second frame closes the first
/// IMU window); the recorded trajectory is amended in place, so consumers
/// should read [`Pipeline::states`] rather than keep the first return value.
pub struct Pipeline {
    config: Config,
    gravity: Vector3<f64>,
    frontend: ImuFrontend,
    map: VoxelMap,
    filter: BodyAccelFilter,
    bias: BiasEstimate,
    state: State,
    prev_summary: Option<ImuWindowSummary>,
    boot: Boot,
    states: Vec<State>,
    /// Point stamps found outside their scan interval and clamped.
    pub clamped_stamps: u64,
    last_report: Option<crate::registration::SolveReport>,
    extrinsics: Extrinsics,
}

impl Pipeline {
    pub fn new(config: Config, extrinsics: Extrinsics) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            config,
            gravity: gravity_vector(),
            frontend: ImuFrontend::new(extrinsics),
            map: VoxelMap::new(config.voxel_size, config.max_points_per_voxel),
            filter: BodyAccelFilter::new(config.max_jerk),
            bias: BiasEstimate::default(),
            state: State {
                pose: Pose::identity(),
                velocity: Vector3::zeros(),
                stamp: f64::NEG_INFINITY,
            },
            prev_summary: None,
            boot: Boot::AwaitingFirstScan,
            states: Vec::new(),
            clamped_stamps: 0,
            last_report: None,
            extrinsics,
        })
    }

    pub fn ingest_imu(&mut self, raw: ImuSample) {
        self.frontend.ingest(raw);
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn current(&self) -> &State {
        &self.state
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    /// Solver diagnostics from the most recent registration, if any ran.
    pub fn last_report(&self) -> Option<&crate::registration::SolveReport> {
        self.last_report.as_ref()
    }

    /// Runs the full per-scan pipeline on a sensor-frame cloud.
    pub fn process_scan(&mut self, scan: &TimedPointCloud) -> Result<State, PipelineError> {
        debug_assert_eq!(scan.frame, Frame::Sensor);
        let t_l = scan.max_stamp().ok_or(PipelineError::EmptyScan)?;
        if t_l <= self.state.stamp {
            return Err(PipelineError::NonMonotonicScan {
                prev: self.state.stamp,
                curr: t_l,
            });
        }
        // Occlusion clip around the sensor origin, then into the body frame.
        let body = scan
            .range_clipped(self.config.min_range, self.config.max_range)
            .transformed(&self.extrinsics.lidar_to_body, Frame::Body);

        match std::mem::replace(&mut self.boot, Boot::Running) {
            Boot::AwaitingFirstScan => {
                if self.config.run_initialization {
                    let lead_in = self.frontend.cut_up_to(t_l);
                    self.boot = Boot::AwaitingInit {
                        first_cloud: body,
                        lead_in,
                    };
                    // Provisional: orientation becomes known at the next frame.
                    self.state = State {
                        pose: Pose::identity(),
                        velocity: Vector3::zeros(),
                        stamp: t_l,
                    };
                } else {
                    // No initialization: zero bias, orientation from a single
                    // accelerometer sample if one is available.
                    let rotation = self
                        .frontend
                        .latest()
                        .map(|s| imu::align_to_up(&s.accel, &self.gravity))
                        .unwrap_or_else(crate::geometry::Rotation::identity);
                    self.bias = BiasEstimate {
                        frozen: true,
                        ..Default::default()
                    };
                    let pose = Pose::from_parts(Translation3::identity(), rotation);
                    self.seed_map(&body, &pose);
                    self.state = State {
                        pose,
                        velocity: Vector3::zeros(),
                        stamp: t_l,
                    };
                }
                self.states.push(self.state);
                Ok(self.state)
            }
            Boot::AwaitingInit {
                first_cloud,
                lead_in,
            } => {
                let t_prev = self.state.stamp;
                let mut window = lead_in;
                window.extend(self.frontend.cut(t_prev, t_l));
                let cut_start = window
                    .iter()
                    .position(|s| s.stamp > t_prev)
                    .unwrap_or(window.len());
                let (bias, r0) = imu::initialize(&window, &self.gravity)?;
                self.bias = bias;
                let pose0 = Pose::from_parts(Translation3::identity(), r0);
                self.seed_map(&first_cloud, &pose0);
                // Amend the provisional first state now that orientation is known.
                self.state = State {
                    pose: pose0,
                    velocity: Vector3::zeros(),
                    stamp: t_prev,
                };
                if let Some(first) = self.states.first_mut() {
                    *first = self.state;
                }
                let samples = window.split_off(cut_start);
                self.process_interval(body, &samples, t_prev, t_l)
            }
            Boot::Running => {
                let t_prev = self.state.stamp;
                let samples = self.frontend.cut(t_prev, t_l);
                self.process_interval(body, &samples, t_prev, t_l)
            }
        }
    }

    fn seed_map(&mut self, body_cloud: &TimedPointCloud, pose: &Pose) {
        let merged = voxel_downsample(body_cloud, 0.5 * self.config.voxel_size);
        self.map.insert(&merged.transformed(pose, Frame::Odometry));
    }

    fn process_interval(
        &mut self,
        body: TimedPointCloud,
        samples: &[ImuSample],
        t_prev: f64,
        t_l: f64,
    ) -> Result<State, PipelineError> {
        let dt = t_l - t_prev;
        let r_prev = self.state.pose.rotation;
        let v_body = r_prev.inverse() * self.state.velocity;

        let (motion, reg_input) = if self.config.average_imu {
            let summary = if samples.is_empty() {
                // Coast on the previous window's rates.
                match &self.prev_summary {
                    Some(prev) => prev.reused_for(dt),
                    None => ImuWindowSummary::empty(dt),
                }
            } else {
                imu::summarize_window(
                    samples,
                    &self.bias,
                    &r_prev,
                    &self.gravity,
                    t_prev,
                    t_l,
                    self.config.fixed_window_orientation,
                )
            };
            self.prev_summary = Some(summary);
            let reg = (self.config.adaptive_regularization && summary.sample_count > 0)
                .then(|| RegularizerInput::from_summary(&summary, self.gravity));
            (
                WindowMotion::Averaged(ConstantRateMotion::from_summary(&summary, v_body)),
                reg,
            )
        } else {
            // Per-sample integration; sigma_a is unavailable on this path, so
            // the regularizer is off as well.
            (
                WindowMotion::PerSample(PiecewiseMotion::integrate(
                    samples,
                    &self.bias,
                    &r_prev,
                    &self.gravity,
                    v_body,
                    t_prev,
                    t_l,
                )),
                None,
            )
        };

        let prediction = self.state.pose * motion.relative().pose();

        if body.is_empty() {
            // Nothing survived clipping: prediction-only state.
            let state = State {
                pose: prediction,
                velocity: update_velocity(&self.state.pose, &prediction, dt),
                stamp: t_l,
            };
            self.state = state;
            self.states.push(state);
            return Ok(state);
        }

        let (deskewed, clamped) = deskew(&body, &motion, t_prev);
        self.clamped_stamps += clamped as u64;
        if clamped > 0 {
            log::warn!("{clamped} point stamps outside ({t_prev}, {t_l}] clamped");
        }

        let merged = voxel_downsample(&deskewed, 0.5 * self.config.voxel_size);
        let source = if self.config.double_downsample {
            voxel_downsample(&merged, 1.5 * self.config.voxel_size)
        } else {
            merged.clone()
        };

        let reg = reg_input.as_ref().map(|input| (input, dt));
        let (pose, report) = register(
            &source,
            &self.map,
            &prediction,
            reg,
            &mut self.filter,
            &self.config.solver(),
        )?;
        self.last_report = Some(report);
        if !report.converged {
            log::debug!(
                "registration stopped after {} iterations (|C| = {}, |dx| = {:.3e})",
                report.iterations,
                report.correspondence_count,
                report.delta_norm
            );
        }

        self.map.insert(&merged.transformed(&pose, Frame::Odometry));
        self.map
            .crop(&pose.translation.vector, self.config.max_range);

        let state = State {
            pose,
            velocity: update_velocity(&self.state.pose, &pose, dt),
            stamp: t_l,
        };
        self.state = state;
        self.states.push(state);
        Ok(state)
    }
}

/// Velocity from consecutive poses: translational SE(3) log of the relative
/// pose over `dt`, rotated from the previous body frame into the odometry
/// frame.
pub fn update_velocity(prev: &Pose, curr: &Pose, dt: f64) -> Vector3<f64> {
    assert!(dt > 0.0);
    prev.rotation * (se3_log_translation(&(prev.inverse() * curr)) / dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, so3_log};
    use approx::assert_relative_eq;

    #[test]
    fn default_config_is_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_threshold_above_voxel() {
        let cfg = Config {
            association_threshold: 2.0,
            ..Config::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::ThresholdExceedsVoxel { .. })
        ));
    }

    #[test]
    fn config_rejects_inverted_ranges() {
        let cfg = Config {
            min_range: 10.0,
            max_range: 5.0,
            ..Config::default()
        };
        assert!(matches!(cfg.validate(), Err(ConfigError::RangeOrder { .. })));
    }

    #[test]
    fn velocity_trivial_cases() {
        let pose = Pose::from_parts(
            Translation3::new(1.0, 2.0, 3.0),
            so3_exp(&Vector3::new(0.2, -0.1, 0.4)),
        );
        assert_eq!(update_velocity(&pose, &pose, 0.5), Vector3::zeros());

        let moved = Pose::from_parts(Translation3::new(0.1, 0.0, 0.0), Default::default());
        assert_relative_eq!(
            update_velocity(&Pose::identity(), &moved, 0.1),
            Vector3::new(1.0, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn velocity_uses_se3_log_not_raw_translation() {
        use std::f64::consts::FRAC_PI_2;
        let curr = Pose::from_parts(
            Translation3::new(1.0, 0.0, 0.0),
            so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2)),
        );
        let v = update_velocity(&Pose::identity(), &curr, 1.0);
        let expected = se3_log_translation(&curr);
        assert_relative_eq!(v, expected, epsilon = 1e-12);
        // The coupling matters: the raw translation would be [1, 0, 0].
        assert!((v - Vector3::new(1.0, 0.0, 0.0)).norm() > 0.1);
    }

    #[test]
    fn velocity_rotates_into_odometry_frame() {
        use std::f64::consts::FRAC_PI_2;
        let prev = Pose::from_parts(
            Translation3::identity(),
            so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2)),
        );
        // Body moves 0.1 m along its own x, which is odometry +y.
        let curr = prev * Pose::from_parts(Translation3::new(0.1, 0.0, 0.0), Default::default());
        let v = update_velocity(&prev, &curr, 0.1);
        assert_relative_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    fn room_scan(pose: &Pose, stamp: f64) -> TimedPointCloud {
        // Synthetic box room sampled from the sensor's viewpoint: directions
        // to fixed wall points, expressed in the sensor frame.
        let mut cloud = TimedPointCloud::new(Frame::Sensor);
        let walls = [
            (10.0, -1), // +x wall
            (-10.0, -1),
            (8.0, 1), // +y wall
            (-8.0, 1),
        ];
        for (w, axis) in walls {
            for a in -20..=20 {
                for b in 0..=4 {
                    let (u, v) = (a as f64 * 0.4, b as f64 * 0.8);
                    let world = if axis == -1 {
                        Vector3::new(w, u, v)
                    } else {
                        Vector3::new(u, w, v)
                    };
                    cloud.push(crate::geometry::transform_point(&pose.inverse(), &world), stamp);
                }
            }
        }
        cloud
    }

    fn stationary_imu(t: f64) -> ImuSample {
        ImuSample {
            stamp: t,
            accel: Vector3::new(0.0, 0.0, crate::imu::GRAVITY),
            gyro: Vector3::zeros(),
        }
    }

    #[test]
    fn stationary_platform_stays_put() {
        let mut pipeline = Pipeline::new(Config::default(), Extrinsics::default()).unwrap();
        let mut t_imu = 0.0;
        for scan_idx in 0..10 {
            let t_scan = 0.5 + scan_idx as f64 * 0.1;
            while t_imu <= t_scan {
                pipeline.ingest_imu(stationary_imu(t_imu));
                t_imu += 0.01;
            }
            let scan = room_scan(&Pose::identity(), t_scan);
            let state = pipeline.process_scan(&scan).unwrap();
            assert_eq!(state.stamp, t_scan);
        }
        let last = pipeline.states().last().unwrap();
        assert!(
            last.pose.translation.vector.norm() < 1e-3,
            "drifted {} m while stationary",
            last.pose.translation.vector.norm()
        );
        assert!(so3_log(&last.pose.rotation).norm() < 1e-3);
        assert!(last.velocity.norm() < 0.02);
    }

    #[test]
    fn repeated_scan_is_a_fixed_point() {
        let mut pipeline = Pipeline::new(
            Config {
                run_initialization: false,
                ..Config::default()
            },
            Extrinsics::default(),
        )
        .unwrap();
        for scan_idx in 0..5 {
            let t_scan = 0.1 + scan_idx as f64 * 0.1;
            for k in 0..10 {
                pipeline.ingest_imu(stationary_imu(t_scan - 0.1 + k as f64 * 0.01));
            }
            pipeline
                .process_scan(&room_scan(&Pose::identity(), t_scan))
                .unwrap();
        }
        let states = pipeline.states();
        let delta = states[4].pose.inverse() * states[3].pose;
        assert!(delta.translation.vector.norm() < 1e-3);
    }

    #[test]
    fn empty_scan_is_an_error() {
        let mut pipeline = Pipeline::new(Config::default(), Extrinsics::default()).unwrap();
        assert!(matches!(
            pipeline.process_scan(&TimedPointCloud::new(Frame::Sensor)),
            Err(PipelineError::EmptyScan)
        ));
    }

    #[test]
    fn non_monotonic_scan_is_an_error() {
        let mut pipeline = Pipeline::new(
            Config {
                run_initialization: false,
                ..Config::default()
            },
            Extrinsics::default(),
        )
        .unwrap();
        pipeline
            .process_scan(&room_scan(&Pose::identity(), 1.0))
            .unwrap();
        assert!(matches!(
            pipeline.process_scan(&room_scan(&Pose::identity(), 0.5)),
            Err(PipelineError::NonMonotonicScan { .. })
        ));
    }

    #[test]
    fn first_state_amended_after_initialization() {
        let mut pipeline = Pipeline::new(Config::default(), Extrinsics::default()).unwrap();
        // Tilted stationary platform: specific force R^T(-g).
        let tilt = so3_exp(&Vector3::new(0.1, 0.0, 0.0));
        let accel = tilt.inverse() * -gravity_vector();
        let imu = |t: f64| ImuSample {
            stamp: t,
            accel,
            gyro: Vector3::zeros(),
        };
        let pose_w = Pose::from_parts(Translation3::identity(), tilt);
        for k in 0..20 {
            pipeline.ingest_imu(imu(k as f64 * 0.01));
        }
        pipeline.process_scan(&room_scan(&pose_w, 0.2)).unwrap();
        for k in 20..31 {
            pipeline.ingest_imu(imu(k as f64 * 0.01));
        }
        pipeline.process_scan(&room_scan(&pose_w, 0.3)).unwrap();
        let first = &pipeline.states()[0];
        let err = so3_log(&(first.pose.rotation.inverse() * tilt)).norm();
        assert!(err < 1e-6, "initial orientation error {err}");
    }
}
