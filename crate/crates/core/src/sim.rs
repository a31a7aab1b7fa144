//! Synthetic-sensor simulator: analytic trajectory profiles with exact
//! derivatives, a closed box world with exact ray intersections, IMU sampling
//! with injectable bias and noise, and dataset emission in the on-disk
//! formats the runner consumes. This is the desk-scale oracle the end-to-end
//! tests run against.

use std::path::Path;

use nalgebra::{Translation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{so3_exp, so3_log, Pose, Rotation};
use crate::imu::{gravity_vector, Extrinsics, ImuSample};
use crate::io::{self, DatasetManifest, IoError, StampConvention};
use crate::map::{Frame, TimedPointCloud};
use crate::odometry::State;

// ---------------------------------------------------------------------------
// trajectory profiles

/// Smooth start: parked until `lead_in`, rate ramps 0 -> 1 over `ramp` with a
/// smoothstep (continuous acceleration), unit rate afterwards.
#[derive(Debug, Clone, Copy)]
pub struct TimeWarp {
    pub lead_in: f64,
    pub ramp: f64,
}

impl TimeWarp {
    /// Returns (s, ds/dt, d2s/dt2): warped path time and its derivatives.
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        if t <= self.lead_in {
            return (0.0, 0.0, 0.0);
        }
        let u = (t - self.lead_in) / self.ramp;
        if u < 1.0 {
            let s = self.ramp * (u.powi(3) - 0.5 * u.powi(4));
            let s_dot = 3.0 * u * u - 2.0 * u.powi(3);
            let s_ddot = (6.0 * u - 6.0 * u * u) / self.ramp;
            (s, s_dot, s_ddot)
        } else {
            (0.5 * self.ramp + (t - self.lead_in - self.ramp), 1.0, 0.0)
        }
    }
}

/// Lemniscate in the xy plane with heading-following yaw.
///
/// `x = A sin(theta)`, `y = B sin(2 theta)` with `theta = rate * warped(t)`;
/// the yaw tracks the path tangent, which exists even while parked.
#[derive(Debug, Clone, Copy)]
pub struct Figure8 {
    pub amp_x: f64,
    pub amp_y: f64,
    pub angular_rate: f64,
    pub height: f64,
    pub warp: TimeWarp,
}

impl Figure8 {
    fn theta(&self, t: f64) -> (f64, f64, f64) {
        let (s, s_dot, s_ddot) = self.warp.eval(t);
        (
            self.angular_rate * s,
            self.angular_rate * s_dot,
            self.angular_rate * s_ddot,
        )
    }

    fn yaw_at(&self, theta: f64) -> f64 {
        let fx = self.amp_x * theta.cos();
        let gy = 2.0 * self.amp_y * (2.0 * theta).cos();
        gy.atan2(fx)
    }

    fn dyaw_dtheta(&self, theta: f64) -> f64 {
        let f = self.amp_x * theta.cos();
        let g = 2.0 * self.amp_y * (2.0 * theta).cos();
        let f_p = -self.amp_x * theta.sin();
        let g_p = -4.0 * self.amp_y * (2.0 * theta).sin();
        (g_p * f - f_p * g) / (f * f + g * g)
    }
}

/// Figure-eight with superimposed roll/pitch sway and vertical bob; the
/// motion-model stressor.
#[derive(Debug, Clone, Copy)]
pub struct Aggressive {
    pub base: Figure8,
    pub roll_amp: f64,
    pub pitch_amp: f64,
    pub z_amp: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum TrajectoryProfile {
    Stationary {
        pose: Pose,
    },
    ConstantVelocity {
        start: Pose,
        velocity: Vector3<f64>,
        warp: TimeWarp,
    },
    /// Circle at constant angular rate: constant body angular velocity and
    /// constant-magnitude centripetal acceleration, handy as an exact case.
    ConstantTurn {
        center: Vector3<f64>,
        radius: f64,
        rate: f64,
    },
    Figure8(Figure8),
    Aggressive(Aggressive),
}

impl TrajectoryProfile {
    pub fn pose(&self, t: f64) -> Pose {
        match self {
            Self::Stationary { pose } => *pose,
            Self::ConstantVelocity { start, velocity, warp } => {
                let (s, _, _) = warp.eval(t);
                Pose::from_parts(
                    Translation3::from(start.translation.vector + velocity * s),
                    start.rotation,
                )
            }
            Self::ConstantTurn { center, radius, rate } => {
                let a = rate * t;
                Pose::from_parts(
                    Translation3::from(
                        center + Vector3::new(radius * a.cos(), radius * a.sin(), 0.0),
                    ),
                    so3_exp(&Vector3::new(0.0, 0.0, a + std::f64::consts::FRAC_PI_2)),
                )
            }
            Self::Figure8(f) => {
                let (theta, _, _) = f.theta(t);
                Pose::from_parts(
                    Translation3::new(
                        f.amp_x * theta.sin(),
                        f.amp_y * (2.0 * theta).sin(),
                        f.height,
                    ),
                    so3_exp(&Vector3::new(0.0, 0.0, f.yaw_at(theta))),
                )
            }
            Self::Aggressive(a) => {
                let f = &a.base;
                let (theta, _, _) = f.theta(t);
                let yaw = so3_exp(&Vector3::new(0.0, 0.0, f.yaw_at(theta)));
                let pitch = so3_exp(&Vector3::new(0.0, a.pitch_amp * (2.0 * theta).sin(), 0.0));
                let roll = so3_exp(&Vector3::new(a.roll_amp * (3.0 * theta).sin(), 0.0, 0.0));
                Pose::from_parts(
                    Translation3::new(
                        f.amp_x * theta.sin(),
                        f.amp_y * (2.0 * theta).sin(),
                        f.height + a.z_amp * (2.0 * theta).sin(),
                    ),
                    yaw * pitch * roll,
                )
            }
        }
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        match self {
            Self::Stationary { .. } => Vector3::zeros(),
            Self::ConstantVelocity { velocity, warp, .. } => {
                let (_, s_dot, _) = warp.eval(t);
                velocity * s_dot
            }
            Self::ConstantTurn { radius, rate, .. } => {
                let a = rate * t;
                Vector3::new(-radius * rate * a.sin(), radius * rate * a.cos(), 0.0)
            }
            Self::Figure8(f) => {
                let (theta, theta_dot, _) = f.theta(t);
                Vector3::new(
                    f.amp_x * theta.cos() * theta_dot,
                    2.0 * f.amp_y * (2.0 * theta).cos() * theta_dot,
                    0.0,
                )
            }
            Self::Aggressive(a) => {
                let f = &a.base;
                let (theta, theta_dot, _) = f.theta(t);
                Vector3::new(
                    f.amp_x * theta.cos() * theta_dot,
                    2.0 * f.amp_y * (2.0 * theta).cos() * theta_dot,
                    2.0 * a.z_amp * (2.0 * theta).cos() * theta_dot,
                )
            }
        }
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        match self {
            Self::Stationary { .. } => Vector3::zeros(),
            Self::ConstantVelocity { velocity, warp, .. } => {
                let (_, _, s_ddot) = warp.eval(t);
                velocity * s_ddot
            }
            Self::ConstantTurn { radius, rate, .. } => {
                let a = rate * t;
                Vector3::new(
                    -radius * rate * rate * a.cos(),
                    -radius * rate * rate * a.sin(),
                    0.0,
                )
            }
            Self::Figure8(f) => {
                let (theta, theta_dot, theta_ddot) = f.theta(t);
                let dd = theta_dot * theta_dot;
                Vector3::new(
                    -f.amp_x * theta.sin() * dd + f.amp_x * theta.cos() * theta_ddot,
                    -4.0 * f.amp_y * (2.0 * theta).sin() * dd
                        + 2.0 * f.amp_y * (2.0 * theta).cos() * theta_ddot,
                    0.0,
                )
            }
            Self::Aggressive(a) => {
                let f = &a.base;
                let (theta, theta_dot, theta_ddot) = f.theta(t);
                let dd = theta_dot * theta_dot;
                Vector3::new(
                    -f.amp_x * theta.sin() * dd + f.amp_x * theta.cos() * theta_ddot,
                    -4.0 * f.amp_y * (2.0 * theta).sin() * dd
                        + 2.0 * f.amp_y * (2.0 * theta).cos() * theta_ddot,
                    -4.0 * a.z_amp * (2.0 * theta).sin() * dd
                        + 2.0 * a.z_amp * (2.0 * theta).cos() * theta_ddot,
                )
            }
        }
    }

    /// Body-frame angular velocity. Closed form where the orientation is a
    /// pure yaw; finite differences of the rotation otherwise.
    pub fn angular_velocity(&self, t: f64) -> Vector3<f64> {
        match self {
            Self::Stationary { .. } | Self::ConstantVelocity { .. } => Vector3::zeros(),
            Self::ConstantTurn { rate, .. } => Vector3::new(0.0, 0.0, *rate),
            Self::Figure8(f) => {
                let (theta, theta_dot, _) = f.theta(t);
                Vector3::new(0.0, 0.0, f.dyaw_dtheta(theta) * theta_dot)
            }
            Self::Aggressive(_) => {
                let h = 1e-6;
                let delta = self.pose(t - h).rotation.inverse() * self.pose(t + h).rotation;
                so3_log(&delta) / (2.0 * h)
            }
        }
    }

    /// Body-frame angular acceleration by central differences of the angular
    /// velocity; exact (zero) for the constant-rate profiles.
    pub fn angular_acceleration(&self, t: f64) -> Vector3<f64> {
        let h = 1e-4;
        (self.angular_velocity(t + h) - self.angular_velocity(t - h)) / (2.0 * h)
    }
}

// ---------------------------------------------------------------------------
// world model and ray casting

#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            min: Vector3::from(min),
            max: Vector3::from(max),
        }
    }

    /// Nearest positive boundary crossing: entry face from outside, exit face
    /// from inside (which is what makes one big box a closed room).
    fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t_min = f64::NEG_INFINITY;
        let mut t_max = f64::INFINITY;
        for axis in 0..3 {
            let d = dir[axis];
            if d.abs() < 1e-13 {
                if origin[axis] < self.min[axis] || origin[axis] > self.max[axis] {
                    return None;
                }
                continue;
            }
            let t1 = (self.min[axis] - origin[axis]) / d;
            let t2 = (self.max[axis] - origin[axis]) / d;
            t_min = t_min.max(t1.min(t2));
            t_max = t_max.min(t1.max(t2));
        }
        if t_max < t_min.max(0.0) {
            return None;
        }
        if t_min > 1e-9 {
            Some(t_min)
        } else if t_max > 1e-9 {
            Some(t_max)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Plane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Plane {
    fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = dir.dot(&self.normal);
        if denom.abs() < 1e-13 {
            return None;
        }
        let t = (self.point - origin).dot(&self.normal) / denom;
        (t > 1e-9).then_some(t)
    }
}

/// Axis-aligned boxes plus infinite planes forming a closed environment.
#[derive(Debug, Clone, Default)]
pub struct WorldModel {
    pub boxes: Vec<Aabb>,
    pub planes: Vec<Plane>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("world is not closed: a ray from ({}, {}, {}) escapes past {max_range} m", from.x, from.y, from.z)]
    OpenWorld { from: Vector3<f64>, max_range: f64 },
    #[error(transparent)]
    Io(#[from] IoError),
}

impl WorldModel {
    /// Range to the nearest surface along `dir` (unit), if within `max_range`.
    pub fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
        let mut best = f64::INFINITY;
        for b in &self.boxes {
            if let Some(t) = b.ray_hit(origin, dir) {
                best = best.min(t);
            }
        }
        for p in &self.planes {
            if let Some(t) = p.ray_hit(origin, dir) {
                best = best.min(t);
            }
        }
        (best <= max_range).then_some(best)
    }

    /// Closed-world check: a coarse sphere of rays from each probe point must
    /// all return within `max_range`.
    pub fn validate_closed(&self, probes: &[Vector3<f64>], max_range: f64) -> Result<(), SimError> {
        for probe in probes {
            for elev_step in -2..=2 {
                let elev = elev_step as f64 * 0.35;
                for az_step in 0..16 {
                    let az = az_step as f64 * std::f64::consts::TAU / 16.0;
                    let dir = Vector3::new(
                        elev.cos() * az.cos(),
                        elev.cos() * az.sin(),
                        elev.sin(),
                    );
                    if self.cast_ray(probe, &dir, max_range).is_none() {
                        return Err(SimError::OpenWorld {
                            from: *probe,
                            max_range,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Desk-scale default: a 24 x 16 x 5 m hall with pillars and crates kept
    /// clear of the trajectory corridor.
    pub fn default_room() -> Self {
        let mut boxes = vec![Aabb::new([-12.0, -8.0, 0.0], [12.0, 8.0, 5.0])];
        for (cx, cy) in [(8.0, 5.0), (8.0, -5.0), (-8.0, 5.0), (-8.0, -5.0)] {
            boxes.push(Aabb::new([cx - 0.5, cy - 0.5, 0.0], [cx + 0.5, cy + 0.5, 5.0]));
        }
        for (cx, cy) in [(0.0, 6.0), (0.0, -6.0)] {
            boxes.push(Aabb::new([cx - 1.0, cy - 1.0, 0.0], [cx + 1.0, cy + 1.0, 1.6]));
        }
        for (cx, cy) in [(9.0, 0.0), (-9.0, 0.0)] {
            boxes.push(Aabb::new([cx - 1.0, cy - 1.0, 0.0], [cx + 1.0, cy + 1.0, 1.6]));
        }
        for (cx, cy) in [(5.0, 6.5), (-5.0, -6.5)] {
            boxes.push(Aabb::new([cx - 0.6, cy - 0.6, 0.0], [cx + 0.6, cy + 0.6, 2.2]));
        }
        Self {
            boxes,
            planes: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// sensors

/// IMU corruption model; identical seeds give identical streams.
#[derive(Debug, Clone, Copy)]
pub struct SimImuNoise {
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_noise_std: f64,
    pub gyro_noise_std: f64,
    pub seed: u64,
}

impl Default for SimImuNoise {
    fn default() -> Self {
        Self {
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_noise_std: 0.0,
            gyro_noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Samples the profile's exact kinematics at the IMU mount point (lever-arm
/// and Euler terms included), then applies bias and white noise in the sensor
/// frame.
pub fn simulate_imu(
    profile: &TrajectoryProfile,
    noise: &SimImuNoise,
    rate: f64,
    extrinsics: &Extrinsics,
    t_start: f64,
    t_end: f64,
) -> Vec<ImuSample> {
    assert!(rate > 0.0);
    let gravity = gravity_vector();
    let lever = extrinsics.imu_to_body.translation.vector;
    let rot_bi = extrinsics.imu_to_body.rotation;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw3 = |std: f64| {
        let v = Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng));
        v * std
    };

    let count = ((t_end - t_start) * rate + 1e-9).floor() as usize;
    let mut samples = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let t = t_start + k as f64 / rate;
        let rot_wb = profile.pose(t).rotation;
        let omega = profile.angular_velocity(t);
        let alpha = profile.angular_acceleration(t);
        let accel_point_world = profile.acceleration(t)
            + rot_wb * (alpha.cross(&lever) + omega.cross(&omega.cross(&lever)));
        let specific_force = (rot_wb * rot_bi).inverse() * (accel_point_world - gravity);
        let gyro = rot_bi.inverse() * omega;
        samples.push(ImuSample {
            stamp: t,
            accel: specific_force + noise.accel_bias + draw3(noise.accel_noise_std),
            gyro: gyro + noise.gyro_bias + draw3(noise.gyro_noise_std),
        });
    }
    samples
}

/// Emission pattern of one scan, as unit directions in the sensor frame plus
/// the fraction of the scan period at which each ray fires.
#[derive(Debug, Clone, Copy)]
pub enum ScanPattern {
    /// Spinning LiDAR: rings spread over a vertical FOV, azimuth sweeping a
    /// full revolution per scan.
    Rings {
        rings: usize,
        fov_up_deg: f64,
        fov_down_deg: f64,
        columns: usize,
    },
    /// Solid-state style raster sweeping rows over the period.
    Raster {
        rows: usize,
        columns: usize,
        fov_h_deg: f64,
        fov_v_deg: f64,
    },
}

impl ScanPattern {
    fn rays(&self) -> Vec<(Vector3<f64>, f64)> {
        let mut out = Vec::new();
        match *self {
            Self::Rings {
                rings,
                fov_up_deg,
                fov_down_deg,
                columns,
            } => {
                for c in 0..columns {
                    let frac = c as f64 / columns as f64;
                    let az = std::f64::consts::TAU * frac;
                    for r in 0..rings {
                        let blend = if rings > 1 { r as f64 / (rings - 1) as f64 } else { 0.5 };
                        let elev = (fov_down_deg + (fov_up_deg - fov_down_deg) * blend).to_radians();
                        out.push((
                            Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()),
                            frac,
                        ));
                    }
                }
            }
            Self::Raster {
                rows,
                columns,
                fov_h_deg,
                fov_v_deg,
            } => {
                for r in 0..rows {
                    let frac = r as f64 / rows as f64;
                    let vb = if rows > 1 { r as f64 / (rows - 1) as f64 } else { 0.5 };
                    let elev = (fov_v_deg * (vb - 0.5)).to_radians();
                    for c in 0..columns {
                        let hb = if columns > 1 { c as f64 / (columns - 1) as f64 } else { 0.5 };
                        let az = (fov_h_deg * (hb - 0.5)).to_radians();
                        out.push((
                            Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()),
                            frac,
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Casts one scan from the continuously moving sensor; every return is
/// stamped with its emission time, so the cloud is motion-distorted exactly
/// the way a real scan would be. Points are in the sensor frame.
pub fn simulate_scan(
    profile: &TrajectoryProfile,
    world: &WorldModel,
    extrinsics: &Extrinsics,
    t_start: f64,
    period: f64,
    pattern: &ScanPattern,
    max_range: f64,
) -> TimedPointCloud {
    let rays = pattern.rays();
    let points: Vec<Option<(Vector3<f64>, f64)>> = rays
        .par_iter()
        .map(|(dir, frac)| {
            let t = t_start + frac * period;
            let sensor_pose = profile.pose(t) * extrinsics.lidar_to_body;
            let origin = sensor_pose.translation.vector;
            let dir_world = sensor_pose.rotation * dir;
            world
                .cast_ray(&origin, &dir_world, max_range)
                .map(|range| (dir * range, t))
        })
        .collect();
    let mut cloud = TimedPointCloud::with_capacity(points.len(), Frame::Sensor);
    for hit in points.into_iter().flatten() {
        cloud.push(hit.0, hit.1);
    }
    cloud
}

// ---------------------------------------------------------------------------
// dataset generation

/// Everything needed to emit one synthetic dataset.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub profile: TrajectoryProfile,
    pub duration: f64,
    pub scan_rate: f64,
    pub imu_rate: f64,
    /// IMU-only lead-in before the first scan fires (sensor bring-up time);
    /// gives the initializer a usable stationary window.
    pub scan_start: f64,
    pub pattern: ScanPattern,
    pub noise: SimImuNoise,
    pub extrinsics: Extrinsics,
    pub max_range: f64,
}

impl SimConfig {
    pub fn named(profile: &str, seed: u64) -> Option<Self> {
        let noise = SimImuNoise {
            seed,
            ..Default::default()
        };
        let base = |profile| Self {
            profile,
            duration: 60.0,
            scan_rate: 10.0,
            imu_rate: 100.0,
            scan_start: 2.5,
            pattern: ScanPattern::Rings {
                rings: 16,
                fov_up_deg: 15.0,
                fov_down_deg: -15.0,
                columns: 360,
            },
            noise,
            extrinsics: Extrinsics {
                lidar_to_body: Pose::from_parts(
                    Translation3::new(0.1, 0.0, 0.3),
                    Rotation::identity(),
                ),
                imu_to_body: Pose::from_parts(
                    Translation3::new(-0.06, 0.025, 0.12),
                    Rotation::identity(),
                ),
            },
            max_range: 120.0,
        };
        match profile {
            "stationary" => {
                let mut cfg = base(TrajectoryProfile::Stationary {
                    pose: Pose::from_parts(Translation3::new(0.0, 0.0, 1.5), Rotation::identity()),
                });
                cfg.duration = 10.0;
                Some(cfg)
            }
            "constant_velocity" => {
                let mut cfg = base(TrajectoryProfile::ConstantVelocity {
                    start: Pose::from_parts(Translation3::new(-6.0, 0.0, 1.5), Rotation::identity()),
                    velocity: Vector3::new(0.8, 0.0, 0.0),
                    warp: TimeWarp {
                        lead_in: 3.5,
                        ramp: 2.0,
                    },
                });
                cfg.duration = 18.0;
                Some(cfg)
            }
            "figure8" => Some(base(TrajectoryProfile::Figure8(Figure8 {
                amp_x: 5.0,
                amp_y: 1.8,
                angular_rate: 0.38,
                height: 1.5,
                warp: TimeWarp {
                    lead_in: 3.5,
                    ramp: 3.0,
                },
            }))),
            "aggressive" => {
                let mut cfg = base(TrajectoryProfile::Aggressive(Aggressive {
                    base: Figure8 {
                        amp_x: 4.0,
                        amp_y: 1.5,
                        angular_rate: 0.8,
                        height: 1.5,
                        warp: TimeWarp {
                            lead_in: 3.5,
                            ramp: 2.0,
                        },
                    },
                    roll_amp: 0.22,
                    pitch_amp: 0.14,
                    z_amp: 0.25,
                }));
                cfg.duration = 30.0;
                Some(cfg)
            }
            _ => None,
        }
    }
}

/// Loads a profile spec file: `profile = <name>` selects the named defaults,
/// every other key overrides one parameter.
pub fn load_profile_spec(path: &Path) -> Result<SimConfig, IoError> {
    let entries = io::parse_kv(path)?;
    let bad = |msg: String| IoError::Format {
        path: path.to_owned(),
        msg,
    };
    let name = entries
        .iter()
        .find(|(k, _)| k == "profile")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| bad("missing key `profile`".into()))?;
    let mut cfg = SimConfig::named(&name, 0)
        .ok_or_else(|| bad(format!("unknown profile `{name}` (stationary|constant_velocity|figure8|aggressive)")))?;

    let parse_vec3 = |key: &str, value: &str| -> Result<Vector3<f64>, IoError> {
        let nums: Vec<f64> = value
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(format!("{key}: expected three numbers")))?;
        if nums.len() != 3 {
            return Err(bad(format!("{key}: expected three numbers, got {}", nums.len())));
        }
        Ok(Vector3::new(nums[0], nums[1], nums[2]))
    };

    for (key, value) in &entries {
        let num = || -> Result<f64, IoError> {
            value
                .parse::<f64>()
                .map_err(|_| bad(format!("{key}: `{value}` is not a number")))
        };
        match key.as_str() {
            "profile" => {}
            "duration" => cfg.duration = num()?,
            "scan_rate" => cfg.scan_rate = num()?,
            "imu_rate" => cfg.imu_rate = num()?,
            "scan_start" => cfg.scan_start = num()?,
            "max_range" => cfg.max_range = num()?,
            "seed" => cfg.noise.seed = num()? as u64,
            "accel_noise_std" => cfg.noise.accel_noise_std = num()?,
            "gyro_noise_std" => cfg.noise.gyro_noise_std = num()?,
            "accel_bias" => cfg.noise.accel_bias = parse_vec3(key, value)?,
            "gyro_bias" => cfg.noise.gyro_bias = parse_vec3(key, value)?,
            "amp_x" | "amp_y" | "angular_rate" | "height" | "lead_in" | "ramp" | "roll_amp"
            | "pitch_amp" | "z_amp" => {
                let v = num()?;
                apply_shape_key(&mut cfg.profile, key, v)
                    .map_err(|()| bad(format!("key `{key}` does not apply to profile `{name}`")))?;
            }
            "velocity" => {
                if let TrajectoryProfile::ConstantVelocity { velocity, .. } = &mut cfg.profile {
                    *velocity = parse_vec3(key, value)?;
                } else {
                    return Err(bad(format!("key `velocity` does not apply to `{name}`")));
                }
            }
            other => return Err(bad(format!("unknown profile key `{other}`"))),
        }
    }
    Ok(cfg)
}

fn apply_shape_key(profile: &mut TrajectoryProfile, key: &str, v: f64) -> Result<(), ()> {
    let fig8 = |f: &mut Figure8, key: &str, v: f64| -> Result<(), ()> {
        match key {
            "amp_x" => f.amp_x = v,
            "amp_y" => f.amp_y = v,
            "angular_rate" => f.angular_rate = v,
            "height" => f.height = v,
            "lead_in" => f.warp.lead_in = v,
            "ramp" => f.warp.ramp = v,
            _ => return Err(()),
        }
        Ok(())
    };
    match profile {
        TrajectoryProfile::Figure8(f) => fig8(f, key, v),
        TrajectoryProfile::Aggressive(a) => match key {
            "roll_amp" => {
                a.roll_amp = v;
                Ok(())
            }
            "pitch_amp" => {
                a.pitch_amp = v;
                Ok(())
            }
            "z_amp" => {
                a.z_amp = v;
                Ok(())
            }
            _ => fig8(&mut a.base, key, v),
        },
        TrajectoryProfile::ConstantVelocity { warp, .. } => match key {
            "lead_in" => {
                warp.lead_in = v;
                Ok(())
            }
            "ramp" => {
                warp.ramp = v;
                Ok(())
            }
            _ => Err(()),
        },
        _ => Err(()),
    }
}

/// Emits a complete dataset tree: `manifest.cfg`, `imu.csv`, `scans/*.ply`
/// (absolute stamps) and `groundtruth.tum` sampled at the scan end times.
pub fn generate_dataset(
    config: &SimConfig,
    world: &WorldModel,
    out_dir: &Path,
) -> Result<DatasetManifest, SimError> {
    let map_io = |e: std::io::Error, p: &Path| IoError::Io {
        path: p.to_owned(),
        source: e,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| map_io(e, out_dir))?;
    let scan_dir = out_dir.join("scans");
    std::fs::create_dir_all(&scan_dir).map_err(|e| map_io(e, &scan_dir))?;

    // The world must enclose the whole trajectory.
    let probes: Vec<Vector3<f64>> = (0..=20)
        .map(|k| {
            config
                .profile
                .pose(k as f64 * config.duration / 20.0)
                .translation
                .vector
        })
        .collect();
    world.validate_closed(&probes, config.max_range)?;

    let imu = simulate_imu(
        &config.profile,
        &config.noise,
        config.imu_rate,
        &config.extrinsics,
        0.0,
        config.duration,
    );
    let imu_path = out_dir.join("imu.csv");
    io::write_imu(&imu, &imu_path)?;

    let period = 1.0 / config.scan_rate;
    let mut ground_truth = Vec::new();
    let mut t_scan = config.scan_start;
    while t_scan + period <= config.duration + 1e-9 {
        let cloud = simulate_scan(
            &config.profile,
            world,
            &config.extrinsics,
            t_scan,
            period,
            &config.pattern,
            config.max_range,
        );
        let path = scan_dir.join(format!("{t_scan:015.9}.ply"));
        io::write_scan(&cloud, &path)?;
        let stamp = cloud.max_stamp().expect("closed world always returns");
        ground_truth.push(State {
            pose: config.profile.pose(stamp),
            velocity: config.profile.velocity(stamp),
            stamp,
        });
        t_scan += period;
    }
    io::write_trajectory(&ground_truth, &out_dir.join("groundtruth.tum"))?;

    let manifest = DatasetManifest {
        scan_dir,
        imu_file: imu_path,
        stamp_convention: StampConvention::Absolute,
        extrinsics: config.extrinsics,
    };
    manifest.write(&out_dir.join("manifest.cfg"))?;
    Ok(manifest)
}
