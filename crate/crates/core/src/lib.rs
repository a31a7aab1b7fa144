//! Sensor-agnostic LiDAR-inertial odometry.
//!
//! The estimator fuses averaged IMU windows under a constant-acceleration /
//! constant-angular-velocity motion model with scan-to-map point-to-point ICP,
//! adding an adaptive accelerometer-based orientation regularization. The
//! crate also ships a synthetic-sensor simulator and ATE/RPE trajectory
//! evaluation so the whole pipeline is verifiable without real datasets.
//!
//! Typical flow: build a [`odometry::Pipeline`] (or point [`runner`] at a
//! dataset directory), feed IMU samples and scans in time order, write the
//! trajectory with [`io::write_trajectory`], and score it with [`eval::ate`] /
//! [`eval::rpe`].

pub mod eval;
pub mod geometry;
pub mod imu;
pub mod io;
pub mod map;
pub mod motion;
pub mod odometry;
pub mod registration;
pub mod runner;
pub mod sim;

pub use geometry::{Pose, Rotation, Twist};
pub use imu::{Extrinsics, ImuSample, ImuWindowSummary};
pub use map::{Frame, TimedPointCloud, VoxelMap};
pub use odometry::{Config, Pipeline, State};
