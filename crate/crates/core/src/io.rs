//! Disk formats: binary PLY scans with per-point stamps, IMU CSV streams,
//! TUM trajectories, and the flat `key = value` files used for manifests and
//! configuration. Parsers reject malformed input rather than repairing it;
//! the one documented exception is collapsing duplicated IMU timestamps.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Translation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::imu::{Extrinsics, ImuSample};
use crate::map::{Frame, TimedPointCloud};
use crate::odometry::{Config, State};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }

    fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_owned(),
            msg: msg.into(),
        }
    }

    fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Self::Parse {
            path: path.to_owned(),
            line,
            msg: msg.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// key = value files

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn parse_kv(path: &Path) -> Result<Vec<(String, String)>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(IoError::parse(path, idx + 1, "expected `key = value`"));
        };
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn parse_f64(path: &Path, key: &str, value: &str) -> Result<f64, IoError> {
    value
        .parse::<f64>()
        .map_err(|_| IoError::format(path, format!("{key}: `{value}` is not a number")))
}

fn parse_bool(path: &Path, key: &str, value: &str) -> Result<bool, IoError> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(IoError::format(
            path,
            format!("{key}: `{value}` is not a boolean"),
        )),
    }
}

fn parse_pose(path: &Path, key: &str, value: &str) -> Result<Pose, IoError> {
    let nums: Vec<f64> = value
        .split_whitespace()
        .map(|t| parse_f64(path, key, t))
        .collect::<Result<_, _>>()?;
    if nums.len() != 7 {
        return Err(IoError::format(
            path,
            format!("{key}: expected `tx ty tz qx qy qz qw`, got {} values", nums.len()),
        ));
    }
    let quat = Quaternion::new(nums[6], nums[3], nums[4], nums[5]);
    if (quat.norm() - 1.0).abs() > 1e-3 {
        return Err(IoError::format(
            path,
            format!("{key}: quaternion norm {} is not 1", quat.norm()),
        ));
    }
    Ok(Pose::from_parts(
        Translation3::new(nums[0], nums[1], nums[2]),
        UnitQuaternion::from_quaternion(quat),
    ))
}

/// How per-point scan stamps are stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StampConvention {
    /// Absolute seconds.
    Absolute,
    /// Offsets from the scan start encoded in the file name.
    Offset,
}

/// Points the runner at a dataset: scan directory, IMU stream, extrinsics.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub scan_dir: PathBuf,
    pub imu_file: PathBuf,
    pub stamp_convention: StampConvention,
    pub extrinsics: Extrinsics,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut scan_dir = None;
        let mut imu_file = None;
        let mut stamp_convention = None;
        let mut lidar_to_body = None;
        let mut imu_to_body = None;
        for (key, value) in parse_kv(path)? {
            match key.as_str() {
                "scan_dir" => scan_dir = Some(base.join(&value)),
                "imu_file" => imu_file = Some(base.join(&value)),
                "time_unit" => {
                    if value != "seconds" {
                        return Err(IoError::format(
                            path,
                            format!("time_unit `{value}` unsupported (only `seconds`)"),
                        ));
                    }
                }
                "scan_stamps" => {
                    stamp_convention = Some(match value.as_str() {
                        "absolute" => StampConvention::Absolute,
                        "offset" => StampConvention::Offset,
                        other => {
                            return Err(IoError::format(
                                path,
                                format!("scan_stamps `{other}` must be absolute|offset"),
                            ))
                        }
                    })
                }
                "lidar_to_body" => lidar_to_body = Some(parse_pose(path, &key, &value)?),
                "imu_to_body" => imu_to_body = Some(parse_pose(path, &key, &value)?),
                other => {
                    return Err(IoError::format(path, format!("unknown manifest key `{other}`")))
                }
            }
        }
        let missing = |what: &str| IoError::format(path, format!("missing key `{what}`"));
        let manifest = Self {
            scan_dir: scan_dir.ok_or_else(|| missing("scan_dir"))?,
            imu_file: imu_file.ok_or_else(|| missing("imu_file"))?,
            stamp_convention: stamp_convention.ok_or_else(|| missing("scan_stamps"))?,
            extrinsics: Extrinsics {
                lidar_to_body: lidar_to_body.ok_or_else(|| missing("lidar_to_body"))?,
                imu_to_body: imu_to_body.ok_or_else(|| missing("imu_to_body"))?,
            },
        };
        if !manifest.scan_dir.is_dir() {
            return Err(IoError::format(
                path,
                format!("scan_dir {} does not exist", manifest.scan_dir.display()),
            ));
        }
        if !manifest.imu_file.is_file() {
            return Err(IoError::format(
                path,
                format!("imu_file {} does not exist", manifest.imu_file.display()),
            ));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let rel = |p: &Path| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        };
        let stamps = match self.stamp_convention {
            StampConvention::Absolute => "absolute",
            StampConvention::Offset => "offset",
        };
        let text = format!(
            "# dataset manifest\nscan_dir = {}\nimu_file = {}\ntime_unit = seconds\nscan_stamps = {}\nlidar_to_body = {}\nimu_to_body = {}\n",
            rel(&self.scan_dir),
            rel(&self.imu_file),
            stamps,
            pose_to_kv(&self.extrinsics.lidar_to_body),
            pose_to_kv(&self.extrinsics.imu_to_body),
        );
        fs::write(path, text).map_err(|e| IoError::io(path, e))
    }
}

fn pose_to_kv(pose: &Pose) -> String {
    let t = pose.translation.vector;
    let q = pose.rotation.quaternion();
    format!(
        "{} {} {} {} {} {} {}",
        fmt_sig9(t.x),
        fmt_sig9(t.y),
        fmt_sig9(t.z),
        fmt_sig9(q.i),
        fmt_sig9(q.j),
        fmt_sig9(q.k),
        fmt_sig9(q.w)
    )
}

// ---------------------------------------------------------------------------
// binary PLY scans

const PLY_RECORD: usize = 4 + 4 + 4 + 8;

/// Writes a scan as little-endian binary PLY: x, y, z float32 and t float64.
pub fn write_scan(cloud: &TimedPointCloud, path: &Path) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty double t\nend_header\n",
        cloud.len()
    );
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| IoError::io(path, e));
    write(header.as_bytes())?;
    for p in cloud.iter() {
        write(&(p.position.x as f32).to_le_bytes())?;
        write(&(p.position.y as f32).to_le_bytes())?;
        write(&(p.position.z as f32).to_le_bytes())?;
        write(&p.stamp.to_le_bytes())?;
    }
    out.flush().map_err(|e| IoError::io(path, e))
}

/// Start-of-scan stamp encoded in the file name (`<start_seconds>.ply`).
pub fn scan_start_from_filename(path: &Path) -> Result<f64, IoError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| IoError::format(path, "file name is not valid UTF-8"))?;
    stem.parse::<f64>()
        .map_err(|_| IoError::format(path, format!("file stem `{stem}` is not a start stamp in seconds")))
}

/// Loads a binary PLY scan; offset stamps are converted to absolute seconds
/// using the start stamp from the file name.
pub fn load_scan(path: &Path, convention: StampConvention) -> Result<TimedPointCloud, IoError> {
    let file = fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut line = String::new();
    let read_line = |reader: &mut BufReader<fs::File>, line: &mut String| -> Result<String, IoError> {
        line.clear();
        reader
            .read_line(line)
            .map_err(|e| IoError::io(path, e))?;
        Ok(line.trim_end().to_string())
    };

    if read_line(&mut reader, &mut line)? != "ply" {
        return Err(IoError::format(path, "missing `ply` magic"));
    }
    let format = read_line(&mut reader, &mut line)?;
    if format.starts_with("format ascii") {
        return Err(IoError::format(path, "ascii PLY is unsupported, expected binary_little_endian"));
    }
    if format != "format binary_little_endian 1.0" {
        return Err(IoError::format(path, format!("unsupported format `{format}`")));
    }

    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    loop {
        let entry = read_line(&mut reader, &mut line)?;
        if entry == "end_header" {
            break;
        }
        if entry.is_empty() {
            return Err(IoError::format(path, "truncated header"));
        }
        if entry.starts_with("comment") {
            continue;
        }
        if let Some(rest) = entry.strip_prefix("element ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().unwrap_or_default();
            if name != "vertex" {
                return Err(IoError::format(path, format!("unsupported element `{name}`")));
            }
            vertex_count = Some(
                parts
                    .next()
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| IoError::format(path, "bad vertex count"))?,
            );
        } else if let Some(rest) = entry.strip_prefix("property ") {
            properties.push(rest.to_string());
        } else {
            return Err(IoError::format(path, format!("unexpected header entry `{entry}`")));
        }
    }

    // Exactly x, y, z as float and t as double, in declared order.
    let mut order = [usize::MAX; 4]; // position of x, y, z, t in the record
    if properties.len() != 4 {
        return Err(IoError::format(
            path,
            format!("expected properties x y z t, found {properties:?}"),
        ));
    }
    for (slot, prop) in properties.iter().enumerate() {
        match prop.as_str() {
            "float x" => order[0] = slot,
            "float y" => order[1] = slot,
            "float z" => order[2] = slot,
            "double t" => order[3] = slot,
            other => {
                return Err(IoError::format(path, format!("unsupported property `{other}`")))
            }
        }
    }
    if order.contains(&usize::MAX) {
        return Err(IoError::format(
            path,
            format!("missing one of x/y/z/t in {properties:?}"),
        ));
    }
    // Byte offset of each needed field within a record.
    let sizes: Vec<usize> = properties
        .iter()
        .map(|p| if p.starts_with("double") { 8 } else { 4 })
        .collect();
    let offset_of = |slot: usize| sizes[..slot].iter().sum::<usize>();

    let count = vertex_count.ok_or_else(|| IoError::format(path, "missing vertex element"))?;
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| IoError::io(path, e))?;
    if payload.len() != count * PLY_RECORD {
        return Err(IoError::format(
            path,
            format!(
                "payload is {} bytes, expected {} for {count} vertices",
                payload.len(),
                count * PLY_RECORD
            ),
        ));
    }

    let base_stamp = match convention {
        StampConvention::Absolute => 0.0,
        StampConvention::Offset => scan_start_from_filename(path)?,
    };

    let mut cloud = TimedPointCloud::with_capacity(count, Frame::Sensor);
    for i in 0..count {
        let record = &payload[i * PLY_RECORD..(i + 1) * PLY_RECORD];
        let f32_at = |slot: usize| {
            let o = offset_of(slot);
            f32::from_le_bytes(record[o..o + 4].try_into().unwrap()) as f64
        };
        let f64_at = |slot: usize| {
            let o = offset_of(slot);
            f64::from_le_bytes(record[o..o + 8].try_into().unwrap())
        };
        let p = Vector3::new(f32_at(order[0]), f32_at(order[1]), f32_at(order[2]));
        for (value, field) in [(p.x, "x"), (p.y, "y"), (p.z, "z")] {
            if !value.is_finite() {
                return Err(IoError::format(
                    path,
                    format!("vertex {i}: non-finite {field} coordinate"),
                ));
            }
        }
        cloud.push(p, base_stamp + f64_at(order[3]));
    }
    Ok(cloud)
}

/// Scan files in a dataset directory, sorted by their start stamp.
pub fn list_scans(dir: &Path) -> Result<Vec<(f64, PathBuf)>, IoError> {
    let entries = fs::read_dir(dir).map_err(|e| IoError::io(dir, e))?;
    let mut scans = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| IoError::io(dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "ply").unwrap_or(false) {
            scans.push((scan_start_from_filename(&path)?, path));
        }
    }
    scans.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scans)
}

// ---------------------------------------------------------------------------
// IMU CSV

const IMU_HEADER: [&str; 7] = ["timestamp", "ax", "ay", "az", "gx", "gy", "gz"];

/// Loads `timestamp,ax,ay,az,gx,gy,gz` rows (SI units). Duplicate timestamps
/// collapse keeping the first row; a decreasing timestamp is an error.
pub fn load_imu(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => IoError::format(path, e.to_string()),
        _ => IoError::format(path, e.to_string()),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| IoError::format(path, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != IMU_HEADER {
        return Err(IoError::format(
            path,
            format!("header must be `{}`", IMU_HEADER.join(",")),
        ));
    }
    let mut samples: Vec<ImuSample> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, after the header
        let record = record.map_err(|e| IoError::parse(path, row, e.to_string()))?;
        if record.len() != 7 {
            return Err(IoError::parse(path, row, format!("{} fields, expected 7", record.len())));
        }
        let mut nums = [0.0f64; 7];
        for (i, field) in record.iter().enumerate() {
            nums[i] = field.trim().parse().map_err(|_| {
                IoError::parse(path, row, format!("`{field}` is not a number ({})", IMU_HEADER[i]))
            })?;
        }
        if let Some(last) = samples.last() {
            if nums[0] == last.stamp {
                continue; // documented duplicate collapse, keep the first
            }
            if nums[0] < last.stamp {
                return Err(IoError::parse(
                    path,
                    row,
                    format!("timestamp {} decreases below {}", nums[0], last.stamp),
                ));
            }
        }
        samples.push(ImuSample {
            stamp: nums[0],
            accel: Vector3::new(nums[1], nums[2], nums[3]),
            gyro: Vector3::new(nums[4], nums[5], nums[6]),
        });
    }
    Ok(samples)
}

pub fn write_imu(samples: &[ImuSample], path: &Path) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| IoError::format(path, e.to_string()))?;
    writer
        .write_record(IMU_HEADER)
        .map_err(|e| IoError::format(path, e.to_string()))?;
    for s in samples {
        let fields = [
            fmt_sig9(s.stamp),
            fmt_sig9(s.accel.x),
            fmt_sig9(s.accel.y),
            fmt_sig9(s.accel.z),
            fmt_sig9(s.gyro.x),
            fmt_sig9(s.gyro.y),
            fmt_sig9(s.gyro.z),
        ];
        writer
            .write_record(fields)
            .map_err(|e| IoError::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| IoError::io(path, e))
}

// ---------------------------------------------------------------------------
// TUM trajectories

/// Rounds to nine decimals and prints the shortest representation, so exact
/// values stay exact (`0`, `1`) and everything else keeps nine digits.
fn fmt_sig9(x: f64) -> String {
    let mut r = (x * 1e9).round() / 1e9;
    if r == 0.0 {
        r = 0.0; // normalize -0
    }
    format!("{r}")
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines (quaternion scalar-last).
pub fn write_trajectory(states: &[State], path: &Path) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in states {
        let t = s.pose.translation.vector;
        let q = s.pose.rotation.quaternion();
        writeln!(
            out,
            "{:.9} {} {} {} {} {} {} {}",
            s.stamp,
            fmt_sig9(t.x),
            fmt_sig9(t.y),
            fmt_sig9(t.z),
            fmt_sig9(q.i),
            fmt_sig9(q.j),
            fmt_sig9(q.k),
            fmt_sig9(q.w)
        )
        .map_err(|e| IoError::io(path, e))?;
    }
    out.flush().map_err(|e| IoError::io(path, e))
}

/// Loads odometry configuration overrides from a `key = value` file; keys
/// match the [`Config`] field names.
pub fn load_config(path: &Path) -> Result<Config, IoError> {
    let mut cfg = Config::default();
    for (key, value) in parse_kv(path)? {
        match key.as_str() {
            "voxel_size" => cfg.voxel_size = parse_f64(path, &key, &value)?,
            "association_threshold" => {
                cfg.association_threshold = parse_f64(path, &key, &value)?
            }
            "max_jerk" => cfg.max_jerk = parse_f64(path, &key, &value)?,
            "beta0" => cfg.beta0 = parse_f64(path, &key, &value)?,
            "min_range" => cfg.min_range = parse_f64(path, &key, &value)?,
            "max_range" => cfg.max_range = parse_f64(path, &key, &value)?,
            "max_points_per_voxel" => {
                cfg.max_points_per_voxel = parse_f64(path, &key, &value)? as usize
            }
            "double_downsample" => cfg.double_downsample = parse_bool(path, &key, &value)?,
            "adaptive_regularization" => {
                cfg.adaptive_regularization = parse_bool(path, &key, &value)?
            }
            "average_imu" => cfg.average_imu = parse_bool(path, &key, &value)?,
            "run_initialization" => cfg.run_initialization = parse_bool(path, &key, &value)?,
            "convergence_eps" => cfg.convergence_eps = parse_f64(path, &key, &value)?,
            "max_iterations" => cfg.max_iterations = parse_f64(path, &key, &value)? as usize,
            "fixed_window_orientation" => {
                cfg.fixed_window_orientation = parse_bool(path, &key, &value)?
            }
            other => return Err(IoError::format(path, format!("unknown config key `{other}`"))),
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn scan_roundtrip_three_points() {
        let dir = tmp();
        let path = dir.path().join("12.500000000.ply");
        let mut cloud = TimedPointCloud::new(Frame::Sensor);
        cloud.push(Vector3::new(1.0, 2.0, 3.0), 12.5);
        cloud.push(Vector3::new(-0.5, 0.25, 0.125), 12.55);
        cloud.push(Vector3::new(0.0, 0.0, 0.0), 12.6);
        write_scan(&cloud, &path).unwrap();
        let back = load_scan(&path, StampConvention::Absolute).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(cloud.iter()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.stamp, b.stamp);
        }
    }

    #[test]
    fn scan_offset_stamps_use_filename() {
        let dir = tmp();
        let path = dir.path().join("100.250000000.ply");
        let mut cloud = TimedPointCloud::new(Frame::Sensor);
        cloud.push(Vector3::new(1.0, 0.0, 0.0), 0.00);
        cloud.push(Vector3::new(0.0, 1.0, 0.0), 0.05);
        write_scan(&cloud, &path).unwrap();
        let back = load_scan(&path, StampConvention::Offset).unwrap();
        let stamps: Vec<f64> = back.iter().map(|p| p.stamp).collect();
        assert_eq!(stamps, vec![100.25, 100.30]);
    }

    #[test]
    fn scan_rejects_ascii_ply() {
        let dir = tmp();
        let path = dir.path().join("0.0.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n",
        )
        .unwrap();
        let err = load_scan(&path, StampConvention::Absolute).unwrap_err();
        assert!(err.to_string().contains("ascii"), "{err}");
    }

    #[test]
    fn scan_rejects_missing_t_property() {
        let dir = tmp();
        let path = dir.path().join("0.0.ply");
        fs::write(
            &path,
            "ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        )
        .unwrap();
        let err = load_scan(&path, StampConvention::Absolute).unwrap_err();
        assert!(err.to_string().contains("x y z t"), "{err}");
    }

    #[test]
    fn scan_rejects_nan_coordinates() {
        let dir = tmp();
        let path = dir.path().join("0.0.ply");
        let mut cloud = TimedPointCloud::new(Frame::Sensor);
        cloud.push(Vector3::new(f64::NAN, 0.0, 0.0), 0.0);
        write_scan(&cloud, &path).unwrap();
        let err = load_scan(&path, StampConvention::Absolute).unwrap_err();
        assert!(err.to_string().contains("non-finite x"), "{err}");
    }

    #[test]
    fn imu_roundtrip_and_negative_cases() {
        let dir = tmp();
        let path = dir.path().join("imu.csv");
        let samples = vec![
            ImuSample {
                stamp: 0.0,
                accel: Vector3::new(0.0, 0.0, 9.81),
                gyro: Vector3::zeros(),
            },
            ImuSample {
                stamp: 0.01,
                accel: Vector3::new(0.125, -0.25, 9.5),
                gyro: Vector3::new(0.001, 0.002, -0.003),
            },
        ];
        write_imu(&samples, &path).unwrap();
        let back = load_imu(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].accel, samples[1].accel);

        // Shuffled rows are rejected with the offending row index.
        fs::write(
            &path,
            "timestamp,ax,ay,az,gx,gy,gz\n0.02,0,0,9.81,0,0,0\n0.01,0,0,9.81,0,0,0\n",
        )
        .unwrap();
        let err = load_imu(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");

        // Duplicates collapse keeping the first.
        fs::write(
            &path,
            "timestamp,ax,ay,az,gx,gy,gz\n0.01,1,0,9.81,0,0,0\n0.01,2,0,9.81,0,0,0\n",
        )
        .unwrap();
        let collapsed = load_imu(&path).unwrap();
        assert_eq!(collapsed.len(), 1);
        assert_eq!(collapsed[0].accel.x, 1.0);

        // Wrong header.
        fs::write(&path, "t,ax,ay,az,gx,gy,gz\n").unwrap();
        assert!(load_imu(&path).is_err());
    }

    #[test]
    fn trajectory_identity_line_format() {
        let dir = tmp();
        let path = dir.path().join("traj.tum");
        let states = vec![State {
            pose: Pose::identity(),
            velocity: Vector3::zeros(),
            stamp: 0.0,
        }];
        write_trajectory(&states, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "0.000000000 0 0 0 0 0 0 1\n");
    }

    #[test]
    fn empty_trajectory_writes_empty_file() {
        let dir = tmp();
        let path = dir.path().join("traj.tum");
        write_trajectory(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tmp();
        fs::create_dir(dir.path().join("scans")).unwrap();
        fs::write(dir.path().join("imu.csv"), "timestamp,ax,ay,az,gx,gy,gz\n").unwrap();
        let manifest = DatasetManifest {
            scan_dir: dir.path().join("scans"),
            imu_file: dir.path().join("imu.csv"),
            stamp_convention: StampConvention::Absolute,
            extrinsics: Extrinsics::default(),
        };
        let path = dir.path().join("manifest.cfg");
        manifest.write(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.stamp_convention, StampConvention::Absolute);
        assert_eq!(back.scan_dir, manifest.scan_dir);
    }

    #[test]
    fn manifest_rejects_unknown_key() {
        let dir = tmp();
        let path = dir.path().join("manifest.cfg");
        fs::write(&path, "mystery = 1\n").unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }

    #[test]
    fn config_file_overrides_defaults() {
        let dir = tmp();
        let path = dir.path().join("config.cfg");
        fs::write(
            &path,
            "voxel_size = 0.8\n# comment line\ndouble_downsample = false\nmax_iterations = 100\n",
        )
        .unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.voxel_size, 0.8);
        assert!(!cfg.double_downsample);
        assert_eq!(cfg.max_iterations, 100);
        assert_eq!(cfg.beta0, 200.0, "untouched keys keep defaults");
    }

    proptest! {
        /// Writer -> reader scan round trips are bit-identical for
        /// f32-representable coordinates.
        #[test]
        fn scan_roundtrip_random(
            pts in proptest::collection::vec((-100f32..100.0, -100f32..100.0, -100f32..100.0, 0f64..1000.0), 0..200)
        ) {
            let dir = tmp();
            let path = dir.path().join("5.0.ply");
            let mut cloud = TimedPointCloud::new(Frame::Sensor);
            for (x, y, z, t) in pts {
                cloud.push(Vector3::new(x as f64, y as f64, z as f64), t);
            }
            write_scan(&cloud, &path).unwrap();
            let back = load_scan(&path, StampConvention::Absolute).unwrap();
            prop_assert_eq!(back, cloud);
        }

        /// IMU write -> read preserves every sample for 9-decimal values.
        #[test]
        fn imu_roundtrip_random(rows in proptest::collection::vec((0u32..100_000, -8f64..8.0), 1..300)) {
            let dir = tmp();
            let path = dir.path().join("imu.csv");
            // The writer's contract is nine decimals; build samples that
            // survive it exactly.
            let r9 = |x: f64| (x * 1e9).round() / 1e9;
            let mut t_prev = -1.0;
            let samples: Vec<ImuSample> = rows
                .iter()
                .map(|(dt, v)| {
                    let t = t_prev + 1e-4 * (*dt as f64 + 1.0);
                    t_prev = t;
                    let v = (v * 1e6).round() / 1e6;
                    ImuSample {
                        stamp: r9(t),
                        accel: Vector3::new(v, -v, 9.81),
                        gyro: Vector3::new(r9(v / 10.0), 0.0, r9(v / 100.0)),
                    }
                })
                .collect();
            write_imu(&samples, &path).unwrap();
            let back = load_imu(&path).unwrap();
            prop_assert_eq!(back.len(), samples.len());
            for (a, b) in back.iter().zip(samples.iter()) {
                prop_assert_eq!(a.stamp, b.stamp);
                prop_assert_eq!(a.accel, b.accel);
                prop_assert_eq!(a.gyro, b.gyro);
            }
        }
    }
}
