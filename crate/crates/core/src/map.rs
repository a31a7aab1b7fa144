//! Bounded voxel-grid local map: capped per-voxel occupancy, voxel
//! downsampling, fixed-radius nearest-neighbor queries, and distance-based
//! cropping. A sparse hash grid is observably equivalent to fancier sparse
//! structures for these semantics and trivial to verify against brute force.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Pose;

/// Which frame a cloud's coordinates live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Sensor,
    Body,
    Odometry,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPoint {
    pub position: Vector3<f64>,
    pub stamp: f64,
}

/// Point cloud with per-point emission stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPointCloud {
    points: Vec<TimedPoint>,
    pub frame: Frame,
}

impl TimedPointCloud {
    pub fn new(frame: Frame) -> Self {
        Self {
            points: Vec::new(),
            frame,
        }
    }

    pub fn with_capacity(capacity: usize, frame: Frame) -> Self {
        Self {
            points: Vec::with_capacity(capacity),
            frame,
        }
    }

    pub fn push(&mut self, position: Vector3<f64>, stamp: f64) {
        self.points.push(TimedPoint { position, stamp });
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TimedPoint> {
        self.points.iter()
    }

    pub fn points(&self) -> &[TimedPoint] {
        &self.points
    }

    /// Latest stamp in the cloud, if any.
    pub fn max_stamp(&self) -> Option<f64> {
        self.points.iter().map(|p| p.stamp).fold(None, |acc, t| {
            Some(acc.map_or(t, |a: f64| a.max(t)))
        })
    }

    /// Rigidly transforms every point, relabeling the frame.
    pub fn transformed(&self, pose: &Pose, frame: Frame) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| TimedPoint {
                position: crate::geometry::transform_point(pose, &p.position),
                stamp: p.stamp,
            })
            .collect();
        Self { points, frame }
    }

    /// Keeps points whose range from the origin lies within `[min, max]`.
    pub fn range_clipped(&self, min: f64, max: f64) -> Self {
        let points = self
            .points
            .iter()
            .filter(|p| {
                let r = p.position.norm();
                (min..=max).contains(&r)
            })
            .copied()
            .collect();
        Self {
            points,
            frame: self.frame,
        }
    }
}

/// Keeps at most one point per cubic cell of size `cell`, the first one
/// encountered; deterministic and stamp-preserving.
pub fn voxel_downsample(cloud: &TimedPointCloud, cell: f64) -> TimedPointCloud {
    assert!(cell > 0.0, "downsample cell must be positive");
    let mut seen: HashMap<VoxelCoord, (), BuildVoxelHasher> = HashMap::default();
    let mut out = TimedPointCloud::with_capacity(cloud.len() / 2, cloud.frame);
    for p in cloud.iter() {
        let key = VoxelCoord::of(&p.position, cell);
        if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(key) {
            e.insert(());
            out.push(p.position, p.stamp);
        }
    }
    out
}

/// Integer voxel coordinates: `floor(p / cell)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelCoord([i32; 3]);

impl VoxelCoord {
    pub fn of(p: &Vector3<f64>, cell: f64) -> Self {
        Self([
            (p.x / cell).floor() as i32,
            (p.y / cell).floor() as i32,
            (p.z / cell).floor() as i32,
        ])
    }

    fn center(&self, cell: f64) -> Vector3<f64> {
        Vector3::new(
            (self.0[0] as f64 + 0.5) * cell,
            (self.0[1] as f64 + 0.5) * cell,
            (self.0[2] as f64 + 0.5) * cell,
        )
    }

    fn packed(&self) -> u64 {
        // 21 bits per axis; far-apart aliases share a bucket, Eq still holds.
        let m = 0x1F_FFFF;
        ((self.0[0] as u64) & m)
            | (((self.0[1] as u64) & m) << 21)
            | (((self.0[2] as u64) & m) << 42)
    }
}

/// Multiplicative mixer over the packed coordinate. Fixed seed keeps map
/// behavior identical across runs.
#[derive(Default)]
pub struct VoxelHasher(u64);

impl Hasher for VoxelHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, _bytes: &[u8]) {
        unreachable!("VoxelCoord hashes through write_u64 only");
    }

    fn write_u64(&mut self, v: u64) {
        let mut x = v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x ^= x >> 32;
        self.0 = x.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    }

    fn write_i32(&mut self, _v: i32) {
        unreachable!("VoxelCoord hashes through write_u64 only");
    }
}

type BuildVoxelHasher = BuildHasherDefault<VoxelHasher>;

impl std::hash::Hash for VoxelCoord {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.packed());
    }
}

#[derive(Debug, Error)]
#[error("search radius {max_dist} exceeds voxel size {voxel_size}: the 27-cell neighborhood would be incomplete")]
pub struct SearchRadiusError {
    pub max_dist: f64,
    pub voxel_size: f64,
}

/// Sparse voxel map with a hard per-voxel occupancy cap.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    voxel_size: f64,
    max_points_per_voxel: usize,
    voxels: HashMap<VoxelCoord, Vec<Vector3<f64>>, BuildVoxelHasher>,
    total_points: usize,
}

impl VoxelMap {
    pub fn new(voxel_size: f64, max_points_per_voxel: usize) -> Self {
        assert!(voxel_size > 0.0 && max_points_per_voxel > 0);
        Self {
            voxel_size,
            max_points_per_voxel,
            voxels: HashMap::default(),
            total_points: 0,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.total_points
    }

    pub fn is_empty(&self) -> bool {
        self.total_points == 0
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    /// Appends each point to its voxel unless the voxel is already full.
    pub fn insert(&mut self, cloud: &TimedPointCloud) {
        debug_assert_eq!(cloud.frame, Frame::Odometry, "map lives in the odometry frame");
        for p in cloud.iter() {
            let key = VoxelCoord::of(&p.position, self.voxel_size);
            let bucket = self.voxels.entry(key).or_default();
            if bucket.len() < self.max_points_per_voxel {
                bucket.push(p.position);
                self.total_points += 1;
            }
        }
    }

    /// Globally nearest stored point within `max_dist` of `query`.
    ///
    /// Scans the 3x3x3 voxel neighborhood, which covers every candidate as
    /// long as `max_dist <= voxel_size`; larger radii are rejected.
    pub fn nearest_neighbor(
        &self,
        query: &Vector3<f64>,
        max_dist: f64,
    ) -> Result<Option<(Vector3<f64>, f64)>, SearchRadiusError> {
        if max_dist > self.voxel_size {
            return Err(SearchRadiusError {
                max_dist,
                voxel_size: self.voxel_size,
            });
        }
        Ok(self.nearest_in_neighborhood(query, max_dist))
    }

    fn nearest_in_neighborhood(
        &self,
        query: &Vector3<f64>,
        max_dist: f64,
    ) -> Option<(Vector3<f64>, f64)> {
        let base = VoxelCoord::of(query, self.voxel_size);
        let mut best: Option<(Vector3<f64>, f64)> = None;
        let mut best_sq = max_dist * max_dist;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = VoxelCoord([base.0[0] + dx, base.0[1] + dy, base.0[2] + dz]);
                    if let Some(bucket) = self.voxels.get(&key) {
                        for p in bucket {
                            let d_sq = (p - query).norm_squared();
                            if d_sq < best_sq || (best.is_none() && d_sq <= best_sq) {
                                best_sq = d_sq;
                                best = Some((*p, 0.0));
                            }
                        }
                    }
                }
            }
        }
        best.map(|(p, _)| (p, best_sq.sqrt()))
    }

    /// Drops every voxel whose center lies farther than `max_range` from
    /// `center`.
    pub fn crop(&mut self, center: &Vector3<f64>, max_range: f64) {
        assert!(max_range > 0.0);
        let cell = self.voxel_size;
        let range_sq = max_range * max_range;
        let mut removed = 0usize;
        self.voxels.retain(|coord, bucket| {
            let keep = (coord.center(cell) - center).norm_squared() <= range_sq;
            if !keep {
                removed += bucket.len();
            }
            keep
        });
        self.total_points -= removed;
    }

    /// Every stored point, voxel by voxel. Iteration order is deterministic
    /// for identical insertion histories but otherwise unspecified.
    pub fn points(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.voxels.values().flatten()
    }

    /// Dumps the stored points as ASCII PLY (x y z, 32-bit floats) for visual
    /// inspection.
    pub fn dump_ply(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "ply")?;
        writeln!(file, "format ascii 1.0")?;
        writeln!(file, "element vertex {}", self.total_points)?;
        writeln!(file, "property float x")?;
        writeln!(file, "property float y")?;
        writeln!(file, "property float z")?;
        writeln!(file, "end_header")?;
        for p in self.points() {
            writeln!(file, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
        }
        Ok(())
    }

    #[cfg(test)]
    fn assert_capacity_invariant(&self) {
        for (coord, bucket) in &self.voxels {
            assert!(bucket.len() <= self.max_points_per_voxel);
            for p in bucket {
                assert_eq!(VoxelCoord::of(p, self.voxel_size), *coord);
            }
        }
        assert_eq!(
            self.total_points,
            self.voxels.values().map(Vec::len).sum::<usize>()
        );
    }
}
