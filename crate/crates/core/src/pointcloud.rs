//! Scan representation, file ingestion and preprocessing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{NddError, Result};
use crate::FrameId;

/// One LiDAR return in meters. `intensity` is 0 when the source has none.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 {
            x,
            y,
            z,
            intensity: 0.0,
        }
    }

    pub fn with_intensity(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point3 { x, y, z, intensity }
    }

    #[inline]
    pub fn planar_range(&self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn coords(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame_id: FrameId,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame_id: FrameId) -> Self {
        PointCloud { points, frame_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rotates every point about the z-axis by `yaw` radians.
    pub fn rotated_z(&self, yaw: f64) -> PointCloud {
        let (s, c) = yaw.sin_cos();
        let points = self
            .points
            .iter()
            .map(|p| Point3 {
                x: c * p.x - s * p.y,
                y: s * p.x + c * p.y,
                ..*p
            })
            .collect();
        PointCloud::new(points, self.frame_id)
    }
}

/// Rigid sensor pose: `world = rotation * sensor + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Planar pose: yaw about +z at `(x, y, z)`.
    pub fn from_planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn is_proper_rotation(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let gram = r.transpose() * r - Matrix3::identity();
        gram.iter().all(|v| v.abs() <= tol) && (r.determinant() - 1.0).abs() <= tol
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Reads a KITTI velodyne scan: packed little-endian `f32` quadruples
/// `(x, y, z, intensity)` with no header.
pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NddError::io(path, e))?;
    decode_kitti_bytes(&bytes).map_err(|reason| NddError::malformed(path, reason))
}

fn decode_kitti_bytes(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if !bytes.len().is_multiple_of(16) {
        return Err(format!(
            "length {} is not a multiple of 16 bytes",
            bytes.len()
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        let p = Point3::with_intensity(f(0), f(1), f(2), f(3));
        if !p.is_finite() {
            return Err(format!("point {i} has non-finite coordinates"));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points, 0))
}

/// Writes the KITTI scan layout. Coordinates are narrowed to `f32`.
pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Reads a KITTI odometry pose file: one row-major 3x4 `[R|t]` per line.
pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| NddError::io(path, e))?;
    parse_poses(&text).map_err(|(line, reason)| NddError::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason,
    })
}

fn parse_poses(text: &str) -> std::result::Result<Vec<Pose>, (usize, String)> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| (i + 1, e.to_string()))?;
        if vals.len() != 12 {
            return Err((i + 1, format!("expected 12 values, found {}", vals.len())));
        }
        poses.push(Pose {
            rotation: Matrix3::new(
                vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
            ),
            translation: Vector3::new(vals[3], vals[7], vals[11]),
        });
    }
    Ok(poses)
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for pose in poses {
        let r = &pose.rotation;
        let t = &pose.translation;
        let row = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ];
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Reads a CSV scan with header `x,y,z[,intensity]`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| NddError::malformed(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| NddError::malformed(path, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_intensity = match names.as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "intensity"] => true,
        _ => {
            return Err(NddError::malformed(
                path,
                format!(
                    "expected header x,y,z[,intensity], found {}",
                    names.join(",")
                ),
            ))
        }
    };
    let mut points = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| NddError::MalformedLine {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
        let field = |k: usize| -> Result<f64> {
            rec.get(k)
                .ok_or_else(|| format!("missing column {k}"))
                .and_then(|s| s.parse::<f64>().map_err(|e| e.to_string()))
                .map_err(|reason| NddError::MalformedLine {
                    path: path.to_path_buf(),
                    line,
                    reason,
                })
        };
        let intensity = if has_intensity { field(3)? } else { 0.0 };
        let p = Point3::with_intensity(field(0)?, field(1)?, field(2)?, intensity);
        if !p.is_finite() {
            return Err(NddError::MalformedLine {
                path: path.to_path_buf(),
                line,
                reason: "non-finite coordinate".into(),
            });
        }
        points.push(p);
    }
    Ok(PointCloud::new(points, 0))
}

/// Loads a scan by extension: `.csv` goes through [`load_csv`], everything
/// else is treated as KITTI binary.
pub fn load_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => load_csv(path),
        _ => load_kitti_bin(path),
    }
}

/// Writes through a hidden sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| NddError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| NddError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| NddError::io(path, e))
}

/// Keeps points with planar range `<= max_range`.
pub fn range_filter(cloud: &PointCloud, max_range: f64) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .filter(|p| p.planar_range() <= max_range)
        .copied()
        .collect();
    PointCloud::new(points, cloud.frame_id)
}

#[derive(Default)]
struct VoxelAccum {
    sum: [f64; 4],
    n: usize,
}

/// Replaces the points of every occupied origin-anchored cube of side `leaf`
/// by their centroid (intensity averaged too). Output is ordered by
/// ascending `(i, j, k)` cube index.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> PointCloud {
    assert!(leaf > 0.0, "voxel leaf must be positive");
    let mut cubes: BTreeMap<(i64, i64, i64), VoxelAccum> = BTreeMap::new();
    for p in &cloud.points {
        let key = (
            (p.x / leaf).floor() as i64,
            (p.y / leaf).floor() as i64,
            (p.z / leaf).floor() as i64,
        );
        let acc = cubes.entry(key).or_default();
        acc.sum[0] += p.x;
        acc.sum[1] += p.y;
        acc.sum[2] += p.z;
        acc.sum[3] += p.intensity;
        acc.n += 1;
    }
    let points = cubes
        .into_values()
        .map(|acc| {
            let n = acc.n as f64;
            Point3::with_intensity(
                acc.sum[0] / n,
                acc.sum[1] / n,
                acc.sum[2] / n,
                acc.sum[3] / n,
            )
        })
        .collect();
    PointCloud::new(points, cloud.frame_id)
}

/// Eigen-decomposition of the planar (x, y) covariance.
///
/// Returns `(lambda1, lambda2, axis1, axis2)` with `lambda1 >= lambda2`, both
/// axes following the sign convention used by [`pca_align`].
pub fn planar_principal_axes(cloud: &PointCloud) -> Result<(f64, f64, [f64; 2], [f64; 2])> {
    let n = cloud.len();
    if n < 3 {
        return Err(NddError::DegenerateAlignment(format!(
            "{n} points, need at least 3"
        )));
    }
    let inv = 1.0 / n as f64;
    let (mx, my) = cloud
        .points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    let (mx, my) = (mx * inv, my * inv);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in &cloud.points {
        let dx = p.x - mx;
        let dy = p.y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx *= inv;
    syy *= inv;
    sxy *= inv;

    let half_trace = 0.5 * (sxx + syy);
    let radius = (0.5 * (sxx - syy)).hypot(sxy);
    let l1 = half_trace + radius;
    let l2 = half_trace - radius;
    if !(l1 > 0.0) || (l2 / l1 - 1.0).abs() <= 1e-9 {
        return Err(NddError::DegenerateAlignment(format!(
            "planar eigenvalues {l1} and {l2} are not distinct"
        )));
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (s, c) = theta.sin_cos();
    let orient = |v: [f64; 2]| {
        let dominant = if v[0].abs() >= v[1].abs() { v[0] } else { v[1] };
        if dominant < 0.0 {
            [-v[0], -v[1]]
        } else {
            v
        }
    };
    let a1 = orient([c, s]);
    let mut a2 = orient([-s, c]);
    if a1[0] * a2[1] - a1[1] * a2[0] < 0.0 {
        a2 = [-a2[0], -a2[1]];
    }
    Ok((l1, l2, a1, a2))
}

/// Yaw-rotates the cloud about the sensor origin so that the first planar
/// principal direction maps to +x and the second to +y. `z` is untouched.
pub fn pca_align(cloud: &PointCloud) -> Result<PointCloud> {
    let (_, _, a1, a2) = planar_principal_axes(cloud)?;
    let points = cloud
        .points
        .iter()
        .map(|p| Point3 {
            x: a1[0] * p.x + a1[1] * p.y,
            y: a2[0] * p.x + a2[1] * p.y,
            ..*p
        })
        .collect();
    Ok(PointCloud::new(points, cloud.frame_id))
}
