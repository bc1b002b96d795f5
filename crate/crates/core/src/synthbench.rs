//! Seeded synthetic worlds and trajectories with planted revisits.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`), which is specified
//! bit-for-bit and therefore portable. The world is drawn from a generator
//! seeded with the scene seed; each scan draws from the same seed on its own
//! ChaCha stream, selected by the frame's sampling key, so frames can be
//! rendered independently and in any order.
//!
//! Visibility is range-only: every surface point within the sensor's planar
//! range is a candidate, with no occlusion test.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{NddError, Result};
use crate::evaluation::{label_ground_truth, GroundTruth, GroundTruthConfig};
use crate::par;
use crate::pointcloud::{write_atomic, write_kitti_bin, write_poses, Point3, PointCloud, Pose};
use crate::FrameId;

/// Ground points are thinned relative to structure surfaces, loosely
/// mimicking the falloff of beam density with range.
const GROUND_WEIGHT: f64 = 0.2;
const SCENE_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side of the square world, centered on the origin (m).
    pub area: f64,
    pub num_structures: usize,
    /// Sampling budget per scan; range culling only removes points.
    pub points_per_scan: usize,
    pub noise_sigma: f64,
    pub sensor_range: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 7,
            area: 260.0,
            num_structures: 140,
            points_per_scan: 24_000,
            noise_sigma: 0.05,
            sensor_range: 80.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.area > 0.0
            && self.points_per_scan > 0
            && self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && self.sensor_range > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NddError::InvalidConfig(format!("bad scene spec {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Upright box rotated by `yaw` about its center.
    Box {
        center: [f64; 2],
        half: [f64; 2],
        yaw: f64,
        height: f64,
    },
    /// Thin vertical slab; only its two long faces are sampled.
    Wall {
        start: [f64; 2],
        end: [f64; 2],
        height: f64,
    },
    Cylinder {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
}

impl Primitive {
    /// Planar bounding circle `(center, radius)`.
    pub fn footprint(&self) -> ([f64; 2], f64) {
        match *self {
            Primitive::Box { center, half, .. } => (center, half[0].hypot(half[1])),
            Primitive::Wall { start, end, .. } => (
                [(start[0] + end[0]) / 2.0, (start[1] + end[1]) / 2.0],
                (end[0] - start[0]).hypot(end[1] - start[1]) / 2.0,
            ),
            Primitive::Cylinder { center, radius, .. } => (center, radius),
        }
    }

    fn surfaces(&self, out: &mut Vec<Surface>) {
        match *self {
            Primitive::Box {
                center,
                half,
                yaw,
                height,
            } => {
                let (s, c) = yaw.sin_cos();
                let ax = Vector3::new(c, s, 0.0) * half[0];
                let ay = Vector3::new(-s, c, 0.0) * half[1];
                let base = Vector3::new(center[0], center[1], 0.0);
                let up = Vector3::new(0.0, 0.0, height);
                let corners = [
                    base - ax - ay,
                    base + ax - ay,
                    base + ax + ay,
                    base - ax + ay,
                ];
                for i in 0..4 {
                    let a = corners[i];
                    let b = corners[(i + 1) % 4];
                    out.push(Surface::rect(a, b - a, up));
                }
                out.push(Surface::rect(corners[0] + up, ax * 2.0, ay * 2.0));
            }
            Primitive::Wall { start, end, height } => {
                let a = Vector3::new(start[0], start[1], 0.0);
                let b = Vector3::new(end[0], end[1], 0.0);
                let up = Vector3::new(0.0, 0.0, height);
                // both faces coincide for a zero-thickness slab
                let face = Surface::rect(a, b - a, up);
                out.push(face);
                out.push(face);
            }
            Primitive::Cylinder {
                center,
                radius,
                height,
            } => out.push(Surface::Cylinder {
                center,
                radius,
                height,
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Surface {
    Rect {
        origin: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
    },
    Cylinder {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
    /// Ground disk of the sensor's range around a planar position.
    Ground { center: [f64; 2], radius: f64 },
}

impl Surface {
    fn rect(origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>) -> Self {
        Surface::Rect { origin, u, v }
    }

    fn area(&self) -> f64 {
        match self {
            Surface::Rect { u, v, .. } => u.cross(v).norm(),
            Surface::Cylinder { radius, height, .. } => TAU * radius * height,
            Surface::Ground { radius, .. } => PI * radius * radius * GROUND_WEIGHT,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match *self {
            Surface::Rect { origin, u, v } => {
                origin + u * rng.random::<f64>() + v * rng.random::<f64>()
            }
            Surface::Cylinder {
                center,
                radius,
                height,
            } => {
                let a = rng.random_range(0.0..TAU);
                Vector3::new(
                    center[0] + radius * a.cos(),
                    center[1] + radius * a.sin(),
                    height * rng.random::<f64>(),
                )
            }
            Surface::Ground { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..TAU);
                Vector3::new(center[0] + r * a.cos(), center[1] + r * a.sin(), 0.0)
            }
        }
    }
}

/// Static world: a ground plane at `z = 0` plus upright primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: SceneSpec,
    pub primitives: Vec<Primitive>,
}

/// Scene without any route constraint.
pub fn generate_scene(spec: &SceneSpec) -> World {
    generate_scene_clear_of(spec, &[], 0.0)
}

/// Scene whose primitives keep at least `clearance` meters from every
/// polyline in `routes`, so sensors on those routes are never inside
/// geometry. Placement uses rejection sampling with a bounded number of
/// attempts; a crowded spec may yield fewer primitives than requested.
pub fn generate_scene_clear_of(
    spec: &SceneSpec,
    routes: &[Vec<[f64; 2]>],
    clearance: f64,
) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(SCENE_STREAM);
    let half = spec.area / 2.0;
    let mut primitives = Vec::with_capacity(spec.num_structures);
    let mut attempts = 0;
    while primitives.len() < spec.num_structures && attempts < spec.num_structures * 200 {
        attempts += 1;
        let center = [rng.random_range(-half..half), rng.random_range(-half..half)];
        let kind: f64 = rng.random();
        let prim = if kind < 0.45 {
            Primitive::Box {
                center,
                half: [rng.random_range(2.0..8.0), rng.random_range(2.0..8.0)],
                yaw: rng.random_range(0.0..PI),
                height: rng.random_range(3.0..15.0),
            }
        } else if kind < 0.7 {
            let len = rng.random_range(10.0..40.0);
            let dir: f64 = rng.random_range(0.0..PI);
            let d = [dir.cos() * len / 2.0, dir.sin() * len / 2.0];
            Primitive::Wall {
                start: [center[0] - d[0], center[1] - d[1]],
                end: [center[0] + d[0], center[1] + d[1]],
                height: rng.random_range(2.0..6.0),
            }
        } else {
            Primitive::Cylinder {
                center,
                radius: rng.random_range(0.3..2.0),
                height: rng.random_range(3.0..10.0),
            }
        };
        let (c, r) = prim.footprint();
        let clear = routes
            .iter()
            .all(|route| polyline_distance(route, c) >= r + clearance);
        if clear {
            primitives.push(prim);
        }
    }
    World {
        spec: spec.clone(),
        primitives,
    }
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

fn polyline_distance(route: &[[f64; 2]], p: [f64; 2]) -> f64 {
    match route {
        [] => f64::INFINITY,
        [only] => (p[0] - only[0]).hypot(p[1] - only[1]),
        _ => route
            .windows(2)
            .map(|w| segment_distance(w[0], w[1], p))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Simulates one scan from `pose`, in the sensor frame.
///
/// Points are drawn area-weighted from every surface whose footprint reaches
/// within range, then culled to the planar sensor range and perturbed by
/// isotropic Gaussian noise. `sample_key` selects the random stream, so equal
/// `(world, pose, sample_key)` give identical scans.
pub fn render_scan(world: &World, pose: &Pose, sample_key: u64) -> PointCloud {
    let spec = &world.spec;
    let t = pose.translation;
    let range = spec.sensor_range;
    let mut surfaces = vec![Surface::Ground {
        center: [t.x, t.y],
        radius: range,
    }];
    for prim in &world.primitives {
        let (c, r) = prim.footprint();
        if (c[0] - t.x).hypot(c[1] - t.y) <= range + r {
            prim.surfaces(&mut surfaces);
        }
    }
    let weights: Vec<f64> = surfaces.iter().map(Surface::area).collect();
    let pick = WeightedIndex::new(&weights).expect("ground disk has positive area");

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // stream 0 belongs to scene generation
    rng.set_stream(sample_key.wrapping_add(1));
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());
    let inv = pose.rotation.transpose();
    let mut points = Vec::with_capacity(spec.points_per_scan);
    for _ in 0..spec.points_per_scan {
        let w = surfaces[pick.sample(&mut rng)].sample(&mut rng);
        let mut s = inv * (w - t);
        if let Some(n) = &noise {
            s += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
        }
        if s.x.hypot(s.y) <= range {
            points.push(Point3::new(s.x, s.y, s.z));
        }
    }
    PointCloud::new(points, sample_key as FrameId)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RevisitKind {
    /// Same direction of travel.
    Same,
    /// Opposite direction, heading turned by 180 degrees.
    Reverse,
    /// Same direction with an extra yaw offset in degrees.
    Yaw(f64),
}

impl RevisitKind {
    pub fn name(&self) -> String {
        match self {
            RevisitKind::Same => "same".into(),
            RevisitKind::Reverse => "reverse".into(),
            RevisitKind::Yaw(d) => format!("yaw{d}"),
        }
    }
}

impl std::str::FromStr for RevisitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "same" => Ok(RevisitKind::Same),
            "reverse" => Ok(RevisitKind::Reverse),
            other => other
                .strip_prefix("yaw")
                .and_then(|d| d.parse().ok())
                .map(RevisitKind::Yaw)
                .ok_or_else(|| format!("unknown revisit kind {s:?} (same, reverse, yaw<deg>)")),
        }
    }
}

/// Re-drives base frames `start..start + len` after the base route ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RevisitSpec {
    pub start: usize,
    pub len: usize,
    pub kind: RevisitKind,
    /// Sideways displacement (m) from the original path, to the left of the
    /// original heading.
    pub lateral_offset: f64,
    /// Draw fresh samples; otherwise reuse the original frames' sampling keys.
    pub resample: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    /// Planar polyline driven once, start to end.
    pub waypoints: Vec<[f64; 2]>,
    /// Base frames, evenly spaced by arc length along the waypoints.
    pub num_frames: usize,
    pub sensor_height: f64,
    pub revisits: Vec<RevisitSpec>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            waypoints: vec![
                [-45.0, -45.0],
                [75.0, -45.0],
                [75.0, 45.0],
                [-75.0, 45.0],
                [-75.0, -15.0],
            ],
            num_frames: 170,
            sensor_height: 1.8,
            revisits: vec![RevisitSpec {
                start: 0,
                len: 30,
                kind: RevisitKind::Reverse,
                lateral_offset: 1.0,
                resample: true,
            }],
        }
    }
}

/// One frame of a planned trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePlan {
    pub pose: Pose,
    pub sample_key: u64,
    /// For revisit frames, the base frame being re-driven.
    pub revisit_of: Option<FrameId>,
    pub kind: Option<RevisitKind>,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 || self.num_frames == 0 {
            return Err(NddError::InvalidConfig(
                "trajectory needs two waypoints and at least one frame".into(),
            ));
        }
        for r in &self.revisits {
            if r.start + r.len > self.num_frames {
                return Err(NddError::InvalidConfig(format!(
                    "revisit {}..{} beyond {} base frames",
                    r.start,
                    r.start + r.len,
                    self.num_frames
                )));
            }
        }
        Ok(())
    }

    /// Base frames followed by every revisit, in order.
    pub fn plan(&self) -> Vec<FramePlan> {
        let base = self.base_frames();
        let mut frames: Vec<FramePlan> = base
            .iter()
            .enumerate()
            .map(|(i, &(x, y, yaw))| FramePlan {
                pose: Pose::from_planar(x, y, self.sensor_height, yaw),
                sample_key: i as u64,
                revisit_of: None,
                kind: None,
            })
            .collect();
        for r in &self.revisits {
            let ids: Vec<usize> = match r.kind {
                RevisitKind::Reverse => (r.start..r.start + r.len).rev().collect(),
                _ => (r.start..r.start + r.len).collect(),
            };
            for id in ids {
                let (x, y, yaw) = base[id];
                let (ox, oy) = (-yaw.sin() * r.lateral_offset, yaw.cos() * r.lateral_offset);
                let turn = match r.kind {
                    RevisitKind::Same => 0.0,
                    RevisitKind::Reverse => PI,
                    RevisitKind::Yaw(d) => d.to_radians(),
                };
                let key = if r.resample {
                    frames.len() as u64
                } else {
                    id as u64
                };
                frames.push(FramePlan {
                    pose: Pose::from_planar(x + ox, y + oy, self.sensor_height, yaw + turn),
                    sample_key: key,
                    revisit_of: Some(id),
                    kind: Some(r.kind),
                });
            }
        }
        frames
    }

    /// `(x, y, heading)` of each base frame.
    fn base_frames(&self) -> Vec<(f64, f64, f64)> {
        let segs: Vec<([f64; 2], [f64; 2], f64)> = self
            .waypoints
            .windows(2)
            .map(|w| (w[0], w[1], (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])))
            .collect();
        let total: f64 = segs.iter().map(|s| s.2).sum();
        let step = if self.num_frames > 1 {
            total / (self.num_frames - 1) as f64
        } else {
            0.0
        };
        (0..self.num_frames)
            .map(|i| {
                let mut s = i as f64 * step;
                let mut seg = segs[segs.len() - 1];
                for &cand in &segs {
                    if s <= cand.2 || cand == segs[segs.len() - 1] {
                        seg = cand;
                        break;
                    }
                    s -= cand.2;
                }
                let (a, b, len) = seg;
                let t = if len > 0.0 { (s / len).min(1.0) } else { 0.0 };
                let yaw = (b[1] - a[1]).atan2(b[0] - a[0]);
                (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), yaw)
            })
            .collect()
    }
}

/// A rendered trajectory and its pose-derived labels.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub world: World,
    pub frames: Vec<FramePlan>,
    pub scans: Vec<PointCloud>,
    pub poses: Vec<Pose>,
    pub truth: GroundTruth,
}

/// Builds the world (kept clear of the base route), renders every frame in
/// parallel and labels revisits from the poses.
pub fn planted_loop_sequence(
    scene: &SceneSpec,
    traj: &TrajectorySpec,
    gt: &GroundTruthConfig,
) -> Result<SyntheticSequence> {
    scene.validate()?;
    traj.validate()?;
    let world = generate_scene_clear_of(scene, std::slice::from_ref(&traj.waypoints), 5.0);
    let frames = traj.plan();
    let mut scans = par::map(&frames, |f| render_scan(&world, &f.pose, f.sample_key));
    for (i, s) in scans.iter_mut().enumerate() {
        s.frame_id = i;
    }
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    let truth = label_ground_truth(&poses, gt);
    Ok(SyntheticSequence {
        world,
        frames,
        scans,
        poses,
        truth,
    })
}

/// Writes `velodyne/NNNNNN.bin`, `poses.txt` and `truth.csv`
/// (`frame,has_true_loop,revisit_of,kind`) under `dir`.
pub fn export_kitti(seq: &SyntheticSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let velo = dir.join("velodyne");
    std::fs::create_dir_all(&velo).map_err(|e| NddError::io(&velo, e))?;
    for (i, scan) in seq.scans.iter().enumerate() {
        write_kitti_bin(velo.join(format!("{i:06}.bin")), scan)?;
    }
    write_poses(dir.join("poses.txt"), &seq.poses)?;
    let mut truth = String::from("frame,has_true_loop,revisit_of,kind\n");
    for (i, f) in seq.frames.iter().enumerate() {
        truth.push_str(&format!(
            "{i},{},{},{}\n",
            seq.truth.has_true_loop[i],
            f.revisit_of.map(|r| r.to_string()).unwrap_or_default(),
            f.kind.map(|k| k.name()).unwrap_or_else(|| "base".into()),
        ));
    }
    write_atomic(&dir.join("truth.csv"), truth.as_bytes())
}
