//! Ground truth, precision-recall, F1 / extended precision and the sequence
//! and ablation runners.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;

use crate::descriptor::{build_descriptor, Descriptor, DescriptorConfig, Encoding};
use crate::error::{NddError, Result};
use crate::par;
use crate::pointcloud::{load_scan, write_atomic, PointCloud, Pose};
use crate::retrieval::{DescriptorDatabase, LoopQuery, Matcher, RetrievalConfig};
use crate::FrameId;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthConfig {
    /// A match closer than this (meters) is a true revisit.
    pub revisit_radius: f64,
    /// Frames this close in index are never loop partners.
    pub exclusion_window: usize,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            revisit_radius: 5.0,
            exclusion_window: 50,
        }
    }
}

/// Per-frame revisit labels derived from poses.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub has_true_loop: Vec<bool>,
    /// Every earlier frame (outside the exclusion window) within the radius.
    pub true_matches: Vec<Vec<FrameId>>,
    positions: Vec<Vector3<f64>>,
    radius: f64,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.has_true_loop.len()
    }

    pub fn is_empty(&self) -> bool {
        self.has_true_loop.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.has_true_loop.iter().filter(|&&b| b).count()
    }

    /// Whether `matched` lies within the revisit radius of `query`.
    pub fn is_true_match(&self, query: FrameId, matched: FrameId) -> bool {
        (self.positions[query] - self.positions[matched]).norm() < self.radius
    }
}

/// Labels frame `q` as a revisit iff some frame `m <= q - exclusion_window`
/// has `|t_q - t_m| < revisit_radius`.
///
/// Uses a uniform hash grid with cell size equal to the radius, so only the
/// 27 surrounding cells are inspected per frame.
pub fn label_ground_truth(poses: &[Pose], cfg: &GroundTruthConfig) -> GroundTruth {
    let radius = cfg.revisit_radius;
    let positions: Vec<Vector3<f64>> = poses.iter().map(|p| p.translation).collect();
    let cell = |v: &Vector3<f64>| {
        (
            (v.x / radius).floor() as i64,
            (v.y / radius).floor() as i64,
            (v.z / radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<FrameId>> = HashMap::new();
    let mut true_matches = vec![Vec::new(); positions.len()];
    for (q, pos) in positions.iter().enumerate() {
        // frames become searchable once they fall out of the exclusion window
        if let Some(m) = q.checked_sub(cfg.exclusion_window) {
            grid.entry(cell(&positions[m])).or_default().push(m);
        }
        let (cx, cy, cz) = cell(pos);
        let found = &mut true_matches[q];
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        found.extend(
                            ids.iter()
                                .copied()
                                .filter(|&m| (positions[m] - pos).norm() < radius),
                        );
                    }
                }
            }
        }
        found.sort_unstable();
    }
    GroundTruth {
        has_true_loop: true_matches.iter().map(|m| !m.is_empty()).collect(),
        true_matches,
        positions,
        radius,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryRecord {
    pub query_id: FrameId,
    pub best_match_id: Option<FrameId>,
    /// Best similarity; `-inf` when the query had no eligible candidates.
    pub similarity: f64,
    pub shift: Option<usize>,
    pub has_true_loop: bool,
    pub match_is_true: bool,
}

impl QueryRecord {
    pub fn from_query(query: &LoopQuery, truth: &GroundTruth) -> Self {
        let q = query.query_id;
        let has_true_loop = truth.has_true_loop[q];
        let best_match_id = query.best.map(|b| b.matched_frame);
        QueryRecord {
            query_id: q,
            best_match_id,
            similarity: query.similarity(),
            shift: query.best.map(|b| b.shift),
            has_true_loop,
            match_is_true: has_true_loop
                && best_match_id.is_some_and(|m| truth.is_true_match(q, m)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

/// Classifies a record at threshold `t`.
pub fn score_detection(record: &QueryRecord, t: f64) -> Outcome {
    if record.similarity >= t {
        if record.match_is_true {
            Outcome::TruePositive
        } else {
            Outcome::FalsePositive
        }
    } else if record.has_true_loop {
        Outcome::FalseNegative
    } else {
        Outcome::TrueNegative
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall samples ordered by ascending threshold; the last point
/// always sits at `+inf` (nothing accepted).
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// Sweeps the acceptance threshold over every distinct finite similarity
/// (plus `+inf`). Precision is 1 when nothing is accepted.
pub fn pr_curve(records: &[QueryRecord]) -> Result<PrCurve> {
    let positives = records.iter().filter(|r| r.has_true_loop).count();
    if positives == 0 {
        return Err(NddError::NoGroundTruth);
    }
    let mut scored: Vec<(f64, bool)> = records
        .iter()
        .filter(|r| r.similarity.is_finite())
        .map(|r| (r.similarity, r.match_is_true))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let point = |t: f64, tp: usize, fp: usize| PrPoint {
        threshold: t,
        precision: if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        recall: tp as f64 / positives as f64,
    };
    let mut points = vec![point(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(point(t, tp, fp));
    }
    points.reverse();
    Ok(PrCurve { points })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Maximum F1 over the curve.
    pub f1: f64,
    /// Extended precision, `(r_p100 + p_r0) / 2`.
    pub ep: f64,
    /// Largest recall reached at precision 1.
    pub r_p100: f64,
    /// Precision at the smallest positive recall.
    pub p_r0: f64,
}

pub fn f1_ep(curve: &PrCurve) -> Metrics {
    let f1 = curve
        .points
        .iter()
        .map(|p| {
            let s = p.precision + p.recall;
            if s > 0.0 {
                2.0 * p.precision * p.recall / s
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    let r_p100 = curve
        .points
        .iter()
        .filter(|p| p.precision == 1.0)
        .map(|p| p.recall)
        .fold(0.0, f64::max);
    // smallest positive recall; among equal recalls the best precision
    let p_r0 = curve
        .points
        .iter()
        .filter(|p| p.recall > 0.0)
        .min_by(|a, b| {
            a.recall
                .total_cmp(&b.recall)
                .then(b.precision.total_cmp(&a.precision))
        })
        .map_or(0.0, |p| p.precision);
    Metrics {
        f1,
        ep: 0.5 * (r_p100 + p_r0),
        r_p100,
        p_r0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTiming {
    pub frame: FrameId,
    pub desc_ms: f64,
    pub retrieval_ms: f64,
}

/// Detection output for a sequence before scoring.
#[derive(Clone, Debug)]
pub struct SequenceDetections {
    pub queries: Vec<LoopQuery>,
    pub timing: Vec<FrameTiming>,
}

#[derive(Clone, Debug)]
pub struct SequenceReport {
    pub queries: Vec<LoopQuery>,
    pub records: Vec<QueryRecord>,
    pub curve: PrCurve,
    pub metrics: Metrics,
    pub timing: Vec<FrameTiming>,
}

impl SequenceReport {
    pub fn mean_desc_ms(&self) -> f64 {
        mean(self.timing.iter().map(|t| t.desc_ms))
    }

    pub fn mean_retrieval_ms(&self) -> f64 {
        mean(self.timing.iter().map(|t| t.retrieval_ms))
    }
}

/// Arithmetic mean, 0 for an empty iterator.
pub fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Builds every descriptor, timing each one. Runs in parallel when enabled.
pub fn describe_sequence(scans: &[PointCloud], cfg: &DescriptorConfig) -> Vec<(Descriptor, f64)> {
    par::map(scans, |scan| {
        let t0 = Instant::now();
        let d = build_descriptor(scan, cfg);
        (d, t0.elapsed().as_secs_f64() * 1e3)
    })
}

/// Loads and describes scan files without keeping the clouds in memory.
/// Timings cover description only, not file reading.
pub fn describe_scan_files<P: AsRef<Path> + Sync>(
    paths: &[P],
    cfg: &DescriptorConfig,
) -> Result<Vec<(Descriptor, f64)>> {
    par::map_range(paths.len(), |frame| {
        let cloud = load_scan(paths[frame].as_ref()).map_err(|e| NddError::Frame {
            frame,
            source: Box::new(e),
        })?;
        let t0 = Instant::now();
        let d = build_descriptor(&cloud, cfg);
        Ok((d, t0.elapsed().as_secs_f64() * 1e3))
    })
    .into_iter()
    .collect()
}

/// Streams pre-built descriptors in order: detect against earlier frames,
/// then insert. Frame ids are sequence indices.
pub fn detect_sequence(
    descriptors: &[(Descriptor, f64)],
    rcfg: &RetrievalConfig,
    exclusion_window: usize,
) -> Result<SequenceDetections> {
    rcfg.validate()?;
    let mut db = DescriptorDatabase::new(exclusion_window);
    let mut queries = Vec::with_capacity(descriptors.len());
    let mut timing = Vec::with_capacity(descriptors.len());
    for (frame, (desc, desc_ms)) in descriptors.iter().enumerate() {
        let t0 = Instant::now();
        let q = db.detect_loop(frame, desc, rcfg);
        let retrieval_ms = t0.elapsed().as_secs_f64() * 1e3;
        db.insert(frame, desc.clone())
            .map_err(|e| NddError::Frame {
                frame,
                source: Box::new(e),
            })?;
        queries.push(q);
        timing.push(FrameTiming {
            frame,
            desc_ms: *desc_ms,
            retrieval_ms,
        });
    }
    Ok(SequenceDetections { queries, timing })
}

/// Scores detections against pose-derived ground truth.
pub fn evaluate_detections(
    detections: SequenceDetections,
    truth: &GroundTruth,
) -> Result<SequenceReport> {
    let records: Vec<QueryRecord> = detections
        .queries
        .iter()
        .map(|q| QueryRecord::from_query(q, truth))
        .collect();
    let curve = pr_curve(&records)?;
    let metrics = f1_ep(&curve);
    Ok(SequenceReport {
        queries: detections.queries,
        records,
        curve,
        metrics,
        timing: detections.timing,
    })
}

/// Full pipeline over one sequence: describe, detect, score.
pub fn run_sequence(
    scans: &[PointCloud],
    poses: &[Pose],
    dcfg: &DescriptorConfig,
    rcfg: &RetrievalConfig,
    gtcfg: &GroundTruthConfig,
) -> Result<SequenceReport> {
    if scans.len() != poses.len() {
        return Err(NddError::CountMismatch {
            count: scans.len(),
            poses: poses.len(),
        });
    }
    dcfg.validate()?;
    let truth = label_ground_truth(poses, gtcfg);
    let descriptors = describe_sequence(scans, dcfg);
    let detections = detect_sequence(&descriptors, rcfg, gtcfg.exclusion_window)?;
    evaluate_detections(detections, &truth)
}

/// [`run_sequence`] over scan files, describing them as they are read.
pub fn run_sequence_files<P: AsRef<Path> + Sync>(
    paths: &[P],
    poses: &[Pose],
    dcfg: &DescriptorConfig,
    rcfg: &RetrievalConfig,
    gtcfg: &GroundTruthConfig,
) -> Result<SequenceReport> {
    if paths.len() != poses.len() {
        return Err(NddError::CountMismatch {
            count: paths.len(),
            poses: poses.len(),
        });
    }
    dcfg.validate()?;
    let truth = label_ground_truth(poses, gtcfg);
    let descriptors = describe_scan_files(paths, dcfg)?;
    let detections = detect_sequence(&descriptors, rcfg, gtcfg.exclusion_window)?;
    evaluate_detections(detections, &truth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub encoding: Encoding,
    pub matcher: Matcher,
    pub metrics: Metrics,
}

impl AblationRow {
    pub fn tag(&self) -> String {
        format!("{}/{}", self.encoding, self.matcher)
    }
}

/// Runs every encoding x matcher combination; rows are ordered encoding-major
/// in [`Encoding::ALL`] order, `cos` before `corr`.
pub fn ablation_matrix(
    scans: &[PointCloud],
    poses: &[Pose],
    base_dcfg: &DescriptorConfig,
    base_rcfg: &RetrievalConfig,
    gtcfg: &GroundTruthConfig,
) -> Result<Vec<AblationRow>> {
    if scans.len() != poses.len() {
        return Err(NddError::CountMismatch {
            count: scans.len(),
            poses: poses.len(),
        });
    }
    ablate_with(poses, base_dcfg, base_rcfg, gtcfg, |cfg| {
        Ok(describe_sequence(scans, cfg))
    })
}

/// [`ablation_matrix`] over scan files; each file is read once per encoding.
pub fn ablation_matrix_files<P: AsRef<Path> + Sync>(
    paths: &[P],
    poses: &[Pose],
    base_dcfg: &DescriptorConfig,
    base_rcfg: &RetrievalConfig,
    gtcfg: &GroundTruthConfig,
) -> Result<Vec<AblationRow>> {
    if paths.len() != poses.len() {
        return Err(NddError::CountMismatch {
            count: paths.len(),
            poses: poses.len(),
        });
    }
    ablate_with(poses, base_dcfg, base_rcfg, gtcfg, |cfg| {
        describe_scan_files(paths, cfg)
    })
}

fn ablate_with(
    poses: &[Pose],
    base_dcfg: &DescriptorConfig,
    base_rcfg: &RetrievalConfig,
    gtcfg: &GroundTruthConfig,
    describe: impl Fn(&DescriptorConfig) -> Result<Vec<(Descriptor, f64)>>,
) -> Result<Vec<AblationRow>> {
    let truth = label_ground_truth(poses, gtcfg);
    let mut rows = Vec::with_capacity(8);
    for encoding in Encoding::ALL {
        let dcfg = DescriptorConfig {
            encoding,
            ..base_dcfg.clone()
        };
        dcfg.validate()?;
        // built once, scored under both matchers
        let descriptors = describe(&dcfg)?;
        for matcher in Matcher::ALL {
            let rcfg = RetrievalConfig {
                matcher,
                ..base_rcfg.clone()
            };
            let detections = detect_sequence(&descriptors, &rcfg, gtcfg.exclusion_window)?;
            let report = evaluate_detections(detections, &truth)?;
            rows.push(AblationRow {
                encoding,
                matcher,
                metrics: report.metrics,
            });
        }
    }
    Ok(rows)
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:?}")
    }
}

/// `threshold,precision,recall`
pub fn write_pr_curve(path: impl AsRef<Path>, curve: &PrCurve) -> Result<()> {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(p.threshold),
            fmt_f64(p.precision),
            fmt_f64(p.recall)
        ));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// `config_tag,f1,ep`
pub fn write_metrics(path: impl AsRef<Path>, rows: &[(String, Metrics)]) -> Result<()> {
    let mut out = String::from("config_tag,f1,ep\n");
    for (tag, m) in rows {
        out.push_str(&format!("{tag},{},{}\n", fmt_f64(m.f1), fmt_f64(m.ep)));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Per-query records: the detection-log columns plus the truth labels.
pub fn write_records(
    path: impl AsRef<Path>,
    records: &[QueryRecord],
    threshold: f64,
) -> Result<()> {
    let mut out =
        String::from("query_id,matched_id,similarity,shift,accepted,has_true_loop,match_is_true\n");
    for r in records {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.query_id,
            opt(r.best_match_id),
            fmt_f64(r.similarity),
            opt(r.shift),
            r.similarity >= threshold,
            r.has_true_loop,
            r.match_is_true
        ));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// `frame,desc_ms,retrieval_ms`
pub fn write_timing(path: impl AsRef<Path>, timing: &[FrameTiming]) -> Result<()> {
    let mut out = String::from("frame,desc_ms,retrieval_ms\n");
    for t in timing {
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            t.frame, t.desc_ms, t.retrieval_ms
        ));
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_poses(n: usize, step: f64) -> Vec<Pose> {
        (0..n)
            .map(|i| Pose::from_planar(i as f64 * step, 0.0, 0.0, 0.0))
            .collect()
    }

    fn brute_truth(poses: &[Pose], cfg: &GroundTruthConfig) -> Vec<Vec<FrameId>> {
        (0..poses.len())
            .map(|q| {
                (0..poses.len())
                    .filter(|&m| m + cfg.exclusion_window <= q)
                    .filter(|&m| poses[q].distance_to(&poses[m]) < cfg.revisit_radius)
                    .collect()
            })
            .collect()
    }

    fn record(sim: f64, has: bool, good: bool) -> QueryRecord {
        QueryRecord {
            query_id: 0,
            best_match_id: Some(0),
            similarity: sim,
            shift: Some(0),
            has_true_loop: has,
            match_is_true: good,
        }
    }

    #[test]
    fn straight_line_has_no_loops() {
        let truth = label_ground_truth(&line_poses(300, 1.0), &GroundTruthConfig::default());
        assert_eq!(truth.positives(), 0);
    }

    #[test]
    fn return_to_start_is_labelled() {
        let mut poses = Vec::new();
        for i in 0..100 {
            let a = i as f64 / 100.0 * std::f64::consts::TAU;
            poses.push(Pose::from_planar(50.0 * a.cos(), 50.0 * a.sin(), 0.0, a));
        }
        poses.push(poses[0]);
        poses.push(poses[1]);
        let truth = label_ground_truth(&poses, &GroundTruthConfig::default());
        assert!(truth.has_true_loop[100] && truth.has_true_loop[101]);
        assert!(truth.true_matches[100].contains(&0));
        assert!(!truth.has_true_loop[50]);
    }

    #[test]
    fn labels_match_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..20 {
            let mut pos = (0.0f64, 0.0f64);
            let poses: Vec<Pose> = (0..400)
                .map(|_| {
                    pos.0 += rng.random_range(-3.0..3.0);
                    pos.1 += rng.random_range(-3.0..3.0);
                    Pose::from_planar(pos.0, pos.1, rng.random_range(-0.5..0.5), 0.0)
                })
                .collect();
            let cfg = GroundTruthConfig {
                revisit_radius: 2.0 + trial as f64 * 0.3,
                exclusion_window: 10 + trial,
            };
            let truth = label_ground_truth(&poses, &cfg);
            assert_eq!(truth.true_matches, brute_truth(&poses, &cfg));
        }
    }

    #[test]
    fn detection_outcomes() {
        assert_eq!(
            score_detection(&record(0.9, true, true), 0.65),
            Outcome::TruePositive
        );
        assert_eq!(
            score_detection(&record(0.9, true, false), 0.65),
            Outcome::FalsePositive
        );
        assert_eq!(
            score_detection(&record(0.3, true, false), 0.65),
            Outcome::FalseNegative
        );
        assert_eq!(
            score_detection(&record(0.3, false, false), 0.65),
            Outcome::TrueNegative
        );
    }

    #[test]
    fn record_truth_uses_pose_distance() {
        let poses = vec![
            Pose::from_planar(0.0, 0.0, 0.0, 0.0),
            Pose::from_planar(50.0, 0.0, 0.0, 0.0),
            Pose::from_planar(2.0, 0.0, 0.0, 0.0),
        ];
        let truth = label_ground_truth(
            &poses,
            &GroundTruthConfig {
                revisit_radius: 5.0,
                exclusion_window: 1,
            },
        );
        let q = |m| LoopQuery {
            query_id: 2,
            best: Some(crate::retrieval::MatchResult {
                matched_frame: m,
                similarity: 0.9,
                shift: 0,
            }),
            accepted: true,
        };
        assert!(QueryRecord::from_query(&q(0), &truth).match_is_true);
        assert!(!QueryRecord::from_query(&q(1), &truth).match_is_true);
    }

    #[test]
    fn perfect_detector_metrics() {
        let mut records = vec![record(1.0, true, true); 10];
        records.extend(vec![record(0.0, false, false); 30]);
        let curve = pr_curve(&records).unwrap();
        assert!(curve
            .points
            .iter()
            .any(|p| p.precision == 1.0 && p.recall == 1.0));
        let m = f1_ep(&curve);
        assert_eq!((m.f1, m.ep), (1.0, 1.0));
    }

    #[test]
    fn constant_wrong_detector() {
        let records = vec![record(0.5, true, false); 8];
        let curve = pr_curve(&records).unwrap();
        let at = curve.points.iter().find(|p| p.threshold == 0.5).unwrap();
        assert_eq!(at.precision, 0.0);
        let m = f1_ep(&curve);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.ep, 0.0);
    }

    #[test]
    fn f1_formula_and_missing_p100() {
        let curve = PrCurve {
            points: vec![
                PrPoint {
                    threshold: 0.1,
                    precision: 0.5,
                    recall: 0.5,
                },
                PrPoint {
                    threshold: 0.2,
                    precision: 0.4,
                    recall: 0.25,
                },
                PrPoint {
                    threshold: f64::INFINITY,
                    precision: 0.9,
                    recall: 0.0,
                },
            ],
        };
        let m = f1_ep(&curve);
        assert!((m.f1 - 0.5).abs() < 1e-15);
        assert_eq!(m.r_p100, 0.0);
        assert_eq!(m.ep, 0.5 * 0.4);
    }

    #[test]
    fn no_ground_truth_errors() {
        let records = vec![record(0.9, false, false); 3];
        assert!(matches!(pr_curve(&records), Err(NddError::NoGroundTruth)));
    }

    fn oracle_curve(records: &[QueryRecord]) -> Vec<PrPoint> {
        let positives = records.iter().filter(|r| r.has_true_loop).count() as f64;
        let mut thresholds: Vec<f64> = records
            .iter()
            .map(|r| r.similarity)
            .filter(|s| s.is_finite())
            .collect();
        thresholds.push(f64::INFINITY);
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds
            .into_iter()
            .map(|t| {
                let tp = records
                    .iter()
                    .filter(|r| score_detection(r, t) == Outcome::TruePositive)
                    .count();
                let fp = records
                    .iter()
                    .filter(|r| score_detection(r, t) == Outcome::FalsePositive)
                    .count();
                PrPoint {
                    threshold: t,
                    precision: if tp + fp == 0 {
                        1.0
                    } else {
                        tp as f64 / (tp + fp) as f64
                    },
                    recall: tp as f64 / positives,
                }
            })
            .collect()
    }

    #[test]
    fn curve_matches_sort_and_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let records: Vec<QueryRecord> = (0..rng.random_range(1..80))
                .map(|_| {
                    let has = rng.random_bool(0.4);
                    let sim = if rng.random_bool(0.1) {
                        f64::NEG_INFINITY
                    } else {
                        (rng.random_range(0..20) as f64) / 20.0
                    };
                    record(sim, has, has && rng.random_bool(0.7))
                })
                .collect();
            match pr_curve(&records) {
                Ok(curve) => {
                    assert_eq!(curve.points, oracle_curve(&records));
                    for w in curve.points.windows(2) {
                        assert!(w[0].recall >= w[1].recall);
                    }
                }
                Err(_) => assert!(records.iter().all(|r| !r.has_true_loop)),
            }
        }
    }

    #[test]
    fn csv_writers() {
        let dir = tempfile::tempdir().unwrap();
        let curve = pr_curve(&[record(0.8, true, true), record(0.4, false, false)]).unwrap();
        write_pr_curve(dir.path().join("pr.csv"), &curve).unwrap();
        let text = std::fs::read_to_string(dir.path().join("pr.csv")).unwrap();
        assert_eq!(
            text,
            "threshold,precision,recall\n0.4,0.5,1.0\n0.8,1.0,1.0\ninf,1.0,0.0\n"
        );
        let m = f1_ep(&curve);
        write_metrics(dir.path().join("m.csv"), &[("P+E/corr".into(), m)]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(text, "config_tag,f1,ep\nP+E/corr,1.0,1.0\n");
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let scans = vec![PointCloud::default(); 3];
        let poses = line_poses(2, 1.0);
        let err = run_sequence(
            &scans,
            &poses,
            &DescriptorConfig::default(),
            &RetrievalConfig::default(),
            &GroundTruthConfig::default(),
        );
        assert!(matches!(
            err,
            Err(NddError::CountMismatch { count: 3, poses: 2 })
        ));
    }

    #[test]
    fn no_eligible_queries_surface_no_ground_truth() {
        let scans = vec![PointCloud::default(); 20];
        let poses = line_poses(20, 0.0);
        let err = run_sequence(
            &scans,
            &poses,
            &DescriptorConfig::default(),
            &RetrievalConfig::default(),
            &GroundTruthConfig::default(),
        );
        assert!(matches!(err, Err(NddError::NoGroundTruth)));
    }
}
