//! Parallel vs sequential description, plus per-query cost of each alignment
//! and retrieval strategy. Build with `--no-default-features` to compare
//! against a binary without rayon at all.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ndd_core::descriptor::build_descriptors;
use ndd_core::synthbench::{generate_scene_clear_of, render_scan, SceneSpec, TrajectorySpec};
use ndd_core::{
    par, AlignmentStrategy, Descriptor, DescriptorConfig, DescriptorDatabase, PointCloud,
    RetrievalConfig, RetrievalStrategy,
};

fn scans(n: usize) -> Vec<PointCloud> {
    let spec = SceneSpec {
        points_per_scan: 12_000,
        ..SceneSpec::default()
    };
    let traj = TrajectorySpec {
        num_frames: n,
        revisits: Vec::new(),
        ..TrajectorySpec::default()
    };
    let world = generate_scene_clear_of(&spec, std::slice::from_ref(&traj.waypoints), 5.0);
    traj.plan()
        .iter()
        .map(|f| render_scan(&world, &f.pose, f.sample_key))
        .collect()
}

fn description(c: &mut Criterion) {
    let clouds = scans(16);
    let cfg = DescriptorConfig::default();
    let mut g = c.benchmark_group("describe_16_scans");
    g.sample_size(10);
    for parallel in [false, true] {
        let name = if parallel { "parallel" } else { "sequential" };
        g.bench_function(name, |b| {
            par::set_parallel(parallel);
            b.iter(|| black_box(build_descriptors(&clouds, &cfg)));
        });
    }
    par::set_parallel(true);
    g.finish();
}

fn database(n: usize) -> (DescriptorDatabase, Vec<Descriptor>) {
    let clouds = scans(n);
    let descs = build_descriptors(&clouds, &DescriptorConfig::default());
    let mut db = DescriptorDatabase::new(50);
    for (i, d) in descs.iter().enumerate() {
        db.insert(i, d.clone()).unwrap();
    }
    db.rebuild_index();
    (db, descs)
}

fn detection(c: &mut Criterion) {
    let (db, descs) = database(400);
    let query = &descs[descs.len() / 3];
    let query_id = db.len() + 100;

    let mut g = c.benchmark_group("alignment");
    for alignment in AlignmentStrategy::ALL {
        let cfg = RetrievalConfig {
            alignment,
            ..RetrievalConfig::default()
        };
        for parallel in [false, true] {
            par::set_parallel(parallel);
            let id = BenchmarkId::new(alignment.name(), if parallel { "par" } else { "seq" });
            g.bench_with_input(id, &cfg, |b, cfg| {
                b.iter(|| black_box(db.detect_loop(query_id, query, cfg)))
            });
        }
    }
    g.finish();

    let mut g = c.benchmark_group("retrieval");
    for retrieval in RetrievalStrategy::ALL {
        let cfg = RetrievalConfig {
            retrieval,
            ..RetrievalConfig::default()
        };
        for parallel in [false, true] {
            par::set_parallel(parallel);
            let id = BenchmarkId::new(retrieval.name(), if parallel { "par" } else { "seq" });
            g.bench_with_input(id, &cfg, |b, cfg| {
                b.iter(|| black_box(db.detect_loop(query_id, query, cfg)))
            });
        }
    }
    par::set_parallel(true);
    g.finish();
}

criterion_group!(benches, description, detection);
criterion_main!(benches);
