use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ndd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndd"))
        .args(args)
        .env("NDD_THREADS", "2")
        .output()
        .expect("run ndd")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic sequence: 120 base frames plus 30 reverse revisits.
fn synth(dir: &Path, seed: &str) {
    ok(&ndd(&[
        "synth",
        "--out",
        p(dir),
        "--seed",
        seed,
        "--base-frames",
        "120",
        "--points",
        "6000",
    ]));
}

fn write_kitti(path: &Path, pts: &[[f32; 4]]) {
    let bytes: Vec<u8> = pts.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).unwrap();
}

#[test]
fn describe_single_scan_gives_default_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let scan = tmp.path().join("000000.bin");
    let pts: Vec<[f32; 4]> = (0..4000)
        .map(|i| {
            let a = i as f32 * 0.37;
            let r = 2.0 + (i % 70) as f32;
            [r * a.cos(), r * a.sin(), (i % 11) as f32 * 0.3, 0.0]
        })
        .collect();
    write_kitti(&scan, &pts);
    let out = tmp.path().join("out");
    ok(&ndd(&["describe", p(&scan), "--out", p(&out)]));
    let bytes = fs::read(out.join("000000.ndd")).unwrap();
    let d = ndd_core::Descriptor::from_bytes(&bytes).unwrap();
    assert_eq!(d.shape(), (40, 60));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["descriptor"]["num_rings"], 20);
    assert_eq!(manifest["command"], "describe");
}

#[test]
fn describe_empty_directory_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("scans");
    fs::create_dir(&input).unwrap();
    let out = tmp.path().join("out");
    ok(&ndd(&["describe", p(&input), "--out", p(&out)]));
    let files: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(files, vec!["manifest.json"]);
}

#[test]
fn malformed_scan_fails_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("scans");
    fs::create_dir(&input).unwrap();
    write_kitti(&input.join("000000.bin"), &[[1.0, 2.0, 3.0, 0.0]; 10]);
    fs::write(input.join("000001.bin"), [0u8; 10]).unwrap();
    let out = tmp.path().join("out");
    let res = ndd(&["describe", p(&input), "--out", p(&out)]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("000001.bin"), "{err}");
    // nothing partial is left behind
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn synth_is_deterministic_and_marks_reverse_loops() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "11");
    synth(&b, "11");
    let scans: Vec<_> = fs::read_dir(a.join("velodyne")).unwrap().collect();
    assert_eq!(scans.len(), 150);
    for name in [
        "poses.txt",
        "truth.csv",
        "velodyne/000000.bin",
        "velodyne/000149.bin",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let truth = fs::read_to_string(a.join("truth.csv")).unwrap();
    let reverse: Vec<&str> = truth.lines().filter(|l| l.ends_with(",reverse")).collect();
    assert_eq!(reverse.len(), 30);
    assert!(reverse.iter().all(|l| l.contains(",true,")));
}

#[test]
fn default_synth_has_200_scans() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    ok(&ndd(&["synth", "--out", p(&out), "--points", "2000"]));
    assert_eq!(fs::read_dir(out.join("velodyne")).unwrap().count(), 200);
    let poses = fs::read_to_string(out.join("poses.txt")).unwrap();
    assert_eq!(poses.lines().count(), 200);
}

#[test]
fn eval_writes_reports_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq, "5");
    let poses = seq.join("poses.txt");
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    ok(&ndd(&["eval", p(&seq), p(&poses), "--out", p(&r1)]));
    ok(&ndd(&["eval", p(&seq), p(&poses), "--out", p(&r2)]));
    for name in [
        "pr_curve.csv",
        "metrics.csv",
        "detections.csv",
        "timing.csv",
        "manifest.json",
    ] {
        assert!(r1.join(name).is_file(), "{name} missing");
    }
    for name in ["pr_curve.csv", "metrics.csv", "detections.csv"] {
        assert_eq!(
            fs::read(r1.join(name)).unwrap(),
            fs::read(r2.join(name)).unwrap(),
            "{name}"
        );
    }
    let metrics = fs::read_to_string(r1.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "P+E/corr");
    let f1: f64 = row[1].parse().unwrap();
    assert!(f1 >= 0.95, "{metrics}");

    // oracle retrieval mode is plumbed through
    let r3 = tmp.path().join("r3");
    ok(&ndd(&[
        "eval",
        p(&seq),
        p(&poses),
        "--retrieval",
        "full_linear_scan",
        "--out",
        p(&r3),
    ]));
    let manifest = fs::read_to_string(r3.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"full_linear_scan\""));
}

#[test]
fn eval_rejects_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq, "5");
    let poses = fs::read_to_string(seq.join("poses.txt")).unwrap();
    let short: String = poses.lines().take(100).map(|l| format!("{l}\n")).collect();
    fs::write(tmp.path().join("short.txt"), short).unwrap();
    let res = ndd(&[
        "eval",
        p(&seq),
        p(&tmp.path().join("short.txt")),
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("150 scans but 100 poses"));
}

#[test]
fn ablate_writes_eight_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq, "9");
    let out = tmp.path().join("ab");
    ok(&ndd(&[
        "ablate",
        p(&seq),
        p(&seq.join("poses.txt")),
        "--out",
        p(&out),
    ]));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 8);
    let tags: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    for enc in ["H", "E", "P", "P+E"] {
        for m in ["cos", "corr"] {
            assert!(tags.contains(&format!("{enc}/{m}").as_str()));
        }
    }
    for enc in ["H", "E", "P", "P+E"] {
        let f1 = |m: &str| -> f64 {
            rows.iter().find(|r| r[1] == enc && r[2] == m).unwrap()[3]
                .parse()
                .unwrap()
        };
        assert!(f1("corr") >= f1("cos"), "{enc}: {table}");
    }
}

#[test]
fn bench_reports_requested_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq, "3");
    let out = tmp.path().join("b");
    ok(&ndd(&[
        "bench",
        p(&seq),
        "--alignments",
        "row_vector,full_shift",
        "--retrievals",
        "key_kdtree",
        "--out",
        p(&out),
    ]));
    let table = fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("alignment,row_vector,150,"));
    assert!(rows[1].starts_with("alignment,full_shift,150,"));
    assert!(rows[2].starts_with("retrieval,key_kdtree,150,"));
}

#[test]
fn unwritable_output_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let res = ndd(&["synth", "--out", p(&blocker.join("sub")), "--points", "100"]);
    assert!(!res.status.success());
}

#[test]
fn bad_flag_values_are_rejected() {
    let res = ndd(&["synth", "--revisit", "sideways"]);
    assert!(!res.status.success());
    let res = ndd(&["describe", ".", "--encoding", "Q"]);
    assert!(!res.status.success());
}
