//! `ndd`: describe scans, evaluate loop detection, run ablations and timing
//! benchmarks, and generate synthetic sequences.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ndd_core::evaluation::{
    ablation_matrix_files, describe_scan_files, detect_sequence, evaluate_detections,
    label_ground_truth, mean, write_metrics, write_pr_curve, write_records, write_timing,
};
use ndd_core::pointcloud::{load_poses, write_atomic};
use ndd_core::retrieval::write_detection_log;
use ndd_core::synthbench::{
    export_kitti, planted_loop_sequence, RevisitKind, RevisitSpec, SceneSpec, TrajectorySpec,
};
use ndd_core::{
    AlignmentStrategy, DescriptorConfig, Encoding, GroundTruthConfig, Matcher, RetrievalConfig,
    RetrievalStrategy,
};

#[derive(Parser, Debug)]
#[command(
    name = "ndd",
    version,
    about = "Normal distribution descriptors for LiDAR loop closure"
)]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Opts {
    /// Number of rings.
    #[arg(long, global = true, default_value_t = 20)]
    nr: usize,
    /// Number of sectors.
    #[arg(long, global = true, default_value_t = 60)]
    ns: usize,
    #[arg(long, global = true, default_value_t = 80.0)]
    max_range: f64,
    /// Candidates retrieved per query.
    #[arg(long, global = true, default_value_t = 25)]
    k: usize,
    #[arg(long, global = true, default_value_t = 0.65)]
    threshold: f64,
    /// H, E, P or P+E.
    #[arg(long, global = true, default_value = "P+E")]
    encoding: Encoding,
    /// corr or cos.
    #[arg(long, global = true, default_value = "corr")]
    matcher: Matcher,
    /// row_vector, binary_xnor or full_shift.
    #[arg(long, global = true, default_value = "row_vector")]
    alignment: AlignmentStrategy,
    /// key_kdtree or full_linear_scan.
    #[arg(long, global = true, default_value = "key_kdtree")]
    retrieval: RetrievalStrategy,
    /// Align each scan to its planar principal axes.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    pca: bool,
    /// Voxel leaf size in meters; 0 disables downsampling.
    #[arg(long, global = true, default_value_t = 0.25)]
    leaf: f64,
    /// Frames excluded before the query.
    #[arg(long, global = true, default_value_t = 50)]
    exclusion: usize,
    /// True-revisit radius in meters.
    #[arg(long, global = true, default_value_t = 5.0)]
    radius: f64,
    /// Seed for synthetic generation.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "ndd_out")]
    out: PathBuf,
}

impl Opts {
    fn descriptor(&self) -> DescriptorConfig {
        DescriptorConfig {
            num_rings: self.nr,
            num_sectors: self.ns,
            max_range: self.max_range,
            encoding: self.encoding,
            pca_enabled: self.pca,
            downsample_leaf: self.leaf,
            ..DescriptorConfig::default()
        }
    }

    fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            threshold: self.threshold,
            alignment: self.alignment,
            retrieval: self.retrieval,
            matcher: self.matcher,
        }
    }

    fn ground_truth(&self) -> GroundTruthConfig {
        GroundTruthConfig {
            revisit_radius: self.radius,
            exclusion_window: self.exclusion,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build one descriptor file per scan.
    Describe {
        /// A scan file (.bin or .csv) or a directory of scans.
        input: PathBuf,
        /// Write CSV descriptors instead of binary.
        #[arg(long)]
        csv: bool,
    },
    /// Run loop detection over a sequence and score it against poses.
    Eval { scans: PathBuf, poses: PathBuf },
    /// Evaluate every encoding x matcher combination.
    Ablate { scans: PathBuf, poses: PathBuf },
    /// Time description, alignment strategies and retrieval strategies.
    Bench {
        scans: PathBuf,
        /// Alignment strategies to time.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "row_vector,binary_xnor,full_shift"
        )]
        alignments: Vec<AlignmentStrategy>,
        /// Retrieval strategies to time.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "key_kdtree,full_linear_scan"
        )]
        retrievals: Vec<RetrievalStrategy>,
    },
    /// Generate a synthetic sequence with planted revisits in KITTI layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Frames along the base route.
    #[arg(long, default_value_t = 170)]
    base_frames: usize,
    /// same, reverse or yaw<degrees>.
    #[arg(long, default_value = "reverse")]
    revisit: RevisitKind,
    /// Base frames re-driven at the end.
    #[arg(long, default_value_t = 30)]
    revisit_len: usize,
    #[arg(long, default_value_t = 1.0)]
    lateral_offset: f64,
    #[arg(long, default_value_t = 24_000)]
    points: usize,
    #[arg(long, default_value_t = 140)]
    structures: usize,
    #[arg(long, default_value_t = 260.0)]
    area: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    descriptor: DescriptorSnapshot,
    retrieval: RetrievalSnapshot,
    ground_truth: GroundTruthSnapshot,
    seed: u64,
    started_unix: f64,
    finished_unix: f64,
}

#[derive(Serialize)]
struct DescriptorSnapshot {
    num_rings: usize,
    num_sectors: usize,
    max_range: f64,
    min_cell_points: usize,
    encoding: String,
    pca_enabled: bool,
    downsample_leaf: f64,
}

#[derive(Serialize)]
struct RetrievalSnapshot {
    k: usize,
    threshold: f64,
    alignment: String,
    retrieval: String,
    matcher: String,
}

#[derive(Serialize)]
struct GroundTruthSnapshot {
    revisit_radius: f64,
    exclusion_window: usize,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Tracks files written by a command so a failed run can remove them.
struct Run {
    opts: Opts,
    command: String,
    inputs: Vec<String>,
    outputs: Vec<PathBuf>,
    started: f64,
}

impl Run {
    fn new(opts: &Opts, command: &str, inputs: &[&Path]) -> Result<Self> {
        fs::create_dir_all(&opts.out)
            .with_context(|| format!("cannot create output directory {}", opts.out.display()))?;
        Ok(Run {
            opts: opts.clone(),
            command: command.to_string(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: Vec::new(),
            started: unix_now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.opts.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn rollback(&self) {
        for p in &self.outputs {
            let _ = fs::remove_file(p);
        }
    }

    fn finish(mut self) -> Result<()> {
        let d = self.opts.descriptor();
        let r = self.opts.retrieval();
        let g = self.opts.ground_truth();
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            inputs: self.inputs.clone(),
            outputs: self
                .outputs
                .iter()
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect(),
            descriptor: DescriptorSnapshot {
                num_rings: d.num_rings,
                num_sectors: d.num_sectors,
                max_range: d.max_range,
                min_cell_points: d.min_cell_points,
                encoding: d.encoding.to_string(),
                pca_enabled: d.pca_enabled,
                downsample_leaf: d.downsample_leaf,
            },
            retrieval: RetrievalSnapshot {
                k: r.k,
                threshold: r.threshold,
                alignment: r.alignment.to_string(),
                retrieval: r.retrieval.to_string(),
                matcher: r.matcher.to_string(),
            },
            ground_truth: GroundTruthSnapshot {
                revisit_radius: g.revisit_radius,
                exclusion_window: g.exclusion_window,
            },
            seed: self.opts.seed,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let path = self.path("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        write_atomic(&path, json.as_bytes())?;
        Ok(())
    }
}

fn is_scan(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("bin") || e.eq_ignore_ascii_case("csv"))
}

/// Scan files of a directory in name order; a KITTI `velodyne/` subdirectory
/// is used when present.
fn scan_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let dir = if input.join("velodyne").is_dir() {
        input.join("velodyne")
    } else {
        input.to_path_buf()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("cannot read scan directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("cannot list {}", dir.display()))?;
    files.retain(|p| is_scan(p));
    files.sort();
    Ok(files)
}

fn describe(run: &mut Run, input: &Path, csv: bool) -> Result<()> {
    let cfg = run.opts.descriptor();
    cfg.validate()?;
    let files = scan_files(input)?;
    let descriptors = describe_scan_files(&files, &cfg).map_err(|e| name_frame(e, &files))?;
    for (file, (desc, _)) in files.iter().zip(&descriptors) {
        let stem = file.file_stem().unwrap_or_default().to_string_lossy();
        if csv {
            let p = run.path(&format!("{stem}.csv"));
            desc.write_csv(&p)?;
        } else {
            let p = run.path(&format!("{stem}.ndd"));
            desc.write_binary(&p)?;
        }
    }
    eprintln!(
        "described {} scan(s) into {}",
        files.len(),
        run.opts.out.display()
    );
    Ok(())
}

/// Replaces a frame index in a load error with the file it came from.
fn name_frame(e: ndd_core::NddError, files: &[PathBuf]) -> anyhow::Error {
    match e {
        ndd_core::NddError::Frame { frame, source } => anyhow::Error::new(*source)
            .context(format!("failed on scan {}", files[frame].display())),
        other => other.into(),
    }
}

fn load_sequence(scans: &Path, poses: &Path) -> Result<(Vec<PathBuf>, Vec<ndd_core::Pose>)> {
    let files = scan_files(scans)?;
    let poses = load_poses(poses)?;
    if files.len() != poses.len() {
        bail!("{} scans but {} poses", files.len(), poses.len());
    }
    Ok((files, poses))
}

fn eval(run: &mut Run, scans: &Path, poses: &Path) -> Result<()> {
    let (files, poses) = load_sequence(scans, poses)?;
    let dcfg = run.opts.descriptor();
    let rcfg = run.opts.retrieval();
    let gcfg = run.opts.ground_truth();
    dcfg.validate()?;
    rcfg.validate()?;
    let truth = label_ground_truth(&poses, &gcfg);
    let descriptors = describe_scan_files(&files, &dcfg).map_err(|e| name_frame(e, &files))?;
    let detections = detect_sequence(&descriptors, &rcfg, gcfg.exclusion_window)?;
    let report = evaluate_detections(detections, &truth)?;
    let tag = format!("{}/{}", dcfg.encoding, rcfg.matcher);
    write_pr_curve(run.path("pr_curve.csv"), &report.curve)?;
    write_metrics(run.path("metrics.csv"), &[(tag.clone(), report.metrics)])?;
    write_records(run.path("detections.csv"), &report.records, rcfg.threshold)?;
    write_detection_log(run.path("detection_log.csv"), &report.queries)?;
    write_timing(run.path("timing.csv"), &report.timing)?;
    println!(
        "{tag}: F1 {:.4}  EP {:.4}  ({} queries with a true revisit)",
        report.metrics.f1,
        report.metrics.ep,
        truth.positives()
    );
    Ok(())
}

fn ablate(run: &mut Run, scans: &Path, poses: &Path) -> Result<()> {
    let (files, poses) = load_sequence(scans, poses)?;
    let rows = ablation_matrix_files(
        &files,
        &poses,
        &run.opts.descriptor(),
        &run.opts.retrieval(),
        &run.opts.ground_truth(),
    )
    .map_err(|e| name_frame(e, &files))?;
    let mut out = String::from("config_tag,encoding,matcher,f1,ep\n");
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{:?},{:?}\n",
            r.tag(),
            r.encoding,
            r.matcher,
            r.metrics.f1,
            r.metrics.ep
        ));
        println!(
            "{:<10} F1 {:.4}  EP {:.4}",
            r.tag(),
            r.metrics.f1,
            r.metrics.ep
        );
    }
    write_atomic(&run.path("ablation.csv"), out.as_bytes())?;
    Ok(())
}

fn bench(
    run: &mut Run,
    scans: &Path,
    alignments: &[AlignmentStrategy],
    retrievals: &[RetrievalStrategy],
) -> Result<()> {
    let files = scan_files(scans)?;
    let dcfg = run.opts.descriptor();
    dcfg.validate()?;
    let base = run.opts.retrieval();
    let exclusion = run.opts.exclusion;
    let descriptors = describe_scan_files(&files, &dcfg).map_err(|e| name_frame(e, &files))?;
    let desc_ms = mean(descriptors.iter().map(|d| d.1));

    let mut out = String::from("kind,strategy,frames,mean_desc_ms,mean_retrieval_ms\n");
    let mut time = |kind: &str, name: String, rcfg: RetrievalConfig| -> Result<()> {
        let t0 = Instant::now();
        let det = detect_sequence(&descriptors, &rcfg, exclusion)?;
        let retrieval_ms = mean(det.timing.iter().map(|t| t.retrieval_ms));
        out.push_str(&format!(
            "{kind},{name},{},{desc_ms:.6},{retrieval_ms:.6}\n",
            descriptors.len()
        ));
        println!(
            "{kind:<9} {name:<17} desc {desc_ms:.3} ms  retrieval {retrieval_ms:.3} ms  ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    };
    for &alignment in alignments {
        time(
            "alignment",
            alignment.to_string(),
            RetrievalConfig {
                alignment,
                ..base.clone()
            },
        )?;
    }
    for &retrieval in retrievals {
        time(
            "retrieval",
            retrieval.to_string(),
            RetrievalConfig {
                retrieval,
                ..base.clone()
            },
        )?;
    }
    write_atomic(&run.path("bench.csv"), out.as_bytes())?;
    Ok(())
}

fn synth(run: &mut Run, args: &SynthArgs) -> Result<()> {
    let scene = SceneSpec {
        seed: run.opts.seed,
        area: args.area,
        num_structures: args.structures,
        points_per_scan: args.points,
        noise_sigma: args.noise,
        sensor_range: run.opts.max_range,
    };
    let traj = TrajectorySpec {
        num_frames: args.base_frames,
        revisits: if args.revisit_len == 0 {
            Vec::new()
        } else {
            vec![RevisitSpec {
                start: 0,
                len: args.revisit_len,
                kind: args.revisit,
                lateral_offset: args.lateral_offset,
                resample: true,
            }]
        },
        ..TrajectorySpec::default()
    };
    let seq = planted_loop_sequence(&scene, &traj, &run.opts.ground_truth())?;
    for i in 0..seq.scans.len() {
        run.path(&format!("velodyne/{i:06}.bin"));
    }
    run.path("poses.txt");
    run.path("truth.csv");
    export_kitti(&seq, &run.opts.out)?;
    println!(
        "wrote {} scans ({} with a true revisit) to {}",
        seq.scans.len(),
        seq.truth.positives(),
        run.opts.out.display()
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NDD_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("NDD_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("NDD_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let opts = &cli.opts;
    let (name, inputs): (&str, Vec<&Path>) = match &cli.command {
        Command::Describe { input, .. } => ("describe", vec![input]),
        Command::Eval { scans, poses } => ("eval", vec![scans, poses]),
        Command::Ablate { scans, poses } => ("ablate", vec![scans, poses]),
        Command::Bench { scans, .. } => ("bench", vec![scans]),
        Command::Synth(_) => ("synth", vec![]),
    };
    let mut run = Run::new(opts, name, &inputs)?;
    let result = match &cli.command {
        Command::Describe { input, csv } => describe(&mut run, input, *csv),
        Command::Eval { scans, poses } => eval(&mut run, scans, poses),
        Command::Ablate { scans, poses } => ablate(&mut run, scans, poses),
        Command::Bench {
            scans,
            alignments,
            retrievals,
        } => bench(&mut run, scans, alignments, retrievals),
        Command::Synth(args) => synth(&mut run, args),
    };
    match result {
        Ok(()) => run.finish(),
        Err(e) => {
            run.rollback();
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
