//! Command-line front end: training, reconstruction, evaluation, data
//! generation and the equivariance audit.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 non-finite training
//! loss, 3 a claimed invariance failed the audit.

pub mod audit;
pub mod checkpoint;
pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use egif::geometry::io::{read_cloud, write_xyz};
use egif::implicitnet::EquivarianceMode;
use egif::recon::{eval_reconstruction, evaluate_grid, marching_cubes, EvalSettings, ModelField, DEFAULT_CHUNK};
use egif::training::{random_shape, synth_shape, train_with, write_metrics_csv, ShapeFamily, ShapeSpec, TrainingError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use audit::{AuditClass, AuditRecord, Auditor, Probe, WorstCase};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NON_FINITE: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;

/// File names written by `train` into its output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.egif";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "egif", version, about = "Occupancy fields from sparse point clouds with built-in equivariance")]
pub struct Cli {
    /// Worker threads [default: hardware count]. EGIF_THREADS overrides this flag
    #[arg(long, global = true, value_name = "U32")]
    pub threads: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint and a metrics CSV
    Train(TrainArgs),
    /// Extract a mesh from a model conditioned on a point cloud
    Reconstruct(ReconstructArgs),
    /// Measure output changes under random transforms of each class
    Audit(AuditArgs),
    /// Write synthetic point clouds and their exact shape specs
    GenData(GenDataArgs),
    /// Score reconstructions of a generated data set
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration [default: built-in defaults]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint.egif and metrics.csv
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// RNG seed [default: from config, else 0]
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Equivariance mode [default: from config, else sim]
    #[arg(long, value_name = "plain|so3|se3|sim")]
    pub mode: Option<EquivarianceMode>,
    /// Neighbors per graph convolution [default: from config, else 20]
    #[arg(long, value_name = "U32")]
    pub k: Option<u32>,
    /// Training iterations [default: from config, else 3000]
    #[arg(long, value_name = "USIZE")]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Checkpoint written by `train`
    pub checkpoint: PathBuf,
    /// Input cloud (.xyz, or .ply)
    pub cloud: PathBuf,
    /// Output OBJ mesh
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// JSON run configuration supplying reconstruction settings
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Lattice points per axis [default: from config, else 64]
    #[arg(long, value_name = "U32")]
    pub resolution: Option<u32>,
    /// Occupancy threshold of the surface [default: from config, else 0.5]
    #[arg(long, value_name = "F64")]
    pub tau: Option<f64>,
    /// Expected checkpoint mode; a different mode is an error [default: any]
    #[arg(long, value_name = "plain|so3|se3|sim")]
    pub mode: Option<EquivarianceMode>,
    /// Expected neighbor count; a different k is an error [default: any]
    #[arg(long, value_name = "U32")]
    pub k: Option<u32>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Checkpoint written by `train`
    pub checkpoint: PathBuf,
    /// Mode whose claims decide the exit code [default: the checkpoint's mode]
    #[arg(long, value_name = "plain|so3|se3|sim")]
    pub mode: Option<EquivarianceMode>,
    /// Transforms per class [default: from config, else 100]
    #[arg(long, value_name = "USIZE")]
    pub transforms: Option<usize>,
    /// Largest accepted absolute output change [default: from config, else 1e-8]
    #[arg(long, value_name = "F64")]
    pub tolerance: Option<f64>,
    /// Seed of the probe cloud and the transforms [default: from config, else 0]
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Audit only this class [default: all classes]
    #[arg(long, value_enum)]
    pub class: Option<AuditClass>,
    /// JSON run configuration supplying audit settings
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout; a failing audit also
    /// writes the worst transform next to it with extension .worst.json
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Evaluate the single transform stored in a .worst.json file
    #[arg(long, value_name = "PATH")]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Shape family: sphere, sphere_box or mixed
    #[arg(long, default_value = "sphere_box")]
    pub family: ShapeFamily,
    /// Number of shapes
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// RNG seed
    #[arg(long, value_name = "U64", default_value_t = 0)]
    pub seed: u64,
    /// Surface points per cloud
    #[arg(long, default_value_t = 300)]
    pub points: usize,
    /// Standard deviation of the Gaussian noise added to each point
    #[arg(long, default_value_t = 0.005)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    pub checkpoint: PathBuf,
    /// Directory written by `gen-data`
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// JSON run configuration supplying reconstruction settings
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Lattice points per axis [default: from config, else 64]
    #[arg(long, value_name = "U32")]
    pub resolution: Option<u32>,
    /// Occupancy threshold [default: from config, else 0.5]
    #[arg(long, value_name = "F64")]
    pub tau: Option<f64>,
    /// Seed of the evaluation samples
    #[arg(long, value_name = "U64", default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_ERROR;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_ERROR;
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Audit(a) => cmd_audit(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Eval(a) => cmd_eval(&a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

fn thread_count(flag: Option<u32>) -> anyhow::Result<Option<usize>> {
    let n = match std::env::var("EGIF_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            Some(v.trim().parse::<u32>().with_context(|| format!("EGIF_THREADS={v:?} is not a thread count"))?)
        }
        _ => flag,
    };
    match n {
        Some(0) => bail!("thread count must be at least 1"),
        n => Ok(n.map(|n| n as usize)),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("cannot write {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(k) = a.k {
        cfg.k = k as usize;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    let tc = cfg.training_config();
    tc.validate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let model = egif::implicitnet::Model::init(tc.model.clone(), tc.seed)?;
    let outcome = train_with(&tc, model, |row| {
        eprintln!("step {:>6}  loss {:.5}  val_iou {:.4}  lr {:e}", row.step, row.loss, row.val_iou, row.lr);
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ TrainingError::NonFiniteLoss { .. }) => {
            eprintln!("error: {e}; no checkpoint written");
            return Ok(EXIT_NON_FINITE);
        }
        Err(e) => return Err(e.into()),
    };
    let ck = Checkpoint { model: outcome.model, seed: tc.seed, iterations: tc.iterations };
    let ck_path = a.out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    let csv_path = a.out.join(METRICS_FILE);
    let mut w = create(&csv_path)?;
    write_metrics_csv(&mut w, &outcome.log)?;
    w.flush()?;
    println!("wrote {} and {}", ck_path.display(), csv_path.display());
    if let Some(last) = outcome.log.last() {
        println!("final loss {:.5}, validation IoU {:.4}", last.loss, last.val_iou);
    }
    Ok(EXIT_OK)
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> anyhow::Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mc = &ck.model.config;
    if let Some(m) = a.mode.filter(|&m| m != mc.mode) {
        bail!("checkpoint mode is {}, expected {m}", mc.mode);
    }
    if let Some(k) = a.k.filter(|&k| k as usize != mc.k) {
        bail!("checkpoint uses k = {}, expected {k}", mc.k);
    }
    let cloud = read_cloud(&a.cloud).with_context(|| format!("cannot read {}", a.cloud.display()))?;
    let resolution = a.resolution.map_or(cfg.reconstruction.resolution, |r| r as usize);
    let tau = a.tau.unwrap_or(cfg.reconstruction.tau);
    let field = ModelField::new(&ck.model, &cloud)?;
    let grid = evaluate_grid(&field, resolution, cfg.reconstruction.bounds, DEFAULT_CHUNK)?;
    let mesh = marching_cubes(&grid, tau)?;
    let mut w = create(&a.out)?;
    mesh.write_obj(&mut w)?;
    w.flush()?;
    if mesh.is_empty() {
        eprintln!("warning: no lattice point reaches tau = {tau}; wrote an empty mesh");
    }
    println!("{} vertices, {} faces -> {}", mesh.vertices.len(), mesh.triangles.len(), a.out.display());
    Ok(EXIT_OK)
}

/// Contents of a `.worst.json` replay file.
#[derive(Debug, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayCase {
    pub mode: EquivarianceMode,
    pub probe_seed: u64,
    pub cloud_points: usize,
    pub queries: usize,
    pub worst: WorstCase,
}

pub fn cmd_audit(a: &AuditArgs) -> anyhow::Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mode = a.mode.unwrap_or(ck.model.config.mode);
    let s = &cfg.audit;
    let tolerance = a.tolerance.unwrap_or(s.tolerance);
    if !(tolerance >= 0.0) {
        bail!("tolerance must be non-negative, got {tolerance}");
    }
    if let Some(path) = &a.replay {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let case: ReplayCase =
            serde_json::from_str(&text).with_context(|| format!("invalid replay file {}", path.display()))?;
        case.worst.transform.validate()?;
        let probe = Probe::generate(case.probe_seed, case.cloud_points, case.queries)?;
        let auditor = Auditor::new(&ck.model, mode, &probe, tolerance)?;
        let dev = auditor.deviation(&case.worst.transform)?;
        let class = case.worst.class;
        let record = AuditRecord { mode, class, n: 1, max_abs_dev: dev, pass: dev <= tolerance };
        write_json(a.out.as_deref(), &[&record])?;
        return Ok(if class.claimed_by(mode) && !record.pass { EXIT_AUDIT } else { EXIT_OK });
    }
    let n = a.transforms.unwrap_or(s.transforms);
    let seed = a.seed.unwrap_or(s.seed);
    let probe = Probe::generate(seed, s.cloud_points, s.queries)?;
    let auditor = Auditor::new(&ck.model, mode, &probe, tolerance)?;
    let results = match a.class {
        Some(c) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            vec![auditor.class(c, n, &mut rng)?]
        }
        None => auditor.all(n, seed)?,
    };
    let records: Vec<&AuditRecord> = results.iter().map(|r| &r.record).collect();
    write_json(a.out.as_deref(), &records)?;
    for r in &records {
        let lane = if r.class.claimed_by(mode) { "claimed" } else { "not claimed" };
        let verdict = if r.pass { "pass" } else { "FAIL" };
        eprintln!("{:<12} {:<12} max |dF| = {:.3e}  {verdict}", r.class.name(), lane, r.max_abs_dev);
    }
    let worst = results
        .iter()
        .filter(|r| r.record.class.claimed_by(mode) && !r.record.pass)
        .filter_map(|r| r.worst.clone())
        .max_by(|x, y| x.deviation.total_cmp(&y.deviation));
    let Some(worst) = worst else {
        return Ok(EXIT_OK);
    };
    let case = ReplayCase { mode, probe_seed: seed, cloud_points: s.cloud_points, queries: s.queries, worst };
    let text = serde_json::to_string_pretty(&case)?;
    eprintln!("claimed invariance violated; worst case:\n{text}");
    if let Some(out) = &a.out {
        let path = out.with_extension("worst.json");
        std::fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
        eprintln!("replay with --replay {}", path.display());
    }
    Ok(EXIT_AUDIT)
}

/// Name stem of the `i`-th generated shape.
pub fn shape_stem(i: usize) -> String {
    format!("shape_{i:04}")
}

pub fn cmd_gen_data(a: &GenDataArgs) -> anyhow::Result<i32> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for i in 0..a.count {
        let spec = random_shape(&mut rng, a.family);
        let cloud = synth_shape(&spec, &mut rng, a.points, a.noise)?;
        let stem = a.out.join(shape_stem(i));
        let xyz = stem.with_extension("xyz");
        let mut w = create(&xyz)?;
        write_xyz(&mut w, cloud.points())?;
        let json = stem.with_extension("json");
        std::fs::write(&json, serde_json::to_string_pretty(&spec)? + "\n")
            .with_context(|| format!("cannot write {}", json.display()))?;
    }
    println!("wrote {} shapes to {}", a.count, a.out.display());
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct ShapeScore {
    name: String,
    iou: f64,
    /// `null` when the mesh is empty.
    chamfer_l1: Option<f64>,
    vertices: usize,
    triangles: usize,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    shapes: Vec<ShapeScore>,
    mean_iou: f64,
    mean_chamfer_l1: Option<f64>,
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let r = &cfg.reconstruction;
    let settings = EvalSettings {
        n_eval: r.n_eval,
        resolution: a.resolution.map_or(r.resolution, |x| x as usize),
        tau: a.tau.unwrap_or(r.tau),
        bounds: r.bounds,
        chamfer_samples: r.chamfer_samples,
        seed: a.seed,
    };
    let mut specs: Vec<PathBuf> = std::fs::read_dir(&a.data)
        .with_context(|| format!("cannot read {}", a.data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    specs.sort();
    if specs.is_empty() {
        bail!("no shape specs (*.json) in {}", a.data.display());
    }
    let mut shapes = Vec::new();
    for spec_path in &specs {
        let text =
            std::fs::read_to_string(spec_path).with_context(|| format!("cannot read {}", spec_path.display()))?;
        let spec: ShapeSpec =
            serde_json::from_str(&text).with_context(|| format!("invalid shape spec {}", spec_path.display()))?;
        spec.validate().with_context(|| format!("invalid shape spec {}", spec_path.display()))?;
        let cloud_path = spec_path.with_extension("xyz");
        let cloud = read_cloud(&cloud_path).with_context(|| format!("cannot read {}", cloud_path.display()))?;
        let field = ModelField::new(&ck.model, &cloud)?;
        let m = eval_reconstruction(&field, &spec, &settings)?;
        let name = spec_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        eprintln!("{name}: IoU {:.4}, Chamfer-L1 {:.5}", m.iou, m.chamfer_l1);
        shapes.push(ShapeScore {
            name,
            iou: m.iou,
            chamfer_l1: m.chamfer_l1.is_finite().then_some(m.chamfer_l1),
            vertices: m.vertices,
            triangles: m.triangles,
        });
    }
    let n = shapes.len() as f64;
    let mean_iou = shapes.iter().map(|s| s.iou).sum::<f64>() / n;
    let mean_chamfer_l1 = shapes.iter().map(|s| s.chamfer_l1).sum::<Option<f64>>().map(|c| c / n);
    write_json(a.out.as_deref(), &EvalReport { shapes, mean_iou, mean_chamfer_l1 })?;
    Ok(EXIT_OK)
}
