//! The `sim`, `map`, `mesh` and `eval` commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use replaymap_core::lidar_sim::{ground_truth_mesh, simulate_scan};
use replaymap_core::mesher::mesh_map;
use replaymap_core::metrics::{evaluate, EvalConfig, Reference};
use replaymap_core::trainer::{posed_scan, process_frame, MapState, TrainError};
use replaymap_core::uncertainty::partition_voxels;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::output::{self, Manifest, ReportWriter, StdClock};
use crate::ply::{self, Encoding};
use crate::scan_io;

#[derive(Debug, Parser)]
#[command(name = "replaymap", version, about = "Incremental neural distance-field mapping from posed LiDAR scans")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a LiDAR sequence in a synthetic scene.
    Sim(SimArgs),
    /// Build a map from posed scans.
    Map(MapArgs),
    /// Extract a mesh from a map checkpoint.
    Mesh(MeshArgs),
    /// Compare a reconstruction against a reference mesh or point cloud.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Output directory (scans/, poses.txt, gt_mesh.ply, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of frames; overrides the config.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// Directory of .ply or .bin scans, processed in file-name order.
    #[arg(long)]
    pub scans: PathBuf,
    /// One 12-value pose line per scan.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write a mesh and a checkpoint every K frames (0 disables).
    #[arg(long)]
    pub mesh_every: Option<usize>,
    /// Continue from a checkpoint; frames it already processed are skipped.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    /// Map checkpoint.
    pub checkpoint: PathBuf,
    /// Output PLY.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Marching-cubes lattice spacing (m); overrides the config.
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reconstructed mesh (PLY).
    pub recon: PathBuf,
    /// Reference mesh, or point cloud when it has no faces (PLY).
    pub reference: PathBuf,
    /// Directory for eval.json and eval.csv; results always go to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Precision/recall distance threshold (m).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Points sampled per mesh.
    #[arg(long)]
    pub points: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sim(a) => cmd_sim(&a),
        Command::Map(a) => cmd_map(&a),
        Command::Mesh(a) => cmd_mesh(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(path)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn encoding(cfg: &RunConfig) -> Encoding {
    if cfg.output.ascii_ply {
        Encoding::Ascii
    } else {
        Encoding::BinaryLe
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn cmd_sim(a: &SimArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    if let Some(f) = a.frames {
        cfg.sim.frames = f;
    }
    cfg.validate()?;
    let scans_dir = a.out.join("scans");
    create_dir(&scans_dir)?;
    let sim = &cfg.sim;
    let poses = sim.orbit.poses(sim.frames);
    for (i, pose) in poses.iter().enumerate() {
        let world = simulate_scan(pose, &sim.lidar, &sim.scene, i as u64).scan;
        let local: Vec<_> = world.points.iter().map(|&p| pose.inverse_transform_point(p)).collect();
        let path = scans_dir.join(format!("{i:06}.ply"));
        ply::write_points(&path, &local, None, encoding(&cfg)).with_context(|| format!("writing {}", path.display()))?;
        log::info!("frame {i}: {} points", local.len());
    }
    scan_io::write_poses(&a.out.join("poses.txt"), &poses)?;
    let [lo, hi] = sim.gt_bounds;
    let gt = ground_truth_mesh(&sim.scene, lo, hi, sim.gt_spacing).context("meshing the ground truth")?;
    ply::write_mesh(&a.out.join("gt_mesh.ply"), &gt, encoding(&cfg))?;
    Manifest::new("sim", &cfg, vec![]).write(&a.out.join("manifest.json"))?;
    Ok(())
}

pub fn cmd_map(a: &MapArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    if let Some(k) = a.mesh_every {
        cfg.output.mesh_every = k;
    }
    cfg.validate()?;
    let scans = scan_io::list_scans(&a.scans)?;
    let poses = scan_io::load_poses(&a.poses)?;
    if scans.len() != poses.len() {
        return Err(TrainError::PoseCountMismatch { scans: scans.len(), poses: poses.len() }).context("aligning scans with poses");
    }
    create_dir(&a.out)?;
    let inputs = scans.iter().map(|p| p.display().to_string()).chain([a.poses.display().to_string()]).collect();
    Manifest::new("map", &cfg, inputs).write(&a.out.join("manifest.json"))?;

    let mut state = match &a.resume {
        Some(path) => {
            let (saved_cfg, state) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if saved_cfg != cfg.train {
                bail!("{} was written with a different training configuration", path.display());
            }
            state
        }
        None => MapState::new(&cfg.train),
    };
    let start = state.frames_processed as usize;
    let mut reports = ReportWriter::create(&a.out.join("reports.jsonl"))?;
    let clock = StdClock::new();
    let enc = encoding(&cfg);
    for (i, (path, pose)) in scans.iter().zip(&poses).enumerate().skip(start) {
        let scan = scan_io::load_scan(path)?;
        let world = posed_scan(&scan.points, pose, i as u64);
        let report = process_frame(&world, &mut state, &cfg.train, &clock)?;
        reports.write(&report)?;
        log::info!(
            "frame {i}: loss {:.3e}, pool {} samples in {} voxels",
            report.losses.last().copied().unwrap_or(f64::NAN),
            report.pool_size,
            report.pool_voxels
        );
        let k = cfg.output.mesh_every;
        if k > 0 && (i + 1) % k == 0 {
            checkpoint::save(&a.out.join(format!("map_{i:06}.ckpt")), &cfg.train, &state)?;
            match mesh_map(&state.map, &cfg.mesher) {
                Ok(mesh) => ply::write_mesh(&a.out.join(format!("mesh_{i:06}.ply")), &mesh, enc)?,
                Err(e) => log::warn!("frame {i}: no mesh written: {e}"),
            }
        }
    }
    checkpoint::save(&a.out.join("map.ckpt"), &cfg.train, &state)?;
    match mesh_map(&state.map, &cfg.mesher) {
        Ok(mesh) => ply::write_mesh(&a.out.join("mesh.ply"), &mesh, enc)?,
        Err(e) => log::warn!("no final mesh written: {e}"),
    }
    if cfg.output.dump_pool {
        output::write_pool_ply(&a.out.join("pool.ply"), &state.pool, enc)?;
    }
    if cfg.output.dump_uncertainty {
        let part = partition_voxels(&state.pool, &state.field, cfg.train.uncertainty.threshold);
        output::write_uncertainty_csv(&a.out.join("uncertainty.csv"), &part.evaluations)?;
    }
    Ok(())
}

pub fn cmd_mesh(a: &MeshArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), None)?;
    if let Some(s) = a.spacing {
        cfg.mesher.spacing = s;
    }
    cfg.validate()?;
    let (_, state) = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mesh = mesh_map(&state.map, &cfg.mesher)?;
    ply::write_mesh(&a.out, &mesh, encoding(&cfg)).with_context(|| format!("writing {}", a.out.display()))?;
    log::info!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    if let Some(t) = a.threshold {
        cfg.eval.threshold = t;
    }
    if let Some(n) = a.points {
        cfg.eval.n_points = n;
    }
    cfg.validate()?;
    let recon = ply::read_ply(&a.recon).with_context(|| format!("reading {}", a.recon.display()))?.into_mesh();
    let reference = ply::read_ply(&a.reference).with_context(|| format!("reading {}", a.reference.display()))?;
    let eval_cfg: &EvalConfig = &cfg.eval;
    let result = if reference.faces.is_empty() {
        evaluate(&recon, Reference::Points(&reference.vertices), eval_cfg)
    } else {
        evaluate(&recon, Reference::Mesh(&reference.into_mesh()), eval_cfg)
    }
    .context("evaluating")?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "recon": a.recon.display().to_string(),
        "reference": a.reference.display().to_string(),
        "config": eval_cfg,
        "result": result,
    }))?;
    println!("{json}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        fs::write(dir.join("eval.json"), json + "\n")?;
        output::write_eval_csv(&dir.join("eval.csv"), &result)?;
    }
    Ok(())
}
