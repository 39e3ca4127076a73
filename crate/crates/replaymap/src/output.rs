//! Run artifacts: JSON-lines frame reports, the run manifest, evaluation
//! tables and diagnostic dumps.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use replaymap_core::metrics::EvalResult;
use replaymap_core::replay_pool::ReplayPool;
use replaymap_core::trainer::{Clock, FrameReport};
use replaymap_core::uncertainty::VoxelUncertainty;

use crate::config::RunConfig;
use crate::ply::{self, Encoding};

/// Wall-clock milliseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        StdClock::new()
    }
}

impl Clock for StdClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Appends one JSON object per frame.
pub struct ReportWriter {
    out: BufWriter<File>,
}

impl ReportWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(ReportWriter { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, report: &FrameReport) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, report)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_reports(path: &Path) -> io::Result<Vec<FrameReport>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io::Error::from))
        .collect()
}

/// Everything needed to rerun a command bit-for-bit.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    pub checkpoint_format: u32,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, inputs: Vec<String>) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            seed: config.train.seed,
            config: config.clone(),
            inputs,
            checkpoint_format: crate::checkpoint::FORMAT_VERSION,
        }
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
    }
}

pub const EVAL_CSV_HEADER: &str = "accuracy_cm,completeness_cm,chamfer_l1_cm,precision_pct,recall_pct,f1_pct";

pub fn eval_csv_row(r: &EvalResult) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.accuracy_cm, r.completeness_cm, r.chamfer_l1_cm, r.precision_pct, r.recall_pct, r.f1_pct
    )
}

pub fn write_eval_csv(path: &Path, r: &EvalResult) -> io::Result<()> {
    std::fs::write(path, format!("{EVAL_CSV_HEADER}\n{}\n", eval_csv_row(r)))
}

/// Per-voxel uncertainty of one partition as CSV.
pub fn write_uncertainty_csv(path: &Path, rows: &[VoxelUncertainty]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "i,j,k,center_x,center_y,center_z,sigma,normalized,uncertain")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.key.0[0], r.key.0[1], r.key.0[2], r.center.x, r.center.y, r.center.z, r.sigma, r.normalized, r.uncertain as u8
        )?;
    }
    w.flush()
}

/// Pool sample positions with their labels as a `label` property.
pub fn write_pool_ply(path: &Path, pool: &ReplayPool, encoding: Encoding) -> io::Result<()> {
    let points: Vec<_> = pool.samples().map(|s| s.position).collect();
    let labels: Vec<f64> = pool.samples().map(|s| s.label).collect();
    ply::write_points(path, &points, Some(("label", &labels)), encoding)
}
