//! Scan and pose file ingestion.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use replaymap_core::{Pose, Vec3};

use crate::ply::{self, PlyError};

/// Largest tolerated rotation orthonormality error before re-orthonormalizing.
pub const POSE_ORTHONORMAL_TOL: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum ScanIoError {
    #[error("{0}: unsupported scan format (expected .ply or .bin)")]
    UnsupportedFormat(PathBuf),
    #[error("{path}: malformed file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, thiserror::Error)]
pub enum PoseError {
    #[error("{path}:{line}: malformed pose line: {reason}")]
    MalformedLine { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Finite points of one scan and how many rows were dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedScan {
    pub points: Vec<Vec3>,
    pub dropped_non_finite: usize,
}

fn is_ext(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Reads a PLY point cloud or a float32 `x y z intensity` record file.
pub fn load_scan(path: &Path) -> Result<LoadedScan, ScanIoError> {
    let raw = if is_ext(path, "ply") {
        ply::read_ply(path)
            .map_err(|e| match e {
                PlyError::Io(source) => ScanIoError::Io { path: path.into(), source },
                other => ScanIoError::MalformedFile { path: path.into(), reason: other.to_string() },
            })?
            .vertices
    } else if is_ext(path, "bin") {
        let bytes = fs::read(path).map_err(|source| ScanIoError::Io { path: path.into(), source })?;
        parse_xyzi(&bytes).ok_or_else(|| ScanIoError::MalformedFile {
            path: path.into(),
            reason: format!("{} bytes is not a whole number of 16-byte records", bytes.len()),
        })?
    } else {
        return Err(ScanIoError::UnsupportedFormat(path.into()));
    };
    let total = raw.len();
    let points: Vec<Vec3> = raw.into_iter().filter(|p| p.is_finite()).collect();
    let dropped = total - points.len();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} non-finite points", path.display());
    }
    Ok(LoadedScan { points, dropped_non_finite: dropped })
}

fn parse_xyzi(bytes: &[u8]) -> Option<Vec<Vec3>> {
    if bytes.len() % 16 != 0 {
        return None;
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    Some(bytes.chunks_exact(16).map(|r| Vec3::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]))).collect())
}

/// Writes points as float32 `x y z intensity` records with zero intensity.
pub fn write_xyzi(path: &Path, points: &[Vec3]) -> io::Result<()> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for c in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            out.extend(c.to_le_bytes());
        }
    }
    fs::write(path, out)
}

/// Scan files (`.ply` / `.bin`) in `dir`, sorted by file name.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>, ScanIoError> {
    let io_err = |source| ScanIoError::Io { path: dir.into(), source };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.is_file() && (is_ext(&path, "ply") || is_ext(&path, "bin")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// One pose per non-empty line: 12 floats, the row-major 3x4 sensor-to-world
/// transform. Rotations off by more than [`POSE_ORTHONORMAL_TOL`] are
/// re-orthonormalized with a warning.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>, PoseError> {
    let text = fs::read_to_string(path).map_err(|source| PoseError::Io { path: path.into(), source })?;
    parse_poses(&text, path)
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Pose>, PoseError> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| PoseError::MalformedLine { path: path.into(), line: line_no, reason };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("'{t}' is not a number"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 12 {
            return Err(bad(format!("expected 12 values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        let pose = Pose::from_row_major_3x4(&values.try_into().expect("12 values"));
        let err = pose.orthonormality_error();
        if err > POSE_ORTHONORMAL_TOL {
            log::warn!("{}:{line_no}: rotation off by {err:.3e}; re-orthonormalizing", path.display());
            poses.push(pose.reorthonormalized());
        } else {
            poses.push(pose);
        }
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> io::Result<()> {
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    for p in poses {
        let v = p.to_row_major_3x4();
        let line: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_lines() {
        let p = Path::new("poses.txt");
        let poses = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n\n1 0 0 2.5 0 1 0 -1 0 0 1 3\n", p).unwrap();
        assert_eq!(poses, vec![Pose::IDENTITY, Pose::from_translation(Vec3::new(2.5, -1.0, 3.0))]);
        match parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n", p).unwrap_err() {
            PoseError::MalformedLine { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        assert!(parse_poses("1 0 0 0 0 1 0 x 0 0 1 0\n", p).is_err());
    }

    #[test]
    fn skewed_rotation_is_repaired() {
        let poses = parse_poses("1.01 0 0 0 0 1 0 0 0 0 1 0\n", Path::new("p")).unwrap();
        assert!(poses[0].orthonormality_error() < 1e-9);
    }

    #[test]
    fn pose_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let poses = vec![Pose::from_yaw_translation(0.3, Vec3::new(1.0, 2.0, 3.0)), Pose::IDENTITY];
        write_poses(&path, &poses).unwrap();
        assert_eq!(load_poses(&path).unwrap(), poses);
    }

    #[test]
    fn scans_from_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("a.ply");
        fs::write(&ply, "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 nan 1\n2 2 2\n").unwrap();
        let s = load_scan(&ply).unwrap();
        assert_eq!(s.points, vec![Vec3::ZERO, Vec3::splat(2.0)]);
        assert_eq!(s.dropped_non_finite, 1);

        let bin = dir.path().join("b.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.7, -1.0, -2.0, -3.0, 0.1] {
            bytes.extend(v.to_le_bytes());
        }
        fs::write(&bin, &bytes).unwrap();
        assert_eq!(load_scan(&bin).unwrap().points, vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, -2.0, -3.0)]);
        fs::write(&bin, &bytes[..20]).unwrap();
        assert!(matches!(load_scan(&bin), Err(ScanIoError::MalformedFile { .. })));

        let txt = dir.path().join("c.xyz");
        fs::write(&txt, "").unwrap();
        assert!(matches!(load_scan(&txt), Err(ScanIoError::UnsupportedFormat(_))));

        let listed = list_scans(dir.path()).unwrap();
        assert_eq!(listed, vec![ply, bin]);
    }

    #[test]
    fn xyzi_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let pts = vec![Vec3::new(0.5, -0.25, 8.0)];
        write_xyzi(&path, &pts).unwrap();
        assert_eq!(load_scan(&path).unwrap().points, pts);
    }
}
