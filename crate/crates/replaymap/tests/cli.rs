use std::path::Path;
use std::process::Command;

use replaymap::output::{read_reports, Manifest};
use replaymap::ply;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_replaymap"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn");
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = r#"
[train]
iterations_per_frame = 15
batch_size = 2048

[train.uncertainty]
uncertain_draws = 200

[eval]
n_points = 20000

[sim]
frames = 4
gt_spacing = 0.1
gt_bounds = [{ x = -2.2, y = -2.2, z = -0.2 }, { x = 2.2, y = 2.2, z = 2.7 }]

[sim.lidar]
azimuth_count = 120
elevation_count = 24
elevation_min_deg = -70.0
elevation_max_deg = 70.0
noise_slope = 0.002

[sim.orbit]
center = { x = 0.0, y = 0.0, z = 1.25 }
radius = 1.2
turns = 1.0
height_amplitude = 0.3

[[sim.scene.primitives]]
type = "sphere"
center = { x = 0.0, y = 0.0, z = 1.25 }
radius = 0.6

[[sim.scene.primitives]]
type = "plane"
normal = { x = 1.0, y = 0.0, z = 0.0 }
offset = -2.0

[[sim.scene.primitives]]
type = "plane"
normal = { x = -1.0, y = 0.0, z = 0.0 }
offset = -2.0

[[sim.scene.primitives]]
type = "plane"
normal = { x = 0.0, y = 1.0, z = 0.0 }
offset = -2.0

[[sim.scene.primitives]]
type = "plane"
normal = { x = 0.0, y = -1.0, z = 0.0 }
offset = -2.0

[[sim.scene.primitives]]
type = "plane"
normal = { x = 0.0, y = 0.0, z = 1.0 }
offset = 0.0

[[sim.scene.primitives]]
type = "plane"
normal = { x = 0.0, y = 0.0, z = -1.0 }
offset = -2.5
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, SMALL).unwrap();
    path
}

#[test]
fn sim_map_mesh_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let sim = dir.path().join("sim");
    run_ok(bin().args(["sim", "--out"]).arg(&sim).arg("--config").arg(&cfg).args(["--seed", "3"]));
    assert_eq!(std::fs::read_dir(sim.join("scans")).unwrap().count(), 4);
    assert!(sim.join("gt_mesh.ply").exists());

    let map = dir.path().join("map");
    run_ok(
        bin()
            .args(["map", "--scans"])
            .arg(sim.join("scans"))
            .arg("--poses")
            .arg(sim.join("poses.txt"))
            .arg("--out")
            .arg(&map)
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "3", "--mesh-every", "2"]),
    );
    let reports = read_reports(&map.join("reports.jsonl")).unwrap();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| r.losses.len() == 15 && r.losses.iter().all(|l| l.is_finite())));
    for f in ["map.ckpt", "mesh.ply", "map_000001.ckpt", "mesh_000003.ply", "manifest.json"] {
        assert!(map.join(f).exists(), "{f}");
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(map.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 3);
    assert_eq!(manifest.config.train.batch_size, 2048);
    assert_eq!(manifest.command, "map");

    let mesh = dir.path().join("from_ckpt.ply");
    run_ok(bin().arg("mesh").arg(map.join("map.ckpt")).arg("--out").arg(&mesh));
    let a = ply::read_ply(&mesh).unwrap();
    let b = ply::read_ply(&map.join("mesh.ply")).unwrap();
    assert_eq!(a, b);

    let eval_dir = dir.path().join("eval");
    let stdout = run_ok(bin().arg("eval").arg(&mesh).arg(sim.join("gt_mesh.ply")).arg("--out").arg(&eval_dir).arg("--config").arg(&cfg));
    let json: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let f1 = json["result"]["f1_pct"].as_f64().unwrap();
    assert!(f1 > 50.0, "{f1}");
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    // Resuming from the frame-2 checkpoint reproduces the final map.
    let resumed = dir.path().join("resumed");
    run_ok(
        bin()
            .args(["map", "--scans"])
            .arg(sim.join("scans"))
            .arg("--poses")
            .arg(sim.join("poses.txt"))
            .arg("--out")
            .arg(&resumed)
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "3", "--resume"])
            .arg(map.join("map_000001.ckpt")),
    );
    assert_eq!(std::fs::read(resumed.join("map.ckpt")).unwrap(), std::fs::read(map.join("map.ckpt")).unwrap());
    assert_eq!(read_reports(&resumed.join("reports.jsonl")).unwrap().len(), 2);
}

#[test]
fn self_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let text = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 2\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n";
    let p = dir.path().join("recon.ply");
    std::fs::write(&p, text).unwrap();
    let stdout = run_ok(bin().arg("eval").arg(&p).arg(&p).args(["--points", "5000"]));
    let json: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(json["result"]["f1_pct"].as_f64(), Some(100.0));
    assert_eq!(json["result"]["chamfer_l1_cm"].as_f64(), Some(0.0));
}

#[test]
fn mismatched_pose_count_fails() {
    let dir = tempfile::tempdir().unwrap();
    let scans = dir.path().join("scans");
    std::fs::create_dir(&scans).unwrap();
    for i in 0..2 {
        replaymap::scan_io::write_xyzi(&scans.join(format!("{i:06}.bin")), &[replaymap_core::Vec3::new(1.0, 0.0, 0.0)]).unwrap();
    }
    let poses = dir.path().join("poses.txt");
    std::fs::write(&poses, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    let out = bin().args(["map", "--scans"]).arg(&scans).arg("--poses").arg(&poses).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("2 scans but 1 poses"), "{err}");
}

#[test]
fn bad_config_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nunknown_key = 1\n").unwrap();
    let out = bin().args(["sim", "--out"]).arg(dir.path().join("s")).arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
    let out = bin().args(["mesh", "nope.ckpt", "--out", "x.ply"]).output().unwrap();
    assert!(!out.status.success());
}
