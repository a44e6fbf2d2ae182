use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn semloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stat(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` in\n{report}"))
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "-o", dir.to_str().unwrap(), "--length", "120"];
    args.extend_from_slice(extra);
    ok(&semloc(&args));
}

#[test]
fn compile_map_fits_a_pole_cluster() {
    let dir = TempDir::new().unwrap();
    let clusters = dir.path().join("c.txt");
    fs::write(&clusters, "CLUSTER 7 POLE 0\n1 0 2\n1 1 2\n1 2.5 2\n").unwrap();
    let map = dir.path().join("map.txt");
    ok(&semloc(&["compile-map", clusters.to_str().unwrap(), "-o", map.to_str().unwrap()]));
    let text = fs::read_to_string(&map).unwrap();
    let entries: Vec<&str> = text.lines().filter(|l| l.starts_with("L ")).collect();
    assert_eq!(entries.len(), 1);
    assert!(entries[0].starts_with("L 7 POLE 0"));
}

#[test]
fn compile_map_of_empty_input_is_an_empty_map() {
    let dir = TempDir::new().unwrap();
    let clusters = dir.path().join("c.txt");
    fs::write(&clusters, "").unwrap();
    let map = dir.path().join("map.txt");
    ok(&semloc(&["compile-map", clusters.to_str().unwrap(), "-o", map.to_str().unwrap()]));
    let text = fs::read_to_string(&map).unwrap();
    assert!(text.lines().skip(1).all(|l| l.trim().is_empty()));
}

#[test]
fn compile_map_rejects_a_malformed_cluster() {
    let dir = TempDir::new().unwrap();
    let clusters = dir.path().join("c.txt");
    fs::write(&clusters, "CLUSTER 1 POLE 0\n0 0\n").unwrap();
    let out = semloc(&["compile-map", clusters.to_str().unwrap(), "-o", "/dev/null"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("c.txt") && err.contains("line 2"), "{err}");
}

#[test]
fn synth_writes_every_artifact() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    for f in ["map.txt", "detections.txt", "groundtruth.txt", "intrinsics.txt", "manifest.toml"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let masks = fs::read_dir(dir.path().join("masks")).unwrap().count();
    assert!(masks > 0);
}

#[test]
fn synth_is_byte_identical_for_a_fixed_seed() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    synth(a.path(), &["--seed", "11", "--noise", "1", "--outlier-rate", "0.2"]);
    synth(b.path(), &["--seed", "11", "--noise", "1", "--outlier-rate", "0.2"]);
    for f in ["map.txt", "detections.txt", "groundtruth.txt", "masks/000010_POLE.pgm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_with_full_dropout_emits_empty_frames() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--dropout-rate", "1", "--mask-stride", "0"]);
    let text = fs::read_to_string(dir.path().join("detections.txt")).unwrap();
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("F ")));
}

#[test]
fn noiseless_localize_and_eval_agree() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--mask-stride", "0"]);
    let manifest = dir.path().join("manifest.toml");
    let csv = dir.path().join("res.csv");
    let out = semloc(&["localize", "--manifest", manifest.to_str().unwrap(), "-o", csv.to_str().unwrap()]);
    ok(&out);
    let summary = String::from_utf8(out.stderr).unwrap();
    let rms = stat(&summary, "rms_position_m");
    assert!(rms < 1e-3, "{summary}");
    assert_eq!(stat(&summary, "coasted"), 0.0);

    let gt = dir.path().join("groundtruth.txt");
    let report = ok(&semloc(&["eval", csv.to_str().unwrap(), gt.to_str().unwrap()]));
    assert_eq!(stat(&report, "rms_position_m"), (rms * 1e4).round() / 1e4);
    assert_eq!(stat(&report, "below_0.5m"), 1.0);
}

#[test]
fn localize_twice_gives_identical_csv() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--noise", "0.5", "--seed", "4", "--mask-stride", "0"]);
    let manifest = dir.path().join("manifest.toml");
    let a = ok(&semloc(&["localize", "--manifest", manifest.to_str().unwrap(), "--seed", "4"]));
    let b = ok(&semloc(&["localize", "--manifest", manifest.to_str().unwrap(), "--seed", "4"]));
    assert!(a.starts_with("frame,status,"));
    assert_eq!(a, b);
}

#[test]
fn localize_with_missing_map_fails() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("m.toml");
    fs::write(&manifest, "map = \"absent.txt\"\ndetections = \"d.txt\"\n").unwrap();
    let out = semloc(&["localize", "--manifest", manifest.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.txt"));
}

fn write_results(path: &Path, gt: &str, dz: f64) {
    let mut csv = String::from("frame,status,Cx,Cy,Cz,yaw,pitch,roll,sqrtR,n_corr\n");
    for (i, line) in gt.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let z: f64 = f[4].parse().unwrap();
        let status = if i < 2 { "bootstrapped" } else { "localized" };
        let z = if i < 2 { z } else { z + dz };
        csv.push_str(&format!(
            "{},{status},{},{},{z:.9},{},{},{},,0\n",
            f[1], f[2], f[3], f[5], f[6], f[7]
        ));
    }
    fs::write(path, csv).unwrap();
}

#[test]
fn eval_of_perfect_and_offset_tracks() {
    let dir = TempDir::new().unwrap();
    let gt_path = dir.path().join("gt.txt");
    let gt = "GT 0 0 1.65 0 0 0 0\nGT 1 1 1.65 0 0 0 0\nGT 2 2 1.65 0 0.1 0 0\nGT 3 3 1.65 0.2 0.1 0 0\n";
    fs::write(&gt_path, gt).unwrap();
    let res = dir.path().join("res.csv");

    write_results(&res, gt, 0.0);
    let report = ok(&semloc(&["eval", res.to_str().unwrap(), gt_path.to_str().unwrap()]));
    assert_eq!(stat(&report, "evaluated"), 2.0);
    assert_eq!(stat(&report, "rms_position_m"), 0.0);
    assert_eq!(stat(&report, "max_angle_deg"), 0.0);

    write_results(&res, gt, 0.75);
    let report = ok(&semloc(&["eval", res.to_str().unwrap(), gt_path.to_str().unwrap()]));
    assert_eq!(stat(&report, "rms_position_m"), 0.75);
    assert_eq!(stat(&report, "below_0.5m"), 0.0);
}

#[test]
fn landscape_emits_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--mask-stride", "0"]);
    let manifest = dir.path().join("manifest.toml");
    let csv = ok(&semloc(&[
        "landscape",
        "--manifest",
        manifest.to_str().unwrap(),
        "--frame",
        "12",
        "--dims",
        "yaw,pitch",
        "--range",
        "0.05,0.05",
        "--samples",
        "7",
    ]));
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("a_value,b_value,sqrtR"));
    let values: Vec<f64> = rows.map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 49);
    // The center cell sits on the true pose.
    assert!(values[24] < 1e-3, "{}", values[24]);
    assert!(values.iter().all(|&v| v >= values[24]));
}

#[test]
fn unknown_pose_parameter_is_rejected() {
    let out = semloc(&["landscape", "--manifest", "m.toml", "--frame", "0", "--dims", "yaw,foo"]);
    assert!(!out.status.success());
}
