use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relpose::dataset::read_dataset;

fn relpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relpose")).args(args).env("RELPOSE_THREADS", "1").output().expect("spawn relpose")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_to(dir: &Path, name: &str, args: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut all = vec!["simulate", "--out", path_str(&out)];
    all.extend_from_slice(args);
    let o = relpose(&all);
    assert!(o.status.success(), "simulate failed: {}", String::from_utf8_lossy(&o.stderr));
    out
}

/// tier -> (ate_pos, ate_rot_deg, output_rate)
fn metrics(csv: &str, tier: &str) -> (f64, f64, f64) {
    let get = |metric: &str| {
        csv.lines()
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f.len() == 6 && f[3] == tier && f[4] == metric).then(|| f[5].parse::<f64>().unwrap())
            })
            .next()
            .unwrap_or(f64::NAN)
    };
    (get("ate_pos_m"), get("ate_rot_deg"), get("output_rate"))
}

#[test]
fn simulate_is_deterministic_and_prints_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--robots", "4", "--duration", "1", "--seed", "7"];
    let a = simulate_to(dir.path(), "a.txt", &args);
    let b = simulate_to(dir.path(), "b.txt", &args);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let o = relpose(&["simulate", "--robots", "4", "--duration", "1", "--seed", "7", "--out", path_str(&dir.path().join("c.txt"))]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "seed 7");
    let c = simulate_to(dir.path(), "d.txt", &["--robots", "4", "--duration", "1", "--seed", "8"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn missing_rate_removes_bearings() {
    let dir = tempfile::tempdir().unwrap();
    let p = simulate_to(dir.path(), "m.txt", &["--robots", "6", "--duration", "8", "--seed", "1", "--missing-rate", "0.9"]);
    let ds = read_dataset(&std::fs::read_to_string(p).unwrap()).unwrap();
    let bearing_frames = ds.frames.len().div_ceil(2);
    let slots = bearing_frames * 6 * 5;
    assert!(slots >= 10_000, "{slots} slots");
    let present: usize = ds.frames.iter().map(|f| f.bearings.len()).sum();
    let missing = 1.0 - present as f64 / slots as f64;
    assert!((missing - 0.9).abs() <= 0.02, "missing fraction {missing}");
}

#[test]
fn outlier_rate_labels_outliers() {
    let dir = tempfile::tempdir().unwrap();
    let p = simulate_to(dir.path(), "o.txt", &["--robots", "5", "--duration", "2", "--seed", "2", "--outlier-rate", "0.9"]);
    let ds = read_dataset(&std::fs::read_to_string(p).unwrap()).unwrap();
    let labels: Vec<bool> = ds.outliers.iter().flatten().copied().collect();
    let outliers = labels.iter().filter(|&&o| o).count();
    let inliers = labels.len() - outliers;
    // 0.9 * (n - 1) = 3.6 outliers per observer against 4 true bearings
    let ratio = outliers as f64 / inliers as f64;
    assert!((ratio - 0.9).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn noiseless_estimate_is_exact_for_all_tiers() {
    let dir = tempfile::tempdir().unwrap();
    let p = simulate_to(dir.path(), "n.txt", &["--robots", "5", "--duration", "4", "--seed", "3", "--noiseless", "--imu-rate", "2000"]);
    let est = dir.path().join("est.txt");
    let o = relpose(&["estimate", "--dataset", path_str(&p), "--out", path_str(&est)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("# relpose-csv v1\ntrial,axis,point,tier,metric,value\n"));
    for tier in ["sfc", "sfo", "mflo", "mfto"] {
        let (pos, rot, rate) = metrics(&csv, tier);
        assert!(pos < 1e-5 && rot.to_radians() < 1e-5, "{tier}: {pos} m {rot} deg");
        assert!(rate > 0.0);
    }
    let text = std::fs::read_to_string(est).unwrap();
    assert!(text.starts_with("# relpose-estimates v1"));
    assert!(text.lines().any(|l| l.contains(" mfto 4 ")));
}

#[test]
fn gravity_off_degrades_only_slightly() {
    let dir = tempfile::tempdir().unwrap();
    let p = simulate_to(dir.path(), "g.txt", &["--robots", "8", "--duration", "10", "--seed", "4"]);
    let run = |g: &str| {
        let o = relpose(&["estimate", "--dataset", path_str(&p), "--gravity", g]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let on = run("on");
    let off = run("off");
    for tier in ["mflo", "mfto"] {
        let (p_on, r_on, _) = metrics(&on, tier);
        let (p_off, r_off, rate) = metrics(&off, tier);
        eprintln!("{tier}: on {p_on:.4} m {r_on:.3} deg, off {p_off:.4} m {r_off:.3} deg");
        assert!(rate > 0.9);
        assert!(p_off < 1.5 * p_on && r_off < 1.5 * r_on, "{tier} degraded too much");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = simulate_to(dir.path(), "e.txt", &["--robots", "3", "--duration", "0.5", "--seed", "5"]);

    let o = relpose(&["estimate", "--dataset", path_str(&p), "--reference", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reference"));

    assert_eq!(relpose(&["simulate", "--robots", "many"]).status.code(), Some(2));
    assert_eq!(relpose(&["simulate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(relpose(&["estimate", "--dataset", path_str(&p), "--gravity", "maybe"]).status.code(), Some(2));
    assert_eq!(relpose(&["benchmark", "--axis", "colour"]).status.code(), Some(2));

    let text = std::fs::read_to_string(&p).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let bad = lines.iter().position(|l| l.starts_with("DIST")).unwrap();
    lines[bad] = "DIST 0.01 0 1 not-a-number";
    let broken = dir.path().join("broken.txt");
    std::fs::write(&broken, lines.join("\n")).unwrap();
    let o = relpose(&["estimate", "--dataset", path_str(&broken)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains(&format!("line {}", bad + 1)));

    let o = relpose(&["estimate", "--dataset", path_str(&dir.path().join("absent.txt"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# sweep defaults\nrobots = 3\nduration = 0.5\nseed = 11\n").unwrap();
    let a = dir.path().join("a.txt");
    let o = relpose(&["simulate", "--config", path_str(&cfg), "--out", path_str(&a)]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "seed 11");
    assert_eq!(read_dataset(&std::fs::read_to_string(&a).unwrap()).unwrap().n_robots, 3);
    let o = relpose(&["simulate", "--config", path_str(&cfg), "--robots", "4", "--out", path_str(&a)]);
    assert!(o.status.success());
    assert_eq!(read_dataset(&std::fs::read_to_string(&a).unwrap()).unwrap().n_robots, 4);

    std::fs::write(&cfg, "robots\n").unwrap();
    assert_eq!(relpose(&["simulate", "--config", path_str(&cfg)]).status.code(), Some(2));
}

#[test]
fn benchmark_sweep_is_deterministic_across_worker_counts() {
    let args = ["benchmark", "--axis", "robots", "--points", "3,4", "--trials", "2", "--duration", "1", "--seed", "9"];
    let run = |threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_relpose")).args(args).env("RELPOSE_THREADS", threads).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let strip_timing = |s: &str| s.lines().filter(|l| !l.contains("frame_ms")).collect::<Vec<_>>().join("\n");
    let one = run("1");
    let two = run("2");
    assert_eq!(strip_timing(&one), strip_timing(&two));
    assert!(one.starts_with("# relpose-csv v1\n"));
    assert!(one.lines().any(|l| l.starts_with("mean,robots,3,mfto,output_rate,")));
    assert!(one.lines().any(|l| l.starts_with("std,robots,4,sfc,")));

    let o = Command::new(env!("CARGO_BIN_EXE_relpose")).args(args).env("RELPOSE_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn outlier_sweep_emits_one_point_per_threshold() {
    let o = relpose(&[
        "benchmark", "--axis", "outlier", "--points", "0.9", "--thresholds", "0.7,0.99", "--trials", "1", "--robots", "4",
        "--duration", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    for p in ["0.9@0.7", "0.9@0.99"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("mean,outlier,{p},pcm,precision,"))), "{p}");
    }
}
