//! End-to-end tests of the command-line interface, driving the built
//! binary against temporary dataset directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vesselreg")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tree_digest(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn synth_small(dir: &Path, cases: usize, seed: &str) {
    run_ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--cases",
        &cases.to_string(),
        "--seed",
        seed,
        "--train-images",
        "3",
        "--size",
        "64",
    ]);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    synth_small(&d1, 6, "7");
    synth_small(&d2, 6, "7");
    assert_eq!(
        tree_digest(&d1),
        tree_digest(&d2),
        "same seed must give identical trees"
    );

    let d3 = tmp.path().join("d3");
    synth_small(&d3, 6, "8");
    assert_ne!(
        tree_digest(&d1),
        tree_digest(&d3),
        "different seed must differ"
    );
}

#[test]
fn synth_zero_cases_is_empty_but_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("empty");
    run_ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--cases",
        "0",
        "--seed",
        "1",
        "--train-images",
        "0",
        "--size",
        "64",
    ]);
    let manifest = std::fs::read_to_string(dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1, "header only");
}

#[test]
fn synth_honors_category_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ratio");
    synth_small(&dir, 10, "4");
    let manifest = std::fs::read_to_string(dir.join("manifest.csv")).unwrap();
    let count = |c: char| {
        manifest
            .lines()
            .skip(1)
            .filter(|l| l.split(',').nth(1) == Some(&c.to_string()))
            .count()
    };
    // 10 cases at 71/49/14 -> 5 S, 4 P, 1 A by largest remainder
    assert_eq!((count('S'), count('P'), count('A')), (5, 4, 1));
}

#[test]
fn missing_dataset_fails_cleanly() {
    let out = run(&[
        "train",
        "--data",
        "/nonexistent-dataset",
        "--out",
        "/tmp/x.ckdn",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("train"),
        "diagnostic should mention the missing train data: {err}"
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "peak.thresold = 0.4\n").unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "detect",
        "--heatmap",
        "x",
        "--out",
        "y",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown configuration key"));
}

#[test]
fn full_pipeline_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 4, "3");

    // train briefly; the report must show descent
    let ckpt = tmp.path().join("net.ckdn");
    let report = tmp.path().join("report.csv");
    let stdout = run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--loss",
        "mp_infonce",
        "--views",
        "3",
        "--epochs",
        "10",
        "--learning-rate",
        "1e-3",
        "--hidden",
        "6,6",
        "--dim",
        "8",
        "--seed",
        "5",
        "--val-pairs",
        "2",
    ]);
    assert!(
        stdout.contains("train.loss = mp_infonce"),
        "effective config echoed"
    );
    assert!(
        stdout.contains("validation matching precision"),
        "held-out precision reported: {stdout}"
    );
    let report_text = std::fs::read_to_string(&report).unwrap();
    let losses: Vec<f64> = report_text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse().ok())
        .collect();
    assert!(losses.len() >= 2);
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "loss must descend: {losses:?}"
    );

    // single-view supcon configuration also runs
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("sc11.ckdn").to_str().unwrap(),
        "--loss",
        "supcon",
        "--views",
        "1",
        "--epochs",
        "2",
        "--hidden",
        "6,6",
        "--dim",
        "8",
        "--seed",
        "5",
    ]);

    // batch registration with oracle keypoints
    let pred = tmp.path().join("pred");
    run_ok(&[
        "register",
        "--dataset",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--oracle-keypoints",
        "--out",
        pred.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    // hard cases may fail under a briefly trained net; some case must have
    // registered, and its timing file lists every stage
    let timing_path = std::fs::read_dir(&pred)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.to_string_lossy().ends_with("_timing.csv"))
        .expect("at least one case registers");
    let timing = std::fs::read_to_string(&timing_path).unwrap();
    for stage in ["detect", "describe", "match", "ransac"] {
        assert!(
            timing.contains(stage),
            "timing must list stage {stage}: {timing}"
        );
    }

    // evaluation of the produced predictions runs end to end
    let report_dir = tmp.path().join("report");
    run_ok(&[
        "eval",
        "--manifest",
        data.join("manifest.csv").to_str().unwrap(),
        "--predictions",
        pred.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(report_dir.join("summary.csv").exists());
    assert!(report_dir.join("curve_overall.csv").exists());

    // ground-truth homographies as predictions: perfect score
    let oracle_pred = tmp.path().join("oracle-pred");
    std::fs::create_dir_all(&oracle_pred).unwrap();
    for line in manifest.lines().skip(1) {
        let id = line.split(',').next().unwrap();
        std::fs::copy(
            data.join("cases").join(id).join("homography.txt"),
            oracle_pred.join(format!("{id}.txt")),
        )
        .unwrap();
    }
    let oracle_report = tmp.path().join("oracle-report");
    let stdout = run_ok(&[
        "eval",
        "--manifest",
        data.join("manifest.csv").to_str().unwrap(),
        "--predictions",
        oracle_pred.to_str().unwrap(),
        "--out",
        oracle_report.to_str().unwrap(),
    ]);
    assert!(
        stdout.contains("auc overall 1.0000"),
        "oracle predictions score 1.0: {stdout}"
    );

    // identity predictions on every case: displaced cases drag the score down
    let identity_pred = tmp.path().join("id-pred");
    std::fs::create_dir_all(&identity_pred).unwrap();
    for line in manifest.lines().skip(1) {
        let id = line.split(',').next().unwrap();
        std::fs::write(
            identity_pred.join(format!("{id}.txt")),
            "1 0 0 0 1 0 0 0 1\n",
        )
        .unwrap();
    }
    let id_report = tmp.path().join("id-report");
    run_ok(&[
        "eval",
        "--manifest",
        data.join("manifest.csv").to_str().unwrap(),
        "--predictions",
        identity_pred.to_str().unwrap(),
        "--out",
        id_report.to_str().unwrap(),
    ]);
    let summary = std::fs::read_to_string(id_report.join("summary.csv")).unwrap();
    let auc_p: f64 = summary
        .lines()
        .find(|l| l.starts_with("auc_P,"))
        .and_then(|l| l.split(',').nth(1)?.parse().ok())
        .unwrap();
    assert!(
        auc_p < 0.05,
        "identity on low-overlap cases must fail, auc_P {auc_p}"
    );

    // missing predictions produce a warning and count as failures
    let sparse_pred = tmp.path().join("sparse-pred");
    std::fs::create_dir_all(&sparse_pred).unwrap();
    let out = run(&[
        "eval",
        "--manifest",
        data.join("manifest.csv").to_str().unwrap(),
        "--predictions",
        sparse_pred.to_str().unwrap(),
        "--out",
        tmp.path().join("sparse-report").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    // vtkrs sweep over the dataset
    let vt = tmp.path().join("vtkrs.csv");
    run_ok(&[
        "vtkrs",
        "--dataset",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        vt.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    let vt_text = std::fs::read_to_string(&vt).unwrap();
    assert!(vt_text.starts_with("n_per_class,auc\n3,"));
    assert_eq!(
        vt_text.lines().count(),
        1 + 23 + 1,
        "23 sweep rows plus header and total"
    );
    assert!(vt_text.lines().last().unwrap().starts_with("vtkrs,"));
}

#[test]
fn register_identity_pair_recovers_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 2, "11");
    let ckpt = tmp.path().join("net.ckdn");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
        "--views",
        "1",
        "--hidden",
        "4",
        "--dim",
        "8",
        "--seed",
        "2",
    ]);
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    let id = manifest
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    let case_dir = data.join("cases").join(&id);
    let out_dir = tmp.path().join("reg");
    run_ok(&[
        "register",
        "--fixed",
        case_dir.join("fixed.png").to_str().unwrap(),
        "--moving",
        case_dir.join("fixed.png").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--fixed-keypoints",
        case_dir.join("keypoints_fixed.csv").to_str().unwrap(),
        "--moving-keypoints",
        case_dir.join("keypoints_fixed.csv").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    let h_text = std::fs::read_to_string(out_dir.join("homography.txt")).unwrap();
    let vals: Vec<f64> = h_text
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    // corners of a 64x64 image must move less than a pixel
    for &(x, y) in &[(0.0, 0.0), (63.0, 0.0), (0.0, 63.0), (63.0, 63.0)] {
        let w = vals[6] * x + vals[7] * y + vals[8];
        let mx = (vals[0] * x + vals[1] * y + vals[2]) / w;
        let my = (vals[3] * x + vals[4] * y + vals[5]) / w;
        let d = (mx - x).hypot(my - y);
        assert!(d < 1.0, "corner ({x},{y}) moved {d} px");
    }
    assert!(out_dir.join("matches.csv").exists());
    assert!(out_dir.join("timing.csv").exists());
}

#[test]
fn register_too_few_matches_reports_no_consensus() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 2, "13");
    let ckpt = tmp.path().join("net.ckdn");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
        "--views",
        "1",
        "--hidden",
        "4",
        "--dim",
        "8",
        "--seed",
        "2",
    ]);
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    let id = manifest
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    let case_dir = data.join("cases").join(&id);
    // two keypoints cannot support a projective fit
    let tiny = tmp.path().join("tiny.csv");
    let full = std::fs::read_to_string(case_dir.join("keypoints_fixed.csv")).unwrap();
    let reduced: Vec<&str> = full.lines().take(3).collect();
    std::fs::write(&tiny, reduced.join("\n") + "\n").unwrap();
    let out = run(&[
        "register",
        "--fixed",
        case_dir.join("fixed.png").to_str().unwrap(),
        "--moving",
        case_dir.join("moving.png").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--fixed-keypoints",
        tiny.to_str().unwrap(),
        "--moving-keypoints",
        tiny.to_str().unwrap(),
        "--out",
        tmp.path().join("reg2").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("consensus"),
        "diagnostic should mention consensus: {err}"
    );
}

#[test]
fn detect_describe_match_stage_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 2, "17");
    let ckpt = tmp.path().join("net.ckdn");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
        "--views",
        "1",
        "--hidden",
        "4",
        "--dim",
        "8",
        "--seed",
        "2",
    ]);
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    let id = manifest
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    let case_dir = data.join("cases").join(&id);

    // render an oracle heatmap for the detect stage
    let kps =
        vesselreg::keypoints::KeypointSet::read_csv(&case_dir.join("keypoints_fixed.csv")).unwrap();
    let heat = vesselreg::synth::oracle_heatmap(
        &kps,
        (64, 64),
        &vesselreg::keypoints::TargetConfig::default(),
    )
    .unwrap();
    let heat_path = tmp.path().join("fixed_heat.ckdb");
    heat.save(&heat_path).unwrap();

    let det = tmp.path().join("detected.csv");
    run_ok(&[
        "detect",
        "--heatmap",
        heat_path.to_str().unwrap(),
        "--out",
        det.to_str().unwrap(),
    ]);
    let detected = vesselreg::keypoints::KeypointSet::read_csv(&det).unwrap();
    assert_eq!(
        detected.len(),
        kps.len(),
        "oracle heatmap detection is lossless"
    );

    let block_path = tmp.path().join("fixed.ckdb");
    run_ok(&[
        "describe",
        "--image",
        case_dir.join("fixed.png").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        block_path.to_str().unwrap(),
    ]);

    let matches_path = tmp.path().join("matches.csv");
    run_ok(&[
        "match",
        "--fixed-desc",
        block_path.to_str().unwrap(),
        "--fixed-keypoints",
        det.to_str().unwrap(),
        "--moving-desc",
        block_path.to_str().unwrap(),
        "--moving-keypoints",
        det.to_str().unwrap(),
        "--out",
        matches_path.to_str().unwrap(),
    ]);
    let matches = std::fs::read_to_string(&matches_path).unwrap();
    assert_eq!(
        matches.lines().count(),
        1 + detected.len(),
        "self-match pairs every keypoint"
    );
    for line in matches.lines().skip(1) {
        let sim: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(
            (sim - 1.0).abs() < 1e-6,
            "self-similarity must be 1, got {sim}"
        );
    }
}
