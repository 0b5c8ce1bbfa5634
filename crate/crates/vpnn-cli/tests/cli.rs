//! End-to-end tests for the `vpnn` binary: flag handling, exit codes, and
//! output formats.

use std::path::Path;
use std::process::{Command, Output};

fn vpnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn extract(line_prefix: &str, text: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(line_prefix))
        .unwrap_or_else(|| panic!("no `{line_prefix}` line in:\n{text}"))
        .to_string()
}

#[test]
fn train_eval_round_trip_on_separable_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("blobs.vpnn");
    let report_path = dir.path().join("report.csv");
    let out = vpnn(&[
        "train",
        "--variant",
        "vpnn",
        "--data",
        "blobs:250,8,2,10,7",
        "--layers",
        "3",
        "--epochs",
        "20",
        "--lr",
        "0.05",
        "--lr-late",
        "0.05",
        "--seed",
        "1",
        "--out",
        model_path.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let accuracy: f64 = extract("final_accuracy=", &stdout(&out)).parse().unwrap();
    assert!(accuracy >= 0.99, "got {accuracy}");

    let report = std::fs::read_to_string(&report_path).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("epoch,loss,test_accuracy,seconds"));
    assert_eq!(lines.count(), 20);

    let out = vpnn(&[
        "eval",
        "--model",
        model_path.to_str().unwrap(),
        "--data",
        "blobs:250,8,2,10,7",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let accuracy: f64 = extract("accuracy=", &stdout(&out)).parse().unwrap();
    assert!(accuracy >= 0.99, "got {accuracy}");
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = vpnn(&["train", "--data", "blobs:10,8,2,5,1", "--layers", "3", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("--variant"), "stderr: {err}");
}

#[test]
fn unknown_flag_is_rejected() {
    let out = vpnn(&["paramcount", "--variant", "vpnn", "--n-in", "784", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cheb_m_override_builds_vpnn13_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("m13.vpnn");
    let out = vpnn(&[
        "train",
        "--variant",
        "vpnn",
        "--cheb-m",
        "1.3",
        "--data",
        "blobs:20,8,2,5,3",
        "--layers",
        "3",
        "--epochs",
        "0",
        "--out",
        model_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let model = vpnn::Model::load(&model_path).unwrap();
    assert_eq!(model.variant(), vpnn::Variant::Vpnn);
    for layer in model.layers() {
        let cheb = layer.activation().chebyshev().expect("chebyshev layer");
        assert_eq!(cheb.m_for_pair(0), 1.3);
    }
}

#[test]
fn gradcheck_vpnnt_passes() {
    let out = vpnn(&[
        "gradcheck",
        "--variant",
        "vpnnt",
        "--n-in",
        "8",
        "--layers",
        "3",
        "--seed",
        "1",
        "--tol",
        "1e-5",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS"), "{text}");
    assert!(text.contains("group=chebyshev"), "{text}");
}

#[test]
fn gradcheck_rejects_wide_models() {
    let out = vpnn(&[
        "gradcheck",
        "--variant",
        "vpnn",
        "--n-in",
        "18",
        "--layers",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn volcheck_refuses_non_volume_preserving_variants() {
    for variant in ["s-relu", "mixed1", "mixed2"] {
        let out = vpnn(&[
            "volcheck",
            "--variant",
            variant,
            "--n-in",
            "6",
            "--layers",
            "2",
        ]);
        assert_eq!(out.status.code(), Some(2), "variant {variant}");
        assert!(
            stderr(&out).contains("not volume preserving"),
            "stderr: {}",
            stderr(&out)
        );
    }
}

#[test]
fn volcheck_vpnn_dets_near_one() {
    let out = vpnn(&[
        "volcheck",
        "--variant",
        "vpnn",
        "--n-in",
        "6",
        "--layers",
        "2",
        "--seed",
        "3",
        "--points",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let mut checked = 0;
    for line in text.lines() {
        if let Some(det) = line.strip_prefix("det=") {
            let det: f64 = det.parse().unwrap();
            assert!((det - 1.0).abs() < 1e-4, "det {det}");
            checked += 1;
        }
    }
    assert_eq!(checked, 5);
    assert!(text.contains("PASS"));
}

#[test]
fn profile_needs_three_layers() {
    let out = vpnn(&[
        "profile",
        "--variant",
        "vpnn",
        "--data",
        "blobs:30,8,2,5,1",
        "--layers",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn profile_emits_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = |path: &Path| {
        let out = vpnn(&[
            "profile",
            "--variant",
            "s-relu",
            "--data",
            "blobs:60,8,2,5,5",
            "--layers",
            "10",
            "--epochs",
            "2",
            "--batch",
            "20",
            "--seed",
            "9",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
        let slope: f64 = extract("slope=", &stdout(&out)).parse().unwrap();
        assert!(slope.is_finite());
        std::fs::read(path).unwrap()
    };
    let a = run(&dir.path().join("a.csv"));
    let b = run(&dir.path().join("b.csv"));
    assert_eq!(a, b, "same seeds must give byte-identical profile CSVs");

    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("layer,delta_norm,y_log10\n"));
    assert!(text.lines().count() == 11, "9 layers + header + slope");
    assert!(text.lines().last().unwrap().starts_with("slope,"));
}

#[test]
fn paramcount_matches_published_table() {
    for (variant, n_in, want) in [
        ("vpnn", "784", "per_layer=9408"),
        ("vpnnt", "784", "per_layer=9800"),
        ("s-relu", "784", "per_layer=615440"),
        ("vpnn", "4000", "per_layer=56000"),
        ("vpnnt", "4000", "per_layer=58000"),
        ("s-relu", "4000", "per_layer=16004000"),
    ] {
        let out = vpnn(&["paramcount", "--variant", variant, "--n-in", n_in]);
        assert!(out.status.success());
        let text = stdout(&out);
        assert!(text.contains(want), "{variant}/{n_in}: {text}");
    }
}

#[test]
fn data_errors_exit_3() {
    let out = vpnn(&[
        "eval",
        "--model",
        "/nonexistent/model.vpnn",
        "--data",
        "blobs:10,8,2,5,1",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}

#[test]
fn divergence_exits_4() {
    let out = vpnn(&[
        "train",
        "--variant",
        "vpnnt",
        "--data",
        "blobs:50,8,2,6,3",
        "--layers",
        "3",
        "--epochs",
        "5",
        "--lr",
        "1e6",
        "--lr-late",
        "1e6",
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "stderr: {}", stderr(&out));
}

#[test]
fn bad_data_spec_exits_2() {
    let out = vpnn(&[
        "train",
        "--variant",
        "vpnn",
        "--data",
        "parquet:nope",
        "--layers",
        "3",
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn csv_dataset_trains() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("tiny.csv");
    let mut rows = String::from("label,f0,f1,f2,f3\n");
    for i in 0..40 {
        let class = i % 2;
        let base = if class == 0 { 0.1 } else { 0.9 };
        rows.push_str(&format!(
            "{class},{},{},{},{}\n",
            base,
            base,
            1.0 - base,
            base
        ));
    }
    std::fs::write(&csv_path, rows).unwrap();
    let out = vpnn(&[
        "train",
        "--variant",
        "mixed1",
        "--data",
        &format!("csv:{}", csv_path.display()),
        "--layers",
        "3",
        "--epochs",
        "10",
        "--lr",
        "0.05",
        "--batch",
        "10",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let accuracy: f64 = extract("final_accuracy=", &stdout(&out)).parse().unwrap();
    assert!(accuracy >= 0.99, "fully separated two-point classes: {accuracy}");
}
