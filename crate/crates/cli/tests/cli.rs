use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mild(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mild"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mild")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_then_run_recovers_loops() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&mild(
        &[
            "synth",
            "--out-dir",
            "data",
            "--loop-benchmark",
            "--name",
            "lb",
        ],
        d,
    ));
    assert!(d.join("data/lb.mild").exists());
    assert!(d.join("data/lb.gt").exists());

    let stdout = ok(&mild(
        &[
            "run",
            "--dataset",
            "data/lb.mild",
            "--ground-truth",
            "data/lb.gt",
            "--output",
            "out",
        ],
        d,
    ));
    assert!(
        stdout.contains("recall at 100% precision 1.0000"),
        "{stdout}"
    );
    for f in [
        "config.json",
        "report.json",
        "similarity.csv",
        "detections.csv",
        "evaluation.json",
        "pr_curve.csv",
    ] {
        assert!(d.join("out").join(f).exists(), "{f} missing");
    }
    let eval = json(&d.join("out/evaluation.json"));
    assert_eq!(eval["recall_at_full_precision"], 1.0);
    assert_eq!(eval["ground_truth_pairs"], 11);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&mild(
        &[
            "synth",
            "--out-dir",
            ".",
            "--images",
            "15",
            "--features",
            "20",
            "--loops",
            "13:1",
        ],
        d,
    ));
    fs::write(
        d.join("cfg.toml"),
        "exclusion_window = 5\nbucket_cap = 0\ndataset = \"synthetic.mild\"\noutput = \"from-file\"\n\
         [substrings]\nm = 32\n[bayes]\np0 = 0.8\nwindow = 3\n",
    )
    .unwrap();
    ok(&mild(
        &[
            "run",
            "--config",
            "cfg.toml",
            "--m",
            "8",
            "--workers",
            "2",
            "--output",
            "o",
        ],
        d,
    ));
    assert!(!d.join("from-file").exists());
    let cfg = json(&d.join("o/config.json"));
    assert_eq!(cfg["substrings"]["m"], 8);
    assert_eq!(cfg["exclusion_window"], 5);
    assert_eq!(cfg["bucket_cap"], 0);
    assert_eq!(cfg["workers"], 2);
    assert_eq!(cfg["bayes"]["p0"], 0.8);
    assert_eq!(cfg["bayes"]["window"], 3);
    assert_eq!(cfg["bayes"]["p_stay"], 0.9);
}

#[test]
fn workers_default_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&mild(
        &[
            "synth",
            "--out-dir",
            ".",
            "--images",
            "12",
            "--features",
            "10",
        ],
        d,
    ));
    ok(&mild(
        &["run", "--dataset", "synthetic.mild", "--output", "o"],
        d,
    ));
    let cfg = json(&d.join("o/config.json"));
    assert_eq!(cfg["workers"], 1);
    assert!(!d.join("o/evaluation.json").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("unknown.toml"), "nonsense = 3\n").unwrap();
    let out = mild(
        &[
            "run",
            "--config",
            "unknown.toml",
            "--dataset",
            "x",
            "--output",
            "o",
        ],
        d,
    );
    assert!(!out.status.success());

    let out = mild(&["run", "--m", "3", "--dataset", "x", "--output", "o"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("divide"));

    let out = mild(&["run", "--output", "o"], d);
    assert!(!out.status.success());

    fs::write(d.join("junk.mild"), b"NOPE").unwrap();
    let out = mild(&["run", "--dataset", "junk.mild", "--output", "o"], d);
    assert!(!out.status.success());
}

#[test]
fn analyze_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&mild(
        &[
            "analyze",
            "--out-dir",
            "curves",
            "--m-values",
            "8,16",
            "--d-max",
            "40",
        ],
        d,
    ));
    let recall = fs::read_to_string(d.join("curves/recall.csv")).unwrap();
    assert_eq!(recall.lines().next(), Some("m,d,p_recall"));
    assert_eq!(recall.lines().count(), 1 + 2 * 41);
    assert!(recall.contains("16,15,1"));
    let tradeoff = fs::read_to_string(d.join("curves/tradeoff.csv")).unwrap();
    assert_eq!(tradeoff.lines().count(), 3);
    assert!(!mild(&["analyze", "--out-dir", "c", "--m-values", "3"], d)
        .status
        .success());
}

#[test]
fn gt_convert_reads_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.txt"), "0,0,0,1\n0,0,0,0\n0,0,0,0\n1,0,0,0\n").unwrap();
    ok(&mild(
        &["gt-convert", "--input", "m.txt", "--output", "gt.txt"],
        d,
    ));
    let text = fs::read_to_string(d.join("gt.txt")).unwrap();
    assert!(
        text.lines().any(|l| l.split_whitespace().eq(["3", "0"])),
        "{text}"
    );
    assert!(!mild(
        &["gt-convert", "--input", "missing.txt", "--output", "x"],
        d
    )
    .status
    .success());
}

#[test]
fn bench_reports_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(&mild(
        &[
            "bench",
            "--images",
            "40",
            "--features",
            "50",
            "--brute-frames",
            "2",
            "--output",
            "b.json",
        ],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["images"], 40);
    assert_eq!(v["workers"], 1);
    assert!(v["speedup"].as_f64().unwrap() > 0.0);
    assert_eq!(json(&d.join("b.json")), v);
}
