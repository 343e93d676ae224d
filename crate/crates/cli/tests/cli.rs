use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use grcvit::model::flops::{grc_layer, swin_layer, LayerSpec};

fn grcvit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grcvit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = grcvit(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("resolved_config.json").exists());
    String::from_utf8(o.stdout).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn constant_images_route_coarse_with_raised_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "alpha = 0.6\n").unwrap();
    ok(dir.path(), &["profile", "--input", "synth:constant:0.5@32x32*10", "--config", cfg.to_str().unwrap()]);
    let rows = csv_rows(&dir.path().join("complexity.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r[4] == "0.5" && r[5] == "1"));
    let hist: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("histogram.json")).unwrap()).unwrap();
    assert_eq!(hist["levels"][0]["fraction"], 1.0);
}

#[test]
fn histogram_counts_sum_to_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        r#"
        [[synthetic]]
        kind = "checkerboard"
        period = 1
        width = 32
        height = 32

        [[synthetic]]
        kind = "step-edge"
        width = 32
        height = 32
        "#,
    )
    .unwrap();
    ok(dir.path(), &["profile", "--input", "synth:textured:1:4@32x32*5", "--config", cfg.to_str().unwrap()]);
    let hist: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("histogram.json")).unwrap()).unwrap();
    let total: u64 = hist["levels"].as_array().unwrap().iter().map(|l| l["count"].as_u64().unwrap()).sum();
    assert_eq!((total, hist["images"].as_u64().unwrap()), (7, 7));
}

#[test]
fn profile_reads_image_directories() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    fs::create_dir(&imgs).unwrap();
    for i in 0..3 {
        let spec = format!("noise:{i}@16x16").parse().unwrap();
        fs::write(imgs.join(format!("{i}.pgm")), grcvit::image::encode_pgm(&grcvit::image::generate(&spec))).unwrap();
    }
    let out = dir.path().join("out");
    ok(&out, &["profile", "--input", imgs.to_str().unwrap()]);
    assert_eq!(csv_rows(&out.join("complexity.csv")).len(), 3);
}

#[test]
fn error_paths_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = grcvit(dir.path(), &["profile", "--input", "/no/such/dir"]);
    assert_eq!(missing.status.code(), Some(3));
    let bad_flag = grcvit(dir.path(), &["profile", "--granularity", "7"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let unknown = grcvit(dir.path(), &["flops", "--config", cfg.to_str().unwrap()]);
    assert_eq!(unknown.status.code(), Some(2));
    let bad_routing = grcvit(dir.path(), &["train-toy", "--routing", "sideways"]);
    assert_eq!(bad_routing.status.code(), Some(2));
}

#[test]
fn estimator_training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["train-estimator", "--input", "synth:noise:1@32x32*6", "--seed", "4", "--epochs", "3"];
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        r#"
        [[synthetic]]
        kind = "constant"
        value = 0.3
        width = 32
        height = 32

        [[synthetic]]
        kind = "checkerboard"
        period = 4
        width = 32
        height = 32
        "#,
    )
    .unwrap();
    let mut with_cfg = args.to_vec();
    with_cfg.extend(["--config", cfg.to_str().unwrap()]);
    ok(&a, &with_cfg);
    ok(&b, &with_cfg);
    let ta = fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(ta, fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(fs::read(a.join("estimator.json")).unwrap(), fs::read(b.join("estimator.json")).unwrap());
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 5);
}

#[test]
fn zero_epochs_gives_initial_row_only() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train-estimator", "--input", "synth:textured:0:1@32x32*9", "--epochs", "0"]);
    let text = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "epoch,loss,alpha,beta");
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn flops_single_layer_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["flops"]);
    let rows = csv_rows(&dir.path().join("flops.csv"));
    let layer = LayerSpec { h: 56, w: 56, c: 96, m: 7 };
    // 4*56*56*96^2 + 2*56*56*96*49 and 3*56*56*96^2 + 2*56*56*96*49 + 3*56*56*96
    assert_eq!(swin_layer(&layer), 145_108_992);
    assert_eq!(grc_layer(&layer), 117_110_784);
    assert_eq!(rows[0][1], "145108992");
    assert_eq!(rows[0][2], "117110784");
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap() < 1.0));
}

#[test]
fn empty_sweep_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(&cfg, "sweep = []\n").unwrap();
    ok(dir.path(), &["flops", "--config", cfg.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(dir.path().join("flops.csv")).unwrap(), "config,swin,grc,ratio\n");
}

#[test]
fn route_constant_image_is_coarse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "alpha = 0.6\n").unwrap();
    let stdout = ok(dir.path(), &["route", "--input", "synth:constant:0.8@32x32", "--config", cfg.to_str().unwrap()]);
    assert!(stdout.contains("granularity=1"), "{stdout}");
}

#[test]
fn route_with_checkpoint_emits_logits() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    ok(&train, &["train-toy", "--routing", "fixed:2", "--epochs", "1"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(train.join("summary.json")).unwrap()).unwrap();
    assert!(summary["test_accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(csv_rows(&train.join("metrics.csv")).len(), 1);
    let ckpt = train.join("model");
    let out = dir.path().join("route");
    let stdout = ok(&out, &["route", "--input", "synth:textured:2:3@48x48", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(stdout.contains("class="));
    let rows = csv_rows(&out.join("route.csv"));
    assert_eq!(rows[0].len(), 6 + 1 + 3);
}

#[test]
fn gradcheck_tiny_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3, "{stdout}");
    assert_eq!(report["pass"], true);
}

#[test]
fn gradcheck_fails_nonzero_above_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("strict.toml");
    // a huge finite-difference step makes the estimate visibly wrong
    fs::write(&cfg, "step = 0.5\nthreshold = 1e-12\n").unwrap();
    let o = grcvit(dir.path(), &["gradcheck", "--granularity", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn attention_dump_rows_are_distributions() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["attn-dump", "--granularity", "3", "--seed", "2"]);
    let index = csv_rows(&dir.path().join("attention_index.csv"));
    assert_eq!(index.len(), 2);
    for entry in index {
        let rows = csv_rows(&dir.path().join(&entry[6]));
        assert!(!rows.is_empty());
        for r in rows {
            let sum: f64 = r[3..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9, "{sum}");
        }
    }
}
