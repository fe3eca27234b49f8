use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gpgl::data::{read_metrics, DatasetSource, ExperimentConfig, MetricsRecord};
use gpgl::model::Threshold;

fn gpgl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpgl")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn epoch_records(path: &Path) -> Vec<gpgl::model::EpochStats> {
    read_metrics(path)
        .unwrap()
        .into_iter()
        .filter_map(|r| match r {
            MetricsRecord::Epoch(e) => Some(e),
            _ => None,
        })
        .collect()
}

fn summary(path: &Path) -> gpgl::data::RunSummary {
    match read_metrics(path).unwrap().pop() {
        Some(MetricsRecord::Summary(s)) => s,
        other => panic!("last record is not a summary: {other:?}"),
    }
}

#[test]
fn train_one_epoch_writes_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = gpgl(&["train", "--preset", "blobs3-fast", "--mode", "baseline", "--epochs", "1", "--out", path_str(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = dir.path().join("metrics.jsonl");
    assert_eq!(epoch_records(&metrics).len(), 1);
    let echoed = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(echoed.optimizer.epochs, 1);
    assert!(dir.path().join("timing.json").exists());
}

#[test]
fn gpgl_summary_carries_variance_and_top_mass() {
    let dir = tempfile::tempdir().unwrap();
    let out = gpgl(&["train", "--preset", "blobs3-fast", "--mode", "gpgl", "--epochs", "2", "--out", path_str(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&dir.path().join("metrics.jsonl"));
    let g = s.gpgl.expect("gpgl summary");
    assert!(g.mean_variance.is_some() && g.top_mass.is_some());
    assert!(s.baseline.is_none());
}

#[test]
fn flag_overrides_reach_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = gpgl(&[
        "train", "--preset", "blobs3-fast", "--epochs", "1", "--seed", "9", "--batch-size", "8",
        "--length-scale", "3.5", "--anchor-per-class", "4", "--c-cor", "1", "--top-k", "2",
        "--swap-norm-denominators", "--out", path_str(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!((cfg.seed, cfg.optimizer.batch_size, cfg.kernel.length_scale), (9, 8, 3.5));
    assert_eq!((cfg.anchors.per_class_count, cfg.anchors.top_k), (4, 2));
    assert_eq!(cfg.anchors.c_cor, gpgl::anchor::NeighborCount::Count(1));
    assert!(cfg.gpgl.swap_norm_denominators);
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset("blobs3-fast").unwrap();
    cfg.dataset = DatasetSource::Csv {
        path: dir.path().join("missing.csv"),
        has_header: false,
        input_shape: vec![],
    };
    cfg.out_dir = dir.path().join("run");
    let cfg_path = dir.path().join("c.toml");
    fs::write(&cfg_path, cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(code(&gpgl(&["train", "--config", path_str(&cfg_path)])), 2);
    assert_eq!(code(&gpgl(&["train", "--preset", "nope"])), 2);
    assert_eq!(code(&gpgl(&["train", "--bogus-flag"])), 2);
    assert_eq!(code(&gpgl(&["train", "--preset", "blobs10", "--config", path_str(&cfg_path)])), 2);
    assert_eq!(code(&gpgl(&["train", "--preset", "blobs3-fast", "--top-k", "9"])), 2);
}

#[test]
fn gp_selftest_default_passes_quickly() {
    let start = std::time::Instant::now();
    let out = gpgl(&["gp-selftest"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert!(stdout(&out).contains("failed=none"));
}

#[test]
fn gp_selftest_is_seeded() {
    let a = gpgl(&["gp-selftest", "--seed", "17", "--oracle-cases", "30"]);
    let b = gpgl(&["gp-selftest", "--seed", "17", "--oracle-cases", "30"]);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn gp_selftest_rejects_negative_noise() {
    assert_eq!(code(&gpgl(&["gp-selftest", "--noise-variance", "-1"])), 2);
}

#[test]
fn gp_selftest_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("snap.json");
    let out = gpgl(&["gp-selftest", "--oracle-cases", "5", "--interpolation-cases", "1", "--dump", path_str(&dump)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("round_trip=exact"));
    let parsed: gpgl::gp::SnapshotDump = serde_json::from_str(&fs::read_to_string(dump).unwrap()).unwrap();
    assert_eq!(parsed.anchors, 10);
}

#[test]
fn gradcheck_command_passes() {
    let out = gpgl(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

fn compare_config(dir: &Path, threshold: Threshold) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::preset("blobs3-fast").unwrap();
    cfg.optimizer.epochs = 2;
    cfg.seeds = 3;
    cfg.threshold = threshold;
    cfg.out_dir = dir.join("out");
    let path = dir.join("compare.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

#[test]
fn compare_writes_a_table_and_per_seed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = compare_config(dir.path(), Threshold::default());
    let first = gpgl(&["compare", "--config", path_str(&cfg)]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let table = stdout(&first);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1, "{table}");
    assert!(lines[0].starts_with("seed\tbaseline_error\tgpgl_error"));
    for seed in 0..3 {
        let run = dir.path().join("out").join(format!("seed-{seed}"));
        assert_eq!(epoch_records(&run.join("metrics.jsonl")).len(), 4);
        assert!(run.join("config.toml").exists());
    }
    let again = gpgl(&["compare", "--config", path_str(&cfg)]);
    assert_eq!(stdout(&again), table);
}

#[test]
fn unreachable_threshold_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = compare_config(dir.path(), Threshold::Fixed(-1.0));
    let out = gpgl(&["compare", "--config", path_str(&cfg)]);
    assert_eq!(code(&out), 0);
    let table = stdout(&out);
    let row = table.lines().nth(1).unwrap();
    assert!(row.ends_with("not reached\tnot reached\tnot reached"), "{row}");
}

#[test]
fn plot_data_has_two_rows_per_mode_for_two_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = compare_config(dir.path(), Threshold::default());
    assert_eq!(code(&gpgl(&["compare", "--config", path_str(&cfg)])), 0);
    let metrics = dir.path().join("out/seed-0/metrics.jsonl");
    let csv_path = dir.path().join("plot.csv");
    assert_eq!(code(&gpgl(&["emit-plot-data", "--metrics", path_str(&metrics), "--out", path_str(&csv_path)])), 0);
    let text = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,epoch,train_error,val_error");
    assert_eq!(lines.iter().filter(|l| l.starts_with("baseline,")).count(), 2);
    assert_eq!(lines.iter().filter(|l| l.starts_with("gpgl,")).count(), 2);
    // no loss: every value parses back to the stored f64
    let stored = epoch_records(&metrics);
    for (line, e) in lines[1..].iter().zip(&stored) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[2].parse::<f64>().unwrap(), e.train_error);
        assert_eq!(fields[3].parse::<f64>().unwrap(), e.val_error);
    }
}

#[test]
fn plot_data_from_empty_run_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.jsonl");
    fs::write(&metrics, "{\"kind\":\"summary\",\"seed\":0,\"threshold\":null,\"baseline\":null,\"gpgl\":null}\n").unwrap();
    let csv_path = dir.path().join("p.csv");
    assert_eq!(code(&gpgl(&["emit-plot-data", "--metrics", path_str(&metrics), "--out", path_str(&csv_path)])), 0);
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), "mode,epoch,train_error,val_error\n");
}

#[test]
fn plot_data_rejects_garbage_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.jsonl");
    fs::write(&metrics, "\n{\"kind\":\"summary\",\"seed\":0,\"threshold\":null,\"baseline\":null,\"gpgl\":null}\n{oops\n").unwrap();
    let out = gpgl(&["emit-plot-data", "--metrics", path_str(&metrics), "--out", path_str(&dir.path().join("p.csv"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));
}
