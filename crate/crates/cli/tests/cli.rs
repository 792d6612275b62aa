use std::path::Path;
use std::process::Command;

use curvedn::commands::MetricRow;
use curvedn::config::RunConfig;
use curvedn::snapshot::list_snapshots;
use curvedn::{cmd_eval, cmd_gen, cmd_is, cmd_train};

const TINY: &str = r#"
images = 6
eval_images = 2
steps = 20
snapshot_interval = 10

[scene]
instances_per_image = [3, 3]
alphabet_size = 5
transcript_len = [1, 3]
grid = 6

[decoder]
dim = 8
heads = 2
ffn_dim = 8
points_per_curve = 5
alphabet_size = 5
matching_queries = 4
"#;

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(TINY).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg.resolve().unwrap()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_curvedn"));
    c.env_remove("CURVEDN_OUTPUT_DIR").env_remove("CURVEDN_SEED");
    c
}

fn read_metrics(path: &Path) -> Vec<MetricRow> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_is_repeatable_and_counts_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        output_dir: dir.path().join("a"),
        eval_images: 0,
        ..RunConfig::default()
    }
    .resolve()
    .unwrap();
    let s = cmd_gen(&cfg).unwrap();
    assert_eq!((s.records, s.instances), (100, 700));
    let first = std::fs::read(cfg.dataset_path()).unwrap();
    cmd_gen(&cfg).unwrap();
    assert_eq!(first, std::fs::read(cfg.dataset_path()).unwrap());

    let mut parallel = cfg.clone();
    parallel.output_dir = dir.path().join("b");
    parallel.jobs = 4;
    cmd_gen(&parallel).unwrap();
    assert_eq!(first, std::fs::read(parallel.dataset_path()).unwrap());
}

#[test]
fn gen_reports_unwritable_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let cfg = tiny(&blocker.join("sub"));
    assert!(cmd_gen(&cfg).is_err());
}

#[test]
fn train_without_steps_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.steps = 0;
    cmd_gen(&cfg).unwrap();
    let s = cmd_train(&cfg, |_, _| {}).unwrap();
    assert!(s.checkpoint.exists());
    assert!(read_metrics(&cfg.metrics_path()).is_empty());
    assert_eq!(list_snapshots(&cfg.snapshot_dir()).unwrap().len(), 1);
}

#[test]
fn train_requires_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let err = format!("{:#}", cmd_train(&tiny(dir.path()), |_, _| {}).unwrap_err());
    assert!(err.contains("dataset"), "{err}");
}

#[test]
fn train_logs_every_step_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_gen(&cfg).unwrap();
    let summary = cmd_train(&cfg, |_, _| {}).unwrap();
    let rows = read_metrics(&cfg.metrics_path());
    assert_eq!(rows.len(), 40);
    assert_eq!(rows.iter().filter(|r| r.part == "dn").count(), 20);
    assert!(rows.iter().all(|r| r.loss_total.is_finite() && r.wall_time == 0.0));
    for r in &rows {
        let sum = r.loss_cls + r.loss_text_pos + r.loss_text_neg + r.loss_coord + r.loss_bd;
        assert!((sum - r.loss_total).abs() < 1e-9);
    }
    assert_eq!(summary.trace.iter().map(|t| t.step).collect::<Vec<_>>(), vec![0, 10, 20]);

    let is = cmd_is(&cfg.snapshot_dir(), &dir.path().join("is.jsonl")).unwrap();
    assert_eq!(is.len(), 2);
    assert!(is.iter().all(|r| r.is >= 0.0 && r.is <= 6.0));

    let report = cmd_eval(&cfg.checkpoint_path(), &cfg.eval_path(), 0.5, 0.05).unwrap();
    assert_eq!(report.images, 2);
}

#[test]
fn dn_off_run_logs_only_matching_part() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.ablation = curvedn_core::decoder::train::Ablation::NONE;
    cmd_gen(&cfg).unwrap();
    cmd_train(&cfg, |_, _| {}).unwrap();
    let rows = read_metrics(&cfg.metrics_path());
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.part == "match"));
}

#[test]
fn smoke_run_stays_finite() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.steps = 2000;
    cfg.snapshot_interval = 1000;
    cfg.eval_images = 0;
    cmd_gen(&cfg).unwrap();
    let mut finite = 0;
    cmd_train(&cfg, |_, o| {
        if o.matching.total().is_finite() && o.dn.as_ref().is_some_and(|d| d.total().is_finite()) {
            finite += 1;
        }
    })
    .unwrap();
    assert_eq!(finite, 2000);
}

#[test]
fn binary_rejects_malformed_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "steps = 3\n[decoder]\nlayerz = 2\n").unwrap();
    let out = bin().arg("gen").arg("-c").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("layerz"), "{err}");
}

#[test]
fn binary_end_to_end_with_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, TINY).unwrap();
    let out_dir = dir.path().join("out");
    let run = |args: &[&str]| {
        let out = bin()
            .args(args)
            .env("CURVEDN_OUTPUT_DIR", &out_dir)
            .env("CURVEDN_SEED", "3")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let c = path.to_str().unwrap();
    let gen = run(&["gen", "-c", c]);
    assert!(gen.contains("6 records (18 instances)"), "{gen}");
    run(&["train", "-c", c, "--steps", "4", "--snapshot-interval", "2", "--no-mcs"]);
    assert!(out_dir.join("checkpoint.bin").exists());
    let is = run(&["is", out_dir.join("snapshots").to_str().unwrap()]);
    assert!(is.contains("wrote 2 rows"), "{is}");
    let ckpt = out_dir.join("checkpoint.bin");
    let report = run(&["eval", ckpt.to_str().unwrap(), out_dir.join("eval.jsonl").to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["images"], 2);

    let missing = bin().args(["eval", "/nonexistent.bin", "/nonexistent.jsonl"]).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn default_config_parses_back() {
    let out = bin().arg("default-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}
