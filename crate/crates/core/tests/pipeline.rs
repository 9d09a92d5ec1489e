//! End-to-end runs on a tiny synthetic dataset.

use alfa_core::eval::EmbeddingSource;
use alfa_core::harness::{
    export_embeddings, load_dataset, read_metrics, report, run_ablation, run_lodo, ExperimentConfig, Method,
};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    let text = "synth_n_per_domain=40\nimage_size=8\niterations=12\nbatch=12\nhidden=16\nembed=6\nval_every=4\nlr=0.001\nseed=3\n";
    cfg.apply_text(text).unwrap();
    cfg
}

#[test]
fn lodo_writes_one_row_per_target_plus_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let ds = load_dataset(&cfg.data).unwrap();
    let rows = run_lodo(&ds, &cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), ds.n_domains() + 2);
    assert_eq!(rows[ds.n_domains()].target, "mean");
    assert_eq!(rows[ds.n_domains() + 1].target, "std");

    let on_disk = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(on_disk.len(), rows.len());
    for name in ds.domain_names() {
        let run = dir.path().join(format!("target_{name}"));
        for file in [
            "config.txt",
            "losses.csv",
            "meta_losses.csv",
            "validation.csv",
            "predictions.csv",
            "metrics.csv",
        ] {
            assert!(run.join(file).is_file(), "{} missing", run.join(file).display());
        }
    }

    let table = report(&on_disk).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "target,accuracy,auroc,recall");
    assert_eq!(lines.len(), 1 + ds.n_domains() + 2);

    let out = dir.path().join("emb");
    let dump = export_embeddings(&dir.path().join("target_theta_0.5"), EmbeddingSource::All, &out).unwrap();
    assert_eq!(dump.coords.len(), 4 * 40);
    assert!(out.join("embeddings_all.csv").is_file());
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    let ds = load_dataset(&cfg.data).unwrap();
    run_lodo(&ds, &cfg, a.path()).unwrap();
    run_lodo(&ds, &cfg, b.path()).unwrap();
    for rel in [
        "metrics.csv",
        "target_theta_0/losses.csv",
        "target_theta_0.5/predictions.csv",
    ] {
        let (x, y) = (
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
        );
        assert_eq!(x, y, "{rel} differs");
    }
}

#[test]
fn erm_runs_record_no_meta_steps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.method = Method::Erm;
    let ds = load_dataset(&cfg.data).unwrap();
    let rows = run_lodo(&ds, &cfg, dir.path()).unwrap();
    assert!(rows.iter().all(|r| r.mask == "erm" && !r.phase2));
    let meta = std::fs::read_to_string(dir.path().join("target_theta_0/meta_losses.csv")).unwrap();
    assert_eq!(meta.lines().count(), 1, "header only");
}

#[test]
fn ablation_report_has_one_row_per_mask() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.set("iterations", "4").unwrap();
    let ds = load_dataset(&cfg.data).unwrap();
    let rows = run_ablation(&ds, &cfg, &[3], dir.path()).unwrap();
    assert_eq!(rows.len(), 7);
    let table = report(&rows).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "mask,theta_0.5,mean,std");
    let masks: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(masks, ["a", "b", "g", "ab", "ag", "bg", "abg"]);
}
