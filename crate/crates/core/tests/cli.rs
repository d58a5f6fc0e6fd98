use std::path::Path;
use std::process::{Command, Output};

use spectral_ancestry::cluster::parse_dendrogram;
use spectral_ancestry::genotype_io::write_genotypes;
use spectral_ancestry::simulate::{gen_structured, StructuredSpec};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spectral-ancestry"));
    cmd.env_remove("SPECTRAL_ANCESTRY_THREADS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn panel(dir: &Path, with_phenotype: bool) -> String {
    let p = gen_structured(&StructuredSpec { k: 2, fst: 0.1, n: 60, p: 300, proportions: None }, 17).unwrap();
    let mut g = p.genotypes;
    if with_phenotype {
        g = g.with_phenotype((0..60).map(|i| Some((i % 2) as u8)).collect()).unwrap();
    }
    let path = dir.join(if with_phenotype { "cc.tsv" } else { "plain.tsv" });
    write_genotypes(&g, &path).unwrap();
    path.to_str().unwrap().to_string()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn embed_writes_stage_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let input = panel(tmp.path(), false);
    let out = tmp.path().join("embed");
    let o = run(&["embed", "--in", &input, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["eigenvalues.tsv", "eigengaps.tsv", "dimension.tsv", "embedding.tsv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let dims = read(&out.join("dimension.tsv"));
    assert!(dims.lines().count() >= 2);
    let embedding = read(&out.join("embedding.tsv"));
    assert_eq!(embedding.lines().count(), 61);
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "embed");
    // The resolved config is echoed as JSON on stdout.
    let echoed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(echoed["kernel"]["type"], "spectral");
}

#[test]
fn cluster_exports_a_parsable_dendrogram() {
    let tmp = tempfile::tempdir().unwrap();
    let input = panel(tmp.path(), false);
    let out = tmp.path().join("cluster");
    let o = run(&["cluster", "--in", &input, "--out", out.to_str().unwrap(), "--k", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let clusters = read(&out.join("clusters.tsv"));
    assert_eq!(clusters.lines().count(), 61);
    let merges = parse_dendrogram(read(&out.join("dendrogram.nwk")).trim(), 2).unwrap();
    assert_eq!(merges.len(), 1);
}

#[test]
fn assoc_without_phenotype_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let input = panel(tmp.path(), false);
    let o = run(&["assoc", "--in", &input, "--out", tmp.path().join("a").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("PHENOTYPE"));
}

#[test]
fn assoc_methods_write_results() {
    let tmp = tempfile::tempdir().unwrap();
    let input = panel(tmp.path(), true);
    for method in ["uncorrected", "spectralR", "spectralGEM", "cmh", "pca"] {
        let out = tmp.path().join(method);
        let o = run(&["assoc", "--in", &input, "--out", out.to_str().unwrap(), "--method", method]);
        assert!(o.status.success(), "{method}: {}", String::from_utf8_lossy(&o.stderr));
        let table = read(&out.join("assoc.tsv"));
        assert_eq!(table.lines().count(), 301, "{method}");
    }
    assert!(tmp.path().join("spectralGEM/strata.tsv").exists());
}

#[test]
fn bad_arguments_exit_with_usage_error() {
    let o = run(&["embed", "--in", "missing.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["embed", "--in", "missing.tsv", "--out", "x", "--k", "zero"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn threads_env_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let input = panel(tmp.path(), false);
    let o = bin()
        .args(["embed", "--in", &input, "--out", tmp.path().join("e").to_str().unwrap()])
        .env("SPECTRAL_ANCESTRY_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn calibrate_writes_a_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("model.json");
    let o = run(&["calibrate", "--grid", "30x200,60x200,60x400", "--reps", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model: serde_json::Value = serde_json::from_str(&read(&out)).unwrap();
    for key in ["a", "b", "c", "quantile", "cells"] {
        assert!(model.get(key).is_some(), "{key} missing");
    }
    // The model file feeds straight back into --threshold.
    let input = panel(tmp.path(), false);
    let o = run(&[
        "embed",
        "--in",
        &input,
        "--out",
        tmp.path().join("e").to_str().unwrap(),
        "--threshold",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_writes_rate_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "name": "smoke",
        "panel": {"fst": 0.05, "n": 80, "p": 200},
        "scenario": {
            "clusters": [
                {"name": "a", "proportion": 0.5, "case_prob": 0.3},
                {"name": "b", "proportion": 0.5, "case_prob": 0.7}
            ],
            "seed": 3
        },
        "causal": {"r": 1.5, "m": 20},
        "seed": 3
    });
    let path = tmp.path().join("sim.json");
    std::fs::write(&path, config.to_string()).unwrap();
    let out = tmp.path().join("sim");
    let o = run(&["simulate", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let type1 = read(&out.join("type1.tsv"));
    assert_eq!(type1.lines().count(), 6);
    assert!(type1.starts_with("method\talpha=0.05\talpha=0.01\talpha=0.005"));
    assert!(out.join("replicates.tsv").exists());
}
