//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 when
//! the numerical machinery fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::assoc::Method;
use crate::cluster::{dendrogram_export, ClusterCount};
use crate::dimsel::{calibrate_threshold, ThresholdModel};
use crate::error::{Error, Result};
use crate::genotype_io::{read_genotypes, GenotypeMatrix};
use crate::pipeline::{
    cluster_subjects, cluster_table, front_end, front_end_tables, prepare, run_cmh, run_pca_baseline,
    run_spectral_gem, run_spectral_r, run_uncorrected, AnalysisConfig, KernelChoice, QcParams, RunWriter,
};
use crate::simulate::{run_experiment, ExperimentConfig};

pub const THREADS_ENV: &str = "SPECTRAL_ANCESTRY_THREADS";

#[derive(Debug, Parser)]
#[command(name = "spectral-ancestry", version, about = "Spectral ancestry maps, case-control matching and association scans")]
pub struct Cli {
    /// Worker threads (default: SPECTRAL_ANCESTRY_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed subjects and report the selected dimension.
    Embed(AnalysisArgs),
    /// Embed, then cluster subjects and export the dendrogram.
    Cluster(AnalysisArgs),
    /// Association scan with one method.
    Assoc(AssocArgs),
    /// Type-I error and power experiment from a JSON config.
    Simulate(SimulateArgs),
    /// Refit the eigengap threshold on homogeneous simulations.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Spectral,
    Pca,
    Ibs,
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    /// Genotype table: IID, optional PHENOTYPE, then one 0/1/2/NA column per SNP.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// JSON analysis config; flags override its fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    /// Bandwidth of the IBS kernel.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Center allele counts without dividing by their standard deviation.
    #[arg(long)]
    pub no_scale: bool,
    /// Threshold model JSON, as written by `calibrate`.
    #[arg(long, value_name = "FILE")]
    pub threshold: Option<PathBuf>,
    /// Number of PCA axes.
    #[arg(long)]
    pub pca_dims: Option<usize>,
    /// Cluster count: a number or `auto`.
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub min_cluster_size: Option<usize>,
    /// Drop SNPs with minor allele frequency below this.
    #[arg(long)]
    pub maf_min: Option<f64>,
    /// Drop SNPs with a missing rate above this.
    #[arg(long)]
    pub miss_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AssocArgs {
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// uncorrected, spectralR, spectralGEM, cmh or pca.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Comma-separated `NxP` cells, e.g. `100x1000,200x2000,400x4000`.
    #[arg(long, default_value = "100x1000,200x1000,200x2000,400x2000,400x4000,800x8000")]
    pub grid: String,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.99)]
    pub quantile: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// File receiving the fitted model as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn print_resolved<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_k(text: &str) -> Result<ClusterCount> {
    if text.eq_ignore_ascii_case("auto") {
        return Ok(ClusterCount::Auto);
    }
    match text.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(ClusterCount::Fixed(k)),
        _ => Err(Error::Config(format!("--k must be a positive integer or 'auto', got '{text}'"))),
    }
}

/// Config file (or defaults) with every given flag applied on top.
pub fn resolve(args: &AnalysisArgs) -> Result<AnalysisConfig> {
    let mut c: AnalysisConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => AnalysisConfig::default(),
    };
    match (args.kernel, args.sigma2) {
        (Some(KernelArg::Spectral), None) => c.kernel = KernelChoice::Spectral,
        (Some(KernelArg::Pca), None) => c.kernel = KernelChoice::Pca,
        (Some(KernelArg::Ibs), Some(sigma2)) => c.kernel = KernelChoice::Ibs { sigma2 },
        (Some(KernelArg::Ibs), None) => match c.kernel {
            KernelChoice::Ibs { .. } => {}
            _ => return Err(Error::Config("--kernel ibs needs --sigma2".into())),
        },
        (None, Some(sigma2)) => match c.kernel {
            KernelChoice::Ibs { .. } => c.kernel = KernelChoice::Ibs { sigma2 },
            _ => return Err(Error::Config("--sigma2 applies only to the ibs kernel".into())),
        },
        (Some(_), Some(_)) => return Err(Error::Config("--sigma2 applies only to the ibs kernel".into())),
        (None, None) => {}
    }
    if args.no_scale {
        c.scale = false;
    }
    if let Some(p) = &args.threshold {
        c.threshold = read_json(p)?;
    }
    if let Some(d) = args.pca_dims {
        c.pca_dims = d;
    }
    if let Some(k) = &args.k {
        c.clusters = parse_k(k)?;
    }
    if let Some(m) = args.min_cluster_size {
        c.min_cluster_size = m;
    }
    if args.maf_min.is_some() || args.miss_max.is_some() {
        let base = c.qc.unwrap_or(QcParams {
            maf_min: crate::genotype_io::DEFAULT_MAF_MIN,
            miss_max: crate::genotype_io::DEFAULT_MISS_MAX,
        });
        c.qc = Some(QcParams {
            maf_min: args.maf_min.unwrap_or(base.maf_min),
            miss_max: args.miss_max.unwrap_or(base.miss_max),
        });
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    c.out_dir = Some(args.out.clone());
    c.validate()?;
    Ok(c)
}

fn load(args: &AnalysisArgs) -> Result<(AnalysisConfig, GenotypeMatrix)> {
    let config = resolve(args)?;
    print_resolved(&config)?;
    Ok((config, read_genotypes(&args.input)?))
}

fn embed_cmd(args: &AnalysisArgs) -> Result<()> {
    let (config, g) = load(args)?;
    let g = prepare(&g, &config)?;
    let mut w = RunWriter::new(config.out_dir.as_deref())?;
    let front = front_end(&g, &config, None)?;
    for (name, t) in front_end_tables(&front, &g) {
        w.table(name, &t)?;
    }
    w.finish(&config, "embed")
}

fn cluster_cmd(args: &AnalysisArgs) -> Result<()> {
    let (config, g) = load(args)?;
    let g = prepare(&g, &config)?;
    let mut w = RunWriter::new(config.out_dir.as_deref())?;
    let front = front_end(&g, &config, None)?;
    for (name, t) in front_end_tables(&front, &g) {
        w.table(name, &t)?;
    }
    let clusters = cluster_subjects(&g, &front, &config)?;
    w.table("clusters.tsv", &cluster_table(&clusters, &g))?;
    w.text("dendrogram.nwk", &(dendrogram_export(&clusters) + "\n"))?;
    w.finish(&config, "cluster")
}

fn assoc_cmd(args: &AssocArgs) -> Result<()> {
    let mut config = resolve(&args.analysis)?;
    if let Some(m) = &args.method {
        config.method = m.parse()?;
    }
    print_resolved(&config)?;
    let g = read_genotypes(&args.analysis.input)?;
    if g.phenotype().is_none() {
        return Err(Error::Validation(format!(
            "{} has no PHENOTYPE column; association needs case/control labels",
            args.analysis.input.display()
        )));
    }
    match config.method {
        Method::Uncorrected => run_uncorrected(&g, &config).map(drop),
        Method::SpectralR => run_spectral_r(&g, &config).map(drop),
        Method::SpectralGem => run_spectral_gem(&g, &config).map(drop),
        Method::Cmh => run_cmh(&g, &config).map(drop),
        Method::Pca => run_pca_baseline(&g, &config).map(drop),
    }
}

fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    let mut config: ExperimentConfig = read_json(&args.config)?;
    if let Some(r) = args.reps {
        config.reps = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    print_resolved(&config)?;
    run_experiment(&config, Some(&args.out)).map(drop)
}

fn parse_grid(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|cell| {
            let (n, p) = cell
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::Config(format!("grid cell '{cell}' is not NxP")))?;
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("grid cell '{cell}' is not NxP")));
            Ok((parse(n)?, parse(p)?))
        })
        .collect()
}

fn calibrate_cmd(args: &CalibrateArgs) -> Result<()> {
    let grid = parse_grid(&args.grid)?;
    print_resolved(&serde_json::json!({
        "grid": grid,
        "reps": args.reps,
        "quantile": args.quantile,
        "seed": args.seed,
        "out": args.out,
    }))?;
    let model: ThresholdModel = calibrate_threshold(&grid, args.reps, args.quantile, args.seed)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "a": model.a,
        "b": model.b,
        "c": model.c,
        "quantile": model.quantile,
        "cells": model.cells,
        "max_rel_error": model.max_rel_error,
        "seed": model.seed,
        "grid": grid,
        "reps": args.reps,
    }))? + "\n";
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&args.out, text).map_err(|e| Error::io(&args.out, e))
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    let value = match flag {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
            ),
            _ => None,
        },
    };
    match value {
        Some(0) => Err(Error::Config("thread count must be at least 1".into())),
        v => Ok(v),
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = thread_count(cli.threads)? {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Embed(a) => embed_cmd(a),
        Command::Cluster(a) => cluster_cmd(a),
        Command::Assoc(a) => assoc_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
    })
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_k_parsing() {
        assert_eq!(parse_grid("10x20, 30X40").unwrap(), vec![(10, 20), (30, 40)]);
        assert!(parse_grid("10-20").is_err());
        assert_eq!(parse_k("auto").unwrap(), ClusterCount::Auto);
        assert_eq!(parse_k("4").unwrap(), ClusterCount::Fixed(4));
        assert!(parse_k("0").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main(["spectral-ancestry", "embed", "--bogus"]), 1);
        assert_eq!(main(["spectral-ancestry", "--help"]), 0);
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"kernel": {"type": "ibs", "sigma2": 0.3}, "pca_dims": 4}"#).unwrap();
        let cli = Cli::try_parse_from([
            "x", "embed", "--in", "g.tsv", "--out", "o", "--config", cfg.to_str().unwrap(), "--sigma2", "0.7", "--k", "3",
        ])
        .unwrap();
        let Command::Embed(args) = cli.command else { panic!() };
        let c = resolve(&args).unwrap();
        assert_eq!(c.kernel, KernelChoice::Ibs { sigma2: 0.7 });
        assert_eq!(c.pca_dims, 4);
        assert_eq!(c.clusters, ClusterCount::Fixed(3));
    }
}
