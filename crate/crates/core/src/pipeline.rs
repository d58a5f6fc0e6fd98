//! End-to-end analyses: the regression path (eigenmap covariates), the
//! matching path (clusters, strata, conditional logistic regression) and
//! the PCA baseline.
//!
//! When an output directory is configured, each stage writes its files
//! before the next stage starts, and `manifest.json` lists what was written.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assoc::{assoc_scan, AssocResult, Method, ScanInput};
use crate::cluster::{
    dendrogram_export, ward_cluster, ClusterCount, ClusterModel, GenotypeHomogeneity,
    DEFAULT_MIN_CLUSTER_SIZE,
};
use crate::dimsel::{select_dimension, EigengapReport, ThresholdModel};
use crate::eigencore::{
    eigendecompose, embed, normalized_laplacian, psd_spectrum, Embedding, Spectrum, SpectrumSource,
};
use crate::error::{Error, Result, StageExt};
use crate::genotype_io::{fmt_f64, qc_filter, GenotypeMatrix, Table};
use crate::kernels::{ibs_weights, pca_kernel, spectral_weights, WeightMatrix};
use crate::matching::{match_strata, remove_unmatchable, MatchedStrata, MatchingParams, Retained};
use crate::preprocess::{standardize, Imputation};

pub const DEFAULT_PCA_DIMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelChoice {
    Spectral,
    Pca,
    Ibs { sigma2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcParams {
    pub maf_min: f64,
    pub miss_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub kernel: KernelChoice,
    /// Divide centered allele counts by their standard deviation.
    pub scale: bool,
    pub threshold: ThresholdModel,
    pub method: Method,
    pub clusters: ClusterCount,
    pub min_cluster_size: usize,
    pub matching: MatchingParams,
    /// Dimension of the PCA embedding.
    pub pca_dims: usize,
    /// SNP filter applied before anything else; `None` keeps every SNP.
    pub qc: Option<QcParams>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            kernel: KernelChoice::Spectral,
            scale: true,
            threshold: ThresholdModel::published(),
            method: Method::SpectralR,
            clusters: ClusterCount::Auto,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            matching: MatchingParams::default(),
            pca_dims: DEFAULT_PCA_DIMS,
            qc: None,
            out_dir: None,
            seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if let KernelChoice::Ibs { sigma2 } = self.kernel {
            if !(sigma2 > 0.0 && sigma2.is_finite()) {
                return Err(Error::Config(format!("ibs sigma2 must be positive, got {sigma2}")));
            }
        }
        if self.pca_dims == 0 {
            return Err(Error::Config("pca_dims must be at least 1".into()));
        }
        if self.min_cluster_size == 0 {
            return Err(Error::Config("min_cluster_size must be at least 1".into()));
        }
        if let ClusterCount::Fixed(0) = self.clusters {
            return Err(Error::Config("cluster count must be at least 1".into()));
        }
        let q = self.matching.distance_quantile;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!("matching distance_quantile must lie in (0, 1], got {q}")));
        }
        if !(self.threshold.quantile > 0.0 && self.threshold.quantile < 1.0) {
            return Err(Error::Config("threshold quantile must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Embedding plus the spectra and dimension choice behind it.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    pub n: usize,
    /// SNPs entering the kernel.
    pub p: usize,
    pub laplacian: Option<Spectrum>,
    pub kernel: Spectrum,
    pub report: Option<EigengapReport>,
    pub embedding: Embedding,
}

fn graph_weights(g: &GenotypeMatrix, config: &AnalysisConfig) -> Result<(WeightMatrix, usize)> {
    match config.kernel {
        KernelChoice::Ibs { sigma2 } => Ok((ibs_weights(g, sigma2).stage("ibs weights")?, g.n_snps())),
        _ => {
            let x = standardize(g, config.scale, Imputation::ColumnMean).stage("standardize")?;
            let p = x.n_features();
            Ok((spectral_weights(&x).stage("spectral weights")?, p))
        }
    }
}

fn name_isolated(e: Error, g: &GenotypeMatrix) -> Error {
    match e {
        Error::IsolatedVertex { index, .. } => Error::IsolatedVertex {
            index,
            subject: g.subjects()[index].clone(),
        },
        other => other,
    }
}

/// Kernel, spectrum, dimension and coordinates. `fixed_d` overrides the
/// eigengap choice for graph kernels.
pub fn front_end(g: &GenotypeMatrix, config: &AnalysisConfig, fixed_d: Option<usize>) -> Result<FrontEnd> {
    let n = g.n_subjects();
    if let KernelChoice::Pca = config.kernel {
        let x = standardize(g, config.scale, Imputation::ColumnMean).stage("standardize")?;
        let h = pca_kernel(&x).stage("pca kernel")?;
        let kernel = eigendecompose(&h.h, SpectrumSource::Kernel).stage("eigendecompose")?;
        let d = fixed_d.unwrap_or(config.pca_dims).min(kernel.rank());
        let embedding = embed(&kernel, d).stage("embed")?;
        return Ok(FrontEnd { n, p: x.n_features(), laplacian: None, kernel, report: None, embedding });
    }
    let (w, p) = graph_weights(g, config)?;
    let lap = normalized_laplacian(&w).map_err(|e| name_isolated(e, g)).stage("laplacian")?;
    let laplacian = eigendecompose(&lap, SpectrumSource::Laplacian).stage("eigendecompose")?;
    let kernel = psd_spectrum(&laplacian).stage("psd kernel")?;
    let report = select_dimension(&laplacian, n, p.max(2), &config.threshold).stage("select dimension")?;
    let d = fixed_d.unwrap_or(report.d_selected).min(kernel.rank());
    let embedding = embed(&kernel, d).stage("embed")?;
    Ok(FrontEnd { n, p, laplacian: Some(laplacian), kernel, report: Some(report), embedding })
}

/// Writes stage outputs under an optional run directory.
pub struct RunWriter {
    dir: Option<PathBuf>,
    files: Vec<String>,
}

impl RunWriter {
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(RunWriter { dir: dir.map(Path::to_path_buf), files: Vec::new() })
    }

    pub fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        if let Some(d) = &self.dir {
            table.write(d.join(name))?;
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<()> {
        if let Some(d) = &self.dir {
            let path = d.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            self.files.push(name.to_string());
        }
        Ok(())
    }

    /// Writes `manifest.json` with the config hash, version and seed.
    pub fn finish(mut self, config: &AnalysisConfig, command: &str) -> Result<()> {
        let manifest = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": config.hash(),
            "seed": config.seed,
            "config": config,
            "files": self.files,
        });
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        self.text("manifest.json", &text)
    }
}

pub fn front_end_tables(front: &FrontEnd, g: &GenotypeMatrix) -> Vec<(&'static str, Table)> {
    let mut out = Vec::new();
    let mut spectrum = Table::new(["index", "laplacian", "kernel"]);
    for (k, lambda) in front.kernel.values.iter().enumerate() {
        let nu = front.laplacian.as_ref().map_or(f64::NAN, |l| l.values[k]);
        spectrum.push(vec![(k + 1).to_string(), fmt_f64(nu), fmt_f64(*lambda)]);
    }
    out.push(("eigenvalues.tsv", spectrum));
    if let Some(r) = &front.report {
        let mut gaps = Table::new(["i", "gap", "above_threshold"]);
        for (i, gap) in r.gaps.iter().enumerate() {
            gaps.push(vec![(i + 1).to_string(), fmt_f64(*gap), u8::from(*gap > r.threshold).to_string()]);
        }
        out.push(("eigengaps.tsv", gaps));
        let mut summary = Table::new(["n", "p", "threshold", "d_selected", "structureless"]);
        summary.push(vec![
            r.n.to_string(),
            r.p.to_string(),
            fmt_f64(r.threshold),
            r.d_selected.to_string(),
            r.structureless.to_string(),
        ]);
        out.push(("dimension.tsv", summary));
    }
    let e = &front.embedding;
    let mut header = vec!["IID".to_string()];
    header.extend((1..=e.d).map(|j| format!("phi{j}")));
    let mut coords = Table::new(header);
    for i in 0..e.n() {
        let mut row = vec![g.subjects()[i].clone()];
        row.extend(e.coords.row(i).iter().map(|v| fmt_f64(*v)));
        coords.push(row);
    }
    out.push(("embedding.tsv", coords));
    out
}

pub fn assoc_table(results: &[&[AssocResult]]) -> Table {
    let mut t = Table::new(["snp", "method", "beta", "se", "wald", "p", "converged"]);
    for r in results.iter().flat_map(|r| r.iter()) {
        t.push(vec![
            r.snp.clone(),
            r.method.name().to_string(),
            fmt_f64(r.beta),
            fmt_f64(r.se),
            fmt_f64(r.wald),
            r.p_value.map_or_else(|| "NA".to_string(), fmt_f64),
            u8::from(r.converged).to_string(),
        ]);
    }
    t
}

pub fn cluster_table(c: &ClusterModel, g: &GenotypeMatrix) -> Table {
    let mut t = Table::new(["IID", "cluster"]);
    for (i, a) in c.assignment.iter().enumerate() {
        let label = a.map_or_else(|| "OUTLIER".to_string(), |k| k.to_string());
        t.push(vec![g.subjects()[i].clone(), label]);
    }
    t
}

pub fn strata_table(m: &MatchedStrata, g: &GenotypeMatrix, y: &[u8]) -> Table {
    let mut t = Table::new(["IID", "stratum", "phenotype"]);
    for (i, s) in m.stratum_of(g.n_subjects()).iter().enumerate() {
        let label = s.map_or_else(|| "REMOVED".to_string(), |k| k.to_string());
        t.push(vec![g.subjects()[i].clone(), label, y[i].to_string()]);
    }
    t
}

/// Applies the configured SNP filter.
pub fn prepare(g: &GenotypeMatrix, config: &AnalysisConfig) -> Result<GenotypeMatrix> {
    config.validate()?;
    match config.qc {
        Some(q) => qc_filter(g, q.maf_min, q.miss_max).stage("qc"),
        None => Ok(g.clone()),
    }
}

fn write_front(w: &mut RunWriter, front: &FrontEnd, g: &GenotypeMatrix) -> Result<()> {
    for (name, t) in front_end_tables(front, g) {
        w.table(name, &t)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SpectralROutput {
    pub front: FrontEnd,
    pub results: Vec<AssocResult>,
}

/// Eigengap-selected embedding and logistic scans with its coordinates as
/// covariates.
pub fn run_spectral_r(g: &GenotypeMatrix, config: &AnalysisConfig) -> Result<SpectralROutput> {
    let g = prepare(g, config)?;
    let y = g.complete_phenotype()?;
    let mut w = RunWriter::new(config.out_dir.as_deref())?;
    let front = front_end(&g, config, None)?;
    write_front(&mut w, &front, &g)?;
    let results = assoc_scan(&g, &y, Method::SpectralR, ScanInput::Covariates(&front.embedding.coords)).stage("association")?;
    w.table("assoc.tsv", &assoc_table(&[&results]))?;
    w.finish(config, "spectralR")?;
    Ok(SpectralROutput { front, results })
}

#[derive(Debug, Clone)]
pub struct GemOutput {
    pub front: FrontEnd,
    pub clusters: ClusterModel,
    pub retained: Retained,
    /// Embedding recomputed on the retained subjects.
    pub matched_embedding: Embedding,
    /// Strata over original subject indices.
    pub strata: MatchedStrata,
    pub results: Vec<AssocResult>,
}

pub fn cluster_subjects(g: &GenotypeMatrix, front: &FrontEnd, config: &AnalysisConfig) -> Result<ClusterModel> {
    let test = GenotypeHomogeneity {
        genotypes: g,
        model: config.threshold.clone(),
        scale: config.scale,
        min_cluster_size: config.min_cluster_size,
    };
    ward_cluster(&front.embedding, config.clusters, config.min_cluster_size, &test).stage("cluster")
}

/// Clusters, removes unmatchable subjects, re-embeds the rest with the same
/// dimension, forms strata and runs conditional logistic scans.
pub fn run_spectral_gem(g: &GenotypeMatrix, config: &AnalysisConfig) -> Result<GemOutput> {
    let g = prepare(g, config)?;
    let y = g.complete_phenotype()?;
    let mut w = RunWriter::new(config.out_dir.as_deref())?;
    let front = front_end(&g, config, None)?;
    write_front(&mut w, &front, &g)?;
    let clusters = cluster_subjects(&g, &front, config)?;
    w.table("clusters.tsv", &cluster_table(&clusters, &g))?;
    w.text("dendrogram.nwk", &(dendrogram_export(&clusters) + "\n"))?;

    let retained = remove_unmatchable(&clusters, &front.embedding, &y, &config.matching).stage("remove unmatchable")?;
    let sub = g.subset_subjects(&retained.retained)?;
    let matched_embedding = front_end(&sub, config, Some(front.embedding.d)).stage("re-embed")?.embedding;
    let y_sub: Vec<u8> = retained.retained.iter().map(|&i| y[i]).collect();
    let strata = match_strata(&matched_embedding, &y_sub)
        .stage("match")?
        .relabel(&retained.retained, retained.removed());
    w.table("strata.tsv", &strata_table(&strata, &g, &y))?;

    let results = assoc_scan(&g, &y, Method::SpectralGem, ScanInput::Strata(&strata.strata)).stage("association")?;
    w.table("assoc.tsv", &assoc_table(&[&results]))?;
    w.finish(config, "spectralGEM")?;
    Ok(GemOutput { front, clusters, retained, matched_embedding, strata, results })
}

#[derive(Debug, Clone)]
pub struct PcaOutput {
    pub front: FrontEnd,
    pub results: Vec<AssocResult>,
}

/// `X Xᵗ` embedding with `pca_dims` axes, as logistic covariates.
pub fn run_pca_baseline(g: &GenotypeMatrix, config: &AnalysisConfig) -> Result<PcaOutput> {
    let config = AnalysisConfig { kernel: KernelChoice::Pca, ..config.clone() };
    let g = prepare(g, &config)?;
    let y = g.complete_phenotype()?;
    let mut w = RunWriter::new(config.out_dir.as_deref())?;
    let front = front_end(&g, &config, None)?;
    write_front(&mut w, &front, &g)?;
    let results = assoc_scan(&g, &y, Method::Pca, ScanInput::Covariates(&front.embedding.coords)).stage("association")?;
    w.table("assoc.tsv", &assoc_table(&[&results]))?;
    w.finish(&config, "pca")?;
    Ok(PcaOutput { front, results })
}

/// Uncorrected logistic scan.
pub fn run_uncorrected(g: &GenotypeMatrix, config: &AnalysisConfig) -> Result<Vec<AssocResult>> {
    let g = prepare(g, config)?;
    let y = g.complete_phenotype()?;
    let mut w = RunWriter::new(config.out_dir.as_deref())?;
    let results = assoc_scan(&g, &y, Method::Uncorrected, ScanInput::None).stage("association")?;
    w.table("assoc.tsv", &assoc_table(&[&results]))?;
    w.finish(config, "uncorrected")?;
    Ok(results)
}

/// CMH scan over the clusters of the spectral embedding.
pub fn run_cmh(g: &GenotypeMatrix, config: &AnalysisConfig) -> Result<(ClusterModel, Vec<AssocResult>)> {
    let g = prepare(g, config)?;
    let y = g.complete_phenotype()?;
    let mut w = RunWriter::new(config.out_dir.as_deref())?;
    let front = front_end(&g, config, None)?;
    write_front(&mut w, &front, &g)?;
    let clusters = cluster_subjects(&g, &front, config)?;
    w.table("clusters.tsv", &cluster_table(&clusters, &g))?;
    let results = assoc_scan(&g, &y, Method::Cmh, ScanInput::Clusters(&clusters.assignment)).stage("association")?;
    w.table("assoc.tsv", &assoc_table(&[&results]))?;
    w.finish(config, "cmh")?;
    Ok((clusters, results))
}

/// Covariate matrix with the leading `d` embedding columns.
pub fn leading_columns(e: &Embedding, d: usize) -> Array2<f64> {
    e.coords.slice(ndarray::s![.., ..d.min(e.d)]).to_owned()
}
