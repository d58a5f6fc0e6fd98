//! Type-I error and power experiments on simulated case-control panels.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{assign_phenotypes, derive_seed, gen_causal_snps, gen_structured, FreqSource, ScenarioSpec, StructuredSpec};
use crate::assoc::{assoc_scan, AssocResult, Method, ScanInput};
use crate::error::{Error, Result, StageExt};
use crate::genotype_io::{fmt_f64, GenotypeMatrix, Table};
use crate::matching::{match_strata, remove_unmatchable, MatchingParams};
use crate::pipeline::{cluster_subjects, front_end, AnalysisConfig, KernelChoice, RunWriter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelConfig {
    pub fst: f64,
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalConfig {
    pub r: f64,
    pub m: usize,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Uncorrected, Method::SpectralR, Method::SpectralGem, Method::Cmh, Method::Pca]
}

fn default_alphas() -> Vec<f64> {
    vec![0.05, 0.01, 0.005]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub panel: PanelConfig,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub causal: Option<CausalConfig>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "one")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.analysis.validate()?;
        if self.scenario.clusters.len() < 2 {
            return Err(Error::Config("a scenario needs at least 2 clusters".into()));
        }
        if let Some(c) = &self.causal {
            if !(c.r >= 1.0) || c.m == 0 {
                return Err(Error::Config(format!("causal SNPs need R >= 1 and M >= 1, got R={}, M={}", c.r, c.m)));
            }
        }
        if self.methods.is_empty() || self.reps == 0 {
            return Err(Error::Config("need at least one method and one replicate".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!("alpha {a} must lie in (0, 1)")));
        }
        Ok(())
    }
}

/// Rejection rates of one method at one level, pooled over replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub method: Method,
    pub alpha: f64,
    /// Fraction of null-SNP tests with `p < alpha`.
    pub type1: f64,
    pub null_tests: usize,
    pub null_failed: usize,
    /// Fraction of causal-SNP tests with `p < alpha`; NaN without causal SNPs.
    pub power: f64,
    pub causal_tests: usize,
    pub causal_failed: usize,
}

impl RateRow {
    pub fn type1_se(&self) -> f64 {
        binomial_se(self.type1, self.null_tests)
    }

    pub fn power_se(&self) -> f64 {
        binomial_se(self.power, self.causal_tests)
    }
}

fn binomial_se(rate: f64, tests: usize) -> f64 {
    (rate * (1.0 - rate) / tests as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<RateRow>,
    /// Selected dimension of each replicate.
    pub dims: Vec<usize>,
    /// Non-outlier cluster count of each replicate.
    pub clusters: Vec<usize>,
}

impl ExperimentReport {
    pub fn row(&self, method: Method, alpha: f64) -> Option<&RateRow> {
        self.rows.iter().find(|r| r.method == method && r.alpha == alpha)
    }

    fn wide(&self, power: bool) -> Table {
        let mut alphas: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !alphas.contains(&r.alpha) {
                alphas.push(r.alpha);
            }
        }
        let mut header = vec!["method".to_string()];
        header.extend(alphas.iter().map(|a| format!("alpha={a}")));
        let mut t = Table::new(header);
        let mut seen: Vec<Method> = Vec::new();
        for r in &self.rows {
            if seen.contains(&r.method) {
                continue;
            }
            seen.push(r.method);
            let mut row = vec![r.method.name().to_string()];
            for a in &alphas {
                let cell = self.row(r.method, *a).map_or(f64::NAN, |x| if power { x.power } else { x.type1 });
                row.push(fmt_f64(cell));
            }
            t.push(row);
        }
        t
    }

    /// Methods as rows and levels as columns.
    pub fn type1_table(&self) -> Table {
        self.wide(false)
    }

    pub fn power_table(&self) -> Table {
        self.wide(true)
    }

    pub fn long_table(&self) -> Table {
        let mut t = Table::new([
            "method", "alpha", "type1", "type1_se", "null_tests", "null_failed", "power", "power_se", "causal_tests", "causal_failed",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.method.name().to_string(),
                fmt_f64(r.alpha),
                fmt_f64(r.type1),
                fmt_f64(r.type1_se()),
                r.null_tests.to_string(),
                r.null_failed.to_string(),
                fmt_f64(r.power),
                fmt_f64(r.power_se()),
                r.causal_tests.to_string(),
                r.causal_failed.to_string(),
            ]);
        }
        t
    }
}

/// P-values of one replicate, split into null and causal SNPs.
struct RepResults {
    d: usize,
    k: usize,
    by_method: BTreeMap<Method, (Vec<AssocResult>, Vec<AssocResult>)>,
}

fn run_rep(config: &ExperimentConfig, rep: u64) -> Result<RepResults> {
    let seed = derive_seed(config.seed, rep);
    let spec = StructuredSpec {
        k: config.scenario.clusters.len(),
        fst: config.panel.fst,
        n: config.panel.n,
        p: config.panel.p,
        proportions: Some(config.scenario.proportions()),
    };
    let panel = gen_structured(&spec, derive_seed(seed, 0)).stage("simulate panel")?;
    let scenario = ScenarioSpec { seed: derive_seed(config.scenario.seed, rep), ..config.scenario.clone() };
    let y = assign_phenotypes(&panel.labels, &scenario)?;
    if !y.contains(&1) || !y.contains(&0) {
        return Err(Error::Config("the scenario produced no cases or no controls".into()));
    }
    let null = panel.genotypes.clone().with_phenotype(y.iter().map(|&v| Some(v)).collect())?;
    let causal = match &config.causal {
        Some(c) => {
            let block = gen_causal_snps(&y, &panel.labels, c.r, c.m, &FreqSource::Panel(&panel.genotypes), derive_seed(seed, 1))?;
            let g = GenotypeMatrix::new(
                panel.genotypes.subjects().to_vec(),
                (0..c.m).map(|j| format!("causal{}", j + 1)).collect(),
                block.clone(),
                Array2::from_elem(block.dim(), false),
                None,
            )?;
            Some(g)
        }
        None => None,
    };

    let analysis = AnalysisConfig { kernel: KernelChoice::Spectral, out_dir: None, ..config.analysis.clone() };
    let front = front_end(&null, &analysis, None)?;
    let needs_clusters = config.methods.iter().any(|m| matches!(m, Method::SpectralGem | Method::Cmh));
    let clusters = if needs_clusters { Some(cluster_subjects(&null, &front, &analysis)?) } else { None };

    let scan = |input: ScanInput<'_>, method: Method| -> Result<(Vec<AssocResult>, Vec<AssocResult>)> {
        let a = assoc_scan(&null, &y, method, input)?;
        let b = match &causal {
            Some(g) => assoc_scan(g, &y, method, input)?,
            None => Vec::new(),
        };
        Ok((a, b))
    };

    let mut by_method = BTreeMap::new();
    for &method in &config.methods {
        let out = match method {
            Method::Uncorrected => scan(ScanInput::None, method)?,
            Method::SpectralR => scan(ScanInput::Covariates(&front.embedding.coords), method)?,
            Method::Pca => {
                let pca = front_end(&null, &AnalysisConfig { kernel: KernelChoice::Pca, ..analysis.clone() }, None)?;
                scan(ScanInput::Covariates(&pca.embedding.coords), method)?
            }
            Method::Cmh => {
                let labels: Vec<Option<usize>> =
                    clusters.as_ref().expect("clusters computed").group_labels().into_iter().map(Some).collect();
                scan(ScanInput::Clusters(&labels), method)?
            }
            Method::SpectralGem => {
                let c = clusters.as_ref().expect("clusters computed");
                // Outliers stay in the analysis.
                let params = MatchingParams { drop_outliers: false, ..analysis.matching };
                let kept = remove_unmatchable(c, &front.embedding, &y, &params).stage("remove unmatchable")?;
                let sub = null.subset_subjects(&kept.retained)?;
                let e = front_end(&sub, &analysis, Some(front.embedding.d)).stage("re-embed")?.embedding;
                let y_sub: Vec<u8> = kept.retained.iter().map(|&i| y[i]).collect();
                let strata = match_strata(&e, &y_sub).stage("match")?.relabel(&kept.retained, kept.removed());
                scan(ScanInput::Strata(&strata.strata), method)?
            }
        };
        by_method.insert(method, out);
    }
    Ok(RepResults {
        d: front.embedding.d,
        k: clusters.map_or(0, |c| c.k),
        by_method,
    })
}

fn tally(results: &[AssocResult], alpha: f64) -> (usize, usize, usize) {
    let mut hits = 0;
    let mut tests = 0;
    let mut failed = 0;
    for r in results {
        match r.p_value {
            Some(p) => {
                tests += 1;
                hits += usize::from(p < alpha);
            }
            None => failed += 1,
        }
    }
    (hits, tests, failed)
}

/// Simulates `reps` panels and reports rejection rates per method and level.
/// Outliers are kept in every analysis.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    config.validate()?;
    let mut writer = RunWriter::new(out_dir)?;
    let reps: Vec<RepResults> = (0..config.reps as u64).map(|r| run_rep(config, r)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &method in &config.methods {
        for &alpha in &config.alphas {
            let (mut nh, mut nt, mut nf, mut ch, mut ct, mut cf) = (0, 0, 0, 0, 0, 0);
            for rep in &reps {
                let (null, causal) = &rep.by_method[&method];
                let (h, t, f) = tally(null, alpha);
                (nh, nt, nf) = (nh + h, nt + t, nf + f);
                let (h, t, f) = tally(causal, alpha);
                (ch, ct, cf) = (ch + h, ct + t, cf + f);
            }
            let rate = |h: usize, t: usize| if t == 0 { f64::NAN } else { h as f64 / t as f64 };
            rows.push(RateRow {
                method,
                alpha,
                type1: rate(nh, nt),
                null_tests: nt,
                null_failed: nf,
                power: rate(ch, ct),
                causal_tests: ct,
                causal_failed: cf,
            });
        }
    }
    let report = ExperimentReport {
        name: config.name.clone(),
        rows,
        dims: reps.iter().map(|r| r.d).collect(),
        clusters: reps.iter().map(|r| r.k).collect(),
    };
    writer.table("type1.tsv", &report.type1_table())?;
    writer.table("power.tsv", &report.power_table())?;
    writer.table("rates.tsv", &report.long_table())?;
    let mut per_rep = Table::new(["rep", "d", "clusters"]);
    for (r, (d, k)) in report.dims.iter().zip(&report.clusters).enumerate() {
        per_rep.push(vec![r.to_string(), d.to_string(), k.to_string()]);
    }
    writer.table("replicates.tsv", &per_rep)?;
    let analysis = AnalysisConfig { seed: config.seed, ..config.analysis.clone() };
    writer.text("experiment.json", &(serde_json::to_string_pretty(config)? + "\n"))?;
    writer.finish(&analysis, "simulate")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::ScenarioCluster;

    fn config(probs: &[f64], fst: f64, causal: Option<CausalConfig>) -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            panel: PanelConfig { fst, n: 200, p: 400 },
            scenario: ScenarioSpec {
                clusters: probs
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| ScenarioCluster { name: format!("c{i}"), proportion: 1.0 / probs.len() as f64, case_prob: q })
                    .collect(),
                seed: 5,
            },
            causal,
            methods: default_methods(),
            alphas: default_alphas(),
            reps: 1,
            seed: 3,
            analysis: AnalysisConfig::default(),
        }
    }

    #[test]
    fn experiment_tables_have_expected_shape() {
        let c = config(&[0.5, 0.5], 0.05, Some(CausalConfig { r: 1.0, m: 20 }));
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&c, Some(dir.path())).unwrap();
        assert_eq!(report.rows.len(), 5 * 3);
        for r in &report.rows {
            assert_eq!(r.null_tests + r.null_failed, 400);
            assert_eq!(r.causal_tests + r.causal_failed, 20);
            assert!((0.0..=1.0).contains(&r.type1));
        }
        let t1 = std::fs::read_to_string(dir.path().join("type1.tsv")).unwrap();
        assert!(t1.starts_with("method\talpha=0.05\talpha=0.01\talpha=0.005\n"));
        assert_eq!(t1.lines().count(), 6);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = config(&[0.5, 0.5], 0.05, None);
        c.alphas = vec![1.5];
        assert!(run_experiment(&c, None).is_err());
        let c = config(&[0.5, 0.5], 0.05, Some(CausalConfig { r: 0.5, m: 1 }));
        assert!(run_experiment(&c, None).is_err());
        let json = r#"{"panel": {"fst": 0.05, "n": 10, "p": 10}, "scenario": {"clusters": [], "seed": 1}, "bogus": 1}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
    }
}
