//! Synthetic genotype panels and case-control phenotypes.
//!
//! Every generator is a pure function of its parameters and seed. Random
//! streams are split per SNP (or per subject), so output does not depend
//! on how work is scheduled across threads.

mod experiment;

pub use experiment::{run_experiment, CausalConfig, ExperimentConfig, ExperimentReport, PanelConfig, RateRow};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype_io::GenotypeMatrix;

pub const FREQ_RANGE: (f64, f64) = (0.05, 0.5);

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
fn binomial2(rng: &mut impl Rng, f: f64) -> u8 {
    u8::from(rng.random::<f64>() < f) + u8::from(rng.random::<f64>() < f)
}

fn assemble(n: usize, columns: Vec<Vec<u8>>) -> Result<GenotypeMatrix> {
    let p = columns.len();
    let mut counts = Array2::<u8>::zeros((n, p));
    for (j, col) in columns.into_iter().enumerate() {
        counts.column_mut(j).assign(&Array1::from(col));
    }
    GenotypeMatrix::from_counts(counts)
}

/// One population in Hardy-Weinberg equilibrium with per-SNP frequency
/// `f_j ~ Uniform(0.05, 0.5)`.
pub fn gen_homogeneous(n: usize, p: usize, seed: u64) -> Result<GenotypeMatrix> {
    if n < 2 || p < 1 {
        return Err(Error::Config(format!("need n >= 2 and p >= 1, got n={n}, p={p}")));
    }
    let columns = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, j as u64);
            let f = rng.random_range(FREQ_RANGE.0..FREQ_RANGE.1);
            (0..n).map(|_| binomial2(&mut rng, f)).collect()
        })
        .collect();
    assemble(n, columns)
}

/// Per-SNP drift of the ancestral frequency `f_j` within one population.
pub fn balding_nichols(rng: &mut impl Rng, ancestral: f64, fst: f64) -> f64 {
    let scale = (1.0 - fst) / fst;
    Beta::new(ancestral * scale, (1.0 - ancestral) * scale)
        .expect("ancestral frequency in (0,1) and fst in (0,1)")
        .sample(rng)
}

/// Splits `n` by `proportions` with largest-remainder rounding.
pub fn allocate(n: usize, proportions: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = proportions.iter().sum();
    if proportions.is_empty() || (total - 1.0).abs() > 1e-9 || proportions.iter().any(|&q| q < 0.0) {
        return Err(Error::Config(format!(
            "proportions must be non-negative and sum to 1 (sum = {total})"
        )));
    }
    let exact: Vec<f64> = proportions.iter().map(|q| q * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - sizes.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        sizes[k] += 1;
    }
    Ok(sizes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredSpec {
    pub k: usize,
    pub fst: f64,
    pub n: usize,
    pub p: usize,
    /// Population proportions; equal when absent.
    #[serde(default)]
    pub proportions: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct StructuredPanel {
    pub genotypes: GenotypeMatrix,
    /// Population index of every subject; subjects are grouped by population.
    pub labels: Vec<usize>,
    pub ancestral: Vec<f64>,
    /// `k x p` population allele frequencies.
    pub pop_freqs: Array2<f64>,
}

/// `k` populations drifted from a common ancestor under the Balding-Nichols
/// model with divergence `fst`.
pub fn gen_structured(spec: &StructuredSpec, seed: u64) -> Result<StructuredPanel> {
    let StructuredSpec { k, fst, n, p, .. } = *spec;
    if k < 2 {
        return Err(Error::Config(format!("need k >= 2 populations, got {k}")));
    }
    if !(fst > 0.0 && fst < 1.0) {
        return Err(Error::Config(format!("fst must lie in (0, 1), got {fst}")));
    }
    if n < 2 || p < 1 {
        return Err(Error::Config(format!("need n >= 2 and p >= 1, got n={n}, p={p}")));
    }
    let proportions = match &spec.proportions {
        Some(v) if v.len() != k => {
            return Err(Error::Config(format!("{} proportions for {k} populations", v.len())))
        }
        Some(v) => v.clone(),
        None => vec![1.0 / k as f64; k],
    };
    let sizes = allocate(n, &proportions)?;
    let labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(pop, &m)| std::iter::repeat_n(pop, m))
        .collect();

    let per_snp: Vec<(f64, Vec<f64>, Vec<u8>)> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, j as u64);
            let anc = rng.random_range(FREQ_RANGE.0..FREQ_RANGE.1);
            let freqs: Vec<f64> = (0..k).map(|_| balding_nichols(&mut rng, anc, fst)).collect();
            let col = labels.iter().map(|&pop| binomial2(&mut rng, freqs[pop])).collect();
            (anc, freqs, col)
        })
        .collect();
    let mut ancestral = Vec::with_capacity(p);
    let mut pop_freqs = Array2::<f64>::zeros((k, p));
    let mut columns = Vec::with_capacity(p);
    for (j, (anc, freqs, col)) in per_snp.into_iter().enumerate() {
        ancestral.push(anc);
        for (pop, f) in freqs.into_iter().enumerate() {
            pop_freqs[[pop, j]] = f;
        }
        columns.push(col);
    }
    Ok(StructuredPanel {
        genotypes: assemble(n, columns)?,
        labels,
        ancestral,
        pop_freqs,
    })
}

/// Draws `count` subjects from per-SNP allele frequencies `freqs`.
pub fn draw_subjects(freqs: &[f64], count: usize, seed: u64) -> Array2<u8> {
    let mut out = Array2::<u8>::zeros((count, freqs.len()));
    for i in 0..count {
        let mut rng = stream_rng(seed, i as u64);
        for (j, &f) in freqs.iter().enumerate() {
            out[[i, j]] = binomial2(&mut rng, f);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCluster {
    pub name: String,
    pub proportion: f64,
    pub case_prob: f64,
}

/// Cluster sampling proportions and per-cluster disease probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub clusters: Vec<ScenarioCluster>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.clusters.iter().map(|c| c.proportion).sum();
        if self.clusters.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("cluster proportions sum to {total}, not 1")));
        }
        if let Some(c) = self.clusters.iter().find(|c| !(0.0..=1.0).contains(&c.case_prob)) {
            return Err(Error::Config(format!(
                "P(case | {}) = {} is outside [0, 1]",
                c.name, c.case_prob
            )));
        }
        Ok(())
    }

    pub fn proportions(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.proportion).collect()
    }
}

/// Independent Bernoulli(P(case | cluster)) labels, 1 = case.
pub fn assign_phenotypes(labels: &[usize], spec: &ScenarioSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let cluster = spec.clusters.get(c).ok_or_else(|| {
                Error::Config(format!("cluster label {c} is not named in the scenario"))
            })?;
            let mut rng = stream_rng(spec.seed, i as u64);
            Ok(u8::from(rng.random::<f64>() < cluster.case_prob))
        })
        .collect()
}

/// Genotype probabilities (0, 1, 2 copies) given baseline frequency `p`.
/// Cases tilt the allele-bearing genotypes by `r` and `r²`.
pub fn genotype_probs(p: f64, r: f64, case: bool) -> [f64; 3] {
    let q = 1.0 - p;
    if !case || r == 1.0 {
        return [q * q, 2.0 * p * q, p * p];
    }
    let raw = [q * q, 2.0 * r * p * q, r * r * p * p];
    let z: f64 = raw.iter().sum();
    [raw[0] / z, raw[1] / z, raw[2] / z]
}

/// Where causal-SNP baseline frequencies come from.
#[derive(Debug, Clone)]
pub enum FreqSource<'a> {
    /// Per-cluster empirical frequencies of a randomly chosen panel SNP.
    Panel(&'a GenotypeMatrix),
    /// Explicit `M x K` table of per-cluster frequencies.
    Fixed(Array2<f64>),
}

/// Per-cluster counted-allele frequency of one SNP.
pub fn cluster_frequencies(g: &GenotypeMatrix, labels: &[usize], snp: usize, k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut obs = vec![0.0; k];
    for (i, &c) in labels.iter().enumerate() {
        if let Some(v) = g.get(i, snp) {
            sum[c] += f64::from(v);
            obs[c] += 2.0;
        }
    }
    sum.iter()
        .zip(&obs)
        .map(|(s, o)| if *o > 0.0 { s / o } else { 0.0 })
        .collect()
}

/// Simulates `m` causal SNPs with relative risk `r` for phenotype `y`.
pub fn gen_causal_snps(
    y: &[u8],
    labels: &[usize],
    r: f64,
    m: usize,
    source: &FreqSource<'_>,
    seed: u64,
) -> Result<Array2<u8>> {
    if !(r >= 1.0) || m == 0 {
        return Err(Error::Config(format!("need R >= 1 and M >= 1, got R={r}, M={m}")));
    }
    if y.len() != labels.len() {
        return Err(Error::Config("phenotype and label lengths differ".into()));
    }
    let k = labels.iter().max().map_or(0, |&c| c + 1);
    let n = y.len();
    let columns: Vec<Result<Vec<u8>>> = (0..m)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let freqs = match source {
                FreqSource::Panel(g) => {
                    if g.n_subjects() != n {
                        return Err(Error::Config("panel subject count differs from phenotype".into()));
                    }
                    let snp = rng.random_range(0..g.n_snps());
                    cluster_frequencies(g, labels, snp, k)
                }
                FreqSource::Fixed(table) => {
                    if table.nrows() != m || table.ncols() < k {
                        return Err(Error::Config(format!(
                            "frequency table is {}x{}, need {m}x{k}",
                            table.nrows(),
                            table.ncols()
                        )));
                    }
                    table.row(s).to_vec()
                }
            };
            if let Some(f) = freqs.iter().find(|f| !(0.0..=1.0).contains(*f)) {
                return Err(Error::Config(format!("baseline frequency {f} outside [0, 1]")));
            }
            Ok((0..n)
                .map(|i| {
                    let probs = genotype_probs(freqs[labels[i]], r, y[i] == 1);
                    let u: f64 = rng.random();
                    if u < probs[0] {
                        0
                    } else if u < probs[0] + probs[1] {
                        1
                    } else {
                        2
                    }
                })
                .collect())
        })
        .collect();
    let mut out = Array2::<u8>::zeros((n, m));
    for (s, col) in columns.into_iter().enumerate() {
        out.column_mut(s).assign(&Array1::from(col?));
    }
    Ok(out)
}
