//! Per-SNP association tests: logistic regression with optional eigenmap
//! covariates, exact conditional logistic regression on matched strata and
//! the allele-based Cochran-Mantel-Haenszel test.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::genotype_io::GenotypeMatrix;

pub const MAX_ITER: usize = 50;
pub const SCORE_TOL: f64 = 1e-8;
pub const DEVIANCE_TOL: f64 = 1e-10;
/// Coefficient magnitude treated as divergence under separation.
pub const SEPARATION_BOUND: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "uncorrected")]
    Uncorrected,
    #[serde(rename = "spectralR")]
    SpectralR,
    #[serde(rename = "spectralGEM")]
    SpectralGem,
    #[serde(rename = "cmh")]
    Cmh,
    #[serde(rename = "pca")]
    Pca,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Uncorrected => "uncorrected",
            Method::SpectralR => "spectralR",
            Method::SpectralGem => "spectralGEM",
            Method::Cmh => "cmh",
            Method::Pca => "pca",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Method::Uncorrected, Method::SpectralR, Method::SpectralGem, Method::Cmh, Method::Pca]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssocResult {
    pub snp: String,
    pub method: Method,
    pub beta: f64,
    pub se: f64,
    /// `(beta/se)²`, or the CMH statistic for [`Method::Cmh`].
    pub wald: f64,
    pub p_value: Option<f64>,
    pub converged: bool,
}

impl AssocResult {
    fn failed(snp: &str, method: Method) -> Self {
        AssocResult {
            snp: snp.to_string(),
            method,
            beta: f64::NAN,
            se: f64::NAN,
            wald: f64::NAN,
            p_value: None,
            converged: false,
        }
    }
}

/// Upper tail of chi-square with one degree of freedom.
pub fn chi2_1_sf(w: f64) -> f64 {
    if w <= 0.0 {
        1.0
    } else {
        erfc((w / 2.0).sqrt()).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    /// Inverse observed information.
    pub cov: Array2<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub intercept: bool,
}

impl LogisticFit {
    /// Position of design column `j` in `coef`.
    pub fn index(&self, j: usize) -> usize {
        j + usize::from(self.intercept)
    }
}

fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

pub fn logistic_loglik(y: &[u8], design: &Array2<f64>, intercept: bool, coef: &[f64]) -> f64 {
    (0..y.len())
        .map(|i| {
            let eta = linear_predictor(design, intercept, coef, i);
            f64::from(y[i]) * eta - log1pexp(eta)
        })
        .sum()
}

fn linear_predictor(design: &Array2<f64>, intercept: bool, coef: &[f64], i: usize) -> f64 {
    let off = usize::from(intercept);
    let mut eta = if intercept { coef[0] } else { 0.0 };
    for (j, v) in design.row(i).iter().enumerate() {
        eta += coef[j + off] * v;
    }
    eta
}

/// Score vector and observed information at `coef`.
fn score_information(y: &[u8], design: &Array2<f64>, intercept: bool, coef: &[f64]) -> (Vec<f64>, Mat<f64>) {
    let k = coef.len();
    let off = usize::from(intercept);
    let mut score = vec![0.0; k];
    let mut info = Mat::<f64>::zeros(k, k);
    let mut row = vec![0.0; k];
    for i in 0..y.len() {
        if intercept {
            row[0] = 1.0;
        }
        for (j, v) in design.row(i).iter().enumerate() {
            row[j + off] = *v;
        }
        let eta = linear_predictor(design, intercept, coef, i);
        let mu = 1.0 / (1.0 + (-eta).exp());
        let w = mu * (1.0 - mu);
        let r = f64::from(y[i]) - mu;
        for a in 0..k {
            score[a] += r * row[a];
            for b in 0..=a {
                info[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    (score, info)
}

/// Maximum-likelihood logistic regression by Newton-Raphson (IRLS).
///
/// `design` holds the covariates without an intercept column; with
/// `intercept` set, coefficient 0 is the intercept. `watch` lists the
/// design columns whose divergence past [`SEPARATION_BOUND`] marks the fit
/// as not converged.
pub fn logistic_fit(y: &[u8], design: &Array2<f64>, intercept: bool, watch: &[usize]) -> Result<LogisticFit> {
    let n = y.len();
    let k = design.ncols() + usize::from(intercept);
    if design.nrows() != n {
        return Err(Error::Validation(format!("{} design rows for {n} outcomes", design.nrows())));
    }
    if n <= k {
        return Err(Error::Validation(format!("{n} observations for {k} coefficients")));
    }
    if let Some(v) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("outcome value {v} is not 0/1")));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::ConstantOutcome);
    }
    if !design.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logistic design"));
    }

    let mut coef = vec![0.0; k];
    let mut ll = logistic_loglik(y, design, intercept, &coef);
    let mut converged = false;
    let mut iterations = 0;
    let mut info;
    loop {
        let (score, inf) = score_information(y, design, intercept, &coef);
        info = inf;
        if score.iter().all(|s| s.abs() <= SCORE_TOL) {
            converged = true;
            break;
        }
        if iterations == MAX_ITER {
            break;
        }
        iterations += 1;
        let Ok(llt) = info.llt(Side::Lower) else { break };
        let rhs = Mat::<f64>::from_fn(k, 1, |a, _| score[a]);
        let step = llt.solve(&rhs);
        let mut t = 1.0;
        let (next, next_ll) = loop {
            let cand: Vec<f64> = (0..k).map(|a| coef[a] + t * step[(a, 0)]).collect();
            let cand_ll = logistic_loglik(y, design, intercept, &cand);
            if cand_ll >= ll - 1e-12 * ll.abs() || t < 1e-8 {
                break (cand, cand_ll);
            }
            t *= 0.5;
        };
        let dev_change = 2.0 * (next_ll - ll).abs() / (2.0 * next_ll.abs() + 0.1);
        coef = next;
        ll = next_ll;
        if !coef.iter().all(|c| c.is_finite()) {
            break;
        }
        if dev_change <= DEVIANCE_TOL {
            info = score_information(y, design, intercept, &coef).1;
            converged = true;
            break;
        }
    }
    let off = usize::from(intercept);
    if watch.iter().any(|&j| !(coef[j + off].abs() <= SEPARATION_BOUND)) {
        converged = false;
    }
    let cov = match info.llt(Side::Lower) {
        Ok(llt) => {
            let inv = llt.inverse();
            Array2::from_shape_fn((k, k), |(a, b)| inv[(a, b)])
        }
        Err(_) => {
            converged = false;
            Array2::from_elem((k, k), f64::NAN)
        }
    };
    Ok(LogisticFit {
        coef,
        cov,
        loglik: ll,
        iterations,
        converged,
        intercept,
    })
}

/// Wald test of coefficient `index` (position in `fit.coef`).
pub fn wald_test(fit: &LogisticFit, index: usize, snp: &str, method: Method) -> AssocResult {
    let beta = fit.coef[index];
    let se = fit.cov[[index, index]].sqrt();
    if !fit.converged || !(se > 0.0) || !se.is_finite() {
        return AssocResult {
            beta,
            se,
            ..AssocResult::failed(snp, method)
        };
    }
    let wald = (beta / se).powi(2);
    AssocResult {
        snp: snp.to_string(),
        method,
        beta,
        se,
        wald,
        p_value: Some(chi2_1_sf(wald)),
        converged: true,
    }
}

/// Sufficient statistics of one stratum: members with 0/1/2 copies among
/// all members, the number of cases and the cases' allele sum.
#[derive(Debug, Clone, Copy, PartialEq)]
struct StratumCounts {
    n: [u64; 3],
    cases: u64,
    observed: u64,
}

impl StratumCounts {
    /// `ln N(t)` for each case allele sum `t`, where `N(t)` counts the
    /// case-sets of the stratum's size with that sum.
    fn log_counts(&self) -> Vec<f64> {
        let c = self.cases;
        let mut out = vec![f64::NEG_INFINITY; (2 * c + 1) as usize];
        for twos in 0..=c.min(self.n[2]) {
            for ones in 0..=(c - twos).min(self.n[1]) {
                let zeros = c - twos - ones;
                if zeros > self.n[0] {
                    continue;
                }
                let t = (ones + 2 * twos) as usize;
                let term = ln_binomial(self.n[0], zeros) + ln_binomial(self.n[1], ones) + ln_binomial(self.n[2], twos);
                out[t] = logaddexp(out[t], term);
            }
        }
        out
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFit {
    pub beta: f64,
    pub se: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub informative_strata: usize,
}

struct Prepared {
    observed: Vec<f64>,
    log_counts: Vec<Vec<f64>>,
}

impl Prepared {
    /// Log-likelihood, score and information at `beta`.
    fn eval(&self, beta: f64) -> (f64, f64, f64) {
        let (mut ll, mut score, mut info) = (0.0, 0.0, 0.0);
        for (obs, lc) in self.observed.iter().zip(&self.log_counts) {
            let lw: Vec<f64> = lc.iter().enumerate().map(|(t, l)| l + beta * t as f64).collect();
            let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = lw.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let mean: f64 = w.iter().enumerate().map(|(t, v)| t as f64 * v).sum::<f64>() / z;
            let var: f64 = w.iter().enumerate().map(|(t, v)| (t as f64 - mean).powi(2) * v).sum::<f64>() / z;
            ll += beta * obs - (m + z.ln());
            score += obs - mean;
            info += var;
        }
        (ll, score, info)
    }
}

fn prepare(strata: &[Vec<usize>], x: &[Option<u8>], y: &[u8]) -> Result<Prepared> {
    let mut observed = Vec::new();
    let mut log_counts = Vec::new();
    for s in strata {
        let mut counts = StratumCounts { n: [0; 3], cases: 0, observed: 0 };
        for &i in s {
            let Some(v) = x[i] else { continue };
            counts.n[v as usize] += 1;
            if y[i] == 1 {
                counts.cases += 1;
                counts.observed += u64::from(v);
            }
        }
        let size: u64 = counts.n.iter().sum();
        let constant = counts.n.iter().filter(|&&c| c > 0).count() < 2;
        if counts.cases == 0 || counts.cases == size || constant {
            continue;
        }
        observed.push(counts.observed as f64);
        log_counts.push(counts.log_counts());
    }
    if observed.is_empty() {
        return Err(Error::Uninformative("no stratum varies in both genotype and outcome".into()));
    }
    Ok(Prepared { observed, log_counts })
}

/// Exact conditional logistic regression of `y` on allele counts within
/// strata. Subjects with a missing genotype are left out of their stratum.
pub fn conditional_logistic_fit(strata: &[Vec<usize>], x: &[Option<u8>], y: &[u8]) -> Result<ConditionalFit> {
    if x.len() != y.len() {
        return Err(Error::Validation("genotype and outcome lengths differ".into()));
    }
    let prep = prepare(strata, x, y)?;
    let mut beta = 0.0;
    let (mut ll, mut score, mut info) = prep.eval(beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        if score.abs() <= SCORE_TOL {
            converged = true;
            break;
        }
        if !(info > 0.0) {
            break;
        }
        iterations += 1;
        let step = score / info;
        let mut t = 1.0;
        let (mut nb, mut next) = (beta + step, prep.eval(beta + step));
        while next.0 < ll - 1e-12 * ll.abs() && t > 1e-8 {
            t *= 0.5;
            nb = beta + t * step;
            next = prep.eval(nb);
        }
        let dev_change = 2.0 * (next.0 - ll).abs() / (2.0 * next.0.abs() + 0.1);
        beta = nb;
        (ll, score, info) = next;
        if dev_change <= DEVIANCE_TOL {
            converged = true;
            break;
        }
    }
    if !(beta.abs() <= SEPARATION_BOUND) || !(info > 0.0) {
        converged = false;
    }
    Ok(ConditionalFit {
        beta,
        se: 1.0 / info.sqrt(),
        loglik: ll,
        iterations,
        converged,
        informative_strata: prep.observed.len(),
    })
}

/// Conditional score at `beta = 0`.
pub fn conditional_score_at_zero(strata: &[Vec<usize>], x: &[Option<u8>], y: &[u8]) -> Result<f64> {
    Ok(prepare(strata, x, y)?.eval(0.0).1)
}

pub fn conditional_logistic_test(strata: &[Vec<usize>], x: &[Option<u8>], y: &[u8], snp: &str) -> AssocResult {
    match conditional_logistic_fit(strata, x, y) {
        Ok(fit) if fit.converged && fit.se.is_finite() && fit.se > 0.0 => {
            let wald = (fit.beta / fit.se).powi(2);
            AssocResult {
                snp: snp.to_string(),
                method: Method::SpectralGem,
                beta: fit.beta,
                se: fit.se,
                wald,
                p_value: Some(chi2_1_sf(wald)),
                converged: true,
            }
        }
        Ok(fit) => AssocResult {
            beta: fit.beta,
            se: fit.se,
            ..AssocResult::failed(snp, Method::SpectralGem)
        },
        Err(_) => AssocResult::failed(snp, Method::SpectralGem),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmhStatistic {
    pub statistic: f64,
    pub p_value: f64,
    /// Mantel-Haenszel common odds ratio, log scale.
    pub log_or: f64,
    /// Robins-Breslow-Greenland standard error of `log_or`.
    pub se: f64,
    pub strata_used: usize,
}

/// One allele table: case/control rows by counted/other allele columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlleleTable {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// CMH test over 2×2 tables without continuity correction; tables with a
/// zero margin are skipped.
pub fn cmh_tables(tables: &[AlleleTable]) -> Result<CmhStatistic> {
    let (mut dev, mut var, mut used) = (0.0, 0.0, 0);
    let (mut r, mut s, mut pr, mut ps_qr, mut qs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for t in tables {
        let n = t.a + t.b + t.c + t.d;
        let (n1, n2, m1, m2) = (t.a + t.b, t.c + t.d, t.a + t.c, t.b + t.d);
        if n1 == 0.0 || n2 == 0.0 || m1 == 0.0 || m2 == 0.0 {
            continue;
        }
        used += 1;
        dev += t.a - n1 * m1 / n;
        var += n1 * n2 * m1 * m2 / (n * n * (n - 1.0));
        let (rk, sk) = (t.a * t.d / n, t.b * t.c / n);
        let (pk, qk) = ((t.a + t.d) / n, (t.b + t.c) / n);
        r += rk;
        s += sk;
        pr += pk * rk;
        ps_qr += pk * sk + qk * rk;
        qs += qk * sk;
    }
    if used == 0 {
        return Err(Error::Uninformative("every stratum has a zero margin".into()));
    }
    let statistic = dev * dev / var;
    let se = (pr / (2.0 * r * r) + ps_qr / (2.0 * r * s) + qs / (2.0 * s * s)).sqrt();
    Ok(CmhStatistic {
        statistic,
        p_value: chi2_1_sf(statistic),
        log_or: (r / s).ln(),
        se,
        strata_used: used,
    })
}

/// Allele tables per stratum label.
pub fn allele_tables(strata: &[Option<usize>], x: &[Option<u8>], y: &[u8]) -> Vec<AlleleTable> {
    let k = strata.iter().flatten().max().map_or(0, |m| m + 1);
    let mut tables = vec![AlleleTable { a: 0.0, b: 0.0, c: 0.0, d: 0.0 }; k];
    for i in 0..y.len() {
        let (Some(s), Some(v)) = (strata[i], x[i]) else { continue };
        let (counted, other) = (f64::from(v), 2.0 - f64::from(v));
        let t = &mut tables[s];
        if y[i] == 1 {
            t.a += counted;
            t.b += other;
        } else {
            t.c += counted;
            t.d += other;
        }
    }
    tables
}

pub fn cmh_test(strata: &[Option<usize>], x: &[Option<u8>], y: &[u8], snp: &str) -> AssocResult {
    match cmh_tables(&allele_tables(strata, x, y)) {
        Ok(c) => AssocResult {
            snp: snp.to_string(),
            method: Method::Cmh,
            beta: c.log_or,
            se: c.se,
            wald: c.statistic,
            p_value: Some(c.p_value),
            converged: true,
        },
        Err(_) => AssocResult::failed(snp, Method::Cmh),
    }
}

/// What a scan conditions on.
#[derive(Debug, Clone, Copy)]
pub enum ScanInput<'a> {
    /// Plain logistic regression on the allele count.
    None,
    /// Logistic regression adjusted for these per-subject covariates.
    Covariates(&'a Array2<f64>),
    /// Conditional logistic regression within matched strata.
    Strata(&'a [Vec<usize>]),
    /// CMH over cluster labels; `None` subjects are left out.
    Clusters(&'a [Option<usize>]),
}

fn logistic_snp(g: &GenotypeMatrix, j: usize, y: &[u8], cov: Option<&Array2<f64>>, method: Method) -> AssocResult {
    let snp = &g.snps()[j];
    let rows: Vec<usize> = (0..y.len()).filter(|&i| g.get(i, j).is_some()).collect();
    let extra = cov.map_or(0, |c| c.ncols());
    let design = Array2::from_shape_fn((rows.len(), 1 + extra), |(r, c)| {
        let i = rows[r];
        if c == 0 {
            f64::from(g.get(i, j).unwrap_or(0))
        } else {
            cov.expect("covariates present")[[i, c - 1]]
        }
    });
    let yy: Vec<u8> = rows.iter().map(|&i| y[i]).collect();
    match logistic_fit(&yy, &design, true, &[0]) {
        Ok(fit) => wald_test(&fit, fit.index(0), snp, method),
        Err(_) => AssocResult::failed(snp, method),
    }
}

/// One result per SNP, in SNP order. Per-SNP failures are flagged in the
/// result rather than aborting the scan.
pub fn assoc_scan(g: &GenotypeMatrix, y: &[u8], method: Method, input: ScanInput<'_>) -> Result<Vec<AssocResult>> {
    let n = g.n_subjects();
    if y.len() != n {
        return Err(Error::Validation(format!("{} phenotypes for {n} subjects", y.len())));
    }
    if let Some(v) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("phenotype value {v} is not 0/1")));
    }
    match (method, input) {
        (Method::Uncorrected, ScanInput::None) => {}
        (Method::SpectralR | Method::Pca, ScanInput::Covariates(c)) if c.nrows() == n => {}
        (Method::SpectralGem, ScanInput::Strata(s)) if s.iter().flatten().all(|&i| i < n) => {}
        (Method::Cmh, ScanInput::Clusters(c)) if c.len() == n => {}
        (m, _) => {
            return Err(Error::Validation(format!("method {} got mismatched inputs", m.name())));
        }
    }
    Ok((0..g.n_snps())
        .into_par_iter()
        .map(|j| {
            let x = || (0..n).map(|i| g.get(i, j)).collect::<Vec<_>>();
            match input {
                ScanInput::None => logistic_snp(g, j, y, None, method),
                ScanInput::Covariates(c) => logistic_snp(g, j, y, Some(c), method),
                ScanInput::Strata(s) => conditional_logistic_test(s, &x(), y, &g.snps()[j]),
                ScanInput::Clusters(c) => cmh_test(c, &x(), y, &g.snps()[j]),
            }
        })
        .collect())
}
