//! Number of ancestry dimensions from Laplacian eigengaps, and Monte-Carlo
//! recalibration of the null threshold `f(n, p) = a + b/n + c/p`.

use faer::linalg::solvers::SolveLstsq;
use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigencore::{eigenvalues, normalized_laplacian, Spectrum, SpectrumSource};
use crate::error::{Error, Result};
use crate::kernels::spectral_weights;
use crate::preprocess::{standardize, Imputation};
use crate::simulate::{derive_seed, gen_homogeneous};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFit {
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub empirical: f64,
    pub fitted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub quantile: f64,
    /// Per-cell training quantiles; empty for the published model.
    #[serde(default)]
    pub cells: Vec<CellFit>,
    #[serde(default)]
    pub max_rel_error: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for ThresholdModel {
    fn default() -> Self {
        Self::published()
    }
}

impl ThresholdModel {
    /// Coefficients fitted to 99th percentiles of homogeneous simulations.
    pub fn published() -> Self {
        ThresholdModel {
            a: -0.00016,
            b: 2.7,
            c: 2.3,
            quantile: 0.99,
            cells: Vec::new(),
            max_rel_error: None,
            seed: None,
        }
    }

    pub fn threshold(&self, n: usize, p: usize) -> f64 {
        self.a + self.b / n as f64 + self.c / p as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigengapReport {
    /// `gaps[i-1] = |ν_{i+1} - ν_i|` for `i = 1..n-1`.
    pub gaps: Vec<f64>,
    pub threshold: f64,
    /// Counts the trivial eigenvector, so `d = k` for `k` separated groups.
    pub d_selected: usize,
    pub n: usize,
    pub p: usize,
    /// Only the trivial dimension was selected, either because the first
    /// gap is the last one above the threshold or because none is.
    pub structureless: bool,
}

/// `|ν_{i+1} - ν_i|` over an ascending spectrum.
pub fn eigengaps(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).collect()
}

/// Largest `i` with `gaps[i-1] > threshold`, or `None`.
pub fn max_gap_index(gaps: &[f64], threshold: f64) -> Option<usize> {
    gaps.iter().rposition(|&g| g > threshold).map(|k| k + 1)
}

/// Picks `d` from the gaps of the Laplacian spectrum.
///
/// Only gaps below `ν = 1` are scanned: eigenvalues past 1 are clamped to
/// zero in the kernel `(I - 𝓛)₊` and carry no embedding coordinates.
pub fn select_dimension(lap: &Spectrum, n: usize, p: usize, model: &ThresholdModel) -> Result<EigengapReport> {
    if lap.source != SpectrumSource::Laplacian {
        return Err(Error::Validation("select_dimension needs a Laplacian spectrum".into()));
    }
    select_from_values(&lap.values, n, p, model)
}

pub fn select_from_values(values: &[f64], n: usize, p: usize, model: &ThresholdModel) -> Result<EigengapReport> {
    if n < 2 || p < 2 {
        return Err(Error::Validation(format!("need n, p >= 2, got n={n}, p={p}")));
    }
    if values.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Validation("Laplacian eigenvalues must be ascending".into()));
    }
    let gaps = eigengaps(values);
    let threshold = model.threshold(n, p);
    let scan = values.iter().take_while(|&&v| v < 1.0).count().min(gaps.len());
    let d = max_gap_index(&gaps[..scan], threshold).unwrap_or(1);
    Ok(EigengapReport {
        d_selected: d,
        structureless: d == 1,
        gaps,
        threshold,
        n,
        p,
    })
}

/// Type-7 (linear interpolation) sample quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Laplacian eigenvalues of one homogeneous replicate.
pub fn homogeneous_spectrum(n: usize, p: usize, seed: u64) -> Result<Vec<f64>> {
    let g = gen_homogeneous(n, p, seed)?;
    let x = standardize(&g, true, Imputation::ColumnMean)?;
    let w = spectral_weights(&x)?;
    eigenvalues(&normalized_laplacian(&w)?)
}

/// First null eigengap `δ₂ = |ν₃ - ν₂|` of one homogeneous replicate.
pub fn null_gap(n: usize, p: usize, seed: u64) -> Result<f64> {
    let nu = homogeneous_spectrum(n, p, seed)?;
    Ok((nu[2] - nu[1]).abs())
}

/// Simulated `δ₂` values for `reps` replicates of one grid cell.
pub fn null_gaps(n: usize, p: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(Error::Config(format!("calibration needs n >= 3, got {n}")));
    }
    (0..reps)
        .into_par_iter()
        .map(|r| null_gap(n, p, derive_seed(seed, r as u64)))
        .collect()
}

/// Fits `a + b/n + c/p` to per-cell empirical quantiles of `δ₂`.
pub fn calibrate_threshold(grid: &[(usize, usize)], reps: usize, quantile_level: f64, seed: u64) -> Result<ThresholdModel> {
    if !(quantile_level > 0.0 && quantile_level < 1.0) {
        return Err(Error::Config(format!("quantile must lie in (0, 1), got {quantile_level}")));
    }
    if reps < 2 {
        return Err(Error::Config(format!("need at least 2 replicates, got {reps}")));
    }
    let mut cells: Vec<(usize, usize)> = grid.to_vec();
    cells.sort_unstable();
    cells.dedup();
    let distinct = |f: fn(&(usize, usize)) -> usize| {
        let mut v: Vec<usize> = cells.iter().map(f).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if cells.len() < 3 || distinct(|c| c.0) < 2 || distinct(|c| c.1) < 2 {
        return Err(Error::Config(
            "grid needs at least 3 cells with at least 2 distinct n and 2 distinct p".into(),
        ));
    }

    let mut empirical = Vec::with_capacity(cells.len());
    for (k, &(n, p)) in cells.iter().enumerate() {
        let gaps = null_gaps(n, p, reps, derive_seed(seed, k as u64))?;
        empirical.push(quantile(&gaps, quantile_level));
    }
    let design = Mat::<f64>::from_fn(cells.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => 1.0 / cells[i].0 as f64,
        _ => 1.0 / cells[i].1 as f64,
    });
    let rhs = Mat::<f64>::from_fn(cells.len(), 1, |i, _| empirical[i]);
    let coef = design.qr().solve_lstsq(&rhs);
    let (a, b, c) = (coef[(0, 0)], coef[(1, 0)], coef[(2, 0)]);
    if ![a, b, c].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("threshold fit"));
    }
    let fits: Vec<CellFit> = cells
        .iter()
        .zip(&empirical)
        .map(|(&(n, p), &e)| CellFit {
            n,
            p,
            reps,
            empirical: e,
            fitted: a + b / n as f64 + c / p as f64,
        })
        .collect();
    let max_rel_error = fits
        .iter()
        .map(|f| ((f.fitted - f.empirical) / f.empirical).abs())
        .fold(0.0, f64::max);
    Ok(ThresholdModel {
        a,
        b,
        c,
        quantile: quantile_level,
        cells: fits,
        max_rel_error: Some(max_rel_error),
        seed: Some(seed),
    })
}
