//! Normalized graph Laplacian, symmetric eigendecomposition, the PSD kernel
//! `(I - 𝓛)₊` and eigenvalue-rescaled coordinates.
//!
//! Every kernel `H` (PCA or Laplacian-derived) is mapped to coordinates
//! `(λ₁^{1/2} u₁(i), …, λ_d^{1/2} u_d(i))`, whose Euclidean distances
//! reproduce `m(i,j)² = h_ii + h_jj − 2 h_ij` when `d` is the full rank.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};
use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::kernels::{max_asymmetry, KernelKind, KernelMatrix, WeightMatrix};

/// Tolerance of the residual and orthonormality contract.
pub const EIGEN_TOL: f64 = 1e-8;
/// Relative cutoff below which a kernel eigenvalue counts as zero.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumSource {
    /// Normalized Laplacian; eigenvalues ascending.
    Laplacian,
    /// A PSD kernel such as `X Xᵗ`; eigenvalues descending.
    Kernel,
    /// `(I - 𝓛)₊`; eigenvalues descending, first eigenvector ∝ `D^{1/2} 1`.
    LaplacianKernel,
}

#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector of `values[k]`.
    pub vectors: Array2<f64>,
    pub source: SpectrumSource,
}

impl Spectrum {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Number of eigenvalues above `RANK_TOL` relative to the largest one.
    pub fn rank(&self) -> usize {
        let top = self.values.iter().cloned().fold(0.0f64, f64::max);
        self.values.iter().filter(|&&v| v > RANK_TOL * top.max(f64::MIN_POSITIVE)).count()
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub coords: Array2<f64>,
    pub d: usize,
    pub eigenvalues_used: Vec<f64>,
    /// Column 0 is the degree-vector direction of a Laplacian kernel.
    pub includes_trivial: bool,
}

impl Embedding {
    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    /// Columns without the trivial degree direction, for display.
    pub fn display_coords(&self) -> ArrayView2<'_, f64> {
        if self.includes_trivial {
            self.coords.slice(ndarray::s![.., 1..])
        } else {
            self.coords.view()
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.coords
            .row(i)
            .iter()
            .zip(self.coords.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Embedding {
        Embedding {
            coords: self.coords.select(Axis(0), rows),
            d: self.d,
            eigenvalues_used: self.eigenvalues_used.clone(),
            includes_trivial: self.includes_trivial,
        }
    }
}

/// `𝓛 = D^{-1/2} (D - W) D^{-1/2}`.
pub fn normalized_laplacian(w: &WeightMatrix) -> Result<Array2<f64>> {
    let n = w.n();
    if let Some(i) = w.degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::IsolatedVertex {
            index: i,
            subject: format!("#{i}"),
        });
    }
    let inv_sqrt: Vec<f64> = w.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut lap = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let scaled = w.w[[i, j]] * inv_sqrt[i] * inv_sqrt[j];
            let v = if i == j { 1.0 - scaled } else { -scaled };
            lap[[i, j]] = v;
            lap[[j, i]] = v;
        }
    }
    Ok(lap)
}

fn to_faer(a: &Array2<f64>) -> Mat<f64> {
    let n = a.nrows();
    let a = a.as_standard_layout();
    MatRef::from_row_major_slice(a.as_slice().expect("standard layout"), n, a.ncols()).to_owned()
}

fn check_symmetric(a: &Array2<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Validation(format!("matrix is {}x{}", a.nrows(), a.ncols())));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to eigendecomposition"));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let asym = max_asymmetry(a);
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Ascending eigenvalues only; cheaper than [`eigendecompose`].
pub fn eigenvalues(a: &Array2<f64>) -> Result<Vec<f64>> {
    check_symmetric(a)?;
    let mut vals = to_faer(a)
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::NonConvergence(format!("{e:?}")))?;
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

/// Full decomposition of a symmetric matrix.
///
/// Laplacian spectra are sorted ascending, kernel spectra descending. Each
/// eigenvector is signed so that its largest-magnitude entry is positive.
pub fn eigendecompose(a: &Array2<f64>, source: SpectrumSource) -> Result<Spectrum> {
    check_symmetric(a)?;
    let n = a.nrows();
    let fa = to_faer(a);
    let evd = fa
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::NonConvergence(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();

    let mut order: Vec<usize> = (0..n).collect();
    match source {
        SpectrumSource::Laplacian => order.sort_by(|&i, &j| s[i].total_cmp(&s[j])),
        _ => order.sort_by(|&i, &j| s[j].total_cmp(&s[i])),
    }
    let values: Vec<f64> = order.iter().map(|&k| s[k]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (col, &k) in order.iter().enumerate() {
        let mut best = 0;
        for i in 0..n {
            if u[(i, k)].abs() > u[(best, k)].abs() {
                best = i;
            }
        }
        let sign = if u[(best, k)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[[i, col]] = sign * u[(i, k)];
        }
    }

    let spectrum = Spectrum {
        values,
        vectors,
        source,
    };
    let (residual, ortho) = decomposition_errors(&fa, &spectrum);
    let norm = spectrum.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if residual > EIGEN_TOL * norm.max(f64::MIN_POSITIVE) || ortho > EIGEN_TOL {
        return Err(Error::NonConvergence(format!(
            "max residual {residual:e} (|A| = {norm:e}), orthonormality error {ortho:e}"
        )));
    }
    Ok(spectrum)
}

/// Largest column residual `|A u - v u|` and largest `|UᵗU - I|` entry.
fn decomposition_errors(a: &Mat<f64>, spec: &Spectrum) -> (f64, f64) {
    let n = spec.n();
    let u = to_faer(&spec.vectors);
    let mut au = Mat::<f64>::zeros(n, n);
    matmul(&mut au, Accum::Replace, a.as_ref(), u.as_ref(), 1.0, Par::Seq);
    let mut residual = 0.0f64;
    for k in 0..n {
        let mut ss = 0.0;
        for i in 0..n {
            let r = au[(i, k)] - spec.values[k] * u[(i, k)];
            ss += r * r;
        }
        residual = residual.max(ss.sqrt());
    }
    let mut utu = Mat::<f64>::zeros(n, n);
    matmul(&mut utu, Accum::Replace, u.transpose(), u.as_ref(), 1.0, Par::Seq);
    let mut ortho = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            ortho = ortho.max((utu[(i, j)] - target).abs());
        }
    }
    (residual, ortho)
}

/// Turns a Laplacian spectrum into the kernel `(I - 𝓛)₊` with
/// eigenvalues `λ = max(0, 1 - ν)` and the same eigenvectors.
pub fn psd_kernel(lap: &Spectrum) -> Result<(KernelMatrix, Spectrum)> {
    let spectrum = psd_spectrum(lap)?;
    let n = spectrum.n();
    let kept = spectrum.values.iter().take_while(|&&v| v > 0.0).count();
    let mut scaled = Array2::<f64>::zeros((n, kept));
    for k in 0..kept {
        let root = spectrum.values[k].sqrt();
        for i in 0..n {
            scaled[[i, k]] = root * spectrum.vectors[[i, k]];
        }
    }
    let h = crate::kernels::gram(&scaled);
    Ok((
        KernelMatrix {
            h,
            kind: KernelKind::SpectralPsd,
        },
        spectrum,
    ))
}

/// The spectrum of `(I - 𝓛)₊` without forming the matrix.
pub fn psd_spectrum(lap: &Spectrum) -> Result<Spectrum> {
    if lap.source != SpectrumSource::Laplacian {
        return Err(Error::Validation("psd_kernel needs a Laplacian spectrum".into()));
    }
    Ok(Spectrum {
        values: lap.values.iter().map(|nu| (1.0 - nu).max(0.0)).collect(),
        vectors: lap.vectors.clone(),
        source: SpectrumSource::LaplacianKernel,
    })
}

/// Coordinates `λ_j^{1/2} u_j` for the top `d` kernel eigenpairs.
pub fn embed(spec: &Spectrum, d: usize) -> Result<Embedding> {
    if spec.source == SpectrumSource::Laplacian {
        return Err(Error::Validation(
            "embed needs a kernel spectrum; apply psd_kernel to a Laplacian first".into(),
        ));
    }
    let available = spec.rank();
    if d == 0 || d > available {
        return Err(Error::RankExceeded {
            requested: d,
            available,
        });
    }
    let n = spec.n();
    let mut coords = Array2::<f64>::zeros((n, d));
    for j in 0..d {
        let root = spec.values[j].sqrt();
        for i in 0..n {
            coords[[i, j]] = root * spec.vectors[[i, j]];
        }
    }
    if !coords.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("embedding"));
    }
    Ok(Embedding {
        coords,
        d,
        eigenvalues_used: spec.values[..d].to_vec(),
        includes_trivial: spec.source == SpectrumSource::LaplacianKernel,
    })
}

/// Kernel-induced distance `sqrt(h_ii + h_jj - 2 h_ij)`.
pub fn mds_distance(h: &KernelMatrix, i: usize, j: usize) -> Result<f64> {
    let sq = h.h[[i, i]] + h.h[[j, j]] - 2.0 * h.h[[i, j]];
    if sq < -EIGEN_TOL {
        return Err(Error::NotPsd(sq));
    }
    Ok(sq.max(0.0).sqrt())
}
