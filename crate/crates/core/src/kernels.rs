//! Similarity matrices between subjects: the PCA kernel `X Xᵗ`, the
//! square-root-thresholded spectral weight graph and the IBS-sharing graph.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};
use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::genotype_io::GenotypeMatrix;
use crate::preprocess::StandardizedMatrix;

const GRAM_BLOCK_ROWS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Pca,
    SpectralPsd,
}

#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub h: Array2<f64>,
    pub kind: KernelKind,
}

#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub w: Array2<f64>,
    pub degrees: Vec<f64>,
}

impl WeightMatrix {
    /// Wraps `w`, checking symmetry and non-negativity.
    pub fn new(w: Array2<f64>) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n {
            return Err(Error::Validation(format!("weight matrix is {}x{}", n, w.ncols())));
        }
        let asym = max_asymmetry(&w);
        if asym > 1e-10 {
            return Err(Error::NotSymmetric(asym));
        }
        if let Some(v) = w.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("weight {v} is negative or non-finite")));
        }
        let degrees = w.rows().into_iter().map(|r| r.sum()).collect();
        Ok(WeightMatrix { w, degrees })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }
}

pub(crate) fn max_asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// `X Xᵗ` computed in fixed row blocks so the result does not depend on the
/// number of worker threads. The upper triangle is mirrored to the lower.
pub(crate) fn gram(x: &Array2<f64>) -> Array2<f64> {
    let (n, p) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let full = MatRef::from_row_major_slice(xs, n, p);
    let blocks: Vec<(usize, Mat<f64>)> = (0..n)
        .step_by(GRAM_BLOCK_ROWS)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let rows = GRAM_BLOCK_ROWS.min(n - start);
            let lhs = full.subrows(start, rows);
            let mut dst = Mat::<f64>::zeros(rows, n);
            matmul(&mut dst, Accum::Replace, lhs, full.transpose(), 1.0, Par::Seq);
            (start, dst)
        })
        .collect();
    let mut h = Array2::<f64>::zeros((n, n));
    for (start, block) in blocks {
        for r in 0..block.nrows() {
            let i = start + r;
            for j in i..n {
                h[[i, j]] = block[(r, j)];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            h[[i, j]] = h[[j, i]];
        }
    }
    h
}

pub fn pca_kernel(x: &StandardizedMatrix) -> Result<KernelMatrix> {
    let h = gram(&x.x);
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("PCA kernel"));
    }
    Ok(KernelMatrix {
        h,
        kind: KernelKind::Pca,
    })
}

/// `w_ij = sqrt(max(x_i · x_j, 0))`, diagonal included.
pub fn spectral_weights(x: &StandardizedMatrix) -> Result<WeightMatrix> {
    spectral_weights_from_kernel(&pca_kernel(x)?)
}

pub fn spectral_weights_from_kernel(k: &KernelMatrix) -> Result<WeightMatrix> {
    let w = k.h.mapv(|v| v.max(0.0).sqrt());
    let degrees = w.rows().into_iter().map(|r| r.sum()).collect();
    Ok(WeightMatrix { w, degrees })
}

/// Identity-by-state similarity, `w_ij = exp(-(1 - s_ij)^2 / sigma2)`.
///
/// `s_ij` averages the per-SNP allele sharing `1 - |c_i - c_j| / 2` over
/// SNPs observed in both subjects.
pub fn ibs_weights(g: &GenotypeMatrix, sigma2: f64) -> Result<WeightMatrix> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Config(format!("IBS sigma2 must be positive, got {sigma2}")));
    }
    let n = g.n_subjects();
    let counts = g.counts();
    let missing = g.missing();
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ci = counts.row(i);
            let mi = missing.row(i);
            (0..n)
                .map(|j| {
                    if i == j {
                        return Ok(1.0);
                    }
                    let cj = counts.row(j);
                    let mj = missing.row(j);
                    let (mut share, mut both) = (0u64, 0u64);
                    for k in 0..ci.len() {
                        if !mi[k] && !mj[k] {
                            // 2 - |ci - cj| shared alleles out of 2
                            share += 2 - u64::from(ci[k].abs_diff(cj[k]));
                            both += 1;
                        }
                    }
                    if both == 0 {
                        return Err(Error::NoSharedSnps(i.min(j), i.max(j)));
                    }
                    let s = share as f64 / (2.0 * both as f64);
                    Ok((-(1.0 - s).powi(2) / sigma2).exp())
                })
                .collect()
        })
        .collect();
    let mut w = Array2::<f64>::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        w.slice_mut(s![i, ..]).assign(&ndarray::Array1::from(row?));
    }
    WeightMatrix::new(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{standardize, Imputation};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn standardized(x: Array2<f64>) -> StandardizedMatrix {
        let p = x.ncols();
        StandardizedMatrix {
            x,
            col_means: vec![0.0; p],
            col_sds: vec![1.0; p],
            source_snps: (0..p).map(|j| format!("m{j}")).collect(),
            scaled: false,
            dropped_monomorphic: 0,
        }
    }

    fn random(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn orthogonal_rows_give_scaled_identity() {
        let x = array![[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let k = pca_kernel(&standardized(x)).unwrap();
        assert_eq!(k.h, Array2::<f64>::eye(3) * 4.0);
        assert_eq!(k.kind, KernelKind::Pca);
    }

    #[test]
    fn gram_matches_triple_loop() {
        let x = random(5, 8, 1);
        let k = pca_kernel(&standardized(x.clone())).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for c in 0..8 {
                    acc += x[[i, c]] * x[[j, c]];
                }
                assert!((k.h[[i, j]] - acc).abs() < 1e-12);
            }
        }
        // Multi-block path: 300 rows spans three row blocks.
        let big = random(300, 7, 2);
        let h = gram(&big);
        for &(i, j) in &[(0, 299), (130, 5), (257, 256), (299, 299)] {
            let acc: f64 = (0..7).map(|c| big[[i, c]] * big[[j, c]]).sum();
            assert!((h[[i, j]] - acc).abs() < 1e-12);
            assert_eq!(h[[i, j]], h[[j, i]]);
        }
    }

    #[test]
    fn duplicate_rows() {
        let x = array![[1.0, -2.0, 0.5], [1.0, -2.0, 0.5], [0.0, 1.0, 1.0]];
        let k = pca_kernel(&standardized(x)).unwrap();
        assert_eq!(k.h[[0, 0]], k.h[[1, 1]]);
        assert_eq!(k.h[[0, 0]], k.h[[0, 1]]);
    }

    #[test]
    fn spectral_weight_values() {
        // x0·x1 = 4, x0·x2 = -3
        let x = array![[2.0, 0.0], [2.0, 0.0], [-1.5, 0.0]];
        let w = spectral_weights(&standardized(x)).unwrap();
        assert_eq!(w.w[[0, 1]], 2.0);
        assert_eq!(w.w[[0, 2]], 0.0);
        assert_eq!(w.w[[2, 2]], 1.5);
        assert_eq!(w.degrees[0], 4.0);
    }

    #[test]
    fn spectral_weights_elementwise_oracle_and_bounds() {
        let x = random(6, 10, 3);
        let w = spectral_weights(&standardized(x.clone())).unwrap();
        let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let max_norm = norms.iter().cloned().fold(0.0, f64::max);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = x.row(i).dot(&x.row(j));
                assert!((w.w[[i, j]] - dot.max(0.0).sqrt()).abs() < 1e-12);
                assert!(w.w[[i, j]] >= 0.0 && w.w[[i, j]] <= max_norm + 1e-12);
            }
            assert!((w.w[[i, i]] - norms[i]).abs() < 1e-12);
        }
        // Simultaneous row permutation.
        let perm = [3, 1, 5, 0, 2, 4];
        let xp = x.select(ndarray::Axis(0), &perm);
        let wp = spectral_weights(&standardized(xp)).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                assert!((wp.w[[a, b]] - w.w[[perm[a], perm[b]]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ibs_examples() {
        let g = GenotypeMatrix::from_counts(array![[0, 1, 2], [1, 1, 0], [0, 1, 2], [2, 1, 0]])
            .unwrap();
        let sigma2 = 0.7;
        let w = ibs_weights(&g, sigma2).unwrap();
        assert_eq!(w.w[[0, 2]], 1.0);
        assert_eq!(w.w[[1, 1]], 1.0);
        assert!((w.w[[0, 1]] - (-0.25f64 / sigma2).exp()).abs() < 1e-15);
        let opposite = GenotypeMatrix::from_counts(array![[0, 0], [2, 2]]).unwrap();
        let w = ibs_weights(&opposite, sigma2).unwrap();
        assert!((w.w[[0, 1]] - (-1.0f64 / sigma2).exp()).abs() < 1e-15);
        for v in w.w.iter() {
            assert!(*v >= (-1.0f64 / sigma2).exp() - 1e-15 && *v <= 1.0);
        }
    }

    #[test]
    fn ibs_requires_shared_snps() {
        let counts = array![[0, 1], [1, 0]];
        let missing = array![[false, true], [true, false]];
        let g = GenotypeMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            counts,
            missing,
            None,
        )
        .unwrap();
        assert!(matches!(ibs_weights(&g, 1.0), Err(Error::NoSharedSnps(0, 1))));
        assert!(matches!(ibs_weights(&g, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn standardized_genotypes_feed_kernels() {
        let g = GenotypeMatrix::from_counts(array![[0, 1], [1, 2], [2, 0], [1, 1]]).unwrap();
        let x = standardize(&g, true, Imputation::ColumnMean).unwrap();
        let w = spectral_weights(&x).unwrap();
        assert_eq!(w.n(), 4);
        assert!(WeightMatrix::new(w.w.clone()).is_ok());
    }
}
