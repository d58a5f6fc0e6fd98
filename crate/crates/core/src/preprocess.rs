//! Centering and scaling of allele counts into the feature matrix X.

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::genotype_io::GenotypeMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Imputation {
    /// Missing cells take the mean of the observed cells, i.e. 0 after centering.
    #[default]
    ColumnMean,
}

#[derive(Debug, Clone)]
pub struct StandardizedMatrix {
    pub x: Array2<f64>,
    pub col_means: Vec<f64>,
    /// Sample standard deviations (n - 1 denominator) of the imputed columns.
    pub col_sds: Vec<f64>,
    pub source_snps: Vec<String>,
    pub scaled: bool,
    /// Columns dropped because they had zero variance.
    pub dropped_monomorphic: usize,
}

impl StandardizedMatrix {
    pub fn n_subjects(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }
}

struct Column {
    values: Vec<f64>,
    mean: f64,
    sd: f64,
}

pub fn standardize(g: &GenotypeMatrix, scale: bool, impute: Imputation) -> Result<StandardizedMatrix> {
    let Imputation::ColumnMean = impute;
    let n = g.n_subjects();
    let counts = g.counts();
    let missing = g.missing();
    let columns: Vec<Option<Column>> = (0..g.n_snps())
        .into_par_iter()
        .map(|j| {
            let c = counts.column(j);
            let m = missing.column(j);
            let (sum, observed) = c
                .iter()
                .zip(m.iter())
                .filter(|(_, &miss)| !miss)
                .fold((0.0, 0usize), |(s, k), (&v, _)| (s + f64::from(v), k + 1));
            if observed == 0 {
                return None;
            }
            let mean = sum / observed as f64;
            let values: Vec<f64> = c
                .iter()
                .zip(m.iter())
                .map(|(&v, &miss)| if miss { 0.0 } else { f64::from(v) - mean })
                .collect();
            let ss: f64 = values.iter().map(|v| v * v).sum();
            let sd = (ss / (n as f64 - 1.0)).sqrt();
            (sd > 0.0).then_some(Column { values, mean, sd })
        })
        .collect();

    let kept: Vec<(usize, Column)> = columns
        .into_iter()
        .enumerate()
        .filter_map(|(j, c)| c.map(|c| (j, c)))
        .collect();
    if kept.is_empty() {
        return Err(Error::AllMonomorphic(g.n_snps()));
    }
    let p = kept.len();
    let mut x = Array2::<f64>::zeros((n, p));
    for (k, (_, col)) in kept.iter().enumerate() {
        let div = if scale { col.sd } else { 1.0 };
        for (dst, v) in x.column_mut(k).iter_mut().zip(&col.values) {
            *dst = v / div;
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("standardized matrix"));
    }
    Ok(StandardizedMatrix {
        x,
        col_means: kept.iter().map(|(_, c)| c.mean).collect(),
        col_sds: kept.iter().map(|(_, c)| c.sd).collect(),
        source_snps: kept.iter().map(|(j, _)| g.snps()[*j].clone()).collect(),
        scaled: scale,
        dropped_monomorphic: g.n_snps() - p,
    })
}

/// Column sums of X, for checking the centering invariant.
pub fn column_sums(x: &Array2<f64>) -> Vec<f64> {
    x.sum_axis(Axis(0)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn gm(counts: Array2<u8>, missing: Option<Array2<bool>>) -> GenotypeMatrix {
        let (n, p) = counts.dim();
        let missing = missing.unwrap_or_else(|| Array2::from_elem((n, p), false));
        GenotypeMatrix::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..p).map(|j| format!("m{j}")).collect(),
            counts,
            missing,
            None,
        )
        .unwrap()
    }

    #[test]
    fn centers_and_scales_simple_column() {
        let s = standardize(&gm(array![[0], [1], [2]], None), true, Imputation::ColumnMean).unwrap();
        assert_eq!(s.x, array![[-1.0], [0.0], [1.0]]);
        assert_eq!(s.col_sds, vec![1.0]);
        assert_eq!(s.col_means, vec![1.0]);
    }

    #[test]
    fn drops_monomorphic() {
        let s = standardize(&gm(array![[0, 0], [0, 1], [0, 2]], None), true, Imputation::ColumnMean)
            .unwrap();
        assert_eq!(s.dropped_monomorphic, 1);
        assert_eq!(s.source_snps, vec!["m1".to_string()]);
        let err = standardize(&gm(array![[1], [1]], None), true, Imputation::ColumnMean);
        assert!(matches!(err, Err(Error::AllMonomorphic(1))));
    }

    #[test]
    fn imputes_missing_to_mean() {
        let missing = array![[false], [true], [false]];
        let s = standardize(&gm(array![[0], [0], [2]], Some(missing)), false, Imputation::ColumnMean)
            .unwrap();
        assert_eq!(s.x, array![[-1.0], [0.0], [1.0]]);
    }

    proptest! {
        #[test]
        fn centered_and_unit_sd(cells in proptest::collection::vec(0u8..3, 8 * 6), seed in 0usize..8) {
            let counts = Array2::from_shape_vec((8, 6), cells).unwrap();
            let g = gm(counts, None);
            let Ok(s) = standardize(&g, true, Imputation::ColumnMean) else { return Ok(()); };
            for (j, sum) in column_sums(&s.x).iter().enumerate() {
                prop_assert!(sum.abs() <= 1e-8 * 8.0);
                let ss: f64 = s.x.column(j).iter().map(|v| v * v).sum();
                prop_assert!(((ss / 7.0).sqrt() - 1.0).abs() <= 1e-8);
                prop_assert!(s.col_sds[j] > 0.0);
            }
            // Row permutation commutes with standardization.
            let perm: Vec<usize> = (0..8).map(|i| (i + seed) % 8).collect();
            let sp = standardize(&g.subset_subjects(&perm).unwrap(), true, Imputation::ColumnMean).unwrap();
            for (r, &i) in perm.iter().enumerate() {
                for j in 0..s.n_features() {
                    prop_assert!((sp.x[[r, j]] - s.x[[i, j]]).abs() < 1e-12);
                }
            }
        }
    }
}
