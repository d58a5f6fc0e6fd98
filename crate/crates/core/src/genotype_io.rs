//! Genotype matrices: parsing, validation, QC filtering and TSV output.
//!
//! The input format is a whitespace-separated table with one row per subject:
//!
//! ```text
//! IID   PHENOTYPE  rs1  rs2  rs3
//! s1    1          0    1    NA
//! s2    0          2    1    0
//! ```
//!
//! The `PHENOTYPE` column is optional (1 = case, 0 = control, NA = unknown).
//! Genotype cells are minor-allele counts `0`, `1`, `2` or `NA`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

pub const PHENOTYPE_COLUMN: &str = "PHENOTYPE";
pub const DEFAULT_MAF_MIN: f64 = 0.05;
pub const DEFAULT_MISS_MAX: f64 = 0.01;

/// Subjects x SNPs allele counts with a missingness mask.
///
/// Missing cells hold `0` in `counts`; always consult `missing`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    subjects: Vec<String>,
    snps: Vec<String>,
    counts: Array2<u8>,
    missing: Array2<bool>,
    phenotype: Option<Vec<Option<u8>>>,
}

impl GenotypeMatrix {
    pub fn new(
        subjects: Vec<String>,
        snps: Vec<String>,
        counts: Array2<u8>,
        missing: Array2<bool>,
        phenotype: Option<Vec<Option<u8>>>,
    ) -> Result<Self> {
        let (n, p) = counts.dim();
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 subjects, got {n}")));
        }
        if p < 1 {
            return Err(Error::Validation("need at least 1 SNP".into()));
        }
        if subjects.len() != n || snps.len() != p {
            return Err(Error::Validation(format!(
                "dimension mismatch: {} subject IDs and {} SNP IDs for a {n}x{p} matrix",
                subjects.len(),
                snps.len()
            )));
        }
        if missing.dim() != (n, p) {
            return Err(Error::Validation("missing mask has the wrong shape".into()));
        }
        check_unique(&subjects, "subject")?;
        check_unique(&snps, "SNP")?;
        if let Some((i, j)) = counts
            .indexed_iter()
            .find(|&((i, j), &c)| c > 2 && !missing[[i, j]])
            .map(|(ix, _)| ix)
        {
            return Err(Error::Validation(format!(
                "allele count {} out of range for subject {} at SNP {}",
                counts[[i, j]],
                subjects[i],
                snps[j]
            )));
        }
        let mut counts = counts;
        counts.zip_mut_with(&missing, |c, &m| {
            if m {
                *c = 0
            }
        });
        if let Some(ph) = &phenotype {
            if ph.len() != n {
                return Err(Error::Validation("phenotype length differs from subject count".into()));
            }
            if let Some(i) = ph.iter().position(|v| matches!(v, Some(v) if *v > 1)) {
                return Err(Error::Validation(format!(
                    "phenotype for subject {} must be 0, 1 or NA",
                    subjects[i]
                )));
            }
        }
        Ok(GenotypeMatrix {
            subjects,
            snps,
            counts,
            missing,
            phenotype,
        })
    }

    /// Fully observed matrix with generated IDs `s0..`, `snp0..`.
    pub fn from_counts(counts: Array2<u8>) -> Result<Self> {
        let (n, p) = counts.dim();
        let subjects = (0..n).map(|i| format!("s{i}")).collect();
        let snps = (0..p).map(|j| format!("snp{j}")).collect();
        let missing = Array2::from_elem((n, p), false);
        GenotypeMatrix::new(subjects, snps, counts, missing, None)
    }

    pub fn n_subjects(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_snps(&self) -> usize {
        self.counts.ncols()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn snps(&self) -> &[String] {
        &self.snps
    }

    pub fn counts(&self) -> &Array2<u8> {
        &self.counts
    }

    pub fn missing(&self) -> &Array2<bool> {
        &self.missing
    }

    pub fn phenotype(&self) -> Option<&[Option<u8>]> {
        self.phenotype.as_deref()
    }

    pub fn get(&self, subject: usize, snp: usize) -> Option<u8> {
        (!self.missing[[subject, snp]]).then(|| self.counts[[subject, snp]])
    }

    pub fn with_phenotype(mut self, phenotype: Vec<Option<u8>>) -> Result<Self> {
        if phenotype.len() != self.n_subjects() {
            return Err(Error::Validation("phenotype length differs from subject count".into()));
        }
        if phenotype.iter().any(|v| matches!(v, Some(v) if *v > 1)) {
            return Err(Error::Validation("phenotype values must be 0, 1 or NA".into()));
        }
        self.phenotype = Some(phenotype);
        Ok(self)
    }

    /// Phenotype as 0/1 labels; errors if the column is absent or has NAs.
    pub fn complete_phenotype(&self) -> Result<Vec<u8>> {
        let ph = self.phenotype.as_ref().ok_or_else(|| {
            Error::Validation("genotype file has no PHENOTYPE column".into())
        })?;
        ph.iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    Error::Validation(format!("phenotype missing for subject {}", self.subjects[i]))
                })
            })
            .collect()
    }

    pub fn subset_subjects(&self, rows: &[usize]) -> Result<Self> {
        let counts = self.counts.select(Axis(0), rows);
        let missing = self.missing.select(Axis(0), rows);
        let subjects = rows.iter().map(|&i| self.subjects[i].clone()).collect();
        let phenotype = self
            .phenotype
            .as_ref()
            .map(|ph| rows.iter().map(|&i| ph[i]).collect());
        GenotypeMatrix::new(subjects, self.snps.clone(), counts, missing, phenotype)
    }

    pub fn select_snps(&self, cols: &[usize]) -> Result<Self> {
        let counts = self.counts.select(Axis(1), cols);
        let missing = self.missing.select(Axis(1), cols);
        let snps = cols.iter().map(|&j| self.snps[j].clone()).collect();
        GenotypeMatrix::new(
            self.subjects.clone(),
            snps,
            counts,
            missing,
            self.phenotype.clone(),
        )
    }

    /// Per-SNP summary over non-missing entries.
    pub fn snp_stats(&self, snp: usize) -> SnpStats {
        snp_stats(self.counts.column(snp), self.missing.column(snp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnpStats {
    pub observed: usize,
    pub missing_rate: f64,
    /// Frequency of the counted allele, `mean(count) / 2`. NaN if nothing observed.
    pub allele_freq: f64,
}

impl SnpStats {
    pub fn maf(&self) -> f64 {
        if self.allele_freq.is_nan() {
            0.0
        } else {
            self.allele_freq.min(1.0 - self.allele_freq)
        }
    }
}

fn snp_stats(counts: ArrayView1<u8>, missing: ArrayView1<bool>) -> SnpStats {
    let n = counts.len();
    let (mut sum, mut observed) = (0usize, 0usize);
    for (&c, &m) in counts.iter().zip(missing.iter()) {
        if !m {
            sum += c as usize;
            observed += 1;
        }
    }
    SnpStats {
        observed,
        missing_rate: (n - observed) as f64 / n as f64,
        allele_freq: if observed == 0 {
            f64::NAN
        } else {
            sum as f64 / (2.0 * observed as f64)
        },
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate {what} ID '{id}'")));
        }
    }
    Ok(())
}

pub fn read_genotypes(path: impl AsRef<Path>) -> Result<GenotypeMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_genotypes(&text, &path.display().to_string())
}

/// Parses the genotype table; `origin` is used in error messages.
pub fn parse_genotypes(text: &str, origin: &str) -> Result<GenotypeMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{origin}: empty genotype file")))?;
    let header: Vec<&str> = header.split_whitespace().collect();
    if header.len() < 2 {
        return Err(Error::Validation(format!(
            "{origin}: header needs a subject column and at least one SNP"
        )));
    }
    let has_pheno = header[1] == PHENOTYPE_COLUMN;
    let first_snp = if has_pheno { 2 } else { 1 };
    let snps: Vec<String> = header[first_snp..].iter().map(|s| s.to_string()).collect();
    let p = snps.len();
    if p == 0 {
        return Err(Error::Validation(format!("{origin}: no SNP columns in header")));
    }

    let mut subjects = Vec::new();
    let mut phenotype = Vec::new();
    let mut counts = Vec::new();
    let mut missing = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |column: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            column: column + 1,
            field: header.get(column).map_or("?", |v| v).to_string(),
            message,
        };
        if fields.len() != header.len() {
            return Err(parse_err(
                fields.len().min(header.len()),
                format!("expected {} fields, found {}", header.len(), fields.len()),
            ));
        }
        subjects.push(fields[0].to_string());
        if has_pheno {
            phenotype.push(match fields[1] {
                "0" => Some(0),
                "1" => Some(1),
                "NA" => None,
                other => {
                    return Err(parse_err(
                        1,
                        format!("subject {}: phenotype '{other}' is not 0, 1 or NA", fields[0]),
                    ))
                }
            });
        }
        for (j, cell) in fields[first_snp..].iter().enumerate() {
            let (c, m) = match *cell {
                "0" => (0, false),
                "1" => (1, false),
                "2" => (2, false),
                "NA" => (0, true),
                other => {
                    return Err(parse_err(
                        first_snp + j,
                        format!(
                            "subject {} at SNP {}: '{other}' is not 0, 1, 2 or NA",
                            fields[0], snps[j]
                        ),
                    ))
                }
            };
            counts.push(c);
            missing.push(m);
        }
    }
    let n = subjects.len();
    if n == 0 {
        return Err(Error::Validation(format!("{origin}: no subject rows")));
    }
    let counts = Array2::from_shape_vec((n, p), counts).expect("row lengths checked");
    let missing = Array2::from_shape_vec((n, p), missing).expect("row lengths checked");
    GenotypeMatrix::new(
        subjects,
        snps,
        counts,
        missing,
        has_pheno.then_some(phenotype),
    )
}

pub fn format_genotypes(g: &GenotypeMatrix) -> String {
    let mut out = String::with_capacity(g.n_subjects() * (g.n_snps() * 2 + 16));
    out.push_str("IID");
    if g.phenotype.is_some() {
        out.push('\t');
        out.push_str(PHENOTYPE_COLUMN);
    }
    for snp in &g.snps {
        out.push('\t');
        out.push_str(snp);
    }
    out.push('\n');
    for i in 0..g.n_subjects() {
        out.push_str(&g.subjects[i]);
        if let Some(ph) = &g.phenotype {
            out.push('\t');
            out.push_str(&ph[i].map_or("NA".to_string(), |v| v.to_string()));
        }
        for j in 0..g.n_snps() {
            out.push('\t');
            match g.get(i, j) {
                Some(c) => out.push(char::from(b'0' + c)),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_genotypes(g: &GenotypeMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_genotypes(g)).map_err(|e| Error::io(path, e))
}

/// Keeps SNPs with MAF >= `maf_min` and missing rate <= `miss_max`.
pub fn qc_filter(g: &GenotypeMatrix, maf_min: f64, miss_max: f64) -> Result<GenotypeMatrix> {
    if !(0.0..=0.5).contains(&maf_min) {
        return Err(Error::Config(format!("maf_min {maf_min} must lie in [0, 0.5]")));
    }
    if !(0.0..=1.0).contains(&miss_max) {
        return Err(Error::Config(format!("miss_max {miss_max} must lie in [0, 1]")));
    }
    let keep: Vec<usize> = (0..g.n_snps())
        .filter(|&j| {
            let s = g.snp_stats(j);
            s.observed > 0 && s.maf() >= maf_min && s.missing_rate <= miss_max
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyPanel { maf_min, miss_max });
    }
    g.select_snps(&keep)
}

/// Formats a float with 15 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.14e}")
    }
}

/// A header plus rows of already-formatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join("\t"));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join("\t"));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_tsv().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}
