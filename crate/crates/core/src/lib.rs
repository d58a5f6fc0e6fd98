//! Spectral-graph ancestry maps for genotype panels, case-control matching
//! and stratification-corrected association scans.
//!
//! Subjects become vertices of a graph weighted by genotype similarity. The
//! leading eigenvectors of its normalized Laplacian, rescaled by
//! `λ = max(0, 1 - ν)`, give ancestry coordinates whose dimension is chosen
//! from the Laplacian eigengaps. Those coordinates feed either logistic
//! regression as covariates or Ward clustering and case-control matching
//! followed by conditional logistic regression.

pub mod assoc;
pub mod cli;
pub mod cluster;
pub mod dimsel;
pub mod eigencore;
pub mod error;
pub mod genotype_io;
pub mod kernels;
pub mod matching;
pub mod pipeline;
pub mod preprocess;
pub mod simulate;

pub use error::{Error, Result};
