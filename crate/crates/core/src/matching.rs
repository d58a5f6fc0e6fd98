//! Case-control matching in the embedding: removal of unmatchable subjects
//! and greedy full matching into strata with at least one case and one
//! control each.

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::dimsel::quantile;
use crate::eigencore::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingParams {
    pub drop_outliers: bool,
    /// Percentile of nearest cross-phenotype distances beyond which a
    /// single-phenotype cluster counts as unmatchable.
    pub distance_quantile: f64,
}

impl Default for MatchingParams {
    fn default() -> Self {
        MatchingParams {
            drop_outliers: true,
            distance_quantile: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retained {
    pub retained: Vec<usize>,
    pub removed_outliers: Vec<usize>,
    pub removed_unmatchable: Vec<usize>,
}

impl Retained {
    pub fn removed(&self) -> Vec<usize> {
        let mut all = [self.removed_outliers.as_slice(), self.removed_unmatchable.as_slice()].concat();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedStrata {
    pub strata: Vec<Vec<usize>>,
    pub cases: Vec<usize>,
    pub controls: Vec<usize>,
    pub removed: Vec<usize>,
    /// Sum of within-stratum pairwise distances.
    pub total_distance: f64,
    /// Sum of within-stratum case-to-control distances; the matching
    /// objective.
    pub case_control_distance: f64,
}

impl MatchedStrata {
    /// Replaces row indices with `ids[row]` and records `removed`.
    pub fn relabel(mut self, ids: &[usize], removed: Vec<usize>) -> Self {
        for s in &mut self.strata {
            for i in s.iter_mut() {
                *i = ids[*i];
            }
        }
        self.removed = removed;
        self
    }

    /// Stratum index per subject among `n`, `None` when unassigned.
    pub fn stratum_of(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for (k, s) in self.strata.iter().enumerate() {
            for &i in s {
                out[i] = Some(k);
            }
        }
        out
    }
}

fn check_binary(y: &[u8]) -> Result<()> {
    match y.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Validation(format!("phenotype value {v} is not 0/1"))),
        None => Ok(()),
    }
}

/// Drops outliers, then whole clusters that hold only one phenotype and sit
/// far from the other phenotype.
///
/// A subject's reach is the distance to its nearest subject of the other
/// phenotype. A single-phenotype cluster is removed when the median reach
/// of its members exceeds the `distance_quantile` of reaches among subjects
/// of mixed clusters.
pub fn remove_unmatchable(c: &ClusterModel, e: &Embedding, y: &[u8], params: &MatchingParams) -> Result<Retained> {
    let n = c.n();
    if y.len() != n || e.n() != n {
        return Err(Error::Validation(format!(
            "{} phenotypes and {} embedding rows for {n} clustered subjects",
            y.len(),
            e.n()
        )));
    }
    check_binary(y)?;
    let (removed_outliers, candidates): (Vec<usize>, Vec<usize>) = if params.drop_outliers {
        (0..n).partition(|&i| c.assignment[i].is_none())
    } else {
        (Vec::new(), (0..n).collect())
    };
    let reach: Vec<f64> = (0..n)
        .map(|i| {
            candidates
                .iter()
                .filter(|&&j| y[j] != y[i])
                .map(|&j| e.distance(i, j))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    // Groups: cluster labels, with kept outliers as singleton groups.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); c.k];
    for &i in &candidates {
        match c.assignment[i] {
            Some(k) => groups[k].push(i),
            None => groups.push(vec![i]),
        }
    }
    let mixed = |g: &[usize]| g.iter().any(|&i| y[i] == 1) && g.iter().any(|&i| y[i] == 0);
    let mut reference: Vec<f64> = groups
        .iter()
        .filter(|g| mixed(g))
        .flat_map(|g| g.iter().map(|&i| reach[i]))
        .collect();
    if reference.is_empty() {
        reference = candidates.iter().map(|&i| reach[i]).collect();
    }
    reference.retain(|r| r.is_finite());
    let cutoff = if reference.is_empty() {
        f64::INFINITY
    } else {
        quantile(&reference, params.distance_quantile)
    };

    let mut removed_unmatchable = Vec::new();
    for g in groups.iter().filter(|g| !g.is_empty() && !mixed(g)) {
        let reaches: Vec<f64> = g.iter().map(|&i| reach[i]).collect();
        if quantile(&reaches, 0.5) > cutoff {
            removed_unmatchable.extend_from_slice(g);
        }
    }
    removed_unmatchable.sort_unstable();
    let retained: Vec<usize> = candidates
        .into_iter()
        .filter(|i| removed_unmatchable.binary_search(i).is_err())
        .collect();
    if !retained.iter().any(|&i| y[i] == 1) || !retained.iter().any(|&i| y[i] == 0) {
        return Err(Error::Validation(
            "removing unmatchable subjects left no cases or no controls".into(),
        ));
    }
    Ok(Retained {
        retained,
        removed_outliers,
        removed_unmatchable,
    })
}

/// Sum of within-stratum pairwise distances.
pub fn total_distance(e: &Embedding, strata: &[Vec<usize>]) -> f64 {
    strata
        .iter()
        .map(|s| {
            let mut sum = 0.0;
            for (a, &i) in s.iter().enumerate() {
                for &j in &s[a + 1..] {
                    sum += e.distance(i, j);
                }
            }
            sum
        })
        .sum()
}

/// Sum of within-stratum distances between a case and a control.
pub fn case_control_distance(e: &Embedding, y: &[u8], strata: &[Vec<usize>]) -> f64 {
    strata
        .iter()
        .map(|s| {
            let mut sum = 0.0;
            for &i in s.iter().filter(|&&i| y[i] == 1) {
                for &j in s.iter().filter(|&&j| y[j] == 0) {
                    sum += e.distance(i, j);
                }
            }
            sum
        })
        .sum()
}

/// Greedy full matching on embedding rows.
///
/// Case-control pairs are taken in order of increasing distance (ties by
/// index). Two free subjects open a stratum. A free subject joins its
/// partner's stratum when the partner is that stratum's only member of its
/// phenotype, so strata keep one case with several controls or one control
/// with several cases. Subjects left over join the stratum with the least
/// added case-to-control distance. A local search finally moves single
/// subjects, swaps two subjects of the same phenotype, or dissolves a pair
/// into other strata, while that lowers the case-to-control distance.
pub fn match_strata(e: &Embedding, y: &[u8]) -> Result<MatchedStrata> {
    let n = e.n();
    if y.len() != n {
        return Err(Error::Validation(format!("{} phenotypes for {n} embedding rows", y.len())));
    }
    check_binary(y)?;
    if !y.contains(&1) || !y.contains(&0) {
        return Err(Error::Validation("matching needs at least one case and one control".into()));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if y[i] != y[j] {
                pairs.push((e.distance(i, j), i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut stratum = vec![usize::MAX; n];
    let mut strata: Vec<Vec<usize>> = Vec::new();
    let is_hub = |strata: &[Vec<usize>], stratum: &[usize], j: usize| {
        strata[stratum[j]].iter().filter(|&&v| y[v] == y[j]).count() == 1
    };
    for &(_, i, j) in &pairs {
        match (stratum[i] == usize::MAX, stratum[j] == usize::MAX) {
            (true, true) => {
                stratum[i] = strata.len();
                stratum[j] = strata.len();
                strata.push(vec![i, j]);
            }
            (true, false) if is_hub(&strata, &stratum, j) => {
                stratum[i] = stratum[j];
                strata[stratum[j]].push(i);
            }
            (false, true) if is_hub(&strata, &stratum, i) => {
                stratum[j] = stratum[i];
                strata[stratum[i]].push(j);
            }
            _ => {}
        }
    }
    for i in 0..n {
        if stratum[i] != usize::MAX {
            continue;
        }
        let mut best = (f64::INFINITY, 0);
        for (k, s) in strata.iter().enumerate() {
            let added: f64 = s.iter().filter(|&&j| y[j] != y[i]).map(|&j| e.distance(i, j)).sum();
            if added < best.0 {
                best = (added, k);
            }
        }
        stratum[i] = best.1;
        strata[best.1].push(i);
    }
    improve(e, y, &mut strata, &mut stratum);
    strata.retain(|s| !s.is_empty());
    for s in &mut strata {
        s.sort_unstable();
    }
    strata.sort_unstable();
    let cases = strata.iter().map(|s| s.iter().filter(|&&i| y[i] == 1).count()).collect();
    let controls = strata.iter().map(|s| s.iter().filter(|&&i| y[i] == 0).count()).collect();
    Ok(MatchedStrata {
        total_distance: total_distance(e, &strata),
        case_control_distance: case_control_distance(e, y, &strata),
        strata,
        cases,
        controls,
        removed: Vec::new(),
    })
}

const MAX_SWEEPS: usize = 100;

/// First-improvement local search over moves, same-phenotype swaps, pair
/// dissolution and pair extraction. Extracting a case and a control from a
/// stratum holding two of each always lowers the cost, so the result is a
/// full matching.
fn improve(e: &Embedding, y: &[u8], strata: &mut Vec<Vec<usize>>, stratum: &mut [usize]) {
    let n = y.len();
    let link = |i: usize, s: &[usize]| -> f64 { s.iter().filter(|&&j| y[j] != y[i]).map(|&j| e.distance(i, j)).sum() };
    let keeps_both = |s: &[usize], leaving: usize| {
        s.iter().any(|&j| j != leaving && y[j] == 1) && s.iter().any(|&j| j != leaving && y[j] == 0)
    };
    for _ in 0..MAX_SWEEPS {
        let mut changed = false;
        for i in 0..n {
            let from = stratum[i];
            if !keeps_both(&strata[from], i) {
                continue;
            }
            let out = link(i, &strata[from]);
            let mut best = (-1e-12 * out.max(1.0), usize::MAX);
            for (k, s) in strata.iter().enumerate() {
                if k != from && !s.is_empty() {
                    let delta = link(i, s) - out;
                    if delta < best.0 {
                        best = (delta, k);
                    }
                }
            }
            if best.1 != usize::MAX {
                strata[from].retain(|&j| j != i);
                strata[best.1].push(i);
                stratum[i] = best.1;
                changed = true;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (si, sj) = (stratum[i], stratum[j]);
                if y[i] != y[j] || si == sj {
                    continue;
                }
                let before = link(i, &strata[si]) + link(j, &strata[sj]);
                let after = link(i, &strata[sj]) + link(j, &strata[si]);
                if after < before - 1e-12 * before.max(1.0) {
                    strata[si].retain(|&v| v != i);
                    strata[sj].retain(|&v| v != j);
                    strata[si].push(j);
                    strata[sj].push(i);
                    stratum[i] = sj;
                    stratum[j] = si;
                    changed = true;
                }
            }
        }
        for k in 0..strata.len() {
            let [i, j] = strata[k][..] else { continue };
            let best_home = |v: usize| {
                let mut best = (f64::INFINITY, usize::MAX);
                for (t, s) in strata.iter().enumerate() {
                    if t != k && !s.is_empty() {
                        let c = link(v, s);
                        if c < best.0 {
                            best = (c, t);
                        }
                    }
                }
                best
            };
            let ((ci, ti), (cj, tj)) = (best_home(i), best_home(j));
            if ti == usize::MAX {
                continue;
            }
            let dij = e.distance(i, j);
            let added = ci + cj + if ti == tj { dij } else { 0.0 };
            if added < dij - 1e-12 * dij.max(1.0) {
                strata[k].clear();
                strata[ti].push(i);
                strata[tj].push(j);
                stratum[i] = ti;
                stratum[j] = tj;
                changed = true;
            }
        }
        for i in (0..n).filter(|&v| y[v] == 1) {
            for j in (0..n).filter(|&v| y[v] == 0) {
                let (si, sj) = (stratum[i], stratum[j]);
                let dij = e.distance(i, j);
                let (valid, delta) = if si == sj {
                    let s = &strata[si];
                    let rest_cases = s.iter().filter(|&&v| y[v] == 1).count() - 1;
                    (rest_cases >= 1 && s.len() - rest_cases - 2 >= 1, 2.0 * dij - link(i, s) - link(j, s))
                } else {
                    (
                        keeps_both(&strata[si], i) && keeps_both(&strata[sj], j),
                        dij - link(i, &strata[si]) - link(j, &strata[sj]),
                    )
                };
                if valid && delta < -1e-12 * dij.max(1.0) {
                    strata[si].retain(|&v| v != i);
                    strata[sj].retain(|&v| v != j);
                    stratum[i] = strata.len();
                    stratum[j] = strata.len();
                    strata.push(vec![i, j]);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}
