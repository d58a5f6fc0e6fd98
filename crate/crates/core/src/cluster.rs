//! Ward agglomerative clustering of embedding coordinates, homogeneity-driven
//! choice of the cluster count, outlier flagging and dendrogram export.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dimsel::{select_from_values, ThresholdModel};
use crate::eigencore::{eigenvalues, normalized_laplacian, Embedding};
use crate::error::{Error, Result};
use crate::genotype_io::GenotypeMatrix;
use crate::kernels::spectral_weights;
use crate::preprocess::{standardize, Imputation};

pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 5;

/// One agglomeration step. Leaves are `0..n`; the node created by step `k`
/// has id `n + k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    /// Increase of the within-cluster sum of squares.
    pub cost: f64,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterCount {
    Fixed(usize),
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Cluster label per subject, `None` for outliers.
    pub assignment: Vec<Option<usize>>,
    /// Number of non-outlier clusters.
    pub k: usize,
    pub merge_tree: Vec<Merge>,
    pub embedding_dim: usize,
    /// Tree nodes forming the cut: clusters by label, then outlier groups.
    pub cut_nodes: Vec<usize>,
}

impl ClusterModel {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn outliers(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i].is_none()).collect()
    }

    pub fn members(&self, label: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == Some(label)).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for c in self.assignment.iter().flatten() {
            sizes[*c] += 1;
        }
        sizes
    }

    /// Group index per subject over every group of the cut: clusters keep
    /// their labels and outlier groups follow as `k, k+1, …`.
    pub fn group_labels(&self) -> Vec<usize> {
        let members = node_members(self.n(), &self.merge_tree);
        let mut out = vec![0; self.n()];
        for (g, &node) in self.cut_nodes.iter().enumerate() {
            for &i in &members[node] {
                out[i] = g;
            }
        }
        out
    }

    /// Merges above the cut, with the cut nodes renumbered `0..m` and
    /// internal nodes `m..`.
    pub fn cluster_merges(&self) -> Vec<Merge> {
        let n = self.n();
        let m = self.cut_nodes.len();
        let mut ids: HashMap<usize, usize> =
            self.cut_nodes.iter().enumerate().map(|(i, &node)| (node, i)).collect();
        let first = n - m;
        let mut out = Vec::with_capacity(m.saturating_sub(1));
        for (step, merge) in self.merge_tree.iter().enumerate().skip(first) {
            ids.insert(n + step, m + (step - first));
            let (l, r) = (ids[&merge.left], ids[&merge.right]);
            out.push(Merge {
                left: l.min(r),
                right: l.max(r),
                ..*merge
            });
        }
        out
    }

    fn node_height(&self, node: usize) -> f64 {
        if node < self.n() {
            0.0
        } else {
            self.merge_tree[node - self.n()].cost
        }
    }

    fn node_size(&self, node: usize) -> usize {
        if node < self.n() {
            1
        } else {
            self.merge_tree[node - self.n()].size
        }
    }
}

/// Decides whether a subset of subjects shows no further ancestry structure.
pub trait HomogeneityTest {
    fn is_homogeneous(&self, subjects: &[usize]) -> Result<bool>;
}

impl<F: Fn(&[usize]) -> Result<bool>> HomogeneityTest for F {
    fn is_homogeneous(&self, subjects: &[usize]) -> Result<bool> {
        self(subjects)
    }
}

/// Reruns the spectral front end on the subset's genotypes and accepts
/// when the eigengap rule selects `d = 1`.
///
/// A subset is also accepted when the selected `d` could not be filled with
/// clusters of `min_cluster_size` subjects. With few subjects and many SNPs
/// the centered inner products are mostly negative, the weight graph falls
/// apart into tiny pieces and the eigengap rule reports a dimension close
/// to the subset size.
pub struct GenotypeHomogeneity<'a> {
    pub genotypes: &'a GenotypeMatrix,
    pub model: ThresholdModel,
    pub scale: bool,
    /// Subsets smaller than twice this size are accepted untested.
    pub min_cluster_size: usize,
}

impl HomogeneityTest for GenotypeHomogeneity<'_> {
    fn is_homogeneous(&self, subjects: &[usize]) -> Result<bool> {
        if subjects.len() < 2 * self.min_cluster_size || subjects.len() < 3 {
            return Ok(true);
        }
        let sub = self.genotypes.subset_subjects(subjects)?;
        let x = match standardize(&sub, self.scale, Imputation::ColumnMean) {
            Ok(x) => x,
            Err(Error::AllMonomorphic(_)) => return Ok(true),
            Err(e) => return Err(e),
        };
        if x.n_features() < 2 {
            return Ok(true);
        }
        let nu = eigenvalues(&normalized_laplacian(&spectral_weights(&x)?)?)?;
        let report = select_from_values(&nu, subjects.len(), x.n_features(), &self.model)?;
        Ok(report.d_selected == 1 || report.d_selected * self.min_cluster_size > subjects.len())
    }
}

/// Ward agglomeration with Lance-Williams updates on merge costs.
///
/// Ties are broken towards the pair with the smallest slot indices, so the
/// tree is a deterministic function of the row order.
pub fn ward_tree(coords: &ndarray::Array2<f64>) -> Result<Vec<Merge>> {
    let n = coords.nrows();
    if n < 2 {
        return Err(Error::Validation(format!("clustering needs n >= 2, got {n}")));
    }
    if !coords.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("embedding coordinates"));
    }
    // cost[i][j] = ΔSSE of merging the clusters in slots i and j.
    let mut cost = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = coords
                .row(i)
                .iter()
                .zip(coords.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            cost[i * n + j] = 0.5 * sq;
            cost[j * n + i] = 0.5 * sq;
        }
    }
    let mut active: Vec<usize> = (0..n).collect();
    let mut node = (0..n).collect::<Vec<usize>>();
    let mut size = vec![1usize; n];
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let (mut bi, mut bj, mut best) = (0, 0, f64::INFINITY);
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let c = cost[i * n + j];
                if c < best {
                    (bi, bj, best) = (i, j, c);
                }
            }
        }
        let (ni, nj) = (size[bi] as f64, size[bj] as f64);
        for &k in &active {
            if k == bi || k == bj {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((ni + nk) * cost[k * n + bi] + (nj + nk) * cost[k * n + bj] - nk * best)
                / (ni + nj + nk);
            cost[k * n + bi] = updated;
            cost[bi * n + k] = updated;
        }
        let (a, b) = (node[bi].min(node[bj]), node[bi].max(node[bj]));
        merges.push(Merge {
            left: a,
            right: b,
            cost: best.max(0.0),
            size: size[bi] + size[bj],
        });
        size[bi] += size[bj];
        node[bi] = n + step;
        active.retain(|&s| s != bj);
    }
    Ok(merges)
}

/// Leaves under each node, for all `2n - 1` nodes.
fn node_members(n: usize, merges: &[Merge]) -> Vec<Vec<usize>> {
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for m in merges {
        let mut v = members[m.left].clone();
        v.extend_from_slice(&members[m.right]);
        v.sort_unstable();
        members.push(v);
    }
    members
}

/// Nodes of the cut with `k` groups.
fn cut_nodes(n: usize, merges: &[Merge], k: usize) -> Vec<usize> {
    let mut nodes = vec![2 * n - 2];
    for step in (n - k..n - 1).rev() {
        let id = n + step;
        nodes.retain(|&x| x != id);
        nodes.push(merges[step].left);
        nodes.push(merges[step].right);
    }
    nodes
}

pub fn ward_cluster(
    e: &Embedding,
    k: ClusterCount,
    min_cluster_size: usize,
    test: &dyn HomogeneityTest,
) -> Result<ClusterModel> {
    let n = e.n();
    let merges = ward_tree(&e.coords)?;
    let members = node_members(n, &merges);
    let groups = match k {
        ClusterCount::Fixed(k) => {
            if k == 0 || k > n {
                return Err(Error::Config(format!("k must lie in 1..={n}, got {k}")));
            }
            cut_nodes(n, &merges, k)
        }
        ClusterCount::Auto => {
            let mut verdict: HashMap<usize, bool> = HashMap::new();
            let mut nodes = vec![2 * n - 2];
            let mut step = n - 1;
            loop {
                let mut all_pass = true;
                for &node in &nodes {
                    if !verdict.contains_key(&node) {
                        verdict.insert(node, test.is_homogeneous(&members[node])?);
                    }
                    all_pass &= verdict[&node];
                }
                if all_pass || step == 0 {
                    break;
                }
                step -= 1;
                let split = n + step;
                nodes.retain(|&x| x != split);
                nodes.push(merges[step].left);
                nodes.push(merges[step].right);
            }
            nodes
        }
    };
    Ok(label_cut(n, &merges, &members, groups, min_cluster_size, e.d))
}

fn label_cut(
    n: usize,
    merges: &[Merge],
    members: &[Vec<usize>],
    mut groups: Vec<usize>,
    min_cluster_size: usize,
    dim: usize,
) -> ClusterModel {
    groups.sort_by_key(|&g| (members[g].len() < min_cluster_size, members[g][0]));
    let mut assignment = vec![None; n];
    let mut k = 0;
    for &g in &groups {
        if members[g].len() >= min_cluster_size {
            for &i in &members[g] {
                assignment[i] = Some(k);
            }
            k += 1;
        }
    }
    ClusterModel {
        assignment,
        k,
        merge_tree: merges.to_vec(),
        embedding_dim: dim,
        cut_nodes: groups,
    }
}

/// Within-cluster sum of squares of a partition (outliers ignored).
pub fn within_ss(coords: &ndarray::Array2<f64>, labels: &[Option<usize>]) -> f64 {
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let dim = coords.ncols();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            counts[*c] += 1;
            for (s, v) in sums[*c].iter_mut().zip(coords.row(i)) {
                *s += v;
            }
        }
    }
    let mut ss = 0.0;
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            for (j, v) in coords.row(i).iter().enumerate() {
                let d = v - sums[*c][j] / counts[*c] as f64;
                ss += d * d;
            }
        }
    }
    ss
}

/// Fraction of subjects whose cluster maps to their true group under the
/// best one-to-one relabelling. Outliers count as misassigned.
pub fn matched_accuracy(pred: &[Option<usize>], truth: &[usize]) -> Result<f64> {
    let kp = pred.iter().flatten().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let size = kp.max(kt);
    if size > 9 {
        return Err(Error::Validation(format!("{size} groups is too many for exhaustive matching")));
    }
    let mut table = vec![vec![0usize; size]; size];
    for (p, &t) in pred.iter().zip(truth) {
        if let Some(p) = p {
            table[*p][t] += 1;
        }
    }
    let mut perm: Vec<usize> = (0..size).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |perm| {
        best = best.max((0..size).map(|p| table[p][perm[p]]).sum());
    });
    Ok(best as f64 / truth.len() as f64)
}

fn permute(v: &mut Vec<usize>, at: usize, visit: &mut dyn FnMut(&[usize])) {
    if at == v.len() {
        visit(v);
        return;
    }
    for i in at..v.len() {
        v.swap(at, i);
        permute(v, at + 1, visit);
        v.swap(at, i);
    }
}

fn leaf_name(c: &ClusterModel, position: usize) -> String {
    if position < c.k {
        format!("C{position}")
    } else {
        format!("O{}", position - c.k)
    }
}

/// Cluster-level Newick tree. Leaves are the clusters of the cut (`C0`,
/// `C1`, …) and outlier groups (`O0`, …) with a `[size=N]` comment;
/// internal nodes are labelled with their merge cost, and branch lengths
/// are height differences.
pub fn dendrogram_export(c: &ClusterModel) -> String {
    let n = c.n();
    let position: HashMap<usize, usize> = c.cut_nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    fn write_node(c: &ClusterModel, node: usize, position: &HashMap<usize, usize>, n: usize, out: &mut String) {
        if let Some(&p) = position.get(&node) {
            let _ = write!(out, "{}[size={}]", leaf_name(c, p), c.node_size(node));
            return;
        }
        let m = &c.merge_tree[node - n];
        out.push('(');
        for (idx, child) in [m.left, m.right].into_iter().enumerate() {
            if idx > 0 {
                out.push(',');
            }
            write_node(c, child, position, n, out);
            let _ = write!(out, ":{:?}", m.cost - c.node_height(child));
        }
        let _ = write!(out, "){:?}", m.cost);
    }
    let mut out = String::new();
    write_node(c, 2 * n - 2, &position, n, &mut out);
    out.push(';');
    out
}

/// Parses [`dendrogram_export`] output back into cluster-level merges,
/// numbered like [`ClusterModel::cluster_merges`].
pub fn parse_dendrogram(text: &str, k: usize) -> Result<Vec<Merge>> {
    struct Parser<'a> {
        s: &'a [u8],
        at: usize,
        k: usize,
        internal: Vec<(f64, Node, Node, usize)>,
    }
    #[derive(Clone, Copy)]
    enum Node {
        Leaf(usize, usize),
        Internal(usize, usize),
    }
    impl Node {
        fn size(self) -> usize {
            match self {
                Node::Leaf(_, s) | Node::Internal(_, s) => s,
            }
        }
    }
    impl Parser<'_> {
        fn bad(&self, what: &str) -> Error {
            Error::Validation(format!("dendrogram: {what} at byte {}", self.at))
        }
        fn token(&mut self) -> &str {
            let start = self.at;
            while self.at < self.s.len() && !b"(),:;[]".contains(&self.s[self.at]) {
                self.at += 1;
            }
            std::str::from_utf8(&self.s[start..self.at]).unwrap_or("")
        }
        fn expect(&mut self, b: u8) -> Result<()> {
            if self.s.get(self.at) != Some(&b) {
                return Err(self.bad(&format!("expected '{}'", b as char)));
            }
            self.at += 1;
            Ok(())
        }
        fn node(&mut self) -> Result<Node> {
            if self.s.get(self.at) == Some(&b'(') {
                self.at += 1;
                let left = self.node()?;
                self.branch()?;
                self.expect(b',')?;
                let right = self.node()?;
                self.branch()?;
                self.expect(b')')?;
                let height: f64 = self.token().parse().map_err(|_| self.bad("bad height"))?;
                let size = left.size() + right.size();
                self.internal.push((height, left, right, size));
                Ok(Node::Internal(self.internal.len() - 1, size))
            } else {
                let name = self.token().to_string();
                let size_text = {
                    self.expect(b'[')?;
                    let t = self.token().to_string();
                    self.expect(b']')?;
                    t
                };
                let size = size_text
                    .strip_prefix("size=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| self.bad("bad size comment"))?;
                let pos = match (name.get(..1), name.get(1..).and_then(|v| v.parse::<usize>().ok())) {
                    (Some("C"), Some(i)) => i,
                    (Some("O"), Some(i)) => self.k + i,
                    _ => return Err(self.bad(&format!("bad leaf name '{name}'"))),
                };
                Ok(Node::Leaf(pos, size))
            }
        }
        fn branch(&mut self) -> Result<()> {
            self.expect(b':')?;
            self.token().parse::<f64>().map_err(|_| self.bad("bad branch length"))?;
            Ok(())
        }
    }
    let mut p = Parser { s: text.trim().as_bytes(), at: 0, k, internal: Vec::new() };
    let root = p.node()?;
    p.expect(b';')?;
    if p.at != p.s.len() {
        return Err(p.bad("trailing text"));
    }
    let leaves = match root {
        Node::Leaf(..) => return Ok(Vec::new()),
        Node::Internal(_, _) => p.internal.len() + 1,
    };
    let mut order: Vec<usize> = (0..p.internal.len()).collect();
    order.sort_by(|&a, &b| p.internal[a].0.total_cmp(&p.internal[b].0).then(a.cmp(&b)));
    let mut new_id = vec![0; p.internal.len()];
    for (rank, &i) in order.iter().enumerate() {
        new_id[i] = leaves + rank;
    }
    let id = |node: Node| match node {
        Node::Leaf(pos, _) => pos,
        Node::Internal(i, _) => new_id[i],
    };
    Ok(order
        .iter()
        .map(|&i| {
            let (cost, l, r, size) = p.internal[i];
            let (l, r) = (id(l), id(r));
            Merge { left: l.min(r), right: l.max(r), cost, size }
        })
        .collect())
}
