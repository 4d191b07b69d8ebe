//! Cycle-consistent multi-way matching.
//!
//! The stacked correspondence matrix `P` over all detections is relaxed to
//! the convex set of symmetric matrices with identity diagonal blocks,
//! entries in `[0, 1]` and sub-stochastic cross-view blocks. The objective
//! `-<A, P> + λ‖P‖*` is minimized by ADMM, alternating singular value
//! thresholding with an exact projection onto the constraint set. The
//! relaxed solution is then thresholded at 0.5 and repaired into a set of
//! cliques, one per person.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::AffinityMatrix;
use crate::partition::Partition;

/// Dykstra stops once a sweep moves the iterate less than this (Frobenius).
pub const PROJECTION_TOL: f64 = 1e-9;
pub const PROJECTION_MAX_SWEEPS: usize = 200;

/// Largest problem the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("component {0} holds two detections from view {1}")]
    InconsistentComponent(usize, usize),
    #[error("exhaustive matching supports at most {BRUTE_FORCE_MAX} detections, got {0}")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Nuclear-norm weight. `None` picks `50 / mean detections per view`.
    pub lambda: Option<f64>,
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { lambda: None, rho: 1.0, tol: 1e-4, max_iter: 500 }
    }
}

impl SolverConfig {
    pub fn lambda_for(&self, partition: &Partition) -> f64 {
        self.lambda.unwrap_or_else(|| {
            let mean = partition.mean_count();
            if mean > 0.0 {
                50.0 / mean
            } else {
                50.0
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct MatchProblem {
    pub affinity: AffinityMatrix,
    pub lambda: f64,
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl MatchProblem {
    pub fn new(affinity: AffinityMatrix, cfg: &SolverConfig) -> Result<Self, MatchError> {
        let lambda = cfg.lambda_for(affinity.partition());
        let problem = Self { affinity, lambda, rho: cfg.rho, tol: cfg.tol, max_iter: cfg.max_iter };
        problem.validate()?;
        Ok(problem)
    }

    fn validate(&self) -> Result<(), MatchError> {
        for (name, v) in [("lambda", self.lambda), ("rho", self.rho), ("tol", self.tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MatchError::InvalidProblem(format!("{name} must be positive, got {v}")));
            }
        }
        let m = self.affinity.m();
        let values = self.affinity.values();
        if values.nrows() != m || values.ncols() != m {
            return Err(MatchError::InvalidProblem("partition does not match affinity size".into()));
        }
        Ok(())
    }
}

/// Solver output: relaxed and binary correspondence matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub relaxed: DMatrix<f64>,
    pub quantized: DMatrix<bool>,
    pub partition: Partition,
    pub iterations: usize,
    pub converged: bool,
    /// Combined ADMM residual after each iteration.
    pub residuals: Vec<f64>,
}

impl MatchMatrix {
    fn trivial(partition: &Partition) -> Self {
        let m = partition.m();
        Self {
            relaxed: DMatrix::identity(m, m),
            quantized: DMatrix::from_fn(m, m, |i, j| i == j),
            partition: partition.clone(),
            iterations: 0,
            converged: true,
            residuals: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Member {
    pub view: usize,
    pub index: usize,
}

/// Detections attributed to one person, at most one per view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonCluster {
    pub cluster_id: usize,
    pub members: Vec<Member>,
}

impl PersonCluster {
    pub fn member_in(&self, view: usize) -> Option<&Member> {
        self.members.iter().find(|m| m.view == view)
    }
}

/// Singular value soft-thresholding `U max(Σ - τ, 0) Vᵀ`.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    if m.is_empty() {
        return m.clone();
    }
    let mut svd = m.clone().svd(true, true);
    svd.singular_values.apply(|s| *s = (*s - tau).max(0.0));
    svd.recompose().expect("U and Vᵀ were requested")
}

/// [`svt`] for a symmetric matrix, through its eigendecomposition.
///
/// Singular values of a symmetric matrix are `|λ|` with singular vectors
/// `w` and `sign(λ) w`, so thresholding shrinks each eigenvalue toward
/// zero by `tau`. The result is exactly symmetric. Only the lower triangle
/// of `m` is read.
pub fn svt_symmetric(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    if m.is_empty() {
        return m.clone();
    }
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        let shrunk = l.signum() * (l.abs() - tau).max(0.0);
        if shrunk != 0.0 {
            let w = eig.eigenvectors.column(k);
            out.syger(shrunk, &w, &w, 1.0);
        }
    }
    out.fill_upper_triangle_with_lower_triangle();
    out
}

/// Euclidean projection of `v` onto `{0 <= x <= 1, Σx <= 1}`.
///
/// `knots` is scratch space, reused across calls.
fn project_capped_simplex(v: &mut [f64], knots: &mut Vec<f64>) {
    let clipped_sum: f64 = v.iter().map(|x| x.clamp(0.0, 1.0)).sum();
    if clipped_sum <= 1.0 {
        v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        return;
    }
    // g(θ) = Σ clip(v - θ, 0, 1) is piecewise linear and non-increasing with
    // kinks at v_k - 1 and v_k; find the segment where it crosses 1.
    let g = |theta: f64| v.iter().map(|x| (x - theta).clamp(0.0, 1.0)).sum::<f64>();
    knots.clear();
    knots.extend(v.iter().flat_map(|&x| [x - 1.0, x]).filter(|&k| k > 0.0));
    knots.sort_by(f64::total_cmp);
    let (mut lo, mut g_lo) = (0.0, clipped_sum);
    let mut theta = lo;
    for &k in knots.iter() {
        let g_k = g(k);
        if g_k <= 1.0 {
            theta = if g_lo > g_k { lo + (g_lo - 1.0) * (k - lo) / (g_lo - g_k) } else { k };
            break;
        }
        lo = k;
        g_lo = g_k;
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).clamp(0.0, 1.0));
}

/// Result of projecting one cross-view block.
struct BlockProjection {
    block: DMatrix<f64>,
    sweeps: usize,
    converged: bool,
}

/// Dykstra's alternating projections onto `[0,1]` entries with row sums
/// `<= 1` and `[0,1]` entries with column sums `<= 1`.
fn project_block(target: DMatrix<f64>) -> BlockProjection {
    let (rows, cols) = target.shape();
    let mut x = target;
    // Dykstra increments for the row set and the column set.
    let mut p = DMatrix::<f64>::zeros(rows, cols);
    let mut q = DMatrix::<f64>::zeros(rows, cols);
    let mut y = DMatrix::<f64>::zeros(rows, cols);
    let mut row_buf = vec![0.0; cols];
    let mut row_sum = vec![0.0; cols];
    let mut col_buf = vec![0.0; rows];
    let mut col_sum = vec![0.0; rows];
    let mut knots = Vec::with_capacity(2 * rows.max(cols));
    for sweep in 1..=PROJECTION_MAX_SWEEPS {
        // y = P_rows(x + p); p = (x + p) - y
        for r in 0..rows {
            for c in 0..cols {
                row_sum[c] = x[(r, c)] + p[(r, c)];
                row_buf[c] = row_sum[c];
            }
            project_capped_simplex(&mut row_buf, &mut knots);
            for c in 0..cols {
                y[(r, c)] = row_buf[c];
                p[(r, c)] = row_sum[c] - row_buf[c];
            }
        }
        // x' = P_cols(y + q); q = (y + q) - x'
        let mut moved = 0.0;
        for c in 0..cols {
            for r in 0..rows {
                col_sum[r] = y[(r, c)] + q[(r, c)];
                col_buf[r] = col_sum[r];
            }
            project_capped_simplex(&mut col_buf, &mut knots);
            for r in 0..rows {
                q[(r, c)] = col_sum[r] - col_buf[r];
                let d = col_buf[r] - x[(r, c)];
                moved += d * d;
                x[(r, c)] = col_buf[r];
            }
        }
        if moved.sqrt() < PROJECTION_TOL {
            return BlockProjection { block: x, sweeps: sweep, converged: true };
        }
    }
    BlockProjection { block: x, sweeps: PROJECTION_MAX_SWEEPS, converged: false }
}

/// Projection output with Dykstra diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedProjection {
    pub matrix: DMatrix<f64>,
    /// Largest sweep count over all cross-view blocks.
    pub sweeps: usize,
    pub converged: bool,
}

/// Frobenius-nearest point of the matching constraint set.
///
/// The symmetry and identity-diagonal constraints are affine and every
/// other constraint is invariant under transposition, so the projection
/// decouples: each cross-view block pair is averaged with its mirror and
/// the average is projected onto the sub-stochastic box polytope by Dykstra.
pub fn project_constraints_with_stats(m: &DMatrix<f64>, partition: &Partition) -> ConstrainedProjection {
    let n = partition.m();
    assert_eq!(m.shape(), (n, n), "matrix does not match partition");
    let mut out = DMatrix::<f64>::zeros(n, n);
    let mut sweeps = 0;
    let mut converged = true;
    for vi in 0..partition.n_views() {
        let ri = partition.range(vi);
        for k in ri.clone() {
            out[(k, k)] = 1.0;
        }
        for vj in vi + 1..partition.n_views() {
            let rj = partition.range(vj);
            if ri.is_empty() || rj.is_empty() {
                continue;
            }
            let upper = m.view((ri.start, rj.start), (ri.len(), rj.len()));
            let lower = m.view((rj.start, ri.start), (rj.len(), ri.len()));
            let target = (upper + lower.transpose()) * 0.5;
            let proj = project_block(target);
            sweeps = sweeps.max(proj.sweeps);
            converged &= proj.converged;
            out.view_mut((ri.start, rj.start), (ri.len(), rj.len())).copy_from(&proj.block);
            out.view_mut((rj.start, ri.start), (rj.len(), ri.len())).copy_from(&proj.block.transpose());
        }
    }
    ConstrainedProjection { matrix: out, sweeps, converged }
}

pub fn project_constraints(m: &DMatrix<f64>, partition: &Partition) -> DMatrix<f64> {
    project_constraints_with_stats(m, partition).matrix
}

/// Largest violation of any constraint of the relaxed set.
pub fn constraint_violation(p: &DMatrix<f64>, partition: &Partition) -> f64 {
    let n = partition.m();
    let mut worst = 0.0f64;
    let views = partition.view_labels();
    for i in 0..n {
        for j in 0..n {
            let v = p[(i, j)];
            worst = worst.max((v - p[(j, i)]).abs());
            if views[i] == views[j] {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - expect).abs());
            } else {
                worst = worst.max(-v).max(v - 1.0);
            }
        }
    }
    for vi in 0..partition.n_views() {
        for vj in 0..partition.n_views() {
            if vi == vj {
                continue;
            }
            let (ri, rj) = (partition.range(vi), partition.range(vj));
            for r in ri.clone() {
                let s: f64 = rj.clone().map(|c| p[(r, c)]).sum();
                worst = worst.max(s - 1.0).max(-s);
            }
        }
    }
    worst
}

/// Runs ADMM on the relaxed program and quantizes the result.
pub fn solve(problem: &MatchProblem) -> Result<MatchMatrix, MatchError> {
    problem.validate()?;
    let partition = problem.affinity.partition();
    let m = partition.m();
    let populated = partition.counts().iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Ok(MatchMatrix::trivial(partition));
    }

    let a = problem.affinity.values();
    let rho = problem.rho;
    let tau = problem.lambda / rho;
    let mut p = DMatrix::<f64>::identity(m, m);
    let mut y = DMatrix::<f64>::zeros(m, m);
    let mut q_prev = p.clone();
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=problem.max_iter {
        iterations = k;
        let q = svt_symmetric(&(&y / rho + &p), tau);
        p = project_constraints(&(&q - (&y - a) / rho), partition);
        y += (&p - &q) * rho;
        let primal = (&p - &q).norm();
        let dual = rho * (&q - &q_prev).norm();
        let residual = primal.max(dual) / m as f64;
        residuals.push(residual);
        q_prev = q;
        if residual < problem.tol {
            converged = true;
            break;
        }
    }

    let quantized = quantize(&p, a, partition);
    Ok(MatchMatrix { relaxed: p, quantized, partition: partition.clone(), iterations, converged, residuals })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller index becomes the root so components are labeled stably.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components (as sorted global indices) of an undirected edge list.
fn components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = uf.find(i);
        by_root[r].push(i);
    }
    by_root.into_iter().filter(|c| !c.is_empty()).collect()
}

/// Thresholds the relaxed matrix at 0.5 and repairs it into disjoint cliques.
///
/// Within each cross-view block, matches are kept greedily in decreasing
/// relaxed value so that blocks are partial permutations. Then, while some
/// connected component is not a clique, its lowest-affinity edge is dropped.
fn quantize(relaxed: &DMatrix<f64>, affinity: &DMatrix<f64>, partition: &Partition) -> DMatrix<bool> {
    let m = partition.m();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for vi in 0..partition.n_views() {
        for vj in vi + 1..partition.n_views() {
            let (ri, rj) = (partition.range(vi), partition.range(vj));
            let mut cands: Vec<(usize, usize)> = ri
                .clone()
                .flat_map(|r| rj.clone().map(move |c| (r, c)))
                .filter(|&(r, c)| relaxed[(r, c)] > 0.5)
                .collect();
            cands.sort_by(|x, y| relaxed[*y].total_cmp(&relaxed[*x]).then(x.cmp(y)));
            let mut row_used = vec![false; m];
            let mut col_used = vec![false; m];
            for (r, c) in cands {
                if !row_used[r] && !col_used[c] {
                    row_used[r] = true;
                    col_used[c] = true;
                    edges.push((r, c));
                }
            }
        }
    }

    loop {
        let mut adjacency = DMatrix::<bool>::from_element(m, m, false);
        for &(a, b) in &edges {
            adjacency[(a, b)] = true;
            adjacency[(b, a)] = true;
        }
        let broken = components(m, &edges)
            .into_iter()
            .find(|comp| comp.iter().enumerate().any(|(k, &a)| comp[k + 1..].iter().any(|&b| !adjacency[(a, b)])));
        let Some(comp) = broken else {
            break;
        };
        let weakest = edges
            .iter()
            .enumerate()
            .filter(|(_, (a, _))| comp.binary_search(a).is_ok())
            .min_by(|(_, x), (_, y)| {
                affinity[**x].total_cmp(&affinity[**y]).then(relaxed[**x].total_cmp(&relaxed[**y])).then(y.cmp(x))
            })
            .map(|(k, _)| k)
            .expect("a non-clique component has at least one edge");
        edges.remove(weakest);
    }

    let mut out = DMatrix::from_fn(m, m, |i, j| i == j);
    for (a, b) in edges {
        out[(a, b)] = true;
        out[(b, a)] = true;
    }
    out
}

/// Persons from a binary match matrix: connected components with at
/// least two members, ordered by their smallest `(view, index)`.
pub fn extract_clusters(quantized: &DMatrix<bool>, partition: &Partition) -> Result<Vec<PersonCluster>, MatchError> {
    let m = partition.m();
    if quantized.shape() != (m, m) {
        return Err(MatchError::InvalidProblem("match matrix does not match partition".into()));
    }
    let views = partition.view_labels();
    let mut edges = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if views[i] != views[j] && (quantized[(i, j)] || quantized[(j, i)]) {
                edges.push((i, j));
            }
        }
    }
    let mut clusters = Vec::new();
    for comp in components(m, &edges) {
        if comp.len() < 2 {
            continue;
        }
        let cluster_id = clusters.len();
        let mut seen = vec![false; partition.n_views()];
        let mut members = Vec::with_capacity(comp.len());
        for g in comp {
            let (view, index) = partition.locate(g);
            if std::mem::replace(&mut seen[view], true) {
                return Err(MatchError::InconsistentComponent(cluster_id, view));
            }
            members.push(Member { view, index });
        }
        members.sort();
        clusters.push(PersonCluster { cluster_id, members });
    }
    clusters.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    for (k, c) in clusters.iter_mut().enumerate() {
        c.cluster_id = k;
    }
    Ok(clusters)
}

/// Number of ordered triples `(a, b, c)` in three distinct views with
/// `a~b`, `b~c` but not `a~c`.
pub fn transitivity_violations(quantized: &DMatrix<bool>, partition: &Partition) -> usize {
    let m = partition.m();
    let views = partition.view_labels();
    let mut count = 0;
    for a in 0..m {
        for b in 0..m {
            if views[a] == views[b] || !quantized[(a, b)] {
                continue;
            }
            for c in 0..m {
                if views[c] == views[a] || views[c] == views[b] {
                    continue;
                }
                if quantized[(b, c)] && !quantized[(a, c)] {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Objective `Σ_{i≠j} <A_ij, P_ij>` of a binary match matrix.
pub fn matching_objective(affinity: &AffinityMatrix, quantized: &DMatrix<bool>) -> f64 {
    let a = affinity.values();
    let views = affinity.partition().view_labels();
    let m = affinity.m();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if views[i] != views[j] && quantized[(i, j)] {
                total += a[(i, j)];
            }
        }
    }
    total
}

struct Search<'a> {
    a: &'a DMatrix<f64>,
    views: Vec<usize>,
    groups: Vec<Vec<usize>>,
    assignment: Vec<usize>,
    best_score: f64,
    best_groups: usize,
    best: Vec<usize>,
}

impl Search<'_> {
    fn better(&self, score: f64, groups: usize) -> bool {
        match score.partial_cmp(&self.best_score) {
            _ if (score - self.best_score).abs() <= 1e-12 => groups > self.best_groups,
            Some(Ordering::Greater) => true,
            _ => false,
        }
    }

    fn recurse(&mut self, g: usize, score: f64) {
        if g == self.views.len() {
            if self.better(score, self.groups.len()) {
                self.best_score = score;
                self.best_groups = self.groups.len();
                self.best = self.assignment.clone();
            }
            return;
        }
        let view = self.views[g];
        for k in 0..self.groups.len() {
            if self.groups[k].iter().any(|&h| self.views[h] == view) {
                continue;
            }
            let gain: f64 = self.groups[k].iter().map(|&h| 2.0 * self.a[(g, h)]).sum();
            self.groups[k].push(g);
            self.assignment[g] = k;
            self.recurse(g + 1, score + gain);
            self.groups[k].pop();
        }
        self.groups.push(vec![g]);
        self.assignment[g] = self.groups.len() - 1;
        self.recurse(g + 1, score);
        self.groups.pop();
    }
}

/// Exhaustive maximizer of `Σ <A_ij, P_ij>` over cycle-consistent matchings.
///
/// Enumerates every partition of the detections into persons with at most
/// one detection per view. Among equal objectives the partition with more
/// persons wins, so zero-affinity merges never happen.
pub fn brute_force_consistent_match(affinity: &AffinityMatrix) -> Result<MatchMatrix, MatchError> {
    let partition = affinity.partition();
    let m = partition.m();
    if m > BRUTE_FORCE_MAX {
        return Err(MatchError::TooLarge(m));
    }
    let mut search = Search {
        a: affinity.values(),
        views: partition.view_labels(),
        groups: Vec::new(),
        assignment: vec![0; m],
        best_score: f64::NEG_INFINITY,
        best_groups: 0,
        best: (0..m).collect(),
    };
    search.recurse(0, 0.0);
    let best = search.best;
    let quantized = DMatrix::from_fn(m, m, |i, j| best[i] == best[j]);
    Ok(MatchMatrix {
        relaxed: quantized.map(|b| if b { 1.0 } else { 0.0 }),
        quantized,
        partition: partition.clone(),
        iterations: 0,
        converged: true,
        residuals: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn affinity(values: DMatrix<f64>, counts: Vec<usize>) -> AffinityMatrix {
        AffinityMatrix::from_values(values, Partition::new(counts)).unwrap()
    }

    #[test]
    fn svt_zero_threshold_reconstructs() {
        let m = dmatrix![1.0, 2.0, -0.5; 0.3, -4.0, 2.0; 7.0, 0.0, 1.5];
        assert!((svt(&m, 0.0) - &m).norm() < 1e-10);
    }

    #[test]
    fn svt_diagonal() {
        let m = dmatrix![3.0, 0.0; 0.0, 1.0];
        let out = svt(&m, 2.0);
        assert_relative_eq!(out, dmatrix![1.0, 0.0; 0.0, 0.0], epsilon = 1e-12);
    }

    #[test]
    fn capped_simplex_cases() {
        let mut v = [0.2, 0.3];
        project_capped_simplex(&mut v, &mut Vec::new());
        assert_eq!(v, [0.2, 0.3]);
        let mut v = [2.0, 0.5, -1.0];
        project_capped_simplex(&mut v, &mut Vec::new());
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(v[1], 0.0, epsilon = 1e-15);
        let mut v = [0.9, 0.9];
        project_capped_simplex(&mut v, &mut Vec::new());
        assert_relative_eq!(v[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(v[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn projection_fixed_point() {
        let part = Partition::new(vec![2, 2]);
        let m = dmatrix![
            1.0, 0.0, 0.7, 0.2;
            0.0, 1.0, 0.1, 0.6;
            0.7, 0.1, 1.0, 0.0;
            0.2, 0.6, 0.0, 1.0
        ];
        assert!((project_constraints(&m, &part) - &m).norm() < 1e-9);
    }

    #[test]
    fn single_view_is_identity() {
        let a = affinity(DMatrix::zeros(3, 3), vec![3]);
        let out = solve(&MatchProblem::new(a, &SolverConfig::default()).unwrap()).unwrap();
        assert_eq!(out.quantized, DMatrix::from_fn(3, 3, |i, j| i == j));
        assert!(extract_clusters(&out.quantized, &out.partition).unwrap().is_empty());
    }

    #[test]
    fn empty_problem() {
        let a = affinity(DMatrix::zeros(0, 0), vec![0, 0]);
        let out = solve(&MatchProblem::new(a, &SolverConfig::default()).unwrap()).unwrap();
        assert_eq!(out.quantized.len(), 0);
    }

    #[test]
    fn invalid_parameters() {
        let a = affinity(DMatrix::zeros(2, 2), vec![1, 1]);
        let cfg = SolverConfig { rho: 0.0, ..Default::default() };
        assert!(matches!(MatchProblem::new(a, &cfg), Err(MatchError::InvalidProblem(_))));
    }

    #[test]
    fn two_views_two_people() {
        let a = affinity(
            dmatrix![
                0.0, 0.0, 0.9, 0.1;
                0.0, 0.0, 0.1, 0.9;
                0.9, 0.1, 0.0, 0.0;
                0.1, 0.9, 0.0, 0.0
            ],
            vec![2, 2],
        );
        let out = solve(&MatchProblem::new(a, &SolverConfig::default()).unwrap()).unwrap();
        assert!(out.converged);
        let clusters = extract_clusters(&out.quantized, &out.partition).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].members, vec![Member { view: 0, index: 0 }, Member { view: 1, index: 0 }]);
        assert_eq!(clusters[1].members, vec![Member { view: 0, index: 1 }, Member { view: 1, index: 1 }]);
    }

    #[test]
    fn extract_rejects_same_view_component() {
        let part = Partition::new(vec![2, 1]);
        let mut q = DMatrix::from_fn(3, 3, |i, j| i == j);
        for (a, b) in [(0, 2), (1, 2)] {
            q[(a, b)] = true;
            q[(b, a)] = true;
        }
        assert_eq!(extract_clusters(&q, &part), Err(MatchError::InconsistentComponent(0, 0)));
    }

    #[test]
    fn repair_breaks_open_chains() {
        // Relaxed matrix that thresholds to the chain 0-1-2 without 0-2.
        let part = Partition::new(vec![1, 1, 1]);
        let relaxed = dmatrix![
            1.0, 0.9, 0.2;
            0.9, 1.0, 0.8;
            0.2, 0.8, 1.0
        ];
        let a = dmatrix![
            0.0, 0.9, 0.2;
            0.9, 0.0, 0.7;
            0.2, 0.7, 0.0
        ];
        let q = quantize(&relaxed, &a, &part);
        assert!(q[(0, 1)] && !q[(1, 2)] && !q[(0, 2)]);
        assert_eq!(transitivity_violations(&q, &part), 0);
    }

    #[test]
    fn repair_keeps_block_partial_permutation() {
        let part = Partition::new(vec![2, 1]);
        let relaxed = dmatrix![
            1.0, 0.0, 0.8;
            0.0, 1.0, 0.7;
            0.8, 0.7, 1.0
        ];
        let q = quantize(&relaxed, &DMatrix::zeros(3, 3), &part);
        assert!(q[(0, 2)] && !q[(1, 2)]);
    }

    #[test]
    fn quantize_tie_is_unmatched() {
        let part = Partition::new(vec![1, 1]);
        let relaxed = dmatrix![1.0, 0.5; 0.5, 1.0];
        let q = quantize(&relaxed, &dmatrix![0.0, 0.9; 0.9, 0.0], &part);
        assert!(!q[(0, 1)]);
    }

    #[test]
    fn brute_force_small() {
        let a = affinity(dmatrix![0.0, 0.9; 0.9, 0.0], vec![1, 1]);
        let out = brute_force_consistent_match(&a).unwrap();
        assert!(out.quantized[(0, 1)]);
        let big = AffinityMatrix::from_values(DMatrix::zeros(13, 13), Partition::new(vec![13])).unwrap();
        assert_eq!(brute_force_consistent_match(&big), Err(MatchError::TooLarge(13)));
    }

    #[test]
    fn brute_force_skips_zero_merges() {
        let a = affinity(DMatrix::zeros(2, 2), vec![1, 1]);
        let out = brute_force_consistent_match(&a).unwrap();
        assert!(!out.quantized[(0, 1)]);
    }

    proptest! {
        #[test]
        fn projection_is_feasible(vals in proptest::collection::vec(-1.5f64..2.5, 49)) {
            let part = Partition::new(vec![3, 2, 2]);
            let m = DMatrix::from_vec(7, 7, vals);
            let out = project_constraints_with_stats(&m, &part);
            prop_assert!(out.converged);
            prop_assert!(constraint_violation(&out.matrix, &part) < 1e-6);
            // Projection is idempotent.
            let again = project_constraints(&out.matrix, &part);
            prop_assert!((again - &out.matrix).norm() < 1e-7);
        }
    }
}
