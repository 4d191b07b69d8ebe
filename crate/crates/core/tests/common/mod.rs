//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, ZeroConeT};
use nalgebra::{DMatrix, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mvmatch::affinity::{Detection, DetectionSet, Keypoint, DEFAULT_SCORE_FLOOR};
use mvmatch::evalgen::{GroundTruth, Label};
use mvmatch::geometry::{look_at_camera, project, CameraView};
use mvmatch::matching::{Member, PersonCluster};
use mvmatch::partition::Partition;
use mvmatch::pose3d::{
    joint_proposals, pairwise_log_prior, unary_log_likelihood, HeatmapConfig, HeatmapModel, SkeletonPrior,
};

/// Maximum-weight assignment of rows to columns (Kuhn-Munkres, O(n³)).
///
/// Returns `assignment[row] = Some(col)` and the total weight. Weights are
/// assumed non-negative; a row paired with a zero-weight column is reported
/// unmatched since such a pair adds nothing.
pub fn hungarian_max(weights: &[Vec<f64>]) -> (Vec<Option<usize>>, f64) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // Square cost matrix, 1-based for the classic potentials formulation.
    let cost = |i: usize, j: usize| -> f64 {
        if i <= rows && j <= cols {
            -weights[i - 1][j - 1]
        } else {
            0.0
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols && weights[i - 1][j - 1] > 0.0 {
            assignment[i - 1] = Some(j - 1);
            total += weights[i - 1][j - 1];
        }
    }
    (assignment, total)
}

/// Singular values, descending, from the eigenvalues of the symmetric
/// embedding `[[0, M], [Mᵀ, 0]]`, whose spectrum is `±σ_i` plus zeros.
pub fn singular_values_by_embedding(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut big = DMatrix::zeros(r + c, r + c);
    big.view_mut((0, r), (r, c)).copy_from(m);
    big.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let mut eig: Vec<f64> = SymmetricEigen::new(big).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig.truncate(r.min(c));
    eig.into_iter().map(|x| x.max(0.0)).collect()
}

/// Frobenius-nearest point of the matching constraint set, by a dense QP
/// over all m² entries solved with an interior-point method.
pub fn qp_projection(target: &DMatrix<f64>, partition: &Partition) -> DMatrix<f64> {
    let m = partition.m();
    let n = m * m;
    let idx = |i: usize, j: usize| i * m + j;
    let view = partition.view_labels();

    let (mut ri, mut ci, mut vals) = (Vec::new(), Vec::new(), Vec::new());
    let mut b = Vec::new();
    let mut row = 0;
    let push = |ri: &mut Vec<usize>, ci: &mut Vec<usize>, vals: &mut Vec<f64>, r: usize, c: usize, v: f64| {
        ri.push(r);
        ci.push(c);
        vals.push(v);
    };

    // Equalities: symmetry and identity diagonal blocks.
    for i in 0..m {
        for j in 0..m {
            if view[i] == view[j] {
                push(&mut ri, &mut ci, &mut vals, row, idx(i, j), 1.0);
                b.push(if i == j { 1.0 } else { 0.0 });
                row += 1;
            } else if i < j {
                push(&mut ri, &mut ci, &mut vals, row, idx(i, j), 1.0);
                push(&mut ri, &mut ci, &mut vals, row, idx(j, i), -1.0);
                b.push(0.0);
                row += 1;
            }
        }
    }
    let n_eq = row;

    // Inequalities: 0 ≤ x ≤ 1 and per-block row and column sums ≤ 1.
    for k in 0..n {
        push(&mut ri, &mut ci, &mut vals, row, k, -1.0);
        b.push(0.0);
        row += 1;
        push(&mut ri, &mut ci, &mut vals, row, k, 1.0);
        b.push(1.0);
        row += 1;
    }
    for i in 0..m {
        for w in 0..partition.n_views() {
            if w == view[i] || partition.counts()[w] == 0 {
                continue;
            }
            for j in partition.range(w) {
                push(&mut ri, &mut ci, &mut vals, row, idx(i, j), 1.0);
            }
            b.push(1.0);
            row += 1;
            for j in partition.range(w) {
                push(&mut ri, &mut ci, &mut vals, row, idx(j, i), 1.0);
            }
            b.push(1.0);
            row += 1;
        }
    }
    let n_ineq = row - n_eq;

    let a = CscMatrix::new_from_triplets(row, n, ri, ci, vals);
    let p = CscMatrix::identity(n);
    let q: Vec<f64> = (0..n).map(|k| -target[(k / m, k % m)]).collect();
    let cones = [ZeroConeT(n_eq), NonnegativeConeT(n_ineq)];
    let settings = DefaultSettings {
        verbose: false,
        tol_gap_abs: 1e-12,
        tol_gap_rel: 1e-12,
        tol_feas: 1e-12,
        max_iter: 500,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).expect("valid QP");
    solver.solve();
    assert!(
        matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved),
        "QP oracle failed: {:?}",
        solver.solution.status
    );
    DMatrix::from_fn(m, m, |i, j| solver.solution.x[idx(i, j)])
}

/// Clusters formed from the generator labels, ordered by person.
pub fn truth_clusters(truth: &GroundTruth) -> Vec<PersonCluster> {
    let n = truth.poses3d.len();
    let mut members = vec![Vec::new(); n];
    for (view, labels) in truth.labels.iter().enumerate() {
        for (index, label) in labels.iter().enumerate() {
            if let Label::Person(p) = label {
                members[*p].push(Member { view, index });
            }
        }
    }
    members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| m.len() >= 2)
        .map(|(cluster_id, members)| PersonCluster { cluster_id, members })
        .collect()
}

/// One person seen by a few cameras, on a five-joint tree skeleton.
pub struct ToyInstance {
    pub prior: SkeletonPrior,
    pub cameras: Vec<CameraView>,
    pub views: Vec<DetectionSet>,
    pub cluster: PersonCluster,
    pub truth: Vec<Vector3<f64>>,
}

pub fn toy_prior() -> SkeletonPrior {
    SkeletonPrior::new(5, vec![(0, 1), (1, 2), (2, 3), (1, 4)], vec![0.3, 0.45, 0.4, 0.5], vec![0.03, 0.03, 0.02, 0.04])
        .expect("valid toy skeleton")
}

/// Random toy instance. Bones follow the prior, keypoints get `noise_px`
/// Gaussian noise and one random (view, joint) is shifted by `shift_px`.
pub fn toy_instance(seed: u64, n_views: usize, noise_px: f64, shift_px: f64) -> ToyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = toy_prior();
    let target = Vector3::new(0.0, 0.0, 1.0);
    let cameras: Vec<CameraView> = (0..n_views)
        .map(|v| {
            let a = std::f64::consts::TAU * v as f64 / n_views as f64 + rng.random_range(-0.2..0.2);
            let pos = Vector3::new(5.0 * a.cos(), 5.0 * a.sin(), 2.5);
            look_at_camera(v, 1100.0, (1920, 1080), pos, target).expect("camera")
        })
        .collect();

    let mut truth = vec![Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0); 5];
    for (e, &(a, b)) in prior.edges.iter().enumerate() {
        let len = prior.bone_mean[e] + prior.bone_std[e] * rng.random_range(-1.0..1.0);
        let dir = loop {
            let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if d.norm() > 0.1 && d.norm() <= 1.0 {
                break d.normalize();
            }
        };
        truth[b] = truth[a] + dir * len;
    }

    let noise = Normal::new(0.0, noise_px.max(1e-300)).expect("finite sigma");
    let (bad_view, bad_joint) = (rng.random_range(0..n_views), rng.random_range(0..5));
    let views = cameras
        .iter()
        .enumerate()
        .map(|(v, cam)| {
            let keypoints = truth
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let mut x = project(cam, t).expect("visible");
                    if noise_px > 0.0 {
                        x.x += noise.sample(&mut rng);
                        x.y += noise.sample(&mut rng);
                    }
                    if (v, j) == (bad_view, bad_joint) {
                        x.x += shift_px;
                    }
                    Keypoint { x: x.x, y: x.y, score: 1.0 }
                })
                .collect();
            DetectionSet {
                view_id: v,
                detections: vec![Detection::new(v, 0, [0.0; 4], keypoints, vec![0.0; 4], DEFAULT_SCORE_FLOOR)],
            }
        })
        .collect();
    let cluster =
        PersonCluster { cluster_id: 0, members: (0..n_views).map(|view| Member { view, index: 0 }).collect() };
    ToyInstance { prior, cameras, views, cluster, truth }
}

/// Best objective over every combination of proposals, with its points.
pub fn enumerate_3dps(inst: &ToyInstance) -> (f64, Vec<Vector3<f64>>) {
    let props = joint_proposals(&inst.cluster, &inst.views, &inst.cameras).expect("proposals");
    let maps = HeatmapModel::from_detections(&inst.views, &HeatmapConfig::default()).expect("heatmaps");
    let unary: Vec<Vec<f64>> = props
        .iter()
        .enumerate()
        .map(|(j, ps)| {
            let obs: Vec<_> =
                (0..inst.views.len()).map(|v| (&inst.cameras[v], maps.get(v, 0, j).expect("heatmap"))).collect();
            ps.iter().map(|p| unary_log_likelihood(&p.point, &obs)).collect()
        })
        .collect();
    let sizes: Vec<usize> = props.iter().map(Vec::len).collect();
    let mut choice = vec![0usize; sizes.len()];
    let (mut best, mut best_choice) = (f64::NEG_INFINITY, choice.clone());
    loop {
        let mut obj: f64 = choice.iter().enumerate().map(|(j, &c)| unary[j][c]).sum();
        for (e, &(a, b)) in inst.prior.edges.iter().enumerate() {
            obj += pairwise_log_prior(
                &props[a][choice[a]].point,
                &props[b][choice[b]].point,
                inst.prior.bone_mean[e],
                inst.prior.bone_std[e],
            );
        }
        if obj > best {
            best = obj;
            best_choice = choice.clone();
        }
        // Odometer increment.
        let mut k = 0;
        while k < choice.len() {
            choice[k] += 1;
            if choice[k] < sizes[k] {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
        if k == choice.len() {
            break;
        }
    }
    (best, best_choice.iter().enumerate().map(|(j, &c)| props[j][c].point).collect())
}
