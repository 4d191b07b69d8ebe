mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvmatch::affinity::{build_affinity, AffinityConfig, AffinityMatrix};
use mvmatch::evalgen::{generate, Label, SceneConfig};
use mvmatch::matching::{
    brute_force_consistent_match, constraint_violation, extract_clusters, matching_objective, project_constraints,
    solve, svt, svt_symmetric, transitivity_violations, MatchMatrix, MatchProblem, Member, SolverConfig,
};
use mvmatch::partition::Partition;

use common::{hungarian_max, qp_projection, singular_values_by_embedding};

fn affinity_from_blocks(counts: &[usize], blocks: &[((usize, usize), Vec<Vec<f64>>)]) -> AffinityMatrix {
    let partition = Partition::new(counts.to_vec());
    let mut values = DMatrix::zeros(partition.m(), partition.m());
    for ((vi, vj), block) in blocks {
        for (a, row) in block.iter().enumerate() {
            for (b, &x) in row.iter().enumerate() {
                let (gi, gj) = (partition.global(*vi, a), partition.global(*vj, b));
                values[(gi, gj)] = x;
                values[(gj, gi)] = x;
            }
        }
    }
    AffinityMatrix::from_values(values, partition).unwrap()
}

fn solve_default(a: &AffinityMatrix) -> MatchMatrix {
    solve(&MatchProblem::new(a.clone(), &SolverConfig::default()).unwrap()).unwrap()
}

fn block_matches(m: &MatchMatrix, vi: usize, vj: usize) -> Vec<Option<usize>> {
    let p = &m.partition;
    p.range(vi).map(|gi| p.range(vj).position(|gj| m.quantized[(gi, gj)])).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn svt_matches_embedding_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 5, 8, 13] {
        let m = random_matrix(&mut rng, n, n);
        let tau = rng.random_range(0.0..1.5);
        let expected: Vec<f64> = singular_values_by_embedding(&m).iter().map(|s| (s - tau).max(0.0)).collect();
        let got = singular_values_by_embedding(&svt(&m, tau));
        for (e, g) in expected.iter().zip(&got) {
            assert!((e - g).abs() < 1e-9, "n={n}: {e} vs {g}");
        }
    }
}

#[test]
fn symmetric_svt_agrees_with_general_svt() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [1, 3, 7, 19, 24] {
        let r = random_matrix(&mut rng, n, n);
        let m = (&r + r.transpose()) * 0.5;
        let tau = rng.random_range(0.0..1.5);
        let sym = svt_symmetric(&m, tau);
        assert_eq!(sym, sym.transpose());
        assert!((&sym - svt(&m, tau)).amax() < 1e-10, "n={n}");
        let expected: Vec<f64> = singular_values_by_embedding(&m).iter().map(|s| (s - tau).max(0.0)).collect();
        for (e, g) in expected.iter().zip(&singular_values_by_embedding(&sym)) {
            assert!((e - g).abs() < 1e-9, "n={n}: {e} vs {g}");
        }
    }
}

#[test]
fn projection_matches_qp_oracle_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for counts in [vec![2, 2], vec![1, 3], vec![2, 1, 1]] {
        let partition = Partition::new(counts);
        for _ in 0..5 {
            let m = partition.m();
            let target = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..1.5));
            let ours = project_constraints(&target, &partition);
            let oracle = qp_projection(&target, &partition);
            assert!((ours - oracle).norm() < 1e-4);
        }
    }
}

#[test]
fn two_by_two_block_agrees_with_hungarian() {
    let block = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
    let a = affinity_from_blocks(&[2, 2], &[((0, 1), block.clone())]);
    let result = solve_default(&a);
    let (expected, _) = hungarian_max(&block);
    assert_eq!(block_matches(&result, 0, 1), expected);
    assert_eq!(expected, vec![Some(0), Some(1)]);
}

/// Affinity blocks around a hidden permutation: true pairs in [0.6, 1], others in [0, 0.4].
fn planted_block(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<usize> = (0..c).collect();
    use rand::seq::SliceRandom;
    cols.shuffle(rng);
    (0..r)
        .map(|i| {
            (0..c)
                .map(|j| if i < c && cols[i] == j { rng.random_range(0.6..1.0) } else { rng.random_range(0.0..0.4) })
                .collect()
        })
        .collect()
}

#[test]
fn two_view_solver_agrees_with_hungarian() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let block = planted_block(&mut rng, r, c);
        let a = affinity_from_blocks(&[r, c], &[((0, 1), block.clone())]);
        let (expected, _) = hungarian_max(&block);
        assert_eq!(block_matches(&solve_default(&a), 0, 1), expected, "{block:?}");
    }
}

#[test]
fn brute_force_agrees_with_hungarian_on_two_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let block: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0.01..1.0)).collect()).collect();
        let a = affinity_from_blocks(&[r, c], &[((0, 1), block.clone())]);
        let brute = brute_force_consistent_match(&a).unwrap();
        let (_, best) = hungarian_max(&block);
        let got = matching_objective(&a, &brute.quantized) / 2.0;
        assert!((got - best).abs() < 1e-9, "{got} vs {best}");
    }
}

fn three_view_case(b12: [[f64; 2]; 2], b23: [[f64; 2]; 2], b13: [[f64; 2]; 2]) -> AffinityMatrix {
    let v = |b: [[f64; 2]; 2]| b.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    affinity_from_blocks(&[2, 2, 2], &[((0, 1), v(b12)), ((1, 2), v(b23)), ((0, 2), v(b13))])
}

#[test]
fn three_views_with_conflicting_pairwise_preferences() {
    let swap = [[0.3, 0.7], [0.7, 0.3]];
    let ident = [[0.8, 0.2], [0.2, 0.8]];
    let weak_swap = [[0.45, 0.55], [0.55, 0.45]];
    for a in [three_view_case(swap, swap, ident), three_view_case(ident, weak_swap, ident)] {
        let ours = solve_default(&a);
        assert_eq!(transitivity_violations(&ours.quantized, &ours.partition), 0);
        let brute = brute_force_consistent_match(&a).unwrap();
        let c_ours = extract_clusters(&ours.quantized, &ours.partition).unwrap();
        let c_brute = extract_clusters(&brute.quantized, &brute.partition).unwrap();
        assert_eq!(c_ours, c_brute);
    }
}

/// Every pair prefers the swap, which no consistent matching can honour.
/// The relaxation splits evenly and the greedy repair keeps a consistent
/// subset; it need not reach the enumerated optimum.
#[test]
fn frustrated_triangle_stays_consistent() {
    let swap = [[0.3, 0.7], [0.7, 0.3]];
    let a = three_view_case(swap, swap, swap);
    let ours = solve_default(&a);
    assert_eq!(transitivity_violations(&ours.quantized, &ours.partition), 0);
    let brute = brute_force_consistent_match(&a).unwrap();
    assert!(matching_objective(&a, &ours.quantized) <= matching_objective(&a, &brute.quantized) + 1e-12);
}

/// A random consistent matching: shuffle detections into at most `m` persons.
fn random_consistent(rng: &mut ChaCha8Rng, partition: &Partition) -> DMatrix<bool> {
    let m = partition.m();
    let views = partition.view_labels();
    let mut person = vec![usize::MAX; m];
    for g in 0..m {
        loop {
            let p = rng.random_range(0..m);
            if (0..g).all(|h| person[h] != p || views[h] != views[g]) {
                person[g] = p;
                break;
            }
        }
    }
    DMatrix::from_fn(m, m, |i, j| person[i] == person[j])
}

#[test]
fn brute_force_beats_sampled_consistent_matchings() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let partition = Partition::new(vec![3, 3, 3]);
    for _ in 0..100 {
        let m = partition.m();
        let mut values = DMatrix::from_fn(m, m, |_, _| rng.random_range(0.0..1.0));
        values = (&values + values.transpose()) / 2.0;
        let a = AffinityMatrix::from_values(values, partition.clone()).unwrap();
        let best = matching_objective(&a, &brute_force_consistent_match(&a).unwrap().quantized);
        for _ in 0..50 {
            let sample = random_consistent(&mut rng, &partition);
            assert!(transitivity_violations(&sample, &partition) == 0);
            assert!(best >= matching_objective(&a, &sample) - 1e-12);
        }
    }
}

#[test]
fn perfect_three_view_scene_yields_two_full_clusters() {
    for seed in 0..10 {
        let scene = generate(&SceneConfig { n_people: 2, n_views: 3, rng_seed: seed, ..Default::default() }).unwrap();
        let a = build_affinity(&scene.detections, &scene.truth.cameras, &AffinityConfig::default()).unwrap();
        let r = solve_default(&a);
        let clusters = extract_clusters(&r.quantized, &r.partition).unwrap();
        assert_eq!(clusters.len(), 2);
        for c in &clusters {
            assert_eq!(c.members.len(), 3);
            let labels: Vec<Label> = c.members.iter().map(|m| scene.truth.labels[m.view][m.index]).collect();
            assert!(labels.windows(2).all(|w| w[0] == w[1]));
        }
    }
}

#[test]
fn an_unmatched_false_detection_joins_no_cluster() {
    let mut checked = 0;
    for seed in 0..200 {
        let cfg = SceneConfig { n_people: 2, n_views: 3, false_rate: 0.5, rng_seed: seed, ..Default::default() };
        let scene = generate(&cfg).unwrap();
        if scene.truth.n_false() != 1 {
            continue;
        }
        let a = build_affinity(&scene.detections, &scene.truth.cameras, &AffinityConfig::default()).unwrap();
        let r = solve_default(&a);
        let clusters = extract_clusters(&r.quantized, &r.partition).unwrap();
        for (v, labels) in scene.truth.labels.iter().enumerate() {
            for (k, l) in labels.iter().enumerate() {
                if *l == Label::FalsePositive {
                    assert!(clusters.iter().all(|c| !c.members.contains(&Member { view: v, index: k })));
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 30, "{checked}");
}

#[test]
fn residual_trend_decreases_on_scenes() {
    for seed in 0..20 {
        let cfg = SceneConfig { n_people: 4, n_views: 4, keypoint_noise_px: 3.0, rng_seed: seed, ..Default::default() };
        let scene = generate(&cfg).unwrap();
        let a = build_affinity(&scene.detections, &scene.truth.cameras, &AffinityConfig::default()).unwrap();
        let r = solve_default(&a);
        assert!(r.converged);
        let res = &r.residuals;
        let mut k = 1;
        while 10 * k <= res.len() {
            assert!(
                res[10 * k - 1] < res[k - 1],
                "seed {seed}: r[{}] = {} vs r[{k}] = {}",
                10 * k,
                res[10 * k - 1],
                res[k - 1]
            );
            k += 1;
        }
    }
}

#[test]
fn solving_twice_is_bit_identical() {
    let cfg = SceneConfig {
        n_people: 5,
        n_views: 5,
        keypoint_noise_px: 4.0,
        miss_rate: 0.2,
        false_rate: 0.4,
        rng_seed: 77,
        ..Default::default()
    };
    let scene = generate(&cfg).unwrap();
    let a = build_affinity(&scene.detections, &scene.truth.cameras, &AffinityConfig::default()).unwrap();
    let (x, y) = (solve_default(&a), solve_default(&a));
    assert_eq!(x, y);
    assert!(x.relaxed.iter().zip(y.relaxed.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn solver_output_satisfies_invariants(
        seed in 0u64..100_000,
        n_people in 1usize..6,
        n_views in 2usize..6,
        noise in 0.0f64..8.0,
        miss in 0.0f64..0.4,
        fals in 0.0f64..1.0,
    ) {
        let cfg = SceneConfig {
            n_people, n_views, keypoint_noise_px: noise, miss_rate: miss, false_rate: fals, rng_seed: seed,
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let a = build_affinity(&scene.detections, &scene.truth.cameras, &AffinityConfig::default()).unwrap();
        let r = solve_default(&a);
        let p = &r.partition;
        prop_assert!(constraint_violation(&r.relaxed, p) <= 1e-6);
        prop_assert_eq!(transitivity_violations(&r.quantized, p), 0);
        let views = p.view_labels();
        for i in 0..p.m() {
            for j in 0..p.m() {
                prop_assert_eq!(r.relaxed[(i, j)], r.relaxed[(j, i)]);
                if views[i] == views[j] {
                    prop_assert_eq!(r.quantized[(i, j)], i == j);
                }
            }
            for w in 0..p.n_views() {
                if w != views[i] {
                    prop_assert!(p.range(w).filter(|&j| r.quantized[(i, j)]).count() <= 1);
                }
            }
        }
        let clusters = extract_clusters(&r.quantized, p).unwrap();
        for c in &clusters {
            prop_assert!(c.members.len() >= 2);
            let mut vs: Vec<usize> = c.members.iter().map(|m| m.view).collect();
            vs.dedup();
            prop_assert_eq!(vs.len(), c.members.len());
        }
    }

    #[test]
    fn rank_recovery_for_lambda_in_range(seed in 0u64..100_000, s in 1usize..7, n_views in 2usize..6, lambda in 0.2f64..=0.8) {
        let scene = generate(&SceneConfig { n_people: s, n_views, rng_seed: seed, ..Default::default() }).unwrap();
        let a = build_affinity(&scene.detections, &scene.truth.cameras, &AffinityConfig::default()).unwrap();
        let cfg = SolverConfig { lambda: Some(lambda), ..Default::default() };
        let r = solve(&MatchProblem::new(a, &cfg).unwrap()).unwrap();
        prop_assert_eq!(extract_clusters(&r.quantized, &r.partition).unwrap().len(), s);
    }

    #[test]
    fn svt_soft_thresholds_rectangular_spectra(seed in 0u64..10_000, r in 1usize..12, c in 1usize..12, tau in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, r, c);
        let expected: Vec<f64> = singular_values_by_embedding(&m).iter().map(|s| (s - tau).max(0.0)).collect();
        let got = singular_values_by_embedding(&svt(&m, tau));
        for (e, g) in expected.iter().zip(&got) {
            prop_assert!((e - g).abs() < 1e-9);
        }
    }
}
