use ndarray::Array2;
use peelnet::graph::{
    ancestral_closure, classify_hypothesis, has_cycle, topological_heights, DirectedGraph, HypothesisSpec, PairSet,
    SuperGraph, TestMode,
};
use peelnet::linalg::{least_squares, projection_quadratic_form, weighted_lasso, LassoProblem};
use peelnet::peeling::{peel, PeelOptions, ReducedFormEstimate};
use peelnet::simulate::{build_truth, shd, stream_rng, GraphKind, SimDesign, Setup};
use peelnet::tlp::{dc_constrained_fit, l0_project_refit, Design, TlpConfig};
use proptest::prelude::*;

/// Random DAG on up to 8 nodes: edges follow a random permutation order.
fn dag_strategy() -> impl Strategy<Value = DirectedGraph> {
    (1usize..=8)
        .prop_flat_map(|p| {
            (
                Just(p),
                Just((0..p).collect::<Vec<_>>()).prop_shuffle(),
                proptest::collection::vec(proptest::bool::weighted(0.35), p * p),
            )
        })
        .prop_map(|(p, perm, bits)| {
            let mut edges = Vec::new();
            for a in 0..p {
                for b in a + 1..p {
                    if bits[a * p + b] {
                        edges.push((perm[a], perm[b]));
                    }
                }
            }
            DirectedGraph::from_edges(p, edges).unwrap()
        })
}

/// Any directed graph on up to 8 nodes, cycles allowed.
fn digraph_strategy() -> impl Strategy<Value = DirectedGraph> {
    (1usize..=8)
        .prop_flat_map(|p| (Just(p), proptest::collection::vec(proptest::bool::weighted(0.2), p * p)))
        .prop_map(|(p, bits)| {
            let edges = (0..p * p)
                .filter(|&i| bits[i] && i / p != i % p)
                .map(|i| (i / p, i % p));
            DirectedGraph::from_edges(p, edges).unwrap()
        })
}

/// Warshall reachability, the oracle for closure and cycles.
fn reachability(g: &DirectedGraph) -> Vec<Vec<bool>> {
    let p = g.p();
    let mut r = vec![vec![false; p]; p];
    for (k, j) in g.edges().iter() {
        r[k][j] = true;
    }
    for m in 0..p {
        for a in 0..p {
            for b in 0..p {
                if r[a][m] && r[m][b] {
                    r[a][b] = true;
                }
            }
        }
    }
    r
}

/// Longest path length from every node, by exhaustive path enumeration.
fn brute_heights(g: &DirectedGraph) -> Vec<usize> {
    fn longest(g: &DirectedGraph, from: usize) -> usize {
        (0..g.p())
            .filter(|&c| g.has_edge(from, c))
            .map(|c| 1 + longest(g, c))
            .max()
            .unwrap_or(0)
    }
    (0..g.p()).map(|j| longest(g, j)).collect()
}

fn gaussian_matrix(seed: u64, n: usize, m: usize) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream_rng(seed, 0);
    Array2::from_shape_fn((n, m), |_| StandardNormal.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closure_is_idempotent_and_matches_reachability(g in dag_strategy()) {
        let closure = ancestral_closure(&g).unwrap();
        let again = ancestral_closure(&DirectedGraph::from_pair_set(closure.clone()).unwrap()).unwrap();
        prop_assert_eq!(&again, &closure);
        let r = reachability(&g);
        for a in 0..g.p() {
            for b in 0..g.p() {
                prop_assert_eq!(closure.contains(a, b), r[a][b]);
            }
        }
    }

    #[test]
    fn heights_match_longest_paths(g in dag_strategy()) {
        let h = topological_heights(&g).unwrap();
        prop_assert_eq!(&h, &brute_heights(&g));
        for (k, j) in ancestral_closure(&g).unwrap().iter() {
            prop_assert!(h[k] > h[j]);
        }
    }

    #[test]
    fn cycle_detection_matches_reachability(g in digraph_strategy()) {
        let r = reachability(&g);
        let cyclic = (0..g.p()).any(|j| r[j][j]);
        prop_assert_eq!(has_cycle(&g), cyclic);
        prop_assert_eq!(ancestral_closure(&g).is_err(), cyclic);
    }

    #[test]
    fn regularity_matches_brute_force(g in dag_strategy(), picks in proptest::collection::vec((0usize..8, 0usize..8), 1..4)) {
        let p = g.p();
        let edges: Vec<(usize, usize)> = picks.into_iter().map(|(a, b)| (a % p, b % p)).filter(|(a, b)| a != b).collect();
        prop_assume!(!edges.is_empty());
        let anc = ancestral_closure(&g).unwrap();
        let heights = topological_heights(&g).unwrap();
        let s = SuperGraph::new(p, 1, anc.clone(), PairSet::new(1, p), heights).unwrap();
        let h = HypothesisSpec::new(edges.clone(), TestMode::EdgeTest).unwrap();
        let cls = classify_hypothesis(&h, &s);

        let d: Vec<(usize, usize)> = h.edges().iter().copied().filter(|&(k, j)| !anc.contains(j, k)).collect();
        prop_assert_eq!(&cls.nondegenerate, &d);
        prop_assert_eq!(cls.is_degenerate, d.is_empty());
        let mut union = anc.clone();
        for &(k, j) in &d {
            union.insert(k, j);
        }
        let r = reachability(&DirectedGraph::from_pair_set(union).unwrap());
        let cyclic = (0..p).any(|j| r[j][j]);
        prop_assert_eq!(cls.is_regular, !cyclic);
    }

    #[test]
    fn lasso_satisfies_kkt(seed in 0u64..10_000, m in 1usize..6, penalty in 0.0f64..0.6, mask in proptest::collection::vec(any::<bool>(), 6)) {
        let n = 30;
        let x = gaussian_matrix(seed, n, m);
        let y = gaussian_matrix(seed + 1, n, 1).column(0).to_owned() + x.column(0).to_owned();
        let weights: Vec<bool> = mask[..m].to_vec();
        let problem = LassoProblem { design: x.view(), response: y.view(), penalty_level: penalty, weights: weights.clone() };
        let beta = weighted_lasso(&problem, &vec![0.0; m], 1e-10).unwrap();
        let resid = &y - &x.dot(&beta);
        for l in 0..m {
            let g = x.column(l).dot(&resid) / n as f64;
            if !weights[l] {
                prop_assert!(g.abs() < 1e-6, "unpenalized gradient {}", g);
            } else if beta[l] != 0.0 {
                prop_assert!((g.abs() - penalty).abs() < 1e-6 && g * beta[l] > 0.0);
            } else {
                prop_assert!(g.abs() <= penalty + 1e-6);
            }
        }
    }

    #[test]
    fn nested_projections_add_up(seed in 0u64..10_000) {
        let z = gaussian_matrix(seed, 12, 5);
        let v = gaussian_matrix(seed + 7, 12, 1).column(0).to_owned();
        let full = [0, 1, 2, 3, 4];
        let a = [0, 2, 3];
        let b = [2];
        let ab = projection_quadratic_form(z.view(), &a, &b, v.view()).unwrap();
        let fa = projection_quadratic_form(z.view(), &full, &a, v.view()).unwrap();
        let fb = projection_quadratic_form(z.view(), &full, &b, v.view()).unwrap();
        prop_assert!((ab + fa - fb).abs() < 1e-8);
        prop_assert!(ab >= -1e-9);

        let sub = z.select(ndarray::Axis(1), &a);
        let rss = least_squares(sub.view(), v.view()).unwrap().rss;
        let proj = projection_quadratic_form(z.view(), &a, &[], v.view()).unwrap();
        prop_assert!((rss - (v.dot(&v) - proj)).abs() < 1e-8);
    }

    #[test]
    fn projection_support_is_scale_invariant(v in proptest::collection::vec(-5.0f64..5.0, 6), scale in 0.01f64..100.0, kappa in 1usize..=6) {
        let x = gaussian_matrix(3, 20, 6);
        let y = gaussian_matrix(4, 20, 1).column(0).to_owned();
        let scaled: Vec<f64> = v.iter().map(|a| a * scale).collect();
        let s1 = l0_project_refit(&v, kappa, x.view(), y.view()).unwrap().support;
        let s2 = l0_project_refit(&scaled, kappa, x.view(), y.view()).unwrap().support;
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn dc_objective_never_increases(seed in 0u64..10_000, gamma in 0.05f64..3.0, tau in 0.02f64..0.5, kappa in 1usize..=5) {
        let x = gaussian_matrix(seed, 40, 5);
        let mut y = gaussian_matrix(seed + 1, 40, 1).column(0).to_owned();
        y += &(x.column(1).to_owned() * 0.8);
        let design = Design::new(x.view());
        let fit = dc_constrained_fit(&design, y.view(), &TlpConfig::new(gamma, tau, kappa), &[0.0; 5]).unwrap();
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8 * w[0].abs().max(1.0), "{:?}", fit.objective_trace);
        }
        prop_assert!(fit.support.len() <= kappa);
    }

    #[test]
    fn shd_is_a_symmetric_distance(a in proptest::collection::vec(0i8..2, 16), b in proptest::collection::vec(0i8..2, 16)) {
        let ma = Array2::from_shape_vec((4, 4), a.iter().map(|&v| v as f64).collect()).unwrap();
        let mb = Array2::from_shape_vec((4, 4), b.iter().map(|&v| v as f64).collect()).unwrap();
        prop_assert_eq!(shd(ma.view(), mb.view()).unwrap(), shd(mb.view(), ma.view()).unwrap());
        prop_assert_eq!(shd(ma.view(), ma.view()).unwrap(), 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    /// On exact reduced forms under the two designs with valid instruments,
    /// peeling returns the true ancestral relations.
    #[test]
    fn exact_reduced_form_is_recovered(seed in 0u64..1_000_000, p in 2usize..12, hub in any::<bool>(), setup_c in any::<bool>()) {
        let setup = if setup_c { Setup::C } else { Setup::A };
        let kind = if hub && p >= 3 { GraphKind::Hub } else { GraphKind::Random };
        let design = SimDesign::new(p, 2 * p + 1, 10, kind, setup);
        let mut rng = stream_rng(seed, 0);
        let truth = build_truth(&design, &mut rng).unwrap();
        let est = ReducedFormEstimate::with_uniform_tau(truth.v.clone(), 0.05).unwrap();
        let (s, trace) = peel(&est).unwrap();
        prop_assert_eq!(s.ancestral(), &truth.ancestral);
        let true_heights = topological_heights(&truth.dag.graph()).unwrap();
        prop_assert_eq!(s.heights(), true_heights.as_slice());

        let layer: Vec<(usize, usize)> = trace.rounds.iter().flat_map(|r| r.layer_edges.clone()).collect();
        let lg = DirectedGraph::from_edges(p, layer).unwrap();
        let layer_heights = topological_heights(&lg).unwrap();
        prop_assert_eq!(layer_heights.as_slice(), s.heights());
        let mut removed: Vec<usize> = trace.rounds.iter().flat_map(|r| r.removed.clone()).collect();
        removed.sort_unstable();
        prop_assert_eq!(removed, (0..p).collect::<Vec<_>>());

        let literal = peeling_literal(&est);
        prop_assert!(truth.ancestral.is_superset(&literal));
    }

    #[test]
    fn reduced_form_identity_holds(seed in 0u64..1_000_000, p in 1usize..10) {
        let design = SimDesign::new(p, 2 * p, 10, GraphKind::Random, Setup::B);
        let mut rng = stream_rng(seed, 1);
        let truth = build_truth(&design, &mut rng).unwrap();
        let back = truth.v.dot(&(Array2::<f64>::eye(p) - &truth.dag.u));
        for (a, b) in back.iter().zip(truth.dag.w.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

fn peeling_literal(est: &ReducedFormEstimate) -> PairSet {
    let opts = PeelOptions { adjacent_layers_only: true, ..Default::default() };
    peelnet::peeling::peel_with(est, opts).unwrap().0.ancestral().clone()
}
