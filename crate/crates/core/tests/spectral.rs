use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use stgcn::graph::{cheb_filter, normalized_laplacian, LaplacianBundle, WeightedGraph};
use stgcn::StgcnError;

fn graph_from(n: usize, weights: &[f64]) -> WeightedGraph<f64> {
    let mut dense = vec![0.0; n * n];
    let mut it = weights.iter();
    for i in 0..n {
        for j in i + 1..n {
            let w = *it.next().unwrap();
            dense[i * n + j] = w;
            dense[j * n + i] = w;
        }
    }
    WeightedGraph::from_dense((0..n).map(|i| i.to_string()).collect(), &dense).unwrap()
}

/// Dense graph on `n` nodes whose pair weights are zero about a third of the time.
fn arb_graph() -> impl Strategy<Value = WeightedGraph<f64>> {
    (2usize..12).prop_flat_map(|n| {
        prop::collection::vec(prop_oneof![1 => Just(0.0), 2 => 0.05f64..1.0], n * (n - 1) / 2)
            .prop_map(move |w| graph_from(n, &w))
    })
}

fn eigenvalues(m: &stgcn::CsrMatrix) -> Vec<f64> {
    let n = m.rows();
    let mut ev: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &m.to_dense()))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectrum_lies_in_zero_two(g in arb_graph()) {
        let bundle = normalized_laplacian(&g).unwrap();
        let ev = eigenvalues(&bundle.laplacian);
        prop_assert!(ev[0] > -1e-12 && ev[ev.len() - 1] < 2.0 + 1e-12, "{ev:?}");
        prop_assert!((bundle.lambda_max - ev[ev.len() - 1]).abs() < 1e-8);
        let scaled = eigenvalues(&bundle.scaled);
        prop_assert!(scaled.iter().all(|v| v.abs() <= 1.0 + 1e-8), "{scaled:?}");
    }

    #[test]
    fn filter_commutes_with_relabeling(
        g in arb_graph(),
        seed in any::<u64>(),
        theta in prop::collection::vec(-1.0f64..1.0, 1..5),
    ) {
        let n = g.n();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let x: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let bundle = LaplacianBundle::with_lambda_max(&g, 1.7).unwrap();
        let permuted = LaplacianBundle::with_lambda_max(&g.permuted(&perm).unwrap(), 1.7).unwrap();
        let y = cheb_filter(&bundle, &theta, &x).unwrap();
        let px: Vec<f64> = perm.iter().map(|&p| x[p]).collect();
        let py = cheb_filter(&permuted, &theta, &px).unwrap();
        let expected: Vec<f64> = perm.iter().map(|&p| y[p]).collect();
        prop_assert!(max_abs_diff(&py, &expected) < 1e-12);
    }

    #[test]
    fn first_order_chebyshev_matches_unrenormalized_form(g in arb_graph(), theta in -2.0f64..2.0) {
        let n = g.n();
        let bundle = LaplacianBundle::with_lambda_max(&g, 2.0).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = cheb_filter(&bundle, &[theta, -theta], &x).unwrap();
        let deg = g.degrees();
        let expected: Vec<f64> = (0..n)
            .map(|i| {
                let mixed: f64 = (0..n)
                    .filter(|&j| deg[i] > 0.0 && deg[j] > 0.0)
                    .map(|j| g.weight(i, j) / (deg[i] * deg[j]).sqrt() * x[j])
                    .sum();
                theta * x[i] + theta * mixed
            })
            .collect();
        prop_assert!(max_abs_diff(&y, &expected) < 1e-10);
    }

    #[test]
    fn root_degree_vector_is_the_null_mode(g in arb_graph(), theta in prop::collection::vec(-1.0f64..1.0, 1..5)) {
        // L D^{1/2} 1 = 0, so every T_k(L̃) acts on it as T_k(-1) = (-1)^k.
        let bundle = normalized_laplacian(&g).unwrap();
        let x: Vec<f64> = g.degrees().iter().map(|d| if *d > 0.0 { d.sqrt() } else { 0.0 }).collect();
        let gain: f64 = theta.iter().enumerate().map(|(k, t)| if k % 2 == 0 { *t } else { -t }).sum();
        let y = cheb_filter(&bundle, &theta, &x).unwrap();
        let expected: Vec<f64> = x.iter().map(|v| gain * v).collect();
        prop_assert!(max_abs_diff(&y, &expected) < 1e-9);
    }
}

#[test]
fn near_bipartite_gap_reports_non_convergence() {
    // An even cycle has eigenvalues 2 and 2 − O(1/n²); power iteration cannot
    // separate them within its iteration cap and must say so.
    let n = 228;
    let mut dense = vec![0.0; n * n];
    for i in 0..n {
        let j = (i + 1) % n;
        dense[i * n + j] = 1.0;
        dense[j * n + i] = 1.0;
    }
    let g = WeightedGraph::from_dense((0..n).map(|i| i.to_string()).collect(), &dense).unwrap();
    match normalized_laplacian(&g) {
        Err(StgcnError::Numeric(msg)) => assert!(msg.contains("residual"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}
