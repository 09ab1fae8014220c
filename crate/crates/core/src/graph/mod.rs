//! Weighted road graphs and their spectral operators.

mod filter;
pub mod io;
mod laplacian;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

pub use filter::{cheb_filter, first_order_propagate, spectral_oracle};
pub use laplacian::{normalized_laplacian, power_iteration, LaplacianBundle};

/// Bandwidth and sparsity threshold of the Gaussian distance kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyConfig {
    /// σ², in the squared units of the distance file.
    pub sigma_sq: f64,
    /// Weights below this are dropped; must lie in (0, 1).
    pub epsilon: f64,
}

impl Default for AdjacencyConfig {
    fn default() -> Self {
        Self {
            sigma_sq: 10.0,
            epsilon: 0.5,
        }
    }
}

impl AdjacencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_sq > 0.0 && self.sigma_sq.is_finite()) {
            return Err(input_err!("sigma_sq must be positive, got {}", self.sigma_sq));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(input_err!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        Ok(())
    }

    /// Kernel weight for distance `d`, or zero below the threshold.
    pub fn weight(&self, d: f64) -> f64 {
        let w = (-(d * d) / self.sigma_sq).exp();
        if w >= self.epsilon {
            w
        } else {
            0.0
        }
    }
}

/// Undirected weighted graph: symmetric, nonnegative, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph<T> {
    node_ids: Vec<String>,
    weights: CsrMatrix<T>,
}

impl<T: Scalar> WeightedGraph<T> {
    /// Same graph with weights converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> WeightedGraph<U> {
        WeightedGraph {
            node_ids: self.node_ids.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Graph from a dense row-major matrix, symmetrized as `(W + Wᵀ)/2` with
    /// the diagonal cleared.
    pub fn from_dense(node_ids: Vec<String>, dense: &[T]) -> Result<Self> {
        let n = node_ids.len();
        if dense.len() != n * n {
            return Err(input_err!(
                "adjacency has {} entries, expected {n}x{n}",
                dense.len()
            ));
        }
        let half = T::of(0.5);
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = dense[i * n + j];
                if !(w >= T::zero() && w.is_finite()) {
                    return Err(input_err!("adjacency entry ({i}, {j}) = {w} is not a finite nonnegative weight"));
                }
                if i != j {
                    let s = (w + dense[j * n + i]) * half;
                    if s > T::zero() {
                        triplets.push((i, j, s));
                    }
                }
            }
        }
        Ok(Self {
            node_ids,
            weights: CsrMatrix::from_triplets(n, n, &triplets)?,
        })
    }

    /// Graph with `n` nodes and no edges.
    pub fn empty(node_ids: Vec<String>) -> Self {
        let n = node_ids.len();
        Self {
            node_ids,
            weights: CsrMatrix::from_triplets(n, n, &[]).expect("empty matrix"),
        }
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn weights(&self) -> &CsrMatrix<T> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> T {
        self.weights.get(i, j)
    }

    /// Number of nonzero weights counted once per undirected edge.
    pub fn edge_count(&self) -> usize {
        self.weights.nnz() / 2
    }

    pub fn degrees(&self) -> Vec<T> {
        (0..self.n())
            .map(|i| self.weights.row(i).map(|(_, w)| w).sum())
            .collect()
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(input_err!("{perm:?} is not a permutation of {n} nodes"));
        }
        let mut inverse = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let triplets: Vec<_> = (0..n)
            .flat_map(|i| {
                let inverse = &inverse;
                self.weights.row(i).map(move |(j, w)| (inverse[i], inverse[j], w))
            })
            .collect();
        Ok(Self {
            node_ids: perm.iter().map(|&p| self.node_ids[p].clone()).collect(),
            weights: CsrMatrix::from_triplets(n, n, &triplets)?,
        })
    }
}

/// Builds the thresholded Gaussian-kernel graph over nodes `0..n` from
/// `(i, j, distance)` records.
///
/// A pair listed in only one direction gets that weight both ways; a pair
/// listed in both directions gets the mean of the two weights. Repeated
/// records for the same direction keep the last one.
pub fn build_adjacency<T: Scalar>(
    distances: &[(usize, usize, f64)],
    n: usize,
    cfg: &AdjacencyConfig,
) -> Result<WeightedGraph<T>> {
    build_adjacency_with_ids((0..n).map(|i| i.to_string()).collect(), distances, cfg)
}

pub fn build_adjacency_with_ids<T: Scalar>(
    node_ids: Vec<String>,
    distances: &[(usize, usize, f64)],
    cfg: &AdjacencyConfig,
) -> Result<WeightedGraph<T>> {
    cfg.validate()?;
    let n = node_ids.len();
    let mut directed: HashMap<(usize, usize), f64> = HashMap::new();
    for &(i, j, d) in distances {
        if i >= n || j >= n {
            return Err(input_err!("distance record ({i}, {j}) references a node outside 0..{n}"));
        }
        if i == j {
            return Err(input_err!("distance record ({i}, {i}) is a self-pair"));
        }
        if !(d >= 0.0 && d.is_finite()) {
            return Err(input_err!("distance between {i} and {j} is {d}; must be finite and >= 0"));
        }
        directed.insert((i, j), cfg.weight(d));
    }
    let mut triplets = Vec::new();
    for (&(i, j), &w) in &directed {
        let sym = match directed.get(&(j, i)) {
            Some(&back) => 0.5 * (w + back),
            None => w,
        };
        if sym > 0.0 {
            triplets.push((i, j, T::of(sym)));
            if !directed.contains_key(&(j, i)) {
                triplets.push((j, i, T::of(sym)));
            }
        }
    }
    Ok(WeightedGraph {
        node_ids,
        weights: CsrMatrix::from_triplets(n, n, &triplets)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn kernel_weight_examples() {
        let cfg = AdjacencyConfig::default();
        let g: WeightedGraph<f64> = build_adjacency(&[(0, 1, 2.0)], 2, &cfg).unwrap();
        assert_abs_diff_eq!(g.weight(0, 1), (-0.4f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(g.weight(0, 1), 0.67032, epsilon = 1e-5);
        assert_eq!(g.weight(1, 0), g.weight(0, 1));

        let g: WeightedGraph<f64> = build_adjacency(&[(0, 1, 3.0)], 2, &cfg).unwrap();
        assert_eq!(g.weight(0, 1), 0.0);
        assert_eq!(g.edge_count(), 0);

        let g: WeightedGraph<f64> = build_adjacency(&[(0, 1, 0.0)], 2, &cfg).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
    }

    #[test]
    fn both_directions_are_averaged() {
        let cfg = AdjacencyConfig::default();
        let g: WeightedGraph<f64> = build_adjacency(&[(0, 1, 0.0), (1, 0, 2.0)], 2, &cfg).unwrap();
        let expected = 0.5 * (1.0 + (-0.4f64).exp());
        assert_abs_diff_eq!(g.weight(0, 1), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(g.weight(1, 0), expected, epsilon = 1e-15);
    }

    #[test]
    fn invalid_records_rejected() {
        let cfg = AdjacencyConfig::default();
        assert!(build_adjacency::<f64>(&[(0, 5, 1.0)], 2, &cfg).is_err());
        assert!(build_adjacency::<f64>(&[(0, 1, -1.0)], 2, &cfg).is_err());
        assert!(build_adjacency::<f64>(&[(1, 1, 1.0)], 2, &cfg).is_err());
        let bad = AdjacencyConfig { sigma_sq: 10.0, epsilon: 1.0 };
        assert!(build_adjacency::<f64>(&[], 2, &bad).is_err());
    }

    #[test]
    fn dense_input_is_symmetrized() {
        let g = WeightedGraph::<f64>::from_dense(
            vec!["a".into(), "b".into()],
            &[5.0, 1.0, 0.0, 7.0],
        )
        .unwrap();
        assert_eq!(g.weight(0, 1), 0.5);
        assert_eq!(g.weight(1, 0), 0.5);
        assert_eq!(g.weight(0, 0), 0.0);
    }

    #[test]
    fn permutation_relabels_weights() {
        let cfg = AdjacencyConfig::default();
        let g: WeightedGraph<f64> = build_adjacency(&[(0, 1, 1.0), (1, 2, 2.0)], 3, &cfg).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.node_ids(), &["2", "0", "1"]);
        assert_eq!(p.weight(0, 2), g.weight(2, 1));
        assert_eq!(p.weight(1, 2), g.weight(0, 1));
        assert!(g.permuted(&[0, 0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn raising_epsilon_never_adds_edges(
            dists in proptest::collection::vec((0usize..6, 0usize..6, 0.0f64..6.0), 0..30),
            e1 in 0.05f64..0.95,
            e2 in 0.05f64..0.95,
        ) {
            let records: Vec<_> = dists.into_iter().filter(|(i, j, _)| i != j).collect();
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let g_lo: WeightedGraph<f64> = build_adjacency(&records, 6, &AdjacencyConfig { sigma_sq: 10.0, epsilon: lo }).unwrap();
            let g_hi: WeightedGraph<f64> = build_adjacency(&records, 6, &AdjacencyConfig { sigma_sq: 10.0, epsilon: hi }).unwrap();
            prop_assert!(g_hi.weights().nnz() <= g_lo.weights().nnz());
        }

        #[test]
        fn built_graphs_satisfy_invariants(
            dists in proptest::collection::vec((0usize..5, 0usize..5, 0.0f64..5.0), 0..20),
        ) {
            let records: Vec<_> = dists.into_iter().filter(|(i, j, _)| i != j).collect();
            let g: WeightedGraph<f64> = build_adjacency(&records, 5, &AdjacencyConfig::default()).unwrap();
            prop_assert!(g.weights().is_symmetric(0.0));
            for i in 0..5 {
                prop_assert_eq!(g.weight(i, i), 0.0);
                for (_, w) in g.weights().row(i) {
                    prop_assert!(w >= 0.0);
                }
            }
        }
    }
}
