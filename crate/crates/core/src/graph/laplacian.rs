use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::WeightedGraph;
use crate::error::{Result, StgcnError};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITERS: usize = 5000;

/// Normalized Laplacian of a graph together with the operators derived from it.
///
/// All matrices are symmetric, so each one is its own adjoint.
#[derive(Debug, Clone)]
pub struct LaplacianBundle<T> {
    /// `L = I − D^{-1/2} W D^{-1/2}`; isolated nodes get an identity row.
    pub laplacian: Arc<CsrMatrix<T>>,
    pub lambda_max: T,
    /// `2L/λmax − I`.
    pub scaled: Arc<CsrMatrix<T>>,
    /// `D̃^{-1/2} W̃ D̃^{-1/2}` with `W̃ = W + I`.
    pub propagation: Arc<CsrMatrix<T>>,
}

/// `w / sqrt(d_i d_j)`, zero when either degree vanishes.
fn sym_normalize<T: Scalar>(w: T, di: T, dj: T) -> T {
    let p = di * dj;
    if p > T::zero() {
        w / p.sqrt()
    } else {
        T::zero()
    }
}

impl<T: Scalar> LaplacianBundle<T> {
    /// Bundle using a caller-supplied `λmax` instead of power iteration.
    pub fn with_lambda_max(graph: &WeightedGraph<T>, lambda_max: T) -> Result<Self> {
        if !(lambda_max > T::zero()) {
            return Err(StgcnError::Numeric(format!(
                "lambda_max must be positive to scale the Laplacian, got {lambda_max}"
            )));
        }
        let n = graph.n();
        let laplacian = laplacian_matrix(graph)?;

        let two_over = T::of(2.0) / lambda_max;
        let mut scaled_triplets: Vec<(usize, usize, T)> = (0..n)
            .flat_map(|i| laplacian.row(i).map(move |(j, v)| (i, j, v * two_over)))
            .collect();
        scaled_triplets.extend((0..n).map(|i| (i, i, -T::one())));
        let scaled = CsrMatrix::from_triplets(n, n, &scaled_triplets)?;

        let mut deg_tilde = graph.degrees();
        for d in &mut deg_tilde {
            *d += T::one();
        }
        let d = &deg_tilde;
        let mut prop_triplets: Vec<(usize, usize, T)> = (0..n)
            .flat_map(|i| {
                graph
                    .weights()
                    .row(i)
                    .map(move |(j, w)| (i, j, sym_normalize(w, d[i], d[j])))
            })
            .collect();
        prop_triplets.extend((0..n).map(|i| (i, i, T::one() / d[i])));
        let propagation = CsrMatrix::from_triplets(n, n, &prop_triplets)?;

        Ok(Self {
            laplacian: Arc::new(laplacian),
            lambda_max,
            scaled: Arc::new(scaled),
            propagation: Arc::new(propagation),
        })
    }

    /// Same operators converted to another scalar type, so they can be
    /// computed once in `f64` and used by an `f32` model.
    pub fn cast<U: Scalar>(&self) -> LaplacianBundle<U> {
        LaplacianBundle {
            laplacian: Arc::new(self.laplacian.cast()),
            lambda_max: U::of(self.lambda_max.as_f64()),
            scaled: Arc::new(self.scaled.cast()),
            propagation: Arc::new(self.propagation.cast()),
        }
    }

    pub fn n(&self) -> usize {
        self.laplacian.rows()
    }
}

fn laplacian_matrix<T: Scalar>(graph: &WeightedGraph<T>) -> Result<CsrMatrix<T>> {
    let n = graph.n();
    let deg = graph.degrees();
    let d = &deg;
    let mut triplets: Vec<(usize, usize, T)> = (0..n)
        .flat_map(|i| {
            graph
                .weights()
                .row(i)
                .map(move |(j, w)| (i, j, -sym_normalize(w, d[i], d[j])))
        })
        .collect();
    triplets.extend((0..n).map(|i| (i, i, T::one())));
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Builds the Laplacian bundle, estimating `λmax` by power iteration.
pub fn normalized_laplacian<T: Scalar>(graph: &WeightedGraph<T>) -> Result<LaplacianBundle<T>> {
    let lap = laplacian_matrix(graph)?;
    let tol = T::of(POWER_TOL).max(T::epsilon() * T::of(16.0));
    let lambda_max = power_iteration(&lap, tol, POWER_MAX_ITERS)?;
    LaplacianBundle::with_lambda_max(graph, lambda_max)
}

/// Dominant eigenvalue of a symmetric positive semi-definite matrix.
///
/// Stops when successive Rayleigh quotients differ by at most
/// `tol · max(1, |λ|)`. The start vector is seeded so results are reproducible.
pub fn power_iteration<T: Scalar>(m: &CsrMatrix<T>, tol: T, max_iters: usize) -> Result<T> {
    let n = m.rows();
    if n == 0 {
        return Err(StgcnError::Numeric("power iteration on an empty matrix".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<T> = (0..n).map(|_| T::of(rng.random_range(0.5..1.5))).collect();
    normalize(&mut v);
    let mut lambda = T::zero();
    let mut residual = T::infinity();
    for iter in 0..max_iters {
        let w = m.matvec(&v)?;
        let next: T = v.iter().zip(&w).map(|(&a, &b)| a * b).sum();
        residual = w
            .iter()
            .zip(&v)
            .map(|(&wi, &vi)| (wi - next * vi) * (wi - next * vi))
            .sum::<T>()
            .sqrt();
        let norm = w.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            return Ok(T::zero());
        }
        if iter > 0 && (next - lambda).abs() <= tol * next.abs().max(T::one()) {
            return Ok(next);
        }
        lambda = next;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    Err(StgcnError::Numeric(format!(
        "power iteration did not converge in {max_iters} iterations (λ ≈ {lambda}, residual {residual})"
    )))
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    for x in v {
        *x /= norm;
    }
}
