use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::LaplacianBundle;
use crate::error::{dim_err, input_err, Result, StgcnError};
use crate::scalar::Scalar;

fn check_signal<T: Scalar>(bundle: &LaplacianBundle<T>, x: &[T]) -> Result<()> {
    if x.len() != bundle.n() {
        return Err(dim_err!(
            "signal of length {} on a graph with {} nodes",
            x.len(),
            bundle.n()
        ));
    }
    Ok(())
}

/// `Σ_k θ_k T_k(L̃) x` through the Chebyshev three-term recurrence.
pub fn cheb_filter<T: Scalar>(bundle: &LaplacianBundle<T>, theta: &[T], x: &[T]) -> Result<Vec<T>> {
    if theta.is_empty() {
        return Err(input_err!("Chebyshev filter needs K >= 1 coefficients"));
    }
    check_signal(bundle, x)?;
    let two = T::of(2.0);
    let mut out: Vec<T> = x.iter().map(|&v| theta[0] * v).collect();
    let mut prev = x.to_vec();
    let mut cur = bundle.scaled.matvec(x)?;
    for (k, &th) in theta.iter().enumerate().skip(1) {
        if k > 1 {
            let next: Vec<T> = bundle
                .scaled
                .matvec(&cur)?
                .into_iter()
                .zip(&prev)
                .map(|(lz, &p)| two * lz - p)
                .collect();
            prev = std::mem::replace(&mut cur, next);
        }
        for (o, &c) in out.iter_mut().zip(&cur) {
            *o += th * c;
        }
    }
    Ok(out)
}

/// Exact spectral filtering `U Θ(Λ) Uᵀ x` by dense eigendecomposition of `L`.
///
/// `Θ(λ) = Σ_k θ_k T_k(2λ/λmax − 1)`. Cubic in `n`; meant for cross-checking
/// [`cheb_filter`] on small graphs.
pub fn spectral_oracle<T: Scalar>(bundle: &LaplacianBundle<T>, theta: &[T], x: &[T]) -> Result<Vec<T>> {
    if theta.is_empty() {
        return Err(input_err!("spectral filter needs K >= 1 coefficients"));
    }
    check_signal(bundle, x)?;
    let n = bundle.n();
    let dense: Vec<f64> = bundle.laplacian.to_dense().into_iter().map(T::as_f64).collect();
    let eig = SymmetricEigen::try_new(DMatrix::from_row_slice(n, n, &dense), 1e-14, 10_000)
        .ok_or_else(|| StgcnError::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let lambda_max = bundle.lambda_max.as_f64();
    let response = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&lam| {
            let s = 2.0 * lam / lambda_max - 1.0;
            // T_k(s) by the trigonometric/hyperbolic closed forms.
            theta
                .iter()
                .enumerate()
                .map(|(k, th)| th.as_f64() * chebyshev_closed_form(k, s))
                .sum::<f64>()
        }),
    );
    let xv = DVector::from_iterator(n, x.iter().map(|v| v.as_f64()));
    let spectral = eig.eigenvectors.transpose() * xv;
    let filtered = &eig.eigenvectors * spectral.component_mul(&response);
    Ok(filtered.iter().map(|&v| T::of(v)).collect())
}

fn chebyshev_closed_form(k: usize, s: f64) -> f64 {
    let k = k as f64;
    if s.abs() <= 1.0 {
        (k * s.acos()).cos()
    } else if s > 1.0 {
        (k * s.acosh()).cosh()
    } else {
        let sign = if (k as u64).is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * (k * (-s).acosh()).cosh()
    }
}

/// `θ · D̃^{-1/2} W̃ D̃^{-1/2} x`.
pub fn first_order_propagate<T: Scalar>(bundle: &LaplacianBundle<T>, theta: T, x: &[T]) -> Result<Vec<T>> {
    check_signal(bundle, x)?;
    Ok(bundle
        .propagation
        .matvec(x)?
        .into_iter()
        .map(|v| theta * v)
        .collect())
}
