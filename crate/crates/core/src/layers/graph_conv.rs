use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init;
use crate::error::{dim_err, input_err, Result};
use crate::graph::LaplacianBundle;
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Spatial filter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GraphConvKind {
    /// Chebyshev polynomials of the scaled Laplacian up to order `k − 1`.
    Chebyshev { k: usize },
    /// One renormalized propagation step `D̃^{-1/2} W̃ D̃^{-1/2}`.
    FirstOrder,
}

impl GraphConvKind {
    pub fn order(&self) -> usize {
        match self {
            GraphConvKind::Chebyshev { k } => *k,
            GraphConvKind::FirstOrder => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order() == 0 {
            return Err(input_err!("graph convolution needs K >= 1"));
        }
        Ok(())
    }

    fn operator<T: Scalar>(&self, bundle: &LaplacianBundle<T>) -> Arc<CsrMatrix<T>> {
        match self {
            GraphConvKind::Chebyshev { .. } => Arc::clone(&bundle.scaled),
            GraphConvKind::FirstOrder => Arc::clone(&bundle.propagation),
        }
    }
}

/// Multi-channel spectral graph convolution applied frame by frame.
#[derive(Debug, Clone)]
pub struct GraphConvLayer<T> {
    kind: GraphConvKind,
    c_in: usize,
    c_out: usize,
    /// `[K, C_in, C_out]`
    pub(crate) theta: Tensor<T>,
    /// `[C_out]`
    pub(crate) bias: Tensor<T>,
    operator: Arc<CsrMatrix<T>>,
}

impl<T: Scalar> GraphConvLayer<T> {
    pub fn new<R: Rng>(
        kind: GraphConvKind,
        c_in: usize,
        c_out: usize,
        bundle: &LaplacianBundle<T>,
        rng: &mut R,
    ) -> Result<Self> {
        kind.validate()?;
        if c_in == 0 || c_out == 0 {
            return Err(input_err!("graph convolution channels must be >= 1"));
        }
        let k = kind.order();
        Ok(Self {
            kind,
            c_in,
            c_out,
            theta: init::glorot(rng, &[k, c_in, c_out], k * c_in, c_out)?,
            bias: init::constant(&[c_out], 0.0)?,
            operator: kind.operator(bundle),
        })
    }

    /// Replaces the parameters; shapes must match the layer.
    pub fn with_parameters(mut self, theta: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if theta.shape() != self.theta.shape() || bias.shape() != self.bias.shape() {
            return Err(dim_err!(
                "graph conv expects theta {:?} and bias {:?}, got {:?} and {:?}",
                self.theta.shape(),
                self.bias.shape(),
                theta.shape(),
                bias.shape()
            ));
        }
        self.theta = theta;
        self.bias = bias;
        Ok(self)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        vec![("theta".to_string(), self.theta.clone()), ("bias".to_string(), self.bias.clone())]
    }

    pub fn kind(&self) -> GraphConvKind {
        self.kind
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.c_in, self.c_out)
    }

    pub(crate) fn rebind(&mut self, bundle: &LaplacianBundle<T>) {
        self.operator = self.kind.operator(bundle);
    }

    /// `[B, T, n, C_in] → [B, T, n, C_out]`, the same kernel on every frame.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let n = self.operator.rows();
        if s.len() != 4 || s[2] != n || s[3] != self.c_in {
            return Err(dim_err!(
                "graph conv over {n} nodes and {} channels got input {s:?}",
                self.c_in
            ));
        }
        let k = self.kind.order();
        let basis = match self.kind {
            GraphConvKind::FirstOrder => x.node_mix(&self.operator, &self.operator)?,
            GraphConvKind::Chebyshev { .. } => {
                let mut terms = vec![x.clone()];
                if k > 1 {
                    terms.push(x.node_mix(&self.operator, &self.operator)?);
                }
                for j in 2..k {
                    let next = terms[j - 1]
                        .node_mix(&self.operator, &self.operator)?
                        .scale(T::of(2.0))
                        .sub(&terms[j - 2])?;
                    terms.push(next);
                }
                if terms.len() == 1 {
                    terms.pop().expect("one term")
                } else {
                    Tensor::concat(&terms, 3)?
                }
            }
        };
        let weight = self.theta.reshape(&[k * self.c_in, self.c_out])?;
        basis.affine(&weight, Some(&self.bias))
    }
}
