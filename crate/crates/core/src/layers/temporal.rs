use rand::Rng;

use super::init;
use crate::error::{dim_err, input_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gated causal temporal convolution with a residual path.
///
/// A width-`K_t` valid convolution along time produces `[P Q]` with `2·C_out`
/// channels; the output is `(P + r) ⊙ σ(Q)` where `r` is the input cropped to
/// the last `M − K_t + 1` steps, linearly projected when `C_in ≠ C_out`.
#[derive(Debug, Clone)]
pub struct TemporalConvLayer<T> {
    kt: usize,
    c_in: usize,
    c_out: usize,
    /// `[K_t, C_in, 2·C_out]`
    pub(crate) kernel: Tensor<T>,
    /// `[2·C_out]`
    pub(crate) bias: Tensor<T>,
    /// `[C_in, C_out]`, present iff `C_in ≠ C_out`.
    pub(crate) projection: Option<Tensor<T>>,
}

impl<T: Scalar> TemporalConvLayer<T> {
    pub fn new<R: Rng>(kt: usize, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        if kt == 0 || c_in == 0 || c_out == 0 {
            return Err(input_err!(
                "temporal conv needs K_t, C_in, C_out >= 1 (got {kt}, {c_in}, {c_out})"
            ));
        }
        let kernel = init::glorot(rng, &[kt, c_in, 2 * c_out], kt * c_in, 2 * c_out)?;
        let projection = if c_in != c_out {
            Some(init::glorot(rng, &[c_in, c_out], c_in, c_out)?)
        } else {
            None
        };
        Ok(Self {
            kt,
            c_in,
            c_out,
            kernel,
            bias: init::constant(&[2 * c_out], 0.0)?,
            projection,
        })
    }

    /// `kernel`, `bias` and, when present, `projection`.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("kernel".to_string(), self.kernel.clone()), ("bias".to_string(), self.bias.clone())];
        if let Some(p) = &self.projection {
            out.push(("projection".to_string(), p.clone()));
        }
        out
    }

    pub fn kernel_width(&self) -> usize {
        self.kt
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.c_in, self.c_out)
    }

    /// Replaces the parameters; shapes must match the layer.
    pub fn with_parameters(
        mut self,
        kernel: Tensor<T>,
        bias: Tensor<T>,
        projection: Option<Tensor<T>>,
    ) -> Result<Self> {
        let proj_ok = match (&self.projection, &projection) {
            (Some(a), Some(b)) => a.shape() == b.shape(),
            (None, None) => true,
            _ => false,
        };
        if kernel.shape() != self.kernel.shape() || bias.shape() != self.bias.shape() || !proj_ok {
            return Err(dim_err!(
                "temporal conv parameters do not match K_t={}, C_in={}, C_out={}",
                self.kt,
                self.c_in,
                self.c_out
            ));
        }
        self.kernel = kernel;
        self.bias = bias;
        self.projection = projection;
        Ok(self)
    }

    /// `[B, M, n, C_in] → [B, M − K_t + 1, n, C_out]`.
    pub fn forward(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let s = y.shape();
        if s.len() != 4 || s[3] != self.c_in {
            return Err(dim_err!(
                "temporal conv with {} input channels got {s:?}",
                self.c_in
            ));
        }
        let m = s[1];
        if m < self.kt {
            return Err(dim_err!(
                "temporal length M={m} shorter than kernel width K_t={}",
                self.kt
            ));
        }
        let t_out = m - self.kt + 1;
        let weight = self.kernel.reshape(&[self.kt * self.c_in, 2 * self.c_out])?;
        let pq = y.unfold_time(self.kt)?.affine(&weight, Some(&self.bias))?;
        let cropped = y.narrow(1, self.kt - 1, t_out)?;
        let residual = match &self.projection {
            Some(w) => cropped.linear(w)?,
            None => cropped,
        };
        pq.glu(Some(&residual))
    }
}
