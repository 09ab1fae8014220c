use rand::Rng;

use super::graph_conv::{GraphConvKind, GraphConvLayer};
use super::init;
use super::temporal::TemporalConvLayer;
use crate::error::{dim_err, Result};
use crate::graph::LaplacianBundle;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn prefixed<T>(prefix: &str, params: Vec<(String, Tensor<T>)>) -> Vec<(String, Tensor<T>)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Temporal-spatial-temporal sandwich followed by layer normalization.
///
/// With channels `(C_in, C_mid, C_out)` the lower temporal conv maps
/// `C_in → C_out`, the graph conv squeezes `C_out → C_mid`, and the upper
/// temporal conv restores `C_mid → C_out`.
#[derive(Debug, Clone)]
pub struct StConvBlock<T> {
    pub(crate) lower: TemporalConvLayer<T>,
    pub(crate) spatial: GraphConvLayer<T>,
    pub(crate) upper: TemporalConvLayer<T>,
    /// `[n, C_out]`
    pub(crate) norm_gain: Tensor<T>,
    /// `[n, C_out]`
    pub(crate) norm_bias: Tensor<T>,
    eps: T,
}

impl<T: Scalar> StConvBlock<T> {
    pub fn new<R: Rng>(
        channels: (usize, usize, usize),
        kt: usize,
        kind: GraphConvKind,
        bundle: &LaplacianBundle<T>,
        eps: T,
        rng: &mut R,
    ) -> Result<Self> {
        let (c_in, c_mid, c_out) = channels;
        let n = bundle.n();
        Ok(Self {
            lower: TemporalConvLayer::new(kt, c_in, c_out, rng)?,
            spatial: GraphConvLayer::new(kind, c_out, c_mid, bundle, rng)?,
            upper: TemporalConvLayer::new(kt, c_mid, c_out, rng)?,
            norm_gain: init::constant(&[n, c_out], 1.0)?,
            norm_bias: init::constant(&[n, c_out], 0.0)?,
            eps,
        })
    }

    /// Parameters prefixed by sub-layer: `lower.*`, `spatial.*`, `upper.*`,
    /// `norm.gain`, `norm.bias`.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = prefixed("lower", self.lower.parameters());
        out.extend(prefixed("spatial", self.spatial.parameters()));
        out.extend(prefixed("upper", self.upper.parameters()));
        out.push(("norm.gain".to_string(), self.norm_gain.clone()));
        out.push(("norm.bias".to_string(), self.norm_bias.clone()));
        out
    }

    pub fn channels(&self) -> (usize, usize, usize) {
        (self.lower.channels().0, self.spatial.channels().1, self.upper.channels().1)
    }

    /// `[B, M, n, C_in] → [B, M − 2(K_t − 1), n, C_out]`.
    pub fn forward(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let kt = self.lower.kernel_width();
        let m = v.shape().get(1).copied().unwrap_or(0);
        if m < 2 * (kt - 1) + 1 {
            return Err(dim_err!(
                "ST-Conv block needs M >= {} for K_t={kt}, got M={m}",
                2 * (kt - 1) + 1
            ));
        }
        let h = self.lower.forward(v)?;
        let h = self.spatial.forward(&h)?.relu();
        let h = self.upper.forward(&h)?;
        h.layer_norm(&self.norm_gain, &self.norm_bias, self.eps)
    }
}

/// Collapses the remaining time axis with one gated conv, then maps the
/// channels of each node to a scalar: `v̂ = Z w + b`.
#[derive(Debug, Clone)]
pub struct OutputHead<T> {
    pub(crate) collapse: TemporalConvLayer<T>,
    /// `[C, 1]`
    pub(crate) w: Tensor<T>,
    /// `[1]`
    pub(crate) b: Tensor<T>,
}

impl<T: Scalar> OutputHead<T> {
    pub fn new<R: Rng>(remaining: usize, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            collapse: TemporalConvLayer::new(remaining, channels, channels, rng)?,
            w: init::glorot(rng, &[channels, 1], channels, 1)?,
            b: init::constant(&[1], 0.0)?,
        })
    }

    /// `[B, T, n, C] → [B, n, 1]`; `T` must equal the collapse width.
    /// `collapse.*`, `w`, `b`.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = prefixed("collapse", self.collapse.parameters());
        out.push(("w".to_string(), self.w.clone()));
        out.push(("b".to_string(), self.b.clone()));
        out
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.collapse.kernel_width() {
            return Err(dim_err!(
                "output head collapses exactly {} steps, got input {s:?}",
                self.collapse.kernel_width()
            ));
        }
        let z = self.collapse.forward(x)?;
        let (b, n, c) = (s[0], s[2], s[3]);
        z.reshape(&[b, n, c])?.affine(&self.w, Some(&self.b))
    }
}
