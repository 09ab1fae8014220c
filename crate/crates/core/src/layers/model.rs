use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{prefixed, OutputHead, StConvBlock};
use super::graph_conv::GraphConvKind;
use crate::error::{dim_err, input_err, Result, StgcnError};
use crate::graph::LaplacianBundle;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel triple `(C_in, C_mid, C_out)` of one ST-Conv block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockChannels(pub usize, pub usize, pub usize);

/// Architecture descriptor; everything needed to rebuild a model's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nodes: usize,
    /// History length `M`.
    pub history: usize,
    /// Temporal kernel width `K_t`.
    pub kt: usize,
    pub graph_conv: GraphConvKind,
    pub blocks: Vec<BlockChannels>,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Two blocks with 64-16-64 channels, `M = 12`, `K = K_t = 3`.
    pub fn standard(nodes: usize) -> Self {
        Self {
            nodes,
            history: 12,
            kt: 3,
            graph_conv: GraphConvKind::Chebyshev { k: 3 },
            blocks: vec![BlockChannels(1, 16, 64), BlockChannels(64, 16, 64)],
            layer_norm_eps: 1e-5,
        }
    }

    /// Temporal length after each block.
    pub fn block_lengths(&self) -> Vec<usize> {
        let shrink = 2 * (self.kt.saturating_sub(1));
        let mut m = self.history;
        self.blocks
            .iter()
            .map(|_| {
                m = m.saturating_sub(shrink);
                m
            })
            .collect()
    }

    /// Kernel width of the output collapse conv.
    pub fn head_width(&self) -> usize {
        self.block_lengths().last().copied().unwrap_or(self.history)
    }

    pub fn validate(&self) -> Result<()> {
        self.graph_conv.validate()?;
        if self.nodes == 0 {
            return Err(input_err!("model needs at least one node"));
        }
        if self.kt == 0 {
            return Err(input_err!("K_t must be >= 1"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(input_err!("layer norm eps must be > 0"));
        }
        if self.blocks.is_empty() {
            return Err(input_err!("model needs at least one ST-Conv block"));
        }
        let mut prev = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.0 != prev {
                return Err(input_err!(
                    "block {i} expects {} input channels but receives {prev}",
                    b.0
                ));
            }
            if b.1 == 0 || b.2 == 0 {
                return Err(input_err!("block {i} has a zero channel count"));
            }
            prev = b.2;
        }
        let needed = 2 * (self.kt - 1) * self.blocks.len() + 1;
        if self.history < needed {
            return Err(dim_err!(
                "history M={} too short for {} blocks with K_t={} (need >= {needed})",
                self.history,
                self.blocks.len(),
                self.kt
            ));
        }
        Ok(())
    }
}

/// Stacked ST-Conv blocks plus the output head.
#[derive(Debug, Clone)]
pub struct StgcnModel<T> {
    config: ModelConfig,
    pub(crate) blocks: Vec<StConvBlock<T>>,
    pub(crate) head: OutputHead<T>,
}

fn deep_copy<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::param(t.shape(), t.to_vec()).expect("shape preserved")
}

impl<T: Scalar> StgcnModel<T> {
    /// Initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, bundle: &LaplacianBundle<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if bundle.n() != config.nodes {
            return Err(dim_err!(
                "model configured for {} nodes, graph has {}",
                config.nodes,
                bundle.n()
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = T::of(config.layer_norm_eps);
        let blocks = config
            .blocks
            .iter()
            .map(|b| StConvBlock::new((b.0, b.1, b.2), config.kt, config.graph_conv, bundle, eps, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let last = config.blocks.last().expect("validated nonempty").2;
        let head = OutputHead::new(config.head_width(), last, &mut rng)?;
        Ok(Self { config, blocks, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `[B, M, n, 1] → [B, n, 1]`.
    pub fn forward(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let s = v.shape();
        let expected = [self.config.history, self.config.nodes, 1];
        if s.len() != 4 || s[1..] != expected {
            return Err(dim_err!(
                "model input must be [B, {}, {}, 1], got {s:?}",
                self.config.history,
                self.config.nodes
            ));
        }
        let mut h = v.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        self.head.forward(&h)
    }

    /// Single window: `[M, n, 1] → [n, 1]`.
    pub fn forward_single(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let s = v.shape().to_vec();
        if s.len() != 3 {
            return Err(dim_err!("single-window input must be [M, n, 1], got {s:?}"));
        }
        let batched = v.reshape(&[1, s[0], s[1], s[2]])?;
        self.forward(&batched)?.reshape(&[s[1], 1])
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block{i}"), b.parameters()));
        }
        out.extend(prefixed("head", self.head.parameters()));
        out
    }

    pub fn blocks(&self) -> &[StConvBlock<T>] {
        &self.blocks
    }

    pub fn head(&self) -> &OutputHead<T> {
        &self.head
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Copies values into the parameters; names and shapes must match exactly.
    pub fn load_parameters(&self, values: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        let params = self.parameters();
        if params.len() != values.len() {
            return Err(StgcnError::Input(format!(
                "expected {} parameter tensors, got {}",
                params.len(),
                values.len()
            )));
        }
        for ((name, t), (vname, shape, data)) in params.iter().zip(values) {
            if name != vname || t.shape() != shape.as_slice() || data.len() != t.len() {
                return Err(input_err!(
                    "parameter {vname} {shape:?} does not match {name} {:?}",
                    t.shape()
                ));
            }
        }
        for ((_, t), (_, _, data)) in params.iter().zip(values) {
            t.update_data(|d| d.copy_from_slice(data))?;
        }
        Ok(())
    }

    /// Snapshot of all parameter values.
    pub fn parameter_values(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        self.parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.to_vec()))
            .collect()
    }

    /// Independent copy of the model rebound to `bundle`, with node-indexed
    /// parameters relabeled so new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize], bundle: &LaplacianBundle<T>) -> Result<Self> {
        let n = self.config.nodes;
        if perm.len() != n || bundle.n() != n {
            return Err(dim_err!("permutation of length {} for {n} nodes", perm.len()));
        }
        let mut copy = self.deep_clone();
        for block in &mut copy.blocks {
            block.spatial.rebind(bundle);
            for t in [&mut block.norm_gain, &mut block.norm_bias] {
                let c = t.shape()[1];
                let old = t.to_vec();
                let data = perm.iter().flat_map(|&p| old[p * c..(p + 1) * c].iter().copied()).collect();
                *t = Tensor::param(&[n, c], data)?;
            }
        }
        Ok(copy)
    }

    /// Copy with freshly allocated parameter storage.
    pub fn deep_clone(&self) -> Self {
        let mut copy = self.clone();
        let fix = |l: &mut super::TemporalConvLayer<T>| {
            l.kernel = deep_copy(&l.kernel);
            l.bias = deep_copy(&l.bias);
            l.projection = l.projection.as_ref().map(deep_copy);
        };
        for b in &mut copy.blocks {
            fix(&mut b.lower);
            fix(&mut b.upper);
            b.spatial.theta = deep_copy(&b.spatial.theta);
            b.spatial.bias = deep_copy(&b.spatial.bias);
            b.norm_gain = deep_copy(&b.norm_gain);
            b.norm_bias = deep_copy(&b.norm_bias);
        }
        fix(&mut copy.head.collapse);
        copy.head.w = deep_copy(&copy.head.w);
        copy.head.b = deep_copy(&copy.head.b);
        copy
    }
}
