//! Trainable STGCN layers and the assembled model.

mod block;
mod graph_conv;
mod init;
mod model;
mod temporal;

pub use block::{OutputHead, StConvBlock};
pub use graph_conv::{GraphConvKind, GraphConvLayer};
pub use model::{BlockChannels, ModelConfig, StgcnModel};
pub use temporal::TemporalConvLayer;
