//! Multimodal graph learning for deepfake video detection.
//!
//! Frame level: a spatial and a frequency convolutional branch, fused by a
//! cross-modal transformer with adaptive gates, joined with a graph-attention
//! encoding of 68 facial landmarks. Video level: frames become nodes of a
//! fully connected graph whose edges carry cosine similarities, processed by
//! edge-biased multi-head graph attention and an attention readout, then a
//! two-way classifier.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod frequency;
pub mod fusion_frame;
pub mod gradcheck;
pub mod head_metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod temporal;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{MglError, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
