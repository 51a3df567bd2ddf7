//! Frame-level fusion of spatial, frequency and landmark modalities.

pub mod landmark;
pub mod multimodal;
pub mod sff;

pub use landmark::{build_landmark_graph, LandmarkGat, LandmarkGraph, LandmarkOutput};
pub use multimodal::{FusionOutput, MultimodalFusion};
pub use sff::{CmtOutput, CrossModalTransformer, GatedFusion, MultiHeadAttention, SffState};
