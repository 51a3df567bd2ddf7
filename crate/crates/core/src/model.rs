//! The full detector: per-frame spatial, frequency and landmark features fused
//! into one embedding per frame, a temporal graph over the frames, and a
//! two-way head.
//!
//! Switches in [`ModelConfig`] remove branches:
//! - without frequency, the spatial map goes straight to the landmark fusion;
//! - without landmarks, the fusion mask covers only the feature channels;
//! - without the temporal graph, the head scores every frame and the video
//!   score is the mean frame score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_rows, Graph, Var};
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::data::VideoSample;
use crate::error::{MglError, Result};
use crate::frequency::{build_band_masks, BandCutoffs, FrequencyModule};
use crate::fusion_frame::{build_landmark_graph, CrossModalTransformer, GatedFusion, LandmarkGat, LandmarkGraph, MultimodalFusion};
use crate::head_metrics::{video_level_aggregate, ClassifierHead};
use crate::params::ParamStore;
use crate::temporal::TemporalGraph;
use crate::tensor::Tensor;

/// Pixels enter the network as `(v - PIXEL_MEAN) / PIXEL_SCALE`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_SCALE: f64 = 0.25;

/// Inputs of one frame with everything parameter-free precomputed.
pub struct PreparedFrame {
    /// `[3, H*W]`.
    pub image: Tensor,
    pub spectra: Option<[Tensor; 3]>,
    /// Built from landmarks rescaled to `[-1, 1]`.
    pub landmarks: Option<LandmarkGraph>,
}

pub struct PreparedVideo {
    pub sample_id: String,
    pub label: u8,
    pub frames: Vec<PreparedFrame>,
}

pub struct VideoForward {
    /// `[1, 2]` with the temporal graph, `[T, 2]` without.
    pub logits: Var,
    /// `[T, C]`.
    pub frame_embeddings: Var,
}

#[derive(Clone, Debug)]
pub struct MglModel {
    pub config: ModelConfig,
    pub frame_size: (usize, usize),
    pub spatial: Backbone,
    pub frequency: Option<FrequencyBranch>,
    pub landmark_gat: Option<LandmarkGat>,
    pub fusion: MultimodalFusion,
    pub temporal: Option<TemporalGraph>,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug)]
pub struct FrequencyBranch {
    pub module: FrequencyModule,
    pub backbone: Backbone,
    pub cmt: CrossModalTransformer,
    pub gates: GatedFusion,
}

impl MglModel {
    pub fn new(config: &ModelConfig, frame_size: (usize, usize), seed: u64) -> Result<(Self, ParamStore)> {
        config.backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dim = config.model_dim();
        let spatial = Backbone::new(&mut store, "spatial_backbone", &config.backbone, frame_size, &mut rng)?;
        let (gh, gw) = spatial.output_grid();
        let frequency = if config.use_frequency {
            let (h, w) = frame_size;
            let cutoffs = BandCutoffs::from_fractions(h, w, config.band_low_end, config.band_mid_end)?;
            let mut masks = build_band_masks(h, w, cutoffs)?;
            if config.mask_init_std > 0.0 {
                masks.randomize_learnable(config.mask_init_std, &mut rng);
            }
            let module = FrequencyModule::new(&mut store, "frequency", &masks, &mut rng);
            let backbone = Backbone::new(&mut store, "frequency_backbone", &config.backbone, frame_size, &mut rng)?;
            let cmt = CrossModalTransformer::new(&mut store, "cmt", dim, config.cmt_heads, config.cmt_ffn_mult, &mut rng)?;
            let gates = GatedFusion::new(&mut store, "gates", dim, &mut rng);
            Some(FrequencyBranch { module, backbone, cmt, gates })
        } else {
            None
        };
        let landmark_gat = if config.use_landmarks {
            Some(LandmarkGat::new(
                &mut store,
                "landmark_gat",
                config.landmark_in,
                config.landmark_out,
                config.landmark_layers,
                &mut rng,
            )?)
        } else {
            None
        };
        let lmk = config.use_landmarks.then_some((config.landmark_out, config.landmark_channels));
        let fusion = MultimodalFusion::new(&mut store, "fusion", dim, gh * gw, lmk, &mut rng);
        let temporal = if config.use_temporal {
            Some(TemporalGraph::new(
                &mut store,
                "temporal",
                dim,
                config.temporal_layers,
                config.temporal_heads,
                config.temporal_head_dim,
                config.temporal_ffn_mult,
                &mut rng,
            )?)
        } else {
            None
        };
        let head = ClassifierHead::new(&mut store, "head", dim, config.head_hidden_layers, &mut rng);
        let model = Self { config: config.clone(), frame_size, spatial, frequency, landmark_gat, fusion, temporal, head };
        if let Some(f) = &model.frequency {
            // Both directions start as the identity; the fused map is then the gated sum of the backbones.
            f.cmt.zero_residual_branches(&mut store);
        }
        Ok((model, store))
    }

    pub fn prepare(&self, sample: &VideoSample) -> Result<PreparedVideo> {
        if (sample.height, sample.width) != self.frame_size {
            return Err(MglError::Sample {
                sample_id: sample.sample_id.clone(),
                reason: format!(
                    "frame size {}x{} does not match the model's {}x{}",
                    sample.height, sample.width, self.frame_size.0, self.frame_size.1
                ),
            });
        }
        let (h, w) = self.frame_size;
        let mut frames = Vec::with_capacity(sample.num_frames);
        for t in 0..sample.num_frames {
            let pixels = sample.frame(t).reshape([3, h * w]);
            let image = pixels.map(|v| (v - PIXEL_MEAN) / PIXEL_SCALE);
            let spectra = match &self.frequency {
                Some(f) => Some(f.module.spectra(&image.clone().reshape([3, h, w]))?),
                None => None,
            };
            let landmarks = if self.landmark_gat.is_some() {
                let lm = sample.landmarks_at(t);
                let scaled = Tensor::from_fn([lm.shape()[0], 2], |i| {
                    let extent = if i % 2 == 0 { w } else { h };
                    2.0 * lm.data()[i] / (extent.max(2) - 1) as f64 - 1.0
                });
                Some(build_landmark_graph(&scaled).map_err(|e| MglError::Sample {
                    sample_id: sample.sample_id.clone(),
                    reason: format!("frame {t}: {e}"),
                })?)
            } else {
                None
            };
            frames.push(PreparedFrame { image, spectra, landmarks });
        }
        Ok(PreparedVideo { sample_id: sample.sample_id.clone(), label: sample.label, frames })
    }

    /// One frame → `[C]` embedding.
    pub fn frame_embedding(&self, g: &mut Graph, frame: &PreparedFrame) -> Result<Var> {
        let image = g.constant(frame.image.clone());
        let xs = self.spatial.forward(g, image)?;
        let x_sff = match (&self.frequency, &frame.spectra) {
            (Some(f), Some(spectra)) => {
                let fimg = f.module.forward_spectra(g, spectra);
                let xf = f.backbone.forward(g, fimg)?;
                let z = f.cmt.forward(g, xs, xf)?;
                f.gates.forward(g, z.z_spatial, z.z_frequency)?.fused
            }
            (None, _) => xs,
            (Some(_), None) => return Err(MglError::Shape("frame was prepared without spectra".into())),
        };
        let x_lmk = match (&self.landmark_gat, &frame.landmarks) {
            (Some(gat), Some(graph)) => Some(gat.forward(g, graph)?.x_lmk),
            (None, _) => None,
            (Some(_), None) => return Err(MglError::Shape("frame was prepared without landmarks".into())),
        };
        let out = self.fusion.forward(g, x_sff, x_lmk)?;
        let e = out.embedding;
        if !g.value(e).all_finite() {
            return Err(MglError::NonFinite("frame embedding".into()));
        }
        Ok(e)
    }

    pub fn forward(&self, g: &mut Graph, video: &PreparedVideo) -> Result<VideoForward> {
        if video.frames.is_empty() {
            return Err(MglError::Sample { sample_id: video.sample_id.clone(), reason: "video has no frames".into() });
        }
        self.forward_frames(g, &video.frames)
    }

    /// Forward over any non-empty run of frames treated as one clip.
    pub fn forward_frames(&self, g: &mut Graph, frames: &[PreparedFrame]) -> Result<VideoForward> {
        if frames.is_empty() {
            return Err(MglError::Shape("no frames to score".into()));
        }
        let dim = self.config.model_dim();
        let mut rows = Vec::with_capacity(frames.len());
        for f in frames {
            let e = self.frame_embedding(g, f)?;
            rows.push(g.reshape(e, &[1, dim]));
        }
        let frame_embeddings = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
        let logits = match &self.temporal {
            Some(t) => {
                let rep = t.forward(g, frame_embeddings)?;
                let pooled = g.reshape(rep.pooled, &[1, dim]);
                self.head.forward(g, pooled)
            }
            None => self.head.forward(g, frame_embeddings),
        };
        Ok(VideoForward { logits, frame_embeddings })
    }

    /// Cross-entropy of a forward pass against the video label. Without the
    /// temporal graph every frame carries the video label.
    pub fn loss(&self, g: &mut Graph, fwd: &VideoForward, label: u8) -> Var {
        let rows = g.shape(fwd.logits)[0];
        g.softmax_cross_entropy(fwd.logits, &vec![label as usize; rows])
    }

    /// Fake-probability of the video.
    pub fn video_score(&self, g: &Graph, fwd: &VideoForward) -> Result<f64> {
        let probs = softmax_rows(g.value(fwd.logits));
        let fake: Vec<f64> = probs.data().chunks(2).map(|r| r[1]).collect();
        video_level_aggregate(&fake)
    }

    pub fn score(&self, store: &ParamStore, video: &PreparedVideo) -> Result<f64> {
        let mut g = Graph::new(store);
        let fwd = self.forward(&mut g, video)?;
        self.video_score(&g, &fwd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::data::{generate_synthetic_video, ArtifactKind, SyntheticArtifactConfig};

    fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.data.frame_height = 32;
        c.data.frame_width = 32;
        c.data.frames_per_video = 3;
        c
    }

    fn sample(c: &ExperimentConfig, label: u8) -> VideoSample {
        let mut s = SyntheticArtifactConfig::new(vec![ArtifactKind::Spatial], 9);
        s.frame_size = c.frame_size();
        s.frames_per_video = c.data.frames_per_video;
        generate_synthetic_video(&s, label).unwrap()
    }

    #[test]
    fn every_branch_combination_runs() {
        let base = tiny_config();
        for mask in 0..8u8 {
            let mut c = base.clone();
            c.model.use_frequency = mask & 1 != 0;
            c.model.use_landmarks = mask & 2 != 0;
            c.model.use_temporal = mask & 4 != 0;
            let (model, store) = MglModel::new(&c.model, c.frame_size(), 1).unwrap();
            let v = model.prepare(&sample(&c, 1)).unwrap();
            let mut g = Graph::new(&store);
            let fwd = model.forward(&mut g, &v).unwrap();
            let rows = if c.model.use_temporal { 1 } else { 3 };
            assert_eq!(g.shape(fwd.logits), vec![rows, 2]);
            let s = model.video_score(&g, &fwd).unwrap();
            assert!((0.0..=1.0).contains(&s));
            let loss = model.loss(&mut g, &fwd, 1);
            let grads = g.backward(loss).into_params();
            assert!(grads.first_non_finite(&store).is_none());
        }
    }

    #[test]
    fn rejects_mismatched_frame_size() {
        let c = tiny_config();
        let (model, _) = MglModel::new(&c.model, (64, 64), 1).unwrap();
        assert!(matches!(model.prepare(&sample(&c, 0)), Err(MglError::Sample { .. })));
    }
}
