//! Video samples, the on-disk dataset format, a synthetic generator with
//! controllable forgery artifacts, and training-time augmentation.

mod augment;
mod io;
mod synthetic;

pub use augment::{compress, horizontal_flip, random_augment, FLIP_PERMUTATION};
pub use io::{load_dataset, load_manifest, save_dataset, DatasetManifest, ManifestEntry, MANIFEST_FILE};
pub use synthetic::{
    generate_dataset, generate_synthetic_video, landmark_template, ArtifactKind, ArtifactStrengths, DatasetSpec,
    SyntheticArtifactConfig,
};

use crate::error::{MglError, Result};
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 68;
pub const CHANNELS: usize = 3;

/// One video clip: `frames` is `[T, 3, H, W]` in `[0, 1]`, `landmarks` is
/// `[T, 68, 2]` as `(x, y)` pixel-centre coordinates with origin top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub sample_id: String,
    /// 0 real, 1 fake.
    pub label: u8,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f32>,
    pub landmarks: Vec<f32>,
}

impl VideoSample {
    pub fn frame_len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    /// Frame `t` as a `[3, H, W]` tensor.
    pub fn frame(&self, t: usize) -> Tensor {
        let n = self.frame_len();
        let data = self.frames[t * n..(t + 1) * n].iter().map(|&v| v as f64).collect();
        Tensor::new([CHANNELS, self.height, self.width], data)
    }

    /// Landmarks of frame `t` as `[68, 2]`.
    pub fn landmarks_at(&self, t: usize) -> Tensor {
        let n = NUM_LANDMARKS * 2;
        let data = self.landmarks[t * n..(t + 1) * n].iter().map(|&v| v as f64).collect();
        Tensor::new([NUM_LANDMARKS, 2], data)
    }

    fn fail(&self, reason: impl Into<String>) -> MglError {
        MglError::Sample { sample_id: self.sample_id.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(self.fail("video has no frames"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(self.fail("empty frame size"));
        }
        if self.label > 1 {
            return Err(self.fail(format!("label {} is not 0 or 1", self.label)));
        }
        if self.frames.len() != self.num_frames * self.frame_len() {
            return Err(self.fail(format!(
                "frame buffer has {} values, expected {}",
                self.frames.len(),
                self.num_frames * self.frame_len()
            )));
        }
        if self.landmarks.len() != self.num_frames * NUM_LANDMARKS * 2 {
            return Err(self.fail(format!("landmark buffer has {} values", self.landmarks.len())));
        }
        if let Some(i) = self.frames.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(self.fail(format!("pixel value {} at index {i} outside [0, 1]", self.frames[i])));
        }
        for (i, p) in self.landmarks.chunks(2).enumerate() {
            let inside = (0.0..self.width as f32).contains(&p[0]) && (0.0..self.height as f32).contains(&p[1]);
            if !inside {
                return Err(self.fail(format!("landmark {} of frame {} at ({}, {}) is outside the frame", i % 68, i / 68, p[0], p[1])));
            }
        }
        Ok(())
    }
}
