//! Experiment configuration.
//!
//! A config file is TOML. Its `preset` key (`"desk"` or `"paper"`) supplies a
//! complete set of values; any other keys in the file override the preset
//! field by field. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{ArtifactKind, ArtifactStrengths, DatasetSpec, SyntheticArtifactConfig};
use crate::error::{io_err, MglError, Result};
use crate::frequency::BandCutoffs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Holds `train/` and `eval/` dataset directories.
    pub dir: PathBuf,
    pub num_train: usize,
    pub num_eval: usize,
    pub fake_fraction: f64,
    pub artifact_kinds: Vec<ArtifactKind>,
    pub severity: f64,
    pub frame_height: usize,
    pub frame_width: usize,
    pub frames_per_video: usize,
    pub strengths: ArtifactStrengths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Band cutoffs as fractions of the largest anti-diagonal index.
    pub band_low_end: f64,
    pub band_mid_end: f64,
    /// Standard deviation for random learnable-mask init; 0 starts them at zero.
    pub mask_init_std: f64,
    pub cmt_heads: usize,
    pub cmt_ffn_mult: usize,
    pub landmark_in: usize,
    pub landmark_out: usize,
    pub landmark_layers: usize,
    pub landmark_channels: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub temporal_head_dim: usize,
    pub temporal_ffn_mult: usize,
    pub head_hidden_layers: usize,
    pub use_frequency: bool,
    pub use_landmarks: bool,
    pub use_temporal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation AUC improvement before stopping; 0 disables.
    pub patience: usize,
    /// Fraction of the training set held out for early stopping.
    pub val_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub flip_prob: f64,
    pub compress_prob: f64,
}

impl ExperimentConfig {
    /// CPU-sized defaults: 64×64 frames, 8 per video.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            seed: 7,
            checkpoint: PathBuf::from("runs/desk/model.ckpt"),
            data: DataConfig {
                dir: PathBuf::from("runs/desk/data"),
                num_train: 200,
                num_eval: 50,
                fake_fraction: 0.5,
                artifact_kinds: ArtifactKind::ALL.to_vec(),
                severity: 1.0,
                frame_height: 64,
                frame_width: 64,
                frames_per_video: 8,
                strengths: ArtifactStrengths::default(),
            },
            model: ModelConfig {
                backbone: BackboneConfig::desk(),
                band_low_end: 0.125,
                band_mid_end: 0.25,
                mask_init_std: 0.0,
                cmt_heads: 2,
                cmt_ffn_mult: 2,
                landmark_in: 16,
                landmark_out: 16,
                landmark_layers: 2,
                landmark_channels: 16,
                temporal_layers: 2,
                temporal_heads: 2,
                temporal_head_dim: 12,
                temporal_ffn_mult: 2,
                head_hidden_layers: 2,
                use_frequency: true,
                use_landmarks: true,
                use_temporal: true,
            },
            train: TrainConfig {
                learning_rate: 2e-3,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 4,
                epochs: 50,
                patience: 10,
                val_fraction: 0.1,
                grad_clip: 5.0,
                flip_prob: 0.5,
                compress_prob: 0.0,
            },
        }
    }

    /// Full-size defaults: 320×320 frames, 32 per video, 512 channels.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = "paper".into();
        c.checkpoint = PathBuf::from("runs/paper/model.ckpt");
        c.data.dir = PathBuf::from("runs/paper/data");
        c.data.frame_height = 320;
        c.data.frame_width = 320;
        c.data.frames_per_video = 32;
        c.model = ModelConfig {
            backbone: BackboneConfig::paper(),
            band_low_end: 0.125,
            band_mid_end: 0.25,
            mask_init_std: 0.0,
            cmt_heads: 8,
            cmt_ffn_mult: 4,
            landmark_in: 32,
            landmark_out: 64,
            landmark_layers: 2,
            landmark_channels: 64,
            temporal_layers: 5,
            temporal_heads: 5,
            temporal_head_dim: 512,
            temporal_ffn_mult: 4,
            head_hidden_layers: 2,
            use_frequency: true,
            use_landmarks: true,
            use_temporal: true,
        };
        c.train.learning_rate = 8e-5;
        c.train.epochs = 50;
        c.train.batch_size = 8;
        c.train.compress_prob = 0.5;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(MglError::Config(format!("unknown preset {other:?}; expected \"desk\" or \"paper\""))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| MglError::Config(format!("config is not valid TOML: {e}")))?;
        let name = match user.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(MglError::Config("preset must be a string".into())),
            None => return Err(MglError::Config("config must name a preset (\"desk\" or \"paper\")".into())),
        };
        let base = Self::preset(&name)?;
        let mut merged = toml::Table::try_from(&base).expect("presets serialise");
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| MglError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.data.frame_height, self.data.frame_width)
    }

    pub fn band_cutoffs(&self) -> Result<BandCutoffs> {
        let (h, w) = self.frame_size();
        BandCutoffs::from_fractions(h, w, self.model.band_low_end, self.model.band_mid_end)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MglError::Config(m));
        let d = &self.data;
        if d.frame_height == 0 || d.frame_width == 0 || d.frames_per_video == 0 {
            return bad("frame size and frames_per_video must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.fake_fraction) {
            return bad(format!("fake_fraction {} is outside [0, 1]", d.fake_fraction));
        }
        self.model.backbone.validate()?;
        self.band_cutoffs()?;
        let m = &self.model;
        if m.cmt_heads == 0 || m.model_dim() % m.cmt_heads != 0 {
            return bad(format!("cmt_heads {} must divide the feature width {}", m.cmt_heads, m.model_dim()));
        }
        let positive = [
            m.cmt_ffn_mult,
            m.landmark_in,
            m.landmark_out,
            m.landmark_layers,
            m.landmark_channels,
            m.temporal_layers,
            m.temporal_heads,
            m.temporal_head_dim,
            m.temporal_ffn_mult,
        ];
        if positive.contains(&0) {
            return bad("model widths, heads and layer counts must be positive".into());
        }
        if !(m.mask_init_std >= 0.0) {
            return bad("mask_init_std must be non-negative".into());
        }
        let t = &self.train;
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) || !(t.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return bad("AdamW needs 0 <= beta < 1 and eps > 0".into());
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return bad(format!("val_fraction {} is outside [0, 1)", t.val_fraction));
        }
        for (name, p) in [("flip_prob", t.flip_prob), ("compress_prob", t.compress_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} is outside [0, 1]"));
            }
        }
        if !(t.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative".into());
        }
        Ok(())
    }

    fn artifact_template(&self) -> SyntheticArtifactConfig {
        SyntheticArtifactConfig {
            artifact_kinds: self.data.artifact_kinds.clone(),
            severity: self.data.severity,
            rng_seed: 0,
            frame_size: self.frame_size(),
            frames_per_video: self.data.frames_per_video,
            strengths: self.data.strengths.clone(),
        }
    }

    /// Generator settings for the `train` and `eval` splits. The splits use
    /// distinct seeds derived from the experiment seed.
    pub fn dataset_specs(&self) -> [(&'static str, DatasetSpec); 2] {
        let spec = |name: &str, n, salt: u64| DatasetSpec {
            num_videos: n,
            fake_fraction: self.data.fake_fraction,
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(salt),
            id_prefix: format!("{name}-"),
            template: self.artifact_template(),
        };
        [("train", spec("train", self.data.num_train, 1)), ("eval", spec("eval", self.data.num_eval, 2))]
    }
}

impl ModelConfig {
    /// Width of frame features and frame embeddings.
    pub fn model_dim(&self) -> usize {
        self.backbone.fused_channels
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
