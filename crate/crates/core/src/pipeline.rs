//! Dataset generation, training, evaluation and single-video inference.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{compress, generate_dataset, horizontal_flip, load_dataset, save_dataset, VideoSample, MANIFEST_FILE};
use crate::error::{io_err, MglError, Result};
use crate::head_metrics::{auc, EvalReport, Prediction, VideoScore};
use crate::model::{MglModel, PreparedVideo};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub dir: PathBuf,
    pub videos: usize,
    pub fakes: usize,
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Writes the `train` and `eval` splits under `root` (default: the config's data dir).
pub fn cmd_generate(cfg: &ExperimentConfig, root: Option<&Path>, overwrite: bool) -> Result<Vec<SplitSummary>> {
    cfg.validate()?;
    let root = root.unwrap_or(&cfg.data.dir);
    let specs = cfg.dataset_specs();
    for (split, _) in &specs {
        let dir = split_dir(root, split);
        if dir.exists() {
            if !overwrite {
                return Err(MglError::Dataset {
                    path: dir,
                    reason: "already exists; pass the overwrite flag to replace it".into(),
                });
            }
            if !dir.join(MANIFEST_FILE).exists() {
                return Err(MglError::Dataset { path: dir, reason: "exists but is not a dataset; refusing to delete it".into() });
            }
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }
    let mut out = Vec::new();
    for (split, spec) in &specs {
        let samples = generate_dataset(spec)?;
        let dir = split_dir(root, split);
        save_dataset(&samples, &dir)?;
        let fakes = samples.iter().filter(|s| s.label == 1).count();
        info!("wrote {} {split} videos ({fakes} fake) to {}", samples.len(), dir.display());
        out.push(SplitSummary { split: split.to_string(), dir, videos: samples.len(), fakes });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    pub val_auc: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub seconds: f64,
    pub train_videos: usize,
    pub val_videos: usize,
}

pub struct Trained {
    pub model: MglModel,
    pub store: ParamStore,
    pub summary: TrainSummary,
}

/// Stratified hold-out: `val_fraction` of each class, chosen by `rng`.
fn split_validation(samples: &[VideoSample], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        idx.shuffle(rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn augment(sample: &VideoSample, cfg: &ExperimentConfig, seed: u64) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = if rng.random_bool(cfg.train.flip_prob) { horizontal_flip(sample) } else { sample.clone() };
    if cfg.train.compress_prob > 0.0 && rng.random_bool(cfg.train.compress_prob) {
        s = compress(&s, rng.random_range(0.5..1.0));
    }
    s
}

struct SampleGrad {
    loss: f64,
    grads: Gradients,
}

fn sample_gradient(model: &MglModel, store: &ParamStore, video: &PreparedVideo) -> Result<SampleGrad> {
    let mut g = Graph::new(store);
    let fwd = model.forward(&mut g, video)?;
    let loss = model.loss(&mut g, &fwd, video.label);
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        let culprit = store
            .iter()
            .find(|(_, p)| !p.value.all_finite())
            .map(|(_, p)| format!("parameter {}", p.name))
            .unwrap_or_else(|| "logits".to_string());
        return Err(MglError::NonFinite(format!("loss of {} (first non-finite tensor: {culprit})", video.sample_id)));
    }
    let grads = g.backward(loss).into_params();
    if let Some(name) = grads.first_non_finite(store) {
        return Err(MglError::NonFinite(format!("gradient of {name} on {}", video.sample_id)));
    }
    Ok(SampleGrad { loss: value, grads })
}

/// Mean loss and AUC over prepared videos (AUC is `None` for a single class).
fn validate(model: &MglModel, store: &ParamStore, videos: &[PreparedVideo]) -> Result<(f64, Option<f64>)> {
    let results: Vec<Result<(f64, f64)>> = videos
        .par_iter()
        .map(|v| {
            let mut g = Graph::new(store);
            let fwd = model.forward(&mut g, v)?;
            let loss = model.loss(&mut g, &fwd, v.label);
            Ok((g.value(loss).data()[0], model.video_score(&g, &fwd)?))
        })
        .collect();
    let mut losses = 0.0;
    let mut scores = Vec::with_capacity(videos.len());
    for r in results {
        let (l, s) = r?;
        losses += l;
        scores.push(s);
    }
    let labels: Vec<u8> = videos.iter().map(|v| v.label).collect();
    let a = auc(&scores, &labels).ok();
    Ok((losses / videos.len().max(1) as f64, a))
}

/// Trains from scratch on in-memory samples. Everything random derives from
/// `cfg.seed`; per-sample gradients are computed in parallel and summed in
/// batch order, so results do not depend on the thread count.
pub fn train(cfg: &ExperimentConfig, samples: &[VideoSample]) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(MglError::Config("no training videos".into()));
    }
    let start = Instant::now();
    let (model, mut store) = MglModel::new(&cfg.model, cfg.frame_size(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let (train_idx, val_idx) = split_validation(samples, cfg.train.val_fraction, &mut rng);
    if train_idx.is_empty() {
        return Err(MglError::Config("validation split leaves no training videos".into()));
    }
    let val: Vec<PreparedVideo> = val_idx.iter().map(|&i| model.prepare(&samples[i])).collect::<Result<_>>()?;
    let t = &cfg.train;
    let mut opt = AdamW::new(&store, t.learning_rate, t.weight_decay, t.beta1, t.beta2, t.eps);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order = train_idx.clone();
    for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut norms = 0.0;
        let mut steps = 0;
        for batch in order.chunks(t.batch_size) {
            let aug_seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let results: Vec<Result<SampleGrad>> = batch
                .par_iter()
                .zip(aug_seeds.par_iter())
                .map(|(&i, &s)| {
                    let video = model.prepare(&augment(&samples[i], cfg, s))?;
                    sample_gradient(&model, &store, &video)
                })
                .collect();
            let mut grads = Gradients::zeros_like(&store);
            for r in results {
                let sg = r?;
                total += sg.loss;
                grads.merge(&sg.grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            norms += clip_global_norm(&mut grads, t.grad_clip);
            steps += 1;
            opt.step(&mut store, &grads);
            if let Some((_, p)) = store.iter().find(|(_, p)| !p.value.all_finite()) {
                return Err(MglError::NonFinite(format!("parameter {} after update in epoch {epoch}", p.name)));
            }
        }
        let train_loss = total / order.len() as f64;
        let grad_norm = norms / steps as f64;
        let (val_loss, val_auc) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = validate(&model, &store, &val)?;
            (Some(l), a)
        };
        info!(
            "epoch {epoch}: train loss {train_loss:.4}, grad norm {grad_norm:.3}, val loss {}, val auc {}",
            val_loss.map_or("-".into(), |v| format!("{v:.4}")),
            val_auc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        epochs.push(EpochLog { epoch, train_loss, grad_norm, val_auc, val_loss });
        if let (Some(a), Some(l)) = (val_auc, val_loss) {
            let improved = match &best {
                None => true,
                Some((ba, bl, _, _)) => a > *ba || (a == *ba && l < *bl),
            };
            if improved {
                best = Some((a, l, epoch, store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if t.patience > 0 && since_best >= t.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, _, e, s)) => {
            store = s;
            e
        }
        None => epochs.len(),
    };
    let summary = TrainSummary {
        epochs,
        best_epoch,
        stopped_early,
        seconds: start.elapsed().as_secs_f64(),
        train_videos: train_idx.len(),
        val_videos: val_idx.len(),
    };
    Ok(Trained { model, store, summary })
}

/// Trains on `<data dir>/train` and writes the checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<TrainSummary> {
    let samples = load_dataset(&split_dir(&cfg.data.dir, "train"))?;
    let trained = train(cfg, &samples)?;
    let path = checkpoint.unwrap_or(&cfg.checkpoint);
    let meta = serde_json::to_value(&trained.summary).expect("summary serialises");
    save_checkpoint(path, &cfg.model, cfg.frame_size(), &trained.store, meta)?;
    info!("checkpoint written to {}", path.display());
    Ok(trained.summary)
}

pub fn evaluate(model: &MglModel, store: &ParamStore, samples: &[VideoSample]) -> Result<EvalReport> {
    let scores: Vec<Result<VideoScore>> = samples
        .par_iter()
        .map(|s| {
            let v = model.prepare(s)?;
            Ok(VideoScore { video_id: s.sample_id.clone(), score: model.score(store, &v)?, label: s.label })
        })
        .collect();
    EvalReport::from_scores(scores.into_iter().collect::<Result<_>>()?)
}

pub fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(MglModel, ParamStore)> {
    let (model, mut store) = MglModel::new(&cfg.model, cfg.frame_size(), cfg.seed)?;
    load_checkpoint(checkpoint, &cfg.model, cfg.frame_size(), &mut store)?;
    Ok((model, store))
}

/// Evaluates a checkpoint on a dataset directory (default: `<data dir>/eval`).
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>) -> Result<EvalReport> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let dir = data.map_or_else(|| split_dir(&cfg.data.dir, "eval"), Path::to_path_buf);
    evaluate(&model, &store, &load_dataset(&dir)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub sample_id: String,
    pub label: u8,
    pub fake_probability: f64,
    pub prediction: Prediction,
    /// Each frame scored on its own as a one-frame clip.
    pub frame_scores: Vec<f64>,
    pub embedding_norms: Vec<f64>,
}

pub fn infer(model: &MglModel, store: &ParamStore, sample: &VideoSample) -> Result<Inference> {
    let video = model.prepare(sample)?;
    let mut g = Graph::new(store);
    let fwd = model.forward(&mut g, &video)?;
    let fake = model.video_score(&g, &fwd)?;
    let logits = g.value(fwd.logits);
    let prediction = if logits.shape()[0] == 1 {
        Prediction::from_logits([logits.data()[0], logits.data()[1]])
    } else {
        let p = [1.0 - fake, fake];
        Prediction { logits: [p[0].max(1e-300).ln(), p[1].max(1e-300).ln()], probs: p }
    };
    let emb = g.value(fwd.frame_embeddings);
    let dim = emb.shape()[1];
    let embedding_norms = emb.data().chunks(dim).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut frame_scores = Vec::with_capacity(video.frames.len());
    for t in 0..video.frames.len() {
        let mut g = Graph::new(store);
        let fwd = model.forward_frames(&mut g, &video.frames[t..t + 1])?;
        frame_scores.push(model.video_score(&g, &fwd)?);
    }
    Ok(Inference {
        sample_id: sample.sample_id.clone(),
        label: sample.label,
        fake_probability: fake,
        prediction,
        frame_scores,
        embedding_norms,
    })
}

/// Scores one sample, picked by id, from a dataset directory (default: `<data dir>/eval`).
pub fn cmd_infer(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>, sample_id: &str) -> Result<Inference> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let dir = data.map_or_else(|| split_dir(&cfg.data.dir, "eval"), Path::to_path_buf);
    let samples = load_dataset(&dir)?;
    let sample = samples.iter().find(|s| s.sample_id == sample_id).ok_or_else(|| MglError::Dataset {
        path: dir.clone(),
        reason: format!("no sample with id {sample_id:?}"),
    })?;
    infer(&model, &store, sample)
}
