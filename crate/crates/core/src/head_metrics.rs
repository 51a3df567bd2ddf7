//! Two-way classification head, loss, and video-level detection metrics.
//!
//! Scores are fake-probabilities; a score at or above the threshold is called
//! fake. FAR is the fraction of real videos called fake, FRR the fraction of
//! fake videos called real.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::error::{MglError, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-12;

/// Dense → LayerNorm → ReLU, twice, then a 2-logit layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub hidden: Vec<(Linear, LayerNorm)>,
    pub output: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden_layers: usize, rng: &mut R) -> Self {
        let hidden = (0..hidden_layers)
            .map(|i| {
                (
                    Linear::new(store, &format!("{name}.hidden{i}"), dim, dim, true, rng),
                    LayerNorm::new(store, &format!("{name}.norm{i}"), dim),
                )
            })
            .collect();
        Self { hidden, output: Linear::new(store, &format!("{name}.output"), dim, 2, true, rng) }
    }

    /// `x[B, D]` → logits `[B, 2]`.
    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for (lin, norm) in &self.hidden {
            let h = lin.forward(g, x);
            let h = norm.forward(g, h);
            x = g.relu(h);
        }
        self.output.forward(g, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: [f64; 2],
    /// `(real, fake)`.
    pub probs: [f64; 2],
}

impl Prediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let p = softmax_rows(&Tensor::new([1, 2], logits.to_vec()));
        Self { logits, probs: [p.data()[0], p.data()[1]] }
    }

    pub fn fake_probability(&self) -> f64 {
        self.probs[1]
    }
}

/// Mean of `-ln p[label]` with the log argument floored.
pub fn cross_entropy(preds: &[Prediction], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(MglError::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut total = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        if y > 1 {
            return Err(MglError::Shape(format!("label {y} is not 0 or 1")));
        }
        total -= p.probs[y].max(LOG_FLOOR).ln();
    }
    Ok(total / preds.len() as f64)
}

pub fn video_level_aggregate(frame_scores: &[f64]) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(MglError::Shape("no frame scores to aggregate".into()));
    }
    Ok(frame_scores.iter().sum::<f64>() / frame_scores.len() as f64)
}

fn split_classes(scores: &[f64], labels: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(MglError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MglError::NonFinite("detection scores".into()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &y) in scores.iter().zip(labels) {
        match y {
            0 => neg.push(s),
            1 => pos.push(s),
            _ => return Err(MglError::Shape(format!("label {y} is not 0 or 1"))),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(MglError::UndefinedMetric(format!(
            "needs both classes, got {} fake and {} real",
            pos.len(),
            neg.len()
        )));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    Ok((pos, neg))
}

/// Fraction of (fake, real) pairs ranked correctly, ties counting one half.
/// Computed from mid-ranks, which keeps every intermediate a multiple of ½.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = split_classes(scores, labels)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the mean (i + 1 + j) / 2.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let m = pos.len() as f64;
    let u = rank_sum - m * (m + 1.0) / 2.0;
    Ok(u / (m * neg.len() as f64))
}

pub fn acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(MglError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &y)| (s >= threshold) == (y == 1)).count();
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Scans every distinct score and every midpoint between neighbours, keeping
/// the threshold with the smallest `|FAR − FRR|`; ties go to the smaller
/// `(FAR + FRR) / 2`, then to the smaller threshold.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<EerPoint> {
    let (pos, neg) = split_classes(scores, labels)?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = Vec::with_capacity(2 * distinct.len());
    for (i, &s) in distinct.iter().enumerate() {
        candidates.push(s);
        if let Some(&next) = distinct.get(i + 1) {
            candidates.push(s + (next - s) / 2.0);
        }
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut best: Option<(f64, EerPoint)> = None;
    for t in candidates {
        let far = (neg.len() - neg.partition_point(|&s| s < t)) as f64 / nn;
        let frr = pos.partition_point(|&s| s < t) as f64 / np;
        let gap = (far - frr).abs();
        let point = EerPoint { eer: (far + frr) / 2.0, threshold: t, far, frr };
        let better = match &best {
            None => true,
            Some((g, b)) => gap < *g || (gap == *g && (point.eer < b.eer || (point.eer == b.eer && t < b.threshold))),
        };
        if better {
            best = Some((gap, point));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_videos: usize,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub threshold_at_eer: f64,
    pub acc_at_eer_threshold: f64,
    pub per_video_scores: Vec<VideoScore>,
}

impl EvalReport {
    pub fn from_scores(per_video_scores: Vec<VideoScore>) -> Result<Self> {
        let scores: Vec<f64> = per_video_scores.iter().map(|v| v.score).collect();
        let labels: Vec<u8> = per_video_scores.iter().map(|v| v.label).collect();
        let e = eer(&scores, &labels)?;
        Ok(Self {
            num_videos: scores.len(),
            acc: acc(&scores, &labels, 0.5)?,
            auc: auc(&scores, &labels)?,
            eer: e.eer,
            threshold_at_eer: e.threshold,
            acc_at_eer_threshold: acc(&scores, &labels, e.threshold)?,
            per_video_scores,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
