use rand::Rng;

use super::{VideoSample, CHANNELS, NUM_LANDMARKS};
use crate::frequency::{dct2, idct2};
use crate::tensor::Tensor;

/// Index of each landmark's mirror partner in the 68-point layout.
pub const FLIP_PERMUTATION: [usize; NUM_LANDMARKS] = {
    let mut p = [0usize; NUM_LANDMARKS];
    let mut i = 0;
    while i < NUM_LANDMARKS {
        p[i] = i;
        i += 1;
    }
    let pairs: [(usize, usize); 29] = [
        (0, 16), (1, 15), (2, 14), (3, 13), (4, 12), (5, 11), (6, 10), (7, 9),
        (17, 26), (18, 25), (19, 24), (20, 23), (21, 22),
        (31, 35), (32, 34),
        (36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46),
        (48, 54), (49, 53), (50, 52), (55, 59), (56, 58),
        (60, 64), (61, 63), (65, 67),
    ];
    let mut k = 0;
    while k < pairs.len() {
        p[pairs[k].0] = pairs[k].1;
        p[pairs[k].1] = pairs[k].0;
        k += 1;
    }
    p
};

/// Mirrors every frame left-right. Landmark `x` maps to `W - 1 - x` and point
/// indices are swapped with their mirror partners.
pub fn horizontal_flip(sample: &VideoSample) -> VideoSample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for (src, dst) in sample.frames.chunks(w).zip(out.frames.chunks_mut(w)) {
        for x in 0..w {
            dst[x] = src[w - 1 - x];
        }
    }
    debug_assert_eq!(sample.frames.len() % (h * w), 0);
    for (src, dst) in sample.landmarks.chunks(NUM_LANDMARKS * 2).zip(out.landmarks.chunks_mut(NUM_LANDMARKS * 2)) {
        for (i, &j) in FLIP_PERMUTATION.iter().enumerate() {
            dst[2 * i] = (w - 1) as f32 - src[2 * j];
            dst[2 * i + 1] = src[2 * j + 1];
        }
    }
    out
}

const BLOCK: usize = 8;

/// JPEG-like degradation: each 8×8 block of each channel is transformed,
/// quantised with step `(1 - quality) * 0.05 * (1 + u + v)`, and inverted.
/// `quality` is in `[0, 1]`; 1 leaves the frames untouched.
pub fn compress(sample: &VideoSample, quality: f64) -> VideoSample {
    let mut out = sample.clone();
    let base = (1.0 - quality.clamp(0.0, 1.0)) * 0.05;
    if base == 0.0 {
        return out;
    }
    let (h, w) = (sample.height, sample.width);
    for plane in out.frames.chunks_mut(h * w) {
        for by in (0..h).step_by(BLOCK) {
            for bx in (0..w).step_by(BLOCK) {
                let (bh, bw) = (BLOCK.min(h - by), BLOCK.min(w - bx));
                let block = Tensor::from_fn([bh, bw], |i| plane[(by + i / bw) * w + bx + i % bw] as f64);
                let mut coef = dct2(&block).expect("non-empty block");
                for (i, c) in coef.data_mut().iter_mut().enumerate() {
                    let step = base * (1 + i / bw + i % bw) as f64;
                    *c = (*c / step).round() * step;
                }
                let rec = idct2(&coef).expect("non-empty block");
                for (i, v) in rec.data().iter().enumerate() {
                    plane[(by + i / bw) * w + bx + i % bw] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    debug_assert_eq!(out.frames.len() % (CHANNELS * h * w), 0);
    out
}

/// Flip with probability one half, then compress at a random quality with
/// probability `compress_prob`.
pub fn random_augment<R: Rng + ?Sized>(sample: &VideoSample, compress_prob: f64, rng: &mut R) -> VideoSample {
    let mut s = if rng.random_bool(0.5) { horizontal_flip(sample) } else { sample.clone() };
    if compress_prob > 0.0 && rng.random_bool(compress_prob.min(1.0)) {
        s = compress(&s, rng.random_range(0.5..1.0));
    }
    s
}
