//! Frequency pathway: orthonormal 2-D DCT, anti-diagonal band masks, learnable
//! band reweighting, and the 12→3 channel synthesis feeding the frequency backbone.
//!
//! Each colour channel is transformed, multiplied by `M_b + σ(S_b)` for the four
//! bands (low, mid, high, all), and brought back to the spatial domain by the
//! inverse DCT. The twelve reconstructions are stacked band-major: index
//! `band * 3 + channel`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{MglError, Result};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NUM_BANDS: usize = 4;
pub const BAND_NAMES: [&str; NUM_BANDS] = ["low", "mid", "high", "all"];

/// Orthonormal DCT-II matrix: `D[k][i] = a_k cos(π (2i+1) k / 2n)`.
pub fn dct_matrix(n: usize) -> Tensor {
    let nf = n as f64;
    Tensor::from_fn([n, n], |idx| {
        let (k, i) = (idx / n, idx % n);
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        a * (PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

fn check_image(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] if *h >= 1 && *w >= 1 => Ok((*h, *w)),
        s => Err(MglError::Shape(format!("expected a non-empty H×W image, got {s:?}"))),
    }
}

/// Type-II orthonormal 2-D DCT of an `H×W` image.
pub fn dct2(image: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image(image)?;
    Ok(dct_matrix(h).matmul(image).matmul(&dct_matrix(w).t()))
}

/// Inverse of [`dct2`] (type-III).
pub fn idct2(spectrum: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image(spectrum)?;
    Ok(dct_matrix(h).t().matmul(spectrum).matmul(&dct_matrix(w)))
}

/// Exclusive bounds `(low, up)` on `i + j` for the low, mid and high bands:
/// an entry is selected iff `low < i + j < up`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandCutoffs {
    pub low: (i64, i64),
    pub mid: (i64, i64),
    pub high: (i64, i64),
}

impl BandCutoffs {
    /// Splits `s = i + j ∈ [0, s_max]` into `[0, f₁·s_max)`, `[f₁·s_max, f₂·s_max)`, `[f₂·s_max, s_max]`.
    pub fn from_fractions(h: usize, w: usize, low_end: f64, mid_end: f64) -> Result<Self> {
        if !(0.0 < low_end && low_end < mid_end && mid_end < 1.0) {
            return Err(MglError::Config(format!("band fractions must satisfy 0 < {low_end} < {mid_end} < 1")));
        }
        let s_max = (h + w - 2) as f64;
        let a = (low_end * s_max).ceil() as i64;
        let b = (mid_end * s_max).ceil() as i64;
        Ok(Self { low: (-1, a), mid: (a - 1, b), high: (b - 1, s_max as i64 + 1) })
    }

    /// `[0, s_max/8)`, `[s_max/8, s_max/4)`, `[s_max/4, s_max]`.
    pub fn default_for(h: usize, w: usize) -> Self {
        Self::from_fractions(h, w, 0.125, 0.25).expect("default fractions are valid")
    }

    pub fn bands(&self) -> [(i64, i64); 3] {
        [self.low, self.mid, self.high]
    }

    /// Rejects empty ranges, overlaps, gaps, and incomplete coverage of `[0, s_max]`.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        for (name, (lo, up)) in ["low", "mid", "high"].iter().zip(self.bands()) {
            if lo >= up {
                return Err(MglError::Config(format!("{name} band has low {lo} >= up {up}")));
            }
        }
        if self.mid.0 != self.low.1 - 1 || self.high.0 != self.mid.1 - 1 {
            return Err(MglError::Config(format!("band cutoffs overlap or leave a gap: {self:?}")));
        }
        let s_max = (h + w) as i64 - 2;
        if self.low.0 >= 0 || self.high.1 <= s_max {
            return Err(MglError::Config(format!("band cutoffs {self:?} do not cover 0..={s_max}")));
        }
        Ok(())
    }
}

/// Binary mask with ones where `low < i + j < up`.
pub fn band_mask(h: usize, w: usize, (low, up): (i64, i64)) -> Tensor {
    Tensor::from_fn([h, w], |idx| {
        let s = (idx / w + idx % w) as i64;
        if low < s && s < up {
            1.0
        } else {
            0.0
        }
    })
}

/// Fixed band masks plus the initial values of their learnable companions.
#[derive(Clone, Debug)]
pub struct BandMaskSet {
    pub height: usize,
    pub width: usize,
    pub cutoffs: BandCutoffs,
    /// low, mid, high, all.
    pub fixed: [Tensor; NUM_BANDS],
    pub learnable: [Tensor; NUM_BANDS],
}

pub fn build_band_masks(height: usize, width: usize, cutoffs: BandCutoffs) -> Result<BandMaskSet> {
    if height == 0 || width == 0 {
        return Err(MglError::Shape("band masks need H, W >= 1".into()));
    }
    cutoffs.validate(height, width)?;
    let fixed = [
        band_mask(height, width, cutoffs.low),
        band_mask(height, width, cutoffs.mid),
        band_mask(height, width, cutoffs.high),
        Tensor::ones([height, width]),
    ];
    let learnable = std::array::from_fn(|_| Tensor::zeros([height, width]));
    Ok(BandMaskSet { height, width, cutoffs, fixed, learnable })
}

impl BandMaskSet {
    /// Replaces the zero init of the learnable maps with `N(0, std²)` draws.
    pub fn randomize_learnable<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for m in &mut self.learnable {
            *m = Tensor::randn([self.height, self.width], std, rng);
        }
    }

    /// `M_b + σ(S_b)` for each band.
    pub fn effective(&self) -> [Tensor; NUM_BANDS] {
        std::array::from_fn(|b| self.fixed[b].zip_map(&self.learnable[b], |m, s| m + sigmoid(s)))
    }
}

/// Per-band spatial reconstructions, `[12, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyStack {
    pub bands: Tensor,
}

impl FrequencyStack {
    pub fn channel(&self, band: usize, colour: usize) -> &[f64] {
        let s = self.bands.shape();
        let n = s[1] * s[2];
        let idx = band * 3 + colour;
        &self.bands.data()[idx * n..(idx + 1) * n]
    }
}

fn check_frame(frame: &Tensor, h: usize, w: usize) -> Result<()> {
    if frame.shape() != [3, h, w] {
        return Err(MglError::Shape(format!("expected a 3×{h}×{w} frame, got {:?}", frame.shape())));
    }
    Ok(())
}

fn channel(frame: &Tensor, c: usize) -> Tensor {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    Tensor::new([h, w], frame.data()[c * h * w..(c + 1) * h * w].to_vec())
}

/// `y_{b,c} = idct2(dct2(x_c) ⊙ (M_b + σ(S_b)))`, stacked band-major.
pub fn frequency_decompose(frame: &Tensor, masks: &BandMaskSet) -> Result<FrequencyStack> {
    let (h, w) = (masks.height, masks.width);
    check_frame(frame, h, w)?;
    let eff = masks.effective();
    let mut data = Vec::with_capacity(12 * h * w);
    let spectra: Vec<Tensor> = (0..3).map(|c| dct2(&channel(frame, c))).collect::<Result<_>>()?;
    for m in &eff {
        for s in &spectra {
            data.extend_from_slice(idct2(&s.zip_map(m, |a, b| a * b))?.data());
        }
    }
    Ok(FrequencyStack { bands: Tensor::new([12, h, w], data) })
}

/// Pointwise 12→3 channel mixing: `out[c] = Σ_k weights[c,k] · stack[k] + bias[c]`.
pub fn fm_synthesize(stack: &FrequencyStack, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = stack.bands.shape();
    if s.len() != 3 || s[0] != 12 {
        return Err(MglError::Shape(format!("frequency stack must be 12×H×W, got {s:?}")));
    }
    if weights.shape() != [3, 12] || bias.shape() != [3] {
        return Err(MglError::Shape("mixer must be 3×12 weights and 3 biases".into()));
    }
    let (h, w) = (s[1], s[2]);
    let flat = stack.bands.clone().reshape([12, h * w]);
    let mut out = weights.matmul(&flat);
    for c in 0..3 {
        out.data_mut()[c * h * w..(c + 1) * h * w].iter_mut().for_each(|x| *x += bias.data()[c]);
    }
    Ok(out.reshape([3, h, w]))
}

/// The learnable frequency module: band maps `S_b` and the 12→3 mixer.
#[derive(Clone, Debug)]
pub struct FrequencyModule {
    pub height: usize,
    pub width: usize,
    fixed: [Tensor; NUM_BANDS],
    pub learnable: [ParamId; NUM_BANDS],
    pub mix_weight: ParamId,
    pub mix_bias: ParamId,
    basis_h: Tensor,
    basis_w: Tensor,
}

impl FrequencyModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, masks: &BandMaskSet, rng: &mut R) -> Self {
        let learnable = std::array::from_fn(|b| {
            store.add(format!("{prefix}.mask.{}", BAND_NAMES[b]), masks.learnable[b].clone(), false)
        });
        let mix_weight = store.add(format!("{prefix}.mix.weight"), xavier_uniform([3, 12], 12, 3, rng), true);
        let mix_bias = store.add(format!("{prefix}.mix.bias"), Tensor::zeros([3]), false);
        Self {
            height: masks.height,
            width: masks.width,
            fixed: masks.fixed.clone(),
            learnable,
            mix_weight,
            mix_bias,
            basis_h: dct_matrix(masks.height),
            basis_w: dct_matrix(masks.width),
        }
    }

    /// Per-channel DCT spectra of a frame. They carry no parameters, so callers may cache them.
    pub fn spectra(&self, frame: &Tensor) -> Result<[Tensor; 3]> {
        check_frame(frame, self.height, self.width)?;
        let hw = self.height * self.width;
        let mut out = std::array::from_fn(|_| Tensor::zeros([0]));
        for (c, slot) in out.iter_mut().enumerate() {
            let x = Tensor::new([self.height, self.width], frame.data()[c * hw..(c + 1) * hw].to_vec());
            *slot = self.basis_h.matmul(&x).matmul(&self.basis_w.t());
        }
        Ok(out)
    }

    fn effective_masks(&self, g: &mut Graph) -> [Var; NUM_BANDS] {
        let hw = self.height * self.width;
        std::array::from_fn(|b| {
            let s = g.param(self.learnable[b]);
            let s = g.sigmoid(s);
            let s = g.reshape(s, &[1, hw]);
            let m = g.constant(self.fixed[b].clone().reshape([1, hw]));
            g.add(m, s)
        })
    }

    fn idct2_var(&self, g: &mut Graph, spectrum: Var) -> Var {
        let left = g.constant(self.basis_h.t());
        let right = g.constant(self.basis_w.clone());
        let y = g.matmul(left, spectrum);
        g.matmul(y, right)
    }

    /// Differentiable band decomposition, `[12, H*W]`.
    pub fn decompose(&self, g: &mut Graph, spectra: &[Tensor; 3]) -> Var {
        let (h, w) = (self.height, self.width);
        let eff = self.effective_masks(g);
        let mut rows = Vec::with_capacity(12);
        for &m in &eff {
            let m = g.reshape(m, &[h, w]);
            for s in spectra {
                let s = g.constant(s.clone());
                let masked = g.mul(s, m);
                let y = self.idct2_var(g, masked);
                rows.push(g.reshape(y, &[1, h * w]));
            }
        }
        g.concat_rows(&rows)
    }

    /// Differentiable 12→3 mixing of a `[12, H*W]` stack.
    pub fn synthesize(&self, g: &mut Graph, stack: Var) -> Var {
        let w = g.param(self.mix_weight);
        let b = g.param(self.mix_bias);
        let y = g.matmul(w, stack);
        g.add_col_bias(y, b)
    }

    /// Frequency image `[3, H*W]` computed as decompose-then-synthesize.
    pub fn forward_explicit(&self, g: &mut Graph, frame: &Tensor) -> Result<Var> {
        let spectra = self.spectra(frame)?;
        let stack = self.decompose(g, &spectra);
        Ok(self.synthesize(g, stack))
    }

    /// Same map as [`Self::forward_explicit`], reordered by linearity so only three
    /// inverse transforms run: `out_c = idct2(Σ_k S_k ⊙ Σ_b w[c, 3b+k] (M_b + σ(S_b))) + bias_c`.
    pub fn forward_spectra(&self, g: &mut Graph, spectra: &[Tensor; 3]) -> Var {
        let (h, w) = (self.height, self.width);
        let hw = h * w;
        let eff = self.effective_masks(g);
        let eff = g.concat_rows(&eff);
        let mix = g.param(self.mix_weight);
        let mut acc: Option<Var> = None;
        for (k, s) in spectra.iter().enumerate() {
            let wk = g.select_cols(mix, &[k, 3 + k, 6 + k, 9 + k]);
            let kern = g.matmul(wk, eff);
            let mut rep = Vec::with_capacity(3 * hw);
            for _ in 0..3 {
                rep.extend_from_slice(s.data());
            }
            let rep = g.constant(Tensor::new([3, hw], rep));
            let term = g.mul(kern, rep);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        let mixed = acc.expect("three channels");
        let mut rows = Vec::with_capacity(3);
        for c in 0..3 {
            let row = g.slice_rows(mixed, c, 1);
            let row = g.reshape(row, &[h, w]);
            let y = self.idct2_var(g, row);
            rows.push(g.reshape(y, &[1, hw]));
        }
        let out = g.concat_rows(&rows);
        let b = g.param(self.mix_bias);
        g.add_col_bias(out, b)
    }

    pub fn forward(&self, g: &mut Graph, frame: &Tensor) -> Result<Var> {
        let spectra = self.spectra(frame)?;
        Ok(self.forward_spectra(g, &spectra))
    }
}
