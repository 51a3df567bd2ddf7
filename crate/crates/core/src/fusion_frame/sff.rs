//! Spatial-frequency fusion: bi-directional cross-modal attention followed by
//! adaptive sigmoid gating.
//!
//! Feature maps arrive as `[C, h*w]` and are attended as `h*w` tokens of width
//! `C`. Each direction is a pre-norm transformer block:
//! `Z = Z₁ + FFN(LN₃(Z₁))` with `Z₁ = X_q + MHA(LN₁(X_q), LN₂(X_kv), LN₂(X_kv))`,
//! so the unnormalised input stream passes straight through.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{MglError, Result};
use crate::nn::{zero_param, FeedForward, LayerNorm, Linear};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(MglError::Config(format!("attention width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
        })
    }

    /// `query[N, C]`, `context[M, C]` → (`[N, C]`, one `[N, M]` attention matrix per head).
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> (Var, Vec<Var>) {
        let dim = self.query.out_dim;
        let dh = dim / self.heads;
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, context);
        let v = self.value.forward(g, context);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.scale(logits, scale);
            let a = g.softmax_rows(logits);
            outs.push(g.matmul(a, vh));
            attns.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.output.forward(g, cat), attns)
    }
}

#[derive(Clone, Debug)]
struct Direction {
    attn: MultiHeadAttention,
    norm_query: LayerNorm,
    norm_context: LayerNorm,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
}

impl Direction {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_mult: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_query: LayerNorm::new(store, &format!("{name}.norm_query"), dim),
            norm_context: LayerNorm::new(store, &format!("{name}.norm_context"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim * ffn_mult, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
        })
    }

    fn forward(&self, g: &mut Graph, query: Var, context: Var) -> (Var, Vec<Var>) {
        let q = self.norm_query.forward(g, query);
        let kv = self.norm_context.forward(g, context);
        let (a, attn) = self.attn.forward(g, q, kv);
        let z1 = g.add(query, a);
        let n = self.norm_ffn.forward(g, z1);
        let f = self.ffn.forward(g, n);
        (g.add(z1, f), attn)
    }
}

pub struct CmtOutput {
    /// `[C, h*w]`
    pub z_spatial: Var,
    /// `[C, h*w]`
    pub z_frequency: Var,
    pub attn_spatial: Vec<Var>,
    pub attn_frequency: Vec<Var>,
}

/// Spatial tokens query frequency tokens, and vice versa, with separate weights.
#[derive(Clone, Debug)]
pub struct CrossModalTransformer {
    spatial: Direction,
    frequency: Direction,
    pub dim: usize,
}

impl CrossModalTransformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_mult: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            spatial: Direction::new(store, &format!("{name}.spatial"), dim, heads, ffn_mult, rng)?,
            frequency: Direction::new(store, &format!("{name}.frequency"), dim, heads, ffn_mult, rng)?,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x_spatial: Var, x_frequency: Var) -> Result<CmtOutput> {
        let (ss, sf) = (g.shape(x_spatial), g.shape(x_frequency));
        if ss != sf || ss.len() != 2 || ss[0] != self.dim {
            return Err(MglError::Shape(format!("cross-modal inputs {ss:?} and {sf:?} must both be [{}, N]", self.dim)));
        }
        let ts = g.transpose(x_spatial);
        let tf = g.transpose(x_frequency);
        let (zs, attn_spatial) = self.spatial.forward(g, ts, tf);
        let (zf, attn_frequency) = self.frequency.forward(g, tf, ts);
        Ok(CmtOutput {
            z_spatial: g.transpose(zs),
            z_frequency: g.transpose(zf),
            attn_spatial,
            attn_frequency,
        })
    }

    /// Zeroes the attention output projections and feed-forward outputs, reducing
    /// each direction to the identity on its own stream.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for d in [&self.spatial, &self.frequency] {
            zero_param(store, d.attn.output.w);
            if let Some(b) = d.attn.output.b {
                zero_param(store, b);
            }
            d.ffn.zero_output(store);
        }
    }

    pub fn spatial_attention(&self) -> &MultiHeadAttention {
        &self.spatial.attn
    }
}

pub struct SffState {
    pub gate_spatial: Var,
    pub gate_frequency: Var,
    pub fused: Var,
}

/// `X = G_s ⊙ Z_s + G_f ⊙ Z_f` with `G = σ(P [Z_s ∥ Z_f] + b)` from two independent 1×1 maps.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub spatial_weight: ParamId,
    pub spatial_bias: ParamId,
    pub frequency_weight: ParamId,
    pub frequency_bias: ParamId,
}

impl GatedFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            spatial_weight: store.add(format!("{name}.spatial.weight"), he_normal([dim, 2 * dim], 2 * dim, rng), true),
            spatial_bias: store.add(format!("{name}.spatial.bias"), Tensor::zeros([dim]), false),
            frequency_weight: store.add(format!("{name}.frequency.weight"), he_normal([dim, 2 * dim], 2 * dim, rng), true),
            frequency_bias: store.add(format!("{name}.frequency.bias"), Tensor::zeros([dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, z_spatial: Var, z_frequency: Var) -> Result<SffState> {
        if g.shape(z_spatial) != g.shape(z_frequency) {
            return Err(MglError::Shape("gated fusion inputs differ in shape".into()));
        }
        let cat = g.concat_rows(&[z_spatial, z_frequency]);
        let gate = |g: &mut Graph, w: ParamId, b: ParamId| {
            let w = g.param(w);
            let b = g.param(b);
            let y = g.matmul(w, cat);
            let y = g.add_col_bias(y, b);
            g.sigmoid(y)
        };
        let gate_spatial = gate(g, self.spatial_weight, self.spatial_bias);
        let gate_frequency = gate(g, self.frequency_weight, self.frequency_bias);
        let a = g.mul(gate_spatial, z_spatial);
        let b = g.mul(gate_frequency, z_frequency);
        let fused = g.add(a, b);
        Ok(SffState { gate_spatial, gate_frequency, fused })
    }
}
