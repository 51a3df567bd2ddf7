//! Video-level graph learning over frames.
//!
//! Frames are nodes of a complete graph. Edge features are cosine
//! similarities of the frame embeddings, and they enter each attention head
//! as a scalar that scales the value-projected neighbour inside the key:
//! `α_ij = softmax_j(q_i · (k_j + E_ij v_j))` with `q = X Wq / √D`,
//! `k = X Wk / √D`, `v = X Wv`, and head output `Σ_j α_ij v_j / √D`.
//! No positional signal is added, so everything is equivariant under a joint
//! permutation of frames and edges.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{MglError, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_FLOOR: f64 = 1e-12;

/// `E = F̂ F̂ᵀ` for row-normalised `F[T, D]`.
pub fn edge_features(embeddings: &Tensor) -> Result<Tensor> {
    let (t, d) = match embeddings.shape() {
        [t, d] if *t > 0 => (*t, *d),
        s => return Err(MglError::Shape(format!("frame embeddings must be [T>0, D], got {s:?}"))),
    };
    if !embeddings.all_finite() {
        return Err(MglError::NonFinite("frame embeddings".into()));
    }
    let mut unit = embeddings.clone();
    for row in unit.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
    }
    let e = unit.matmul(&unit.t());
    debug_assert_eq!(e.shape(), &[t, t]);
    Ok(e)
}

/// Same as [`edge_features`] but differentiable through the embeddings.
pub fn edge_features_var(g: &mut Graph, embeddings: Var) -> Var {
    let unit = g.l2_normalize_rows(embeddings, NORM_FLOOR);
    let ut = g.transpose(unit);
    g.matmul(unit, ut)
}

#[derive(Clone, Debug)]
pub struct GraphAttentionLayer {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub heads: usize,
    pub head_dim: usize,
    pub dim: usize,
}

pub struct LayerOutput {
    pub states: Var,
    /// One `[T, T]` matrix per head.
    pub attention: Vec<Var>,
}

impl GraphAttentionLayer {
    /// Each head projects `dim → head_dim`; concatenated heads map back to `dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || heads == 0 || head_dim == 0 || ffn_mult == 0 {
            return Err(MglError::Config("temporal layer widths, heads and FFN multiplier must be positive".into()));
        }
        let wide = heads * head_dim;
        let mut proj = |what: &str| store.add(format!("{name}.{what}"), xavier_uniform([dim, wide], dim, head_dim, rng), true);
        let (query, key, value) = (proj("query"), proj("key"), proj("value"));
        Ok(Self {
            query,
            key,
            value,
            output: Linear::new(store, &format!("{name}.output"), wide, dim, true, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim * ffn_mult, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            heads,
            head_dim,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, edges: Var) -> Result<LayerOutput> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.dim {
            return Err(MglError::Shape(format!("temporal layer expects [T>0, {}], got {shape:?}", self.dim)));
        }
        let t = shape[0];
        if g.shape(edges) != [t, t] {
            return Err(MglError::Shape(format!("edge matrix must be [{t}, {t}], got {:?}", g.shape(edges))));
        }
        let inv = 1.0 / (self.dim as f64).sqrt();
        let (wq, wk, wv) = (g.param(self.query), g.param(self.key), g.param(self.value));
        let q = g.matmul(x, wq);
        let q = g.scale(q, inv);
        let k = g.matmul(x, wk);
        let k = g.scale(k, inv);
        let v = g.matmul(x, wv);
        let dh = self.head_dim;
        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let vt = g.transpose(vh);
            let qk = g.matmul(qh, kt);
            let qv = g.matmul(qh, vt);
            let biased = g.mul(edges, qv);
            let logits = g.add(qk, biased);
            if !g.value(logits).all_finite() {
                return Err(MglError::NonFinite(format!("temporal attention logits, head {h}")));
            }
            let a = g.softmax_rows(logits);
            let agg = g.matmul(a, vh);
            outs.push(g.scale(agg, inv));
            attention.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let mixed = self.output.forward(g, cat);
        let r1 = g.add(x, mixed);
        let h1 = self.norm1.forward(g, r1);
        let f = self.ffn.forward(g, h1);
        let r2 = g.add(h1, f);
        let states = self.norm2.forward(g, r2);
        Ok(LayerOutput { states, attention })
    }
}

/// Softmax-weighted sum of node states scored against a learnable query.
#[derive(Clone, Debug)]
pub struct AttentionReadout {
    pub query: ParamId,
}

pub struct ReadoutOutput {
    /// `[D]`.
    pub pooled: Var,
    /// `[1, T]`, sums to one.
    pub weights: Var,
}

impl AttentionReadout {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self { query: store.add(format!("{name}.query"), xavier_uniform([dim, 1], dim, 1, rng), false) }
    }

    pub fn forward(&self, g: &mut Graph, states: Var) -> ReadoutOutput {
        let shape = g.shape(states);
        let (t, d) = (shape[0], shape[1]);
        let q = g.param(self.query);
        let s = g.matmul(states, q);
        let s = g.reshape(s, &[1, t]);
        let weights = g.softmax_rows(s);
        let pooled = g.matmul(weights, states);
        let pooled = g.reshape(pooled, &[d]);
        ReadoutOutput { pooled, weights }
    }
}

pub struct VideoRepresentation {
    pub pooled: Var,
    pub node_states: Var,
    pub readout_weights: Var,
    /// Per layer, per head.
    pub attention: Vec<Vec<Var>>,
    pub edges: Var,
}

#[derive(Clone, Debug)]
pub struct TemporalGraph {
    pub layers: Vec<GraphAttentionLayer>,
    pub readout: AttentionReadout,
    pub dim: usize,
}

impl TemporalGraph {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(MglError::Config("temporal graph needs at least one layer".into()));
        }
        let layers = (0..layers)
            .map(|i| GraphAttentionLayer::new(store, &format!("{name}.layer{i}"), dim, heads, head_dim, ffn_mult, rng))
            .collect::<Result<Vec<_>>>()?;
        let readout = AttentionReadout::new(store, &format!("{name}.readout"), dim, rng);
        Ok(Self { layers, readout, dim })
    }

    /// `frames[T, D]` → pooled video vector. Edges are computed once from the
    /// input embeddings and shared by every layer.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<VideoRepresentation> {
        let shape = g.shape(frames);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(MglError::Shape(format!("temporal graph expects [T>0, D], got {shape:?}")));
        }
        let edges = edge_features_var(g, frames);
        self.forward_with_edges(g, frames, edges)
    }

    pub fn forward_with_edges(&self, g: &mut Graph, frames: Var, edges: Var) -> Result<VideoRepresentation> {
        let mut h = frames;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(g, h, edges)?;
            h = out.states;
            attention.push(out.attention);
        }
        let r = self.readout.forward(g, h);
        Ok(VideoRepresentation { pooled: r.pooled, node_states: h, readout_weights: r.weights, attention, edges })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient_with, check_param_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edges_of_identical_and_orthogonal_embeddings() {
        let same = Tensor::from_fn([4, 3], |i| [1.0, -2.0, 0.5][i % 3]);
        let e = edge_features(&same).unwrap();
        assert!(e.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let ortho = Tensor::new([2, 2], vec![3.0, 0.0, 0.0, 0.5]);
        assert_eq!(edge_features(&ortho).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        let zero = edge_features(&Tensor::zeros([2, 3])).unwrap();
        assert!(zero.all_finite());
        assert!(edge_features(&Tensor::zeros([0, 3])).is_err());
    }

    #[test]
    fn edges_match_pairwise_cosine() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::randn([5, 8], 1.0, &mut r);
        let e = edge_features(&f).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
                for k in 0..8 {
                    dot += f.at2(i, k) * f.at2(j, k);
                    ni += f.at2(i, k) * f.at2(i, k);
                    nj += f.at2(j, k) * f.at2(j, k);
                }
                assert!((e.at2(i, j) - dot / (ni.sqrt() * nj.sqrt())).abs() < 1e-6);
            }
        }
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let fv = g.constant(f);
        let ev = edge_features_var(&mut g, fv);
        assert!(g.value(ev).max_abs_diff(&e) < 1e-12);
    }

    fn hand_layer(store: &mut ParamStore) -> GraphAttentionLayer {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let layer = GraphAttentionLayer::new(store, "tg", 4, 1, 4, 1, &mut r).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let t = Tensor::uniform(store.get(id).shape().to_vec(), -0.8, 0.8, &mut r);
            store.set(id, t);
        }
        layer
    }

    #[test]
    fn three_frame_layer_matches_hand_trace() {
        let mut store = ParamStore::new();
        let layer = hand_layer(&mut store);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([3, 4], 1.0, &mut r);
        let e = edge_features(&x).unwrap();
        let mut g = Graph::new(&store);
        let (xv, ev) = (g.constant(x.clone()), g.constant(e.clone()));
        let out = layer.forward(&mut g, xv, ev).unwrap();

        let lin = |w: &Tensor, i: usize, c: usize| (0..4).map(|k| x.at2(i, k) * w.at2(k, c)).sum::<f64>();
        let (wq, wk, wv) = (store.get(layer.query), store.get(layer.key), store.get(layer.value));
        let s = 0.5; // 1/√4
        let mut heads = [[0.0; 4]; 3];
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| s * lin(wq, i, c) * (s * lin(wk, j, c) + e.at2(i, j) * lin(wv, j, c))).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..3 {
                let a = (logits[j] - m).exp() / z;
                assert!((g.value(out.attention[0]).at2(i, j) - a).abs() < 1e-12);
                for c in 0..4 {
                    heads[i][c] += a * lin(wv, j, c) * s;
                }
            }
        }
        let ln = |v: [f64; 4], gamma: &Tensor, beta: &Tensor| {
            let mu = v.iter().sum::<f64>() / 4.0;
            let var = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / 4.0;
            let mut o = [0.0; 4];
            for c in 0..4 {
                o[c] = (v[c] - mu) / (var + LayerNorm::EPS).sqrt() * gamma.data()[c] + beta.data()[c];
            }
            o
        };
        let dense = |v: &[f64], w: &Tensor, b: &Tensor, out: usize| -> Vec<f64> {
            (0..out).map(|c| b.data()[c] + v.iter().enumerate().map(|(k, a)| a * w.at2(k, c)).sum::<f64>()).collect()
        };
        for i in 0..3 {
            let mixed = dense(&heads[i], store.get(layer.output.w), store.get(layer.output.b.unwrap()), 4);
            let mut r1 = [0.0; 4];
            for c in 0..4 {
                r1[c] = x.at2(i, c) + mixed[c];
            }
            let h1 = ln(r1, store.get(layer.norm1.gamma), store.get(layer.norm1.beta));
            let up = dense(&h1, store.get(layer.ffn.up.w), store.get(layer.ffn.up.b.unwrap()), 4);
            let up: Vec<f64> = up.into_iter().map(|v| v.max(0.0)).collect();
            let down = dense(&up, store.get(layer.ffn.down.w), store.get(layer.ffn.down.b.unwrap()), 4);
            let mut r2 = [0.0; 4];
            for c in 0..4 {
                r2[c] = h1[c] + down[c];
            }
            let expect = ln(r2, store.get(layer.norm2.gamma), store.get(layer.norm2.beta));
            for c in 0..4 {
                assert!((g.value(out.states).at2(i, c) - expect[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_frame_has_unit_attention_and_identity_readout() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let tg = TemporalGraph::new(&mut store, "tg", 6, 2, 2, 3, 2, &mut r).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::randn([1, 6], 1.0, &mut r));
        let out = tg.forward(&mut g, x).unwrap();
        for layer in &out.attention {
            for a in layer {
                assert_eq!(g.value(*a).data(), &[1.0]);
            }
        }
        assert_eq!(g.value(out.readout_weights).data(), &[1.0]);
        assert!(g.value(out.pooled).max_abs_diff(&g.value(out.node_states).clone().reshape([6])) < 1e-15);
    }

    #[test]
    fn readout_matches_softmax_weighted_sum() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let ro = AttentionReadout::new(&mut store, "ro", 5, &mut r);
        let h = Tensor::randn([6, 5], 1.0, &mut r);
        let mut g = Graph::new(&store);
        let hv = g.constant(h.clone());
        let out = ro.forward(&mut g, hv);
        let q = store.get(ro.query);
        let s: Vec<f64> = (0..6).map(|i| (0..5).map(|c| h.at2(i, c) * q.data()[c]).sum()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        for c in 0..5 {
            let want: f64 = (0..6).map(|i| (s[i] - m).exp() / z * h.at2(i, c)).sum();
            assert!((g.value(out.pooled).data()[c] - want).abs() < 1e-12);
        }
        let same = Tensor::from_fn([4, 5], |i| (i % 5) as f64 - 1.5);
        let sv = g.constant(same);
        let out = ro.forward(&mut g, sv);
        assert!(g.value(out.pooled).max_abs_diff(&Tensor::new([5], vec![-1.5, -0.5, 0.5, 1.5, 2.5])) < 1e-12);
    }

    #[test]
    fn joint_permutation_leaves_pooled_vector_unchanged() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let tg = TemporalGraph::new(&mut store, "tg", 8, 3, 2, 4, 2, &mut r).unwrap();
        let x = Tensor::randn([5, 8], 1.0, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_fn([5, 8], |i| x.at2(perm[i / 8], i % 8));
        let mut g = Graph::new(&store);
        let (a, b) = (g.constant(x), g.constant(xp));
        let oa = tg.forward(&mut g, a).unwrap();
        let ob = tg.forward(&mut g, b).unwrap();
        assert!(g.value(oa.pooled).max_abs_diff(g.value(ob.pooled)) < 1e-10);
        for i in 0..5 {
            for c in 0..8 {
                let d = g.value(ob.node_states).at2(i, c) - g.value(oa.node_states).at2(perm[i], c);
                assert!(d.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_gradients_pass_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let tg = TemporalGraph::new(&mut store, "tg", 4, 1, 1, 4, 2, &mut r).unwrap();
        let x = Tensor::randn([3, 4], 1.0, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let cfg = GradCheck { max_entries: None, ..GradCheck::default() };
        let rep = check_param_gradients(&store, &ids, &cfg, |g| {
            let xv = g.constant(x.clone());
            tg.forward(g, xv).unwrap().pooled
        });
        assert!(rep.passes(1e-4), "{rep:?}");
        let rep = check_input_gradient_with(&store, &x, 1, |g, xv| tg.forward(g, xv).unwrap().pooled);
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
