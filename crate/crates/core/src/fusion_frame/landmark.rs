//! Landmark graph and the graph attention network over it.
//!
//! Edges carry a Gaussian kernel of pairwise Euclidean distance with a
//! per-instance bandwidth (the mean pairwise distance). Inside each attention
//! layer the kernel enters as a log-bias, so `α_jk ∝ w_jk · exp(e_jk)`: closer
//! landmarks receive more attention for equal feature affinity.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{MglError, Result};
use crate::nn::Linear;
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BANDWIDTH_FLOOR: f64 = 1e-6;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkGraph {
    /// `[n, 2]` node coordinates.
    pub coords: Tensor,
    /// `[n, n]`, `exp(-d² / 2σ̂²)`.
    pub edge_weights: Tensor,
    /// `ln` of the edge weights, computed directly as `-d² / 2σ̂²`.
    pub log_edge_weights: Tensor,
    pub bandwidth: f64,
}

impl LandmarkGraph {
    pub fn num_nodes(&self) -> usize {
        self.coords.shape()[0]
    }
}

/// Builds the kernel graph over `landmarks[n, 2]`.
pub fn build_landmark_graph(landmarks: &Tensor) -> Result<LandmarkGraph> {
    let n = match landmarks.shape() {
        [n, 2] if *n > 0 => *n,
        s => return Err(MglError::Shape(format!("landmarks must be [n, 2], got {s:?}"))),
    };
    if !landmarks.all_finite() {
        return Err(MglError::NonFinite("landmark coordinates".into()));
    }
    let p = landmarks.data();
    let mut sq = Tensor::zeros([n, n]);
    let mut total = 0.0;
    for j in 0..n {
        for k in 0..n {
            let dx = p[2 * j] - p[2 * k];
            let dy = p[2 * j + 1] - p[2 * k + 1];
            let d2 = dx * dx + dy * dy;
            sq.data_mut()[j * n + k] = d2;
            if j < k {
                total += d2.sqrt();
            }
        }
    }
    let pairs = n * (n - 1) / 2;
    let mean = if pairs > 0 { total / pairs as f64 } else { 0.0 };
    let bandwidth = mean.max(BANDWIDTH_FLOOR);
    let denom = 2.0 * bandwidth * bandwidth;
    let log_edge_weights = sq.map(|d2| -d2 / denom);
    let edge_weights = log_edge_weights.map(f64::exp);
    Ok(LandmarkGraph { coords: landmarks.clone(), edge_weights, log_edge_weights, bandwidth })
}

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub linear: Linear,
    pub attn_src: ParamId,
    pub attn_dst: ParamId,
}

impl GatLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, &format!("{name}.linear"), in_dim, out_dim, true, rng),
            attn_src: store.add(format!("{name}.attn_src"), xavier_uniform([out_dim, 1], out_dim, 1, rng), true),
            attn_dst: store.add(format!("{name}.attn_dst"), xavier_uniform([out_dim, 1], out_dim, 1, rng), true),
        }
    }

    /// `h[n, d_in]` → (`ReLU(α · Linear(h))`, `α[n, n]`).
    pub fn forward(&self, g: &mut Graph, h: Var, log_w: Var) -> (Var, Var) {
        let wh = self.linear.forward(g, h);
        let n = g.shape(wh)[0];
        let a_src = g.param(self.attn_src);
        let a_dst = g.param(self.attn_dst);
        let s = g.matmul(wh, a_src);
        let s = g.reshape(s, &[n]);
        let d = g.matmul(wh, a_dst);
        let d = g.reshape(d, &[n]);
        let e = g.outer_add(s, d);
        let e = g.leaky_relu(e, LEAKY_SLOPE);
        let logits = g.add(e, log_w);
        let alpha = g.softmax_rows(logits);
        let agg = g.matmul(alpha, wh);
        (g.relu(agg), alpha)
    }
}

pub struct LandmarkOutput {
    /// `[d_out]` mean over nodes of the last layer.
    pub x_lmk: Var,
    pub attention: Vec<Var>,
    pub node_states: Var,
}

/// Coordinates → `d_in` embedding → `layers` attention layers of width `d_out` → mean readout.
#[derive(Clone, Debug)]
pub struct LandmarkGat {
    pub embed: Linear,
    pub layers: Vec<GatLayer>,
    pub out_dim: usize,
}

impl LandmarkGat {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 || in_dim == 0 || out_dim == 0 {
            return Err(MglError::Config("landmark GAT needs positive widths and at least one layer".into()));
        }
        let embed = Linear::new(store, &format!("{name}.embed"), 2, in_dim, true, rng);
        let layers = (0..layers)
            .map(|i| GatLayer::new(store, &format!("{name}.layer{i}"), if i == 0 { in_dim } else { out_dim }, out_dim, rng))
            .collect();
        Ok(Self { embed, layers, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, graph: &LandmarkGraph) -> Result<LandmarkOutput> {
        let coords = g.constant(graph.coords.clone());
        let h = self.embed.forward(g, coords);
        self.forward_features(g, h, graph)
    }

    /// Runs the attention layers on precomputed node features `h[n, d_in]`.
    pub fn forward_features(&self, g: &mut Graph, mut h: Var, graph: &LandmarkGraph) -> Result<LandmarkOutput> {
        let log_w = g.constant(graph.log_edge_weights.clone());
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, alpha) = layer.forward(g, h, log_w);
            h = next;
            attention.push(alpha);
        }
        let x_lmk = g.mean_rows(h);
        if !g.value(x_lmk).all_finite() {
            return Err(MglError::NonFinite("landmark GAT output".into()));
        }
        Ok(LandmarkOutput { x_lmk, attention, node_states: h })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(31)
    }

    fn random_landmarks(n: usize, r: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform([n, 2], 0.0, 64.0, r)
    }

    #[test]
    fn unit_diagonal_symmetry_and_translation_invariance() {
        let mut r = rng();
        let lm = random_landmarks(68, &mut r);
        let gph = build_landmark_graph(&lm).unwrap();
        for j in 0..68 {
            assert_eq!(gph.edge_weights.at2(j, j), 1.0);
            for k in 0..68 {
                assert_eq!(gph.edge_weights.at2(j, k), gph.edge_weights.at2(k, j));
                assert!(gph.edge_weights.at2(j, k) > 0.0 && gph.edge_weights.at2(j, k) <= 1.0);
            }
        }
        let shifted = Tensor::from_fn([68, 2], |i| lm.data()[i] + if i % 2 == 0 { 3.0 } else { -7.0 });
        let g2 = build_landmark_graph(&shifted).unwrap();
        assert!(g2.edge_weights.max_abs_diff(&gph.edge_weights) < 1e-12);
    }

    #[test]
    fn collinear_points_match_hand_kernel() {
        let lm = Tensor::new([4, 2], vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let gph = build_landmark_graph(&lm).unwrap();
        // Mean pairwise distance (1+1+1+2+2+3)/6 = 5/3, so w(d) = exp(-9 d² / 50).
        assert!((gph.bandwidth - 5.0 / 3.0).abs() < 1e-12);
        let w = |d: f64| (-9.0 * d * d / 50.0).exp();
        for j in 0..4 {
            for k in 0..4 {
                let d = (j as f64 - k as f64).abs();
                assert!((gph.edge_weights.at2(j, k) - w(d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_landmarks_use_floor() {
        let lm = Tensor::full([68, 2], 5.0);
        let gph = build_landmark_graph(&lm).unwrap();
        assert_eq!(gph.bandwidth, BANDWIDTH_FLOOR);
        assert!(gph.edge_weights.data().iter().all(|&v| v == 1.0));
        assert!(build_landmark_graph(&Tensor::zeros([3, 3])).is_err());
        let mut bad = Tensor::zeros([3, 2]);
        bad.data_mut()[1] = f64::NAN;
        assert!(matches!(build_landmark_graph(&bad), Err(MglError::NonFinite(_))));
    }

    #[test]
    fn readout_is_permutation_invariant() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let gat = LandmarkGat::new(&mut store, "lgat", 8, 6, 2, &mut r).unwrap();
        let lm = random_landmarks(68, &mut r);
        let perm: Vec<usize> = (0..68).rev().map(|i| (i * 7) % 68).collect();
        let permuted = Tensor::from_fn([68, 2], |i| lm.data()[2 * perm[i / 2] + i % 2]);
        let mut g = Graph::new(&store);
        let a = gat.forward(&mut g, &build_landmark_graph(&lm).unwrap()).unwrap();
        let b = gat.forward(&mut g, &build_landmark_graph(&permuted).unwrap()).unwrap();
        assert!(g.value(a.x_lmk).max_abs_diff(g.value(b.x_lmk)) < 1e-12);
        assert_eq!(g.value(a.x_lmk).shape(), &[6]);
    }

    #[test]
    fn three_node_layer_matches_hand_aggregation() {
        let mut store = ParamStore::new();
        let gat = LandmarkGat::new(&mut store, "lgat", 2, 2, 1, &mut rng()).unwrap();
        let layer = &gat.layers[0];
        store.set(layer.linear.w, Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        store.set(layer.attn_src, Tensor::new([2, 1], vec![1.0, 0.0]));
        store.set(layer.attn_dst, Tensor::new([2, 1], vec![0.0, 1.0]));
        let feats = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let lm = Tensor::new([3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let gph = build_landmark_graph(&lm).unwrap();

        let mut g = Graph::new(&store);
        let h = g.constant(feats.clone());
        let out = gat.forward_features(&mut g, h, &gph).unwrap();

        // Hand trace: e_jk = LeakyReLU(h_j[0] + h_k[1]); α_jk ∝ w_jk e^{e_jk}; H_j = ReLU(Σ_k α_jk h_k).
        let src = [1.0, 0.0, 1.0];
        let dst = [0.0, 1.0, 1.0];
        let mut expect = [[0.0; 2]; 3];
        for j in 0..3 {
            let un: Vec<f64> = (0..3)
                .map(|k| {
                    let e: f64 = src[j] + dst[k];
                    let e = if e > 0.0 { e } else { 0.2 * e };
                    gph.edge_weights.at2(j, k) * e.exp()
                })
                .collect();
            let z: f64 = un.iter().sum();
            for k in 0..3 {
                for c in 0..2 {
                    expect[j][c] += un[k] / z * feats.at2(k, c);
                }
            }
        }
        let mean = [(expect[0][0] + expect[1][0] + expect[2][0]) / 3.0, (expect[0][1] + expect[1][1] + expect[2][1]) / 3.0];
        let got = g.value(out.x_lmk).data();
        assert!((got[0] - mean[0]).abs() < 1e-12 && (got[1] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn closer_pairs_get_more_attention_at_equal_affinity() {
        let mut store = ParamStore::new();
        let gat = LandmarkGat::new(&mut store, "lgat", 2, 2, 1, &mut rng()).unwrap();
        store.set(gat.layers[0].attn_src, Tensor::zeros([2, 1]));
        store.set(gat.layers[0].attn_dst, Tensor::zeros([2, 1]));
        let lm = Tensor::new([3, 2], vec![0.0, 0.0, 1.0, 0.0, 5.0, 0.0]);
        let gph = build_landmark_graph(&lm).unwrap();
        let mut g = Graph::new(&store);
        let out = gat.forward(&mut g, &gph).unwrap();
        let a = g.value(out.attention[0]);
        assert!(a.at2(0, 1) > a.at2(0, 2));
    }
}
