//! Multi-scale convolutional feature extractor.
//!
//! A dense 3×3 stem followed by depthwise-separable stages. Two stage outputs
//! are tapped: the shallow one is bilinearly resampled onto the deep tap's grid
//! when the grids differ, the two are concatenated along channels, and a 1×1
//! convolution maps them to `fused_channels`. The spatial and frequency
//! branches are two instances with separate parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{MglError, Result};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stages: Vec<StageSpec>,
    pub shallow_tap: usize,
    pub deep_tap: usize,
    pub fused_channels: usize,
}

impl BackboneConfig {
    /// 3×320×320 → 512×40×40, taps at 40×40.
    pub fn paper() -> Self {
        let s = |channels, stride| StageSpec { channels, stride };
        Self {
            stages: vec![s(32, 2), s(64, 1), s(128, 2), s(256, 2), s(512, 1), s(728, 1)],
            shallow_tap: 3,
            deep_tap: 5,
            fused_channels: 512,
        }
    }

    /// 3×64×64 → 24×8×8, shallow tap at 16×16.
    pub fn desk() -> Self {
        let s = |channels, stride| StageSpec { channels, stride };
        Self { stages: vec![s(8, 2), s(16, 2), s(24, 2)], shallow_tap: 1, deep_tap: 2, fused_channels: 24 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(MglError::Config("backbone needs at least one stage".into()));
        }
        if self.shallow_tap >= self.deep_tap || self.deep_tap >= self.stages.len() {
            return Err(MglError::Config(format!(
                "backbone taps must satisfy shallow {} < deep {} < {} stages",
                self.shallow_tap,
                self.deep_tap,
                self.stages.len()
            )));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) || self.fused_channels == 0 {
            return Err(MglError::Config("backbone channels and strides must be positive".into()));
        }
        Ok(())
    }

    /// Spatial grid after each stage for an `h×w` input (3×3 kernels, padding 1).
    pub fn stage_grids(&self, (h, w): (usize, usize)) -> Vec<(usize, usize)> {
        let mut grid = (h, w);
        self.stages
            .iter()
            .map(|s| {
                grid = ((grid.0 - 1) / s.stride + 1, (grid.1 - 1) / s.stride + 1);
                grid
            })
            .collect()
    }

    pub fn output_grid(&self, input: (usize, usize)) -> (usize, usize) {
        self.stage_grids(input)[self.deep_tap]
    }

    pub fn output_shape(&self, input: (usize, usize)) -> [usize; 3] {
        let (h, w) = self.output_grid(input);
        [self.fused_channels, h, w]
    }
}

/// Dense `[out_h*out_w, in_h*in_w]` bilinear resampling matrix (half-pixel centres, edge clamp).
pub fn bilinear_matrix(input: (usize, usize), output: (usize, usize)) -> Tensor {
    fn taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 2]> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                let f = src - i0 as f64;
                [(i0, 1.0 - f), (i1, f)]
            })
            .collect()
    }
    let ty = taps(input.0, output.0);
    let tx = taps(input.1, output.1);
    let n_in = input.0 * input.1;
    let mut m = Tensor::zeros([output.0 * output.1, n_in]);
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, rx) in tx.iter().enumerate() {
            let row = oy * output.1 + ox;
            for &(iy, wy) in ry {
                for &(ix, wx) in rx {
                    m.data_mut()[row * n_in + iy * input.1 + ix] += wy * wx;
                }
            }
        }
    }
    m
}

#[derive(Clone, Debug)]
enum Stage {
    Stem { kernel: ParamId, bias: ParamId, stride: usize },
    Separable { depthwise: ParamId, pointwise: ParamId, bias: ParamId, stride: usize },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    input: (usize, usize),
    grids: Vec<(usize, usize)>,
    stages: Vec<Stage>,
    pub fuse_weight: ParamId,
    pub fuse_bias: ParamId,
    /// Resampling from the shallow grid to the deep grid, stored transposed; `None` when grids agree.
    resample_t: Option<Tensor>,
    params: Vec<ParamId>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        input: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let grids = config.stage_grids(input);
        let mut params = Vec::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, spec) in config.stages.iter().enumerate() {
            let c = spec.channels;
            let stage = if i == 0 {
                let kernel = store.add(format!("{prefix}.stage0.kernel"), he_normal([c, cin, 3, 3], cin * 9, rng), true);
                let bias = store.add(format!("{prefix}.stage0.bias"), Tensor::zeros([c]), false);
                params.extend([kernel, bias]);
                Stage::Stem { kernel, bias, stride: spec.stride }
            } else {
                let depthwise = store.add(format!("{prefix}.stage{i}.depthwise"), he_normal([cin, 3, 3], 9, rng), true);
                let pointwise = store.add(format!("{prefix}.stage{i}.pointwise"), he_normal([c, cin], cin, rng), true);
                let bias = store.add(format!("{prefix}.stage{i}.bias"), Tensor::zeros([c]), false);
                params.extend([depthwise, pointwise, bias]);
                Stage::Separable { depthwise, pointwise, bias, stride: spec.stride }
            };
            stages.push(stage);
            cin = c;
        }
        let cs = config.stages[config.shallow_tap].channels;
        let cd = config.stages[config.deep_tap].channels;
        let fuse_weight =
            store.add(format!("{prefix}.fuse.weight"), he_normal([config.fused_channels, cs + cd], cs + cd, rng), true);
        let fuse_bias = store.add(format!("{prefix}.fuse.bias"), Tensor::zeros([config.fused_channels]), false);
        params.extend([fuse_weight, fuse_bias]);
        let (gs, gd) = (grids[config.shallow_tap], grids[config.deep_tap]);
        let resample_t = (gs != gd).then(|| bilinear_matrix(gs, gd).t());
        Ok(Self { config: config.clone(), input, grids, stages, fuse_weight, fuse_bias, resample_t, params })
    }

    /// Every parameter of this branch, in registration order.
    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    pub fn output_grid(&self) -> (usize, usize) {
        self.grids[self.config.deep_tap]
    }

    /// Copies another backbone's parameter values into this one (structures must match).
    pub fn copy_params_from(&self, other: &Backbone, store: &mut ParamStore) -> Result<()> {
        if self.config != other.config || self.input != other.input {
            return Err(MglError::Shape("backbones differ in structure".into()));
        }
        for (&dst, &src) in self.params.iter().zip(&other.params) {
            let v = store.get(src).clone();
            store.set(dst, v);
        }
        Ok(())
    }

    /// `image[3, H*W]` → feature map `[C, h*w]`.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let (h, w) = self.input;
        let shape = g.shape(image);
        if shape != [3, h * w] && shape != [3, h, w] {
            return Err(MglError::Shape(format!("backbone expects a 3×{h}×{w} input, got {shape:?}")));
        }
        let mut x = g.reshape(image, &[3, h, w]);
        let mut taps = Vec::with_capacity(2);
        for (i, stage) in self.stages.iter().enumerate() {
            let (gh, gw) = self.grids[i];
            x = match stage {
                Stage::Stem { kernel, bias, stride } => {
                    let k = g.param(*kernel);
                    let y = g.conv2d(x, k, *stride, 1);
                    let c = g.shape(y)[0];
                    let y = g.reshape(y, &[c, gh * gw]);
                    let b = g.param(*bias);
                    let y = g.add_col_bias(y, b);
                    g.relu(y)
                }
                Stage::Separable { depthwise, pointwise, bias, stride } => {
                    let dw = g.param(*depthwise);
                    let y = g.depthwise_conv2d(x, dw, *stride, 1);
                    let c = g.shape(y)[0];
                    let y = g.reshape(y, &[c, gh * gw]);
                    let pw = g.param(*pointwise);
                    let y = g.matmul(pw, y);
                    let b = g.param(*bias);
                    let y = g.add_col_bias(y, b);
                    g.relu(y)
                }
            };
            if i == self.config.shallow_tap || i == self.config.deep_tap {
                taps.push(x);
            }
            let c = g.shape(x)[0];
            x = g.reshape(x, &[c, gh, gw]);
            if i == self.config.deep_tap {
                break;
            }
        }
        let (shallow, deep) = (taps[0], taps[1]);
        let shallow = match &self.resample_t {
            Some(r) => {
                let r = g.constant(r.clone());
                g.matmul(shallow, r)
            }
            None => shallow,
        };
        let cat = g.concat_rows(&[shallow, deep]);
        let fw = g.param(self.fuse_weight);
        let fb = g.param(self.fuse_bias);
        let y = g.matmul(fw, cat);
        Ok(g.add_col_bias(y, fb))
    }

    /// Convenience forward on a plain `[3, H, W]` tensor.
    pub fn extract(&self, store: &ParamStore, frame: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let x = g.constant(frame.clone());
        let y = self.forward(&mut g, x)?;
        let (h, w) = self.output_grid();
        Ok(g.value(y).clone().reshape([self.config.fused_channels, h, w]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn desk_shape_arithmetic() {
        let cfg = BackboneConfig { fused_channels: 64, ..BackboneConfig::desk() };
        assert_eq!(cfg.output_shape((64, 64)), [64, 8, 8]);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "spatial", &cfg, (64, 64), &mut rng()).unwrap();
        let out = bb.extract(&store, &Tensor::uniform([3, 64, 64], 0.0, 1.0, &mut rng())).unwrap();
        assert_eq!(out.shape(), &[64, 8, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn zero_input_zero_output() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "b", &BackboneConfig::desk(), (32, 32), &mut rng()).unwrap();
        let out = bb.extract(&store, &Tensor::zeros([3, 32, 32])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_input_size() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "b", &BackboneConfig::desk(), (32, 32), &mut rng()).unwrap();
        assert!(matches!(bb.extract(&store, &Tensor::zeros([3, 16, 32])), Err(MglError::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackboneConfig::desk();
        cfg.shallow_tap = 2;
        assert!(cfg.validate().is_err());
        cfg.shallow_tap = 0;
        cfg.deep_tap = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn branches_are_independent_but_structurally_identical() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = BackboneConfig::desk();
        let a = Backbone::new(&mut store, "spatial", &cfg, (32, 32), &mut r).unwrap();
        let b = Backbone::new(&mut store, "frequency", &cfg, (32, 32), &mut r).unwrap();
        let ia: HashSet<_> = a.param_ids().iter().collect();
        assert!(b.param_ids().iter().all(|id| !ia.contains(id)));

        let frame = Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut r);
        let before_b = b.extract(&store, &frame).unwrap();
        assert_ne!(a.extract(&store, &frame).unwrap(), before_b);

        // Updating the spatial branch leaves the frequency branch untouched.
        for &id in a.param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        assert_eq!(b.extract(&store, &frame).unwrap(), before_b);

        b.copy_params_from(&a, &mut store).unwrap();
        assert_eq!(a.extract(&store, &frame).unwrap(), b.extract(&store, &frame).unwrap());
    }

    #[test]
    fn bilinear_downsample_by_two_averages_blocks() {
        let m = bilinear_matrix((4, 4), (2, 2));
        let x = Tensor::from_fn([16, 1], |i| i as f64);
        let y = m.matmul(&x);
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        for r in 0..4 {
            let s: f64 = (0..16).map(|c| m.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_reach_both_taps() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let s = |channels, stride| StageSpec { channels, stride };
        let cfg = BackboneConfig { stages: vec![s(3, 2), s(4, 2)], shallow_tap: 0, deep_tap: 1, fused_channels: 3 };
        let bb = Backbone::new(&mut store, "toy", &cfg, (6, 6), &mut r).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let t = Tensor::randn(store.get(id).shape().to_vec(), 0.5, &mut r);
            store.set(id, t);
        }
        let frame = Tensor::uniform([3, 6, 6], -1.0, 1.0, &mut r);
        let ids = bb.param_ids().to_vec();
        let cfg = GradCheck { max_entries: None, ..GradCheck::default() };
        let report = check_param_gradients(&store, &ids, &cfg, |g| {
            let x = g.constant(frame.clone());
            bb.forward(g, x).unwrap()
        });
        assert!(report.passes(1e-4), "{report:?}");
    }
}
