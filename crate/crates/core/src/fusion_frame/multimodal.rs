//! Joint frame representation: tile the landmark vector over the feature grid,
//! concatenate with the spatial-frequency map, apply a learnable elementwise
//! mask, reduce channels with a 1×1 convolution, and max-pool globally.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{MglError, Result};
use crate::nn::Linear;
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

pub struct FusionOutput {
    /// `[C, h*w]` joint map before pooling.
    pub joint: Var,
    /// `[C]` frame embedding.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct MultimodalFusion {
    pub channels: usize,
    pub grid_len: usize,
    /// `None` when the landmark modality is disabled.
    pub landmark_proj: Option<Linear>,
    pub mask: ParamId,
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
}

impl MultimodalFusion {
    /// `landmark` is `(landmark vector width, projected channel count)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        grid_len: usize,
        landmark: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Self {
        let landmark_proj = landmark.map(|(d, c)| Linear::new(store, &format!("{name}.landmark_proj"), d, c, true, rng));
        let total = channels + landmark.map_or(0, |(_, c)| c);
        Self {
            channels,
            grid_len,
            landmark_proj,
            mask: store.add(format!("{name}.mask"), Tensor::ones([total, grid_len]), false),
            reduce_weight: store.add(format!("{name}.reduce.weight"), he_normal([channels, total], total, rng), true),
            reduce_bias: store.add(format!("{name}.reduce.bias"), Tensor::zeros([channels]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x_sff: Var, x_lmk: Option<Var>) -> Result<FusionOutput> {
        if g.shape(x_sff) != [self.channels, self.grid_len] {
            return Err(MglError::Shape(format!(
                "fusion expects a [{}, {}] map, got {:?}",
                self.channels,
                self.grid_len,
                g.shape(x_sff)
            )));
        }
        let cat = match (&self.landmark_proj, x_lmk) {
            (Some(proj), Some(v)) => {
                let d = g.shape(v).iter().product::<usize>();
                let v = g.reshape(v, &[1, d]);
                let p = proj.forward(g, v);
                let p = g.reshape(p, &[proj.out_dim]);
                let tiled = g.broadcast_cols(p, self.grid_len);
                g.concat_rows(&[x_sff, tiled])
            }
            (None, None) => x_sff,
            _ => return Err(MglError::Shape("landmark vector presence does not match the fusion layout".into())),
        };
        let mask = g.param(self.mask);
        let masked = g.mul(cat, mask);
        let w = g.param(self.reduce_weight);
        let b = g.param(self.reduce_bias);
        let joint = g.matmul(w, masked);
        let joint = g.add_col_bias(joint, b);
        let embedding = g.max_cols(joint);
        Ok(FusionOutput { joint, embedding })
    }
}
