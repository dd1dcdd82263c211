use ndarray::{Array4, ArrayView4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{self, act, Conv2d, Conv2dCache, Net, ParamMut};

/// Per-modality convolutional stem: stride-2 3x3 conv + ReLU repeated until
/// the total downsampling equals the patch stride, then a 1x1 projection to
/// the token width.
#[derive(Debug, Clone)]
pub struct ConvStem {
    pub convs: Vec<Conv2d>,
    pub proj: Conv2d,
}

pub struct StemCache {
    /// (conv im2col cache, pre-activation output) per stride-2 layer.
    layers: Vec<(Conv2dCache, Array4<f64>)>,
    proj: Conv2dCache,
}

impl ConvStem {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, channels: &[usize], embed_dim: usize) -> Self {
        let mut convs = Vec::with_capacity(channels.len());
        let mut prev = c_in;
        for &c in channels {
            convs.push(Conv2d::new(rng, prev, c, 3, 2, 1));
            prev = c;
        }
        let proj = Conv2d::new(rng, prev, embed_dim, 1, 1, 0);
        ConvStem { convs, proj }
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> (Array4<f64>, StemCache) {
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut cur = x.to_owned();
        for conv in &self.convs {
            let (pre, cache) = conv.forward(cur.view());
            cur = act::relu(&pre);
            layers.push((cache, pre));
        }
        let (h, proj) = self.proj.forward(cur.view());
        (h, StemCache { layers, proj })
    }

    pub fn blend_from(&mut self, other: &ConvStem, rho: f64) {
        for (c, o) in self.convs.iter_mut().zip(other.convs.iter()) {
            c.blend_from(o, rho);
        }
        self.proj.blend_from(&other.proj, rho);
    }

    /// Returns the gradient with respect to the stem input.
    pub fn backward(&mut self, dh: ArrayView4<'_, f64>, cache: &StemCache) -> Array4<f64> {
        let mut d = self.proj.backward(dh, &cache.proj);
        for (conv, (ccache, pre)) in self.convs.iter_mut().zip(cache.layers.iter()).rev() {
            let d_pre = act::relu_backward(pre, &d);
            d = conv.backward(d_pre.view(), ccache);
        }
        d
    }
}

impl Net for ConvStem {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&nn::path(prefix, &format!("conv{i}")), f);
        }
        self.proj.visit_params(&nn::path(prefix, "proj"), f);
    }
}
