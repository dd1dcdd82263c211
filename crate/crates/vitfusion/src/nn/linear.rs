use ndarray::{Array2, ArrayView2, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{path, Net, Param, ParamMut, WeightInit};

/// Fully connected layer, y = x.w + b, with weights stored [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param<Ix2>,
    pub b: Param<Ix1>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Param::new(WeightInit::kaiming_uniform(rng, (d_in, d_out), d_in)),
            b: Param::new(WeightInit::kaiming_uniform(rng, d_out, d_in)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.v.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.v.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.v);
        y += &self.b.v;
        y
    }

    /// Backprop; `x` must be the activation passed to `forward`.
    /// Accumulates parameter gradients only when `accum` is set (the actor
    /// update differentiates through the critic without touching its grads).
    pub fn backward(
        &mut self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        accum: bool,
    ) -> Array2<f64> {
        if accum {
            self.w.g += &x.t().dot(&dy);
            self.b.g += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w.v.t())
    }

    pub fn blend_from(&mut self, other: &Linear, rho: f64) {
        self.w.blend_from(&other.w, rho);
        self.b.blend_from(&other.b, rho);
    }
}

impl Net for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        f(&path(prefix, "w"), self.w.as_mut());
        f(&path(prefix, "b"), self.b.as_mut());
    }
}
