use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1};
use rand_chacha::ChaCha8Rng;

use super::{path, Net, Param, ParamMut};

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last axis of a [rows, dim] input.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
}

pub struct LayerNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(_rng: &mut ChaCha8Rng, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Array1::ones(dim)),
            beta: Param::new(Array1::zeros(dim)),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let mut x_hat = x.to_owned();
        for (mut row, &m) in x_hat.axis_iter_mut(Axis(0)).zip(mean.iter()) {
            row -= m;
        }
        let var = x_hat.map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>() / d);
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        for (mut row, &s) in x_hat.axis_iter_mut(Axis(0)).zip(inv_std.iter()) {
            row *= s;
        }
        let mut y = x_hat.clone();
        y *= &self.gamma.v;
        y += &self.beta.v;
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &mut self,
        dy: ArrayView2<'_, f64>,
        cache: &LayerNormCache,
        accum: bool,
    ) -> Array2<f64> {
        let d = dy.ncols() as f64;
        if accum {
            self.gamma.g += &(&dy * &cache.x_hat).sum_axis(Axis(0));
            self.beta.g += &dy.sum_axis(Axis(0));
        }
        // dx = inv_std/d * (d*dxh - sum(dxh) - x_hat * sum(dxh * x_hat))
        let dxh = &dy * &self.gamma.v;
        let sum_dxh = dxh.sum_axis(Axis(1));
        let sum_dxh_xh = (&dxh * &cache.x_hat).sum_axis(Axis(1));
        let mut dx = dxh * d;
        for ((mut row, xh_row), ((&s1, &s2), &istd)) in dx
            .axis_iter_mut(Axis(0))
            .zip(cache.x_hat.axis_iter(Axis(0)))
            .zip(sum_dxh.iter().zip(sum_dxh_xh.iter()).zip(cache.inv_std.iter()))
        {
            for (dv, &xh) in row.iter_mut().zip(xh_row.iter()) {
                *dv = (*dv - s1 - xh * s2) * istd / d;
            }
        }
        dx
    }

    pub fn blend_from(&mut self, other: &LayerNorm, rho: f64) {
        self.gamma.blend_from(&other.gamma, rho);
        self.beta.blend_from(&other.beta, rho);
    }
}

impl Net for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        f(&path(prefix, "gamma"), self.gamma.as_mut());
        f(&path(prefix, "beta"), self.beta.as_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ln = LayerNorm::new(&mut rng, 4);
        let x = array![[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 30.0, 30.0]];
        let (y, _) = ln.forward(x.view());
        for row in y.axis_iter(Axis(0)) {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0 - mean * mean;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn affine_applies_after_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::new(&mut rng, 2);
        ln.gamma.v = array![2.0, 2.0];
        ln.beta.v = array![1.0, 1.0];
        let (y, _) = ln.forward(array![[-1.0, 1.0]].view());
        // x_hat is close to [-1, 1]; y = 2 x_hat + 1
        assert_abs_diff_eq!(y[(0, 0)], -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(y[(0, 1)], 3.0, epsilon = 1e-4);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::new(&mut rng, 3);
        ln.gamma.v = array![1.3, 0.8, 1.1];
        ln.beta.v = array![0.1, -0.2, 0.05];
        let x = array![[0.5, -1.0, 2.0], [3.0, 0.0, -0.5]];
        // scalar loss: weighted sum of outputs
        let w = array![[0.7, -0.3, 0.2], [0.1, 0.9, -0.6]];
        let (_, cache) = ln.forward(x.view());
        let dx = ln.backward(w.view(), &cache, true);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let lp = (&ln.forward(xp.view()).0 * &w).sum();
                let lm = (&ln.forward(xm.view()).0 * &w).sum();
                assert_abs_diff_eq!(dx[(i, j)], (lp - lm) / (2.0 * h), epsilon = 1e-6);
            }
        }
        // parameter grads: dgamma = sum dy * x_hat, dbeta = sum dy
        assert_abs_diff_eq!(ln.beta.g, w.sum_axis(Axis(0)), epsilon = 1e-12);
    }
}
