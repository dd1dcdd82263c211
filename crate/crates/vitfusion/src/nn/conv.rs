use ndarray::{Array2, Array4, ArrayView4, Axis, Ix1, Ix4};
use rand_chacha::ChaCha8Rng;

use super::{path, Net, Param, ParamMut, WeightInit};

/// 2-D convolution (zero padding) lowered to a GEMM through im2col.
///
/// Input layout [B, C_in, H, W], weights [C_out, C_in, K, K].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param<Ix4>,
    pub b: Param<Ix1>,
    pub stride: usize,
    pub pad: usize,
}

/// Forward cache: the im2col matrix plus the input spatial dims.
pub struct Conv2dCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            w: Param::new(WeightInit::kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in)),
            b: Param::new(WeightInit::kaiming_uniform(rng, c_out, fan_in)),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.v.shape()[2]
    }

    pub fn blend_from(&mut self, other: &Conv2d, rho: f64) {
        self.w.blend_from(&other.w, rho);
        self.b.blend_from(&other.b, rho);
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: ArrayView4<'_, f64>) -> Array2<f64> {
        let (b, c_in, h, w) = x.dim();
        let k = self.kernel();
        let (ho, wo) = self.out_spatial(h, w);
        let mut cols = Array2::<f64>::zeros((b * ho * wo, c_in * k * k));
        let x_sl = x.as_slice().expect("conv input must be standard layout");
        let cols_sl = cols.as_slice_mut().unwrap();
        let row_w = c_in * k * k;
        for bi in 0..b {
            for oh in 0..ho {
                for ow in 0..wo {
                    let row = ((bi * ho + oh) * wo + ow) * row_w;
                    for c in 0..c_in {
                        for kh in 0..k {
                            let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src_base = ((bi * c_in + c) * h + ih as usize) * w;
                            let dst_base = row + (c * k + kh) * k;
                            for kw in 0..k {
                                let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                cols_sl[dst_base + kw] = x_sl[src_base + iw as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> (Array4<f64>, Conv2dCache) {
        let (b, _, h, w) = x.dim();
        let c_out = self.w.v.shape()[0];
        let k = self.kernel();
        let (ho, wo) = self.out_spatial(h, w);
        let cols = self.im2col(x);
        let w2 = self
            .w
            .v
            .view()
            .into_shape_with_order((c_out, self.w.v.len() / c_out))
            .unwrap();
        let mut y_rows = cols.dot(&w2.t());
        y_rows += &self.b.v;
        let y = y_rows
            .into_shape_with_order((b, ho, wo, c_out))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        debug_assert_eq!(cols.ncols(), self.w.v.shape()[1] * k * k);
        let in_shape = x.dim();
        (y, Conv2dCache { cols, in_shape })
    }

    pub fn backward(&mut self, dy: ArrayView4<'_, f64>, cache: &Conv2dCache) -> Array4<f64> {
        let (b, c_out, ho, wo) = dy.dim();
        let (_, c_in, h, w) = cache.in_shape;
        let k = self.kernel();
        let dy_rows = dy
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((b * ho * wo, c_out))
            .unwrap()
            .to_owned();
        // dW = dy^T . cols, db = column sums of dy
        let dw2 = dy_rows.t().dot(&cache.cols);
        self.w.g += &dw2.into_shape_with_order(self.w.v.raw_dim()).unwrap();
        self.b.g += &dy_rows.sum_axis(Axis(0));
        // dx = col2im(dy . W)
        let w2 = self
            .w
            .v
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        let dcols = dy_rows.dot(&w2);
        let mut dx = Array4::<f64>::zeros((b, c_in, h, w));
        let dcols_sl = dcols.as_slice().unwrap();
        let dx_sl = dx.as_slice_mut().unwrap();
        let row_w = c_in * k * k;
        for bi in 0..b {
            for oh in 0..ho {
                for ow in 0..wo {
                    let row = ((bi * ho + oh) * wo + ow) * row_w;
                    for c in 0..c_in {
                        for kh in 0..k {
                            let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let dst_base = ((bi * c_in + c) * h + ih as usize) * w;
                            let src_base = row + (c * k + kh) * k;
                            for kw in 0..k {
                                let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dx_sl[dst_base + iw as usize] += dcols_sl[src_base + kw];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Net for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        f(&path(prefix, "w"), self.w.as_mut());
        f(&path(prefix, "b"), self.b.as_mut());
    }
}
