use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, act, LayerNorm, LayerNormCache, Linear, Net, ParamMut};

/// Multi-head self-attention. The per-head inner width is independent of the
/// token width (heads * head_dim may be smaller than embed_dim); the output
/// projection maps back to embed_dim.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    ctx: Array2<f64>,
    /// Row-stochastic attention matrices, [B, heads, N, N].
    pub probs: Array4<f64>,
    n: usize,
}

fn flat2(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (b, n, d) = x.dim();
    x.to_owned().into_shape_with_order((b * n, d)).unwrap()
}

fn unflat3(x: Array2<f64>, b: usize, n: usize) -> Array3<f64> {
    let d = x.ncols();
    x.into_shape_with_order((b, n, d)).unwrap()
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, embed_dim: usize, heads: usize, head_dim: usize) -> Self {
        let inner = heads * head_dim;
        MultiHeadAttention {
            wq: Linear::new(rng, embed_dim, inner),
            wk: Linear::new(rng, embed_dim, inner),
            wv: Linear::new(rng, embed_dim, inner),
            wo: Linear::new(rng, inner, embed_dim),
            heads,
            head_dim,
        }
    }

    pub fn blend_from(&mut self, other: &MultiHeadAttention, rho: f64) {
        self.wq.blend_from(&other.wq, rho);
        self.wk.blend_from(&other.wk, rho);
        self.wv.blend_from(&other.wv, rho);
        self.wo.blend_from(&other.wo, rho);
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<(Array3<f64>, AttnCache)> {
        let (b, n, _d) = x.dim();
        if n == 0 {
            return Err(Error::shape("attention requires at least one token"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite attention input".into()));
        }
        let x2 = flat2(x);
        let q = self.wq.forward(x2.view());
        let k = self.wk.forward(x2.view());
        let v = self.wv.forward(x2.view());
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut probs = Array4::<f64>::zeros((b, self.heads, n, n));
        let mut ctx = Array2::<f64>::zeros((b * n, self.heads * self.head_dim));
        for bi in 0..b {
            let rows = s![bi * n..(bi + 1) * n, ..];
            for h in 0..self.heads {
                let cols = s![.., h * self.head_dim..(h + 1) * self.head_dim];
                let qh = q.slice(rows).slice_move(cols);
                let kh = k.slice(rows).slice_move(cols);
                let vh = v.slice(rows).slice_move(cols);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                softmax_rows(&mut scores);
                let ctx_h = scores.dot(&vh);
                ctx.slice_mut(rows).slice_move(cols).assign(&ctx_h);
                probs.slice_mut(s![bi, h, .., ..]).assign(&scores);
            }
        }
        let out = self.wo.forward(ctx.view());
        let cache = AttnCache { q, k, v, ctx, probs, n };
        Ok((unflat3(out, b, n), cache))
    }

    pub fn backward(
        &mut self,
        x: ArrayView3<'_, f64>,
        dy: ArrayView3<'_, f64>,
        cache: &AttnCache,
        accum: bool,
    ) -> Array3<f64> {
        let (b, n, _) = dy.dim();
        debug_assert_eq!(n, cache.n);
        let x2 = flat2(x);
        let dy2 = flat2(dy);
        let dctx = self.wo.backward(cache.ctx.view(), dy2.view(), accum);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(cache.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
        for bi in 0..b {
            let rows = s![bi * n..(bi + 1) * n, ..];
            for h in 0..self.heads {
                let cols = s![.., h * self.head_dim..(h + 1) * self.head_dim];
                let qh = cache.q.slice(rows).slice_move(cols);
                let kh = cache.k.slice(rows).slice_move(cols);
                let vh = cache.v.slice(rows).slice_move(cols);
                let p = cache.probs.slice(s![bi, h, .., ..]);
                let dctx_h = dctx.slice(rows).slice_move(cols);
                let dp = dctx_h.dot(&vh.t());
                dv.slice_mut(rows)
                    .slice_move(cols)
                    .assign(&p.t().dot(&dctx_h));
                // softmax jacobian: ds = p * (dp - rowsum(p * dp))
                let rowsum = (&p * &dp).sum_axis(Axis(1));
                let mut dscores = dp.to_owned();
                for ((mut row, p_row), &rs) in dscores
                    .axis_iter_mut(Axis(0))
                    .zip(p.axis_iter(Axis(0)))
                    .zip(rowsum.iter())
                {
                    for (dsv, &pv) in row.iter_mut().zip(p_row.iter()) {
                        *dsv = pv * (*dsv - rs);
                    }
                }
                dscores *= scale;
                dq.slice_mut(rows)
                    .slice_move(cols)
                    .assign(&dscores.dot(&kh));
                dk.slice_mut(rows)
                    .slice_move(cols)
                    .assign(&dscores.t().dot(&qh));
            }
        }
        let mut dx = self.wq.backward(x2.view(), dq.view(), accum);
        dx += &self.wk.backward(x2.view(), dk.view(), accum);
        dx += &self.wv.backward(x2.view(), dv.view(), accum);
        unflat3(dx, b, n)
    }
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Net for MultiHeadAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.wq.visit_params(&nn::path(prefix, "wq"), f);
        self.wk.visit_params(&nn::path(prefix, "wk"), f);
        self.wv.visit_params(&nn::path(prefix, "wv"), f);
        self.wo.visit_params(&nn::path(prefix, "wo"), f);
    }
}

/// Pre-norm transformer block: x + MSA(LN(x)), then x + FFN(LN(x)).
#[derive(Debug, Clone)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    n1: Array3<f64>,
    pub attn: AttnCache,
    ln2: LayerNormCache,
    n2: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
}

impl VitBlock {
    pub fn new(rng: &mut ChaCha8Rng, embed_dim: usize, heads: usize, head_dim: usize, ffn_hidden: usize) -> Self {
        VitBlock {
            norm1: LayerNorm::new(rng, embed_dim),
            attn: MultiHeadAttention::new(rng, embed_dim, heads, head_dim),
            norm2: LayerNorm::new(rng, embed_dim),
            fc1: Linear::new(rng, embed_dim, ffn_hidden),
            fc2: Linear::new(rng, ffn_hidden, embed_dim),
        }
    }

    pub fn blend_from(&mut self, other: &VitBlock, rho: f64) {
        self.norm1.blend_from(&other.norm1, rho);
        self.attn.blend_from(&other.attn, rho);
        self.norm2.blend_from(&other.norm2, rho);
        self.fc1.blend_from(&other.fc1, rho);
        self.fc2.blend_from(&other.fc2, rho);
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<(Array3<f64>, BlockCache)> {
        let (b, n, d) = x.dim();
        let x2 = flat2(x);
        let (n1_2, ln1) = self.norm1.forward(x2.view());
        let n1 = unflat3(n1_2, b, n);
        let (a, attn) = self.attn.forward(n1.view())?;
        let x1 = &x.to_owned() + &a;
        let x1_2 = flat2(x1.view());
        let (n2, ln2) = self.norm2.forward(x1_2.view());
        let f1 = self.fc1.forward(n2.view());
        let g = act::gelu(&f1);
        let f2 = self.fc2.forward(g.view());
        let y = &x1 + &unflat3(f2, b, n);
        debug_assert_eq!(y.dim(), (b, n, d));
        let cache = BlockCache { ln1, n1, attn, ln2, n2, f1, g };
        Ok((y, cache))
    }

    pub fn backward(
        &mut self,
        dy: ArrayView3<'_, f64>,
        cache: &BlockCache,
        accum: bool,
    ) -> Array3<f64> {
        let (b, n, _) = dy.dim();
        let dy2 = flat2(dy);
        // FFN branch
        let dg = self.fc2.backward(cache.g.view(), dy2.view(), accum);
        let df1 = act::gelu_backward(&cache.f1, &dg);
        let dn2 = self.fc1.backward(cache.n2.view(), df1.view(), accum);
        let mut dx1 = dy2;
        dx1 += &self.norm2.backward(dn2.view(), &cache.ln2, accum);
        // Attention branch
        let dx1_3 = unflat3(dx1, b, n);
        let dn1 = self.attn.backward(cache.n1.view(), dx1_3.view(), &cache.attn, accum);
        let dn1_2 = flat2(dn1.view());
        let mut dx = flat2(dx1_3.view());
        dx += &self.norm1.backward(dn1_2.view(), &cache.ln1, accum);
        unflat3(dx, b, n)
    }
}

impl Net for VitBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.norm1.visit_params(&nn::path(prefix, "norm1"), f);
        self.attn.visit_params(&nn::path(prefix, "attn"), f);
        self.norm2.visit_params(&nn::path(prefix, "norm2"), f);
        self.fc1.visit_params(&nn::path(prefix, "fc1"), f);
        self.fc2.visit_params(&nn::path(prefix, "fc2"), f);
    }
}

/// LayerNorm over the last axis of a token tensor.
pub(crate) fn norm3(x: ArrayView3<'_, f64>, ln: &LayerNorm) -> (Array3<f64>, LayerNormCache) {
    let (b, n, _) = x.dim();
    let (y, cache) = ln.forward(flat2(x).view());
    (unflat3(y, b, n), cache)
}

pub(crate) fn flat2_tokens(x: ArrayView3<'_, f64>) -> Array2<f64> {
    flat2(x)
}

pub(crate) fn unflat3_tokens(x: Array2<f64>, b: usize, n: usize) -> Array3<f64> {
    unflat3(x, b, n)
}
