//! RGB-D fusion encoder: two convolutional stems, token fusion with sin-cos
//! positional and learned modality embeddings, a pre-norm ViT over the
//! visible tokens, and average pooling into a compact representation.

mod stem;
mod vit;

pub use stem::{ConvStem, StemCache};
pub use vit::{AttnCache, BlockCache, MultiHeadAttention, VitBlock};
pub(crate) use vit::norm3 as vit_norm3;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, LayerNormCache, Net, Param, ParamMut};

/// One timestep's visual observation: a stack of recent RGB frames plus the
/// current depth frame, integer pixels in [0, 255].
#[derive(Debug, Clone)]
pub struct ObservationPair {
    /// [3 * frame_stack, H, W]
    pub rgb: Array3<u8>,
    /// [1, H, W]
    pub depth: Array3<u8>,
}

impl ObservationPair {
    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.rgb.dim();
        let (dc, dh, dw) = self.depth.dim();
        if dc != 1 || dh != h || dw != w {
            return Err(Error::shape(format!(
                "rgb {:?} and depth {:?} spatial dims differ",
                self.rgb.dim(),
                self.depth.dim()
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.rgb.dim().1
    }
}

/// A batch of observations as real-valued pixels in [0, 255]; the encoder
/// normalizes internally.
#[derive(Debug, Clone)]
pub struct ObsBatch {
    /// [B, 3 * frame_stack, H, W]
    pub rgb: Array4<f64>,
    /// [B, 1, H, W]
    pub depth: Array4<f64>,
}

impl ObsBatch {
    pub fn from_pairs(pairs: &[&ObservationPair]) -> Self {
        let (c, h, w) = pairs[0].rgb.dim();
        let b = pairs.len();
        let mut rgb = Array4::<f64>::zeros((b, c, h, w));
        let mut depth = Array4::<f64>::zeros((b, 1, h, w));
        for (i, p) in pairs.iter().enumerate() {
            rgb.slice_mut(s![i, .., .., ..])
                .assign(&p.rgb.mapv(f64::from));
            depth
                .slice_mut(s![i, .., .., ..])
                .assign(&p.depth.mapv(f64::from));
        }
        ObsBatch { rgb, depth }
    }

    pub fn single(pair: &ObservationPair) -> Self {
        Self::from_pairs(&[pair])
    }

    pub fn len(&self) -> usize {
        self.rgb.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub frame_stack: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub stem_channels: Vec<usize>,
    pub mask_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 128,
            frame_stack: 3,
            patch_stride: 16,
            embed_dim: 512,
            heads: 8,
            head_dim: 32,
            layers: 4,
            stem_channels: vec![32, 64, 128, 256],
            mask_ratio: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_stride == 0 || self.image_size % self.patch_stride != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_stride {}",
                self.image_size, self.patch_stride
            )));
        }
        if !self.patch_stride.is_power_of_two() {
            return Err(Error::config("patch_stride must be a power of two"));
        }
        let n_stride2 = self.patch_stride.trailing_zeros() as usize;
        if self.stem_channels.len() != n_stride2 {
            return Err(Error::config(format!(
                "stem_channels has {} entries but patch_stride {} needs {} stride-2 layers",
                self.stem_channels.len(),
                self.patch_stride,
                n_stride2
            )));
        }
        if self.heads * self.head_dim > self.embed_dim {
            return Err(Error::config(format!(
                "heads * head_dim = {} exceeds embed_dim {}",
                self.heads * self.head_dim,
                self.embed_dim
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::config("embed_dim must be divisible by 4 for sin-cos embeddings"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask_ratio {} outside [0,1)", self.mask_ratio)));
        }
        Ok(())
    }

    /// Side length of the per-modality token grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_stride
    }

    /// Tokens per modality.
    pub fn tokens_per_modality(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Total tokens with both modalities present.
    pub fn total_tokens(&self) -> usize {
        2 * self.tokens_per_modality()
    }

    pub fn rgb_channels(&self) -> usize {
        3 * self.frame_stack
    }
}

/// Per-modality embedded token grid, batched. Token order is RGB sites in
/// row-major grid order followed by depth sites in the same order.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// [B, N, D]
    pub tokens: Array3<f64>,
    /// 0 = RGB, 1 = depth; shared across the batch.
    pub modality_ids: Vec<u8>,
    /// (row, col) in the per-modality grid; shared across the batch.
    pub grid_coords: Vec<(usize, usize)>,
    /// [B, N]; false marks a masked (dropped) token.
    pub visible: Array2<bool>,
}

impl TokenSequence {
    pub fn batch(&self) -> usize {
        self.tokens.dim().0
    }

    pub fn len(&self) -> usize {
        self.tokens.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visible_count(&self, sample: usize) -> usize {
        self.visible.row(sample).iter().filter(|&&v| v).count()
    }
}

/// Encoded visible tokens with their source positions in the full sequence.
#[derive(Debug, Clone)]
pub struct EncodedTokens {
    /// [B, N_visible, D]
    pub tokens: Array3<f64>,
    /// [B, N_visible] indices into the pre-mask sequence.
    pub src: Array2<usize>,
    /// Length of the pre-mask sequence.
    pub n_total: usize,
}

/// Exactly floor(m * N_mod) tokens per modality are masked, chosen uniformly
/// without replacement and independently per modality and per sample. The
/// relative order of the surviving tokens is preserved.
pub fn random_mask(seq: &TokenSequence, m: f64, rng: &mut ChaCha8Rng) -> Result<TokenSequence> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::config(format!("mask ratio {m} outside [0,1)")));
    }
    let mut out = seq.clone();
    out.visible.fill(true);
    let n = seq.len();
    let b = seq.batch();
    // contiguous index ranges per modality
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i == n || seq.modality_ids[i] != seq.modality_ids[start] {
            ranges.push((start, i));
            start = i;
        }
    }
    for bi in 0..b {
        for &(lo, hi) in &ranges {
            let n_mod = hi - lo;
            let k = (m * n_mod as f64).floor() as usize;
            if k == 0 {
                continue;
            }
            for idx in rand::seq::index::sample(rng, n_mod, k) {
                out.visible[(bi, lo + idx)] = false;
            }
        }
    }
    Ok(out)
}

/// Mean over encoded visible tokens, one representation row per sample.
pub fn pool(encoded: &EncodedTokens) -> Result<Array2<f64>> {
    let (_, nv, _) = encoded.tokens.dim();
    if nv == 0 {
        return Err(Error::shape("pool requires at least one visible token"));
    }
    Ok(encoded.tokens.mean_axis(Axis(1)).unwrap())
}

/// Gradient of `pool`: spread each representation row uniformly over tokens.
pub fn pool_backward(d_repr: &Array2<f64>, nv: usize) -> Array3<f64> {
    let (b, d) = d_repr.dim();
    let scale = 1.0 / nv as f64;
    let mut out = Array3::<f64>::zeros((b, nv, d));
    for bi in 0..b {
        let row = d_repr.row(bi);
        for t in 0..nv {
            out.slice_mut(s![bi, t, ..]).assign(&row.mapv(|v| v * scale));
        }
    }
    out
}

/// 2D sin-cos positional table over an S x S grid, row-major.
pub fn sincos_pos_table(side: usize, dim: usize) -> Array2<f64> {
    assert!(dim % 4 == 0);
    let quarter = dim / 4;
    let mut table = Array2::<f64>::zeros((side * side, dim));
    for row in 0..side {
        for col in 0..side {
            let t = row * side + col;
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                table[(t, 2 * i)] = (row as f64 * omega).sin();
                table[(t, 2 * i + 1)] = (row as f64 * omega).cos();
                table[(t, dim / 2 + 2 * i)] = (col as f64 * omega).sin();
                table[(t, dim / 2 + 2 * i + 1)] = (col as f64 * omega).cos();
            }
        }
    }
    table
}

pub struct StemsCache {
    rgb: StemCache,
    depth: StemCache,
    /// Final stem feature maps, [B, D, S, S], kept for Grad-CAM.
    pub h_rgb: Array4<f64>,
    pub h_d: Array4<f64>,
}

pub struct VitCache {
    pub src: Array2<usize>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    nv: usize,
}

impl VitCache {
    /// Attention matrices of one block, [B, heads, N, N].
    pub fn attn_probs(&self, layer: usize) -> &Array4<f64> {
        &self.blocks[layer].attn.probs
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

pub struct EncodeCache {
    pub stems: StemsCache,
    pub vit: VitCache,
    pub n_tokens: usize,
}

/// The fused RGB-D encoder.
#[derive(Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stem_rgb: ConvStem,
    pub stem_depth: ConvStem,
    /// Learned per-modality embedding, [2, D].
    pub modality: Param<Ix2>,
    pub blocks: Vec<VitBlock>,
    pub final_norm: LayerNorm,
    pos_table: Array2<f64>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let stem_rgb = ConvStem::new(rng, cfg.rgb_channels(), &cfg.stem_channels, cfg.embed_dim);
        let stem_depth = ConvStem::new(rng, 1, &cfg.stem_channels, cfg.embed_dim);
        let modality = Param::new(nn::WeightInit::kaiming_uniform(
            rng,
            (2, cfg.embed_dim),
            cfg.embed_dim,
        ));
        let blocks = (0..cfg.layers)
            .map(|_| VitBlock::new(rng, cfg.embed_dim, cfg.heads, cfg.head_dim, 4 * cfg.embed_dim))
            .collect();
        let final_norm = LayerNorm::new(rng, cfg.embed_dim);
        let pos_table = sincos_pos_table(cfg.grid_side(), cfg.embed_dim);
        Ok(Encoder {
            cfg: cfg.clone(),
            stem_rgb,
            stem_depth,
            modality,
            blocks,
            final_norm,
            pos_table,
        })
    }

    fn check_obs(&self, obs: &ObsBatch) -> Result<()> {
        let (_, c, h, w) = obs.rgb.dim();
        let (_, dc, dh, dw) = obs.depth.dim();
        let side = self.cfg.image_size;
        if h != side || w != side || dh != side || dw != side {
            return Err(Error::config(format!(
                "observation spatial dims ({h}x{w} rgb, {dh}x{dw} depth) do not match configured image_size {side}"
            )));
        }
        if c != self.cfg.rgb_channels() || dc != 1 {
            return Err(Error::config(format!(
                "observation channels (rgb {c}, depth {dc}) do not match config (rgb {}, depth 1)",
                self.cfg.rgb_channels()
            )));
        }
        Ok(())
    }

    /// Runs both stems on a pixel batch. Pixels are normalized to
    /// [-0.5, 0.5] before convolution.
    pub fn stem_forward(&self, obs: &ObsBatch) -> Result<(Array4<f64>, Array4<f64>, StemsCache)> {
        self.check_obs(obs)?;
        let rgb_in = obs.rgb.mapv(|v| v / 255.0 - 0.5);
        let depth_in = obs.depth.mapv(|v| v / 255.0 - 0.5);
        let (h_rgb, rgb_cache) = self.stem_rgb.forward(rgb_in.view());
        let (h_d, depth_cache) = self.stem_depth.forward(depth_in.view());
        let cache = StemsCache { rgb: rgb_cache, depth: depth_cache, h_rgb: h_rgb.clone(), h_d: h_d.clone() };
        Ok((h_rgb, h_d, cache))
    }

    /// Flattens both feature grids into one token sequence and adds
    /// positional and modality embeddings. All tokens start visible.
    pub fn tokenize(&self, h_rgb: &Array4<f64>, h_d: &Array4<f64>) -> Result<TokenSequence> {
        let (b, d, s, s2) = h_rgb.dim();
        if h_d.dim() != (b, d, s, s2) {
            return Err(Error::shape(format!(
                "stem grids disagree: {:?} vs {:?}",
                h_rgb.dim(),
                h_d.dim()
            )));
        }
        if d != self.cfg.embed_dim {
            return Err(Error::config(format!(
                "feature grid width {d} does not match embed_dim {}",
                self.cfg.embed_dim
            )));
        }
        let n_mod = s * s2;
        let n = 2 * n_mod;
        let mut tokens = Array3::<f64>::zeros((b, n, d));
        for (mi, grid) in [h_rgb, h_d].iter().enumerate() {
            let flat = grid
                .view()
                .permuted_axes([0, 2, 3, 1])
                .as_standard_layout()
                .into_shape_with_order((b, n_mod, d))
                .unwrap()
                .to_owned();
            let mut dst = tokens.slice_mut(s![.., mi * n_mod..(mi + 1) * n_mod, ..]);
            dst.assign(&flat);
            for bi in 0..b {
                for t in 0..n_mod {
                    let mut tok = dst.slice_mut(s![bi, t, ..]);
                    tok += &self.pos_table.row(t);
                    tok += &self.modality.v.row(mi);
                }
            }
        }
        let mut modality_ids = vec![0u8; n_mod];
        modality_ids.extend(std::iter::repeat(1u8).take(n_mod));
        let mut grid_coords = Vec::with_capacity(n);
        for _ in 0..2 {
            for row in 0..s {
                for col in 0..s2 {
                    grid_coords.push((row, col));
                }
            }
        }
        Ok(TokenSequence {
            tokens,
            modality_ids,
            grid_coords,
            visible: Array2::from_elem((b, n), true),
        })
    }

    /// Drops masked tokens, runs the transformer blocks over the visible
    /// ones, and applies the final normalization.
    pub fn vit_encode(&self, seq: &TokenSequence) -> Result<(EncodedTokens, VitCache)> {
        let b = seq.batch();
        let n = seq.len();
        let nv = seq.visible_count(0);
        if nv == 0 {
            return Err(Error::shape("all tokens masked; nothing to encode"));
        }
        let d = seq.tokens.dim().2;
        let mut src = Array2::<usize>::zeros((b, nv));
        let mut gathered = Array3::<f64>::zeros((b, nv, d));
        for bi in 0..b {
            let mut j = 0;
            for t in 0..n {
                if seq.visible[(bi, t)] {
                    if j >= nv {
                        return Err(Error::shape("uneven visible counts across batch"));
                    }
                    src[(bi, j)] = t;
                    gathered
                        .slice_mut(s![bi, j, ..])
                        .assign(&seq.tokens.slice(s![bi, t, ..]));
                    j += 1;
                }
            }
            if j != nv {
                return Err(Error::shape("uneven visible counts across batch"));
            }
        }
        let mut x = gathered;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(x.view())?;
            blocks.push(cache);
            x = y;
        }
        let (y, final_ln) = vit::norm3(x.view(), &self.final_norm);
        let encoded = EncodedTokens { tokens: y, src: src.clone(), n_total: n };
        Ok((encoded, VitCache { src, blocks, final_ln, nv }))
    }

    /// Backprop through final norm and blocks; scatters token gradients back
    /// to the full (pre-mask) sequence layout and adds them into
    /// `d_tokens` [B, N, D].
    pub fn vit_backward(
        &mut self,
        d_encoded: ArrayView3<'_, f64>,
        cache: &VitCache,
        d_tokens: &mut Array3<f64>,
    ) {
        let (b, nv, _) = d_encoded.dim();
        debug_assert_eq!(nv, cache.nv);
        let d_flat = vit::flat2_tokens(d_encoded);
        let d_in = self.final_norm.backward(d_flat.view(), &cache.final_ln, true);
        let mut dx = vit::unflat3_tokens(d_in, b, nv);
        for (block, bcache) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            dx = block.backward(dx.view(), bcache, true);
        }
        for bi in 0..b {
            for j in 0..nv {
                let t = cache.src[(bi, j)];
                let mut dst = d_tokens.slice_mut(s![bi, t, ..]);
                dst += &dx.slice(s![bi, j, ..]);
            }
        }
    }

    /// Backprop from full-sequence token gradients through the embeddings
    /// and both stems.
    pub fn stems_backward(&mut self, d_tokens: &Array3<f64>, cache: &StemsCache) {
        let (b, n, d) = d_tokens.dim();
        let n_mod = n / 2;
        let side = self.cfg.grid_side();
        // modality embedding gradient
        for mi in 0..2 {
            let slab = d_tokens.slice(s![.., mi * n_mod..(mi + 1) * n_mod, ..]);
            let mut g = self.modality.g.row_mut(mi);
            for bi in 0..b {
                for t in 0..n_mod {
                    g += &slab.slice(s![bi, t, ..]);
                }
            }
        }
        for (mi, (stem, scache)) in [
            (&mut self.stem_rgb, &cache.rgb),
            (&mut self.stem_depth, &cache.depth),
        ]
        .into_iter()
        .enumerate()
        {
            let slab = d_tokens
                .slice(s![.., mi * n_mod..(mi + 1) * n_mod, ..])
                .to_owned()
                .into_shape_with_order((b, side, side, d))
                .unwrap()
                .permuted_axes([0, 3, 1, 2])
                .as_standard_layout()
                .to_owned();
            stem.backward(slab.view(), scache);
        }
    }

    /// Stems, tokenize, optional masking, ViT; stops before pooling.
    pub fn encode_tokens(
        &self,
        obs: &ObsBatch,
        mask: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(EncodedTokens, EncodeCache)> {
        let (h_rgb, h_d, stems) = self.stem_forward(obs)?;
        let mut seq = self.tokenize(&h_rgb, &h_d)?;
        if let Some((m, rng)) = mask {
            seq = random_mask(&seq, m, rng)?;
        }
        let n_tokens = seq.len();
        let (encoded, vit_cache) = self.vit_encode(&seq)?;
        Ok((encoded, EncodeCache { stems, vit: vit_cache, n_tokens }))
    }

    /// Full forward: stems, tokenize, optional masking, ViT, pool.
    pub fn encode(
        &self,
        obs: &ObsBatch,
        mask: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(Array2<f64>, EncodeCache)> {
        let (encoded, cache) = self.encode_tokens(obs, mask)?;
        let repr = pool(&encoded)?;
        Ok((repr, cache))
    }

    /// Backprop a gradient on the encoded visible tokens through the whole
    /// encoder, accumulating parameter gradients.
    pub fn backward_tokens(&mut self, d_encoded: ArrayView3<'_, f64>, cache: &EncodeCache) {
        let mut d_tokens =
            Array3::<f64>::zeros((d_encoded.dim().0, cache.n_tokens, self.cfg.embed_dim));
        self.vit_backward(d_encoded, &cache.vit, &mut d_tokens);
        self.stems_backward(&d_tokens, &cache.stems);
    }

    /// Forward without keeping caches, for target computation and acting.
    pub fn encode_nograd(&self, obs: &ObsBatch) -> Result<Array2<f64>> {
        let (repr, _) = self.encode(obs, None)?;
        Ok(repr)
    }

    /// Backprop a representation gradient through the whole encoder,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, d_repr: &Array2<f64>, cache: &EncodeCache) {
        let d_encoded = pool_backward(d_repr, cache.vit.nv);
        let mut d_tokens =
            Array3::<f64>::zeros((d_repr.dim().0, cache.n_tokens, self.cfg.embed_dim));
        self.vit_backward(d_encoded.view(), &cache.vit, &mut d_tokens);
        self.stems_backward(&d_tokens, &cache.stems);
    }

    /// Splits full-sequence token gradients back into per-modality grids
    /// [B, D, S, S]; used by the Grad-CAM emitter.
    pub fn split_token_grads(&self, d_tokens: &Array3<f64>) -> (Array4<f64>, Array4<f64>) {
        let (b, n, d) = d_tokens.dim();
        let n_mod = n / 2;
        let side = self.cfg.grid_side();
        let mut grids = Vec::with_capacity(2);
        for mi in 0..2 {
            let g = d_tokens
                .slice(s![.., mi * n_mod..(mi + 1) * n_mod, ..])
                .to_owned()
                .into_shape_with_order((b, side, side, d))
                .unwrap()
                .permuted_axes([0, 3, 1, 2])
                .as_standard_layout()
                .to_owned();
            grids.push(g);
        }
        let h_d = grids.pop().unwrap();
        let h_rgb = grids.pop().unwrap();
        (h_rgb, h_d)
    }

    pub fn representation_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    /// EMA update toward `other`, used for the target encoder.
    pub fn blend_from(&mut self, other: &Encoder, rho: f64) {
        self.stem_rgb.blend_from(&other.stem_rgb, rho);
        self.stem_depth.blend_from(&other.stem_depth, rho);
        self.modality.blend_from(&other.modality, rho);
        for (b, o) in self.blocks.iter_mut().zip(other.blocks.iter()) {
            b.blend_from(o, rho);
        }
        self.final_norm.blend_from(&other.final_norm, rho);
    }
}

impl Net for Encoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.stem_rgb.visit_params(&nn::path(prefix, "stem_rgb"), f);
        self.stem_depth.visit_params(&nn::path(prefix, "stem_depth"), f);
        f(&nn::path(prefix, "modality"), self.modality.as_mut());
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&nn::path(prefix, &format!("block{i}")), f);
        }
        self.final_norm.visit_params(&nn::path(prefix, "final_norm"), f);
    }
}

/// Compact visual representation of a single observation.
pub type Representation = Array1<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            frame_stack: 2,
            patch_stride: 8,
            embed_dim: 16,
            heads: 2,
            head_dim: 4,
            layers: 1,
            stem_channels: vec![4, 4, 8],
            mask_ratio: 0.1,
        }
    }

    fn tiny_obs(cfg: &EncoderConfig, b: usize) -> ObsBatch {
        let s = cfg.image_size;
        let rgb = Array4::from_shape_fn((b, cfg.rgb_channels(), s, s), |(bi, c, i, j)| {
            ((bi * 91 + c * 37 + i * 11 + j * 3) % 256) as f64
        });
        let depth = Array4::from_shape_fn((b, 1, s, s), |(bi, _, i, j)| {
            ((bi * 53 + i * 7 + j * 13) % 256) as f64
        });
        ObsBatch { rgb, depth }
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let mut c = tiny_cfg();
        c.patch_stride = 6;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.stem_channels = vec![4, 4];
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.mask_ratio = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sincos_rows_are_distinct_and_bounded() {
        let t = sincos_pos_table(4, 8);
        assert_eq!(t.dim(), (16, 8));
        assert!(t.iter().all(|v| v.abs() <= 1.0));
        // row 0 is sin(0)/cos(0) interleaved in both halves
        assert_eq!(t.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        for a in 0..16 {
            for b in (a + 1)..16 {
                let diff: f64 = (&t.row(a) - &t.row(b)).mapv(f64::abs).sum();
                assert!(diff > 1e-6, "rows {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn tokenize_adds_positional_and_modality_embeddings() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&cfg, &mut rng).unwrap();
        let side = cfg.grid_side();
        let d = cfg.embed_dim;
        let h_rgb = Array4::from_elem((1, d, side, side), 0.25);
        let h_d = Array4::from_elem((1, d, side, side), -0.5);
        let seq = enc.tokenize(&h_rgb, &h_d).unwrap();
        assert_eq!(seq.len(), cfg.total_tokens());
        assert_eq!(seq.modality_ids[0], 0);
        assert_eq!(*seq.modality_ids.last().unwrap(), 1);
        assert!(seq.visible.iter().all(|&v| v));
        // first rgb token = grid value + pos row 0 + modality row 0
        let expect =
            0.25 + enc.pos_table[(0, 3)] + enc.modality.v[(0, 3)];
        assert_abs_diff_eq!(seq.tokens[(0, 0, 3)], expect, epsilon = 1e-12);
        // first depth token uses modality row 1
        let n_mod = cfg.tokens_per_modality();
        let expect = -0.5 + enc.pos_table[(0, 3)] + enc.modality.v[(1, 3)];
        assert_abs_diff_eq!(seq.tokens[(0, n_mod, 3)], expect, epsilon = 1e-12);
    }

    #[test]
    fn mask_drops_exact_counts_per_modality() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&cfg, &mut rng).unwrap();
        let (h_rgb, h_d, _) = enc.stem_forward(&tiny_obs(&cfg, 3)).unwrap();
        let seq = enc.tokenize(&h_rgb, &h_d).unwrap();
        let n_mod = cfg.tokens_per_modality();
        for &m in &[0.0, 0.25, 0.5] {
            let masked = random_mask(&seq, m, &mut rng).unwrap();
            let expect_hidden = (m * n_mod as f64).floor() as usize;
            for bi in 0..3 {
                let rgb_hidden = (0..n_mod).filter(|&t| !masked.visible[(bi, t)]).count();
                let d_hidden = (n_mod..2 * n_mod).filter(|&t| !masked.visible[(bi, t)]).count();
                assert_eq!(rgb_hidden, expect_hidden);
                assert_eq!(d_hidden, expect_hidden);
            }
        }
    }

    #[test]
    fn pool_is_token_mean_and_backward_spreads() {
        let tokens = Array3::from_shape_fn((2, 3, 4), |(b, t, i)| (b + t + i) as f64);
        let enc = EncodedTokens {
            tokens: tokens.clone(),
            src: Array2::zeros((2, 3)),
            n_total: 6,
        };
        let r = pool(&enc).unwrap();
        assert_abs_diff_eq!(r[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[(1, 3)], 5.0, epsilon = 1e-12);
        let d = Array2::from_elem((2, 4), 0.9);
        let dt = pool_backward(&d, 3);
        assert_eq!(dt.dim(), (2, 3, 4));
        assert_abs_diff_eq!(dt[(0, 2, 1)], 0.3, epsilon = 1e-12);
        // summing token grads recovers the representation grad
        assert_abs_diff_eq!(dt.sum_axis(Axis(1)), d, epsilon = 1e-12);
    }

    #[test]
    fn encode_shapes_and_mask_reduce_tokens() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(&cfg, &mut rng).unwrap();
        let obs = tiny_obs(&cfg, 2);
        let (full, cache) = enc.encode_tokens(&obs, None).unwrap();
        assert_eq!(full.tokens.dim(), (2, cfg.total_tokens(), cfg.embed_dim));
        assert_eq!(cache.vit.depth(), cfg.layers);
        let mut mrng = ChaCha8Rng::seed_from_u64(3);
        let (masked, _) = enc.encode_tokens(&obs, Some((0.5, &mut mrng))).unwrap();
        let n_mod = cfg.tokens_per_modality();
        let expect = 2 * (n_mod - (0.5 * n_mod as f64).floor() as usize);
        assert_eq!(masked.tokens.dim().1, expect);
        let (repr, _) = enc.encode(&obs, None).unwrap();
        assert_eq!(repr.dim(), (2, cfg.embed_dim));
        assert_abs_diff_eq!(repr, enc.encode_nograd(&obs).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn masked_positions_receive_no_token_gradient() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = Encoder::new(&cfg, &mut rng).unwrap();
        let obs = tiny_obs(&cfg, 1);
        let mut mrng = ChaCha8Rng::seed_from_u64(5);
        let (encoded, cache) = enc.encode_tokens(&obs, Some((0.5, &mut mrng))).unwrap();
        let d_enc = Array3::from_elem(encoded.tokens.raw_dim(), 1.0);
        let mut d_tokens = Array3::<f64>::zeros((1, cfg.total_tokens(), cfg.embed_dim));
        enc.vit_backward(d_enc.view(), &cache.vit, &mut d_tokens);
        let visible: std::collections::HashSet<usize> =
            encoded.src.row(0).iter().cloned().collect();
        for t in 0..cfg.total_tokens() {
            let mag = d_tokens.slice(s![0, t, ..]).mapv(f64::abs).sum();
            if visible.contains(&t) {
                assert!(mag > 0.0, "visible token {t} got no gradient");
            } else {
                assert_eq!(mag, 0.0, "masked token {t} got gradient");
            }
        }
    }

    #[test]
    fn split_token_grads_inverts_tokenize_layout() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(&cfg, &mut rng).unwrap();
        let side = cfg.grid_side();
        let n = cfg.total_tokens();
        let d = cfg.embed_dim;
        let d_tokens = Array3::from_shape_fn((1, n, d), |(_, t, i)| (t * d + i) as f64);
        let (g_rgb, g_d) = enc.split_token_grads(&d_tokens);
        assert_eq!(g_rgb.dim(), (1, d, side, side));
        // token t of modality 0 sits at grid (t / side, t % side)
        let t = 3usize;
        assert_eq!(g_rgb[(0, 2, t / side, t % side)], (t * d + 2) as f64);
        let td = cfg.tokens_per_modality() + 1;
        assert_eq!(g_d[(0, 5, 0, 1)], (td * d + 5) as f64);
    }

    #[test]
    fn full_encoder_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut enc = Encoder::new(&cfg, &mut rng).unwrap();
        let obs = tiny_obs(&cfg, 1);
        // scalar loss: fixed random projection of the pooled representation
        let w = Array2::from_shape_fn((1, cfg.embed_dim), |(_, i)| ((i % 5) as f64 - 2.0) * 0.3);
        let (repr, cache) = enc.encode(&obs, None).unwrap();
        let loss0 = (&repr * &w).sum();
        enc.zero_grad();
        enc.backward(&w, &cache);
        // check one weight in each functional area against finite differences
        let h = 1e-5;
        let mut checks: Vec<(String, f64)> = Vec::new();
        enc.visit_params("", &mut |name, p| {
            if name == "stem_rgb.conv0.w"
                || name == "modality"
                || name == "block0.attn.wq.w"
                || name == "final_norm.gamma"
            {
                checks.push((name.to_string(), p.g.as_slice().unwrap()[0]));
            }
        });
        assert_eq!(checks.len(), 4);
        for (name, analytic) in checks {
            let mut probe = |delta: f64| {
                enc.visit_params("", &mut |n, mut p| {
                    if n == name {
                        p.v.as_slice_mut().unwrap()[0] += delta;
                    }
                });
                let (r, _) = enc.encode(&obs, None).unwrap();
                let l = (&r * &w).sum();
                enc.visit_params("", &mut |n, mut p| {
                    if n == name {
                        p.v.as_slice_mut().unwrap()[0] -= delta;
                    }
                });
                l
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let scale = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / scale < 1e-4,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        }
        assert!(loss0.is_finite());
    }
}
