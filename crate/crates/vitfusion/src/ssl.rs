//! Self-supervised objectives on the encoder: the masked/unmasked
//! contrastive loss and the optional masked-autoencoder reconstruction head.

use ndarray::{s, Array1, Array2, Array3, Array4, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Augmentor;
use crate::encoder::{
    sincos_pos_table, EncodeCache, EncodedTokens, Encoder, EncoderConfig, ObsBatch, VitBlock,
};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, LayerNorm, LayerNormCache, Linear, Net, Param, ParamMut, WeightInit};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Turns the contrastive objective off entirely (ablation).
    pub enabled: bool,
    /// Temperature of the dot-product similarity.
    pub temperature: f64,
    /// Loss weight.
    pub alpha: f64,
    /// Token mask ratio for the key branch.
    pub mask_ratio: f64,
    /// Update period in steps (an update runs when step % frequency == 0).
    pub frequency: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            enabled: true,
            temperature: 0.1,
            alpha: 1.0,
            mask_ratio: 0.1,
            frequency: 2,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        if self.frequency < 1 {
            return Err(Error::config("frequency must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio outside [0,1)"));
        }
        Ok(())
    }
}

/// InfoNCE over in-batch negatives with dot-product similarity.
///
/// Row b of `queries` is the unmasked representation of sample b; row b of
/// `keys` is the masked-view representation of the same sample. Returns the
/// loss and its gradients with respect to queries and keys.
pub fn curl_loss(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    let b = queries.dim().0;
    if b < 2 {
        return Err(Error::config(format!(
            "contrastive loss needs at least 2 samples for negatives, got {b}"
        )));
    }
    if queries.dim() != keys.dim() {
        return Err(Error::shape(format!(
            "queries {:?} vs keys {:?}",
            queries.dim(),
            keys.dim()
        )));
    }
    let logits = queries.dot(&keys.t()) / cfg.temperature;
    // row-wise softmax with max subtraction
    let mut probs = Array2::<f64>::zeros((b, b));
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let exps: Array1<f64> = row.mapv(|v| (v - m).exp());
        let z = exps.sum();
        probs.row_mut(i).assign(&(&exps / z));
        loss += z.ln() + m - logits[(i, i)];
    }
    loss *= cfg.alpha / b as f64;
    let mut dlogits = probs;
    for i in 0..b {
        dlogits[(i, i)] -= 1.0;
    }
    dlogits *= cfg.alpha / b as f64;
    let dq = dlogits.dot(keys) / cfg.temperature;
    let dk = dlogits.t().dot(queries) / cfg.temperature;
    Ok((loss, dq, dk))
}

/// One contrastive update: shift the batch, encode unmasked (queries) and
/// masked (keys) views with the same weights, and step the encoder. Actor
/// and critic parameters are untouched.
pub fn curl_step(
    encoder: &mut Encoder,
    opt: &mut Adam,
    obs: &ObsBatch,
    cfg: &ContrastiveConfig,
    aug: &Augmentor,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let shifted = aug.shift(obs, rng);
    let (q_repr, q_cache) = encoder.encode(&shifted, None)?;
    let (k_repr, k_cache) = encoder.encode(&shifted, Some((cfg.mask_ratio, rng)))?;
    let (loss, dq, dk) = curl_loss(&q_repr, &k_repr, cfg)?;
    encoder.zero_grad();
    encoder.backward(&dq, &q_cache);
    encoder.backward(&dk, &k_cache);
    opt.step(encoder);
    Ok(loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub enabled: bool,
    pub layers: usize,
    pub heads: usize,
    pub recon_mask_ratio: f64,
    pub w_rgb: f64,
    pub w_d: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            enabled: false,
            layers: 3,
            heads: 4,
            recon_mask_ratio: 0.5,
            w_rgb: 1.0,
            w_d: 10.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::config("decoder layers and heads must be positive"));
        }
        if enc.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by decoder heads {}",
                enc.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.recon_mask_ratio) {
            return Err(Error::config("recon_mask_ratio outside [0,1)"));
        }
        if self.w_rgb < 0.0 || self.w_d < 0.0 {
            return Err(Error::config("reconstruction weights must be non-negative"));
        }
        Ok(())
    }
}

/// Splits normalized images into per-token patches matching the encoder's
/// grid order: [B, C, H, W] -> [B, S*S, P*P*C], patch content flattened
/// channel-major.
pub fn patchify(img: &Array4<f64>, patch: usize) -> Array3<f64> {
    let (b, c, h, w) = img.dim();
    debug_assert_eq!(h % patch, 0);
    let side = h / patch;
    debug_assert_eq!(w / patch, side);
    let mut out = Array3::<f64>::zeros((b, side * side, patch * patch * c));
    for bi in 0..b {
        for gy in 0..side {
            for gx in 0..side {
                let t = gy * side + gx;
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            let col = (ch * patch + py) * patch + px;
                            out[(bi, t, col)] = img[(bi, ch, gy * patch + py, gx * patch + px)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Lightweight transformer decoder reconstructing raw patches from visible
/// encoded tokens plus learned mask tokens.
#[derive(Clone)]
pub struct MaeDecoder {
    pub mask_token: Param<Ix1>,
    pub modality: Param<Ix2>,
    pub blocks: Vec<VitBlock>,
    pub final_norm: LayerNorm,
    pub head_rgb: Linear,
    pub head_d: Linear,
    pos: Array2<f64>,
    embed_dim: usize,
}

pub struct DecForward {
    pub pred_rgb: Array3<f64>,
    pub pred_d: Array3<f64>,
    full_in: Array3<f64>,
    visible: Array2<bool>,
    src: Array2<usize>,
    blocks: Vec<crate::encoder::BlockCache>,
    final_ln: LayerNormCache,
    norm_out: Array3<f64>,
}

impl MaeDecoder {
    pub fn new(rng: &mut ChaCha8Rng, enc: &EncoderConfig, dcfg: &DecoderConfig) -> Result<Self> {
        dcfg.validate(enc)?;
        let d = enc.embed_dim;
        let head_dim = d / dcfg.heads;
        let blocks = (0..dcfg.layers)
            .map(|_| VitBlock::new(rng, d, dcfg.heads, head_dim, 4 * d))
            .collect();
        let p2 = enc.patch_stride * enc.patch_stride;
        Ok(MaeDecoder {
            mask_token: Param::new(WeightInit::kaiming_uniform(rng, d, d)),
            modality: Param::new(WeightInit::kaiming_uniform(rng, (2, d), d)),
            blocks,
            final_norm: LayerNorm::new(rng, d),
            head_rgb: Linear::new(rng, d, p2 * enc.rgb_channels()),
            head_d: Linear::new(rng, d, p2),
            pos: sincos_pos_table(enc.grid_side(), d),
            embed_dim: d,
        })
    }

    /// Reassembles the full token sequence (mask tokens at dropped sites),
    /// decodes, and predicts patches for both modalities.
    pub fn forward(&self, encoded: &EncodedTokens) -> Result<(Array3<f64>, Array3<f64>, DecForward)> {
        let (b, nv, d) = encoded.tokens.dim();
        if d != self.embed_dim {
            return Err(Error::shape(format!(
                "encoded width {d} does not match decoder width {}",
                self.embed_dim
            )));
        }
        let n = encoded.n_total;
        let n_mod = n / 2;
        let mut full = Array3::<f64>::zeros((b, n, d));
        let mut visible = Array2::<bool>::from_elem((b, n), false);
        for bi in 0..b {
            for t in 0..n {
                full.slice_mut(s![bi, t, ..]).assign(&self.mask_token.v);
            }
            for j in 0..nv {
                let t = encoded.src[(bi, j)];
                visible[(bi, t)] = true;
                full.slice_mut(s![bi, t, ..])
                    .assign(&encoded.tokens.slice(s![bi, j, ..]));
            }
            for t in 0..n {
                let (mi, g) = if t < n_mod { (0, t) } else { (1, t - n_mod) };
                let mut tok = full.slice_mut(s![bi, t, ..]);
                tok += &self.pos.row(g);
                tok += &self.modality.v.row(mi);
            }
        }
        let full_in = full.clone();
        let mut x = full;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(x.view())?;
            blocks.push(cache);
            x = y;
        }
        let (norm_out, final_ln) = crate::encoder::vit_norm3(x.view(), &self.final_norm);
        let rgb_in = flatten_half(&norm_out, 0, n_mod);
        let d_in = flatten_half(&norm_out, 1, n_mod);
        let pred_rgb_2 = self.head_rgb.forward(rgb_in.view());
        let pred_d_2 = self.head_d.forward(d_in.view());
        let pred_rgb = pred_rgb_2
            .into_shape_with_order((b, n_mod, self.head_rgb.d_out()))
            .unwrap();
        let pred_d = pred_d_2
            .into_shape_with_order((b, n_mod, self.head_d.d_out()))
            .unwrap();
        let fwd = DecForward {
            pred_rgb: pred_rgb.clone(),
            pred_d: pred_d.clone(),
            full_in,
            visible,
            src: encoded.src.clone(),
            blocks,
            final_ln,
            norm_out,
        };
        Ok((pred_rgb, pred_d, fwd))
    }

    /// Backprop from patch-prediction gradients; accumulates decoder
    /// parameter gradients and returns the gradient with respect to the
    /// encoder's visible tokens [B, Nv, D].
    pub fn backward(
        &mut self,
        d_rgb: &Array3<f64>,
        d_d: &Array3<f64>,
        fwd: &DecForward,
    ) -> Array3<f64> {
        let (b, n, d) = fwd.full_in.dim();
        let n_mod = n / 2;
        let d_rgb_2 = d_rgb
            .to_owned()
            .into_shape_with_order((b * n_mod, d_rgb.dim().2))
            .unwrap();
        let d_d_2 = d_d
            .to_owned()
            .into_shape_with_order((b * n_mod, d_d.dim().2))
            .unwrap();
        let rgb_in = flatten_half(&fwd.norm_out, 0, n_mod);
        let dep_in = flatten_half(&fwd.norm_out, 1, n_mod);
        let d_rgb_tok = self.head_rgb.backward(rgb_in.view(), d_rgb_2.view(), true);
        let d_dep_tok = self.head_d.backward(dep_in.view(), d_d_2.view(), true);
        let mut d_norm = Array3::<f64>::zeros((b, n, d));
        scatter_half(&mut d_norm, &d_rgb_tok, 0, n_mod);
        scatter_half(&mut d_norm, &d_dep_tok, 1, n_mod);
        let d_norm_2 = d_norm.into_shape_with_order((b * n, d)).unwrap();
        let d_fin = self.final_norm.backward(d_norm_2.view(), &fwd.final_ln, true);
        let mut dx = d_fin.into_shape_with_order((b, n, d)).unwrap();
        for (block, cache) in self.blocks.iter_mut().zip(fwd.blocks.iter()).rev() {
            dx = block.backward(dx.view(), cache, true);
        }
        // embedding gradients and routing back to encoder tokens
        let nv = fwd.src.dim().1;
        let mut d_encoded = Array3::<f64>::zeros((b, nv, d));
        for bi in 0..b {
            for t in 0..n {
                let g = dx.slice(s![bi, t, ..]);
                let mi = if t < n_mod { 0 } else { 1 };
                let mut mg = self.modality.g.row_mut(mi);
                mg += &g;
                if !fwd.visible[(bi, t)] {
                    let mut tg = self.mask_token.g.view_mut();
                    tg += &g;
                }
            }
            for j in 0..nv {
                let t = fwd.src[(bi, j)];
                d_encoded
                    .slice_mut(s![bi, j, ..])
                    .assign(&dx.slice(s![bi, t, ..]));
            }
        }
        d_encoded
    }
}

fn flatten_half(x: &Array3<f64>, half: usize, n_mod: usize) -> Array2<f64> {
    let (b, _, d) = x.dim();
    x.slice(s![.., half * n_mod..(half + 1) * n_mod, ..])
        .to_owned()
        .into_shape_with_order((b * n_mod, d))
        .unwrap()
}

fn scatter_half(out: &mut Array3<f64>, grad: &Array2<f64>, half: usize, n_mod: usize) {
    let (b, _, d) = out.dim();
    let g = grad
        .to_owned()
        .into_shape_with_order((b, n_mod, d))
        .unwrap();
    out.slice_mut(s![.., half * n_mod..(half + 1) * n_mod, ..])
        .assign(&g);
}

impl Net for MaeDecoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        f(&nn::path(prefix, "mask_token"), self.mask_token.as_mut());
        f(&nn::path(prefix, "modality"), self.modality.as_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&nn::path(prefix, &format!("block{i}")), f);
        }
        self.final_norm.visit_params(&nn::path(prefix, "final_norm"), f);
        self.head_rgb.visit_params(&nn::path(prefix, "head_rgb"), f);
        self.head_d.visit_params(&nn::path(prefix, "head_d"), f);
    }
}

/// Weighted reconstruction loss over both modalities:
/// w_rgb * MSE(rgb patches) + w_d * MSE(depth patches).
/// Returns the loss and gradients with respect to the predictions.
pub fn recon_loss(
    pred_rgb: &Array3<f64>,
    pred_d: &Array3<f64>,
    target_rgb: &Array3<f64>,
    target_d: &Array3<f64>,
    dcfg: &DecoderConfig,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    if pred_rgb.dim() != target_rgb.dim() || pred_d.dim() != target_d.dim() {
        return Err(Error::config(format!(
            "patch count mismatch: pred {:?}/{:?} vs target {:?}/{:?}",
            pred_rgb.dim(),
            pred_d.dim(),
            target_rgb.dim(),
            target_d.dim()
        )));
    }
    let n_rgb = pred_rgb.len() as f64;
    let n_d = pred_d.len() as f64;
    let diff_rgb = pred_rgb - target_rgb;
    let diff_d = pred_d - target_d;
    let mse_rgb = diff_rgb.mapv(|v| v * v).sum() / n_rgb;
    let mse_d = diff_d.mapv(|v| v * v).sum() / n_d;
    let loss = dcfg.w_rgb * mse_rgb + dcfg.w_d * mse_d;
    let d_rgb = diff_rgb.mapv(|v| 2.0 * dcfg.w_rgb * v / n_rgb);
    let d_d = diff_d.mapv(|v| 2.0 * dcfg.w_d * v / n_d);
    Ok((loss, d_rgb, d_d))
}

/// End-to-end decoder loss on a masked encoding of `obs` (already
/// normalized targets are derived here from the raw pixel batch).
pub fn decoder_loss(
    dec: &MaeDecoder,
    encoded: &EncodedTokens,
    obs: &ObsBatch,
    enc_cfg: &EncoderConfig,
    dcfg: &DecoderConfig,
) -> Result<(f64, Array3<f64>, Array3<f64>, DecForward)> {
    let (pred_rgb, pred_d, fwd) = dec.forward(encoded)?;
    let t_rgb = patchify(&obs.rgb.mapv(|v| v / 255.0 - 0.5), enc_cfg.patch_stride);
    let t_d = patchify(&obs.depth.mapv(|v| v / 255.0 - 0.5), enc_cfg.patch_stride);
    let (loss, d_rgb, d_d) = recon_loss(&pred_rgb, &pred_d, &t_rgb, &t_d, dcfg)?;
    Ok((loss, d_rgb, d_d, fwd))
}

/// Convenience wrapper: decoder loss, decoder backward, and encoder backward
/// in one call. Used inside the critic update when the head is enabled.
#[allow(clippy::too_many_arguments)]
pub fn decoder_update_grads(
    dec: &mut MaeDecoder,
    encoder: &mut Encoder,
    cache: &EncodeCache,
    encoded: &EncodedTokens,
    obs: &ObsBatch,
    enc_cfg: &EncoderConfig,
    dcfg: &DecoderConfig,
) -> Result<f64> {
    let (loss, d_rgb, d_d, fwd) = decoder_loss(dec, encoded, obs, enc_cfg, dcfg)?;
    let d_encoded = dec.backward(&d_rgb, &d_d, &fwd);
    encoder.backward_tokens(d_encoded.view(), cache);
    Ok(loss)
}
