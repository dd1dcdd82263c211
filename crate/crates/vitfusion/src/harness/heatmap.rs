//! Attention visualization: Grad-CAM over the final stem feature maps and
//! attention rollout over the ViT blocks.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};

use crate::agent::TrainState;
use crate::encoder::{pool, pool_backward, ObsBatch, ObservationPair};
use crate::error::{Error, Result};
use crate::nn::Net;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapMethod {
    /// Gradient of the policy action's Q-value with respect to the final
    /// stem feature maps, channel-weighted and ReLU-ed.
    GradCamOnStem,
    /// Product of per-layer attention matrices mixed with identity.
    AttentionRollout,
}

impl HeatmapMethod {
    pub fn name(&self) -> &'static str {
        match self {
            HeatmapMethod::GradCamOnStem => "grad_cam",
            HeatmapMethod::AttentionRollout => "attention_rollout",
        }
    }
}

impl FromStr for HeatmapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad_cam" | "grad-cam" | "grad_cam_on_stem" => Ok(HeatmapMethod::GradCamOnStem),
            "attention_rollout" | "rollout" => Ok(HeatmapMethod::AttentionRollout),
            other => Err(Error::config(format!("unknown heatmap method '{other}'"))),
        }
    }
}

/// Rescales to [0,1] with exact endpoints; a constant map becomes all zeros
/// (uniform in, uniform out).
pub fn normalize_unit(map: &mut Array2<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        map.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        map.fill(0.0);
    }
}

/// Bilinear upsample with corner alignment.
pub fn upsample_bilinear(map: &Array2<f64>, out: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let mut res = Array2::<f64>::zeros((out, out));
    if h == 0 || w == 0 || out == 0 {
        return res;
    }
    let sy = if out > 1 { (h as f64 - 1.0) / (out as f64 - 1.0) } else { 0.0 };
    let sx = if out > 1 { (w as f64 - 1.0) / (out as f64 - 1.0) } else { 0.0 };
    for y in 0..out {
        let fy = y as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..out {
            let fx = x as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let a = map[(y0, x0)] * (1.0 - ty) * (1.0 - tx)
                + map[(y0, x1)] * (1.0 - ty) * tx
                + map[(y1, x0)] * ty * (1.0 - tx)
                + map[(y1, x1)] * ty * tx;
            res[(y, x)] = a;
        }
    }
    res
}

/// Grad-CAM core: channel weights are the spatial mean of the gradient, the
/// map is the ReLU of the weighted channel sum.
pub fn cam_from(h: ArrayView3<'_, f64>, g: ArrayView3<'_, f64>) -> Array2<f64> {
    let (d, s, _) = h.dim();
    let area = (s * s) as f64;
    let mut cam = Array2::<f64>::zeros((s, s));
    for c in 0..d {
        let w = g.index_axis(Axis(0), c).sum() / area;
        cam.scaled_add(w, &h.index_axis(Axis(0), c));
    }
    cam.mapv_inplace(|v| v.max(0.0));
    cam
}

/// Per-modality Grad-CAM maps at token-grid resolution, normalized to [0,1].
/// The target is the clipped-double-Q value of the policy's action; its
/// gradient is taken at the final stem feature maps. Parameter gradients
/// dirtied along the way are zeroed before returning.
pub fn grad_cam(ts: &mut TrainState, obs: &ObservationPair) -> Result<(Array2<f64>, Array2<f64>)> {
    let batch = ObsBatch::single(obs);
    let (encoded, cache) = ts.encoder.encode_tokens(&batch, None)?;
    let nv = encoded.tokens.dim().1;
    let repr = pool(&encoded)?;
    let (a, _) = ts.actor.forward(&repr);
    let (q1, q2, ccache) = ts.critic.forward(&repr, &a);
    let mut dq1 = Array1::<f64>::zeros(1);
    let mut dq2 = Array1::<f64>::zeros(1);
    if q1[0] <= q2[0] {
        dq1[0] = 1.0;
    } else {
        dq2[0] = 1.0;
    }
    let (dz, _) = ts.critic.backward(&dq1, &dq2, &ccache, false);
    let d_encoded = pool_backward(&dz, nv);
    let n_tokens = cache.n_tokens;
    let d_model = ts.encoder.representation_dim();
    let mut d_tokens = Array3::<f64>::zeros((1, n_tokens, d_model));
    ts.encoder.vit_backward(d_encoded.view(), &cache.vit, &mut d_tokens);
    let (g_rgb, g_d) = ts.encoder.split_token_grads(&d_tokens);
    let mut rgb = cam_from(
        cache.stems.h_rgb.index_axis(Axis(0), 0),
        g_rgb.index_axis(Axis(0), 0),
    );
    let mut depth = cam_from(
        cache.stems.h_d.index_axis(Axis(0), 0),
        g_d.index_axis(Axis(0), 0),
    );
    normalize_unit(&mut rgb);
    normalize_unit(&mut depth);
    ts.encoder.zero_grad();
    Ok((rgb, depth))
}

/// Multiplies row-normalized (0.5 A + 0.5 I) across layers and reads token
/// relevance as the column mean of the product.
pub fn rollout_relevance(attn: &[Array2<f64>]) -> Array2<f64> {
    let n = attn.first().map(|a| a.dim().0).unwrap_or(0);
    let mut r = Array2::<f64>::eye(n);
    for a in attn {
        let mut mixed = a * 0.5;
        for i in 0..n {
            mixed[(i, i)] += 0.5;
        }
        // rows of a stochastic matrix mixed with identity still sum to 1,
        // but renormalize to absorb floating-point drift
        for mut row in mixed.axis_iter_mut(Axis(0)) {
            let s: f64 = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        r = mixed.dot(&r);
    }
    r
}

/// Per-modality attention-rollout maps at token-grid resolution, normalized
/// to [0,1].
pub fn attention_rollout(
    ts: &TrainState,
    obs: &ObservationPair,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let batch = ObsBatch::single(obs);
    let (_, cache) = ts.encoder.encode_tokens(&batch, None)?;
    let layers = cache.vit.depth();
    let mut mats = Vec::with_capacity(layers);
    for l in 0..layers {
        let probs = cache.vit.attn_probs(l);
        let heads = probs.dim().1;
        let n = probs.dim().2;
        let mut mean = Array2::<f64>::zeros((n, n));
        for h in 0..heads {
            mean += &probs.slice(s![0, h, .., ..]);
        }
        mean /= heads as f64;
        mats.push(mean);
    }
    let r = rollout_relevance(&mats);
    let n = r.dim().0;
    let relevance = r.sum_axis(Axis(0)) / n as f64;
    let side = ts.enc_cfg.grid_side();
    let per_mod = side * side;
    if n != 2 * per_mod {
        return Err(Error::shape(format!(
            "rollout expects the unmasked token count {} but saw {n}",
            2 * per_mod
        )));
    }
    let to_grid = |v: ndarray::ArrayView1<'_, f64>| {
        Array2::from_shape_fn((side, side), |(y, x)| v[y * side + x])
    };
    let mut rgb = to_grid(relevance.slice(s![0..per_mod]));
    let mut depth = to_grid(relevance.slice(s![per_mod..]));
    normalize_unit(&mut rgb);
    normalize_unit(&mut depth);
    Ok((rgb, depth))
}

pub struct EmittedMaps {
    /// Image-resolution maps in [0,1].
    pub rgb: Array2<f64>,
    pub depth: Array2<f64>,
    pub files: Vec<PathBuf>,
}

fn save_gray(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (map[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Luma([v])
    });
    img.save(path)?;
    Ok(())
}

fn save_input_frames(obs: &ObservationPair, step: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let (c, h, w) = obs.rgb.dim();
    let newest = c - 3;
    let rgb_path = dir.join(format!("{step}_rgb_input.png"));
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| obs.rgb[(newest + ch, y as usize, x as usize)];
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(&rgb_path)?;
    let d_path = dir.join(format!("{step}_depth_input.png"));
    let dimg = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([obs.depth[(0, y as usize, x as usize)]])
    });
    dimg.save(&d_path)?;
    Ok(vec![rgb_path, d_path])
}

/// Computes, upsamples, and writes per-modality heatmaps next to the input
/// frames. Files are named `{step}_{modality}_{method}.png`.
pub fn emit(
    ts: &mut TrainState,
    obs: &ObservationPair,
    method: HeatmapMethod,
    step: u64,
    dir: &Path,
) -> Result<EmittedMaps> {
    std::fs::create_dir_all(dir)?;
    let (rgb_grid, depth_grid) = match method {
        HeatmapMethod::GradCamOnStem => grad_cam(ts, obs)?,
        HeatmapMethod::AttentionRollout => attention_rollout(ts, obs)?,
    };
    let size = ts.enc_cfg.image_size;
    let rgb = upsample_bilinear(&rgb_grid, size);
    let depth = upsample_bilinear(&depth_grid, size);
    let mut files = save_input_frames(obs, step, dir)?;
    let rgb_path = dir.join(format!("{step}_rgb_{}.png", method.name()));
    save_gray(&rgb, &rgb_path)?;
    files.push(rgb_path);
    let d_path = dir.join(format!("{step}_depth_{}.png", method.name()));
    save_gray(&depth, &d_path)?;
    files.push(d_path);
    Ok(EmittedMaps { rgb, depth, files })
}
