//! Image augmentations: random shift (weak), random overlay (strong), and the
//! synthetic depth sensor pipeline.
//!
//! All functions are pure given an explicit rng and safe to call from any
//! thread.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::ObsBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Replicate-pad width for random shift, in pixels.
    pub shift_pad: usize,
    /// Blend weight of the distractor image in random overlay.
    pub overlay_alpha: f64,
    /// Directory of overlay images; generated procedurally when absent.
    pub overlay_dir: PathBuf,
    /// Number of overlay images to generate when the directory is empty.
    pub overlay_count: usize,
    /// Depth normalization ceiling, meters.
    pub depth_max: f64,
    /// Gaussian blur sigma for the depth pipeline, pixels. 0 disables.
    pub gaussian_sigma_px: f64,
    /// Per-pixel Gaussian noise std for depth, in [0,255] pixel units.
    pub depth_noise_std: f64,
    /// Probability of a depth pixel dropping to 0 (sensor dropout).
    pub dropout_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_pad: 4,
            overlay_alpha: 0.5,
            overlay_dir: PathBuf::from("overlays"),
            overlay_count: 12,
            depth_max: 2.0,
            gaussian_sigma_px: 0.6,
            depth_noise_std: 2.0,
            dropout_prob: 0.005,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(Error::config(format!(
                "overlay_alpha {} outside [0,1]",
                self.overlay_alpha
            )));
        }
        if self.depth_max <= 0.0 {
            return Err(Error::config(format!("depth_max {} must be positive", self.depth_max)));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::config("dropout_prob outside [0,1]"));
        }
        Ok(())
    }
}

fn shifted_copy(src: ArrayView2<'_, f64>, pad: i64, oy: i64, ox: i64) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let sy = (y as i64 + oy - pad).clamp(0, h as i64 - 1) as usize;
        for x in 0..w {
            let sx = (x as i64 + ox - pad).clamp(0, w as i64 - 1) as usize;
            out[(y, x)] = src[(sy, sx)];
        }
    }
    out
}

/// Replicate-pads each observation by `pad` pixels and crops back at a random
/// offset. One offset is drawn per sample and shared across all stacked
/// frames and both modalities of that sample.
pub fn random_shift(obs: &ObsBatch, pad: usize, rng: &mut ChaCha8Rng) -> ObsBatch {
    if pad == 0 {
        return obs.clone();
    }
    let (b, c_rgb, h, w) = obs.rgb.dim();
    let c_d = obs.depth.dim().1;
    let mut rgb = Array4::<f64>::zeros((b, c_rgb, h, w));
    let mut depth = Array4::<f64>::zeros((b, c_d, h, w));
    let p = pad as i64;
    for bi in 0..b {
        let oy = rng.random_range(0..=2 * pad) as i64;
        let ox = rng.random_range(0..=2 * pad) as i64;
        for c in 0..c_rgb {
            rgb.slice_mut(s![bi, c, .., ..])
                .assign(&shifted_copy(obs.rgb.slice(s![bi, c, .., ..]), p, oy, ox));
        }
        for c in 0..c_d {
            depth
                .slice_mut(s![bi, c, .., ..])
                .assign(&shifted_copy(obs.depth.slice(s![bi, c, .., ..]), p, oy, ox));
        }
    }
    ObsBatch { rgb, depth }
}

/// Pool of out-of-domain distractor images for the strong augmentation.
/// Images are loaded once and resized to the requested square size.
pub struct OverlayPool {
    /// Each image is [3, S, S] with pixels in [0, 255].
    images: Vec<Array3<f64>>,
}

impl OverlayPool {
    /// Loads every readable image in `dir`, resized to `size`. Generates a
    /// procedural pool first when the directory is missing or empty.
    pub fn load_or_generate(dir: &Path, size: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let have: Vec<PathBuf> = match std::fs::read_dir(dir) {
            Ok(entries) => {
                let mut v: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()),
                            Some("png") | Some("jpg") | Some("jpeg")
                        )
                    })
                    .collect();
                v.sort();
                v
            }
            Err(_) => Vec::new(),
        };
        if have.is_empty() {
            generate_pool(dir, count, size, rng)?;
            return Self::load_or_generate(dir, size, count, rng);
        }
        let mut images = Vec::with_capacity(have.len());
        for p in &have {
            let img = image::open(p)?.to_rgb8();
            let img = image::imageops::resize(
                &img,
                size as u32,
                size as u32,
                image::imageops::FilterType::Triangle,
            );
            let mut arr = Array3::<f64>::zeros((3, size, size));
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    arr[(c, y as usize, x as usize)] = px.0[c] as f64;
                }
            }
            images.push(arr);
        }
        Ok(OverlayPool { images })
    }

    /// Pool with explicit images, for tests.
    pub fn from_images(images: Vec<Array3<f64>>) -> Self {
        OverlayPool { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Array3<f64> {
        &self.images[idx % self.images.len()]
    }
}

/// Writes `count` procedural texture images (smooth noise, stripes, checker)
/// into `dir` as PNGs.
pub fn generate_pool(dir: &Path, count: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let mut img = image::RgbImage::new(size as u32, size as u32);
        let kind = i % 4;
        let base = [
            rng.random_range(40..220u16) as f64,
            rng.random_range(40..220u16) as f64,
            rng.random_range(40..220u16) as f64,
        ];
        let alt = [
            rng.random_range(40..220u16) as f64,
            rng.random_range(40..220u16) as f64,
            rng.random_range(40..220u16) as f64,
        ];
        let period = rng.random_range(6..20usize);
        // low-res noise grid for the smooth-noise texture
        let gn = 8usize;
        let mut grid = vec![0.0f64; gn * gn * 3];
        for v in grid.iter_mut() {
            *v = rng.random_range(0.0..255.0);
        }
        for y in 0..size {
            for x in 0..size {
                let px = match kind {
                    0 => {
                        // bilinear upsample of the noise grid
                        let fy = y as f64 / size as f64 * (gn - 1) as f64;
                        let fx = x as f64 / size as f64 * (gn - 1) as f64;
                        let (y0, x0) = (fy as usize, fx as usize);
                        let (y1, x1) = ((y0 + 1).min(gn - 1), (x0 + 1).min(gn - 1));
                        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                        let mut out = [0u8; 3];
                        for c in 0..3 {
                            let g = |yy: usize, xx: usize| grid[(yy * gn + xx) * 3 + c];
                            let v = g(y0, x0) * (1.0 - ty) * (1.0 - tx)
                                + g(y0, x1) * (1.0 - ty) * tx
                                + g(y1, x0) * ty * (1.0 - tx)
                                + g(y1, x1) * ty * tx;
                            out[c] = v.round() as u8;
                        }
                        out
                    }
                    1 => {
                        let sel = (x / period) % 2 == 0;
                        let c = if sel { base } else { alt };
                        [c[0] as u8, c[1] as u8, c[2] as u8]
                    }
                    2 => {
                        let sel = ((x / period) + (y / period)) % 2 == 0;
                        let c = if sel { base } else { alt };
                        [c[0] as u8, c[1] as u8, c[2] as u8]
                    }
                    _ => {
                        let sel = ((x + y) / period) % 2 == 0;
                        let c = if sel { base } else { alt };
                        [c[0] as u8, c[1] as u8, c[2] as u8]
                    }
                };
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(dir.join(format!("overlay_{i:03}.png")))
            .map_err(Error::from)?;
    }
    Ok(())
}

/// Blends a random distractor into the RGB channels: out = (1-a)*img + a*d,
/// clamped to [0, 255]. The depth stream is never overlaid. One distractor is
/// drawn per sample and repeated across the frame stack.
pub fn random_overlay(
    rgb: &Array4<f64>,
    pool: &OverlayPool,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f64>> {
    if pool.is_empty() {
        return Err(Error::config("overlay pool is empty"));
    }
    let (b, c, h, w) = rgb.dim();
    debug_assert_eq!(c % 3, 0);
    let mut out = rgb.clone();
    for bi in 0..b {
        let d = pool.get(rng.random_range(0..pool.len()));
        debug_assert_eq!(d.dim(), (3, h, w));
        for f in 0..c / 3 {
            for ch in 0..3 {
                let mut plane = out.slice_mut(s![bi, f * 3 + ch, .., ..]);
                plane.zip_mut_with(&d.slice(s![ch, .., ..]), |p, &dv| {
                    *p = ((1.0 - alpha) * *p + alpha * dv).clamp(0.0, 255.0);
                });
            }
        }
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with replicate borders. sigma <= 0 is identity.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = img.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * img[(y, sx)];
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[(sy, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Converts a metric depth map into a noisy [0,255] depth image: clamp to
/// [0, depth_max], rescale, add Gaussian noise, apply sensor dropout, blur,
/// clamp.
pub fn depth_pipeline(
    raw_depth_m: &Array2<f64>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    depth_pipeline_with_max(raw_depth_m, cfg, cfg.depth_max, rng)
}

/// `depth_pipeline` with an explicit normalization ceiling, so the ceiling
/// can be domain-randomized per episode.
pub fn depth_pipeline_with_max(
    raw_depth_m: &Array2<f64>,
    cfg: &AugmentConfig,
    depth_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if depth_max <= 0.0 {
        return Err(Error::config(format!("depth_max {depth_max} must be positive")));
    }
    let scale = 255.0 / depth_max;
    let mut img = raw_depth_m.mapv(|v| v.clamp(0.0, depth_max) * scale);
    if cfg.depth_noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.depth_noise_std).map_err(|e| Error::config(e.to_string()))?;
        img.mapv_inplace(|v| v + normal.sample(rng));
    }
    if cfg.dropout_prob > 0.0 {
        img.mapv_inplace(|v| if rng.random::<f64>() < cfg.dropout_prob { 0.0 } else { v });
    }
    let mut img = gaussian_blur(&img, cfg.gaussian_sigma_px);
    img.mapv_inplace(|v| v.clamp(0.0, 255.0));
    Ok(img)
}

/// Augmentation context bundling the config and the overlay pool.
pub struct Augmentor {
    pub cfg: AugmentConfig,
    pub pool: OverlayPool,
}

impl Augmentor {
    pub fn new(cfg: AugmentConfig, pool: OverlayPool) -> Self {
        Augmentor { cfg, pool }
    }

    pub fn shift(&self, obs: &ObsBatch, rng: &mut ChaCha8Rng) -> ObsBatch {
        random_shift(obs, self.cfg.shift_pad, rng)
    }

    /// Strong stream: overlay on top of an already-shifted batch.
    pub fn overlay(&self, obs: &ObsBatch, rng: &mut ChaCha8Rng) -> Result<ObsBatch> {
        let rgb = random_overlay(&obs.rgb, &self.pool, self.cfg.overlay_alpha, rng)?;
        Ok(ObsBatch { rgb, depth: obs.depth.clone() })
    }
}
