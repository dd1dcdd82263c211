//! Procedurally rendered RGB-D reach-and-lift environment.
//!
//! A 2D top-down scene: the agent disc must reach an object square, grip it,
//! and carry it to the goal region. Rewards are stage-dense. Appearance
//! (hues, texture, lighting) affects only the RGB render; the pre-noise
//! depth render is a pure function of geometry, preserving the RGB/depth
//! asymmetry that motivates depth fusion.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::curriculum::RandomizationSchedule;
use crate::encoder::ObservationPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub image_size: usize,
    pub frame_stack: usize,
    pub max_steps: usize,
    pub action_repeat: usize,
    /// Per-micro-step translation at full action deflection, scene units.
    pub speed: f64,
    pub grasp_radius: f64,
    pub goal_tolerance: f64,
    pub grasp_bonus: f64,
    pub success_bonus: f64,
    pub goal: (f64, f64),
    pub agent_home: (f64, f64),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            image_size: 128,
            frame_stack: 3,
            max_steps: 400,
            action_repeat: 2,
            speed: 0.05,
            grasp_radius: 0.12,
            goal_tolerance: 0.12,
            grasp_bonus: 1.0,
            success_bonus: 5.0,
            goal: (0.2, 0.2),
            agent_home: (0.5, 0.85),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("image_size must be at least 16"));
        }
        if self.action_repeat == 0 || self.max_steps == 0 {
            return Err(Error::config("action_repeat and max_steps must be positive"));
        }
        if self.frame_stack == 0 {
            return Err(Error::config("frame_stack must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    Standard,
    /// Appearance parameters permuted beyond the training range.
    ColorHard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneState {
    pub agent: (f64, f64),
    pub object: (f64, f64),
    pub goal: (f64, f64),
    /// Continuous grip command in [0,1]; > 0.5 engages.
    pub grip: f64,
    pub attached: bool,
    pub grasp_rewarded: bool,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: ObservationPair,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

pub struct ToyEnv {
    pub cfg: EnvConfig,
    aug: AugmentConfig,
    pub mode: EnvMode,
    pub state: SceneState,
    pub params: BTreeMap<String, f64>,
    /// Most recent `frame_stack` RGB frames, oldest first.
    frames: Vec<Array3<u8>>,
    depth_frame: Array3<u8>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r * 255.0, g * 255.0, b * 255.0]
}

fn texture_pattern(id: usize, y: usize, x: usize) -> f64 {
    let period = 8;
    match id % 5 {
        0 => 0.0,
        1 => {
            if (y / period) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        2 => {
            if (x / period) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        3 => {
            if ((x / period) + (y / period)) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        _ => {
            if ((x + y) / period) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
    }
}

impl ToyEnv {
    pub fn new(cfg: EnvConfig, aug: AugmentConfig, mode: EnvMode) -> Result<Self> {
        cfg.validate()?;
        aug.validate()?;
        let state = SceneState {
            agent: cfg.agent_home,
            object: (0.5, 0.5),
            goal: cfg.goal,
            grip: 0.0,
            attached: false,
            grasp_rewarded: false,
            step: 0,
        };
        let s = cfg.image_size;
        Ok(ToyEnv {
            cfg,
            aug,
            mode,
            state,
            params: BTreeMap::new(),
            frames: Vec::new(),
            depth_frame: Array3::zeros((1, s, s)),
        })
    }

    fn param(&self, name: &str, default: f64) -> f64 {
        self.params.get(name).copied().unwrap_or(default)
    }

    /// Applies the color-hard permutation to sampled appearance parameters.
    fn apply_mode(&mut self) {
        if self.mode == EnvMode::ColorHard {
            let bg = self.param("background_hue", 0.58);
            let obj = self.param("object_hue", 0.02);
            let tex = self.param("background_texture", 0.0);
            self.params.insert("background_hue".into(), (bg + 0.45).rem_euclid(1.0));
            self.params.insert("object_hue".into(), (obj + 0.45).rem_euclid(1.0));
            self.params.insert("background_texture".into(), (tex + 3.0).rem_euclid(5.0));
            self.params.insert("light_intensity".into(), self.param("light_intensity", 1.0) * 1.25);
        }
    }

    /// Starts a new episode: the object is placed uniformly in the
    /// workspace, the agent returns home, and domain parameters are drawn
    /// from the schedule.
    pub fn reset(&mut self, rng: &mut ChaCha8Rng, schedule: &RandomizationSchedule) -> ObservationPair {
        self.params = schedule.sample_domain(rng);
        self.apply_mode();
        let ox = rng.random_range(0.15..0.85);
        let oy = rng.random_range(0.15..0.60);
        self.state = SceneState {
            agent: self.cfg.agent_home,
            object: (ox, oy),
            goal: self.cfg.goal,
            grip: 0.0,
            attached: false,
            grasp_rewarded: false,
            step: 0,
        };
        let (rgb, depth) = self.render_frames(rng);
        self.frames = vec![rgb; self.cfg.frame_stack];
        self.depth_frame = depth;
        self.observation()
    }

    /// Stacked observation built from the most recent frames (oldest first).
    pub fn observation(&self) -> ObservationPair {
        let s = self.cfg.image_size;
        let k = self.cfg.frame_stack;
        let mut rgb = Array3::<u8>::zeros((3 * k, s, s));
        for (i, f) in self.frames.iter().enumerate() {
            rgb.slice_mut(ndarray::s![3 * i..3 * (i + 1), .., ..]).assign(f);
        }
        ObservationPair { rgb, depth: self.depth_frame.clone() }
    }

    /// Newest single frame pair, for single-frame replay storage.
    pub fn current_frame(&self) -> (Array3<u8>, Array3<u8>) {
        (self.frames.last().expect("reset before use").clone(), self.depth_frame.clone())
    }

    /// Frame history (oldest first) and current depth frame, for
    /// exact-resume checkpoints.
    pub fn frame_history(&self) -> (&[Array3<u8>], &Array3<u8>) {
        (&self.frames, &self.depth_frame)
    }

    /// Restores a frame history snapshot taken with `frame_history`.
    pub fn restore_frames(&mut self, frames: Vec<Array3<u8>>, depth: Array3<u8>) -> Result<()> {
        if frames.len() != self.cfg.frame_stack {
            return Err(Error::shape(format!(
                "frame history length {} does not match frame_stack {}",
                frames.len(),
                self.cfg.frame_stack
            )));
        }
        self.frames = frames;
        self.depth_frame = depth;
        Ok(())
    }

    fn micro_step(&mut self, action: ArrayView1<'_, f64>) -> (f64, bool, bool) {
        let st = &mut self.state;
        let dx = action[0].clamp(-1.0, 1.0) * self.cfg.speed;
        let dy = action[1].clamp(-1.0, 1.0) * self.cfg.speed;
        st.agent.0 = (st.agent.0 + dx).clamp(0.05, 0.95);
        st.agent.1 = (st.agent.1 + dy).clamp(0.05, 0.95);
        st.grip = (action[2].clamp(-1.0, 1.0) + 1.0) / 2.0;
        let engaged = st.grip > 0.5;
        let mut reward = 0.0;
        if st.attached && !engaged {
            st.attached = false;
        }
        if !st.attached && engaged && dist(st.agent, st.object) <= self.cfg.grasp_radius {
            st.attached = true;
            if !st.grasp_rewarded {
                reward += self.cfg.grasp_bonus;
                st.grasp_rewarded = true;
            }
        }
        if st.attached {
            st.object = st.agent;
        }
        let mut success = false;
        if st.attached {
            reward -= dist(st.object, st.goal);
            if dist(st.object, st.goal) <= self.cfg.goal_tolerance {
                reward += self.cfg.success_bonus;
                success = true;
            }
        } else {
            reward -= dist(st.agent, st.object);
        }
        (reward, success, engaged)
    }

    /// Advances one agent step (the action is repeated `action_repeat`
    /// times), re-renders, and returns the stacked observation.
    pub fn step(&mut self, action: ArrayView1<'_, f64>, rng: &mut ChaCha8Rng) -> Result<StepResult> {
        if action.len() != 3 {
            return Err(Error::shape(format!("action length {} != 3", action.len())));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite action".into()));
        }
        let mut reward = 0.0;
        let mut success = false;
        for _ in 0..self.cfg.action_repeat {
            let (r, s, _) = self.micro_step(action);
            reward += r;
            if s {
                success = true;
                break;
            }
        }
        self.state.step += 1;
        let done = success || self.state.step >= self.cfg.max_steps;
        let (rgb, depth) = self.render_frames(rng);
        self.frames.remove(0);
        self.frames.push(rgb);
        self.depth_frame = depth;
        Ok(StepResult { obs: self.observation(), reward, done, success })
    }

    /// Deterministic geometry-only depth render in meters, before the sensor
    /// pipeline. Exactly invariant to appearance parameters.
    pub fn render_depth_m(&self) -> Array2<f64> {
        let s = self.cfg.image_size;
        let d_bg = self.aug.depth_max;
        let jitter = self.param("camera_jitter", 0.0);
        let mut depth = Array2::<f64>::from_elem((s, s), d_bg);
        let px = |v: f64| v * (s as f64 - 1.0) + jitter;
        let st = &self.state;
        // object square
        let obj_d = if st.attached { d_bg * 0.78 } else { d_bg * 0.88 };
        let half = 0.045 * s as f64;
        let (ox, oy) = (px(st.object.0), px(st.object.1));
        // agent disc, drawn above the object
        let ar = 0.04 * s as f64;
        let (ax, ay) = (px(st.agent.0), px(st.agent.1));
        let agent_d = d_bg * 0.72;
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f64, y as f64);
                if (xf - ox).abs() <= half && (yf - oy).abs() <= half {
                    depth[(y, x)] = obj_d;
                }
                if (xf - ax).powi(2) + (yf - ay).powi(2) <= ar * ar {
                    depth[(y, x)] = agent_d;
                }
            }
        }
        depth
    }

    /// Renders the RGB frame. Appearance parameters (hues, texture,
    /// lighting) act here and only here.
    pub fn render_rgb(&self) -> Array3<u8> {
        let s = self.cfg.image_size;
        let bg_hue = self.param("background_hue", 0.58);
        let tex = self.param("background_texture", 0.0).round().max(0.0) as usize;
        let obj_hue = self.param("object_hue", 0.02);
        let light = self.param("light_intensity", 1.0).clamp(0.2, 2.0);
        let light_dir = self.param("light_dir", 0.0);
        let jitter = self.param("camera_jitter", 0.0);
        let px = |v: f64| v * (s as f64 - 1.0) + jitter;

        let bg = hsv_to_rgb(bg_hue, 0.5, 0.55);
        let obj_c = hsv_to_rgb(obj_hue, 0.85, (0.9 * light).min(1.0));
        let agent_c = [70.0 * light, 85.0 * light, 95.0 * light];
        let goal_c = [40.0, 200.0 * light.min(1.2), 90.0];
        let (dirx, diry) = (light_dir.cos(), light_dir.sin());

        let st = &self.state;
        let half = 0.045 * s as f64;
        let (ox, oy) = (px(st.object.0), px(st.object.1));
        let ar = 0.04 * s as f64;
        let (ax, ay) = (px(st.agent.0), px(st.agent.1));
        let gr = self.cfg.goal_tolerance * (s as f64 - 1.0);
        let (gx, gy) = (px(st.goal.0), px(st.goal.1));
        let ring = st.grip > 0.5;

        let mut img = Array3::<u8>::zeros((3, s, s));
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f64, y as f64);
                // background with lighting gradient and texture modulation
                let grad = ((xf * dirx + yf * diry) / s as f64) * 0.3;
                let lum = light * (1.0 + grad) * (1.0 + 0.12 * texture_pattern(tex, y, x));
                let mut c = [bg[0] * lum, bg[1] * lum, bg[2] * lum];
                // goal ring (flat paint: depth untouched)
                let gd = ((xf - gx).powi(2) + (yf - gy).powi(2)).sqrt();
                if (gd - gr).abs() <= 1.5 {
                    c = goal_c;
                }
                if (xf - ox).abs() <= half && (yf - oy).abs() <= half {
                    c = obj_c;
                }
                let ad2 = (xf - ax).powi(2) + (yf - ay).powi(2);
                if ad2 <= ar * ar {
                    c = agent_c;
                    if ring && ad2 >= (ar - 1.5) * (ar - 1.5) {
                        c = [235.0, 235.0, 235.0];
                    }
                }
                for ch in 0..3 {
                    img[(ch, y, x)] = c[ch].round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        img
    }

    /// Full frame render: RGB plus the depth image after the sensor
    /// pipeline, normalized with the (possibly jittered) depth ceiling.
    pub fn render_frames(&self, rng: &mut ChaCha8Rng) -> (Array3<u8>, Array3<u8>) {
        let rgb = self.render_rgb();
        let depth_m = self.render_depth_m();
        let ceiling = self.aug.depth_max * (1.0 + self.param("depth_max_jitter", 0.0));
        let img = augment::depth_pipeline_with_max(&depth_m, &self.aug, ceiling, rng)
            .expect("depth ceiling positive");
        let s = self.cfg.image_size;
        let mut depth = Array3::<u8>::zeros((1, s, s));
        for y in 0..s {
            for x in 0..s {
                depth[(0, y, x)] = img[(y, x)].round() as u8;
            }
        }
        (rgb, depth)
    }

    /// Greedy hand-coded policy: approach the object, grip, carry to goal.
    /// Serves as the environment sanity oracle.
    pub fn scripted_action(&self) -> Array1<f64> {
        let st = &self.state;
        let (target, grip) = if st.attached {
            (st.goal, 1.0)
        } else if dist(st.agent, st.object) <= self.cfg.grasp_radius * 0.8 {
            (st.object, 1.0)
        } else {
            (st.object, -1.0)
        };
        let scale = self.cfg.speed * self.cfg.action_repeat as f64;
        let dx = ((target.0 - st.agent.0) / scale).clamp(-1.0, 1.0);
        let dy = ((target.1 - st.agent.1) / scale).clamp(-1.0, 1.0);
        Array1::from_vec(vec![dx, dy, grip])
    }

    pub fn action_dim() -> usize {
        3
    }
}
