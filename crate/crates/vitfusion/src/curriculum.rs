//! Evaluation-gated curriculum domain randomization.
//!
//! Each randomized parameter carries a default value and a target range. Once
//! evaluation success crosses the trigger threshold, randomization is enabled
//! (latching) and the effective range expands exponentially with the number
//! of episodes since enablement.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Sampled uniformly from [center - w, center + w].
    Continuous,
    /// Integer id sampled from {0..size-1}; the admissible size grows with
    /// the effective magnitude, taking `default` as the base size of 1.
    Categorical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    /// Default value (continuous) or default id (categorical).
    pub default: f64,
    /// Target half-width (continuous) or extra category count (categorical).
    pub range: f64,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    /// Decay coefficient over running episodes, in (0,1).
    pub lambda: f64,
    /// Evaluation success threshold that enables randomization.
    pub p_f: f64,
    /// Substitute R_d + R_r*(1 - lambda^T_e) so the default value is
    /// preserved at enablement instead of being scaled by lambda.
    pub center_preserving: bool,
    pub params: Vec<ParamSpec>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            lambda: 0.99,
            p_f: 0.7,
            center_preserving: false,
            params: default_params(),
        }
    }
}

/// Randomized parameter set for the toy environment.
pub fn default_params() -> Vec<ParamSpec> {
    let c = |name: &str, default: f64, range: f64| ParamSpec {
        name: name.into(),
        default,
        range,
        kind: ParamKind::Continuous,
    };
    vec![
        c("background_hue", 0.58, 0.20),
        ParamSpec {
            name: "background_texture".into(),
            default: 0.0,
            range: 4.0,
            kind: ParamKind::Categorical,
        },
        c("object_hue", 0.02, 0.12),
        c("light_intensity", 1.0, 0.35),
        c("light_dir", 0.0, 3.0),
        c("camera_jitter", 0.0, 3.0),
        c("depth_max_jitter", 0.0, 0.25),
    ]
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::config(format!("lambda {} outside (0,1)", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.p_f) {
            return Err(Error::config(format!("p_f {} outside [0,1]", self.p_f)));
        }
        for p in &self.params {
            if p.range < 0.0 {
                return Err(Error::config(format!("parameter {} has negative range", p.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RandomizationSchedule {
    pub cfg: CurriculumConfig,
    pub enabled: bool,
    /// T_e: episodes elapsed since enablement.
    pub episodes_since_enable: u64,
}

impl RandomizationSchedule {
    pub fn new(cfg: CurriculumConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RandomizationSchedule { cfg, enabled: false, episodes_since_enable: 0 })
    }

    /// R_c = R_d*lambda + R_r*(1 - lambda^T_e), as printed. With
    /// `center_preserving`, the first term is R_d instead.
    pub fn effective_magnitude(&self, p: &ParamSpec) -> f64 {
        let (center, w) = self.window(p, self.episodes_since_enable);
        center + w
    }

    /// Sampling window (center, half-width) for a parameter at T_e episodes.
    /// For categorical parameters the default is read as a base set size 1.
    fn window(&self, p: &ParamSpec, t_e: u64) -> (f64, f64) {
        let base = match p.kind {
            ParamKind::Continuous => p.default,
            ParamKind::Categorical => 1.0,
        };
        let center = if self.cfg.center_preserving { base } else { base * self.cfg.lambda };
        let w = p.range * (1.0 - self.cfg.lambda.powi(t_e as i32));
        (center, w)
    }

    /// Draws one value for every parameter. Disabled schedules return the
    /// defaults. Parameters are visited in declaration order so the rng
    /// stream is reproducible.
    pub fn sample_domain(&self, rng: &mut ChaCha8Rng) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.cfg.params {
            let v = if !self.enabled {
                p.default
            } else {
                match p.kind {
                    ParamKind::Continuous => {
                        let (c, w) = self.window(p, self.episodes_since_enable);
                        if w > 0.0 {
                            rng.random_range(c - w..=c + w)
                        } else {
                            c
                        }
                    }
                    ParamKind::Categorical => {
                        let size = self
                            .effective_magnitude(p)
                            .round()
                            .max(1.0)
                            .min(1.0 + p.range) as usize;
                        rng.random_range(0..size) as f64
                    }
                }
            };
            out.insert(p.name.clone(), v);
        }
        out
    }

    /// Enables randomization once p_eval crosses the threshold. Latching:
    /// later evaluations never disable it. Returns true on the transition.
    pub fn maybe_enable(&mut self, p_eval: f64) -> bool {
        if !self.enabled && p_eval >= self.cfg.p_f {
            self.enabled = true;
            self.episodes_since_enable = 0;
            return true;
        }
        false
    }

    /// Counts an episode toward T_e once enabled.
    pub fn note_episode(&mut self) {
        if self.enabled {
            self.episodes_since_enable += 1;
        }
    }

    /// Effective magnitudes keyed by parameter name, for metrics logging.
    pub fn magnitudes(&self) -> BTreeMap<String, f64> {
        self.cfg
            .params
            .iter()
            .map(|p| (p.name.clone(), if self.enabled { self.effective_magnitude(p) } else { 0.0 }))
            .collect()
    }
}
