use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::augment::AugmentConfig;
use crate::curriculum::CurriculumConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::replay::ReplayConfig;
use crate::ssl::{ContrastiveConfig, DecoderConfig};
use crate::toyenv::{EnvConfig, ToyEnv};

/// Full run description: loop sizing plus every module's configuration.
/// Loaded from one TOML file; unspecified keys fall back to the defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Total environment steps T.
    pub steps: u64,
    /// Steps of random-policy data collection before updates begin.
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Evaluation period E in steps. 0 disables periodic evaluation.
    pub eval_period: u64,
    pub eval_episodes: usize,
    /// Loss-logging period in steps.
    pub log_every: u64,
    /// Checkpoint period in steps. 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
    /// Heatmap emission period in steps. 0 disables.
    pub heatmap_every: u64,
    /// Include environment, replay, and rng state in checkpoints so a
    /// resumed run continues bit-exactly.
    pub exact_resume: bool,
    pub out_dir: String,

    pub encoder: EncoderConfig,
    pub agent: AgentConfig,
    pub contrastive: ContrastiveConfig,
    pub decoder: DecoderConfig,
    pub augment: AugmentConfig,
    pub curriculum: CurriculumConfig,
    pub env: EnvConfig,
    pub replay: ReplayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            steps: 100_000,
            warmup_steps: 1_000,
            batch_size: 256,
            eval_period: 5_000,
            eval_episodes: 20,
            log_every: 50,
            checkpoint_every: 10_000,
            heatmap_every: 0,
            exact_resume: false,
            out_dir: "runs/default".into(),
            encoder: EncoderConfig::default(),
            agent: AgentConfig::default(),
            contrastive: ContrastiveConfig::default(),
            decoder: DecoderConfig::default(),
            augment: AugmentConfig::default(),
            curriculum: CurriculumConfig::default(),
            env: EnvConfig::default(),
            replay: ReplayConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.agent.validate()?;
        self.contrastive.validate()?;
        self.decoder.validate(&self.encoder)?;
        self.augment.validate()?;
        self.curriculum.validate()?;
        self.env.validate()?;
        if self.env.image_size != self.encoder.image_size {
            return Err(Error::config(format!(
                "env image_size {} != encoder image_size {}",
                self.env.image_size, self.encoder.image_size
            )));
        }
        if self.env.frame_stack != self.encoder.frame_stack {
            return Err(Error::config(format!(
                "env frame_stack {} != encoder frame_stack {}",
                self.env.frame_stack, self.encoder.frame_stack
            )));
        }
        if self.agent.action_dim != ToyEnv::action_dim() {
            return Err(Error::config(format!(
                "agent action_dim {} != environment action_dim {}",
                self.agent.action_dim,
                ToyEnv::action_dim()
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }

    /// Canonical serialized form used for the checkpoint config hash.
    pub fn canonical_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Corrupt(format!("config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

const N_STREAMS: usize = 6;

/// Independent random streams for each source of randomness in a run, so
/// that e.g. evaluation never perturbs the training stream. All six share
/// the run seed and differ in the ChaCha stream number; each is resumable
/// from its word position alone.
pub struct RngSet {
    pub seed: u64,
    /// Parameter initialization.
    pub init: ChaCha8Rng,
    /// Environment resets and sensor noise during collection.
    pub env: ChaCha8Rng,
    /// Exploration noise and warmup actions.
    pub act: ChaCha8Rng,
    /// Replay sampling.
    pub replay: ChaCha8Rng,
    /// Update-time augmentation, masking, and target smoothing.
    pub update: ChaCha8Rng,
    /// Evaluation episodes.
    pub eval: ChaCha8Rng,
}

impl RngSet {
    pub fn new(seed: u64) -> Self {
        let mk = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        RngSet {
            seed,
            init: mk(0),
            env: mk(1),
            act: mk(2),
            replay: mk(3),
            update: mk(4),
            eval: mk(5),
        }
    }

    fn streams(&self) -> [&ChaCha8Rng; N_STREAMS] {
        [&self.init, &self.env, &self.act, &self.replay, &self.update, &self.eval]
    }

    fn streams_mut(&mut self) -> [&mut ChaCha8Rng; N_STREAMS] {
        [
            &mut self.init,
            &mut self.env,
            &mut self.act,
            &mut self.replay,
            &mut self.update,
            &mut self.eval,
        ]
    }

    /// Word positions of all streams, in fixed order.
    pub fn word_positions(&self) -> [u128; N_STREAMS] {
        let mut out = [0u128; N_STREAMS];
        for (o, r) in out.iter_mut().zip(self.streams()) {
            *o = r.get_word_pos();
        }
        out
    }

    pub fn restore(seed: u64, positions: [u128; N_STREAMS]) -> Self {
        let mut set = Self::new(seed);
        for (r, &p) in set.streams_mut().into_iter().zip(positions.iter()) {
            r.set_word_pos(p);
        }
        set
    }
}
