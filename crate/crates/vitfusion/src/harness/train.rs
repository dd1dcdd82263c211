use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use super::config::{RngSet, RunConfig};
use super::{checkpoint, eval, heatmap, metrics::MetricsWriter};
use crate::agent::TrainState;
use crate::augment::{Augmentor, OverlayPool};
use crate::curriculum::RandomizationSchedule;
use crate::encoder::ObservationPair;
use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::ssl;
use crate::toyenv::{EnvMode, ToyEnv};

/// ChaCha stream reserved for overlay pool generation, kept outside RngSet
/// so pool contents depend only on the seed, not on when the pool is built.
const OVERLAY_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Act,
    EnvStep,
    Push,
    Sample,
    CriticUpdate,
    ActorUpdate,
    SoftUpdate,
    Curl,
    Eval,
    Checkpoint,
}

#[derive(Debug, Clone, Copy)]
pub struct OpEvent {
    pub step: u64,
    pub kind: OpKind,
}

/// One training run: all learnable state plus the environment, buffer,
/// schedule, and random streams it interacts with.
pub struct Trainer {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub ts: TrainState,
    pub env: ToyEnv,
    pub replay: ReplayBuffer,
    pub schedule: RandomizationSchedule,
    pub aug: Augmentor,
    pub rngs: RngSet,
    pub episodes: u64,
    pub episode_return: f64,
    pub obs: ObservationPair,
    /// When present, every orchestration call is appended for inspection.
    pub op_log: Option<Vec<OpEvent>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, out_override: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let out_dir = out_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
        std::fs::create_dir_all(out_dir.join("checkpoints"))?;
        let mut rngs = RngSet::new(cfg.seed);
        let ts = TrainState::new(&cfg.encoder, &cfg.agent, &cfg.decoder, &mut rngs.init)?;
        let aug = build_augmentor(&cfg, &out_dir)?;
        let mut env = ToyEnv::new(cfg.env.clone(), cfg.augment.clone(), EnvMode::Standard)?;
        let replay = ReplayBuffer::new(
            &cfg.replay,
            cfg.agent.n_step,
            cfg.agent.gamma,
            cfg.env.frame_stack,
        )?;
        let schedule = RandomizationSchedule::new(cfg.curriculum.clone())?;
        let obs = env.reset(&mut rngs.env, &schedule);
        Ok(Trainer {
            cfg,
            out_dir,
            ts,
            env,
            replay,
            schedule,
            aug,
            rngs,
            episodes: 0,
            episode_return: 0.0,
            obs,
            op_log: None,
        })
    }

    fn note(&mut self, step: u64, kind: OpKind) {
        if let Some(log) = &mut self.op_log {
            log.push(OpEvent { step, kind });
        }
    }

    /// Runs the training loop from the current step to `cfg.steps`, writing
    /// metrics, periodic checkpoints, and a final checkpoint.
    pub fn train(&mut self) -> Result<()> {
        let metrics_path = self.out_dir.join("metrics.jsonl");
        let mut metrics = MetricsWriter::create(&metrics_path)?;
        if self.ts.step == 0 {
            let p = self.out_dir.join("checkpoints").join("init.ckpt");
            checkpoint::save(self, &p)?;
        }
        while self.ts.step < self.cfg.steps {
            self.step_once(&mut metrics)?;
        }
        let p = self.out_dir.join("checkpoints").join("final.ckpt");
        checkpoint::save(self, &p)?;
        Ok(())
    }

    /// One environment step and, past warmup, one full update phase.
    pub fn step_once(&mut self, metrics: &mut MetricsWriter) -> Result<()> {
        let t = self.ts.step;
        let step_now = t + 1;
        let mut fields = Map::new();
        let warmup = t < self.cfg.warmup_steps;

        self.note(step_now, OpKind::Act);
        let action = if warmup {
            let mut a = Array1::<f64>::zeros(self.cfg.agent.action_dim);
            for v in a.iter_mut() {
                *v = self.rngs.act.random_range(-1.0..=1.0);
            }
            a
        } else {
            self.ts.act(&self.obs, true, &mut self.rngs.act)?.action
        };
        let (frame_rgb, frame_d) = self.env.current_frame();
        self.note(step_now, OpKind::EnvStep);
        let res = self.env.step(action.view(), &mut self.rngs.env)?;
        self.note(step_now, OpKind::Push);
        // only true terminals mark done for target truncation; timeouts
        // bootstrap through their final observation
        self.replay
            .push_step(frame_rgb, frame_d, action, res.reward, res.success)?;
        self.episode_return += res.reward;
        if res.done {
            let (rgb_t, d_t) = self.env.current_frame();
            self.replay.end_episode(rgb_t, d_t)?;
            self.schedule.note_episode();
            self.episodes += 1;
            fields.insert("episode".into(), Value::from(self.episodes));
            fields.insert("episode_return".into(), Value::from(self.episode_return));
            fields.insert("episode_success".into(), Value::from(res.success));
            self.episode_return = 0.0;
            self.obs = self.env.reset(&mut self.rngs.env, &self.schedule);
        } else {
            self.obs = res.obs;
        }

        if !warmup {
            match self.replay.sample(self.cfg.batch_size, &mut self.rngs.replay) {
                Ok(batch) => {
                    self.note(step_now, OpKind::Sample);
                    let y = self.ts.critic_target_values(&batch, &mut self.rngs.update)?;
                    self.note(step_now, OpKind::CriticUpdate);
                    let cu = self.ts.update_critic(&batch, &y, &self.aug, &mut self.rngs.update)?;
                    self.note(step_now, OpKind::ActorUpdate);
                    let actor_loss = self.ts.update_actor(&cu.z_weak, &mut self.rngs.update)?;
                    self.note(step_now, OpKind::SoftUpdate);
                    self.ts.soft_update();
                    let mut curl_loss = None;
                    if self.cfg.contrastive.enabled
                        && step_now % self.cfg.contrastive.frequency == 0
                    {
                        let cb = self.replay.sample(self.cfg.batch_size, &mut self.rngs.replay)?;
                        self.note(step_now, OpKind::Curl);
                        let l = ssl::curl_step(
                            &mut self.ts.encoder,
                            &mut self.ts.opt_encoder,
                            &cb.obs,
                            &self.cfg.contrastive,
                            &self.aug,
                            &mut self.rngs.update,
                        )?;
                        curl_loss = Some(l);
                    }
                    let losses_bad = !cu.critic_loss.is_finite()
                        || !actor_loss.is_finite()
                        || curl_loss.is_some_and(|l| !l.is_finite())
                        || cu.decoder_loss.is_some_and(|l| !l.is_finite());
                    if losses_bad {
                        let p = self.out_dir.join("checkpoints").join("diagnostic.ckpt");
                        checkpoint::save(self, &p)?;
                        return Err(Error::Numerical(format!(
                            "non-finite loss at step {step_now} (critic {}, actor {actor_loss}, curl {curl_loss:?}); diagnostic checkpoint written to {}",
                            cu.critic_loss,
                            p.display()
                        )));
                    }
                    if step_now % self.cfg.log_every == 0 {
                        fields.insert("critic_loss".into(), Value::from(cu.critic_loss));
                        fields.insert("actor_loss".into(), Value::from(actor_loss));
                        if let Some(l) = curl_loss {
                            fields.insert("curl_loss".into(), Value::from(l));
                        }
                        if let Some(l) = cu.decoder_loss {
                            fields.insert("decoder_loss".into(), Value::from(l));
                        }
                        fields.insert("replay_len".into(), Value::from(self.replay.len()));
                        fields.insert(
                            "explore_std".into(),
                            Value::from(self.cfg.agent.explore.std(t)),
                        );
                    }
                }
                // a checkpoint resumed without replay contents refills first
                Err(Error::InsufficientData(_)) => {}
                Err(e) => return Err(e),
            }
        }

        self.ts.step = step_now;

        if self.cfg.eval_period > 0
            && step_now % self.cfg.eval_period == 0
            && self.cfg.eval_episodes > 0
        {
            self.note(step_now, OpKind::Eval);
            let stats = eval::evaluate(
                &self.ts,
                &self.cfg,
                EnvMode::Standard,
                self.cfg.eval_episodes,
                &mut self.rngs.eval,
            )?;
            let transition = self.schedule.maybe_enable(stats.success_rate);
            fields.insert("eval_success_rate".into(), Value::from(stats.success_rate));
            fields.insert("eval_mean_return".into(), Value::from(stats.mean_return));
            fields.insert("eval_mean_length".into(), Value::from(stats.mean_length));
            fields.insert("dr_enabled".into(), Value::from(self.schedule.enabled));
            if transition {
                fields.insert("dr_transition".into(), Value::from(true));
            }
            if self.schedule.enabled {
                let mags: Map<String, Value> = self
                    .schedule
                    .magnitudes()
                    .into_iter()
                    .map(|(k, v)| (k, Value::from(v)))
                    .collect();
                fields.insert("dr_magnitudes".into(), Value::Object(mags));
            }
        }

        if self.cfg.heatmap_every > 0 && step_now % self.cfg.heatmap_every == 0 {
            let dir = self.out_dir.join("heatmaps");
            let obs = self.obs.clone();
            heatmap::emit(&mut self.ts, &obs, heatmap::HeatmapMethod::GradCamOnStem, step_now, &dir)?;
            heatmap::emit(
                &mut self.ts,
                &obs,
                heatmap::HeatmapMethod::AttentionRollout,
                step_now,
                &dir,
            )?;
        }

        if self.cfg.checkpoint_every > 0
            && step_now % self.cfg.checkpoint_every == 0
            && step_now < self.cfg.steps
        {
            self.note(step_now, OpKind::Checkpoint);
            let p = self
                .out_dir
                .join("checkpoints")
                .join(format!("step_{step_now}.ckpt"));
            checkpoint::save(self, &p)?;
        }

        if !fields.is_empty() || step_now % self.cfg.log_every == 0 {
            metrics.log(step_now, fields)?;
        }
        Ok(())
    }
}

/// Loads or procedurally generates the overlay distractor pool. Relative
/// pool directories resolve under the run's output directory.
pub fn build_augmentor(cfg: &RunConfig, out_dir: &Path) -> Result<Augmentor> {
    let dir = if cfg.augment.overlay_dir.is_relative() {
        out_dir.join(&cfg.augment.overlay_dir)
    } else {
        cfg.augment.overlay_dir.clone()
    };
    let mut pool_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pool_rng.set_stream(OVERLAY_STREAM);
    let pool = OverlayPool::load_or_generate(
        &dir,
        cfg.env.image_size,
        cfg.augment.overlay_count,
        &mut pool_rng,
    )?;
    Ok(Augmentor::new(cfg.augment.clone(), pool))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::toyenv::EnvConfig;

    pub(crate) fn tiny_run(dir: &Path, steps: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.steps = steps;
        cfg.warmup_steps = 6;
        cfg.batch_size = 2;
        cfg.eval_period = 0;
        cfg.log_every = 1;
        cfg.checkpoint_every = 0;
        cfg.exact_resume = true;
        cfg.out_dir = dir.to_string_lossy().into_owned();
        cfg.encoder = EncoderConfig {
            image_size: 16,
            frame_stack: 2,
            patch_stride: 8,
            embed_dim: 16,
            heads: 2,
            head_dim: 4,
            layers: 1,
            stem_channels: vec![4, 4, 8],
            ..Default::default()
        };
        cfg.env = EnvConfig {
            image_size: 16,
            frame_stack: 2,
            max_steps: 12,
            ..Default::default()
        };
        cfg.augment.overlay_count = 2;
        cfg.contrastive.frequency = 2;
        cfg
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path(), 0);
        let mut tr = Trainer::new(cfg, None).unwrap();
        tr.train().unwrap();
        assert!(dir.path().join("checkpoints/init.ckpt").exists());
        assert!(dir.path().join("checkpoints/final.ckpt").exists());
        assert_eq!(tr.ts.step, 0);
        assert_eq!(tr.replay.len(), 0);
    }

    #[test]
    fn short_run_orders_operations_like_the_algorithm() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run(dir.path(), 10);
        cfg.warmup_steps = 4;
        cfg.eval_period = 5;
        cfg.eval_episodes = 1;
        let mut tr = Trainer::new(cfg, None).unwrap();
        tr.op_log = Some(Vec::new());
        tr.train().unwrap();
        let log = tr.op_log.take().unwrap();
        for s in 1..=10u64 {
            let kinds: Vec<OpKind> =
                log.iter().filter(|e| e.step == s).map(|e| e.kind).collect();
            assert_eq!(kinds[0], OpKind::Act);
            assert_eq!(kinds[1], OpKind::EnvStep);
            assert_eq!(kinds[2], OpKind::Push);
            if s > 4 {
                let pos = |k: OpKind| kinds.iter().position(|&x| x == k);
                let sample = pos(OpKind::Sample).expect("update ran");
                let critic = pos(OpKind::CriticUpdate).unwrap();
                let actor = pos(OpKind::ActorUpdate).unwrap();
                let soft = pos(OpKind::SoftUpdate).unwrap();
                assert!(sample < critic && critic < actor && actor < soft);
                let curl = pos(OpKind::Curl);
                assert_eq!(curl.is_some(), s % 2 == 0, "step {s}");
                if let Some(c) = curl {
                    assert!(c > soft);
                }
                if s % 5 == 0 {
                    let e = pos(OpKind::Eval).unwrap();
                    assert!(e > soft);
                }
            } else {
                assert!(!kinds.contains(&OpKind::Sample));
            }
        }
    }

    #[test]
    fn metrics_steps_strictly_increase() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path(), 8);
        let mut tr = Trainer::new(cfg, None).unwrap();
        tr.train().unwrap();
        let recs = super::super::metrics::read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
        assert!(!recs.is_empty());
        let steps: Vec<u64> = recs.iter().map(|r| r["step"].as_u64().unwrap()).collect();
        for w in steps.windows(2) {
            assert!(w[0] < w[1]);
        }
    }
}
