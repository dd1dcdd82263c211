//! Deterministic actor-critic with clipped double Q, n-step targets,
//! two-stream augmented critic updates, and EMA target critics.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Augmentor;
use crate::encoder::{Encoder, EncoderConfig, ObsBatch, ObservationPair};
use crate::error::{Error, Result};
use crate::nn::{self, act, Adam, AdamConfig, LayerNorm, LayerNormCache, Linear, Net, ParamMut};
use crate::replay::SampledBatch;
use crate::ssl::{self, DecoderConfig, MaeDecoder};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule { start: 1.0, end: 0.1, horizon: 100_000 }
    }
}

impl ExplorationSchedule {
    /// Linear interpolation from start to end over `horizon`, clamped after.
    pub fn std(&self, step: u64) -> f64 {
        if self.horizon == 0 || step >= self.horizon {
            return self.end;
        }
        let t = step as f64 / self.horizon as f64;
        self.start + (self.end - self.start) * t
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub action_dim: usize,
    pub gamma: f64,
    pub n_step: usize,
    /// Weak-stream weight in the critic loss.
    pub beta1: f64,
    /// Strong-stream weight in the critic loss.
    pub beta2: f64,
    /// EMA rate for target critics.
    pub rho: f64,
    pub lr: f64,
    /// Trunk projection width followed by MLP hidden widths.
    pub hidden: Vec<usize>,
    pub explore: ExplorationSchedule,
    /// Clip bound for target-action smoothing noise.
    pub target_noise_clip: f64,
    /// Shift padding applied to observations when acting with exploration.
    pub shift_pad: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            action_dim: 3,
            gamma: 0.99,
            n_step: 3,
            beta1: 0.5,
            beta2: 0.5,
            rho: 0.01,
            lr: 1e-4,
            hidden: vec![256, 1024, 1024],
            explore: ExplorationSchedule::default(),
            target_noise_clip: 0.3,
            shift_pad: 4,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_step < 1 {
            return Err(Error::config("n_step must be at least 1"));
        }
        if self.action_dim == 0 {
            return Err(Error::config("action_dim must be positive"));
        }
        if self.hidden.len() < 2 {
            return Err(Error::config("hidden needs a trunk width and at least one MLP width"));
        }
        if !(0.0 < self.rho && self.rho <= 1.0) {
            return Err(Error::config("rho outside (0,1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma outside [0,1]"));
        }
        Ok(())
    }
}

/// Plain MLP with ReLU between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation outputs of all but the last layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(rng, w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::new();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let y = layer.forward(cur.view());
            if i + 1 < self.layers.len() {
                pre.push(y.clone());
                cur = act::relu(&y);
            } else {
                cur = y;
            }
        }
        (cur, MlpCache { inputs, pre })
    }

    pub fn backward(&mut self, dy: &Array2<f64>, cache: &MlpCache, accum: bool) -> Array2<f64> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d = act::relu_backward(&cache.pre[i], &d);
            }
            d = self.layers[i].backward(cache.inputs[i].view(), d.view(), accum);
        }
        d
    }

    pub fn blend_from(&mut self, other: &Mlp, rho: f64) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.blend_from(b, rho);
        }
    }
}

impl Net for Mlp {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&nn::path(prefix, &format!("fc{i}")), f);
        }
    }
}

/// Shared representation trunk: linear projection, LayerNorm, tanh.
#[derive(Debug, Clone)]
struct Trunk {
    proj: Linear,
    ln: LayerNorm,
}

struct TrunkCache {
    z: Array2<f64>,
    ln: LayerNormCache,
    /// tanh output.
    t: Array2<f64>,
}

impl Trunk {
    fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Trunk { proj: Linear::new(rng, d_in, d_out), ln: LayerNorm::new(rng, d_out) }
    }

    fn forward(&self, z: &Array2<f64>) -> (Array2<f64>, TrunkCache) {
        let p = self.proj.forward(z.view());
        let (n, ln) = self.ln.forward(p.view());
        let t = act::tanh(&n);
        (t.clone(), TrunkCache { z: z.clone(), ln, t })
    }

    fn backward(&mut self, dt: &Array2<f64>, cache: &TrunkCache, accum: bool) -> Array2<f64> {
        let dn = act::tanh_backward_from_output(&cache.t, dt);
        let dp = self.ln.backward(dn.view(), &cache.ln, accum);
        self.proj.backward(cache.z.view(), dp.view(), accum)
    }

    fn blend_from(&mut self, other: &Trunk, rho: f64) {
        self.proj.blend_from(&other.proj, rho);
        self.ln.blend_from(&other.ln, rho);
    }
}

impl Net for Trunk {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.proj.visit_params(&nn::path(prefix, "proj"), f);
        self.ln.visit_params(&nn::path(prefix, "ln"), f);
    }
}

/// Deterministic policy head with tanh-bounded actions.
#[derive(Debug, Clone)]
pub struct Actor {
    trunk: Trunk,
    mlp: Mlp,
}

pub struct ActorCache {
    trunk: TrunkCache,
    mlp: MlpCache,
    /// tanh-squashed actions.
    a: Array2<f64>,
}

impl Actor {
    pub fn new(rng: &mut ChaCha8Rng, repr_dim: usize, hidden: &[usize], action_dim: usize) -> Self {
        let trunk = Trunk::new(rng, repr_dim, hidden[0]);
        let mut dims = hidden.to_vec();
        dims.push(action_dim);
        Actor { trunk, mlp: Mlp::new(rng, &dims) }
    }

    pub fn forward(&self, z: &Array2<f64>) -> (Array2<f64>, ActorCache) {
        let (t, tc) = self.trunk.forward(z);
        let (pre, mc) = self.mlp.forward(&t);
        let a = act::tanh(&pre);
        (a.clone(), ActorCache { trunk: tc, mlp: mc, a })
    }

    pub fn backward(&mut self, da: &Array2<f64>, cache: &ActorCache, accum: bool) -> Array2<f64> {
        let dpre = act::tanh_backward_from_output(&cache.a, da);
        let dt = self.mlp.backward(&dpre, &cache.mlp, accum);
        self.trunk.backward(&dt, &cache.trunk, accum)
    }
}

impl Net for Actor {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.trunk.visit_params(&nn::path(prefix, "trunk"), f);
        self.mlp.visit_params(&nn::path(prefix, "mlp"), f);
    }
}

/// Double Q critic with a shared trunk and two independent Q heads.
#[derive(Debug, Clone)]
pub struct Critic {
    trunk: Trunk,
    q1: Mlp,
    q2: Mlp,
}

pub struct CriticCache {
    trunk: TrunkCache,
    q1: MlpCache,
    q2: MlpCache,
    trunk_width: usize,
}

impl Critic {
    pub fn new(rng: &mut ChaCha8Rng, repr_dim: usize, hidden: &[usize], action_dim: usize) -> Self {
        let trunk = Trunk::new(rng, repr_dim, hidden[0]);
        let mut dims = vec![hidden[0] + action_dim];
        dims.extend_from_slice(&hidden[1..]);
        dims.push(1);
        Critic { trunk, q1: Mlp::new(rng, &dims), q2: Mlp::new(rng, &dims) }
    }

    pub fn forward(
        &self,
        z: &Array2<f64>,
        a: &Array2<f64>,
    ) -> (Array1<f64>, Array1<f64>, CriticCache) {
        let (t, tc) = self.trunk.forward(z);
        let b = t.dim().0;
        let w = t.dim().1;
        let mut concat = Array2::<f64>::zeros((b, w + a.dim().1));
        concat.slice_mut(s![.., 0..w]).assign(&t);
        concat.slice_mut(s![.., w..]).assign(a);
        let (o1, c1) = self.q1.forward(&concat);
        let (o2, c2) = self.q2.forward(&concat);
        let q1 = o1.index_axis(Axis(1), 0).to_owned();
        let q2 = o2.index_axis(Axis(1), 0).to_owned();
        (q1, q2, CriticCache { trunk: tc, q1: c1, q2: c2, trunk_width: w })
    }

    /// Backprop per-sample gradients on both Q outputs; returns gradients on
    /// the representation and the action.
    pub fn backward(
        &mut self,
        dq1: &Array1<f64>,
        dq2: &Array1<f64>,
        cache: &CriticCache,
        accum: bool,
    ) -> (Array2<f64>, Array2<f64>) {
        let d1 = dq1.view().insert_axis(Axis(1)).to_owned();
        let d2 = dq2.view().insert_axis(Axis(1)).to_owned();
        let mut dcat = self.q1.backward(&d1, &cache.q1, accum);
        dcat += &self.q2.backward(&d2, &cache.q2, accum);
        let w = cache.trunk_width;
        let dt = dcat.slice(s![.., 0..w]).to_owned();
        let da = dcat.slice(s![.., w..]).to_owned();
        let dz = self.trunk.backward(&dt, &cache.trunk, accum);
        (dz, da)
    }

    pub fn blend_from(&mut self, other: &Critic, rho: f64) {
        self.trunk.blend_from(&other.trunk, rho);
        self.q1.blend_from(&other.q1, rho);
        self.q2.blend_from(&other.q2, rho);
    }
}

impl Net for Critic {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.trunk.visit_params(&nn::path(prefix, "trunk"), f);
        self.q1.visit_params(&nn::path(prefix, "q1"), f);
        self.q2.visit_params(&nn::path(prefix, "q2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct PolicyOutput {
    /// Final clamped action.
    pub action: Array1<f64>,
    /// Deterministic policy output before exploration noise.
    pub pre_noise: Array1<f64>,
    /// Noise std that was applied (0 when not exploring).
    pub std: f64,
}

/// Discounted n-step target value for one sampled item.
pub fn nstep_target(rewards: &[f64], bootstrap: f64, gamma: f64, min_q: f64) -> f64 {
    let mut y = 0.0;
    for (i, &r) in rewards.iter().enumerate() {
        y += gamma.powi(i as i32) * r;
    }
    y + bootstrap * gamma.powi(rewards.len() as i32) * min_q
}

/// Two-stream critic loss combination.
pub fn svea_total(beta1: f64, beta2: f64, weak: f64, strong: f64) -> f64 {
    beta1 * weak + beta2 * strong
}

pub struct CriticUpdate {
    pub critic_loss: f64,
    pub decoder_loss: Option<f64>,
    /// Weak-stream representation, detached; feeds the actor update.
    pub z_weak: Array2<f64>,
}

/// All learnable state of one training run.
pub struct TrainState {
    pub cfg: AgentConfig,
    pub enc_cfg: EncoderConfig,
    pub dec_cfg: DecoderConfig,
    pub encoder: Encoder,
    pub actor: Actor,
    pub critic: Critic,
    pub critic_target: Critic,
    pub decoder: Option<MaeDecoder>,
    pub opt_encoder: Adam,
    pub opt_actor: Adam,
    pub opt_critic: Adam,
    pub opt_decoder: Option<Adam>,
    pub step: u64,
    /// When set, update_critic records the target used by each stream.
    pub record_targets: bool,
    pub last_targets: Option<(Array1<f64>, Array1<f64>)>,
}

impl TrainState {
    pub fn new(
        enc_cfg: &EncoderConfig,
        cfg: &AgentConfig,
        dec_cfg: &DecoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Encoder::new(enc_cfg, rng)?;
        let d = encoder.representation_dim();
        let mut actor = Actor::new(rng, d, &cfg.hidden, cfg.action_dim);
        let mut critic = Critic::new(rng, d, &cfg.hidden, cfg.action_dim);
        let critic_target = critic.clone();
        let mut decoder = if dec_cfg.enabled {
            Some(MaeDecoder::new(rng, enc_cfg, dec_cfg)?)
        } else {
            None
        };
        let adam = AdamConfig { lr: cfg.lr, ..Default::default() };
        let opt_encoder = Adam::new(adam, &mut encoder);
        let opt_actor = Adam::new(adam, &mut actor);
        let opt_critic = Adam::new(adam, &mut critic);
        let opt_decoder = decoder.as_mut().map(|dec| Adam::new(adam, dec));
        Ok(TrainState {
            cfg: cfg.clone(),
            enc_cfg: enc_cfg.clone(),
            dec_cfg: dec_cfg.clone(),
            encoder,
            actor,
            critic,
            critic_target,
            decoder,
            opt_encoder,
            opt_actor,
            opt_critic,
            opt_decoder,
            step: 0,
            record_targets: false,
            last_targets: None,
        })
    }

    /// Policy action for one observation. Exploration applies random shift
    /// and Gaussian noise; evaluation (explore=false) is deterministic and
    /// consumes no randomness.
    pub fn act(
        &self,
        obs: &ObservationPair,
        explore: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<PolicyOutput> {
        if !explore {
            let action = self.act_greedy(obs)?;
            return Ok(PolicyOutput { pre_noise: action.clone(), action, std: 0.0 });
        }
        let batch = ObsBatch::single(obs);
        let batch = crate::augment::random_shift(&batch, self.cfg.shift_pad, rng);
        let z = self.encoder.encode_nograd(&batch)?;
        let (a, _) = self.actor.forward(&z);
        let pre_noise = a.row(0).to_owned();
        let std = self.cfg.explore.std(self.step);
        let mut action = pre_noise.clone();
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            action.mapv_inplace(|v| (v + normal.sample(rng)).clamp(-1.0, 1.0));
        } else {
            action.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        }
        Ok(PolicyOutput { action, pre_noise, std })
    }

    /// Noise-free policy action; no augmentation, no rng.
    pub fn act_greedy(&self, obs: &ObservationPair) -> Result<Array1<f64>> {
        let z = self.encoder.encode_nograd(&ObsBatch::single(obs))?;
        let (a, _) = self.actor.forward(&z);
        Ok(a.row(0).mapv(|v| v.clamp(-1.0, 1.0)))
    }

    /// n-step TD target: discounted reward sum plus a clipped-double-Q
    /// bootstrap from unaugmented next observations. No gradients flow.
    pub fn critic_target_values(
        &self,
        batch: &SampledBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array1<f64>> {
        if self.cfg.n_step < 1 {
            return Err(Error::config("n_step must be at least 1"));
        }
        let b = batch.actions.dim().0;
        let z_next = self.encoder.encode_nograd(&batch.next_obs)?;
        let (mut a_next, _) = self.actor.forward(&z_next);
        let std = self.cfg.explore.std(self.step);
        let clip = self.cfg.target_noise_clip;
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            a_next.mapv_inplace(|v| {
                (v + normal.sample(rng).clamp(-clip, clip)).clamp(-1.0, 1.0)
            });
        }
        let (q1, q2, _) = self.critic_target.forward(&z_next, &a_next);
        let mut y = Array1::<f64>::zeros(b);
        for i in 0..b {
            let rewards: Vec<f64> = batch.rewards.row(i).to_vec();
            let min_q = q1[i].min(q2[i]);
            y[i] = nstep_target(&rewards, batch.bootstrap[i], self.cfg.gamma, min_q);
        }
        Ok(y)
    }

    /// Two-stream critic update. The same `y` is regressed by the weak
    /// (shifted) and strong (overlay of shifted) streams; gradients reach
    /// the critics and the encoder. Returns the detached weak representation
    /// for the subsequent actor update.
    pub fn update_critic(
        &mut self,
        batch: &SampledBatch,
        y: &Array1<f64>,
        aug: &Augmentor,
        rng: &mut ChaCha8Rng,
    ) -> Result<CriticUpdate> {
        let b = batch.actions.dim().0 as f64;
        let obs_w = aug.shift(&batch.obs, rng);
        let obs_s = aug.overlay(&obs_w, rng)?;
        let (z_w, cache_w) = self.encoder.encode(&obs_w, None)?;
        let (z_s, cache_s) = self.encoder.encode(&obs_s, None)?;
        let (q1w, q2w, cw) = self.critic.forward(&z_w, &batch.actions);
        let (q1s, q2s, cs) = self.critic.forward(&z_s, &batch.actions);
        let y_w = y.clone();
        let y_s = y.clone();
        let r1w = &q1w - &y_w;
        let r2w = &q2w - &y_w;
        let r1s = &q1s - &y_s;
        let r2s = &q2s - &y_s;
        let weak = (r1w.mapv(|v| v * v).sum() + r2w.mapv(|v| v * v).sum()) / b;
        let strong = (r1s.mapv(|v| v * v).sum() + r2s.mapv(|v| v * v).sum()) / b;
        let loss = svea_total(self.cfg.beta1, self.cfg.beta2, weak, strong);
        if self.record_targets {
            self.last_targets = Some((y_w.clone(), y_s.clone()));
        }
        self.encoder.zero_grad();
        self.critic.zero_grad();
        let scale_w = 2.0 * self.cfg.beta1 / b;
        let scale_s = 2.0 * self.cfg.beta2 / b;
        let (dz_w, _) = self.critic.backward(
            &r1w.mapv(|v| v * scale_w),
            &r2w.mapv(|v| v * scale_w),
            &cw,
            true,
        );
        let (dz_s, _) = self.critic.backward(
            &r1s.mapv(|v| v * scale_s),
            &r2s.mapv(|v| v * scale_s),
            &cs,
            true,
        );
        self.encoder.backward(&dz_w, &cache_w);
        self.encoder.backward(&dz_s, &cache_s);
        let mut dec_loss = None;
        if let (Some(dec), Some(opt)) = (self.decoder.as_mut(), self.opt_decoder.as_mut()) {
            dec.zero_grad();
            let (encoded, cache_m) = self
                .encoder
                .encode_tokens(&obs_w, Some((self.dec_cfg.recon_mask_ratio, rng)))?;
            let l = ssl::decoder_update_grads(
                dec,
                &mut self.encoder,
                &cache_m,
                &encoded,
                &obs_w,
                &self.enc_cfg,
                &self.dec_cfg,
            )?;
            opt.step(dec);
            dec_loss = Some(l);
        }
        self.opt_critic.step(&mut self.critic);
        self.opt_encoder.step(&mut self.encoder);
        Ok(CriticUpdate { critic_loss: loss, decoder_loss: dec_loss, z_weak: z_w })
    }

    /// Actor update on a detached representation: encoder parameters and
    /// gradients are untouched; critic parameters are read but not updated.
    pub fn update_actor(&mut self, z: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let b = z.dim().0 as f64;
        let (a, acache) = self.actor.forward(z);
        let std = self.cfg.explore.std(self.step);
        let clip = self.cfg.target_noise_clip;
        let mut a_noisy = a;
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            a_noisy.mapv_inplace(|v| {
                (v + normal.sample(rng).clamp(-clip, clip)).clamp(-1.0, 1.0)
            });
        }
        let (q1, q2, ccache) = self.critic.forward(z, &a_noisy);
        let mut loss = 0.0;
        let mut dq1 = Array1::<f64>::zeros(q1.len());
        let mut dq2 = Array1::<f64>::zeros(q2.len());
        for i in 0..q1.len() {
            if q1[i] <= q2[i] {
                loss -= q1[i];
                dq1[i] = -1.0 / b;
            } else {
                loss -= q2[i];
                dq2[i] = -1.0 / b;
            }
        }
        loss /= b;
        self.actor.zero_grad();
        let (_, da) = self.critic.backward(&dq1, &dq2, &ccache, false);
        // clamp kills the gradient where the noisy action saturated
        let da = {
            let mut m = da;
            for ((i, j), v) in m.indexed_iter_mut() {
                if a_noisy[(i, j)].abs() >= 1.0 {
                    *v = 0.0;
                }
            }
            m
        };
        self.actor.backward(&da, &acache, true);
        self.opt_actor.step(&mut self.actor);
        Ok(loss)
    }

    /// EMA update of the target critics.
    pub fn soft_update(&mut self) {
        let rho = self.cfg.rho;
        self.critic_target.blend_from(&self.critic, rho);
    }

    /// Weak-stream encode without gradient tracking, for reuse in tests.
    pub fn encode_detached(&self, obs: &ObsBatch) -> Result<Array2<f64>> {
        self.encoder.encode_nograd(obs)
    }
}

/// Snapshot of all parameter tensors of a network, keyed by path.
pub fn param_snapshot(net: &mut impl Net) -> Vec<(String, ndarray::ArrayD<f64>)> {
    let mut out = Vec::new();
    net.visit_params("", &mut |name, p| {
        out.push((name.to_string(), p.v.to_owned()));
    });
    out
}
