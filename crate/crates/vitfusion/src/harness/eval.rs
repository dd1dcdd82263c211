use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::agent::TrainState;
use crate::curriculum::RandomizationSchedule;
use crate::encoder::ObservationPair;
use crate::error::{Error, Result};
use crate::toyenv::{EnvMode, ToyEnv};

#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// Rolls out `episodes` episodes of an arbitrary policy on a fresh
/// environment with domain randomization disabled (appearance at defaults;
/// color-hard permutation applies on top when that mode is selected).
pub fn evaluate_policy<F>(
    cfg: &RunConfig,
    mode: EnvMode,
    episodes: usize,
    rng: &mut ChaCha8Rng,
    mut policy: F,
) -> Result<EvalStats>
where
    F: FnMut(&ObservationPair, &ToyEnv) -> Result<Array1<f64>>,
{
    if episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let mut env = ToyEnv::new(cfg.env.clone(), cfg.augment.clone(), mode)?;
    let schedule = RandomizationSchedule::new(cfg.curriculum.clone())?;
    let mut successes = 0usize;
    let mut total_return = 0.0;
    let mut total_len = 0usize;
    for _ in 0..episodes {
        let mut obs = env.reset(rng, &schedule);
        loop {
            let action = policy(&obs, &env)?;
            let res = env.step(action.view(), rng)?;
            total_return += res.reward;
            total_len += 1;
            if res.done {
                if res.success {
                    successes += 1;
                }
                break;
            }
            obs = res.obs;
        }
    }
    Ok(EvalStats {
        success_rate: successes as f64 / episodes as f64,
        mean_return: total_return / episodes as f64,
        mean_length: total_len as f64 / episodes as f64,
    })
}

/// Evaluates the learned policy with exploration disabled.
pub fn evaluate(
    ts: &TrainState,
    cfg: &RunConfig,
    mode: EnvMode,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalStats> {
    evaluate_policy(cfg, mode, episodes, rng, |obs, _| ts.act_greedy(obs))
}

/// Hand-coded greedy policy rollouts, the environment sanity oracle.
pub fn evaluate_scripted(
    cfg: &RunConfig,
    mode: EnvMode,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalStats> {
    evaluate_policy(cfg, mode, episodes, rng, |_, env| Ok(env.scripted_action()))
}

/// Uniform-random policy rollouts; `policy_rng` is separate so the baseline
/// draws the same episode layouts as other policies under the same `rng`.
pub fn evaluate_random(
    cfg: &RunConfig,
    mode: EnvMode,
    episodes: usize,
    rng: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
) -> Result<EvalStats> {
    let dim = ToyEnv::action_dim();
    evaluate_policy(cfg, mode, episodes, rng, |_, _| {
        let mut a = Array1::<f64>::zeros(dim);
        for v in a.iter_mut() {
            *v = policy_rng.random_range(-1.0..=1.0);
        }
        Ok(a)
    })
}
