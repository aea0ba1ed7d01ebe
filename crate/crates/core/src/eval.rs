//! Policy evaluation: mean return, trajectory KL to the expert, action MSE.

use serde::{Deserialize, Serialize};

use crate::env::{Controller, GaussianPolicy, PdExpert, PointMassEnv, SampleGaussian};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_EPISODES: usize = 10;
pub const DEFAULT_SEEDS: usize = 5;

const START_STREAM: u64 = 11;
const ACTION_STREAM: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean over seeds of the per-seed mean episode return.
    pub mean: f64,
    /// Sample standard deviation of the per-seed means.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Start states used for evaluation seed `k`.
pub fn evaluation_starts(env: &PointMassEnv, base_seed: u64, k: usize, episodes: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(rng::mix(&[base_seed, k as u64]), START_STREAM);
    (0..episodes).map(|_| env.reset(&mut r)).collect()
}

/// Undiscounted return averaged over `episodes` starts for each of `seeds`
/// evaluation seeds.
pub fn evaluate_policy(
    env: &PointMassEnv,
    policy: &dyn Controller,
    episodes: usize,
    seeds: usize,
    base_seed: u64,
) -> EvalResult {
    let per_seed: Vec<f64> = (0..seeds)
        .map(|k| {
            let mut act_rng = rng::stream(rng::mix(&[base_seed, k as u64]), ACTION_STREAM);
            let starts = evaluation_starts(env, base_seed, k, episodes);
            let total: f64 = starts
                .into_iter()
                .map(|s| env.episode_return(s, policy, &mut act_rng))
                .sum();
            total / episodes.max(1) as f64
        })
        .collect();
    let (mean, std) = mean_std(&per_seed);
    EvalResult { mean, std, per_seed }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `E[log expert(a|s) - log policy(a|s)]` with
/// states and actions drawn from expert rollouts.
pub fn kl_divergence_estimate(
    expert: &dyn GaussianPolicy,
    policy: &dyn GaussianPolicy,
    env: &PointMassEnv,
    episodes: usize,
    seed: u64,
) -> KlEstimate {
    let mut start_rng = rng::stream(seed, START_STREAM);
    let mut act_rng = rng::stream(seed, ACTION_STREAM);
    let sampler = SampleGaussian(expert);
    let mut terms = Vec::with_capacity(episodes * env.horizon);
    for _ in 0..episodes {
        let mut s = env.reset(&mut start_rng);
        for _ in 0..env.horizon {
            let a = sampler.action(&s, &mut act_rng);
            terms.push(expert.log_prob(&s, &a) - policy.log_prob(&s, &a));
            s = env.step(&s, &a).0;
        }
    }
    let (mean, std) = mean_std(&terms);
    KlEstimate {
        mean,
        std_error: std / (terms.len() as f64).sqrt(),
        samples: terms.len(),
    }
}

/// States visited by the deterministic expert over `episodes` rollouts.
pub fn expert_states(env: &PointMassEnv, expert: &PdExpert, episodes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut start_rng = rng::stream(seed, START_STREAM);
    let mut unused = rng::stream(seed, ACTION_STREAM);
    let mut out = Vec::with_capacity(episodes * env.horizon);
    for i in 0..episodes {
        let tr = env.rollout(i as i64, env.reset(&mut start_rng), expert, &mut unused);
        out.extend(tr.transitions.into_iter().map(|x| x.state));
    }
    out
}

/// Mean over `states` of the squared distance between expert and policy actions.
pub fn action_mse(expert: &PdExpert, policy: impl Fn(&[f64]) -> Vec<f64>, states: &[Vec<f64>]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let total: f64 = states
        .iter()
        .map(|s| {
            let e = expert.mean_action(s);
            let p = policy(s);
            e.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum();
    total / states.len() as f64
}

/// Min-max scales the pooled KL values of both series to `[0, 1]` and
/// returns `scaled(bc) - scaled(ts)` per fraction. Positive entries mean the
/// stitched-data policy is closer to the expert.
pub fn scaled_kl_difference(bc: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
    if bc.len() != ts.len() {
        return Err(Error::Dimension {
            context: "KL series",
            expected: bc.len(),
            got: ts.len(),
        });
    }
    let (lo, hi) = bc
        .iter()
        .chain(ts)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if bc.is_empty() || !(hi > lo) {
        if !bc.is_empty() {
            log::warn!("constant KL series; scaled differences are all zero");
        }
        return Ok(vec![0.0; bc.len()]);
    }
    let range = hi - lo;
    Ok(bc
        .iter()
        .zip(ts)
        .map(|(b, t)| (b - lo) / range - (t - lo) / range)
        .collect())
}
