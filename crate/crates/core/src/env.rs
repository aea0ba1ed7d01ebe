//! Point-mass control task, its PD expert, and expert/noisy mixture datasets.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::{trajectory_from_steps, Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::rng;

/// Something that picks an action for a state.
pub trait Controller: Sync {
    fn action(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

/// A policy with a diagonal Gaussian action distribution.
pub trait GaussianPolicy: Sync {
    /// Mean and standard deviation of the action distribution at `state`.
    fn distribution(&self, state: &[f64]) -> (Vec<f64>, Vec<f64>);

    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        let (mean, std) = self.distribution(state);
        diag_gaussian_log_prob(action, &mean, &std)
    }
}

pub fn diag_gaussian_log_prob(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// State `[x, y, vx, vy]`, action `[ax, ay]` in `[-1, 1]^2`.
///
/// Position integrates the current velocity, then velocity integrates the
/// action and is clipped per component. The reward is the negative distance
/// of the new position to the goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassEnv {
    pub dt: f64,
    pub max_speed: f64,
    pub max_action: f64,
    pub horizon: usize,
    pub goal: [f64; 2],
    pub start_low: f64,
    pub start_high: f64,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_speed: 2.0,
            max_action: 1.0,
            horizon: 50,
            goal: [1.0, 1.0],
            start_low: -1.0,
            start_high: 0.0,
        }
    }
}

impl PointMassEnv {
    pub const STATE_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;

    pub fn action_bounds(&self) -> Vec<f64> {
        vec![self.max_action; Self::ACTION_DIM]
    }

    /// Start at rest at a uniformly drawn position.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let x = rng.gen_range(self.start_low..self.start_high);
        let y = rng.gen_range(self.start_low..self.start_high);
        vec![x, y, 0.0, 0.0]
    }

    pub fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let ax = action[0].clamp(-self.max_action, self.max_action);
        let ay = action[1].clamp(-self.max_action, self.max_action);
        let x = state[0] + state[2] * self.dt;
        let y = state[1] + state[3] * self.dt;
        let vx = (state[2] + ax * self.dt).clamp(-self.max_speed, self.max_speed);
        let vy = (state[3] + ay * self.dt).clamp(-self.max_speed, self.max_speed);
        let reward = -self.distance_to_goal(&[x, y]);
        (vec![x, y, vx, vy], reward)
    }

    pub fn distance_to_goal(&self, pos: &[f64]) -> f64 {
        ((pos[0] - self.goal[0]).powi(2) + (pos[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Reward the environment would give for arriving in `next_state`.
    pub fn reward_for(&self, next_state: &[f64]) -> f64 {
        -self.distance_to_goal(next_state)
    }

    /// Runs one full episode from `start`.
    pub fn rollout(
        &self,
        traj_id: i64,
        start: Vec<f64>,
        controller: &dyn Controller,
        rng: &mut dyn RngCore,
    ) -> Trajectory {
        let mut states = vec![start];
        let mut actions = Vec::with_capacity(self.horizon);
        let mut rewards = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let s = states.last().unwrap();
            let a = controller.action(s, rng);
            let (next, r) = self.step(s, &a);
            actions.push(a);
            rewards.push(r);
            states.push(next);
        }
        trajectory_from_steps(traj_id, &states, &actions, &rewards, true)
    }

    /// Undiscounted return of one episode.
    pub fn episode_return(&self, start: Vec<f64>, controller: &dyn Controller, rng: &mut dyn RngCore) -> f64 {
        let mut s = start;
        let mut total = 0.0;
        for _ in 0..self.horizon {
            let a = controller.action(&s, rng);
            let (next, r) = self.step(&s, &a);
            total += r;
            s = next;
        }
        total
    }
}

/// PD controller on the position error, clipped to the action bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdExpert {
    pub kp: f64,
    pub kd: f64,
    pub goal: [f64; 2],
    pub max_action: f64,
}

impl PdExpert {
    pub fn for_env(env: &PointMassEnv) -> Self {
        Self {
            kp: 2.0,
            kd: 1.0,
            goal: env.goal,
            max_action: env.max_action,
        }
    }

    pub fn mean_action(&self, s: &[f64]) -> Vec<f64> {
        (0..2)
            .map(|d| (self.kp * (self.goal[d] - s[d]) - self.kd * s[2 + d]).clamp(-self.max_action, self.max_action))
            .collect()
    }
}

impl Controller for PdExpert {
    fn action(&self, state: &[f64], _rng: &mut dyn RngCore) -> Vec<f64> {
        self.mean_action(state)
    }
}

/// The expert's action plus clipped white noise: `clip(pi*(s) + N(0, std^2))`.
#[derive(Clone, Debug)]
pub struct NoisyExpert {
    pub expert: PdExpert,
    pub noise_std: f64,
}

impl Controller for NoisyExpert {
    fn action(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let m = self.expert.max_action;
        self.expert
            .mean_action(state)
            .into_iter()
            .map(|a| (a + self.noise_std * rng::normal(rng)).clamp(-m, m))
            .collect()
    }
}

/// Gaussian wrapper around the expert with a fixed standard deviation, used
/// as the reference distribution for trajectory KL estimates.
#[derive(Clone, Debug)]
pub struct GaussianExpert {
    pub expert: PdExpert,
    pub std: f64,
}

impl GaussianExpert {
    pub const DEFAULT_STD: f64 = 0.01;

    pub fn new(expert: PdExpert) -> Self {
        Self {
            expert,
            std: Self::DEFAULT_STD,
        }
    }
}

impl GaussianPolicy for GaussianExpert {
    fn distribution(&self, state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.expert.mean_action(state), vec![self.std; 2])
    }
}

/// Sampling controller for any Gaussian policy (unclipped; the env clips).
pub struct SampleGaussian<'a>(pub &'a dyn GaussianPolicy);

impl Controller for SampleGaussian<'_> {
    fn action(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let (mean, std) = self.0.distribution(state);
        mean.iter().zip(&std).map(|(m, s)| m + s * rng::normal(rng)).collect()
    }
}

/// Expert fractions used by the sub-optimal dataset experiment, in percent.
pub const EXPERT_FRACTIONS: [f64; 8] = [0.0, 0.1, 2.5, 5.0, 10.0, 20.0, 30.0, 40.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Percentage of expert trajectories, `0..=100`.
    pub expert_fraction: f64,
    pub noise_std: f64,
    pub num_trajectories: usize,
}

impl MixtureSpec {
    pub fn num_expert(&self) -> usize {
        (self.expert_fraction / 100.0 * self.num_trajectories as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.expert_fraction) {
            return Err(Error::config(format!(
                "expert fraction must lie in [0, 100], got {}",
                self.expert_fraction
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("noise std must be finite and >= 0"));
        }
        if self.num_trajectories == 0 {
            return Err(Error::config("need at least one trajectory"));
        }
        Ok(())
    }
}

const START_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const PLACEMENT_STREAM: u64 = 3;

/// Noisy-expert dataset with `spec.num_expert()` clean expert trajectories
/// at random positions. Start states depend only on `(seed, trajectory)`, so
/// with zero noise both kinds of trajectory coincide.
pub fn generate_mixture_dataset(
    env: &PointMassEnv,
    expert: &PdExpert,
    spec: &MixtureSpec,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.num_trajectories;
    let is_expert = expert_mask(spec, seed);
    let noisy = NoisyExpert {
        expert: expert.clone(),
        noise_std: spec.noise_std,
    };
    let trajectories = (0..n)
        .map(|i| {
            let mut start_rng = rng::stream(rng::mix(&[seed, i as u64]), START_STREAM);
            let mut noise_rng = rng::stream(rng::mix(&[seed, i as u64]), NOISE_STREAM);
            let start = env.reset(&mut start_rng);
            let controller: &dyn Controller = if is_expert[i] { expert } else { &noisy };
            env.rollout(i as i64, start, controller, &mut noise_rng)
        })
        .collect();
    Dataset::new(PointMassEnv::STATE_DIM, PointMassEnv::ACTION_DIM, trajectories)
}

/// Which trajectories of a generated mixture are expert ones.
pub fn expert_mask(spec: &MixtureSpec, seed: u64) -> Vec<bool> {
    let n = spec.num_trajectories;
    let mut placement = rng::stream(seed, PLACEMENT_STREAM);
    let mut mask = vec![false; n];
    for i in rand::seq::index::sample(&mut placement, n, spec.num_expert()) {
        mask[i] = true;
    }
    mask
}
