//! Conditional Wasserstein GAN predicting rewards of synthetic transitions.
//!
//! The critic is kept Lipschitz by clipping its weights after every update.
//! Rewards are standardized for training and restored on prediction.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, CheckpointMeta, Head, Matrix, Network, NetworkCheckpoint, OptimizerState};
use crate::rng;
use crate::train::{ensure_finite, gather, require_nonempty, Batcher};

const TRAIN_STREAM: u64 = 41;
const EVAL_STREAM: u64 = 42;
pub const LATENT_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct WganConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub l2: f64,
    pub clip: f64,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub generator_steps: usize,
    /// Generator steps between held-out evaluations; the generator with the
    /// lowest held-out absolute error is kept.
    pub eval_every: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for WganConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512],
            learning_rate: 1e-4,
            batch_size: 256,
            beta1: 0.5,
            beta2: 0.999,
            l2: 1e-4,
            clip: 0.01,
            n_critic: 5,
            generator_steps: 50_000,
            eval_every: 1000,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl WganConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            l2_coeff: self.l2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) || self.n_critic == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::config("reward model: invalid hyperparameters"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("reward model: holdout fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WganLoss {
    pub step: usize,
    /// `E_data[D] - E_gen[D]` on the last critic batch.
    pub critic_gap: f64,
    pub holdout_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardGan {
    generator: Network,
    critic: Network,
    clip: f64,
    state_stats: NormStats,
    action_stats: NormStats,
    reward_stats: NormStats,
}

impl RewardGan {
    pub fn new(
        generator: Network,
        critic: Network,
        clip: f64,
        state_stats: NormStats,
        action_stats: NormStats,
        reward_stats: NormStats,
    ) -> Result<Self> {
        let (d_s, d_a) = (state_stats.dim(), action_stats.dim());
        state_stats.check(d_s, "reward model state statistics")?;
        action_stats.check(d_a, "reward model action statistics")?;
        reward_stats.check(1, "reward model reward statistics")?;
        let cond = 2 * d_s + d_a;
        let ok = generator.input_dim() == LATENT_DIM + cond
            && generator.output_dim() == 1
            && critic.input_dim() == cond + 1
            && critic.output_dim() == 1
            && *generator.head() == Head::Linear
            && *critic.head() == Head::Linear;
        if !ok {
            return Err(Error::config("reward model: generator/critic shapes do not match"));
        }
        if !(clip > 0.0) || critic.max_abs_param() > clip {
            return Err(Error::config("reward model: critic parameters exceed the clip bound"));
        }
        Ok(Self {
            generator,
            critic,
            clip,
            state_stats,
            action_stats,
            reward_stats,
        })
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn critic(&self) -> &Network {
        &self.critic
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    fn condition_into(&self, s: &[f64], a: &[f64], s_next: &[f64], out: &mut [f64]) {
        let d_s = self.state_stats.dim();
        let d_a = self.action_stats.dim();
        self.state_stats.normalize_into(s, &mut out[..d_s]);
        self.action_stats.normalize_into(a, &mut out[d_s..d_s + d_a]);
        self.state_stats.normalize_into(s_next, &mut out[d_s + d_a..]);
    }

    /// One generator sample for the transition, in reward units.
    pub fn predict_with_latent(&self, z: &[f64], s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        let (d_s, d_a) = (self.state_stats.dim(), self.action_stats.dim());
        for (x, d, what) in [(s, d_s, "reward model state"), (a, d_a, "reward model action"), (s_next, d_s, "reward model state")] {
            if x.len() != d {
                return Err(Error::Dimension {
                    context: what,
                    expected: d,
                    got: x.len(),
                });
            }
        }
        let mut input = vec![0.0; LATENT_DIM + 2 * d_s + d_a];
        input[..LATENT_DIM].copy_from_slice(z);
        self.condition_into(s, a, s_next, &mut input[LATENT_DIM..]);
        let r = self.generator.forward(&input)?[0];
        Ok(self.reward_stats.denormalize(&[r])[0])
    }

    pub fn predict_reward(&self, s: &[f64], a: &[f64], s_next: &[f64], rng: &mut dyn RngCore) -> Result<f64> {
        let z = rng::normal_vec(rng, LATENT_DIM);
        self.predict_with_latent(&z, s, a, s_next)
    }

    pub fn to_json(&self, meta: CheckpointMeta) -> Result<String> {
        let c = WganCheckpoint {
            generator: NetworkCheckpoint::from_network(&self.generator, meta.clone()),
            critic: NetworkCheckpoint::from_network(&self.critic, meta),
            clip: self.clip,
            state_stats: self.state_stats.clone(),
            action_stats: self.action_stats.clone(),
            reward_stats: self.reward_stats.clone(),
        };
        Ok(serde_json::to_string(&c)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: WganCheckpoint = serde_json::from_str(text)?;
        Self::new(
            c.generator.to_network()?,
            c.critic.to_network()?,
            c.clip,
            c.state_stats,
            c.action_stats,
            c.reward_stats,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WganCheckpoint {
    pub generator: NetworkCheckpoint,
    pub critic: NetworkCheckpoint,
    pub clip: f64,
    pub state_stats: NormStats,
    pub action_stats: NormStats,
    pub reward_stats: NormStats,
}

pub fn train_wgan(dataset: &Dataset, config: &WganConfig) -> Result<RewardGan> {
    train_wgan_with_log(dataset, config).map(|(m, _)| m)
}

fn holdout_mae(gan: &RewardGan, x: &Matrix, r: &[f64], seed: u64) -> Result<f64> {
    if r.is_empty() {
        return Ok(0.0);
    }
    let mut rng = rng::stream(seed, EVAL_STREAM);
    let mut input = Matrix::zeros(x.rows(), LATENT_DIM + x.cols());
    for i in 0..x.rows() {
        let row = input.row_mut(i);
        row[..LATENT_DIM].copy_from_slice(&rng::normal_vec(&mut rng, LATENT_DIM));
        row[LATENT_DIM..].copy_from_slice(x.row(i));
    }
    let out = gan.generator.predict_batch(&input)?;
    let (m, s) = (gan.reward_stats.mean[0], gan.reward_stats.std[0]);
    Ok(out.as_slice().iter().zip(r).map(|(p, t)| (p * s + m - t).abs()).sum::<f64>() / r.len() as f64)
}

/// Alternates `n_critic` critic updates, each followed by weight clipping,
/// with one generator update.
pub fn train_wgan_with_log(dataset: &Dataset, config: &WganConfig) -> Result<(RewardGan, Vec<WganLoss>)> {
    config.validate()?;
    let n = dataset.num_transitions();
    require_nonempty(n, "reward model")?;
    let (d_s, d_a) = (dataset.d_s(), dataset.d_a());
    let cond = 2 * d_s + d_a;
    let mut rng = rng::stream(config.seed, TRAIN_STREAM);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = if n < 10 {
        0
    } else {
        (n as f64 * config.holdout_fraction).round() as usize
    };
    let (hold, train) = order.split_at(n_hold);
    let transitions: Vec<_> = dataset.transitions().collect();
    let pick = |ix: &[usize]| ix.iter().map(|&i| transitions[i]).collect::<Vec<_>>();
    let train_t = pick(train);
    let state_stats = NormStats::from_rows(d_s, train_t.iter().map(|t| t.state.as_slice()))?;
    let action_stats = NormStats::from_rows(d_a, train_t.iter().map(|t| t.action.as_slice()))?;
    let rewards: Vec<[f64; 1]> = train_t.iter().map(|t| [t.reward]).collect();
    let reward_stats = NormStats::from_rows(1, rewards.iter().map(|r| r.as_slice()))?;

    let mut g_sizes = vec![LATENT_DIM + cond];
    g_sizes.extend_from_slice(&config.hidden);
    g_sizes.push(1);
    let mut c_sizes = vec![cond + 1];
    c_sizes.extend_from_slice(&config.hidden);
    c_sizes.push(1);
    let generator = Network::new(&g_sizes, Head::Linear, &mut rng)?;
    let mut critic = Network::new(&c_sizes, Head::Linear, &mut rng)?;
    critic.clip_params(config.clip);
    let mut gan = RewardGan::new(generator, critic, config.clip, state_stats, action_stats, reward_stats)?;

    let features = |ts: &[&crate::data::Transition]| {
        let mut x = Matrix::zeros(ts.len(), cond);
        for (i, t) in ts.iter().enumerate() {
            gan.condition_into(&t.state, &t.action, &t.next_state, x.row_mut(i));
        }
        x
    };
    let train_x = features(&train_t);
    let train_r: Vec<f64> = train_t.iter().map(|t| gan.reward_stats.normalize(&[t.reward])[0]).collect();
    let hold_t = pick(hold);
    let hold_x = features(&hold_t);
    let hold_r: Vec<f64> = hold_t.iter().map(|t| t.reward).collect();

    let mut g_opt = OptimizerState::new(&gan.generator, config.adam());
    let mut c_opt = OptimizerState::new(&gan.critic, config.adam());
    let mut batcher = Batcher::new((0..train_t.len()).collect());
    let mut best = gan.generator.clone();
    let mut best_mae = holdout_mae(&gan, &hold_x, &hold_r, config.seed)?;
    let mut log = Vec::new();
    let mut critic_gap = 0.0;

    let gen_input = |bx: &Matrix, rng: &mut rng::StreamRng| {
        let b = bx.rows();
        let mut gx = Matrix::zeros(b, LATENT_DIM + cond);
        for i in 0..b {
            let row = gx.row_mut(i);
            row[..LATENT_DIM].copy_from_slice(&rng::normal_vec(rng, LATENT_DIM));
            row[LATENT_DIM..].copy_from_slice(bx.row(i));
        }
        gx
    };

    for step in 0..config.generator_steps {
        for _ in 0..config.n_critic {
            let idx = batcher.next(config.batch_size, &mut rng);
            let b = idx.len();
            let bx = gather(&train_x, idx);
            let fake = gan.generator.predict_batch(&gen_input(&bx, &mut rng))?;
            // Rows 0..b are real transitions, b..2b generated ones.
            let mut cx = Matrix::zeros(2 * b, cond + 1);
            for i in 0..b {
                let real = cx.row_mut(i);
                real[..cond].copy_from_slice(bx.row(i));
                real[cond] = train_r[idx[i]];
                let gen = cx.row_mut(b + i);
                gen[..cond].copy_from_slice(bx.row(i));
                gen[cond] = fake.row(i)[0];
            }
            let tape = gan.critic.forward_batch(&cx)?;
            let scores = tape.output().as_slice();
            critic_gap = (scores[..b].iter().sum::<f64>() - scores[b..].iter().sum::<f64>()) / b as f64;
            ensure_finite(critic_gap, "reward critic", step)?;
            let mut up = Matrix::zeros(2 * b, 1);
            for i in 0..b {
                up.as_mut_slice()[i] = -1.0 / b as f64;
                up.as_mut_slice()[b + i] = 1.0 / b as f64;
            }
            let grads = gan.critic.param_gradients(&tape, &up)?;
            c_opt.step(&mut gan.critic, &grads)?;
            gan.critic.clip_params(config.clip);
            if gan.critic.max_abs_param() > config.clip {
                return Err(Error::fault("reward critic escaped its clip bound"));
            }
        }

        let idx = batcher.next(config.batch_size, &mut rng);
        let b = idx.len();
        let bx = gather(&train_x, idx);
        let g_tape = gan.generator.forward_batch(&gen_input(&bx, &mut rng))?;
        let mut cx = Matrix::zeros(b, cond + 1);
        for i in 0..b {
            let row = cx.row_mut(i);
            row[..cond].copy_from_slice(bx.row(i));
            row[cond] = g_tape.output().row(i)[0];
        }
        let c_tape = gan.critic.forward_batch(&cx)?;
        let gen_loss = -c_tape.output().as_slice().iter().sum::<f64>() / b as f64;
        ensure_finite(gen_loss, "reward generator", step)?;
        let up = Matrix::from_vec(b, 1, vec![-1.0 / b as f64; b]);
        let dx = gan.critic.input_gradients(&c_tape, &up)?;
        let mut g_up = Matrix::zeros(b, 1);
        for i in 0..b {
            g_up.as_mut_slice()[i] = dx.row(i)[cond];
        }
        let grads = gan.generator.param_gradients(&g_tape, &g_up)?;
        g_opt.step(&mut gan.generator, &grads)?;

        let last = step + 1 == config.generator_steps;
        if config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || last) {
            let mae = holdout_mae(&gan, &hold_x, &hold_r, config.seed)?;
            if !hold_r.is_empty() && mae < best_mae {
                best_mae = mae;
                best.copy_params_from(&gan.generator);
            }
            log.push(WganLoss {
                step: step + 1,
                critic_gap,
                holdout_mae: mae,
            });
        }
    }
    if !hold_r.is_empty() {
        gan.generator = best;
    }
    Ok((gan, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{trajectory_from_steps, Trajectory};
    use rand::Rng;

    fn reward(s2: &[f64]) -> f64 {
        -((s2[0] - 1.0).powi(2) + (s2[1] - 1.0).powi(2)).sqrt()
    }

    fn reward_dataset(n: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, 0);
        let trajs: Vec<Trajectory> = (0..n)
            .map(|i| {
                let s = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
                let a = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
                let s2 = vec![s[0] + 0.1 * a[0], s[1] + 0.1 * a[1]];
                let rew = reward(&s2);
                trajectory_from_steps(i as i64, &[s, s2], &[a], &[rew], true)
            })
            .collect();
        Dataset::new(2, 2, trajs).unwrap()
    }

    fn config(steps: usize) -> WganConfig {
        WganConfig {
            hidden: vec![32, 32],
            learning_rate: 1e-3,
            batch_size: 64,
            generator_steps: steps,
            eval_every: 100,
            ..WganConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = WganConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.beta1, c.beta2, c.l2), (1e-4, 256, 0.5, 0.999, 1e-4));
        assert_eq!((c.clip, c.n_critic, LATENT_DIM), (0.01, 5, 2));
    }

    #[test]
    fn learns_deterministic_reward() {
        let train = reward_dataset(2000, 1);
        let (gan, log) = train_wgan_with_log(&train, &config(1500)).unwrap();
        assert!(gan.critic().max_abs_param() <= 0.01);
        assert!(!log.is_empty());
        let test = reward_dataset(300, 2);
        let (lo, hi) = test
            .transitions()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(t.reward), h.max(t.reward)));
        let mut r = rng::stream(3, 0);
        let mae = test
            .transitions()
            .map(|t| (gan.predict_reward(&t.state, &t.action, &t.next_state, &mut r).unwrap() - t.reward).abs())
            .sum::<f64>()
            / 300.0;
        assert!(mae < 0.1 * (hi - lo), "mae {mae} range {}", hi - lo);
        let t = test.transitions().next().unwrap();
        let samples: Vec<f64> = (0..100)
            .map(|_| gan.predict_reward(&t.state, &t.action, &t.next_state, &mut r).unwrap())
            .collect();
        let mean = samples.iter().sum::<f64>() / 100.0;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(sd < 0.15 * (hi - lo), "sd {sd}");
    }

    #[test]
    fn zero_generator_and_determinism() {
        let ds = reward_dataset(40, 4);
        let gan = train_wgan(&ds, &config(3)).unwrap();
        let (s, a, s2) = ([0.1, 0.2], [0.3, -0.3], [0.13, 0.17]);
        let x = gan.predict_reward(&s, &a, &s2, &mut rng::stream(2, 2)).unwrap();
        assert_eq!(x, gan.predict_reward(&s, &a, &s2, &mut rng::stream(2, 2)).unwrap());

        let zero = RewardGan::new(
            Network::zeros(&[8, 4, 1], Head::Linear).unwrap(),
            Network::zeros(&[7, 4, 1], Head::Linear).unwrap(),
            0.01,
            NormStats::identity(2),
            NormStats::identity(2),
            NormStats::identity(1),
        )
        .unwrap();
        assert_eq!(zero.predict_reward(&s, &a, &s2, &mut rng::stream(0, 0)).unwrap(), 0.0);
    }

    #[test]
    fn critic_stays_clipped_and_checkpoint_round_trips() {
        let ds = reward_dataset(40, 5);
        let gan = train_wgan(&ds, &config(7)).unwrap();
        assert!(gan.critic().max_abs_param() <= gan.clip());
        let json = gan.to_json(CheckpointMeta::default()).unwrap();
        assert_eq!(RewardGan::from_json(&json).unwrap(), gan);
        assert!(RewardGan::from_json(&json.replace("\"clip\":0.01", "\"clip\":0.000001")).is_err());
    }
}
