//! Flat experiment configuration and the expert-fraction pipeline: mixture
//! datasets, BC, TS+BC and value-weighted BC, scored by return, trajectory KL
//! and action MSE.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bc::{self, BcConfig, Policy};
use crate::cvae::{CvaeConfig, LatentMode};
use crate::data::{write_atomic, Dataset};
use crate::dynamics::DynamicsConfig;
use crate::env::{self, GaussianExpert, MixtureSpec, PdExpert, PointMassEnv};
use crate::error::{Error, Result};
use crate::eval::{self, mean_std};
use crate::rng;
use crate::stitch::{self, CvaeSampler, StitchConfig, StitchReport, TsConfig};
use crate::value::{self, ValueConfig};
use crate::wgan::WganConfig;

// Tags separating the seed of every stochastic component.
const DATA: u64 = 1;
const TS: u64 = 2;
const BC: u64 = 3;
const EVAL: u64 = 4;
const SELECT: u64 = 5;
const KL: u64 = 6;
const MSE: u64 = 7;
const WEIGHTS: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: PointMassEnv,
    pub expert_kp: f64,
    pub expert_kd: f64,
    pub noise_std: f64,
    pub trajectories: usize,
    /// Expert percentage for single-dataset commands.
    pub expert_fraction: f64,
    pub fractions: Vec<f64>,
    pub bc_seeds: usize,
    pub ts_seeds: usize,
    /// Gaussian policies trained per dataset for the KL estimate.
    pub kl_policies: usize,
    pub weighted_fractions: Vec<f64>,
    pub iteration_fractions: Vec<f64>,
    pub eval_episodes: usize,
    pub eval_seeds: usize,
    /// Episodes used to pick the best BC checkpoint; 0 keeps the final one.
    pub select_episodes: usize,
    pub kl_episodes: usize,
    pub mse_episodes: usize,
    pub dynamics: DynamicsConfig,
    pub inverse: CvaeConfig,
    pub latent_mode: LatentMode,
    pub reward: WganConfig,
    pub value: ValueConfig,
    pub stitch: StitchConfig,
    pub bc: BcConfig,
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    /// Full-size model settings; see [`ExperimentConfig::desk`] for runs that
    /// finish in minutes.
    fn default() -> Self {
        Self {
            seed: 0,
            env: PointMassEnv::default(),
            expert_kp: 2.0,
            expert_kd: 1.0,
            noise_std: 0.5,
            trajectories: 200,
            expert_fraction: 10.0,
            fractions: env::EXPERT_FRACTIONS.to_vec(),
            bc_seeds: 5,
            ts_seeds: 3,
            kl_policies: 1,
            weighted_fractions: vec![10.0],
            iteration_fractions: vec![10.0],
            eval_episodes: eval::DEFAULT_EPISODES,
            eval_seeds: eval::DEFAULT_SEEDS,
            select_episodes: 10,
            kl_episodes: 10,
            mse_episodes: 10,
            dynamics: DynamicsConfig::default(),
            inverse: CvaeConfig::default(),
            latent_mode: LatentMode::default(),
            reward: WganConfig::default(),
            value: ValueConfig::default(),
            stitch: StitchConfig::default(),
            bc: BcConfig::default(),
            workers: None,
        }
    }
}

enum Slot<'a> {
    F64(&'a mut f64),
    Usize(&'a mut usize),
    U64(&'a mut u64),
    Sizes(&'a mut Vec<usize>),
    F64s(&'a mut Vec<f64>),
    /// `auto` maps to `None`.
    AutoF64(&'a mut Option<f64>),
    AutoUsize(&'a mut Option<usize>),
    /// `none` maps to `None`.
    LimitUsize(&'a mut Option<usize>),
    Latent(&'a mut LatentMode),
}

impl Slot<'_> {
    fn render(&self) -> String {
        fn list<T: ToString>(xs: &[T]) -> String {
            xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        match self {
            Slot::F64(v) => v.to_string(),
            Slot::Usize(v) => v.to_string(),
            Slot::U64(v) => v.to_string(),
            Slot::Sizes(v) => list(v),
            Slot::F64s(v) => list(v),
            Slot::AutoF64(v) => v.map_or("auto".into(), |x| x.to_string()),
            Slot::AutoUsize(v) | Slot::LimitUsize(v) => match (v, self) {
                (Some(x), _) => x.to_string(),
                (None, Slot::AutoUsize(_)) => "auto".into(),
                (None, _) => "none".into(),
            },
            Slot::Latent(v) => match v {
                LatentMode::Sample => "sample".into(),
                LatentMode::Mean => "mean".into(),
            },
        }
    }

    fn assign(&mut self, raw: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
            s.trim().parse().map_err(|_| format!("cannot parse {s:?}"))
        }
        fn list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
            if s.trim().is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(num).collect()
        }
        match self {
            Slot::F64(v) => **v = num(raw)?,
            Slot::Usize(v) => **v = num(raw)?,
            Slot::U64(v) => **v = num(raw)?,
            Slot::Sizes(v) => **v = list(raw)?,
            Slot::F64s(v) => **v = list(raw)?,
            Slot::AutoF64(v) => **v = if raw == "auto" { None } else { Some(num(raw)?) },
            Slot::AutoUsize(v) => **v = if raw == "auto" { None } else { Some(num(raw)?) },
            Slot::LimitUsize(v) => **v = if raw == "none" { None } else { Some(num(raw)?) },
            Slot::Latent(v) => {
                **v = match raw {
                    "sample" => LatentMode::Sample,
                    "mean" => LatentMode::Mean,
                    _ => return Err(format!("expected sample or mean, got {raw:?}")),
                }
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Model sizes and step counts scaled down for the point-mass task so the
    /// whole pipeline runs on one core in well under an hour. Learning rates,
    /// batch sizes and optimizer settings are unchanged.
    pub fn desk() -> Self {
        let base = Self::default();
        Self {
            fractions: vec![2.5, 5.0, 10.0, 20.0, 40.0],
            dynamics: DynamicsConfig {
                hidden: vec![64, 64],
                max_epochs: 40,
                log_std_min: -1.0,
                ..base.dynamics.clone()
            },
            inverse: CvaeConfig {
                hidden_width: Some(64),
                steps: 4000,
                ..base.inverse.clone()
            },
            reward: WganConfig {
                hidden: vec![32, 32],
                generator_steps: 2000,
                eval_every: 100,
                ..base.reward.clone()
            },
            value: ValueConfig {
                hidden: vec![64, 64],
                steps: 3000,
                target_period: 250,
                divergence_window: 250,
                ..base.value.clone()
            },
            stitch: StitchConfig {
                epsilon: Some(0.15),
                ..base.stitch.clone()
            },
            bc: BcConfig {
                hidden: vec![64, 64],
                steps: 3000,
                checkpoint_start: 1000,
                checkpoint_every: 500,
                ..base.bc.clone()
            },
            ..base
        }
    }

    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        let [goal_x, goal_y] = &mut self.env.goal;
        let (d, i, r, v, s, b) = (
            &mut self.dynamics,
            &mut self.inverse,
            &mut self.reward,
            &mut self.value,
            &mut self.stitch,
            &mut self.bc,
        );
        vec![
            ("seed", Slot::U64(&mut self.seed)),
            ("workers", Slot::AutoUsize(&mut self.workers)),
            ("env.dt", Slot::F64(&mut self.env.dt)),
            ("env.max_speed", Slot::F64(&mut self.env.max_speed)),
            ("env.max_action", Slot::F64(&mut self.env.max_action)),
            ("env.horizon", Slot::Usize(&mut self.env.horizon)),
            ("env.goal_x", Slot::F64(goal_x)),
            ("env.goal_y", Slot::F64(goal_y)),
            ("env.start_low", Slot::F64(&mut self.env.start_low)),
            ("env.start_high", Slot::F64(&mut self.env.start_high)),
            ("expert.kp", Slot::F64(&mut self.expert_kp)),
            ("expert.kd", Slot::F64(&mut self.expert_kd)),
            ("data.noise_std", Slot::F64(&mut self.noise_std)),
            ("data.trajectories", Slot::Usize(&mut self.trajectories)),
            ("data.expert_fraction", Slot::F64(&mut self.expert_fraction)),
            ("pipeline.fractions", Slot::F64s(&mut self.fractions)),
            ("pipeline.bc_seeds", Slot::Usize(&mut self.bc_seeds)),
            ("pipeline.ts_seeds", Slot::Usize(&mut self.ts_seeds)),
            ("pipeline.kl_policies", Slot::Usize(&mut self.kl_policies)),
            ("pipeline.weighted_fractions", Slot::F64s(&mut self.weighted_fractions)),
            ("pipeline.iteration_fractions", Slot::F64s(&mut self.iteration_fractions)),
            ("eval.episodes", Slot::Usize(&mut self.eval_episodes)),
            ("eval.seeds", Slot::Usize(&mut self.eval_seeds)),
            ("eval.select_episodes", Slot::Usize(&mut self.select_episodes)),
            ("eval.kl_episodes", Slot::Usize(&mut self.kl_episodes)),
            ("eval.mse_episodes", Slot::Usize(&mut self.mse_episodes)),
            ("dynamics.hidden", Slot::Sizes(&mut d.hidden)),
            ("dynamics.lr", Slot::F64(&mut d.learning_rate)),
            ("dynamics.batch", Slot::Usize(&mut d.batch_size)),
            ("dynamics.max_epochs", Slot::Usize(&mut d.max_epochs)),
            ("dynamics.patience", Slot::Usize(&mut d.patience)),
            ("dynamics.ensemble", Slot::Usize(&mut d.ensemble_size)),
            ("dynamics.elites", Slot::Usize(&mut d.num_elites)),
            ("dynamics.holdout", Slot::F64(&mut d.holdout_fraction)),
            ("dynamics.log_std_min", Slot::F64(&mut d.log_std_min)),
            ("inverse.hidden_width", Slot::AutoUsize(&mut i.hidden_width)),
            ("inverse.hidden_layers", Slot::Usize(&mut i.hidden_layers)),
            ("inverse.lr", Slot::F64(&mut i.learning_rate)),
            ("inverse.batch", Slot::Usize(&mut i.batch_size)),
            ("inverse.steps", Slot::Usize(&mut i.steps)),
            ("inverse.kl_weight", Slot::F64(&mut i.kl_weight)),
            ("inverse.latent_mode", Slot::Latent(&mut self.latent_mode)),
            ("reward.hidden", Slot::Sizes(&mut r.hidden)),
            ("reward.lr", Slot::F64(&mut r.learning_rate)),
            ("reward.batch", Slot::Usize(&mut r.batch_size)),
            ("reward.beta1", Slot::F64(&mut r.beta1)),
            ("reward.beta2", Slot::F64(&mut r.beta2)),
            ("reward.l2", Slot::F64(&mut r.l2)),
            ("reward.clip", Slot::F64(&mut r.clip)),
            ("reward.n_critic", Slot::Usize(&mut r.n_critic)),
            ("reward.steps", Slot::Usize(&mut r.generator_steps)),
            ("reward.eval_every", Slot::Usize(&mut r.eval_every)),
            ("reward.holdout", Slot::F64(&mut r.holdout_fraction)),
            ("value.hidden", Slot::Sizes(&mut v.hidden)),
            ("value.lr", Slot::F64(&mut v.learning_rate)),
            ("value.batch", Slot::Usize(&mut v.batch_size)),
            ("value.steps", Slot::Usize(&mut v.steps)),
            ("value.gamma", Slot::F64(&mut v.gamma)),
            ("value.target_period", Slot::Usize(&mut v.target_period)),
            ("value.divergence_factor", Slot::F64(&mut v.divergence_factor)),
            ("value.divergence_window", Slot::Usize(&mut v.divergence_window)),
            ("value.divergence_floor", Slot::F64(&mut v.divergence_floor)),
            ("stitch.accept_threshold", Slot::F64(&mut s.accept_threshold)),
            ("stitch.iterations", Slot::Usize(&mut s.iterations)),
            ("stitch.epsilon", Slot::AutoF64(&mut s.epsilon)),
            ("stitch.candidate_cap", Slot::LimitUsize(&mut s.candidate_cap)),
            ("stitch.max_stitches", Slot::LimitUsize(&mut s.max_stitches)),
            ("bc.hidden", Slot::Sizes(&mut b.hidden)),
            ("bc.lr", Slot::F64(&mut b.learning_rate)),
            ("bc.batch", Slot::Usize(&mut b.batch_size)),
            ("bc.steps", Slot::Usize(&mut b.steps)),
            ("bc.checkpoint_start", Slot::Usize(&mut b.checkpoint_start)),
            ("bc.checkpoint_every", Slot::Usize(&mut b.checkpoint_every)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().slots().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key; unknown keys and unparsable values are configuration
    /// errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut slots = self.slots();
        let (_, slot) = slots
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        slot.assign(value.trim())
            .map_err(|m| Error::config(format!("{key}: {m}")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let mut copy = self.clone();
        let slots = copy.slots();
        slots.iter().find(|(k, _)| *k == key).map(|(_, s)| s.render())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment;
    /// blank lines are ignored; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: n + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key = value".into()))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(parse_err(format!("duplicate key {k:?}")));
            }
            self.set(k, v).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    /// The default configuration overridden by `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its resolved value, one per line, in a form
    /// [`ExperimentConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        for (k, s) in copy.slots() {
            let _ = writeln!(out, "{k} = {}", s.render());
        }
        out
    }

    pub fn write_resolved(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.env;
        let positive = [e.dt, e.max_speed, e.max_action, self.expert_kp, self.expert_kd];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) || e.horizon == 0 {
            return Err(Error::config("env and expert parameters must be positive"));
        }
        if !(e.start_low < e.start_high) || !e.goal.iter().all(|g| g.is_finite()) {
            return Err(Error::config("env: need start_low < start_high and a finite goal"));
        }
        self.mixture(self.expert_fraction).validate()?;
        let all_fractions = self
            .fractions
            .iter()
            .chain(&self.weighted_fractions)
            .chain(&self.iteration_fractions);
        for f in all_fractions {
            self.mixture(*f).validate()?;
        }
        if self.bc_seeds == 0 || self.ts_seeds == 0 || self.eval_episodes == 0 || self.eval_seeds == 0 {
            return Err(Error::config("seed counts and evaluation sizes must be positive"));
        }
        if self.kl_policies > self.bc_seeds {
            return Err(Error::config("pipeline.kl_policies cannot exceed pipeline.bc_seeds"));
        }
        if self.kl_policies > 0 && self.kl_episodes == 0 {
            return Err(Error::config("eval.kl_episodes must be positive when KL is estimated"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be positive"));
        }
        self.dynamics.validate()?;
        self.reward.validate()?;
        self.value.validate()?;
        self.stitch.validate()?;
        let b = &self.bc;
        if b.hidden.is_empty() || !(b.learning_rate > 0.0) || b.batch_size == 0 || b.steps == 0 {
            return Err(Error::config("bc: need hidden layers and positive lr, batch and steps"));
        }
        let i = &self.inverse;
        if i.hidden_layers == 0 || !(i.learning_rate > 0.0) || i.batch_size == 0 || i.steps == 0 {
            return Err(Error::config("inverse: need hidden layers and positive lr, batch and steps"));
        }
        Ok(())
    }

    pub fn expert(&self) -> PdExpert {
        PdExpert {
            kp: self.expert_kp,
            kd: self.expert_kd,
            ..PdExpert::for_env(&self.env)
        }
    }

    pub fn mixture(&self, fraction: f64) -> MixtureSpec {
        MixtureSpec {
            expert_fraction: fraction,
            noise_std: self.noise_std,
            num_trajectories: self.trajectories,
        }
    }

    /// The mixture dataset for `fraction`. Its seed depends only on the
    /// global seed and the fraction.
    pub fn dataset(&self, fraction: f64) -> Result<Dataset> {
        let seed = rng::mix(&[self.seed, DATA, fraction.to_bits()]);
        env::generate_mixture_dataset(&self.env, &self.expert(), &self.mixture(fraction), seed)
    }

    /// Model configuration for TS run `k` on the dataset of `fraction`.
    pub fn ts_config(&self, fraction: f64, k: usize) -> TsConfig {
        self.ts_config_from(rng::mix(&[self.seed, TS, fraction.to_bits(), k as u64]))
    }

    /// Model configuration for a dataset that did not come from the
    /// fraction grid.
    pub fn standalone_ts_config(&self) -> TsConfig {
        self.ts_config_from(rng::mix(&[self.seed, TS]))
    }

    fn ts_config_from(&self, base: u64) -> TsConfig {
        let sub = |tag: u64| rng::mix(&[base, tag]);
        TsConfig {
            dynamics: DynamicsConfig {
                seed: sub(1),
                ..self.dynamics.clone()
            },
            inverse: CvaeConfig {
                seed: sub(2),
                action_bounds: Some(self.env.action_bounds()),
                ..self.inverse.clone()
            },
            reward: WganConfig {
                seed: sub(3),
                ..self.reward.clone()
            },
            value: ValueConfig {
                seed: sub(4),
                ..self.value.clone()
            },
            stitch: StitchConfig {
                seed: sub(5),
                ..self.stitch.clone()
            },
            latent_mode: self.latent_mode,
        }
    }

    /// BC configuration for policy seed `j`. The same seeds are used on every
    /// dataset so comparisons are paired.
    pub fn bc_config(&self, j: usize) -> BcConfig {
        BcConfig {
            seed: rng::mix(&[self.seed, BC, j as u64]),
            action_bounds: Some(self.env.action_bounds()),
            ..self.bc.clone()
        }
    }

    /// Value function used for the weighted-BC weights on one dataset.
    pub fn weight_value_config(&self, fraction: f64) -> ValueConfig {
        ValueConfig {
            seed: rng::mix(&[self.seed, WEIGHTS, fraction.to_bits()]),
            ..self.value.clone()
        }
    }

    pub fn eval_seed(&self) -> u64 {
        rng::mix(&[self.seed, EVAL])
    }

    /// Runs `f` on a pool of `workers` threads, or the global pool.
    pub fn with_workers<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.workers {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::config(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }
}

/// Scores of a group of policies trained on one kind of dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    /// One evaluation mean return per policy.
    pub returns: Vec<f64>,
    pub return_mean: f64,
    /// Sample standard deviation over policies.
    pub return_std: f64,
    pub kl: Vec<f64>,
    pub kl_mean: Option<f64>,
    pub mse: Vec<f64>,
    pub mse_mean: f64,
}

impl PolicyMetrics {
    fn new(returns: Vec<f64>, kl: Vec<f64>, mse: Vec<f64>) -> Self {
        let (return_mean, return_std) = mean_std(&returns);
        let kl_mean = (!kl.is_empty()).then(|| mean_std(&kl).0);
        Self {
            return_mean,
            return_std,
            kl_mean,
            mse_mean: mean_std(&mse).0,
            returns,
            kl,
            mse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchSummary {
    pub ts_seed: usize,
    pub proposed: Vec<usize>,
    pub accepted: Vec<usize>,
    pub events_accepted: Vec<usize>,
    pub return_before: f64,
    pub return_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionMetrics {
    pub fraction: f64,
    pub expert_trajectories: usize,
    pub bc: PolicyMetrics,
    pub tsbc: PolicyMetrics,
    pub weighted_bc: Option<PolicyMetrics>,
    /// Entry `k` scores BC on the dataset after `k` TS iterations; empty
    /// when the fraction is not part of the iteration study.
    pub iterations: Vec<PolicyMetrics>,
    pub stitching: Vec<StitchSummary>,
}

/// Per-fraction series; `None` where a variant was not run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub returns: Vec<Option<f64>>,
    pub return_std: Vec<Option<f64>>,
    pub kl: Vec<Option<f64>>,
    pub mse: Vec<Option<f64>>,
}

impl Series {
    fn push(&mut self, m: Option<&PolicyMetrics>) {
        self.returns.push(m.map(|m| m.return_mean));
        self.return_std.push(m.map(|m| m.return_std));
        self.kl.push(m.and_then(|m| m.kl_mean));
        self.mse.push(m.map(|m| m.mse_mean));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fractions: Vec<f64>,
    pub bc: Series,
    pub tsbc: Series,
    pub weighted_bc: Series,
    /// `scaled(KL_bc) - scaled(KL_tsbc)` per fraction; empty without KL.
    pub scaled_kl_difference: Vec<f64>,
    pub details: Vec<FractionMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per fraction and variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,variant,return_mean,return_std,kl,mse,scaled_kl_difference\n");
        let cell = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for (i, f) in self.fractions.iter().enumerate() {
            let diff = self.scaled_kl_difference.get(i).copied();
            for (name, s) in [("bc", &self.bc), ("tsbc", &self.tsbc), ("weighted_bc", &self.weighted_bc)] {
                if s.returns[i].is_none() {
                    continue;
                }
                let _ = writeln!(
                    out,
                    "{f},{name},{},{},{},{},{}",
                    cell(s.returns[i]),
                    cell(s.return_std[i]),
                    cell(s.kl[i]),
                    cell(s.mse[i]),
                    if name == "bc" { cell(diff) } else { String::new() }
                );
            }
        }
        out
    }

    /// BC return after each TS iteration, for plotting.
    pub fn iterations_csv(&self) -> String {
        let mut out = String::from("fraction,iteration,return_mean,return_std\n");
        for d in &self.details {
            for (k, m) in d.iterations.iter().enumerate() {
                let _ = writeln!(out, "{},{k},{},{}", d.fraction, m.return_mean, m.return_std);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchRun {
    pub fraction: f64,
    pub ts_seed: usize,
    pub report: StitchReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub metrics: MetricsReport,
    pub stitch_runs: Vec<StitchRun>,
}

impl PipelineOutput {
    /// Writes `metrics.json`, `metrics.csv`, `iterations.csv` and one
    /// `stitch_<fraction>_<seed>.json` per TS run into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("metrics.json"), self.metrics.to_json()?.as_bytes())?;
        write_atomic(&dir.join("metrics.csv"), self.metrics.to_csv().as_bytes())?;
        write_atomic(&dir.join("iterations.csv"), self.metrics.iterations_csv().as_bytes())?;
        for run in &self.stitch_runs {
            let name = format!("stitch_{}_{}.json", run.fraction, run.ts_seed);
            write_atomic(&dir.join(name), run.report.to_json()?.as_bytes())?;
        }
        Ok(())
    }
}

/// Shared evaluation state: the same starts, KL rollouts and MSE states are
/// used for every policy.
pub struct Evaluation<'a> {
    config: &'a ExperimentConfig,
    expert: PdExpert,
    mse_states: Vec<Vec<f64>>,
}

impl<'a> Evaluation<'a> {
    pub fn new(config: &'a ExperimentConfig) -> Self {
        let expert = config.expert();
        let mse_seed = rng::mix(&[config.seed, MSE]);
        let mse_states = eval::expert_states(&config.env, &expert, config.mse_episodes, mse_seed);
        Self {
            config,
            expert,
            mse_states,
        }
    }

    pub fn expert(&self) -> &PdExpert {
        &self.expert
    }

    pub fn policy_return(&self, p: &Policy) -> f64 {
        let c = self.config;
        eval::evaluate_policy(&c.env, p, c.eval_episodes, c.eval_seeds, c.eval_seed()).mean
    }

    pub fn mse(&self, p: &Policy) -> Result<f64> {
        // Validate dimensions once so the closure below cannot fail.
        if let Some(s) = self.mse_states.first() {
            p.mean_action(s)?;
        }
        Ok(eval::action_mse(
            &self.expert,
            |s| p.mean_action(s).expect("checked dimensions"),
            &self.mse_states,
        ))
    }

    pub fn kl(&self, p: &Policy) -> Result<f64> {
        let c = self.config;
        let expert = GaussianExpert::new(self.expert.clone());
        let est = eval::kl_divergence_estimate(
            &expert,
            &p.as_gaussian()?,
            &c.env,
            c.kl_episodes,
            rng::mix(&[c.seed, KL]),
        );
        Ok(est.mean)
    }

    /// Checkpoint-selection score, on starts disjoint from the reported ones.
    fn selection_score(&self, p: &Policy) -> Result<f64> {
        let c = self.config;
        Ok(eval::evaluate_policy(&c.env, p, c.select_episodes, 1, rng::mix(&[c.seed, SELECT])).mean)
    }

    /// Trains policy seed `j` on `ds`, picking the checkpoint with the best
    /// selection score when `eval.select_episodes > 0`.
    pub fn train_policy(&self, ds: &Dataset, j: usize, gaussian: bool, weights: Option<&[f64]>) -> Result<Policy> {
        let cfg = self.config.bc_config(j);
        let score = |p: &Policy| self.selection_score(p);
        let evaluator: Option<&bc::Evaluator<'_>> = (self.config.select_episodes > 0).then_some(&score);
        let (policy, _) = match (gaussian, weights) {
            (true, _) => bc::train_bc_gaussian(ds, &cfg, evaluator)?,
            (false, Some(w)) => bc::train_weighted_bc_raw(ds, w.to_vec(), &cfg, evaluator)?,
            (false, None) => bc::train_bc(ds, &cfg, evaluator)?,
        };
        Ok(policy)
    }

    /// Trains one deterministic policy per BC seed (plus `kl_policies`
    /// Gaussian ones when `with_kl`) and scores them.
    pub fn score_datasets(&self, datasets: &[&Dataset], weights: Option<&[f64]>, with_kl: bool) -> Result<PolicyMetrics> {
        let c = self.config;
        let jobs: Vec<(usize, usize)> = (0..datasets.len())
            .flat_map(|d| (0..c.bc_seeds).map(move |j| (d, j)))
            .collect();
        let scored = jobs
            .par_iter()
            .map(|&(d, j)| {
                let p = self.train_policy(datasets[d], j, false, weights)?;
                Ok((self.policy_return(&p), self.mse(&p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let kl = if with_kl {
            let kl_jobs: Vec<(usize, usize)> = (0..datasets.len())
                .flat_map(|d| (0..c.kl_policies).map(move |j| (d, j)))
                .collect();
            kl_jobs
                .par_iter()
                .map(|&(d, j)| self.kl(&self.train_policy(datasets[d], j, true, None)?))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (returns, mse) = scored.into_iter().unzip();
        Ok(PolicyMetrics::new(returns, kl, mse))
    }
}

fn contains(xs: &[f64], x: f64) -> bool {
    xs.iter().any(|y| y.to_bits() == x.to_bits())
}

/// One fraction: data, BC, TS runs, TS+BC, and the optional ablation and
/// iteration study.
fn run_fraction(config: &ExperimentConfig, ev: &Evaluation<'_>, fraction: f64) -> Result<(FractionMetrics, Vec<StitchRun>)> {
    let data = config.dataset(fraction)?;
    let study = contains(&config.iteration_fractions, fraction);
    log::info!("fraction {fraction}%: {} transitions", data.num_transitions());
    let bc_metrics = ev.score_datasets(&[&data], None, true)?;

    let mut runs = Vec::new();
    let mut augmented = Vec::new();
    // intermediate[k - 1][i]: dataset after k iterations of TS run i.
    let mut intermediate: Vec<Vec<Dataset>> = vec![Vec::new(); config.stitch.iterations.saturating_sub(1)];
    for k in 0..config.ts_seeds {
        let ts = config.ts_config(fraction, k);
        let models = stitch::train_fixed_models(&data, &ts)?;
        let sampler = CvaeSampler {
            model: &models.inverse,
            mode: ts.latent_mode,
        };
        let last = ts.stitch.iterations;
        let mut keep = |it: usize, d: &Dataset| {
            if study && it < last {
                intermediate[it - 1].push(d.clone());
            }
            Ok(())
        };
        let (out, report) = stitch::run_ts_observed(
            &data,
            &models.dynamics,
            &sampler,
            &models.reward,
            &ts.value,
            &ts.stitch,
            &mut keep,
        )?;
        log::info!(
            "fraction {fraction}% TS run {k}: accepted per iteration {:?}",
            report.iterations.iter().map(|i| i.accepted).collect::<Vec<_>>()
        );
        runs.push(StitchRun {
            fraction,
            ts_seed: k,
            report,
        });
        augmented.push(out);
    }
    let refs: Vec<&Dataset> = augmented.iter().collect();
    let tsbc = ev.score_datasets(&refs, None, true)?;

    let weighted_bc = if contains(&config.weighted_fractions, fraction) {
        let v = value::train_value(&data, &config.weight_value_config(fraction))?;
        let w = bc::value_weights(&data, &v)?;
        Some(ev.score_datasets(&[&data], Some(&w), false)?)
    } else {
        None
    };

    let iterations = if study {
        let mut out = vec![PolicyMetrics::new(bc_metrics.returns.clone(), Vec::new(), bc_metrics.mse.clone())];
        for sets in &intermediate {
            let refs: Vec<&Dataset> = sets.iter().collect();
            out.push(ev.score_datasets(&refs, None, false)?);
        }
        out.push(PolicyMetrics::new(tsbc.returns.clone(), Vec::new(), tsbc.mse.clone()));
        out
    } else {
        Vec::new()
    };

    let stitching = runs
        .iter()
        .map(|r| StitchSummary {
            ts_seed: r.ts_seed,
            proposed: r.report.iterations.iter().map(|i| i.proposed).collect(),
            accepted: r.report.iterations.iter().map(|i| i.accepted).collect(),
            events_accepted: r.report.iterations.iter().map(|i| i.events_accepted).collect(),
            return_before: r.report.iterations.first().map_or(0.0, |i| i.return_before),
            return_after: r.report.iterations.last().map_or(0.0, |i| i.return_after),
        })
        .collect();
    let expert_trajectories = config.mixture(fraction).num_expert();
    Ok((
        FractionMetrics {
            fraction,
            expert_trajectories,
            bc: bc_metrics,
            tsbc,
            weighted_bc,
            iterations,
            stitching,
        },
        runs,
    ))
}

/// Runs every fraction of `config.fractions`, plus any ablation or
/// iteration-study fraction not already listed.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    config.validate()?;
    config.with_workers(|| {
        let ev = Evaluation::new(config);
        let mut fractions = config.fractions.clone();
        for f in config.weighted_fractions.iter().chain(&config.iteration_fractions) {
            if !contains(&fractions, *f) {
                fractions.push(*f);
            }
        }
        let mut details = Vec::new();
        let mut stitch_runs = Vec::new();
        for f in &fractions {
            let (m, runs) = run_fraction(config, &ev, *f)?;
            details.push(m);
            stitch_runs.extend(runs);
        }
        let (mut bc, mut tsbc, mut weighted_bc) = (Series::default(), Series::default(), Series::default());
        for d in &details {
            bc.push(Some(&d.bc));
            tsbc.push(Some(&d.tsbc));
            weighted_bc.push(d.weighted_bc.as_ref());
        }
        let kls: Option<(Vec<f64>, Vec<f64>)> = bc.kl.iter().zip(&tsbc.kl).map(|(a, b)| Some(((*a)?, (*b)?))).collect();
        let scaled_kl_difference = match kls {
            Some((a, b)) if !a.is_empty() => eval::scaled_kl_difference(&a, &b)?,
            _ => Vec::new(),
        };
        Ok(PipelineOutput {
            metrics: MetricsReport {
                fractions,
                bc,
                tsbc,
                weighted_bc,
                scaled_kl_difference,
                details,
            },
            stitch_runs,
        })
    })?
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.get("dynamics.lr").unwrap(), "0.0003");
        assert_eq!(c.get("inverse.lr").unwrap(), "0.0001");
        assert_eq!(c.get("reward.lr").unwrap(), "0.0001");
        assert_eq!(c.get("value.lr").unwrap(), "0.0003");
        assert_eq!(c.get("bc.lr").unwrap(), "0.001");
        assert_eq!(c.get("reward.beta1").unwrap(), "0.5");
        assert_eq!(c.get("stitch.accept_threshold").unwrap(), "0.1");
        assert_eq!(c.get("stitch.iterations").unwrap(), "5");
        assert_eq!(c.get("dynamics.ensemble").unwrap(), "7");
        assert_eq!(c.get("dynamics.elites").unwrap(), "5");
        assert_eq!(c.get("inverse.hidden_width").unwrap(), "auto");
        assert_eq!(c.fractions, vec![0.0, 0.1, 2.5, 5.0, 10.0, 20.0, 30.0, 40.0]);
        c.validate().unwrap();
        ExperimentConfig::desk().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        for c in [ExperimentConfig::default(), ExperimentConfig::desk()] {
            let back = ExperimentConfig::parse(&c.to_text()).unwrap();
            assert_eq!(back, c);
        }
        let mut c = ExperimentConfig::default();
        c.set("stitch.accept_threshold", "inf").unwrap();
        c.set("stitch.max_stitches", "9").unwrap();
        c.set("workers", "3").unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let c = ExperimentConfig::parse("# header\n\nseed = 7 # trailing\nbc.hidden = 8, 8\nstitch.epsilon=0.2\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.bc.hidden, vec![8, 8]);
        assert_eq!(c.stitch.epsilon, Some(0.2));
        let err = ExperimentConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.is_input_error());
        assert!(matches!(ExperimentConfig::parse("seed 1"), Err(Error::Parse { line: 1, .. })));
        assert!(ExperimentConfig::parse("seed = x").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("inverse.latent_mode = median").is_err());
        let mut d = ExperimentConfig::default();
        assert!(matches!(d.set("nope", "1"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            "stitch.iterations = 0",
            "data.noise_std = -1",
            "pipeline.fractions = 0,150",
            "pipeline.bc_seeds = 0",
            "env.dt = 0",
            "workers = 0",
            "dynamics.elites = 9",
            "pipeline.kl_policies = 9",
        ];
        for line in bad {
            let c = ExperimentConfig::parse(line).unwrap();
            assert!(c.validate().is_err(), "{line}");
        }
    }

    #[test]
    fn seeds_are_stable_per_fraction() {
        let mut c = ExperimentConfig::default();
        c.trajectories = 20;
        let a = c.dataset(10.0).unwrap();
        c.fractions = vec![10.0];
        assert_eq!(c.dataset(10.0).unwrap(), a);
        assert_ne!(c.dataset(20.0).unwrap(), a);
        let expert = a.trajectories().len() - 18;
        assert_eq!(expert, 2);
        assert_ne!(c.ts_config(10.0, 0).dynamics.seed, c.ts_config(10.0, 1).dynamics.seed);
        assert_eq!(c.bc_config(1), c.bc_config(1));
    }

    #[test]
    fn tiny_pipeline_is_deterministic_and_complete() {
        let mut c = ExperimentConfig::desk();
        for line in [
            "data.trajectories = 12",
            "pipeline.fractions = 0,20",
            "pipeline.weighted_fractions = 20",
            "pipeline.iteration_fractions = 20",
            "pipeline.bc_seeds = 2",
            "pipeline.ts_seeds = 2",
            "stitch.iterations = 2",
            "dynamics.hidden = 8",
            "dynamics.ensemble = 3",
            "dynamics.elites = 2",
            "dynamics.max_epochs = 2",
            "inverse.hidden_width = 8",
            "inverse.steps = 20",
            "reward.hidden = 8",
            "reward.steps = 5",
            "reward.eval_every = 5",
            "value.hidden = 8",
            "value.steps = 20",
            "bc.hidden = 8",
            "bc.steps = 30",
            "bc.checkpoint_start = 10",
            "bc.checkpoint_every = 10",
            "eval.episodes = 2",
            "eval.seeds = 2",
            "eval.select_episodes = 1",
            "eval.kl_episodes = 2",
            "eval.mse_episodes = 2",
        ] {
            c.apply_text(line).unwrap();
        }
        let a = run_pipeline(&c).unwrap();
        let m = &a.metrics;
        assert_eq!(m.fractions, vec![0.0, 20.0]);
        assert_eq!(m.details[0].bc.returns.len(), 2);
        assert_eq!(m.details[0].tsbc.returns.len(), 4);
        assert_eq!(m.details[0].bc.kl.len(), 1);
        assert_eq!(m.details[0].tsbc.kl.len(), 2);
        assert!(m.details[0].weighted_bc.is_none() && m.details[0].iterations.is_empty());
        assert_eq!(m.details[1].weighted_bc.as_ref().unwrap().returns.len(), 2);
        assert_eq!(m.details[1].iterations.len(), 3);
        assert_eq!(m.details[1].iterations[2].returns, m.details[1].tsbc.returns);
        assert_eq!(m.weighted_bc.returns[0], None);
        assert_eq!(m.scaled_kl_difference.len(), 2);
        assert_eq!(a.stitch_runs.len(), 4);
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 2 + 1);
        assert_eq!(m.iterations_csv().lines().count(), 1 + 3);

        c.workers = Some(2);
        let b = run_pipeline(&c).unwrap();
        assert_eq!(a.metrics.to_json().unwrap(), b.metrics.to_json().unwrap());
        for (x, y) in a.stitch_runs.iter().zip(&b.stitch_runs) {
            assert_eq!(x.report.to_json().unwrap(), y.report.to_json().unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        assert!(dir.path().join("metrics.json").exists());
        assert!(dir.path().join("stitch_20_1.json").exists());
    }
}
