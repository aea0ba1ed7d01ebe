//! Trajectory stitching: replay each trajectory, jump to a better reachable
//! dataset state when the models agree, and keep the new trajectory only if
//! its reward sum clears the acceptance threshold.

use std::collections::HashMap;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvae::{InverseCvae, LatentMode};
use crate::data::{Dataset, NeighborIndex, StatePos, Trajectory, Transition, DEFAULT_CANDIDATE_CAP};
use crate::dynamics::{DynamicsConfig, DynamicsEnsemble};
use crate::error::{Error, Result};
use crate::rng;
use crate::value::{train_value, TwinValue, ValueConfig};
use crate::wgan::RewardGan;
use crate::{cvae, dynamics, wgan};

/// Judges whether candidate next states are reachable from `s`. A margin
/// above zero means reachable.
pub trait ReachabilityModel: Sync {
    fn margins(&self, s: &[f64], observed: &[f64], candidates: &[&[f64]]) -> Result<Vec<f64>>;
}

/// Produces an action connecting `s` to `s_next`.
pub trait ActionModel: Sync {
    fn connect(&self, s: &[f64], s_next: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>>;
}

pub trait RewardModel: Sync {
    fn reward(&self, s: &[f64], a: &[f64], s_next: &[f64], rng: &mut dyn RngCore) -> Result<f64>;
}

pub trait StateValue: Sync {
    fn values(&self, states: &[&[f64]]) -> Result<Vec<f64>>;
}

impl ReachabilityModel for DynamicsEnsemble {
    fn margins(&self, s: &[f64], observed: &[f64], candidates: &[&[f64]]) -> Result<Vec<f64>> {
        let mut targets = Vec::with_capacity(candidates.len() + 1);
        targets.push(observed);
        targets.extend_from_slice(candidates);
        let l = self.elite_log_densities(s, &targets)?;
        Ok(l[1..]
            .iter()
            .map(|c| dynamics::margin_from_log_densities(c, &l[0]))
            .collect())
    }
}

/// An inverse model together with the latent mode used at inference.
pub struct CvaeSampler<'a> {
    pub model: &'a InverseCvae,
    pub mode: LatentMode,
}

impl ActionModel for CvaeSampler<'_> {
    fn connect(&self, s: &[f64], s_next: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.model.generate_action(s, s_next, self.mode, rng)
    }
}

impl RewardModel for RewardGan {
    fn reward(&self, s: &[f64], a: &[f64], s_next: &[f64], rng: &mut dyn RngCore) -> Result<f64> {
        self.predict_reward(s, a, s_next, rng)
    }
}

impl StateValue for TwinValue {
    fn values(&self, states: &[&[f64]]) -> Result<Vec<f64>> {
        TwinValue::values(self, states)
    }
}

pub struct StitchModels<'a> {
    pub dynamics: &'a dyn ReachabilityModel,
    pub inverse: &'a dyn ActionModel,
    pub reward: &'a dyn RewardModel,
    pub value: &'a dyn StateValue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchConfig {
    /// Relative reward-sum margin `p` in `sum(new) > (1 + p) sum(old)`.
    /// `f64::INFINITY` rejects every candidate.
    pub accept_threshold: f64,
    pub iterations: usize,
    /// Neighbourhood radius; `None` uses [`default_epsilon`] on the input.
    pub epsilon: Option<f64>,
    pub candidate_cap: Option<usize>,
    /// Candidate trajectories with more stitching events are rejected.
    pub max_stitches: Option<usize>,
    pub seed: u64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            accept_threshold: 0.1,
            iterations: 5,
            epsilon: None,
            candidate_cap: Some(DEFAULT_CANDIDATE_CAP),
            max_stitches: None,
            seed: 0,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.accept_threshold >= 0.0) {
            return Err(Error::config("stitch: acceptance threshold must be >= 0"));
        }
        if self.iterations == 0 {
            return Err(Error::config("stitch: need at least one iteration"));
        }
        if let Some(e) = self.epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::config("stitch: epsilon must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// 0.1 times the mean per-dimension standard deviation of all dataset states.
pub fn default_epsilon(dataset: &Dataset) -> f64 {
    let index = dataset.state_index();
    let d = index.dim();
    if index.len() < 2 || d == 0 {
        return 0.0;
    }
    let rows = (0..index.len()).map(|i| index.state(i));
    match crate::data::NormStats::from_rows(d, rows) {
        Ok(st) => 0.1 * st.std.iter().sum::<f64>() / d as f64,
        Err(_) => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrajStep {
    pub traj_id: i64,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchEvent {
    /// Start of the replaced transition in the dataset being stitched.
    pub source: TrajStep,
    /// Dataset position of the adopted next state.
    pub candidate: TrajStep,
    pub action: Vec<f64>,
    pub reward: f64,
    /// Minimum elite log-density of the candidate minus the log of the mean
    /// elite density of the observed next state.
    pub margin: f64,
    pub value_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub traj_id: i64,
    pub original_sum: f64,
    pub candidate_sum: f64,
    pub events: Vec<StitchEvent>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub epsilon: f64,
    /// Trajectories whose walk produced at least one event.
    pub proposed: usize,
    pub accepted: usize,
    pub events_proposed: usize,
    pub events_accepted: usize,
    /// Acceptances whose original reward sum was negative, where the
    /// threshold admits candidates with a lower sum.
    pub negative_sum_acceptances: usize,
    pub return_before: f64,
    pub return_after: f64,
    pub acceptances: Vec<Acceptance>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StitchReport {
    pub trajectories: usize,
    pub accept_threshold: f64,
    pub iterations: Vec<IterationReport>,
}

impl StitchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// True iff `candidate_sum > (1 + threshold) * original_sum`, with an
/// infinite threshold rejecting everything.
pub fn accepts(original_sum: f64, candidate_sum: f64, threshold: f64) -> bool {
    threshold.is_finite() && candidate_sum > (1.0 + threshold) * original_sum
}

pub fn accept_or_reject(original: Trajectory, candidate: Trajectory, threshold: f64) -> Trajectory {
    if accepts(original.total_reward(), candidate.total_reward(), threshold) {
        candidate
    } else {
        original
    }
}

/// Stitching state for one dataset generation: the neighbour index and the
/// value of every indexed state.
pub struct Stitcher<'a> {
    dataset: &'a Dataset,
    index: NeighborIndex<'a>,
    values: Vec<f64>,
    models: StitchModels<'a>,
    cap: Option<usize>,
}

impl<'a> Stitcher<'a> {
    pub fn new(dataset: &'a Dataset, models: StitchModels<'a>, epsilon: f64, cap: Option<usize>) -> Result<Self> {
        let si = dataset.state_index();
        let states: Vec<&[f64]> = (0..si.len()).map(|i| si.state(i)).collect();
        let values = models.value.values(&states)?;
        if values.len() != states.len() {
            return Err(Error::config("stitch: value model returned the wrong number of values"));
        }
        Ok(Self {
            index: NeighborIndex::new(dataset, epsilon)?,
            dataset,
            values,
            models,
            cap,
        })
    }

    pub fn value_at(&self, pos: StatePos) -> f64 {
        self.values[self.dataset.state_index().index_of(pos)]
    }

    fn step_id(&self, pos: StatePos) -> TrajStep {
        TrajStep {
            traj_id: self.dataset.traj_id(pos.traj),
            t: pos.step,
        }
    }

    /// Walks trajectory `traj` and returns the candidate trajectory with its
    /// stitching events. States of the result are all dataset states.
    pub fn stitch(&self, traj: usize, rng: &mut dyn RngCore) -> Result<(Trajectory, Vec<StitchEvent>)> {
        let trajs = self.dataset.trajectories();
        let own = trajs
            .get(traj)
            .ok_or_else(|| Error::config(format!("stitch: no trajectory at index {traj}")))?;
        let mut out: Vec<Transition> = Vec::with_capacity(own.len());
        let mut events = Vec::new();
        // Highest visited step per trajectory index.
        let mut visited: HashMap<usize, usize> = HashMap::from([(traj, 0)]);
        let mut pos = StatePos { traj, step: 0 };
        let mut stitching = true;
        while pos.step < trajs[pos.traj].len() {
            let tr = &trajs[pos.traj].transitions[pos.step];
            let next = StatePos {
                traj: pos.traj,
                step: pos.step + 1,
            };
            let mut jumped = false;
            if stitching {
                if let Some((cand, margin, gain)) = self.best_candidate(pos, &tr.state, &tr.next_state)? {
                    let blocked = visited.get(&cand.traj).is_some_and(|&m| m >= cand.step);
                    if blocked {
                        stitching = false;
                    } else {
                        let target = self.dataset.state_at(cand);
                        let action = self.models.inverse.connect(&tr.state, target, rng)?;
                        let reward = self.models.reward.reward(&tr.state, &action, target, rng)?;
                        events.push(StitchEvent {
                            source: self.step_id(pos),
                            candidate: self.step_id(cand),
                            action: action.clone(),
                            reward,
                            margin,
                            value_gain: gain,
                        });
                        out.push(Transition {
                            traj_id: own.traj_id,
                            t: out.len(),
                            state: tr.state.clone(),
                            action,
                            reward,
                            next_state: target.to_vec(),
                            done: false,
                        });
                        visited.insert(cand.traj, cand.step);
                        pos = cand;
                        jumped = true;
                    }
                }
            }
            if !jumped {
                let mut copy = tr.clone();
                copy.traj_id = own.traj_id;
                copy.t = out.len();
                out.push(copy);
                let e = visited.entry(next.traj).or_insert(next.step);
                *e = (*e).max(next.step);
                pos = next;
            }
        }
        Ok((
            Trajectory {
                traj_id: own.traj_id,
                transitions: out,
            },
            events,
        ))
    }

    /// Highest-value candidate among those with a value gain and a positive
    /// reachability margin; equal values prefer the lowest (traj_id, t).
    fn best_candidate(&self, pos: StatePos, s: &[f64], observed: &[f64]) -> Result<Option<(StatePos, f64, f64)>> {
        let set = self.index.candidates(pos.traj, pos.step, self.cap)?;
        let v_obs = self.value_at(StatePos {
            traj: pos.traj,
            step: pos.step + 1,
        });
        let trajs = self.dataset.trajectories();
        let mut better: Vec<(StatePos, f64)> = set
            .positions()
            // A final state starts no transition, so the walk could not
            // continue from it.
            .filter(|p| p.step < trajs[p.traj].len())
            .map(|p| (p, self.value_at(p)))
            .filter(|(_, v)| *v > v_obs)
            .collect();
        if better.is_empty() {
            return Ok(None);
        }
        better.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.step_id(a.0).cmp(&self.step_id(b.0))));
        let states: Vec<&[f64]> = better.iter().map(|(p, _)| self.dataset.state_at(*p)).collect();
        let margins = self.models.dynamics.margins(s, observed, &states)?;
        Ok(better
            .iter()
            .zip(margins)
            .find(|(_, m)| *m > 0.0)
            .map(|((p, v), m)| (*p, m, v - v_obs)))
    }
}

/// Stitches one trajectory of `dataset`, building the neighbour index and
/// value cache on the fly. Use [`Stitcher`] for repeated calls.
pub fn stitch_trajectory(
    dataset: &Dataset,
    traj: usize,
    models: StitchModels<'_>,
    epsilon: f64,
    cap: Option<usize>,
    rng: &mut dyn RngCore,
) -> Result<(Trajectory, Vec<StitchEvent>)> {
    Stitcher::new(dataset, models, epsilon, cap)?.stitch(traj, rng)
}

/// One pass over every trajectory: stitch, then accept or keep the original.
pub fn stitch_dataset(
    dataset: &Dataset,
    models: StitchModels<'_>,
    config: &StitchConfig,
    epsilon: f64,
    iteration: usize,
) -> Result<(Dataset, IterationReport)> {
    let stitcher = Stitcher::new(dataset, models, epsilon, config.candidate_cap)?;
    let results = (0..dataset.trajectories().len())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(rng::mix(&[config.seed, iteration as u64, i as u64]), 0);
            stitcher.stitch(i, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = IterationReport {
        iteration,
        epsilon,
        return_before: dataset.total_reward(),
        ..IterationReport::default()
    };
    let mut out = Vec::with_capacity(results.len());
    for (original, (candidate, events)) in dataset.trajectories().iter().zip(results) {
        if events.is_empty() {
            out.push(original.clone());
            continue;
        }
        report.proposed += 1;
        report.events_proposed += events.len();
        let (o, c) = (original.total_reward(), candidate.total_reward());
        let within_limit = config.max_stitches.map_or(true, |m| events.len() <= m);
        if within_limit && accepts(o, c, config.accept_threshold) {
            report.accepted += 1;
            report.events_accepted += events.len();
            if o < 0.0 {
                report.negative_sum_acceptances += 1;
            }
            report.acceptances.push(Acceptance {
                traj_id: original.traj_id,
                original_sum: o,
                candidate_sum: c,
                events,
            });
            out.push(candidate);
        } else {
            out.push(original.clone());
        }
    }
    if report.negative_sum_acceptances > 0 {
        log::warn!(
            "iteration {iteration}: {} acceptances had a negative original reward sum; (1 + p) * sum then admits lower sums",
            report.negative_sum_acceptances
        );
    }
    let next = Dataset::new(dataset.d_s(), dataset.d_a(), out)?;
    report.return_after = next.total_reward();
    Ok((next, report))
}

/// Runs the iterated procedure with fixed forward, inverse and reward
/// models, refitting the value function on the current dataset before every
/// iteration. The value fit of iteration `k` is seeded with
/// `mix(value_config.seed, k)`.
pub fn run_ts_with_models(
    dataset: &Dataset,
    dynamics: &dyn ReachabilityModel,
    inverse: &dyn ActionModel,
    reward: &dyn RewardModel,
    value_config: &ValueConfig,
    config: &StitchConfig,
) -> Result<(Dataset, StitchReport)> {
    run_ts_observed(dataset, dynamics, inverse, reward, value_config, config, &mut |_, _| Ok(()))
}

/// [`run_ts_with_models`] that hands every intermediate dataset to
/// `observe` after its iteration completes.
pub fn run_ts_observed(
    dataset: &Dataset,
    dynamics: &dyn ReachabilityModel,
    inverse: &dyn ActionModel,
    reward: &dyn RewardModel,
    value_config: &ValueConfig,
    config: &StitchConfig,
    observe: &mut dyn FnMut(usize, &Dataset) -> Result<()>,
) -> Result<(Dataset, StitchReport)> {
    config.validate()?;
    let epsilon = config.epsilon.unwrap_or_else(|| default_epsilon(dataset));
    let mut report = StitchReport {
        trajectories: dataset.trajectories().len(),
        accept_threshold: config.accept_threshold,
        iterations: Vec::new(),
    };
    let mut current = dataset.clone();
    for k in 1..=config.iterations {
        let vc = ValueConfig {
            seed: rng::mix(&[value_config.seed, k as u64]),
            ..value_config.clone()
        };
        let value = train_value(&current, &vc).map_err(|e| iteration_error(k, e))?;
        let models = StitchModels {
            dynamics,
            inverse,
            reward,
            value: &value,
        };
        let (next, it) = stitch_dataset(&current, models, config, epsilon, k).map_err(|e| iteration_error(k, e))?;
        log::info!(
            "iteration {k}: {} of {} proposals accepted, return {:.3} -> {:.3}",
            it.accepted,
            it.proposed,
            it.return_before,
            it.return_after
        );
        report.iterations.push(it);
        observe(k, &next)?;
        current = next;
    }
    Ok((current, report))
}

fn iteration_error(k: usize, e: Error) -> Error {
    match e {
        Error::TrainingFault(m) => Error::TrainingFault(format!("iteration {k}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsConfig {
    pub dynamics: DynamicsConfig,
    pub inverse: cvae::CvaeConfig,
    pub reward: wgan::WganConfig,
    pub value: ValueConfig,
    pub stitch: StitchConfig,
    pub latent_mode: LatentMode,
}

pub struct TrainedModels {
    pub dynamics: DynamicsEnsemble,
    pub inverse: InverseCvae,
    pub reward: RewardGan,
}

pub fn train_fixed_models(dataset: &Dataset, config: &TsConfig) -> Result<TrainedModels> {
    Ok(TrainedModels {
        dynamics: dynamics::train_dynamics(dataset, &config.dynamics)?,
        inverse: cvae::train_cvae(dataset, &config.inverse)?,
        reward: wgan::train_wgan(dataset, &config.reward)?,
    })
}

/// Trains the forward, inverse and reward models on the input once, then
/// runs the stitching iterations.
pub fn run_ts(dataset: &Dataset, config: &TsConfig) -> Result<(Dataset, StitchReport)> {
    config.stitch.validate()?;
    let models = train_fixed_models(dataset, config)?;
    let sampler = CvaeSampler {
        model: &models.inverse,
        mode: config.latent_mode,
    };
    run_ts_with_models(dataset, &models.dynamics, &sampler, &models.reward, &config.value, &config.stitch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::trajectory_from_steps;

    /// Reachable iff the candidate is within `radius` of `s + step`.
    struct Shift {
        step: f64,
        radius: f64,
    }

    impl ReachabilityModel for Shift {
        fn margins(&self, s: &[f64], observed: &[f64], candidates: &[&[f64]]) -> Result<Vec<f64>> {
            let err = |x: &[f64]| (x[0] - s[0] - self.step).abs();
            let base = err(observed).max(self.radius);
            Ok(candidates.iter().map(|c| base - err(c) + 1e-9).collect())
        }
    }

    struct Diff;
    impl ActionModel for Diff {
        fn connect(&self, s: &[f64], s_next: &[f64], _: &mut dyn RngCore) -> Result<Vec<f64>> {
            Ok(vec![s_next[0] - s[0]])
        }
    }

    struct Height;
    impl RewardModel for Height {
        fn reward(&self, _: &[f64], _: &[f64], s_next: &[f64], _: &mut dyn RngCore) -> Result<f64> {
            Ok(s_next[1])
        }
    }

    impl StateValue for Height {
        fn values(&self, states: &[&[f64]]) -> Result<Vec<f64>> {
            Ok(states.iter().map(|s| s[1]).collect())
        }
    }

    fn line(id: i64, xs: &[f64], height: f64) -> Trajectory {
        let states: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x, height]).collect();
        let n = xs.len() - 1;
        let actions: Vec<Vec<f64>> = xs.windows(2).map(|w| vec![w[1] - w[0]]).collect();
        trajectory_from_steps(id, &states, &actions, &vec![height; n], true)
    }

    fn models<'a>(shift: &'a Shift) -> StitchModels<'a> {
        StitchModels {
            dynamics: shift,
            inverse: &Diff,
            reward: &Height,
            value: &Height,
        }
    }

    #[test]
    fn acceptance_rule_examples() {
        assert!(!accepts(10.0, 10.9, 0.1));
        assert!(accepts(10.0, 11.1, 0.1));
        assert!(accepts(-10.0, -9.5, 0.1));
        assert!(!accepts(-10.0, 100.0, f64::INFINITY));
        let a = line(0, &[0.0, 1.0], 1.0);
        let b = line(0, &[0.0, 1.0], 2.0);
        assert_eq!(accept_or_reject(a.clone(), b.clone(), 0.1), b);
        assert_eq!(accept_or_reject(a.clone(), b, 1.5), a);
    }

    #[test]
    fn single_trajectory_without_candidates_is_unchanged() {
        let ds = Dataset::new(2, 1, vec![line(0, &[0.0, 1.0, 2.0, 3.0], 0.0)]).unwrap();
        let shift = Shift { step: 1.0, radius: 0.1 };
        let (out, events) = stitch_trajectory(&ds, 0, models(&shift), 0.01, None, &mut rng::stream(0, 0)).unwrap();
        assert!(events.is_empty());
        assert_eq!(out, ds.trajectories()[0]);
    }

    #[test]
    fn identical_trajectories_never_stitch() {
        let ds = Dataset::new(2, 1, vec![line(0, &[0.0, 1.0, 2.0], 0.5), line(1, &[0.0, 1.0, 2.0], 0.5)]).unwrap();
        let shift = Shift { step: 1.0, radius: 0.1 };
        for i in 0..2 {
            let (out, events) = stitch_trajectory(&ds, i, models(&shift), 0.5, None, &mut rng::stream(0, 0)).unwrap();
            assert!(events.is_empty());
            assert_eq!(out, ds.trajectories()[i]);
        }
    }

    #[test]
    fn jumps_to_higher_branch_and_follows_it() {
        // Trajectory 1 runs parallel to trajectory 0 at a higher value.
        let ds = Dataset::new(
            2,
            1,
            vec![line(0, &[0.0, 1.0, 2.0, 3.0], 0.0), line(1, &[5.0, 1.0, 2.0, 3.0, 4.0], 0.05)],
        )
        .unwrap();
        let shift = Shift { step: 1.0, radius: 0.1 };
        let (out, events) = stitch_trajectory(&ds, 0, models(&shift), 0.1, None, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].source, TrajStep { traj_id: 0, t: 0 });
        assert_eq!(events[0].candidate, TrajStep { traj_id: 1, t: 1 });
        assert!(events[0].margin > 0.0 && events[0].value_gain > 0.0);
        let xs: Vec<f64> = out.states().map(|s| s[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out.transitions[0].reward, 0.05);
        assert!(!out.transitions[0].done);
        assert!(out.transitions.last().unwrap().done);
        assert!(out.transitions.iter().enumerate().all(|(t, x)| x.t == t && x.traj_id == 0));
    }

    #[test]
    fn infinite_threshold_rejects_everything() {
        let ds = Dataset::new(
            2,
            1,
            vec![line(0, &[0.0, 1.0, 2.0, 3.0], -0.1), line(1, &[5.0, 1.0, 2.0, 3.0, 4.0], -0.05)],
        )
        .unwrap();
        let shift = Shift { step: 1.0, radius: 0.1 };
        let config = StitchConfig {
            accept_threshold: f64::INFINITY,
            ..StitchConfig::default()
        };
        let (out, report) = stitch_dataset(&ds, models(&shift), &config, 0.1, 1).unwrap();
        assert_eq!(out, ds);
        assert_eq!(report.proposed, 1);
        assert_eq!(report.accepted, 0);
        let loose = StitchConfig {
            accept_threshold: 0.1,
            ..config
        };
        let (out, report) = stitch_dataset(&ds, models(&shift), &loose, 0.1, 1).unwrap();
        assert_eq!(report.accepted, 1);
        assert_eq!(report.negative_sum_acceptances, 1);
        assert_eq!(out.trajectories().len(), 2);
    }

    #[test]
    fn stitch_limit_rejects_long_edits() {
        let ds = Dataset::new(
            2,
            1,
            vec![line(0, &[0.0, 1.0, 2.0, 3.0], 1.0), line(1, &[5.0, 1.0, 2.0, 3.0, 4.0], 1.05)],
        )
        .unwrap();
        let shift = Shift { step: 1.0, radius: 0.1 };
        let config = StitchConfig {
            max_stitches: Some(0),
            ..StitchConfig::default()
        };
        let (out, report) = stitch_dataset(&ds, models(&shift), &config, 0.1, 1).unwrap();
        assert_eq!(out, ds);
        assert_eq!(report.proposed, 1);
    }

    #[test]
    fn cyclic_candidates_terminate() {
        // Two interleaved trajectories whose states keep offering each other
        // as candidates; the walk must end and never repeat a position.
        let a = line(0, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 0.0);
        let b = line(1, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 0.0);
        let ds = Dataset::new(2, 1, vec![a, b]).unwrap();
        struct Alternating;
        impl StateValue for Alternating {
            fn values(&self, states: &[&[f64]]) -> Result<Vec<f64>> {
                Ok(states.iter().map(|s| s[0]).collect())
            }
        }
        let shift = Shift { step: 1.0, radius: 1.5 };
        let m = StitchModels {
            dynamics: &shift,
            inverse: &Diff,
            reward: &Height,
            value: &Alternating,
        };
        let (out, _) = stitch_trajectory(&ds, 0, m, 1.0, None, &mut rng::stream(0, 0)).unwrap();
        assert!(out.len() <= ds.num_transitions());
        assert_eq!(out.states().last().unwrap()[0], 5.0);
    }

    #[test]
    fn default_epsilon_scales_with_spread() {
        let ds = Dataset::new(2, 1, vec![line(0, &[0.0, 2.0], 0.0)]).unwrap();
        // States x in {0, 2} (std 1) and constant height (std floored to ~0).
        assert!((default_epsilon(&ds) - 0.05).abs() < 1e-6);
    }
}
