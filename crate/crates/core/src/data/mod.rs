//! Offline transition data: trajectories, the flat state index, persistence
//! and normalization statistics.

mod io;
mod neighbors;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, parse_dataset, save_dataset, to_jsonl};
pub(crate) use io::write_atomic;
pub use neighbors::{candidate_next_states, Candidate, CandidateSet, NeighborIndex, DEFAULT_CANDIDATE_CAP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub traj_id: i64,
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub traj_id: i64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// The state at position `step`, where `step == len()` is the final next state.
    pub fn state_at(&self, step: usize) -> &[f64] {
        if step == self.transitions.len() {
            &self.transitions[step - 1].next_state
        } else {
            &self.transitions[step].state
        }
    }

    /// Sequence of all `len() + 1` visited states.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.transitions
            .iter()
            .map(|t| t.state.as_slice())
            .chain(self.transitions.last().map(|t| t.next_state.as_slice()))
    }
}

/// Position of a state inside a dataset: trajectory index (not id) and step.
/// `step == trajectory.len()` addresses the final next state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StatePos {
    pub traj: usize,
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateRole {
    /// The state a transition starts from.
    Current,
    /// A trajectory's final next state, which starts no transition.
    Next,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub pos: StatePos,
    pub traj_id: i64,
    pub role: StateRole,
}

/// Every state occurrence of a dataset, stored contiguously.
///
/// Trajectory `i` contributes `len_i + 1` entries: its `len_i` transition
/// start states followed by its final next state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateIndex {
    dim: usize,
    states: Vec<f64>,
    entries: Vec<IndexEntry>,
    offsets: Vec<usize>,
}

impl StateIndex {
    fn build(trajectories: &[Trajectory], dim: usize) -> Self {
        let total: usize = trajectories.iter().map(|t| t.len() + 1).sum();
        let mut states = Vec::with_capacity(total * dim);
        let mut entries = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(trajectories.len());
        for (traj, tr) in trajectories.iter().enumerate() {
            offsets.push(entries.len());
            for (step, s) in tr.states().enumerate() {
                states.extend_from_slice(s);
                let role = if step == tr.len() {
                    StateRole::Next
                } else {
                    StateRole::Current
                };
                entries.push(IndexEntry {
                    pos: StatePos { traj, step },
                    traj_id: tr.traj_id,
                    role,
                });
            }
        }
        Self {
            dim,
            states,
            entries,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, pos: StatePos) -> usize {
        self.offsets[pos.traj] + pos.step
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// An immutable offline dataset. Construction validates every invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    d_s: usize,
    d_a: usize,
    trajectories: Vec<Trajectory>,
    index: StateIndex,
}

fn integrity(traj_id: i64, t: usize, message: impl Into<String>) -> Error {
    Error::Integrity {
        traj_id,
        t,
        message: message.into(),
    }
}

fn validate_trajectory(tr: &Trajectory, d_s: usize, d_a: usize) -> Result<()> {
    if tr.transitions.is_empty() {
        return Err(integrity(tr.traj_id, 0, "trajectory has no transitions"));
    }
    let n = tr.transitions.len();
    for (k, x) in tr.transitions.iter().enumerate() {
        if x.traj_id != tr.traj_id {
            return Err(integrity(tr.traj_id, k, format!("transition carries traj id {}", x.traj_id)));
        }
        if x.t != k {
            return Err(integrity(tr.traj_id, k, format!("expected step {k}, found {}", x.t)));
        }
        if x.state.len() != d_s || x.next_state.len() != d_s {
            return Err(integrity(tr.traj_id, k, format!("state dimension differs from d_s = {d_s}")));
        }
        if x.action.len() != d_a {
            return Err(integrity(tr.traj_id, k, format!("action dimension differs from d_a = {d_a}")));
        }
        let finite = x
            .state
            .iter()
            .chain(&x.action)
            .chain(&x.next_state)
            .chain(std::iter::once(&x.reward))
            .all(|v| v.is_finite());
        if !finite {
            return Err(integrity(tr.traj_id, k, "non-finite value"));
        }
        if x.done && k + 1 != n {
            return Err(integrity(tr.traj_id, k, "done set before the last transition"));
        }
        if k + 1 < n && x.next_state != tr.transitions[k + 1].state {
            return Err(integrity(
                tr.traj_id,
                k,
                "next_state does not match the following transition's state",
            ));
        }
    }
    Ok(())
}

impl Dataset {
    pub fn new(d_s: usize, d_a: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        if d_s == 0 || d_a == 0 {
            return Err(Error::config("d_s and d_a must be positive"));
        }
        let mut ids = std::collections::HashSet::with_capacity(trajectories.len());
        for tr in &trajectories {
            validate_trajectory(tr, d_s, d_a)?;
            if !ids.insert(tr.traj_id) {
                return Err(integrity(tr.traj_id, 0, "duplicate trajectory id"));
            }
        }
        let index = StateIndex::build(&trajectories, d_s);
        Ok(Self {
            d_s,
            d_a,
            trajectories,
            index,
        })
    }

    pub fn empty(d_s: usize, d_a: usize) -> Result<Self> {
        Self::new(d_s, d_a, Vec::new())
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn state_index(&self) -> &StateIndex {
        &self.index
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn state_at(&self, pos: StatePos) -> &[f64] {
        self.trajectories[pos.traj].state_at(pos.step)
    }

    pub fn traj_id(&self, traj: usize) -> i64 {
        self.trajectories[traj].traj_id
    }

    /// Sum of rewards over all trajectories.
    pub fn total_reward(&self) -> f64 {
        self.trajectories.iter().map(Trajectory::total_reward).sum()
    }
}

/// Per-dimension mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest standard deviation reported by [`NormStats`].
pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over `rows` (Welford's recurrence).
    pub fn from_rows<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::Dimension {
                    context: "normalization row",
                    expected: dim,
                    got: row.len(),
                });
            }
            n += 1;
            for d in 0..dim {
                let delta = row[d] - mean[d];
                mean[d] += delta / n as f64;
                m2[d] += delta * (row[d] - mean[d]);
            }
        }
        if n == 0 {
            return Err(Error::config("cannot compute statistics of an empty set"));
        }
        let std = m2
            .iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Rejects statistics loaded from disk that have the wrong width or a
    /// non-positive standard deviation.
    pub fn check(&self, dim: usize, context: &'static str) -> Result<()> {
        for len in [self.mean.len(), self.std.len()] {
            if len != dim {
                return Err(Error::Dimension {
                    context,
                    expected: dim,
                    got: len,
                });
            }
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config(format!("{context}: invalid normalization statistics")));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.std) {
            *o = (v - m) / s;
        }
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    /// `sum(log std)`: the log-Jacobian between raw and normalized densities.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

/// Mean and standard deviation of the transition start states.
pub fn normalization_stats(dataset: &Dataset) -> Result<NormStats> {
    if dataset.num_transitions() < 2 {
        return Err(Error::config(
            "normalization statistics need at least two transitions",
        ));
    }
    NormStats::from_rows(dataset.d_s(), dataset.transitions().map(|t| t.state.as_slice()))
}

/// Builds a trajectory from consecutive `(state, action, reward)` steps and a
/// final state. Handy for tests and generators.
pub fn trajectory_from_steps(
    traj_id: i64,
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    rewards: &[f64],
    terminal: bool,
) -> Trajectory {
    assert_eq!(states.len(), actions.len() + 1);
    assert_eq!(actions.len(), rewards.len());
    let n = actions.len();
    let transitions = (0..n)
        .map(|t| Transition {
            traj_id,
            t,
            state: states[t].clone(),
            action: actions[t].clone(),
            reward: rewards[t],
            next_state: states[t + 1].clone(),
            done: terminal && t + 1 == n,
        })
        .collect();
    Trajectory {
        traj_id,
        transitions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: i64, xs: &[f64]) -> Trajectory {
        let states: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
        let actions = vec![vec![0.0]; xs.len() - 1];
        let rewards = vec![1.0; xs.len() - 1];
        trajectory_from_steps(id, &states, &actions, &rewards, true)
    }

    #[test]
    fn index_covers_every_state_once() {
        let d = Dataset::new(1, 1, vec![line(0, &[0.0, 1.0, 2.0]), line(5, &[3.0, 4.0])]).unwrap();
        let idx = d.state_index();
        assert_eq!(idx.len(), 3 + 2);
        assert_eq!(idx.entries()[2].role, StateRole::Next);
        assert_eq!(idx.entries()[3].traj_id, 5);
        let all: Vec<f64> = (0..idx.len()).map(|i| idx.state(i)[0]).collect();
        assert_eq!(all, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(idx.index_of(StatePos { traj: 1, step: 1 }), 4);
    }

    #[test]
    fn continuity_violation_names_the_step() {
        let mut tr = line(3, &[0.0, 1.0, 2.0]);
        tr.transitions[0].next_state = vec![1.5];
        match Dataset::new(1, 1, vec![tr]) {
            Err(Error::Integrity { traj_id: 3, t: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn early_done_and_bad_steps_are_rejected() {
        let mut tr = line(0, &[0.0, 1.0, 2.0]);
        tr.transitions[0].done = true;
        assert!(Dataset::new(1, 1, vec![tr]).is_err());
        let mut tr = line(0, &[0.0, 1.0, 2.0]);
        tr.transitions[1].t = 5;
        assert!(Dataset::new(1, 1, vec![tr]).is_err());
        assert!(Dataset::new(1, 1, vec![line(0, &[0.0, 1.0]), line(0, &[2.0, 3.0])]).is_err());
    }

    #[test]
    fn stats_of_identical_states_hit_the_floor() {
        let d = Dataset::new(2, 1, vec![trajectory_from_steps(
            0,
            &vec![vec![3.0, -1.0]; 4],
            &vec![vec![0.0]; 3],
            &[0.0; 3],
            false,
        )])
        .unwrap();
        let s = normalization_stats(&d).unwrap();
        assert_eq!(s.mean, vec![3.0, -1.0]);
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn stats_of_two_points() {
        let d = Dataset::new(1, 1, vec![line(0, &[0.0, 2.0, 7.0])]).unwrap();
        let s = normalization_stats(&d).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let states: Vec<Vec<f64>> = (0..301)
            .map(|_| vec![rng.gen_range(-3.0..5.0), rng.gen_range(100.0..101.0)])
            .collect();
        let tr = trajectory_from_steps(0, &states, &vec![vec![0.0]; 300], &[0.0; 300], true);
        let d = Dataset::new(2, 1, vec![tr]).unwrap();
        let s = normalization_stats(&d).unwrap();
        for dim in 0..2 {
            let xs: Vec<f64> = states[..300].iter().map(|v| v[dim]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!((s.mean[dim] - mean).abs() < 1e-12 * mean.abs().max(1.0));
            assert!((s.std[dim] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_need_two_transitions() {
        let d = Dataset::new(1, 1, vec![line(0, &[0.0, 2.0])]).unwrap();
        assert!(normalization_stats(&d).is_err());
        assert!(normalization_stats(&Dataset::empty(1, 1).unwrap()).is_err());
    }
}
