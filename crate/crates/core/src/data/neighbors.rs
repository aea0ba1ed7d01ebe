//! ε-ball candidate search over the state index.
//!
//! For a transition `(s, s')` at position `(i, t) -> (i, t+1)` the candidate
//! next states are
//!
//! * the successor of every state `u` with `|u - s| <= ε`, and
//! * every state `v` with `|v - s'| <= ε`,
//!
//! minus the observed next state itself. Results are exact; a uniform grid
//! with cell size ε only prunes the scan.

use std::collections::HashMap;

use super::{Dataset, StatePos, StateRole};
use crate::error::{Error, Result};

/// Candidates kept per query unless configured otherwise.
pub const DEFAULT_CANDIDATE_CAP: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub pos: StatePos,
    pub traj_id: i64,
    pub state: Vec<f64>,
    /// Distance that admitted the candidate: `|u - s|` for successors of
    /// neighbours of `s`, `|v - s'|` for neighbours of `s'` (minimum if both).
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    /// Number of distinct candidates before the cap was applied.
    pub uncapped_len: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = StatePos> + '_ {
        self.entries.iter().map(|c| c.pos)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Uniform grid keyed by `floor(x / cell)` per dimension.
#[derive(Debug)]
struct Grid {
    cell: f64,
    cells: HashMap<Vec<i64>, Vec<u32>>,
}

impl Grid {
    fn key(&self, x: &[f64]) -> Vec<i64> {
        x.iter().map(|v| (v / self.cell).floor() as i64).collect()
    }
}

/// Reusable neighbourhood index for one dataset and radius.
#[derive(Debug)]
pub struct NeighborIndex<'a> {
    dataset: &'a Dataset,
    epsilon: f64,
    grid: Option<Grid>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(dataset: &'a Dataset, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || epsilon.is_infinite() {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        let index = dataset.state_index();
        let dim = dataset.d_s();
        // The grid visits 3^d cells per query; beyond that a scan is cheaper.
        let probes = 3f64.powi(dim as i32);
        let grid = (epsilon > 0.0 && probes < index.len() as f64).then(|| {
            // Slightly enlarged cells keep every true neighbour within ±1 cell
            // despite rounding in the division.
            let mut grid = Grid {
                cell: epsilon * (1.0 + 1e-9),
                cells: HashMap::new(),
            };
            for i in 0..index.len() {
                let k = grid.key(index.state(i));
                grid.cells.entry(k).or_default().push(i as u32);
            }
            grid
        });
        Ok(Self {
            dataset,
            epsilon,
            grid,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    /// Calls `f(index_entry, distance)` for every indexed state within ε of `x`.
    fn for_each_within(&self, x: &[f64], mut f: impl FnMut(usize, f64)) {
        let index = self.dataset.state_index();
        let mut visit = |i: usize| {
            let d = euclidean(index.state(i), x);
            if d <= self.epsilon {
                f(i, d);
            }
        };
        match &self.grid {
            None => (0..index.len()).for_each(&mut visit),
            Some(grid) => {
                let centre = grid.key(x);
                let dim = centre.len();
                let mut offset = vec![-1i64; dim];
                let mut key = vec![0i64; dim];
                loop {
                    for d in 0..dim {
                        key[d] = centre[d] + offset[d];
                    }
                    if let Some(bucket) = grid.cells.get(&key) {
                        bucket.iter().for_each(|&i| visit(i as usize));
                    }
                    // Odometer over {-1, 0, 1}^dim.
                    let mut d = 0;
                    while d < dim && offset[d] == 1 {
                        offset[d] = -1;
                        d += 1;
                    }
                    if d == dim {
                        break;
                    }
                    offset[d] += 1;
                }
            }
        }
    }

    /// Candidate next states for the transition starting at position
    /// `(traj, t)`. `cap` keeps the nearest entries, ties broken by position.
    pub fn candidates(&self, traj: usize, t: usize, cap: Option<usize>) -> Result<CandidateSet> {
        let tr = self
            .dataset
            .trajectories()
            .get(traj)
            .ok_or_else(|| Error::config(format!("no trajectory at index {traj}")))?;
        if t >= tr.len() {
            return Err(Error::config(format!(
                "trajectory {} has no transition at step {t}",
                tr.traj_id
            )));
        }
        let s = &tr.transitions[t].state;
        let s2 = &tr.transitions[t].next_state;
        let observed = StatePos { traj, step: t + 1 };
        let index = self.dataset.state_index();

        let mut best: HashMap<StatePos, f64> = HashMap::new();
        let mut offer = |pos: StatePos, d: f64| {
            if pos != observed {
                best.entry(pos)
                    .and_modify(|v| *v = v.min(d))
                    .or_insert(d);
            }
        };
        self.for_each_within(s, |i, d| {
            let e = index.entries()[i];
            if e.role == StateRole::Current {
                offer(
                    StatePos {
                        traj: e.pos.traj,
                        step: e.pos.step + 1,
                    },
                    d,
                );
            }
        });
        self.for_each_within(s2, |i, d| offer(index.entries()[i].pos, d));

        let mut ranked: Vec<(StatePos, f64)> = best.into_iter().collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let uncapped_len = ranked.len();
        if let Some(k) = cap {
            ranked.truncate(k);
        }
        let entries = ranked
            .into_iter()
            .map(|(pos, distance)| Candidate {
                pos,
                traj_id: self.dataset.traj_id(pos.traj),
                state: self.dataset.state_at(pos).to_vec(),
                distance,
            })
            .collect();
        Ok(CandidateSet {
            entries,
            uncapped_len,
        })
    }
}

/// One-off candidate query; build a [`NeighborIndex`] for repeated queries.
pub fn candidate_next_states(
    dataset: &Dataset,
    traj: usize,
    t: usize,
    epsilon: f64,
    cap: Option<usize>,
) -> Result<CandidateSet> {
    NeighborIndex::new(dataset, epsilon)?.candidates(traj, t, cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::trajectory_from_steps;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn random_dataset(seed: u64, trajs: usize, len: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajectories = (0..trajs)
            .map(|i| {
                let states: Vec<Vec<f64>> = (0..=len)
                    .map(|_| vec![rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)])
                    .collect();
                trajectory_from_steps(i as i64, &states, &vec![vec![0.0]; len], &vec![0.0; len], true)
            })
            .collect();
        Dataset::new(2, 1, trajectories).unwrap()
    }

    /// Double loop over every (trajectory, step) pair.
    fn brute_force(d: &Dataset, traj: usize, t: usize, eps: f64) -> BTreeSet<StatePos> {
        let s = d.trajectories()[traj].transitions[t].state.clone();
        let s2 = d.trajectories()[traj].transitions[t].next_state.clone();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            let mut acc = 0.0;
            for k in 0..a.len() {
                acc += (a[k] - b[k]).powi(2);
            }
            acc.sqrt()
        };
        let mut out = BTreeSet::new();
        for (j, tr) in d.trajectories().iter().enumerate() {
            for m in 0..=tr.len() {
                let u = tr.state_at(m);
                if m < tr.len() && dist(u, &s) <= eps {
                    out.insert(StatePos { traj: j, step: m + 1 });
                }
                if dist(u, &s2) <= eps {
                    out.insert(StatePos { traj: j, step: m });
                }
            }
        }
        out.remove(&StatePos { traj, step: t + 1 });
        out
    }

    #[test]
    fn zero_radius_without_duplicates_is_empty() {
        let d = random_dataset(1, 5, 10);
        let c = candidate_next_states(&d, 2, 3, 0.0, None).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn twin_trajectories_at_zero_radius() {
        let states: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.5]).collect();
        let a = trajectory_from_steps(0, &states, &vec![vec![0.0]; 4], &[0.0; 4], true);
        let b = trajectory_from_steps(1, &states, &vec![vec![0.0]; 4], &[0.0; 4], true);
        let d = Dataset::new(2, 1, vec![a, b]).unwrap();
        let c = candidate_next_states(&d, 0, 1, 0.0, None).unwrap();
        // The twin's successor of s and its copy of s' are the same position.
        let got: Vec<StatePos> = c.positions().collect();
        assert_eq!(got, vec![StatePos { traj: 1, step: 2 }]);
        assert_eq!(c.entries[0].state, vec![2.0, 0.5]);
    }

    #[test]
    fn grid_matches_brute_force() {
        let d = random_dataset(7, 40, 30);
        let idx = NeighborIndex::new(&d, 0.5).unwrap();
        assert!(idx.grid.is_some());
        for (traj, t) in [(0, 0), (3, 12), (39, 29), (17, 5)] {
            let got: BTreeSet<StatePos> = idx.candidates(traj, t, None).unwrap().positions().collect();
            assert_eq!(got, brute_force(&d, traj, t, 0.5));
        }
    }

    #[test]
    fn cap_keeps_the_nearest() {
        let d = random_dataset(3, 30, 20);
        let all = candidate_next_states(&d, 4, 4, 0.8, None).unwrap();
        let capped = candidate_next_states(&d, 4, 4, 0.8, Some(5)).unwrap();
        assert_eq!(capped.len(), 5);
        assert_eq!(capped.uncapped_len, all.len());
        assert_eq!(capped.entries[..], all.entries[..5]);
        assert!(all.entries.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn invalid_queries() {
        let d = random_dataset(3, 2, 3);
        assert!(candidate_next_states(&d, 0, 3, 0.1, None).is_err());
        assert!(candidate_next_states(&d, 5, 0, 0.1, None).is_err());
        assert!(NeighborIndex::new(&d, -1.0).is_err());
        assert!(NeighborIndex::new(&d, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn radius_monotonicity(seed in 0u64..1000, e1 in 0.0..0.6f64, extra in 0.0..0.6f64, traj in 0usize..6, t in 0usize..8) {
            let d = random_dataset(seed, 6, 8);
            let small: BTreeSet<StatePos> = candidate_next_states(&d, traj, t, e1, None).unwrap().positions().collect();
            let large: BTreeSet<StatePos> = candidate_next_states(&d, traj, t, e1 + extra, None).unwrap().positions().collect();
            prop_assert!(small.is_subset(&large));
            for c in candidate_next_states(&d, traj, t, e1 + extra, None).unwrap().entries {
                // Only dataset states are ever proposed.
                prop_assert_eq!(d.state_at(c.pos), c.state.as_slice());
            }
        }

        #[test]
        fn grid_and_scan_agree(seed in 0u64..1000, eps in 0.01..1.0f64) {
            let d = random_dataset(seed, 12, 10);
            let got: BTreeSet<StatePos> = candidate_next_states(&d, 5, 4, eps, None).unwrap().positions().collect();
            prop_assert_eq!(got, brute_force(&d, 5, 4, eps));
        }
    }
}
