//! Ensemble of Gaussian forward models `p(s' | s)`, used to decide whether a
//! candidate next state is reachable from a given state.
//!
//! Each member predicts the state change `s' - s` in a normalized delta space
//! and reports densities in normalized state space, so candidate and observed
//! next states are compared on the same scale.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, CheckpointMeta, Head, Matrix, Network, OptimizerState, LOG_STD_MAX, LOG_STD_MIN};
use crate::rng;
use crate::train::{ensure_finite, gather, require_nonempty, Batcher};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SPLIT_STREAM: u64 = 21;
const MEMBER_STREAM: u64 = 22;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a held-out improvement before a member stops.
    pub patience: usize,
    pub ensemble_size: usize,
    pub num_elites: usize,
    pub holdout_fraction: f64,
    /// Lower clamp on the predicted log standard deviation, in normalized
    /// state-change units. Raising it widens the set of states judged
    /// reachable when the true dynamics are (partly) deterministic.
    pub log_std_min: f64,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200, 200, 200],
            learning_rate: 3e-4,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            ensemble_size: 7,
            num_elites: 5,
            holdout_fraction: 0.1,
            log_std_min: LOG_STD_MIN,
            seed: 0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_elites == 0 || self.num_elites > self.ensemble_size {
            return Err(Error::config("dynamics: need 1 <= elites <= ensemble size"));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("dynamics: learning rate, batch size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("dynamics: holdout fraction must lie in [0, 1)"));
        }
        if !(self.log_std_min.is_finite() && self.log_std_min < LOG_STD_MAX) {
            return Err(Error::config("dynamics: log_std_min must be finite and below the upper clamp"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over normalized next states.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((x, m), ls) in x.iter().zip(&self.mean).zip(&self.log_std) {
            let z = (x - m) * (-ls).exp();
            acc += -0.5 * z * z - ls;
        }
        acc - 0.5 * LN_2PI * self.mean.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsMember {
    pub net: Network,
    pub holdout_nll: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsEnsemble {
    members: Vec<DynamicsMember>,
    elites: Vec<usize>,
    state_stats: NormStats,
    delta_stats: NormStats,
}

/// `logsumexp(xs) - ln(n)`: the log of the mean of `exp(xs)`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln() - (xs.len() as f64).ln()
}

/// `min_i cand[i] - log_mean_exp(obs)`; positive iff the least favourable
/// elite still finds the candidate likelier than the elites do on average
/// for the observed next state.
pub fn margin_from_log_densities(candidate: &[f64], observed: &[f64]) -> f64 {
    let min = candidate.iter().copied().fold(f64::INFINITY, f64::min);
    min - log_mean_exp(observed)
}

impl DynamicsEnsemble {
    pub fn new(
        members: Vec<DynamicsMember>,
        elites: Vec<usize>,
        state_stats: NormStats,
        delta_stats: NormStats,
    ) -> Result<Self> {
        let d = state_stats.dim();
        state_stats.check(d, "dynamics state statistics")?;
        delta_stats.check(d, "dynamics delta statistics")?;
        if members.is_empty() || elites.is_empty() {
            return Err(Error::config("dynamics: empty ensemble"));
        }
        let mut sorted = elites.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != elites.len() || sorted.iter().any(|&e| e >= members.len()) {
            return Err(Error::config("dynamics: elite indices must be distinct member indices"));
        }
        for m in &members {
            if m.net.input_dim() != d || m.net.output_dim() != 2 * d || !matches!(m.net.head(), Head::Gaussian { .. }) {
                return Err(Error::config(format!(
                    "dynamics: member must map {d} inputs to a Gaussian over {d} outputs"
                )));
            }
        }
        Ok(Self {
            members,
            elites,
            state_stats,
            delta_stats,
        })
    }

    pub fn members(&self) -> &[DynamicsMember] {
        &self.members
    }

    pub fn elites(&self) -> &[usize] {
        &self.elites
    }

    pub fn state_dim(&self) -> usize {
        self.state_stats.dim()
    }

    pub fn state_stats(&self) -> &NormStats {
        &self.state_stats
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() {
            return Err(Error::Dimension {
                context: "dynamics state",
                expected: self.state_dim(),
                got: s.len(),
            });
        }
        Ok(())
    }

    /// Predicted distribution of member `i` over the normalized next state.
    pub fn member_distribution(&self, i: usize, s: &[f64]) -> Result<DiagGaussian> {
        self.check_state(s)?;
        let net = &self.members.get(i).ok_or_else(|| Error::config("dynamics: no such member"))?.net;
        let ns = self.state_stats.normalize(s);
        let out = net.forward(&ns)?;
        let d = self.state_dim();
        let mut mean = Vec::with_capacity(d);
        let mut log_std = Vec::with_capacity(d);
        for k in 0..d {
            let (sd, dd) = (self.state_stats.std[k], self.delta_stats.std[k]);
            let delta = self.delta_stats.mean[k] + dd * out[k];
            mean.push(ns[k] + delta / sd);
            log_std.push(out[d + k] + dd.ln() - sd.ln());
        }
        Ok(DiagGaussian { mean, log_std })
    }

    /// Mean and standard deviation of member `i` in raw state units.
    pub fn predict_raw(&self, i: usize, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.member_distribution(i, s)?;
        let st = &self.state_stats;
        let mean = st.denormalize(&g.mean);
        let std = g.log_std.iter().zip(&st.std).map(|(ls, sd)| ls.exp() * sd).collect();
        Ok((mean, std))
    }

    pub fn elite_distributions(&self, s: &[f64]) -> Result<Vec<DiagGaussian>> {
        self.elites.iter().map(|&i| self.member_distribution(i, s)).collect()
    }

    /// Log-density of `s_next` under member `i` given `s`, in normalized
    /// state space.
    pub fn log_density(&self, i: usize, s: &[f64], s_next: &[f64]) -> Result<f64> {
        self.check_state(s_next)?;
        let g = self.member_distribution(i, s)?;
        Ok(g.log_density(&self.state_stats.normalize(s_next)))
    }

    /// Elite log-densities of several next states, sharing one forward pass
    /// per elite.
    pub fn elite_log_densities(&self, s: &[f64], next: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let dists = self.elite_distributions(s)?;
        next.iter()
            .map(|x| {
                self.check_state(x)?;
                let nx = self.state_stats.normalize(x);
                Ok(dists.iter().map(|g| g.log_density(&nx)).collect())
            })
            .collect()
    }

    pub fn reachability_margin(&self, s: &[f64], observed: &[f64], candidate: &[f64]) -> Result<f64> {
        let l = self.elite_log_densities(s, &[candidate, observed])?;
        Ok(margin_from_log_densities(&l[0], &l[1]))
    }

    /// True iff every elite assigns the candidate a higher density than the
    /// elites' mean density of the observed next state.
    pub fn reachability_check(&self, s: &[f64], observed: &[f64], candidate: &[f64]) -> Result<bool> {
        Ok(self.reachability_margin(s, observed, candidate)? > 0.0)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let file = format!("member_{i}.json");
            let meta = CheckpointMeta {
                seed: i as u64,
                steps: m.epochs as u64,
            };
            write_atomic(&dir.join(&file), m.net.to_checkpoint_json(meta)?.as_bytes())?;
            entries.push(ManifestMember {
                file,
                holdout_nll: m.holdout_nll,
                epochs: m.epochs,
            });
        }
        let manifest = Manifest {
            version: 1,
            state_dim: self.state_dim(),
            elites: self.elites.clone(),
            state_stats: self.state_stats.clone(),
            delta_stats: self.delta_stats.clone(),
            members: entries,
        };
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = parse_manifest(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut members = Vec::with_capacity(manifest.members.len());
        for m in &manifest.members {
            if m.file.contains(['/', '\\']) || m.file.starts_with('.') {
                return Err(Error::config(format!("dynamics: bad member file name {:?}", m.file)));
            }
            let (net, _) = Network::from_checkpoint_json(&std::fs::read_to_string(dir.join(&m.file))?)?;
            members.push(DynamicsMember {
                net,
                holdout_nll: m.holdout_nll,
                epochs: m.epochs,
            });
        }
        Self::new(members, manifest.elites, manifest.state_stats, manifest.delta_stats)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMember {
    pub file: String,
    pub holdout_nll: f64,
    pub epochs: usize,
}

/// Index file written next to the member checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub state_dim: usize,
    pub elites: Vec<usize>,
    pub state_stats: NormStats,
    pub delta_stats: NormStats,
    pub members: Vec<ManifestMember>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text)?;
    if m.version != 1 {
        return Err(Error::config(format!("dynamics manifest version {} unsupported", m.version)));
    }
    m.state_stats.check(m.state_dim, "manifest state statistics")?;
    m.delta_stats.check(m.state_dim, "manifest delta statistics")?;
    if m.members.is_empty() || m.elites.is_empty() || m.elites.iter().any(|&e| e >= m.members.len()) {
        return Err(Error::config("dynamics manifest: bad member or elite list"));
    }
    Ok(m)
}

/// Per-sample negative log-likelihood (including the constant) of targets
/// `y` under the Gaussian outputs `out`, plus the loss gradient w.r.t. `out`
/// scaled by `1 / rows`.
fn gaussian_nll(out: &Matrix, y: &Matrix) -> (f64, Matrix) {
    let d = y.cols();
    let n = y.rows();
    let mut grad = Matrix::zeros(n, 2 * d);
    let mut total = 0.0;
    for r in 0..n {
        let (o, t, g) = (out.row(r), y.row(r), grad.row_mut(r));
        for k in 0..d {
            let (mu, ls) = (o[k], o[d + k]);
            let inv_var = (-2.0 * ls).exp();
            let err = mu - t[k];
            total += 0.5 * err * err * inv_var + ls + 0.5 * LN_2PI;
            g[k] = err * inv_var / n as f64;
            g[d + k] = (1.0 - err * err * inv_var) / n as f64;
        }
    }
    (total / n as f64, grad)
}

fn mean_nll(net: &Network, x: &Matrix, y: &Matrix) -> Result<f64> {
    let out = net.predict_batch(x)?;
    Ok(gaussian_nll(&out, y).0)
}

struct Prepared {
    x: Matrix,
    y: Matrix,
    train: Vec<usize>,
    holdout: Vec<usize>,
}

fn train_member(i: usize, data: &Prepared, config: &DynamicsConfig) -> Result<DynamicsMember> {
    let d = data.x.cols();
    let mut rng = rng::stream(rng::mix(&[config.seed, i as u64]), MEMBER_STREAM);
    let mut sizes = vec![d];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(2 * d);
    let head = Head::Gaussian {
        log_std_min: config.log_std_min,
        log_std_max: LOG_STD_MAX,
    };
    let mut net = Network::new(&sizes, head, &mut rng)?;
    let mut opt = OptimizerState::new(&net, AdamConfig::with_lr(config.learning_rate));
    let (hx, hy) = (gather(&data.x, &data.holdout), gather(&data.y, &data.holdout));
    let mut best = net.clone();
    let mut best_nll = mean_nll(&net, &hx, &hy)?;
    let mut since_best = 0;
    let mut epochs = 0;
    let mut batcher = Batcher::new(data.train.clone());
    let mut step = 0;
    while epochs < config.max_epochs {
        let idx = batcher.next(config.batch_size, &mut rng);
        let (bx, by) = (gather(&data.x, idx), gather(&data.y, idx));
        let tape = net.forward_batch(&bx)?;
        let (loss, up) = gaussian_nll(tape.output(), &by);
        ensure_finite(loss, &format!("dynamics member {i}"), step)?;
        let grads = net.param_gradients(&tape, &up)?;
        opt.step(&mut net, &grads)
            .map_err(|e| Error::fault(format!("dynamics member {i}, step {step}: {e}")))?;
        step += 1;
        if batcher.epoch_finished() {
            epochs += 1;
            let nll = mean_nll(&net, &hx, &hy)?;
            ensure_finite(nll, &format!("dynamics member {i} held-out"), step)?;
            if nll < best_nll {
                best_nll = nll;
                best.copy_params_from(&net);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }
    log::debug!("dynamics member {i}: {epochs} epochs, held-out nll {best_nll:.4}");
    Ok(DynamicsMember {
        net: best,
        holdout_nll: best_nll,
        epochs,
    })
}

/// Trains the ensemble by maximum likelihood and keeps the members with the
/// lowest held-out negative log-likelihood as elites.
pub fn train_dynamics(dataset: &Dataset, config: &DynamicsConfig) -> Result<DynamicsEnsemble> {
    config.validate()?;
    let n = dataset.num_transitions();
    require_nonempty(n, "dynamics")?;
    let d = dataset.d_s();
    let states: Vec<&[f64]> = dataset.transitions().map(|t| t.state.as_slice()).collect();
    let deltas: Vec<Vec<f64>> = dataset
        .transitions()
        .map(|t| t.next_state.iter().zip(&t.state).map(|(b, a)| b - a).collect())
        .collect();
    let state_stats = NormStats::from_rows(d, states.iter().copied())?;
    let delta_stats = NormStats::from_rows(d, deltas.iter().map(|v| v.as_slice()))?;
    let mut x = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    for r in 0..n {
        state_stats.normalize_into(states[r], x.row_mut(r));
        delta_stats.normalize_into(&deltas[r], y.row_mut(r));
    }

    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(config.seed, SPLIT_STREAM));
    let n_hold = if n < 2 {
        0
    } else {
        ((n as f64 * config.holdout_fraction).round() as usize).clamp(1, n - 1)
    };
    let holdout = order[..n_hold].to_vec();
    let train = order[n_hold..].to_vec();
    let data = Prepared {
        x,
        y,
        holdout: if holdout.is_empty() { train.clone() } else { holdout },
        train,
    };

    let members = (0..config.ensemble_size)
        .into_par_iter()
        .map(|i| train_member(i, &data, config))
        .collect::<Result<Vec<_>>>()?;
    let mut ranked: Vec<usize> = (0..members.len()).collect();
    ranked.sort_by(|&a, &b| members[a].holdout_nll.total_cmp(&members[b].holdout_nll).then(a.cmp(&b)));
    let mut elites = ranked[..config.num_elites].to_vec();
    elites.sort_unstable();
    DynamicsEnsemble::new(members, elites, state_stats, delta_stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{trajectory_from_steps, Trajectory};
    use proptest::prelude::*;
    use rand::Rng;

    fn ensemble_of(nets: Vec<Network>, d: usize) -> DynamicsEnsemble {
        let n = nets.len();
        let members = nets
            .into_iter()
            .map(|net| DynamicsMember {
                net,
                holdout_nll: 0.0,
                epochs: 0,
            })
            .collect();
        DynamicsEnsemble::new(members, (0..n).collect(), NormStats::identity(d), NormStats::identity(d)).unwrap()
    }

    fn gaussian_net(d: usize, mean_bias: &[f64], log_std_bias: &[f64]) -> Network {
        let mut net = Network::zeros(&[d, 2 * d], Head::gaussian()).unwrap();
        let b = &mut net.biases_mut()[0];
        b[..d].copy_from_slice(mean_bias);
        b[d..].copy_from_slice(log_std_bias);
        net
    }

    fn pdf(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
        x.iter()
            .zip(mean)
            .zip(std)
            .map(|((x, m), s)| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()))
            .product()
    }

    #[test]
    fn log_density_closed_forms() {
        // Zero-weight member with zero biases predicts mean s and unit std.
        let e = ensemble_of(vec![gaussian_net(2, &[0.0, 0.0], &[0.0, 0.0])], 2);
        let s = [0.3, -0.2];
        assert!((e.log_density(0, &s, &s).unwrap() + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let off = [1.3, -0.2];
        let want = -(2.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((e.log_density(0, &s, &off).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn log_density_matches_pdf_oracle() {
        let mut r = rng::stream(5, 0);
        let net = Network::new(&[3, 8, 6], Head::gaussian(), &mut r).unwrap();
        let stats = NormStats {
            mean: vec![0.5, -1.0, 2.0],
            std: vec![0.5, 2.0, 1.5],
        };
        let dstats = NormStats {
            mean: vec![0.1, 0.0, -0.2],
            std: vec![0.3, 0.7, 1.1],
        };
        let member = DynamicsMember {
            net: net.clone(),
            holdout_nll: 0.0,
            epochs: 0,
        };
        let e = DynamicsEnsemble::new(vec![member], vec![0], stats.clone(), dstats.clone()).unwrap();
        for _ in 0..20 {
            let s: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
            // Independent route: raw-space Gaussian, then change of variables.
            let out = net.forward(&stats.normalize(&s)).unwrap();
            let mean: Vec<f64> = (0..3).map(|k| s[k] + dstats.mean[k] + dstats.std[k] * out[k]).collect();
            let std: Vec<f64> = (0..3).map(|k| dstats.std[k] * out[3 + k].exp()).collect();
            let raw = pdf(&x, &mean, &std).ln();
            let want = raw + stats.std.iter().map(|v| v.ln()).sum::<f64>();
            let got = e.log_density(0, &s, &x).unwrap();
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn observed_state_is_never_reachable_against_itself() {
        let e = ensemble_of(
            vec![
                gaussian_net(1, &[0.0], &[0.0]),
                gaussian_net(1, &[0.5], &[0.0]),
                gaussian_net(1, &[-0.2], &[0.3]),
            ],
            1,
        );
        assert!(!e.reachability_check(&[0.0], &[0.4], &[0.4]).unwrap());
    }

    #[test]
    fn identical_elites_compare_single_model() {
        let nets = vec![gaussian_net(1, &[0.0], &[0.0]); 5];
        let e = ensemble_of(nets, 1);
        assert!(e.reachability_check(&[0.0], &[1.0], &[0.5]).unwrap());
        assert!(!e.reachability_check(&[0.0], &[0.5], &[1.0]).unwrap());
        assert!(!e.reachability_check(&[0.0], &[0.5], &[-0.5]).unwrap());
    }

    #[test]
    fn log_domain_agrees_with_density_oracle() {
        let mut r = rng::stream(9, 0);
        let nets: Vec<Network> = (0..5)
            .map(|_| {
                let m: Vec<f64> = (0..2).map(|_| r.gen_range(-0.5..0.5)).collect();
                let l: Vec<f64> = (0..2).map(|_| r.gen_range(-0.7..0.3)).collect();
                gaussian_net(2, &m, &l)
            })
            .collect();
        let e = ensemble_of(nets, 2);
        for _ in 0..1000 {
            let s: Vec<f64> = (0..2).map(|_| r.gen_range(-1.0..1.0)).collect();
            let obs: Vec<f64> = (0..2).map(|_| r.gen_range(-2.0..2.0)).collect();
            let cand: Vec<f64> = (0..2).map(|_| r.gen_range(-2.0..2.0)).collect();
            let mut pc = Vec::new();
            let mut po = Vec::new();
            for i in 0..5 {
                let g = e.member_distribution(i, &s).unwrap();
                let std: Vec<f64> = g.log_std.iter().map(|l| l.exp()).collect();
                pc.push(pdf(&cand, &g.mean, &std));
                po.push(pdf(&obs, &g.mean, &std));
            }
            let min = pc.iter().copied().fold(f64::INFINITY, f64::min);
            let mean = po.iter().sum::<f64>() / 5.0;
            if (min - mean).abs() > 1e-12 * mean.max(min) {
                assert_eq!(e.reachability_check(&s, &obs, &cand).unwrap(), min > mean);
            }
        }
    }

    fn chain_dataset(n_traj: usize, len: usize, noise: f64, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, 0);
        let trajs: Vec<Trajectory> = (0..n_traj)
            .map(|i| {
                let mut states = vec![vec![r.gen_range(-1.0..1.0)]];
                for _ in 0..len {
                    let last = states.last().unwrap()[0];
                    states.push(vec![last + noise * rng::normal(&mut r)]);
                }
                trajectory_from_steps(i as i64, &states, &vec![vec![0.0]; len], &vec![0.0; len], false)
            })
            .collect();
        Dataset::new(1, 1, trajs).unwrap()
    }

    fn small_config() -> DynamicsConfig {
        DynamicsConfig {
            hidden: vec![32, 32],
            learning_rate: 3e-3,
            max_epochs: 30,
            batch_size: 64,
            ..DynamicsConfig::default()
        }
    }

    #[test]
    fn identity_system_is_recovered() {
        let ds = chain_dataset(40, 10, 0.0, 1);
        let e = train_dynamics(&ds, &small_config()).unwrap();
        assert_eq!(e.members().len(), 7);
        assert_eq!(e.elites().len(), 5);
        for &s in &[-0.9, -0.3, 0.0, 0.4, 0.8] {
            for i in 0..7 {
                let (mean, std) = e.predict_raw(i, &[s]).unwrap();
                assert!((mean[0] - s).abs() < 0.01);
                assert!(std[0] < 1e-3);
            }
        }
    }

    #[test]
    fn noise_level_is_recovered() {
        let ds = chain_dataset(100, 20, 0.1, 2);
        let e = train_dynamics(&ds, &small_config()).unwrap();
        for &s in &[-0.5, 0.0, 0.5] {
            let (_, std) = e.predict_raw(e.elites()[0], &[s]).unwrap();
            assert!((0.05..=0.2).contains(&std[0]), "std {}", std[0]);
        }
    }

    #[test]
    fn defaults_and_determinism() {
        let c = DynamicsConfig::default();
        assert_eq!((c.learning_rate, c.batch_size), (3e-4, 256));
        let ds = chain_dataset(10, 5, 0.1, 3);
        let cfg = DynamicsConfig {
            max_epochs: 3,
            ..small_config()
        };
        assert_eq!(train_dynamics(&ds, &cfg).unwrap(), train_dynamics(&ds, &cfg).unwrap());
        assert!(train_dynamics(&Dataset::empty(1, 1).unwrap(), &cfg).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let ds = chain_dataset(10, 5, 0.1, 4);
        let cfg = DynamicsConfig {
            max_epochs: 2,
            ..small_config()
        };
        let e = train_dynamics(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path()).unwrap();
        assert_eq!(DynamicsEnsemble::load(dir.path()).unwrap(), e);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(parse_manifest(&text.replace("\"version\": 1", "\"version\": 2")).is_err());
    }

    proptest! {
        #[test]
        fn self_comparison_fails_when_elites_disagree(
            m in proptest::collection::vec(-1.0f64..1.0, 3),
            x in -2.0f64..2.0,
        ) {
            let nets = m.iter().map(|b| gaussian_net(1, &[*b], &[0.0])).collect();
            let e = ensemble_of(nets, 1);
            prop_assert!(!e.reachability_check(&[0.0], &[x], &[x]).unwrap());
        }
    }
}
