//! Behavioural cloning: deterministic, Gaussian and value-weighted variants.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats};
use crate::env::{diag_gaussian_log_prob, Controller, GaussianPolicy};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, CheckpointMeta, Head, Matrix, Network, NetworkCheckpoint, OptimizerState};
use crate::rng;
use crate::stitch::StateValue;
use crate::train::{ensure_finite, gather, require_nonempty, Batcher};

const TRAIN_STREAM: u64 = 61;
/// Shift added after subtracting the minimum value from weighted-BC weights.
pub const WEIGHT_SHIFT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Deterministic,
    Gaussian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    #[default]
    Mean,
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    kind: PolicyKind,
    net: Network,
    action_bounds: Vec<f64>,
    state_stats: NormStats,
}

impl Policy {
    pub fn new(kind: PolicyKind, net: Network, action_bounds: Vec<f64>, state_stats: NormStats) -> Result<Self> {
        let d_s = state_stats.dim();
        let d_a = action_bounds.len();
        state_stats.check(d_s, "policy state statistics")?;
        if action_bounds.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::config("policy: action bounds must be positive"));
        }
        let ok = net.input_dim() == d_s
            && match kind {
                PolicyKind::Deterministic => {
                    net.output_dim() == d_a && *net.head() == Head::TanhScaled { scale: action_bounds.clone() }
                }
                PolicyKind::Gaussian => net.output_dim() == 2 * d_a && matches!(net.head(), Head::Gaussian { .. }),
            };
        if !ok {
            return Err(Error::config("policy: network shape or head does not match the policy kind"));
        }
        Ok(Self {
            kind,
            net,
            action_bounds,
            state_stats,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn action_bounds(&self) -> &[f64] {
        &self.action_bounds
    }

    fn raw(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.state_stats.dim() {
            return Err(Error::Dimension {
                context: "policy state",
                expected: self.state_stats.dim(),
                got: s.len(),
            });
        }
        self.net.forward(&self.state_stats.normalize(s))
    }

    /// Mean and standard deviation of a Gaussian policy.
    pub fn distribution(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.kind != PolicyKind::Gaussian {
            return Err(Error::config("policy: a deterministic policy has no action distribution"));
        }
        let out = self.raw(s)?;
        let d = self.action_bounds.len();
        Ok((out[..d].to_vec(), out[d..].iter().map(|l| l.exp()).collect()))
    }

    pub fn act(&self, s: &[f64], mode: ActMode, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        match (self.kind, mode) {
            (PolicyKind::Deterministic, _) => self.raw(s),
            (PolicyKind::Gaussian, ActMode::Mean) => Ok(self.distribution(s)?.0),
            (PolicyKind::Gaussian, ActMode::Sample) => {
                let (mean, std) = self.distribution(s)?;
                Ok(mean
                    .iter()
                    .zip(&std)
                    .zip(&self.action_bounds)
                    .map(|((m, sd), b)| (m + sd * rng::normal(rng)).clamp(-b, *b))
                    .collect())
            }
        }
    }

    /// Deterministic action: the output of a deterministic policy or the mean
    /// of a Gaussian one.
    pub fn mean_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            PolicyKind::Deterministic => self.raw(s),
            PolicyKind::Gaussian => Ok(self.distribution(s)?.0),
        }
    }

    pub fn to_json(&self, meta: CheckpointMeta) -> Result<String> {
        let c = PolicyCheckpoint {
            kind: self.kind,
            net: NetworkCheckpoint::from_network(&self.net, meta),
            action_bounds: self.action_bounds.clone(),
            state_stats: self.state_stats.clone(),
        };
        Ok(serde_json::to_string(&c)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: PolicyCheckpoint = serde_json::from_str(text)?;
        Self::new(c.kind, c.net.to_network()?, c.action_bounds, c.state_stats)
    }
}

/// Acts with the mean action; panics on a dimension mismatch, which the
/// environment rules out.
impl Controller for Policy {
    fn action(&self, s: &[f64], _: &mut dyn RngCore) -> Vec<f64> {
        self.mean_action(s).expect("policy and environment dimensions agree")
    }
}

/// A Gaussian policy viewed through the evaluation interface.
pub struct GaussianView<'a>(&'a Policy);

impl Policy {
    pub fn as_gaussian(&self) -> Result<GaussianView<'_>> {
        match self.kind {
            PolicyKind::Gaussian => Ok(GaussianView(self)),
            PolicyKind::Deterministic => Err(Error::config("policy: not a Gaussian policy")),
        }
    }
}

impl GaussianPolicy for GaussianView<'_> {
    fn distribution(&self, s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.0.distribution(s).expect("policy and environment dimensions agree")
    }

    fn log_prob(&self, s: &[f64], a: &[f64]) -> f64 {
        let out = self.0.raw(s).expect("policy and environment dimensions agree");
        let d = a.len();
        // Uses log std directly so tiny deviations stay finite.
        let mut acc = 0.0;
        for j in 0..d {
            let (m, ls) = (out[j], out[d + j]);
            let z = (a[j] - m) * (-ls).exp();
            acc += -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub kind: PolicyKind,
    pub net: NetworkCheckpoint,
    pub action_bounds: Vec<f64>,
    pub state_stats: NormStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Adam's denominator constant. Scaling the loss by `c` is equivalent to
    /// scaling this by `1 / c`.
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_start: usize,
    pub checkpoint_every: usize,
    /// Per-dimension action bounds; `None` uses the largest absolute action
    /// in the data.
    pub action_bounds: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            learning_rate: 1e-3,
            adam_eps: 1e-8,
            batch_size: 256,
            steps: 100_000,
            checkpoint_start: 40_000,
            checkpoint_every: 10_000,
            action_bounds: None,
            seed: 0,
        }
    }
}

impl BcConfig {
    /// Shorter schedule for toy environments: 30k steps, checkpoints from 10k.
    pub fn desk() -> Self {
        Self {
            steps: 30_000,
            checkpoint_start: 10_000,
            ..Self::default()
        }
    }

    /// Steps at which checkpoints are taken; always includes the final step.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut v = Vec::new();
        if self.checkpoint_every > 0 {
            let mut s = self.checkpoint_start.max(1);
            while s <= self.steps {
                v.push(s);
                s += self.checkpoint_every;
            }
        }
        if v.last() != Some(&self.steps) && self.steps > 0 {
            v.push(self.steps);
        }
        v
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("bc: learning rate, batch size and steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    /// Mean training loss over the whole dataset at this checkpoint.
    pub train_loss: f64,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BcTrainLog {
    pub checkpoints: Vec<CheckpointRecord>,
    pub selected_step: usize,
    /// Set when the evaluator failed and the final checkpoint was kept.
    pub fallback: bool,
}

/// Scores a candidate policy; higher is better.
pub type Evaluator<'a> = dyn Fn(&Policy) -> Result<f64> + Sync + 'a;

fn data_bounds(dataset: &Dataset) -> Vec<f64> {
    let mut b = vec![0.0f64; dataset.d_a()];
    for t in dataset.transitions() {
        for (m, a) in b.iter_mut().zip(&t.action) {
            *m = m.max(a.abs());
        }
    }
    b.into_iter().map(|v| v.max(1e-6)).collect()
}

struct Fit<'a> {
    kind: PolicyKind,
    dataset: &'a Dataset,
    weights: Option<Vec<f64>>,
}

/// Loss of the whole batch and its gradient w.r.t. network outputs.
fn batch_loss(kind: PolicyKind, out: &Matrix, target: &Matrix, w: Option<&[f64]>) -> (f64, Matrix) {
    let (b, d) = (target.rows(), target.cols());
    let mut grad = Matrix::zeros(b, out.cols());
    let mut total = 0.0;
    for r in 0..b {
        let wr = w.map_or(1.0, |w| w[r]);
        let (o, t, g) = (out.row(r), target.row(r), grad.row_mut(r));
        for j in 0..d {
            match kind {
                PolicyKind::Deterministic => {
                    let err = o[j] - t[j];
                    total += wr * err * err;
                    g[j] = 2.0 * wr * err / b as f64;
                }
                PolicyKind::Gaussian => {
                    let (mu, ls) = (o[j], o[d + j]);
                    let inv_var = (-2.0 * ls).exp();
                    let err = mu - t[j];
                    total += wr * (0.5 * err * err * inv_var + ls);
                    g[j] = wr * err * inv_var / b as f64;
                    g[d + j] = wr * (1.0 - err * err * inv_var) / b as f64;
                }
            }
        }
    }
    (total / b as f64, grad)
}

fn fit(job: Fit<'_>, config: &BcConfig, evaluator: Option<&Evaluator<'_>>) -> Result<(Policy, BcTrainLog)> {
    config.validate()?;
    let ds = job.dataset;
    let n = ds.num_transitions();
    require_nonempty(n, "bc")?;
    let (d_s, d_a) = (ds.d_s(), ds.d_a());
    let bounds = match &config.action_bounds {
        Some(b) if b.len() != d_a => {
            return Err(Error::Dimension {
                context: "action bounds",
                expected: d_a,
                got: b.len(),
            })
        }
        Some(b) => b.clone(),
        None => data_bounds(ds),
    };
    let stats = NormStats::from_rows(d_s, ds.transitions().map(|t| t.state.as_slice()))?;
    let mut x = Matrix::zeros(n, d_s);
    let mut y = Matrix::zeros(n, d_a);
    for (i, t) in ds.transitions().enumerate() {
        stats.normalize_into(&t.state, x.row_mut(i));
        y.row_mut(i).copy_from_slice(&t.action);
    }

    let mut rng = rng::stream(config.seed, TRAIN_STREAM);
    let (head, out) = match job.kind {
        PolicyKind::Deterministic => (Head::TanhScaled { scale: bounds.clone() }, d_a),
        PolicyKind::Gaussian => (Head::gaussian(), 2 * d_a),
    };
    let mut sizes = vec![d_s];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(out);
    let net = Network::new(&sizes, head, &mut rng)?;
    let mut policy = Policy::new(job.kind, net, bounds, stats)?;
    let adam = AdamConfig {
        eps: config.adam_eps,
        ..AdamConfig::with_lr(config.learning_rate)
    };
    let mut opt = OptimizerState::new(&policy.net, adam);
    let mut batcher = Batcher::new((0..n).collect());
    let schedule = config.checkpoint_steps();
    let mut next_ckpt = 0;
    let mut log = BcTrainLog::default();
    let mut snapshots: Vec<Network> = Vec::new();
    let weights = job.weights.as_deref();

    for step in 1..=config.steps {
        let idx = batcher.next(config.batch_size, &mut rng);
        let bx = gather(&x, idx);
        let by = gather(&y, idx);
        let bw: Option<Vec<f64>> = weights.map(|w| idx.iter().map(|&i| w[i]).collect());
        let tape = policy.net.forward_batch(&bx)?;
        let (loss, up) = batch_loss(job.kind, tape.output(), &by, bw.as_deref());
        ensure_finite(loss, "bc", step)?;
        let grads = policy.net.param_gradients(&tape, &up)?;
        opt.step(&mut policy.net, &grads)?;
        if next_ckpt < schedule.len() && step == schedule[next_ckpt] {
            next_ckpt += 1;
            let full = policy.net.predict_batch(&x)?;
            let (train_loss, _) = batch_loss(job.kind, &full, &y, weights);
            log.checkpoints.push(CheckpointRecord {
                step,
                train_loss,
                score: None,
            });
            snapshots.push(policy.net.clone());
        }
    }

    let last = snapshots.len() - 1;
    let mut chosen = last;
    if let Some(eval) = evaluator {
        let mut scores = Vec::with_capacity(snapshots.len());
        let mut failed = None;
        for net in &snapshots {
            let candidate = Policy {
                net: net.clone(),
                ..policy.clone()
            };
            match eval(&candidate) {
                Ok(s) if s.is_finite() => scores.push(s),
                Ok(s) => {
                    failed = Some(format!("non-finite score {s}"));
                    break;
                }
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
        }
        match failed {
            Some(msg) => {
                log::warn!("bc: checkpoint evaluation failed ({msg}); keeping the final checkpoint");
                log.fallback = true;
            }
            None => {
                for (rec, s) in log.checkpoints.iter_mut().zip(&scores) {
                    rec.score = Some(*s);
                }
                // First maximum, so ties prefer the earlier checkpoint.
                chosen = (0..scores.len()).fold(0, |best, i| if scores[i] > scores[best] { i } else { best });
            }
        }
    }
    log.selected_step = log.checkpoints[chosen].step;
    policy.net = snapshots.swap_remove(chosen);
    Ok((policy, log))
}

/// Deterministic BC: minimizes the mean squared action error.
pub fn train_bc(dataset: &Dataset, config: &BcConfig, evaluator: Option<&Evaluator<'_>>) -> Result<(Policy, BcTrainLog)> {
    fit(
        Fit {
            kind: PolicyKind::Deterministic,
            dataset,
            weights: None,
        },
        config,
        evaluator,
    )
}

/// Gaussian BC: maximizes the log-likelihood of dataset actions.
pub fn train_bc_gaussian(
    dataset: &Dataset,
    config: &BcConfig,
    evaluator: Option<&Evaluator<'_>>,
) -> Result<(Policy, BcTrainLog)> {
    fit(
        Fit {
            kind: PolicyKind::Gaussian,
            dataset,
            weights: None,
        },
        config,
        evaluator,
    )
}

/// Deterministic BC with per-transition weights multiplying the squared
/// error. Weights must be finite, non-negative and not all zero.
pub fn train_weighted_bc_raw(
    dataset: &Dataset,
    weights: Vec<f64>,
    config: &BcConfig,
    evaluator: Option<&Evaluator<'_>>,
) -> Result<(Policy, BcTrainLog)> {
    if weights.len() != dataset.num_transitions() {
        return Err(Error::Dimension {
            context: "bc weights",
            expected: dataset.num_transitions(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("bc: weights must be finite and non-negative"));
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::config("bc: all weights are zero"));
    }
    fit(
        Fit {
            kind: PolicyKind::Deterministic,
            dataset,
            weights: Some(weights),
        },
        config,
        evaluator,
    )
}

/// `V(s) - min V + WEIGHT_SHIFT` for every transition start state.
pub fn value_weights(dataset: &Dataset, value: &dyn StateValue) -> Result<Vec<f64>> {
    let states: Vec<&[f64]> = dataset.transitions().map(|t| t.state.as_slice()).collect();
    let v = value.values(&states)?;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(v.iter().map(|x| x - min + WEIGHT_SHIFT).collect())
}

/// Value-weighted BC with weights from [`value_weights`].
pub fn train_weighted_bc(
    dataset: &Dataset,
    value: &dyn StateValue,
    config: &BcConfig,
    evaluator: Option<&Evaluator<'_>>,
) -> Result<(Policy, BcTrainLog)> {
    train_weighted_bc_raw(dataset, value_weights(dataset, value)?, config, evaluator)
}

/// Log-density of `a` under a Gaussian policy, via [`diag_gaussian_log_prob`].
pub fn log_prob(policy: &Policy, s: &[f64], a: &[f64]) -> Result<f64> {
    let (m, sd) = policy.distribution(s)?;
    Ok(diag_gaussian_log_prob(a, &m, &sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{trajectory_from_steps, Trajectory};
    use rand::Rng;

    const K: [[f64; 2]; 2] = [[0.5, -0.3], [0.2, 0.4]];

    fn linear(s: &[f64]) -> Vec<f64> {
        K.iter().map(|k| (k[0] * s[0] + k[1] * s[1]).clamp(-1.0, 1.0)).collect()
    }

    fn linear_dataset(n: usize, noise: f64, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, 0);
        let trajs: Vec<Trajectory> = (0..n)
            .map(|i| {
                let s = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
                let a: Vec<f64> = linear(&s).iter().map(|m| m + noise * rng::normal(&mut r)).collect();
                let s2 = vec![0.0, 0.0];
                trajectory_from_steps(i as i64, &[s, s2], &[a], &[0.0], true)
            })
            .collect();
        Dataset::new(2, 2, trajs).unwrap()
    }

    fn config(steps: usize) -> BcConfig {
        BcConfig {
            hidden: vec![32, 32],
            learning_rate: 3e-3,
            adam_eps: 1e-8,
            batch_size: 64,
            steps,
            checkpoint_start: steps / 2,
            checkpoint_every: steps / 4,
            action_bounds: Some(vec![1.0, 1.0]),
            seed: 1,
        }
    }

    #[test]
    fn schedules() {
        let full = BcConfig::default();
        assert_eq!((full.learning_rate, full.batch_size, full.steps), (1e-3, 256, 100_000));
        assert_eq!(full.checkpoint_steps(), (4..=10).map(|k| k * 10_000).collect::<Vec<_>>());
        assert_eq!(BcConfig::desk().checkpoint_steps(), vec![10_000, 20_000, 30_000]);
    }

    #[test]
    fn recovers_linear_policy() {
        let ds = linear_dataset(2000, 0.0, 1);
        let (p, log) = train_bc(&ds, &config(3000), None).unwrap();
        assert_eq!(log.selected_step, 3000);
        let test = linear_dataset(200, 0.0, 2);
        let mse = test
            .transitions()
            .map(|t| {
                let a = p.mean_action(&t.state).unwrap();
                a.iter().zip(&t.action).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 2.0
            })
            .sum::<f64>()
            / 200.0;
        assert!(mse < 1e-3 * 4.0, "mse {mse}");
        let best = log
            .checkpoints
            .iter()
            .scan(f64::INFINITY, |b, c| {
                *b = b.min(c.train_loss);
                Some(*b)
            })
            .collect::<Vec<_>>();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn memorizes_one_pair() {
        let trajs = (0..8)
            .map(|i| trajectory_from_steps(i, &[vec![0.3, -0.2], vec![0.0, 0.0]], &[vec![0.4, -0.7]], &[0.0], true))
            .collect();
        let ds = Dataset::new(2, 2, trajs).unwrap();
        let (p, _) = train_bc(&ds, &config(1000), None).unwrap();
        let a = p.mean_action(&[0.3, -0.2]).unwrap();
        assert!((a[0] - 0.4).abs() < 1e-3 && (a[1] + 0.7).abs() < 1e-3, "{a:?}");
    }

    #[test]
    fn fits_conditional_means_on_discrete_states() {
        // Each of three states appears with several actions; the squared
        // loss minimizer is their average.
        let table: [(f64, [f64; 3]); 3] = [(-1.0, [0.1, 0.3, 0.5]), (0.0, [-0.6, -0.2, -0.4]), (1.0, [0.0, 0.9, 0.6])];
        let mut trajs = Vec::new();
        for (s, actions) in table {
            for a in actions {
                let id = trajs.len() as i64;
                trajs.push(trajectory_from_steps(id, &[vec![s], vec![0.0]], &[vec![a]], &[0.0], true));
            }
        }
        let ds = Dataset::new(1, 1, trajs).unwrap();
        let cfg = BcConfig {
            action_bounds: Some(vec![1.0]),
            ..config(2000)
        };
        let (p, _) = train_bc(&ds, &cfg, None).unwrap();
        for (s, actions) in table {
            let mean = actions.iter().sum::<f64>() / 3.0;
            assert!((p.mean_action(&[s]).unwrap()[0] - mean).abs() < 0.01);
        }
    }

    #[test]
    fn gaussian_variants() {
        let ds = linear_dataset(2000, 0.0, 3);
        let (p, _) = train_bc_gaussian(&ds, &config(4000), None).unwrap();
        let (m, sd) = p.distribution(&[0.2, 0.1]).unwrap();
        let want = linear(&[0.2, 0.1]);
        assert!((m[0] - want[0]).abs() < 0.05 && (m[1] - want[1]).abs() < 0.05);
        assert!(sd.iter().all(|s| *s < 0.05), "{sd:?}");

        let noisy = linear_dataset(2000, 0.1, 4);
        let (p, _) = train_bc_gaussian(&noisy, &config(3000), None).unwrap();
        for s in [[0.0, 0.0], [0.5, -0.5]] {
            let (_, sd) = p.distribution(&s).unwrap();
            assert!(sd.iter().all(|v| (0.05..=0.2).contains(v)), "{sd:?}");
        }
        let v = p.as_gaussian().unwrap();
        let a = [0.1, 0.2];
        assert!((v.log_prob(&[0.0, 0.0], &a) - log_prob(&p, &[0.0, 0.0], &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn act_modes() {
        let zero = Policy::new(
            PolicyKind::Deterministic,
            Network::zeros(&[2, 4, 2], Head::TanhScaled { scale: vec![1.0, 1.0] }).unwrap(),
            vec![1.0, 1.0],
            NormStats::identity(2),
        )
        .unwrap();
        assert_eq!(zero.act(&[0.4, 0.4], ActMode::Sample, &mut rng::stream(0, 0)).unwrap(), vec![0.0, 0.0]);
        let ds = linear_dataset(50, 0.1, 5);
        let (g, _) = train_bc_gaussian(&ds, &config(40), None).unwrap();
        let s = [0.1, 0.1];
        assert_eq!(g.act(&s, ActMode::Mean, &mut rng::stream(0, 0)).unwrap(), g.act(&s, ActMode::Mean, &mut rng::stream(1, 0)).unwrap());
        let a = g.act(&s, ActMode::Sample, &mut rng::stream(7, 0)).unwrap();
        assert_eq!(a, g.act(&s, ActMode::Sample, &mut rng::stream(7, 0)).unwrap());
        assert!(a.iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn constant_weights_match_plain_bc() {
        let ds = linear_dataset(300, 0.1, 6);
        // Adam is invariant to loss scale up to its epsilon, which is
        // compensated here; a power-of-two weight keeps the scaling exact.
        let cfg = config(400);
        let (plain, _) = train_bc(&ds, &cfg, None).unwrap();
        let compensated = BcConfig {
            adam_eps: cfg.adam_eps * 4.0,
            ..cfg.clone()
        };
        let (weighted, _) = train_weighted_bc_raw(&ds, vec![4.0; 300], &compensated, None).unwrap();
        for t in ds.transitions().take(20) {
            let a = plain.mean_action(&t.state).unwrap();
            let b = weighted.mean_action(&t.state).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_weight_pairs_are_ignored() {
        let trajs = vec![
            trajectory_from_steps(0, &[vec![0.5], vec![0.0]], &[vec![0.8]], &[0.0], true),
            trajectory_from_steps(1, &[vec![0.5], vec![0.0]], &[vec![-0.8]], &[0.0], true),
        ];
        let ds = Dataset::new(1, 1, trajs).unwrap();
        let cfg = BcConfig {
            action_bounds: Some(vec![1.0]),
            batch_size: 2,
            ..config(1000)
        };
        let (p, _) = train_weighted_bc_raw(&ds, vec![1.0, 0.0], &cfg, None).unwrap();
        assert!((p.mean_action(&[0.5]).unwrap()[0] - 0.8).abs() < 1e-3);
        assert!(train_weighted_bc_raw(&ds, vec![0.0, 0.0], &cfg, None).is_err());
        assert!(train_weighted_bc_raw(&ds, vec![1.0, -1.0], &cfg, None).is_err());
    }

    #[test]
    fn value_weights_are_shifted() {
        struct Id;
        impl StateValue for Id {
            fn values(&self, states: &[&[f64]]) -> Result<Vec<f64>> {
                Ok(states.iter().map(|s| s[0]).collect())
            }
        }
        let trajs = vec![
            trajectory_from_steps(0, &[vec![-2.0], vec![0.0]], &[vec![0.0]], &[0.0], true),
            trajectory_from_steps(1, &[vec![1.0], vec![0.0]], &[vec![0.0]], &[0.0], true),
        ];
        let ds = Dataset::new(1, 1, trajs).unwrap();
        assert_eq!(value_weights(&ds, &Id).unwrap(), vec![WEIGHT_SHIFT, 3.0 + WEIGHT_SHIFT]);
    }

    #[test]
    fn selection_and_fallback() {
        let ds = linear_dataset(200, 0.1, 7);
        let cfg = config(400);
        // Prefer the earliest checkpoint by scoring with a step counter.
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let eval = |_: &Policy| -> Result<f64> {
            let k = calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok([3.0, 5.0, 1.0][k.min(2)])
        };
        let (_, log) = train_bc(&ds, &cfg, Some(&eval)).unwrap();
        assert_eq!(log.checkpoints.len(), 3);
        let best = log
            .checkpoints
            .iter()
            .max_by(|a, b| a.score.unwrap().total_cmp(&b.score.unwrap()))
            .unwrap();
        assert_eq!(log.selected_step, best.step);
        assert_eq!(log.selected_step, 300);

        let failing = |_: &Policy| -> Result<f64> { Err(Error::Evaluation("boom".into())) };
        let (_, log) = train_bc(&ds, &cfg, Some(&failing)).unwrap();
        assert!(log.fallback);
        assert_eq!(log.selected_step, 400);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = linear_dataset(30, 0.1, 8);
        let (p, _) = train_bc_gaussian(&ds, &config(8), None).unwrap();
        let json = p.to_json(CheckpointMeta::default()).unwrap();
        assert_eq!(Policy::from_json(&json).unwrap(), p);
        assert!(Policy::from_json(&json.replace("\"gaussian\"", "\"deterministic\"")).is_err());
    }
}
