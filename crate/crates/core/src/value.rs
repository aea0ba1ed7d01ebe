//! Twin state-value function fitted by temporal-difference regression with
//! hard-updated target copies. `value(s) = min(v1(s), v2(s))`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, CheckpointMeta, Head, Matrix, Network, NetworkCheckpoint, OptimizerState};
use crate::rng;
use crate::train::{ensure_finite, gather, require_nonempty, Batcher};

const TRAIN_STREAM: u64 = 51;

#[derive(Clone, Debug, PartialEq)]
pub struct ValueConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub gamma: f64,
    /// Steps between hard copies into the target networks.
    pub target_period: usize,
    /// Abort when the running loss exceeds this multiple of the median of
    /// the last `divergence_window` step losses and is above
    /// `divergence_floor`.
    pub divergence_factor: f64,
    pub divergence_window: usize,
    /// Losses are measured on values divided by the output scale, so this
    /// is a relative squared error.
    pub divergence_floor: f64,
    pub seed: u64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            learning_rate: 3e-4,
            batch_size: 256,
            steps: 100_000,
            gamma: 0.99,
            target_period: 1000,
            divergence_factor: 10.0,
            divergence_window: 1000,
            divergence_floor: 1e-2,
            seed: 0,
        }
    }
}

impl ValueConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("value: gamma must lie in (0, 1]"));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.target_period == 0 {
            return Err(Error::config("value: invalid hyperparameters"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwinValue {
    v1: Network,
    v2: Network,
    gamma: f64,
    state_stats: NormStats,
    /// Network outputs are multiplied by this to give values.
    scale: f64,
}

impl TwinValue {
    pub fn new(v1: Network, v2: Network, gamma: f64, state_stats: NormStats, scale: f64) -> Result<Self> {
        let d = state_stats.dim();
        state_stats.check(d, "value state statistics")?;
        for net in [&v1, &v2] {
            if net.input_dim() != d || net.output_dim() != 1 || *net.head() != Head::Linear {
                return Err(Error::config(format!("value: networks must map {d} inputs to one linear output")));
            }
        }
        if !(gamma > 0.0 && gamma <= 1.0) || !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config("value: invalid gamma or output scale"));
        }
        Ok(Self {
            v1,
            v2,
            gamma,
            state_stats,
            scale,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn networks(&self) -> (&Network, &Network) {
        (&self.v1, &self.v2)
    }

    /// Both branch values at `s`.
    pub fn branches(&self, s: &[f64]) -> Result<(f64, f64)> {
        if s.len() != self.state_stats.dim() {
            return Err(Error::Dimension {
                context: "value state",
                expected: self.state_stats.dim(),
                got: s.len(),
            });
        }
        let ns = self.state_stats.normalize(s);
        Ok((self.v1.forward(&ns)?[0] * self.scale, self.v2.forward(&ns)?[0] * self.scale))
    }

    pub fn value(&self, s: &[f64]) -> Result<f64> {
        let (a, b) = self.branches(s)?;
        Ok(a.min(b))
    }

    /// Values of many states in two batched passes.
    pub fn values<R: AsRef<[f64]>>(&self, states: &[R]) -> Result<Vec<f64>> {
        let d = self.state_stats.dim();
        let mut x = Matrix::zeros(states.len(), d);
        for (i, s) in states.iter().enumerate() {
            let s = s.as_ref();
            if s.len() != d {
                return Err(Error::Dimension {
                    context: "value state",
                    expected: d,
                    got: s.len(),
                });
            }
            self.state_stats.normalize_into(s, x.row_mut(i));
        }
        let a = self.v1.predict_batch(&x)?;
        let b = self.v2.predict_batch(&x)?;
        Ok(a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(a, b)| a.min(*b) * self.scale)
            .collect())
    }

    pub fn to_json(&self, meta: CheckpointMeta) -> Result<String> {
        let c = ValueCheckpoint {
            v1: NetworkCheckpoint::from_network(&self.v1, meta.clone()),
            v2: NetworkCheckpoint::from_network(&self.v2, meta),
            gamma: self.gamma,
            state_stats: self.state_stats.clone(),
            scale: self.scale,
        };
        Ok(serde_json::to_string(&c)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ValueCheckpoint = serde_json::from_str(text)?;
        Self::new(c.v1.to_network()?, c.v2.to_network()?, c.gamma, c.state_stats, c.scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueCheckpoint {
    pub v1: NetworkCheckpoint,
    pub v2: NetworkCheckpoint,
    pub gamma: f64,
    pub state_stats: NormStats,
    pub scale: f64,
}

/// Flags a running (exponentially averaged) loss that has grown far past
/// the median of recent step losses.
#[derive(Clone, Debug)]
pub struct DivergenceMonitor {
    window: VecDeque<f64>,
    capacity: usize,
    factor: f64,
    floor: f64,
    running: Option<f64>,
}

impl DivergenceMonitor {
    const SMOOTHING: f64 = 0.01;

    pub fn new(capacity: usize, factor: f64, floor: f64) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            factor,
            floor,
            running: None,
        }
    }

    /// Records one step loss; returns true once divergence is detected.
    pub fn push(&mut self, loss: f64) -> bool {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(loss);
        if self.capacity == 0 || self.window.len() < self.capacity {
            return false;
        }
        let mut sorted: Vec<f64> = self.window.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        // The average starts once the window is full so the large losses of
        // the first steps do not linger in it.
        let running = match self.running {
            None => median,
            Some(r) => r + Self::SMOOTHING * (loss - r),
        };
        self.running = Some(running);
        running > self.factor * median && running > self.floor
    }
}

/// Regresses both networks toward `r + gamma (1 - done) min(target1, target2)(s')`.
pub fn train_value(dataset: &Dataset, config: &ValueConfig) -> Result<TwinValue> {
    config.validate()?;
    let n = dataset.num_transitions();
    require_nonempty(n, "value")?;
    let d = dataset.d_s();
    let mut rng = rng::stream(config.seed, TRAIN_STREAM);
    let state_stats = NormStats::from_rows(d, dataset.transitions().map(|t| t.state.as_slice()))?;
    let max_r = dataset.transitions().map(|t| t.reward.abs()).fold(0.0, f64::max);
    let horizon = if config.gamma < 1.0 { 1.0 / (1.0 - config.gamma) } else { 1.0 };
    let scale = if max_r > 0.0 { max_r * horizon } else { 1.0 };

    let mut sizes = vec![d];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(1);
    let v1 = Network::new(&sizes, Head::Linear, &mut rng)?;
    let v2 = Network::new(&sizes, Head::Linear, &mut rng)?;
    let mut model = TwinValue::new(v1, v2, config.gamma, state_stats, scale)?;
    let mut t1 = model.v1.clone();
    let mut t2 = model.v2.clone();

    let mut xs = Matrix::zeros(n, d);
    let mut xn = Matrix::zeros(n, d);
    let mut rewards = Vec::with_capacity(n);
    let mut live = Vec::with_capacity(n);
    for (i, t) in dataset.transitions().enumerate() {
        model.state_stats.normalize_into(&t.state, xs.row_mut(i));
        model.state_stats.normalize_into(&t.next_state, xn.row_mut(i));
        rewards.push(t.reward / scale);
        live.push(if t.done { 0.0 } else { 1.0 });
    }

    let mut o1 = OptimizerState::new(&model.v1, AdamConfig::with_lr(config.learning_rate));
    let mut o2 = OptimizerState::new(&model.v2, AdamConfig::with_lr(config.learning_rate));
    let mut batcher = Batcher::new((0..n).collect());
    let mut monitor = DivergenceMonitor::new(config.divergence_window, config.divergence_factor, config.divergence_floor);
    for step in 0..config.steps {
        if step > 0 && step % config.target_period == 0 {
            t1.copy_params_from(&model.v1);
            t2.copy_params_from(&model.v2);
        }
        let idx = batcher.next(config.batch_size, &mut rng);
        let b = idx.len();
        let bs = gather(&xs, idx);
        let bn = gather(&xn, idx);
        let q1 = t1.predict_batch(&bn)?;
        let q2 = t2.predict_batch(&bn)?;
        let target: Vec<f64> = (0..b)
            .map(|i| {
                let j = idx[i];
                rewards[j] + config.gamma * live[j] * q1.as_slice()[i].min(q2.as_slice()[i])
            })
            .collect();
        let mut loss = 0.0;
        for net_id in 0..2 {
            let (net, opt) = if net_id == 0 {
                (&mut model.v1, &mut o1)
            } else {
                (&mut model.v2, &mut o2)
            };
            let tape = net.forward_batch(&bs)?;
            let mut up = Matrix::zeros(b, 1);
            for i in 0..b {
                let err = tape.output().as_slice()[i] - target[i];
                loss += err * err / b as f64;
                up.as_mut_slice()[i] = 2.0 * err / b as f64;
            }
            let grads = net.param_gradients(&tape, &up)?;
            opt.step(net, &grads)?;
        }
        ensure_finite(loss, "value", step)?;
        if monitor.push(loss) {
            return Err(Error::fault(format!("value: loss diverged at step {step} (loss {loss:.3e})")));
        }
    }
    Ok(model)
}
