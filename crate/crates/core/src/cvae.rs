//! Conditional VAE over actions connecting two states, `p(a | s, s')`.
//!
//! Both networks see the pair `(s, s')` as normalized `s` plus the
//! normalized difference `s' - s`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, CheckpointMeta, Head, Matrix, Network, NetworkCheckpoint, OptimizerState};
use crate::rng;
use crate::train::{concat_rows, ensure_finite, gather, require_nonempty, Batcher};

const TRAIN_STREAM: u64 = 31;
/// Transitions above which the wider hidden layer is used.
pub const WIDE_DATASET: usize = 900_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// Draw `z` from the standard normal prior.
    #[default]
    Sample,
    /// Decode `z = 0`.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeConfig {
    /// Hidden width; `None` picks 256 or 750 from the dataset size.
    pub hidden_width: Option<usize>,
    pub hidden_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub kl_weight: f64,
    /// Per-dimension action bounds; `None` uses the largest absolute action
    /// in the data.
    pub action_bounds: Option<Vec<f64>>,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            hidden_width: None,
            hidden_layers: 2,
            learning_rate: 1e-4,
            batch_size: 100,
            steps: 400_000,
            kl_weight: 0.5,
            action_bounds: None,
            log_every: 1000,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn width_for(&self, transitions: usize) -> usize {
        self.hidden_width
            .unwrap_or(if transitions < WIDE_DATASET { 256 } else { 750 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeLoss {
    pub step: usize,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseCvae {
    encoder: Network,
    decoder: Network,
    action_bounds: Vec<f64>,
    state_stats: NormStats,
    delta_stats: NormStats,
}

impl InverseCvae {
    pub fn new(
        encoder: Network,
        decoder: Network,
        action_bounds: Vec<f64>,
        state_stats: NormStats,
        delta_stats: NormStats,
    ) -> Result<Self> {
        let d_s = state_stats.dim();
        let d_a = action_bounds.len();
        state_stats.check(d_s, "inverse model state statistics")?;
        delta_stats.check(d_s, "inverse model delta statistics")?;
        let latent = 2 * d_a;
        let ok = encoder.input_dim() == d_a + 2 * d_s
            && encoder.output_dim() == 2 * latent
            && matches!(encoder.head(), Head::Gaussian { .. })
            && decoder.input_dim() == latent + 2 * d_s
            && decoder.output_dim() == d_a
            && *decoder.head() == Head::TanhScaled { scale: action_bounds.clone() };
        if !ok {
            return Err(Error::config(
                "inverse model: encoder/decoder shapes do not match the state and action dimensions",
            ));
        }
        Ok(Self {
            encoder,
            decoder,
            action_bounds,
            state_stats,
            delta_stats,
        })
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.action_bounds.len()
    }

    pub fn action_bounds(&self) -> &[f64] {
        &self.action_bounds
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    fn condition(&self, s: &[f64], s_next: &[f64]) -> Vec<f64> {
        let mut c = self.state_stats.normalize(s);
        let delta: Vec<f64> = s_next.iter().zip(s).map(|(b, a)| b - a).collect();
        c.extend(self.delta_stats.normalize(&delta));
        c
    }

    fn check_states(&self, s: &[f64], s_next: &[f64]) -> Result<()> {
        for x in [s, s_next] {
            if x.len() != self.state_stats.dim() {
                return Err(Error::Dimension {
                    context: "inverse model state",
                    expected: self.state_stats.dim(),
                    got: x.len(),
                });
            }
        }
        Ok(())
    }

    pub fn decode(&self, z: &[f64], s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
        self.check_states(s, s_next)?;
        let input = concat_rows(&[z, &self.condition(s, s_next)]);
        self.decoder.forward(&input)
    }

    /// Samples an action likely to move the system from `s` to `s_next`.
    pub fn generate_action(&self, s: &[f64], s_next: &[f64], mode: LatentMode, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let z = match mode {
            LatentMode::Sample => rng::normal_vec(rng, self.latent_dim()),
            LatentMode::Mean => vec![0.0; self.latent_dim()],
        };
        self.decode(&z, s, s_next)
    }

    pub fn to_json(&self, meta: CheckpointMeta) -> Result<String> {
        let ckpt = CvaeCheckpoint {
            encoder: NetworkCheckpoint::from_network(&self.encoder, meta.clone()),
            decoder: NetworkCheckpoint::from_network(&self.decoder, meta),
            action_bounds: self.action_bounds.clone(),
            state_stats: self.state_stats.clone(),
            delta_stats: self.delta_stats.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: CvaeCheckpoint = serde_json::from_str(text)?;
        Self::new(
            c.encoder.to_network()?,
            c.decoder.to_network()?,
            c.action_bounds,
            c.state_stats,
            c.delta_stats,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeCheckpoint {
    pub encoder: NetworkCheckpoint,
    pub decoder: NetworkCheckpoint,
    pub action_bounds: Vec<f64>,
    pub state_stats: NormStats,
    pub delta_stats: NormStats,
}

fn data_bounds(dataset: &Dataset) -> Vec<f64> {
    let mut b = vec![0.0f64; dataset.d_a()];
    for t in dataset.transitions() {
        for (m, a) in b.iter_mut().zip(&t.action) {
            *m = m.max(a.abs());
        }
    }
    b.into_iter().map(|v| v.max(1e-6)).collect()
}

pub fn train_cvae(dataset: &Dataset, config: &CvaeConfig) -> Result<InverseCvae> {
    train_cvae_with_log(dataset, config).map(|(m, _)| m)
}

/// Minimizes squared reconstruction error plus `kl_weight` times the KL
/// divergence of the encoder from the standard normal prior.
pub fn train_cvae_with_log(dataset: &Dataset, config: &CvaeConfig) -> Result<(InverseCvae, Vec<CvaeLoss>)> {
    let n = dataset.num_transitions();
    require_nonempty(n, "inverse model")?;
    if !(config.learning_rate > 0.0) || config.batch_size == 0 || config.hidden_layers == 0 || config.kl_weight < 0.0 {
        return Err(Error::config("inverse model: invalid hyperparameters"));
    }
    let (d_s, d_a) = (dataset.d_s(), dataset.d_a());
    let bounds = match &config.action_bounds {
        Some(b) if b.len() != d_a => {
            return Err(Error::Dimension {
                context: "action bounds",
                expected: d_a,
                got: b.len(),
            })
        }
        Some(b) => b.clone(),
        None => data_bounds(dataset),
    };
    let latent = 2 * d_a;
    let width = config.width_for(n);
    let hidden = vec![width; config.hidden_layers];
    let mut rng = rng::stream(config.seed, TRAIN_STREAM);

    let state_stats = NormStats::from_rows(d_s, dataset.transitions().map(|t| t.state.as_slice()))?;
    let deltas: Vec<Vec<f64>> = dataset
        .transitions()
        .map(|t| t.next_state.iter().zip(&t.state).map(|(b, a)| b - a).collect())
        .collect();
    let delta_stats = NormStats::from_rows(d_s, deltas.iter().map(|v| v.as_slice()))?;

    let mut enc_sizes = vec![d_a + 2 * d_s];
    enc_sizes.extend_from_slice(&hidden);
    enc_sizes.push(2 * latent);
    let mut dec_sizes = vec![latent + 2 * d_s];
    dec_sizes.extend_from_slice(&hidden);
    dec_sizes.push(d_a);
    let encoder = Network::new(&enc_sizes, Head::gaussian(), &mut rng)?;
    let decoder = Network::new(&dec_sizes, Head::TanhScaled { scale: bounds.clone() }, &mut rng)?;
    let mut model = InverseCvae::new(encoder, decoder, bounds.clone(), state_stats, delta_stats)?;

    // Encoder rows are [a / bound, condition]; decoder rows get z in front
    // of the same condition.
    let mut enc_x = Matrix::zeros(n, d_a + 2 * d_s);
    let mut actions = Matrix::zeros(n, d_a);
    for (r, t) in dataset.transitions().enumerate() {
        let cond = model.condition(&t.state, &t.next_state);
        let row = enc_x.row_mut(r);
        for j in 0..d_a {
            row[j] = t.action[j] / bounds[j];
        }
        row[d_a..].copy_from_slice(&cond);
        actions.row_mut(r).copy_from_slice(&t.action);
    }

    let mut enc_opt = OptimizerState::new(&model.encoder, AdamConfig::with_lr(config.learning_rate));
    let mut dec_opt = OptimizerState::new(&model.decoder, AdamConfig::with_lr(config.learning_rate));
    let mut batcher = Batcher::new((0..n).collect());
    let mut log = Vec::new();
    let beta = config.kl_weight;
    for step in 0..config.steps {
        let idx = batcher.next(config.batch_size, &mut rng);
        let b = idx.len();
        let bx = gather(&enc_x, idx);
        let ba = gather(&actions, idx);
        let enc_tape = model.encoder.forward_batch(&bx)?;
        let stats = enc_tape.output();
        let eps = Matrix::from_vec(b, latent, rng::normal_vec(&mut rng, b * latent));
        let mut dec_x = Matrix::zeros(b, latent + 2 * d_s);
        let mut kl = 0.0;
        for r in 0..b {
            let (o, e) = (stats.row(r), eps.row(r));
            let row = dec_x.row_mut(r);
            for k in 0..latent {
                let (mu, ls) = (o[k], o[latent + k]);
                row[k] = mu + ls.exp() * e[k];
                kl += 0.5 * (mu * mu + (2.0 * ls).exp() - 1.0 - 2.0 * ls);
            }
            row[latent..].copy_from_slice(&bx.row(r)[d_a..]);
        }
        kl /= b as f64;
        let dec_tape = model.decoder.forward_batch(&dec_x)?;
        let mut up = Matrix::zeros(b, d_a);
        let mut recon = 0.0;
        for r in 0..b {
            for j in 0..d_a {
                let err = dec_tape.output().row(r)[j] - ba.row(r)[j];
                recon += err * err;
                up.row_mut(r)[j] = 2.0 * err / b as f64;
            }
        }
        recon /= b as f64;
        ensure_finite(recon + beta * kl, "inverse model", step)?;
        let (dec_grads, dz) = model.decoder.backward_batch(&dec_tape, &up)?;
        let mut enc_up = Matrix::zeros(b, 2 * latent);
        for r in 0..b {
            let (o, e, g) = (stats.row(r), eps.row(r), dz.row(r));
            let row = enc_up.row_mut(r);
            for k in 0..latent {
                let (mu, ls) = (o[k], o[latent + k]);
                let sigma = ls.exp();
                row[k] = g[k] + beta * mu / b as f64;
                row[latent + k] = g[k] * sigma * e[k] + beta * (sigma * sigma - 1.0) / b as f64;
            }
        }
        let enc_grads = model.encoder.param_gradients(&enc_tape, &enc_up)?;
        dec_opt.step(&mut model.decoder, &dec_grads)?;
        enc_opt.step(&mut model.encoder, &enc_grads)?;
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            log.push(CvaeLoss {
                step,
                reconstruction: recon,
                kl,
            });
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{trajectory_from_steps, Trajectory};
    use rand::Rng;

    const DT: f64 = 0.1;

    /// One-step transitions of `x' = x + v dt, v' = v + a dt` with `a` in
    /// `[-1, 1]`, so `a = (v' - v) / dt` exactly.
    fn invertible_dataset(n: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, 0);
        let trajs: Vec<Trajectory> = (0..n)
            .map(|i| {
                let s = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
                let a = r.gen_range(-1.0..1.0);
                let s2 = vec![s[0] + s[1] * DT, s[1] + a * DT];
                trajectory_from_steps(i as i64, &[s, s2], &[vec![a]], &[0.0], true)
            })
            .collect();
        Dataset::new(2, 1, trajs).unwrap()
    }

    fn oracle(s: &[f64], s2: &[f64]) -> f64 {
        (s2[1] - s[1]) / DT
    }

    fn config(steps: usize) -> CvaeConfig {
        CvaeConfig {
            hidden_width: Some(32),
            learning_rate: 3e-3,
            batch_size: 64,
            steps,
            action_bounds: Some(vec![1.0]),
            log_every: 100,
            ..CvaeConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = CvaeConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.steps), (1e-4, 100, 400_000));
        assert_eq!(c.width_for(10), 256);
        assert_eq!(c.width_for(1_000_000), 750);
        assert_eq!(c.kl_weight, 0.5);
    }

    #[test]
    fn recovers_analytic_inverse() {
        let train = invertible_dataset(2000, 1);
        let (model, log) = train_cvae_with_log(&train, &config(3000)).unwrap();
        assert_eq!(model.latent_dim(), 2);
        assert!(log.iter().all(|l| l.kl >= 0.0));
        let test = invertible_dataset(200, 2);
        let mut r = rng::stream(3, 0);
        let mut mse = 0.0;
        for t in test.transitions() {
            let a = model.generate_action(&t.state, &t.next_state, LatentMode::Sample, &mut r).unwrap();
            mse += (a[0] - oracle(&t.state, &t.next_state)).powi(2);
        }
        mse /= 200.0;
        // Action range is 2.
        assert!(mse < 0.05 * 4.0, "mse {mse}");
        for t in test.transitions().take(5) {
            let samples: Vec<f64> = (0..100)
                .map(|_| model.generate_action(&t.state, &t.next_state, LatentMode::Sample, &mut r).unwrap()[0])
                .collect();
            let mean = samples.iter().sum::<f64>() / 100.0;
            let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
            assert!((mean - oracle(&t.state, &t.next_state)).abs() < 0.1, "mean {mean}");
            assert!(sd < 0.2 * 2.0);
            assert!(samples.iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn memorizes_a_repeated_transition() {
        let s = vec![0.2, -0.4];
        let s2 = vec![0.16, -0.37];
        let trajs = (0..20)
            .map(|i| trajectory_from_steps(i, &[s.clone(), s2.clone()], &[vec![0.3]], &[0.0], true))
            .collect();
        let ds = Dataset::new(2, 1, trajs).unwrap();
        let model = train_cvae(&ds, &config(1500)).unwrap();
        let mut r = rng::stream(0, 0);
        let a = model.generate_action(&s, &s2, LatentMode::Sample, &mut r).unwrap();
        assert!((a[0] - 0.3).powi(2) < 1e-3, "{a:?}");
    }

    #[test]
    fn zero_decoder_and_determinism() {
        let ds = invertible_dataset(50, 4);
        let model = train_cvae(&ds, &config(20)).unwrap();
        let (s, s2) = (vec![0.1, 0.2], vec![0.12, 0.25]);
        let a1 = model.generate_action(&s, &s2, LatentMode::Sample, &mut rng::stream(8, 0)).unwrap();
        let a2 = model.generate_action(&s, &s2, LatentMode::Sample, &mut rng::stream(8, 0)).unwrap();
        assert_eq!(a1, a2);

        let zero_dec = Network::zeros(&[2 + 4, 32, 32, 1], Head::TanhScaled { scale: vec![1.0] }).unwrap();
        let zero = InverseCvae::new(
            model.encoder().clone(),
            zero_dec,
            vec![1.0],
            NormStats::identity(2),
            NormStats::identity(2),
        )
        .unwrap();
        assert_eq!(zero.generate_action(&s, &s2, LatentMode::Sample, &mut rng::stream(1, 1)).unwrap(), vec![0.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = invertible_dataset(30, 5);
        let model = train_cvae(&ds, &config(5)).unwrap();
        let json = model.to_json(CheckpointMeta { seed: 0, steps: 5 }).unwrap();
        assert_eq!(InverseCvae::from_json(&json).unwrap(), model);
        assert!(InverseCvae::from_json(&json.replace("action_bounds", "bounds")).is_err());
    }
}
