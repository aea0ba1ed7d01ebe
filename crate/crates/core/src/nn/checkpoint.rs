use serde::{Deserialize, Serialize};

use super::{Head, Network};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
}

/// On-disk form of a [`Network`]: one JSON object per model.
///
/// `weights[l]` is the row-major `(out, in)` matrix of layer `l`. Head
/// parameters travel in `head_scale` (tanh head) and `log_std_bounds`
/// (Gaussian head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub head: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_scale: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_std_bounds: Option<[f64; 2]>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default)]
    pub meta: CheckpointMeta,
}

impl NetworkCheckpoint {
    pub fn from_network(net: &Network, meta: CheckpointMeta) -> Self {
        let (head_scale, log_std_bounds) = match net.head() {
            Head::Linear => (None, None),
            Head::TanhScaled { scale } => (Some(scale.clone()), None),
            Head::Gaussian {
                log_std_min,
                log_std_max,
            } => (None, Some([*log_std_min, *log_std_max])),
        };
        Self {
            layer_sizes: net.layer_sizes().to_vec(),
            head: net.head().name().to_string(),
            head_scale,
            log_std_bounds,
            weights: net.weights().to_vec(),
            biases: net.biases().to_vec(),
            meta,
        }
    }

    /// Validates shapes and values and rebuilds the network.
    pub fn to_network(&self) -> Result<Network> {
        let head = match self.head.as_str() {
            "linear" => Head::Linear,
            "tanh_scaled" => Head::TanhScaled {
                scale: self
                    .head_scale
                    .clone()
                    .ok_or_else(|| Error::config("tanh_scaled head without head_scale"))?,
            },
            "gaussian" => {
                let [lo, hi] = self
                    .log_std_bounds
                    .unwrap_or([super::LOG_STD_MIN, super::LOG_STD_MAX]);
                Head::Gaussian {
                    log_std_min: lo,
                    log_std_max: hi,
                }
            }
            other => return Err(Error::config(format!("unknown head `{other}`"))),
        };
        let finite = self
            .weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("checkpoint contains non-finite parameters"));
        }
        Network::from_parts(
            self.layer_sizes.clone(),
            self.weights.clone(),
            self.biases.clone(),
            head,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.to_network()?;
        Ok(ckpt)
    }
}

impl Network {
    pub fn to_checkpoint_json(&self, meta: CheckpointMeta) -> Result<String> {
        NetworkCheckpoint::from_network(self, meta).to_json()
    }

    pub fn from_checkpoint_json(text: &str) -> Result<(Self, CheckpointMeta)> {
        let ckpt: NetworkCheckpoint = serde_json::from_str(text)?;
        let net = ckpt.to_network()?;
        Ok((net, ckpt.meta))
    }
}
