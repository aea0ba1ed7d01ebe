//! Dense multilayer perceptrons with hand-written backpropagation.
//!
//! Every learned model in the crate is a [`Network`]: a stack of affine
//! layers with ReLU between them and one of three output heads. Parameters
//! are `f64` and stored row-major with shape `(out, in)` per layer.

mod adam;
mod checkpoint;
mod gradcheck;
mod matrix;

use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{AdamConfig, OptimizerState};
pub use checkpoint::{CheckpointMeta, NetworkCheckpoint};
pub use gradcheck::{grad_check, grad_check_with_step, GRAD_CHECK_STEP};
pub use matrix::Matrix;
pub(crate) use matrix::{axpy, dot};

/// Default clamp range for log standard deviations produced by a Gaussian head.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear,
    /// `scale[j] * tanh(z[j])`, so output `j` lies in `[-scale[j], scale[j]]`.
    TanhScaled { scale: Vec<f64> },
    /// The last layer has `2k` units: `k` means followed by `k` log standard
    /// deviations clamped to `[log_std_min, log_std_max]`.
    Gaussian { log_std_min: f64, log_std_max: f64 },
}

impl Head {
    pub fn gaussian() -> Self {
        Head::Gaussian {
            log_std_min: LOG_STD_MIN,
            log_std_max: LOG_STD_MAX,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Head::Linear => "linear",
            Head::TanhScaled { .. } => "tanh_scaled",
            Head::Gaussian { .. } => "gaussian",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    head: Head,
}

/// Per-layer parameter gradients, laid out like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Intermediate values of a batched forward pass, consumed by backward.
#[derive(Clone, Debug)]
pub struct Tape {
    /// `activations[0]` is the input; `activations[l]` is the ReLU output
    /// feeding layer `l`.
    activations: Vec<Matrix>,
    pre_output: Matrix,
    output: Matrix,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn into_output(self) -> Matrix {
        self.output
    }
}

fn validate(layer_sizes: &[usize], head: &Head) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::config("a network needs at least an input and an output layer"));
    }
    if layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::config("layer sizes must be positive"));
    }
    let out = *layer_sizes.last().unwrap();
    match head {
        Head::Linear => {}
        Head::TanhScaled { scale } => {
            if scale.len() != out {
                return Err(Error::Dimension {
                    context: "tanh head scale",
                    expected: out,
                    got: scale.len(),
                });
            }
            if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
                return Err(Error::config("tanh head scale must be positive and finite"));
            }
        }
        Head::Gaussian {
            log_std_min,
            log_std_max,
        } => {
            if out % 2 != 0 {
                return Err(Error::config("gaussian head needs an even output width"));
            }
            if !(log_std_min < log_std_max) {
                return Err(Error::config("gaussian head needs log_std_min < log_std_max"));
            }
        }
    }
    Ok(())
}

impl Network {
    /// Random network with weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, head)?;
        for l in 0..net.num_layers() {
            let bound = 1.0 / (layer_sizes[l] as f64).sqrt();
            for w in &mut net.weights[l] {
                *w = rng.gen_range(-bound..bound);
            }
            for b in &mut net.biases[l] {
                *b = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize], head: Head) -> Result<Self> {
        validate(layer_sizes, &head)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            head,
        })
    }

    /// Builds a network from explicit parameters, checking every shape.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        head: Head,
    ) -> Result<Self> {
        validate(&layer_sizes, &head)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Dimension {
                context: "number of layers",
                expected: layers,
                got: weights.len().min(biases.len()),
            });
        }
        for l in 0..layers {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            if weights[l].len() != fan_in * fan_out {
                return Err(Error::Dimension {
                    context: "weight matrix",
                    expected: fan_in * fan_out,
                    got: weights[l].len(),
                });
            }
            if biases[l].len() != fan_out {
                return Err(Error::Dimension {
                    context: "bias vector",
                    expected: fan_out,
                    got: biases[l].len(),
                });
            }
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            head,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn max_abs_param(&self) -> f64 {
        self.params().fold(0.0, |m, p| m.max(p.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    /// Clamps every parameter into `[-bound, bound]`.
    pub fn clip_params(&mut self, bound: f64) {
        for p in self.weights.iter_mut().chain(self.biases.iter_mut()).flatten() {
            *p = p.clamp(-bound, bound);
        }
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Single-sample forward pass. For a Gaussian head the output holds the
    /// means followed by the clamped log standard deviations.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut a = input.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let fan_in = self.layer_sizes[l];
            let mut z: Vec<f64> = self.weights[l]
                .chunks_exact(fan_in)
                .zip(&self.biases[l])
                .map(|(w, b)| b + dot(w, &a))
                .collect();
            if l < last {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            a = z;
        }
        self.apply_head(&mut a);
        Ok(a)
    }

    fn apply_head(&self, z: &mut [f64]) {
        match &self.head {
            Head::Linear => {}
            Head::TanhScaled { scale } => {
                for (v, s) in z.iter_mut().zip(scale) {
                    *v = s * v.tanh();
                }
            }
            Head::Gaussian {
                log_std_min,
                log_std_max,
            } => {
                let k = z.len() / 2;
                for v in &mut z[k..] {
                    *v = v.clamp(*log_std_min, *log_std_max);
                }
            }
        }
    }

    fn affine_batch(&self, l: usize, x: &Matrix) -> Matrix {
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let mut z = Matrix::zeros(x.rows(), fan_out);
        for i in 0..x.rows() {
            let xi = x.row(i);
            let zi = z.row_mut(i);
            for ((zo, w), b) in zi
                .iter_mut()
                .zip(self.weights[l].chunks_exact(fan_in))
                .zip(&self.biases[l])
            {
                *zo = b + dot(w, xi);
            }
        }
        z
    }

    /// Batched forward pass that records what backward needs.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Tape> {
        self.check_input(x.cols())?;
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.num_layers());
        activations.push(x.clone());
        for l in 0..last {
            let mut z = self.affine_batch(l, &activations[l]);
            for v in z.as_mut_slice() {
                *v = v.max(0.0);
            }
            activations.push(z);
        }
        let pre_output = self.affine_batch(last, &activations[last]);
        let mut output = pre_output.clone();
        for i in 0..output.rows() {
            self.apply_head(output.row_mut(i));
        }
        Ok(Tape {
            activations,
            pre_output,
            output,
        })
    }

    /// Batched inference without keeping a tape.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x.cols())?;
        let last = self.num_layers() - 1;
        let mut a = self.affine_batch(0, x);
        for l in 1..=last {
            for v in a.as_mut_slice() {
                *v = v.max(0.0);
            }
            a = self.affine_batch(l, &a);
        }
        for i in 0..a.rows() {
            self.apply_head(a.row_mut(i));
        }
        Ok(a)
    }

    /// Multiplies `upstream` (gradient w.r.t. head output) by the head's
    /// derivative, giving the gradient w.r.t. the last pre-activation.
    fn head_backward(&self, pre: &Matrix, upstream: &Matrix) -> Matrix {
        let mut delta = upstream.clone();
        match &self.head {
            Head::Linear => {}
            Head::TanhScaled { scale } => {
                for i in 0..delta.rows() {
                    let zi = pre.row(i);
                    for ((d, z), s) in delta.row_mut(i).iter_mut().zip(zi).zip(scale) {
                        let t = z.tanh();
                        *d *= s * (1.0 - t * t);
                    }
                }
            }
            Head::Gaussian {
                log_std_min,
                log_std_max,
            } => {
                let k = delta.cols() / 2;
                for i in 0..delta.rows() {
                    let zi = pre.row(i);
                    for (d, z) in delta.row_mut(i)[k..].iter_mut().zip(&zi[k..]) {
                        if *z < *log_std_min || *z > *log_std_max {
                            *d = 0.0;
                        }
                    }
                }
            }
        }
        delta
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        upstream: &Matrix,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<Gradients>, Option<Matrix>)> {
        if upstream.rows() != tape.output.rows() || upstream.cols() != self.output_dim() {
            return Err(Error::Dimension {
                context: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.cols(),
            });
        }
        let mut grads = want_params.then(|| Gradients::zeros_for(self));
        let mut delta = self.head_backward(&tape.pre_output, upstream);
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let a = &tape.activations[l];
            if let Some(g) = grads.as_mut() {
                for i in 0..a.rows() {
                    let ai = a.row(i);
                    let di = delta.row(i);
                    for (o, &d) in di.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, ai, &mut g.weights[l][o * fan_in..(o + 1) * fan_in]);
                            g.biases[l][o] += d;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let mut prev = Matrix::zeros(a.rows(), fan_in);
            for i in 0..a.rows() {
                let di = delta.row(i);
                let pi = prev.row_mut(i);
                for o in 0..fan_out {
                    let d = di[o];
                    if d != 0.0 {
                        axpy(d, &self.weights[l][o * fan_in..(o + 1) * fan_in], pi);
                    }
                }
            }
            if l > 0 {
                // ReLU derivative, read off the stored post-activation.
                for (p, &av) in prev.as_mut_slice().iter_mut().zip(a.as_slice()) {
                    if av <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok((grads, want_input.then_some(delta)))
    }

    /// Gradients of `sum(upstream * output)` w.r.t. the parameters and the input.
    pub fn backward_batch(&self, tape: &Tape, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        let (g, x) = self.backward_impl(tape, upstream, true, true)?;
        Ok((g.unwrap(), x.unwrap()))
    }

    pub fn param_gradients(&self, tape: &Tape, upstream: &Matrix) -> Result<Gradients> {
        Ok(self.backward_impl(tape, upstream, true, false)?.0.unwrap())
    }

    pub fn input_gradients(&self, tape: &Tape, upstream: &Matrix) -> Result<Matrix> {
        Ok(self.backward_impl(tape, upstream, false, true)?.1.unwrap())
    }

    /// Single-sample backward pass.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                context: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let tape = self.forward_batch(&Matrix::from_vec(1, input.len(), input.to_vec()))?;
        let up = Matrix::from_vec(1, upstream.len(), upstream.to_vec());
        let (g, x) = self.backward_batch(&tape, &up)?;
        Ok((g, x.into_vec()))
    }

    /// Copies parameters from `other`, which must have the same architecture.
    pub fn copy_params_from(&mut self, other: &Network) {
        assert_eq!(self.layer_sizes, other.layer_sizes);
        self.weights.clone_from(&other.weights);
        self.biases.clone_from(&other.biases);
    }
}

impl Gradients {
    pub fn zeros_for(net: &Network) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.all_mut() {
            *g *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self
            .weights
            .iter_mut()
            .zip(&other.weights)
            .chain(self.biases.iter_mut().zip(&other.biases))
        {
            axpy(1.0, b, a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}
