use super::{dot, Head, Network};

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Maximum relative error between backpropagated and central-difference
/// gradients of `0.5 * |net(input)|^2`, over all parameters.
///
/// The relative error of one parameter is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
/// Parameters whose `±step` perturbation flips a ReLU or a log-std clamp are
/// skipped: the loss is not differentiable across those kinks.
pub fn grad_check(net: &Network, input: &[f64]) -> f64 {
    grad_check_with_step(net, input, GRAD_CHECK_STEP)
}

pub fn grad_check_with_step(net: &Network, input: &[f64], step: f64) -> f64 {
    assert_eq!(input.len(), net.input_dim(), "grad_check input width");
    let base = Trace::new(net, input);
    let upstream = base.output.clone();
    let (analytic, _) = net
        .backward(input, &upstream)
        .expect("shapes already validated");

    let mut worst: f64 = 0.0;
    for l in 0..net.num_layers() {
        let fan_in = net.layer_sizes[l];
        let a = &base.acts[l];
        for (idx, &g) in analytic.weights[l].iter().enumerate() {
            let (o, i) = (idx / fan_in, idx % fan_in);
            if let Some(n) = base.numeric(net, l, o, step * a[i], step) {
                worst = worst.max(rel_error(g, n));
            }
        }
        for (o, &g) in analytic.biases[l].iter().enumerate() {
            if let Some(n) = base.numeric(net, l, o, step, step) {
                worst = worst.max(rel_error(g, n));
            }
        }
    }
    worst
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Forward pass of one input keeping every pre- and post-activation.
struct Trace {
    /// `acts[l]` is the input to layer `l`.
    acts: Vec<Vec<f64>>,
    /// `pre[l]` is the affine output of layer `l`.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    fn new(net: &Network, input: &[f64]) -> Self {
        let last = net.num_layers() - 1;
        let mut acts = vec![input.to_vec()];
        let mut pre = Vec::new();
        for l in 0..=last {
            let z = affine(net, l, &acts[l]);
            if l < last {
                acts.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        let mut output = pre[last].clone();
        net.apply_head(&mut output);
        Self { acts, pre, output }
    }

    /// Central difference for the parameter that shifts `pre[l][o]` by `dz`
    /// per unit step. `None` when either perturbation crosses a kink.
    fn numeric(&self, net: &Network, l: usize, o: usize, dz: f64, step: f64) -> Option<f64> {
        if dz == 0.0 {
            return Some(0.0);
        }
        let plus = self.perturbed_output(net, l, o, dz)?;
        let minus = self.perturbed_output(net, l, o, -dz)?;
        let diff: f64 = plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| 0.5 * (p - m) * (p + m))
            .sum();
        Some(diff / (2.0 * step))
    }

    fn perturbed_output(&self, net: &Network, l: usize, o: usize, dz: f64) -> Option<Vec<f64>> {
        let last = net.num_layers() - 1;
        let mut z = self.pre[l].clone();
        z[o] += dz;
        if l < last {
            let new_a = z[o].max(0.0);
            if (z[o] > 0.0) != (self.pre[l][o] > 0.0) {
                return None;
            }
            // Rank-one update of the next layer's affine output.
            let fan_in = net.layer_sizes[l + 1];
            let da = new_a - self.acts[l + 1][o];
            let mut next = self.pre[l + 1].clone();
            for (k, zk) in next.iter_mut().enumerate() {
                *zk += net.weights[l + 1][k * fan_in + o] * da;
            }
            z = next;
            for m in l + 1..last {
                if z.iter().zip(&self.pre[m]).any(|(a, b)| (*a > 0.0) != (*b > 0.0)) {
                    return None;
                }
                let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
                z = affine(net, m + 1, &a);
            }
        }
        if let Head::Gaussian {
            log_std_min,
            log_std_max,
        } = net.head
        {
            let k = z.len() / 2;
            let region = |v: f64| (v < log_std_min) as i8 - (v > log_std_max) as i8;
            if z[k..]
                .iter()
                .zip(&self.pre[last][k..])
                .any(|(a, b)| region(*a) != region(*b))
            {
                return None;
            }
        }
        net.apply_head(&mut z);
        Some(z)
    }
}

fn affine(net: &Network, l: usize, a: &[f64]) -> Vec<f64> {
    let fan_in = net.layer_sizes[l];
    net.weights[l]
        .chunks_exact(fan_in)
        .zip(&net.biases[l])
        .map(|(w, b)| b + dot(w, a))
        .collect()
}
