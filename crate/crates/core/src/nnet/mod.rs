//! Dense feed-forward networks with exact backpropagation.
//!
//! Weight matrices are stored row-major (`out × in`), which is also the order
//! in which gradients are flattened when they become attack features.

mod checkpoint;

pub(crate) use checkpoint::{fmt_f64, parse_row, write_row};
pub use checkpoint::{read_section, LineReader, CHECKPOINT_MAGIC};

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Sum of squared errors over output coordinates.
    Mse,
    /// Binary cross-entropy on a sigmoid output.
    Bce,
}

/// Shape of one layer: `in_dim → out_dim` followed by `activation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Builds a chained architecture from a width list; hidden layers use
/// `hidden`, the final layer uses `last`.
pub fn chain(widths: &[usize], hidden: Activation, last: Activation) -> Vec<LayerSpec> {
    let n = widths.len().saturating_sub(1);
    (0..n)
        .map(|k| {
            let act = if k + 1 == n { last } else { hidden };
            LayerSpec::new(widths[k], widths[k + 1], act)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Row-major `out_dim × in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.spec.activation
    }

    fn pre_activation(&self, input: &[f64]) -> Vec<f64> {
        let n_in = self.in_dim();
        self.weights
            .chunks_exact(n_in)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, input) + b)
            .collect()
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    seed: u64,
}

/// Per-layer values recorded by [`DenseNet::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub pre_activations: Vec<Vec<f64>>,
    /// Post-activation output of every layer; the last entry is the network output.
    pub outputs: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub layers: Vec<LayerGradient>,
    pub loss: f64,
}

impl LayerGradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            loss: 0.0,
        }
    }

    /// `self += scale * other`, including the loss value.
    pub fn accumulate(&mut self, other: &LayerGradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        self.loss += scale * other.loss;
    }

    /// All weights then bias of layer 0, then layer 1, ... (matches [`DenseNet::params`]).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

impl DenseNet {
    /// Glorot-uniform weights from a ChaCha8 stream seeded with `seed`; zero biases.
    pub fn init(arch: &[LayerSpec], seed: u64) -> Result<Self> {
        if arch.is_empty() {
            return Err(Error::invalid("architecture has no layers"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.len());
        for (k, spec) in arch.iter().enumerate() {
            if spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(Error::invalid(format!("layer {k} has zero size")));
            }
            if k > 0 && arch[k - 1].out_dim != spec.in_dim {
                return Err(Error::dim(
                    format!("layer {k} input"),
                    arch[k - 1].out_dim,
                    spec.in_dim,
                ));
            }
            let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            let weights = (0..spec.in_dim * spec.out_dim)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            layers.push(Layer {
                spec: *spec,
                weights,
                bias: vec![0.0; spec.out_dim],
            });
        }
        Ok(Self { layers, seed })
    }

    /// Assembles a network from explicit layers, checking the chain and finiteness.
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.in_dim() == 0 || l.out_dim() == 0 {
                return Err(Error::invalid(format!("layer {k} has zero size")));
            }
            if l.weights.len() != l.in_dim() * l.out_dim() {
                return Err(Error::dim(
                    format!("layer {k} weights"),
                    l.in_dim() * l.out_dim(),
                    l.weights.len(),
                ));
            }
            if l.bias.len() != l.out_dim() {
                return Err(Error::dim(
                    format!("layer {k} bias"),
                    l.out_dim(),
                    l.bias.len(),
                ));
            }
            if k > 0 && layers[k - 1].out_dim() != l.in_dim() {
                return Err(Error::dim(
                    format!("layer {k} input"),
                    layers[k - 1].out_dim(),
                    l.in_dim(),
                ));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: k,
                    context: "non-finite parameter".into(),
                });
            }
        }
        Ok(Self { layers, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(
                "flat parameters",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<ActivationTrace> {
        if input.len() != self.in_dim() {
            return Err(Error::dim("network input", self.in_dim(), input.len()));
        }
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = outputs.last().map(Vec::as_slice).unwrap_or(input);
            let z = layer.pre_activation(x);
            let act = layer.activation();
            outputs.push(z.iter().map(|&v| act.apply(v)).collect());
            pre_activations.push(z);
        }
        Ok(ActivationTrace {
            pre_activations,
            outputs,
        })
    }

    /// Output only.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward(input)?;
        Ok(trace.outputs.pop().unwrap_or_default())
    }

    /// Gradients of `loss_kind(output, target)` with respect to every weight and bias.
    pub fn backward(
        &self,
        input: &[f64],
        target: &[f64],
        loss_kind: LossKind,
    ) -> Result<LayerGradients> {
        let trace = self.forward(input)?;
        let (loss, delta) = self.output_delta(&trace, target, loss_kind)?;
        let (mut grads, _) = self.backprop(input, &trace, delta)?;
        grads.loss = loss;
        Ok(grads)
    }

    /// Loss value and its gradient with respect to the final pre-activation.
    pub fn output_delta(
        &self,
        trace: &ActivationTrace,
        target: &[f64],
        loss_kind: LossKind,
    ) -> Result<(f64, Vec<f64>)> {
        let last = self.layers.len() - 1;
        let y = trace.output();
        if target.len() != y.len() {
            return Err(Error::dim("loss target", y.len(), target.len()));
        }
        let act = self.layers[last].activation();
        match loss_kind {
            LossKind::Mse => {
                let loss = mse(y, target);
                let delta = y
                    .iter()
                    .zip(target)
                    .map(|(&o, &t)| 2.0 * (o - t) * act.derivative_from_output(o))
                    .collect();
                Ok((loss, delta))
            }
            LossKind::Bce => {
                if act != Activation::Sigmoid {
                    return Err(Error::invalid("bce loss requires a sigmoid output layer"));
                }
                if target.iter().any(|&t| t != 0.0 && t != 1.0) {
                    return Err(Error::invalid("bce targets must be 0 or 1"));
                }
                let z = &trace.pre_activations[last];
                let loss = z
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| bce_from_logit(z, t))
                    .sum();
                let delta = y.iter().zip(target).map(|(&p, &t)| p - t).collect();
                Ok((loss, delta))
            }
        }
    }

    /// Back-propagates `delta` (gradient w.r.t. the final pre-activation).
    /// Returns parameter gradients (loss field zero) and the gradient w.r.t. the input.
    pub fn backprop(
        &self,
        input: &[f64],
        trace: &ActivationTrace,
        delta: Vec<f64>,
    ) -> Result<(LayerGradients, Vec<f64>)> {
        let n = self.layers.len();
        if trace.outputs.len() != n {
            return Err(Error::dim("activation trace", n, trace.outputs.len()));
        }
        if delta.len() != self.out_dim() {
            return Err(Error::dim("output delta", self.out_dim(), delta.len()));
        }
        let mut grads = LayerGradients::zeros_like(self);
        let input_grad = self.backprop_accumulate(input, trace, delta, &mut grads, 1.0)?;
        Ok((grads, input_grad))
    }

    /// Adds `scale ×` the gradients [`DenseNet::backprop`] would return into
    /// `acc` without materialising them, and returns the input gradient.
    pub fn backprop_accumulate(
        &self,
        input: &[f64],
        trace: &ActivationTrace,
        mut delta: Vec<f64>,
        acc: &mut LayerGradients,
        scale: f64,
    ) -> Result<Vec<f64>> {
        let n = self.layers.len();
        if trace.outputs.len() != n {
            return Err(Error::dim("activation trace", n, trace.outputs.len()));
        }
        if delta.len() != self.out_dim() {
            return Err(Error::dim("output delta", self.out_dim(), delta.len()));
        }
        self.check_grad_shapes(acc)?;
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let x = if k == 0 { input } else { &trace.outputs[k - 1] };
            let n_in = layer.in_dim();
            let x_max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let target = &mut acc.layers[k];
            let mut upstream = vec![0.0; n_in];
            for ((row, g_row), (&d, gb)) in layer
                .weights
                .chunks_exact(n_in)
                .zip(target.weights.chunks_exact_mut(n_in))
                .zip(delta.iter().zip(target.bias.iter_mut()))
            {
                if d == 0.0 {
                    continue;
                }
                if !(d * x_max).is_finite() {
                    return Err(Error::Numerical {
                        layer: k,
                        context: "backward pass".into(),
                    });
                }
                let sd = scale * d;
                for (g, &xi) in g_row.iter_mut().zip(x) {
                    *g += sd * xi;
                }
                *gb += sd;
                for (u, &w) in upstream.iter_mut().zip(row) {
                    *u += w * d;
                }
            }
            if delta.iter().chain(&upstream).any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: k,
                    context: "backward pass".into(),
                });
            }
            delta = if k > 0 {
                let act = self.layers[k - 1].activation();
                upstream
                    .iter()
                    .zip(&trace.outputs[k - 1])
                    .map(|(&u, &y)| u * act.derivative_from_output(y))
                    .collect()
            } else {
                upstream
            };
        }
        Ok(delta)
    }

    /// Like [`DenseNet::backprop`] but starting from the gradient with respect
    /// to the post-activation output.
    pub fn backprop_output_grad(
        &self,
        input: &[f64],
        trace: &ActivationTrace,
        grad_output: &[f64],
    ) -> Result<(LayerGradients, Vec<f64>)> {
        if grad_output.len() != self.out_dim() {
            return Err(Error::dim(
                "output gradient",
                self.out_dim(),
                grad_output.len(),
            ));
        }
        let delta = self.output_grad_to_delta(trace, grad_output);
        self.backprop(input, trace, delta)
    }

    fn output_grad_to_delta(&self, trace: &ActivationTrace, grad_output: &[f64]) -> Vec<f64> {
        let act = self.layers[self.layers.len() - 1].activation();
        grad_output
            .iter()
            .zip(trace.output())
            .map(|(&g, &y)| g * act.derivative_from_output(y))
            .collect()
    }

    /// Accumulating form of [`DenseNet::backprop_output_grad`].
    pub fn backprop_output_grad_accumulate(
        &self,
        input: &[f64],
        trace: &ActivationTrace,
        grad_output: &[f64],
        acc: &mut LayerGradients,
        scale: f64,
    ) -> Result<Vec<f64>> {
        if grad_output.len() != self.out_dim() {
            return Err(Error::dim(
                "output gradient",
                self.out_dim(),
                grad_output.len(),
            ));
        }
        let delta = self.output_grad_to_delta(trace, grad_output);
        self.backprop_accumulate(input, trace, delta, acc, scale)
    }

    /// `w ← w − lr·g` in place.
    pub fn apply_gradients(&mut self, grads: &LayerGradients, learning_rate: f64) -> Result<()> {
        self.check_grad_shapes(grads)?;
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in l.weights.iter_mut().zip(&g.weights) {
                *w -= learning_rate * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= learning_rate * d;
            }
        }
        Ok(())
    }

    fn check_grad_shapes(&self, grads: &LayerGradients) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim(
                "gradient layers",
                self.layers.len(),
                grads.layers.len(),
            ));
        }
        for (k, (l, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            if l.weights.len() != g.weights.len() || l.bias.len() != g.bias.len() {
                return Err(Error::dim(
                    format!("gradient layer {k}"),
                    l.weights.len() + l.bias.len(),
                    g.weights.len() + g.bias.len(),
                ));
            }
        }
        Ok(())
    }
}

/// One plain SGD step, returning the updated network.
pub fn sgd_step(net: &DenseNet, grads: &LayerGradients, learning_rate: f64) -> Result<DenseNet> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let mut next = net.clone();
    next.apply_gradients(grads, learning_rate)?;
    Ok(next)
}

/// Sum of squared differences.
pub fn mse(output: &[f64], target: &[f64]) -> f64 {
    output
        .iter()
        .zip(target)
        .map(|(o, t)| (o - t) * (o - t))
        .sum()
}

/// `-(t ln σ(z) + (1-t) ln(1-σ(z)))`, evaluated stably from the logit.
pub fn bce_from_logit(z: f64, t: f64) -> f64 {
    softplus(z) - t * z
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, act: Activation) -> DenseNet {
        DenseNet::from_layers(
            vec![Layer {
                spec: LayerSpec::new(1, 1, act),
                weights: vec![w],
                bias: vec![0.0],
            }],
            0,
        )
        .unwrap()
    }

    /// Straight-line evaluator, independent of `Layer::pre_activation`.
    fn oracle_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in net.layers() {
            let mut next = Vec::new();
            for i in 0..l.out_dim() {
                let mut s = l.bias[i];
                for j in 0..l.in_dim() {
                    s += l.weights[i * l.in_dim() + j] * a[j];
                }
                next.push(match l.activation() {
                    Activation::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                    Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                    Activation::Identity => s,
                });
            }
            a = next;
        }
        a
    }

    fn central_diff(net: &DenseNet, x: &[f64], t: &[f64], kind: LossKind, h: f64) -> Vec<f64> {
        let base = net.params();
        let mut probe = net.clone();
        let loss = |n: &DenseNet| {
            let tr = n.forward(x).unwrap();
            n.output_delta(&tr, t, kind).unwrap().0
        };
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] = base[i] + h;
                probe.set_params(&p).unwrap();
                let up = loss(&probe);
                p[i] = base[i] - h;
                probe.set_params(&p).unwrap();
                let down = loss(&probe);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Finite differences are meaningless across a relu kink.
    fn near_kink(net: &DenseNet, x: &[f64]) -> bool {
        let tr = net.forward(x).unwrap();
        net.layers()
            .iter()
            .zip(&tr.pre_activations)
            .any(|(l, z)| l.activation() == Activation::Relu && z.iter().any(|v| v.abs() < 1e-3))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = single(1.0, Activation::Identity);
        assert_eq!(net.predict(&[3.5]).unwrap(), vec![3.5]);
    }

    #[test]
    fn relu_clamps_negative() {
        let net = single(1.0, Activation::Relu);
        assert_eq!(net.predict(&[-2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let arch = chain(&[4, 6, 3], Activation::Relu, Activation::Sigmoid);
        let net = DenseNet::init(&arch, 11).unwrap();
        let x = [0.3, -1.2, 0.7, 2.0];
        let got = net.predict(&x).unwrap();
        let want = oracle_forward(&net, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
        assert!(got.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_rejects_wrong_input_len() {
        let net = single(1.0, Activation::Identity);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn forward_is_pure() {
        let net = DenseNet::init(
            &chain(&[3, 5, 2], Activation::Relu, Activation::Identity),
            3,
        )
        .unwrap();
        let a = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        let b = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mse_single_identity_gradient() {
        let net = single(0.0, Activation::Identity);
        let g = net.backward(&[1.0], &[1.0], LossKind::Mse).unwrap();
        assert_eq!(g.loss, 1.0);
        assert_eq!(g.layers[0].weights, vec![-2.0]);
        let fd = central_diff(&net, &[1.0], &[1.0], LossKind::Mse, 1e-5);
        assert!((fd[0] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn mse_at_target_has_zero_gradient() {
        let net = DenseNet::init(
            &chain(&[3, 4, 2], Activation::Relu, Activation::Identity),
            5,
        )
        .unwrap();
        let x = [0.5, -0.25, 1.0];
        let y = net.predict(&x).unwrap();
        let g = net.backward(&x, &y, LossKind::Mse).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..20u64 {
            let kind = if case % 2 == 0 {
                LossKind::Mse
            } else {
                LossKind::Bce
            };
            let last = if kind == LossKind::Bce {
                Activation::Sigmoid
            } else {
                Activation::Identity
            };
            let widths = [3, 5, 4, if kind == LossKind::Bce { 1 } else { 2 }];
            let net = DenseNet::init(&chain(&widths, Activation::Relu, last), case).unwrap();
            let mut x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            while near_kink(&net, &x) {
                x = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            }
            let t: Vec<f64> = match kind {
                LossKind::Bce => vec![(case % 4 == 1) as u8 as f64],
                LossKind::Mse => (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let g = net.backward(&x, &t, kind).unwrap().flatten();
            let fd = central_diff(&net, &x, &t, kind, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!(rel_err(*a, *b) <= 1e-4, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let net = DenseNet::from_layers(
            vec![Layer {
                spec: LayerSpec::new(1, 1, Activation::Sigmoid),
                weights: vec![0.0],
                bias: vec![0.0],
            }],
            0,
        )
        .unwrap();
        for t in [0.0, 1.0] {
            let g = net.backward(&[4.0], &[t], LossKind::Bce).unwrap();
            assert!((g.loss - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_requires_sigmoid_and_binary_targets() {
        let net = single(1.0, Activation::Identity);
        assert!(net.backward(&[1.0], &[1.0], LossKind::Bce).is_err());
        let sig = single(1.0, Activation::Sigmoid);
        assert!(sig.backward(&[1.0], &[0.5], LossKind::Bce).is_err());
    }

    #[test]
    fn non_finite_reports_layer() {
        let net = single(1e308, Activation::Identity);
        let err = net.backward(&[1e308], &[0.0], LossKind::Mse).unwrap_err();
        assert!(matches!(err, Error::Numerical { layer: 0, .. }));
    }

    #[test]
    fn sgd_single_step() {
        let net = single(1.0, Activation::Identity);
        let grads = LayerGradients {
            layers: vec![LayerGradient {
                weights: vec![2.0],
                bias: vec![0.0],
            }],
            loss: 0.0,
        };
        let next = sgd_step(&net, &grads, 0.1).unwrap();
        assert!((next.layers()[0].weights[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let net = DenseNet::init(
            &chain(&[2, 3, 1], Activation::Relu, Activation::Identity),
            1,
        )
        .unwrap();
        let next = sgd_step(&net, &LayerGradients::zeros_like(&net), 0.5).unwrap();
        assert_eq!(net, next);
    }

    #[test]
    fn sgd_quadratic_converges_geometrically() {
        let mut net = single(0.0, Activation::Identity);
        for _ in 0..100 {
            let w = net.layers()[0].weights[0];
            let grads = LayerGradients {
                layers: vec![LayerGradient {
                    weights: vec![2.0 * (w - 3.0)],
                    bias: vec![0.0],
                }],
                loss: (w - 3.0).powi(2),
            };
            net = sgd_step(&net, &grads, 0.1).unwrap();
        }
        let w = net.layers()[0].weights[0];
        // |w - 3| = 3 * 0.8^100
        assert!((w - 3.0).abs() < 1e-6);
        assert!(((w - 3.0).abs() - 3.0 * 0.8f64.powi(100)).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let net = DenseNet::init(
            &chain(&[2, 3, 1], Activation::Relu, Activation::Identity),
            1,
        )
        .unwrap();
        let other =
            DenseNet::init(&chain(&[2, 1], Activation::Relu, Activation::Identity), 1).unwrap();
        assert!(sgd_step(&net, &LayerGradients::zeros_like(&other), 0.1).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let arch = chain(&[5, 7, 3], Activation::Relu, Activation::Identity);
        let a = DenseNet::init(&arch, 42).unwrap();
        let b = DenseNet::init(&arch, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let c = DenseNet::init(&arch, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_weight_mean_within_three_sigma() {
        // 100 × 100 layer: 10^4 draws from U(-a, a), a = sqrt(6/200).
        let net = DenseNet::init(&[LayerSpec::new(100, 100, Activation::Relu)], 7).unwrap();
        let w = &net.layers()[0].weights;
        let a = (6.0f64 / 200.0).sqrt();
        let sigma = a / 3f64.sqrt() / (w.len() as f64).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * sigma);
        assert!(w.iter().all(|v| v.abs() < a));
    }

    #[test]
    fn init_rejects_empty_and_zero_size() {
        assert!(DenseNet::init(&[], 0).is_err());
        assert!(DenseNet::init(&[LayerSpec::new(0, 2, Activation::Relu)], 0).is_err());
        let broken = [
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(4, 1, Activation::Identity),
        ];
        assert!(DenseNet::init(&broken, 0).is_err());
    }
}
