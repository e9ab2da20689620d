//! A small multilayer perceptron with explicit forward/backward passes and
//! SGD with momentum under a step-decay learning-rate schedule.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 math when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::matrix::{gemm, Matrix};

/// Dense layer `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: alloc::vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.as_slice().iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.as_mut_slice().iter_mut().chain(&mut self.bias)
    }
}

/// ReLU network; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    version: u64,
}

/// Activations kept by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer; entries after the first are ReLU outputs.
    inputs: Vec<Matrix>,
    version: u64,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Linear>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }
}

impl Mlp {
    /// Glorot-uniform weights and zero biases. `dims` lists the input width,
    /// every hidden width and the number of classes.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            bail!(
                InvalidParameter,
                "layer dimensions must be nonzero and at least two: {dims:?}"
            );
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Linear::zeros(fan_in, fan_out);
                for x in layer.weight.as_mut_slice() {
                    *x = rng.random_range(-limit..=limit);
                }
                layer
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    /// Rebuilds a network from explicit layers, checking that they chain.
    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            bail!(InvalidParameter, "network needs at least one layer");
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                bail!(Shape, "layer {k}: bias of {} for {} outputs", l.bias.len(), l.outputs());
            }
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                bail!(
                    Shape,
                    "layer {k} emits {} features but layer {} expects {}",
                    w[0].outputs(),
                    k + 1,
                    w[1].inputs()
                );
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Input width followed by every layer's output width.
    pub fn dims(&self) -> Vec<usize> {
        core::iter::once(self.layers[0].inputs())
            .chain(self.layers.iter().map(Linear::outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            bail!(Shape, "{} values for {} parameters", values.len(), self.num_params());
        }
        for (dst, src) in self.layers.iter_mut().flat_map(Linear::params_mut).zip(values) {
            *dst = *src;
        }
        self.version += 1;
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            bail!(
                Shape,
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            );
        }
        Ok(())
    }

    fn layer_forward(layer: &Linear, input: &Matrix, relu: bool) -> Matrix {
        let mut out = Matrix::zeros(input.rows(), layer.outputs());
        for i in 0..out.rows() {
            out.row_mut(i).copy_from_slice(&layer.bias);
        }
        gemm(1.0, input, false, &layer.weight, true, 1.0, &mut out);
        if relu {
            for x in out.as_mut_slice() {
                *x = x.max(0.0);
            }
        }
        out
    }

    /// Logits for a batch, without keeping activations.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut a = Self::layer_forward(&self.layers[0], x, last > 0);
        for (k, layer) in self.layers.iter().enumerate().skip(1) {
            a = Self::layer_forward(layer, &a, k < last);
        }
        Ok(a)
    }

    /// Logits plus the cache needed by [`Mlp::backward`].
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let out = Self::layer_forward(layer, &inputs[k], k < last);
            if k == last {
                return Ok((
                    out,
                    ForwardCache {
                        inputs,
                        version: self.version,
                    },
                ));
            }
            inputs.push(out);
        }
        unreachable!("network has at least one layer")
    }

    /// Parameter gradients of a scalar loss whose gradient with respect to
    /// the logits is `output_grad`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Gradients> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::Contract(alloc::format!(
                "forward cache is from parameter version {} but the network is at {}",
                cache.version,
                self.version
            )));
        }
        let n = cache.inputs[0].rows();
        if output_grad.shape() != (n, self.num_classes()) {
            bail!(
                Shape,
                "output gradient {:?} does not match logits ({n}, {})",
                output_grad.shape(),
                self.num_classes()
            );
        }
        let mut grads: Vec<Linear> = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[k];
            let mut dw = Linear::zeros(layer.inputs(), layer.outputs());
            gemm(1.0, &g, true, input, false, 0.0, &mut dw.weight);
            for row in g.iter_rows() {
                for (b, x) in dw.bias.iter_mut().zip(row) {
                    *b += x;
                }
            }
            grads.push(dw);
            if k > 0 {
                let mut prev = Matrix::zeros(n, layer.inputs());
                gemm(1.0, &g, false, &layer.weight, false, 0.0, &mut prev);
                for (d, a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
                g = prev;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

/// Multiplicative step decay: `lr(e) = initial · factor^{#milestones < e}`
/// for 1-based epoch `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            factor: 1.0,
            milestones: Vec::new(),
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.initial.is_finite() && s.initial > 0.0) {
            bail!(Config, "learning rate must be > 0, got {}", s.initial);
        }
        if !(s.factor.is_finite() && s.factor > 0.0) {
            bail!(Config, "decay factor must be > 0, got {}", s.factor);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bail!(Config, "weight decay must be >= 0, got {}", self.weight_decay);
        }
        Ok(())
    }
}

/// Momentum buffers plus the optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    velocity: Vec<f64>,
}

impl OptimState {
    pub fn new(config: SgdConfig, params: &Mlp) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: alloc::vec![0.0; params.num_params()],
        })
    }
}

/// `v ← μ v + g + λ θ;  θ ← θ − lr(epoch) v`.
pub fn sgd_step(params: &mut Mlp, grads: &Gradients, state: &mut OptimState, epoch: usize) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || grads
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(g, p)| g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len())
    {
        bail!(Shape, "gradient layout does not match the network");
    }
    if state.velocity.len() != params.num_params() {
        bail!(Shape, "optimizer state sized for a different network");
    }
    let lr = state.config.schedule.lr(epoch);
    let (mu, wd) = (state.config.momentum, state.config.weight_decay);
    let thetas = params.layers.iter_mut().flat_map(Linear::params_mut);
    let gs = grads.layers.iter().flat_map(Linear::params);
    for ((theta, g), v) in thetas.zip(gs).zip(state.velocity.iter_mut()) {
        *v = mu * *v + g + wd * *theta;
        *theta -= lr * *v;
    }
    params.version += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn random_input(rng: &mut seed::Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    // Σ w ⊙ logits with fixed random w: its logit gradient is w itself.
    fn probe_loss(net: &Mlp, x: &Matrix, w: &Matrix) -> f64 {
        let logits = net.predict(x).unwrap();
        logits.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let layers = vec![Linear::zeros(3, 4), Linear::zeros(4, 2)];
        let net = Mlp::from_layers(layers).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        assert!(net.predict(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let mut layer = Linear::zeros(3, 3);
        for i in 0..3 {
            layer.weight.set(i, i, 1.0);
        }
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0, 7.0], [2.0, 0.0, -3.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let mut rng = seed::stream(1, "t");
        let net = Mlp::new(&[4, 3, 2], &mut rng).unwrap();
        assert!(matches!(net.predict(&Matrix::zeros(1, 5)), Err(Error::Shape(_))));
        assert!(Mlp::from_layers(vec![Linear::zeros(3, 4), Linear::zeros(5, 2)]).is_err());
        assert!(Mlp::new(&[4], &mut rng).is_err());
    }

    #[test]
    fn single_layer_weight_gradient_is_outer_product() {
        let mut rng = seed::stream(2, "t");
        let net = Mlp::new(&[3, 2], &mut rng).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, -1.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = Matrix::from_rows(&[[0.5, -2.0]]).unwrap();
        let grads = net.backward(&cache, &g).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads.layers[0].weight.get(o, i), g.get(0, o) * x.get(0, i));
            }
        }
        assert_eq!(grads.layers[0].bias, vec![0.5, -2.0]);

        let zero = net.backward(&cache, &Matrix::zeros(1, 2)).unwrap();
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seed::stream(3, "t");
        let mut net = Mlp::new(&[5, 12, 8, 4], &mut rng).unwrap();
        assert!(net.num_params() <= 500);
        let x = random_input(&mut rng, 6, 5);
        let w = random_input(&mut rng, 6, 4);
        let (_, cache) = net.forward(&x).unwrap();
        let analytic = net.backward(&cache, &w).unwrap().flatten();
        let theta = net.params_flat();
        let h = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0f64;
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] += h;
            net.set_params_flat(&t).unwrap();
            let up = probe_loss(&net, &x, &w);
            t[k] -= 2.0 * h;
            net.set_params_flat(&t).unwrap();
            let down = probe_loss(&net, &x, &w);
            let fd = (up - down) / (2.0 * h);
            num += (fd - analytic[k]).powi(2);
            den = den.max(fd.abs()).max(analytic[k].abs());
        }
        assert!(num.sqrt() / den < 1e-5);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = seed::stream(4, "t");
        let mut net = Mlp::new(&[2, 3, 2], &mut rng).unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = Matrix::zeros(1, 2);
        let grads = net.backward(&cache, &g).unwrap();
        let cfg = SgdConfig {
            schedule: LrSchedule::constant(0.1),
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut state = OptimState::new(cfg, &net).unwrap();
        sgd_step(&mut net, &grads, &mut state, 1).unwrap();
        assert!(matches!(net.backward(&cache, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn sgd_examples() {
        let mut rng = seed::stream(5, "t");
        let mut net = Mlp::new(&[2, 2], &mut rng).unwrap();
        let before = net.params_flat();
        let grads = Gradients {
            layers: vec![Linear {
                weight: Matrix::from_rows(&[[0.1, -0.2], [0.3, 0.4]]).unwrap(),
                bias: vec![1.0, -1.0],
            }],
        };
        let vanilla = SgdConfig {
            schedule: LrSchedule::constant(1.0),
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut state = OptimState::new(vanilla.clone(), &net).unwrap();
        sgd_step(&mut net, &grads, &mut state, 1).unwrap();
        for ((a, b), g) in net.params_flat().iter().zip(&before).zip(grads.flatten()) {
            assert_abs_diff_eq!(*a, b - g, epsilon = 1e-15);
        }

        let frozen = net.params_flat();
        let zero = Gradients {
            layers: vec![Linear::zeros(2, 2)],
        };
        let mut state = OptimState::new(vanilla, &net).unwrap();
        sgd_step(&mut net, &zero, &mut state, 1).unwrap();
        assert_eq!(net.params_flat(), frozen);
    }

    #[test]
    fn momentum_accumulates() {
        let net0 = Mlp::from_layers(vec![Linear::zeros(1, 1)]).unwrap();
        let mut net = net0.clone();
        let g = Gradients {
            layers: vec![Linear {
                weight: Matrix::from_rows(&[[1.0]]).unwrap(),
                bias: vec![0.0],
            }],
        };
        let cfg = SgdConfig {
            schedule: LrSchedule::constant(0.5),
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut state = OptimState::new(cfg, &net).unwrap();
        sgd_step(&mut net, &g, &mut state, 1).unwrap();
        sgd_step(&mut net, &g, &mut state, 1).unwrap();
        // v1 = 1, v2 = 1.9; θ = -0.5·(1 + 1.9)
        assert_abs_diff_eq!(net.params_flat()[0], -1.45, epsilon = 1e-15);
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule {
            initial: 0.05,
            factor: 0.1,
            milestones: vec![150, 180, 210],
        };
        assert_eq!(s.lr(1), 0.05);
        assert_eq!(s.lr(150), 0.05);
        assert_abs_diff_eq!(s.lr(151), 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(s.lr(211), 0.05e-3, epsilon = 1e-15);
    }

    #[test]
    fn optimizer_config_is_validated() {
        let net = Mlp::from_layers(vec![Linear::zeros(1, 1)]).unwrap();
        let bad = SgdConfig {
            schedule: LrSchedule::constant(0.1),
            momentum: 1.0,
            weight_decay: 0.0,
        };
        assert!(OptimState::new(bad, &net).is_err());
    }
}
