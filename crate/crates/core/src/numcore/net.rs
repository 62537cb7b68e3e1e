use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::tensor::{matvec, matvec_transpose, Tensor};

/// Elementwise nonlinearity applied after each affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative given both the pre-activation and the activated value.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => post * (1.0 - post),
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Sigmoid),
            2 => Ok(Activation::Identity),
            other => Err(Error::Data(format!("unknown activation tag {other}"))),
        }
    }
}

/// One affine layer: out x in weights, out biases, then an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Ordered layer stack; also reused as the carrier for parameter gradients,
/// which share the exact shapes of the parameters they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Checks that adjacent layer dimensions chain and all entries are finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 {
                return Err(Error::Config(format!("layer {i} weight is not a matrix")));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Config(format!(
                    "layer {i} bias length {} != rows {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if i > 0 && layer.in_dim() != self.layers[i - 1].out_dim() {
                return Err(Error::Config(format!(
                    "layer {i} input width {} does not chain with previous output {}",
                    layer.in_dim(),
                    self.layers[i - 1].out_dim()
                )));
            }
            let finite = layer.weight.as_slice().iter().all(|v| v.is_finite())
                && layer.bias.as_slice().iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numeric(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Zero-valued gradients (or parameters) with identical shapes.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// self += a * other, entry by entry over every weight and bias.
    pub fn axpy(&mut self, a: f64, other: &ModelParams) {
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in l.weight.as_mut_slice().iter_mut().zip(o.weight.as_slice()) {
                *x += a * y;
            }
            for (x, y) in l.bias.as_mut_slice().iter_mut().zip(o.bias.as_slice()) {
                *x += a * y;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for l in self.layers.iter_mut() {
            for x in l.weight.as_mut_slice() {
                *x *= a;
            }
            for x in l.bias.as_mut_slice() {
                *x *= a;
            }
        }
    }

    /// Flat inner product over every weight and bias.
    pub fn dot(&self, other: &ModelParams) -> f64 {
        let mut acc = 0.0;
        for (l, o) in self.layers.iter().zip(&other.layers) {
            for (x, y) in l.weight.as_slice().iter().zip(o.weight.as_slice()) {
                acc += x * y;
            }
            for (x, y) in l.bias.as_slice().iter().zip(o.bias.as_slice()) {
                acc += x * y;
            }
        }
        acc
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.as_slice().iter().all(|v| v.is_finite())
                && l.bias.as_slice().iter().all(|v| v.is_finite())
        })
    }
}

/// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
pub fn init_params<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> ModelParams {
    assert!(dims.len() >= 2, "need at least input and output dims");
    assert_eq!(activations.len(), dims.len() - 1);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| {
                let u: f64 = rng.gen();
                -limit + u * 2.0 * limit
            })
            .collect();
        layers.push(Layer {
            weight: Tensor::from_vec(vec![fan_out, fan_in], data).unwrap(),
            bias: Tensor::zeros(vec![fan_out]),
            activation: activations[i],
        });
    }
    ModelParams { layers }
}

/// Per-layer pre-activations and activations recorded by a forward pass;
/// consumed by `backward_from_trace`.
pub struct ForwardTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().unwrap()
    }
}

pub fn forward_trace(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(Error::Config(format!(
            "input width {} does not match first layer width {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post = Vec::with_capacity(params.layers.len());
    let mut cur = x.to_vec();
    for layer in &params.layers {
        let mut z = matvec(&layer.weight, &cur);
        for (zv, b) in z.iter_mut().zip(layer.bias.as_slice()) {
            *zv += b;
        }
        let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
        pre.push(z);
        cur = a.clone();
        post.push(a);
    }
    Ok(ForwardTrace {
        input: x.to_vec(),
        pre,
        post,
    })
}

/// Deterministic affine+activation chain evaluation.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_trace(params, x)?.output().to_vec())
}

/// Reverse-mode pass over a recorded trace. `out_grad` is the loss gradient
/// at the network output (post-activation). Returns exact parameter
/// gradients plus the gradient with respect to the input vector.
pub fn backward_from_trace(
    params: &ModelParams,
    trace: &ForwardTrace,
    out_grad: &[f64],
) -> Result<(ModelParams, Vec<f64>)> {
    if out_grad.len() != params.output_dim() {
        return Err(Error::Config(format!(
            "output gradient width {} does not match output dim {}",
            out_grad.len(),
            params.output_dim()
        )));
    }
    let mut grads = params.zeros_like();
    let mut upstream = out_grad.to_vec();
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let pre = &trace.pre[idx];
        let post = &trace.post[idx];
        // delta = dL/dz for this layer
        let delta: Vec<f64> = upstream
            .iter()
            .zip(pre.iter().zip(post))
            .map(|(g, (&z, &a))| g * layer.activation.derivative(z, a))
            .collect();
        let below: &[f64] = if idx == 0 {
            &trace.input
        } else {
            &trace.post[idx - 1]
        };
        let gw = grads.layers[idx].weight.as_mut_slice();
        let cols = layer.in_dim();
        for (r, d) in delta.iter().enumerate() {
            for (c, x) in below.iter().enumerate() {
                gw[r * cols + c] += d * x;
            }
        }
        for (gb, d) in grads.layers[idx].bias.as_mut_slice().iter_mut().zip(&delta) {
            *gb += d;
        }
        upstream = matvec_transpose(&layer.weight, &delta);
    }
    Ok((grads, upstream))
}

/// Convenience wrapper: runs the forward pass and differentiates in one call.
pub fn backward(params: &ModelParams, x: &[f64], out_grad: &[f64]) -> Result<ModelParams> {
    let trace = forward_trace(params, x)?;
    Ok(backward_from_trace(params, &trace, out_grad)?.0)
}

/// Which update rule drives parameter descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Stateful optimizer for one parameter set. Plain SGD (momentum 0) reduces
/// bit-exactly to `theta -= lr * grad`.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    step: u64,
    slot1: Option<ModelParams>,
    slot2: Option<ModelParams>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            slot1: None,
            slot2: None,
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let vel = self.slot1.get_or_insert_with(|| params.zeros_like());
                for (layer, (v, g)) in params
                    .layers
                    .iter_mut()
                    .zip(vel.layers.iter_mut().zip(&grads.layers))
                {
                    for ((p, vv), gg) in layer
                        .weight
                        .as_mut_slice()
                        .iter_mut()
                        .zip(v.weight.as_mut_slice())
                        .zip(g.weight.as_slice())
                    {
                        *vv = momentum * *vv + gg;
                        *p -= self.lr * *vv;
                    }
                    for ((p, vv), gg) in layer
                        .bias
                        .as_mut_slice()
                        .iter_mut()
                        .zip(v.bias.as_mut_slice())
                        .zip(g.bias.as_slice())
                    {
                        *vv = momentum * *vv + gg;
                        *p -= self.lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let m = self
                    .slot1
                    .get_or_insert_with(|| params.zeros_like())
                    .layers
                    .iter_mut();
                let v = self
                    .slot2
                    .get_or_insert_with(|| params.zeros_like())
                    .layers
                    .iter_mut();
                for (((layer, g), ml), vl) in params.layers.iter_mut().zip(&grads.layers).zip(m).zip(v)
                {
                    let update = |p: &mut f64, mm: &mut f64, vv: &mut f64, gg: f64, lr: f64| {
                        *mm = beta1 * *mm + (1.0 - beta1) * gg;
                        *vv = beta2 * *vv + (1.0 - beta2) * gg * gg;
                        let mhat = *mm / bc1;
                        let vhat = *vv / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    };
                    for ((p, mm), (vv, gg)) in layer
                        .weight
                        .as_mut_slice()
                        .iter_mut()
                        .zip(ml.weight.as_mut_slice())
                        .zip(vl.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()))
                    {
                        update(p, mm, vv, *gg, self.lr);
                    }
                    for ((p, mm), (vv, gg)) in layer
                        .bias
                        .as_mut_slice()
                        .iter_mut()
                        .zip(ml.bias.as_mut_slice())
                        .zip(vl.bias.as_mut_slice().iter_mut().zip(g.bias.as_slice()))
                    {
                        update(p, mm, vv, *gg, self.lr);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(rows: usize, cols: usize, w: Vec<f64>, b: Vec<f64>, act: Activation) -> Layer {
        Layer {
            weight: Tensor::from_vec(vec![rows, cols], w).unwrap(),
            bias: Tensor::vector(b).unwrap(),
            activation: act,
        }
    }

    #[test]
    fn identity_layer_is_identity() {
        let params = ModelParams {
            layers: vec![layer(
                2,
                2,
                vec![1.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0],
                Activation::Identity,
            )],
        };
        let y = forward(&params, &[3.5, -1.25]).unwrap();
        assert_eq!(y, vec![3.5, -1.25]);
    }

    #[test]
    fn zero_weight_layer_returns_bias() {
        let params = ModelParams {
            layers: vec![layer(
                2,
                3,
                vec![0.0; 6],
                vec![0.7, -0.2],
                Activation::Identity,
            )],
        };
        let y = forward(&params, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.7, -0.2]);
    }

    #[test]
    fn two_layer_forward_matches_hand_calc() {
        // Hidden: relu(W1 x + b1), output: W2 h + b2, recomputed inline
        // term by term as the independent check.
        let params = ModelParams {
            layers: vec![
                layer(
                    2,
                    2,
                    vec![0.5, -0.25, 0.75, 1.0],
                    vec![0.1, -0.3],
                    Activation::Relu,
                ),
                layer(1, 2, vec![2.0, -1.5], vec![0.05], Activation::Identity),
            ],
        };
        let x = [0.4, -0.8];
        let z1: f64 = 0.5 * 0.4 + (-0.25) * (-0.8) + 0.1; // 0.5
        let z2: f64 = 0.75 * 0.4 + 1.0 * (-0.8) - 0.3; // -0.8 -> relu 0
        let h = [z1.max(0.0), z2.max(0.0)];
        let expect = 2.0 * h[0] + (-1.5) * h[1] + 0.05;
        let y = forward(&params, &x).unwrap();
        assert!((y[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = init_params(
            &[3, 4, 2],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        );
        let grads = backward(&params, &[0.3, -0.2, 0.9], &[0.0, 0.0]).unwrap();
        for l in &grads.layers {
            assert!(l.weight.as_slice().iter().all(|&v| v == 0.0));
            assert!(l.bias.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_linear_layer_grad_is_outer_product() {
        // Squared-error residual r at the output of y = W x + b gives
        // dL/dW = outer(r, x), dL/db = r.
        let params = ModelParams {
            layers: vec![layer(
                2,
                3,
                vec![0.1, 0.2, 0.3, -0.1, 0.4, 0.0],
                vec![0.0, 0.5],
                Activation::Identity,
            )],
        };
        let x = [1.0, -2.0, 0.5];
        let residual = [0.3, -0.7];
        let grads = backward(&params, &x, &residual).unwrap();
        let gw = grads.layers[0].weight.as_slice();
        for r in 0..2 {
            for c in 0..3 {
                assert!((gw[r * 3 + c] - residual[r] * x[c]).abs() < 1e-15);
            }
        }
        assert_eq!(grads.layers[0].bias.as_slice(), &residual);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_params(&[3, 2], &[Activation::Identity], &mut rng);
        assert!(forward(&params, &[1.0, 2.0]).is_err());
        assert!(backward(&params, &[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = init_params(
            &[10, 6, 3],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        );
        let limits = [(6.0f64 / 16.0).sqrt(), (6.0f64 / 9.0).sqrt()];
        for (l, lim) in params.layers.iter().zip(limits) {
            assert!(l.weight.as_slice().iter().all(|v| v.abs() <= lim));
            assert!(l.bias.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn plain_sgd_is_exact_descent() {
        let mut params = ModelParams {
            layers: vec![layer(
                1,
                2,
                vec![1.0, -2.0],
                vec![0.5],
                Activation::Identity,
            )],
        };
        let mut grads = params.zeros_like();
        grads.layers[0].weight.as_mut_slice()[0] = 0.25;
        grads.layers[0].weight.as_mut_slice()[1] = -0.5;
        grads.layers[0].bias.as_mut_slice()[0] = 1.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1);
        opt.apply(&mut params, &grads);
        assert_eq!(
            params.layers[0].weight.as_slice(),
            &[1.0 - 0.1 * 0.25, -2.0 - 0.1 * (-0.5)]
        );
        assert_eq!(params.layers[0].bias.as_slice(), &[0.5 - 0.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * g/(|g| + eps').
        let mut params = ModelParams {
            layers: vec![layer(1, 1, vec![0.0], vec![0.0], Activation::Identity)],
        };
        let mut grads = params.zeros_like();
        grads.layers[0].weight.as_mut_slice()[0] = 3.0;
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), 0.01);
        opt.apply(&mut params, &grads);
        let got = params.layers[0].weight.as_slice()[0];
        assert!((got + 0.01).abs() < 1e-6, "got {got}");
    }
}
