//! Fully connected networks with hand-written backward passes.
//!
//! Weights are stored `in × out`, so a batch `X` (rows = samples) maps to
//! `act(X·W + b)`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::par::Exec;
use crate::numerics::params::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl MlpCache {
    pub fn batch_rows(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists every layer width
    /// including input and output; hidden layers use `hidden`, the last layer
    /// uses `output`.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::contract(
                "Mlp::init",
                format!("invalid layer sizes {sizes:?}"),
            ));
        }
        let n_layers = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let weight = Matrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng));
                Dense {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation: if l + 1 == n_layers { output } else { hidden },
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.in_dim(), l.out_dim()),
                    bias: vec![0.0; l.out_dim()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    /// Layer widths from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.in_dim()];
        s.extend(self.layers.iter().map(Dense::out_dim));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("Mlp", "network has no layers"));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Mlp",
                    format!(
                        "layer {l} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        l + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(
                    "Mlp",
                    format!("layer {l} bias has length {}", layer.bias.len()),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!(
                    "input has {} columns, network expects {}",
                    input.cols(),
                    self.in_dim()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, MlpCache)> {
        self.forward_with(input, Exec::default())
    }

    pub fn forward_with(&self, input: &Matrix, exec: Exec) -> Result<(Matrix, MlpCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let z = affine(&x, layer, exec)?;
            let act = layer.activation;
            let y = z.map(|v| act.apply(v));
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        Ok((x, MlpCache { inputs, pre }))
    }

    /// Forward pass that keeps no activation record.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.predict_with(input, Exec::default())
    }

    pub fn predict_with(&self, input: &Matrix, exec: Exec) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = affine(input, &self.layers[0], exec)?;
        apply_inplace(&mut x, self.layers[0].activation);
        for layer in &self.layers[1..] {
            x = affine(&x, layer, exec)?;
            apply_inplace(&mut x, layer.activation);
        }
        Ok(x)
    }

    /// Gradients of a scalar whose gradient w.r.t. the network output is
    /// `output_grad`. Returns parameter gradients (same layout as `self`) and
    /// the gradient w.r.t. the input batch.
    pub fn backward(&self, cache: &MlpCache, output_grad: &Matrix) -> Result<(Mlp, Matrix)> {
        self.backward_with(cache, output_grad, Exec::default())
    }

    pub fn backward_with(
        &self,
        cache: &MlpCache,
        output_grad: &Matrix,
        exec: Exec,
    ) -> Result<(Mlp, Matrix)> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::contract(
                "mlp_backward",
                format!(
                    "cache holds {} layers, network has {}",
                    cache.pre.len(),
                    self.layers.len()
                ),
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if cache.inputs[l].cols() != layer.in_dim() || cache.pre[l].cols() != layer.out_dim() {
                return Err(Error::contract(
                    "mlp_backward",
                    format!("cache does not match layer {l} dimensions"),
                ));
            }
        }
        let out_shape = (cache.batch_rows(), self.out_dim());
        if output_grad.shape() != out_shape {
            return Err(Error::shape(
                "mlp_backward",
                format!(
                    "output gradient is {:?}, forward output was {:?}",
                    output_grad.shape(),
                    out_shape
                ),
            ));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            let act = layer.activation;
            if act != Activation::Identity {
                for (g, &z) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= act.derivative(z);
                }
            }
            let dw = cache.inputs[l].t_matmul_with(&upstream, exec)?;
            let db = upstream.column_sums();
            let dx = upstream.matmul_t_with(&layer.weight, exec)?;
            grads.push(Dense {
                weight: dw,
                bias: db,
                activation: act,
            });
            upstream = dx;
        }
        grads.reverse();
        Ok((Mlp { layers: grads }, upstream))
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

fn affine(x: &Matrix, layer: &Dense, exec: Exec) -> Result<Matrix> {
    let mut z = x.matmul_with(&layer.weight, exec)?;
    let m = layer.out_dim();
    if m > 0 {
        for row in z.as_mut_slice().chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
    }
    Ok(z)
}

fn apply_inplace(x: &mut Matrix, act: Activation) {
    if act != Activation::Identity {
        x.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
    }
}

impl Params for Mlp {
    fn slices(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.weight"), layer.weight.as_slice()));
            out.push((format!("layer{l}.bias"), layer.bias.as_slice()));
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.weight"), layer.weight.as_mut_slice()));
            out.push((format!("layer{l}.bias"), layer.bias.as_mut_slice()));
        }
        out
    }
}
