use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamGroup, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    /// Output side length for a square input, or `None` if the kernel does not fit.
    pub fn out_size(&self, size: usize) -> Option<usize> {
        (size >= self.kernel && self.stride > 0).then(|| (size - self.kernel) / self.stride + 1)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Weights and biases uniform in `±1/sqrt(fan_in)`.
pub fn init_conv(group: &mut ParamGroup, prefix: &str, spec: &ConvSpec, rng: &mut impl Rng) {
    let b = 1.0 / (spec.fan_in() as f64).sqrt();
    let shape = vec![spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
    group.insert(format!("{prefix}.weight"), uniform(rng, shape, b));
    group.insert(format!("{prefix}.bias"), uniform(rng, vec![spec.out_channels], b));
}

pub fn init_linear(group: &mut ParamGroup, prefix: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) {
    let b = 1.0 / (n_in as f64).sqrt();
    group.insert(format!("{prefix}.weight"), uniform(rng, vec![n_out, n_in], b));
    group.insert(format!("{prefix}.bias"), uniform(rng, vec![n_out], b));
}

pub fn conv(g: &mut Graph, p: &Bound, prefix: &str, x: Var, stride: usize) -> Result<Var, TensorError> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, b, stride)
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// `scale * tanh(x)`
    ScaledTanh(f64),
}

/// Fully connected stack with ReLU between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including input and output, e.g. `[52, 128, 128, 50]`.
    pub sizes: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(sizes: impl Into<Vec<usize>>, output: OutputActivation) -> Self {
        Self {
            sizes: sizes.into(),
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("mlp has layers")
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn init(&self, group: &mut ParamGroup, prefix: &str, rng: &mut impl Rng) {
        for (i, w) in self.sizes.windows(2).enumerate() {
            init_linear(group, &format!("{prefix}.fc{i}"), w[0], w[1], rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for i in 0..self.layers() {
            h = linear(g, p, &format!("{prefix}.fc{i}"), h)?;
            if i + 1 < self.layers() {
                h = g.relu(h);
            }
        }
        Ok(match self.output {
            OutputActivation::Identity => h,
            OutputActivation::ScaledTanh(s) => {
                let t = g.tanh(h);
                g.scale(t, s)
            }
        })
    }
}
