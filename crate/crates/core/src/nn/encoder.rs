use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv, init_conv, init_linear, linear, ConvSpec};
use crate::autodiff::{Bound, Graph, ParamGroup, TensorError, Var};

/// Convolutional image encoder: conv+relu stages, flatten, linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub convs: Vec<ConvSpec>,
    pub latent_dim: usize,
}

impl EncoderSpec {
    /// Four 32-filter convs (kernels 7,5,3,3, stride 2) on 9x84x84, head 288 -> 50.
    pub fn paper() -> Self {
        Self {
            in_channels: 9,
            image_size: 84,
            convs: vec![
                ConvSpec::new(9, 32, 7, 2),
                ConvSpec::new(32, 32, 5, 2),
                ConvSpec::new(32, 32, 3, 2),
                ConvSpec::new(32, 32, 3, 2),
            ],
            latent_dim: 50,
        }
    }

    /// Reduced stack on 9x32x32 frames: 15x15x8 -> 7x7x16 -> 5x5x16 -> 3x3x16 -> 50.
    pub fn desk() -> Self {
        Self {
            in_channels: 9,
            image_size: 32,
            convs: vec![
                ConvSpec::new(9, 8, 3, 2),
                ConvSpec::new(8, 16, 3, 2),
                ConvSpec::new(16, 16, 3, 1),
                ConvSpec::new(16, 16, 3, 1),
            ],
            latent_dim: 50,
        }
    }

    /// `[C, H, W]` of the input (index 0) and after every conv stage.
    pub fn feature_shapes(&self) -> Result<Vec<[usize; 3]>, TensorError> {
        let mut shapes = vec![[self.in_channels, self.image_size, self.image_size]];
        for (i, c) in self.convs.iter().enumerate() {
            let [ch, s, _] = *shapes.last().expect("non-empty");
            if c.in_channels != ch {
                return Err(TensorError::Dim {
                    op: "encoder",
                    axis: format!("conv{i} input channels"),
                    expected: ch,
                    got: c.in_channels,
                });
            }
            let o = c
                .out_size(s)
                .ok_or_else(|| TensorError::Contract(format!("encoder conv{i}: kernel {} exceeds size {s}", c.kernel)))?;
            shapes.push([c.out_channels, o, o]);
        }
        Ok(shapes)
    }

    pub fn flat_dim(&self) -> Result<usize, TensorError> {
        let [c, h, w] = *self.feature_shapes()?.last().expect("non-empty");
        Ok(c * h * w)
    }

    pub fn init(&self, group: &mut ParamGroup, rng: &mut impl Rng) -> Result<(), TensorError> {
        for (i, c) in self.convs.iter().enumerate() {
            init_conv(group, &format!("conv{i}"), c, rng);
        }
        init_linear(group, "head", self.flat_dim()?, self.latent_dim, rng);
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, obs: Var) -> Result<Var, TensorError> {
        self.forward_with(g, p, obs, &mut |_, _, x| Ok(x))
    }

    /// Forward pass with a hook applied at each stage boundary: stage 0 is the
    /// raw input, stage `k` the output of conv `k-1` after its relu. The hook
    /// may replace the value (this is where spatial transformers are threaded in).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        p: &Bound,
        obs: Var,
        hook: &mut dyn FnMut(&mut Graph, usize, Var) -> Result<Var, TensorError>,
    ) -> Result<Var, TensorError> {
        let expect = [self.in_channels, self.image_size, self.image_size];
        let shape = g.shape(obs).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Shape {
                op: "encoder",
                msg: format!("observation must be [C,H,W], got {shape:?}"),
            });
        }
        for (k, axis) in ["channels", "height", "width"].iter().enumerate() {
            if shape[k] != expect[k] {
                return Err(TensorError::Dim {
                    op: "encoder",
                    axis: format!("observation {axis}"),
                    expected: expect[k],
                    got: shape[k],
                });
            }
        }
        let mut h = obs;
        for (i, c) in self.convs.iter().enumerate() {
            h = hook(g, i, h)?;
            h = conv(g, p, &format!("conv{i}"), h, c.stride)?;
            h = g.relu(h);
        }
        let h = g.flatten(h)?;
        linear(g, p, "head", h)
    }
}
