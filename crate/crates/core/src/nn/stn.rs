use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::AffineParams;
use super::layers::{conv, init_conv, init_linear, linear, ConvSpec};
use crate::autodiff::{Bound, Graph, ParamGroup, Tensor, TensorError, Var};

/// One conv -> maxpool -> relu stage of a localization net. Pooling uses
/// kernel == stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocStage {
    pub conv: ConvSpec,
    pub pool: usize,
}

/// Spatial transformer block: a localization net predicts six affine
/// coefficients from the feature map, which is then resampled under them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StnSpec {
    /// Channels of the warped feature map.
    pub channels: usize,
    /// Square side length of the warped feature map.
    pub size: usize,
    /// When set, the channel axis is split into frames of this many channels,
    /// each localized and warped on its own.
    pub frame_channels: Option<usize>,
    pub stages: Vec<LocStage>,
    pub fc_hidden: usize,
}

#[derive(Clone, Debug)]
pub struct StnOutput {
    pub output: Var,
    /// One `[6]` coefficient vector per frame (a single one when not per-frame).
    pub phis: Vec<Var>,
}

impl StnSpec {
    pub fn loc_channels(&self) -> usize {
        self.frame_channels.unwrap_or(self.channels)
    }

    pub fn frames(&self) -> usize {
        self.channels / self.loc_channels()
    }

    /// Length of the flattened localization features.
    pub fn flat_dim(&self) -> Result<usize, TensorError> {
        let mut c = self.loc_channels();
        let mut s = self.size;
        for (i, st) in self.stages.iter().enumerate() {
            if st.conv.in_channels != c {
                return Err(TensorError::Dim {
                    op: "stn",
                    axis: format!("stage {i} input channels"),
                    expected: c,
                    got: st.conv.in_channels,
                });
            }
            s = st.conv.out_size(s).ok_or_else(|| TensorError::Contract(format!("stn stage {i}: kernel larger than {s}")))?;
            if st.pool == 0 || st.pool > s {
                return Err(TensorError::Contract(format!("stn stage {i}: pool {} does not fit {s}", st.pool)));
            }
            s = (s - st.pool) / st.pool + 1;
            c = st.conv.out_channels;
        }
        Ok(c * s * s)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.channels % self.loc_channels() != 0 {
            return Err(TensorError::Contract(format!(
                "stn: {} channels do not split into frames of {}",
                self.channels,
                self.loc_channels()
            )));
        }
        self.flat_dim().map(|_| ())
    }

    /// Random localization convs and hidden layer; the output layer starts at
    /// zero weight and identity bias so the block is an exact identity map.
    pub fn init(&self, group: &mut ParamGroup, prefix: &str, rng: &mut impl Rng) -> Result<(), TensorError> {
        self.validate()?;
        for (i, st) in self.stages.iter().enumerate() {
            init_conv(group, &format!("{prefix}.loc{i}"), &st.conv, rng);
        }
        init_linear(group, &format!("{prefix}.fc0"), self.flat_dim()?, self.fc_hidden, rng);
        group.insert(format!("{prefix}.fc1.weight"), Tensor::zeros([6, self.fc_hidden]));
        group.insert(format!("{prefix}.fc1.bias"), Tensor::vector(AffineParams::IDENTITY.0.to_vec()));
        Ok(())
    }

    fn localize(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, st) in self.stages.iter().enumerate() {
            h = conv(g, p, &format!("{prefix}.loc{i}"), h, st.conv.stride)?;
            h = g.maxpool2d(h, st.pool, st.pool)?;
            h = g.relu(h);
        }
        let h = g.flatten(h)?;
        let h = linear(g, p, &format!("{prefix}.fc0"), h)?;
        let h = g.relu(h);
        linear(g, p, &format!("{prefix}.fc1"), h)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<StnOutput, TensorError> {
        let shape = g.shape(x).to_vec();
        let expect = [self.channels, self.size, self.size];
        let axes = ["channels", "height", "width"];
        if shape.len() != 3 {
            return Err(TensorError::Shape {
                op: "stn",
                msg: format!("expected [C,H,W], got {shape:?}"),
            });
        }
        for k in 0..3 {
            if shape[k] != expect[k] {
                return Err(TensorError::Dim {
                    op: "stn",
                    axis: axes[k].into(),
                    expected: expect[k],
                    got: shape[k],
                });
            }
        }
        let fc = self.loc_channels();
        let mut outs = Vec::with_capacity(self.frames());
        let mut phis = Vec::with_capacity(self.frames());
        for f in 0..self.frames() {
            let frame = if self.frames() == 1 { x } else { g.slice(x, f * fc, fc)? };
            let phi = self.localize(g, p, prefix, frame)?;
            let grid = g.affine_grid(phi, self.size, self.size)?;
            outs.push(g.grid_sample(frame, grid)?);
            phis.push(phi);
        }
        let output = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        Ok(StnOutput { output, phis })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::nn::grid::{affine_grid, grid_sample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(frame_channels: Option<usize>) -> StnSpec {
        let c = frame_channels.unwrap_or(4);
        StnSpec {
            channels: if frame_channels.is_some() { 3 * c } else { c },
            size: 12,
            frame_channels,
            stages: vec![
                LocStage {
                    conv: ConvSpec::new(c, 4, 3, 1),
                    pool: 2,
                },
                LocStage {
                    conv: ConvSpec::new(4, 5, 3, 1),
                    pool: 1,
                },
            ],
            fc_hidden: 8,
        }
    }

    fn group_for(spec: &StnSpec, seed: u64) -> ParamGroup {
        let mut group = ParamGroup::new("stn", 1e-5).unwrap();
        spec.init(&mut group, "stn0", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        group
    }

    fn run(spec: &StnSpec, group: &ParamGroup, x: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>), TensorError> {
        let mut g = Graph::new();
        let p = g.bind(group, false);
        let xv = g.input(x.clone());
        let out = spec.forward(&mut g, &p, "stn0", xv)?;
        let phis = out.phis.iter().map(|&v| g.data(v).to_vec()).collect();
        Ok((g.value(out.output).clone(), phis))
    }

    #[test]
    fn fresh_block_is_exact_identity() {
        for fc in [None, Some(3)] {
            let spec = small_spec(fc);
            let group = group_for(&spec, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..5 {
                let x = Tensor::from_fn([spec.channels, 12, 12], |_| rng.gen::<f64>());
                let (y, phis) = run(&spec, &group, &x).unwrap();
                assert_eq!(y.data(), x.data());
                assert!(phis.iter().all(|p| p == &AffineParams::IDENTITY.0));
            }
        }
    }

    #[test]
    fn per_frame_runs_one_localization_per_frame() {
        let spec = small_spec(Some(3));
        assert_eq!(spec.frames(), 3);
        let group = group_for(&spec, 1);
        let x = Tensor::from_fn([9, 12, 12], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let p = g.bind(&group, false);
        let xv = g.input(x);
        let out = spec.forward(&mut g, &p, "stn0", xv).unwrap();
        assert_eq!(out.phis.len(), 3);
        let ops = g.op_names();
        assert_eq!(ops.iter().filter(|&&o| o == "affine_grid").count(), 3);
        assert_eq!(ops.iter().filter(|&&o| o == "conv2d").count(), 6);
    }

    #[test]
    fn translated_bias_matches_direct_sampling() {
        let spec = small_spec(None);
        let mut group = group_for(&spec, 3);
        let shift = AffineParams::translation(0.3, -0.2);
        group.get_mut("stn0.fc1.bias").unwrap().data_mut().copy_from_slice(&shift.0);
        let x = Tensor::from_fn([4, 12, 12], |i| (i as f64 * 0.21).cos());
        let (y, _) = run(&spec, &group, &x).unwrap();
        let expect = grid_sample(&x, &affine_grid(&shift, 12, 12).unwrap()).unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn wrong_spatial_size_names_axis() {
        let spec = small_spec(None);
        let group = group_for(&spec, 0);
        let err = run(&spec, &group, &Tensor::zeros([4, 12, 10])).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn gradients_through_block_match_differences() {
        let spec = small_spec(Some(3));
        let mut group = group_for(&spec, 5);
        // Move off the identity so every path carries signal.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in group.get_mut("stn0.fc1.weight").unwrap().data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let x = Tensor::from_fn([9, 12, 12], |i| ((i * 7919) % 101) as f64 / 101.0);
        let target = Tensor::from_fn([9, 12, 12], |i| ((i * 31) % 13) as f64 / 13.0);
        let report = grad_check("stn", &mut group, 1e-6, 0, |g, p| {
            let xv = g.input(x.clone());
            let t = g.input(target.clone());
            let out = spec.forward(g, p, "stn0", xv)?;
            g.mse_loss(out.output, t)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
