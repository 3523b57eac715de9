//! Network building blocks: conv encoder, MLP heads, spatial transformers.

mod encoder;
pub mod grid;
mod layers;
mod stn;

pub use encoder::EncoderSpec;
pub use grid::{affine_grid, grid_sample, AffineParams, SamplingGrid, PHI_LIMIT};
pub use layers::{conv, init_conv, init_linear, linear, ConvSpec, MlpSpec, OutputActivation};
pub use stn::{LocStage, StnOutput, StnSpec};

use serde::{Deserialize, Serialize};

use crate::autodiff::TensorError;

/// Channels per rendered RGB frame.
pub const FRAME_CHANNELS: usize = 3;

/// An encoder together with the spatial transformers that may be threaded
/// into it; `stns[k]` warps the features entering conv `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub encoder: EncoderSpec,
    pub stns: Vec<StnSpec>,
}

const fn stage(cin: usize, cout: usize, k: usize, s: usize, pool: usize) -> LocStage {
    LocStage {
        conv: ConvSpec::new(cin, cout, k, s),
        pool,
    }
}

impl Architecture {
    /// Full-size networks on 84x84 frames.
    pub fn paper() -> Self {
        let stn = |channels, size, frame_channels, stages: Vec<LocStage>| StnSpec {
            channels,
            size,
            frame_channels,
            stages,
            fc_hidden: 32,
        };
        Self {
            name: "paper".into(),
            encoder: EncoderSpec::paper(),
            stns: vec![
                stn(9, 84, Some(3), vec![stage(3, 8, 7, 1, 4), stage(8, 10, 5, 1, 4)]),
                stn(32, 39, None, vec![stage(32, 8, 7, 1, 3), stage(8, 10, 5, 1, 2)]),
                stn(32, 18, None, vec![stage(32, 8, 5, 1, 2), stage(8, 10, 3, 1, 2)]),
                stn(32, 8, None, vec![stage(32, 8, 3, 1, 2), stage(8, 10, 3, 1, 1)]),
            ],
        }
    }

    /// Reduced networks on 32x32 frames, sized so that the test-time
    /// adaptation protocol runs on a single core.
    pub fn desk() -> Self {
        let stn = |channels, size, frame_channels, stages: Vec<LocStage>| StnSpec {
            channels,
            size,
            frame_channels,
            stages,
            fc_hidden: 32,
        };
        Self {
            name: "desk".into(),
            encoder: EncoderSpec::desk(),
            stns: vec![
                stn(9, 32, Some(3), vec![stage(3, 4, 4, 4, 2), stage(4, 8, 3, 1, 1)]),
                stn(8, 15, None, vec![stage(8, 8, 3, 2, 2), stage(8, 10, 3, 1, 1)]),
                stn(16, 7, None, vec![stage(16, 8, 3, 1, 1), stage(8, 10, 3, 1, 3)]),
                stn(16, 5, None, vec![stage(16, 8, 3, 1, 1), stage(8, 10, 3, 1, 1)]),
            ],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    /// The profile whose encoder is `spec`.
    pub fn for_encoder(spec: &EncoderSpec) -> Option<Self> {
        [Self::paper(), Self::desk()].into_iter().find(|a| &a.encoder == spec)
    }

    pub fn image_size(&self) -> usize {
        self.encoder.image_size
    }

    /// Every transformer must match the feature map it sits on.
    pub fn validate(&self) -> Result<(), TensorError> {
        let shapes = self.encoder.feature_shapes()?;
        if self.stns.len() > self.encoder.convs.len() {
            return Err(TensorError::Contract(format!(
                "{} transformers for {} conv stages",
                self.stns.len(),
                self.encoder.convs.len()
            )));
        }
        for (k, s) in self.stns.iter().enumerate() {
            let [c, h, _] = shapes[k];
            if s.channels != c || s.size != h {
                return Err(TensorError::Shape {
                    op: "architecture",
                    msg: format!("stn{k} expects {}x{}x{}, stage has {c}x{h}x{h}", s.channels, s.size, s.size),
                });
            }
            s.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_consistent() {
        for a in [Architecture::paper(), Architecture::desk()] {
            a.validate().unwrap();
            assert_eq!(a.stns.len(), 4);
            assert_eq!(a.stns[0].frame_channels, Some(FRAME_CHANNELS));
        }
    }

    #[test]
    fn paper_transformer_listings_flatten_to_ninety() {
        let a = Architecture::paper();
        assert_eq!(a.stns[0].flat_dim().unwrap(), 90);
        assert_eq!(a.stns[1].flat_dim().unwrap(), 90);
    }
}
