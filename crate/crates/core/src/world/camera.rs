use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::WorldError;

/// Affine camera: a world point `p` lands at `scale * R(rotation) * (p - translation)`
/// on the image plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub translation: [f64; 2],
    pub rotation: f64,
    pub scale: f64,
}

impl CameraPose {
    pub const TRAIN: CameraPose = CameraPose {
        translation: [0.0, 0.0],
        rotation: 0.0,
        scale: 1.0,
    };

    pub fn world_to_plane(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let dx = p[0] - self.translation[0];
        let dy = p[1] - self.translation[1];
        [self.scale * (c * dx - s * dy), self.scale * (s * dx + c * dy)]
    }

    pub fn plane_to_world(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (qx, qy) = (q[0] / self.scale, q[1] / self.scale);
        [c * qx + s * qy + self.translation[0], -s * qx + c * qy + self.translation[1]]
    }
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::TRAIN
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NovelLevel {
    Easy,
    Medium,
    Hard,
}

impl NovelLevel {
    /// `(translation length in world units, rotation in degrees)`. The
    /// translation points along the diagonal.
    pub fn offsets(self) -> (f64, f64) {
        match self {
            NovelLevel::Easy => (0.20, 10.0),
            NovelLevel::Medium => (0.30, 15.0),
            NovelLevel::Hard => (0.40, 20.0),
        }
    }

    pub fn pose(self) -> CameraPose {
        let (d, deg) = self.offsets();
        let a = d * std::f64::consts::FRAC_1_SQRT_2;
        CameraPose {
            translation: [a, a],
            rotation: deg.to_radians(),
            scale: 1.0,
        }
    }
}

pub const SHAKING_SIGMA: f64 = 0.04;
pub const SHAKING_CLIP: f64 = 0.07;
pub const MOVING_AMPLITUDE: f64 = 0.2;
pub const MOVING_PERIOD: usize = 50;

/// Zoom equivalent of widening the field of view from 45 to 53 degrees.
pub fn default_fov_scale() -> f64 {
    (22.5f64).to_radians().tan() / (26.5f64).to_radians().tan()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ViewSetting {
    Train,
    NovelView(NovelLevel),
    MovingView { amplitude: f64, period: usize },
    ShakingView { sigma: f64, clip: f64 },
    NovelFov { scale_factor: f64 },
}

impl ViewSetting {
    pub fn moving() -> Self {
        ViewSetting::MovingView {
            amplitude: MOVING_AMPLITUDE,
            period: MOVING_PERIOD,
        }
    }

    pub fn shaking() -> Self {
        ViewSetting::ShakingView {
            sigma: SHAKING_SIGMA,
            clip: SHAKING_CLIP,
        }
    }

    pub fn novel_fov() -> Self {
        ViewSetting::NovelFov {
            scale_factor: default_fov_scale(),
        }
    }

    /// The four evaluation settings with medium novel view.
    pub fn benchmark() -> [ViewSetting; 4] {
        [
            ViewSetting::NovelView(NovelLevel::Medium),
            ViewSetting::moving(),
            ViewSetting::shaking(),
            ViewSetting::novel_fov(),
        ]
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let ok = match *self {
            ViewSetting::MovingView { amplitude, period } => amplitude.is_finite() && period > 0,
            ViewSetting::ShakingView { sigma, clip } => sigma > 0.0 && clip >= 0.0 && sigma.is_finite(),
            ViewSetting::NovelFov { scale_factor } => scale_factor > 0.0 && scale_factor.is_finite(),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(WorldError::Setting(format!("invalid parameters in {self:?}")))
        }
    }
}

impl fmt::Display for ViewSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViewSetting::Train => "train",
            ViewSetting::NovelView(NovelLevel::Easy) => "novel-easy",
            ViewSetting::NovelView(NovelLevel::Medium) => "novel-medium",
            ViewSetting::NovelView(NovelLevel::Hard) => "novel-hard",
            ViewSetting::MovingView { .. } => "moving",
            ViewSetting::ShakingView { .. } => "shaking",
            ViewSetting::NovelFov { .. } => "novel-fov",
        };
        f.write_str(s)
    }
}

impl FromStr for ViewSetting {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "train" => ViewSetting::Train,
            "novel-easy" => ViewSetting::NovelView(NovelLevel::Easy),
            "novel-medium" | "novel" => ViewSetting::NovelView(NovelLevel::Medium),
            "novel-hard" => ViewSetting::NovelView(NovelLevel::Hard),
            "moving" => ViewSetting::moving(),
            "shaking" => ViewSetting::shaking(),
            "novel-fov" => ViewSetting::novel_fov(),
            other => {
                return Err(WorldError::Setting(format!(
                    "unknown setting `{other}` (expected train, novel-easy, novel-medium, novel-hard, moving, shaking, novel-fov)"
                )))
            }
        })
    }
}

/// Camera pose of `setting` at episode step `t`. Only the shaking view draws
/// from `rng`.
pub fn camera_pose_at(setting: &ViewSetting, t: usize, rng: &mut impl Rng) -> CameraPose {
    match *setting {
        ViewSetting::Train => CameraPose::TRAIN,
        ViewSetting::NovelView(level) => level.pose(),
        ViewSetting::MovingView { amplitude, period } => {
            let ph = 2.0 * std::f64::consts::PI * (t % period) as f64 / period as f64;
            CameraPose {
                translation: [amplitude * ph.sin(), amplitude * 0.5 * ph.cos()],
                rotation: 0.1 * ph.sin(),
                scale: 1.0,
            }
        }
        ViewSetting::ShakingView { sigma, clip } => {
            let n = Normal::new(0.0, sigma).expect("validated sigma");
            let dx: f64 = n.sample(rng);
            let dy: f64 = n.sample(rng);
            CameraPose {
                translation: [dx.clamp(-clip, clip), dy.clamp(-clip, clip)],
                ..CameraPose::TRAIN
            }
        }
        ViewSetting::NovelFov { scale_factor } => CameraPose {
            scale: scale_factor,
            ..CameraPose::TRAIN
        },
    }
}
