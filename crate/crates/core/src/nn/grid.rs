//! Affine sampling grids and bilinear sampling.
//!
//! Coordinates follow the align-corners-false convention: in normalized
//! units the centre of pixel `i` of an `N`-pixel axis sits at
//! `-1 + (2i + 1) / N`. A 2x3 matrix `A` maps each target coordinate
//! `(x_t, y_t, 1)` to the source coordinate `(x_s, y_s)` that is sampled.
//!
//! Internally grids are stored as *centred pixel offsets*
//! `u = x * W / 2`, `v = y * H / 2` (so pixel `j` sits at `j - (W-1)/2`).
//! The two representations describe the same points, but offsets are
//! exact half-integers for the regular grid, which makes the identity
//! warp reproduce its input bit for bit. Use [`SamplingGrid::normalized`]
//! for the `[-1, 1]` view.

use crate::autodiff::{kernels, Tensor, TensorError};

/// Largest magnitude any affine coefficient may take before clamping.
pub const PHI_LIMIT: f64 = 10.0;

/// Row-major 2x3 affine matrix `[a11, a12, a13, a21, a22, a23]` acting on
/// normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self([1.0, 0.0, dx, 0.0, 1.0, dy])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, TensorError> {
        let arr: [f64; 6] = v.try_into().map_err(|_| TensorError::Dim {
            op: "affine_params",
            axis: "phi".into(),
            expected: 6,
            got: v.len(),
        })?;
        let p = Self(arr);
        p.check_finite()?;
        Ok(p)
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                what: "affine parameters".into(),
            })
        }
    }

    pub fn clamped(&self) -> Self {
        Self(self.0.map(|v| v.clamp(-PHI_LIMIT, PHI_LIMIT)))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let a = &self.0;
        (a[0] * x + a[1] * y + a[2], a[3] * x + a[4] * y + a[5])
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &AffineParams) -> AffineParams {
        let (a, b) = (&self.0, &other.0);
        AffineParams([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    pub fn inverse(&self) -> Option<AffineParams> {
        let a = &self.0;
        let det = a[0] * a[4] - a[1] * a[3];
        if det.abs() < 1e-12 {
            return None;
        }
        let (i0, i1, i3, i4) = (a[4] / det, -a[1] / det, -a[3] / det, a[0] / det);
        Some(AffineParams([
            i0,
            i1,
            -(i0 * a[2] + i1 * a[5]),
            i3,
            i4,
            -(i3 * a[2] + i4 * a[5]),
        ]))
    }

    pub fn max_abs_diff(&self, other: &AffineParams) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Source coordinates for every target pixel, `[H, W, 2]` centred pixel offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub coords: Tensor,
}

impl SamplingGrid {
    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }

    /// The regular target grid (what the identity warp produces).
    pub fn regular(h: usize, w: usize) -> Result<Self, TensorError> {
        affine_grid(&AffineParams::IDENTITY, h, w)
    }

    /// Coordinates in `[-1, 1]` units.
    pub fn normalized(&self) -> Tensor {
        let (h, w) = (self.height() as f64, self.width() as f64);
        let d = self.coords.data();
        Tensor::from_fn(self.coords.shape().to_vec(), |i| {
            if i % 2 == 0 {
                d[i] * 2.0 / w
            } else {
                d[i] * 2.0 / h
            }
        })
    }

    /// Builds a grid from normalized coordinates.
    pub fn from_normalized(norm: &Tensor) -> Result<Self, TensorError> {
        let &[h, w, 2] = norm.shape() else {
            return Err(TensorError::Shape {
                op: "sampling_grid",
                msg: format!("expected [H,W,2], got {:?}", norm.shape()),
            });
        };
        let d = norm.data();
        let coords = Tensor::from_fn([h, w, 2], |i| {
            if i % 2 == 0 {
                d[i] * w as f64 / 2.0
            } else {
                d[i] * h as f64 / 2.0
            }
        });
        Ok(Self { coords })
    }
}

pub fn affine_grid(phi: &AffineParams, h: usize, w: usize) -> Result<SamplingGrid, TensorError> {
    phi.check_finite()?;
    if h < 2 || w < 2 {
        return Err(TensorError::Contract(format!("affine_grid needs H,W >= 2, got {h}x{w}")));
    }
    let data = kernels::affine_grid_forward(&phi.clamped().0, h, w);
    Ok(SamplingGrid {
        coords: Tensor::new([h, w, 2], data)?,
    })
}

/// Bilinear sampling of a `[C, H, W]` map; points outside the map read zero.
pub fn grid_sample(input: &Tensor, grid: &SamplingGrid) -> Result<Tensor, TensorError> {
    let &[c, h, w] = input.shape() else {
        return Err(TensorError::Shape {
            op: "grid_sample",
            msg: format!("expected [C,H,W], got {:?}", input.shape()),
        });
    };
    if grid.height() != h || grid.width() != w {
        return Err(TensorError::Dim {
            op: "grid_sample",
            axis: "grid size".into(),
            expected: h * w,
            got: grid.height() * grid.width(),
        });
    }
    if grid.coords.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite {
            what: "sampling grid".into(),
        });
    }
    let out = kernels::grid_sample_forward(input.data(), c, h, w, grid.coords.data());
    Tensor::new([c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_gives_regular_grid() {
        let g = affine_grid(&AffineParams::IDENTITY, 5, 4).unwrap();
        let n = g.normalized();
        for i in 0..5 {
            for j in 0..4 {
                let p = (i * 4 + j) * 2;
                assert_eq!(g.coords.data()[p], j as f64 - 1.5);
                assert_eq!(g.coords.data()[p + 1], i as f64 - 2.0);
                assert!((n.data()[p] - (-1.0 + (2 * j + 1) as f64 / 4.0)).abs() < 1e-15);
                assert!((n.data()[p + 1] - (-1.0 + (2 * i + 1) as f64 / 5.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn translation_column_shifts_x() {
        let reg = SamplingGrid::regular(6, 6).unwrap().normalized();
        let g = affine_grid(&AffineParams([1.0, 0.0, 0.5, 0.0, 1.0, 0.0]), 6, 6).unwrap().normalized();
        for (i, (a, b)) in g.data().iter().zip(reg.data()).enumerate() {
            let expect = if i % 2 == 0 { b + 0.5 } else { *b };
            assert!((a - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn half_scale_covers_central_half() {
        let reg = SamplingGrid::regular(8, 8).unwrap().normalized();
        let g = affine_grid(&AffineParams([0.5, 0.0, 0.0, 0.0, 0.5, 0.0]), 8, 8).unwrap().normalized();
        for (a, b) in g.data().iter().zip(reg.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        let max = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 0.5);
    }

    #[test]
    fn identity_sample_is_exact() {
        let x = Tensor::from_fn([3, 7, 9], |i| ((i * 31) % 17) as f64 / 7.0 - 1.1);
        let g = SamplingGrid::regular(7, 9).unwrap();
        assert_eq!(grid_sample(&x, &g).unwrap(), x);
    }

    #[test]
    fn centre_of_two_by_two_is_mean() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let norm = Tensor::new([2, 2, 2], vec![0.0; 8]).unwrap();
        let g = SamplingGrid::from_normalized(&norm).unwrap();
        let out = grid_sample(&x, &g).unwrap();
        assert_eq!(out.data(), &[2.5; 4]);
    }

    #[test]
    fn outside_samples_are_zero() {
        let x = Tensor::from_fn([2, 4, 4], |i| i as f64 + 1.0);
        let g = affine_grid(&AffineParams([1.0, 0.0, 5.0, 0.0, 1.0, -5.0]), 4, 4).unwrap();
        assert!(grid_sample(&x, &g).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integer_translation_round_trip_is_exact_inside() {
        let (h, w) = (10, 12);
        let x = Tensor::from_fn([2, h, w], |i| (i as f64 * 0.77).sin());
        // Two pixels right and one down, then back.
        let shift = |dx: f64, dy: f64| AffineParams::translation(dx * 2.0 / w as f64, dy * 2.0 / h as f64);
        let fwd = grid_sample(&x, &affine_grid(&shift(2.0, 1.0), h, w).unwrap()).unwrap();
        let back = grid_sample(&fwd, &affine_grid(&shift(-2.0, -1.0), h, w).unwrap()).unwrap();
        for c in 0..2 {
            for i in 1..h - 1 {
                for j in 2..w - 2 {
                    let k = (c * h + i) * w + j;
                    assert!((back.data()[k] - x.data()[k]).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn compose_matches_sequential_application(
            a in proptest::array::uniform6(-2.0f64..2.0),
            b in proptest::array::uniform6(-2.0f64..2.0),
        ) {
            let (a, b) = (AffineParams(a), AffineParams(b));
            let (h, w) = (5, 7);
            let direct = affine_grid(&a.compose(&b), h, w).unwrap().normalized();
            let reg = SamplingGrid::regular(h, w).unwrap().normalized();
            for p in 0..h * w {
                let (x, y) = (reg.data()[2 * p], reg.data()[2 * p + 1]);
                let (bx, by) = b.apply(x, y);
                let (ax, ay) = a.apply(bx, by);
                prop_assert!((direct.data()[2 * p] - ax).abs() < 1e-12);
                prop_assert!((direct.data()[2 * p + 1] - ay).abs() < 1e-12);
            }
        }

        #[test]
        fn inverse_composes_to_identity(a in proptest::array::uniform6(-2.0f64..2.0)) {
            let a = AffineParams(a);
            if let Some(inv) = a.inverse() {
                let det = a.0[0] * a.0[4] - a.0[1] * a.0[3];
                prop_assume!(det.abs() > 1e-2);
                prop_assert!(inv.compose(&a).max_abs_diff(&AffineParams::IDENTITY) < 1e-9);
            }
        }
    }
}
