use super::{CameraPose, WorldConfig, WorldState, DISC_RADIUS};
use crate::autodiff::Tensor;

const LIGHT: [f64; 3] = [0.80, 0.80, 0.85];
const DARK: [f64; 3] = [0.45, 0.45, 0.50];
const OFF_BOARD: [f64; 3] = [0.15, 0.15, 0.20];
const AGENT: [f64; 3] = [0.90, 0.15, 0.15];
const GOAL: [f64; 3] = [0.15, 0.80, 0.20];
const CHECKER_CELLS: f64 = 8.0;
/// Width of the anti-aliased disc edge in pixels.
const EDGE_PIXELS: f64 = 1.5;

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn background(p: [f64; 2]) -> [f64; 3] {
    if p[0].abs() > 1.0 || p[1].abs() > 1.0 {
        return OFF_BOARD;
    }
    let cell = 2.0 / CHECKER_CELLS;
    let i = ((p[0] + 1.0) / cell).floor() as i64;
    let j = ((p[1] + 1.0) / cell).floor() as i64;
    if (i + j).rem_euclid(2) == 0 {
        DARK
    } else {
        LIGHT
    }
}

/// Renders `[3, N, N]` RGB in `[0, 1]`. Pixel `(r, c)` looks at the image-plane
/// point `((c - N/2) * px, (N/2 - r) * px)`, so the plane origin falls on the
/// centre of pixel `(N/2, N/2)`. Values are rounded to 32-bit precision so
/// frames survive a round trip through `f32` storage unchanged.
pub fn render(state: &WorldState, pose: &CameraPose, cfg: &WorldConfig) -> Tensor {
    let n = cfg.image_size;
    let px = cfg.pixel_size();
    let half = n as f64 / 2.0;
    let discs = [(state.goal, GOAL), (state.agent, AGENT)].map(|(c, col)| (pose.world_to_plane(c), col));
    let radius = pose.scale * DISC_RADIUS / px;
    let mut out = vec![0.0; 3 * n * n];
    for r in 0..n {
        for c in 0..n {
            let q = [(c as f64 - half) * px, (half - r as f64) * px];
            let mut col = background(pose.plane_to_world(q));
            for (centre, disc) in &discs {
                let d = (q[0] - centre[0]).hypot(q[1] - centre[1]) / px;
                let alpha = 1.0 - smoothstep(radius - EDGE_PIXELS / 2.0, radius + EDGE_PIXELS / 2.0, d);
                if alpha > 0.0 {
                    for k in 0..3 {
                        col[k] = col[k] * (1.0 - alpha) + disc[k] * alpha;
                    }
                }
            }
            for k in 0..3 {
                out[(k * n + r) * n + c] = col[k] as f32 as f64;
            }
        }
    }
    Tensor::new([3, n, n], out).expect("render shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(agent: [f64; 2], goal: [f64; 2]) -> WorldState {
        WorldState {
            agent,
            goal,
            step_index: 0,
        }
    }

    fn px(t: &Tensor, n: usize, k: usize, r: usize, c: usize) -> f64 {
        t.data()[(k * n + r) * n + c]
    }

    fn red_mask(t: &Tensor, n: usize) -> Vec<(usize, usize)> {
        let mut v = vec![];
        for r in 0..n {
            for c in 0..n {
                if px(t, n, 0, r, c) > 0.6 && px(t, n, 1, r, c) < 0.4 {
                    v.push((r, c));
                }
            }
        }
        v
    }

    #[test]
    fn agent_at_origin_centres_on_middle_pixel() {
        let cfg = WorldConfig::default();
        let img = render(&state([0.0, 0.0], [0.5, 0.5]), &CameraPose::TRAIN, &cfg);
        assert_eq!(img.shape(), &[3, 84, 84]);
        let mask = red_mask(&img, 84);
        let (sr, sc) = mask.iter().fold((0, 0), |(a, b), &(r, c)| (a + r, b + c));
        let (cr, cc) = (sr as f64 / mask.len() as f64, sc as f64 / mask.len() as f64);
        assert!((cr - 42.0).abs() < 0.25 && (cc - 42.0).abs() < 0.25, "{cr} {cc}");
        assert_eq!(px(&img, 84, 0, 42, 42), AGENT[0] as f32 as f64);
    }

    #[test]
    fn rendering_is_pure() {
        let cfg = WorldConfig::default();
        let s = state([0.3, -0.2], [-0.4, 0.1]);
        let pose = CameraPose {
            translation: [0.05, 0.1],
            rotation: 0.2,
            scale: 0.9,
        };
        assert_eq!(render(&s, &pose, &cfg), render(&s, &pose, &cfg));
    }

    #[test]
    fn values_are_in_unit_range() {
        let cfg = WorldConfig::with_image_size(32);
        let img = render(&state([0.9, 0.9], [-0.5, 0.2]), &CameraPose::TRAIN, &cfg);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn translation_shifts_whole_image() {
        let cfg = WorldConfig::default();
        let s = state([0.2, -0.3], [-0.4, 0.35]);
        let base = render(&s, &CameraPose::TRAIN, &cfg);
        let (dc, dr) = (3usize, 2usize);
        let pose = CameraPose {
            // Camera moves right by 3 pixels and down by 2: content moves left and up.
            translation: [dc as f64 * cfg.pixel_size(), -(dr as f64) * cfg.pixel_size()],
            ..CameraPose::TRAIN
        };
        let moved = render(&s, &pose, &cfg);
        let n = 84;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for k in 0..3 {
            for r in 4..n - 4 {
                for c in 4..n - 4 {
                    // Skip pixels that sit on a checker edge, where rounding may flip the cell.
                    let q = [(c as f64 + dc as f64 - 42.0) * cfg.pixel_size(), (42.0 - (r + dr) as f64) * cfg.pixel_size()];
                    let on_edge = q.iter().any(|v| {
                        let t = (v + 1.0) / 0.25;
                        (t - t.round()).abs() < 1e-9
                    });
                    if on_edge {
                        continue;
                    }
                    worst = worst.max((px(&moved, n, k, r, c) - px(&base, n, k, r + dr, c + dc)).abs());
                    checked += 1;
                }
            }
        }
        assert!(checked > 15_000);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn zoom_shrinks_disc_radius() {
        let cfg = WorldConfig::with_image_size(256);
        let s = state([0.0, 0.0], [0.5, 0.5]);
        let coverage = |scale: f64| {
            let pose = CameraPose {
                scale,
                ..CameraPose::TRAIN
            };
            red_mask(&render(&s, &pose, &cfg), 256).len() as f64
        };
        let ratio = (coverage(0.83) / coverage(1.0)).sqrt();
        assert!((ratio - 0.83).abs() < 0.03, "{ratio}");
    }
}
