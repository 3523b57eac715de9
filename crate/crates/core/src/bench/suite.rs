use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{adapt_loss, Sae, SaeBound};
use crate::agent::{AgentNets, AgentSpec, Checkpoint};
use crate::autodiff::{grad_check_with, Bound, Fault, GradCheckReport, Graph, ParamGroup, Tensor, TensorError, Var};
use crate::nn::EncoderSpec;
use crate::world::{Observation, Transition};

/// Largest acceptable relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const EPSILON: f64 = 1e-6;

pub const SUITE_OPS: [&str; 8] = [
    "conv2d",
    "linear",
    "relu",
    "maxpool",
    "affine_grid",
    "grid_sample",
    "grid_sample_phi",
    "view_loss",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn group(entries: Vec<(&str, Tensor)>) -> ParamGroup {
    let mut g = ParamGroup::new("p", 1e-3).expect("positive lr");
    for (n, t) in entries {
        g.insert(n, t);
    }
    g
}

/// Values in `[0.05, 1)` with random sign, safely away from the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector(
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen() {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
}

fn near_identity_phi(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::vector(crate::nn::AffineParams::IDENTITY.0.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect())
}

fn check<F>(op: &str, params: &mut ParamGroup, seed: u64, fault: Option<Fault>, f: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, TensorError>,
{
    let make = || fault.map_or_else(Graph::new, Graph::with_fault);
    grad_check_with(op, params, EPSILON, seed, make, f)
}

/// Gradient check of one primitive on the instance drawn from `seed`.
pub fn check_op(op: &str, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        "conv2d" => {
            let t = rand_tensor(&mut rng, &[4, 3, 3]);
            let mut p = group(vec![
                ("x", rand_tensor(&mut rng, &[3, 8, 8])),
                ("w", rand_tensor(&mut rng, &[4, 3, 3, 3])),
                ("b", rand_tensor(&mut rng, &[4])),
            ]);
            check(op, &mut p, seed, fault, |g, b| {
                let y = g.conv2d(b.get("x")?, b.get("w")?, b.get("b")?, 2)?;
                let tv = g.input(t.clone());
                g.mse_loss(y, tv)
            })
        }
        "linear" => {
            let t = rand_tensor(&mut rng, &[5]);
            let mut p = group(vec![
                ("x", rand_tensor(&mut rng, &[7])),
                ("w", rand_tensor(&mut rng, &[5, 7])),
                ("b", rand_tensor(&mut rng, &[5])),
            ]);
            check(op, &mut p, seed, fault, |g, b| {
                let y = g.linear(b.get("x")?, b.get("w")?, b.get("b")?)?;
                let tv = g.input(t.clone());
                g.mse_loss(y, tv)
            })
        }
        "relu" => {
            let t = rand_tensor(&mut rng, &[40]);
            let mut p = group(vec![("x", off_kink(&mut rng, 40))]);
            check(op, &mut p, seed, fault, |g, b| {
                let y = g.relu(b.get("x")?);
                let tv = g.input(t.clone());
                g.mse_loss(y, tv)
            })
        }
        "maxpool" => {
            // Distinct values keep the argmax stable under perturbation.
            let mut vals: Vec<f64> = (0..2 * 8 * 8).map(|i| i as f64 * 0.01).collect();
            for i in (1..vals.len()).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            let t = rand_tensor(&mut rng, &[2, 3, 3]);
            let mut p = group(vec![("x", Tensor::new([2, 8, 8], vals)?)]);
            check(op, &mut p, seed, fault, |g, b| {
                let y = g.maxpool2d(b.get("x")?, 3, 2)?;
                let tv = g.input(t.clone());
                g.mse_loss(y, tv)
            })
        }
        "affine_grid" => {
            let t = rand_tensor(&mut rng, &[6, 5, 2]);
            let mut p = group(vec![("phi", near_identity_phi(&mut rng))]);
            check(op, &mut p, seed, fault, |g, b| {
                let grid = g.affine_grid(b.get("phi")?, 6, 5)?;
                let tv = g.input(t.clone());
                g.mse_loss(grid, tv)
            })
        }
        "grid_sample" => {
            let grid = Tensor::from_fn([6, 6, 2], |_| rng.gen_range(-2.5..2.5));
            let t = rand_tensor(&mut rng, &[2, 6, 6]);
            let mut p = group(vec![("x", rand_tensor(&mut rng, &[2, 6, 6]))]);
            check(op, &mut p, seed, fault, |g, b| {
                let gv = g.input(grid.clone());
                let y = g.grid_sample(b.get("x")?, gv)?;
                let tv = g.input(t.clone());
                g.mse_loss(y, tv)
            })
        }
        "grid_sample_phi" => {
            let x = rand_tensor(&mut rng, &[2, 8, 8]);
            let t = rand_tensor(&mut rng, &[2, 8, 8]);
            let mut p = group(vec![("phi", near_identity_phi(&mut rng))]);
            check(op, &mut p, seed, fault, |g, b| {
                let grid = g.affine_grid(b.get("phi")?, 8, 8)?;
                let xv = g.input(x.clone());
                let y = g.grid_sample(xv, grid)?;
                let tv = g.input(t.clone());
                g.mse_loss(y, tv)
            })
        }
        "view_loss" => view_loss_check(&mut rng, seed, fault),
        other => Err(TensorError::Contract(format!("unknown gradient-check op `{other}`"))),
    }
}

/// The adaptation objective `mse(d(SAE(o)), SAE(o'))` differentiated with
/// respect to every transformer and encoder parameter at once.
fn view_loss_check(rng: &mut ChaCha8Rng, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, TensorError> {
    let nets = AgentNets::init(AgentSpec::new(EncoderSpec::desk()), 1e-3, seed).map_err(|e| TensorError::Contract(e.to_string()))?;
    let ckpt = Checkpoint::new(nets, serde_json::json!({}));
    let mut sae = Sae::build(&ckpt, 2, 1e-5, 1e-7, seed).map_err(|e| TensorError::Contract(e.to_string()))?;
    // Move the transformers off the identity so their localization nets carry gradient.
    for k in 0..sae.stn_count() {
        let w = sae.stn.get_mut(&format!("stn{k}.fc1.weight")).expect("head weight");
        w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
    }
    let frames = |rng: &mut ChaCha8Rng| Observation {
        frames: Tensor::from_fn([9, 32, 32], |_| rng.gen_range(0.0..1.0)),
    };
    let t = Transition {
        obs: frames(rng),
        action: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
        next_obs: frames(rng),
        success: false,
    };
    let mut merged = ParamGroup::new("sae", 1e-5)?;
    for g in [&sae.stn, &sae.encoder] {
        for (n, v) in g.iter() {
            merged.insert(n.to_string(), v.clone());
        }
    }
    let spec = ckpt.nets.spec.clone();
    let dynamics = ckpt.nets.dynamics.clone();
    check("view_loss", &mut merged, seed, fault, |g, b| {
        let sb = SaeBound {
            encoder: b.clone(),
            stn: b.clone(),
        };
        let d = g.bind(&dynamics, false);
        adapt_loss(g, &sae, &sb, &spec, &d, &[&t], false)
    })
}

/// Every op in [`SUITE_OPS`] on `instances` seeded instances each.
pub fn gradcheck_suite(instances: u64, fault: Option<Fault>) -> Result<Vec<GradCheckReport>, TensorError> {
    let mut out = Vec::new();
    for op in SUITE_OPS {
        for seed in 0..instances {
            out.push(check_op(op, seed, fault)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_on_seed_zero() {
        for op in SUITE_OPS.iter().filter(|o| **o != "view_loss") {
            let r = check_op(op, 0, None).unwrap();
            assert!(r.max_relative_error < GRADCHECK_TOLERANCE, "{r:?}");
        }
    }

    #[test]
    fn conv_fault_is_caught() {
        let r = check_op("conv2d", 0, Some(Fault::ConvWeightGrad)).unwrap();
        assert!(r.max_relative_error >= GRADCHECK_TOLERANCE, "{r:?}");
    }

    #[test]
    fn unknown_op_is_an_error() {
        assert!(check_op("softmax", 0, None).is_err());
    }
}
