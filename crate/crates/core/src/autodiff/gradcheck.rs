use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, Graph, ParamGroup, TensorError, Var};

/// Minimum number of probed coordinates per parameter tensor.
pub const MIN_PROBES: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    /// `(parameter, max relative error)` per tensor.
    pub per_param: Vec<(String, f64)>,
    pub max_relative_error: f64,
    pub probes: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// The error at a coordinate is `|analytic - numeric| / max(1, |numeric|)`;
/// the report carries the maximum. Tensors with fewer than 32 elements are
/// probed exhaustively, larger ones at 32 seeded random coordinates.
pub fn grad_check<F>(
    label: &str,
    params: &mut ParamGroup,
    epsilon: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, TensorError>,
{
    grad_check_with(label, params, epsilon, seed, Graph::new, f)
}

/// As [`grad_check`], with a caller-supplied graph constructor (fault injection).
pub fn grad_check_with<F, G>(
    label: &str,
    params: &mut ParamGroup,
    epsilon: f64,
    seed: u64,
    make_graph: G,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, TensorError>,
    G: Fn() -> Graph,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(TensorError::Contract(format!("grad_check epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let mut graph = make_graph();
    let bound = graph.bind(params, true);
    let loss = f(&mut graph, &bound)?;
    graph.backward(loss)?;

    let eval = |params: &ParamGroup| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let b = g.bind(params, false);
        let l = f(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut per_param = Vec::new();
    let mut probes = 0;
    for name in names {
        let var = bound.get(&name)?;
        let n = params.get(&name).expect("bound name").numel();
        let analytic = match graph.grad(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = if n <= MIN_PROBES {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, MIN_PROBES).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = params.get(&name).expect("bound name").data()[i];
            params.get_mut(&name).expect("bound name").data_mut()[i] = orig + epsilon;
            let plus = eval(params);
            params.get_mut(&name).expect("bound name").data_mut()[i] = orig - epsilon;
            let minus = eval(params);
            params.get_mut(&name).expect("bound name").data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = analytic[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite {
                    what: format!("{label}: gradient of `{name}`[{i}]"),
                });
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
            probes += 1;
        }
        per_param.push((name, worst));
    }
    let max_relative_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        label: label.to_string(),
        per_param,
        max_relative_error,
        probes,
    })
}
