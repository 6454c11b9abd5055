use std::collections::HashMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Graph, Tensor};

/// Absolute scale below which gradients are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Error statistics for one gradient-carrying input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputError {
    pub name: String,
    pub checked: usize,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputError>,
    pub epsilon: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_rel).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_abs).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.inputs {
            writeln!(
                f,
                "  {:<32} coords={:<6} max_abs={:.3e} max_rel={:.3e}",
                e.name, e.checked, e.max_abs, e.max_rel
            )?;
        }
        write!(
            f,
            "  eps={:.1e} tol={:.1e} -> {}",
            self.epsilon,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative error with an absolute floor so near-zero gradients are not
/// judged on noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences at every coordinate of every gradient-carrying input.
pub fn finite_diff_check(
    graph: &mut Graph,
    output: &str,
    point: &HashMap<String, Tensor>,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport, DiffError> {
    finite_diff_check_sampled(graph, output, point, epsilon, tolerance, None, 0)
}

/// As [`finite_diff_check`], but checks at most `max_coords` randomly chosen
/// coordinates per input.
pub fn finite_diff_check_sampled(
    graph: &mut Graph,
    output: &str,
    point: &HashMap<String, Tensor>,
    epsilon: f64,
    tolerance: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradReport, DiffError> {
    if !(epsilon > 0.0) {
        return Err(DiffError::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let out = graph
        .output_id(output)
        .ok_or_else(|| DiffError::MissingInput { name: format!("output {output}") })?;
    if graph.shape(out).iter().product::<usize>() != 1 {
        return Err(DiffError::NonScalar { node: graph.label(out), shape: graph.shape(out).to_vec() });
    }
    graph.forward_with(|n| point.get(n))?;
    let analytic = graph.backward_scalar(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = point.clone();
    let mut inputs = Vec::new();
    for (name, _) in graph.leaves() {
        let Some(grad) = analytic.get(&name) else { continue };
        let n = grad.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut err = InputError { name: name.clone(), checked: coords.len(), max_abs: 0.0, max_rel: 0.0 };
        for &k in &coords {
            let base = work[&name].data()[k];
            work.get_mut(&name).expect("bound").data_mut()[k] = base + epsilon;
            let up = eval_scalar(graph, out, &work)?;
            work.get_mut(&name).expect("bound").data_mut()[k] = base - epsilon;
            let down = eval_scalar(graph, out, &work)?;
            work.get_mut(&name).expect("bound").data_mut()[k] = base;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad.data()[k];
            err.max_abs = err.max_abs.max((a - numeric).abs());
            err.max_rel = err.max_rel.max(relative_error(a, numeric));
        }
        inputs.push(err);
    }
    // leave the cache consistent with the unperturbed point
    graph.forward_with(|n| point.get(n))?;
    let pass = inputs.iter().all(|e| e.max_rel <= tolerance);
    Ok(GradReport { inputs, epsilon, tolerance, pass })
}

fn eval_scalar(graph: &mut Graph, out: super::NodeId, point: &HashMap<String, Tensor>) -> Result<f64, DiffError> {
    graph.forward_with(|n| point.get(n))?;
    Ok(graph.value(out)?.data()[0])
}
