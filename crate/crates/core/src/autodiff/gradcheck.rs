//! Central finite differences and the per-op gradient check suite.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor for [`relative_error`]. Coordinates whose analytic and
/// numeric values are both below it are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest coordinate-wise relative error and its index.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    worst_relative_error(analytic, numeric).0
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Self {
        let (err, idx) = worst_relative_error(analytic, numeric);
        Self {
            name: name.into(),
            max_relative_error: err,
            worst_coordinate: idx,
            coordinates: analytic.len(),
        }
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Random values with magnitude in `[lo, lo + 1 + |N(0,1)|)` and random sign
/// unless `positive`. Keeping `|x| >= lo` stays clear of kinks.
fn bounded(rng: &mut crate::rng::Rng, shape: &[usize], lo: f64, positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let mag = lo + z.abs();
            if positive || rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn check_op(name: &str, inputs: Vec<Tensor>, op: OpFn, rng: &mut crate::rng::Rng) -> Result<CheckResult> {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let weights = bounded(rng, &out_shape, 0.1, false);
    let objective = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let out = op(g, vars)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = objective(&mut g, &vars)?;
    let analytic = g.backward(loss)?.flat(&vars);

    let x: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = central_difference(&x, 1e-5, |v| {
        let mut g = Graph::new();
        let mut off = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let part = Tensor::new(t.shape().to_vec(), v[off..off + t.len()].to_vec()).expect("shape");
                off += t.len();
                g.constant(part)
            })
            .collect();
        let l = objective(&mut g, &vars).expect("objective evaluates at probe points");
        g.value(l).data()[0]
    });
    Ok(CheckResult::new(name, &analytic, &numeric))
}

/// Finite-difference check of every differentiable op at random points
/// bounded away from kinks.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = crate::rng::seeded(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let ops: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![bounded(r, &[3, 4], 0.0, false), bounded(r, &[4, 2], 0.0, false)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("add_rows", vec![bounded(r, &[3, 4], 0.0, false), bounded(r, &[4], 0.0, false)], |g, v| {
            g.add(v[0], v[1])
        }),
        ("sub_scalar", vec![bounded(r, &[3, 2], 0.0, false), bounded(r, &[], 0.0, false)], |g, v| {
            g.sub(v[0], v[1])
        }),
        ("mul", vec![bounded(r, &[2, 3], 0.0, false), bounded(r, &[2, 3], 0.0, false)], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("div", vec![bounded(r, &[5], 0.0, false), bounded(r, &[5], 0.5, false)], |g, v| g.div(v[0], v[1])),
        ("scale_shift", vec![bounded(r, &[4], 0.0, false)], |g, v| {
            let s = g.scale(v[0], -1.7)?;
            g.shift(s, 0.3)
        }),
        ("relu", vec![bounded(r, &[6], 0.05, false)], |g, v| g.relu(v[0])),
        ("exp", vec![bounded(r, &[5], 0.0, false)], |g, v| g.exp(v[0])),
        ("log", vec![bounded(r, &[5], 0.2, true)], |g, v| g.log(v[0])),
        ("square", vec![bounded(r, &[5], 0.0, false)], |g, v| g.square(v[0])),
        ("pow", vec![bounded(r, &[5], 0.2, true)], |g, v| g.pow(v[0], 2.5)),
        ("softmax", vec![bounded(r, &[3, 4], 0.0, false)], |g, v| g.softmax(v[0])),
        ("log_softmax", vec![bounded(r, &[2, 5], 0.0, false)], |g, v| g.log_softmax(v[0])),
        ("concat", vec![bounded(r, &[2, 3], 0.0, false), bounded(r, &[2, 2], 0.0, false)], |g, v| {
            g.concat(&[v[0], v[1]])
        }),
        ("l2_norm", vec![bounded(r, &[3, 4], 0.1, false)], |g, v| g.l2_norm(v[0])),
        ("sum_last", vec![bounded(r, &[3, 4], 0.0, false)], |g, v| g.sum_last(v[0])),
        ("mean", vec![bounded(r, &[3, 4], 0.0, false)], |g, v| g.mean(v[0])),
        ("gather", vec![bounded(r, &[3, 4], 0.0, false)], |g, v| g.gather(v[0], &[3, 0, 2])),
        ("reshape", vec![bounded(r, &[2, 3], 0.0, false)], |g, v| g.reshape(v[0], &[6])),
    ];
    for (name, inputs, op) in ops {
        out.push(check_op(name, inputs, op, r)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let d = central_difference(&[2.0], 1e-5, |v| v[0].powi(3));
        assert!((d[0] - 12.0).abs() < 1e-8);
    }

    #[test]
    fn every_op_matches_finite_differences_over_many_seeds() {
        for seed in 0..120 {
            for check in op_checks(seed).unwrap() {
                assert!(check.passed(1e-4), "seed {seed}: {check:?}");
            }
        }
    }
}
