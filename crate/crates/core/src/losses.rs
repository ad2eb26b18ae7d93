//! Cross-entropy, margin triplet and focal losses, and the embedding distance.
//!
//! Every loss exists in two forms: a graph form over a batch of rows (used by
//! training, differentiable) and a value form for a single sample, which
//! records the same graph ops and returns the number.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Distance `d` between embeddings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    SquaredEuclidean,
    /// `1 - cos(a, b)`.
    Cosine,
}

impl Metric {
    /// Direct evaluation, used for ranking and mining.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }

    /// Row-wise distances between two `[n, d]` batches: `-> [n]`.
    pub fn rows(self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        match self {
            Metric::Euclidean => {
                let diff = g.sub(a, b)?;
                g.l2_norm(diff)
            }
            Metric::SquaredEuclidean => {
                let diff = g.sub(a, b)?;
                let sq = g.square(diff)?;
                g.sum_last(sq)
            }
            Metric::Cosine => {
                let prod = g.mul(a, b)?;
                let dot = g.sum_last(prod)?;
                let na = g.l2_norm(a)?;
                let nb = g.l2_norm(b)?;
                let denom = g.mul(na, nb)?;
                let cos = g.div(dot, denom)?;
                let neg = g.scale(cos, -1.0)?;
                g.shift(neg, 1.0)
            }
        }
    }
}

/// `d(e1, e2)`; errors when the dimensions differ.
pub fn distance(e1: &[f64], e2: &[f64], metric: Metric) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::ShapeMismatch {
            op: "distance",
            node: 0,
            lhs: vec![e1.len()],
            rhs: vec![e2.len()],
        });
    }
    Ok(metric.distance(e1, e2))
}

fn check_labels(g: &Graph, logits: Var, labels: &[usize]) -> Result<()> {
    let classes = g.value(logits).cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::OutOfRange {
            what: "label",
            index: bad,
            len: classes,
        });
    }
    Ok(())
}

/// Per-row `-log softmax(z)[y]`: `[n, classes] -> [n]`.
pub fn cross_entropy_rows(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g, logits, labels)?;
    let ls = g.log_softmax(logits)?;
    let picked = g.gather(ls, labels)?;
    g.scale(picked, -1.0)
}

/// Per-row focal loss `(1 - p_y)^gamma * CE`.
pub fn focal_rows(g: &mut Graph, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(invalid(format!("focal gamma must be >= 0, got {gamma}")));
    }
    check_labels(g, logits, labels)?;
    let ls = g.log_softmax(logits)?;
    let log_py = g.gather(ls, labels)?;
    let py = g.exp(log_py)?;
    let neg = g.scale(py, -1.0)?;
    let one_minus = g.shift(neg, 1.0)?;
    let weight = g.pow(one_minus, gamma)?;
    let ce = g.scale(log_py, -1.0)?;
    g.mul(weight, ce)
}

/// Per-row `max(d(a, p) - d(a, n) + margin, 0)`.
pub fn triplet_rows(g: &mut Graph, a: Var, p: Var, n: Var, margin: f64, metric: Metric) -> Result<Var> {
    let dap = metric.rows(g, a, p)?;
    let dan = metric.rows(g, a, n)?;
    let diff = g.sub(dap, dan)?;
    let shifted = g.shift(diff, margin)?;
    g.max0(shifted)
}

fn logits_row(g: &mut Graph, logits: &[f64]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    Ok(g.constant(Tensor::matrix(1, logits.len(), logits.to_vec())?))
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let z = logits_row(&mut g, logits)?;
    let l = cross_entropy_rows(&mut g, z, &[label])?;
    g.value(l).item()
}

pub fn focal_loss(logits: &[f64], label: usize, gamma: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = logits_row(&mut g, logits)?;
    let l = focal_rows(&mut g, z, &[label], gamma)?;
    g.value(l).item()
}

pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64, metric: Metric) -> Result<f64> {
    if margin < 0.0 {
        return Err(invalid(format!("margin must be >= 0, got {margin}")));
    }
    let mut g = Graph::new();
    let row = |g: &mut Graph, v: &[f64]| -> Result<Var> { Ok(g.constant(Tensor::matrix(1, v.len(), v.to_vec())?)) };
    let (va, vp, vn) = (row(&mut g, a)?, row(&mut g, p)?, row(&mut g, n)?);
    let l = triplet_rows(&mut g, va, vp, vn, margin, metric)?;
    g.value(l).item()
}

/// Indices of one triplet plus its margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub margin: f64,
}

impl TripletSpec {
    /// Checks identity constraints against `labels` (indexed like the triplet).
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let get = |i: usize| {
            labels.get(i).copied().ok_or(Error::OutOfRange {
                what: "triplet member",
                index: i,
                len: labels.len(),
            })
        };
        let (a, p, n) = (get(self.anchor)?, get(self.positive)?, get(self.negative)?);
        if self.margin < 0.0 {
            return Err(invalid("triplet margin must be >= 0"));
        }
        if a != p || a == n || self.anchor == self.positive {
            return Err(invalid(format!("triplet {self:?} violates identity constraints")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_difference, max_relative_error};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn oracle_ce(z: &[f64], y: usize) -> f64 {
        -(z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln()
    }

    fn randv(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        assert!((cross_entropy(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_decreases_as_true_logit_grows() {
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let l = cross_entropy(&[k as f64 * 0.5, 0.3, -0.2], 0).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn cross_entropy_matches_formula() {
        let mut rng = crate::rng::seeded(1);
        for _ in 0..200 {
            let z = randv(&mut rng, 6);
            let y = rng.random_range(0..6);
            assert!((cross_entropy(&z, y).unwrap() - oracle_ce(&z, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        assert!(matches!(cross_entropy(&[0.0; 3], 3), Err(Error::OutOfRange { what: "label", .. })));
        assert!(focal_loss(&[0.0; 3], 5, 2.0).is_err());
    }

    #[test]
    fn distance_cases() {
        let e = [0.3, -1.0, 2.0];
        assert_eq!(distance(&e, &e, Metric::Euclidean).unwrap(), 0.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], Metric::Euclidean).unwrap(), 5.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], Metric::SquaredEuclidean).unwrap(), 25.0);
        assert!(distance(&[1.0], &[1.0, 2.0], Metric::Euclidean).is_err());
    }

    #[test]
    fn graph_distance_matches_direct() {
        let mut rng = crate::rng::seeded(7);
        for metric in [Metric::Euclidean, Metric::SquaredEuclidean, Metric::Cosine] {
            for _ in 0..20 {
                let (a, b) = (randv(&mut rng, 4), randv(&mut rng, 4));
                let mut g = Graph::new();
                let va = g.constant(Tensor::matrix(1, 4, a.clone()).unwrap());
                let vb = g.constant(Tensor::matrix(1, 4, b.clone()).unwrap());
                let d = metric.rows(&mut g, va, vb).unwrap();
                assert!((g.value(d).data()[0] - metric.distance(&a, &b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triplet_analytic_cases() {
        // Collinear points give exact distances along one axis.
        let a = [0.0];
        assert_eq!(triplet_loss(&a, &[0.2], &[0.9], 0.3, Metric::Euclidean).unwrap(), 0.0);
        let l = triplet_loss(&a, &[0.8], &[0.5], 0.3, Metric::Euclidean).unwrap();
        assert!((l - 0.6).abs() < 1e-12);
        assert!(triplet_loss(&a, &[0.8], &[0.5], -0.1, Metric::Euclidean).is_err());
    }

    #[test]
    fn triplet_matches_formula() {
        let mut rng = crate::rng::seeded(2);
        for _ in 0..200 {
            let (a, p, n) = (randv(&mut rng, 5), randv(&mut rng, 5), randv(&mut rng, 5));
            let m = rng.random_range(0.0..1.0);
            let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let expected = (d(&a, &p) - d(&a, &n) + m).max(0.0);
            assert!((triplet_loss(&a, &p, &n, m, Metric::Euclidean).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_cases() {
        let mut rng = crate::rng::seeded(3);
        for _ in 0..200 {
            let z = randv(&mut rng, 5);
            let y = rng.random_range(0..5);
            let ce = cross_entropy(&z, y).unwrap();
            assert_eq!(focal_loss(&z, y, 0.0).unwrap(), ce);
            let py = (-oracle_ce(&z, y)).exp();
            let expected = (1.0 - py).powi(2) * oracle_ce(&z, y);
            let got = focal_loss(&z, y, 2.0).unwrap();
            assert!((got - expected).abs() < 1e-12);
            assert!(got <= ce);
        }
        // p_y -> 1
        assert!(focal_loss(&[60.0, 0.0, 0.0], 0, 2.0).unwrap() < 1e-40);
        assert!(focal_loss(&[0.0, 1.0], 0, -1.0).is_err());
    }

    fn triplet_value(v: &[f64], margin: f64) -> f64 {
        triplet_loss(&v[0..3], &v[3..6], &v[6..9], margin, Metric::Euclidean).unwrap()
    }

    fn triplet_grad(v: &[f64], margin: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(1, 3, v[0..3].to_vec()).unwrap());
        let p = g.param(Tensor::matrix(1, 3, v[3..6].to_vec()).unwrap());
        let n = g.param(Tensor::matrix(1, 3, v[6..9].to_vec()).unwrap());
        let l = triplet_rows(&mut g, a, p, n, margin, Metric::Euclidean).unwrap();
        let s = g.sum(l).unwrap();
        g.backward(s).unwrap().flat(&[a, p, n])
    }

    #[test]
    fn triplet_gradient_zero_when_inactive_and_exact_when_active() {
        let mut rng = crate::rng::seeded(4);
        let mut active = 0;
        for _ in 0..200 {
            let v = randv(&mut rng, 9);
            let value = triplet_value(&v, 0.3);
            if value.abs() < 1e-3 {
                continue; // too close to the hinge for finite differences
            }
            let grad = triplet_grad(&v, 0.3);
            if value == 0.0 {
                assert!(grad.iter().all(|&x| x == 0.0));
            } else {
                active += 1;
                let numeric = central_difference(&v, 1e-5, |x| triplet_value(x, 0.3));
                assert!(max_relative_error(&grad, &numeric) < 1e-4);
            }
        }
        assert!(active > 20);
    }

    #[test]
    fn triplet_spec_validation() {
        let labels = [0, 0, 1];
        let ok = TripletSpec {
            anchor: 0,
            positive: 1,
            negative: 2,
            margin: 0.3,
        };
        assert!(ok.validate(&labels).is_ok());
        assert!(TripletSpec { negative: 1, ..ok }.validate(&labels).is_err());
        assert!(TripletSpec { positive: 2, ..ok }.validate(&labels).is_err());
        assert!(TripletSpec { margin: -1.0, ..ok }.validate(&labels).is_err());
    }

    proptest! {
        #[test]
        fn cross_entropy_is_shift_invariant(z in prop::collection::vec(-10.0f64..10.0, 2..8), c in -50.0f64..50.0, y in 0usize..8) {
            let y = y % z.len();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            prop_assert!((cross_entropy(&z, y).unwrap() - cross_entropy(&shifted, y).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn euclidean_distance_is_a_metric(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            c in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let d = |x: &[f64], y: &[f64]| distance(x, y, Metric::Euclidean).unwrap();
            prop_assert!(d(&a, &b) >= 0.0);
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }
    }
}
