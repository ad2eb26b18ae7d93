//! Sampling policies and the fixed selection baselines.
//!
//! A [`SamplingPolicy`] is a probability vector over a set of sample ids. The
//! learned sampler produces one from energies via a stabilized softmax;
//! batches are drawn from it sequentially without replacement unless asked
//! otherwise. Batch-hard (OHEM) and semi-hard selection are the hand-designed
//! triplet baselines.

use std::collections::{HashMap, HashSet};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::losses::{Metric, TripletSpec};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPolicy {
    ids: Vec<usize>,
    probs: Vec<f64>,
}

impl SamplingPolicy {
    /// Validates that `ids` are distinct and `probs` is a distribution.
    pub fn new(ids: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("policy index set"));
        }
        if ids.len() != probs.len() {
            return Err(invalid(format!("{} ids but {} probabilities", ids.len(), probs.len())));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|&&i| !seen.insert(i)) {
            return Err(invalid(format!("duplicate id {dup} in policy")));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::DegeneratePolicy("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::DegeneratePolicy(format!("probabilities sum to {total}")));
        }
        Ok(Self { ids, probs })
    }

    pub fn uniform(ids: Vec<usize>) -> Result<Self> {
        let p = 1.0 / ids.len().max(1) as f64;
        let n = ids.len();
        Self::new(ids, vec![p; n])
    }

    /// Probabilities proportional to non-negative `weights`.
    pub fn from_weights(ids: Vec<usize>, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::DegeneratePolicy(format!("weights sum to {total}")));
        }
        Self::new(ids, weights.iter().map(|w| w / total).collect())
    }

    /// Stabilized softmax of `energies` over `ids`.
    pub fn from_energies(ids: Vec<usize>, energies: &[f64]) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::Empty("energies"));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numerical("non-finite energy".into()));
        }
        Self::new(ids, softmax(energies))
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn prob_of(&self, id: usize) -> Option<f64> {
        self.ids.iter().position(|&i| i == id).map(|k| self.probs[k])
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// The policy restricted to `subset` and renormalized to sum to one.
    pub fn normalize_subset(&self, subset: &[usize]) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::Empty("subset"));
        }
        let index: HashMap<usize, usize> = self.ids.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let probs: Vec<f64> = subset
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&k| self.probs[k])
                    .ok_or_else(|| invalid(format!("subset id {id} not in policy")))
            })
            .collect::<Result<_>>()?;
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegeneratePolicy("subset has zero probability mass".into()));
        }
        Self::new(subset.to_vec(), probs.iter().map(|p| p / total).collect())
    }

    /// `count` distinct ids, drawn one at a time with the remaining mass
    /// renormalized after each draw. When only zero-probability ids remain
    /// they are drawn uniformly, so `count == len` always yields a permutation.
    pub fn draw(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if count > self.ids.len() {
            return Err(invalid(format!("cannot draw {count} distinct ids from {}", self.ids.len())));
        }
        let mut taken = vec![false; self.ids.len()];
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let total: f64 = self.probs.iter().zip(&taken).filter(|(_, &t)| !t).map(|(p, _)| p).sum();
            let k = if total > 0.0 {
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                let mut last_positive = 0;
                for (k, (&p, &t)) in self.probs.iter().zip(&taken).enumerate() {
                    if t || p <= 0.0 {
                        continue;
                    }
                    last_positive = k;
                    acc += p;
                    if u < acc {
                        pick = Some(k);
                        break;
                    }
                }
                pick.unwrap_or(last_positive)
            } else {
                let free: Vec<usize> = (0..taken.len()).filter(|&k| !taken[k]).collect();
                free[rng.random_range(0..free.len())]
            };
            taken[k] = true;
            out.push(self.ids[k]);
        }
        Ok(out)
    }

    /// `count` independent draws (duplicates possible).
    pub fn draw_with_replacement(&self, count: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut cdf = Vec::with_capacity(self.probs.len());
        let mut acc = 0.0;
        for p in &self.probs {
            acc += p;
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let k = cdf.partition_point(|&c| c <= u).min(self.ids.len() - 1);
                self.ids[k]
            })
            .collect()
    }
}

/// Max-subtracted softmax.
pub fn softmax(energies: &[f64]) -> Vec<f64> {
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax policy over ids `0..energies.len()`.
pub fn softmax_policy(energies: &[f64]) -> Result<SamplingPolicy> {
    SamplingPolicy::from_energies((0..energies.len()).collect(), energies)
}

/// Batch-hard mining: for every anchor in the batch, the farthest positive
/// and the nearest negative. `ids[i]`, `labels[i]` and row `i` of
/// `embeddings` describe the same sample. Ties go to the lowest sample id and
/// the output is ordered by anchor id, so the result does not depend on the
/// order of the batch. Anchors without a positive or negative are skipped.
pub fn ohem_select(
    ids: &[usize],
    labels: &[usize],
    embeddings: &Tensor,
    metric: Metric,
    margin: f64,
) -> Result<Vec<TripletSpec>> {
    if ids.len() != labels.len() || embeddings.rows() != ids.len() || embeddings.rank() != 2 {
        return Err(invalid("ohem batch ids, labels and embeddings disagree in length"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&k| ids[k]);
    let mut out = Vec::new();
    for &a in &order {
        let ea = embeddings.row(a);
        // (distance, id) with id-based tie-breaking
        let mut hardest_pos: Option<(f64, usize)> = None;
        let mut hardest_neg: Option<(f64, usize)> = None;
        for &k in &order {
            if k == a {
                continue;
            }
            let d = metric.distance(ea, embeddings.row(k));
            if labels[k] == labels[a] {
                if hardest_pos.is_none_or(|(best, _)| d > best) {
                    hardest_pos = Some((d, ids[k]));
                }
            } else if hardest_neg.is_none_or(|(best, _)| d < best) {
                hardest_neg = Some((d, ids[k]));
            }
        }
        if let (Some((_, p)), Some((_, n))) = (hardest_pos, hardest_neg) {
            out.push(TripletSpec {
                anchor: ids[a],
                positive: p,
                negative: n,
                margin,
            });
        }
    }
    Ok(out)
}

/// Semi-hard selection for one anchor: a uniformly random positive, then the
/// closest negative with `d(a,p) < d(a,n) < d(a,p) + margin`. Without such a
/// negative, the closest one beyond `d(a,p)`; failing that, the farthest.
/// Ties go to the lowest id.
pub fn semihard_select(
    anchor: usize,
    positives: &[usize],
    negatives: &[usize],
    dist: impl Fn(usize, usize) -> f64,
    margin: f64,
    rng: &mut impl Rng,
) -> Result<TripletSpec> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("semi-hard candidates"));
    }
    let positive = positives[rng.random_range(0..positives.len())];
    let dap = dist(anchor, positive);
    let mut scored: Vec<(f64, usize)> = negatives.iter().map(|&n| (dist(anchor, n), n)).collect();
    scored.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let beyond = scored.iter().find(|(d, _)| *d > dap);
    let negative = match beyond {
        // The closest negative beyond d(a,p) is semi-hard whenever any is.
        Some(&(_, n)) => n,
        None => {
            let far = scored.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            scored.iter().find(|x| x.0 == far).expect("nonempty").1
        }
    };
    Ok(TripletSpec {
        anchor,
        positive,
        negative,
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand_distr::StandardNormal;

    #[test]
    fn softmax_policy_cases() {
        let p = softmax_policy(&[0.0, 0.0, 0.0]).unwrap();
        assert!(p.probs().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_policy(&[2f64.ln(), 0.0, 0.0]).unwrap();
        for (a, b) in p.probs().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(softmax_policy(&[]), Err(Error::Empty(_))));
        assert!(softmax_policy(&[0.0, f64::NAN]).is_err());
        assert!(softmax_policy(&[0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_policy_matches_unstabilized_formula() {
        let mut rng = crate::rng::seeded(1);
        let e: Vec<f64> = (0..50).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let total: f64 = e.iter().map(|x| x.exp()).sum();
        let p = softmax_policy(&e).unwrap();
        for (pi, ei) in p.probs().iter().zip(&e) {
            assert!((pi - ei.exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_validation() {
        assert!(SamplingPolicy::new(vec![1, 1], vec![0.5, 0.5]).is_err());
        assert!(SamplingPolicy::new(vec![1, 2], vec![0.5, 0.6]).is_err());
        assert!(SamplingPolicy::new(vec![1, 2], vec![-0.5, 1.5]).is_err());
        assert!(SamplingPolicy::new(vec![], vec![]).is_err());
    }

    #[test]
    fn normalize_subset_cases() {
        let p = softmax_policy(&[0.3, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(p.normalize_subset(&[0, 1, 2, 3]).unwrap(), p);
        let u = SamplingPolicy::uniform((0..10).collect()).unwrap();
        let s = u.normalize_subset(&[7, 2, 5]).unwrap();
        assert!(s.probs().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let mut rng = crate::rng::seeded(5);
        for _ in 0..50 {
            let e: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
            let p = softmax_policy(&e).unwrap();
            let subset = p.draw(5, &mut rng).unwrap();
            let q = p.normalize_subset(&subset).unwrap();
            let total: f64 = subset.iter().map(|&i| p.probs()[i]).sum();
            for (k, &i) in subset.iter().enumerate() {
                assert!((q.probs()[k] - p.probs()[i] / total).abs() < 1e-12);
            }
        }

        assert!(p.normalize_subset(&[99]).is_err());
        let z = SamplingPolicy::new(vec![0, 1], vec![1.0, 0.0]).unwrap();
        assert!(matches!(z.normalize_subset(&[1]), Err(Error::DegeneratePolicy(_))));
    }

    #[test]
    fn draw_cases() {
        let mut rng = crate::rng::seeded(2);
        let p = softmax_policy(&[0.1, 0.5, -0.3, 2.0, 0.0]).unwrap();
        let mut all = p.draw(5, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(p.draw(6, &mut rng).is_err());

        let mut e = vec![-40.0; 10];
        e[7] = 40.0;
        let peaked = softmax_policy(&e).unwrap();
        for _ in 0..100 {
            assert_eq!(peaked.draw(3, &mut rng).unwrap()[0], 7);
        }

        // One-hot policy: zero-mass ids still complete a permutation.
        let one_hot = SamplingPolicy::new(vec![0, 1, 2], vec![0.0, 1.0, 0.0]).unwrap();
        let mut d = one_hot.draw(3, &mut rng).unwrap();
        assert_eq!(d[0], 1);
        d.sort();
        assert_eq!(d, vec![0, 1, 2]);
    }

    #[test]
    fn draw_is_deterministic_per_seed() {
        let p = softmax_policy(&[0.1, 0.5, -0.3, 2.0, 0.0, 1.0]).unwrap();
        let a = p.draw(4, &mut crate::rng::seeded(9)).unwrap();
        let b = p.draw(4, &mut crate::rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_single_draw_frequencies_within_three_sigma() {
        let mut rng = crate::rng::seeded(3);
        let u = SamplingPolicy::uniform((0..10).collect()).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[u.draw(1, &mut rng).unwrap()[0]] += 1;
        }
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.1).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn with_replacement_follows_policy() {
        let mut rng = crate::rng::seeded(4);
        let p = SamplingPolicy::new(vec![10, 20], vec![0.25, 0.75]).unwrap();
        let d = p.draw_with_replacement(40_000, &mut rng);
        let frac = d.iter().filter(|&&i| i == 20).count() as f64 / 40_000.0;
        let sigma = (0.75 * 0.25 / 40_000f64).sqrt();
        assert!((frac - 0.75).abs() < 3.0 * sigma);
    }

    #[test]
    fn ohem_hand_placed() {
        // ids 0,1 identity A; ids 2,3 identity B, on a line.
        let emb = Tensor::from_rows(&[[0.0], [1.0], [1.5], [4.0]]).unwrap();
        let t = ohem_select(&[0, 1, 2, 3], &[0, 0, 1, 1], &emb, Metric::Euclidean, 0.3).unwrap();
        let tuples: Vec<_> = t.iter().map(|t| (t.anchor, t.positive, t.negative)).collect();
        assert_eq!(tuples, vec![(0, 1, 2), (1, 0, 2), (2, 3, 1), (3, 2, 1)]);
    }

    #[test]
    fn ohem_identical_embeddings_break_ties_by_id() {
        let emb = Tensor::from_rows(&[[1.0, 1.0]; 4]).unwrap();
        let t = ohem_select(&[5, 9, 2, 7], &[0, 1, 0, 1], &emb, Metric::Euclidean, 0.3).unwrap();
        let tuples: Vec<_> = t.iter().map(|t| (t.anchor, t.positive, t.negative)).collect();
        assert_eq!(tuples, vec![(2, 5, 7), (5, 2, 7), (7, 9, 2), (9, 7, 2)]);
    }

    #[test]
    fn ohem_skips_anchor_without_positive() {
        let emb = Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let t = ohem_select(&[0, 1, 2], &[0, 0, 1], &emb, Metric::Euclidean, 0.3).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.anchor != 2));
    }

    fn brute_ohem(ids: &[usize], labels: &[usize], emb: &Tensor) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let n = ids.len();
        let mut anchors: Vec<usize> = (0..n).collect();
        anchors.sort_by_key(|&k| ids[k]);
        for a in anchors {
            let d = |k: usize| Metric::Euclidean.distance(emb.row(a), emb.row(k));
            let pos: Vec<usize> = (0..n).filter(|&k| k != a && labels[k] == labels[a]).collect();
            let neg: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[a]).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let dmax = pos.iter().map(|&k| d(k)).fold(f64::NEG_INFINITY, f64::max);
            let p = pos.iter().filter(|&&k| d(k) == dmax).map(|&k| ids[k]).min().unwrap();
            let dmin = neg.iter().map(|&k| d(k)).fold(f64::INFINITY, f64::min);
            let q = neg.iter().filter(|&&k| d(k) == dmin).map(|&k| ids[k]).min().unwrap();
            out.push((ids[a], p, q));
        }
        out
    }

    #[test]
    fn ohem_matches_exhaustive_oracle() {
        let mut rng = crate::rng::seeded(6);
        for _ in 0..100 {
            let n = rng.random_range(4..16);
            let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| (rng.random_range(0..4) as f64) * 0.5).collect())
                .collect();
            let emb = Tensor::from_rows(&rows).unwrap();
            let got: Vec<_> = ohem_select(&ids, &labels, &emb, Metric::Euclidean, 0.3)
                .unwrap()
                .iter()
                .map(|t| (t.anchor, t.positive, t.negative))
                .collect();
            assert_eq!(got, brute_ohem(&ids, &labels, &emb));
        }
    }

    #[test]
    fn semihard_cases() {
        let mut rng = crate::rng::seeded(1);
        let dists = [0.0, 0.5, 0.4, 0.7, 1.5];
        let d = |_: usize, k: usize| dists[k];
        let t = semihard_select(0, &[1], &[2, 3, 4], d, 0.3, &mut rng).unwrap();
        assert_eq!(t.negative, 3);

        let dists = [0.0, 0.9, 0.4, 0.7, 0.2];
        let d = |_: usize, k: usize| dists[k];
        let t = semihard_select(0, &[1], &[2, 3, 4], d, 0.3, &mut rng).unwrap();
        assert_eq!(t.negative, 3, "farthest negative when none is beyond d(a,p)");

        assert!(semihard_select(0, &[], &[1], d, 0.3, &mut rng).is_err());
    }

    #[test]
    fn semihard_matches_brute_force_filter() {
        let mut rng = crate::rng::seeded(8);
        for _ in 0..300 {
            let n = rng.random_range(2..12);
            let dists: Vec<f64> = (0..n + 2).map(|_| rng.random_range(0..20) as f64 * 0.1).collect();
            let d = |_: usize, k: usize| dists[k];
            let negatives: Vec<usize> = (2..n + 2).collect();
            let margin = 0.3;
            let t = semihard_select(0, &[1], &negatives, d, margin, &mut rng).unwrap();
            let dap = dists[1];
            let argmin = |c: Vec<usize>| {
                let m = c.iter().map(|&k| dists[k]).fold(f64::INFINITY, f64::min);
                c.into_iter().filter(|&k| dists[k] == m).min()
            };
            let band: Vec<usize> =
                negatives.iter().copied().filter(|&k| dists[k] > dap && dists[k] < dap + margin).collect();
            let beyond: Vec<usize> = negatives.iter().copied().filter(|&k| dists[k] > dap).collect();
            let expected = argmin(band).or_else(|| argmin(beyond)).unwrap_or_else(|| {
                let m = negatives.iter().map(|&k| dists[k]).fold(f64::NEG_INFINITY, f64::max);
                *negatives.iter().filter(|&&k| dists[k] == m).min().unwrap()
            });
            assert_eq!(t.negative, expected);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant_and_monotone(
            e in prop::collection::vec(-20.0f64..20.0, 1..30),
            c in -100.0f64..100.0,
        ) {
            let p = softmax_policy(&e).unwrap();
            let shifted: Vec<f64> = e.iter().map(|x| x + c).collect();
            let q = softmax_policy(&shifted).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..e.len() {
                for j in 0..e.len() {
                    if e[i] > e[j] {
                        prop_assert!(p.probs()[i] > p.probs()[j]);
                    }
                }
            }
        }

        #[test]
        fn normalize_subset_is_idempotent(
            e in prop::collection::vec(-5.0f64..5.0, 3..20),
            seed in 0u64..1000,
        ) {
            let p = softmax_policy(&e).unwrap();
            let mut rng = crate::rng::seeded(seed);
            let k = rng.random_range(1..=e.len());
            let subset = p.draw(k, &mut rng).unwrap();
            let once = p.normalize_subset(&subset).unwrap();
            let twice = once.normalize_subset(&subset).unwrap();
            for (a, b) in once.probs().iter().zip(twice.probs()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn ohem_is_invariant_under_batch_reordering(seed in 0u64..500) {
            let mut rng = crate::rng::seeded(seed);
            let n = 8;
            let ids: Vec<usize> = (0..n).map(|i| i * 7 % 11).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(0..3) as f64).collect()).collect();
            let perm = SamplingPolicy::uniform((0..n).collect()).unwrap().draw(n, &mut rng).unwrap();
            let emb = Tensor::from_rows(&rows).unwrap();
            let emb_p = Tensor::from_rows(&perm.iter().map(|&k| rows[k].clone()).collect::<Vec<_>>()).unwrap();
            let ids_p: Vec<usize> = perm.iter().map(|&k| ids[k]).collect();
            let labels_p: Vec<usize> = perm.iter().map(|&k| labels[k]).collect();
            let a = ohem_select(&ids, &labels, &emb, Metric::Euclidean, 0.3).unwrap();
            let b = ohem_select(&ids_p, &labels_p, &emb_p, Metric::Euclidean, 0.3).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
