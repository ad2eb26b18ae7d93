//! Loss expectations, the expected SGD update and the sampler meta-step.
//!
//! Given an update batch with per-unit gradients `g_i` at weights `w` and the
//! sampler's probabilities `p_i(theta)` over that batch, the expected update is
//! `E[w'] = w - beta * sum_i p_i g_i`. The sampler is trained on the mean
//! cross-entropy of a uniformly drawn evaluation batch at `E[w']`. Because
//! `g_i` does not depend on `theta`, the exact gradient is obtained from the
//! scalar sensitivities `s_i = -beta * grad_eval . g_i` by backpropagating the
//! surrogate `sum_i s_i p_i(theta)` through the policy and energy networks.

use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{central_difference, op_checks, CheckResult};
use crate::autodiff::{per_sample_gradients, Graph, Tensor, Var};
use crate::data::TrainSet;
use crate::error::{invalid, Error, Result};
use crate::losses::{cross_entropy_rows, triplet_rows, Metric};
use crate::models::{energy_rows, pair_input, ModelDims, ModelParams, ModelVars, SamplerParams, SamplerVars};
use crate::policy::softmax;

/// Probabilities must sum to one within this.
pub const PROB_TOLERANCE: f64 = 1e-9;

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Empty("probabilities"));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::DegeneratePolicy(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// `sum_i p_i L_i` for a normalized `probs`.
pub fn expected_loss(probs: &[f64], losses: &[f64]) -> Result<f64> {
    if probs.len() != losses.len() {
        return Err(invalid(format!("{} probabilities for {} losses", probs.len(), losses.len())));
    }
    check_distribution(probs)?;
    Ok(probs.iter().zip(losses).map(|(p, l)| p * l).sum())
}

/// Unnormalized probability of a triplet draw.
pub fn triplet_weight(p_anchor: f64, p_positive: f64, p_negative: f64) -> f64 {
    p_anchor * p_positive * p_negative
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedUpdate {
    pub base: Vec<f64>,
    pub beta: f64,
    pub probs: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    pub expected: Vec<f64>,
}

impl ExpectedUpdate {
    /// `sum_i p_i g_i`, accumulated in batch order.
    pub fn expected_gradient(&self) -> Vec<f64> {
        weighted_sum(&self.probs, &self.grads, self.base.len())
    }
}

fn weighted_sum(probs: &[f64], grads: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for (p, g) in probs.iter().zip(grads) {
        for (a, x) in acc.iter_mut().zip(g) {
            *a += p * x;
        }
    }
    acc
}

pub fn expected_update(base: &[f64], beta: f64, probs: &[f64], grads: Vec<Vec<f64>>) -> Result<ExpectedUpdate> {
    if probs.len() != grads.len() {
        return Err(invalid(format!("{} probabilities for {} gradients", probs.len(), grads.len())));
    }
    if let Some(g) = grads.iter().find(|g| g.len() != base.len()) {
        return Err(invalid(format!("gradient of length {} for {} weights", g.len(), base.len())));
    }
    check_distribution(probs)?;
    let step = weighted_sum(probs, &grads, base.len());
    let expected = base.iter().zip(&step).map(|(w, s)| w - beta * s).collect();
    Ok(ExpectedUpdate {
        base: base.to_vec(),
        beta,
        probs: probs.to_vec(),
        grads,
        expected,
    })
}

/// One sampled triplet with the candidate sets its conditional draws used.
/// All entries are train-set positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletDraw {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub pos_candidates: Vec<usize>,
    pub neg_candidates: Vec<usize>,
}

impl TripletDraw {
    fn index_in(set: &[usize], x: usize, what: &str) -> Result<usize> {
        set.iter()
            .position(|&c| c == x)
            .ok_or_else(|| invalid(format!("{what} {x} is not among its candidates")))
    }
}

/// The units the expected update averages over.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateUnits {
    /// Single images; unit loss is cross-entropy.
    Single(Vec<usize>),
    /// Triplets; unit loss is the margin loss plus the mean cross-entropy of
    /// its three images.
    Triplets(Vec<TripletDraw>),
}

impl UpdateUnits {
    pub fn len(&self) -> usize {
        match self {
            UpdateUnits::Single(v) => v.len(),
            UpdateUnits::Triplets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaOptions {
    /// Debug switch: treat the softmax normalizers as constants, which drops
    /// a term from the gradient. Forward values are unchanged.
    pub break_normalizer: bool,
}

/// Everything fixed within one sampler step.
#[derive(Debug, Clone, Copy)]
pub struct MetaProblem<'a> {
    pub train: &'a TrainSet,
    pub model: &'a ModelParams,
    pub units: &'a UpdateUnits,
    /// Evaluation batch positions.
    pub eval: &'a [usize],
    pub beta: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    /// Gradient with respect to the flat sampler parameters.
    pub grad: Vec<f64>,
    /// Evaluation loss at `E[w']`.
    pub eval_loss: f64,
    pub sensitivities: Vec<f64>,
    pub update: ExpectedUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaStep {
    pub sampler: SamplerParams,
    pub eval_loss_before: f64,
    pub eval_loss_after: f64,
    pub grad_norm: f64,
    /// The gradient the step followed.
    pub grad: Vec<f64>,
    pub entropy: f64,
    pub probs: Vec<f64>,
    pub sensitivities: Vec<f64>,
}

fn normalized(g: &mut Graph, energies: Var, opts: MetaOptions) -> Result<Var> {
    if !opts.break_normalizer {
        return g.softmax(energies);
    }
    let e = g.value(energies).data();
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = e.iter().map(|x| (x - max).exp()).sum();
    let shifted = g.shift(energies, -max)?;
    let ex = g.exp(shifted)?;
    g.scale(ex, 1.0 / total)
}

fn log_normalized(g: &mut Graph, energies: Var, opts: MetaOptions) -> Result<Var> {
    if !opts.break_normalizer {
        return g.log_softmax(energies);
    }
    let e = g.value(energies).data();
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + e.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    g.shift(energies, -lse)
}

fn row_vec(t: &Tensor, r: usize) -> Tensor {
    Tensor::matrix(1, t.cols(), t.row(r).to_vec()).expect("row shape")
}

impl<'a> MetaProblem<'a> {
    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::Empty("update batch"));
        }
        if self.eval.is_empty() {
            return Err(Error::Empty("evaluation batch"));
        }
        let n = self.train.len();
        let check = |p: usize| {
            if p < n {
                Ok(())
            } else {
                Err(Error::OutOfRange {
                    what: "train position",
                    index: p,
                    len: n,
                })
            }
        };
        self.eval.iter().try_for_each(|&p| check(p))?;
        match self.units {
            UpdateUnits::Single(ids) => ids.iter().try_for_each(|&p| check(p))?,
            UpdateUnits::Triplets(ts) => {
                for t in ts {
                    for &p in [t.anchor, t.positive, t.negative].iter().chain(&t.pos_candidates).chain(&t.neg_candidates) {
                        check(p)?;
                    }
                    TripletDraw::index_in(&t.pos_candidates, t.positive, "positive")?;
                    TripletDraw::index_in(&t.neg_candidates, t.negative, "negative")?;
                }
            }
        }
        Ok(())
    }

    /// `g_i` for every unit at the current weights, weight decay included.
    pub fn unit_gradients(&self) -> Result<Vec<Vec<f64>>> {
        let train = self.train;
        let (margin, metric) = (self.margin, self.metric);
        let mut grads = match self.units {
            UpdateUnits::Single(ids) => per_sample_gradients(self.model.tensors(), ids.len(), |g, vars, i| {
                let mv = ModelVars::from_slice(vars)?;
                let x = g.constant(row_vec(&train.features, ids[i]));
                let e = mv.embed(g, x)?;
                let z = mv.classify(g, e)?;
                let ce = cross_entropy_rows(g, z, &[train.labels[ids[i]]])?;
                g.sum(ce)
            })?,
            UpdateUnits::Triplets(ts) => per_sample_gradients(self.model.tensors(), ts.len(), |g, vars, i| {
                let mv = ModelVars::from_slice(vars)?;
                triplet_unit_loss(g, &mv, train, ts[i].anchor, ts[i].positive, ts[i].negative, margin, metric)
            })?,
        };
        if self.weight_decay != 0.0 {
            let w = self.model.to_flat();
            for g in &mut grads {
                for (gj, wj) in g.iter_mut().zip(&w) {
                    *gj += self.weight_decay * wj;
                }
            }
        }
        Ok(grads)
    }

    /// Records the policy over the update units under sampler handles `sv`.
    fn policy(&self, g: &mut Graph, sv: &SamplerVars, opts: MetaOptions) -> Result<Var> {
        let model = self.model;
        let train = self.train;
        match self.units {
            UpdateUnits::Single(ids) => {
                let emb = g.constant(model.embed_rows(&train.rows(ids))?);
                let e = energy_rows(g, &sv.single, emb)?;
                normalized(g, e, opts)
            }
            UpdateUnits::Triplets(ts) => {
                let anchors: Vec<usize> = ts.iter().map(|t| t.anchor).collect();
                let anchor_emb = model.embed_rows(&train.rows(&anchors))?;
                let a = g.constant(anchor_emb.clone());
                // The anchor factor's global normalizer is shared by every
                // triplet and cancels in the renormalized product.
                let ea = energy_rows(g, &sv.single, a)?;
                let mut pos = Vec::with_capacity(ts.len());
                let mut neg = Vec::with_capacity(ts.len());
                for (k, t) in ts.iter().enumerate() {
                    let anchor = anchor_emb.row(k);
                    for (cands, pick, out) in [
                        (&t.pos_candidates, t.positive, &mut pos),
                        (&t.neg_candidates, t.negative, &mut neg),
                    ] {
                        let input = pair_input(&model.embed_rows(&train.rows(cands))?, anchor)?;
                        let x = g.constant(input);
                        let e = energy_rows(g, &sv.pair, x)?;
                        let lp = log_normalized(g, e, opts)?;
                        let idx = TripletDraw::index_in(cands, pick, "candidate")?;
                        out.push(g.gather(lp, &[idx])?);
                    }
                }
                let lp = g.concat(&pos)?;
                let ln = g.concat(&neg)?;
                let logits = g.add(ea, lp)?;
                let logits = g.add(logits, ln)?;
                normalized(g, logits, opts)
            }
        }
    }

    /// Sampler probabilities over the update units.
    pub fn probabilities(&self, sampler: &SamplerParams) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let sv = sampler.attach(&mut g, false);
        let p = self.policy(&mut g, &sv, MetaOptions::default())?;
        Ok(g.value(p).data().to_vec())
    }

    /// Mean evaluation cross-entropy and its gradient at flat weights `w`.
    pub fn eval_loss_and_gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let model = ModelParams::from_flat(self.model.dims(), w)?;
        let mut g = Graph::new();
        let mv = model.attach(&mut g, true);
        let x = g.constant(self.train.rows(self.eval));
        let e = mv.embed(&mut g, x)?;
        let z = mv.classify(&mut g, e)?;
        let labels: Vec<usize> = self.eval.iter().map(|&p| self.train.labels[p]).collect();
        let ce = cross_entropy_rows(&mut g, z, &labels)?;
        let loss = g.mean(ce)?;
        let grad = g.backward(loss)?.flat(mv.all());
        Ok((g.value(loss).item()?, grad))
    }

    pub fn eval_loss(&self, w: &[f64]) -> Result<f64> {
        Ok(self.eval_loss_and_gradient(w)?.0)
    }

    /// `L_eval(E[w'(theta)])` for precomputed unit gradients.
    pub fn objective(&self, sampler: &SamplerParams, grads: &[Vec<f64>]) -> Result<f64> {
        let probs = self.probabilities(sampler)?;
        let w = self.model.to_flat();
        let step = weighted_sum(&probs, grads, w.len());
        let expected: Vec<f64> = w.iter().zip(&step).map(|(w, s)| w - self.beta * s).collect();
        self.eval_loss(&expected)
    }

    /// Exact gradient of the objective with respect to the sampler parameters.
    pub fn meta_gradient(&self, sampler: &SamplerParams, grads: Vec<Vec<f64>>, opts: MetaOptions) -> Result<MetaGradient> {
        self.validate()?;
        if grads.len() != self.units.len() {
            return Err(invalid(format!("{} unit gradients for {} units", grads.len(), self.units.len())));
        }
        let mut g = Graph::new();
        let sv = sampler.attach(&mut g, true);
        let p = self.policy(&mut g, &sv, opts)?;
        let probs = g.value(p).data().to_vec();
        let update = expected_update(&self.model.to_flat(), self.beta, &probs, grads)?;
        let (eval_loss, g_eval) = self.eval_loss_and_gradient(&update.expected)?;
        let sensitivities: Vec<f64> = update
            .grads
            .iter()
            .map(|gi| -self.beta * gi.iter().zip(&g_eval).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        if let Some(k) = sensitivities.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sensitivity for update unit {k}")));
        }
        let s = g.constant(Tensor::vector(sensitivities.clone()));
        let weighted = g.mul(p, s)?;
        let surrogate = g.sum(weighted)?;
        let grad = g.backward(surrogate)?.flat(&sv.all());
        Ok(MetaGradient {
            grad,
            eval_loss,
            sensitivities,
            update,
        })
    }
}

fn triplet_unit_loss(
    g: &mut Graph,
    mv: &ModelVars,
    train: &TrainSet,
    a: usize,
    p: usize,
    n: usize,
    margin: f64,
    metric: Metric,
) -> Result<Var> {
    let mut embs = Vec::with_capacity(3);
    let mut ces = Vec::with_capacity(3);
    for pos in [a, p, n] {
        let x = g.constant(row_vec(&train.features, pos));
        let e = mv.embed(g, x)?;
        let z = mv.classify(g, e)?;
        ces.push(cross_entropy_rows(g, z, &[train.labels[pos]])?);
        embs.push(e);
    }
    let t = triplet_rows(g, embs[0], embs[1], embs[2], margin, metric)?;
    let ce = g.concat(&ces)?;
    let ce = g.mean(ce)?;
    let t = g.sum(t)?;
    g.add(t, ce)
}

/// One sampler update `theta' = theta - alpha * grad`.
pub fn sampler_meta_step(problem: &MetaProblem, sampler: &SamplerParams, alpha: f64, opts: MetaOptions) -> Result<MetaStep> {
    let grads = problem.unit_gradients()?;
    let mg = problem.meta_gradient(sampler, grads, opts)?;
    let theta = sampler.to_flat();
    let stepped: Vec<f64> = theta.iter().zip(&mg.grad).map(|(t, d)| t - alpha * d).collect();
    let next = sampler.with_flat(&stepped)?;
    if !next.is_finite() {
        return Err(Error::Numerical("sampler parameters became non-finite".into()));
    }
    let eval_loss_after = problem.objective(&next, &mg.update.grads)?;
    let next_probs = problem.probabilities(&next)?;
    check_distribution(&next_probs)?;
    let probs = mg.update.probs;
    let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Ok(MetaStep {
        sampler: next,
        eval_loss_before: mg.eval_loss,
        eval_loss_after,
        grad_norm: mg.grad.iter().map(|x| x * x).sum::<f64>().sqrt(),
        grad: mg.grad,
        entropy,
        probs,
        sensitivities: mg.sensitivities,
    })
}

/// Finite-difference step for the composed meta objective.
pub const META_STEP: f64 = 1e-4;

/// Sizes of a [`ToyProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub identities: usize,
    pub per_identity: usize,
    /// K and M.
    pub batch: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self {
            input_dim: 3,
            hidden_dim: 4,
            embed_dim: 2,
            identities: 3,
            per_identity: 4,
            batch: 4,
        }
    }
}

/// A small random meta problem.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub train: TrainSet,
    pub model: ModelParams,
    pub sampler: SamplerParams,
    pub units: UpdateUnits,
    pub eval: Vec<usize>,
    pub beta: f64,
}

impl ToyProblem {
    /// Default [`ToyDims`] with random non-zero sampler parameters so the
    /// policy is not uniform.
    pub fn new(seed: u64, triplet: bool, sampler_hidden: Option<usize>) -> Result<Self> {
        Self::with_dims(seed, ToyDims::default(), triplet, sampler_hidden)
    }

    pub fn with_dims(seed: u64, toy: ToyDims, triplet: bool, sampler_hidden: Option<usize>) -> Result<Self> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let n = toy.identities * toy.per_identity;
        if toy.identities < 2 || toy.per_identity < 2 || toy.batch == 0 || 2 * toy.batch > n {
            return Err(invalid("toy problem needs >= 2 identities of >= 2 samples and 2 * batch <= samples"));
        }
        let mut rng = crate::rng::seeded(seed);
        let dims = ModelDims {
            input_dim: toy.input_dim,
            hidden_dim: toy.hidden_dim,
            embed_dim: toy.embed_dim,
            num_identities: toy.identities,
        };
        dims.validate()?;
        let labels: Vec<usize> = (0..n).map(|i| i / toy.per_identity).collect();
        let features: Vec<f64> = (0..n * toy.input_dim)
            .map(|k| labels[k / toy.input_dim] as f64 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut by_label = vec![Vec::new(); toy.identities];
        for (i, &l) in labels.iter().enumerate() {
            by_label[l].push(i);
        }
        let train = TrainSet {
            ids: (0..n).collect(),
            labels,
            hard: vec![false; n],
            features: Tensor::matrix(n, toy.input_dim, features)?,
            by_label,
        };
        let model = ModelParams::init(dims, &mut rng);
        let shape = SamplerParams::new(toy.embed_dim, sampler_hidden, &mut rng);
        let theta: Vec<f64> = (0..shape.num_params()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sampler = shape.with_flat(&theta)?;
        let picks = rand::seq::index::sample(&mut rng, n, 2 * toy.batch).into_vec();
        let (chosen, eval) = picks.split_at(toy.batch);
        let units = if triplet {
            let draws = chosen
                .iter()
                .enumerate()
                .map(|(k, &anchor)| {
                    let l = train.labels[anchor];
                    let pos: Vec<usize> = train.by_label[l].iter().copied().filter(|&p| p != anchor).collect();
                    let neg: Vec<usize> = (0..n).filter(|&p| train.labels[p] != l).take(5).collect();
                    TripletDraw {
                        anchor,
                        positive: pos[k % pos.len()],
                        negative: neg[(k * 2) % neg.len()],
                        pos_candidates: pos,
                        neg_candidates: neg,
                    }
                })
                .collect();
            UpdateUnits::Triplets(draws)
        } else {
            UpdateUnits::Single(chosen.to_vec())
        };
        Ok(Self {
            train,
            model,
            sampler,
            units,
            eval: eval.to_vec(),
            beta: 0.5,
        })
    }

    pub fn problem(&self) -> MetaProblem<'_> {
        MetaProblem {
            train: &self.train,
            model: &self.model,
            units: &self.units,
            eval: &self.eval,
            beta: self.beta,
            weight_decay: 5e-4,
            margin: 0.3,
            metric: Metric::Euclidean,
        }
    }

    /// Analytic meta-gradient against central differences of the composed
    /// objective, coordinate by coordinate in `theta`. Some coordinates have
    /// an exact zero derivative (biases under a softmax); the step is large
    /// enough that roundoff there stays below the relative-error floor.
    pub fn check(&self, name: &str, opts: MetaOptions) -> Result<CheckResult> {
        let problem = self.problem();
        let grads = problem.unit_gradients()?;
        let analytic = problem.meta_gradient(&self.sampler, grads.clone(), opts)?.grad;
        let theta = self.sampler.to_flat();
        let numeric = central_difference(&theta, META_STEP, |t| {
            let s = self.sampler.with_flat(t).expect("sampler shape");
            problem.objective(&s, &grads).expect("objective evaluates at probe points")
        });
        Ok(CheckResult::new(name, &analytic, &numeric))
    }
}

/// Finite-difference checks of the model and sampler forward maps with
/// respect to their parameters.
pub fn model_checks(seed: u64) -> Result<Vec<CheckResult>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let toy = ToyProblem::new(seed, false, Some(3))?;
    let mut rng = crate::rng::seeded(seed ^ 0x5eed);
    let x = Tensor::matrix(2, 3, (0..6).map(|_| rng.sample(StandardNormal)).collect())?;
    let labels = [0usize, 2];
    let dims = toy.model.dims();

    let model_loss = |w: &[f64], g: &mut Graph, trainable: bool| -> Result<(Var, ModelVars)> {
        let m = ModelParams::from_flat(dims, w)?;
        let mv = m.attach(g, trainable);
        let xv = g.constant(x.clone());
        let e = mv.embed(g, xv)?;
        let z = mv.classify(g, e)?;
        let ce = cross_entropy_rows(g, z, &labels)?;
        Ok((g.mean(ce)?, mv))
    };
    let w = toy.model.to_flat();
    let mut g = Graph::new();
    let (l, mv) = model_loss(&w, &mut g, true)?;
    let analytic = g.backward(l)?.flat(mv.all());
    let numeric = central_difference(&w, 1e-5, |v| {
        let mut g = Graph::new();
        let (l, _) = model_loss(v, &mut g, false).expect("model loss");
        g.value(l).data()[0]
    });
    let mut out = vec![CheckResult::new("model.embed_classify", &analytic, &numeric)];

    let emb = toy.model.embed_rows(&x)?;
    let weights = Tensor::vector(vec![0.7, -1.3]);
    let sampler_loss = |theta: &[f64], g: &mut Graph, trainable: bool| -> Result<(Var, Vec<Var>)> {
        let s = toy.sampler.with_flat(theta)?;
        let sv = s.attach(g, trainable);
        let e = g.constant(emb.clone());
        let single = energy_rows(g, &sv.single, e)?;
        let p = g.constant(pair_input(&emb, emb.row(0))?);
        let pair = energy_rows(g, &sv.pair, p)?;
        let both = g.add(single, pair)?;
        let wv = g.constant(weights.clone());
        let prod = g.mul(both, wv)?;
        Ok((g.sum(prod)?, sv.all()))
    };
    let theta = toy.sampler.to_flat();
    let mut g = Graph::new();
    let (l, vars) = sampler_loss(&theta, &mut g, true)?;
    let analytic = g.backward(l)?.flat(&vars);
    let numeric = central_difference(&theta, 1e-5, |v| {
        let mut g = Graph::new();
        let (l, _) = sampler_loss(v, &mut g, false).expect("sampler loss");
        g.value(l).data()[0]
    });
    out.push(CheckResult::new("sampler.energies", &analytic, &numeric));
    Ok(out)
}

/// The full finite-difference suite: every op, the model and sampler maps,
/// and the composed meta-gradient in single, triplet and hidden-layer form.
pub fn gradcheck_suite(seed: u64, dims: ToyDims, opts: MetaOptions) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    out.extend(model_checks(seed)?);
    out.push(ToyProblem::with_dims(seed, dims, false, None)?.check("meta.single", opts)?);
    out.push(ToyProblem::with_dims(seed, dims, true, None)?.check("meta.triplet", opts)?);
    out.push(ToyProblem::with_dims(seed, dims, false, Some(3))?.check("meta.single_hidden", opts)?);
    Ok(out)
}

/// Softmax over raw energies; a convenience for callers holding plain values.
pub fn policy_probs(energies: &[f64]) -> Vec<f64> {
    softmax(energies)
}
