//! The training loop: periodic policy refresh, batch selection per sampler
//! kind, the SGD model update and, for the learned sampler, one meta-step per
//! iteration.
//!
//! All randomness comes from one ChaCha stream seeded by `config.seed`,
//! consumed in a fixed order: model init, sampler init, then per iteration
//! the training-batch draws followed (learned kind only) by the meta-batch
//! and evaluation-batch draws. Parallel sections never touch the stream.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Dataset, Split, TrainSet, NUM_MODES};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_retrieval, split_accuracy, Protocol, RetrievalMetrics};
use crate::losses::{cross_entropy_rows, focal_rows, triplet_rows, Metric};
use crate::meta::{sampler_meta_step, MetaOptions, MetaProblem, TripletDraw, UpdateUnits};
use crate::models::{ModelDims, ModelParams, SamplerParams};
use crate::parallel;
use crate::policy::{ohem_select, semihard_select, SamplingPolicy};
use crate::rng::{seeded, Rng as StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    Ohem,
    Semihard,
    Focal,
    Learned,
    Upsample,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 6] = [
        SamplerKind::Uniform,
        SamplerKind::Ohem,
        SamplerKind::Semihard,
        SamplerKind::Focal,
        SamplerKind::Learned,
        SamplerKind::Upsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::Ohem => "ohem",
            SamplerKind::Semihard => "semihard",
            SamplerKind::Focal => "focal",
            SamplerKind::Learned => "learned",
            SamplerKind::Upsample => "upsample",
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            invalid(format!("unknown sampler `{s}`; valid kinds: {}", valid.join(", ")))
        })
    }
}

/// Linear warmup from `start` to `peak`, then `peak` times `decay` per
/// milestone passed. Epochs count from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start: 0.01,
            peak: 0.1,
            warmup_epochs: 3,
            milestones: vec![15, 30, 48],
            decay: 0.1,
        }
    }
}

impl LrSchedule {
    /// The full-scale reference schedule (200 epochs).
    pub fn reference() -> Self {
        Self {
            start: 3.5e-5,
            peak: 3.5e-4,
            warmup_epochs: 10,
            milestones: vec![50, 100, 160],
            decay: 0.1,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.start + (self.peak - self.start) * epoch as f64 / self.warmup_epochs as f64;
        }
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.peak * self.decay.powi(passed as i32)
    }

    fn validate(&self) -> Result<()> {
        if !(self.start >= 0.0 && self.peak >= 0.0 && self.decay > 0.0) {
            return Err(invalid("learning rates must be >= 0 and decay > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub sampler: SamplerKind,
    /// K: training and meta update batch size (single mode).
    pub batch_size: usize,
    /// M: evaluation batch size of the sampler objective.
    pub eval_batch: usize,
    /// Anchors per triplet batch (identities per batch for OHEM/semi-hard).
    pub anchors: usize,
    /// Samples per identity in OHEM/semi-hard batches.
    pub instances_per_id: usize,
    pub pos_candidates: usize,
    pub neg_candidates: usize,
    pub schedule: LrSchedule,
    /// Sampler step size.
    pub alpha: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub metric: Metric,
    pub focal_gamma: f64,
    pub epochs: usize,
    /// Iterations between policy refreshes; one epoch when absent.
    pub refresh_period: Option<usize>,
    pub seed: u64,
    pub with_replacement: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Hidden width of the energy networks; affine when absent.
    pub sampler_hidden: Option<usize>,
    /// Keep every refreshed policy in the outcome.
    pub dump_policy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Single,
            sampler: SamplerKind::Uniform,
            batch_size: 32,
            eval_batch: 64,
            anchors: 8,
            instances_per_id: 4,
            pos_candidates: 8,
            neg_candidates: 16,
            schedule: LrSchedule::default(),
            alpha: 1e-3,
            weight_decay: 5e-4,
            margin: 0.3,
            metric: Metric::Euclidean,
            focal_gamma: 2.0,
            epochs: 60,
            refresh_period: None,
            seed: 0,
            with_replacement: false,
            hidden_dim: 64,
            embed_dim: 32,
            sampler_hidden: None,
            dump_policy: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("batch_size", self.batch_size),
            ("eval_batch", self.eval_batch),
            ("anchors", self.anchors),
            ("instances_per_id", self.instances_per_id),
            ("pos_candidates", self.pos_candidates),
            ("neg_candidates", self.neg_candidates),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be >= 1")));
        }
        if self.refresh_period == Some(0) || self.sampler_hidden == Some(0) {
            return Err(invalid("refresh_period and sampler_hidden must be >= 1 when set"));
        }
        if !(self.margin >= 0.0) || !(self.focal_gamma >= 0.0) || !(self.alpha >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("margin, focal_gamma, alpha and weight_decay must be >= 0"));
        }
        self.schedule.validate()?;
        match (self.sampler, self.mode) {
            (SamplerKind::Ohem | SamplerKind::Semihard, Mode::Single) => {
                Err(invalid(format!("sampler `{}` selects triplets and needs mode triplet", self.sampler)))
            }
            (SamplerKind::Focal, Mode::Triplet) => Err(invalid("sampler `focal` re-weights identity loss and needs mode single")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean sampler objective over the epoch (learned sampler only).
    pub eval_loss_expected: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub policy_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub entropy: f64,
    /// Probability mass on hard-tagged train samples.
    pub hard_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrace {
    pub iteration: usize,
    pub eval_loss_before: f64,
    pub eval_loss_after: f64,
    pub grad_norm: f64,
    pub entropy: f64,
}

/// A refreshed policy keyed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDump {
    pub iteration: usize,
    pub epoch: usize,
    pub probabilities: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub retrieval: RetrievalMetrics,
    /// Cross-view retrieval per query mode.
    pub cross_view: Vec<RetrievalMetrics>,
    pub query_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub sampler: SamplerParams,
    pub epochs: Vec<EpochMetrics>,
    pub refreshes: Vec<RefreshRecord>,
    pub meta_trace: Vec<MetaTrace>,
    pub policy_dumps: Vec<PolicyDump>,
    /// Last refreshed policy, keyed by sample id.
    pub final_policy: PolicyDump,
    pub final_metrics: FinalMetrics,
    pub status: RunStatus,
    pub skipped_meta_steps: usize,
}

/// Full-dataset single-image policy under the current weights and sampler.
/// Embeddings and energies are computed in parallel chunks.
pub fn refresh_policy(train: &TrainSet, model: &ModelParams, sampler: &SamplerParams) -> Result<SamplingPolicy> {
    const CHUNK: usize = 128;
    let n = train.len();
    let chunks = n.div_ceil(CHUNK);
    let parts = parallel::try_map(chunks, |c| {
        let pos: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
        let emb = model.embed_rows(&train.rows(&pos))?;
        sampler.energies_single(&emb)
    })?;
    let energies: Vec<f64> = parts.into_iter().flatten().collect();
    SamplingPolicy::from_energies((0..n).collect(), &energies)
}

/// Policy weighting each identity's samples so that identities below the
/// median train count behave as if repeated up to the median.
pub fn upsample_policy(train: &TrainSet) -> Result<SamplingPolicy> {
    let mut counts: Vec<usize> = train.by_label.iter().map(Vec::len).filter(|&c| c > 0).collect();
    counts.sort_unstable();
    let median = if counts.len() % 2 == 1 {
        counts[counts.len() / 2] as f64
    } else {
        (counts[counts.len() / 2 - 1] + counts[counts.len() / 2]) as f64 / 2.0
    };
    let weights: Vec<f64> = train
        .labels
        .iter()
        .map(|&l| {
            let c = train.by_label[l].len() as f64;
            if c < median {
                median / c
            } else {
                1.0
            }
        })
        .collect();
    SamplingPolicy::from_weights((0..train.len()).collect(), &weights)
}

/// A triplet with the policy factors of its draws.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledTriplet {
    pub draw: TripletDraw,
    pub p_anchor: f64,
    pub p_positive: f64,
    pub p_negative: f64,
}

/// Semi-global triplet assembly: anchors from the cached policy, candidate
/// sets from the cached policy restricted by identity, then the positive and
/// negative from the pairwise policy over each candidate set.
pub fn assemble_triplet_batch(
    train: &TrainSet,
    model: &ModelParams,
    sampler: &SamplerParams,
    cache: &SamplingPolicy,
    config: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<Vec<AssembledTriplet>> {
    const RETRIES: usize = 10;
    let labels_present = train.by_label.iter().filter(|v| !v.is_empty()).count();
    if labels_present < 2 {
        return Err(invalid("triplet assembly needs at least 2 identities"));
    }
    let mut out = Vec::with_capacity(config.anchors);
    for _ in 0..config.anchors {
        let mut anchor = None;
        for _ in 0..RETRIES {
            let a = cache.draw(1, rng)?[0];
            if train.by_label[train.labels[a]].len() >= 2 {
                anchor = Some(a);
                break;
            }
        }
        let a = anchor.ok_or_else(|| invalid(format!("no anchor with a positive after {RETRIES} draws")))?;
        let label = train.labels[a];
        let pos_pool: Vec<usize> = train.by_label[label].iter().copied().filter(|&p| p != a).collect();
        let neg_pool: Vec<usize> = (0..train.len()).filter(|&p| train.labels[p] != label).collect();
        let pos = cache.normalize_subset(&pos_pool)?.draw(config.pos_candidates.min(pos_pool.len()), rng)?;
        let neg = cache.normalize_subset(&neg_pool)?.draw(config.neg_candidates.min(neg_pool.len()), rng)?;

        let anchor_emb = model.embed(train.features.row(a))?;
        let pick = |cands: &[usize], rng: &mut StreamRng| -> Result<(usize, f64)> {
            let emb = model.embed_rows(&train.rows(cands))?;
            let energies = sampler.energies_pair(&emb, &anchor_emb)?;
            let policy = SamplingPolicy::from_energies(cands.to_vec(), &energies)?;
            let chosen = policy.draw(1, rng)?[0];
            let p = policy.prob_of(chosen).expect("drawn id is in policy");
            Ok((chosen, p))
        };
        let (positive, p_positive) = pick(&pos, rng)?;
        let (negative, p_negative) = pick(&neg, rng)?;
        out.push(AssembledTriplet {
            p_anchor: cache.prob_of(a).expect("anchor is in cache"),
            p_positive,
            p_negative,
            draw: TripletDraw {
                anchor: a,
                positive,
                negative,
                pos_candidates: pos,
                neg_candidates: neg,
            },
        });
    }
    Ok(out)
}

/// What the model is updated on in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum ReidBatch {
    /// Train positions; focal re-weighting when `focal_gamma` is set.
    Single { ids: Vec<usize>, focal_gamma: Option<f64> },
    /// `(anchor, positive, negative)` train positions.
    Triplets(Vec<(usize, usize, usize)>),
}

/// Mean batch loss and its gradient (without weight decay) at `model`.
/// Triplet batches use margin loss plus the mean cross-entropy of each
/// triplet's three images.
pub fn reid_loss_and_gradient(
    model: &ModelParams,
    train: &TrainSet,
    batch: &ReidBatch,
    margin: f64,
    metric: Metric,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let mv = model.attach(&mut g, true);
    let loss = match batch {
        ReidBatch::Single { ids, focal_gamma } => {
            if ids.is_empty() {
                return Err(Error::Empty("training batch"));
            }
            let x = g.constant(train.rows(ids));
            let e = mv.embed(&mut g, x)?;
            let z = mv.classify(&mut g, e)?;
            let labels: Vec<usize> = ids.iter().map(|&p| train.labels[p]).collect();
            let per = match focal_gamma {
                Some(gamma) => focal_rows(&mut g, z, &labels, *gamma)?,
                None => cross_entropy_rows(&mut g, z, &labels)?,
            };
            g.mean(per)?
        }
        ReidBatch::Triplets(ts) => {
            if ts.is_empty() {
                return Err(Error::Empty("triplet batch"));
            }
            let mut embs = Vec::with_capacity(3);
            let mut ce_sum = None;
            for part in 0..3 {
                let pos: Vec<usize> = ts.iter().map(|t| [t.0, t.1, t.2][part]).collect();
                let x = g.constant(train.rows(&pos));
                let e = mv.embed(&mut g, x)?;
                let z = mv.classify(&mut g, e)?;
                let labels: Vec<usize> = pos.iter().map(|&p| train.labels[p]).collect();
                let ce = cross_entropy_rows(&mut g, z, &labels)?;
                ce_sum = Some(match ce_sum {
                    None => ce,
                    Some(acc) => g.add(acc, ce)?,
                });
                embs.push(e);
            }
            let ce = g.scale(ce_sum.expect("three parts"), 1.0 / 3.0)?;
            let trip = triplet_rows(&mut g, embs[0], embs[1], embs[2], margin, metric)?;
            let per = g.add(trip, ce)?;
            g.mean(per)?
        }
    };
    let grad = g.backward(loss)?.flat(mv.all());
    Ok((g.value(loss).item()?, grad))
}

/// One SGD step `w - beta * (grad + weight_decay * w)` on the mean batch
/// loss. Returns the new weights and the batch loss at the old ones.
pub fn reid_update(
    model: &ModelParams,
    train: &TrainSet,
    batch: &ReidBatch,
    beta: f64,
    config: &TrainConfig,
) -> Result<(ModelParams, f64)> {
    let (loss, grad) = reid_loss_and_gradient(model, train, batch, config.margin, config.metric)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {loss}")));
    }
    let w = model.to_flat();
    let next: Vec<f64> = w
        .iter()
        .zip(&grad)
        .map(|(wj, gj)| wj - beta * (gj + config.weight_decay * wj))
        .collect();
    Ok((ModelParams::from_flat(model.dims(), &next)?, loss))
}

fn draw_batch(policy: &SamplingPolicy, count: usize, with_replacement: bool, rng: &mut StreamRng) -> Result<Vec<usize>> {
    if with_replacement {
        Ok(policy.draw_with_replacement(count, rng))
    } else {
        policy.draw(count.min(policy.len()), rng)
    }
}

/// P identities times up to `instances_per_id` samples each, all uniform.
fn identity_batch(train: &TrainSet, config: &TrainConfig, rng: &mut StreamRng) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..train.by_label.len()).filter(|&l| train.by_label[l].len() >= 2).collect();
    if eligible.len() < 2 {
        return Err(invalid("identity batches need at least 2 identities with 2 samples"));
    }
    let ids = SamplingPolicy::uniform(eligible.clone())?.draw(config.anchors.min(eligible.len()), rng)?;
    let mut out = Vec::new();
    for l in ids {
        let members = &train.by_label[l];
        out.extend(SamplingPolicy::uniform(members.clone())?.draw(config.instances_per_id.min(members.len()), rng)?);
    }
    Ok(out)
}

fn hard_batch(train: &TrainSet, model: &ModelParams, config: &TrainConfig, rng: &mut StreamRng) -> Result<ReidBatch> {
    let batch = identity_batch(train, config, rng)?;
    let emb = model.embed_rows(&train.rows(&batch))?;
    let labels: Vec<usize> = batch.iter().map(|&p| train.labels[p]).collect();
    let triplets = match config.sampler {
        SamplerKind::Ohem => ohem_select(&batch, &labels, &emb, config.metric, config.margin)?
            .into_iter()
            .map(|t| (t.anchor, t.positive, t.negative))
            .collect(),
        _ => {
            let row_of = |p: usize| batch.iter().position(|&b| b == p).expect("batch member");
            let dist = |a: usize, b: usize| config.metric.distance(emb.row(row_of(a)), emb.row(row_of(b)));
            let mut out = Vec::with_capacity(batch.len());
            for (k, &a) in batch.iter().enumerate() {
                let positives: Vec<usize> = batch.iter().copied().filter(|&p| p != a && train.labels[p] == labels[k]).collect();
                let negatives: Vec<usize> = batch.iter().copied().filter(|&p| train.labels[p] != labels[k]).collect();
                if positives.is_empty() || negatives.is_empty() {
                    continue;
                }
                let t = semihard_select(a, &positives, &negatives, dist, config.margin, rng)?;
                out.push((t.anchor, t.positive, t.negative));
            }
            out
        }
    };
    Ok(ReidBatch::Triplets(triplets))
}

fn hard_mass(train: &TrainSet, policy: &SamplingPolicy) -> f64 {
    policy.ids().iter().zip(policy.probs()).filter(|(&p, _)| train.hard[p]).map(|(_, q)| q).sum()
}

fn dump(train: &TrainSet, policy: &SamplingPolicy, iteration: usize, epoch: usize) -> PolicyDump {
    PolicyDump {
        iteration,
        epoch,
        probabilities: policy.ids().iter().zip(policy.probs()).map(|(&p, &q)| (train.ids[p], q)).collect(),
    }
}

/// Final retrieval, cross-view and accuracy metrics of `model`.
pub fn final_metrics(model: &ModelParams, dataset: &Dataset, metric: Metric) -> Result<FinalMetrics> {
    Ok(FinalMetrics {
        retrieval: evaluate_retrieval(model, dataset, metric, Protocol::Standard)?,
        cross_view: (0..NUM_MODES)
            .map(|m| evaluate_retrieval(model, dataset, metric, Protocol::CrossView(m)))
            .collect::<Result<_>>()?,
        query_accuracy: split_accuracy(model, dataset, Split::Query)?,
    })
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Numerical(_))
}

/// Trains a model on `dataset` under `config`. Fully determined by the
/// config (including its seed) and the dataset.
pub fn run(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let train = dataset.train_set()?;
    let n = train.len();
    let dims = ModelDims {
        input_dim: dataset.dims,
        hidden_dim: config.hidden_dim,
        embed_dim: config.embed_dim,
        num_identities: dataset.num_identities,
    };
    dims.validate()?;
    let mut rng = seeded(config.seed);
    let mut model = ModelParams::init(dims, &mut rng);
    let mut sampler = SamplerParams::new(config.embed_dim, config.sampler_hidden, &mut rng);
    let uniform_sampler = SamplerParams::zeros(config.embed_dim);
    let uniform = SamplingPolicy::uniform((0..n).collect())?;
    let fixed_policy = match config.sampler {
        SamplerKind::Upsample => upsample_policy(&train)?,
        _ => uniform.clone(),
    };

    let iterations_per_epoch = (n / config.batch_size).max(1);
    let refresh_period = config.refresh_period.unwrap_or(iterations_per_epoch);
    let learned = config.sampler == SamplerKind::Learned;

    let mut cache = fixed_policy.clone();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut refreshes = Vec::new();
    let mut meta_trace = Vec::new();
    let mut policy_dumps = Vec::new();
    let mut skipped_meta_steps = 0;
    let mut status = RunStatus::Completed;
    let mut iteration = 0;

    'epochs: for epoch in 0..config.epochs {
        let beta = config.schedule.at(epoch);
        let mut loss_sum = 0.0;
        let mut meta_sum = 0.0;
        let mut meta_count = 0;
        let mut done = 0;
        for _ in 0..iterations_per_epoch {
            if iteration % refresh_period == 0 {
                if learned {
                    cache = refresh_policy(&train, &model, &sampler)?;
                }
                refreshes.push(RefreshRecord {
                    iteration,
                    epoch,
                    entropy: cache.entropy(),
                    hard_mass: hard_mass(&train, &cache),
                });
                if config.dump_policy {
                    policy_dumps.push(dump(&train, &cache, iteration, epoch));
                }
            }

            let batch = match (config.mode, config.sampler) {
                (Mode::Single, kind) => ReidBatch::Single {
                    ids: draw_batch(&cache, config.batch_size, config.with_replacement, &mut rng)?,
                    focal_gamma: (kind == SamplerKind::Focal).then_some(config.focal_gamma),
                },
                (Mode::Triplet, SamplerKind::Ohem | SamplerKind::Semihard) => hard_batch(&train, &model, config, &mut rng)?,
                (Mode::Triplet, _) => {
                    let s = if learned { &sampler } else { &uniform_sampler };
                    let ts = assemble_triplet_batch(&train, &model, s, &cache, config, &mut rng)?;
                    ReidBatch::Triplets(ts.iter().map(|t| (t.draw.anchor, t.draw.positive, t.draw.negative)).collect())
                }
            };

            let (next, loss) = match reid_update(&model, &train, &batch, beta, config) {
                Ok(r) => r,
                Err(e) if is_divergence(&e) => {
                    status = RunStatus::Diverged {
                        epoch,
                        iteration,
                        reason: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !(loss <= 1e6) || !next.is_finite() {
                status = RunStatus::Diverged {
                    epoch,
                    iteration,
                    reason: format!("training loss {loss}"),
                };
                break 'epochs;
            }
            model = next;
            loss_sum += loss;
            done += 1;

            if learned {
                let units = match config.mode {
                    Mode::Single => UpdateUnits::Single(uniform.draw(config.batch_size.min(n), &mut rng)?),
                    Mode::Triplet => UpdateUnits::Triplets(
                        assemble_triplet_batch(&train, &model, &uniform_sampler, &uniform, config, &mut rng)?
                            .into_iter()
                            .map(|t| t.draw)
                            .collect(),
                    ),
                };
                let eval = uniform.draw(config.eval_batch.min(n), &mut rng)?;
                let problem = MetaProblem {
                    train: &train,
                    model: &model,
                    units: &units,
                    eval: &eval,
                    beta,
                    weight_decay: config.weight_decay,
                    margin: config.margin,
                    metric: config.metric,
                };
                match sampler_meta_step(&problem, &sampler, config.alpha, MetaOptions::default()) {
                    Ok(step) => {
                        meta_sum += step.eval_loss_before;
                        meta_count += 1;
                        meta_trace.push(MetaTrace {
                            iteration,
                            eval_loss_before: step.eval_loss_before,
                            eval_loss_after: step.eval_loss_after,
                            grad_norm: step.grad_norm,
                            entropy: step.entropy,
                        });
                        sampler = step.sampler;
                    }
                    Err(e) if is_divergence(&e) || matches!(e, Error::DegeneratePolicy(_)) => skipped_meta_steps += 1,
                    Err(e) => return Err(e),
                }
            }
            iteration += 1;
        }
        let retrieval = evaluate_retrieval(&model, dataset, config.metric, Protocol::Standard)?;
        epochs.push(EpochMetrics {
            epoch,
            lr: beta,
            train_loss: loss_sum / done.max(1) as f64,
            eval_loss_expected: (meta_count > 0).then(|| meta_sum / meta_count as f64),
            map: retrieval.map,
            rank1: retrieval.rank1,
            rank5: retrieval.rank5,
            policy_entropy: cache.entropy(),
        });
    }

    let final_policy = dump(&train, &cache, iteration, epochs.len());
    Ok(TrainOutcome {
        final_metrics: final_metrics(&model, dataset, config.metric)?,
        model,
        sampler,
        epochs,
        refreshes,
        meta_trace,
        policy_dumps,
        final_policy,
        status,
        skipped_meta_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::{generate_synthetic, SynthSpec};
    use rand::Rng;

    fn small_dataset() -> Dataset {
        generate_synthetic(
            &SynthSpec {
                identities: 8,
                per_id: 15,
                input_dim: 6,
                ..SynthSpec::default()
            },
            1,
        )
        .unwrap()
    }

    fn small_config(sampler: SamplerKind, mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            sampler,
            batch_size: 16,
            eval_batch: 16,
            anchors: 4,
            pos_candidates: 4,
            neg_candidates: 6,
            epochs: 4,
            hidden_dim: 8,
            embed_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_matches_closed_form_table() {
        let s = LrSchedule::default();
        let table = [
            (0, 0.01),
            (1, 0.04),
            (2, 0.07),
            (3, 0.1),
            (14, 0.1),
            (15, 0.01),
            (29, 0.01),
            (30, 0.001),
            (47, 0.001),
            (48, 0.0001),
            (59, 0.0001),
        ];
        for (epoch, lr) in table {
            assert!((s.at(epoch) - lr).abs() < 1e-15, "epoch {epoch}: {}", s.at(epoch));
        }
        let r = LrSchedule::reference();
        assert!((r.at(5) - (3.5e-5 + 0.5 * (3.5e-4 - 3.5e-5))).abs() < 1e-18);
        assert!((r.at(100) - 3.5e-6).abs() < 1e-18);
        assert!((r.at(160) - 3.5e-7).abs() < 1e-18);
    }

    #[test]
    fn sampler_names_round_trip() {
        for k in SamplerKind::ALL {
            assert_eq!(k.name().parse::<SamplerKind>().unwrap(), k);
        }
        let err = "bogus".parse::<SamplerKind>().unwrap_err().to_string();
        assert!(err.contains("uniform") && err.contains("learned"));
    }

    #[test]
    fn config_validation() {
        assert!(small_config(SamplerKind::Ohem, Mode::Single).validate().is_err());
        assert!(small_config(SamplerKind::Focal, Mode::Triplet).validate().is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
        assert_eq!(serde_json::from_str::<TrainConfig>("{}").unwrap(), TrainConfig::default());
        assert!(serde_json::from_str::<TrainConfig>("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn refresh_policy_cases() {
        let d = small_dataset();
        let train = d.train_set().unwrap();
        let mut rng = seeded(1);
        let dims = ModelDims {
            input_dim: 6,
            hidden_dim: 8,
            embed_dim: 4,
            num_identities: 8,
        };
        let model = ModelParams::init(dims, &mut rng);
        let p = refresh_policy(&train, &model, &SamplerParams::zeros(4)).unwrap();
        assert!(p.probs().iter().all(|&q| q == 1.0 / train.len() as f64));

        let sampler = SamplerParams::new(4, Some(5), &mut rng);
        let theta: Vec<f64> = (0..sampler.num_params()).map(|_| rng.random::<f64>() - 0.5).collect();
        let sampler = sampler.with_flat(&theta).unwrap();
        let p = refresh_policy(&train, &model, &sampler).unwrap();
        let emb = model.embed_rows(&train.features).unwrap();
        let energies: Vec<f64> = (0..train.len()).map(|k| sampler.energy_single(emb.row(k)).unwrap()).collect();
        let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = energies.iter().map(|e| (e - max).exp()).sum();
        for (q, e) in p.probs().iter().zip(&energies) {
            assert!((q - (e - max).exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_one_energy_raises_its_probability() {
        let d = small_dataset();
        let train = d.train_set().unwrap();
        let mut rng = seeded(2);
        let dims = ModelDims {
            input_dim: 6,
            hidden_dim: 8,
            embed_dim: 4,
            num_identities: 8,
        };
        let model = ModelParams::init(dims, &mut rng);
        let base = SamplerParams::zeros(4);
        let theta: Vec<f64> = (0..base.num_params()).map(|_| rng.random::<f64>() - 0.5).collect();
        let sampler = base.with_flat(&theta).unwrap();
        let p = refresh_policy(&train, &model, &sampler).unwrap();
        let emb = model.embed_rows(&train.features).unwrap();
        let mut energies: Vec<f64> = sampler.energies_single(&emb).unwrap();
        let k = 3;
        energies[k] = 2.0 * energies[k].abs() + 1.0;
        let q = SamplingPolicy::from_energies((0..train.len()).collect(), &energies).unwrap();
        assert!(q.probs()[k] > p.probs()[k]);
    }

    #[test]
    fn reid_update_cases() {
        let d = small_dataset();
        let train = d.train_set().unwrap();
        let config = small_config(SamplerKind::Uniform, Mode::Single);
        let dims = ModelDims {
            input_dim: 6,
            hidden_dim: 8,
            embed_dim: 4,
            num_identities: 8,
        };
        let model = ModelParams::init(dims, &mut seeded(3));
        let batch = ReidBatch::Single {
            ids: vec![0, 5, 9],
            focal_gamma: None,
        };
        assert_eq!(reid_update(&model, &train, &batch, 0.0, &config).unwrap().0, model);

        let doubled = ReidBatch::Single {
            ids: vec![0, 5, 9, 0, 5, 9],
            focal_gamma: None,
        };
        let a = reid_update(&model, &train, &batch, 0.1, &config).unwrap().0.to_flat();
        let b = reid_update(&model, &train, &doubled, 0.1, &config).unwrap().0.to_flat();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn single_sample_step_matches_hand_gradient() {
        // One linear layer in effect: identity backbone on positive inputs.
        let dims = ModelDims {
            input_dim: 2,
            hidden_dim: 2,
            embed_dim: 2,
            num_identities: 2,
        };
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let wc = Tensor::matrix(2, 2, vec![0.5, -0.5, 0.25, 1.0]).unwrap();
        let model = ModelParams::from_tensors(
            dims,
            [eye.clone(), Tensor::zeros(&[2]), eye, Tensor::zeros(&[2]), wc, Tensor::vector(vec![0.1, -0.1])],
        )
        .unwrap();
        let train = TrainSet {
            ids: vec![0],
            labels: vec![1],
            hard: vec![false],
            features: Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
            by_label: vec![vec![], vec![0]],
        };
        let config = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let batch = ReidBatch::Single {
            ids: vec![0],
            focal_gamma: None,
        };
        let (next, _) = reid_update(&model, &train, &batch, 0.5, &config).unwrap();
        // logits = x Wc + b
        let x = [1.0f64, 2.0];
        let z: [f64; 2] = [x[0] * 0.5 + x[1] * 0.25 + 0.1, x[0] * -0.5 + x[1] * 1.0 - 0.1];
        let m = z[0].max(z[1]);
        let s = (z[0] - m).exp() + (z[1] - m).exp();
        let p = [(z[0] - m).exp() / s, (z[1] - m).exp() / s];
        let dz = [p[0], p[1] - 1.0];
        let new_wc = next.tensors()[4].data();
        let expected = [0.5 - 0.5 * x[0] * dz[0], -0.5 - 0.5 * x[0] * dz[1], 0.25 - 0.5 * x[1] * dz[0], 1.0 - 0.5 * x[1] * dz[1]];
        for (a, b) in new_wc.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        let new_bc = next.tensors()[5].data();
        assert!((new_bc[0] - (0.1 - 0.5 * dz[0])).abs() < 1e-14);
    }

    #[test]
    fn triplet_assembly_respects_identities() {
        let d = small_dataset();
        let train = d.train_set().unwrap();
        let config = small_config(SamplerKind::Learned, Mode::Triplet);
        let mut rng = seeded(4);
        let dims = ModelDims {
            input_dim: 6,
            hidden_dim: 8,
            embed_dim: 4,
            num_identities: 8,
        };
        let model = ModelParams::init(dims, &mut rng);
        let sampler = SamplerParams::new(4, Some(3), &mut rng);
        let cache = refresh_policy(&train, &model, &sampler).unwrap();
        for _ in 0..50 {
            for t in assemble_triplet_batch(&train, &model, &sampler, &cache, &config, &mut rng).unwrap() {
                let l = train.labels[t.draw.anchor];
                assert_eq!(train.labels[t.draw.positive], l);
                assert_ne!(t.draw.positive, t.draw.anchor);
                assert_ne!(train.labels[t.draw.negative], l);
                assert!(t.draw.pos_candidates.iter().all(|&p| train.labels[p] == l && p != t.draw.anchor));
                assert!(t.draw.neg_candidates.iter().all(|&p| train.labels[p] != l));
                assert!(t.p_anchor > 0.0 && t.p_positive > 0.0 && t.p_negative > 0.0);
            }
        }
    }

    fn toy_train() -> TrainSet {
        let mut rng = seeded(11);
        let features: Vec<f64> = (0..9 * 3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        TrainSet {
            ids: (0..9).collect(),
            labels: vec![0, 0, 0, 1, 1, 1, 2, 2, 2],
            hard: vec![false; 9],
            features: Tensor::matrix(9, 3, features).unwrap(),
            by_label: vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]],
        }
    }

    fn toy_model(rng: &mut StreamRng) -> ModelParams {
        ModelParams::init(
            ModelDims {
                input_dim: 3,
                hidden_dim: 4,
                embed_dim: 2,
                num_identities: 3,
            },
            rng,
        )
    }

    #[test]
    fn zero_sampler_anchors_are_uniform() {
        let train = toy_train();
        let mut rng = seeded(5);
        let model = toy_model(&mut rng);
        let sampler = SamplerParams::zeros(2);
        let cache = refresh_policy(&train, &model, &sampler).unwrap();
        let config = TrainConfig {
            anchors: 1,
            pos_candidates: 2,
            neg_candidates: 3,
            ..TrainConfig::default()
        };
        let batches = 10_000;
        let mut counts = [0usize; 9];
        for _ in 0..batches {
            for t in assemble_triplet_batch(&train, &model, &sampler, &cache, &config, &mut rng).unwrap() {
                counts[t.draw.anchor] += 1;
            }
        }
        let p = 1.0 / 9.0;
        let mean = batches as f64 * p;
        let sd = (batches as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn full_candidate_sets_give_pairwise_softmax_marginal() {
        let train = toy_train();
        let mut rng = seeded(6);
        let model = toy_model(&mut rng);
        let base = SamplerParams::new(2, None, &mut rng);
        let theta: Vec<f64> = (0..base.num_params()).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let sampler = base.with_flat(&theta).unwrap();
        let cache = refresh_policy(&train, &model, &sampler).unwrap();
        let config = TrainConfig {
            anchors: 1,
            pos_candidates: 2,
            neg_candidates: 6,
            ..TrainConfig::default()
        };
        let emb = model.embed_rows(&train.features).unwrap();
        // Enumerated joint of (anchor, positive).
        let mut joint = [[0.0; 9]; 9];
        for a in 0..9 {
            let others: Vec<usize> = train.by_label[train.labels[a]].iter().copied().filter(|&p| p != a).collect();
            let e: Vec<f64> = others.iter().map(|&p| sampler.energy_pair(emb.row(p), emb.row(a)).unwrap()).collect();
            let z: f64 = e.iter().map(|x| x.exp()).sum();
            for (&p, x) in others.iter().zip(&e) {
                joint[a][p] = cache.probs()[a] * x.exp() / z;
            }
        }
        let draws = 20_000;
        let mut counts = [[0usize; 9]; 9];
        for _ in 0..draws {
            let t = assemble_triplet_batch(&train, &model, &sampler, &cache, &config, &mut rng).unwrap().remove(0);
            let (a, p) = (t.draw.anchor, t.draw.positive);
            assert!((t.p_positive * cache.probs()[a] - joint[a][p]).abs() < 1e-12);
            counts[a][p] += 1;
        }
        for a in 0..9 {
            for p in 0..9 {
                let q = joint[a][p];
                let sd = (draws as f64 * q * (1.0 - q)).sqrt();
                assert!((counts[a][p] as f64 - draws as f64 * q).abs() <= 3.0 * sd + 1e-9, "({a},{p})");
            }
        }
    }

    #[test]
    fn uniform_run_reduces_loss_and_is_deterministic() {
        let d = small_dataset();
        let config = TrainConfig {
            epochs: 10,
            ..small_config(SamplerKind::Uniform, Mode::Single)
        };
        let a = run(&config, &d).unwrap();
        assert_eq!(a.status, RunStatus::Completed);
        assert!(a.epochs.last().unwrap().train_loss < a.epochs[0].train_loss);
        let b = run(&config, &d).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn every_kind_runs_in_its_modes() {
        let d = small_dataset();
        for (kind, mode) in [
            (SamplerKind::Uniform, Mode::Triplet),
            (SamplerKind::Ohem, Mode::Triplet),
            (SamplerKind::Semihard, Mode::Triplet),
            (SamplerKind::Focal, Mode::Single),
            (SamplerKind::Learned, Mode::Single),
            (SamplerKind::Learned, Mode::Triplet),
            (SamplerKind::Upsample, Mode::Single),
        ] {
            let out = run(&small_config(kind, mode), &d).unwrap();
            assert_eq!(out.status, RunStatus::Completed, "{kind} {mode:?}");
            assert_eq!(out.epochs.len(), 4);
            assert_eq!(out.final_metrics.cross_view.len(), 3);
            if kind == SamplerKind::Learned {
                assert!(!out.meta_trace.is_empty());
                assert!(out.epochs.iter().all(|e| e.eval_loss_expected.is_some()));
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let d = small_dataset();
        let config = TrainConfig {
            schedule: LrSchedule {
                start: 1e6,
                peak: 1e6,
                ..LrSchedule::default()
            },
            ..small_config(SamplerKind::Uniform, Mode::Single)
        };
        let out = run(&config, &d).unwrap();
        assert!(matches!(out.status, RunStatus::Diverged { .. }), "{:?}", out.status);
    }

    #[test]
    fn upsample_weights_follow_median() {
        let mut d = small_dataset();
        d = d.apply_imbalance(4, 3).unwrap();
        let train = d.train_set().unwrap();
        let p = upsample_policy(&train).unwrap();
        let few = train.labels.iter().position(|&l| train.by_label[l].len() == 3).unwrap();
        // 15 per identity minus 4 held out leaves 11; half the identities keep 3.
        let many = train.labels.iter().position(|&l| train.by_label[l].len() == 11).unwrap();
        assert!((p.probs()[few] / p.probs()[many] - 7.0 / 3.0).abs() < 1e-12);
    }
}
