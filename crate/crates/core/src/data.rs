//! Synthetic identity datasets, their transforms and the text file format.
//!
//! Each identity has a random center plus one offset per mode (three view-like
//! modes); a sample is `center + offset[mode] + noise`. A fraction of samples
//! can be tagged hard and drawn with three times the noise.
//!
//! File format, one record per line after the header:
//!
//! ```text
//! dims=<d> identities=<k> samples=<n>
//! #hard=<id>,<id>,...
//! <id>,<label>,<true_label>,<mode>,<split>,<v1>,...,<vd>
//! ```
//!
//! `samples=` is optional and, when present, lets truncated files be
//! detected. Other lines starting with `#` are comments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng::seeded;

pub const NUM_MODES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub true_label: usize,
    pub mode: usize,
    pub split: Split,
    pub hard: bool,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: usize,
    pub num_identities: usize,
    pub samples: Vec<Sample>,
}

/// Distribution of per-identity sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SizeDistribution {
    /// Every identity has `per_id` samples.
    Uniform,
    /// Identity of rank `r` (from 1) gets `max(min_count, round(per_id * r^-exponent))`.
    LongTail { exponent: f64, min_count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub identities: usize,
    pub per_id: usize,
    pub sizes: SizeDistribution,
    pub input_dim: usize,
    /// Std of identity centers.
    pub spread: f64,
    /// Length of each mode offset.
    pub mode_offset: f64,
    /// Within-mode noise std.
    pub noise_std: f64,
    pub hard_fraction: f64,
    /// Fraction of each identity held out for query and gallery.
    pub holdout: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 50,
            per_id: 20,
            sizes: SizeDistribution::Uniform,
            input_dim: 16,
            spread: 1.0,
            mode_offset: 0.5,
            noise_std: 0.5,
            hard_fraction: 0.0,
            holdout: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(invalid("need at least 2 identities"));
        }
        if self.per_id == 0 {
            return Err(invalid("identity with 0 samples requested"));
        }
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be positive"));
        }
        if !(self.spread > 0.0) || !(self.noise_std > 0.0) || !(self.mode_offset >= 0.0) {
            return Err(invalid("spread and noise_std must be > 0, mode_offset >= 0"));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(invalid(format!("hard_fraction {} outside [0, 1]", self.hard_fraction)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(invalid(format!("holdout {} outside [0, 1)", self.holdout)));
        }
        if let SizeDistribution::LongTail { exponent, min_count } = self.sizes {
            if !(exponent > 0.0) || min_count == 0 {
                return Err(invalid("long-tail exponent must be > 0 and min_count >= 1"));
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.identities)
            .map(|k| match self.sizes {
                SizeDistribution::Uniform => self.per_id,
                SizeDistribution::LongTail { exponent, min_count } => {
                    let c = (self.per_id as f64 * ((k + 1) as f64).powf(-exponent)).round() as usize;
                    c.max(min_count)
                }
            })
            .collect()
    }
}

/// Number of held-out samples for an identity of `count` samples: enough for
/// one gallery item per mode and one query.
fn holdout_count(count: usize, fraction: f64) -> usize {
    ((count as f64 * fraction).round() as usize).max(NUM_MODES + 1)
}

fn unit_direction(rng: &mut crate::rng::Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a dataset. Sample `j` of identity `k` has mode `(j + k) % 3`; the last
/// held-out block of samples becomes the gallery (the first held-out sample
/// of each mode) and the query set (the rest).
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let counts = spec.counts();
    let mut rng = seeded(seed);
    let d = spec.input_dim;
    let mut samples = Vec::new();
    for (label, &count) in counts.iter().enumerate() {
        let held = holdout_count(count, spec.holdout);
        if count <= held {
            return Err(invalid(format!(
                "identity {label} has {count} samples, needs more than {held} for the held-out split"
            )));
        }
        let center: Vec<f64> = (0..d).map(|_| spec.spread * rng.sample::<f64, _>(StandardNormal)).collect();
        let offsets: Vec<Vec<f64>> = (0..NUM_MODES)
            .map(|_| unit_direction(&mut rng, d).into_iter().map(|x| x * spec.mode_offset).collect())
            .collect();
        let mut gallery_modes = [false; NUM_MODES];
        for j in 0..count {
            let mode = (j + label) % NUM_MODES;
            let hard = spec.hard_fraction > 0.0 && rng.random::<f64>() < spec.hard_fraction;
            let std = if hard { 3.0 * spec.noise_std } else { spec.noise_std };
            let features = (0..d)
                .map(|c| center[c] + offsets[mode][c] + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let split = if j < count - held {
                Split::Train
            } else if !gallery_modes[mode] {
                gallery_modes[mode] = true;
                Split::Gallery
            } else {
                Split::Query
            };
            samples.push(Sample {
                id: samples.len(),
                label,
                true_label: label,
                mode,
                split,
                hard,
                features,
            });
        }
    }
    Ok(Dataset {
        dims: d,
        num_identities: spec.identities,
        samples,
    })
}

/// `ceil(fraction * identities)`, the number of identities a few-shot
/// transform affects.
pub fn few_shot_count(fraction: f64, identities: usize) -> usize {
    ((fraction * identities as f64) - 1e-9).ceil().max(0.0) as usize
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id) {
                return Err(invalid(format!("duplicate sample id {}", s.id)));
            }
            if s.features.len() != self.dims {
                return Err(invalid(format!("sample {} has {} features, expected {}", s.id, s.features.len(), self.dims)));
            }
            if s.label >= self.num_identities || s.true_label >= self.num_identities {
                return Err(Error::OutOfRange {
                    what: "label",
                    index: s.label.max(s.true_label),
                    len: self.num_identities,
                });
            }
            if s.mode >= NUM_MODES {
                return Err(Error::OutOfRange {
                    what: "mode",
                    index: s.mode,
                    len: NUM_MODES,
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("sample {} has non-finite features", s.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Train sample count per (noisy) label.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_identities];
        for s in self.split(Split::Train) {
            counts[s.label] += 1;
        }
        counts
    }

    /// Down-samples the `m` identities with the most train samples (ties by
    /// identity id) to their `n` lowest-id train samples. Identities with
    /// fewer than `n` samples are left unchanged.
    pub fn apply_imbalance(&self, m: usize, n: usize) -> Result<Dataset> {
        if n == 0 {
            return Err(invalid("few-shot size n must be >= 1"));
        }
        let counts = self.train_counts();
        let mut order: Vec<usize> = (0..self.num_identities).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let affected: BTreeSet<usize> = order.into_iter().take(m).filter(|&k| counts[k] >= n).collect();
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for s in self.split(Split::Train).filter(|s| affected.contains(&s.label)) {
            by_label.entry(s.label).or_default().push(s.id);
        }
        let mut dropped = BTreeSet::new();
        for ids in by_label.values_mut() {
            ids.sort_unstable();
            dropped.extend(ids.iter().skip(n).copied());
        }
        let mut out = self.clone();
        out.samples.retain(|s| !dropped.contains(&s.id));
        Ok(out)
    }

    /// Switches exactly `round(fraction * N_train)` distinct train labels to a
    /// uniformly random different identity. `true_label` is preserved.
    pub fn inject_label_noise(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..=0.5).contains(&fraction) {
            return Err(invalid(format!("noise fraction {fraction} outside [0, 0.5]")));
        }
        let train: Vec<usize> = (0..self.samples.len()).filter(|&i| self.samples[i].split == Split::Train).collect();
        let count = (fraction * train.len() as f64).round() as usize;
        let mut out = self.clone();
        if count == 0 {
            return Ok(out);
        }
        if self.num_identities < 2 {
            return Err(invalid("label noise needs at least 2 identities"));
        }
        let mut rng = seeded(seed);
        for k in sample_indices(&mut rng, train.len(), count).into_vec() {
            let s = &mut out.samples[train[k]];
            let r = rng.random_range(0..self.num_identities - 1);
            s.label = if r >= s.label { r + 1 } else { r };
        }
        Ok(out)
    }

    /// Number of train samples whose label differs from the true label.
    pub fn noisy_count(&self) -> usize {
        self.split(Split::Train).filter(|s| s.label != s.true_label).count()
    }

    pub fn train_set(&self) -> Result<TrainSet> {
        TrainSet::new(self)
    }
}

/// Cross-view protocol: a gallery item is eligible for a query only when
/// their modes differ.
pub fn cross_view_eligible(query: &Sample, gallery: &Sample) -> bool {
    query.mode != gallery.mode
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossViewSplit {
    /// Query sample ids per query mode.
    pub queries: [Vec<usize>; NUM_MODES],
    /// Gallery sample ids.
    pub gallery: Vec<usize>,
    /// Queries without any eligible same-identity gallery item.
    pub dropped: usize,
}

/// Groups queries by mode. Queries whose identity has no gallery item in a
/// different mode cannot be scored and are dropped (and counted).
pub fn cross_view_eval_split(dataset: &Dataset) -> CrossViewSplit {
    let gallery: Vec<&Sample> = dataset.split(Split::Gallery).collect();
    let mut queries: [Vec<usize>; NUM_MODES] = Default::default();
    let mut dropped = 0;
    for q in dataset.split(Split::Query) {
        let ok = gallery.iter().any(|g| g.label == q.label && cross_view_eligible(q, g));
        if ok {
            queries[q.mode].push(q.id);
        } else {
            dropped += 1;
        }
    }
    CrossViewSplit {
        queries,
        gallery: gallery.iter().map(|g| g.id).collect(),
        dropped,
    }
}

/// Dense view of the train split, ordered by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub hard: Vec<bool>,
    /// `[n, dims]`
    pub features: Tensor,
    /// Positions of each label's samples, ascending.
    pub by_label: Vec<Vec<usize>>,
}

impl TrainSet {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let mut train: Vec<&Sample> = dataset.split(Split::Train).collect();
        if train.is_empty() {
            return Err(Error::Empty("train split"));
        }
        train.sort_by_key(|s| s.id);
        let mut by_label = vec![Vec::new(); dataset.num_identities];
        for (k, s) in train.iter().enumerate() {
            by_label[s.label].push(k);
        }
        let rows: Vec<&[f64]> = train.iter().map(|s| s.features.as_slice()).collect();
        Ok(Self {
            ids: train.iter().map(|s| s.id).collect(),
            labels: train.iter().map(|s| s.label).collect(),
            hard: train.iter().map(|s| s.hard).collect(),
            features: Tensor::from_rows(&rows)?,
            by_label,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Feature rows at `positions`.
    pub fn rows(&self, positions: &[usize]) -> Tensor {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            data.extend_from_slice(self.features.row(p));
        }
        Tensor::matrix(positions.len(), d, data).expect("row shape")
    }
}

pub fn to_string(dataset: &Dataset) -> String {
    let mut out = format!(
        "dims={} identities={} samples={}\n",
        dataset.dims,
        dataset.num_identities,
        dataset.samples.len()
    );
    let hard: Vec<String> = dataset.samples.iter().filter(|s| s.hard).map(|s| s.id.to_string()).collect();
    if !hard.is_empty() {
        writeln!(out, "#hard={}", hard.join(",")).expect("write to string");
    }
    for s in &dataset.samples {
        write!(out, "{},{},{},{},{}", s.id, s.label, s.true_label, s.mode, s.split.as_str()).expect("write to string");
        for v in &s.features {
            write!(out, ",{v:?}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

fn parse_header(line: &str) -> std::result::Result<(usize, usize, Option<usize>), String> {
    let mut dims = None;
    let mut identities = None;
    let mut samples = None;
    for field in line.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| format!("bad header field `{field}`"))?;
        let value: usize = value.parse().map_err(|_| format!("bad header value `{field}`"))?;
        match key {
            "dims" => dims = Some(value),
            "identities" => identities = Some(value),
            "samples" => samples = Some(value),
            _ => return Err(format!("unknown header key `{key}`")),
        }
    }
    match (dims, identities) {
        (Some(d), Some(k)) => Ok((d, k, samples)),
        _ => Err("header needs dims=<d> identities=<k>".into()),
    }
}

pub fn parse(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (dims, num_identities, expected) = match lines.next() {
        Some((_, l)) => parse_header(l).map_err(|message| Error::Parse { line: 1, message })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty dataset file".into(),
            })
        }
    };
    let mut hard = BTreeSet::new();
    let mut samples = Vec::new();
    let mut last_line = 1;
    for (i, line) in lines {
        let line_no = i + 1;
        last_line = line_no;
        let err = |message: String| Error::Parse { line: line_no, message };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#hard=") {
            for id in rest.split(',').filter(|s| !s.is_empty()) {
                hard.insert(id.trim().parse::<usize>().map_err(|_| err(format!("bad hard id `{id}`")))?);
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 + dims {
            return Err(err(format!("expected {} fields, found {}", 5 + dims, fields.len())));
        }
        let int = |k: usize, name: &str| -> Result<usize> {
            fields[k].trim().parse().map_err(|_| err(format!("bad {name} `{}`", fields[k])))
        };
        let split = Split::parse(fields[4].trim()).ok_or_else(|| err(format!("bad split `{}`", fields[4])))?;
        let features = fields[5..]
            .iter()
            .map(|v| v.trim().parse::<f64>().map_err(|_| err(format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: int(0, "id")?,
            label: int(1, "label")?,
            true_label: int(2, "true_label")?,
            mode: int(3, "mode")?,
            split,
            hard: false,
            features,
        });
    }
    if let Some(n) = expected {
        if samples.len() != n {
            return Err(Error::Parse {
                line: last_line,
                message: format!("header declares {n} samples, file has {}", samples.len()),
            });
        }
    }
    for s in &mut samples {
        s.hard = hard.contains(&s.id);
    }
    let dataset = Dataset {
        dims,
        num_identities,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save(path: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, to_string(dataset))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            identities: 6,
            per_id: 12,
            input_dim: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec(), 7).unwrap();
        let b = generate_synthetic(&small_spec(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&small_spec(), 8).unwrap());
    }

    #[test]
    fn tiny_noise_collapses_same_mode_samples() {
        let spec = SynthSpec {
            noise_std: 1e-300,
            ..small_spec()
        };
        let d = generate_synthetic(&spec, 1).unwrap();
        for a in &d.samples {
            for b in &d.samples {
                if a.label == b.label && a.mode == b.mode {
                    assert_eq!(a.features, b.features);
                }
            }
        }
    }

    #[test]
    fn within_identity_closer_than_across() {
        let spec = SynthSpec {
            spread: 3.0,
            noise_std: 0.3,
            ..SynthSpec::default()
        };
        let d = generate_synthetic(&spec, 3).unwrap();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for (i, a) in d.samples.iter().enumerate() {
            for b in &d.samples[i + 1..] {
                let dist = crate::losses::Metric::Euclidean.distance(&a.features, &b.features);
                if a.label == b.label {
                    within += dist;
                    nw += 1;
                } else {
                    across += dist;
                    na += 1;
                }
            }
        }
        assert!(within / nw as f64 * 2.0 < across / na as f64);
    }

    #[test]
    fn split_layout() {
        let d = generate_synthetic(&SynthSpec::default(), 2).unwrap();
        for k in 0..d.num_identities {
            let of = |s: Split| d.samples.iter().filter(|x| x.label == k && x.split == s).count();
            assert_eq!(of(Split::Train), 16);
            assert_eq!(of(Split::Gallery), 3);
            assert_eq!(of(Split::Query), 1);
            let modes: BTreeSet<usize> =
                d.samples.iter().filter(|x| x.label == k && x.split == Split::Gallery).map(|x| x.mode).collect();
            assert_eq!(modes.len(), 3);
        }
        assert!(matches!(
            generate_synthetic(&SynthSpec { per_id: 0, ..small_spec() }, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn long_tail_counts() {
        let spec = SynthSpec {
            per_id: 60,
            sizes: SizeDistribution::LongTail {
                exponent: 1.2,
                min_count: 5,
            },
            ..SynthSpec::default()
        };
        let c = spec.counts();
        assert_eq!(c[0], 60);
        assert_eq!(c[1], (60.0 * 2f64.powf(-1.2)).round() as usize);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(*c.last().unwrap(), 5);
    }

    fn with_train_counts(counts: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (label, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                samples.push(Sample {
                    id: samples.len(),
                    label,
                    true_label: label,
                    mode: samples.len() % 3,
                    split: Split::Train,
                    hard: false,
                    features: vec![samples.len() as f64],
                });
            }
        }
        Dataset {
            dims: 1,
            num_identities: counts.len(),
            samples,
        }
    }

    #[test]
    fn imbalance_cases() {
        let d = with_train_counts(&[20, 15, 10, 5]);
        assert_eq!(d.apply_imbalance(2, 5).unwrap().train_counts(), vec![5, 5, 10, 5]);
        assert_eq!(d.apply_imbalance(0, 5).unwrap(), d);
        // n above an affected identity's count leaves it alone
        assert_eq!(d.apply_imbalance(4, 12).unwrap().train_counts(), vec![12, 12, 10, 5]);
        let kept: Vec<usize> = d.apply_imbalance(1, 3).unwrap().samples.iter().filter(|s| s.label == 0).map(|s| s.id).collect();
        assert_eq!(kept, vec![0, 1, 2]);
        assert_eq!(few_shot_count(0.9, 50), 45);
        assert_eq!(few_shot_count(0.9, 4), 4);
        assert_eq!(few_shot_count(0.5, 4), 2);
    }

    fn reference_imbalance(counts: &[usize], m: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..counts.len()).collect();
        for i in 0..idx.len() {
            for j in i + 1..idx.len() {
                let (a, b) = (idx[i], idx[j]);
                if counts[b] > counts[a] || (counts[b] == counts[a] && b < a) {
                    idx.swap(i, j);
                }
            }
        }
        let mut out = counts.to_vec();
        for &k in idx.iter().take(m) {
            if counts[k] >= n {
                out[k] = n;
            }
        }
        out
    }

    #[test]
    fn imbalance_matches_reference_histogram() {
        let mut rng = seeded(11);
        for _ in 0..200 {
            let k = rng.random_range(1..10);
            let counts: Vec<usize> = (0..k).map(|_| rng.random_range(0..15)).collect();
            let m = rng.random_range(0..=k);
            let n = rng.random_range(1..8);
            let d = with_train_counts(&counts);
            assert_eq!(d.apply_imbalance(m, n).unwrap().train_counts(), reference_imbalance(&counts, m, n));
        }
    }

    #[test]
    fn label_noise_exact_count() {
        let d = with_train_counts(&[25, 25, 25, 25]);
        assert_eq!(d.inject_label_noise(0.0, 1).unwrap(), d);
        let noisy = d.inject_label_noise(0.05, 1).unwrap();
        assert_eq!(noisy.noisy_count(), 5);
        assert!(noisy.samples.iter().zip(&d.samples).all(|(a, b)| a.true_label == b.true_label));
        assert!(d.inject_label_noise(0.6, 1).is_err());
    }

    #[test]
    fn label_noise_never_keeps_original() {
        let d = with_train_counts(&[3, 3, 4]);
        let mut total = 0;
        for seed in 0..1000 {
            let noisy = d.inject_label_noise(0.5, seed).unwrap();
            total += noisy.noisy_count();
            assert_eq!(noisy.noisy_count(), 5);
        }
        assert!(total >= 10_000 / 2);
    }

    #[test]
    fn label_noise_leaves_eval_splits_alone() {
        let d = generate_synthetic(&small_spec(), 4).unwrap();
        let noisy = d.inject_label_noise(0.3, 9).unwrap();
        for (a, b) in noisy.samples.iter().zip(&d.samples) {
            if a.split != Split::Train {
                assert_eq!(a, b);
            }
        }
        let n_train = d.split(Split::Train).count();
        assert_eq!(noisy.noisy_count(), (0.3 * n_train as f64).round() as usize);
    }

    #[test]
    fn cross_view_cases() {
        let d = generate_synthetic(&SynthSpec::default(), 5).unwrap();
        let cv = cross_view_eval_split(&d);
        assert_eq!(cv.dropped, 0);
        let gallery: Vec<&Sample> = d.split(Split::Gallery).collect();
        for q in d.split(Split::Query) {
            let eligible = gallery.iter().filter(|g| cross_view_eligible(q, g)).count();
            assert!(eligible * 3 >= gallery.len() * 2);
            // brute-force mode comparison
            for g in &gallery {
                assert_eq!(cross_view_eligible(q, g), q.mode != g.mode);
            }
        }

        let mut single = d.clone();
        for s in &mut single.samples {
            s.mode = 0;
        }
        let cv = cross_view_eval_split(&single);
        assert!(cv.queries.iter().all(Vec::is_empty));
        assert_eq!(cv.dropped, single.split(Split::Query).count());
    }

    #[test]
    fn round_trip_bit_exact() {
        let spec = SynthSpec {
            hard_fraction: 0.3,
            ..small_spec()
        };
        let d = generate_synthetic(&spec, 6).unwrap().inject_label_noise(0.1, 2).unwrap();
        assert!(d.samples.iter().any(|s| s.hard));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        save(&path, &d).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert!(a.features.iter().zip(&b.features).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_and_malformed_files() {
        let d = generate_synthetic(&small_spec(), 6).unwrap();
        let text = to_string(&d);
        let cut = &text[..text.len() / 2];
        let cut = &cut[..cut.rfind('\n').unwrap() + 1];
        assert!(matches!(parse(cut), Err(Error::Parse { .. })));
        let partial_line = &text[..text.trim_end().rfind(',').unwrap()];
        assert!(matches!(parse(partial_line), Err(Error::Parse { .. })));
        match parse("dims=2 identities=2\n0,0,0,0,train,1.0,2.0\n1,1,1,0,tran,1.0,2.0\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("split"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("dims=2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn hand_written_fixture() {
        let text = "dims=2 identities=2\n# three samples\n#hard=2\n0,0,0,0,train,0.5,-1.0\n1,1,0,1,query,1e-3,2.0\n2,1,1,2,gallery,3.25,0.0\n";
        let d = parse(text).unwrap();
        assert_eq!(d.samples.len(), 3);
        assert_eq!(
            d.samples[1],
            Sample {
                id: 1,
                label: 1,
                true_label: 0,
                mode: 1,
                split: Split::Query,
                hard: false,
                features: vec![0.001, 2.0],
            }
        );
        assert!(d.samples[2].hard);
        assert_eq!(d.samples[2].split, Split::Gallery);
    }

    proptest! {
        #[test]
        fn transforms_commute_with_save_load(seed in 0u64..200, m in 0usize..6, n in 1usize..6, f in 0.0f64..0.5) {
            let d = generate_synthetic(&small_spec(), seed).unwrap();
            let direct = d.apply_imbalance(m, n).unwrap().inject_label_noise(f, seed).unwrap();
            let via_file = parse(&to_string(&d)).unwrap().apply_imbalance(m, n).unwrap();
            let via_file = parse(&to_string(&via_file)).unwrap().inject_label_noise(f, seed).unwrap();
            prop_assert_eq!(parse(&to_string(&direct)).unwrap(), via_file);
        }
    }
}
