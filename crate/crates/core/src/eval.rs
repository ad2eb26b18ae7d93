//! Retrieval metrics (mAP, CMC rank-k) and classification accuracy.
//!
//! AP is the mean, over relevant positions `k`, of the precision within the
//! top `k`. Gallery items sharing both identity and mode with the query are
//! excluded, the mode standing in for a camera.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{cross_view_eligible, Dataset, Sample, Split};
use crate::error::{invalid, Error, Result};
use crate::losses::Metric;
use crate::models::ModelParams;
use crate::parallel;

/// One query's gallery ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query: usize,
    /// Gallery ids by ascending distance, ties by id.
    pub gallery: Vec<usize>,
    pub distances: Vec<f64>,
    pub relevant: Vec<bool>,
}

/// Sorts the non-excluded gallery items by distance to `query`. Returns
/// `None` when everything is excluded.
pub fn rank_gallery(
    query_id: usize,
    query: &[f64],
    gallery: &Tensor,
    gallery_ids: &[usize],
    relevant: &[bool],
    excluded: &[bool],
    metric: Metric,
) -> Result<Option<RankedResult>> {
    let n = gallery_ids.len();
    if gallery.rank() != 2 || gallery.rows() != n || relevant.len() != n || excluded.len() != n {
        return Err(invalid("gallery embeddings, ids and masks disagree in length"));
    }
    if gallery.cols() != query.len() {
        return Err(Error::ShapeMismatch {
            op: "rank_gallery",
            node: 0,
            lhs: vec![query.len()],
            rhs: gallery.shape().to_vec(),
        });
    }
    let mut items: Vec<(f64, usize, bool)> = (0..n)
        .filter(|&k| !excluded[k])
        .map(|k| (metric.distance(query, gallery.row(k)), gallery_ids[k], relevant[k]))
        .collect();
    if items.is_empty() {
        return Ok(None);
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(Some(RankedResult {
        query: query_id,
        gallery: items.iter().map(|x| x.1).collect(),
        distances: items.iter().map(|x| x.0).collect(),
        relevant: items.iter().map(|x| x.2).collect(),
    }))
}

/// AP of an ordered relevance list; `None` without any relevant item.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// Fraction of `results` whose first relevant item is within the top `k`.
pub fn cmc_rank_k(results: &[RankedResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(invalid("rank k must be >= 1"));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results.iter().filter(|r| r.relevant.iter().take(k).any(|&x| x)).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Fraction of rows whose argmax (ties to the lowest class) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy inputs"));
    }
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(invalid("logits rows and labels disagree"));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub num_queries: usize,
    pub num_skipped: usize,
}

/// Which gallery items a query may be compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Exclude same identity in the same mode.
    Standard,
    /// Only queries of the given mode, against gallery items of other modes.
    CrossView(usize),
}

/// Scores ranked queries. Queries with nothing to rank or no relevant item
/// are counted as skipped.
pub fn summarize(results: Vec<Option<RankedResult>>) -> Result<RetrievalMetrics> {
    let mut kept = Vec::new();
    let mut aps = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r.as_ref().and_then(|r| average_precision(&r.relevant)) {
            Some(ap) => {
                aps.push(ap);
                kept.push(r.expect("scored result"));
            }
            None => skipped += 1,
        }
    }
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    Ok(RetrievalMetrics {
        map,
        rank1: cmc_rank_k(&kept, 1)?,
        rank5: cmc_rank_k(&kept, 5)?,
        num_queries: kept.len(),
        num_skipped: skipped,
    })
}

/// Embeds queries and gallery with `model` and scores retrieval under
/// `protocol`. Queries run in parallel; the result does not depend on it.
pub fn evaluate_retrieval(model: &ModelParams, dataset: &Dataset, metric: Metric, protocol: Protocol) -> Result<RetrievalMetrics> {
    let queries: Vec<&Sample> = dataset
        .split(Split::Query)
        .filter(|q| match protocol {
            Protocol::Standard => true,
            Protocol::CrossView(mode) => q.mode == mode,
        })
        .collect();
    let gallery: Vec<&Sample> = dataset.split(Split::Gallery).collect();
    if gallery.is_empty() || queries.is_empty() {
        return summarize(queries.iter().map(|_| None).collect());
    }
    let embed = |set: &[&Sample]| -> Result<Tensor> {
        let rows: Vec<&[f64]> = set.iter().map(|s| s.features.as_slice()).collect();
        model.embed_rows(&Tensor::from_rows(&rows)?)
    };
    let q_emb = embed(&queries)?;
    let g_emb = embed(&gallery)?;
    let g_ids: Vec<usize> = gallery.iter().map(|g| g.id).collect();
    let results = parallel::try_map(queries.len(), |i| {
        let q = queries[i];
        let relevant: Vec<bool> = gallery.iter().map(|g| g.label == q.label).collect();
        let excluded: Vec<bool> = gallery
            .iter()
            .map(|g| match protocol {
                Protocol::Standard => g.label == q.label && g.mode == q.mode,
                Protocol::CrossView(_) => !cross_view_eligible(q, g),
            })
            .collect();
        rank_gallery(q.id, q_emb.row(i), &g_emb, &g_ids, &relevant, &excluded, metric)
    })?;
    summarize(results)
}

/// Classification accuracy of `model` on one split.
pub fn split_accuracy(model: &ModelParams, dataset: &Dataset, split: Split) -> Result<f64> {
    let samples: Vec<&Sample> = dataset.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Empty("accuracy split"));
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let emb = model.embed_rows(&Tensor::from_rows(&rows)?)?;
    let mut logits = Vec::with_capacity(samples.len() * model.dims().num_identities);
    for r in 0..emb.rows() {
        logits.extend(model.classify(emb.row(r))?);
    }
    let logits = Tensor::matrix(samples.len(), model.dims().num_identities, logits)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy(&logits, &labels)
}
