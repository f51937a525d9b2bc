//! MSE, Precision@K and NDCG@K, and the end-to-end evaluation of a predictor
//! on the test side of a split.
//!
//! Ranking metrics use binary relevance (test rating >= threshold) and the
//! `1 / log2(position + 1)` discount. Users with no relevant test item have
//! an undefined ideal DCG and are skipped rather than scored as zero; the
//! report carries how many were skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{FeatureSet, InteractionSet, SplitPlan};
use crate::error::{Error, Result};
use crate::model::Predictor;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 4.0;

pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::dim("mse inputs", predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyData("mse of zero samples".into()));
    }
    let sum: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / predictions.len() as f64)
}

/// One user's candidates, best first: score descending, ties by ascending
/// item index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<(usize, f64)>,
}

pub fn rank_items(user: usize, scores: &[(usize, f64)], k: usize) -> RankedList {
    let mut items = scores.to_vec();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    items.truncate(k);
    RankedList { user, items }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceJudgments {
    pub threshold: f64,
    pub relevant: BTreeMap<usize, BTreeSet<usize>>,
}

impl RelevanceJudgments {
    fn for_user(&self, user: usize) -> Option<&BTreeSet<usize>> {
        self.relevant.get(&user).filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
}

fn mean_over_users<F>(ranked: &[RankedList], judged: &RelevanceJudgments, k: usize, per_user: F) -> Result<MetricValue>
where
    F: Fn(&RankedList, &BTreeSet<usize>) -> f64,
{
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let (mut sum, mut n_scored, mut n_skipped) = (0.0, 0, 0);
    for list in ranked {
        match judged.for_user(list.user) {
            Some(rel) => {
                sum += per_user(list, rel);
                n_scored += 1;
            }
            None => n_skipped += 1,
        }
    }
    if n_scored == 0 {
        return Err(Error::NoScoredUsers);
    }
    Ok(MetricValue {
        value: sum / n_scored as f64,
        n_scored,
        n_skipped,
    })
}

pub fn precision_at_k(ranked: &[RankedList], judged: &RelevanceJudgments, k: usize) -> Result<MetricValue> {
    mean_over_users(ranked, judged, k, |list, rel| {
        let hits = list.items.iter().take(k).filter(|(i, _)| rel.contains(i)).count();
        hits as f64 / k as f64
    })
}

fn discount(position: usize) -> f64 {
    1.0 / ((position + 1) as f64).log2()
}

pub fn ndcg_at_k(ranked: &[RankedList], judged: &RelevanceJudgments, k: usize) -> Result<MetricValue> {
    mean_over_users(ranked, judged, k, |list, rel| {
        let dcg: f64 = list
            .items
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, (i, _))| rel.contains(i))
            .map(|(p, _)| discount(p + 1))
            .sum();
        let idcg: f64 = (1..=rel.len().min(k)).map(discount).sum();
        dcg / idcg
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidatePool {
    /// Each user's own test items.
    TestItems,
    /// Every item in the dataset except the user's training items.
    FullCatalog,
}

impl fmt::Display for CandidatePool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidatePool::TestItems => "test_items",
            CandidatePool::FullCatalog => "full_catalog",
        })
    }
}

impl FromStr for CandidatePool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_items" => Ok(CandidatePool::TestItems),
            "full_catalog" => Ok(CandidatePool::FullCatalog),
            other => Err(Error::InvalidArgument(format!("unknown candidate pool {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub relevance_threshold: f64,
    pub candidates: CandidatePool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: DEFAULT_K,
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            candidates: CandidatePool::TestItems,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub precision_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub n_test_records: usize,
    pub n_users_scored: usize,
    pub n_users_skipped: usize,
    pub relevance_threshold: f64,
    pub candidates: String,
    pub split_fingerprint: String,
}

const REPORT_KEYS: [&str; 10] = [
    "mse",
    "precision_at_k",
    "ndcg_at_k",
    "k",
    "n_test_records",
    "n_users_scored",
    "n_users_skipped",
    "relevance_threshold",
    "candidates",
    "split_fingerprint",
];

impl EvalReport {
    /// Flat `key=value` document, one key per line in a fixed order.
    pub fn to_kv(&self) -> String {
        let values = [
            self.mse.to_string(),
            self.precision_at_k.to_string(),
            self.ndcg_at_k.to_string(),
            self.k.to_string(),
            self.n_test_records.to_string(),
            self.n_users_scored.to_string(),
            self.n_users_skipped.to_string(),
            self.relevance_threshold.to_string(),
            self.candidates.clone(),
            self.split_fingerprint.clone(),
        ];
        REPORT_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Report(format!("line {}: expected key=value", i + 1)))?;
            if map.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(Error::Report(format!("duplicate key {k:?}")));
            }
        }
        fn field<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            map.get(key)
                .ok_or_else(|| Error::Report(format!("missing key {key:?}")))?
                .parse()
                .map_err(|_| Error::Report(format!("bad value for {key:?}")))
        }
        Ok(EvalReport {
            mse: field(&map, "mse")?,
            precision_at_k: field(&map, "precision_at_k")?,
            ndcg_at_k: field(&map, "ndcg_at_k")?,
            k: field(&map, "k")?,
            n_test_records: field(&map, "n_test_records")?,
            n_users_scored: field(&map, "n_users_scored")?,
            n_users_skipped: field(&map, "n_users_skipped")?,
            relevance_threshold: field(&map, "relevance_threshold")?,
            candidates: field(&map, "candidates")?,
            split_fingerprint: field(&map, "split_fingerprint")?,
        })
    }

    /// Metric-wise arithmetic mean; counts are summed.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::EmptyData("no reports to average".into()))?;
        let n = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            mse: avg(|r| r.mse),
            precision_at_k: avg(|r| r.precision_at_k),
            ndcg_at_k: avg(|r| r.ndcg_at_k),
            k: first.k,
            n_test_records: reports.iter().map(|r| r.n_test_records).sum(),
            n_users_scored: reports.iter().map(|r| r.n_users_scored).sum(),
            n_users_skipped: reports.iter().map(|r| r.n_users_skipped).sum(),
            relevance_threshold: first.relevance_threshold,
            candidates: first.candidates.clone(),
            split_fingerprint: reports
                .iter()
                .map(|r| r.split_fingerprint.as_str())
                .collect::<Vec<_>>()
                .join("+"),
        })
    }
}

/// Evaluates on `split.test`.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &InteractionSet,
    split: &SplitPlan,
    features: &FeatureSet,
    options: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_records(predictor, data, &split.test, &split.train, &split.fingerprint(), features, options)
}

/// Evaluates on an explicit subset of test records. `train` is only
/// consulted for full-catalog ranking, to exclude already-rated items.
pub fn evaluate_records(
    predictor: &dyn Predictor,
    data: &InteractionSet,
    test: &[usize],
    train: &[usize],
    fingerprint: &str,
    features: &FeatureSet,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if options.k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if test.is_empty() {
        return Err(Error::EmptyData("test set is empty".into()));
    }
    let records = data.records();
    let predictions = test
        .par_iter()
        .map(|&r| predictor.predict_ids(&records[r].user_id, &records[r].item_id, features))
        .collect::<Result<Vec<f64>>>()?;
    let targets: Vec<f64> = test.iter().map(|&r| records[r].rating).collect();
    let mse = mse(&predictions, &targets)?;

    let mut per_user: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    let mut relevant: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&r, &score) in test.iter().zip(&predictions) {
        let rec = &records[r];
        per_user.entry(rec.user).or_default().push((rec.item, score));
        if rec.rating >= options.relevance_threshold {
            relevant.entry(rec.user).or_default().insert(rec.item);
        }
    }

    let ranked: Vec<RankedList> = match options.candidates {
        CandidatePool::TestItems => per_user
            .iter()
            .map(|(&u, scores)| rank_items(u, scores, options.k))
            .collect(),
        CandidatePool::FullCatalog => {
            let mut rated: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            for &r in train {
                rated.entry(records[r].user).or_default().insert(records[r].item);
            }
            let users: Vec<usize> = per_user.keys().copied().collect();
            users
                .par_iter()
                .map(|&u| {
                    let seen = rated.get(&u);
                    let user_id = data.users().id(u);
                    let scores = (0..data.items().len())
                        .filter(|i| seen.is_none_or(|s| !s.contains(i)))
                        .map(|i| Ok((i, predictor.predict_ids(user_id, data.items().id(i), features)?)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(rank_items(u, &scores, options.k))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let judged = RelevanceJudgments {
        threshold: options.relevance_threshold,
        relevant,
    };
    let precision = precision_at_k(&ranked, &judged, options.k)?;
    let ndcg = ndcg_at_k(&ranked, &judged, options.k)?;
    Ok(EvalReport {
        mse,
        precision_at_k: precision.value,
        ndcg_at_k: ndcg.value,
        k: options.k,
        n_test_records: test.len(),
        n_users_scored: precision.n_scored,
        n_users_skipped: precision.n_skipped,
        relevance_threshold: options.relevance_threshold,
        candidates: options.candidates.to_string(),
        split_fingerprint: fingerprint.to_owned(),
    })
}

/// Aligned `Model | MSE | Precision@K | NDCG` table, metrics to 4 decimals.
pub fn format_text_table<'a, I>(rows: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a EvalReport)>,
{
    let header = ["Model", "MSE", "Precision@K", "NDCG"];
    let mut cells: Vec<[String; 4]> = vec![header.map(String::from)];
    for (name, r) in rows {
        cells.push([
            name.to_owned(),
            format!("{:.4}", r.mse),
            format!("{:.4}", r.precision_at_k),
            format!("{:.4}", r.ndcg_at_k),
        ]);
    }
    let widths: Vec<usize> = (0..4).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap()).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
    }
    out
}
