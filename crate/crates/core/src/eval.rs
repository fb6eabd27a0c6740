//! Classification metrics, instance-level explanation metrics, attention
//! entropy and a permutation-invariance harness.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::AttentionScores;
use crate::datagen::Exemplar;
use crate::error::{Error, Result};
use crate::models::{forward, ModelConfig, ModelParams, Prediction};
use crate::numcore::Tensor;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("metric scores"));
    }
    Ok(())
}

/// Indices sorted by descending score; equal scores keep input order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative labels".into(),
        ));
    }
    // Walk ascending groups of tied scores, counting negatives seen below.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0usize, 0usize);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Mean, over positives in descending-score order, of the precision at each
/// positive's rank. Equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AP needs a positive label".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// AP with tied scores treated as one threshold step:
/// `Σ_k (R_k − R_{k−1})·P_k` over distinct score levels. Agrees with
/// [`average_precision`] when no tie straddles a positive and a negative.
pub fn average_precision_tie_grouped(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AP needs a positive label".into()));
    }
    let idx = descending_order(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut total = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut group_tp = 0;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            group_tp += labels[idx[j]] as usize;
            j += 1;
        }
        tp += group_tp;
        seen += j - i;
        total += group_tp as f64 / pos as f64 * (tp as f64 / seen as f64);
        i = j;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub auroc: f64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-averaged precision/recall/F1 with `prob ≥ threshold`
/// read as positive, plus threshold-free AUROC. A class that is never
/// predicted contributes precision 0.
pub fn classification_report(
    probs: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ClassificationReport> {
    check_inputs(probs, labels)?;
    let auroc = roc_auc(probs, labels)?;
    let mut cm = [[0usize; 2]; 2]; // [actual][predicted]
    for (&p, &l) in probs.iter().zip(labels) {
        cm[l as usize][(p >= threshold) as usize] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut prec = [0.0; 2];
    let mut rec = [0.0; 2];
    let mut f1 = [0.0; 2];
    for k in 0..2 {
        prec[k] = ratio(cm[k][k], cm[0][k] + cm[1][k]);
        rec[k] = ratio(cm[k][k], cm[k][0] + cm[k][1]);
        f1[k] = if prec[k] + rec[k] == 0.0 {
            0.0
        } else {
            2.0 * prec[k] * rec[k] / (prec[k] + rec[k])
        };
    }
    Ok(ClassificationReport {
        auroc,
        accuracy: (cm[0][0] + cm[1][1]) as f64 / labels.len() as f64,
        macro_precision: (prec[0] + prec[1]) / 2.0,
        macro_recall: (rec[0] + rec[1]) / 2.0,
        macro_f1: (f1[0] + f1[1]) / 2.0,
    })
}

/// Instance-level metrics of one bag: `(i-AUROC, i-AP, tie-grouped i-AP)`.
/// `None` unless there is at least one key and one non-key.
pub fn instance_metrics(scores: &[f64], keys: &[bool]) -> Result<Option<(f64, f64, f64)>> {
    let k = keys.iter().filter(|&&k| k).count();
    if k == 0 || k == keys.len() {
        return Ok(None);
    }
    Ok(Some((
        roc_auc(scores, keys)?,
        average_precision(scores, keys)?,
        average_precision_tie_grouped(scores, keys)?,
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplanationReport {
    pub avg_i_auroc: f64,
    pub avg_i_ap: f64,
    pub avg_i_ap_tie_grouped: f64,
    pub n_scored: usize,
}

/// Averages instance metrics over positive exemplars with known,
/// non-degenerate keys. Scores are head-averaged.
pub fn explanation_from_scores<'a, I>(items: I) -> Result<ExplanationReport>
where
    I: IntoIterator<Item = (&'a AttentionScores, &'a Exemplar)>,
{
    let (mut auc, mut ap, mut ap_t, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (scores, ex) in items {
        let Some(keys) = ex.key_mask.as_ref().filter(|_| ex.label) else {
            continue;
        };
        let valid = scores.valid_head_mean();
        if let Some((a, p, t)) = instance_metrics(&valid, keys)? {
            auc += a;
            ap += p;
            ap_t += t;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "no positive exemplar with both key and non-key instances".into(),
        ));
    }
    let n_f = n as f64;
    Ok(ExplanationReport {
        avg_i_auroc: auc / n_f,
        avg_i_ap: ap / n_f,
        avg_i_ap_tie_grouped: ap_t / n_f,
        n_scored: n,
    })
}

/// Runs the model on `test` and reports explanation quality.
pub fn explanation_report(
    cfg: &ModelConfig,
    params: &ModelParams,
    test: &[Exemplar],
) -> Result<ExplanationReport> {
    if !cfg.variant.exports_scores() {
        return Err(Error::Contract(format!(
            "variant {} exports no attention scores",
            cfg.variant
        )));
    }
    let preds = predict_all(cfg, params, test)?;
    explanation_from_predictions(&preds, test)
}

fn explanation_from_predictions(
    preds: &[Prediction],
    test: &[Exemplar],
) -> Result<ExplanationReport> {
    let mut items = Vec::with_capacity(test.len());
    for (p, ex) in preds.iter().zip(test) {
        let s = p
            .scores
            .as_ref()
            .ok_or_else(|| Error::Contract("prediction carries no scores".into()))?;
        items.push((s, ex));
    }
    explanation_from_scores(items)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyReport {
    pub per_head: Vec<f64>,
    /// Mean of the per-head entropies.
    pub mean: f64,
}

/// `H = −Σ a ln a` (nats) over valid positions with `0·ln 0 = 0`.
pub fn entropy(weights: &[f64]) -> f64 {
    0.0 - weights
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}

pub fn attention_entropy(scores: &AttentionScores) -> EntropyReport {
    let per_head: Vec<f64> = (0..scores.heads())
        .map(|h| {
            let row: Vec<f64> = scores
                .per_head
                .row_slice(h)
                .iter()
                .zip(&scores.mask)
                .filter(|(_, &m)| m)
                .map(|(&a, _)| a)
                .collect();
            entropy(&row)
        })
        .collect();
    let mean = per_head.iter().sum::<f64>() / per_head.len().max(1) as f64;
    EntropyReport { per_head, mean }
}

/// Largest `|Δf|` over `trials` random reorderings of the bag.
pub fn permutation_invariance_check<F, R>(
    f: F,
    exemplar: &Exemplar,
    trials: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&Exemplar) -> Result<f64>,
    R: Rng,
{
    let base = f(exemplar)?;
    let n = exemplar.bag_size();
    let mut worst: f64 = 0.0;
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..trials {
        perm.shuffle(rng);
        let rows: Vec<&[f64]> = perm.iter().map(|&i| exemplar.target.row_slice(i)).collect();
        let shuffled = Exemplar {
            id: exemplar.id.clone(),
            query: exemplar.query.clone(),
            target: Tensor::from_rows(&rows)?,
            label: exemplar.label,
            key_mask: exemplar
                .key_mask
                .as_ref()
                .map(|m| perm.iter().map(|&i| m[i]).collect()),
        };
        worst = worst.max((f(&shuffled)? - base).abs());
    }
    Ok(worst)
}

/// [`permutation_invariance_check`] on a model's output probability.
pub fn model_permutation_check<R: Rng>(
    cfg: &ModelConfig,
    params: &ModelParams,
    exemplar: &Exemplar,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    permutation_invariance_check(
        |e| forward(cfg, params, &e.view()).map(|p| p.prob),
        exemplar,
        trials,
        rng,
    )
}

/// Predictions on every exemplar, computed in parallel, returned in input order.
pub fn predict_all(
    cfg: &ModelConfig,
    params: &ModelParams,
    exemplars: &[Exemplar],
) -> Result<Vec<Prediction>> {
    exemplars
        .par_iter()
        .map(|e| forward(cfg, params, &e.view()))
        .collect()
}

/// Fraction of exemplars classified correctly at probability 0.5.
pub fn accuracy_of(cfg: &ModelConfig, params: &ModelParams, exemplars: &[Exemplar]) -> Result<f64> {
    if exemplars.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let preds = predict_all(cfg, params, exemplars)?;
    let correct = preds
        .iter()
        .zip(exemplars)
        .filter(|(p, e)| (p.prob >= 0.5) == e.label)
        .count();
    Ok(correct as f64 / exemplars.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classification: ClassificationReport,
    /// Absent for variants without attention scores.
    pub explanation: Option<ExplanationReport>,
    /// Mean over test exemplars of the head-averaged attention entropy.
    pub mean_attention_entropy: Option<f64>,
    pub n_test: usize,
}

pub const METRICS_HEADER: &str = "auroc,accuracy,macro_precision,macro_recall,macro_f1,\
avg_i_auroc,avg_i_ap,avg_i_ap_tie_grouped,n_scored_exemplars,mean_attention_entropy,n_test";

impl MetricsReport {
    /// One CSV row matching [`METRICS_HEADER`]; unavailable fields are empty.
    pub fn csv_row(&self) -> String {
        let c = &self.classification;
        let mut s = format!(
            "{},{},{},{},{},",
            c.auroc, c.accuracy, c.macro_precision, c.macro_recall, c.macro_f1
        );
        match &self.explanation {
            Some(e) => {
                let _ = write!(
                    s,
                    "{},{},{},{},",
                    e.avg_i_auroc, e.avg_i_ap, e.avg_i_ap_tie_grouped, e.n_scored
                );
            }
            None => s.push_str(",,,,"),
        }
        if let Some(h) = self.mean_attention_entropy {
            let _ = write!(s, "{h}");
        }
        let _ = write!(s, ",{}", self.n_test);
        s
    }
}

/// Test-set metrics plus the raw predictions they came from.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams,
    test: &[Exemplar],
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds = predict_all(cfg, params, test)?;
    let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let labels: Vec<bool> = test.iter().map(|e| e.label).collect();
    let classification = classification_report(&probs, &labels, 0.5)?;
    let (explanation, mean_attention_entropy) = if cfg.variant.exports_scores() {
        let expl = match explanation_from_predictions(&preds, test) {
            Ok(r) => Some(r),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let h = preds
            .iter()
            .filter_map(|p| p.scores.as_ref())
            .map(|s| attention_entropy(s).mean)
            .sum::<f64>()
            / preds.len() as f64;
        (expl, Some(h))
    } else {
        (None, None)
    };
    Ok((
        MetricsReport {
            classification,
            explanation,
            mean_attention_entropy,
            n_test: test.len(),
        },
        preds,
    ))
}

#[derive(Serialize)]
struct AttentionRecord<'a> {
    id: &'a str,
    scores_per_head: Vec<Vec<f64>>,
    keys: Option<Vec<usize>>,
}

/// One JSON line per exemplar with per-head attention over its bag.
/// Exemplars without scores are skipped.
pub fn attention_jsonl(preds: &[Prediction], exemplars: &[Exemplar]) -> String {
    let mut out = String::new();
    for (p, e) in preds.iter().zip(exemplars) {
        let Some(s) = &p.scores else { continue };
        let rec = AttentionRecord {
            id: &e.id,
            scores_per_head: (0..s.heads())
                .map(|h| s.per_head.row_slice(h).to_vec())
                .collect(),
            keys: e.key_mask.as_ref().map(|m| {
                m.iter()
                    .enumerate()
                    .filter(|(_, &k)| k)
                    .map(|(i, _)| i)
                    .collect()
            }),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    out
}
