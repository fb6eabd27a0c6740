//! `gen`, `train` and `eval`, plus the round runner the other commands share.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use capmil::datagen::{bag_stats, load_jsonl, make_splits, write_jsonl, BagStats, Exemplar};
use capmil::eval::{attention_jsonl, evaluate, MetricsReport, METRICS_HEADER};
use capmil::kvconfig::render;
use capmil::models::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use capmil::train::{history_csv, train, TrainOutcome};
use capmil::{Error, Result};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SPLIT_FILES};
use crate::stats::{field, mean_stderr};

pub struct Dataset {
    pub train: Vec<Exemplar>,
    pub validation: Vec<Exemplar>,
    pub test: Vec<Exemplar>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[Exemplar]); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    pub fn channels(&self) -> Option<usize> {
        self.train.first().map(Exemplar::channels)
    }
}

/// Reads the configured dataset directory or generates the splits.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(dir) => {
            let [tr, va, te] = SPLIT_FILES.map(|f| load_jsonl(&dir.join(f)));
            Ok(Dataset {
                train: tr?,
                validation: va?,
                test: te?,
            })
        }
        None => {
            let s = make_splits(&cfg.gen)?;
            Ok(Dataset {
                train: s.train,
                validation: s.validation,
                test: s.test,
            })
        }
    }
}

fn check_channels(model: &ModelConfig, data: &Dataset) -> Result<()> {
    match data.channels() {
        Some(c) if c != model.channels => Err(Error::Config(format!(
            "model expects {} channels but the data has {c}",
            model.channels
        ))),
        _ => Ok(()),
    }
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn stats_pairs(split: &str, s: &BagStats) -> Vec<(String, String)> {
    let mut v = vec![
        (format!("{split}.count"), s.count.to_string()),
        (format!("{split}.mean_bag"), s.mean_bag.to_string()),
        (format!("{split}.median_bag"), s.median_bag.to_string()),
        (format!("{split}.min_bag"), s.min_bag.to_string()),
        (format!("{split}.max_bag"), s.max_bag.to_string()),
        (
            format!("{split}.positive_rate"),
            s.positive_rate.to_string(),
        ),
    ];
    if let Some(k) = s.mean_keys {
        v.push((format!("{split}.mean_keys"), k.to_string()));
    }
    v
}

/// Writes the three JSONL splits and `manifest.txt` (generator settings and
/// per-split bag statistics).
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(String, BagStats)>> {
    let data = load_data(cfg)?;
    fs::create_dir_all(out)?;
    let mut manifest: Vec<(String, String)> = cfg
        .gen
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let mut stats = Vec::new();
    for ((name, part), file) in data.splits().into_iter().zip(SPLIT_FILES) {
        write_jsonl(&out.join(file), part)?;
        let s = bag_stats(part);
        manifest.extend(stats_pairs(name, &s));
        stats.push((name.to_string(), s));
    }
    write(&out.join("manifest.txt"), &render(manifest))?;
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct RoundResult {
    pub round: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub report: MetricsReport,
}

impl RoundResult {
    /// Scalar metrics in summary order; `None` where undefined.
    pub fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        let c = &self.report.classification;
        let e = self.report.explanation.as_ref();
        vec![
            ("auroc", Some(c.auroc)),
            ("accuracy", Some(c.accuracy)),
            ("macro_precision", Some(c.macro_precision)),
            ("macro_recall", Some(c.macro_recall)),
            ("macro_f1", Some(c.macro_f1)),
            ("avg_i_auroc", e.map(|e| e.avg_i_auroc)),
            ("avg_i_ap", e.map(|e| e.avg_i_ap)),
            ("avg_i_ap_tie_grouped", e.map(|e| e.avg_i_ap_tie_grouped)),
            ("mean_attention_entropy", self.report.mean_attention_entropy),
            ("best_val_acc", Some(self.best_val_acc)),
        ]
    }
}

pub struct TrainedRound {
    pub result: RoundResult,
    pub model: ModelConfig,
    pub outcome: TrainOutcome,
}

/// Trains and tests `rounds` independent models in parallel. Round `r`
/// depends only on the data, `model` and the seeds derived from `r`.
pub fn run_rounds(
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    data: &Dataset,
) -> Result<Vec<TrainedRound>> {
    check_channels(model, data)?;
    (0..cfg.rounds)
        .into_par_iter()
        .map(|r| {
            let (m, t) = cfg.round(model, r);
            let params = ModelParams::init(&m)?;
            let outcome = train(&m, params, &data.train, &data.validation, &t)?;
            let (report, _) = evaluate(&m, &outcome.params, &data.test)?;
            Ok(TrainedRound {
                result: RoundResult {
                    round: r,
                    seed: m.seed,
                    best_epoch: outcome.best_epoch,
                    best_val_acc: outcome.best_val_acc,
                    report,
                },
                model: m,
                outcome,
            })
        })
        .collect()
}

pub const ROUNDS_PREFIX: &str = "round,seed,best_epoch,best_val_acc";

pub fn rounds_csv(results: &[RoundResult]) -> String {
    let mut s = format!("{ROUNDS_PREFIX},{METRICS_HEADER}\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.round,
            r.seed,
            r.best_epoch,
            r.best_val_acc,
            r.report.csv_row()
        );
    }
    s
}

pub const SUMMARY_HEADER: &str = "metric,mean,stderr,rounds";

/// Mean and standard error of every metric across rounds. A metric that is
/// undefined in some round is averaged over the rounds where it exists.
pub fn summary_csv(results: &[RoundResult]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    let Some(first) = results.first() else {
        return s;
    };
    for (i, (name, _)) in first.metrics().into_iter().enumerate() {
        let vals: Vec<f64> = results.iter().filter_map(|r| r.metrics()[i].1).collect();
        let (m, se) = mean_stderr(&vals).map_or((None, None), |(m, se)| (Some(m), se));
        let _ = writeln!(s, "{name},{},{},{}", field(m), field(se), vals.len());
    }
    s
}

/// Trains every round, writing `round{r}/model.ckpt`, `round{r}/history.csv`,
/// `rounds.csv`, `summary.csv` and `manifest.txt` under `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RoundResult>> {
    let model = cfg.model()?;
    let data = load_data(cfg)?;
    fs::create_dir_all(out)?;
    let rounds = run_rounds(cfg, model, &data)?;
    for t in &rounds {
        let dir = out.join(format!("round{}", t.result.round));
        fs::create_dir_all(&dir)?;
        save_checkpoint(&dir.join("model.ckpt"), &t.model, &t.outcome.params)?;
        write(&dir.join("history.csv"), &history_csv(&t.outcome.history))?;
    }
    let results: Vec<RoundResult> = rounds.into_iter().map(|t| t.result).collect();
    let mut manifest = cfg.to_pairs();
    manifest.push((
        "round_seeds".into(),
        results
            .iter()
            .map(|r| r.seed.to_string())
            .collect::<Vec<_>>()
            .join(","),
    ));
    write(&out.join("manifest.txt"), &render(manifest))?;
    write(&out.join("rounds.csv"), &rounds_csv(&results))?;
    write(&out.join("summary.csv"), &summary_csv(&results))?;
    Ok(results)
}

/// Scores the configured test split with a saved checkpoint, writing
/// `metrics.csv` and `attention.jsonl`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    let (model, params) = load_checkpoint(checkpoint)?;
    let data = load_data(cfg)?;
    check_channels(&model, &data)?;
    let (report, preds) = evaluate(&model, &params, &data.test)?;
    fs::create_dir_all(out)?;
    write(
        &out.join("metrics.csv"),
        &format!("{METRICS_HEADER}\n{}\n", report.csv_row()),
    )?;
    write(
        &out.join("attention.jsonl"),
        &attention_jsonl(&preds, &data.test),
    )?;
    Ok(report)
}
