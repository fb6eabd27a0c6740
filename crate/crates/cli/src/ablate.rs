//! The component ladder: from the baseline, add one CAP component per rung
//! and report each rung's change against the rung before it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use capmil::models::{LayerNormPlacement, ModelConfig, Variant};
use capmil::{Error, Result};
use rayon::prelude::*;

use crate::config::{flag_columns, ExperimentConfig};
use crate::run::{load_data, run_rounds, write, RoundResult};
use crate::stats::{field, mean_stderr};

#[derive(Clone, Debug, PartialEq)]
pub struct Rung {
    pub attention: Variant,
    pub index: usize,
    pub component: &'static str,
    /// Rung this one is compared against.
    pub previous: Option<usize>,
    pub model: ModelConfig,
}

/// Rungs 0..=4 (baseline, attention, multihead, sce, pre_ln) plus rung 5,
/// which swaps pre-LN for post-LN on top of rung 3. Each rung differs from
/// its `previous` in exactly one flag column.
pub fn ladder(attention: Variant, channels: usize, heads: usize) -> Result<Vec<Rung>> {
    if !attention.is_cap() {
        return Err(Error::Config(format!("{attention} has no CAP components")));
    }
    let bare = |variant| ModelConfig {
        multihead: false,
        sce: false,
        layernorm: LayerNormPlacement::None,
        ..ModelConfig::new(variant, channels, heads)
    };
    let rung = |index, component, previous, model| Rung {
        attention,
        index,
        component,
        previous,
        model,
    };
    let r1 = bare(attention);
    let r2 = ModelConfig {
        multihead: true,
        ..r1.clone()
    };
    let r3 = ModelConfig {
        sce: true,
        ..r2.clone()
    };
    let r4 = ModelConfig {
        layernorm: LayerNormPlacement::PreAggregation,
        ..r3.clone()
    };
    let r5 = ModelConfig {
        layernorm: LayerNormPlacement::PostAggregation,
        ..r3.clone()
    };
    Ok(vec![
        rung(0, "baseline", None, bare(Variant::Baseline)),
        rung(1, "attention", Some(0), r1),
        rung(2, "multihead", Some(1), r2),
        rung(3, "sce", Some(2), r3),
        rung(4, "pre_ln", Some(3), r4),
        rung(5, "post_ln", Some(3), r5),
    ])
}

const METRICS: [&str; 5] = ["auroc", "accuracy", "macro_f1", "avg_i_auroc", "avg_i_ap"];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub rung: Rung,
    pub rounds: Vec<RoundResult>,
    /// Round means of [`METRICS`], in order.
    pub means: Vec<Option<f64>>,
    pub deltas: Vec<Option<f64>>,
}

fn means(rounds: &[RoundResult]) -> Vec<Option<f64>> {
    METRICS
        .iter()
        .map(|&name| {
            let vals: Vec<f64> = rounds
                .iter()
                .filter_map(|r| r.metrics().into_iter().find(|(n, _)| *n == name)?.1)
                .collect();
            // A metric missing in any round has no comparable mean.
            if vals.len() < rounds.len() {
                return None;
            }
            mean_stderr(&vals).map(|(m, _)| m)
        })
        .collect()
}

pub fn ablation_header() -> String {
    let mut h = String::from(
        "attention,rung,component,previous,attention_fn,multihead,sce,layernorm,rounds",
    );
    for m in METRICS {
        let _ = write!(h, ",{m}");
    }
    for m in METRICS {
        let _ = write!(h, ",delta_{m}");
    }
    h
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = ablation_header();
    s.push('\n');
    for r in rows {
        let [a, mh, sce, ln] = flag_columns(&r.rung.model);
        let _ = write!(
            s,
            "{},{},{},{},{a},{mh},{sce},{ln},{}",
            r.rung.attention,
            r.rung.index,
            r.rung.component,
            r.rung.previous.map_or_else(String::new, |p| p.to_string()),
            r.rounds.len(),
        );
        for v in r.means.iter().chain(&r.deltas) {
            let _ = write!(s, ",{}", field(*v));
        }
        s.push('\n');
    }
    s
}

/// Runs the ladder for every configured attention function on one dataset
/// and writes `ablation.csv`. The baseline rung is trained once and shared.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let heads = cfg.model.as_ref().map_or(2, |m| m.heads);
    let data = load_data(cfg)?;
    let mut rungs = Vec::new();
    for &a in &cfg.ablate_attention {
        rungs.extend(ladder(a, cfg.gen.channels, heads)?);
    }
    let baseline = rungs[0].model.clone();
    let jobs: Vec<&ModelConfig> = std::iter::once(&baseline)
        .chain(rungs.iter().filter(|r| r.index > 0).map(|r| &r.model))
        .collect();
    let results: Vec<Vec<RoundResult>> = jobs
        .par_iter()
        .map(|m| {
            Ok(run_rounds(cfg, m, &data)?
                .into_iter()
                .map(|t| t.result)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut results = results.into_iter();
    let base_rounds = results.next().expect("baseline job");

    let mut rows: Vec<AblationRow> = Vec::new();
    for rung in rungs {
        let rounds = if rung.index == 0 {
            base_rounds.clone()
        } else {
            results.next().expect("one job per rung")
        };
        let means = means(&rounds);
        let deltas = match rung.previous {
            None => vec![None; METRICS.len()],
            Some(p) => {
                let prev = rows
                    .iter()
                    .rev()
                    .find(|r| r.rung.attention == rung.attention && r.rung.index == p)
                    .expect("previous rung precedes");
                means
                    .iter()
                    .zip(&prev.means)
                    .map(|(a, b)| Some((*a)? - (*b)?))
                    .collect()
            }
        };
        rows.push(AblationRow {
            rung,
            rounds,
            means,
            deltas,
        });
    }
    fs::create_dir_all(out)?;
    write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_rung_changes_one_flag() {
        for a in [Variant::CapVema, Variant::CapDba] {
            let rungs = ladder(a, 8, 2).unwrap();
            assert_eq!(rungs.len(), 6);
            for r in &rungs[1..] {
                let prev = &rungs[r.previous.unwrap()];
                let (x, y) = (flag_columns(&r.model), flag_columns(&prev.model));
                let changed = x.iter().zip(&y).filter(|(p, q)| p != q).count();
                assert_eq!(changed, 1, "{a} rung {}", r.index);
            }
        }
        assert!(ladder(Variant::Gabmil, 8, 2).is_err());
    }
}
