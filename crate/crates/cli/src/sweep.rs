//! Training-set size and bag-size sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use capmil::datagen::GenConfig;
use capmil::eval::METRICS_HEADER;
use capmil::models::ModelConfig;
use capmil::{Error, Result};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SweepAxis, SweepValue};
use crate::run::{load_data, run_rounds, write, RoundResult};

/// Generator settings for one sweep point. Bag-size points widen `bag_max`
/// to at least five standard deviations above the mean so the upper clip
/// stays out of the way.
pub fn gen_at(base: &GenConfig, value: SweepValue) -> GenConfig {
    match value {
        SweepValue::TrainSize(n) => GenConfig {
            n_train: n,
            ..base.clone()
        },
        SweepValue::BagSize(mean, var) => GenConfig {
            bag_mean: mean,
            bag_var: var,
            bag_max: base.bag_max.max((mean + 5.0 * var.sqrt()).ceil() as usize),
            ..base.clone()
        },
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: SweepValue,
    pub model: ModelConfig,
    pub result: RoundResult,
}

pub const SWEEP_PREFIX: &str = "axis,value,variant,round,seed,best_epoch,best_val_acc";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_PREFIX},{METRICS_HEADER}\n");
    for r in rows {
        let res = &r.result;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.model.variant,
            res.round,
            res.seed,
            res.best_epoch,
            res.best_val_acc,
            res.report.csv_row()
        );
    }
    s
}

/// Every variant, every round, at every point on `axis`. Writes `sweep.csv`.
///
/// Models use the configured heads and flags with the variant swapped in;
/// without a configured model, each variant runs with all components on.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, out: &Path) -> Result<Vec<SweepRow>> {
    if cfg.dataset.is_some() {
        return Err(Error::Config(
            "sweeps regenerate data and cannot use a fixed dataset".into(),
        ));
    }
    let values = cfg.sweep.values_for(axis)?;
    let template = cfg
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::new(cfg.sweep.variants[0], cfg.gen.channels, 2));
    let mut rows = Vec::new();
    for value in values {
        let point = ExperimentConfig {
            gen: gen_at(&cfg.gen, value),
            ..cfg.clone()
        };
        point.gen.validate()?;
        let data = load_data(&point)?;
        let per_variant: Vec<Vec<SweepRow>> = cfg
            .sweep
            .variants
            .par_iter()
            .map(|&v| {
                let model = ModelConfig {
                    variant: v,
                    ..template.clone()
                };
                model.validate()?;
                Ok(run_rounds(&point, &model, &data)?
                    .into_iter()
                    .map(|t| SweepRow {
                        axis,
                        value,
                        model: t.model,
                        result: t.result,
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        rows.extend(per_variant.into_iter().flatten());
    }
    fs::create_dir_all(out)?;
    write(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    Ok(rows)
}
