//! One training run on a synthetic task, with logs and a checkpoint.

use std::path::Path;

use hot_model::layer::HotModel;
use hot_model::training::{evaluate, gen_synthetic, linear_readout_mse, metric, train};

use crate::commands::Output;
use crate::config::RunConfig;
use crate::report::{Assertion, Cell, Table};
use crate::CliError;

/// Also writes `checkpoint/` under `out` when given and enabled.
pub fn run(cfg: &RunConfig, out: Option<&Path>) -> Result<Output, CliError> {
    let (tables, asserts, model) = run_model(cfg)?;
    if let Some(dir) = out {
        if cfg.train.as_ref().is_none_or(|t| t.checkpoint) {
            model.save(dir.join("checkpoint"))?;
        }
    }
    Ok((tables, asserts))
}

/// Runs training and returns the trained model alongside the report parts.
pub fn run_model(cfg: &RunConfig) -> Result<(Vec<Table>, Vec<Assertion>, HotModel), CliError> {
    let t = cfg.train.clone().unwrap_or_default();
    let mut spec = t.task.clone();
    spec.seed = spec.seed.wrapping_add(cfg.seed);
    let data = gen_synthetic(&spec)?;
    let mut model_cfg = t.model_config();
    model_cfg.init_seed = model_cfg.init_seed.wrapping_add(cfg.seed);
    let mut model = HotModel::new(model_cfg)?;
    let mut tc = t.train;
    tc.seed = tc.seed.wrapping_add(cfg.seed);
    let report = train(&mut model, &data, &tc)?;

    let columns = report.metric_columns();
    let mut header = vec!["step", "loss"];
    header.extend(columns.iter().map(String::as_str));
    header.push("wall_seconds");
    let mut log = Table::new("train_log", &header).timing(&["wall_seconds"]);
    for row in &report.rows {
        let mut cells: Vec<Cell> = vec![row.step.into(), row.loss.into()];
        for c in &columns {
            cells.push(match metric(&row.metrics, c) {
                Some(v) => v.into(),
                None => "".into(),
            });
        }
        cells.push(row.wall_seconds.into());
        log.push(cells);
    }

    let mut selection = Table::new("selection", &["rule", "step", "val_mae", "val_mse"]);
    for (rule, sel) in [("val-mae", &report.best_by_mae), ("val-mse", &report.best_by_mse)] {
        if let Some(s) = sel {
            selection.push(vec![rule.into(), s.step.into(), s.val_mae.into(), s.val_mse.into()]);
        }
    }

    let mut final_metrics = Table::new("final_metrics", &["split", "metric", "value"]);
    for (split, m) in [("train", &report.final_train), ("val", &report.final_val)] {
        for (k, v) in m {
            final_metrics.push(vec![split.into(), k.clone().into(), (*v).into()]);
        }
    }

    let loss_key = if data.coefficients.is_some() { "mse" } else { "cross_entropy" };
    let initial = metric(&report.initial_train, loss_key).unwrap_or(f64::NAN);
    let last = metric(&report.final_train, loss_key).unwrap_or(f64::NAN);
    let mut asserts = vec![
        Assertion::holds("finite-loss", report.rows.iter().all(|r| r.loss.is_finite())),
        Assertion::at_most("loss-ratio", last / initial, 1.0 - t.min_decrease),
    ];
    let mut tables = vec![log, selection, final_metrics];
    if data.coefficients.is_some() {
        let (lin_train, lin_val) = linear_readout_mse(&data, t.ridge)?;
        let model_val = metric(&evaluate(&model, &data.val)?, "mse").unwrap_or(f64::NAN);
        let mut baseline = Table::new("baseline", &["model", "train_mse", "val_mse"]);
        baseline.push(vec!["linear-readout".into(), lin_train.into(), lin_val.into()]);
        baseline.push(vec!["hot".into(), last.into(), model_val.into()]);
        tables.push(baseline);
        asserts.push(Assertion::at_most("beats-linear-readout", model_val, lin_val));
    }
    Ok((tables, asserts, model))
}
