//! Synthetic ablation over attention masks, head counts and variants.

use std::time::Instant;

use hot_core::attention::project_last;
use hot_core::{AttentionWeights, DenseTensor};
use hot_model::layer::{block_attention, AttentionVariant, HOTBlockConfig, HotModel};
use hot_model::training::{gen_synthetic, metric, train, TrainConfig};
use rayon::prelude::*;

use crate::commands::equiv::case_rng;
use crate::commands::{mask_name, Output};
use crate::config::{model_for_task, AblateConfig, RunConfig};
use crate::report::{Assertion, Table};
use crate::CliError;

struct Cell {
    variant: AttentionVariant,
    heads: usize,
    mask: Vec<bool>,
}

struct RunResult {
    params: usize,
    initial_train: f64,
    train: f64,
    val: f64,
    val_mae: f64,
}

fn model_config(a: &AblateConfig, cell: &Cell, seed: u64) -> hot_model::ModelConfig {
    let mut m = model_for_task(&a.task.task, a.d_model, cell.heads);
    m.variant = cell.variant;
    m.mode_mask = Some(cell.mask.clone());
    m.feature_map.num_features = a.num_features;
    m.feature_map.seed = seed;
    m.init_seed = seed;
    m
}

fn run_cell(a: &AblateConfig, cell: &Cell, base: u64, s: u64) -> Result<RunResult, CliError> {
    let seed = base.wrapping_add(s);
    let mut spec = a.task.clone();
    spec.seed = spec.seed.wrapping_add(seed);
    let data = gen_synthetic(&spec)?;
    let mut model = HotModel::new(model_config(a, cell, seed))?;
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        adam: a.adam,
        seed,
        eval_every: 0,
    };
    let report = train(&mut model, &data, &tc)?;
    let get = |m: &hot_model::training::Metrics, k: &str| metric(m, k).unwrap_or(f64::NAN);
    let (train_key, val_key) = if data.coefficients.is_some() {
        ("mse", "mse")
    } else {
        ("cross_entropy", "cross_entropy")
    };
    Ok(RunResult {
        params: model.param_count(),
        initial_train: get(&report.initial_train, train_key),
        train: get(&report.final_train, train_key),
        val: get(&report.final_val, val_key),
        val_mae: get(&report.final_val, "mae"),
    })
}

fn is_strict_superset(a: &[bool], b: &[bool]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| x || !y) && a != b
}

/// All-off mask against `Σ_h X W_V W_O`.
fn reference_gap(a: &AblateConfig, heads: usize, variant: AttentionVariant, seed: u64) -> Result<f64, CliError> {
    let model = model_for_task(&a.task.task, a.d_model, heads);
    let dims = model.token_dims()?;
    let mut rng = case_rng(seed, 7 << 40 | heads as u64);
    let w = AttentionWeights::glorot(a.d_model, heads, &mut rng)?;
    let mut xdims = dims.clone();
    xdims.push(a.d_model);
    let x = DenseTensor::random_normal(xdims, &mut rng)?;
    let mut cfg = HOTBlockConfig::new(dims.clone(), a.d_model, heads);
    cfg.variant = variant;
    cfg.mode_mask = vec![false; dims.len()];
    cfg.feature_map.num_features = a.num_features;
    let got = block_attention(&x, &cfg, &w)?;
    let mut expected = DenseTensor::zeros(x.dims().to_vec())?;
    for h in w.heads() {
        expected.add_assign(&project_last(&project_last(&x, &h.w_v)?, &h.w_o)?)?;
    }
    Ok(got.max_abs_diff(&expected).unwrap_or(f64::INFINITY))
}

pub fn run(cfg: &RunConfig) -> Result<Output, CliError> {
    let a = cfg.ablate.clone().unwrap_or_default();
    let start = Instant::now();
    let mut cells = Vec::new();
    for &variant in &a.variants {
        for &heads in &a.heads {
            for mask in &a.masks {
                // full variants attend over every mode at once
                if variant.is_full() && mask.iter().any(|on| !on) {
                    continue;
                }
                cells.push(Cell {
                    variant,
                    heads,
                    mask: mask.clone(),
                });
            }
        }
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..a.seeds as u64).map(move |s| (c, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, s)| run_cell(&a, &cells[c], cfg.seed, s))
        .collect::<Result<Vec<_>, _>>()?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut runs = Table::new(
        "ablate",
        &["variant", "heads", "mask", "seed", "params", "initial_train_loss", "train_loss", "val_loss", "val_mae"],
    );
    let mut summary = Table::new("ablate_cells", &["variant", "heads", "mask", "params", "mean_train_loss", "mean_val_loss"]);
    let mut means = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let mine: Vec<(&(usize, u64), &RunResult)> = jobs.iter().zip(&results).filter(|(j, _)| j.0 == c).collect();
        for ((_, s), r) in &mine {
            runs.push(vec![
                cell.variant.name().into(),
                cell.heads.into(),
                mask_name(&cell.mask).into(),
                cfg.seed.wrapping_add(*s).into(),
                r.params.into(),
                r.initial_train.into(),
                r.train.into(),
                r.val.into(),
                r.val_mae.into(),
            ]);
        }
        let n = mine.len() as f64;
        let mean_train = mine.iter().map(|(_, r)| r.train).sum::<f64>() / n;
        let mean_val = mine.iter().map(|(_, r)| r.val).sum::<f64>() / n;
        summary.push(vec![
            cell.variant.name().into(),
            cell.heads.into(),
            mask_name(&cell.mask).into(),
            mine[0].1.params.into(),
            mean_train.into(),
            mean_val.into(),
        ]);
        means.push(mean_train);
    }

    let mut asserts = Vec::new();
    // more attended modes, lower seed-averaged training loss
    for (i, ci) in cells.iter().enumerate() {
        for (j, cj) in cells.iter().enumerate() {
            if ci.variant == cj.variant && ci.heads == cj.heads && is_strict_superset(&ci.mask, &cj.mask) {
                let name = format!(
                    "ordering/{}/h{}/{}<{}",
                    ci.variant.name(),
                    ci.heads,
                    mask_name(&ci.mask),
                    mask_name(&cj.mask)
                );
                asserts.push(Assertion::holds(name, means[i] < means[j]));
            }
        }
    }
    // parameter counts over the whole variant grid, trained or not
    let mut params = Table::new("ablate_params", &["variant", "heads", "mask", "params"]);
    for &heads in &a.heads {
        let mut counts = Vec::new();
        for variant in AttentionVariant::ALL {
            for mask in &a.masks {
                let cell = Cell {
                    variant,
                    heads,
                    mask: mask.clone(),
                };
                let mut m = model_config(&a, &cell, cfg.seed);
                if variant.is_full() {
                    m.mode_mask = None;
                }
                let count = HotModel::new(m)?.param_count();
                params.push(vec![variant.name().into(), heads.into(), mask_name(mask).into(), count.into()]);
                counts.push(count);
            }
        }
        asserts.push(Assertion::holds(
            format!("params-equal/h{heads}"),
            counts.windows(2).all(|w| w[0] == w[1]),
        ));
        for variant in [AttentionVariant::FactoredSoftmax, AttentionVariant::FactoredLinear] {
            let gap = reference_gap(&a, heads, variant, cfg.seed)?;
            asserts.push(Assertion::at_most(
                format!("all-off-reference/{}/h{heads}", variant.name()),
                gap,
                a.reference_tolerance,
            ));
        }
    }
    asserts.push(Assertion::at_most("suite-seconds", elapsed, a.time_limit_seconds).timed());
    Ok((vec![runs, summary, params], asserts))
}
