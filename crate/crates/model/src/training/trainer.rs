use std::time::Instant;

use hot_core::linalg::solve_psd_right;
use hot_core::DenseTensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layer::HotModel;
use crate::tape::Tape;
use crate::training::metrics::{accuracy, auc_ovr, cross_entropy, mae, mse, smape};
use crate::training::optim::{adam_step, AdamConfig, OptimState};
use crate::training::synthetic::{Dataset, Split, Targets};
use crate::training::TrainError;

fn default_batch() -> usize {
    32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Seed of the batch order.
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
}

/// Named metric values in a fixed order.
pub type Metrics = Vec<(String, f64)>;

pub fn metric(m: &Metrics, name: &str) -> Option<f64> {
    m.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Loss of the batch used at this step (full train loss at step 0).
    pub loss: f64,
    /// Train and validation metrics; empty between evaluations.
    pub metrics: Metrics,
    pub wall_seconds: f64,
}

/// Evaluation picked by a validation criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub step: usize,
    pub val_mae: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub initial_train: Metrics,
    pub final_train: Metrics,
    pub final_val: Metrics,
    /// Lowest validation MAE (forecast tasks).
    pub best_by_mae: Option<Selection>,
    /// Lowest validation MSE (forecast tasks).
    pub best_by_mse: Option<Selection>,
}

impl TrainReport {
    /// Metric column names shared by every log row.
    pub fn metric_columns(&self) -> Vec<String> {
        self.rows
            .iter()
            .find(|r| !r.metrics.is_empty())
            .map(|r| r.metrics.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_default()
    }
}

const EVAL_CHUNK: usize = 64;

/// Model outputs for every row of `split`.
pub fn predict(model: &HotModel, split: &Split) -> Result<DenseTensor, TrainError> {
    let n = split.len();
    let mut data = Vec::new();
    let mut out_dims = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let part = split.select(&idx)?;
        let y = model.forward(&part.inputs)?;
        out_dims = y.dims().to_vec();
        data.extend_from_slice(y.data());
    }
    out_dims[0] = n;
    Ok(DenseTensor::from_vec(out_dims, data)?)
}

/// Forecast: mse, mae, smape. Classification: cross_entropy, acc, auc.
pub fn evaluate(model: &HotModel, split: &Split) -> Result<Metrics, TrainError> {
    let pred = predict(model, split)?;
    Ok(match &split.targets {
        Targets::Values(t) => vec![
            ("mse".into(), mse(pred.data(), t.data())?),
            ("mae".into(), mae(pred.data(), t.data())?),
            ("smape".into(), smape(pred.data(), t.data())?),
        ],
        Targets::Classes(labels) => vec![
            ("cross_entropy".into(), cross_entropy(&pred, labels)?),
            ("acc".into(), accuracy(&pred, labels)?),
            ("auc".into(), auc_ovr(&pred, labels).unwrap_or(f64::NAN)),
        ],
    })
}

fn loss_on(tape: &mut Tape, model: &HotModel, batch: &Split) -> Result<(crate::Var, Vec<crate::Var>), TrainError> {
    let bound = model.params().bind(tape, true)?;
    let x = tape.constant(batch.inputs.clone())?;
    let y = model.forward_tape(tape, &bound, x)?;
    let loss = match &batch.targets {
        Targets::Values(t) => tape.mse(y, t)?,
        Targets::Classes(labels) => tape.cross_entropy(y, labels)?,
    };
    Ok((loss, bound.vars().to_vec()))
}

/// Loss and parameter adjoints of one batch.
pub fn loss_and_grads(model: &HotModel, batch: &Split) -> Result<(f64, Vec<DenseTensor>), TrainError> {
    let mut tape = Tape::new();
    let (loss, vars) = loss_on(&mut tape, model, batch)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| TrainError::Shape("missing adjoint".into())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((value, g))
}

fn prefixed(prefix: &str, m: &Metrics) -> Metrics {
    m.iter().map(|(n, v)| (format!("{prefix}_{n}"), *v)).collect()
}

/// Adam training with epoch-shuffled batches. Evaluates both splits at the
/// start, every `eval_every` steps and at the end.
pub fn train(model: &mut HotModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Spec("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::new(cfg.adam, model.params())?;
    let n = data.train.len();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut rows = Vec::new();
    let mut best_by_mae: Option<Selection> = None;
    let mut best_by_mse: Option<Selection> = None;
    let mut evaluate_at = |model: &HotModel, step: usize| -> Result<(Metrics, Metrics), TrainError> {
        let tr = evaluate(model, &data.train)?;
        let va = evaluate(model, &data.val)?;
        if let (Some(vmae), Some(vmse)) = (metric(&va, "mae"), metric(&va, "mse")) {
            let sel = Selection {
                step,
                val_mae: vmae,
                val_mse: vmse,
            };
            if best_by_mae.as_ref().is_none_or(|b| vmae < b.val_mae) {
                best_by_mae = Some(sel.clone());
            }
            if best_by_mse.as_ref().is_none_or(|b| vmse < b.val_mse) {
                best_by_mse = Some(sel);
            }
        }
        Ok((tr, va))
    };
    let (initial_train, initial_val) = evaluate_at(model, 0)?;
    let mut metrics = prefixed("train", &initial_train);
    metrics.extend(prefixed("val", &initial_val));
    rows.push(LogRow {
        step: 0,
        loss: metric(&initial_train, "mse")
            .or_else(|| metric(&initial_train, "cross_entropy"))
            .unwrap_or(f64::NAN),
        metrics,
        wall_seconds: start.elapsed().as_secs_f64(),
    });
    let (mut final_train, mut final_val) = (initial_train.clone(), initial_val);
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(n) {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = data.train.select(&idx)?;
        let (loss, grads) = loss_and_grads(model, &batch)?;
        adam_step(&mut state, &grads, model.params_mut())?;
        let due = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let metrics = if due {
            let (tr, va) = evaluate_at(model, step)?;
            let mut m = prefixed("train", &tr);
            m.extend(prefixed("val", &va));
            final_train = tr;
            final_val = va;
            m
        } else {
            Vec::new()
        };
        rows.push(LogRow {
            step,
            loss,
            metrics,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainReport {
        rows,
        initial_train,
        final_train,
        final_val,
        best_by_mae,
        best_by_mse,
    })
}

fn design(split: &Split) -> (DenseTensor, usize) {
    let b = split.len();
    let f = split.inputs.numel() / b;
    let mut data = Vec::with_capacity(b * (f + 1));
    for row in split.inputs.data().chunks(f) {
        data.extend_from_slice(row);
        data.push(1.0);
    }
    (DenseTensor::from_vec([b, f + 1], data).expect("design matrix"), f + 1)
}

/// Ridge regression from the flattened raw input (plus intercept) to the
/// flattened forecast. Returns `(train MSE, val MSE)`.
pub fn linear_readout_mse(data: &Dataset, ridge: f64) -> Result<(f64, f64), TrainError> {
    let (Targets::Values(ytr), Targets::Values(yva)) = (&data.train.targets, &data.val.targets) else {
        return Err(TrainError::Spec("linear readout needs a forecast task".into()));
    };
    let (xtr, f) = design(&data.train);
    let (xva, _) = design(&data.val);
    let out = ytr.numel() / data.train.len();
    let ytr_m = ytr.reshape([data.train.len(), out])?;
    let xt = xtr.transpose()?;
    let mut gram = xt.matmul(&xtr)?;
    for i in 0..f {
        gram.data_mut()[i * f + i] += ridge;
    }
    let rhs = ytr_m.transpose()?.matmul(&xtr)?;
    let w_t = solve_psd_right(&rhs, &gram)?;
    let w = w_t.transpose()?;
    let ptr = xtr.matmul(&w)?;
    let pva = xva.matmul(&w)?;
    Ok((mse(ptr.data(), ytr.data())?, mse(pva.data(), yva.data())?))
}
