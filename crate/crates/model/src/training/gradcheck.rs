use hot_core::DenseTensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layer::{AttentionVariant, BlockWeights, FeatureMapConfig, HOTBlockConfig, HotBlock, Params};
use crate::tape::{AdjointFault, Tape};
use crate::training::TrainError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter; smaller parameters are checked in full.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_param: 64,
            seed: 0,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Central differences of `f` on sampled coordinates of `params`, compared
/// against `analytic`. The relative error of a coordinate is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_diff_check<F>(
    f: F,
    params: &[DenseTensor],
    analytic: &[DenseTensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport, TrainError>
where
    F: Fn(&[DenseTensor]) -> Result<f64, TrainError>,
{
    if params.len() != analytic.len() {
        return Err(TrainError::Shape(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = params[pi].numel();
        if grad.numel() != n {
            return Err(TrainError::Shape(format!("gradient {pi} has {} entries, parameter {n}", grad.numel())));
        }
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + opts.eps;
            let plus = f(&work)?;
            work[pi].data_mut()[c] = orig - opts.eps;
            let minus = f(&work)?;
            work[pi].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TrainError::NonFiniteLoss);
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

/// What a gradient case differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradTarget {
    /// Attention sublayer: input and head projections.
    Attention,
    /// Whole encoder block: input and every block parameter.
    Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub target: GradTarget,
    pub variant: AttentionVariant,
    pub dims: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub batch: usize,
    pub num_features: usize,
    pub seed: u64,
    /// Adjoint corruption used to self-test the checker.
    pub fault: Option<AdjointFault>,
}

impl GradCase {
    pub fn new(target: GradTarget, variant: AttentionVariant, seed: u64) -> Self {
        GradCase {
            target,
            variant,
            dims: vec![3, 4],
            d_model: 8,
            n_heads: 2,
            batch: 2,
            num_features: 16,
            seed,
            fault: None,
        }
    }

    fn block_config(&self) -> HOTBlockConfig {
        let mut cfg = HOTBlockConfig::new(self.dims.clone(), self.d_model, self.n_heads);
        cfg.variant = self.variant;
        cfg.feature_map = FeatureMapConfig {
            num_features: self.num_features,
            seed: self.seed,
            orthogonal: true,
        };
        cfg
    }
}

fn perturbed_weights(cfg: &HOTBlockConfig, rng: &mut ChaCha8Rng) -> Result<Params, TrainError> {
    let w = BlockWeights::init(cfg, rng)?;
    let mut params = Params::new();
    w.write_params("", &mut params)?;
    // move LN gains and biases off their initial constants
    let mut out = Params::new();
    for (name, t) in params.iter() {
        let t = if name.starts_with("ln") || name.starts_with("ffn.b") {
            let noise = DenseTensor::random_normal(t.dims().to_vec(), rng)?;
            t.add(&noise.scale(0.1))?
        } else {
            t.clone()
        };
        out.insert(name, t)?;
    }
    Ok(out)
}

/// Runs one gradient case: builds a random block or attention sublayer, a
/// random linear functional of its output as the loss, and compares tape
/// adjoints against central differences.
pub fn run_grad_case(case: &GradCase, opts: GradCheckOptions) -> Result<GradCheckReport, TrainError> {
    let cfg = case.block_config();
    let block = HotBlock::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let weights = perturbed_weights(&cfg, &mut rng)?;
    let mut xdims = vec![case.batch];
    xdims.extend(&case.dims);
    xdims.push(case.d_model);
    let x = DenseTensor::random_normal(xdims.clone(), &mut rng)?;
    let proj = DenseTensor::random_normal(xdims, &mut rng)?;
    let mut params = Params::new();
    params.insert("x", x)?;
    for (name, t) in weights.iter() {
        if case.target == GradTarget::Block || name.starts_with("attn.") {
            params.insert(name, t.clone())?;
        }
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let rebuild = |values: &[DenseTensor]| -> Result<Params, TrainError> {
        let mut all = weights.clone();
        for (name, v) in names.iter().zip(values) {
            if let Some(slot) = all.get_mut(name) {
                *slot = v.clone();
            }
        }
        Ok(all)
    };
    let eval = |values: &[DenseTensor], tape: &mut Tape| -> Result<(crate::Var, Vec<crate::Var>), TrainError> {
        let all = rebuild(values)?;
        let x = tape.param(values[0].clone())?;
        let bound = all.bind(tape, true)?;
        let y = match case.target {
            GradTarget::Attention => block.attention_bound(tape, x, &bound, "")?,
            GradTarget::Block => block.forward_bound(tape, x, &bound, "")?,
        };
        let loss = tape.dot_const(y, &proj)?;
        let mut vars = vec![x];
        vars.extend(names[1..].iter().map(|n| bound.var(n)).collect::<Result<Vec<_>, _>>()?);
        Ok((loss, vars))
    };
    let values: Vec<DenseTensor> = params.tensors().cloned().collect();
    let mut tape = Tape::new();
    if let Some(f) = &case.fault {
        tape.inject_fault(f.clone());
    }
    let (loss, vars) = eval(&values, &mut tape)?;
    let mut grads = tape.backward(loss)?;
    let analytic = vars
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| TrainError::Shape("missing adjoint".into())))
        .collect::<Result<Vec<_>, _>>()?;
    let f = |vals: &[DenseTensor]| -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let (loss, _) = eval(vals, &mut tape)?;
        Ok(tape.value(loss).data()[0])
    };
    finite_diff_check(f, &values, &analytic, opts)
}
