//! Oracle comparisons of the attention kernels.

use std::time::Instant;

use hot_core::attention::{
    factorized_attention_linear, factorized_attention_materialized, factorized_attention_softmax,
    full_attention_linear, full_high_order_attention, head_factors, kernel_attention_matrix, kernelized_mode_apply, pooled,
    project_last, standard_attention, FeatureMapSpec,
};
use hot_core::kron::kron;
use hot_core::{AttentionConfig, AttentionWeights, DenseTensor, FeatureMap};
use hot_model::layer::{block_attention, AttentionVariant, HOTBlockConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::commands::{shape_name, Output};
use crate::config::{EquivConfig, EquivFault, RunConfig};
use crate::report::{Assertion, Cell, Table};
use crate::CliError;

pub(crate) fn case_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

struct Row {
    check: &'static str,
    variant: String,
    shape: Vec<usize>,
    heads: usize,
    seed: u64,
    value: f64,
    tolerance: f64,
    /// Kernel normaliser entries raised to the floor.
    floored: usize,
}

impl Row {
    fn cells(&self) -> Vec<Cell> {
        vec![
            self.check.into(),
            self.variant.clone().into(),
            shape_name(&self.shape).into(),
            self.heads.into(),
            self.seed.into(),
            self.value.into(),
            self.tolerance.into(),
            (self.value <= self.tolerance).into(),
            self.floored.into(),
        ]
    }
}

fn input(positional: &[usize], d: usize, rng: &mut ChaCha8Rng) -> Result<DenseTensor, CliError> {
    let mut dims = positional.to_vec();
    dims.push(d);
    Ok(DenseTensor::random_normal(dims, rng)?)
}

fn oracle_rows(cfg: &RunConfig, e: &EquivConfig, att: &AttentionConfig) -> Result<Vec<Row>, CliError> {
    let mut cases = Vec::new();
    for shape in e.shape_grid() {
        for &h in &e.heads {
            for s in 0..e.seeds as u64 {
                cases.push((shape.clone(), h, s));
            }
        }
    }
    let mut fast_cfg = att.clone();
    if e.fault == Some(EquivFault::WrongScaling) {
        let d_head = (e.d_model / e.heads[0]) as f64;
        fast_cfg.score_scale = Some(2.0 / d_head.sqrt());
    }
    cases
        .into_par_iter()
        .enumerate()
        .map(|(i, (shape, h, s))| {
            let mut rng = case_rng(cfg.seed, i as u64);
            let w = AttentionWeights::glorot(e.d_model, h, &mut rng)?;
            let x = input(&shape, e.d_model, &mut rng)?;
            let fast = factorized_attention_softmax(&x, &w, &fast_cfg)?;
            let slow = factorized_attention_materialized(&x, &w, att)?;
            Ok(Row {
                check: "oracle",
                variant: "factored-softmax".into(),
                shape,
                heads: h,
                seed: s,
                value: fast.max_abs_diff(&slow).unwrap_or(f64::INFINITY),
                tolerance: e.tolerance,
                floored: 0,
            })
        })
        .collect()
}

/// `(X ×_0 A_0 ⋯ ×_{k-2} A_{k-2})_(k-1) = X_(k-1) (A_0 ⊗ ⋯ ⊗ A_{k-2})ᵀ`
fn identity_rows(cfg: &RunConfig, e: &EquivConfig) -> Result<Vec<Row>, CliError> {
    let k = e.identity_dims.len();
    (0..e.identity_seeds as u64)
        .map(|s| {
            let mut rng = case_rng(cfg.seed, 1 << 20 | s);
            let x = DenseTensor::random_normal(e.identity_dims.clone(), &mut rng)?;
            let factors = e.identity_dims[..k - 1]
                .iter()
                .map(|&n| DenseTensor::random_normal([n, n], &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let mut lhs = x.clone();
            for (mode, a) in factors.iter().enumerate() {
                lhs = lhs.mode_product(a, mode)?;
            }
            let lhs = lhs.matricize(k - 1)?;
            let mut big = factors[0].clone();
            for a in &factors[1..] {
                big = kron(&big, a)?;
            }
            let rhs = x.matricize(k - 1)?.matmul(&big.transpose()?)?;
            Ok(Row {
                check: "matricization-identity",
                variant: "-".into(),
                shape: e.identity_dims.clone(),
                heads: 0,
                seed: s,
                value: lhs.max_abs_diff(&rhs).unwrap_or(f64::INFINITY),
                tolerance: e.identity_tolerance,
                floored: 0,
            })
        })
        .collect()
}

/// Kernelized standard attention through the explicit `N × N` matrix.
fn explicit_kernel_attention(
    x: &DenseTensor,
    w: &AttentionWeights,
    fm: &FeatureMap,
    att: &AttentionConfig,
) -> Result<DenseTensor, CliError> {
    let mut out = DenseTensor::zeros(x.dims().to_vec())?;
    for head in w.heads() {
        let q = x.matmul(&head.w_q)?;
        let k = x.matmul(&head.w_k)?;
        let v = x.matmul(&head.w_v)?;
        let s = kernel_attention_matrix(&q, &k, fm, att)?;
        out.add_assign(&project_last(&s.matmul(&v)?, &head.w_o)?)?;
    }
    Ok(out)
}

/// Single positional mode: every variant against standard attention (the
/// linear ones against its kernelized form), through the direct kernels and
/// through the differentiable block path.
fn reduction_rows(cfg: &RunConfig, e: &EquivConfig, att: &AttentionConfig) -> Result<Vec<Row>, CliError> {
    let mut rows = Vec::new();
    for (li, &n) in e.reduction_lengths.iter().enumerate() {
        for &h in &e.heads {
            for s in 0..e.seeds as u64 {
                let mut rng = case_rng(cfg.seed, 2 << 20 | (li as u64) << 12 | (h as u64) << 6 | s);
                let w = AttentionWeights::glorot(e.d_model, h, &mut rng)?;
                let x = input(&[n], e.d_model, &mut rng)?;
                let fm_seed = cfg.seed.wrapping_add(s);
                let fm = FeatureMap::new(FeatureMapSpec::new(e.reduction_features, e.d_model / h, fm_seed))?;
                let softmax_ref = standard_attention(&x, &w, att)?;
                let kernel_ref = explicit_kernel_attention(&x, &w, &fm, att)?;
                for variant in AttentionVariant::ALL {
                    let direct = match variant {
                        AttentionVariant::FullSoftmax => full_high_order_attention(&x, &w, att)?,
                        AttentionVariant::FactoredSoftmax => factorized_attention_softmax(&x, &w, att)?,
                        AttentionVariant::FullLinear => full_attention_linear(&x, &w, &fm, att)?.output,
                        AttentionVariant::FactoredLinear => factorized_attention_linear(&x, &w, &fm, att)?.output,
                    };
                    let mut block = HOTBlockConfig::new(vec![n], e.d_model, h);
                    block.variant = variant;
                    block.feature_map.num_features = e.reduction_features;
                    block.feature_map.seed = fm_seed;
                    let tape = block_attention(&x, &block, &w)?;
                    let reference = if variant.is_linear() { &kernel_ref } else { &softmax_ref };
                    for (check, out) in [("reduction", &direct), ("reduction-tape", &tape)] {
                        rows.push(Row {
                            check,
                            variant: variant.name().into(),
                            shape: vec![n],
                            heads: h,
                            seed: s,
                            value: out.max_abs_diff(reference).unwrap_or(f64::INFINITY),
                            tolerance: e.reduction_tolerance,
                            floored: 0,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn max_row_sum_error(m: &DenseTensor) -> f64 {
    (0..m.rows())
        .map(|i| (m.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Row-sum error of one pooled kernel matrix over the rows whose normaliser
/// stayed above the floor, plus the number of floored rows.
fn kernel_row_sums(
    qt: &DenseTensor,
    kt: &DenseTensor,
    fm: &FeatureMap,
    att: &AttentionConfig,
) -> Result<(f64, usize), CliError> {
    let m = kernel_attention_matrix(qt, kt, fm, att)?;
    // unnormalised row mass Σ_j φ(q̃_i)·φ(k̃_j)
    let c = att.scale_for(qt.cols()).sqrt();
    let phi_q = fm.apply_rows(&qt.scale(c))?;
    let phi_k = fm.apply_rows(&kt.scale(c))?;
    let mass = phi_q.matmul(&phi_k.transpose()?)?;
    let mut worst: f64 = 0.0;
    let mut floored = 0;
    for i in 0..m.rows() {
        if mass.row(i).iter().sum::<f64>() < att.z_floor {
            floored += 1;
        } else {
            worst = worst.max((m.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok((worst, floored))
}

fn row_sum_rows(cfg: &RunConfig, e: &EquivConfig, att: &AttentionConfig) -> Result<Vec<Row>, CliError> {
    let mut rows = Vec::new();
    for (i, shape) in e.shape_grid().into_iter().enumerate() {
        let h = e.heads[i % e.heads.len()];
        let mut rng = case_rng(cfg.seed, 3 << 20 | i as u64);
        let w = AttentionWeights::glorot(e.d_model, h, &mut rng)?;
        let x = input(&shape, e.d_model, &mut rng)?;
        let fm = FeatureMap::new(FeatureMapSpec::new(e.reduction_features, e.d_model / h, cfg.seed))?;
        let (mut soft, mut kern, mut floored) = (0.0f64, 0.0f64, 0usize);
        for (hi, head) in w.heads().iter().enumerate() {
            let s = head_factors(&x, &w, hi, att)?.materialize()?;
            soft = soft.max(max_row_sum_error(&s));
            let q = project_last(&x, &head.w_q)?;
            let k = project_last(&x, &head.w_k)?;
            for mode in 0..shape.len() {
                let qt = pooled(&q, mode, att.pooling)?;
                let kt = pooled(&k, mode, att.pooling)?;
                let (err, fl) = kernel_row_sums(&qt, &kt, &fm, att)?;
                // the apply path must agree on which rows were floored
                let ones = DenseTensor::full([shape[mode], 1], 1.0)?;
                if kernelized_mode_apply(&ones, &qt, &kt, 0, &fm, att)?.floored != fl {
                    kern = f64::INFINITY;
                }
                kern = kern.max(err);
                floored += fl;
            }
        }
        for (variant, value, fl) in [("factored-softmax", soft, 0), ("factored-linear", kern, floored)] {
            rows.push(Row {
                check: "row-sum",
                variant: variant.into(),
                shape: shape.clone(),
                heads: h,
                seed: 0,
                value,
                tolerance: e.row_sum_tolerance,
                floored: fl,
            });
        }
    }
    Ok(rows)
}

/// `E_ω[φ(q)·φ(k)]` against `exp(q·k)`, averaged over feature-map seeds.
fn kernel_rows(cfg: &RunConfig, e: &EquivConfig) -> Result<Vec<Row>, CliError> {
    let r = e.input_range;
    let maps = (0..e.kernel_seeds as u64)
        .map(|s| FeatureMap::new(FeatureMapSpec::new(e.kernel_features, e.kernel_input_dim, cfg.seed.wrapping_add(s))))
        .collect::<Result<Vec<_>, _>>()?;
    (0..e.kernel_pairs as u64)
        .map(|p| {
            let mut rng = case_rng(cfg.seed, 4 << 20 | p);
            let q = DenseTensor::random_uniform([e.kernel_input_dim], -r, r, &mut rng)?;
            let k = DenseTensor::random_uniform([e.kernel_input_dim], -r, r, &mut rng)?;
            let exact = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum::<f64>().exp();
            let mut total = 0.0;
            for fm in &maps {
                let pq = fm.apply(q.data())?;
                let pk = fm.apply(k.data())?;
                total += pq.iter().zip(&pk).map(|(a, b)| a * b).sum::<f64>();
            }
            let estimate = total / maps.len() as f64;
            Ok(Row {
                check: "kernel-estimate",
                variant: "-".into(),
                shape: vec![e.kernel_input_dim],
                heads: 0,
                seed: p,
                value: ((estimate - exact) / exact).abs(),
                tolerance: e.kernel_tolerance,
                floored: 0,
            })
        })
        .collect()
}

/// Relative Frobenius error of kernelized against softmax factorized output.
fn fidelity_rows(cfg: &RunConfig, e: &EquivConfig, att: &AttentionConfig) -> Result<Vec<Row>, CliError> {
    let r = e.input_range;
    (0..e.fidelity_seeds as u64)
        .map(|s| {
            let mut rng = case_rng(cfg.seed, 5 << 20 | s);
            let w = AttentionWeights::glorot(e.fidelity_d_head, 1, &mut rng)?;
            let mut dims = e.fidelity_shape.clone();
            dims.push(e.fidelity_d_head);
            let x = DenseTensor::random_uniform(dims, -r, r, &mut rng)?;
            let fm = FeatureMap::new(FeatureMapSpec::new(e.fidelity_features, e.fidelity_d_head, cfg.seed.wrapping_add(s)))?;
            let soft = factorized_attention_softmax(&x, &w, att)?;
            let lin = factorized_attention_linear(&x, &w, &fm, att)?;
            Ok(Row {
                check: "kernel-fidelity",
                variant: "factored-linear".into(),
                shape: e.fidelity_shape.clone(),
                heads: 1,
                seed: s,
                value: lin.output.rel_frobenius_error(&soft).unwrap_or(f64::INFINITY),
                tolerance: e.fidelity_tolerance,
                floored: lin.floored,
            })
        })
        .collect()
}

fn max_of(rows: &[Row], check: &str, variant: Option<&str>) -> f64 {
    rows.iter()
        .filter(|r| r.check == check && variant.is_none_or(|v| r.variant == v))
        .map(|r| r.value)
        .fold(0.0, |a, b| if b.is_nan() || a.is_nan() { f64::NAN } else { a.max(b) })
}

pub fn run(cfg: &RunConfig) -> Result<Output, CliError> {
    let e = cfg.equiv.clone().unwrap_or_default();
    let start = Instant::now();
    let att = AttentionConfig {
        oracle_cap: cfg.oracle_cap,
        ..AttentionConfig::default()
    };
    let mut rows = oracle_rows(cfg, &e, &att)?;
    rows.extend(identity_rows(cfg, &e)?);
    rows.extend(reduction_rows(cfg, &e, &att)?);
    rows.extend(row_sum_rows(cfg, &e, &att)?);
    rows.extend(kernel_rows(cfg, &e)?);
    rows.extend(fidelity_rows(cfg, &e, &att)?);
    let elapsed = start.elapsed().as_secs_f64();

    let mut asserts = vec![
        Assertion::at_most("oracle-equivalence", max_of(&rows, "oracle", None), e.tolerance),
        Assertion::at_most("matricization-identity", max_of(&rows, "matricization-identity", None), e.identity_tolerance),
    ];
    for v in AttentionVariant::ALL {
        let worst = max_of(&rows, "reduction", Some(v.name())).max(max_of(&rows, "reduction-tape", Some(v.name())));
        asserts.push(Assertion::at_most(format!("reduction/{}", v.name()), worst, e.reduction_tolerance));
    }
    asserts.push(Assertion::at_most(
        "row-sum/softmax",
        max_of(&rows, "row-sum", Some("factored-softmax")),
        e.row_sum_tolerance,
    ));
    asserts.push(Assertion::at_most(
        "row-sum/kernel",
        max_of(&rows, "row-sum", Some("factored-linear")),
        e.row_sum_tolerance,
    ));
    asserts.push(Assertion::at_most("kernel-estimate", max_of(&rows, "kernel-estimate", None), e.kernel_tolerance));
    let fidelity: Vec<f64> = rows.iter().filter(|r| r.check == "kernel-fidelity").map(|r| r.value).collect();
    let mean = fidelity.iter().sum::<f64>() / fidelity.len() as f64;
    asserts.push(Assertion::at_most("kernel-fidelity", mean, e.fidelity_tolerance));
    asserts.push(Assertion::at_most("suite-seconds", elapsed, e.time_limit_seconds).timed());

    let mut table = Table::new("equiv", &["check", "variant", "shape", "heads", "seed", "value", "tolerance", "pass", "floored"]);
    for r in &rows {
        table.push(r.cells());
    }
    Ok((vec![table], asserts))
}
