//! Tape adjoints against central differences.

use std::time::Instant;

use hot_core::DenseTensor;
use hot_model::tape::AdjointFault;
use hot_model::training::{finite_diff_check, run_grad_case, GradCase, GradCheckOptions, GradTarget};
use rayon::prelude::*;

use crate::commands::{shape_name, Output};
use crate::config::{GradcheckConfig, RunConfig};
use crate::report::{Assertion, Table};
use crate::CliError;

fn target_name(t: GradTarget) -> &'static str {
    match t {
        GradTarget::Attention => "attention",
        GradTarget::Block => "block",
    }
}

/// `f(p) = Σ c_i p_i²` with its exact gradient.
fn quadratic(g: &GradcheckConfig, seed: u64) -> Result<f64, CliError> {
    let n = 16;
    let c: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 / n as f64).collect();
    let p = DenseTensor::from_fn([n], |ix| (ix[0] as f64 * 0.37 + seed as f64).sin())?;
    let grad = DenseTensor::from_fn([n], |ix| 2.0 * c[ix[0]] * p.data()[ix[0]])?;
    let f = |ps: &[DenseTensor]| Ok(ps[0].data().iter().zip(&c).map(|(x, c)| c * x * x).sum::<f64>());
    let opts = GradCheckOptions {
        eps: g.eps,
        coords_per_param: g.coords_per_param,
        seed,
        floor: g.floor,
    };
    Ok(finite_diff_check(f, &[p], &[grad], opts)?.max_rel_error)
}

pub fn run(cfg: &RunConfig) -> Result<Output, CliError> {
    let g = cfg.gradcheck.clone().unwrap_or_default();
    let start = Instant::now();
    let mut cases = Vec::new();
    for &target in &g.targets {
        for &variant in &g.variants {
            for s in 0..g.seeds as u64 {
                let mut case = GradCase::new(target, variant, cfg.seed.wrapping_add(s));
                case.dims = g.dims.clone();
                case.d_model = g.d_model;
                case.n_heads = g.n_heads;
                case.batch = g.batch;
                case.num_features = g.num_features;
                case.fault = g.fault.as_ref().map(|f| AdjointFault {
                    op: f.op.clone(),
                    factor: f.factor,
                });
                cases.push((s, case));
            }
        }
    }
    let results = cases
        .par_iter()
        .map(|(s, case)| {
            let opts = GradCheckOptions {
                eps: g.eps,
                coords_per_param: g.coords_per_param,
                seed: case.seed,
                floor: g.floor,
            };
            Ok((*s, case, run_grad_case(case, opts)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let quad = quadratic(&g, cfg.seed)?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut table = Table::new(
        "gradcheck",
        &["target", "variant", "shape", "seed", "checked", "max_rel_error", "worst_param", "worst_index", "tolerance", "pass"],
    );
    let mut asserts = Vec::new();
    for &target in &g.targets {
        for &variant in &g.variants {
            let mut worst: f64 = 0.0;
            for (s, case, rep) in results.iter().filter(|(_, c, _)| c.target == target && c.variant == variant) {
                let (wp, wi) = rep.worst.map_or((-1, -1), |(p, i)| (p as i64, i as i64));
                table.push(vec![
                    target_name(target).into(),
                    variant.name().into(),
                    shape_name(&case.dims).into(),
                    (*s).into(),
                    rep.checked.into(),
                    rep.max_rel_error.into(),
                    crate::Cell::Int(wp),
                    crate::Cell::Int(wi),
                    g.tolerance.into(),
                    (rep.max_rel_error <= g.tolerance).into(),
                ]);
                worst = if rep.max_rel_error.is_nan() { f64::NAN } else { worst.max(rep.max_rel_error) };
            }
            asserts.push(Assertion::at_most(
                format!("gradient/{}/{}", target_name(target), variant.name()),
                worst,
                g.tolerance,
            ));
        }
    }
    table.push(vec![
        "quadratic".into(),
        "-".into(),
        "16".into(),
        cfg.seed.into(),
        16usize.into(),
        quad.into(),
        crate::Cell::Int(-1),
        crate::Cell::Int(-1),
        g.quadratic_tolerance.into(),
        (quad <= g.quadratic_tolerance).into(),
    ]);
    asserts.push(Assertion::at_most("quadratic-self-test", quad, g.quadratic_tolerance));
    asserts.push(Assertion::at_most("suite-seconds", elapsed, g.time_limit_seconds).timed());
    Ok((vec![table], asserts))
}
