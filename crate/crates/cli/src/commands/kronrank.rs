//! Reconstruction error of attention-like matrices against Kronecker rank.

use hot_core::attention::{softmax_rows, AttentionWeights};
use hot_core::kron::{kron, kron_decompose, kron_rank_bound, AlsOptions, DecompositionMethod};
use hot_core::DenseTensor;

use crate::commands::equiv::case_rng;
use crate::commands::{shape_name, Output};
use crate::config::{MatrixSource, RunConfig};
use crate::report::{Assertion, Table};
use crate::CliError;

fn method_name(m: DecompositionMethod) -> &'static str {
    match m {
        DecompositionMethod::Trivial => "trivial",
        DecompositionMethod::Svd => "svd",
        DecompositionMethod::Als => "als",
    }
}

fn source_name(s: MatrixSource) -> &'static str {
    match s {
        MatrixSource::Random => "random",
        MatrixSource::Attention => "attention",
    }
}

fn matrix(source: MatrixSource, dims: &[usize], d_model: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<DenseTensor, CliError> {
    let n: usize = dims.iter().product();
    Ok(match source {
        MatrixSource::Random => softmax_rows(&DenseTensor::random_normal([n, n], rng)?)?,
        MatrixSource::Attention => {
            // implied matrix of one head of full attention over the flattened grid
            let w = AttentionWeights::glorot(d_model, 1, rng)?;
            let x = DenseTensor::random_normal([n, d_model], rng)?;
            let h = &w.heads()[0];
            let scores = x.matmul(&h.w_q)?.matmul(&x.matmul(&h.w_k)?.transpose()?)?;
            softmax_rows(&scores.scale(1.0 / (d_model as f64).sqrt()))?
        }
    })
}

pub fn run(cfg: &RunConfig) -> Result<Output, CliError> {
    let k = cfg.kronrank.clone().unwrap_or_default();
    let opts = AlsOptions {
        max_sweeps: k.max_sweeps,
        ..AlsOptions::default()
    };
    let mut table = Table::new(
        "kronrank",
        &["source", "dims", "seed", "rank", "bound", "rel_error", "method", "converged"],
    );
    let mut asserts = Vec::new();
    for (di, dims) in k.dims.iter().enumerate() {
        let bound = kron_rank_bound(dims);
        let name = shape_name(dims);
        for &source in &k.sources {
            let (mut at_bound, mut increase) = (0.0f64, 0.0f64);
            for s in 0..k.seeds as u64 {
                let mut rng = case_rng(cfg.seed, (di as u64) << 24 | (source as u64) << 16 | s);
                let m = matrix(source, dims, k.d_model, &mut rng)?;
                let mut prev = f64::INFINITY;
                for rank in 1..=bound {
                    let dec = kron_decompose(&m, dims, rank, opts, &mut rng)?;
                    table.push(vec![
                        source_name(source).into(),
                        name.clone().into(),
                        s.into(),
                        rank.into(),
                        bound.into(),
                        dec.rel_error.into(),
                        method_name(dec.method).into(),
                        dec.converged.into(),
                    ]);
                    if prev.is_finite() {
                        increase = increase.max(dec.rel_error - prev);
                    }
                    prev = dec.rel_error;
                }
                at_bound = if prev.is_nan() { f64::NAN } else { at_bound.max(prev) };
            }
            let tag = format!("{}/{name}", source_name(source));
            asserts.push(Assertion::at_most(format!("exact-at-bound/{tag}"), at_bound, k.exact_tolerance));
            asserts.push(Assertion::at_most(format!("monotone/{tag}"), increase, k.monotone_slack));
        }
        if k.planted_seeds > 0 {
            let mut worst: f64 = 0.0;
            for s in 0..k.planted_seeds as u64 {
                let mut rng = case_rng(cfg.seed, 1 << 40 | (di as u64) << 16 | s);
                let mut planted = DenseTensor::random_normal([dims[0], dims[0]], &mut rng)?;
                for &n in &dims[1..] {
                    planted = kron(&planted, &DenseTensor::random_normal([n, n], &mut rng)?)?;
                }
                let dec = kron_decompose(&planted, dims, 1, opts, &mut rng)?;
                table.push(vec![
                    "planted".into(),
                    name.clone().into(),
                    s.into(),
                    1usize.into(),
                    bound.into(),
                    dec.rel_error.into(),
                    method_name(dec.method).into(),
                    dec.converged.into(),
                ]);
                worst = if dec.rel_error.is_nan() { f64::NAN } else { worst.max(dec.rel_error) };
            }
            asserts.push(Assertion::at_most(format!("planted-rank-one/{name}"), worst, k.planted_tolerance));
        }
    }
    Ok((vec![table], asserts))
}
