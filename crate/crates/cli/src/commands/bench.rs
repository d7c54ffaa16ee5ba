//! Token-scaling benchmarks of the attention sublayer.

use std::hint::black_box;
use std::time::Instant;

use hot_core::attention::{
    factorized_attention_linear, factorized_attention_softmax, full_attention_linear, full_high_order_attention,
    FeatureMapSpec,
};
use hot_core::{AttentionConfig, AttentionWeights, DenseTensor, FeatureMap};
use hot_model::layer::AttentionVariant;

use crate::commands::equiv::case_rng;
use crate::commands::{shape_name, Output};
use crate::config::{BenchConfig, BenchSeries, RunConfig};
use crate::report::{Assertion, Cell, Table};
use crate::{CliError, ALLOCATOR};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub variant: AttentionVariant,
    pub shape: Vec<usize>,
    pub tokens: usize,
    pub seed: u64,
    pub median_ns: f64,
    pub samples_ns: Vec<u64>,
    /// Heap high-water mark above the pre-call level.
    pub peak_bytes: usize,
}

/// Least-squares `(intercept, slope)` of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// Exponent of the token count in the asymptotic cost.
pub fn theory_slope(variant: AttentionVariant, order: usize) -> f64 {
    match variant {
        AttentionVariant::FullSoftmax => 2.0,
        AttentionVariant::FullLinear | AttentionVariant::FactoredLinear => 1.0,
        // per mode N_i · ∏N on a grid of equal sides
        AttentionVariant::FactoredSoftmax => 1.0 + 1.0 / order as f64,
    }
}

fn median(sorted: &[u64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

fn measure(
    b: &BenchConfig,
    series: &BenchSeries,
    shape: &[usize],
    seed: u64,
    stream: u64,
    att: &AttentionConfig,
) -> Result<BenchRecord, CliError> {
    let mut rng = case_rng(seed, stream);
    let w = AttentionWeights::glorot(b.d_model, b.n_heads, &mut rng)?;
    let mut dims = shape.to_vec();
    dims.push(b.d_model);
    let x = DenseTensor::random_normal(dims, &mut rng)?;
    let fm = FeatureMap::new(FeatureMapSpec::new(b.num_features, b.d_model / b.n_heads, seed))?;
    let call = || -> Result<DenseTensor, CliError> {
        Ok(match series.variant {
            AttentionVariant::FullSoftmax => full_high_order_attention(&x, &w, att)?,
            AttentionVariant::FactoredSoftmax => factorized_attention_softmax(&x, &w, att)?,
            AttentionVariant::FullLinear => full_attention_linear(&x, &w, &fm, att)?.output,
            AttentionVariant::FactoredLinear => factorized_attention_linear(&x, &w, &fm, att)?.output,
        })
    };
    for _ in 0..b.warmups {
        black_box(call()?);
    }
    let base = ALLOCATOR.current_usage();
    ALLOCATOR.reset_peak_usage();
    black_box(call()?);
    let peak_bytes = ALLOCATOR.peak_usage().saturating_sub(base);
    let mut samples = Vec::with_capacity(b.reps);
    for _ in 0..b.reps {
        let t = Instant::now();
        black_box(call()?);
        samples.push(t.elapsed().as_nanos() as u64);
    }
    let mut sorted = samples.clone();
    sorted.sort_unstable();
    Ok(BenchRecord {
        variant: series.variant,
        shape: shape.to_vec(),
        tokens: shape.iter().product(),
        seed,
        median_ns: median(&sorted),
        samples_ns: samples,
        peak_bytes,
    })
}

/// Largest ratio between a measured point and the least-squares line
/// through all points, taken in whichever direction is larger.
pub fn max_fit_ratio(x: &[f64], y: &[f64]) -> f64 {
    let (a, s) = linear_fit(x, y);
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let fit = a + s * xi;
            if fit <= 0.0 {
                f64::INFINITY
            } else {
                (yi / fit).max(fit / yi)
            }
        })
        .fold(1.0, f64::max)
}

pub fn run(cfg: &RunConfig) -> Result<Output, CliError> {
    let b = cfg.bench.clone().unwrap_or_default();
    let att = AttentionConfig {
        oracle_cap: cfg.oracle_cap,
        ..AttentionConfig::default()
    };
    let mut records = Table::new(
        "bench",
        &["variant", "shape", "order", "tokens", "seed", "peak_bytes", "median_ns", "samples_ns"],
    )
    .timing(&["median_ns", "samples_ns"]);
    let mut fits = Table::new(
        "bench_fits",
        &["variant", "points", "theory_slope", "time_slope", "memory_slope", "memory_max_ratio"],
    )
    .timing(&["time_slope"]);
    let mut asserts = Vec::new();
    for (si, series) in b.series.iter().enumerate() {
        let recs = series
            .shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| measure(&b, series, shape, cfg.seed, (si as u64) << 16 | i as u64, &att))
            .collect::<Result<Vec<_>, _>>()?;
        for r in &recs {
            records.push(vec![
                r.variant.name().into(),
                shape_name(&r.shape).into(),
                r.shape.len().into(),
                r.tokens.into(),
                r.seed.into(),
                r.peak_bytes.into(),
                r.median_ns.into(),
                Cell::Text(r.samples_ns.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")),
            ]);
        }
        let name = series.variant.name();
        let log_t: Vec<f64> = recs.iter().map(|r| (r.tokens as f64).ln()).collect();
        let log_ns: Vec<f64> = recs.iter().map(|r| r.median_ns.ln()).collect();
        let log_mem: Vec<f64> = recs.iter().map(|r| (r.peak_bytes.max(1) as f64).ln()).collect();
        let tokens: Vec<f64> = recs.iter().map(|r| r.tokens as f64).collect();
        let bytes: Vec<f64> = recs.iter().map(|r| r.peak_bytes as f64).collect();
        let points = recs.len();
        let (time_slope, memory_slope, ratio) = if points >= 2 {
            (
                linear_fit(&log_t, &log_ns).1,
                linear_fit(&log_t, &log_mem).1,
                max_fit_ratio(&tokens, &bytes),
            )
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        let order = recs.first().map_or(1, |r| r.shape.len());
        fits.push(vec![
            name.into(),
            points.into(),
            theory_slope(series.variant, order).into(),
            time_slope.into(),
            memory_slope.into(),
            ratio.into(),
        ]);
        if let Some([lo, hi]) = series.slope {
            asserts.push(Assertion::within(format!("time-slope/{name}"), time_slope, lo, hi).timed());
        }
        if series.memory_linear {
            asserts.push(Assertion::at_most(format!("memory-linear/{name}"), ratio, b.memory_ratio));
        }
    }
    Ok((vec![records, fits], asserts))
}
