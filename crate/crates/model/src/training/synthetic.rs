//! Seeded desk-scale tasks.
//!
//! Separable forecast. Each sample draws `a_n ~ N(0,1)` per variable and
//! `b_t ~ N(0,1)` per patch. With orthonormal intra-patch waveforms
//! `u_j = 1/√p` and `v_j = (−1)^j/√p`, the input is
//!
//! `x[n, t·p + j] = a_n u_j + b_t v_j + σ ε`
//!
//! and the target for step `s` and variable `n` is
//!
//! `y[s, n] = α_s a_n + β_s a_n Ā + γ_s (B̄² − 1) + σ ε'`
//!
//! with `Ā = N^{-1/2} Σ_n a_n` and `B̄ = P^{-1/2} Σ_t b_t`. The `a_n Ā` term
//! needs mixing across variables and `B̄²` needs products across patches,
//! so attention over one mode alone cannot reach the noise floor.
//!
//! Voxel classify. Each sample draws `c_x, c_y, c_z` uniformly from
//! `0..C` and sets
//!
//! `x[i, j, l] = cos(2π(c_x+1)i/W) + cos(2π(c_y+1)j/H) + cos(2π(c_z+1)l/D) + σ ε`
//!
//! with label `(c_x + c_y + c_z) mod C`; any single axis is independent of
//! the label.

use hot_core::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::training::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    SeparableForecast {
        variables: usize,
        length: usize,
        horizon: usize,
        patch: usize,
    },
    VoxelClassify {
        side: [usize; 3],
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: SyntheticTask,
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `(B, S, N)` forecasts.
    Values(DenseTensor),
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `(B, raw dims.., 1)`.
    pub inputs: DenseTensor,
    pub targets: Targets,
}

fn gather(t: &DenseTensor, idx: &[usize]) -> Result<DenseTensor, TrainError> {
    let per = t.numel() / t.dims()[0];
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut dims = t.dims().to_vec();
    dims[0] = idx.len();
    Ok(DenseTensor::from_vec(dims, data)?)
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> Result<Split, TrainError> {
        if let Some(&i) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(TrainError::Shape(format!("row {i} of {}", self.len())));
        }
        Ok(Split {
            inputs: gather(&self.inputs, idx)?,
            targets: match &self.targets {
                Targets::Values(t) => Targets::Values(gather(t, idx)?),
                Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            },
        })
    }
}

/// Per-step coefficients of the forecast target.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastCoefficients {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: Split,
    pub val: Split,
    pub coefficients: Option<ForecastCoefficients>,
}

fn signed<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let m = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Noise-free forecast target of one `(N, T)` input row by projecting each
/// patch back onto the two waveforms.
pub fn forecast_target(
    x: &[f64],
    variables: usize,
    length: usize,
    patch: usize,
    coef: &ForecastCoefficients,
) -> Vec<f64> {
    let patches = length / patch;
    let norm = 1.0 / (patch as f64).sqrt();
    let u_proj = |n: usize, t: usize| (0..patch).map(|j| x[n * length + t * patch + j] * norm).sum::<f64>();
    let v_proj = |n: usize, t: usize| {
        (0..patch)
            .map(|j| x[n * length + t * patch + j] * norm * if j % 2 == 0 { 1.0 } else { -1.0 })
            .sum::<f64>()
    };
    let a: Vec<f64> = (0..variables).map(|n| u_proj(n, 0)).collect();
    let b: Vec<f64> = (0..patches).map(|t| v_proj(0, t)).collect();
    let abar = a.iter().sum::<f64>() / (variables as f64).sqrt();
    let bbar = b.iter().sum::<f64>() / (patches as f64).sqrt();
    let horizon = coef.alpha.len();
    let mut y = vec![0.0; horizon * variables];
    for s in 0..horizon {
        for n in 0..variables {
            y[s * variables + n] =
                coef.alpha[s] * a[n] + coef.beta[s] * a[n] * abar + coef.gamma[s] * (bbar * bbar - 1.0);
        }
    }
    y
}

fn gen_forecast(
    rng: &mut ChaCha8Rng,
    count: usize,
    dims: (usize, usize, usize, usize),
    noise: f64,
    coef: &ForecastCoefficients,
) -> Result<Split, TrainError> {
    let (variables, length, horizon, patch) = dims;
    let patches = length / patch;
    let norm = 1.0 / (patch as f64).sqrt();
    let mut inputs = Vec::with_capacity(count * variables * length);
    let mut targets = Vec::with_capacity(count * horizon * variables);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    for _ in 0..count {
        let a: Vec<f64> = (0..variables).map(|_| gauss(rng)).collect();
        let b: Vec<f64> = (0..patches).map(|_| gauss(rng)).collect();
        let start = inputs.len();
        for &an in &a {
            for &bt in &b {
                for j in 0..patch {
                    let v = if j % 2 == 0 { norm } else { -norm };
                    inputs.push(an * norm + bt * v);
                }
            }
        }
        let y = forecast_target(&inputs[start..], variables, length, patch, coef);
        for e in &mut inputs[start..] {
            *e += noise * gauss(rng);
        }
        targets.extend(y.into_iter().map(|v| v + noise * gauss(rng)));
    }
    Ok(Split {
        inputs: DenseTensor::from_vec([count, variables, length, 1], inputs)?,
        targets: Targets::Values(DenseTensor::from_vec([count, horizon, variables], targets)?),
    })
}

fn gen_voxels(
    rng: &mut ChaCha8Rng,
    count: usize,
    side: [usize; 3],
    classes: usize,
    noise: f64,
) -> Result<Split, TrainError> {
    let [w, h, d] = side;
    let wave = |c: usize, i: usize, n: usize| {
        (2.0 * std::f64::consts::PI * (c + 1) as f64 * i as f64 / n as f64).cos()
    };
    let mut inputs = Vec::with_capacity(count * w * h * d);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let c: [usize; 3] = [
            rng.random_range(0..classes),
            rng.random_range(0..classes),
            rng.random_range(0..classes),
        ];
        labels.push((c[0] + c[1] + c[2]) % classes);
        for i in 0..w {
            for j in 0..h {
                for l in 0..d {
                    let eps: f64 = StandardNormal.sample(rng);
                    inputs.push(wave(c[0], i, w) + wave(c[1], j, h) + wave(c[2], l, d) + noise * eps);
                }
            }
        }
    }
    Ok(Split {
        inputs: DenseTensor::from_vec([count, w, h, d, 1], inputs)?,
        targets: Targets::Classes(labels),
    })
}

/// Train and validation splits drawn from one seeded stream.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset, TrainError> {
    let bad = |msg: String| Err(TrainError::Spec(msg));
    if spec.train == 0 || spec.val == 0 {
        return bad("train and val sizes must be positive".into());
    }
    if !(spec.noise >= 0.0) {
        return bad(format!("noise level {}", spec.noise));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.task {
        SyntheticTask::SeparableForecast {
            variables,
            length,
            horizon,
            patch,
        } => {
            if variables < 2 || horizon == 0 || patch < 2 || patch % 2 != 0 || length % patch != 0 || length / patch < 2 {
                return bad(format!(
                    "forecast dims N={variables}, T={length}, S={horizon}, patch={patch}: need N ≥ 2, even patch dividing T, ≥ 2 patches"
                ));
            }
            let coef = ForecastCoefficients {
                alpha: (0..horizon).map(|_| signed(&mut rng, 0.75, 1.25)).collect(),
                beta: (0..horizon).map(|_| signed(&mut rng, 0.75, 1.25)).collect(),
                gamma: (0..horizon).map(|_| signed(&mut rng, 0.5, 0.9)).collect(),
            };
            let dims = (variables, length, horizon, patch);
            let train = gen_forecast(&mut rng, spec.train, dims, spec.noise, &coef)?;
            let val = gen_forecast(&mut rng, spec.val, dims, spec.noise, &coef)?;
            Ok(Dataset {
                spec: spec.clone(),
                train,
                val,
                coefficients: Some(coef),
            })
        }
        SyntheticTask::VoxelClassify { side, classes } => {
            if classes < 2 || side.iter().any(|&s| s <= 2 * classes) {
                return bad(format!("voxel side {side:?} must exceed twice the class count {classes}"));
            }
            let train = gen_voxels(&mut rng, spec.train, side, classes, spec.noise)?;
            let val = gen_voxels(&mut rng, spec.val, side, classes, spec.noise)?;
            Ok(Dataset {
                spec: spec.clone(),
                train,
                val,
                coefficients: None,
            })
        }
    }
}
