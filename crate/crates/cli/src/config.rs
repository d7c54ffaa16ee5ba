use std::path::PathBuf;

use hot_model::layer::{AttentionVariant, HeadConfig, ModelConfig, Task};
use hot_model::training::{AdamConfig, GradTarget, SyntheticTask, SyntheticTaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Equiv,
    Gradcheck,
    Kronrank,
    Bench,
    Ablate,
    Train,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Equiv => "equiv",
            Command::Gradcheck => "gradcheck",
            Command::Kronrank => "kronrank",
            Command::Bench => "bench",
            Command::Ablate => "ablate",
            Command::Train => "train",
        }
    }
}

fn default_cap() -> usize {
    4096
}

/// One JSON document per invocation. Only the section matching `command`
/// may be present; an absent section takes its defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Base seed; every case derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Largest token count accepted by the quadratic paths.
    #[serde(default = "default_cap")]
    pub oracle_cap: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equiv: Option<EquivConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kronrank: Option<KronrankConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainCommandConfig>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            seed: 0,
            out: None,
            oracle_cap: default_cap(),
            equiv: None,
            gradcheck: None,
            kronrank: None,
            bench: None,
            ablate: None,
            train: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills the section of `command` with its defaults when absent.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        match cfg.command {
            Command::Equiv => {
                cfg.equiv.get_or_insert_with(EquivConfig::default);
            }
            Command::Gradcheck => {
                cfg.gradcheck.get_or_insert_with(GradcheckConfig::default);
            }
            Command::Kronrank => {
                cfg.kronrank.get_or_insert_with(KronrankConfig::default);
            }
            Command::Bench => {
                cfg.bench.get_or_insert_with(BenchConfig::default);
            }
            Command::Ablate => {
                cfg.ablate.get_or_insert_with(AblateConfig::default);
            }
            Command::Train => {
                cfg.train.get_or_insert_with(TrainCommandConfig::default);
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let present = [
            (Command::Equiv, self.equiv.is_some()),
            (Command::Gradcheck, self.gradcheck.is_some()),
            (Command::Kronrank, self.kronrank.is_some()),
            (Command::Bench, self.bench.is_some()),
            (Command::Ablate, self.ablate.is_some()),
            (Command::Train, self.train.is_some()),
        ];
        if let Some((other, _)) = present.iter().find(|(c, p)| *p && *c != self.command) {
            return Err(CliError::Config(format!(
                "section `{}` given for command `{}`",
                other.name(),
                self.command.name()
            )));
        }
        if self.oracle_cap == 0 {
            return Err(CliError::Config("oracle_cap must be positive".into()));
        }
        let cfg = self.resolved();
        match self.command {
            Command::Equiv => cfg.equiv.as_ref().map(EquivConfig::validate),
            Command::Gradcheck => cfg.gradcheck.as_ref().map(GradcheckConfig::validate),
            Command::Kronrank => cfg.kronrank.as_ref().map(KronrankConfig::validate),
            Command::Bench => cfg.bench.as_ref().map(|b| b.validate(self.oracle_cap)),
            Command::Ablate => cfg.ablate.as_ref().map(AblateConfig::validate),
            Command::Train => cfg.train.as_ref().map(TrainCommandConfig::validate),
        }
        .unwrap_or(Ok(()))
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

fn check_shapes(what: &str, shapes: &[Vec<usize>]) -> Result<(), CliError> {
    if shapes.is_empty() {
        return config_err(format!("{what}: empty shape list"));
    }
    for s in shapes {
        if s.is_empty() || s.contains(&0) {
            return config_err(format!("{what}: invalid shape {s:?}"));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquivFault {
    /// Fast path scores scaled by `2/√D_H` instead of `1/√D_H`.
    WrongScaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivConfig {
    /// Explicit positional shapes; when absent every shape of order
    /// `1..=max_order` with sides `≤ max_side` and `≤ max_tokens` tokens.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shapes: Option<Vec<Vec<usize>>>,
    pub max_tokens: usize,
    pub max_order: usize,
    pub max_side: usize,
    pub d_model: usize,
    pub heads: Vec<usize>,
    pub seeds: usize,
    pub tolerance: f64,
    pub identity_dims: Vec<usize>,
    pub identity_seeds: usize,
    pub identity_tolerance: f64,
    pub reduction_lengths: Vec<usize>,
    pub reduction_features: usize,
    pub reduction_tolerance: f64,
    pub row_sum_tolerance: f64,
    pub kernel_features: usize,
    pub kernel_seeds: usize,
    pub kernel_pairs: usize,
    pub kernel_input_dim: usize,
    pub kernel_tolerance: f64,
    pub fidelity_shape: Vec<usize>,
    pub fidelity_d_head: usize,
    pub fidelity_features: usize,
    pub fidelity_seeds: usize,
    pub fidelity_tolerance: f64,
    /// Inputs of the statistical checks are drawn from `U(-r, r)`.
    pub input_range: f64,
    pub time_limit_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<EquivFault>,
}

impl Default for EquivConfig {
    fn default() -> Self {
        EquivConfig {
            shapes: None,
            max_tokens: 64,
            max_order: 3,
            max_side: 8,
            d_model: 4,
            heads: vec![1, 2],
            seeds: 2,
            tolerance: 1e-10,
            identity_dims: vec![2, 3, 4, 5],
            identity_seeds: 10,
            identity_tolerance: 1e-10,
            reduction_lengths: vec![1, 5, 9],
            reduction_features: 64,
            reduction_tolerance: 1e-12,
            row_sum_tolerance: 1e-12,
            kernel_features: 4096,
            kernel_seeds: 10,
            kernel_pairs: 5,
            kernel_input_dim: 4,
            kernel_tolerance: 0.05,
            fidelity_shape: vec![4, 5],
            fidelity_d_head: 4,
            fidelity_features: 2048,
            fidelity_seeds: 10,
            fidelity_tolerance: 0.1,
            input_range: 0.5,
            time_limit_seconds: 60.0,
            fault: None,
        }
    }
}

impl EquivConfig {
    /// The shape grid of the oracle comparison.
    pub fn shape_grid(&self) -> Vec<Vec<usize>> {
        if let Some(s) = &self.shapes {
            return s.clone();
        }
        let mut out = Vec::new();
        let mut current = Vec::new();
        fn rec(cfg: &EquivConfig, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if !current.is_empty() {
                out.push(current.clone());
            }
            if current.len() == cfg.max_order {
                return;
            }
            let used: usize = current.iter().product();
            for side in 1..=cfg.max_side {
                if used * side <= cfg.max_tokens {
                    current.push(side);
                    rec(cfg, current, out);
                    current.pop();
                }
            }
        }
        rec(self, &mut current, &mut out);
        out
    }

    fn validate(&self) -> Result<(), CliError> {
        if let Some(s) = &self.shapes {
            check_shapes("equiv.shapes", s)?;
        }
        if self.max_order == 0 || self.max_side == 0 || self.max_tokens == 0 {
            return config_err("equiv: max_order, max_side and max_tokens must be positive");
        }
        if self.heads.is_empty() || self.heads.iter().any(|&h| h == 0 || self.d_model % h != 0) {
            return config_err(format!("equiv: heads {:?} must divide d_model {}", self.heads, self.d_model));
        }
        if self.seeds == 0 || self.identity_seeds == 0 || self.kernel_seeds == 0 || self.fidelity_seeds == 0 {
            return config_err("equiv: seed counts must be positive");
        }
        if self.identity_dims.len() < 2 || self.identity_dims.contains(&0) {
            return config_err("equiv.identity_dims needs at least two positive sides");
        }
        if self.reduction_lengths.is_empty() || self.reduction_lengths.contains(&0) {
            return config_err("equiv.reduction_lengths must be positive");
        }
        check_shapes("equiv.fidelity_shape", std::slice::from_ref(&self.fidelity_shape))?;
        if self.kernel_features == 0 || self.fidelity_features == 0 || self.reduction_features == 0 {
            return config_err("equiv: feature counts must be positive");
        }
        if self.kernel_input_dim == 0 || self.fidelity_d_head == 0 || self.kernel_pairs == 0 {
            return config_err("equiv: kernel dimensions must be positive");
        }
        if !(self.input_range > 0.0) {
            return config_err("equiv.input_range must be positive");
        }
        Ok(())
    }
}

/// Adjoint corruption for the checker self-test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub op: String,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub targets: Vec<GradTarget>,
    pub variants: Vec<AttentionVariant>,
    pub seeds: usize,
    pub dims: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub batch: usize,
    pub num_features: usize,
    pub tolerance: f64,
    pub eps: f64,
    pub coords_per_param: usize,
    pub floor: f64,
    pub quadratic_tolerance: f64,
    pub time_limit_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultConfig>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            targets: vec![GradTarget::Attention, GradTarget::Block],
            variants: AttentionVariant::ALL.to_vec(),
            seeds: 5,
            dims: vec![3, 4],
            d_model: 8,
            n_heads: 2,
            batch: 2,
            num_features: 16,
            tolerance: 1e-5,
            eps: 1e-5,
            coords_per_param: 64,
            floor: 1e-4,
            quadratic_tolerance: 1e-9,
            time_limit_seconds: 300.0,
            fault: None,
        }
    }
}

impl GradcheckConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.targets.is_empty() || self.variants.is_empty() || self.seeds == 0 {
            return config_err("gradcheck: targets, variants and seeds must be non-empty");
        }
        check_shapes("gradcheck.dims", std::slice::from_ref(&self.dims))?;
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 || self.batch == 0 || self.num_features == 0 {
            return config_err("gradcheck: bad model dimensions");
        }
        if !(self.eps > 0.0) || !(self.floor > 0.0) || self.coords_per_param == 0 {
            return config_err("gradcheck: eps, floor and coords_per_param must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixSource {
    /// Softmax of a random Gaussian matrix.
    Random,
    /// Implied attention matrix of full attention on a random input.
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KronrankConfig {
    pub dims: Vec<Vec<usize>>,
    pub sources: Vec<MatrixSource>,
    pub seeds: usize,
    pub planted_seeds: usize,
    pub d_model: usize,
    pub exact_tolerance: f64,
    pub planted_tolerance: f64,
    /// Allowed increase between consecutive ranks.
    pub monotone_slack: f64,
    pub max_sweeps: usize,
}

impl Default for KronrankConfig {
    fn default() -> Self {
        KronrankConfig {
            dims: vec![vec![3, 3], vec![2, 3], vec![2, 4]],
            sources: vec![MatrixSource::Random, MatrixSource::Attention],
            seeds: 5,
            planted_seeds: 5,
            d_model: 4,
            exact_tolerance: 1e-8,
            planted_tolerance: 1e-10,
            monotone_slack: 1e-12,
            max_sweeps: 200,
        }
    }
}

impl KronrankConfig {
    fn validate(&self) -> Result<(), CliError> {
        check_shapes("kronrank.dims", &self.dims)?;
        if self.seeds == 0 || self.d_model == 0 {
            return config_err("kronrank: seeds and d_model must be positive");
        }
        if self.dims.iter().any(|d| d.iter().product::<usize>() > 64) {
            return config_err("kronrank: matrices above 64 × 64 are not supported");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSeries {
    pub variant: AttentionVariant,
    pub shapes: Vec<Vec<usize>>,
    /// Accepted range of the fitted time exponent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<[f64; 2]>,
    /// Check that peak memory is linear in the token count.
    #[serde(default)]
    pub memory_linear: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub series: Vec<BenchSeries>,
    pub d_model: usize,
    pub n_heads: usize,
    pub num_features: usize,
    pub reps: usize,
    pub warmups: usize,
    /// Largest allowed ratio between measured and fitted peak memory.
    pub memory_ratio: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let squares = |sides: &[usize]| sides.iter().map(|&s| vec![s, s]).collect::<Vec<_>>();
        BenchConfig {
            series: vec![
                BenchSeries {
                    variant: AttentionVariant::FactoredLinear,
                    shapes: squares(&[16, 24, 32, 48, 64, 96, 128]),
                    slope: Some([0.8, 1.3]),
                    memory_linear: true,
                },
                BenchSeries {
                    variant: AttentionVariant::FullSoftmax,
                    shapes: squares(&[8, 12, 16, 24, 32]),
                    slope: Some([1.7, 2.3]),
                    memory_linear: false,
                },
            ],
            d_model: 8,
            n_heads: 1,
            num_features: 16,
            reps: 5,
            warmups: 2,
            memory_ratio: 1.3,
        }
    }
}

impl BenchConfig {
    fn validate(&self, cap: usize) -> Result<(), CliError> {
        if self.series.is_empty() {
            return config_err("bench: no series");
        }
        for s in &self.series {
            check_shapes("bench.series.shapes", &s.shapes)?;
            if s.variant.is_full() && s.variant != AttentionVariant::FullLinear {
                if let Some(big) = s.shapes.iter().find(|d| d.iter().product::<usize>() > cap) {
                    return config_err(format!("bench: shape {big:?} exceeds the oracle cap {cap}"));
                }
            }
            if (s.slope.is_some() || s.memory_linear) && s.shapes.len() < 3 {
                return config_err("bench: fits need at least three shapes");
            }
        }
        if self.reps < 3 {
            return config_err(format!("bench: reps {} < 3", self.reps));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 || self.num_features == 0 {
            return config_err("bench: bad model dimensions");
        }
        if !(self.memory_ratio >= 1.0) {
            return config_err("bench.memory_ratio must be at least 1");
        }
        Ok(())
    }
}

fn default_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        task: SyntheticTask::SeparableForecast {
            variables: 6,
            length: 24,
            horizon: 4,
            patch: 4,
        },
        train: 512,
        val: 128,
        noise: 0.05,
        seed: 0,
    }
}

fn default_adam() -> AdamConfig {
    AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// The task seed is offset by the run seed.
    pub task: SyntheticTaskSpec,
    pub d_model: usize,
    pub heads: Vec<usize>,
    pub variants: Vec<AttentionVariant>,
    /// Positional-mode masks of the token grid.
    pub masks: Vec<Vec<bool>>,
    pub seeds: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub num_features: usize,
    pub reference_tolerance: f64,
    pub time_limit_seconds: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            task: default_task(),
            d_model: 16,
            heads: vec![2],
            variants: vec![AttentionVariant::FactoredSoftmax],
            masks: vec![vec![true, true], vec![true, false], vec![false, true], vec![false, false]],
            seeds: 5,
            steps: 500,
            batch_size: 32,
            adam: default_adam(),
            num_features: 64,
            reference_tolerance: 1e-12,
            time_limit_seconds: 900.0,
        }
    }
}

/// Model matching a synthetic task: one token per forecast patch, one per
/// voxel.
pub fn model_for_task(task: &SyntheticTask, d_model: usize, n_heads: usize) -> ModelConfig {
    match *task {
        SyntheticTask::SeparableForecast {
            variables,
            length,
            horizon,
            patch,
        } => ModelConfig::new(
            vec![variables, length],
            1,
            vec![1, patch],
            d_model,
            n_heads,
            HeadConfig::new(Task::Forecast { horizon }),
        ),
        SyntheticTask::VoxelClassify { side, classes } => ModelConfig::new(
            side.to_vec(),
            1,
            vec![1, 1, 1],
            d_model,
            n_heads,
            HeadConfig::new(Task::Classify { classes }),
        ),
    }
}

impl AblateConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.heads.is_empty() || self.variants.is_empty() || self.masks.is_empty() || self.seeds == 0 {
            return config_err("ablate: heads, variants, masks and seeds must be non-empty");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return config_err("ablate: steps and batch_size must be positive");
        }
        for &h in &self.heads {
            let mut model = model_for_task(&self.task.task, self.d_model, h);
            for &v in &self.variants {
                for m in &self.masks {
                    model.variant = v;
                    model.mode_mask = Some(m.clone());
                    if v.is_full() && m.iter().any(|on| !on) {
                        continue;
                    }
                    model.validate().map_err(|e| CliError::Config(format!("ablate: {e}")))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub task: SyntheticTaskSpec,
    /// Derived from the task when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    /// Required relative drop of the training loss, `1 − final/initial`.
    pub min_decrease: f64,
    /// Ridge penalty of the linear readout baseline (forecast tasks).
    pub ridge: f64,
    pub checkpoint: bool,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        TrainCommandConfig {
            task: default_task(),
            model: None,
            train: TrainConfig {
                steps: 200,
                batch_size: 32,
                adam: default_adam(),
                seed: 0,
                eval_every: 50,
            },
            min_decrease: 0.5,
            ridge: 1e-3,
            checkpoint: true,
        }
    }
}

impl TrainCommandConfig {
    pub fn model_config(&self) -> ModelConfig {
        self.model
            .clone()
            .unwrap_or_else(|| model_for_task(&self.task.task, 16, 2))
    }

    fn validate(&self) -> Result<(), CliError> {
        let model = self.model_config();
        model.validate().map_err(|e| CliError::Config(format!("train.model: {e}")))?;
        let expected = model_for_task(&self.task.task, model.d_model, model.n_heads);
        if model.input_dims != expected.input_dims || model.in_channels != 1 || model.head.task != expected.head.task {
            return config_err(format!(
                "train.model: input {:?} × {} with {:?} does not fit the task input {:?} with {:?}",
                model.input_dims, model.in_channels, model.head.task, expected.input_dims, expected.head.task
            ));
        }
        if self.train.batch_size == 0 {
            return config_err("train: batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.min_decrease) {
            return config_err("train.min_decrease must lie in [0, 1)");
        }
        Ok(())
    }
}
