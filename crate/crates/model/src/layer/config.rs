use hot_core::attention::Pooling;
use serde::{Deserialize, Serialize};

use crate::layer::LayerError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    FullSoftmax,
    FullLinear,
    FactoredSoftmax,
    FactoredLinear,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::FullSoftmax,
        AttentionVariant::FullLinear,
        AttentionVariant::FactoredSoftmax,
        AttentionVariant::FactoredLinear,
    ];

    pub fn is_full(self) -> bool {
        matches!(self, AttentionVariant::FullSoftmax | AttentionVariant::FullLinear)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, AttentionVariant::FullLinear | AttentionVariant::FactoredLinear)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::FullSoftmax => "full-softmax",
            AttentionVariant::FullLinear => "full-linear",
            AttentionVariant::FactoredSoftmax => "factored-softmax",
            AttentionVariant::FactoredLinear => "factored-linear",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    /// `LN(x + f(x))`
    #[default]
    Post,
    /// `x + f(LN(x))`
    Pre,
}

fn default_base() -> f64 {
    10000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotaryConfig {
    /// One flag per positional mode.
    pub modes: Vec<bool>,
    #[serde(default = "default_base")]
    pub base: f64,
}

impl RotaryConfig {
    pub fn new(modes: Vec<bool>) -> Self {
        RotaryConfig {
            modes,
            base: default_base(),
        }
    }

    /// `(mode, first pair, pair count)` for each encoded mode. The `D_H / 2`
    /// feature pairs are split into contiguous chunks, one per encoded mode,
    /// earlier modes taking the remainder.
    pub fn pair_split(&self, d_head: usize) -> Result<Vec<(usize, usize, usize)>, LayerError> {
        let enabled: Vec<usize> = (0..self.modes.len()).filter(|&m| self.modes[m]).collect();
        if enabled.is_empty() {
            return Ok(Vec::new());
        }
        if d_head % 2 != 0 {
            return Err(LayerError::Config(format!("rotary needs an even head dim, got {d_head}")));
        }
        let total = d_head / 2;
        if total < enabled.len() {
            return Err(LayerError::Config(format!(
                "{} rotary modes but only {total} feature pairs",
                enabled.len()
            )));
        }
        let (each, extra) = (total / enabled.len(), total % enabled.len());
        let mut offset = 0;
        Ok(enabled
            .into_iter()
            .enumerate()
            .map(|(i, mode)| {
                let pairs = each + usize::from(i < extra);
                let out = (mode, offset, pairs);
                offset += pairs;
                out
            })
            .collect())
    }
}

fn default_features() -> usize {
    64
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapConfig {
    #[serde(default = "default_features")]
    pub num_features: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub orthogonal: bool,
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        FeatureMapConfig {
            num_features: default_features(),
            seed: 0,
            orthogonal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HOTBlockConfig {
    /// Positional dims `N_1..N_k` of the token grid.
    pub dims: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub variant: AttentionVariant,
    /// Per-mode attention switch; full variants need every mode on.
    pub mode_mask: Vec<bool>,
    pub feature_map: FeatureMapConfig,
    pub ln_eps: f64,
    pub norm: NormPlacement,
    pub rotary: Option<RotaryConfig>,
    pub pooling: Pooling,
    /// Score scale; `None` means `1/√D_H`.
    pub score_scale: Option<f64>,
    pub z_floor: f64,
}

impl HOTBlockConfig {
    /// Factored softmax, all modes on, FFN width `4D`, post-norm.
    pub fn new(dims: Vec<usize>, d_model: usize, n_heads: usize) -> Self {
        let k = dims.len();
        HOTBlockConfig {
            dims,
            d_model,
            n_heads,
            ffn_hidden: 4 * d_model,
            variant: AttentionVariant::FactoredSoftmax,
            mode_mask: vec![true; k],
            feature_map: FeatureMapConfig::default(),
            ln_eps: 1e-5,
            norm: NormPlacement::Post,
            rotary: None,
            pooling: Pooling::Sum,
            score_scale: None,
            z_floor: 1e-6,
        }
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn scale(&self) -> f64 {
        self.score_scale
            .unwrap_or_else(|| 1.0 / (self.d_head() as f64).sqrt())
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        let bad = |msg: String| Err(LayerError::Config(msg));
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad(format!("positional dims {:?}", self.dims));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("D = {} not divisible by R = {}", self.d_model, self.n_heads));
        }
        if self.ffn_hidden == 0 {
            return bad("FFN hidden dim must be positive".into());
        }
        if self.mode_mask.len() != self.order() {
            return bad(format!(
                "mode mask has {} entries for {} modes",
                self.mode_mask.len(),
                self.order()
            ));
        }
        if self.variant.is_full() && !self.mode_mask.iter().all(|&m| m) {
            return bad(format!("{} attends over every mode; mask must be all on", self.variant.name()));
        }
        if self.variant.is_linear() && self.feature_map.num_features == 0 {
            return bad("feature count must be positive".into());
        }
        if !(self.ln_eps > 0.0) || !(self.z_floor > 0.0) {
            return bad("ln_eps and z_floor must be positive".into());
        }
        if let Some(r) = &self.rotary {
            if r.modes.len() != self.order() {
                return bad(format!("rotary flags {} for {} modes", r.modes.len(), self.order()));
            }
            r.pair_split(self.d_head())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEmbedConfig {
    /// Patch size per positional mode.
    pub size: Vec<usize>,
    /// Stride per positional mode; must equal `size`.
    pub stride: Vec<usize>,
}

impl PatchEmbedConfig {
    pub fn new(size: Vec<usize>) -> Self {
        PatchEmbedConfig {
            stride: size.clone(),
            size,
        }
    }

    /// Token grid for raw positional dims.
    pub fn token_dims(&self, raw: &[usize]) -> Result<Vec<usize>, LayerError> {
        if self.size.len() != raw.len() || self.stride.len() != raw.len() {
            return Err(LayerError::Config(format!(
                "patch sizes {:?} for raw dims {raw:?}",
                self.size
            )));
        }
        if self.size != self.stride {
            return Err(LayerError::Config("only non-overlapping patches (stride = size)".into()));
        }
        raw.iter()
            .zip(&self.size)
            .map(|(&n, &p)| {
                if p == 0 || n % p != 0 {
                    Err(LayerError::Config(format!("length {n} not divisible by patch {p}")))
                } else {
                    Ok(n / p)
                }
            })
            .collect()
    }

    pub fn patch_volume(&self) -> usize {
        self.size.iter().product()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPooling {
    #[default]
    Mean,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// `(B, S, N)` output: `S` steps for each of the `N` positions of the
    /// first mode.
    Forecast { horizon: usize },
    /// `(B, C)` logits.
    Classify { classes: usize },
}

fn default_flatten_cap() -> usize {
    1 << 16
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub pooling: HeadPooling,
    pub task: Task,
    /// Largest flattened width a flatten head accepts.
    #[serde(default = "default_flatten_cap")]
    pub flatten_cap: usize,
}

impl HeadConfig {
    pub fn new(task: Task) -> Self {
        HeadConfig {
            pooling: HeadPooling::Mean,
            task,
            flatten_cap: default_flatten_cap(),
        }
    }
}

fn default_depth() -> usize {
    1
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_z_floor() -> f64 {
    1e-6
}

fn default_variant() -> AttentionVariant {
    AttentionVariant::FactoredSoftmax
}

/// Everything needed to build a [`crate::layer::HotModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw positional dims before patching.
    pub input_dims: Vec<usize>,
    pub in_channels: usize,
    pub patch: PatchEmbedConfig,
    pub d_model: usize,
    pub n_heads: usize,
    /// Defaults to `4 · d_model`.
    #[serde(default)]
    pub ffn_hidden: Option<usize>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_variant")]
    pub variant: AttentionVariant,
    /// Defaults to all modes on.
    #[serde(default)]
    pub mode_mask: Option<Vec<bool>>,
    #[serde(default)]
    pub feature_map: FeatureMapConfig,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default)]
    pub rotary: Option<RotaryConfig>,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub score_scale: Option<f64>,
    #[serde(default = "default_z_floor")]
    pub z_floor: f64,
    pub head: HeadConfig,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(input_dims: Vec<usize>, in_channels: usize, patch: Vec<usize>, d_model: usize, n_heads: usize, head: HeadConfig) -> Self {
        ModelConfig {
            input_dims,
            in_channels,
            patch: PatchEmbedConfig::new(patch),
            d_model,
            n_heads,
            ffn_hidden: None,
            depth: 1,
            variant: default_variant(),
            mode_mask: None,
            feature_map: FeatureMapConfig::default(),
            ln_eps: default_ln_eps(),
            norm: NormPlacement::Post,
            rotary: None,
            pooling: Pooling::Sum,
            score_scale: None,
            z_floor: default_z_floor(),
            head,
            init_seed: 0,
        }
    }

    pub fn token_dims(&self) -> Result<Vec<usize>, LayerError> {
        self.patch.token_dims(&self.input_dims)
    }

    pub fn block_config(&self) -> Result<HOTBlockConfig, LayerError> {
        let dims = self.token_dims()?;
        let k = dims.len();
        let cfg = HOTBlockConfig {
            dims,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden.unwrap_or(4 * self.d_model),
            variant: self.variant,
            mode_mask: self.mode_mask.clone().unwrap_or_else(|| vec![true; k]),
            feature_map: self.feature_map,
            ln_eps: self.ln_eps,
            norm: self.norm,
            rotary: self.rotary.clone(),
            pooling: self.pooling,
            score_scale: self.score_scale,
            z_floor: self.z_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        let block = self.block_config()?;
        if self.in_channels == 0 || self.depth == 0 {
            return Err(LayerError::Config("in_channels and depth must be positive".into()));
        }
        match self.head.task {
            Task::Forecast { horizon } => {
                if horizon == 0 {
                    return Err(LayerError::Config("forecast horizon must be positive".into()));
                }
                if self.patch.size[0] != 1 {
                    return Err(LayerError::Config(
                        "forecast heads predict per position of the first mode; its patch size must be 1".into(),
                    ));
                }
            }
            Task::Classify { classes } => {
                if classes == 0 {
                    return Err(LayerError::Config("class count must be positive".into()));
                }
            }
        }
        if self.head.pooling == HeadPooling::Flatten {
            let width = self.head_input_width(&block.dims);
            if width > self.head.flatten_cap {
                return Err(LayerError::Config(format!(
                    "flatten head width {width} exceeds cap {}",
                    self.head.flatten_cap
                )));
            }
        }
        Ok(())
    }

    /// Input width of the head's affine map.
    pub fn head_input_width(&self, token_dims: &[usize]) -> usize {
        let pooled: usize = match (self.head.pooling, self.head.task) {
            (HeadPooling::Mean, _) => 1,
            (HeadPooling::Flatten, Task::Forecast { .. }) => token_dims[1..].iter().product(),
            (HeadPooling::Flatten, Task::Classify { .. }) => token_dims.iter().product(),
        };
        pooled * self.d_model
    }

    pub fn head_output_width(&self) -> usize {
        match self.head.task {
            Task::Forecast { horizon } => horizon,
            Task::Classify { classes } => classes,
        }
    }
}
