use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hot_core::io::{read_tensor, write_tensor};
use hot_core::DenseTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layer::block::{glorot, BlockVars};
use crate::layer::{
    BlockWeights, Bound, HOTBlockConfig, HeadPooling, HotBlock, LayerError, ModelConfig,
    PatchEmbedConfig, Params, Task,
};
use crate::tape::{Tape, Var};

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    params: BTreeMap<String, String>,
}

/// Patch embedding, stacked encoder blocks and a pooling head.
#[derive(Clone, Debug)]
pub struct HotModel {
    config: ModelConfig,
    block: HotBlock,
    params: Params,
}

fn block_prefix(i: usize) -> String {
    format!("blocks.{i}.")
}

impl HotModel {
    /// Fresh parameters drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self, LayerError> {
        config.validate()?;
        let block_cfg = config.block_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = Params::new();
        let patch_in = config.patch.patch_volume() * config.in_channels;
        params.insert("embed.weight", glorot(patch_in, config.d_model, &mut rng)?)?;
        params.insert("embed.bias", DenseTensor::zeros([config.d_model])?)?;
        for i in 0..config.depth {
            BlockWeights::init(&block_cfg, &mut rng)?.write_params(&block_prefix(i), &mut params)?;
        }
        let (hin, hout) = (
            config.head_input_width(&block_cfg.dims),
            config.head_output_width(),
        );
        params.insert("head.weight", glorot(hin, hout, &mut rng)?)?;
        params.insert("head.bias", DenseTensor::zeros([hout])?)?;
        Ok(HotModel {
            config,
            block: HotBlock::new(block_cfg)?,
            params,
        })
    }

    /// Model with the given parameters; names and shapes must match a fresh
    /// initialisation of `config`.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self, LayerError> {
        let mut model = HotModel::new(config)?;
        if params.len() != model.params.len() {
            return Err(LayerError::Input(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (name, value) in params.iter() {
            let slot = model
                .params
                .get_mut(name)
                .ok_or_else(|| LayerError::Input(format!("unexpected parameter {name}")))?;
            if slot.dims() != value.dims() {
                return Err(LayerError::ParamShape {
                    name: name.to_string(),
                    expected: slot.dims().to_vec(),
                    found: value.dims().to_vec(),
                });
            }
            *slot = value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn block_config(&self) -> &HOTBlockConfig {
        self.block.config()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Expected input shape `(B, raw dims.., C)` for batch `b`.
    pub fn input_dims(&self, b: usize) -> Vec<usize> {
        let mut dims = vec![b];
        dims.extend(&self.config.input_dims);
        dims.push(self.config.in_channels);
        dims
    }

    /// Output of the model for `x` recorded on `tape`, with parameters
    /// bound by [`Params::bind`].
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, LayerError> {
        let dims = tape.dims(x).to_vec();
        let batch = dims[0];
        if dims != self.input_dims(batch) {
            return Err(LayerError::Input(format!(
                "expected input {:?}, got {dims:?}",
                self.input_dims(batch)
            )));
        }
        let w = bound.var("embed.weight")?;
        let b = bound.var("embed.bias")?;
        let mut h = patch_embed_tape(tape, x, &self.config.patch, w, b)?;
        for i in 0..self.config.depth {
            let vars = BlockVars::from_bound(&block_prefix(i), bound, self.config.n_heads)?;
            h = self.block.forward_tape(tape, h, &vars)?;
        }
        self.head(tape, bound, h)
    }

    fn head(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var, LayerError> {
        let dims = tape.dims(h).to_vec();
        let (batch, k, d) = (dims[0], dims.len() - 2, self.config.d_model);
        let grid = &dims[1..=k];
        let pooled = match (self.config.head.task, self.config.head.pooling) {
            (Task::Forecast { .. }, HeadPooling::Mean) => {
                let rest: usize = grid[1..].iter().product();
                let s = tape.sum_keep(h, &[0, 1, k + 1])?;
                tape.scale(s, 1.0 / rest as f64)?
            }
            (Task::Forecast { .. }, HeadPooling::Flatten) => {
                let rest: usize = grid[1..].iter().product();
                tape.reshape(h, [batch, grid[0], rest * d])?
            }
            (Task::Classify { .. }, HeadPooling::Mean) => {
                let all: usize = grid.iter().product();
                let s = tape.sum_keep(h, &[0, k + 1])?;
                tape.scale(s, 1.0 / all as f64)?
            }
            (Task::Classify { .. }, HeadPooling::Flatten) => {
                let all: usize = grid.iter().product();
                tape.reshape(h, [batch, all * d])?
            }
        };
        let o = tape.linear(pooled, bound.var("head.weight")?)?;
        let o = tape.add_bias(o, bound.var("head.bias")?)?;
        Ok(match self.config.head.task {
            Task::Forecast { .. } => tape.permute(o, &[0, 2, 1])?,
            Task::Classify { .. } => o,
        })
    }

    /// Inference on `(B, raw dims.., C)`: forecasts `(B, S, N)` or logits
    /// `(B, C)`.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor, LayerError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let y = self.forward_tape(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Writes one tensor file per parameter and a JSON manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), LayerError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let file = format!("{name}.hot");
            write_tensor(dir.join(&file), t)?;
            files.insert(name.to_string(), file);
        }
        let manifest = Manifest {
            config: self.config.clone(),
            params: files,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| LayerError::Json(e.to_string()))?;
        fs::write(dir.join(MANIFEST), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, LayerError> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| LayerError::Json(e.to_string()))?;
        let template = HotModel::new(manifest.config.clone())?;
        let mut params = Params::new();
        for name in template.params.names() {
            let file = manifest
                .params
                .get(name)
                .ok_or_else(|| LayerError::MissingParam(name.to_string()))?;
            params.insert(name, read_tensor(dir.join(file))?)?;
        }
        if manifest.params.len() != params.len() {
            return Err(LayerError::Input("manifest lists unknown parameters".into()));
        }
        HotModel::from_params(manifest.config, params)
    }
}

fn patch_embed_tape(
    tape: &mut Tape,
    x: Var,
    cfg: &PatchEmbedConfig,
    w: Var,
    b: Var,
) -> Result<Var, LayerError> {
    let dims = tape.dims(x).to_vec();
    let k = dims.len() - 2;
    let (batch, channels) = (dims[0], dims[k + 1]);
    let grid = cfg.token_dims(&dims[1..=k])?;
    let mut split = vec![batch];
    for (&n, &p) in grid.iter().zip(&cfg.size) {
        split.extend([n, p]);
    }
    split.push(channels);
    let h = tape.reshape(x, split)?;
    let mut axes = vec![0];
    axes.extend((0..k).map(|i| 1 + 2 * i));
    axes.extend((0..k).map(|i| 2 + 2 * i));
    axes.push(2 * k + 1);
    let h = tape.permute(h, &axes)?;
    let mut tokens = vec![batch];
    tokens.extend(&grid);
    tokens.push(cfg.patch_volume() * channels);
    let h = tape.reshape(h, tokens)?;
    let h = tape.linear(h, w)?;
    Ok(tape.add_bias(h, b)?)
}

/// Non-overlapping patches of `(B, raw dims.., C)` projected by `weight`
/// (`patch volume · C × D`) plus `bias`.
pub fn patch_embed(
    x_raw: &DenseTensor,
    cfg: &PatchEmbedConfig,
    weight: &DenseTensor,
    bias: &DenseTensor,
) -> Result<DenseTensor, LayerError> {
    if x_raw.order() < 3 {
        return Err(LayerError::Input("patch_embed takes (B, N_1..N_k, C)".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_raw.clone())?;
    let w = tape.constant(weight.clone())?;
    let b = tape.constant(bias.clone())?;
    let y = patch_embed_tape(&mut tape, x, cfg, w, b)?;
    Ok(tape.value(y).clone())
}
