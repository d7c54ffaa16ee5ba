use std::sync::Arc;

use hot_core::attention::{FeatureMapSpec, HeadWeights, Pooling};
use hot_core::{AttentionWeights, DenseTensor, FeatureMap};
use rand::Rng;

use crate::layer::{Bound, HOTBlockConfig, LayerError, NormPlacement, Params, RotaryConfig};
use crate::tape::{Tape, Var};

/// Weights of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub attention: AttentionWeights,
    pub ln1_gamma: DenseTensor,
    pub ln1_beta: DenseTensor,
    pub ln2_gamma: DenseTensor,
    pub ln2_beta: DenseTensor,
    pub w1: DenseTensor,
    pub b1: DenseTensor,
    pub w2: DenseTensor,
    pub b2: DenseTensor,
}

pub(crate) fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<DenseTensor, LayerError> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Ok(DenseTensor::random_uniform([rows, cols], -a, a, rng)?)
}

const HEAD_PARTS: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];

impl BlockWeights {
    /// Glorot-uniform matrices, zero biases, unit LN gains.
    pub fn init<R: Rng + ?Sized>(cfg: &HOTBlockConfig, rng: &mut R) -> Result<Self, LayerError> {
        cfg.validate()?;
        let (d, f) = (cfg.d_model, cfg.ffn_hidden);
        let ones = || DenseTensor::full([d], 1.0);
        let zeros = |n: usize| DenseTensor::zeros([n]);
        Ok(BlockWeights {
            attention: AttentionWeights::glorot(d, cfg.n_heads, rng)?,
            ln1_gamma: ones()?,
            ln1_beta: zeros(d)?,
            ln2_gamma: ones()?,
            ln2_beta: zeros(d)?,
            w1: glorot(d, f, rng)?,
            b1: zeros(f)?,
            w2: glorot(f, d, rng)?,
            b2: zeros(d)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.attention.param_count()
            + [
                &self.ln1_gamma,
                &self.ln1_beta,
                &self.ln2_gamma,
                &self.ln2_beta,
                &self.w1,
                &self.b1,
                &self.w2,
                &self.b2,
            ]
            .iter()
            .map(|t| t.numel())
            .sum::<usize>()
    }

    fn named(&self) -> Vec<(String, &DenseTensor)> {
        let mut out = Vec::new();
        for (h, head) in self.attention.heads().iter().enumerate() {
            for (part, t) in HEAD_PARTS.iter().zip([&head.w_q, &head.w_k, &head.w_v, &head.w_o]) {
                out.push((format!("attn.{h}.{part}"), t));
            }
        }
        out.extend([
            ("ln1.gamma".to_string(), &self.ln1_gamma),
            ("ln1.beta".to_string(), &self.ln1_beta),
            ("ln2.gamma".to_string(), &self.ln2_gamma),
            ("ln2.beta".to_string(), &self.ln2_beta),
            ("ffn.w1".to_string(), &self.w1),
            ("ffn.b1".to_string(), &self.b1),
            ("ffn.w2".to_string(), &self.w2),
            ("ffn.b2".to_string(), &self.b2),
        ]);
        out
    }

    pub fn write_params(&self, prefix: &str, params: &mut Params) -> Result<(), LayerError> {
        for (name, t) in self.named() {
            params.insert(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn from_params(prefix: &str, params: &Params, n_heads: usize) -> Result<Self, LayerError> {
        let get = |name: &str| params.require(&format!("{prefix}{name}")).cloned();
        let heads = (0..n_heads)
            .map(|h| {
                Ok(HeadWeights {
                    w_q: get(&format!("attn.{h}.w_q"))?,
                    w_k: get(&format!("attn.{h}.w_k"))?,
                    w_v: get(&format!("attn.{h}.w_v"))?,
                    w_o: get(&format!("attn.{h}.w_o"))?,
                })
            })
            .collect::<Result<Vec<_>, LayerError>>()?;
        Ok(BlockWeights {
            attention: AttentionWeights::new(heads)?,
            ln1_gamma: get("ln1.gamma")?,
            ln1_beta: get("ln1.beta")?,
            ln2_gamma: get("ln2.gamma")?,
            ln2_beta: get("ln2.beta")?,
            w1: get("ffn.w1")?,
            b1: get("ffn.b1")?,
            w2: get("ffn.w2")?,
            b2: get("ffn.b2")?,
        })
    }
}

pub(crate) struct HeadVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
}

fn head_vars(prefix: &str, bound: &Bound, n_heads: usize) -> Result<Vec<HeadVars>, LayerError> {
    let v = |h: usize, part: &str| bound.var(&format!("{prefix}attn.{h}.{part}"));
    (0..n_heads)
        .map(|h| {
            Ok(HeadVars {
                w_q: v(h, "w_q")?,
                w_k: v(h, "w_k")?,
                w_v: v(h, "w_v")?,
                w_o: v(h, "w_o")?,
            })
        })
        .collect()
}

pub(crate) struct BlockVars {
    heads: Vec<HeadVars>,
    ln1: (Var, Var),
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BlockVars {
    pub(crate) fn from_bound(prefix: &str, bound: &Bound, n_heads: usize) -> Result<Self, LayerError> {
        let v = |name: &str| bound.var(&format!("{prefix}{name}"));
        Ok(BlockVars {
            heads: head_vars(prefix, bound, n_heads)?,
            ln1: (v("ln1.gamma")?, v("ln1.beta")?),
            ln2: (v("ln2.gamma")?, v("ln2.beta")?),
            w1: v("ffn.w1")?,
            b1: v("ffn.b1")?,
            w2: v("ffn.w2")?,
            b2: v("ffn.b2")?,
        })
    }
}

/// A validated block configuration with its drawn random features.
#[derive(Clone, Debug)]
pub struct HotBlock {
    cfg: HOTBlockConfig,
    omega: Option<Arc<DenseTensor>>,
}

impl HotBlock {
    pub fn new(cfg: HOTBlockConfig) -> Result<Self, LayerError> {
        cfg.validate()?;
        let omega = if cfg.variant.is_linear() {
            let spec = FeatureMapSpec {
                num_features: cfg.feature_map.num_features,
                seed: cfg.feature_map.seed,
                input_dim: cfg.d_head(),
                orthogonal: cfg.feature_map.orthogonal,
            };
            Some(Arc::new(FeatureMap::new(spec)?.omega().clone()))
        } else {
            None
        };
        Ok(HotBlock { cfg, omega })
    }

    pub fn config(&self) -> &HOTBlockConfig {
        &self.cfg
    }

    /// Random-feature matrix of the linear variants.
    pub fn omega(&self) -> Option<&DenseTensor> {
        self.omega.as_deref()
    }

    pub(crate) fn attention_bound(&self, tape: &mut Tape, x: Var, bound: &Bound, prefix: &str) -> Result<Var, LayerError> {
        let heads = head_vars(prefix, bound, self.cfg.n_heads)?;
        self.attention(tape, x, &heads)
    }

    pub(crate) fn forward_bound(&self, tape: &mut Tape, x: Var, bound: &Bound, prefix: &str) -> Result<Var, LayerError> {
        let vars = BlockVars::from_bound(prefix, bound, self.cfg.n_heads)?;
        self.forward_tape(tape, x, &vars)
    }

    fn check_tokens(&self, tape: &Tape, x: Var) -> Result<(), LayerError> {
        let dims = tape.dims(x);
        let k = self.cfg.order();
        if dims.len() != k + 2 || dims[1..=k] != self.cfg.dims[..] || dims[k + 1] != self.cfg.d_model {
            return Err(LayerError::Input(format!(
                "expected (B, {:?}, {}), got {dims:?}",
                self.cfg.dims, self.cfg.d_model
            )));
        }
        Ok(())
    }

    /// Multihead attention on `(B, N_1..N_k, D)`; the batch mode never
    /// attends.
    pub(crate) fn attention(&self, tape: &mut Tape, x: Var, heads: &[HeadVars]) -> Result<Var, LayerError> {
        self.check_tokens(tape, x)?;
        let cfg = &self.cfg;
        let batch = tape.dims(x)[0];
        let k = cfg.order();
        let d_head = cfg.d_head();
        let rotary = match &cfg.rotary {
            Some(r) => r.pair_split(d_head)?,
            None => Vec::new(),
        };
        let tokens: usize = cfg.dims.iter().product();
        let mut head_dims = vec![batch];
        head_dims.extend(&cfg.dims);
        head_dims.push(d_head);
        let mut total: Option<Var> = None;
        for head in heads {
            let mut q = tape.linear(x, head.w_q)?;
            let mut kk = tape.linear(x, head.w_k)?;
            let mut v = tape.linear(x, head.w_v)?;
            for &(mode, offset, pairs) in &rotary {
                let base = cfg.rotary.as_ref().map_or(10000.0, |r| r.base);
                q = tape.rotary(q, mode + 1, offset, pairs, base)?;
                kk = tape.rotary(kk, mode + 1, offset, pairs, base)?;
            }
            let (modes, mask): (usize, Vec<bool>) = if cfg.variant.is_full() {
                q = tape.reshape(q, [batch, tokens, d_head])?;
                kk = tape.reshape(kk, [batch, tokens, d_head])?;
                v = tape.reshape(v, [batch, tokens, d_head])?;
                (1, vec![true])
            } else {
                (k, cfg.mode_mask.clone())
            };
            let grid = tape.dims(q)[1..=modes].to_vec();
            let mut p = v;
            for mode in (0..modes).filter(|&m| mask[m]) {
                let axis = mode + 1;
                let others: usize = grid.iter().product::<usize>() / grid[mode];
                let mut qt = tape.sum_keep(q, &[0, axis, modes + 1])?;
                let mut kt = tape.sum_keep(kk, &[0, axis, modes + 1])?;
                if cfg.pooling == Pooling::Mean && others > 1 {
                    qt = tape.scale(qt, 1.0 / others as f64)?;
                    kt = tape.scale(kt, 1.0 / others as f64)?;
                }
                p = if cfg.variant.is_linear() {
                    self.kernel_apply(tape, p, qt, kt, axis)?
                } else {
                    let scores = tape.bmm_nt(qt, kt)?;
                    let scores = tape.scale(scores, cfg.scale())?;
                    let s = tape.softmax(scores)?;
                    tape.mode_product(p, s, axis, true)?
                };
            }
            if cfg.variant.is_full() {
                p = tape.reshape(p, head_dims.clone())?;
            }
            let o = tape.linear(p, head.w_o)?;
            total = Some(match total {
                Some(t) => tape.add(t, o)?,
                None => o,
            });
        }
        total.ok_or_else(|| LayerError::Config("no heads".into()))
    }

    /// `((P ×_axis φ(K̃)ᵀ) ×_axis φ(Q̃)) / z` with `z = φ(Q̃) Σ_rows φ(K̃)`.
    fn kernel_apply(&self, tape: &mut Tape, p: Var, qt: Var, kt: Var, axis: usize) -> Result<Var, LayerError> {
        let omega = self
            .omega
            .clone()
            .ok_or_else(|| LayerError::Config("linear variant without feature map".into()))?;
        let c = self.cfg.scale().sqrt();
        let qs = tape.scale(qt, c)?;
        let ks = tape.scale(kt, c)?;
        let fq = tape.feature_map(qs, omega.clone())?;
        let fk = tape.feature_map(ks, omega)?;
        let (b, n, m) = (tape.dims(fq)[0], tape.dims(fq)[1], tape.dims(fq)[2]);
        let fk_t = tape.permute(fk, &[0, 2, 1])?;
        let kv = tape.mode_product(p, fk_t, axis, true)?;
        let num = tape.mode_product(kv, fq, axis, true)?;
        let ksum = tape.sum_keep(fk, &[0, 2])?;
        let ksum = tape.reshape(ksum, [b, m, 1])?;
        let z = tape.mode_product(ksum, fq, 1, true)?;
        let z = tape.reshape(z, [b, n])?;
        Ok(tape.div_along(num, z, axis, self.cfg.z_floor)?)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, w: &BlockVars) -> Result<Var, LayerError> {
        let h = tape.linear(x, w.w1)?;
        let h = tape.add_bias(h, w.b1)?;
        let h = tape.gelu(h)?;
        let o = tape.linear(h, w.w2)?;
        Ok(tape.add_bias(o, w.b2)?)
    }

    pub(crate) fn forward_tape(&self, tape: &mut Tape, x: Var, w: &BlockVars) -> Result<Var, LayerError> {
        let eps = self.cfg.ln_eps;
        match self.cfg.norm {
            NormPlacement::Post => {
                let a = self.attention(tape, x, &w.heads)?;
                let r = tape.add(x, a)?;
                let y1 = tape.layer_norm(r, w.ln1.0, w.ln1.1, eps)?;
                let f = self.ffn(tape, y1, w)?;
                let r = tape.add(y1, f)?;
                Ok(tape.layer_norm(r, w.ln2.0, w.ln2.1, eps)?)
            }
            NormPlacement::Pre => {
                let n = tape.layer_norm(x, w.ln1.0, w.ln1.1, eps)?;
                let a = self.attention(tape, n, &w.heads)?;
                let y1 = tape.add(x, a)?;
                let n = tape.layer_norm(y1, w.ln2.0, w.ln2.1, eps)?;
                let f = self.ffn(tape, n, w)?;
                Ok(tape.add(y1, f)?)
            }
        }
    }
}

fn with_batch(x: &DenseTensor) -> Result<DenseTensor, LayerError> {
    let mut dims = vec![1];
    dims.extend(x.dims());
    Ok(x.reshape(dims)?)
}

fn without_batch(tape: &Tape, v: Var) -> Result<DenseTensor, LayerError> {
    let t = tape.value(v);
    Ok(t.reshape(t.dims()[1..].to_vec())?)
}

/// One encoder block on an unbatched `(N_1..N_k, D)` input.
pub fn hot_block_forward(
    x: &DenseTensor,
    cfg: &HOTBlockConfig,
    weights: &BlockWeights,
) -> Result<DenseTensor, LayerError> {
    let block = HotBlock::new(cfg.clone())?;
    let mut params = Params::new();
    weights.write_params("", &mut params)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let vars = BlockVars::from_bound("", &bound, cfg.n_heads)?;
    let xv = tape.constant(with_batch(x)?)?;
    let y = block.forward_tape(&mut tape, xv, &vars)?;
    without_batch(&tape, y)
}

/// The attention sublayer alone on an unbatched `(N_1..N_k, D)` input.
pub fn block_attention(
    x: &DenseTensor,
    cfg: &HOTBlockConfig,
    weights: &AttentionWeights,
) -> Result<DenseTensor, LayerError> {
    let block = HotBlock::new(cfg.clone())?;
    let mut tape = Tape::new();
    let heads = weights
        .heads()
        .iter()
        .map(|h| {
            Ok(HeadVars {
                w_q: tape.constant(h.w_q.clone())?,
                w_k: tape.constant(h.w_k.clone())?,
                w_v: tape.constant(h.w_v.clone())?,
                w_o: tape.constant(h.w_o.clone())?,
            })
        })
        .collect::<Result<Vec<_>, LayerError>>()?;
    let xv = tape.constant(with_batch(x)?)?;
    let y = block.attention(&mut tape, xv, &heads)?;
    without_batch(&tape, y)
}

/// Rotary encoding of a per-head `(N_1..N_k, D_H)` tensor.
pub fn rotary_encode(t: &DenseTensor, cfg: &RotaryConfig) -> Result<DenseTensor, LayerError> {
    let k = t.order() - 1;
    if cfg.modes.len() != k {
        return Err(LayerError::Config(format!("rotary flags {} for {k} modes", cfg.modes.len())));
    }
    let split = cfg.pair_split(t.dims()[k])?;
    let mut tape = Tape::new();
    let mut v = tape.constant(t.clone())?;
    for (mode, offset, pairs) in split {
        v = tape.rotary(v, mode, offset, pairs, cfg.base)?;
    }
    Ok(tape.value(v).clone())
}
