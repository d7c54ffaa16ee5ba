//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in evaluation order. [`Tape::backward`]
//! walks the record once in reverse, accumulating adjoints, and consumes the
//! tape.

mod kernels;

use std::sync::Arc;

use hot_core::{DenseTensor, TensorError};
use thiserror::Error;

use kernels::{
    around, gemm_nn, gemm_nt, gemm_tn, mode_apply, mode_apply_grad_a, mode_apply_grad_t,
    reduce_map, rotate, ModeLayout, RotaryLayout,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("tape already consumed by backward")]
    Consumed,
    #[error("loss must have a single element, got shape {0}")]
    NonScalarLoss(String),
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TapeError {
    TapeError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Linear(Var, Var),
    AddBias(Var, Var),
    ModeProduct {
        t: Var,
        a: Var,
        mode: usize,
        batched: bool,
    },
    SumKeep {
        x: Var,
        keep: Vec<usize>,
    },
    BmmNt(Var, Var),
    Softmax(Var),
    FeatureMap {
        x: Var,
        omega: Arc<DenseTensor>,
    },
    DivAlong {
        t: Var,
        z: Var,
        mode: usize,
        floor: f64,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Rotary {
        x: Var,
        axis: usize,
        offset: usize,
        pairs: usize,
        base: f64,
    },
    Mse {
        pred: Var,
        target: DenseTensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SumAll(Var),
    Dot {
        x: Var,
        w: DenseTensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Linear(..) => "linear",
            Op::AddBias(..) => "add_bias",
            Op::ModeProduct { .. } => "mode_product",
            Op::SumKeep { .. } => "sum_keep",
            Op::BmmNt(..) => "bmm_nt",
            Op::Softmax(..) => "softmax",
            Op::FeatureMap { .. } => "feature_map",
            Op::DivAlong { .. } => "div_along",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Rotary { .. } => "rotary",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumAll(..) => "sum_all",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node {
    value: DenseTensor,
    op: Op,
    needs_grad: bool,
}

/// Multiplies the adjoints produced by one op kind; used to self-test
/// gradient checkers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointFault {
    pub op: String,
    pub factor: f64,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<AdjointFault>,
}

/// Adjoints of every leaf recorded with [`Tape::param`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseTensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const EXACT_SQRT_2_PI_INV: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * EXACT_SQRT_2_PI_INV * (-0.5 * x * x).exp()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the adjoints flowing out of every op named `op`.
    pub fn inject_fault(&mut self, fault: AdjointFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn check(&self, vars: &[Var]) -> Result<(), TapeError> {
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(TapeError::UnknownVar(v.0)),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: DenseTensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: DenseTensor, needs_grad: bool) -> Result<Var, TapeError> {
        self.check(&[])?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives an adjoint.
    pub fn param(&mut self, value: DenseTensor) -> Result<Var, TapeError> {
        self.leaf(value, true)
    }

    /// Leaf without an adjoint.
    pub fn constant(&mut self, value: DenseTensor) -> Result<Var, TapeError> {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(&[a, b])?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TapeError> {
        self.check(&[a])?;
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::Scale(a, c), &[a]))
    }

    /// Contracts the last mode of `x` with `w` (`in × out`).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, TapeError> {
        self.check(&[x, w])?;
        let (xv, wv) = (self.value(x), self.value(w));
        let last = xv.dims()[xv.order() - 1];
        if wv.order() != 2 || wv.dims()[0] != last {
            return Err(shape_err(
                "linear",
                format!("input {} against weight {}", xv.shape(), wv.shape()),
            ));
        }
        let out = wv.dims()[1];
        let rows = xv.numel() / last;
        let mut data = vec![0.0; rows * out];
        gemm_nn(xv.data(), wv.data(), &mut data, rows, last, out);
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = out;
        let v = DenseTensor::from_vec(dims, data)?;
        Ok(self.push(v, Op::Linear(x, w), &[x, w]))
    }

    /// Adds a vector along the last mode.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TapeError> {
        self.check(&[x, b])?;
        let (xv, bv) = (self.value(x), self.value(b));
        let last = xv.dims()[xv.order() - 1];
        if bv.numel() != last {
            return Err(shape_err(
                "add_bias",
                format!("input {} against bias {}", xv.shape(), bv.shape()),
            ));
        }
        let mut v = xv.clone();
        for row in v.data_mut().chunks_mut(last) {
            row.iter_mut().zip(bv.data()).for_each(|(x, &b)| *x += b);
        }
        Ok(self.push(v, Op::AddBias(x, b), &[x, b]))
    }

    fn mode_layout(&self, t: Var, a: Var, mode: usize, batched: bool) -> Result<ModeLayout, TapeError> {
        let (tv, av) = (self.value(t), self.value(a));
        let dims = tv.dims();
        if mode >= dims.len() {
            return Err(shape_err("mode_product", format!("mode {mode} of {}", tv.shape())));
        }
        let (outer, n, inner) = around(dims, mode);
        let (d, per_batch) = if batched {
            if mode == 0 || av.order() != 3 || av.dims()[0] != dims[0] || av.dims()[2] != n {
                return Err(shape_err(
                    "mode_product",
                    format!("batched factor {} against {} at mode {mode}", av.shape(), tv.shape()),
                ));
            }
            (av.dims()[1], Some(outer / dims[0]))
        } else {
            if av.order() != 2 || av.dims()[1] != n {
                return Err(shape_err(
                    "mode_product",
                    format!("factor {} against {} at mode {mode}", av.shape(), tv.shape()),
                ));
            }
            (av.dims()[0], None)
        };
        Ok(ModeLayout {
            outer,
            n,
            inner,
            d,
            per_batch,
        })
    }

    /// `t ×_mode a` with `a` a `d × N_mode` matrix, or with `batched` a
    /// `(B, d, N_mode)` stack applied per entry of the leading mode of `t`.
    pub fn mode_product(&mut self, t: Var, a: Var, mode: usize, batched: bool) -> Result<Var, TapeError> {
        self.check(&[t, a])?;
        let l = self.mode_layout(t, a, mode, batched)?;
        let data = mode_apply(self.value(t).data(), self.value(a).data(), &l);
        let mut dims = self.dims(t).to_vec();
        dims[mode] = l.d;
        let v = DenseTensor::from_vec(dims, data)?;
        Ok(self.push(
            v,
            Op::ModeProduct {
                t,
                a,
                mode,
                batched,
            },
            &[t, a],
        ))
    }

    /// Sums over every mode not in `keep` (ascending, possibly empty).
    pub fn sum_keep(&mut self, x: Var, keep: &[usize]) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let dims = self.dims(x).to_vec();
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&k| k >= dims.len()) {
            return Err(shape_err("sum_keep", format!("keep {keep:?} of {dims:?}")));
        }
        let map = reduce_map(&dims, keep);
        let mut kept: Vec<usize> = keep.iter().map(|&k| dims[k]).collect();
        if kept.is_empty() {
            kept.push(1);
        }
        let mut data = vec![0.0; kept.iter().product()];
        for (&m, &v) in map.iter().zip(self.value(x).data()) {
            data[m] += v;
        }
        let v = DenseTensor::from_vec(kept, data)?;
        Ok(self.push(
            v,
            Op::SumKeep {
                x,
                keep: keep.to_vec(),
            },
            &[x],
        ))
    }

    fn batch_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize), TapeError> {
        let d = self.dims(v);
        match d {
            [b, n, k] => Ok((*b, *n, *k)),
            _ => Err(shape_err(op, format!("expected (B, N, D), got {d:?}"))),
        }
    }

    /// Batched `a_b · b_bᵀ` for `a: (B, N, D)`, `b: (B, M, D)`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(&[a, b])?;
        let (bs, n, d) = self.batch_dims(a, "bmm_nt")?;
        let (bs2, m, d2) = self.batch_dims(b, "bmm_nt")?;
        if bs != bs2 || d != d2 {
            return Err(shape_err("bmm_nt", format!("{:?} against {:?}", self.dims(a), self.dims(b))));
        }
        let mut data = vec![0.0; bs * n * m];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_nt(
                &av[i * n * d..(i + 1) * n * d],
                &bv[i * m * d..(i + 1) * m * d],
                &mut data[i * n * m..(i + 1) * n * m],
                n,
                d,
                m,
            );
        }
        let v = DenseTensor::from_vec([bs, n, m], data)?;
        Ok(self.push(v, Op::BmmNt(a, b), &[a, b]))
    }

    /// Softmax along the last mode.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let mut v = self.value(x).clone();
        let last = v.dims()[v.order() - 1];
        for row in v.data_mut().chunks_mut(last) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            row.iter_mut().for_each(|e| *e /= total);
        }
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Positive random features along the last mode; `omega` (`M × D_H`) is
    /// a constant.
    pub fn feature_map(&mut self, x: Var, omega: Arc<DenseTensor>) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let xv = self.value(x);
        let d = xv.dims()[xv.order() - 1];
        if omega.order() != 2 || omega.dims()[1] != d {
            return Err(shape_err(
                "feature_map",
                format!("omega {} against input width {d}", omega.shape()),
            ));
        }
        let m = omega.dims()[0];
        let rows = xv.numel() / d;
        let c = 1.0 / (m as f64).sqrt();
        let mut data = vec![0.0; rows * m];
        gemm_nt(xv.data(), omega.data(), &mut data, rows, d, m);
        for (r, xrow) in xv.data().chunks(d).enumerate() {
            let half_norm = 0.5 * xrow.iter().map(|v| v * v).sum::<f64>();
            data[r * m..(r + 1) * m]
                .iter_mut()
                .for_each(|e| *e = c * (*e - half_norm).exp());
        }
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = m;
        let v = DenseTensor::from_vec(dims, data)?;
        Ok(self.push(v, Op::FeatureMap { x, omega }, &[x]))
    }

    /// Divides `t` by `max(z, floor)` along `mode`, with `z: (B, N_mode)`
    /// indexed by the leading mode of `t` and its position along `mode`.
    pub fn div_along(&mut self, t: Var, z: Var, mode: usize, floor: f64) -> Result<Var, TapeError> {
        self.check(&[t, z])?;
        let (tv, zv) = (self.value(t), self.value(z));
        let dims = tv.dims();
        if mode == 0 || mode >= dims.len() || zv.dims() != [dims[0], dims[mode]] {
            return Err(shape_err(
                "div_along",
                format!("normaliser {} against {} at mode {mode}", zv.shape(), tv.shape()),
            ));
        }
        let (outer, n, inner) = around(dims, mode);
        let per_batch = outer / dims[0];
        let mut v = tv.clone();
        let data = v.data_mut();
        for o in 0..outer {
            let b = o / per_batch;
            for j in 0..n {
                let zz = zv.data()[b * n + j].max(floor);
                data[(o * n + j) * inner..(o * n + j + 1) * inner]
                    .iter_mut()
                    .for_each(|e| *e /= zz);
            }
        }
        Ok(self.push(v, Op::DivAlong { t, z, mode, floor }, &[t, z]))
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let v = self.value(x).reshape(dims)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Output axis `j` is input axis `axes[j]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let v = self.value(x).permute(axes)?;
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Mode-`mode` matricization as a permute followed by a reshape.
    pub fn matricize(&mut self, x: Var, mode: usize) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let dims = self.dims(x).to_vec();
        if mode >= dims.len() {
            return Err(shape_err("matricize", format!("mode {mode} of {dims:?}")));
        }
        let mut axes = vec![mode];
        axes.extend((0..dims.len()).filter(|&a| a != mode));
        let p = self.permute(x, &axes)?;
        let n = dims[mode];
        self.reshape(p, [n, dims.iter().product::<usize>() / n])
    }

    /// Inverse of [`Tape::matricize`].
    pub fn fold(&mut self, m: Var, mode: usize, target: &[usize]) -> Result<Var, TapeError> {
        self.check(&[m])?;
        if mode >= target.len() {
            return Err(shape_err("fold", format!("mode {mode} of {target:?}")));
        }
        let mut moved = vec![target[mode]];
        moved.extend(target.iter().enumerate().filter(|&(a, _)| a != mode).map(|(_, &d)| d));
        let r = self.reshape(m, moved)?;
        let mut axes: Vec<usize> = (1..target.len()).collect();
        axes.insert(mode, 0);
        self.permute(r, &axes)
    }

    /// Layer normalisation over the last mode with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TapeError> {
        self.check(&[x, gamma, beta])?;
        let xv = self.value(x);
        let d = xv.dims()[xv.order() - 1];
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != d || bv.numel() != d {
            return Err(shape_err(
                "layer_norm",
                format!("width {d} against gamma {} / beta {}", gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let data = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gv.data())
                    .zip(bv.data())
                    .map(|((h, g), b)| h * g + b)
            })
            .collect();
        let v = DenseTensor::from_vec(xv.dims().to_vec(), data)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let v = self.value(x).map(gelu);
        Ok(self.push(v, Op::Gelu(x), &[x]))
    }

    /// Rotary encoding along `axis`: feature pairs `[offset, offset+pairs)`
    /// of the last mode are rotated by `pos · base^{-j/pairs}`.
    pub fn rotary(
        &mut self,
        x: Var,
        axis: usize,
        offset: usize,
        pairs: usize,
        base: f64,
    ) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let l = self.rotary_layout(x, axis, offset, pairs, base)?;
        let v = DenseTensor::from_vec(self.dims(x).to_vec(), rotate(self.value(x).data(), &l, 1.0))?;
        Ok(self.push(
            v,
            Op::Rotary {
                x,
                axis,
                offset,
                pairs,
                base,
            },
            &[x],
        ))
    }

    fn rotary_layout(
        &self,
        x: Var,
        axis: usize,
        offset: usize,
        pairs: usize,
        base: f64,
    ) -> Result<RotaryLayout, TapeError> {
        let dims = self.dims(x);
        let last = dims.len() - 1;
        let width = dims[last];
        if axis >= last || width % 2 != 0 || 2 * (offset + pairs) > width {
            return Err(shape_err(
                "rotary",
                format!("axis {axis}, pairs {offset}..{} of {dims:?}", offset + pairs),
            ));
        }
        Ok(RotaryLayout {
            rows: self.value(x).numel() / width,
            width,
            row_stride: dims[axis + 1..last].iter().product(),
            axis_len: dims[axis],
            offset,
            pairs,
            base,
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &DenseTensor) -> Result<Var, TapeError> {
        self.check(&[pred])?;
        let p = self.value(pred);
        if p.dims() != target.dims() {
            return Err(shape_err("mse", format!("{} against {}", p.shape(), target.shape())));
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let v = DenseTensor::from_vec([1], vec![loss])?;
        Ok(self.push(
            v,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            &[pred],
        ))
    }

    /// Mean cross-entropy of `(B, C)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TapeError> {
        self.check(&[logits])?;
        let lv = self.value(logits);
        let (b, c) = match lv.dims() {
            [b, c] => (*b, *c),
            d => return Err(shape_err("cross_entropy", format!("logits {d:?}"))),
        };
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels in range 0..{c} for batch {b}", labels.len()),
            ));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in lv.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += total.ln() + max - row[label];
            probs.extend(row.iter().map(|v| (v - max).exp() / total));
        }
        let v = DenseTensor::from_vec([1], vec![loss / b as f64])?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let v = DenseTensor::from_vec([1], vec![self.value(x).sum()])?;
        Ok(self.push(v, Op::SumAll(x), &[x]))
    }

    /// `Σ x ⊙ w` for a constant `w` of the same shape.
    pub fn dot_const(&mut self, x: Var, w: &DenseTensor) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let xv = self.value(x);
        if xv.dims() != w.dims() {
            return Err(shape_err("dot", format!("{} against {}", xv.shape(), w.shape())));
        }
        let s = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let v = DenseTensor::from_vec([1], vec![s])?;
        Ok(self.push(v, Op::Dot { x, w: w.clone() }, &[x]))
    }

    /// Reverse sweep from a single-element `loss`. Returns adjoints for
    /// every [`Tape::param`] leaf (zeros when unreachable) and consumes the
    /// tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TapeError> {
        self.check(&[loss])?;
        if self.value(loss).numel() != 1 {
            return Err(TapeError::NonScalarLoss(self.value(loss).shape().to_string()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseTensor::full(self.dims(loss).to_vec(), 1.0)?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if grads[i].is_none() {
                    grads[i] = Some(DenseTensor::zeros(node.value.dims().to_vec())?);
                }
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut contributions = self.adjoints(i, &g)?;
            if let Some(f) = &self.fault {
                if f.op == node.op.name() {
                    for (_, c) in contributions.iter_mut() {
                        *c = c.scale(f.factor);
                    }
                }
            }
            for (v, c) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoints(&self, i: usize, g: &DenseTensor) -> Result<Vec<(Var, DenseTensor)>, TapeError> {
        let node = &self.nodes[i];
        let like = |v: Var, data: Vec<f64>| DenseTensor::from_vec(self.dims(v).to_vec(), data);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (inp, out) = (wv.dims()[0], wv.dims()[1]);
                let rows = xv.numel() / inp;
                let mut gx = vec![0.0; xv.numel()];
                gemm_nt(g.data(), wv.data(), &mut gx, rows, out, inp);
                let mut gw = vec![0.0; wv.numel()];
                gemm_tn(xv.data(), g.data(), &mut gw, inp, rows, out);
                vec![(*x, like(*x, gx)?), (*w, like(*w, gw)?)]
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                }
                vec![(*x, g.clone()), (*b, like(*b, gb)?)]
            }
            Op::ModeProduct {
                t,
                a,
                mode,
                batched,
            } => {
                let l = self.mode_layout(*t, *a, *mode, *batched)?;
                let (tv, av) = (self.value(*t), self.value(*a));
                let mut gt = vec![0.0; tv.numel()];
                mode_apply_grad_t(g.data(), av.data(), &l, &mut gt);
                let mut ga = vec![0.0; av.numel()];
                mode_apply_grad_a(g.data(), tv.data(), &l, &mut ga);
                vec![(*t, like(*t, gt)?), (*a, like(*a, ga)?)]
            }
            Op::SumKeep { x, keep } => {
                let map = reduce_map(self.dims(*x), keep);
                let gx = map.iter().map(|&m| g.data()[m]).collect();
                vec![(*x, like(*x, gx)?)]
            }
            Op::BmmNt(a, b) => {
                let (bs, n, d) = self.batch_dims(*a, "bmm_nt")?;
                let m = self.dims(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; bs * n * d];
                let mut gb = vec![0.0; bs * m * d];
                for i in 0..bs {
                    let gi = &g.data()[i * n * m..(i + 1) * n * m];
                    gemm_nn(gi, &bv[i * m * d..(i + 1) * m * d], &mut ga[i * n * d..(i + 1) * n * d], n, m, d);
                    gemm_tn(gi, &av[i * n * d..(i + 1) * n * d], &mut gb[i * m * d..(i + 1) * m * d], m, n, d);
                }
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let last = y.dims()[y.order() - 1];
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(last).zip(g.data().chunks(last)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![(*x, like(*x, gx)?)]
            }
            Op::FeatureMap { x, omega } => {
                let xv = self.value(*x);
                let (m, d) = (omega.dims()[0], omega.dims()[1]);
                let rows = xv.numel() / d;
                let gy: Vec<f64> = g.data().iter().zip(node.value.data()).map(|(a, b)| a * b).collect();
                let mut gx = vec![0.0; xv.numel()];
                gemm_nn(&gy, omega.data(), &mut gx, rows, m, d);
                for r in 0..rows {
                    let s: f64 = gy[r * m..(r + 1) * m].iter().sum();
                    for c in 0..d {
                        gx[r * d + c] -= s * xv.data()[r * d + c];
                    }
                }
                vec![(*x, like(*x, gx)?)]
            }
            Op::DivAlong { t, z, mode, floor } => {
                let zv = self.value(*z);
                let y = &node.value;
                let dims = y.dims();
                let (outer, n, inner) = around(dims, *mode);
                let per_batch = outer / dims[0];
                let mut gt = g.data().to_vec();
                let mut gz = vec![0.0; zv.numel()];
                for o in 0..outer {
                    let b = o / per_batch;
                    for j in 0..n {
                        let zraw = zv.data()[b * n + j];
                        let zz = zraw.max(*floor);
                        let range = (o * n + j) * inner..(o * n + j + 1) * inner;
                        let mut acc = 0.0;
                        for (gt, &yv) in gt[range.clone()].iter_mut().zip(&y.data()[range]) {
                            acc += *gt * yv;
                            *gt /= zz;
                        }
                        if zraw >= *floor {
                            gz[b * n + j] -= acc / zz;
                        }
                    }
                }
                vec![(*t, like(*t, gt)?), (*z, like(*z, gz)?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.dims(*x).to_vec())?)],
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (j, &a) in axes.iter().enumerate() {
                    inverse[a] = j;
                }
                vec![(*x, g.permute(&inverse)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let mut gx = Vec::with_capacity(xhat.len());
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for ((gr, hr), &r) in g.data().chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for c in 0..d {
                        ggamma[c] += gr[c] * hr[c];
                        gbeta[c] += gr[c];
                        let gh = gr[c] * gv[c];
                        mean_gh += gh;
                        mean_ghx += gh * hr[c];
                    }
                    mean_gh /= d as f64;
                    mean_ghx /= d as f64;
                    gx.extend((0..d).map(|c| r * (gr[c] * gv[c] - mean_gh - hr[c] * mean_ghx)));
                }
                vec![
                    (*x, like(*x, gx)?),
                    (*gamma, like(*gamma, ggamma)?),
                    (*beta, like(*beta, gbeta)?),
                ]
            }
            Op::Gelu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &g)| g * gelu_grad(v))
                    .collect();
                vec![(*x, like(*x, gx)?)]
            }
            Op::Rotary {
                x,
                axis,
                offset,
                pairs,
                base,
            } => {
                let l = self.rotary_layout(*x, *axis, *offset, *pairs, *base)?;
                vec![(*x, like(*x, rotate(g.data(), &l, -1.0))?)]
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let c = 2.0 * g.data()[0] / p.numel() as f64;
                let gp = p.data().iter().zip(target.data()).map(|(a, b)| c * (a - b)).collect();
                vec![(*pred, like(*pred, gp)?)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.dims(*logits)[1];
                let scale = g.data()[0] / labels.len() as f64;
                let mut gl = probs.clone();
                for (b, &label) in labels.iter().enumerate() {
                    gl[b * c + label] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, like(*logits, gl)?)]
            }
            Op::SumAll(x) => vec![(*x, DenseTensor::full(self.dims(*x).to_vec(), g.data()[0])?)],
            Op::Dot { x, w } => vec![(*x, w.scale(g.data()[0]))],
        })
    }
}
