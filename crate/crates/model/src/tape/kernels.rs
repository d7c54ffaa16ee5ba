//! Loops over flat row-major buffers used by the tape ops.

/// `C (m×n) += A (m×k) · B (k×n)`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// `C (m×n) += A (m×k) · Bᵀ` with `B` stored `n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `C (m×n) += Aᵀ · B` with `A` stored `k×m` and `B` stored `k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// Split of `dims` around `mode`: (outer, len, inner).
pub(crate) fn around(dims: &[usize], mode: usize) -> (usize, usize, usize) {
    (
        dims[..mode].iter().product(),
        dims[mode],
        dims[mode + 1..].iter().product(),
    )
}

/// Layout of a (possibly batched) mode product.
pub(crate) struct ModeLayout {
    pub outer: usize,
    pub n: usize,
    pub inner: usize,
    pub d: usize,
    /// Outer slices per batch entry; `None` when the matrix is shared.
    pub per_batch: Option<usize>,
}

impl ModeLayout {
    fn matrix<'a>(&self, a: &'a [f64], o: usize) -> &'a [f64] {
        match self.per_batch {
            Some(pb) => {
                let b = o / pb;
                &a[b * self.d * self.n..(b + 1) * self.d * self.n]
            }
            None => a,
        }
    }
}

/// `y[o, r, :] = Σ_j A[r, j] · t[o, j, :]` with `A` of shape `d × n`.
pub(crate) fn mode_apply(t: &[f64], a: &[f64], l: &ModeLayout) -> Vec<f64> {
    let mut y = vec![0.0; l.outer * l.d * l.inner];
    for o in 0..l.outer {
        let am = l.matrix(a, o);
        for r in 0..l.d {
            let yrow = &mut y[(o * l.d + r) * l.inner..(o * l.d + r + 1) * l.inner];
            for j in 0..l.n {
                let coef = am[r * l.n + j];
                let trow = &t[(o * l.n + j) * l.inner..(o * l.n + j + 1) * l.inner];
                yrow.iter_mut().zip(trow).for_each(|(y, &t)| *y += coef * t);
            }
        }
    }
    y
}

/// Adjoint of [`mode_apply`] with respect to `t`: `g ×_mode Aᵀ`.
pub(crate) fn mode_apply_grad_t(g: &[f64], a: &[f64], l: &ModeLayout, gt: &mut [f64]) {
    for o in 0..l.outer {
        let am = l.matrix(a, o);
        for r in 0..l.d {
            let grow = &g[(o * l.d + r) * l.inner..(o * l.d + r + 1) * l.inner];
            for j in 0..l.n {
                let coef = am[r * l.n + j];
                let trow = &mut gt[(o * l.n + j) * l.inner..(o * l.n + j + 1) * l.inner];
                trow.iter_mut().zip(grow).for_each(|(t, &g)| *t += coef * g);
            }
        }
    }
}

/// Adjoint of [`mode_apply`] with respect to `A`.
pub(crate) fn mode_apply_grad_a(g: &[f64], t: &[f64], l: &ModeLayout, ga: &mut [f64]) {
    let size = l.d * l.n;
    for o in 0..l.outer {
        let base = l.per_batch.map_or(0, |pb| (o / pb) * size);
        for r in 0..l.d {
            let grow = &g[(o * l.d + r) * l.inner..(o * l.d + r + 1) * l.inner];
            for j in 0..l.n {
                let trow = &t[(o * l.n + j) * l.inner..(o * l.n + j + 1) * l.inner];
                ga[base + r * l.n + j] += grow.iter().zip(trow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
}

/// Row-major strides.
pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// For every flat index of `dims`, the flat index of the reduced tensor that
/// keeps only `keep` (ascending).
pub(crate) fn reduce_map(dims: &[usize], keep: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = keep.iter().map(|&k| dims[k]).collect();
    let ks = strides(&kept);
    let mut coeff = vec![0; dims.len()];
    for (pos, &k) in keep.iter().enumerate() {
        coeff[k] = ks[pos];
    }
    let numel: usize = dims.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0; dims.len()];
    let mut cur = 0usize;
    for _ in 0..numel {
        out.push(cur);
        for ax in (0..dims.len()).rev() {
            idx[ax] += 1;
            cur += coeff[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            cur -= coeff[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Rotates feature pairs `[offset, offset + pairs)` of each row of length
/// `width` by `sign · pos · θ_j`, `θ_j = base^{-j/pairs}`, where `pos` is the
/// row's index along the rotated axis.
pub(crate) struct RotaryLayout {
    pub rows: usize,
    pub width: usize,
    /// Rows per step along the rotated axis.
    pub row_stride: usize,
    pub axis_len: usize,
    pub offset: usize,
    pub pairs: usize,
    pub base: f64,
}

pub(crate) fn rotate(x: &[f64], l: &RotaryLayout, sign: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    let thetas: Vec<f64> = (0..l.pairs)
        .map(|j| l.base.powf(-(j as f64) / l.pairs as f64))
        .collect();
    for r in 0..l.rows {
        let pos = ((r / l.row_stride) % l.axis_len) as f64;
        if pos == 0.0 {
            continue;
        }
        let row = &mut y[r * l.width..(r + 1) * l.width];
        for (j, &theta) in thetas.iter().enumerate() {
            let (s, c) = (sign * pos * theta).sin_cos();
            let i = 2 * (l.offset + j);
            let (a, b) = (row[i], row[i + 1]);
            row[i] = a * c - b * s;
            row[i + 1] = a * s + b * c;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2×3
        let b = [1., 0., -1., 2., 0.5, 1.]; // 3×2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [0.5, 7.0, 2.0, 16.0]);
        let bt = [1., -1., 0.5, 0., 2., 1.]; // 2×3 = bᵀ
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        let at = [1., 4., 2., 5., 3., 6.]; // 3×2 = aᵀ
        let mut c3 = [0.0; 4];
        gemm_tn(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn reduce_map_keeps_axes() {
        let m = reduce_map(&[2, 3], &[1]);
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2]);
        let m = reduce_map(&[2, 3], &[0]);
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(reduce_map(&[2, 2], &[]), vec![0; 4]);
    }
}
