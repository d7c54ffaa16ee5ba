//! Dense row-major tensors and the mode-wise primitives built on them.
//!
//! Modes are addressed with 0-based indices throughout. A tensor of order
//! `k + 1` whose last mode is the hidden (channel) dimension is the common
//! currency of the attention code: modes `0..k` are positional.
//!
//! Matricization convention: `matricize(t, i)` places mode `i` on the rows
//! and enumerates the remaining modes on the columns in their original
//! order with the earliest remaining mode varying slowest. Under this
//! convention
//!
//! ```text
//! matricize(t ×_0 A_0 ×_1 A_1 … ×_{k-1} A_{k-1}, k) = matricize(t, k) · (A_0 ⊗ A_1 ⊗ … ⊗ A_{k-1})ᵀ
//! ```
//!
//! with Kronecker factors in natural order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::TensorError;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(TensorError::InvalidShape {
                dims,
                reason: "order must be at least 1",
            });
        }
        if dims.contains(&0) {
            return Err(TensorError::InvalidShape {
                dims,
                reason: "every dimension must be at least 1",
            });
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::Overflow(dims.clone()))?;
        Ok(Shape { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn dim(&self, mode: usize) -> usize {
        self.dims[mode]
    }

    /// Row-major strides (last mode contiguous).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }

    pub fn check_mode(&self, mode: usize) -> Result<(), TensorError> {
        if mode < self.order() {
            Ok(())
        } else {
            Err(TensorError::ModeOutOfRange {
                mode,
                order: self.order(),
            })
        }
    }

    /// Sizes of the flattened `(outer, dims[mode], inner)` view around `mode`.
    pub(crate) fn split_at_mode(&self, mode: usize) -> (usize, usize, usize) {
        let outer = self.dims[..mode].iter().product();
        let inner = self.dims[mode + 1..].iter().product();
        (outer, self.dims[mode], inner)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Order-k array stored row-major with the last index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                dims: shape.dims.clone(),
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self, TensorError> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f` on every multi-index in row-major order.
    pub fn from_fn(
        dims: impl Into<Vec<usize>>,
        mut f: impl FnMut(&[usize]) -> T,
    ) -> Result<Self, TensorError> {
        let shape = Shape::new(dims)?;
        let mut idx = vec![0usize; shape.order()];
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            data.push(f(&idx));
            increment(&mut idx, shape.dims());
        }
        Ok(Tensor { shape, data })
    }

    pub fn identity(n: usize) -> Result<Self, TensorError> {
        Self::from_fn([n, n], |ix| if ix[0] == ix[1] { T::one() } else { T::zero() })
    }

    /// Entries drawn i.i.d. from the standard normal distribution.
    pub fn random_normal<R: Rng + ?Sized>(
        dims: impl Into<Vec<usize>>,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z)
            })
            .collect();
        Ok(Tensor { shape, data })
    }

    /// Entries drawn i.i.d. uniformly from `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        dims: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel())
            .map(|_| T::of(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn order(&self) -> usize {
        self.shape.order()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.order());
        index
            .iter()
            .zip(self.shape.dims())
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. `f64` to `f32`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{} elements cannot take shape {}", self.numel(), shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Reorders modes: output mode `j` is input mode `axes[j]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self, TensorError> {
        let order = self.order();
        let mut seen = vec![false; order];
        if axes.len() != order {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                detail: format!("{} axes for order {order}", axes.len()),
            });
        }
        for &a in axes {
            self.shape.check_mode(a)?;
            if std::mem::replace(&mut seen[a], true) {
                return Err(TensorError::ShapeMismatch {
                    op: "permute",
                    detail: format!("axis {a} repeated"),
                });
            }
        }
        let in_strides = self.shape.strides();
        let out_dims: Vec<usize> = axes.iter().map(|&a| self.dims()[a]).collect();
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; order];
        let mut src = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[src]);
            // advance odometer, tracking the source offset incrementally
            for m in (0..order).rev() {
                idx[m] += 1;
                src += gather[m];
                if idx[m] < out_dims[m] {
                    break;
                }
                src -= gather[m] * idx[m];
                idx[m] = 0;
            }
        }
        Tensor::from_vec(out_dims, data)
    }

    /// Mode-`mode` unfolding: shape `dims[mode] × ∏_{j≠mode} dims[j]`.
    pub fn matricize(&self, mode: usize) -> Result<Self, TensorError> {
        self.shape.check_mode(mode)?;
        let rows = self.dims()[mode];
        let cols = self.numel() / rows;
        let mut axes = vec![mode];
        axes.extend((0..self.order()).filter(|&j| j != mode));
        self.permute(&axes)?.reshape([rows, cols])
    }

    /// Inverse of [`matricize`](Self::matricize).
    pub fn fold(matrix: &Self, mode: usize, target: &Shape) -> Result<Self, TensorError> {
        target.check_mode(mode)?;
        let rows = target.dims()[mode];
        let cols = target.numel() / rows;
        if matrix.dims() != [rows, cols] {
            return Err(TensorError::ShapeMismatch {
                op: "fold",
                detail: format!(
                    "matrix {} cannot fold to {} along mode {mode}",
                    matrix.shape, target
                ),
            });
        }
        let mut permuted_dims = vec![rows];
        permuted_dims.extend(
            (0..target.order())
                .filter(|&j| j != mode)
                .map(|j| target.dims()[j]),
        );
        // inverse of [mode, others...]
        let mut inverse = vec![0usize; target.order()];
        inverse[mode] = 0;
        let mut pos = 1;
        for (j, slot) in inverse.iter_mut().enumerate() {
            if j != mode {
                *slot = pos;
                pos += 1;
            }
        }
        matrix.reshape(permuted_dims)?.permute(&inverse)
    }

    /// Mode-n product `self ×_mode a` with `a` of shape `d × dims[mode]`.
    pub fn mode_product(&self, a: &Self, mode: usize) -> Result<Self, TensorError> {
        self.shape.check_mode(mode)?;
        if a.order() != 2 || a.dims()[1] != self.dims()[mode] {
            return Err(TensorError::ShapeMismatch {
                op: "mode_product",
                detail: format!(
                    "matrix {} against mode {mode} of size {}",
                    a.shape,
                    self.dims()[mode]
                ),
            });
        }
        let (outer, n, inner) = self.shape.split_at_mode(mode);
        let d = a.dims()[0];
        let mut out = vec![T::zero(); outer * d * inner];
        for o in 0..outer {
            let src = &self.data[o * n * inner..(o + 1) * n * inner];
            let dst = &mut out[o * d * inner..(o + 1) * d * inner];
            for r in 0..d {
                let row = &mut dst[r * inner..(r + 1) * inner];
                for j in 0..n {
                    let c = a.data[r * n + j];
                    if c == T::zero() {
                        continue;
                    }
                    let fiber = &src[j * inner..(j + 1) * inner];
                    for (y, &x) in row.iter_mut().zip(fiber) {
                        *y += c * x;
                    }
                }
            }
        }
        let mut dims = self.dims().to_vec();
        dims[mode] = d;
        Tensor::from_vec(dims, out)
    }

    /// Sums over every mode not listed in `keep`; kept modes retain their order.
    pub fn sum_keep(&self, keep: &[usize]) -> Result<Self, TensorError> {
        for &k in keep {
            self.shape.check_mode(k)?;
        }
        if keep.is_empty() || keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TensorError::ShapeMismatch {
                op: "sum_keep",
                detail: format!("kept modes {keep:?} must be non-empty and strictly increasing"),
            });
        }
        let out_dims: Vec<usize> = keep.iter().map(|&k| self.dims()[k]).collect();
        let out_shape = Shape::new(out_dims.clone())?;
        let out_strides = out_shape.strides();
        // per input mode: stride into output, or 0 if summed out
        let mut map = vec![0usize; self.order()];
        for (j, &k) in keep.iter().enumerate() {
            map[k] = out_strides[j];
        }
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut idx = vec![0usize; self.order()];
        let mut dst = 0usize;
        for &v in &self.data {
            out[dst] += v;
            for m in (0..self.order()).rev() {
                idx[m] += 1;
                dst += map[m];
                if idx[m] < self.dims()[m] {
                    break;
                }
                dst -= map[m] * idx[m];
                idx[m] = 0;
            }
        }
        Tensor::from_vec(out_dims, out)
    }

    /// Pooling `g_pool`: sums over all modes except `mode` and the last
    /// (hidden) mode, giving a `dims[mode] × dims[last]` matrix.
    pub fn pool_sum_except(&self, mode: usize) -> Result<Self, TensorError> {
        let last = self.order() - 1;
        if self.order() < 2 {
            return Err(TensorError::Unsupported {
                op: "pool_sum_except",
                expected: "a tensor of order at least 2",
            });
        }
        if mode >= last {
            return Err(TensorError::Unsupported {
                op: "pool_sum_except",
                expected: "a positional mode (the last mode is the hidden dimension)",
            });
        }
        self.sum_keep(&[mode, last])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                detail: format!("{} vs {}", self.shape, other.shape),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                detail: format!("{} vs {}", self.shape, other.shape),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest absolute elementwise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max),
        )
    }

    /// `‖self − reference‖_F / ‖reference‖_F`.
    pub fn rel_frobenius_error(&self, reference: &Self) -> Option<T> {
        let diff = self.sub(reference).ok()?;
        Some(diff.frobenius_norm() / reference.frobenius_norm())
    }

    // ---- order-2 helpers ----

    pub fn rows(&self) -> usize {
        self.dims()[0]
    }

    pub fn cols(&self) -> usize {
        self.dims()[1]
    }

    fn require_matrix(&self, op: &'static str) -> Result<(), TensorError> {
        if self.order() == 2 {
            Ok(())
        } else {
            Err(TensorError::Unsupported {
                op,
                expected: "an order-2 tensor",
            })
        }
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        self.require_matrix("transpose")?;
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.require_matrix("matmul")?;
        rhs.require_matrix("matmul")?;
        let (m, k) = (self.rows(), self.cols());
        let n = rhs.cols();
        if rhs.rows() != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{} · {}", self.shape, rhs.shape),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let src = &rhs.data[p * n..(p + 1) * n];
                for (y, &b) in dst.iter_mut().zip(src) {
                    *y += a * b;
                }
            }
        }
        Tensor::from_vec([m, n], out)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Advances a row-major multi-index; wraps to all zeros after the last element.
pub(crate) fn increment(idx: &mut [usize], dims: &[usize]) {
    for m in (0..idx.len()).rev() {
        idx[m] += 1;
        if idx[m] < dims[m] {
            return;
        }
        idx[m] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T64 = Tensor<f64>;

    fn seq(dims: &[usize]) -> T64 {
        let n: usize = dims.iter().product();
        T64::from_vec(dims.to_vec(), (1..=n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn shape_rejects_degenerate_and_overflow() {
        assert!(Shape::new(Vec::<usize>::new()).is_err());
        assert!(Shape::new([3, 0]).is_err());
        assert!(matches!(
            Shape::new([usize::MAX, 2]),
            Err(TensorError::Overflow(_))
        ));
        assert_eq!(Shape::new([3, 4, 5]).unwrap().strides(), vec![20, 5, 1]);
    }

    #[test]
    fn matricize_shape_and_identity_case() {
        let t = seq(&[3, 4, 5]);
        assert_eq!(t.matricize(1).unwrap().dims(), &[4, 15]);
        let m = seq(&[3, 2]);
        assert_eq!(m.matricize(0).unwrap(), m);
        assert!(matches!(
            t.matricize(3),
            Err(TensorError::ModeOutOfRange { .. })
        ));
    }

    /// Columns of the unfolding are the mode fibers, enumerated with the
    /// earliest remaining mode slowest.
    #[test]
    fn matricize_matches_fiber_enumeration() {
        let t = seq(&[2, 2, 2]);
        let mut expected = Vec::new();
        for a in 0..2 {
            for j in 0..2 {
                for l in 0..2 {
                    expected.push(t.get(&[a, j, l]));
                }
            }
        }
        // row a, column (j,l) with j slowest: [[1,2,3,4],[5,6,7,8]]
        assert_eq!(t.matricize(0).unwrap().data(), expected.as_slice());
        assert_eq!(
            t.matricize(0).unwrap().data(),
            &[1., 2., 3., 4., 5., 6., 7., 8.]
        );
        // mode 1: rows index j, columns (a,l)
        assert_eq!(
            t.matricize(1).unwrap().data(),
            &[1., 2., 5., 6., 3., 4., 7., 8.]
        );
        assert_eq!(
            t.matricize(2).unwrap().data(),
            &[1., 3., 5., 7., 2., 4., 6., 8.]
        );
    }

    #[test]
    fn fold_round_trip_and_shape() {
        let t = seq(&[2, 3, 4]);
        for mode in 0..3 {
            let m = t.matricize(mode).unwrap();
            assert_eq!(T64::fold(&m, mode, t.shape()).unwrap(), t);
        }
        let target = Shape::new([3, 4, 5]).unwrap();
        let m = T64::zeros([4, 15]).unwrap();
        assert_eq!(T64::fold(&m, 1, &target).unwrap().dims(), &[3, 4, 5]);
        assert!(T64::fold(&m, 0, &target).is_err());
    }

    #[test]
    fn mode_product_hand_example() {
        let t = T64::from_vec([2, 2], vec![1., 2., 3., 4.]).unwrap();
        let a = T64::from_vec([1, 2], vec![1., 1.]).unwrap();
        let r = t.mode_product(&a, 0).unwrap();
        assert_eq!(r.dims(), &[1, 2]);
        assert_eq!(r.data(), &[4., 6.]);
        let eye = T64::identity(2).unwrap();
        assert_eq!(t.mode_product(&eye, 1).unwrap(), t);
        assert!(t.mode_product(&T64::zeros([2, 3]).unwrap(), 0).is_err());
    }

    #[test]
    fn mode_product_matches_matricized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = T64::random_normal([3, 4, 5], &mut rng).unwrap();
        for mode in 0..3 {
            let a = T64::random_normal([2, t.dims()[mode]], &mut rng).unwrap();
            let lhs = t.mode_product(&a, mode).unwrap().matricize(mode).unwrap();
            let rhs = a.matmul(&t.matricize(mode).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }
    }

    #[test]
    fn pool_sum_except_cases() {
        let m = seq(&[3, 2]);
        assert_eq!(m.pool_sum_except(0).unwrap(), m);
        let ones = T64::full([2, 3, 4], 1.0).unwrap();
        let p = ones.pool_sum_except(0).unwrap();
        assert_eq!(p.dims(), &[2, 4]);
        assert!(p.data().iter().all(|&v| v == 3.0));
        assert!(ones.pool_sum_except(2).is_err());
    }

    #[test]
    fn permute_matches_index_map() {
        let t = seq(&[2, 3, 4]);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.get(&[c, a, b]), t.get(&[a, b, c]));
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = T64::from_vec([2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = T64::from_vec([2, 1], vec![1., 1.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3., 7.]);
    }
}
