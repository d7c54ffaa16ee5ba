//! Kronecker products, mode-wise factor application and sum-of-Kronecker
//! decomposition via the Van Loan rearrangement.

use rand::Rng;

use crate::error::KronError;
use crate::linalg::{solve_psd_right, svd};
use crate::scalar::Scalar;
use crate::tensor::{increment, Tensor};

/// `A ⊗ B` with `(A⊗B)[iA·mB + iB, jA·nB + jB] = A[iA, jA] · B[iB, jB]`.
pub fn kron<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, KronError> {
    if a.order() != 2 || b.order() != 2 {
        return Err(KronError::Inconsistent("kron takes two matrices".into()));
    }
    let (ma, na) = (a.rows(), a.cols());
    let (mb, nb) = (b.rows(), b.cols());
    let cols = na * nb;
    let mut out = vec![T::zero(); ma * mb * cols];
    for ia in 0..ma {
        for ja in 0..na {
            let c = a.data()[ia * na + ja];
            for ib in 0..mb {
                let row = (ia * mb + ib) * cols + ja * nb;
                for jb in 0..nb {
                    out[row + jb] = c * b.data()[ib * nb + jb];
                }
            }
        }
    }
    Ok(Tensor::from_vec([ma * mb, cols], out)?)
}

/// One Kronecker term `S⁽¹⁾ ⊗ … ⊗ S⁽ᵏ⁾` with square per-mode factors.
#[derive(Clone, Debug, PartialEq)]
pub struct KronFactors<T> {
    factors: Vec<Tensor<T>>,
}

impl<T: Scalar> KronFactors<T> {
    pub fn new(factors: Vec<Tensor<T>>) -> Result<Self, KronError> {
        if factors.is_empty() {
            return Err(KronError::Inconsistent("empty factor list".into()));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.order() != 2 || f.rows() != f.cols() {
                return Err(KronError::Inconsistent(format!(
                    "factor {i} has shape {}, expected square matrix",
                    f.shape()
                )));
            }
        }
        Ok(KronFactors { factors })
    }

    pub fn identities(dims: &[usize]) -> Result<Self, KronError> {
        let factors = dims
            .iter()
            .map(|&n| Tensor::identity(n))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(factors)
    }

    pub fn factors(&self) -> &[Tensor<T>] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<Tensor<T>> {
        self.factors
    }

    /// Per-mode sizes `N_1..N_k`.
    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows()).collect()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    /// Explicit `(∏N_i) × (∏N_i)` matrix. Test oracle only.
    pub fn materialize(&self) -> Result<Tensor<T>, KronError> {
        let mut acc = self.factors[0].clone();
        for f in &self.factors[1..] {
            acc = kron(&acc, f)?;
        }
        Ok(acc)
    }
}

/// Sum of `R` Kronecker terms sharing per-mode shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct KronSum<T> {
    terms: Vec<KronFactors<T>>,
}

impl<T: Scalar> KronSum<T> {
    pub fn new(terms: Vec<KronFactors<T>>) -> Result<Self, KronError> {
        let first = terms
            .first()
            .ok_or_else(|| KronError::Inconsistent("no terms".into()))?
            .dims();
        for (r, t) in terms.iter().enumerate() {
            if t.dims() != first {
                return Err(KronError::Inconsistent(format!(
                    "term {r} has dims {:?}, expected {first:?}",
                    t.dims()
                )));
            }
        }
        Ok(KronSum { terms })
    }

    pub fn terms(&self) -> &[KronFactors<T>] {
        &self.terms
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.terms[0].dims()
    }

    /// `Σ_r S_r⁽¹⁾ ⊗ … ⊗ S_r⁽ᵏ⁾` as an explicit matrix. Test oracle only.
    pub fn materialize(&self) -> Result<Tensor<T>, KronError> {
        let mut acc = self.terms[0].materialize()?;
        for t in &self.terms[1..] {
            acc.add_assign(&t.materialize()?)?;
        }
        Ok(acc)
    }
}

/// Applies one Kronecker term to the positional modes of `v` by successive
/// mode products, `((v ×_0 S⁽¹⁾) ×_1 S⁽²⁾) … ×_{k-1} S⁽ᵏ⁾`, without forming
/// the full matrix. `v` has order `k + 1`; its last mode is left untouched.
pub fn apply_factors<T: Scalar>(
    v: &Tensor<T>,
    factors: &KronFactors<T>,
) -> Result<Tensor<T>, KronError> {
    let k = factors.order();
    if v.order() != k + 1 {
        return Err(KronError::Inconsistent(format!(
            "tensor of order {} needs {} factors, got {k}",
            v.order(),
            v.order().saturating_sub(1)
        )));
    }
    let mut out = v.clone();
    for (mode, s) in factors.factors().iter().enumerate() {
        out = out.mode_product(s, mode)?;
    }
    Ok(out)
}

/// Upper bound on the Kronecker rank needed for exact representation:
/// `min_j ∏_{i≠j} N_i²` (1 for a single mode).
pub fn kron_rank_bound(dims: &[usize]) -> usize {
    if dims.len() <= 1 {
        return 1;
    }
    (0..dims.len())
        .map(|j| {
            dims.iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, &n)| n * n)
                .product::<usize>()
        })
        .min()
        .unwrap_or(1)
}

fn check_side<T: Scalar>(s: &Tensor<T>, dims: &[usize]) -> Result<usize, KronError> {
    let side: usize = dims.iter().product();
    if dims.is_empty() || s.order() != 2 || s.rows() != side || s.cols() != side {
        return Err(KronError::SideMismatch {
            side: if s.order() == 2 { s.rows() } else { 0 },
            dims: dims.to_vec(),
        });
    }
    Ok(side)
}

/// Reshapes `S` into a `2k`-tensor `(i_1..i_k, j_1..j_k)`, interleaves the
/// row and column index of each mode, and merges every pair into one mode of
/// size `N_i²` (pair index `i·N + j`). Kronecker rank of `S` equals CP rank
/// of the result.
pub fn vanloan_rearrange<T: Scalar>(s: &Tensor<T>, dims: &[usize]) -> Result<Tensor<T>, KronError> {
    check_side(s, dims)?;
    let k = dims.len();
    let mut full_dims = dims.to_vec();
    full_dims.extend_from_slice(dims);
    let mut axes = Vec::with_capacity(2 * k);
    for i in 0..k {
        axes.push(i);
        axes.push(k + i);
    }
    let squared: Vec<usize> = dims.iter().map(|&n| n * n).collect();
    Ok(s.reshape(full_dims)?.permute(&axes)?.reshape(squared)?)
}

/// Inverse of [`vanloan_rearrange`].
pub fn vanloan_restore<T: Scalar>(t: &Tensor<T>, dims: &[usize]) -> Result<Tensor<T>, KronError> {
    let k = dims.len();
    let squared: Vec<usize> = dims.iter().map(|&n| n * n).collect();
    if t.dims() != squared.as_slice() {
        return Err(KronError::Inconsistent(format!(
            "rearranged tensor {} does not match dims {dims:?}",
            t.shape()
        )));
    }
    let mut pair_dims = Vec::with_capacity(2 * k);
    for &n in dims {
        pair_dims.push(n);
        pair_dims.push(n);
    }
    let mut axes: Vec<usize> = (0..k).map(|i| 2 * i).collect();
    axes.extend((0..k).map(|i| 2 * i + 1));
    let side: usize = dims.iter().product();
    Ok(t.reshape(pair_dims)?.permute(&axes)?.reshape([side, side])?)
}

/// Stopping rule for the alternating-least-squares path (three or more modes).
#[derive(Clone, Copy, Debug)]
pub struct AlsOptions {
    pub max_sweeps: usize,
    /// Converged once the relative residual changes by less than this between sweeps.
    pub tol: f64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        AlsOptions {
            max_sweeps: 200,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecompositionMethod {
    /// Single mode: the matrix is its own decomposition.
    Trivial,
    /// Two modes: truncated SVD of the rearranged matrix.
    Svd,
    /// Three or more modes: ALS CP on the rearranged tensor.
    Als,
}

#[derive(Clone, Debug)]
pub struct KronDecomposition<T> {
    pub sum: KronSum<T>,
    /// `‖S − Σ terms‖_F / ‖S‖_F` (0 when `S = 0`).
    pub rel_error: f64,
    pub method: DecompositionMethod,
    /// Always true for the closed-form paths.
    pub converged: bool,
    pub sweeps: usize,
    /// Singular values of the rearranged matrix (SVD path only).
    pub spectrum: Vec<T>,
}

/// Rank-`rank` sum-of-Kronecker approximation of `S` over per-mode sizes
/// `dims`. `rank` is clamped to [`kron_rank_bound`]. The RNG seeds ALS
/// initialisation and is untouched for fewer than three modes.
pub fn kron_decompose<T: Scalar, R: Rng + ?Sized>(
    s: &Tensor<T>,
    dims: &[usize],
    rank: usize,
    opts: AlsOptions,
    rng: &mut R,
) -> Result<KronDecomposition<T>, KronError> {
    if rank == 0 {
        return Err(KronError::ZeroRank);
    }
    check_side(s, dims)?;
    let rank = rank.min(kron_rank_bound(dims));
    let (sum, method, converged, sweeps, spectrum) = match dims.len() {
        1 => (
            KronSum::new(vec![KronFactors::new(vec![s.clone()])?])?,
            DecompositionMethod::Trivial,
            true,
            0,
            Vec::new(),
        ),
        2 => {
            let (sum, spectrum) = decompose_two_modes(s, dims, rank)?;
            (sum, DecompositionMethod::Svd, true, 0, spectrum)
        }
        _ => {
            let (sum, converged, sweeps) = decompose_als(s, dims, rank, opts, rng)?;
            (sum, DecompositionMethod::Als, converged, sweeps, Vec::new())
        }
    };
    let rel_error = relative_error(&sum.materialize()?, s);
    Ok(KronDecomposition {
        sum,
        rel_error,
        method,
        converged,
        sweeps,
        spectrum,
    })
}

fn relative_error<T: Scalar>(approx: &Tensor<T>, s: &Tensor<T>) -> f64 {
    let norm = s.frobenius_norm().as_f64();
    let diff = approx.sub(s).expect("same shape").frobenius_norm().as_f64();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn reshape_vector<T: Scalar>(values: Vec<T>, n: usize) -> Result<Tensor<T>, KronError> {
    Ok(Tensor::from_vec([n, n], values)?)
}

fn decompose_two_modes<T: Scalar>(
    s: &Tensor<T>,
    dims: &[usize],
    rank: usize,
) -> Result<(KronSum<T>, Vec<T>), KronError> {
    let (n1, n2) = (dims[0], dims[1]);
    let rearranged = vanloan_rearrange(s, dims)?;
    let dec = svd(&rearranged)?;
    let r_all = dec.s.len();
    let mut terms = Vec::with_capacity(rank);
    for r in 0..rank {
        let scale = dec.s[r].sqrt();
        let a: Vec<T> = (0..n1 * n1).map(|i| dec.u.data()[i * r_all + r] * scale).collect();
        let b: Vec<T> = (0..n2 * n2).map(|i| dec.v.data()[i * r_all + r] * scale).collect();
        terms.push(KronFactors::new(vec![
            reshape_vector(a, n1)?,
            reshape_vector(b, n2)?,
        ])?);
    }
    Ok((KronSum::new(terms)?, dec.s))
}

/// Matricized-tensor-times-Khatri-Rao product for mode `n`.
fn mttkrp<T: Scalar>(t: &Tensor<T>, factors: &[Tensor<T>], n: usize, rank: usize) -> Tensor<T> {
    let dims = t.dims();
    let mut out = vec![T::zero(); dims[n] * rank];
    let mut idx = vec![0usize; dims.len()];
    let mut prod = vec![T::zero(); rank];
    for &value in t.data() {
        if value != T::zero() {
            prod.iter_mut().for_each(|p| *p = value);
            for (m, f) in factors.iter().enumerate() {
                if m == n {
                    continue;
                }
                let row = &f.data()[idx[m] * rank..(idx[m] + 1) * rank];
                for (p, &x) in prod.iter_mut().zip(row) {
                    *p *= x;
                }
            }
            let dst = &mut out[idx[n] * rank..(idx[n] + 1) * rank];
            for (d, &p) in dst.iter_mut().zip(&prod) {
                *d += p;
            }
        }
        increment(&mut idx, dims);
    }
    Tensor::from_vec([dims[n], rank], out).expect("consistent mttkrp shape")
}

fn cp_reconstruct<T: Scalar>(dims: &[usize], factors: &[Tensor<T>], rank: usize) -> Tensor<T> {
    Tensor::from_fn(dims.to_vec(), |idx| {
        (0..rank)
            .map(|r| {
                factors
                    .iter()
                    .zip(idx)
                    .map(|(f, &i)| f.data()[i * rank + r])
                    .fold(T::one(), |a, b| a * b)
            })
            .sum()
    })
    .expect("valid dims")
}

fn decompose_als<T: Scalar, R: Rng + ?Sized>(
    s: &Tensor<T>,
    dims: &[usize],
    rank: usize,
    opts: AlsOptions,
    rng: &mut R,
) -> Result<(KronSum<T>, bool, usize), KronError> {
    let target = vanloan_rearrange(s, dims)?;
    let tdims = target.dims().to_vec();
    let norm = target.frobenius_norm().as_f64();
    let mut factors = tdims
        .iter()
        .map(|&d| Tensor::<T>::random_normal([d, rank], rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut previous = f64::INFINITY;
    let mut converged = false;
    let mut sweeps = 0;
    for sweep in 0..opts.max_sweeps {
        sweeps = sweep + 1;
        for n in 0..tdims.len() {
            let m = mttkrp(&target, &factors, n, rank);
            let mut gram = Tensor::full([rank, rank], T::one())?;
            for (j, f) in factors.iter().enumerate() {
                if j == n {
                    continue;
                }
                let ftf = f.transpose()?.matmul(f)?;
                gram = gram.zip_map(&ftf, |a, b| a * b)?;
            }
            factors[n] = solve_psd_right(&m, &gram)?;
        }
        let approx = cp_reconstruct(&tdims, &factors, rank);
        let diff = approx.sub(&target)?.frobenius_norm().as_f64();
        let residual = if norm == 0.0 { diff } else { diff / norm };
        if (previous - residual).abs() < opts.tol || residual < opts.tol {
            converged = true;
            break;
        }
        previous = residual;
    }
    let mut terms = Vec::with_capacity(rank);
    for r in 0..rank {
        let per_mode = factors
            .iter()
            .zip(dims)
            .map(|(f, &n)| {
                let col: Vec<T> = (0..n * n).map(|i| f.data()[i * rank + r]).collect();
                reshape_vector(col, n)
            })
            .collect::<Result<Vec<_>, _>>()?;
        terms.push(KronFactors::new(per_mode)?);
    }
    Ok((KronSum::new(terms)?, converged, sweeps))
}
