//! Small dense linear algebra: one-sided Jacobi SVD and helpers built on it.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Thin singular value decomposition `A = U · diag(s) · Vᵀ`.
///
/// For an `m × n` input, `u` is `m × r`, `v` is `n × r` and `s` has length
/// `r = min(m, n)`, sorted non-increasing. Ties keep their original column
/// order. Columns of `u` belonging to zero singular values are zero.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Tensor<T>,
    pub s: Vec<T>,
    pub v: Tensor<T>,
}

const MAX_SWEEPS: usize = 100;

pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<Svd<T>, TensorError> {
    if a.order() != 2 {
        return Err(TensorError::Unsupported {
            op: "svd",
            expected: "an order-2 tensor",
        });
    }
    if a.rows() < a.cols() {
        let t = svd(&a.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    let (m, n) = (a.rows(), a.cols());
    // column-major working copies for cache-friendly column rotations
    let mut cols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..m).map(|i| a.data()[i * n + j]).collect())
        .collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = T::zero();
                    let mut beta = T::zero();
                    let mut gamma = T::zero();
                    for (&x, &y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<T> = cols
        .iter()
        .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps earlier columns first on ties
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = Tensor::zeros([m, n])?;
    let mut v = Tensor::zeros([n, n])?;
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > T::zero() {
            for i in 0..m {
                u.data_mut()[i * n + k] = cols[j][i] / sigma;
            }
        }
        for i in 0..n {
            v.data_mut()[i * n + k] = vcols[j][i];
        }
    }
    Ok(Svd { u, s, v })
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Number of singular values above `tol · σ_max` (absolute `tol` when `relative` is false).
pub fn matrix_rank<T: Scalar>(a: &Tensor<T>, tol: T, relative: bool) -> Result<usize, TensorError> {
    let dec = svd(a)?;
    let smax = dec.s.first().copied().unwrap_or(T::zero());
    let cut = if relative { tol * smax } else { tol };
    Ok(dec.s.iter().filter(|&&v| v > cut).count())
}

/// Rebuilds `Σ_{r<rank} s_r u_r v_rᵀ`.
pub fn reconstruct<T: Scalar>(dec: &Svd<T>, rank: usize) -> Result<Tensor<T>, TensorError> {
    let m = dec.u.rows();
    let n = dec.v.rows();
    let r = dec.s.len();
    let mut out = Tensor::zeros([m, n])?;
    for k in 0..rank.min(r) {
        let sk = dec.s[k];
        for i in 0..m {
            let ui = dec.u.data()[i * r + k] * sk;
            if ui == T::zero() {
                continue;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] += ui * dec.v.data()[j * r + k];
            }
        }
    }
    Ok(out)
}

/// Least-squares solution of `X · g = b` for symmetric positive semidefinite
/// `g`, via pseudo-inverse with relative cutoff.
pub fn solve_psd_right<T: Scalar>(b: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let n = g.rows();
    if g.cols() != n || b.cols() != n {
        return Err(TensorError::ShapeMismatch {
            op: "solve_psd_right",
            detail: format!("{} against gram {}", b.shape(), g.shape()),
        });
    }
    let dec = svd(g)?;
    let smax = dec.s.first().copied().unwrap_or(T::zero());
    let cut = smax * T::epsilon() * T::of(n as f64 * 16.0);
    // pinv(g) = V diag(1/s) Uᵀ
    let mut pinv = Tensor::zeros([n, n])?;
    for k in 0..n {
        if dec.s[k] <= cut {
            continue;
        }
        let inv = T::one() / dec.s[k];
        for i in 0..n {
            let vi = dec.v.data()[i * n + k] * inv;
            for j in 0..n {
                pinv.data_mut()[i * n + j] += vi * dec.u.data()[j * n + k];
            }
        }
    }
    b.matmul(&pinv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reconstructs_random_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dims in [[5, 3], [3, 5], [6, 6]] {
            let a = Tensor::<f64>::random_normal(dims, &mut rng).unwrap();
            let dec = svd(&a).unwrap();
            assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
            let back = reconstruct(&dec, dec.s.len()).unwrap();
            assert!(back.max_abs_diff(&a).unwrap() < 1e-12);
            let vtv = dec.v.transpose().unwrap().matmul(&dec.v).unwrap();
            let eye = Tensor::identity(vtv.rows()).unwrap();
            assert!(vtv.max_abs_diff(&eye).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rank_of_outer_product() {
        let u = Tensor::<f64>::from_vec([3, 1], vec![1., 2., 3.]).unwrap();
        let v = Tensor::<f64>::from_vec([1, 4], vec![1., -1., 0.5, 2.]).unwrap();
        let a = u.matmul(&v).unwrap();
        assert_eq!(matrix_rank(&a, 1e-9, false).unwrap(), 1);
        assert_eq!(matrix_rank(&Tensor::<f64>::zeros([2, 2]).unwrap(), 1e-9, false).unwrap(), 0);
    }

    #[test]
    fn psd_solve() {
        let g = Tensor::<f64>::from_vec([2, 2], vec![4., 1., 1., 3.]).unwrap();
        let x = Tensor::<f64>::from_vec([1, 2], vec![0.5, -2.]).unwrap();
        let b = x.matmul(&g).unwrap();
        let got = solve_psd_right(&b, &g).unwrap();
        assert!(got.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let a = Tensor::<f32>::from_vec([2, 2], vec![3., 0., 0., 4.]).unwrap();
        let dec = svd(&a).unwrap();
        assert!((dec.s[0] - 4.0).abs() < 1e-6 && (dec.s[1] - 3.0).abs() < 1e-6);
    }
}
