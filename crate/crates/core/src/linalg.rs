//! Dense kernels: matrix product, one-sided Jacobi SVD, Frobenius norm and
//! single-head scaled dot-product self-attention (forward and backward).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matrix::Matrix;

/// Products with fewer multiply-adds than this stay on the calling thread.
const PAR_MATMUL_MIN_FLOPS: usize = 1 << 16;

pub const SVD_MAX_SWEEPS: usize = 100;
pub const SVD_TOLERANCE: f64 = 1e-10;

/// `a * b` with the default execution strategy.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(a, b, Exec::default())
}

/// `a * b`. Each output entry accumulates `k = 0..a.cols` left to right from
/// zero, so the result is identical for every `exec`.
pub fn matmul_with(a: &Matrix, b: &Matrix, exec: Exec) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, inner, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let exec = if m * inner * n < PAR_MATMUL_MIN_FLOPS {
        Exec::Sequential
    } else {
        exec
    };
    let (ad, bd) = (a.data(), b.data());
    exec.for_each_chunk_mut(out.data_mut(), n, |i, row| {
        let arow = &ad[i * inner..(i + 1) * inner];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &bd[k * n..(k + 1) * n];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    });
    Ok(out)
}

pub fn frobenius_norm(m: &Matrix) -> f32 {
    frobenius_norm_sq(m).sqrt() as f32
}

/// Sum of squared entries, accumulated in `f64`.
pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    m.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    /// `m x p`, orthonormal columns.
    pub u: Matrix,
    /// Length `p`, non-negative, descending.
    pub sigma: Vec<f32>,
    /// `p x n`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Result<Matrix> {
        matmul(&self.u.scale_columns(&self.sigma)?, &self.vt)
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations in `f64`.
///
/// Converges when every pairwise column cosine in a sweep is at most
/// [`SVD_TOLERANCE`]; gives up after [`SVD_MAX_SWEEPS`] sweeps.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::argument("svd input has non-finite entries"));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        });
    }
    let (rows, n) = m.shape();
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..rows).map(|i| f64::from(m.get(i, j))).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = residual <= SVD_TOLERANCE;
    }
    if !converged {
        return Err(Error::Convergence {
            sweeps: SVD_MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &missing, rows);

    let u = Matrix::from_fn(rows, n, |i, k| u_cols[k][i] as f32);
    let vt = Matrix::from_fn(n, n, |k, i| v[order[k]][i] as f32);
    let sigma = order.iter().map(|&j| norms[j] as f32).collect();
    Ok(SvdResult { u, sigma, vt })
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fill the columns listed in `missing` with unit vectors orthogonal to all
/// other columns, drawing candidates from the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], dim: usize) {
    let mut candidate = 0;
    for &slot in missing {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt for stability
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && dot(c, c) == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Numerically stable row-wise softmax (max subtracted per row).
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let cols = m.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Intermediates of one attention forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention weights `softmax(Q K^T / sqrt(d_k))`.
    pub probs: Matrix,
    pub out: Matrix,
}

/// Attention over already-projected `q`, `k`, `v`.
pub fn attention_from_projections(q: Matrix, k: Matrix, v: Matrix) -> Result<AttentionCache> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "attention q/k",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attention k/v",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let scores = matmul(&q, &k.transpose())?.scale(scale);
    let probs = softmax_rows(&scores);
    let out = matmul(&probs, &v)?;
    Ok(AttentionCache { q, k, v, probs, out })
}

fn check_projection(x: &Matrix, w: &Matrix, op: &'static str) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(Error::Shape {
            op,
            lhs: x.shape(),
            rhs: w.shape(),
        });
    }
    Ok(())
}

/// Full forward pass with the cache exposed (the attention-weight hook).
pub fn self_attention_cached(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<AttentionCache> {
    check_projection(x, wq, "self_attention W^Q")?;
    check_projection(x, wk, "self_attention W^K")?;
    check_projection(x, wv, "self_attention W^V")?;
    if wq.cols() != wk.cols() {
        return Err(Error::Shape {
            op: "self_attention d_k",
            lhs: wq.shape(),
            rhs: wk.shape(),
        });
    }
    attention_from_projections(matmul(x, wq)?, matmul(x, wk)?, matmul(x, wv)?)
}

/// `softmax(Q K^T / sqrt(d_k)) V` with `Q = X W^Q`, `K = X W^K`, `V = X W^V`.
pub fn self_attention(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix> {
    Ok(self_attention_cached(x, wq, wk, wv)?.out)
}

/// Gradients of the attention output with respect to `Q`, `K` and `V`.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

pub fn attention_backward(cache: &AttentionCache, d_out: &Matrix) -> Result<AttentionGrads> {
    cache.out.check_same_shape(d_out, "attention_backward")?;
    let scale = 1.0 / (cache.q.cols() as f32).sqrt();
    let dv = matmul(&cache.probs.transpose(), d_out)?;
    let dp = matmul(d_out, &cache.v.transpose())?;
    // softmax Jacobian, row by row: dS = P * (dP - <dP, P>)
    let mut ds = Matrix::zeros(dp.rows(), dp.cols());
    for i in 0..dp.rows() {
        let (p, g) = (cache.probs.row(i), dp.row(i));
        let inner: f32 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..dp.cols() {
            ds.set(i, j, p[j] * (g[j] - inner) * scale);
        }
    }
    let dq = matmul(&ds, &cache.k)?;
    let dk = matmul(&ds.transpose(), &cache.q)?;
    Ok(AttentionGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Matrix::zeros(3, 4);
        let b = Matrix::random_normal(4, 5, 1.0, &mut rng(1));
        let p = matmul(&z, &b).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.shape(), (3, 5));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn matmul_parallel_is_bit_identical() {
        let a = Matrix::random_normal(96, 80, 1.0, &mut rng(2));
        let b = Matrix::random_normal(80, 70, 1.0, &mut rng(3));
        let s = matmul_with(&a, &b, Exec::Sequential).unwrap();
        let p = matmul_with(&a, &b, Exec::Parallel).unwrap();
        assert!(s.data().iter().zip(p.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn frobenius_examples() {
        assert!((frobenius_norm(&Matrix::identity(2)) - 2f32.sqrt()).abs() < 1e-7);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[&[3.0, 4.0]])), 5.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn svd_diagonal() {
        let r = svd(&Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(r.sigma, vec![3.0, 1.0]);
    }

    #[test]
    fn svd_zero_matrix_has_orthonormal_factors() {
        let r = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(r.sigma, vec![0.0, 0.0]);
        let utu = matmul(&r.u.transpose(), &r.u).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(2)).unwrap() < 1e-6);
    }

    #[test]
    fn svd_permuted_diagonal() {
        let r = svd(&Matrix::from_rows(&[&[0.0, 2.0], &[1.0, 0.0]])).unwrap();
        assert!((r.sigma[0] - 2.0).abs() < 1e-6);
        assert!((r.sigma[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn svd_wide_matrix() {
        let m = Matrix::random_normal(3, 7, 1.0, &mut rng(9));
        let r = svd(&m).unwrap();
        assert_eq!(r.u.shape(), (3, 3));
        assert_eq!(r.vt.shape(), (3, 7));
        let rec = r.reconstruct().unwrap();
        assert!(frobenius_norm(&rec.sub(&m).unwrap()) / frobenius_norm(&m) < 1e-5);
    }

    #[test]
    fn svd_rejects_nan() {
        let m = Matrix::from_rows(&[&[f32::NAN]]);
        assert!(svd(&m).is_err());
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let mut r = rng(4);
        let x = Matrix::random_normal(1, 4, 1.0, &mut r);
        let (wq, wk, wv) = (
            Matrix::random_normal(4, 3, 1.0, &mut r),
            Matrix::random_normal(4, 3, 1.0, &mut r),
            Matrix::random_normal(4, 2, 1.0, &mut r),
        );
        let out = self_attention(&x, &wq, &wk, &wv).unwrap();
        assert_eq!(out, matmul(&x, &wv).unwrap());
    }

    #[test]
    fn zero_input_gives_uniform_attention() {
        let mut r = rng(5);
        let x = Matrix::zeros(3, 4);
        let wq = Matrix::random_normal(4, 2, 1.0, &mut r);
        let wk = Matrix::random_normal(4, 2, 1.0, &mut r);
        let wv = Matrix::random_normal(4, 2, 1.0, &mut r);
        let c = self_attention_cached(&x, &wq, &wk, &wv).unwrap();
        for v in c.probs.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        // V = 0 here too, so output is its column mean: zero
        assert!(c.out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_attention_averages_values() {
        let q = Matrix::zeros(3, 2);
        let k = Matrix::zeros(3, 2);
        let v = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]);
        let c = attention_from_projections(q, k, v).unwrap();
        assert!((c.out.get(0, 0) - 3.0).abs() < 1e-6);
        assert!((c.out.get(2, 1) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng(6);
        let x = Matrix::random_normal(5, 6, 2.0, &mut r);
        let w = Matrix::random_normal(6, 4, 1.0, &mut r);
        let c = self_attention_cached(&x, &w, &w, &w).unwrap();
        for i in 0..5 {
            let s: f32 = c.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rejects_mismatched_dk() {
        let x = Matrix::zeros(2, 3);
        let err = self_attention(&x, &Matrix::zeros(3, 2), &Matrix::zeros(3, 4), &Matrix::zeros(3, 2));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }
}
