//! Thin singular value decomposition.
//!
//! The long side is first reduced with a Householder QR factorization, then
//! the small triangular factor is diagonalized with one-sided (Hestenes)
//! Jacobi rotations. Jacobi on the triangular factor converges in a handful
//! of sweeps and yields singular values to high relative accuracy.
//!
//! All loops run in a fixed order, so results are bit-reproducible.

use crate::linalg::Matrix;

use super::PrepareError;

/// Sweep cap; exceeding it is reported as a convergence failure.
pub const MAX_SWEEPS: usize = 10_000;
/// A sweep whose largest normalized column inner product is at or below this
/// value ends the iteration.
pub const OFF_DIAGONAL_TOL: f64 = 1e-10;

/// `a = u * diag(sigma) * v^T` with `k = min(rows, cols)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows x k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `cols x k`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.v.transpose())
    }
}

/// Column-major working matrix: `cols[j]` is column `j`.
struct Columns {
    len: usize,
    cols: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Householder reflector: first row, vector and coefficient.
type Reflector = (usize, Vec<f64>, f64);

/// Householder QR of a tall matrix given by columns (`len >= cols.len()`).
/// Returns the upper-triangular `R` (as columns) and, if asked, the
/// reflectors needed to form `Q`.
fn householder_qr(mut a: Columns, keep_reflectors: bool) -> (Columns, Option<Vec<Reflector>>) {
    let m = a.len;
    let n = a.cols.len();
    let mut reflectors = keep_reflectors.then(Vec::new);
    for j in 0..n {
        let norm = a.cols[j][j..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a.cols[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a.cols[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        a.cols[j][j] = alpha;
        for x in &mut a.cols[j][j + 1..] {
            *x = 0.0;
        }
        for col in &mut a.cols[j + 1..] {
            let tail = &mut col[j..];
            let s = beta * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= s * vi;
            }
        }
        if let Some(refl) = reflectors.as_mut() {
            refl.push((j, v, beta));
        }
    }
    let r = Columns {
        len: n,
        cols: a
            .cols
            .into_iter()
            .map(|mut c| {
                c.truncate(n);
                c
            })
            .collect(),
    };
    debug_assert!(m >= n);
    (r, reflectors)
}

/// Forms the first `n` columns of `Q` from the stored reflectors.
fn form_q(m: usize, n: usize, reflectors: &[Reflector]) -> Columns {
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, v, beta) in reflectors.iter().rev() {
        for col in &mut q {
            let tail = &mut col[*j..];
            let s = beta * dot(v, tail);
            for (t, vi) in tail.iter_mut().zip(v) {
                *t -= s * vi;
            }
        }
    }
    Columns { len: m, cols: q }
}

/// One-sided Jacobi on the columns of `b`; rotations are accumulated into
/// `j_acc` (starts as identity). On return the columns of `b` are mutually
/// orthogonal.
fn jacobi(b: &mut Columns, j_acc: &mut Columns) -> Result<(), PrepareError> {
    let n = b.cols.len();
    let mut norms: Vec<f64> = b.cols.iter().map(|c| dot(c, c)).collect();
    // Columns this small relative to the whole matrix are rounding noise of
    // a rank deficiency; orthogonalizing them against the rest cannot make
    // progress.
    let total: f64 = norms.iter().sum();
    let negligible = (b.len.max(n) as f64 * f64::EPSILON).powi(2) * total;
    for sweep in 0..MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&b.cols[p], &b.cols[q]);
                let off = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut b.cols, p, q, c, s);
                rotate(&mut j_acc.cols, p, q, c, s);
                norms[p] = dot(&b.cols[p], &b.cols[p]);
                norms[q] = dot(&b.cols[q], &b.cols[q]);
            }
        }
        if max_off <= OFF_DIAGONAL_TOL {
            return Ok(());
        }
        if sweep + 1 == MAX_SWEEPS {
            return Err(PrepareError::Convergence {
                sweeps: MAX_SWEEPS,
                residual: max_off,
            });
        }
    }
    Ok(())
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Factors of the tall side: `tall = left * diag(sigma) * right^T`, with
/// `left` given as unnormalized columns `left_scaled = left * diag(sigma)`.
struct TallFactors {
    /// Orthogonal columns, norm = singular value (`k x k` from R, or `m x k`
    /// after applying Q).
    scaled: Columns,
    /// `k x k` orthogonal rotation accumulator.
    rotations: Columns,
    sigma: Vec<f64>,
    order: Vec<usize>,
}

/// SVD core on a tall matrix given by columns. If `need_q` the scaled
/// left factor is expressed in the full `m`-dimensional space.
fn tall_svd(a: Columns, need_q: bool) -> Result<TallFactors, PrepareError> {
    let m = a.len;
    let k = a.cols.len();
    let (mut r, reflectors) = householder_qr(a, need_q);
    let mut rot = Columns {
        len: k,
        cols: (0..k)
            .map(|j| {
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                e
            })
            .collect(),
    };
    jacobi(&mut r, &mut rot)?;
    let sigma: Vec<f64> = r.cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let scaled = match reflectors {
        Some(refl) => {
            // Q * (R J): expand each scaled column into m dimensions.
            let q = form_q(m, k, &refl);
            let cols = r
                .cols
                .iter()
                .map(|c| {
                    let mut out = vec![0.0; m];
                    for (qc, &w) in q.cols.iter().zip(c) {
                        if w != 0.0 {
                            for (o, x) in out.iter_mut().zip(qc) {
                                *o += w * x;
                            }
                        }
                    }
                    out
                })
                .collect();
            Columns { len: m, cols }
        }
        None => r,
    };
    Ok(TallFactors {
        scaled,
        rotations: rot,
        sigma,
        order,
    })
}

fn check_finite(a: &Matrix) -> Result<(), PrepareError> {
    if let Some(pos) = a.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(PrepareError::NonFinite {
            what: "svd input",
            row: pos / a.cols().max(1),
            col: pos % a.cols().max(1),
        });
    }
    Ok(())
}

/// Index of the entry of largest magnitude (lowest index on ties).
fn dominant_index(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, v) in values.enumerate() {
        if v.abs() > best_abs {
            best = i;
            best_abs = v.abs();
        }
    }
    best
}

/// Thin SVD of an arbitrary `m x n` matrix.
///
/// Singular values are sorted in non-increasing order. Signs are fixed so
/// that the entry of largest magnitude in every column of `u` is
/// non-negative (lowest row index on ties).
pub fn svd_thin(a: &Matrix) -> Result<SvdResult, PrepareError> {
    check_finite(a)?;
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(m, 0),
            sigma: Vec::new(),
            v: Matrix::zeros(n, 0),
        });
    }
    // Work on the tall orientation. For a wide `a` the columns of `a^T` are
    // the rows of `a`.
    let wide = m <= n;
    let tall = if wide {
        Columns {
            len: n,
            cols: (0..m).map(|r| a.row(r).to_vec()).collect(),
        }
    } else {
        Columns {
            len: m,
            cols: (0..n).map(|c| a.column(c)).collect(),
        }
    };
    let f = tall_svd(tall, true)?;
    // tall = (Q R J) J^T with Q R J = scaled = W diag(sigma).
    // wide: a^T = W S J^T  => a = J S W^T: u = J, v = W.
    // tall: a   = W S J^T  => u = W, v = J.
    let long_len = f.scaled.len;
    let mut w = Matrix::zeros(long_len, k);
    let mut jm = Matrix::zeros(k, k);
    let mut sigma = Vec::with_capacity(k);
    for (out_c, &src) in f.order.iter().enumerate() {
        let s = f.sigma[src];
        sigma.push(s);
        for r in 0..long_len {
            w[(r, out_c)] = if s > 0.0 {
                f.scaled.cols[src][r] / s
            } else {
                0.0
            };
        }
        for r in 0..k {
            jm[(r, out_c)] = f.rotations.cols[src][r];
        }
    }
    let (mut u, mut v) = if wide { (jm, w) } else { (w, jm) };
    for c in 0..k {
        let i = dominant_index((0..u.rows()).map(|r| u[(r, c)]));
        if u[(i, c)] < 0.0 {
            for r in 0..u.rows() {
                u[(r, c)] = -u[(r, c)];
            }
            for r in 0..v.rows() {
                v[(r, c)] = -v[(r, c)];
            }
        }
    }
    Ok(SvdResult { u, sigma, v })
}

/// `a * v_thin` (equivalently `u * diag(sigma)`) without forming `v`.
///
/// Returns an `m x k` matrix with the same sign convention as [`svd_thin`].
pub(crate) fn left_scaled(a: &Matrix) -> Result<(Matrix, Vec<f64>), PrepareError> {
    check_finite(a)?;
    let (m, n) = a.shape();
    if m > n {
        let svd = svd_thin(a)?;
        let mut us = svd.u;
        for r in 0..m {
            for (c, s) in svd.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        return Ok((us, svd.sigma));
    }
    if m == 0 {
        return Ok((Matrix::zeros(0, 0), Vec::new()));
    }
    let tall = Columns {
        len: n,
        cols: (0..m).map(|r| a.row(r).to_vec()).collect(),
    };
    let f = tall_svd(tall, false)?;
    // u = J; u * diag(sigma) column c = J[:, src] * sigma[src].
    let mut us = Matrix::zeros(m, m);
    let mut sigma = Vec::with_capacity(m);
    for (out_c, &src) in f.order.iter().enumerate() {
        let s = f.sigma[src];
        sigma.push(s);
        let col = &f.rotations.cols[src];
        let flip = col[dominant_index(col.iter().copied())] < 0.0;
        for r in 0..m {
            let x = col[r] * s;
            us[(r, out_c)] = if flip { -x } else { x };
        }
    }
    Ok((us, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn assert_orthonormal_columns(q: &Matrix, tol: f64) {
        let g = q.transpose().matmul(q);
        let err = g.max_abs_diff(&Matrix::identity(q.cols()));
        assert!(err < tol, "orthonormality error {err}");
    }

    #[test]
    fn identity_2x2() {
        let svd = svd_thin(&Matrix::identity(2)).unwrap();
        assert_eq!(svd.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn diag_with_negative_entry() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -4.0]]);
        let svd = svd_thin(&a).unwrap();
        assert!((svd.sigma[0] - 4.0).abs() < 1e-15);
        assert!((svd.sigma[1] - 3.0).abs() < 1e-15);
        assert!(svd.reconstruct().max_abs_diff(&a) < 1e-14);
    }

    #[test]
    fn wide_and_tall_shapes() {
        for &(m, n) in &[(5, 17), (17, 5), (8, 8), (1, 9), (9, 1)] {
            let a = random(m, n, (m * 100 + n) as u64);
            let svd = svd_thin(&a).unwrap();
            let k = m.min(n);
            assert_eq!(svd.u.shape(), (m, k));
            assert_eq!(svd.v.shape(), (n, k));
            assert_orthonormal_columns(&svd.u, 1e-12);
            assert_orthonormal_columns(&svd.v, 1e-9);
            let rel = svd.reconstruct().max_abs_diff(&a) / a.frobenius_norm();
            assert!(rel < 1e-12, "{m}x{n}: {rel}");
            assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention_holds() {
        let a = random(6, 20, 3);
        let svd = svd_thin(&a).unwrap();
        for c in 0..svd.u.cols() {
            let col = svd.u.column(c);
            let i = dominant_index(col.iter().copied());
            assert!(col[i] >= 0.0);
        }
    }

    #[test]
    fn rank_deficient_input() {
        let mut a = random(4, 10, 5);
        let r0 = a.row(0).to_vec();
        a.row_mut(3).copy_from_slice(&r0);
        let svd = svd_thin(&a).unwrap();
        assert!(svd.sigma[3] < 1e-12);
        let rel = svd.reconstruct().max_abs_diff(&a) / a.frobenius_norm();
        assert!(rel < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let svd = svd_thin(&Matrix::zeros(3, 5)).unwrap();
        assert_eq!(svd.sigma, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = random(3, 4, 1);
        a[(1, 2)] = f64::NAN;
        assert!(matches!(
            svd_thin(&a),
            Err(PrepareError::NonFinite { row: 1, col: 2, .. })
        ));
    }

    #[test]
    fn left_scaled_matches_full_svd() {
        for &(m, n) in &[(6, 30), (30, 6), (7, 7)] {
            let a = random(m, n, 42 + m as u64);
            let svd = svd_thin(&a).unwrap();
            let (us, sigma) = left_scaled(&a).unwrap();
            assert_eq!(sigma, svd.sigma);
            let av = a.matmul(&svd.v);
            assert!(us.max_abs_diff(&av) < 1e-12, "{m}x{n}");
        }
    }
}
