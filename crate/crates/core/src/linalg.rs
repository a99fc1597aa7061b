//! Small dense kernels: Cholesky solves for the regularized normal
//! equations and a one-sided Jacobi SVD for the unregularized path.

use ndarray::{Array1, Array2, ArrayView2};

use crate::scalar::Real;

/// Solves `a * x = rhs` for symmetric positive definite `a`.
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky_solve<T: Real>(a: &Array2<T>, rhs: &Array2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    debug_assert_eq!(rhs.nrows(), n);
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    let m = rhs.ncols();
    let mut x = rhs.to_owned();
    for c in 0..m {
        // forward: L z = b
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        // backward: L^T x = z
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in i + 1..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    Some(x)
}

/// Thin SVD `a = U diag(s) V^T` with `k = min(m, n)` singular values in
/// descending order.
pub struct Svd<T> {
    pub u: Array2<T>,
    pub s: Array1<T>,
    pub v: Array2<T>,
}

pub fn svd<T: Real>(a: ArrayView2<'_, T>) -> Svd<T> {
    if a.nrows() >= a.ncols() {
        let (u, s, v) = jacobi_tall(a);
        Svd { u, s, v }
    } else {
        let (v, s, u) = jacobi_tall(a.t());
        Svd { u, s, v }
    }
}

/// One-sided Jacobi for `m >= n`.
fn jacobi_tall<T: Real>(a: ArrayView2<'_, T>) -> (Array2<T>, Array1<T>, Array2<T>) {
    let (m, n) = a.dim();
    // Column-major working copies.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            e
        })
        .collect();
    let eps = T::epsilon();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = T::zero();
                    let mut be = T::zero();
                    let mut ga = T::zero();
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
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
        .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = Array2::zeros((m, n));
    let mut v = Array2::zeros((n, n));
    let mut s = Array1::zeros(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s[k] = sigma;
        for i in 0..m {
            u[[i, k]] = if sigma > T::zero() { cols[j][i] / sigma } else { T::zero() };
        }
        for i in 0..n {
            v[[i, k]] = vcols[j][i];
        }
    }
    (u, s, v)
}

fn rotate<T: Real>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_small_system() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let b = array![[2.0], [1.0]];
        let x = cholesky_solve(&a, &b).unwrap();
        let back = a.dot(&x);
        assert_abs_diff_eq!(back[[0, 0]], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(back[[1, 0]], 1.0, epsilon = 1e-14);
        assert!(cholesky_solve(&array![[1.0, 1.0], [1.0, 1.0]], &b).is_none());
    }

    #[test]
    fn svd_reconstructs_both_shapes() {
        let tall = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.5]];
        for a in [tall.clone(), tall.t().to_owned()] {
            let Svd { u, s, v } = svd(a.view());
            let rec = u.dot(&Array2::from_diag(&s)).dot(&v.t());
            for (x, y) in rec.iter().zip(a.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
            assert!(s[0] >= s[1]);
        }
    }

    #[test]
    fn svd_detects_rank_deficiency() {
        let a = array![[1.0, 2.0, 2.0], [3.0, 4.0, 4.0], [5.0, 6.0, 6.0], [7.0, 8.0, 8.0]];
        let Svd { s, .. } = svd(a.view());
        assert!(s[2] < 1e-12 * s[0]);
    }
}
