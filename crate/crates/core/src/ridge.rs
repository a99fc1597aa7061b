//! Closed-form least-squares / ridge solutions for the linear read-out.
//!
//! With `d` hidden features and `N` samples the primal form
//! `B = (H^T H + cI)^-1 H^T Y` is used when `d < N` and the dual form
//! `B = H^T (H H^T + cI)^-1 Y` when `d >= N`. With `c = 0` the solution
//! is the Moore-Penrose pseudoinverse computed by SVD; numerically rank
//! deficient systems are rejected.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GopError, Result};
use crate::linalg::{cholesky_solve, svd};
use crate::network::argmax_rows;
use crate::scalar::Real;

/// Relative singular value threshold for the unregularized solve.
pub const RANK_TOL: f64 = 1e-10;

/// Default ridge grid for candidate evaluation.
pub const DEFAULT_C_GRID: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Debug, Clone, Copy)]
pub struct RidgeProblem<'a, T> {
    pub h: ArrayView2<'a, T>,
    pub y: ArrayView2<'a, T>,
    pub c: T,
}

impl<'a, T: Real> RidgeProblem<'a, T> {
    pub fn new(h: ArrayView2<'a, T>, y: ArrayView2<'a, T>, c: T) -> Self {
        RidgeProblem { h, y, c }
    }

    fn validate(&self) -> Result<()> {
        if self.h.nrows() == 0 {
            return Err(GopError::EmptyInput("ridge problem without samples"));
        }
        if self.y.ncols() == 0 {
            return Err(GopError::EmptyInput("ridge problem without targets"));
        }
        if self.y.nrows() != self.h.nrows() {
            return Err(GopError::dims("ridge target rows", self.h.nrows(), self.y.nrows()));
        }
        if !(self.c >= T::zero()) {
            return Err(GopError::Config("ridge coefficient must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which normal-equation form to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Primal when `d < N`, dual otherwise.
    Auto,
    Primal,
    Dual,
}

pub fn solve_ridge<T: Real>(p: RidgeProblem<'_, T>) -> Result<Array2<T>> {
    solve_ridge_branch(p, Branch::Auto)
}

pub fn solve_ridge_branch<T: Real>(p: RidgeProblem<'_, T>, branch: Branch) -> Result<Array2<T>> {
    p.validate()?;
    AugmentedRidge::new(Array2::zeros((p.h.nrows(), 0)).view(), p.y)?.solve_branch(p.h, p.c, branch)
}

/// Solves the ridge problem on the column concatenation `[existing, new]`.
pub fn solve_augmented<T: Real>(
    h_existing: ArrayView2<'_, T>,
    h_new: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    c: T,
) -> Result<Array2<T>> {
    AugmentedRidge::new(h_existing, y)?.solve(h_new, c)
}

/// Ridge solver for `[existing, new]` that caches the Gram blocks of the
/// fixed `existing` features, so evaluating many candidate `new` blocks
/// only computes the cross terms. Every call is a full re-solve.
pub struct AugmentedRidge<T> {
    existing: Array2<T>,
    y: Array2<T>,
    gram: Array2<T>,
    rhs: Array2<T>,
    outer: Array2<T>,
}

impl<T: Real> AugmentedRidge<T> {
    pub fn new(existing: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<Self> {
        if existing.nrows() != y.nrows() {
            return Err(GopError::dims("existing feature rows", y.nrows(), existing.nrows()));
        }
        if y.nrows() == 0 {
            return Err(GopError::EmptyInput("ridge problem without samples"));
        }
        Ok(AugmentedRidge {
            existing: existing.to_owned(),
            y: y.to_owned(),
            gram: existing.t().dot(&existing),
            rhs: existing.t().dot(&y),
            outer: existing.dot(&existing.t()),
        })
    }

    pub fn existing_dim(&self) -> usize {
        self.existing.ncols()
    }

    pub fn solve(&self, h_new: ArrayView2<'_, T>, c: T) -> Result<Array2<T>> {
        self.solve_branch(h_new, c, Branch::Auto)
    }

    pub fn solve_branch(&self, h_new: ArrayView2<'_, T>, c: T, branch: Branch) -> Result<Array2<T>> {
        let n = self.y.nrows();
        if h_new.nrows() != n {
            return Err(GopError::dims("new feature rows", n, h_new.nrows()));
        }
        if !(c >= T::zero()) {
            return Err(GopError::Config("ridge coefficient must be non-negative".into()));
        }
        let d1 = self.existing.ncols();
        let d = d1 + h_new.ncols();
        if d == 0 {
            return Err(GopError::EmptyInput("ridge problem without features"));
        }
        if c == T::zero() {
            return self.pseudoinverse(h_new);
        }
        let dual = match branch {
            Branch::Auto => d >= n,
            Branch::Primal => false,
            Branch::Dual => true,
        };
        let singular = || GopError::SingularSystem { rank: 0, expected: d.min(n) };
        if dual {
            let mut k = &self.outer + &h_new.dot(&h_new.t());
            for i in 0..n {
                k[[i, i]] += c;
            }
            let alpha = cholesky_solve(&k, &self.y).ok_or_else(singular)?;
            let mut b = Array2::zeros((d, self.y.ncols()));
            b.slice_mut(s![..d1, ..]).assign(&self.existing.t().dot(&alpha));
            b.slice_mut(s![d1.., ..]).assign(&h_new.t().dot(&alpha));
            Ok(b)
        } else {
            let mut g = Array2::zeros((d, d));
            g.slice_mut(s![..d1, ..d1]).assign(&self.gram);
            let cross = self.existing.t().dot(&h_new);
            g.slice_mut(s![..d1, d1..]).assign(&cross);
            g.slice_mut(s![d1.., ..d1]).assign(&cross.t());
            g.slice_mut(s![d1.., d1..]).assign(&h_new.t().dot(&h_new));
            for i in 0..d {
                g[[i, i]] += c;
            }
            let mut rhs = Array2::zeros((d, self.y.ncols()));
            rhs.slice_mut(s![..d1, ..]).assign(&self.rhs);
            rhs.slice_mut(s![d1.., ..]).assign(&h_new.t().dot(&self.y));
            cholesky_solve(&g, &rhs).ok_or_else(singular)
        }
    }

    fn pseudoinverse(&self, h_new: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let h = concatenate(Axis(1), &[self.existing.view(), h_new])
            .expect("row counts checked");
        pinv_solve(h.view(), self.y.view())
    }
}

/// `H^+ Y` by SVD; fails if `H` is rank deficient beyond [`RANK_TOL`].
fn pinv_solve<T: Real>(h: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let dec = svd(h);
    let expected = h.nrows().min(h.ncols());
    let smax = dec.s.iter().copied().fold(T::zero(), T::max);
    let tol = T::of(RANK_TOL) * smax;
    let rank = dec.s.iter().filter(|&&s| s > tol).count();
    if rank < expected || smax == T::zero() {
        return Err(GopError::SingularSystem { rank, expected });
    }
    let mut uty = dec.u.t().dot(&y);
    for (k, mut row) in uty.outer_iter_mut().enumerate() {
        let inv = T::one() / dec.s[k];
        row.mapv_inplace(|v| v * inv);
    }
    Ok(dec.v.dot(&uty))
}

/// Sum of squared errors per sample, averaged over samples.
pub fn mse<T: Real>(pred: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> T {
    let n = T::from_usize(pred.nrows().max(1)).unwrap();
    let sse: T = pred.iter().zip(y.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    sse / n
}

/// Fraction of rows whose argmax agrees.
pub fn accuracy<T: Real>(pred: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> T {
    let p = argmax_rows(pred);
    let t = argmax_rows(y);
    let hits = p.iter().zip(&t).filter(|(a, b)| a == b).count();
    T::from_usize(hits).unwrap() / T::from_usize(p.len().max(1)).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMetric {
    Mse,
    Accuracy,
}

/// Best read-out found over a ridge grid.
#[derive(Debug, Clone)]
pub struct CandidateFit<T> {
    /// Higher is better: accuracy, or negated MSE.
    pub score: T,
    /// MSE on the scoring split.
    pub loss: T,
    /// Accuracy on the scoring split.
    pub accuracy: T,
    pub c: T,
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

/// Solves the read-out with an unpenalized intercept: features and targets
/// are centered on the training rows, the centered problem is solved, and
/// the bias restores the means.
pub struct ReadoutSolver<T> {
    ridge: AugmentedRidge<T>,
    h_mean: Array1<T>,
    y_mean: Array1<T>,
}

impl<T: Real> ReadoutSolver<T> {
    pub fn new(existing: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<Self> {
        let n = T::from_usize(y.nrows().max(1)).unwrap();
        let h_mean = existing.sum_axis(Axis(0)) / n;
        let y_mean = y.sum_axis(Axis(0)) / n;
        let hc = &existing - &h_mean;
        let yc = &y - &y_mean;
        Ok(ReadoutSolver {
            ridge: AugmentedRidge::new(hc.view(), yc.view())?,
            h_mean,
            y_mean,
        })
    }

    /// Returns `(weights, bias)` for the features `[existing, h_new]`.
    pub fn solve(&self, h_new: ArrayView2<'_, T>, c: T) -> Result<(Array2<T>, Array1<T>)> {
        let n = T::from_usize(h_new.nrows().max(1)).unwrap();
        let new_mean = h_new.sum_axis(Axis(0)) / n;
        let new_c = &h_new - &new_mean;
        let b = self.ridge.solve(new_c.view(), c)?;
        let d1 = self.h_mean.len();
        let bias = &self.y_mean
            - &self.h_mean.dot(&b.slice(s![..d1, ..]))
            - &new_mean.dot(&b.slice(s![d1.., ..]));
        Ok((b, bias))
    }
}

/// Scoring data: features and targets of the split used to rank fits.
pub struct EvalSplit<'a, T> {
    pub h: ArrayView2<'a, T>,
    pub y: ArrayView2<'a, T>,
}

/// Fits the read-out for every `c` in `c_grid` and keeps the best by
/// `metric` on `eval` (or on the training rows when `eval` is `None`).
/// Ties go to the larger `c`.
pub fn evaluate_candidate<T: Real>(
    h: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    eval: Option<EvalSplit<'_, T>>,
    c_grid: &[T],
    metric: ScoreMetric,
) -> Result<CandidateFit<T>> {
    let solver = ReadoutSolver::new(Array2::zeros((h.nrows(), 0)).view(), y)?;
    let no_existing = Array2::zeros((0, 0));
    let eval_existing = eval.as_ref().map(|e| Array2::zeros((e.h.nrows(), 0)));
    best_over_grid(
        &solver,
        h,
        no_existing.view(),
        y,
        eval.as_ref().map(|e| (eval_existing.as_ref().unwrap().view(), e.h, e.y)),
        c_grid,
        metric,
    )
}

/// Grid search shared by [`evaluate_candidate`] and the operator-set
/// search. `train_existing` is only consulted when scoring on the training
/// rows.
pub(crate) fn best_over_grid<T: Real>(
    solver: &ReadoutSolver<T>,
    train_new: ArrayView2<'_, T>,
    train_existing: ArrayView2<'_, T>,
    train_y: ArrayView2<'_, T>,
    eval: Option<(ArrayView2<'_, T>, ArrayView2<'_, T>, ArrayView2<'_, T>)>,
    c_grid: &[T],
    metric: ScoreMetric,
) -> Result<CandidateFit<T>> {
    if c_grid.is_empty() {
        return Err(GopError::Config("empty ridge grid".into()));
    }
    let mut best: Option<CandidateFit<T>> = None;
    let mut last_err = None;
    for &c in c_grid {
        let (weights, bias) = match solver.solve(train_new, c) {
            Ok(v) => v,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        if !weights.iter().all(|v| v.is_finite()) {
            last_err = Some(GopError::SingularSystem {
                rank: 0,
                expected: weights.nrows(),
            });
            continue;
        }
        let d1 = solver.h_mean.len();
        let (pred, target) = match eval {
            Some((ex, new, y)) => (predict_split(&weights, &bias, d1, ex, new), y),
            None => (predict_split(&weights, &bias, d1, train_existing, train_new), train_y),
        };
        let loss = mse(pred.view(), target);
        let acc = accuracy(pred.view(), target);
        if !loss.is_finite() {
            last_err = Some(GopError::SingularSystem {
                rank: 0,
                expected: weights.nrows(),
            });
            continue;
        }
        let score = match metric {
            ScoreMetric::Mse => -loss,
            ScoreMetric::Accuracy => acc,
        };
        let better = match &best {
            None => true,
            Some(b) => score > b.score || (score == b.score && c > b.c),
        };
        if better {
            best = Some(CandidateFit {
                score,
                loss,
                accuracy: acc,
                c,
                weights,
                bias,
            });
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(GopError::AllCandidatesFailed))
}

fn predict_split<T: Real>(
    weights: &Array2<T>,
    bias: &Array1<T>,
    d1: usize,
    existing: ArrayView2<'_, T>,
    new: ArrayView2<'_, T>,
) -> Array2<T> {
    let mut pred = new.dot(&weights.slice(s![d1.., ..])) + bias;
    if d1 > 0 {
        pred += &existing.dot(&weights.slice(s![..d1, ..]));
    }
    pred
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identity_problems() {
        let i2: Array2<f64> = Array2::eye(2);
        let b = solve_ridge(RidgeProblem::new(i2.view(), i2.view(), 0.0)).unwrap();
        for (x, y) in b.iter().zip(i2.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
        let y = array![[3.0, -1.0], [0.5, 2.0]];
        let b = solve_ridge(RidgeProblem::new(i2.view(), y.view(), 1.0)).unwrap();
        for (x, t) in b.iter().zip(y.iter()) {
            assert_abs_diff_eq!(*x, t / 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn duplicated_columns() {
        let h = array![[1.0, 2.0], [3.0, 1.0], [0.5, -1.0], [2.0, 2.0]];
        let y = array![[1.0], [0.0], [1.0], [0.0]];
        let b = solve_augmented(h.view(), h.view(), y.view(), 0.5).unwrap();
        assert!(b.iter().all(|v: &f64| v.is_finite()));
        let err = solve_augmented(h.view(), h.view(), y.view(), 0.0).unwrap_err();
        assert!(matches!(err, GopError::SingularSystem { rank: 2, expected: 4 }));
    }

    #[test]
    fn empty_new_block_equals_plain_solve() {
        let h = array![[1.0, 2.0], [3.0, 1.0], [0.5, -1.0], [2.0, 2.5]];
        let y = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let empty = Array2::<f64>::zeros((4, 0));
        let a = solve_augmented(h.view(), empty.view(), y.view(), 0.3).unwrap();
        let b = solve_ridge(RidgeProblem::new(h.view(), y.view(), 0.3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_rows() {
        let h = Array2::<f64>::zeros((4, 2));
        let g = Array2::<f64>::zeros((3, 2));
        let y = Array2::<f64>::zeros((4, 1));
        assert!(matches!(
            solve_augmented(h.view(), g.view(), y.view(), 1.0),
            Err(GopError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn singular_problem_without_ridge() {
        let h = Array2::<f64>::zeros((3, 2));
        let y = Array2::<f64>::ones((3, 1));
        assert!(matches!(
            solve_ridge(RidgeProblem::new(h.view(), y.view(), 0.0)),
            Err(GopError::SingularSystem { .. })
        ));
    }

    #[test]
    fn constant_target_gives_mean_predictor_error() {
        // Centered features carry no information about a constant column,
        // so the fit reduces to the mean predictor with zero error.
        let h = array![[1.0, -1.0], [-1.0, 0.5], [0.0, 0.5]];
        let y = array![[2.0], [2.0], [2.0]];
        let fit = evaluate_candidate(h.view(), y.view(), None, &[1.0], ScoreMetric::Mse).unwrap();
        assert_abs_diff_eq!(fit.loss, 0.0, epsilon = 1e-24);
        assert_abs_diff_eq!(fit.bias[0], 2.0, epsilon = 1e-12);

        // Scored on a different split the error is that of predicting the
        // training mean.
        let yv = array![[1.0], [3.0]];
        let hv = array![[0.0, 0.0], [0.0, 0.0]];
        let fit = evaluate_candidate(
            h.view(),
            y.view(),
            Some(EvalSplit { h: hv.view(), y: yv.view() }),
            &[1.0],
            ScoreMetric::Mse,
        )
        .unwrap();
        assert_abs_diff_eq!(fit.loss, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ties_prefer_larger_c() {
        let h = array![[1.0], [-1.0], [2.0], [-2.0]];
        let y = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let fit =
            evaluate_candidate(h.view(), y.view(), None, &[0.1, 1.0, 10.0], ScoreMetric::Accuracy).unwrap();
        assert_eq!(fit.accuracy, 1.0);
        assert_eq!(fit.c, 10.0);
    }
}
