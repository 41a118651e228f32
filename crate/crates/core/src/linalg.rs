//! Dense least-squares kernels: Householder QR, least squares with RSS,
//! weighted-Lasso coordinate descent and nested projection quadratic forms.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative pivot tolerance below which a design is declared rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Default cap on full coordinate-descent sweeps.
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;

/// Copies the listed columns of `z` into a new matrix, in the listed order.
pub fn select_columns(z: ArrayView2<'_, f64>, cols: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((z.nrows(), cols.len()));
    for (dst, &src) in cols.iter().enumerate() {
        out.column_mut(dst).assign(&z.column(src));
    }
    out
}

/// Householder QR of an `n x m` matrix with `n >= m`.
///
/// Columns are kept as contiguous vectors; the reflectors overwrite the
/// sub-diagonal part and `diag` holds the diagonal of R.
#[derive(Clone, Debug)]
pub struct Qr {
    n: usize,
    cols: Vec<Vec<f64>>,
    diag: Vec<f64>,
    /// Householder vectors, each of length `n - k`, unit norm.
    reflectors: Vec<Vec<f64>>,
}

impl Qr {
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Qr> {
        let n = a.nrows();
        let m = a.ncols();
        let cols: Vec<Vec<f64>> = (0..m).map(|j| a.column(j).to_vec()).collect();
        Qr::from_columns(n, cols)
    }

    /// Factors the matrix whose columns are `cols` (each of length `n`).
    pub fn from_columns(n: usize, mut cols: Vec<Vec<f64>>) -> Result<Qr> {
        let m = cols.len();
        if m > n {
            return Err(Error::RankDeficient { ratio: 0.0 });
        }
        let mut diag = Vec::with_capacity(m);
        let mut reflectors = Vec::with_capacity(m);
        for k in 0..m {
            let (head, tail) = cols.split_at_mut(k + 1);
            let col = &mut head[k];
            let norm = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                diag.push(0.0);
                reflectors.push(vec![0.0; n - k]);
                continue;
            }
            let alpha = if col[k] > 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = col[k..].to_vec();
            v[0] -= alpha;
            let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vnorm > 0.0 {
                v.iter_mut().for_each(|x| *x /= vnorm);
            }
            diag.push(alpha);
            for other in tail.iter_mut() {
                apply_reflector(&v, &mut other[k..]);
            }
            reflectors.push(v);
        }
        let largest = diag.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
        let smallest = diag.iter().fold(f64::INFINITY, |acc, d| acc.min(d.abs()));
        if m > 0 {
            let ratio = if largest > 0.0 { smallest / largest } else { 0.0 };
            if ratio < RANK_TOL {
                return Err(Error::RankDeficient { ratio });
            }
        }
        Ok(Qr {
            n,
            cols,
            diag,
            reflectors,
        })
    }

    pub fn ncols(&self) -> usize {
        self.diag.len()
    }

    /// `Q^T y`, length `n`.
    pub fn qt_mul(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.n);
        let mut out = y.to_vec();
        for (k, v) in self.reflectors.iter().enumerate() {
            apply_reflector(v, &mut out[k..]);
        }
        out
    }

    /// Least-squares coefficients from `Q^T y`.
    pub fn solve_from_qty(&self, qty: &[f64]) -> Vec<f64> {
        let m = self.ncols();
        let mut beta = vec![0.0; m];
        for i in (0..m).rev() {
            let mut acc = qty[i];
            for (j, b) in beta.iter().enumerate().skip(i + 1) {
                acc -= self.cols[j][i] * b;
            }
            beta[i] = acc / self.diag[i];
        }
        beta
    }
}

fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if dot != 0.0 {
        let scale = 2.0 * dot;
        x.iter_mut().zip(v).for_each(|(xi, vi)| *xi -= scale * vi);
    }
}

/// Coefficients of a least-squares fit together with its residual sum of squares.
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub coefficients: Array1<f64>,
    pub rss: f64,
    pub support: Vec<usize>,
}

/// Ordinary least squares through an orthogonal factorization.
pub fn least_squares(design: ArrayView2<'_, f64>, response: ArrayView1<'_, f64>) -> Result<FitResult> {
    let n = design.nrows();
    if response.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, response has {}",
            response.len()
        )));
    }
    let y = response.to_vec();
    if design.ncols() == 0 {
        return Ok(FitResult {
            coefficients: Array1::zeros(0),
            rss: y.iter().map(|v| v * v).sum(),
            support: Vec::new(),
        });
    }
    let qr = Qr::factor(design)?;
    let qty = qr.qt_mul(&y);
    let m = qr.ncols();
    let beta = qr.solve_from_qty(&qty);
    let rss = qty[m..].iter().map(|v| v * v).sum();
    let support = beta
        .iter()
        .enumerate()
        .filter(|(_, b)| **b != 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(FitResult {
        coefficients: Array1::from(beta),
        rss,
        support,
    })
}

/// Residual sums of squares of the nested fits on the first `k` columns,
/// for `k = 0..=m`, from one factorization.
pub fn prefix_rss(design_cols: Vec<Vec<f64>>, y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    let qr = Qr::from_columns(n, design_cols)?;
    let qty = qr.qt_mul(y);
    let total: f64 = y.iter().map(|v| v * v).sum();
    let mut out = Vec::with_capacity(qr.ncols() + 1);
    let mut explained = 0.0;
    out.push(total);
    for value in qty.iter().take(qr.ncols()) {
        explained += value * value;
        out.push((total - explained).max(0.0));
    }
    Ok(out)
}

/// Weighted-Lasso instance: minimize
/// `sum_i (y_i - x_i^T b)^2 + 2 n penalty_level sum_l w_l |b_l|`.
#[derive(Clone, Debug)]
pub struct LassoProblem<'a> {
    pub design: ArrayView2<'a, f64>,
    pub response: ArrayView1<'a, f64>,
    pub penalty_level: f64,
    pub weights: Vec<bool>,
}

/// Sufficient statistics `X^T X / n` and `X^T y / n` for covariance-style
/// coordinate descent.
#[derive(Clone, Debug)]
pub struct GramLasso<'a> {
    pub gram: ArrayView2<'a, f64>,
    pub xty: ArrayView1<'a, f64>,
    pub max_sweeps: usize,
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

impl<'a> GramLasso<'a> {
    pub fn new(gram: ArrayView2<'a, f64>, xty: ArrayView1<'a, f64>) -> Self {
        GramLasso {
            gram,
            xty,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }

    /// Coordinate descent from `init` with active-set sweeps; converged when a
    /// full sweep moves no coordinate by more than `tol`.
    pub fn solve(&self, penalty_level: f64, weights: &[bool], init: &[f64], tol: f64) -> Result<Vec<f64>> {
        let q = self.xty.len();
        debug_assert_eq!(weights.len(), q);
        debug_assert_eq!(init.len(), q);
        let mut beta = init.to_vec();
        // residual correlation r = X^T y / n - G beta
        let mut r: Vec<f64> = self.xty.to_vec();
        for (k, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (l, rl) in r.iter_mut().enumerate() {
                    *rl -= self.gram[[l, k]] * b;
                }
            }
        }
        let mut sweeps = 0usize;
        let update = |l: usize, beta: &mut Vec<f64>, r: &mut Vec<f64>| -> f64 {
            let gll = self.gram[[l, l]];
            if gll <= 0.0 {
                return 0.0;
            }
            let old = beta[l];
            let z = r[l] + gll * old;
            let t = if weights[l] { penalty_level } else { 0.0 };
            let new = soft_threshold(z, t) / gll;
            let delta = new - old;
            if delta != 0.0 {
                beta[l] = new;
                for (k, rk) in r.iter_mut().enumerate() {
                    *rk -= self.gram[[k, l]] * delta;
                }
            }
            delta.abs()
        };
        loop {
            let mut full_change = 0.0f64;
            for l in 0..q {
                full_change = full_change.max(update(l, &mut beta, &mut r));
            }
            sweeps += 1;
            if full_change <= tol {
                return Ok(beta);
            }
            let active: Vec<usize> = (0..q).filter(|&l| beta[l] != 0.0).collect();
            loop {
                if sweeps >= self.max_sweeps {
                    return Err(Error::MaxIterations { sweeps });
                }
                let mut change = 0.0f64;
                for &l in &active {
                    change = change.max(update(l, &mut beta, &mut r));
                }
                sweeps += 1;
                if change <= tol {
                    break;
                }
            }
            if sweeps >= self.max_sweeps {
                return Err(Error::MaxIterations { sweeps });
            }
        }
    }
}

/// `X^T X / n` for a design.
pub fn gram_matrix(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows().max(1) as f64;
    x.t().dot(&x) / n
}

/// Solves a weighted-Lasso problem by coordinate descent.
pub fn weighted_lasso(problem: &LassoProblem<'_>, init: &[f64], tol: f64) -> Result<Array1<f64>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    if problem.penalty_level < 0.0 {
        return Err(Error::InvalidInput("penalty level must be nonnegative".into()));
    }
    let n = problem.design.nrows();
    if problem.response.len() != n || problem.weights.len() != problem.design.ncols() {
        return Err(Error::DimensionMismatch("lasso problem dimensions".into()));
    }
    let gram = gram_matrix(problem.design);
    let xty = problem.design.t().dot(&problem.response) / n.max(1) as f64;
    let solver = GramLasso::new(gram.view(), xty.view());
    solver
        .solve(problem.penalty_level, &problem.weights, init, tol)
        .map(Array1::from)
}

/// `v^T P_A v` and `v^T P_B v` for nested column sets `B ⊆ A`, plus the
/// residual `v^T (I - P_A) v`, from a single factorization with the B columns
/// ordered first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NestedProjection {
    pub proj_a: f64,
    pub proj_b: f64,
    pub residual_a: f64,
}

impl NestedProjection {
    /// `v^T (P_A - P_B) v`, nonnegative by construction.
    pub fn difference(&self) -> f64 {
        self.proj_a - self.proj_b
    }
}

pub fn nested_projection(
    z: ArrayView2<'_, f64>,
    cols_a: &[usize],
    cols_b: &[usize],
    v: ArrayView1<'_, f64>,
) -> Result<NestedProjection> {
    if cols_b.iter().any(|b| !cols_a.contains(b)) {
        return Err(Error::NotNested);
    }
    let mut ordered: Vec<usize> = cols_b.to_vec();
    ordered.sort_unstable();
    ordered.dedup();
    let mut rest: Vec<usize> = cols_a
        .iter()
        .copied()
        .filter(|a| !ordered.contains(a))
        .collect();
    rest.sort_unstable();
    rest.dedup();
    let nb = ordered.len();
    ordered.extend(rest);
    let vv: Vec<f64> = v.to_vec();
    let total: f64 = vv.iter().map(|x| x * x).sum();
    if ordered.is_empty() {
        return Ok(NestedProjection {
            proj_a: 0.0,
            proj_b: 0.0,
            residual_a: total,
        });
    }
    let cols: Vec<Vec<f64>> = ordered.iter().map(|&c| z.column(c).to_vec()).collect();
    let qr = Qr::from_columns(z.nrows(), cols)?;
    let qtv = qr.qt_mul(&vv);
    let proj_b: f64 = qtv[..nb].iter().map(|x| x * x).sum();
    let extra: f64 = qtv[nb..qr.ncols()].iter().map(|x| x * x).sum();
    let residual_a: f64 = qtv[qr.ncols()..].iter().map(|x| x * x).sum();
    Ok(NestedProjection {
        proj_a: proj_b + extra,
        proj_b,
        residual_a,
    })
}

/// `v^T (P_A - P_B) v` for nested column sets of `z`.
pub fn projection_quadratic_form(
    z: ArrayView2<'_, f64>,
    cols_a: &[usize],
    cols_b: &[usize],
    v: ArrayView1<'_, f64>,
) -> Result<f64> {
    nested_projection(z, cols_a, cols_b, v).map(|p| p.difference())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0))
    }

    /// Gauss-Jordan inverse, used only to build dense oracles.
    fn invert(a: &Array2<f64>) -> Array2<f64> {
        let m = a.nrows();
        let mut aug = Array2::zeros((m, 2 * m));
        for i in 0..m {
            for j in 0..m {
                aug[[i, j]] = a[[i, j]];
            }
            aug[[i, m + i]] = 1.0;
        }
        for c in 0..m {
            let piv = (c..m)
                .max_by(|&x, &y| aug[[x, c]].abs().partial_cmp(&aug[[y, c]].abs()).unwrap())
                .unwrap();
            for j in 0..2 * m {
                let t = aug[[c, j]];
                aug[[c, j]] = aug[[piv, j]];
                aug[[piv, j]] = t;
            }
            let d = aug[[c, c]];
            for j in 0..2 * m {
                aug[[c, j]] /= d;
            }
            for r in 0..m {
                if r != c {
                    let f = aug[[r, c]];
                    for j in 0..2 * m {
                        aug[[r, j]] -= f * aug[[c, j]];
                    }
                }
            }
        }
        aug.slice(ndarray::s![.., m..]).to_owned()
    }

    fn projector(z: &Array2<f64>) -> Array2<f64> {
        if z.ncols() == 0 {
            return Array2::zeros((z.nrows(), z.nrows()));
        }
        let inv = invert(&z.t().dot(z));
        z.dot(&inv).dot(&z.t())
    }

    #[test]
    fn mean_fit() {
        let x = Array2::ones((4, 1));
        let y = array![1.0, 2.0, 3.0, 4.0];
        let fit = least_squares(x.view(), y.view()).unwrap();
        assert!((fit.coefficients[0] - 2.5).abs() < 1e-12);
        assert!((fit.rss - 5.0).abs() < 1e-12);
    }

    #[test]
    fn exact_interpolation() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let y = array![3.0, 4.0];
        let fit = least_squares(x.view(), y.view()).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 4.0).abs() < 1e-12);
        assert!(fit.rss.abs() < 1e-20);
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 6, 3);
        let y = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
        let fit = least_squares(x.view(), y.view()).unwrap();
        let oracle = invert(&x.t().dot(&x)).dot(&x.t().dot(&y));
        for i in 0..3 {
            assert!((fit.coefficients[i] - oracle[i]).abs() < 1e-8);
        }
        let resid = &y - &x.dot(&oracle);
        assert!((fit.rss - resid.dot(&resid)).abs() < 1e-8 * resid.dot(&resid).max(1.0));
    }

    #[test]
    fn collinear_columns_fail_loudly() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let y = array![1.0, 2.0, 3.0];
        assert!(matches!(
            least_squares(x.view(), y.view()),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn lasso_soft_threshold_cases() {
        // x^T x = n and x^T y / n = 1.5
        let x = array![[1.0], [-1.0], [1.0], [-1.0]];
        let y = array![1.5, -1.5, 1.5, -1.5];
        let mk = |penalty, weight| LassoProblem {
            design: x.view(),
            response: y.view(),
            penalty_level: penalty,
            weights: vec![weight],
        };
        let b = weighted_lasso(&mk(0.5, true), &[0.0], 1e-12).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12);
        let b = weighted_lasso(&mk(0.5, false), &[0.0], 1e-12).unwrap();
        assert!((b[0] - 1.5).abs() < 1e-12);
        let b = weighted_lasso(&mk(1.5, true), &[0.0], 1e-12).unwrap();
        assert_eq!(b[0], 0.0);
        let b = weighted_lasso(&mk(2.0, true), &[3.0], 1e-12).unwrap();
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn lasso_rejects_bad_tolerance() {
        let x = array![[1.0]];
        let y = array![1.0];
        let prob = LassoProblem {
            design: x.view(),
            response: y.view(),
            penalty_level: 0.1,
            weights: vec![true],
        };
        assert!(weighted_lasso(&prob, &[0.0], 0.0).is_err());
    }

    #[test]
    fn lasso_sweep_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 20, 5);
        let y = Array1::from_shape_fn(20, |_| rng.random_range(-1.0..1.0));
        let gram = gram_matrix(x.view());
        let xty = x.t().dot(&y) / 20.0;
        let mut solver = GramLasso::new(gram.view(), xty.view());
        solver.max_sweeps = 1;
        let r = solver.solve(0.0, &[false; 5], &[0.0; 5], 1e-300);
        assert!(matches!(r, Err(Error::MaxIterations { .. })));
    }

    #[test]
    fn projection_simple_cases() {
        let z = array![[1.0], [0.0]];
        let v = array![1.0, 0.0];
        let val = projection_quadratic_form(z.view(), &[0], &[], v.view()).unwrap();
        assert!((val - 1.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_matrix(&mut rng, 8, 3);
        let v = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let same = projection_quadratic_form(z.view(), &[0, 2], &[2, 0], v.view()).unwrap();
        assert!(same.abs() < 1e-14);
        assert_eq!(
            projection_quadratic_form(z.view(), &[0], &[1], v.view()),
            Err(Error::NotNested)
        );
    }

    #[test]
    fn projection_matches_dense_projectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_matrix(&mut rng, 8, 3);
        let v = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let got = projection_quadratic_form(z.view(), &[0, 1, 2], &[0], v.view()).unwrap();
        let pa = projector(&z);
        let pb = projector(&select_columns(z.view(), &[0]));
        let want = v.dot(&pa.dot(&v)) - v.dot(&pb.dot(&v));
        assert!((got - want).abs() < 1e-8);
    }

    #[test]
    fn prefix_rss_matches_individual_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 12, 4);
        let y: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cols: Vec<Vec<f64>> = (0..4).map(|j| x.column(j).to_vec()).collect();
        let prefix = prefix_rss(cols, &y).unwrap();
        let ya = Array1::from(y.clone());
        for k in 0..=4 {
            let idx: Vec<usize> = (0..k).collect();
            let fit = least_squares(select_columns(x.view(), &idx).view(), ya.view()).unwrap();
            assert!((prefix[k] - fit.rss).abs() < 1e-10);
        }
    }
}
