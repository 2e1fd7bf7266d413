//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! min  ½ xᵀHx + gᵀx
//! s.t. A_eq x  = b_eq
//!      A_in x ≤ b_in
//! ```
//!
//! with a primal active-set method. `H` only has to be positive
//! semidefinite: directions of zero curvature inside the working set are
//! followed as rays until a constraint blocks them. A feasible start is
//! found by a phase-1 problem that minimizes the largest inequality
//! violation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Eigenvalue tolerance for the positive-semidefinite probe on `H`.
pub const PSD_TOL: f64 = 1e-10;
const PSD_JITTER: f64 = 1e-12;
/// Phase-1 residual above which the constraint set is declared empty.
pub const INFEASIBILITY_TOL: f64 = 1e-7;
const PHASE1_PROX: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix is not symmetric positive semidefinite (min eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("non-finite entry in problem data")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    /// The objective decreases without bound along a feasible ray.
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QuadraticProgram {
    /// Unconstrained problem `min ½ xᵀHx + gᵀx`.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension(format!(
                "A_eq is {}x{}, b_eq has {} rows, n = {n}",
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len()
            )));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Dimension(format!(
                "A_in is {}x{}, b_in has {} rows, n = {n}",
                self.a_in.nrows(),
                self.a_in.ncols(),
                self.b_in.len()
            )));
        }
        let finite = self.h.iter().all(|v| v.is_finite())
            && self.g.iter().all(|v| v.is_finite())
            && self.a_eq.iter().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite())
            && self.a_in.iter().all(|v| v.is_finite())
            && self.b_in.iter().all(|v| v.is_finite());
        if !finite {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }

    pub fn solve(&self) -> Result<QpSolution, QpError> {
        solve_qp(self, DEFAULT_TOL, DEFAULT_MAX_ITER)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub mu_in: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Checks that `h` is symmetric positive semidefinite.
pub fn check_psd(h: &DMatrix<f64>) -> Result<(), QpError> {
    let n = h.nrows();
    if n == 0 {
        return Ok(());
    }
    let scale = h.amax().max(1.0);
    let asym = (h - h.transpose()).amax();
    if asym > 1e-9 * scale {
        return Err(QpError::NotConvex(f64::NAN));
    }
    let sym = (h + h.transpose()) * 0.5;
    let jittered = &sym + DMatrix::identity(n, n) * (PSD_JITTER * scale);
    if jittered.cholesky().is_some() {
        return Ok(());
    }
    let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
    if min_eig >= -PSD_TOL * scale {
        Ok(())
    } else {
        Err(QpError::NotConvex(min_eig))
    }
}

/// Max-norm of the KKT conditions: stationarity, primal feasibility,
/// dual feasibility and complementary slackness.
pub fn kkt_residual(prob: &QuadraticProgram, sol: &QpSolution) -> f64 {
    let x = &sol.x;
    let mut stat = &prob.h * x + &prob.g;
    if prob.a_eq.nrows() > 0 {
        stat += prob.a_eq.transpose() * &sol.lambda_eq;
    }
    if prob.a_in.nrows() > 0 {
        stat += prob.a_in.transpose() * &sol.mu_in;
    }
    let mut r = stat.amax();
    if prob.a_eq.nrows() > 0 {
        r = r.max((&prob.a_eq * x - &prob.b_eq).amax());
    }
    if prob.a_in.nrows() > 0 {
        let slack = &prob.a_in * x - &prob.b_in;
        for i in 0..slack.len() {
            r = r.max(slack[i].max(0.0));
            r = r.max((-sol.mu_in[i]).max(0.0));
            r = r.max((sol.mu_in[i] * slack[i]).abs());
        }
    }
    r
}

/// Solves `prob` to tolerance `tol`.
///
/// Malformed input is an error; infeasible, unbounded and iteration-capped
/// outcomes are reported through [`QpSolution::status`].
pub fn solve_qp(prob: &QuadraticProgram, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    prob.validate()?;
    check_psd(&prob.h)?;
    let n = prob.n();
    let h = (&prob.h + prob.h.transpose()) * 0.5;

    // Row equilibration; all-zero rows are either trivially satisfied or
    // make the problem infeasible.
    let mut eq_rows = Vec::new();
    let mut eq_scale = Vec::new();
    let mut trivially_infeasible = false;
    for i in 0..prob.a_eq.nrows() {
        let s = prob.a_eq.row(i).amax();
        if s > 0.0 {
            eq_rows.push(i);
            eq_scale.push(s);
        } else if prob.b_eq[i].abs() > INFEASIBILITY_TOL {
            trivially_infeasible = true;
        }
    }
    let mut in_rows = Vec::new();
    let mut in_scale = Vec::new();
    for i in 0..prob.a_in.nrows() {
        let s = prob.a_in.row(i).amax();
        if s > 0.0 {
            in_rows.push(i);
            in_scale.push(s);
        } else if prob.b_in[i] < -INFEASIBILITY_TOL {
            trivially_infeasible = true;
        }
    }
    let e_mat = DMatrix::from_fn(eq_rows.len(), n, |r, c| prob.a_eq[(eq_rows[r], c)] / eq_scale[r]);
    let e_vec = DVector::from_fn(eq_rows.len(), |r, _| prob.b_eq[eq_rows[r]] / eq_scale[r]);
    let a_mat = DMatrix::from_fn(in_rows.len(), n, |r, c| prob.a_in[(in_rows[r], c)] / in_scale[r]);
    let a_vec = DVector::from_fn(in_rows.len(), |r, _| prob.b_in[in_rows[r]] / in_scale[r]);

    let infeasible = |iterations| {
        let mut sol = QpSolution {
            x: DVector::zeros(n),
            lambda_eq: DVector::zeros(prob.a_eq.nrows()),
            mu_in: DVector::zeros(prob.a_in.nrows()),
            status: QpStatus::Infeasible,
            kkt_residual: f64::INFINITY,
            iterations,
        };
        sol.kkt_residual = kkt_residual(prob, &sol);
        sol
    };
    if trivially_infeasible {
        return Ok(infeasible(0));
    }

    let start = match phase_one(&e_mat, &e_vec, &a_mat, &a_vec, max_iter) {
        Some(s) => s,
        None => return Ok(infeasible(0)),
    };
    let (x0, phase1_iters) = start;

    let out = active_set(&h, &prob.g, &e_mat, &e_vec, &a_mat, &a_vec, x0, tol, max_iter);

    let mut lambda_eq = DVector::zeros(prob.a_eq.nrows());
    for (k, &i) in eq_rows.iter().enumerate() {
        lambda_eq[i] = out.lambda[k] / eq_scale[k];
    }
    let mut mu_in = DVector::zeros(prob.a_in.nrows());
    for (k, &i) in in_rows.iter().enumerate() {
        mu_in[i] = out.mu[k] / in_scale[k];
    }
    let mut sol = QpSolution {
        x: out.x,
        lambda_eq,
        mu_in,
        status: out.status,
        kkt_residual: 0.0,
        iterations: out.iterations + phase1_iters,
    };
    sol.kkt_residual = kkt_residual(prob, &sol);
    Ok(sol)
}

/// Finds a point satisfying the (scaled) constraints, or `None` when the
/// smallest achievable violation exceeds [`INFEASIBILITY_TOL`].
fn phase_one(
    e_mat: &DMatrix<f64>,
    e_vec: &DVector<f64>,
    a_mat: &DMatrix<f64>,
    a_vec: &DVector<f64>,
    max_iter: usize,
) -> Option<(DVector<f64>, usize)> {
    let n = e_mat.ncols();
    let x_e = if e_mat.nrows() > 0 {
        let x = least_squares(e_mat, e_vec);
        if (e_mat * &x - e_vec).amax() > INFEASIBILITY_TOL {
            return None;
        }
        x
    } else {
        DVector::zeros(n)
    };
    if a_mat.nrows() == 0 {
        return Some((x_e, 0));
    }
    let violation = (a_mat * &x_e - a_vec).max();
    if violation <= 0.0 {
        return Some((x_e, 0));
    }

    // min t + ρ/2‖x − x_e‖²  s.t.  E x = e,  A x − t ≤ b,  −t ≤ 0
    let m = a_mat.nrows();
    let mut h1 = DMatrix::zeros(n + 1, n + 1);
    let mut g1 = DVector::zeros(n + 1);
    for i in 0..n {
        h1[(i, i)] = PHASE1_PROX;
        g1[i] = -PHASE1_PROX * x_e[i];
    }
    g1[n] = 1.0;
    let mut e1 = DMatrix::zeros(e_mat.nrows(), n + 1);
    e1.view_mut((0, 0), (e_mat.nrows(), n)).copy_from(e_mat);
    let mut a1 = DMatrix::zeros(m + 1, n + 1);
    a1.view_mut((0, 0), (m, n)).copy_from(a_mat);
    for i in 0..m {
        a1[(i, n)] = -1.0;
    }
    a1[(m, n)] = -1.0;
    let mut b1 = DVector::zeros(m + 1);
    b1.rows_mut(0, m).copy_from(a_vec);
    let mut z0 = DVector::zeros(n + 1);
    z0.rows_mut(0, n).copy_from(&x_e);
    z0[n] = violation;

    let out = active_set(&h1, &g1, &e1, e_vec, &a1, &b1, z0, DEFAULT_TOL, max_iter.max(50) * 2);
    let t = out.x[n];
    if out.status != QpStatus::Optimal || t > INFEASIBILITY_TOL {
        return None;
    }
    Some((out.x.rows(0, n).into_owned(), out.iterations))
}

struct ActiveSetOutput {
    x: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
    status: QpStatus,
    iterations: usize,
}

/// Primal active-set iterations from the feasible point `x`.
///
/// Constraint rows are assumed equilibrated (unit max-norm).
#[allow(clippy::too_many_arguments)]
fn active_set(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    e_mat: &DMatrix<f64>,
    e_vec: &DVector<f64>,
    a_mat: &DMatrix<f64>,
    a_vec: &DVector<f64>,
    mut x: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> ActiveSetOutput {
    let n = x.len();
    let m_eq = e_mat.nrows();
    let m_in = a_mat.nrows();
    let mut working: Vec<usize> = Vec::new();
    let h_scale = h.amax().max(1.0);
    let _ = e_vec;

    for iter in 0..max_iter {
        let grad = h * &x + g;
        let m_w = m_eq + working.len();
        let mut c = DMatrix::zeros(m_w, n);
        if m_eq > 0 {
            c.view_mut((0, 0), (m_eq, n)).copy_from(e_mat);
        }
        for (k, &i) in working.iter().enumerate() {
            c.row_mut(m_eq + k).copy_from(&a_mat.row(i));
        }
        let z = null_space(&c);

        let (p, is_ray) = if z.ncols() == 0 {
            (DVector::zeros(n), false)
        } else {
            reduced_step(h, &grad, &z, h_scale, tol)
        };

        let step_small = p.amax() <= 1e-12 * (1.0 + x.amax());
        if step_small {
            // Stationary on the working set: inspect multipliers.
            let w = if m_w > 0 {
                least_squares(&c.transpose(), &(-&grad))
            } else {
                DVector::zeros(0)
            };
            // Most negative multiplier leaves; ties go to the lowest index.
            let mut drop: Option<(usize, f64)> = None;
            for (k, &i) in working.iter().enumerate() {
                let mu = w[m_eq + k];
                if mu >= -tol {
                    continue;
                }
                let better = match drop {
                    None => true,
                    Some((pos, best)) => mu < best || (mu == best && i < working[pos]),
                };
                if better {
                    drop = Some((k, mu));
                }
            }
            match drop {
                None => {
                    let lambda = w.rows(0, m_eq).into_owned();
                    let mut mu = DVector::zeros(m_in);
                    for (k, &i) in working.iter().enumerate() {
                        mu[i] = w[m_eq + k].max(0.0);
                    }
                    return ActiveSetOutput {
                        x,
                        lambda,
                        mu,
                        status: QpStatus::Optimal,
                        iterations: iter + 1,
                    };
                }
                Some((k, _)) => {
                    working.remove(k);
                }
            }
            continue;
        }

        // Ratio test over constraints outside the working set; ties go to
        // the lowest index.
        let p_norm = p.norm();
        let mut alpha = if is_ray { f64::INFINITY } else { 1.0 };
        let mut blocking = None;
        for i in 0..m_in {
            if working.contains(&i) {
                continue;
            }
            let row = a_mat.row(i);
            let ap = row.dot(&p.transpose());
            if ap <= 1e-12 * p_norm {
                continue;
            }
            let slack = (a_vec[i] - row.dot(&x.transpose())).max(0.0);
            let a_i = slack / ap;
            if a_i < alpha {
                alpha = a_i;
                blocking = Some(i);
            }
        }
        if !alpha.is_finite() {
            return ActiveSetOutput {
                x,
                lambda: DVector::zeros(m_eq),
                mu: DVector::zeros(m_in),
                status: QpStatus::Unbounded,
                iterations: iter + 1,
            };
        }
        x += &p * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }

    ActiveSetOutput {
        x,
        lambda: DVector::zeros(m_eq),
        mu: DVector::zeros(m_in),
        status: QpStatus::MaxIter,
        iterations: max_iter,
    }
}

/// Step inside the null space `z` of the working constraints. Returns the
/// direction and whether it is a zero-curvature descent ray.
fn reduced_step(
    h: &DMatrix<f64>,
    grad: &DVector<f64>,
    z: &DMatrix<f64>,
    h_scale: f64,
    tol: f64,
) -> (DVector<f64>, bool) {
    let hz = z.transpose() * h * z;
    let hz = (&hz + hz.transpose()) * 0.5;
    let gz = z.transpose() * grad;
    let eig = SymmetricEigen::new(hz);
    let curv_tol = 1e-10 * h_scale;
    let coeffs = eig.eigenvectors.transpose() * &gz;
    let grad_tol = tol.min(1e-9) * grad.amax().max(1.0);

    let mut ray = DVector::zeros(gz.len());
    let mut has_ray = false;
    for i in 0..coeffs.len() {
        if eig.eigenvalues[i] <= curv_tol && coeffs[i].abs() > grad_tol {
            has_ray = true;
            ray -= eig.eigenvectors.column(i) * coeffs[i];
        }
    }
    if has_ray {
        return (z * ray, true);
    }
    let mut y = DVector::zeros(gz.len());
    for i in 0..coeffs.len() {
        if eig.eigenvalues[i] > curv_tol {
            y -= eig.eigenvectors.column(i) * (coeffs[i] / eig.eigenvalues[i]);
        }
    }
    (z * y, false)
}

/// Orthonormal basis of the null space of `c` (columns).
pub(crate) fn null_space(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.ncols();
    if c.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let rows = c.nrows().max(n);
    let mut sq = DMatrix::zeros(rows, n);
    sq.view_mut((0, 0), (c.nrows(), n)).copy_from(c);
    let svd = sq.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    let thr = 1e-10 * smax.max(1e-300);
    let cols: Vec<usize> = (0..n).filter(|&i| svd.singular_values[i] <= thr).collect();
    DMatrix::from_fn(n, cols.len(), |r, k| v_t[(cols[k], r)])
}

/// Minimum-norm least-squares solution of `a x = b`.
pub(crate) fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(b, 1e-12 * smax.max(1e-300))
        .expect("svd with u and v")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn unconstrained_minimum() {
        let prob = QuadraticProgram::new(eye(2), DVector::from_vec(vec![-1.0, -2.0]));
        let sol = prob.solve().unwrap();
        assert!(sol.is_optimal());
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 2.0, epsilon = 1e-12);
        assert!(sol.kkt_residual <= 1e-12);
    }

    #[test]
    fn perturbed_point_residual_is_stationarity_gap() {
        let prob = QuadraticProgram::new(eye(2), DVector::from_vec(vec![-1.0, -2.0]));
        let mut sol = prob.solve().unwrap();
        sol.x.add_scalar_mut(0.1);
        assert_abs_diff_eq!(kkt_residual(&prob, &sol), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn equality_symmetry() {
        let prob = QuadraticProgram::new(eye(2), DVector::zeros(2))
            .with_equalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_vec(vec![2.0]));
        let sol = prob.solve().unwrap();
        assert!(sol.is_optimal());
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scalar_inequality_multiplier() {
        let prob = QuadraticProgram::new(eye(1), DVector::from_vec(vec![-3.0]))
            .with_inequalities(DMatrix::from_row_slice(1, 1, &[1.0]), DVector::from_vec(vec![1.0]));
        let sol = prob.solve().unwrap();
        assert!(sol.is_optimal());
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.mu_in[0], 2.0, epsilon = 1e-12);
        assert!(sol.kkt_residual <= 1e-9);

        // grid oracle over [-5, 5], step 1e-4, restricted to x ≤ 1
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=100_000 {
            let x = -5.0 + k as f64 * 1e-4;
            if x > 1.0 {
                break;
            }
            let f = 0.5 * x * x - 3.0 * x;
            if f < best.0 {
                best = (f, x);
            }
        }
        assert!((best.1 - sol.x[0]).abs() <= 2e-4);
    }

    #[test]
    fn detects_infeasible_box() {
        // x ≤ 0 and -x ≤ -1
        let prob = QuadraticProgram::new(eye(1), DVector::zeros(1)).with_inequalities(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![0.0, -1.0]),
        );
        assert_eq!(prob.solve().unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn detects_inconsistent_equalities() {
        let prob = QuadraticProgram::new(eye(2), DVector::zeros(2)).with_equalities(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, 2.0]),
        );
        assert_eq!(prob.solve().unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let prob = QuadraticProgram::new(eye(2), DVector::zeros(2)).with_equalities(
            DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]),
            DVector::from_vec(vec![2.0, 4.0, 0.0]),
        );
        let sol = prob.solve().unwrap();
        assert!(sol.is_optimal());
        assert!(sol.kkt_residual <= 1e-10, "{}", sol.kkt_residual);
    }

    #[test]
    fn semidefinite_cost_with_bounds() {
        // LP: min -x0 - x1 s.t. x ≤ 1 componentwise, x0 + x1 ≤ 1.5
        let prob = QuadraticProgram::new(DMatrix::zeros(2, 2), DVector::from_vec(vec![-1.0, -1.0]))
            .with_inequalities(
                DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
                DVector::from_vec(vec![1.0, 1.0, 1.5]),
            );
        let sol = prob.solve().unwrap();
        assert!(sol.is_optimal());
        assert_abs_diff_eq!(sol.x[0] + sol.x[1], 1.5, epsilon = 1e-12);
        assert!(sol.kkt_residual <= 1e-9);
    }

    #[test]
    fn unbounded_ray_reported() {
        let prob = QuadraticProgram::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0]));
        assert_eq!(prob.solve().unwrap().status, QpStatus::Unbounded);
    }

    #[test]
    fn rejects_indefinite_cost() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let prob = QuadraticProgram::new(h, DVector::zeros(2));
        assert!(matches!(prob.solve(), Err(QpError::NotConvex(_))));
    }

    #[test]
    fn rejects_bad_dimensions() {
        let prob = QuadraticProgram::new(eye(2), DVector::zeros(3));
        assert!(matches!(prob.solve(), Err(QpError::Dimension(_))));
    }

    #[test]
    fn deterministic_for_fixed_input() {
        let prob = QuadraticProgram::new(eye(3), DVector::from_vec(vec![1.0, -2.0, 0.5])).with_inequalities(
            DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, -1.0, 0.0, 2.0]),
            DVector::from_vec(vec![0.5, 0.1]),
        );
        let a = prob.solve().unwrap();
        let b = prob.solve().unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.mu_in, b.mu_in);
    }
}
