//! Recovery of the relative trust blocks `(B, D)` from terminal-opinion
//! data.
//!
//! The estimate solves
//!
//! ```text
//! min ||off(D)||_1  s.t.  ||(I - D) Y - B Z||_F <= eps,
//!                         [B D] 1 = 1,  B, D >= 0,  diag(D) = 0,  supp(B) within E_B
//! ```
//!
//! On the feasible set `||off(D_i)||_1 = 1 - sum_j B_ij`, so the objective is
//! linear and the problem splits by rows once the Frobenius ball is moved into
//! a Lagrangian with a single global weight `lambda`:
//!
//! ```text
//! row i:  min ||y_i - D_i Y_{-i} - B_i Z||^2 - lambda * sum_j B_ij   over the row simplex
//! ```
//!
//! Each row is solved by accelerated projected gradient with adaptive restart.
//! Whenever the iterate's support looks settled, the reduced equality
//! constrained problem on that support is solved exactly (QR) and accepted
//! only if it passes a KKT check. `lambda` is then tuned so that the global
//! residual meets `eps`.
//!
//! `eps` bounds the *unsquared* Frobenius norm.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DataMatrices;
use crate::error::{Error, Result};
use crate::graph::StubbornSupport;
use crate::parallel;

/// A row is flagged degenerate when its data spread is below this.
const DEGENERATE_SPREAD: f64 = 1e-12;
/// Iterate entries at or below this are treated as zero when polishing.
const SUPPORT_FLOOR: f64 = 1e-12;
/// A reduced column whose QR diagonal is below `SINGULAR_RTOL` times its norm
/// is treated as dependent on the preceding columns.
const SINGULAR_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Projected-gradient iteration budget per row solve.
    pub max_iter: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    /// Smallest penalty tried, relative to the data gradient scale.
    pub lambda_min_rel: f64,
    /// Largest penalty tried, relative to the data gradient scale.
    pub lambda_max_rel: f64,
    /// Bisection stops once the residual bracket is within `bisection_tol * eps`.
    pub bisection_tol: f64,
    pub max_bisections: usize,
    /// Power iterations used to estimate each row's Lipschitz constant.
    pub power_iters: usize,
    /// Attempt an exact support solve every this many iterations.
    pub polish_every: usize,
    /// Return an error instead of a flagged estimate when a row does not converge.
    pub strict: bool,
    /// When no penalty meets `eps`, return the minimum-residual (`lambda = 0`)
    /// estimate flagged with `epsilon_feasible = false` instead of failing.
    pub relax_infeasible: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 50_000,
            tol: 1e-10,
            lambda_min_rel: 1e-14,
            lambda_max_rel: 10.0,
            bisection_tol: 1e-4,
            max_bisections: 100,
            power_iters: 100,
            polish_every: 100,
            strict: false,
            relax_infeasible: false,
        }
    }
}

/// How the sparsity/fit trade-off is fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// Residual bound `||(I - D) Y - B Z||_F <= eps`; the penalty is tuned.
    Epsilon(f64),
    /// Fixed penalty weight.
    Lambda(f64),
}

#[derive(Debug, Clone)]
pub struct SsiProblem {
    pub data: DataMatrices,
    pub support: StubbornSupport,
    pub penalty: Penalty,
    pub options: SolverOptions,
}

impl SsiProblem {
    pub fn new(data: DataMatrices, support: StubbornSupport, penalty: Penalty) -> Self {
        Self {
            data,
            support,
            penalty,
            options: SolverOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        let nn = self.data.n_normal();
        let ns = self.data.n_stub();
        if self.support.n_normal() != nn || self.support.n_stub() != ns {
            return Err(Error::DimensionMismatch(format!(
                "support is {}x{}, data has {nn} normal / {ns} stubborn agents",
                self.support.n_normal(),
                self.support.n_stub()
            )));
        }
        if self.data.y.ncols() != self.data.z.ncols() {
            return Err(Error::DimensionMismatch("Y and Z column counts differ".into()));
        }
        if let Some(i) = self.support.rows().iter().position(Vec::is_empty) {
            return Err(Error::InvalidParameter(format!(
                "normal agent {i} has an empty stubborn support"
            )));
        }
        match self.penalty {
            Penalty::Epsilon(e) if !(e >= 0.0) => {
                Err(Error::InvalidParameter(format!("epsilon = {e} must be >= 0")))
            }
            Penalty::Lambda(l) if !(l >= 0.0) => {
                Err(Error::InvalidParameter(format!("lambda = {l} must be >= 0")))
            }
            _ => Ok(()),
        }
    }
}

/// Recovered relative trust and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SsiEstimate {
    pub b_hat: DMatrix<f64>,
    pub d_hat: DMatrix<f64>,
    /// `||(I - D) Y - B Z||_F` at the returned point.
    pub residual: f64,
    pub l1_offdiag: f64,
    pub penalty: f64,
    /// Cumulative projected-gradient iterations per row.
    pub iterations: Vec<usize>,
    pub degenerate_rows: Vec<usize>,
    pub unconverged_rows: Vec<usize>,
    /// Number of penalty values evaluated.
    pub penalty_evaluations: usize,
    /// False only for a relaxed solve whose `eps` was below the attainable residual.
    pub epsilon_feasible: bool,
}

impl SsiEstimate {
    pub fn converged(&self) -> bool {
        self.unconverged_rows.is_empty()
    }

    /// Sparse text export, same layout as a trust system.
    pub fn to_text(&self) -> String {
        crate::graph::write_trust_text(&self.b_hat, &self.d_hat)
    }

    /// Key-value diagnostics block.
    pub fn diagnostics_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let _ = writeln!(out, "residual = {:e}", self.residual);
        let _ = writeln!(out, "lambda = {:e}", self.penalty);
        let _ = writeln!(out, "l1_offdiag = {}", self.l1_offdiag);
        let _ = writeln!(out, "total_iterations = {}", self.iterations.iter().sum::<usize>());
        let _ = writeln!(out, "max_row_iterations = {}", self.iterations.iter().max().copied().unwrap_or(0));
        let _ = writeln!(out, "penalty_evaluations = {}", self.penalty_evaluations);
        let _ = writeln!(out, "converged = {}", self.converged());
        let _ = writeln!(out, "epsilon_feasible = {}", self.epsilon_feasible);
        let _ = writeln!(out, "unconverged_rows = {}", list(&self.unconverged_rows));
        let _ = writeln!(out, "degenerate_rows = {}", list(&self.degenerate_rows));
        out
    }
}

/// Rescales each row by `1 / (1 - D_ii)` and zeroes the diagonal.
pub fn relative_trust(b: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_blocks(b, d)?;
    let mut br = b.clone();
    let mut dr = d.clone();
    for i in 0..d.nrows() {
        let scale = 1.0 - d[(i, i)];
        if !(scale > 0.0) {
            return Err(Error::SelfTrustSaturated {
                row: i,
                value: d[(i, i)],
            });
        }
        br.row_mut(i).unscale_mut(scale);
        dr.row_mut(i).unscale_mut(scale);
        dr[(i, i)] = 0.0;
    }
    Ok((br, dr))
}

/// Moves `(B, D)` within its equivalence class:
/// `B' = L B`, `off(D') = L off(D)`, `diag(D') = 1 - L (B 1 + off(D) 1)`.
pub fn apply_equivalence_scaling(
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    scaling: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_blocks(b, d)?;
    if scaling.len() != d.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} scaling entries for {} rows",
            scaling.len(),
            d.nrows()
        )));
    }
    let mut bs = b.clone();
    let mut ds = d.clone();
    for (i, &l) in scaling.iter().enumerate() {
        if !(l >= 0.0) || !l.is_finite() {
            return Err(Error::InvalidParameter(format!("scaling entry {i} = {l}")));
        }
        bs.row_mut(i).scale_mut(l);
        ds.row_mut(i).scale_mut(l);
        ds[(i, i)] = 0.0;
        // taken from the stored entries so the row sums to one up to rounding
        let diag = 1.0 - bs.row(i).sum() - ds.row(i).sum();
        // tolerate rounding when the diagonal is driven exactly to zero
        if diag < -1e-12 {
            return Err(Error::NegativeDiagonal { row: i, value: diag });
        }
        ds[(i, i)] = diag.max(0.0);
    }
    Ok((bs, ds))
}

fn check_blocks(b: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<()> {
    if b.nrows() != d.nrows() || !d.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "B is {}x{}, D is {}x{}",
            b.nrows(),
            b.ncols(),
            d.nrows(),
            d.ncols()
        )));
    }
    Ok(())
}

/// `||(I - D) Y - B Z||_F`.
pub fn residual(b: &DMatrix<f64>, d: &DMatrix<f64>, data: &DataMatrices) -> Result<f64> {
    check_blocks(b, d)?;
    if d.nrows() != data.n_normal() || b.ncols() != data.n_stub() {
        return Err(Error::DimensionMismatch(format!(
            "blocks are {}x{} / {}x{}, data has {} normal / {} stubborn",
            b.nrows(),
            b.ncols(),
            d.nrows(),
            d.ncols(),
            data.n_normal(),
            data.n_stub()
        )));
    }
    let r = &data.y - d * &data.y - b * &data.z;
    Ok(r.norm())
}

/// Euclidean projection onto `{u >= 0, sum u = 1, u_j = 0 off allowed}`.
pub fn project_constrained_simplex(v: &[f64], allowed: &[usize]) -> Result<Vec<f64>> {
    if allowed.is_empty() {
        return Err(Error::InvalidParameter("allowed index set is empty".into()));
    }
    if let Some(&j) = allowed.iter().find(|&&j| j >= v.len()) {
        return Err(Error::InvalidParameter(format!("allowed index {j} out of range")));
    }
    let mut sub: Vec<f64> = allowed.iter().map(|&j| v[j]).collect();
    let mut scratch = Vec::with_capacity(sub.len());
    project_simplex_in_place(&mut sub, &mut scratch);
    let mut out = vec![0.0; v.len()];
    for (&j, &u) in allowed.iter().zip(&sub) {
        out[j] = u;
    }
    Ok(out)
}

/// Sorting-based projection of `v` onto the probability simplex.
pub(crate) fn project_simplex_in_place(v: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in scratch.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// One row's subproblem
/// `min_x ||y - A x||^2 - lambda * reward . x` over the probability simplex.
#[derive(Debug, Clone)]
pub struct RowProblem {
    design: DMatrix<f64>,
    target: DVector<f64>,
    reward: DVector<f64>,
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    target_norm2: f64,
    lipschitz: f64,
}

/// Result of a row solve.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The returned point passed the exact KKT check.
    pub kkt_verified: bool,
}

impl RowProblem {
    /// `design` is `K x p` (one column per variable), `reward[j]` is the
    /// linear reward weight of variable `j` (1 for stubborn trust, 0 for peer
    /// trust).
    pub fn new(design: DMatrix<f64>, target: DVector<f64>, reward: DVector<f64>, power_iters: usize) -> Result<Self> {
        let p = design.ncols();
        if p == 0 {
            return Err(Error::InvalidParameter("row problem without variables".into()));
        }
        if target.len() != design.nrows() || reward.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "design {}x{p}, target {}, reward {}",
                design.nrows(),
                target.len(),
                reward.len()
            )));
        }
        let hessian = design.tr_mul(&design);
        let linear = design.tr_mul(&target);
        let target_norm2 = target.norm_squared();
        let lipschitz = 2.0 * max_eigenvalue_psd(&hessian, power_iters);
        Ok(Self {
            design,
            target,
            reward,
            hessian,
            linear,
            target_norm2,
            lipschitz,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn reward(&self) -> &DVector<f64> {
        &self.reward
    }

    /// `||y - A x||^2 - lambda * reward . x`, evaluated from the residual.
    pub fn objective(&self, x: &[f64], lambda: f64) -> f64 {
        let xv = DVector::from_column_slice(x);
        (&self.target - &self.design * &xv).norm_squared() - lambda * self.reward.dot(&xv)
    }

    pub fn residual_norm2(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        (&self.target - &self.design * xv).norm_squared()
    }

    fn gram_objective(&self, x: &DVector<f64>, hx: &DVector<f64>, lambda: f64) -> f64 {
        x.dot(hx) - 2.0 * self.linear.dot(x) + self.target_norm2 - lambda * self.reward.dot(x)
    }

    /// Accelerated projected gradient from `warm` (or the simplex barycentre).
    pub fn solve(&self, lambda: f64, warm: Option<&[f64]>, opts: &SolverOptions) -> RowSolution {
        let p = self.n_vars();
        let mut scratch = Vec::with_capacity(p);
        let mut x = match warm {
            Some(w) if w.len() == p => DVector::from_column_slice(w),
            _ => DVector::from_element(p, 1.0 / p as f64),
        };
        project_simplex_in_place(x.as_mut_slice(), &mut scratch);

        if let Some(sol) = self.polish(lambda, &x, 0) {
            return sol;
        }

        let mut step = 1.0 / self.lipschitz.max(f64::MIN_POSITIVE);
        let mut hx = &self.hessian * &x;
        let mut fx = self.gram_objective(&x, &hx, lambda);
        let mut x_prev = x.clone();
        let mut hx_prev = hx.clone();
        let mut theta = 1.0_f64;
        let mut y = DVector::zeros(p);
        let mut hy = DVector::zeros(p);
        let mut x_new = DVector::zeros(p);
        let mut hx_new = DVector::zeros(p);
        let mut stalled = 0usize;
        let floor = 1e-6 * self.target_norm2 + f64::MIN_POSITIVE;

        for it in 1..=opts.max_iter {
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / theta_next;
            y.copy_from(&x);
            y.axpy(beta, &x, 1.0);
            y.axpy(-beta, &x_prev, 1.0);
            hy.copy_from(&hx);
            hy.axpy(beta, &hx, 1.0);
            hy.axpy(-beta, &hx_prev, 1.0);

            // x_new = P(y - step * (2 (H y - c) - lambda r))
            x_new.copy_from(&y);
            x_new.axpy(-2.0 * step, &hy, 1.0);
            x_new.axpy(2.0 * step, &self.linear, 1.0);
            x_new.axpy(step * lambda, &self.reward, 1.0);
            project_simplex_in_place(x_new.as_mut_slice(), &mut scratch);
            hx_new.gemv(1.0, &self.hessian, &x_new, 0.0);
            let f_new = self.gram_objective(&x_new, &hx_new, lambda);

            if f_new > fx + 1e-15 * fx.abs() {
                if beta == 0.0 {
                    // a plain gradient step went uphill: the step is too long
                    step *= 0.5;
                }
                theta = 1.0;
                x_prev.copy_from(&x);
                hx_prev.copy_from(&hx);
                continue;
            }

            let change = fx - f_new;
            std::mem::swap(&mut x_prev, &mut x);
            std::mem::swap(&mut hx_prev, &mut hx);
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut hx, &mut hx_new);
            fx = f_new;
            theta = theta_next;

            let small = change <= opts.tol * (fx.abs() + floor);
            if small || it % opts.polish_every.max(1) == 0 {
                if let Some(sol) = self.polish(lambda, &x, it) {
                    if sol.objective <= self.objective(x.as_slice(), lambda) + 1e-12 * (fx.abs() + floor) {
                        return sol;
                    }
                }
            }
            if small {
                stalled += 1;
                if stalled >= 20 {
                    return RowSolution {
                        objective: self.objective(x.as_slice(), lambda),
                        x: x.as_slice().to_vec(),
                        iterations: it,
                        converged: true,
                        kkt_verified: false,
                    };
                }
            } else {
                stalled = 0;
            }
        }
        RowSolution {
            objective: self.objective(x.as_slice(), lambda),
            x: x.as_slice().to_vec(),
            iterations: opts.max_iter,
            converged: false,
            kkt_verified: false,
        }
    }

    /// Primal active-set refinement started from `x`; `None` unless it
    /// reaches a point satisfying the KKT conditions.
    fn polish(&self, lambda: f64, x: &DVector<f64>, iterations: usize) -> Option<RowSolution> {
        let p = self.n_vars();
        let mut cur = x.map(|v| if v > SUPPORT_FLOOR { v } else { 0.0 });
        let total = cur.sum();
        if !(total > 0.0) {
            return None;
        }
        cur.unscale_mut(total);
        let mut active: Vec<usize> = (0..p).filter(|&j| cur[j] > 0.0).collect();
        let col_scale = (0..p)
            .map(|j| self.design.column(j).amax())
            .fold(0.0, f64::max);

        for _ in 0..(4 * p + 10) {
            match self.solve_on_support(lambda, &active)? {
                Reduced::Singular(mut d) => {
                    // objective is flat or linear along d: slide to a face
                    if self.reward.dot(&d) < 0.0 {
                        d.neg_mut();
                    }
                    let (t, block) = active
                        .iter()
                        .filter(|&&j| d[j] < 0.0)
                        .map(|&j| (cur[j] / -d[j], j))
                        .min_by(|a, b| a.0.total_cmp(&b.0))?;
                    cur.axpy(t, &d, 1.0);
                    cur[block] = 0.0;
                    active.retain(|&j| j != block && cur[j] > 0.0);
                    for j in 0..p {
                        if !active.contains(&j) {
                            cur[j] = 0.0;
                        }
                    }
                    if active.is_empty() {
                        return None;
                    }
                }
                Reduced::Solved(sol) => {
                    if active.iter().any(|&j| sol[j] <= 0.0) {
                        // step towards sol until the first variable hits zero
                        let (t, block) = active
                            .iter()
                            .filter(|&&j| sol[j] <= 0.0)
                            .map(|&j| {
                                let den = cur[j] - sol[j];
                                (if den > 0.0 { cur[j] / den } else { 0.0 }, j)
                            })
                            .min_by(|a, b| a.0.total_cmp(&b.0))?;
                        let step = &sol - &cur;
                        cur.axpy(t, &step, 1.0);
                        cur[block] = 0.0;
                        active.retain(|&j| j != block && cur[j] > 0.0);
                        for j in 0..p {
                            if !active.contains(&j) {
                                cur[j] = 0.0;
                            }
                        }
                        if active.is_empty() {
                            return None;
                        }
                        continue;
                    }
                    cur = sol;
                    let res = &self.target - &self.design * &cur;
                    let grad = -2.0 * self.design.tr_mul(&res) - lambda * &self.reward;
                    let nu = active.iter().map(|&j| grad[j]).sum::<f64>() / active.len() as f64;
                    let gscale =
                        lambda + 2.0 * col_scale * res.norm() * (self.design.nrows() as f64).sqrt();
                    // stationarity scatter on the active set measures rounding in grad
                    let spread = active
                        .iter()
                        .map(|&j| (grad[j] - nu).abs())
                        .fold(0.0, f64::max);
                    let tol = 1e-8 * gscale
                        + (10.0 * spread).max(1e-15 * col_scale * self.target.norm());
                    let worst = (0..p)
                        .filter(|j| !active.contains(j))
                        .map(|j| (j, grad[j] - nu))
                        .filter(|&(_, rc)| rc < -tol)
                        .min_by(|a, b| a.1.total_cmp(&b.1));
                    match worst {
                        None => {
                            let xs = cur.as_slice().to_vec();
                            return Some(RowSolution {
                                objective: self.objective(&xs, lambda),
                                x: xs,
                                iterations,
                                converged: true,
                                kkt_verified: true,
                            });
                        }
                        Some((j, _)) => {
                            active.push(j);
                            active.sort_unstable();
                        }
                    }
                }
            }
        }
        None
    }

    /// Minimizer of the row objective over `{sum x = 1, x_j = 0 off support}`
    /// (signs unconstrained), or a feasible direction along which the
    /// residual does not change when that minimizer is not unique.
    fn solve_on_support(&self, lambda: f64, support: &[usize]) -> Option<Reduced> {
        let p = self.n_vars();
        let (&last, rest) = support.split_last()?;
        let mut x = DVector::zeros(p);
        if rest.is_empty() {
            x[last] = 1.0;
            return Some(Reduced::Solved(x));
        }
        let k = self.design.nrows();
        let r = rest.len();
        // x = e_last + N u with N = [I; -1^T]
        let a_last = self.design.column(last);
        let mut m = DMatrix::zeros(k.max(r), r);
        for (c, &j) in rest.iter().enumerate() {
            m.view_mut((0, c), (k, 1))
                .copy_from(&(self.design.column(j) - a_last));
        }
        let mut t = DVector::zeros(k.max(r));
        t.rows_mut(0, k).copy_from(&(&self.target - a_last));
        let q = DVector::from_iterator(r, rest.iter().map(|&j| self.reward[j] - self.reward[last]));

        let qr = m.clone().qr();
        let rf = qr.r();
        let lift = |u: &DVector<f64>| {
            let mut d = DVector::zeros(p);
            for (c, &j) in rest.iter().enumerate() {
                d[j] = u[c];
            }
            d[last] = -u.sum();
            d
        };
        // the first column (nearly) in the span of its predecessors has a
        // negligible diagonal entry; its dependency gives a null vector
        for c in 0..r {
            if rf[(c, c)].abs() <= SINGULAR_RTOL * m.column(c).norm() || m.column(c).norm() == 0.0 {
                let mut z = DVector::zeros(r);
                z[c] = -1.0;
                if c > 0 {
                    let lead = rf.view((0, 0), (c, c)).into_owned();
                    let w = lead.solve_upper_triangular(&rf.view((0, c), (c, 1)).into_owned())?;
                    z.rows_mut(0, c).copy_from(&w);
                }
                return Some(Reduced::Singular(lift(&z)));
            }
        }
        // R u = Q^T t + lambda/2 R^{-T} q
        let qt = qr.q().tr_mul(&t);
        let w = rf.tr_solve_upper_triangular(&q)?;
        let u = rf.solve_upper_triangular(&(qt + 0.5 * lambda * w))?;
        if u.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut d = lift(&u);
        d[last] += 1.0;
        x.copy_from(&d);
        Some(Reduced::Solved(x))
    }
}

enum Reduced {
    Solved(DVector<f64>),
    Singular(DVector<f64>),
}

/// Largest eigenvalue of a PSD matrix: power iteration, padded and capped
/// by the trace.
fn max_eigenvalue_psd(h: &DMatrix<f64>, iters: usize) -> f64 {
    let n = h.nrows();
    let trace = h.trace();
    if n == 0 || trace <= 0.0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let w = h * &v;
        let nrm = w.norm();
        if nrm == 0.0 {
            break;
        }
        est = v.dot(&w);
        v = w / nrm;
    }
    (1.02 * est).min(trace).max(est)
}

/// Row subproblems of a full identification problem.
struct RowSystem {
    rows: Vec<RowProblem>,
    n_normal: usize,
    n_stub: usize,
    /// For each row: stubborn index of each B variable (after the D variables).
    stub_vars: Vec<Vec<usize>>,
    grad_scale: f64,
}

impl RowSystem {
    fn build(data: &DataMatrices, support: &StubbornSupport, power_iters: usize) -> Result<Self> {
        let nn = data.n_normal();
        let ns = data.n_stub();
        let kcols = data.y.ncols();
        let yt = data.y.transpose();
        let zt = data.z.transpose();
        let rows = parallel::map_indices(nn, |i| {
            let stubs = support.row(i);
            let p = nn - 1 + stubs.len();
            let mut design = DMatrix::zeros(kcols, p);
            let mut reward = DVector::zeros(p);
            let mut c = 0;
            for j in (0..nn).filter(|&j| j != i) {
                design.set_column(c, &yt.column(j));
                c += 1;
            }
            for &s in stubs {
                design.set_column(c, &zt.column(s));
                reward[c] = 1.0;
                c += 1;
            }
            RowProblem::new(design, yt.column(i).into_owned(), reward, power_iters)
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let grad_scale = rows
            .iter()
            .map(|r| 2.0 * r.linear.amax())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        Ok(Self {
            rows,
            n_normal: nn,
            n_stub: ns,
            stub_vars: support.rows().to_vec(),
            grad_scale,
        })
    }

    fn solve_all(&self, lambda: f64, warm: Option<&[RowSolution]>, opts: &SolverOptions) -> Vec<RowSolution> {
        parallel::map_indices(self.rows.len(), |i| {
            let w = warm.map(|w| w[i].x.as_slice());
            self.rows[i].solve(lambda, w, opts)
        })
    }

    fn residual(&self, sols: &[RowSolution]) -> f64 {
        self.rows
            .iter()
            .zip(sols)
            .map(|(r, s)| r.residual_norm2(&s.x))
            .sum::<f64>()
            .sqrt()
    }

    fn assemble(&self, sols: &[RowSolution]) -> (DMatrix<f64>, DMatrix<f64>) {
        let nn = self.n_normal;
        let mut b = DMatrix::zeros(nn, self.n_stub);
        let mut d = DMatrix::zeros(nn, nn);
        for (i, sol) in sols.iter().enumerate() {
            let mut c = 0;
            for j in (0..nn).filter(|&j| j != i) {
                d[(i, j)] = sol.x[c];
                c += 1;
            }
            for &s in &self.stub_vars[i] {
                b[(i, s)] = sol.x[c];
                c += 1;
            }
        }
        (b, d)
    }
}

struct Evaluation {
    lambda: f64,
    residual: f64,
    sols: Vec<RowSolution>,
}

/// Solves the identification problem; see the module docs for the method.
pub fn solve_ssi(problem: &SsiProblem) -> Result<SsiEstimate> {
    problem.validate()?;
    let opts = &problem.options;
    let system = RowSystem::build(&problem.data, &problem.support, opts.power_iters)?;
    let mut iterations = vec![0usize; system.rows.len()];
    let mut evaluations = 0usize;

    let mut evaluate = |lambda: f64, warm: Option<&[RowSolution]>| {
        let sols = system.solve_all(lambda, warm, opts);
        for (acc, s) in iterations.iter_mut().zip(&sols) {
            *acc += s.iterations;
        }
        evaluations += 1;
        Evaluation {
            lambda,
            residual: system.residual(&sols),
            sols,
        }
    };

    let mut epsilon_feasible = true;
    let chosen = match problem.penalty {
        Penalty::Lambda(lambda) => evaluate(lambda, None),
        Penalty::Epsilon(eps) => {
            let top = evaluate(opts.lambda_max_rel * system.grad_scale, None);
            if top.residual <= eps {
                top
            } else {
                // walk down until feasible
                let floor = opts.lambda_min_rel * system.grad_scale;
                let mut hi = top;
                let mut lo = None;
                while hi.lambda > floor {
                    let next = evaluate(hi.lambda / 10.0, Some(&hi.sols));
                    if next.residual <= eps {
                        lo = Some(next);
                        break;
                    }
                    hi = next;
                }
                let mut lo = match lo {
                    Some(lo) => lo,
                    None => {
                        let ls = evaluate(0.0, Some(&hi.sols));
                        if ls.residual > eps * (1.0 + 1e-12) {
                            if !opts.relax_infeasible {
                                return Err(Error::InfeasibleTolerance {
                                    epsilon: eps,
                                    best: ls.residual,
                                });
                            }
                            epsilon_feasible = false;
                        }
                        ls
                    }
                };
                let mut steps = 0;
                while epsilon_feasible
                    && hi.residual - lo.residual > opts.bisection_tol * eps
                    && steps < opts.max_bisections
                    && (lo.lambda == 0.0 || hi.lambda / lo.lambda > 1.0 + 1e-12)
                {
                    steps += 1;
                    let mid = if lo.lambda > 0.0 {
                        (lo.lambda * hi.lambda).sqrt()
                    } else {
                        0.5 * hi.lambda
                    };
                    let warm = if lo.lambda > 0.0 && (mid / lo.lambda) < (hi.lambda / mid) {
                        &lo.sols
                    } else {
                        &hi.sols
                    };
                    let next = evaluate(mid, Some(warm));
                    if next.residual <= eps {
                        lo = next;
                    } else {
                        hi = next;
                    }
                }
                lo
            }
        }
    };

    let (b_hat, d_hat) = system.assemble(&chosen.sols);
    let unconverged_rows: Vec<usize> = chosen
        .sols
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.converged)
        .map(|(i, _)| i)
        .collect();
    if opts.strict && !unconverged_rows.is_empty() {
        return Err(Error::NonConvergence(format!(
            "{} rows hit the iteration budget",
            unconverged_rows.len()
        )));
    }
    let degenerate_rows = (0..problem.data.n_normal())
        .filter(|&i| {
            let row = problem.data.y.row(i);
            row.max() - row.min() < DEGENERATE_SPREAD
        })
        .collect();
    let l1_offdiag = d_hat.sum();
    Ok(SsiEstimate {
        residual: residual(&b_hat, &d_hat, &problem.data)?,
        b_hat,
        d_hat,
        l1_offdiag,
        penalty: chosen.lambda,
        iterations,
        degenerate_rows,
        unconverged_rows,
        penalty_evaluations: evaluations,
        epsilon_feasible,
    })
}
