//! Dense sequential quadratic programming for medium-scale nonlinear
//! programs with box variable bounds and two-sided constraint rows.
//!
//! Each iteration linearizes the constraints, eliminates the equality rows
//! through a rank-revealing QR null-space basis, and solves the remaining
//! inequality-constrained quadratic subproblem with a primal active-set
//! loop over the reduced space. A damped BFGS approximation tracks the
//! Lagrangian Hessian, an l1 penalty line search with a second-order
//! correction on rejected full steps globalizes, and a Gauss-Newton
//! feasibility restoration handles inconsistent linearizations. The
//! method is fully deterministic: identical inputs produce
//! bitwise-identical iterates.

use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use std::ops::Range;

/// Problem interface for the SQP method. Rows with equal lower and upper
/// bounds are equalities. Evaluators must be pure functions of x.
pub trait Nlp: Sync {
    fn dim(&self) -> usize;
    fn num_rows(&self) -> usize;
    /// Variable box (lo, hi); entries may be infinite, equal entries fix a
    /// variable.
    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Constraint row bounds (lo, hi).
    fn row_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn rows(&self, x: &[f64]) -> Vec<f64>;
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;
    /// Named row ranges for derivative-check reporting.
    fn row_blocks(&self) -> Vec<(String, Range<usize>)> {
        vec![("all".to_string(), 0..self.num_rows())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub kkt_residual: f64,
    /// True when the start point had to be clipped into the variable box.
    pub clipped_start: bool,
    /// Iteration log: (iter, objective, violation, step norm, penalty).
    pub log: Vec<(usize, f64, f64, f64, f64)>,
}

impl SolveResult {
    /// Iteration log as CSV text.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("iter,objective,violation,step_norm,penalty\n");
        for (i, f, v, p, rho) in &self.log {
            let _ = writeln!(s, "{i},{f:.17e},{v:.17e},{p:.17e},{rho:.17e}");
        }
        s
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum SolverError {
    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { what: String, iter: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol_feas: 1e-6, tol_opt: 1e-4, max_iter: 500 }
    }
}

fn dist_to_interval(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

/// Cached evaluation at one point.
struct Eval {
    f: f64,
    g: DVector<f64>,
    c: DVector<f64>,
    jac: DMatrix<f64>,
}

fn finite_slice(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn evaluate(nlp: &dyn Nlp, x: &[f64], iter: usize) -> Result<Eval, SolverError> {
    let f = nlp.objective(x);
    let g = nlp.gradient(x);
    let c = nlp.rows(x);
    let jac = nlp.jacobian(x);
    if !f.is_finite() {
        return Err(SolverError::NonFinite { what: "objective".into(), iter });
    }
    if !finite_slice(&g) {
        return Err(SolverError::NonFinite { what: "gradient".into(), iter });
    }
    if !finite_slice(&c) {
        return Err(SolverError::NonFinite { what: "constraint rows".into(), iter });
    }
    if !jac.iter().all(|v| v.is_finite()) {
        return Err(SolverError::NonFinite { what: "jacobian".into(), iter });
    }
    Ok(Eval { f, g: DVector::from_vec(g), c: DVector::from_vec(c), jac })
}

/// Null-space data for the equality rows at the current point.
struct EqFactor {
    /// Orthonormal columns spanning the equality row space (n x rank).
    y: DMatrix<f64>,
    /// Orthonormal null-space basis (n x nz).
    z: DMatrix<f64>,
    /// Upper-triangular factor restricted to the independent rows.
    r1: DMatrix<f64>,
    /// Independent equality rows in pivot order.
    kept: Vec<usize>,
    rank: usize,
}

/// Rank-revealing factorization of the equality Jacobian (rows e of jac)
/// over the free variables.
fn factor_equalities(jac_eq_t: &DMatrix<f64>) -> EqFactor {
    let n = jac_eq_t.nrows();
    let me = jac_eq_t.ncols();
    let ncols = n.max(me);
    // Pad to square so the full orthogonal factor is available.
    let mut padded = DMatrix::zeros(n, ncols);
    padded.view_mut((0, 0), (n, me)).copy_from(jac_eq_t);
    let qr = padded.col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let perm = qr.p();
    let k = r.nrows().min(r.ncols());
    let mut rank = 0;
    let scale = r[(0, 0)].abs().max(1e-300);
    // A generous cut keeps nearly dependent rows out of the basis; their
    // microscopic pivots would otherwise blow up the least-squares
    // multipliers and poison the quasi-Newton curvature estimates.
    for i in 0..k {
        if r[(i, i)].abs() > scale * 1e-9 {
            rank = i + 1;
        } else {
            break;
        }
    }
    // Columns of the padded matrix are equality rows (plus zero padding);
    // the permutation tells which survived as independent.
    let mut kept = Vec::with_capacity(rank);
    let mut indices = DVector::from_iterator(ncols, 0..ncols);
    perm.permute_rows(&mut indices);
    for k in 0..rank {
        let col = indices[k];
        debug_assert!(col < me, "zero padding cannot be pivoted ahead of real rows");
        kept.push(col);
    }
    let y = q.columns(0, rank).into_owned();
    let z = q.columns(rank, n - rank).into_owned();
    let r1 = r.view((0, 0), (rank, rank)).into_owned();
    EqFactor { y, z, r1, kept, rank }
}

/// Minimum-norm step d with J_E d = r on the independent equality rows:
/// forward-substitutes R1' w = r and lifts through the range basis.
fn min_norm_step(fac: &EqFactor, r_kept: &DVector<f64>) -> Option<DVector<f64>> {
    let mut w = DVector::zeros(fac.rank);
    for i in 0..fac.rank {
        let mut s = r_kept[i];
        for j in 0..i {
            s -= fac.r1[(j, i)] * w[j];
        }
        let d = fac.r1[(i, i)];
        if d.abs() < 1e-300 {
            return None;
        }
        w[i] = s / d;
    }
    Some(&fac.y * &w)
}

/// One reduced inequality row: a over the reduced coordinates plus the
/// admissible interval.
struct RedRow {
    a: DVector<f64>,
    lo: f64,
    hi: f64,
    /// (kind, index): 0 = constraint row, 1 = variable box.
    tag: (u8, usize),
}

struct QpSolution {
    p: DVector<f64>,
    /// Signed multiplier per active reduced row (same order as `active`).
    active: Vec<(usize, i8, f64)>,
    degraded: bool,
}

/// Primal active-set solve of min 1/2 y'By + g'y subject to the reduced
/// two-sided rows, starting from the unconstrained minimizer.
fn solve_reduced_qp(
    bred: &DMatrix<f64>,
    gred: &DVector<f64>,
    rows: &[RedRow],
) -> Option<QpSolution> {
    let nz = gred.len();
    if nz == 0 {
        return Some(QpSolution { p: DVector::zeros(0), active: Vec::new(), degraded: false });
    }
    // Active set entries: (row index, side) with side +1 = lower, -1 = upper.
    let mut active: Vec<(usize, i8)> = Vec::new();
    let mut degraded = false;
    let feas_tol = 1e-9;
    let max_pivots = 60 + 12 * nz;
    let mut y = DVector::zeros(nz);
    let mut mults: Vec<f64> = Vec::new();
    for pivot in 0..max_pivots {
        // Equality-constrained subproblem over the current working set.
        let w = active.len();
        let mut kkt = DMatrix::zeros(nz + w, nz + w);
        let mut rhs = DVector::zeros(nz + w);
        kkt.view_mut((0, 0), (nz, nz)).copy_from(bred);
        for (k, &(ri, side)) in active.iter().enumerate() {
            let row = &rows[ri];
            for j in 0..nz {
                kkt[(j, nz + k)] = -row.a[j] * side as f64;
                kkt[(nz + k, j)] = row.a[j] * side as f64;
            }
            rhs[nz + k] = (if side > 0 { row.lo } else { row.hi }) * side as f64;
        }
        for j in 0..nz {
            rhs[j] = -gred[j];
        }
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                // Dependent working set: drop the newest row.
                if active.pop().is_none() {
                    return None;
                }
                continue;
            }
        };
        y = sol.rows(0, nz).into_owned();
        mults = (0..w).map(|k| sol[nz + k]).collect();
        // Drop the most negative multiplier, if any.
        let mut drop_k: Option<usize> = None;
        let mut worst = -1e-10;
        for (k, &m) in mults.iter().enumerate() {
            if m < worst {
                worst = m;
                drop_k = Some(k);
            }
        }
        if let Some(k) = drop_k {
            active.remove(k);
            continue;
        }
        // Add the most violated inactive row.
        let mut add: Option<(usize, i8)> = None;
        let mut worst_v = feas_tol;
        for (ri, row) in rows.iter().enumerate() {
            if active.iter().any(|&(ai, _)| ai == ri) {
                continue;
            }
            let v = row.a.dot(&y);
            if row.lo - v > worst_v {
                worst_v = row.lo - v;
                add = Some((ri, 1));
            }
            if v - row.hi > worst_v {
                worst_v = v - row.hi;
                add = Some((ri, -1));
            }
        }
        match add {
            None => {
                let act = active
                    .iter()
                    .zip(mults.iter())
                    .map(|(&(ri, side), &m)| (ri, side, m))
                    .collect();
                return Some(QpSolution { p: y, active: act, degraded });
            }
            Some(a) => {
                if active.len() == nz {
                    // Cannot grow the working set further.
                    degraded = true;
                    let act = active
                        .iter()
                        .zip(mults.iter())
                        .map(|(&(ri, side), &m)| (ri, side, m))
                        .collect();
                    return Some(QpSolution { p: y, active: act, degraded });
                }
                active.push(a);
            }
        }
        if pivot + 1 == max_pivots {
            degraded = true;
            let act = active
                .iter()
                .zip(mults.iter())
                .map(|(&(ri, side), &m)| (ri, side, m))
                .collect();
            return Some(QpSolution { p: y, active: act, degraded });
        }
    }
    let act =
        active.iter().zip(mults.iter()).map(|(&(ri, side), &m)| (ri, side, m)).collect();
    Some(QpSolution { p: y, active: act, degraded: true })
}

/// Full problem data restricted to free variables.
struct FreeMap {
    free: Vec<usize>,
    fixed_value: Vec<Option<f64>>,
    n_full: usize,
}

impl FreeMap {
    fn new(lo: &[f64], hi: &[f64]) -> Self {
        let mut free = Vec::new();
        let mut fixed_value = vec![None; lo.len()];
        for i in 0..lo.len() {
            if lo[i] == hi[i] {
                fixed_value[i] = Some(lo[i]);
            } else {
                free.push(i);
            }
        }
        FreeMap { free, fixed_value, n_full: lo.len() }
    }

    fn full_from_free(&self, xf: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_full];
        for (i, v) in self.fixed_value.iter().enumerate() {
            if let Some(v) = v {
                x[i] = *v;
            }
        }
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = xf[k];
        }
        x
    }
}

/// L1 constraint violation of the row values.
fn violation_l1(c: &DVector<f64>, rl: &[f64], ru: &[f64]) -> f64 {
    c.iter().enumerate().map(|(i, &v)| dist_to_interval(v, rl[i], ru[i])).sum()
}

fn violation_max(c: &DVector<f64>, rl: &[f64], ru: &[f64]) -> f64 {
    c.iter()
        .enumerate()
        .map(|(i, &v)| dist_to_interval(v, rl[i], ru[i]))
        .fold(0.0, f64::max)
}

/// Gauss-Newton feasibility restoration: reduce the l1 violation while
/// staying inside the variable box. Returns the improved point, or None
/// when progress stalls (infeasibility evidence).
fn restore_feasibility(
    nlp: &dyn Nlp,
    map: &FreeMap,
    xf: &mut DVector<f64>,
    rl: &[f64],
    ru: &[f64],
    bl: &[f64],
    bu: &[f64],
    iter: usize,
) -> Result<bool, SolverError> {
    let nf = map.free.len();
    let mut stall = 0usize;
    let mut best = f64::INFINITY;
    for _k in 0..60 {
        let x = map.full_from_free(xf.as_slice());
        let c = DVector::from_vec(nlp.rows(&x));
        if !finite_slice(c.as_slice()) {
            return Err(SolverError::NonFinite { what: "constraint rows".into(), iter });
        }
        let v1 = violation_l1(&c, rl, ru);
        if v1 < best - 1e-10 {
            best = v1;
            stall = 0;
        } else {
            stall += 1;
            if stall >= 20 {
                return Ok(false);
            }
        }
        if violation_max(&c, rl, ru) <= 1e-8 {
            return Ok(true);
        }
        let jac = nlp.jacobian(&x);
        // Residual of violated rows only.
        let mut rows_v: Vec<usize> = Vec::new();
        let mut res: Vec<f64> = Vec::new();
        for i in 0..c.len() {
            if c[i] < rl[i] {
                rows_v.push(i);
                res.push(c[i] - rl[i]);
            } else if c[i] > ru[i] {
                rows_v.push(i);
                res.push(c[i] - ru[i]);
            }
        }
        let mv = rows_v.len();
        let mut jv = DMatrix::zeros(mv, nf);
        for (r, &i) in rows_v.iter().enumerate() {
            for (k, &j) in map.free.iter().enumerate() {
                jv[(r, k)] = jac[(i, j)];
            }
        }
        let rv = DVector::from_vec(res);
        // Damped normal equations.
        let mut nmat = jv.transpose() * &jv;
        for d in 0..nf {
            nmat[(d, d)] += 1e-8;
        }
        let rhs = -(jv.transpose() * &rv);
        let Some(mut p) = nmat.lu().solve(&rhs) else {
            return Ok(false);
        };
        // Clip into the box.
        for (k, &j) in map.free.iter().enumerate() {
            let lo = bl[j] - xf[k];
            let hi = bu[j] - xf[k];
            p[k] = p[k].clamp(lo, hi);
        }
        // Backtracking on the l1 violation.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut xt = xf.clone();
            for k in 0..nf {
                xt[k] += t * p[k];
            }
            let x_full = map.full_from_free(xt.as_slice());
            let ct = DVector::from_vec(nlp.rows(&x_full));
            if finite_slice(ct.as_slice()) && violation_l1(&ct, rl, ru) < v1 - 1e-14 {
                *xf = xt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Solves the nonlinear program from `x0` (clipped into the variable box).
pub fn solve(nlp: &dyn Nlp, x0: &[f64], opts: &SolveOptions) -> Result<SolveResult, SolverError> {
    let n = nlp.dim();
    if x0.len() != n {
        return Err(SolverError::Dimension(format!(
            "start point has {} entries, problem has {n}",
            x0.len()
        )));
    }
    let (bl, bu) = nlp.var_bounds();
    let (rl, ru) = nlp.row_bounds();
    let m = nlp.num_rows();
    if rl.len() != m || ru.len() != m || bl.len() != n || bu.len() != n {
        return Err(SolverError::Dimension("bounds arrays".into()));
    }
    let map = FreeMap::new(&bl, &bu);
    let nf = map.free.len();
    let mut clipped = false;
    let mut xf = DVector::zeros(nf);
    for (k, &i) in map.free.iter().enumerate() {
        let v = x0[i];
        let c = v.clamp(bl[i], bu[i]);
        if c != v {
            clipped = true;
        }
        xf[k] = c;
    }
    for (i, fv) in map.fixed_value.iter().enumerate() {
        if let Some(fv) = fv {
            if x0[i] != *fv {
                clipped = true;
            }
        }
    }
    let eq_rows: Vec<usize> = (0..m).filter(|&i| rl[i] == ru[i]).collect();
    let in_rows: Vec<usize> = (0..m).filter(|&i| rl[i] != ru[i]).collect();
    // Quasi-Newton curvature is kept in the equality null space (the
    // problem's true degrees of freedom), not the full variable space: a
    // small reduced matrix becomes accurate after a handful of updates.
    // Size zero means "rebuild at the next iteration's null-space size".
    let mut bmat = DMatrix::<f64>::zeros(0, 0);
    let mut z_prev: Option<DMatrix<f64>> = None;
    let mut rho = 1.0f64;
    let mut log: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    let mut bfgs_resets = 0usize;
    let mut bfgs_scaled = false;
    let mut last_kkt = f64::INFINITY;
    // Levenberg shift on the reduced Hessian, adapted like a trust
    // region: full accepted steps relax it, heavily cut steps raise it.
    let mut sigma = 1.0f64;
    // Feasibility stagnation tracking for the penalty parameter.
    let mut stag_viol = f64::INFINITY;
    let mut stag_count = 0usize;
    let mut cur = evaluate(nlp, &map.full_from_free(xf.as_slice()), 0)?;

    let free_grad = |g: &DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(nf, map.free.iter().map(|&i| g[i]))
    };
    let free_jac_t = |jac: &DMatrix<f64>, rows: &[usize]| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(nf, rows.len());
        for (c, &ri) in rows.iter().enumerate() {
            for (r, &vi) in map.free.iter().enumerate() {
                out[(r, c)] = jac[(ri, vi)];
            }
        }
        out
    };

    let mut iter = 0usize;
    while iter < opts.max_iter {
        iter += 1;
        let viol = violation_max(&cur.c, &rl, &ru);
        let gf = free_grad(&cur.g);

        // Equality elimination.
        let jet = free_jac_t(&cur.jac, &eq_rows);
        let fac = factor_equalities(&jet);
        let nz = nf - fac.rank;
        // Particular equality step: minimum-norm solution of J_E p = t.
        let mut t_kept = DVector::zeros(fac.rank);
        for (k, &col) in fac.kept.iter().enumerate() {
            let ri = eq_rows[col];
            t_kept[k] = rl[ri] - cur.c[ri];
        }
        // Solve R1^T w = t (forward substitution on the transpose).
        let mut w = DVector::zeros(fac.rank);
        let mut consistent = true;
        for i in 0..fac.rank {
            let mut s = t_kept[i];
            for j in 0..i {
                s -= fac.r1[(j, i)] * w[j];
            }
            let d = fac.r1[(i, i)];
            if d.abs() < 1e-300 {
                consistent = false;
                break;
            }
            w[i] = s / d;
        }
        let p_part = &fac.y * &w;
        // Dropped dependent equality rows must agree with the particular
        // step, otherwise the linearization is inconsistent.
        if consistent && fac.rank < eq_rows.len() {
            for (col, &ri) in eq_rows.iter().enumerate() {
                if fac.kept.contains(&col) {
                    continue;
                }
                let mut v = cur.c[ri];
                for (r, &vi) in map.free.iter().enumerate() {
                    v += cur.jac[(ri, vi)] * p_part[r];
                }
                if (v - rl[ri]).abs() > 1e-6 * (1.0 + rl[ri].abs()) {
                    consistent = false;
                    break;
                }
            }
        }
        if !consistent {
            let ok = restore_feasibility(nlp, &map, &mut xf, &rl, &ru, &bl, &bu, iter)?;
            cur = evaluate(nlp, &map.full_from_free(xf.as_slice()), iter)?;
            if !ok {
                let viol = violation_max(&cur.c, &rl, &ru);
                return Ok(SolveResult {
                    x: map.full_from_free(xf.as_slice()),
                    status: SolveStatus::Infeasible,
                    iterations: iter,
                    objective: cur.f,
                    max_violation: viol,
                    kkt_residual: f64::INFINITY,
                    clipped_start: clipped,
                    log,
                });
            }
            continue;
        }

        // Carry the learned reduced curvature into the current null-space
        // basis through the basis-overlap rotation: column pivoting
        // permutes and flips the basis between iterations, and rank
        // changes resize it, either of which would otherwise scramble the
        // model. Directions new to the basis carry no curvature until the
        // flooring below and later updates fill them in.
        match z_prev.as_ref() {
            Some(zp) if zp.ncols() == bmat.nrows() => {
                let overlap = zp.transpose() * &fac.z;
                let mut bn = overlap.transpose() * &bmat * &overlap;
                for r in 0..nz {
                    for c in 0..r {
                        let a = 0.5 * (bn[(r, c)] + bn[(c, r)]);
                        bn[(r, c)] = a;
                        bn[(c, r)] = a;
                    }
                }
                bmat = bn;
            }
            _ => {
                bmat = DMatrix::identity(nz, nz);
                bfgs_scaled = false;
            }
        }
        z_prev = Some(fac.z.clone());
        let mut bred = bmat.clone();
        if nz > 0 {
            let eig = bred.clone().symmetric_eigen();
            let floor = 1e-8 * eig.eigenvalues.amax().max(1.0);
            if eig.eigenvalues.iter().any(|&v| v < floor) {
                let mut d = eig.eigenvalues.clone();
                for v in d.iter_mut() {
                    *v = v.max(floor);
                }
                bred = &eig.eigenvectors
                    * DMatrix::from_diagonal(&d)
                    * eig.eigenvectors.transpose();
            }
        }
        let gred = fac.z.transpose() * &gf;

        // Reduced inequality rows: constraint rows then variable boxes.
        let mut rows: Vec<RedRow> = Vec::with_capacity(in_rows.len() + nf);
        let jit = free_jac_t(&cur.jac, &in_rows);
        let base_in = jit.transpose() * &p_part;
        let red_in = jit.transpose() * &fac.z;
        for (k, &ri) in in_rows.iter().enumerate() {
            let offset = cur.c[ri] + base_in[k];
            rows.push(RedRow {
                a: red_in.row(k).transpose(),
                lo: rl[ri] - offset,
                hi: ru[ri] - offset,
                tag: (0, ri),
            });
        }
        for (k, &vi) in map.free.iter().enumerate() {
            if bl[vi] == f64::NEG_INFINITY && bu[vi] == f64::INFINITY {
                continue;
            }
            let offset = xf[k] + p_part[k];
            rows.push(RedRow {
                a: fac.z.row(k).transpose(),
                lo: bl[vi] - offset,
                hi: bu[vi] - offset,
                tag: (1, k),
            });
        }

        let qp = solve_reduced_qp(&bred, &gred, &rows);
        if std::env::var_os("SQP_TRACE").is_some() {
            let eigs = bred.clone().symmetric_eigen().eigenvalues;
            let act: Vec<(u8, usize)> = qp
                .as_ref()
                .map(|q| q.active.iter().map(|&(ri, _, _)| rows[ri].tag).collect())
                .unwrap_or_default();
            eprintln!(
                "TR it {iter} nz {nz} |ppart| {:.3e} |pz| {:.3e} |gred| {:.3e} eig [{:.3e},{:.3e}] act {:?}",
                p_part.amax(),
                qp.as_ref().map(|q| q.p.amax()).unwrap_or(f64::NAN),
                gred.amax(),
                eigs.min(),
                eigs.max(),
                act
            );
        }
        let (p_free, pz, qp_active, qp_degraded) = match qp {
            Some(q) => {
                let p = &p_part + &fac.z * &q.p;
                (p, q.p, q.active, q.degraded)
            }
            None => {
                // The subproblem could not be solved; try restoration and
                // a fresh Hessian.
                let ok = restore_feasibility(nlp, &map, &mut xf, &rl, &ru, &bl, &bu, iter)?;
                cur = evaluate(nlp, &map.full_from_free(xf.as_slice()), iter)?;
                bmat = DMatrix::zeros(0, 0);
                bfgs_scaled = false;
                if !ok {
                    let viol = violation_max(&cur.c, &rl, &ru);
                    return Ok(SolveResult {
                        x: map.full_from_free(xf.as_slice()),
                        status: SolveStatus::Infeasible,
                        iterations: iter,
                        objective: cur.f,
                        max_violation: viol,
                        kkt_residual: f64::INFINITY,
                        clipped_start: clipped,
                        log,
                    });
                }
                continue;
            }
        };

        // First-order multiplier recovery: least-squares fit of
        // g = J_E' lam + sum mu a over the kept equality rows.
        let mut resid = gf.clone();
        let mut mu_rows: Vec<(usize, f64)> = Vec::new();
        let mut nu_box: Vec<(usize, f64)> = Vec::new();
        for &(ri, side, mval) in &qp_active {
            let row = &rows[ri];
            let signed = mval * side as f64;
            match row.tag {
                (0, orig) => {
                    mu_rows.push((orig, signed));
                    for (r, &vi) in map.free.iter().enumerate() {
                        resid[r] -= signed * cur.jac[(orig, vi)];
                    }
                }
                (_, k) => {
                    nu_box.push((k, signed));
                    resid[k] -= signed;
                }
            }
        }
        // lam solves min ||J_E' lam - resid|| through the QR factor.
        let yr = fac.y.transpose() * &resid;
        let mut lam_kept = DVector::zeros(fac.rank);
        for i in (0..fac.rank).rev() {
            let mut s = yr[i];
            for j in i + 1..fac.rank {
                s -= fac.r1[(i, j)] * lam_kept[j];
            }
            lam_kept[i] = s / fac.r1[(i, i)];
        }
        let mut lam = vec![0.0; m];
        for (k, &col) in fac.kept.iter().enumerate() {
            lam[eq_rows[col]] = lam_kept[k];
        }
        for &(ri, v) in &mu_rows {
            lam[ri] = v;
        }
        // KKT stationarity residual.
        let mut kkt = resid.clone();
        for r in 0..nf {
            let mut s = kkt[r];
            for (k, &col) in fac.kept.iter().enumerate() {
                let ri = eq_rows[col];
                s -= lam_kept[k] * cur.jac[(ri, map.free[r])];
            }
            kkt[r] = s;
        }
        let mut kkt_res = 0.0f64;
        for r in 0..nf {
            kkt_res = kkt_res.max(kkt[r].abs());
        }
        last_kkt = kkt_res;
        if std::env::var_os("SQP_TRACE").is_some() {
            let lmax = lam.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let mut dmin = f64::INFINITY;
            let mut dmax = 0.0f64;
            for i in 0..fac.rank {
                let d = fac.r1[(i, i)].abs();
                dmin = dmin.min(d);
                dmax = dmax.max(d);
            }
            eprintln!(
                "TRL it {iter} |lam| {:.3e} kkt {:.3e} rho {:.3e} r1 [{:.3e},{:.3e}]",
                lmax, kkt_res, rho, dmin, dmax
            );
        }

        let step_norm = p_free.amax();
        log.push((iter, cur.f, viol, step_norm, rho));

        if viol <= opts.tol_feas && (kkt_res <= opts.tol_opt || step_norm <= 1e-12) {
            return Ok(SolveResult {
                x: map.full_from_free(xf.as_slice()),
                status: SolveStatus::Converged,
                iterations: iter,
                objective: cur.f,
                max_violation: viol,
                kkt_residual: kkt_res,
                clipped_start: clipped,
                log,
            });
        }

        // Penalty just large enough that the QP direction descends the
        // merit function (model-decrease rule). Multiplier-norm updates
        // are prone to catastrophic over-inflation from one badly
        // conditioned estimate, which freezes all later line searches.
        let viol_l1 = violation_l1(&cur.c, &rl, &ru);
        let gtp = gf.dot(&p_free);
        if viol_l1 > 1e-14 {
            let qterm = pz.dot(&(&bred * &pz));
            let needed = (gtp + 0.5 * qterm.max(0.0)) / (0.5 * viol_l1);
            if needed.is_finite() {
                if rho < needed {
                    // Grow at most geometrically per iteration.
                    rho = (needed + 1.0).min(10.0 * (rho + 1.0)).max(rho);
                } else if rho > 100.0 * (needed.max(0.0) + 1.0) {
                    // Shrink with hysteresis once far oversized.
                    rho = 10.0 * (needed.max(0.0) + 1.0);
                }
            }
        }

        // l1 merit line search with a second-order correction on the
        // rejected full step (counters the Maratos effect near curved
        // constraint surfaces).
        let phi0 = cur.f + rho * viol_l1;
        let dphi = gtp - rho * viol_l1;
        let mut t = 1.0f64;
        let mut accepted = false;
        let mut x_trial = xf.clone();
        for ls in 0..40 {
            for k in 0..nf {
                x_trial[k] = (xf[k] + t * p_free[k]).clamp(bl[map.free[k]], bu[map.free[k]]);
            }
            let x_full = map.full_from_free(x_trial.as_slice());
            let ft = nlp.objective(&x_full);
            let ct = DVector::from_vec(nlp.rows(&x_full));
            let trial_ok = ft.is_finite() && finite_slice(ct.as_slice());
            if trial_ok {
                let phit = ft + rho * violation_l1(&ct, &rl, &ru);
                if phit <= phi0 + 1e-4 * t * dphi.min(0.0) && phit.is_finite() {
                    accepted = true;
                    break;
                }
            }
            if ls == 0 && trial_ok {
                // Newton correction of the equality residual measured at
                // the full-step point, applied on top of the full step.
                let mut r_kept = DVector::zeros(fac.rank);
                for (k, &col) in fac.kept.iter().enumerate() {
                    let ri = eq_rows[col];
                    r_kept[k] = rl[ri] - ct[ri];
                }
                if let Some(d) = min_norm_step(&fac, &r_kept) {
                    let mut x_soc = xf.clone();
                    for k in 0..nf {
                        x_soc[k] = (xf[k] + p_free[k] + d[k])
                            .clamp(bl[map.free[k]], bu[map.free[k]]);
                    }
                    let x_full = map.full_from_free(x_soc.as_slice());
                    let fs = nlp.objective(&x_full);
                    let cs = DVector::from_vec(nlp.rows(&x_full));
                    if fs.is_finite() && finite_slice(cs.as_slice()) {
                        let phis = fs + rho * violation_l1(&cs, &rl, &ru);
                        if phis <= phi0 + 1e-4 * dphi.min(0.0) && phis.is_finite() {
                            x_trial = x_soc;
                            accepted = true;
                            break;
                        }
                    }
                }
            }
            t *= 0.5;
        }
        if !accepted || qp_degraded && step_norm < 1e-14 {
            if bfgs_resets < 3 {
                bfgs_resets += 1;
                bmat = DMatrix::zeros(0, 0);
                bfgs_scaled = false;
                // Also try restoration when infeasible.
                if viol > opts.tol_feas {
                    let ok =
                        restore_feasibility(nlp, &map, &mut xf, &rl, &ru, &bl, &bu, iter)?;
                    cur = evaluate(nlp, &map.full_from_free(xf.as_slice()), iter)?;
                    if !ok {
                        let viol = violation_max(&cur.c, &rl, &ru);
                        return Ok(SolveResult {
                            x: map.full_from_free(xf.as_slice()),
                            status: SolveStatus::Infeasible,
                            iterations: iter,
                            objective: cur.f,
                            max_violation: viol,
                            kkt_residual: kkt_res,
                            clipped_start: clipped,
                            log,
                        });
                    }
                }
                continue;
            }
            return Ok(SolveResult {
                x: map.full_from_free(xf.as_slice()),
                status: SolveStatus::LineSearchFailure,
                iterations: iter,
                objective: cur.f,
                max_violation: viol,
                kkt_residual: kkt_res,
                clipped_start: clipped,
                log,
            });
        }

        // Accept the step; BFGS update of the reduced Hessian with the
        // step and Lagrangian-gradient change projected into the current
        // null-space basis.
        let next = evaluate(nlp, &map.full_from_free(x_trial.as_slice()), iter)?;
        let s = &x_trial - &xf;
        let lam_v = DVector::from_vec(lam.clone());
        let grad_l_new = {
            let gfn = free_grad(&next.g);
            let jtl = free_jac_t(&next.jac, &(0..m).collect::<Vec<_>>()) * &lam_v;
            gfn - jtl
        };
        let grad_l_old = {
            let jtl = free_jac_t(&cur.jac, &(0..m).collect::<Vec<_>>()) * &lam_v;
            &gf - &jtl
        };
        let s_red = fac.z.transpose() * &s;
        let y_red = fac.z.transpose() * (&grad_l_new - &grad_l_old);
        let sy = s_red.dot(&y_red);
        // Size the very first Hessian to the observed curvature along the
        // step; a plain identity is usually scaled wrong by orders of
        // magnitude and wastes iterations.
        if !bfgs_scaled && sy > 1e-14 {
            let gamma = (y_red.dot(&y_red) / sy).clamp(1e-4, 1e6);
            bmat = DMatrix::<f64>::identity(nz, nz) * gamma;
            bfgs_scaled = true;
        }
        let sb = &bmat * &s_red;
        let sbs = s_red.dot(&sb);
        if std::env::var_os("SQP_TRACE").is_some() {
            let ss = s_red.dot(&s_red).max(1e-300);
            let raw = if sy.abs() > 0.0 { y_red.dot(&y_red) / sy } else { f64::NAN };
            eprintln!(
                "TRU it {iter} t {t:.3e} |s| {:.3e} |y| {:.3e} raw {raw:.3e} along {:.3e} sbs/ss {:.3e} damped {}",
                s_red.norm(),
                y_red.norm(),
                sy / ss,
                sbs / ss,
                sy < 0.2 * sbs
            );
        }
        // A step along nonpositive observed curvature carries no usable
        // secant information; damping it against B would manufacture
        // phantom curvature (the blended pair adds ~|Bs|^2/(0.2 s'Bs),
        // compounding the top of the spectrum every iteration).
        let genuine = sy > 1e-12 * s_red.norm() * y_red.norm();
        if sbs > 1e-16 && genuine {
            // Powell damping keeps the update positive definite.
            let yd = if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                &y_red * theta + &sb * (1.0 - theta)
            } else {
                y_red
            };
            let syd = s_red.dot(&yd);
            // For a quadratic model y'y/s'y is bounded by the largest
            // Hessian eigenvalue, so a quotient far above the problem's
            // curvature scale marks a noise-dominated pair; folding it in
            // would spike the model and shrink later steps to nothing.
            if syd > 1e-14 && yd.dot(&yd) <= 1e7 * syd {
                let brank = &sb * sb.transpose() / sbs;
                let yrank = &yd * yd.transpose() / syd;
                bmat = bmat - brank + yrank;
            }
        }
        xf = x_trial;
        cur = next;
    }
    let viol = violation_max(&cur.c, &rl, &ru);
    Ok(SolveResult {
        x: map.full_from_free(xf.as_slice()),
        status: SolveStatus::MaxIter,
        iterations: opts.max_iter,
        objective: cur.f,
        max_violation: viol,
        kkt_residual: last_kkt,
        clipped_start: clipped,
        log,
    })
}

/// Per-block worst relative derivative error.
#[derive(Debug, Clone)]
pub struct DerivReport {
    /// (block name, worst relative error, offending (row, col)).
    pub blocks: Vec<(String, f64, Option<(usize, usize)>)>,
    pub gradient_worst: f64,
    pub worst: f64,
}

/// Compares analytic derivatives against central finite differences at a
/// point jittered inside the variable box by `seed`.
pub fn check_derivatives(nlp: &dyn Nlp, x: &[f64], seed: u64) -> DerivReport {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (bl, bu) = nlp.var_bounds();
    let n = nlp.dim();
    let mut xp = x.to_vec();
    for i in 0..n {
        if bl[i] < bu[i] {
            let room = (bu[i] - bl[i]).min(1.0);
            xp[i] = (xp[i] + rng.gen_range(-0.01..0.01) * room).clamp(bl[i], bu[i]);
        } else {
            xp[i] = bl[i];
        }
    }
    let jac = nlp.jacobian(&xp);
    let grad = nlp.gradient(&xp);
    let m = nlp.num_rows();
    let mut jfd = DMatrix::zeros(m, n);
    let mut gfd = vec![0.0; n];
    // Central differences at two step sizes combined by Richardson
    // extrapolation; truncation error drops to fourth order.
    let h = 1e-5;
    for j in 0..n {
        if bl[j] == bu[j] {
            continue;
        }
        let central = |step: f64, out_rows: &mut Vec<f64>| -> f64 {
            let mut xr = xp.clone();
            let mut xl = xp.clone();
            xr[j] += step;
            xl[j] -= step;
            let cr = nlp.rows(&xr);
            let cl = nlp.rows(&xl);
            *out_rows = (0..m).map(|i| (cr[i] - cl[i]) / (2.0 * step)).collect();
            (nlp.objective(&xr) - nlp.objective(&xl)) / (2.0 * step)
        };
        let mut rows_h = Vec::new();
        let mut rows_h2 = Vec::new();
        let g_h = central(h, &mut rows_h);
        let g_h2 = central(0.5 * h, &mut rows_h2);
        for i in 0..m {
            jfd[(i, j)] = (4.0 * rows_h2[i] - rows_h[i]) / 3.0;
        }
        gfd[j] = (4.0 * g_h2 - g_h) / 3.0;
    }
    let mut gradient_worst = 0.0f64;
    for j in 0..n {
        if bl[j] == bu[j] {
            continue;
        }
        let denom = grad[j].abs().max(gfd[j].abs()).max(1.0);
        gradient_worst = gradient_worst.max((grad[j] - gfd[j]).abs() / denom);
    }
    let mut blocks = Vec::new();
    let mut worst_all = gradient_worst;
    for (name, range) in nlp.row_blocks() {
        let mut worst = 0.0f64;
        let mut at = None;
        for i in range.clone() {
            for j in 0..n {
                if bl[j] == bu[j] {
                    continue;
                }
                let denom = jac[(i, j)].abs().max(jfd[(i, j)].abs()).max(1.0);
                let e = (jac[(i, j)] - jfd[(i, j)]).abs() / denom;
                if e > worst {
                    worst = e;
                    at = Some((i, j));
                }
            }
        }
        worst_all = worst_all.max(worst);
        blocks.push((name, worst, at));
    }
    DerivReport { blocks, gradient_worst, worst: worst_all }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min 1/2 x'Qx + c'x subject to sum(x) = 1 and x >= 0.
    struct ConvexQp;

    impl Nlp for ConvexQp {
        fn dim(&self) -> usize {
            3
        }
        fn num_rows(&self) -> usize {
            1
        }
        fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![0.0; 3], vec![f64::INFINITY; 3])
        }
        fn row_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![1.0], vec![1.0])
        }
        fn objective(&self, x: &[f64]) -> f64 {
            0.5 * (x[0] * x[0] + 2.0 * x[1] * x[1] + 3.0 * x[2] * x[2]) - x[0] - 2.0 * x[1]
                - 3.0 * x[2]
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] - 1.0, 2.0 * x[1] - 2.0, 3.0 * x[2] - 3.0]
        }
        fn rows(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] + x[1] + x[2]]
        }
        fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0])
        }
    }

    /// Closed-form KKT solution of the ConvexQp problem. The equality-only
    /// stationary point has x0 = -1/11 < 0, so the x0 >= 0 bound is active:
    /// re-solving with x0 pinned gives x = (0, 0.4, 0.6) with a positive
    /// bound multiplier, which certifies optimality.
    fn convex_qp_oracle() -> [f64; 3] {
        // Stationarity on the free block: 2 x1 - 2 = lam, 3 x2 - 3 = lam,
        // x1 + x2 = 1 => lam = -6/5.
        let lam = -6.0 / 5.0;
        let x1 = 1.0 + lam / 2.0;
        let x2 = 1.0 + lam / 3.0;
        let nu = 0.0 - 1.0 - lam;
        assert!(nu > 0.0, "bound multiplier must certify the active set");
        [0.0, x1, x2]
    }

    #[test]
    fn convex_qp_matches_kkt_oracle() {
        let sol = convex_qp_oracle();
        let res = solve(&ConvexQp, &[0.3, 0.3, 0.4], &SolveOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        for i in 0..3 {
            assert!(
                (res.x[i] - sol[i]).abs() < 1e-8,
                "x[{i}] = {} vs oracle {}",
                res.x[i],
                sol[i]
            );
        }
        assert!(res.x.iter().all(|&v| v >= -1e-12), "box respected");
    }

    /// Rosenbrock restricted to the disk x^2 + y^2 <= 2.
    struct RosenbrockDisk;

    impl Nlp for RosenbrockDisk {
        fn dim(&self) -> usize {
            2
        }
        fn num_rows(&self) -> usize {
            1
        }
        fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-2.0; 2], vec![2.0; 2])
        }
        fn row_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![f64::NEG_INFINITY], vec![2.0])
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]
        }
        fn rows(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] * x[0] + x[1] * x[1]]
        }
        fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]])
        }
    }

    #[test]
    fn rosenbrock_in_disk_matches_grid_oracle() {
        // Dense grid search over the feasible set.
        let prob = RosenbrockDisk;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 400;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = -2.0 + 4.0 * i as f64 / steps as f64;
                let y = -2.0 + 4.0 * j as f64 / steps as f64;
                if x * x + y * y > 2.0 {
                    continue;
                }
                let f = prob.objective(&[x, y]);
                if f < best.0 {
                    best = (f, x, y);
                }
            }
        }
        let opts = SolveOptions { tol_opt: 1e-10, max_iter: 500, ..Default::default() };
        let res = solve(&prob, &[-1.2, 1.0], &opts).unwrap();
        assert_eq!(res.status, SolveStatus::Converged, "{res:?}");
        // The grid locates the basin; the true optimum (1, 1) refines it.
        assert!((best.1 - 1.0).abs() < 0.02 && (best.2 - 1.0).abs() < 0.02);
        assert!((res.x[0] - 1.0).abs() < 1e-4, "x = {:?}", res.x);
        assert!((res.x[1] - 1.0).abs() < 1e-4);
        assert!(res.x[0] * res.x[0] + res.x[1] * res.x[1] <= 2.0 + 1e-8);
    }

    #[test]
    fn already_optimal_start_converges_immediately() {
        let x0 = convex_qp_oracle();
        let res = solve(&ConvexQp, &x0, &SolveOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        assert!(res.iterations <= 2, "took {} iterations", res.iterations);
        for i in 0..3 {
            assert!((res.x[i] - x0[i]).abs() < 1e-12, "zero step");
        }
    }

    #[test]
    fn deterministic_bitwise_repeat() {
        let opts = SolveOptions { tol_opt: 1e-10, ..Default::default() };
        let a = solve(&RosenbrockDisk, &[-1.2, 1.0], &opts).unwrap();
        let b = solve(&RosenbrockDisk, &[-1.2, 1.0], &opts).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        for (x, y) in a.x.iter().zip(b.x.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.log.len(), b.log.len());
        for (p, q) in a.log.iter().zip(b.log.iter()) {
            assert_eq!(p.1.to_bits(), q.1.to_bits());
            assert_eq!(p.3.to_bits(), q.3.to_bits());
        }
    }

    /// Equality-constrained least squares with an intentionally wrong
    /// Jacobian entry, for the fault-detection test.
    struct Corrupted;

    impl Nlp for Corrupted {
        fn dim(&self) -> usize {
            3
        }
        fn num_rows(&self) -> usize {
            2
        }
        fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-10.0; 3], vec![10.0; 3])
        }
        fn row_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![1.0, f64::NEG_INFINITY], vec![1.0, 4.0])
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x.iter().map(|v| v * v).sum()
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            x.iter().map(|v| 2.0 * v).collect()
        }
        fn rows(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] + 2.0 * x[1] + x[2], x[1] * x[2]]
        }
        fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
            // The (1, 1) entry should be x[2]; 0.5 is injected.
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 1.0, 0.0, x[2] + 0.5, x[1]])
        }
        fn row_blocks(&self) -> Vec<(String, Range<usize>)> {
            vec![("linear".into(), 0..1), ("bilinear".into(), 1..2)]
        }
    }

    #[test]
    fn derivative_check_flags_corrupted_block() {
        let report = check_derivatives(&Corrupted, &[0.2, 0.4, 0.6], 7);
        let linear = report.blocks.iter().find(|b| b.0 == "linear").unwrap();
        assert!(linear.1 < 1e-8, "exact linear block, got {}", linear.1);
        let bad = report.blocks.iter().find(|b| b.0 == "bilinear").unwrap();
        assert!(bad.1 > 0.1, "injected fault must be visible, got {}", bad.1);
        let (row, col) = bad.2.unwrap();
        assert_eq!((row, col), (1, 1), "fault located at the corrupted entry");
        assert!(report.gradient_worst < 1e-9);
    }

    struct NonFiniteObjective;

    impl Nlp for NonFiniteObjective {
        fn dim(&self) -> usize {
            1
        }
        fn num_rows(&self) -> usize {
            0
        }
        fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-1.0], vec![1.0])
        }
        fn row_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![], vec![])
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (x[0] - 2.0).ln()
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![1.0 / (x[0] - 2.0)]
        }
        fn rows(&self, _x: &[f64]) -> Vec<f64> {
            vec![]
        }
        fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::zeros(0, 1)
        }
    }

    #[test]
    fn non_finite_evaluation_aborts_with_diagnostic() {
        let err = solve(&NonFiniteObjective, &[0.0], &SolveOptions::default()).unwrap_err();
        assert!(matches!(err, SolverError::NonFinite { .. }), "{err}");
    }

    /// x must be at least 1 and at most -1 simultaneously.
    struct InfeasibleRows;

    impl Nlp for InfeasibleRows {
        fn dim(&self) -> usize {
            1
        }
        fn num_rows(&self) -> usize {
            2
        }
        fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-5.0], vec![5.0])
        }
        fn row_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![1.0, f64::NEG_INFINITY], vec![f64::INFINITY, -1.0])
        }
        fn objective(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn gradient(&self, _x: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
        fn rows(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0], x[0]]
        }
        fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0])
        }
    }

    #[test]
    fn inconsistent_rows_reported_infeasible() {
        let res = solve(&InfeasibleRows, &[0.0], &SolveOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Infeasible, "{res:?}");
        assert!(res.max_violation > 0.5);
    }

    /// Fixed variables are eliminated: the frozen coordinate must stay at
    /// its bound and the rest still solve.
    struct PartiallyFrozen;

    impl Nlp for PartiallyFrozen {
        fn dim(&self) -> usize {
            3
        }
        fn num_rows(&self) -> usize {
            1
        }
        fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![0.25, -10.0, -10.0], vec![0.25, 10.0, 10.0])
        }
        fn row_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![2.0], vec![2.0])
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (x[1] - 1.0).powi(2) + (x[2] + 0.5).powi(2)
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![0.0, 2.0 * (x[1] - 1.0), 2.0 * (x[2] + 0.5)]
        }
        fn rows(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] + x[1] + x[2]]
        }
        fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0])
        }
    }

    #[test]
    fn frozen_variable_respected() {
        let res = solve(&PartiallyFrozen, &[0.9, 0.0, 0.0], &SolveOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        assert!(res.clipped_start, "start had the frozen variable off its bound");
        assert_eq!(res.x[0], 0.25);
        // Oracle: minimize over (x1, x2) with x1 + x2 = 1.75.
        // Lagrange: x1 = 1 + t, x2 = -0.5 + t, 0.5 + 2t = 1.75 => t = 0.625.
        assert!((res.x[1] - 1.625).abs() < 1e-8);
        assert!((res.x[2] - 0.125).abs() < 1e-8);
        let csv = res.log_csv();
        assert!(csv.starts_with("iter,objective,violation,step_norm,penalty"));
    }
}
