//! Dense convex QP solver for the controller: primal active-set method on
//! two-sided linear constraints lo <= C u <= hi, objective
//! 0.5 u' H u + g' u. Built for the MPC inner loop: problems are small
//! (tens of variables, hundreds of rows), resolved at high rate, and
//! consecutive instances differ little, so warm starts carry both the
//! iterate and the active set. Every solve returns a KKT certificate
//! computed against the caller's data, never against any internally
//! regularized copy.
//!
//! Working-set subproblems are solved in range space: with W the active
//! rows, direction d solves min 0.5 d' H d + gx' d subject to C_W d = 0 via
//! S nu = -C_W H^-1 gx, d = -H^-1 (gx + C_W' nu), S = C_W H^-1 C_W'.
//! The vectors H^-1 c_j' are cached per row, so rebuilding S after a
//! working-set change costs only dot products.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Which bound of a two-sided row is active. `Fixed` marks equality rows
/// (lo == hi); they are seeded into the working set and never dropped, and
/// their multiplier sign is unconstrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
    Fixed,
}

/// min 0.5 u' h u + g' u   s.t.   lo <= c u <= hi   (elementwise).
/// Rows may be one-sided by setting lo to -inf or hi to +inf; lo == hi makes
/// an equality row.
#[derive(Clone, Debug)]
pub struct BoundedQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl BoundedQp {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn rows(&self) -> usize {
        self.lo.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * (&self.h * u).dot(u) + self.g.dot(u)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.h.nrows() != d || self.h.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "qp hessian",
                expected: d,
                got: self.h.nrows().max(self.h.ncols()),
            });
        }
        let m = self.rows();
        if self.c.nrows() != m || self.hi.len() != m {
            return Err(Error::DimensionMismatch {
                context: "qp constraint rows",
                expected: m,
                got: self.c.nrows().max(self.hi.len()),
            });
        }
        if m > 0 && self.c.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "qp constraint cols",
                expected: d,
                got: self.c.ncols(),
            });
        }
        if self.h.iter().any(|v| !v.is_finite())
            || self.g.iter().any(|v| !v.is_finite())
            || self.c.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite { context: "qp data" });
        }
        for j in 0..m {
            let (lo, hi) = (self.lo[j], self.hi[j]);
            if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(Error::NonFinite {
                    context: "qp bounds",
                });
            }
            if lo > hi {
                return Err(Error::Infeasible {
                    detail: format!("row {j}: lower bound {lo} exceeds upper bound {hi}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QpOptions {
    /// Certificate tolerance; also scales the internal zero thresholds.
    pub tol: f64,
    pub max_iterations: usize,
    /// Record the objective value after every iteration (testing aid).
    pub record_objective: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iterations: 4000,
            record_objective: false,
        }
    }
}

/// Previous solution to start from: the iterate and its final active set.
/// Row indices must refer to the same constraint layout as the new problem.
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub u: DVector<f64>,
    pub active: Vec<(usize, Side)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    IterationLimit,
}

/// Residuals of the Karush-Kuhn-Tucker conditions at the returned point,
/// evaluated against the problem as given. `stationarity` is
/// ||H u + g + C' lambda||_inf / (1 + ||g||_inf); `feasibility` is the worst
/// bound violation; `complementarity` is max |lambda_j| * slack_j.
#[derive(Clone, Copy, Debug)]
pub struct KktCertificate {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktCertificate {
    pub fn passes(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.feasibility <= tol && self.complementarity <= tol
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Final active set, reusable as the next warm start.
    pub active: Vec<(usize, Side)>,
    /// Signed multipliers, one per constraint row (zero for inactive rows;
    /// >= 0 at upper bounds, <= 0 at lower bounds).
    pub multipliers: DVector<f64>,
    pub certificate: KktCertificate,
    pub objective_trace: Option<Vec<f64>>,
}

/// Consecutive zero-length steps tolerated before declaring a degenerate
/// stall. Ties in the ratio test break deterministically, so genuine cycling
/// shows up as exactly this pattern.
const STALL_LIMIT: usize = 50;

struct Factored<'a> {
    qp: &'a BoundedQp,
    chol: Cholesky<f64, Dyn>,
    /// Lazy H^-1 c_j' per constraint row, valid for the whole solve.
    cache: Vec<Option<DVector<f64>>>,
}

impl<'a> Factored<'a> {
    fn new(qp: &'a BoundedQp) -> Result<Self> {
        let d = qp.dim();
        let chol = match Cholesky::new(qp.h.clone()) {
            Some(c) => c,
            None => {
                // Positive semidefinite but singular Hessians get a shift so
                // subproblem solves exist; the certificate still measures the
                // caller's H, so any bias this introduces is reported, not
                // hidden.
                let shift = 1e-8 * (1.0 + qp.h.trace() / d as f64);
                let mut h = qp.h.clone();
                for i in 0..d {
                    h[(i, i)] += shift;
                }
                Cholesky::new(h).ok_or(Error::NonConvex)?
            }
        };
        Ok(Self {
            qp,
            chol,
            cache: vec![None; qp.rows()],
        })
    }

    fn solve_h(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    fn y(&mut self, row: usize) -> &DVector<f64> {
        if self.cache[row].is_none() {
            let c_row = self.qp.c.row(row).transpose();
            self.cache[row] = Some(self.chol.solve(&c_row));
        }
        self.cache[row].as_ref().unwrap()
    }
}

/// Largest step t in [0, 1] keeping t*u inside every row that straddles
/// zero. Used to salvage infeasible warm starts before projection.
fn scale_toward_zero(qp: &BoundedQp, u: &DVector<f64>) -> f64 {
    let mut t: f64 = 1.0;
    for j in 0..qp.rows() {
        let v = qp.c.row(j).transpose().dot(u);
        if v > qp.hi[j] && qp.hi[j] >= 0.0 {
            t = t.min(qp.hi[j] / v);
        } else if v < qp.lo[j] && qp.lo[j] <= 0.0 {
            t = t.min(qp.lo[j] / v);
        }
    }
    t.clamp(0.0, 1.0)
}

/// Cyclic projection onto the constraint rows. Returns the worst remaining
/// violation; the caller decides whether that is good enough.
fn project_feasible(qp: &BoundedQp, u: &mut DVector<f64>, feas_tol: f64, passes: usize) -> f64 {
    let m = qp.rows();
    let mut worst = violation(qp, u);
    if worst <= feas_tol {
        return worst;
    }
    for _ in 0..passes {
        for j in 0..m {
            let row = qp.c.row(j);
            let v = row.transpose().dot(u);
            let target = v.clamp(qp.lo[j], qp.hi[j]);
            if v != target {
                let nsq = row.norm_squared();
                if nsq > 0.0 {
                    let step = (target - v) / nsq;
                    for k in 0..u.len() {
                        u[k] += row[k] * step;
                    }
                }
            }
        }
        worst = violation(qp, u);
        if worst <= feas_tol {
            break;
        }
    }
    worst
}

fn violation(qp: &BoundedQp, u: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..qp.rows() {
        let v = qp.c.row(j).transpose().dot(u);
        worst = worst.max(v - qp.hi[j]).max(qp.lo[j] - v);
    }
    worst
}

fn certificate(qp: &BoundedQp, u: &DVector<f64>, lambda: &DVector<f64>) -> KktCertificate {
    let mut grad = &qp.h * u + &qp.g;
    for j in 0..qp.rows() {
        let l = lambda[j];
        if l != 0.0 {
            for k in 0..u.len() {
                grad[k] += qp.c[(j, k)] * l;
            }
        }
    }
    let stationarity = grad.amax() / (1.0 + qp.g.amax());

    let feasibility = violation(qp, u);

    let mut complementarity = 0.0f64;
    for j in 0..qp.rows() {
        let l = lambda[j];
        if l != 0.0 {
            let v = qp.c.row(j).transpose().dot(u);
            let slack_lo = if qp.lo[j].is_finite() { v - qp.lo[j] } else { f64::INFINITY };
            let slack_hi = if qp.hi[j].is_finite() { qp.hi[j] - v } else { f64::INFINITY };
            let slack = slack_lo.abs().min(slack_hi.abs());
            if slack.is_finite() {
                complementarity = complementarity.max((l * slack).abs());
            }
        }
    }
    KktCertificate {
        stationarity,
        feasibility,
        complementarity,
    }
}

pub fn solve(qp: &BoundedQp, warm: Option<&WarmStart>, opts: &QpOptions) -> Result<QpSolution> {
    qp.validate()?;
    let d = qp.dim();
    let m = qp.rows();
    let mut fact = Factored::new(qp)?;

    let bound_scale = qp
        .lo
        .iter()
        .chain(qp.hi.iter())
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let feas_tol = 1e-10 * (1.0 + bound_scale);

    // Starting point: warm iterate if supplied, pulled back toward zero and
    // projected until feasible.
    let mut u = match warm {
        Some(w) if w.u.len() == d && w.u.iter().all(|v| v.is_finite()) => w.u.clone(),
        _ => DVector::zeros(d),
    };
    if violation(qp, &u) > feas_tol {
        let t = scale_toward_zero(qp, &u);
        u *= t;
    }
    let worst = project_feasible(qp, &mut u, feas_tol, 200);
    if worst > (1.0 + bound_scale) * 1e-6 {
        // Could not reach the feasible set; report the failure through the
        // certificate rather than fabricating a solution.
        let lambda = DVector::zeros(m);
        let cert = certificate(qp, &u, &lambda);
        return Ok(QpSolution {
            u,
            status: SolveStatus::IterationLimit,
            iterations: 0,
            active: Vec::new(),
            multipliers: lambda,
            certificate: cert,
            objective_trace: None,
        });
    }

    // Working set: equality rows always, then still-active warm rows.
    let mut in_w: Vec<Option<Side>> = vec![None; m];
    let mut w_rows: Vec<usize> = Vec::new();
    for j in 0..m {
        if qp.lo[j] == qp.hi[j] {
            in_w[j] = Some(Side::Fixed);
            w_rows.push(j);
        }
    }
    if let Some(wstart) = warm {
        for &(j, side) in &wstart.active {
            if j >= m || in_w[j].is_some() || side == Side::Fixed || w_rows.len() >= d {
                continue;
            }
            let v = qp.c.row(j).transpose().dot(&u);
            let at_bound = match side {
                Side::Upper => qp.hi[j].is_finite() && (v - qp.hi[j]).abs() <= 10.0 * feas_tol,
                Side::Lower => qp.lo[j].is_finite() && (v - qp.lo[j]).abs() <= 10.0 * feas_tol,
                Side::Fixed => false,
            };
            if at_bound {
                in_w[j] = Some(side);
                w_rows.push(j);
            }
        }
    }

    let mut nu = DVector::<f64>::zeros(0);
    let mut trace = opts.record_objective.then(Vec::new);
    let mut status = SolveStatus::IterationLimit;
    let mut iterations = 0usize;
    let mut stall = 0usize;

    while iterations < opts.max_iterations {
        iterations += 1;

        let gx = &qp.h * &u + &qp.g;
        let h_inv_gx = fact.solve_h(&gx);

        // Equality-constrained direction on the current working set.
        let k = w_rows.len();
        let mut d_step = -&h_inv_gx;
        if k > 0 {
            let mut s = DMatrix::zeros(k, k);
            // Touch the cache first so the borrows below are immutable.
            for &ja in &w_rows {
                fact.y(ja);
            }
            for (a, &ja) in w_rows.iter().enumerate() {
                let ya = fact.cache[ja].as_ref().unwrap();
                for (b, &jb) in w_rows.iter().enumerate().skip(a) {
                    let v = qp.c.row(jb).transpose().dot(ya);
                    s[(a, b)] = v;
                    s[(b, a)] = v;
                }
            }
            let mut rhs = DVector::zeros(k);
            for (a, &ja) in w_rows.iter().enumerate() {
                rhs[a] = -qp.c.row(ja).transpose().dot(&h_inv_gx);
            }
            let chol_s = match Cholesky::new(s.clone()) {
                Some(c) => c,
                None => {
                    // Degenerate working set: damp S just enough to solve.
                    let ridge = 1e-12 * (1.0 + s.trace() / k as f64);
                    let mut s2 = s;
                    for i in 0..k {
                        s2[(i, i)] += ridge;
                    }
                    Cholesky::new(s2).ok_or(Error::NonConvex)?
                }
            };
            nu = chol_s.solve(&rhs);
            for (a, &ja) in w_rows.iter().enumerate() {
                let ya = fact.cache[ja].as_ref().unwrap();
                let scale = nu[a];
                for i in 0..d {
                    d_step[i] -= scale * ya[i];
                }
            }
        } else {
            nu = DVector::zeros(0);
        }

        let step_scale = 1e-11 * (1.0 + u.amax());
        if d_step.amax() <= step_scale {
            // Stationary on the working set; check multiplier signs.
            let slack = 1e-9 * (1.0 + nu.amax());
            let mut worst_idx = None;
            let mut worst_violation = 0.0f64;
            for (a, &ja) in w_rows.iter().enumerate() {
                let side = in_w[ja].unwrap();
                let viol = match side {
                    Side::Fixed => 0.0,
                    Side::Upper => {
                        if nu[a] < -slack {
                            -nu[a]
                        } else {
                            0.0
                        }
                    }
                    Side::Lower => {
                        if nu[a] > slack {
                            nu[a]
                        } else {
                            0.0
                        }
                    }
                };
                if viol > worst_violation {
                    worst_violation = viol;
                    worst_idx = Some(a);
                }
            }
            match worst_idx {
                None => {
                    status = SolveStatus::Optimal;
                    if let Some(t) = trace.as_mut() {
                        t.push(qp.objective(&u));
                    }
                    break;
                }
                Some(a) => {
                    let row = w_rows.remove(a);
                    in_w[row] = None;
                    if let Some(t) = trace.as_mut() {
                        t.push(qp.objective(&u));
                    }
                    continue;
                }
            }
        }

        // Ratio test: longest step along d before an inactive row blocks.
        let mut t = 1.0f64;
        let mut blocker: Option<(usize, Side)> = None;
        for j in 0..m {
            if in_w[j].is_some() {
                continue;
            }
            let a = qp.c.row(j).transpose().dot(&d_step);
            let v = qp.c.row(j).transpose().dot(&u);
            let tiny = 1e-13 * (1.0 + d_step.amax());
            if a > tiny && qp.hi[j].is_finite() {
                let tj = ((qp.hi[j] - v) / a).max(0.0);
                if tj < t {
                    t = tj;
                    blocker = Some((j, Side::Upper));
                }
            } else if a < -tiny && qp.lo[j].is_finite() {
                let tj = ((qp.lo[j] - v) / a).max(0.0);
                if tj < t {
                    t = tj;
                    blocker = Some((j, Side::Lower));
                }
            }
        }

        if t > 0.0 {
            u.axpy(t, &d_step, 1.0);
            stall = 0;
        } else {
            stall += 1;
            if stall > STALL_LIMIT {
                break;
            }
        }
        if let Some((j, side)) = blocker {
            if t < 1.0 {
                if w_rows.len() < d {
                    in_w[j] = Some(side);
                    w_rows.push(j);
                } else {
                    stall += 1;
                    if stall > STALL_LIMIT {
                        break;
                    }
                }
            }
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(qp.objective(&u));
        }
    }

    let mut lambda = DVector::zeros(m);
    for (a, &ja) in w_rows.iter().enumerate() {
        if a < nu.len() {
            lambda[ja] = nu[a];
        }
    }
    let active: Vec<(usize, Side)> = w_rows.iter().map(|&j| (j, in_w[j].unwrap())).collect();
    let cert = certificate(qp, &u, &lambda);
    Ok(QpSolution {
        u,
        status,
        iterations,
        active,
        multipliers: lambda,
        certificate: cert,
        objective_trace: trace,
    })
}
