//! Smooth constrained nonlinear programming.
//!
//! `solve` implements an interior-point method: inequalities get slacks with a
//! log barrier, bounds are handled by a direct barrier, and the barrier
//! subproblems are solved by regularized Newton steps on the primal-dual KKT
//! system with a backtracking line search on an L1 merit function. The KKT
//! system is factorized with a banded LDL^T after a reverse Cuthill-McKee
//! reordering, which keeps the multiple-shooting structure cheap without any
//! problem-specific wiring.

use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};

/// Sparse matrix entries as (row, col, value) triplets.
pub type Triplets = Vec<(usize, usize, f64)>;

/// A smooth NLP: minimize f(z) subject to h(z) = 0, c(z) >= 0 and variable
/// bounds. Callbacks must be deterministic functions of the decision vector.
pub trait NlpProblem {
    fn n_vars(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    /// Lower/upper variable bounds; use +-infinity for unbounded entries.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn objective(&self, z: &[f64]) -> f64;
    fn objective_grad(&self, z: &[f64], grad: &mut [f64]);
    /// Gauss-Newton (or exact) objective curvature, lower triangle (i >= j).
    fn objective_hessian(&self, z: &[f64]) -> Triplets;
    /// Curvature of the Lagrangian sigma*f + y^T h - lam^T c, lower triangle
    /// (i >= j). The sparsity pattern must not depend on the evaluation
    /// point. The default drops all constraint curvature, which leaves a
    /// Gauss-Newton model; that converges only linearly once multipliers are
    /// large, so problems with strongly active nonlinear constraints should
    /// override this.
    fn lagrangian_hessian(&self, z: &[f64], sigma: f64, y_eq: &[f64], lam_in: &[f64]) -> Triplets {
        let _ = (y_eq, lam_in);
        self.objective_hessian(z)
            .into_iter()
            .map(|(i, j, v)| (i, j, sigma * v))
            .collect()
    }
    fn eq_constraints(&self, z: &[f64], out: &mut [f64]);
    fn eq_jacobian(&self, z: &[f64]) -> Triplets;
    /// Inequality residuals, feasible iff >= 0.
    fn ineq_constraints(&self, z: &[f64], out: &mut [f64]);
    fn ineq_jacobian(&self, z: &[f64]) -> Triplets;
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    pub feasibility_tolerance: f64,
    /// Initial barrier parameter.
    pub initial_barrier: f64,
    /// Backtracking shrink factor.
    pub ls_shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub ls_armijo: f64,
    /// Smallest primal regularization added on inertia correction.
    pub regularization_floor: f64,
    /// Optional per-iteration diagnostics file.
    pub iteration_log: Option<std::path::PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            kkt_tolerance: 1e-6,
            feasibility_tolerance: 1e-6,
            initial_barrier: 0.1,
            ls_shrink: 0.5,
            ls_armijo: 1e-4,
            regularization_floor: 1e-8,
            iteration_log: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    Infeasible,
    NumericalFailure,
}

/// Multiplier estimates at the returned point.
#[derive(Debug, Clone, Default)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// One accepted solver iteration, for diagnostics and the merit-monotonicity
/// property.
#[derive(Debug, Clone, Copy)]
pub struct IterRecord {
    pub merit_pre: f64,
    pub merit_post: f64,
    pub kkt: f64,
    pub alpha: f64,
    pub mu: f64,
    /// True when this iteration changed mu/nu or performed a regularization
    /// reset, so merit values are not comparable across it.
    pub event: bool,
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub decision_vector: Vec<f64>,
    pub status: SolverStatus,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub multipliers: Multipliers,
    pub iteration_records: Vec<IterRecord>,
}

/// Relative derivative errors reported by `check_derivatives`.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeReport {
    pub objective_grad: f64,
    pub eq_jacobian: f64,
    pub ineq_jacobian: f64,
}

impl DerivativeReport {
    pub fn max_error(&self) -> f64 {
        self.objective_grad.max(self.eq_jacobian).max(self.ineq_jacobian)
    }
}

// ---------------------------------------------------------------------------
// Banded symmetric indefinite factorization with RCM reordering.
// ---------------------------------------------------------------------------

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern.
fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.sort_by_key(|&i| adj[i].len());
    for &start in &nodes {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (adj[w].len(), w));
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    // perm[old] = new
    let mut perm = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        perm[old] = new;
    }
    perm
}

/// Symmetric banded matrix in lower-band storage; entry (i, j) with
/// 0 <= i - j <= bw lives at `data[j * (bw + 1) + (i - j)]`.
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw);
        self.data[j * (self.bw + 1) + (i - j)] += v;
    }

    /// y = A x for the symmetric band.
    fn mult(&self, x: &[f64], y: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            y[j] += self.data[j * w] * x[j];
            let imax = (j + bw).min(n - 1);
            for i in j + 1..=imax {
                let a = self.data[j * w + (i - j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
        }
    }

    /// In-place LDL^T without pivoting. Returns (n_pos, n_neg) pivot signs, or
    /// None on a (near-)zero pivot.
    fn factor_ldlt(&mut self, d: &mut Vec<f64>) -> Option<(usize, usize)> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        d.clear();
        d.resize(n, 0.0);
        let (mut pos, mut neg) = (0, 0);
        for j in 0..n {
            let start = j.saturating_sub(bw);
            let mut djj = self.data[j * w];
            for k in start..j {
                let l = self.data[k * w + (j - k)];
                djj -= l * l * d[k];
            }
            if djj.abs() < 1e-300 {
                return None;
            }
            if djj > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            d[j] = djj;
            let imax = (j + bw).min(n - 1);
            for i in j + 1..=imax {
                let mut v = self.data[j * w + (i - j)];
                let kstart = start.max(i.saturating_sub(bw));
                for k in kstart..j {
                    v -= self.data[k * w + (i - k)] * self.data[k * w + (j - k)] * d[k];
                }
                self.data[j * w + (i - j)] = v / djj;
            }
        }
        Some((pos, neg))
    }

    /// Solves L D L^T x = b with the factored matrix.
    fn solve(&self, d: &[f64], b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        for j in 0..n {
            let bj = b[j];
            if bj != 0.0 {
                let imax = (j + bw).min(n - 1);
                for i in j + 1..=imax {
                    b[i] -= self.data[j * w + (i - j)] * bj;
                }
            }
        }
        for j in 0..n {
            b[j] /= d[j];
        }
        for j in (0..n).rev() {
            let imax = (j + bw).min(n - 1);
            let mut acc = b[j];
            for i in j + 1..=imax {
                acc -= self.data[j * w + (i - j)] * b[i];
            }
            b[j] = acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Interior-point solver.
// ---------------------------------------------------------------------------

const SIGMA_MAX_DUAL: f64 = 1e10;
const OBJ_SCALE_TARGET: f64 = 10.0;

struct Workspace {
    n: usize,
    lb_relaxed: Vec<f64>,
    ub_relaxed: Vec<f64>,
    perm: Vec<usize>,
    bw: usize,
}

fn band_pattern(
    problem: &dyn NlpProblem,
    z: &[f64],
) -> (Vec<usize>, usize) {
    let n = problem.n_vars();
    let m = problem.n_eq();
    let dim = n + m;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); dim];
    let connect = |a: usize, b: usize, adj: &mut Vec<Vec<usize>>| {
        if a != b {
            adj[a].push(b);
            adj[b].push(a);
        }
    };
    let ones_eq = vec![1.0; m];
    let ones_in = vec![1.0; problem.n_ineq()];
    for (i, j, _) in problem.lagrangian_hessian(z, 1.0, &ones_eq, &ones_in) {
        connect(i, j, &mut adj);
    }
    for (r, c, _) in problem.eq_jacobian(z) {
        connect(n + r, c, &mut adj);
    }
    // Inequality rows enter the condensed Hessian as cliques of their columns.
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); problem.n_ineq()];
    for (r, c, _) in problem.ineq_jacobian(z) {
        rows[r].push(c);
    }
    for cols in &rows {
        for a in 0..cols.len() {
            for b in a + 1..cols.len() {
                connect(cols[a], cols[b], &mut adj);
            }
        }
    }
    for v in adj.iter_mut() {
        v.sort_unstable();
        v.dedup();
    }
    let perm = reverse_cuthill_mckee(&adj);
    let mut bw = 0;
    for (i, nb) in adj.iter().enumerate() {
        for &j in nb {
            bw = bw.max(perm[i].abs_diff(perm[j]));
        }
    }
    (perm, bw)
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Solves the NLP from the given initial guess.
pub fn solve(
    problem: &dyn NlpProblem,
    config: &SolverConfig,
    initial_guess: &[f64],
) -> Result<SolverResult> {
    let t0 = Instant::now();
    let n = problem.n_vars();
    let m_eq = problem.n_eq();
    let m_in = problem.n_ineq();
    if initial_guess.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial guess has length {}, problem has {n} variables",
            initial_guess.len()
        )));
    }
    let (lb, ub) = problem.bounds();
    let ws = {
        let (perm, bw) = band_pattern(problem, initial_guess);
        Workspace { n, lb_relaxed: lb.clone(), ub_relaxed: ub.clone(), perm, bw }
    };

    // Push the guess strictly inside the bounds.
    let mut z: Vec<f64> = initial_guess.to_vec();
    for i in 0..n {
        let (l, u) = (ws.lb_relaxed[i], ws.ub_relaxed[i]);
        let margin = if l.is_finite() && u.is_finite() {
            (1e-2 * (u - l)).min(1e-2)
        } else {
            1e-2
        };
        if l.is_finite() {
            z[i] = z[i].max(l + margin);
        }
        if u.is_finite() {
            z[i] = z[i].min(u - margin);
        }
    }

    // Objective scaling from the initial gradient.
    let mut grad0 = vec![0.0; n];
    problem.objective_grad(&z, &mut grad0);
    if !grad0.iter().all(|v| v.is_finite()) {
        return Err(Error::PlanFailure("non-finite objective gradient at start".into()));
    }
    let sigma = (OBJ_SCALE_TARGET / linf(&grad0).max(OBJ_SCALE_TARGET)).clamp(1e-4, 1.0);

    let mut mu = config.initial_barrier.max(1e-9);
    let mu_min = sigma * config.kkt_tolerance / 10.0;

    // Slacks and duals.
    let mut c = vec![0.0; m_in];
    problem.ineq_constraints(&z, &mut c);
    let mut s: Vec<f64> = c.iter().map(|&ci| ci.max(mu.max(1e-3))).collect();
    let mut lam: Vec<f64> = s.iter().map(|&si| mu / si).collect();
    let mut y = vec![0.0; m_eq];
    let mut zl = vec![0.0; n];
    let mut zu = vec![0.0; n];
    for i in 0..n {
        if ws.lb_relaxed[i].is_finite() {
            zl[i] = mu / (z[i] - ws.lb_relaxed[i]);
        }
        if ws.ub_relaxed[i].is_finite() {
            zu[i] = mu / (ws.ub_relaxed[i] - z[i]);
        }
    }

    let mut log = match &config.iteration_log {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };

    let mut records: Vec<IterRecord> = Vec::new();
    let mut nu = 1.0; // merit penalty weight
    let mut band = BandMatrix::zeros(n + m_eq, ws.bw);
    let mut band_raw = BandMatrix::zeros(n + m_eq, ws.bw);
    let mut dvec: Vec<f64> = Vec::new();
    let mut delta_p_last = 0.0f64;
    // Levenberg-style damping carried across iterations: raised when the line
    // search collapses (the Gauss-Newton step overshoots), relaxed again once
    // near-full steps are accepted.
    let mut delta_p_suggest = 0.0f64;
    let mut stall_count = 0usize;
    let mut status = SolverStatus::MaxIterations;
    let mut iter = 0usize;

    let barrier_value = |z: &[f64], s: &[f64], ws: &Workspace, mu: f64| -> f64 {
        let mut b = 0.0;
        for i in 0..ws.n {
            if ws.lb_relaxed[i].is_finite() {
                b -= mu * (z[i] - ws.lb_relaxed[i]).ln();
            }
            if ws.ub_relaxed[i].is_finite() {
                b -= mu * (ws.ub_relaxed[i] - z[i]).ln();
            }
        }
        for &si in s.iter() {
            b -= mu * si.ln();
        }
        b
    };

    let mut grad = vec![0.0; n];
    let mut h = vec![0.0; m_eq];

    while iter < config.max_iterations {
        iter += 1;

        // Evaluate everything at the current point.
        let f_val = sigma * problem.objective(&z);
        problem.objective_grad(&z, &mut grad);
        let gz: Vec<f64> = grad.iter().map(|g| sigma * g).collect();
        problem.eq_constraints(&z, &mut h);
        problem.ineq_constraints(&z, &mut c);
        let a_trip = problem.eq_jacobian(&z);
        let j_trip = problem.ineq_jacobian(&z);
        // The curvature must match the scaled objective actually minimized.
        let h_trip: Triplets = problem.lagrangian_hessian(&z, sigma, &y, &lam);
        if !(f_val.is_finite()
            && gz.iter().all(|v| v.is_finite())
            && h.iter().all(|v| v.is_finite())
            && c.iter().all(|v| v.is_finite()))
        {
            status = SolverStatus::NumericalFailure;
            break;
        }

        // KKT residuals (internal, scaled objective).
        let mut rd = gz.clone();
        for &(r, col, v) in &a_trip {
            rd[col] += v * y[r];
        }
        for &(r, col, v) in &j_trip {
            rd[col] -= v * lam[r];
        }
        for i in 0..n {
            rd[i] += zu[i] - zl[i];
        }
        let r_cs: Vec<f64> = (0..m_in).map(|i| c[i] - s[i]).collect();
        let viol = linf(&h).max(linf(&r_cs));
        let comp0 = {
            let mut m = 0.0f64;
            for i in 0..m_in {
                m = m.max((s[i] * lam[i]).abs());
            }
            for i in 0..n {
                if ws.lb_relaxed[i].is_finite() {
                    m = m.max(((z[i] - ws.lb_relaxed[i]) * zl[i]).abs());
                }
                if ws.ub_relaxed[i].is_finite() {
                    m = m.max(((ws.ub_relaxed[i] - z[i]) * zu[i]).abs());
                }
            }
            m
        };
        // Convergence is tested on the scaled problem: with the objective
        // scaled by sigma the multipliers and stationarity residual live in
        // sigma-scaled units, and dividing back out would demand raw
        // accuracy near machine precision whenever the initial gradient is
        // large. Feasibility stays in original (meter) units.
        let kkt_scaled = linf(&rd).max(viol).max(comp0);

        if kkt_scaled <= config.kkt_tolerance && viol <= config.feasibility_tolerance {
            status = SolverStatus::Converged;
            break;
        }

        // Barrier subproblem convergence measure.
        let comp_mu = {
            let mut m = 0.0f64;
            for i in 0..m_in {
                m = m.max((s[i] * lam[i] - mu).abs());
            }
            for i in 0..n {
                if ws.lb_relaxed[i].is_finite() {
                    m = m.max(((z[i] - ws.lb_relaxed[i]) * zl[i] - mu).abs());
                }
                if ws.ub_relaxed[i].is_finite() {
                    m = m.max(((ws.ub_relaxed[i] - z[i]) * zu[i] - mu).abs());
                }
            }
            m
        };
        let e_mu = linf(&rd).max(viol).max(comp_mu);
        let mut event = false;
        if e_mu <= 10.0 * mu && mu > mu_min {
            mu = (0.2 * mu).min(mu.powf(1.5)).max(mu_min);
            event = true;
        }
        if mu <= mu_min * (1.0 + 1e-12) && e_mu <= 10.0 * mu_min && viol > config.feasibility_tolerance
        {
            status = SolverStatus::Infeasible;
            break;
        }

        // Assemble the condensed primal-dual system over (dz, dy).
        let sig_s: Vec<f64> = (0..m_in).map(|i| lam[i] / s[i]).collect();
        let mut rhs = vec![0.0; n + m_eq];
        for i in 0..n {
            let mut r = -gz[i];
            if ws.lb_relaxed[i].is_finite() {
                r += mu / (z[i] - ws.lb_relaxed[i]);
            }
            if ws.ub_relaxed[i].is_finite() {
                r -= mu / (ws.ub_relaxed[i] - z[i]);
            }
            rhs[i] = r;
        }
        for &(r, col, v) in &a_trip {
            rhs[col] -= v * y[r];
        }
        // J^T (mu / s) - J^T Sigma_s r_cs
        for &(r, col, v) in &j_trip {
            rhs[col] += v * (mu / s[r] - sig_s[r] * r_cs[r]);
        }
        for r in 0..m_eq {
            rhs[n + r] = -h[r];
        }

        // Group inequality Jacobian rows for the rank-one barrier terms.
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m_in];
        for &(r, col, v) in &j_trip {
            rows[r].push((col, v));
        }

        let delta_c = 1e-8;
        let mut delta_p = delta_p_suggest;
        let mut factored = false;
        let mut tries = 0;
        let mut pb = vec![0.0; n + m_eq];
        // Step size cap: a well-posed Newton direction never needs to move
        // this far, so a larger step signals a near-singular reduced Hessian
        // that passed the inertia check. Regularize and refactor.
        let step_cap = 1e4 * (1.0 + linf(&z));
        while !factored && tries < 40 {
            tries += 1;
            band.clear();
            for &(i, j, v) in &h_trip {
                band.add(ws.perm[i], ws.perm[j], v);
            }
            for i in 0..n {
                let mut diag = delta_p;
                if ws.lb_relaxed[i].is_finite() {
                    diag += zl[i] / (z[i] - ws.lb_relaxed[i]);
                }
                if ws.ub_relaxed[i].is_finite() {
                    diag += zu[i] / (ws.ub_relaxed[i] - z[i]);
                }
                band.add(ws.perm[i], ws.perm[i], diag);
            }
            for (r, cols) in rows.iter().enumerate() {
                let srow = sig_s[r];
                for a in 0..cols.len() {
                    for b in 0..=a {
                        band.add(
                            ws.perm[cols[a].0],
                            ws.perm[cols[b].0],
                            srow * cols[a].1 * cols[b].1,
                        );
                    }
                }
            }
            for &(r, col, v) in &a_trip {
                band.add(ws.perm[n + r], ws.perm[col], v);
            }
            for r in 0..m_eq {
                band.add(ws.perm[n + r], ws.perm[n + r], -delta_c);
            }
            band_raw.data.copy_from_slice(&band.data);
            let escalate = |delta_p: f64, delta_p_last: f64| -> f64 {
                if delta_p == 0.0 {
                    if delta_p_last == 0.0 {
                        config.regularization_floor.max(1e-8)
                    } else {
                        (delta_p_last / 3.0).max(config.regularization_floor)
                    }
                } else {
                    delta_p * 8.0
                }
            };
            match band.factor_ldlt(&mut dvec) {
                Some((pos, neg)) if pos == n && neg == m_eq => {
                    for i in 0..n + m_eq {
                        pb[ws.perm[i]] = rhs[i];
                    }
                    let prhs = pb.clone();
                    band.solve(&dvec, &mut pb);
                    // Iterative refinement. The recovered inequality duals
                    // scale the linear-solve error by lambda/s, which gets
                    // huge near convergence, so correction rounds buy real
                    // accuracy.
                    let mut resid = vec![0.0; n + m_eq];
                    let mut prod = vec![0.0; n + m_eq];
                    for _ in 0..2 {
                        band_raw.mult(&pb, &mut prod);
                        for i in 0..n + m_eq {
                            resid[i] = prhs[i] - prod[i];
                        }
                        if linf(&resid) <= 1e-14 * (1.0 + linf(&prhs)) {
                            break;
                        }
                        band.solve(&dvec, &mut resid);
                        for i in 0..n + m_eq {
                            pb[i] += resid[i];
                        }
                    }
                    if linf(&pb) <= step_cap {
                        factored = true;
                    } else {
                        delta_p = escalate(delta_p, delta_p_last);
                        event = true;
                    }
                }
                _ => {
                    delta_p = escalate(delta_p, delta_p_last);
                    event = true;
                }
            }
        }
        if !factored {
            status = SolverStatus::NumericalFailure;
            break;
        }
        if delta_p > 0.0 {
            delta_p_last = delta_p;
        }

        let mut dz = vec![0.0; n];
        let mut dy = vec![0.0; m_eq];
        for i in 0..n {
            dz[i] = pb[ws.perm[i]];
        }
        for r in 0..m_eq {
            dy[r] = pb[ws.perm[n + r]];
        }

        // Recover slack and dual steps.
        let mut ds = r_cs.clone();
        for &(r, col, v) in &j_trip {
            ds[r] += v * dz[col];
        }
        let dlam: Vec<f64> = (0..m_in)
            .map(|i| mu / s[i] - lam[i] - sig_s[i] * ds[i])
            .collect();
        let dzl: Vec<f64> = (0..n)
            .map(|i| {
                if ws.lb_relaxed[i].is_finite() {
                    let gap = z[i] - ws.lb_relaxed[i];
                    mu / gap - zl[i] - zl[i] / gap * dz[i]
                } else {
                    0.0
                }
            })
            .collect();
        let dzu: Vec<f64> = (0..n)
            .map(|i| {
                if ws.ub_relaxed[i].is_finite() {
                    let gap = ws.ub_relaxed[i] - z[i];
                    mu / gap - zu[i] + zu[i] / gap * dz[i]
                } else {
                    0.0
                }
            })
            .collect();

        // Fraction-to-boundary step limits.
        let tau = 0.99f64.max(1.0 - mu);
        let mut alpha_p = 1.0f64;
        for i in 0..m_in {
            if ds[i] < 0.0 {
                alpha_p = alpha_p.min(-tau * s[i] / ds[i]);
            }
        }
        for i in 0..n {
            if ws.lb_relaxed[i].is_finite() && dz[i] < 0.0 {
                alpha_p = alpha_p.min(-tau * (z[i] - ws.lb_relaxed[i]) / dz[i]);
            }
            if ws.ub_relaxed[i].is_finite() && dz[i] > 0.0 {
                alpha_p = alpha_p.min(tau * (ws.ub_relaxed[i] - z[i]) / dz[i]);
            }
        }
        if std::env::var_os("MPCC_NLP_DEBUG").is_some() {
            let mut worst = (1.0f64, usize::MAX, true);
            for i in 0..m_in {
                if ds[i] < 0.0 {
                    let a = -tau * s[i] / ds[i];
                    if a < worst.0 {
                        worst = (a, i, false);
                    }
                }
            }
            for i in 0..n {
                if ws.lb_relaxed[i].is_finite() && dz[i] < 0.0 {
                    let a = -tau * (z[i] - ws.lb_relaxed[i]) / dz[i];
                    if a < worst.0 {
                        worst = (a, i, true);
                    }
                }
                if ws.ub_relaxed[i].is_finite() && dz[i] > 0.0 {
                    let a = tau * (ws.ub_relaxed[i] - z[i]) / dz[i];
                    if a < worst.0 {
                        worst = (a, i, true);
                    }
                }
            }
            eprintln!(
                "iter {iter}: alpha_p {:.3e} blocked by {} {} (|dz| {:.3e})",
                worst.0,
                if worst.2 { "var" } else { "slack" },
                worst.1,
                linf(&dz)
            );
        }
        let mut alpha_d = 1.0f64;
        for i in 0..m_in {
            if dlam[i] < 0.0 {
                alpha_d = alpha_d.min(-tau * lam[i] / dlam[i]);
            }
        }
        for i in 0..n {
            if dzl[i] < 0.0 && zl[i] > 0.0 {
                alpha_d = alpha_d.min(-tau * zl[i] / dzl[i]);
            }
            if dzu[i] < 0.0 && zu[i] > 0.0 {
                alpha_d = alpha_d.min(tau * -zu[i] / dzu[i]);
            }
        }

        // Merit function and its directional derivative. The penalty tracks
        // the updated multiplier estimates, not the raw step magnitudes:
        // early steps can carry wild dy/dlam that would ratchet nu so high
        // the Armijo test never accepts a useful step again. Letting nu come
        // back down once the multipliers settle keeps the line search honest.
        let mut dual_est = 0.0f64;
        for i in 0..m_eq {
            dual_est = dual_est.max((y[i] + dy[i]).abs());
        }
        for i in 0..m_in {
            dual_est = dual_est.max((lam[i] + dlam[i]).abs());
        }
        let nu_required = (dual_est * 1.1 + 1.0).min(1e8);
        if nu_required > nu {
            nu = nu_required;
            event = true;
        } else if nu > 10.0 * nu_required {
            nu = 2.0 * nu_required;
            event = true;
        }
        let viol_l1 = l1(&h) + l1(&r_cs);
        let merit0 = f_val + barrier_value(&z, &s, &ws, mu) + nu * viol_l1;
        let mut d_smooth = 0.0;
        for i in 0..n {
            let mut g = gz[i];
            if ws.lb_relaxed[i].is_finite() {
                g -= mu / (z[i] - ws.lb_relaxed[i]);
            }
            if ws.ub_relaxed[i].is_finite() {
                g += mu / (ws.ub_relaxed[i] - z[i]);
            }
            d_smooth += g * dz[i];
        }
        for i in 0..m_in {
            d_smooth -= mu / s[i] * ds[i];
        }
        let dphi = d_smooth - nu * viol_l1;

        let mut alpha = alpha_p;
        let mut accepted = false;
        let mut z_new = z.clone();
        let mut s_new = s.clone();
        let mut merit_new = merit0;
        if dphi >= 0.0 {
            // Not a descent direction for the merit; take the safeguarded full
            // step and flag the event.
            event = true;
        }
        let mut backtracks = 0;
        while backtracks < 40 {
            for i in 0..n {
                z_new[i] = z[i] + alpha * dz[i];
            }
            for i in 0..m_in {
                s_new[i] = s[i] + alpha * ds[i];
            }
            let f_t = sigma * problem.objective(&z_new);
            let mut h_t = vec![0.0; m_eq];
            problem.eq_constraints(&z_new, &mut h_t);
            let mut c_t = vec![0.0; m_in];
            problem.ineq_constraints(&z_new, &mut c_t);
            let finite = f_t.is_finite()
                && h_t.iter().all(|v| v.is_finite())
                && c_t.iter().all(|v| v.is_finite());
            if finite {
                let viol_t: f64 = l1(&h_t)
                    + (0..m_in).map(|i| (c_t[i] - s_new[i]).abs()).sum::<f64>();
                merit_new = f_t + barrier_value(&z_new, &s_new, &ws, mu) + nu * viol_t;
                let target = if dphi < 0.0 {
                    merit0 + config.ls_armijo * alpha * dphi
                } else {
                    merit0 + 1e-9 * merit0.abs().max(1.0)
                };
                if merit_new <= target {
                    accepted = true;
                    break;
                }
                if backtracks == 0 && dphi < 0.0 {
                    // Second-order corrections. Near the solution nu matches
                    // the true multiplier scale, so the quadratic growth of
                    // |h| along a full step can outweigh the first-order
                    // merit decrease (the Maratos effect) and stall the line
                    // search on otherwise excellent steps. Re-solving against
                    // the constraint values at the trial point removes the
                    // second-order violation; each round reuses the existing
                    // factorization. Large steps can need more than one round
                    // before the residual drops below the merit margin, so
                    // keep correcting while the violation shrinks fast.
                    let mut z_soc = z_new.clone();
                    let mut s_soc = s_new.clone();
                    let mut h_soc = h_t.clone();
                    let mut c_soc = c_t.clone();
                    let mut viol_prev = viol_t;
                    for _round in 0..4 {
                        let r_cs_t: Vec<f64> =
                            (0..m_in).map(|i| c_soc[i] - s_soc[i]).collect();
                        let mut rhs_soc = vec![0.0; n + m_eq];
                        for &(r, col, v) in &j_trip {
                            rhs_soc[col] -= v * sig_s[r] * r_cs_t[r];
                        }
                        for r in 0..m_eq {
                            rhs_soc[n + r] = -h_soc[r];
                        }
                        let mut pb2 = vec![0.0; n + m_eq];
                        for i in 0..n + m_eq {
                            pb2[ws.perm[i]] = rhs_soc[i];
                        }
                        band.solve(&dvec, &mut pb2);
                        for i in 0..n {
                            z_soc[i] += pb2[ws.perm[i]];
                        }
                        for i in 0..m_in {
                            s_soc[i] += r_cs_t[i];
                        }
                        for &(r, col, v) in &j_trip {
                            s_soc[r] += v * pb2[ws.perm[col]];
                        }
                        let mut interior = true;
                        for i in 0..n {
                            if ws.lb_relaxed[i].is_finite()
                                && z_soc[i] - ws.lb_relaxed[i]
                                    < (1.0 - tau) * (z[i] - ws.lb_relaxed[i])
                            {
                                interior = false;
                            }
                            if ws.ub_relaxed[i].is_finite()
                                && ws.ub_relaxed[i] - z_soc[i]
                                    < (1.0 - tau) * (ws.ub_relaxed[i] - z[i])
                            {
                                interior = false;
                            }
                        }
                        for i in 0..m_in {
                            if s_soc[i] < (1.0 - tau) * s[i] {
                                interior = false;
                            }
                        }
                        if !interior {
                            break;
                        }
                        let f_soc = sigma * problem.objective(&z_soc);
                        problem.eq_constraints(&z_soc, &mut h_soc);
                        problem.ineq_constraints(&z_soc, &mut c_soc);
                        let finite_soc = f_soc.is_finite()
                            && h_soc.iter().all(|v| v.is_finite())
                            && c_soc.iter().all(|v| v.is_finite());
                        if !finite_soc {
                            break;
                        }
                        let viol_soc: f64 = l1(&h_soc)
                            + (0..m_in).map(|i| (c_soc[i] - s_soc[i]).abs()).sum::<f64>();
                        let merit_soc =
                            f_soc + barrier_value(&z_soc, &s_soc, &ws, mu) + nu * viol_soc;
                        if merit_soc <= merit0 + config.ls_armijo * alpha * dphi {
                            z_new = z_soc.clone();
                            s_new = s_soc.clone();
                            merit_new = merit_soc;
                            accepted = true;
                            break;
                        }
                        if viol_soc > 0.5 * viol_prev {
                            // Corrections are no longer paying off.
                            break;
                        }
                        viol_prev = viol_soc;
                    }
                    if accepted {
                        break;
                    }
                }
            }
            alpha *= config.ls_shrink;
            backtracks += 1;
        }

        if !accepted {
            // Restoration-ish reset: bump regularization, re-center duals.
            delta_p_last = (delta_p_last.max(config.regularization_floor)) * 100.0;
            delta_p_suggest = (delta_p.max(config.regularization_floor) * 100.0).min(1e6);
            for i in 0..m_in {
                lam[i] = (mu / s[i]).clamp(1e-8, 1e8);
            }
            stall_count += 1;
            if stall_count >= 5 {
                status = if viol > config.feasibility_tolerance {
                    SolverStatus::Infeasible
                } else {
                    SolverStatus::NumericalFailure
                };
                break;
            }
            records.push(IterRecord {
                merit_pre: merit0,
                merit_post: merit0,
                kkt: kkt_scaled,
                alpha: 0.0,
                mu,
                event: true,
            });
            continue;
        }
        if alpha * linf(&dz) < 1e-12 && viol > config.feasibility_tolerance {
            stall_count += 1;
            if stall_count >= 5 {
                status = SolverStatus::Infeasible;
                break;
            }
        } else {
            stall_count = 0;
        }

        if std::env::var_os("MPCC_NLP_DEBUG").is_some() {
            eprintln!(
                "iter {iter}: rd {:.3e} viol {:.3e} comp {:.3e} alpha {alpha:.3e} alpha_d {alpha_d:.3e} dp {delta_p:.3e} |dz| {:.3e} nu {nu:.3e} dphi {dphi:.3e} sigma {sigma:.3e} mu {mu:.3e}",
                linf(&rd) / sigma,
                viol,
                comp0 / sigma,
                linf(&dz)
            );
        }
        // Adapt the damping to the achieved step length, relative to what the
        // fraction-to-boundary rule allowed: only a line-search cut signals
        // that the quadratic model overshot. A boundary-limited step says
        // nothing about the model quality.
        if alpha < 0.05 * alpha_p {
            delta_p_suggest = (delta_p.max(config.regularization_floor) * 10.0).min(1e6);
            event = true;
        } else if alpha >= 0.25 * alpha_p && delta_p_suggest > 0.0 {
            delta_p_suggest /= if alpha > 0.9 { 10.0 } else { 2.0 };
            if delta_p_suggest < config.regularization_floor {
                delta_p_suggest = 0.0;
            }
        }

        // Accept the step.
        z = z_new.clone();
        s = s_new.clone();
        for r in 0..m_eq {
            y[r] += alpha * dy[r];
        }
        for i in 0..m_in {
            lam[i] = (lam[i] + alpha_d * dlam[i]).max(0.0);
        }
        for i in 0..n {
            zl[i] = (zl[i] + alpha_d * dzl[i]).max(0.0);
            zu[i] = (zu[i] + alpha_d * dzu[i]).max(0.0);
        }
        // Dual safeguard keeps multipliers compatible with the barrier.
        for i in 0..m_in {
            let center = mu / s[i];
            lam[i] = lam[i].clamp(center / SIGMA_MAX_DUAL, center * SIGMA_MAX_DUAL);
        }
        for i in 0..n {
            if ws.lb_relaxed[i].is_finite() {
                let center = mu / (z[i] - ws.lb_relaxed[i]);
                zl[i] = zl[i].clamp(center / SIGMA_MAX_DUAL, center * SIGMA_MAX_DUAL);
            }
            if ws.ub_relaxed[i].is_finite() {
                let center = mu / (ws.ub_relaxed[i] - z[i]);
                zu[i] = zu[i].clamp(center / SIGMA_MAX_DUAL, center * SIGMA_MAX_DUAL);
            }
        }

        records.push(IterRecord {
            merit_pre: merit0,
            merit_post: merit_new,
            kkt: kkt_scaled,
            alpha,
            mu,
            event,
        });
        if let Some(w) = log.as_mut() {
            writeln!(
                w,
                "{iter} merit={merit_new:.9e} kkt={kkt_scaled:.3e} alpha={alpha:.3e} mu={mu:.3e}"
            )?;
        }
        let _ = kkt_scaled;
    }

    // Final diagnostics on the original (unscaled) problem.
    let multipliers = Multipliers {
        eq: y.iter().map(|v| v / sigma).collect(),
        ineq: lam.iter().map(|v| v / sigma).collect(),
        lower: zl.iter().map(|v| v / sigma).collect(),
        upper: zu.iter().map(|v| v / sigma).collect(),
    };
    let kkt_final = kkt_residual(problem, &z, &multipliers)?;
    let violation = {
        let mut h = vec![0.0; m_eq];
        problem.eq_constraints(&z, &mut h);
        let mut c = vec![0.0; m_in];
        problem.ineq_constraints(&z, &mut c);
        let ineq_viol = c.iter().fold(0.0f64, |m, &v| m.max((-v).max(0.0)));
        linf(&h).max(ineq_viol)
    };
    if status == SolverStatus::Converged
        && !(kkt_final <= config.kkt_tolerance * 1.01
            && violation <= config.feasibility_tolerance * 1.01)
    {
        status = SolverStatus::MaxIterations;
    }
    Ok(SolverResult {
        decision_vector: z,
        status,
        kkt_residual: kkt_final,
        constraint_violation: violation,
        iterations: iter,
        wall_time: t0.elapsed().as_secs_f64(),
        multipliers,
        iteration_records: records,
    })
}

/// Max-norm KKT residual (stationarity, complementarity, feasibility) of a
/// primal-dual point for the original problem.
pub fn kkt_residual(
    problem: &dyn NlpProblem,
    point: &[f64],
    multipliers: &Multipliers,
) -> Result<f64> {
    let n = problem.n_vars();
    let m_eq = problem.n_eq();
    let m_in = problem.n_ineq();
    if point.len() != n
        || multipliers.eq.len() != m_eq
        || multipliers.ineq.len() != m_in
        || multipliers.lower.len() != n
        || multipliers.upper.len() != n
    {
        return Err(Error::DimensionMismatch("kkt_residual input sizes".into()));
    }
    let (lb, ub) = problem.bounds();
    let mut rd = vec![0.0; n];
    problem.objective_grad(point, &mut rd);
    for (r, col, v) in problem.eq_jacobian(point) {
        rd[col] += v * multipliers.eq[r];
    }
    for (r, col, v) in problem.ineq_jacobian(point) {
        rd[col] -= v * multipliers.ineq[r];
    }
    for i in 0..n {
        rd[i] += multipliers.upper[i] - multipliers.lower[i];
    }
    let mut h = vec![0.0; m_eq];
    problem.eq_constraints(point, &mut h);
    let mut c = vec![0.0; m_in];
    problem.ineq_constraints(point, &mut c);
    let mut res = linf(&rd).max(linf(&h));
    for i in 0..m_in {
        res = res.max((-c[i]).max(0.0));
        res = res.max((multipliers.ineq[i] * c[i]).abs());
    }
    for i in 0..n {
        if lb[i].is_finite() {
            res = res.max((multipliers.lower[i] * (point[i] - lb[i])).abs());
        }
        if ub[i].is_finite() {
            res = res.max((multipliers.upper[i] * (ub[i] - point[i])).abs());
        }
    }
    Ok(res)
}

/// Central finite-difference check of the problem derivatives at a point.
pub fn check_derivatives(problem: &dyn NlpProblem, point: &[f64]) -> DerivativeReport {
    let n = problem.n_vars();
    let m_eq = problem.n_eq();
    let m_in = problem.n_ineq();
    let hstep = 1e-6;
    let mut grad = vec![0.0; n];
    problem.objective_grad(point, &mut grad);
    let mut eq_dense = vec![vec![0.0; n]; m_eq];
    for (r, c, v) in problem.eq_jacobian(point) {
        eq_dense[r][c] += v;
    }
    let mut in_dense = vec![vec![0.0; n]; m_in];
    for (r, c, v) in problem.ineq_jacobian(point) {
        in_dense[r][c] += v;
    }
    let mut zp = point.to_vec();
    let (mut e_obj, mut e_eq, mut e_in) = (0.0f64, 0.0f64, 0.0f64);
    let rel = |a: f64, fd: f64| (a - fd).abs() / fd.abs().max(1.0);
    let mut h_p = vec![0.0; m_eq];
    let mut h_m = vec![0.0; m_eq];
    let mut c_p = vec![0.0; m_in];
    let mut c_m = vec![0.0; m_in];
    for j in 0..n {
        zp[j] = point[j] + hstep;
        let fp = problem.objective(&zp);
        problem.eq_constraints(&zp, &mut h_p);
        problem.ineq_constraints(&zp, &mut c_p);
        zp[j] = point[j] - hstep;
        let fm = problem.objective(&zp);
        problem.eq_constraints(&zp, &mut h_m);
        problem.ineq_constraints(&zp, &mut c_m);
        zp[j] = point[j];
        e_obj = e_obj.max(rel(grad[j], (fp - fm) / (2.0 * hstep)));
        for r in 0..m_eq {
            e_eq = e_eq.max(rel(eq_dense[r][j], (h_p[r] - h_m[r]) / (2.0 * hstep)));
        }
        for r in 0..m_in {
            e_in = e_in.max(rel(in_dense[r][j], (c_p[r] - c_m[r]) / (2.0 * hstep)));
        }
    }
    DerivativeReport { objective_grad: e_obj, eq_jacobian: e_eq, ineq_jacobian: e_in }
}
