//! Contouring-control OCP assembly.
//!
//! Builds the trajectory optimization problem over a receding horizon: a
//! multiple-shooting transcription with per-anchor contour/lag tracking costs,
//! a progress reward, corridor and lateral-acceleration inequalities, and
//! simple bounds. The result is a generic [`nlp::NlpProblem`] so the solver
//! stays ignorant of vehicles and paths.

use crate::error::{Error, Result};
use crate::nlp::{self, SolverResult, SolverStatus, Triplets};
use crate::path::{Corridor, ReferencePath};
use crate::vehicle::{
    anchor_positions, rk4_vec, rk4_with_jacobian, ControlInput, InputVec, StateVec, VehicleParams,
    VehicleState, N_ANCHORS, NU, NX,
};

/// Cost weights. `qc`/`ql`/`qv` are per anchor (front axle, rear axle,
/// semitrailer axle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub qc: [f64; N_ANCHORS],
    pub ql: [f64; N_ANCHORS],
    pub qv: [f64; N_ANCHORS],
    pub qa: f64,
    pub qdelta: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            qc: [5.0, 5.0, 100.0],
            ql: [5000.0, 5000.0, 5000.0],
            qv: [1.0, 1.0, 1.0],
            qa: 1.0,
            qdelta: 10.0,
        }
    }
}

/// State and input limits. Velocities are signed, so reverse driving uses
/// `v_min < v_max <= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub delta_max: f64,
    pub ddelta_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub ay_max: f64,
}

impl Limits {
    /// Forward-driving limits: v in [0, 15] km/h.
    pub fn forward() -> Self {
        Self {
            delta_max: 40.0_f64.to_radians(),
            ddelta_max: 20.0_f64.to_radians(),
            v_min: 0.0,
            v_max: 15.0 / 3.6,
            a_max: 0.5,
            ay_max: 1.5,
        }
    }

    /// Reverse-driving limits: v in [-5, 0] km/h.
    pub fn reverse() -> Self {
        Self {
            v_min: -5.0 / 3.6,
            v_max: 0.0,
            ..Self::forward()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_max > 0.0 && self.delta_max < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Validation("delta_max must lie in (0, pi/2)".into()));
        }
        if !(self.ddelta_max > 0.0) {
            return Err(Error::Validation("ddelta_max must be positive".into()));
        }
        if !(self.v_min <= self.v_max) {
            return Err(Error::Validation("v_min must not exceed v_max".into()));
        }
        if !(self.a_max > 0.0 && self.ay_max > 0.0) {
            return Err(Error::Validation("a_max and ay_max must be positive".into()));
        }
        Ok(())
    }

    /// Largest progress speed; the path is parameterized along the direction
    /// of travel, so progress velocities are nonnegative in both directions.
    pub fn vtheta_max(&self) -> f64 {
        self.v_max.max(-self.v_min)
    }
}

/// Complete problem definition for one receding-horizon solve.
#[derive(Debug, Clone)]
pub struct OcpDefinition {
    pub n: usize,
    pub dt: f64,
    pub weights: Weights,
    pub limits: Limits,
    pub params: VehicleParams,
    pub path: ReferencePath,
    pub corridor: Corridor,
    /// Which anchors participate in the cost and corridor constraints.
    pub anchor_mask: [bool; N_ANCHORS],
    /// Optional uniform corridor slack with this objective weight; hard
    /// constraints when `None`.
    pub corridor_slack_weight: Option<f64>,
}

impl OcpDefinition {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Validation("horizon must have at least one step".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Validation("dt must be positive".into()));
        }
        self.params.validate()?;
        self.limits.validate()?;
        self.corridor.validate_width(self.params.width)?;
        for i in 0..N_ANCHORS {
            let w = &self.weights;
            if w.qc[i] < 0.0 || w.ql[i] < 0.0 || w.qv[i] < 0.0 || w.qa < 0.0 || w.qdelta < 0.0 {
                return Err(Error::Validation("weights must be nonnegative".into()));
            }
            if self.anchor_mask[i] && !(w.ql[i] > 0.0) {
                return Err(Error::Validation(format!(
                    "active anchor {i} needs a positive lag weight"
                )));
            }
        }
        if !self.anchor_mask.iter().any(|&m| m) {
            return Err(Error::Validation("at least one anchor must be active".into()));
        }
        Ok(())
    }

    /// Prediction time N * dt.
    pub fn horizon_time(&self) -> f64 {
        self.n as f64 * self.dt
    }

    pub fn active_anchors(&self) -> Vec<usize> {
        (0..N_ANCHORS).filter(|&i| self.anchor_mask[i]).collect()
    }
}

/// Contour/lag error pair at one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorPair {
    pub ec: f64,
    pub el: f64,
}

/// Solved trajectory with per-stage diagnostics. Errors are recorded for all
/// three anchors regardless of the mask.
#[derive(Debug, Clone)]
pub struct PlannedTrajectory {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    pub errors: Vec<[ErrorPair; N_ANCHORS]>,
    pub objective_value: f64,
    pub solver_status: SolverStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_time: f64,
}

/// Rotated-residual contour and lag errors of a point against the path frame
/// at arc length `theta`. `ec` is positive left of the tangent.
pub fn contour_lag_errors(path: &ReferencePath, point: (f64, f64), theta: f64) -> ErrorPair {
    let r = path.eval(theta);
    let dx = point.0 - r.x;
    let dy = point.1 - r.y;
    let (sp, cp) = r.psi.sin_cos();
    ErrorPair {
        ec: -dx * sp + dy * cp,
        el: dx * cp + dy * sp,
    }
}

/// Tracking cost of one stage: masked sum of weighted squared errors.
pub fn stage_tracking_cost(def: &OcpDefinition, state: &VehicleState) -> f64 {
    let anchors = anchor_positions(&def.params, state);
    let mut cost = 0.0;
    for i in 0..N_ANCHORS {
        if !def.anchor_mask[i] {
            continue;
        }
        let e = contour_lag_errors(&def.path, anchors.get(i), state.theta[i]);
        cost += def.weights.qc[i] * e.ec * e.ec + def.weights.ql[i] * e.el * e.el;
    }
    cost
}

/// Progress reward of one stage (negative cost).
pub fn progress_reward(def: &OcpDefinition, input: &ControlInput) -> f64 {
    let mut r = 0.0;
    for i in 0..N_ANCHORS {
        if def.anchor_mask[i] {
            r -= def.weights.qv[i] * input.vtheta[i];
        }
    }
    r
}

/// Comfort cost of one stage; progress velocities are unpenalized.
pub fn comfort_cost(def: &OcpDefinition, input: &ControlInput) -> f64 {
    def.weights.qa * input.a1 * input.a1 + def.weights.qdelta * input.ddelta0 * input.ddelta0
}

/// Corridor inequality residuals per active anchor, `(lower, upper)`;
/// feasible iff both are nonnegative.
pub fn corridor_residuals(def: &OcpDefinition, state: &VehicleState) -> Vec<(f64, f64)> {
    let anchors = anchor_positions(&def.params, state);
    let half_w = 0.5 * def.params.width;
    def.active_anchors()
        .iter()
        .map(|&i| {
            let e = contour_lag_errors(&def.path, anchors.get(i), state.theta[i]);
            let (bl, br, _, _) = def.corridor.eval_smooth(state.theta[i]);
            (e.ec - br - half_w, bl - half_w - e.ec)
        })
        .collect()
}

/// Lateral-acceleration inequality residuals `(ay_max - ay, ay_max + ay)`.
pub fn lateral_accel_residual(def: &OcpDefinition, state: &VehicleState) -> Result<(f64, f64)> {
    let ay = crate::vehicle::lateral_acceleration(&def.params, state)?;
    Ok((def.limits.ay_max - ay, def.limits.ay_max + ay))
}

// ---------------------------------------------------------------------------
// NLP transcription.
// ---------------------------------------------------------------------------

/// The assembled NLP over `(x_0..x_N, u_0..u_{N-1}[, slack])`.
pub struct OcpNlp<'a> {
    def: &'a OcpDefinition,
    x0: StateVec,
    guess: Vec<f64>,
}

impl<'a> OcpNlp<'a> {
    pub fn initial_guess(&self) -> &[f64] {
        &self.guess
    }

    fn n_states_flat(&self) -> usize {
        (self.def.n + 1) * NX
    }

    fn state_idx(&self, j: usize, k: usize) -> usize {
        j * NX + k
    }

    fn input_idx(&self, j: usize, k: usize) -> usize {
        self.n_states_flat() + j * NU + k
    }

    fn slack_idx(&self) -> Option<usize> {
        self.def
            .corridor_slack_weight
            .map(|_| self.n_states_flat() + self.def.n * NU)
    }

    fn state_at(&self, z: &[f64], j: usize) -> VehicleState {
        let b = j * NX;
        VehicleState {
            x1: z[b],
            y1: z[b + 1],
            psi1: z[b + 2],
            psi2: z[b + 3],
            v1: z[b + 4],
            delta0: z[b + 5],
            theta: [z[b + 6], z[b + 7], z[b + 8]],
        }
    }

    fn state_vec_at(&self, z: &[f64], j: usize) -> StateVec {
        StateVec::from_column_slice(&z[j * NX..(j + 1) * NX])
    }

    fn input_vec_at(&self, z: &[f64], j: usize) -> InputVec {
        let b = self.input_idx(j, 0);
        InputVec::from_column_slice(&z[b..b + NU])
    }

    /// Rows of inequality constraints contributed by each stage.
    fn ineq_rows_per_stage(&self) -> usize {
        2 * self.def.active_anchors().len() + 2
    }

    /// Error values plus derivatives with respect to the five state entries
    /// that influence anchor `i`: (x1, y1, psi1, psi2, theta_i).
    fn anchor_error_jacobian(
        &self,
        state: &VehicleState,
        i: usize,
    ) -> (ErrorPair, [f64; 5], [f64; 5]) {
        let p = &self.def.params;
        let anchors = anchor_positions(p, state);
        let pos = anchors.get(i);
        let r = self.def.path.eval(state.theta[i]);
        let (sp, cp) = r.psi.sin_cos();
        let dx = pos.0 - r.x;
        let dy = pos.1 - r.y;
        let ec = -dx * sp + dy * cp;
        let el = dx * cp + dy * sp;
        // Position sensitivities of the anchor.
        let (s1, c1) = state.psi1.sin_cos();
        let (s2, c2) = state.psi2.sin_cos();
        let (dp_dpsi1, dp_dpsi2): ((f64, f64), (f64, f64)) = match i {
            0 => ((-p.l1 * s1, p.l1 * c1), (0.0, 0.0)),
            1 => ((0.0, 0.0), (0.0, 0.0)),
            _ => ((-p.l1b * s1, p.l1b * c1), (p.l2 * s2, -p.l2 * c2)),
        };
        // Frame derivatives along theta for a unit-speed path.
        let kappa = r.curvature;
        let dec = [
            -sp,
            cp,
            -dp_dpsi1.0 * sp + dp_dpsi1.1 * cp,
            -dp_dpsi2.0 * sp + dp_dpsi2.1 * cp,
            -kappa * el,
        ];
        let del = [
            cp,
            sp,
            dp_dpsi1.0 * cp + dp_dpsi1.1 * sp,
            dp_dpsi2.0 * cp + dp_dpsi2.1 * sp,
            kappa * ec - 1.0,
        ];
        (ErrorPair { ec, el }, dec, del)
    }
}

/// Builds the NLP for one solve from the initial state and an optional warm
/// start.
pub fn assemble_nlp<'a>(
    def: &'a OcpDefinition,
    x0: &VehicleState,
    guess: Option<&PlannedTrajectory>,
) -> Result<OcpNlp<'a>> {
    def.validate()?;
    let x0v = x0.to_vec();
    if !x0v.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("initial state must be finite".into()));
    }
    let guess_vec = match guess {
        Some(t) => {
            let mut z = pack_trajectory(def, &t.states, &t.inputs)?;
            if def.corridor_slack_weight.is_some() {
                z.push(0.0);
            }
            z
        }
        None => {
            // Cold start: hold the initial state; the solver discovers motion.
            let n = def.n;
            let mut z = Vec::with_capacity((n + 1) * NX + n * NU);
            for _ in 0..=n {
                z.extend_from_slice(x0v.as_slice());
            }
            z.extend(std::iter::repeat(0.0).take(n * NU));
            if def.corridor_slack_weight.is_some() {
                z.push(0.0);
            }
            z
        }
    };
    Ok(OcpNlp { def, x0: x0v, guess: guess_vec })
}

/// Stacks states and inputs into a decision vector (without slack).
pub fn pack_trajectory(
    def: &OcpDefinition,
    states: &[VehicleState],
    inputs: &[ControlInput],
) -> Result<Vec<f64>> {
    if states.len() != def.n + 1 || inputs.len() != def.n {
        return Err(Error::DimensionMismatch(format!(
            "trajectory has {} states / {} inputs, horizon needs {} / {}",
            states.len(),
            inputs.len(),
            def.n + 1,
            def.n
        )));
    }
    let mut z = Vec::with_capacity((def.n + 1) * NX + def.n * NU);
    for s in states {
        z.extend_from_slice(s.to_vec().as_slice());
    }
    for u in inputs {
        z.extend_from_slice(u.to_vec().as_slice());
    }
    Ok(z)
}

/// Unpacks a solver result into a trajectory with recomputed diagnostics.
pub fn extract_trajectory(
    def: &OcpDefinition,
    solution: &SolverResult,
) -> Result<PlannedTrajectory> {
    let n_base = (def.n + 1) * NX + def.n * NU;
    let n_expected = n_base + usize::from(def.corridor_slack_weight.is_some());
    if solution.decision_vector.len() != n_expected {
        return Err(Error::DimensionMismatch(format!(
            "solution has {} variables, expected {n_expected}",
            solution.decision_vector.len()
        )));
    }
    let z = &solution.decision_vector;
    let mut states = Vec::with_capacity(def.n + 1);
    for j in 0..=def.n {
        let b = j * NX;
        states.push(VehicleState::from_vec(&StateVec::from_column_slice(&z[b..b + NX])));
    }
    let mut inputs = Vec::with_capacity(def.n);
    for j in 0..def.n {
        let b = (def.n + 1) * NX + j * NU;
        inputs.push(ControlInput::from_vec(&InputVec::from_column_slice(&z[b..b + NU])));
    }
    let errors = states
        .iter()
        .map(|s| {
            let anchors = anchor_positions(&def.params, s);
            std::array::from_fn(|i| contour_lag_errors(&def.path, anchors.get(i), s.theta[i]))
        })
        .collect();
    let mut objective_value = 0.0;
    for s in states.iter().skip(1) {
        objective_value += stage_tracking_cost(def, s);
    }
    for u in &inputs {
        objective_value += progress_reward(def, u) + comfort_cost(def, u);
    }
    if let Some(w) = def.corridor_slack_weight {
        objective_value += w * z[n_base];
    }
    Ok(PlannedTrajectory {
        states,
        inputs,
        errors,
        objective_value,
        solver_status: solution.status,
        kkt_residual: solution.kkt_residual,
        iterations: solution.iterations,
        solve_time: solution.wall_time,
    })
}

impl<'a> nlp::NlpProblem for OcpNlp<'a> {
    fn n_vars(&self) -> usize {
        self.n_states_flat() + self.def.n * NU + usize::from(self.slack_idx().is_some())
    }

    fn n_eq(&self) -> usize {
        self.n_states_flat()
    }

    fn n_ineq(&self) -> usize {
        self.ineq_rows_per_stage() * (self.def.n + 1)
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n_vars = self.n_vars();
        let mut lb = vec![f64::NEG_INFINITY; n_vars];
        let mut ub = vec![f64::INFINITY; n_vars];
        let lim = &self.def.limits;
        // Stage 0 is pinned by the initial-condition equality; bounding it as
        // well would fight the pin whenever the current state sits on a limit.
        for j in 1..=self.def.n {
            lb[self.state_idx(j, 4)] = lim.v_min;
            ub[self.state_idx(j, 4)] = lim.v_max;
            lb[self.state_idx(j, 5)] = -lim.delta_max;
            ub[self.state_idx(j, 5)] = lim.delta_max;
        }
        for j in 0..self.def.n {
            lb[self.input_idx(j, 0)] = -lim.a_max;
            ub[self.input_idx(j, 0)] = lim.a_max;
            lb[self.input_idx(j, 1)] = -lim.ddelta_max;
            ub[self.input_idx(j, 1)] = lim.ddelta_max;
            for k in 0..N_ANCHORS {
                lb[self.input_idx(j, 2 + k)] = 0.0;
                ub[self.input_idx(j, 2 + k)] = lim.vtheta_max();
            }
        }
        if let Some(si) = self.slack_idx() {
            lb[si] = 0.0;
        }
        (lb, ub)
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let mut f = 0.0;
        for j in 1..=self.def.n {
            f += stage_tracking_cost(self.def, &self.state_at(z, j));
        }
        for j in 0..self.def.n {
            let u = ControlInput::from_vec(&self.input_vec_at(z, j));
            f += progress_reward(self.def, &u) + comfort_cost(self.def, &u);
        }
        if let (Some(w), Some(si)) = (self.def.corridor_slack_weight, self.slack_idx()) {
            f += w * z[si];
        }
        f
    }

    fn objective_grad(&self, z: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let w = &self.def.weights;
        for j in 1..=self.def.n {
            let state = self.state_at(z, j);
            for &i in &self.def.active_anchors() {
                let (e, dec, del) = self.anchor_error_jacobian(&state, i);
                let gc = 2.0 * w.qc[i] * e.ec;
                let gl = 2.0 * w.ql[i] * e.el;
                let vars = [
                    self.state_idx(j, 0),
                    self.state_idx(j, 1),
                    self.state_idx(j, 2),
                    self.state_idx(j, 3),
                    self.state_idx(j, 6 + i),
                ];
                for k in 0..5 {
                    grad[vars[k]] += gc * dec[k] + gl * del[k];
                }
            }
        }
        for j in 0..self.def.n {
            grad[self.input_idx(j, 0)] += 2.0 * w.qa * z[self.input_idx(j, 0)];
            grad[self.input_idx(j, 1)] += 2.0 * w.qdelta * z[self.input_idx(j, 1)];
            for &i in &self.def.active_anchors() {
                grad[self.input_idx(j, 2 + i)] -= w.qv[i];
            }
        }
        if let (Some(ws), Some(si)) = (self.def.corridor_slack_weight, self.slack_idx()) {
            grad[si] += ws;
        }
    }

    fn objective_hessian(&self, z: &[f64]) -> Triplets {
        // Gauss-Newton curvature of the tracking terms plus the exact
        // (diagonal) comfort curvature.
        let w = &self.def.weights;
        let mut t = Vec::new();
        for j in 1..=self.def.n {
            let state = self.state_at(z, j);
            for &i in &self.def.active_anchors() {
                let (_, dec, del) = self.anchor_error_jacobian(&state, i);
                let vars = [
                    self.state_idx(j, 0),
                    self.state_idx(j, 1),
                    self.state_idx(j, 2),
                    self.state_idx(j, 3),
                    self.state_idx(j, 6 + i),
                ];
                for a in 0..5 {
                    for b in 0..=a {
                        let v = 2.0 * w.qc[i] * dec[a] * dec[b] + 2.0 * w.ql[i] * del[a] * del[b];
                        t.push((vars[a], vars[b], v));
                    }
                }
            }
        }
        for j in 0..self.def.n {
            t.push((self.input_idx(j, 0), self.input_idx(j, 0), 2.0 * w.qa));
            t.push((self.input_idx(j, 1), self.input_idx(j, 1), 2.0 * w.qdelta));
        }
        t
    }

    fn lagrangian_hessian(&self, z: &[f64], sigma: f64, y_eq: &[f64], lam_in: &[f64]) -> Triplets {
        // Exact stage-local curvature. A pure Gauss-Newton model stalls in
        // tight corridors: corridor and dynamics multipliers reach O(1e3)
        // there and the curvature they multiply dominates the step. The
        // nonlinear blocks are small, so central differences of the analytic
        // gradients give an accurate Newton model at negligible cost. Blocks
        // are always emitted (zeros included) to keep the pattern fixed.
        let w = &self.def.weights;
        let active = self.def.active_anchors();
        let per_stage = self.ineq_rows_per_stage();
        let fd_step = |v: f64| 1e-5 * (1.0 + v.abs());
        let bump = |st: &VehicleState, slot: usize, anchor: usize, d: f64| -> VehicleState {
            let mut s = *st;
            match slot {
                0 => s.x1 += d,
                1 => s.y1 += d,
                2 => s.psi1 += d,
                3 => s.psi2 += d,
                _ => s.theta[anchor] += d,
            }
            s
        };
        let field = |st: &VehicleState, slot: usize, anchor: usize| -> f64 {
            match slot {
                0 => st.x1,
                1 => st.y1,
                2 => st.psi1,
                3 => st.psi2,
                _ => st.theta[anchor],
            }
        };
        let mut t: Triplets = Vec::new();
        for j in 0..self.def.n {
            t.push((self.input_idx(j, 0), self.input_idx(j, 0), sigma * 2.0 * w.qa));
            t.push((self.input_idx(j, 1), self.input_idx(j, 1), sigma * 2.0 * w.qdelta));
        }
        for j in 0..=self.def.n {
            let state = self.state_at(z, j);
            for (ai, &i) in active.iter().enumerate() {
                let row = j * per_stage + 2 * ai;
                let (lam_lo, lam_up) = (lam_in[row], lam_in[row + 1]);
                // Tracking starts at stage 1; corridor rows cover every stage.
                let track = if j >= 1 { sigma } else { 0.0 };
                let g5 = |st: &VehicleState| -> [f64; 5] {
                    let (e, dec, del) = self.anchor_error_jacobian(st, i);
                    let (_, _, dbl, dbr) = self.def.corridor.eval_smooth(st.theta[i]);
                    let mut g = [0.0; 5];
                    for k in 0..5 {
                        g[k] = track
                            * (2.0 * w.qc[i] * e.ec * dec[k] + 2.0 * w.ql[i] * e.el * del[k])
                            + (lam_up - lam_lo) * dec[k];
                    }
                    g[4] += lam_lo * dbr - lam_up * dbl;
                    g
                };
                let vars = [
                    self.state_idx(j, 0),
                    self.state_idx(j, 1),
                    self.state_idx(j, 2),
                    self.state_idx(j, 3),
                    self.state_idx(j, 6 + i),
                ];
                let mut blk = [[0.0; 5]; 5];
                if track > 0.0 || lam_lo != 0.0 || lam_up != 0.0 {
                    for a in 0..5 {
                        let h = fd_step(field(&state, a, i));
                        let gp = g5(&bump(&state, a, i, h));
                        let gm = g5(&bump(&state, a, i, -h));
                        for b in 0..5 {
                            blk[a][b] = (gp[b] - gm[b]) / (2.0 * h);
                        }
                    }
                }
                for a in 0..5 {
                    for b in 0..=a {
                        t.push((vars[a], vars[b], 0.5 * (blk[a][b] + blk[b][a])));
                    }
                }
            }
            // Lateral acceleration rows have a small exact Hessian.
            let row_ay = j * per_stage + 2 * active.len();
            let lmul = lam_in[row_ay] - lam_in[row_ay + 1];
            let (iv, id) = (self.state_idx(j, 4), self.state_idx(j, 5));
            let tan_d = state.delta0.tan();
            let sec2 = 1.0 + tan_d * tan_d;
            let l1 = self.def.params.l1;
            t.push((iv, iv, lmul * 2.0 * tan_d / l1));
            t.push((id, iv, lmul * 2.0 * state.v1 * sec2 / l1));
            t.push((id, id, lmul * 2.0 * state.v1 * state.v1 * sec2 * tan_d / l1));
        }
        // Dynamics curvature per shooting interval over (x_j, u_j). The
        // defect rows are z_next - pred, so the contribution is minus the
        // prediction curvature contracted with the stage multipliers.
        for j in 0..self.def.n {
            let yblk = &y_eq[(j + 1) * NX..(j + 2) * NX];
            let mut idx = [0usize; NX + NU];
            for (k, v) in idx.iter_mut().enumerate().take(NX) {
                *v = self.state_idx(j, k);
            }
            for k in 0..NU {
                idx[NX + k] = self.input_idx(j, k);
            }
            let mut blk = [[0.0; NX + NU]; NX + NU];
            if yblk.iter().any(|&v| v != 0.0) {
                let xj = self.state_vec_at(z, j);
                let uj = self.input_vec_at(z, j);
                let gfun = |x: &StateVec, u: &InputVec| -> [f64; NX + NU] {
                    let (_, jx, ju) = rk4_with_jacobian(&self.def.params, x, u, self.def.dt);
                    let mut g = [0.0; NX + NU];
                    for k in 0..NX {
                        let yk = yblk[k];
                        if yk == 0.0 {
                            continue;
                        }
                        for c in 0..NX {
                            g[c] += yk * jx[(k, c)];
                        }
                        for c in 0..NU {
                            g[NX + c] += yk * ju[(k, c)];
                        }
                    }
                    g
                };
                for a in 0..NX + NU {
                    let v0 = if a < NX { xj[a] } else { uj[a - NX] };
                    let h = fd_step(v0);
                    let (mut xp, mut up) = (xj, uj);
                    let (mut xm, mut um) = (xj, uj);
                    if a < NX {
                        xp[a] += h;
                        xm[a] -= h;
                    } else {
                        up[a - NX] += h;
                        um[a - NX] -= h;
                    }
                    let gp = gfun(&xp, &up);
                    let gm = gfun(&xm, &um);
                    for b in 0..NX + NU {
                        blk[a][b] = (gp[b] - gm[b]) / (2.0 * h);
                    }
                }
            }
            for a in 0..NX + NU {
                for b in 0..=a {
                    t.push((idx[a], idx[b], -0.5 * (blk[a][b] + blk[b][a])));
                }
            }
        }
        t
    }

    fn eq_constraints(&self, z: &[f64], out: &mut [f64]) {
        for k in 0..NX {
            out[k] = z[k] - self.x0[k];
        }
        for j in 0..self.def.n {
            let xj = self.state_vec_at(z, j);
            let uj = self.input_vec_at(z, j);
            let pred = rk4_vec(&self.def.params, &xj, &uj, self.def.dt);
            let b = (j + 1) * NX;
            for k in 0..NX {
                out[b + k] = z[b + k] - pred[k];
            }
        }
    }

    fn eq_jacobian(&self, z: &[f64]) -> Triplets {
        let mut t = Vec::with_capacity(NX + self.def.n * NX * (1 + NX + NU));
        for k in 0..NX {
            t.push((k, k, 1.0));
        }
        for j in 0..self.def.n {
            let xj = self.state_vec_at(z, j);
            let uj = self.input_vec_at(z, j);
            let (_, jx, ju) = rk4_with_jacobian(&self.def.params, &xj, &uj, self.def.dt);
            let row0 = (j + 1) * NX;
            // Dense stage blocks keep the sparsity pattern independent of the
            // evaluation point.
            for k in 0..NX {
                t.push((row0 + k, row0 + k, 1.0));
                for c in 0..NX {
                    t.push((row0 + k, self.state_idx(j, c), -jx[(k, c)]));
                }
                for c in 0..NU {
                    t.push((row0 + k, self.input_idx(j, c), -ju[(k, c)]));
                }
            }
        }
        t
    }

    fn ineq_constraints(&self, z: &[f64], out: &mut [f64]) {
        let half_w = 0.5 * self.def.params.width;
        let active = self.def.active_anchors();
        let per_stage = self.ineq_rows_per_stage();
        let slack = self.slack_idx().map(|si| z[si]).unwrap_or(0.0);
        for j in 0..=self.def.n {
            let state = self.state_at(z, j);
            let anchors = anchor_positions(&self.def.params, &state);
            let mut row = j * per_stage;
            for &i in &active {
                let e = contour_lag_errors(&self.def.path, anchors.get(i), state.theta[i]);
                let (bl, br, _, _) = self.def.corridor.eval_smooth(state.theta[i]);
                out[row] = e.ec - br - half_w + slack;
                out[row + 1] = bl - half_w - e.ec + slack;
                row += 2;
            }
            let ay = state.v1 * state.v1 * state.delta0.tan() / self.def.params.l1;
            out[row] = self.def.limits.ay_max - ay;
            out[row + 1] = self.def.limits.ay_max + ay;
        }
    }

    fn ineq_jacobian(&self, z: &[f64]) -> Triplets {
        let active = self.def.active_anchors();
        let per_stage = self.ineq_rows_per_stage();
        let mut t = Vec::with_capacity((self.def.n + 1) * (active.len() * 12 + 4));
        for j in 0..=self.def.n {
            let state = self.state_at(z, j);
            let mut row = j * per_stage;
            for &i in &active {
                let (_, dec, _) = self.anchor_error_jacobian(&state, i);
                let (_, _, dbl, dbr) = self.def.corridor.eval_smooth(state.theta[i]);
                let vars = [
                    self.state_idx(j, 0),
                    self.state_idx(j, 1),
                    self.state_idx(j, 2),
                    self.state_idx(j, 3),
                    self.state_idx(j, 6 + i),
                ];
                for k in 0..5 {
                    t.push((row, vars[k], dec[k]));
                    t.push((row + 1, vars[k], -dec[k]));
                }
                // Bound-curve variation along theta.
                t.push((row, vars[4], -dbr));
                t.push((row + 1, vars[4], dbl));
                if let Some(si) = self.slack_idx() {
                    t.push((row, si, 1.0));
                    t.push((row + 1, si, 1.0));
                }
                row += 2;
            }
            let v1 = state.v1;
            let tan_d = state.delta0.tan();
            let sec2 = 1.0 + tan_d * tan_d;
            let day_dv = 2.0 * v1 * tan_d / self.def.params.l1;
            let day_dd = v1 * v1 * sec2 / self.def.params.l1;
            let iv = self.state_idx(j, 4);
            let id = self.state_idx(j, 5);
            t.push((row, iv, -day_dv));
            t.push((row, id, -day_dd));
            t.push((row + 1, iv, day_dv));
            t.push((row + 1, id, day_dd));
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::{check_derivatives, solve, NlpProblem, SolverConfig};
    use crate::path::{Corridor, ReferencePath, Waypoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table1_params() -> VehicleParams {
        VehicleParams { l1: 4.0, l1b: 0.6, l2: 8.0, width: 2.5 }
    }

    fn straight_path(len: f64) -> ReferencePath {
        let wps: Vec<Waypoint> = (0..=(len as usize / 10))
            .map(|i| Waypoint::new(10.0 * i as f64, 0.0))
            .collect();
        ReferencePath::build(&wps).unwrap()
    }

    fn straight_def(n: usize) -> OcpDefinition {
        let path = straight_path(100.0);
        let corridor = Corridor::uniform(path.total_length(), 3.5, -3.5);
        OcpDefinition {
            n,
            dt: 0.2,
            weights: Weights::default(),
            limits: Limits::forward(),
            params: table1_params(),
            path,
            corridor,
            anchor_mask: [true; 3],
            corridor_slack_weight: None,
        }
    }

    /// Straight path along +x: tractor on the path with the semitrailer yawed
    /// so its axle sits `offset` to the left, with zero lag.
    fn trailer_offset_state(x1: f64, offset: f64) -> VehicleState {
        let p = table1_params();
        let s2 = -offset / p.l2;
        let psi2 = s2.asin();
        let p2x = x1 + p.l1b - p.l2 * psi2.cos();
        VehicleState {
            x1,
            y1: 0.0,
            psi1: 0.0,
            psi2,
            v1: 0.0,
            delta0: 0.0,
            theta: [x1 + p.l1, x1, p2x],
        }
    }

    #[test]
    fn error_formula_cases() {
        let path = straight_path(50.0);
        let on_path = contour_lag_errors(&path, (5.0, 0.0), 5.0);
        assert!(on_path.ec.abs() < 1e-12 && on_path.el.abs() < 1e-12);
        let left = contour_lag_errors(&path, (5.0, 2.0), 5.0);
        assert!((left.ec - 2.0).abs() < 1e-12 && left.el.abs() < 1e-12);
        let ahead = contour_lag_errors(&path, (7.0, 0.0), 5.0);
        assert!(ahead.ec.abs() < 1e-12 && (ahead.el - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tracking_cost_on_path_is_zero() {
        let def = straight_def(10);
        let state = trailer_offset_state(20.0, 0.0);
        assert!(stage_tracking_cost(&def, &state) < 1e-18);
    }

    #[test]
    fn tracking_cost_trailer_offset_arithmetic() {
        let def = straight_def(10);
        let state = trailer_offset_state(20.0, 0.5);
        // Only the semitrailer anchor is off the path: 100 * 0.5^2 = 25.
        let cost = stage_tracking_cost(&def, &state);
        assert!((cost - 25.0).abs() < 1e-9, "{cost}");
    }

    #[test]
    fn tracking_cost_masking_ignores_trailer() {
        let mut def = straight_def(10);
        def.anchor_mask = [true, true, false];
        let state = trailer_offset_state(20.0, 0.5);
        assert!(stage_tracking_cost(&def, &state) < 1e-18);
    }

    #[test]
    fn progress_and_comfort_arithmetic() {
        let def = straight_def(10);
        let zero = ControlInput::default();
        assert_eq!(progress_reward(&def, &zero), 0.0);
        assert_eq!(comfort_cost(&def, &zero), 0.0);
        let u = ControlInput { a1: 0.0, ddelta0: 0.0, vtheta: [2.0; 3] };
        assert!((progress_reward(&def, &u) + 6.0).abs() < 1e-12);
        assert_eq!(comfort_cost(&def, &u), 0.0);
        let mut def_masked = straight_def(10);
        def_masked.anchor_mask = [true, false, false];
        let u3 = ControlInput { vtheta: [3.0, 0.0, 0.0], ..Default::default() };
        assert!((progress_reward(&def_masked, &u3) + 3.0).abs() < 1e-12);
        let uc = ControlInput { a1: 0.5, ddelta0: 0.1, ..Default::default() };
        assert!((comfort_cost(&def, &uc) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn corridor_residual_cases() {
        let mut def = straight_def(10);
        def.anchor_mask = [false, true, true];
        // Rear axle sits at (x1, y1) directly, so y1 is its contour error.
        for (offset, lo, up) in [(0.0, 2.25, 2.25), (2.25, 4.5, 0.0), (3.0, 5.25, -0.75)] {
            let state = VehicleState {
                x1: 20.0,
                y1: offset,
                psi1: 0.0,
                psi2: 0.0,
                v1: 0.0,
                delta0: 0.0,
                theta: [24.0, 20.0, 12.6],
            };
            let res = corridor_residuals(&def, &state);
            assert_eq!(res.len(), 2);
            assert!((res[0].0 - lo).abs() < 1e-9, "offset {offset}: {:?}", res[0]);
            assert!((res[0].1 - up).abs() < 1e-9, "offset {offset}: {:?}", res[0]);
        }
    }

    #[test]
    fn lateral_accel_residual_cases() {
        let def = straight_def(10);
        let mut state = trailer_offset_state(20.0, 0.0);
        let r = lateral_accel_residual(&def, &state).unwrap();
        assert!((r.0 - 1.5).abs() < 1e-12 && (r.1 - 1.5).abs() < 1e-12);
        // Active limit: ay = v^2 tan(d)/L1 = 1.5 exactly.
        state.v1 = 3.0;
        state.delta0 = (1.5 * 4.0 / 9.0_f64).atan();
        let r = lateral_accel_residual(&def, &state).unwrap();
        assert!(r.0.abs() < 1e-12, "{r:?}");
        // Stationary vehicle never violates.
        state.v1 = 0.0;
        state.delta0 = 0.6;
        let r = lateral_accel_residual(&def, &state).unwrap();
        assert!((r.0 - 1.5).abs() < 1e-12 && (r.1 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn nlp_dimensions_table1_horizon() {
        let def = straight_def(75);
        let x0 = trailer_offset_state(5.0, 0.0);
        let nlp = assemble_nlp(&def, &x0, None).unwrap();
        assert_eq!(nlp.n_vars(), 9 * 76 + 5 * 75);
        assert_eq!(nlp.n_vars(), 1059);
        assert_eq!(nlp.n_eq(), 9 * 76);
        let mut def2 = straight_def(75);
        def2.anchor_mask = [true, true, false];
        let nlp2 = assemble_nlp(&def2, &x0, None).unwrap();
        // Corridor rows only: 2 anchors * 2 sides * 76 stages.
        assert_eq!(nlp2.n_ineq() - 2 * 76, 2 * 2 * 76);
    }

    #[test]
    fn wrong_horizon_guess_rejected() {
        let def = straight_def(10);
        let x0 = trailer_offset_state(5.0, 0.0);
        let short = PlannedTrajectory {
            states: vec![x0; 5],
            inputs: vec![ControlInput::default(); 4],
            errors: vec![[ErrorPair::default(); 3]; 5],
            objective_value: 0.0,
            solver_status: SolverStatus::Converged,
            kkt_residual: 0.0,
            iterations: 0,
            solve_time: 0.0,
        };
        assert!(matches!(
            assemble_nlp(&def, &x0, Some(&short)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn pack_extract_round_trip() {
        let def = straight_def(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let states: Vec<VehicleState> = (0..=6)
            .map(|_| VehicleState {
                x1: rng.random_range(-5.0..5.0),
                y1: rng.random_range(-2.0..2.0),
                psi1: rng.random_range(-0.5..0.5),
                psi2: rng.random_range(-0.5..0.5),
                v1: rng.random_range(0.0..4.0),
                delta0: rng.random_range(-0.5..0.5),
                theta: [rng.random_range(0.0..50.0); 3],
            })
            .collect();
        let inputs: Vec<ControlInput> = (0..6)
            .map(|_| ControlInput {
                a1: rng.random_range(-0.5..0.5),
                ddelta0: rng.random_range(-0.3..0.3),
                vtheta: [rng.random_range(0.0..4.0); 3],
            })
            .collect();
        let z = pack_trajectory(&def, &states, &inputs).unwrap();
        let sol = SolverResult {
            decision_vector: z,
            status: SolverStatus::Converged,
            kkt_residual: 0.0,
            constraint_violation: 0.0,
            iterations: 1,
            wall_time: 0.0,
            multipliers: Default::default(),
            iteration_records: vec![],
        };
        let traj = extract_trajectory(&def, &sol).unwrap();
        assert_eq!(traj.states, states);
        assert_eq!(traj.inputs, inputs);
        // Recorded errors match an independent recomputation.
        for (s, e) in traj.states.iter().zip(&traj.errors) {
            let anchors = anchor_positions(&def.params, s);
            for i in 0..3 {
                let fresh = contour_lag_errors(&def.path, anchors.get(i), s.theta[i]);
                assert!((fresh.ec - e[i].ec).abs() < 1e-12);
                assert!((fresh.el - e[i].el).abs() < 1e-12);
            }
        }
    }

    fn curved_def(n: usize) -> OcpDefinition {
        let wps = [
            Waypoint::new(0.0, 0.0),
            Waypoint::new(10.0, 0.0),
            Waypoint::new(20.0, 3.0),
            Waypoint::new(30.0, 9.0),
            Waypoint::new(38.0, 17.0),
        ];
        let path = ReferencePath::build(&wps).unwrap();
        let corridor = Corridor::uniform(path.total_length(), 4.0, -4.0);
        OcpDefinition {
            n,
            dt: 0.2,
            weights: Weights::default(),
            limits: Limits::forward(),
            params: table1_params(),
            path,
            corridor,
            anchor_mask: [true; 3],
            corridor_slack_weight: None,
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let def = curved_def(4);
        let x0 = trailer_offset_state(4.0, 0.0);
        let nlp = assemble_nlp(&def, &x0, None).unwrap();
        let n = nlp.n_vars();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let mut z = vec![0.0; n];
            for j in 0..=def.n {
                z[j * NX] = rng.random_range(0.0..30.0);
                z[j * NX + 1] = rng.random_range(-3.0..6.0);
                z[j * NX + 2] = rng.random_range(-0.6..0.9);
                z[j * NX + 3] = rng.random_range(-0.6..0.9);
                z[j * NX + 4] = rng.random_range(0.2..3.8);
                z[j * NX + 5] = rng.random_range(-0.5..0.5);
                // Progress near each anchor's projection keeps errors in the
                // realistic sub-meter range; wildly wrong progress values blow
                // the objective up and with it the finite-difference noise.
                let state = VehicleState::from_vec(&StateVec::from_column_slice(
                    &z[j * NX..(j + 1) * NX],
                ));
                let anchors = anchor_positions(&def.params, &state);
                for k in 0..3 {
                    let s = def.path.project(anchors.get(k), None);
                    z[j * NX + 6 + k] = (s + rng.random_range(-0.5f64..0.5)).max(0.5);
                }
            }
            for j in 0..def.n {
                let b = (def.n + 1) * NX + j * NU;
                z[b] = rng.random_range(-0.4..0.4);
                z[b + 1] = rng.random_range(-0.3..0.3);
                for k in 0..3 {
                    z[b + 2 + k] = rng.random_range(0.1..3.9);
                }
            }
            let rep = check_derivatives(&nlp, &z);
            assert!(rep.max_error() <= 1e-4, "trial {trial}: {rep:?}");
        }
    }

    #[test]
    fn objective_decomposes_into_stage_costs() {
        let def = curved_def(5);
        let x0 = trailer_offset_state(4.0, 0.1);
        let nlp = assemble_nlp(&def, &x0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..nlp.n_vars()).map(|_| rng.random_range(-1.0..8.0)).collect();
        let sol = SolverResult {
            decision_vector: z.clone(),
            status: SolverStatus::Converged,
            kkt_residual: 0.0,
            constraint_violation: 0.0,
            iterations: 1,
            wall_time: 0.0,
            multipliers: Default::default(),
            iteration_records: vec![],
        };
        let traj = extract_trajectory(&def, &sol).unwrap();
        assert!((traj.objective_value - nlp.objective(&z)).abs() < 1e-9);
    }

    #[test]
    fn small_horizon_solve_accelerates_along_path() {
        let def = straight_def(10);
        let x0 = trailer_offset_state(2.0, 0.0);
        let nlp = assemble_nlp(&def, &x0, None).unwrap();
        let config = SolverConfig::default();
        let res = solve(&nlp, &config, nlp.initial_guess()).unwrap();
        assert_eq!(res.status, crate::nlp::SolverStatus::Converged, "{res:?}");
        let traj = extract_trajectory(&def, &res).unwrap();
        // The planner should pull away from standstill.
        assert!(traj.states.last().unwrap().v1 > 0.3, "{}", traj.states.last().unwrap().v1);
        // Shooting defects hold under independent re-integration.
        for j in 0..def.n {
            let next = crate::vehicle::rk4_step(&def.params, &traj.states[j], &traj.inputs[j], def.dt)
                .unwrap();
            let defect = (next.to_vec() - traj.states[j + 1].to_vec()).abs().max();
            assert!(defect <= 1e-6, "stage {j}: defect {defect}");
        }
        // Lag stays pinned.
        for e in &traj.errors {
            for i in 0..3 {
                assert!(e[i].el.abs() <= 0.05, "lag {}", e[i].el);
            }
        }
    }
}
