//! Kinematic tractor-semitrailer model.
//!
//! The planning state is `[x1, y1, psi1, psi2, v1, delta0, theta0, theta1,
//! theta2]`: tractor rear-axle pose, semitrailer heading, longitudinal
//! velocity and steering angle (input integrators), and one progress state
//! per vehicle anchor point. Inputs are `[a1, ddelta0, vtheta0..2]`.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};

pub const NX: usize = 9;
pub const NU: usize = 5;
/// Number of vehicle anchor points (tractor front/rear axle, semitrailer axle).
pub const N_ANCHORS: usize = 3;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;
pub type StateJac = SMatrix<f64, NX, NX>;
pub type InputJac = SMatrix<f64, NX, NU>;

/// Tractor-semitrailer dimensions.
///
/// The articulation joint sits `l1b` ahead of the tractor rear axle; this is
/// the convention consistent with the semitrailer heading dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    /// Tractor wheelbase [m].
    pub l1: f64,
    /// Articulation joint offset forward of the tractor rear axle [m].
    pub l1b: f64,
    /// Semitrailer wheelbase, joint to semitrailer axle [m].
    pub l2: f64,
    /// Vehicle width [m].
    pub width: f64,
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 > 0.0 && self.l2 > 0.0 && self.width > 0.0) {
            return Err(Error::Validation(
                "vehicle dimensions l1, l2, width must be positive".into(),
            ));
        }
        if self.l1b.abs() >= self.l1 {
            return Err(Error::Validation(
                "articulation joint offset |l1b| must be smaller than l1".into(),
            ));
        }
        Ok(())
    }
}

/// Planning state. Heading angles are kept unwrapped so `psi1 - psi2` is the
/// true articulation angle; wrapping happens only at presentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x1: f64,
    pub y1: f64,
    pub psi1: f64,
    pub psi2: f64,
    pub v1: f64,
    pub delta0: f64,
    /// Progress states for anchors 0 (front axle), 1 (rear axle), 2 (trailer axle).
    pub theta: [f64; N_ANCHORS],
}

impl VehicleState {
    /// Articulation angle between tractor and semitrailer.
    pub fn gamma1(&self) -> f64 {
        self.psi1 - self.psi2
    }

    pub fn to_vec(&self) -> StateVec {
        StateVec::from_column_slice(&[
            self.x1,
            self.y1,
            self.psi1,
            self.psi2,
            self.v1,
            self.delta0,
            self.theta[0],
            self.theta[1],
            self.theta[2],
        ])
    }

    pub fn from_vec(v: &StateVec) -> Self {
        Self {
            x1: v[0],
            y1: v[1],
            psi1: v[2],
            psi2: v[3],
            v1: v[4],
            delta0: v[5],
            theta: [v[6], v[7], v[8]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    /// Tractor longitudinal acceleration [m/s^2].
    pub a1: f64,
    /// Steering rate [rad/s].
    pub ddelta0: f64,
    /// Progress velocities per anchor [m/s].
    pub vtheta: [f64; N_ANCHORS],
}

impl ControlInput {
    pub fn to_vec(&self) -> InputVec {
        InputVec::from_column_slice(&[
            self.a1,
            self.ddelta0,
            self.vtheta[0],
            self.vtheta[1],
            self.vtheta[2],
        ])
    }

    pub fn from_vec(v: &InputVec) -> Self {
        Self {
            a1: v[0],
            ddelta0: v[1],
            vtheta: [v[2], v[3], v[4]],
        }
    }
}

/// World positions of the three anchor points.
#[derive(Debug, Clone, Copy)]
pub struct AnchorSet {
    /// Tractor front axle.
    pub p0: (f64, f64),
    /// Tractor rear axle.
    pub p1: (f64, f64),
    /// Semitrailer axle.
    pub p2: (f64, f64),
}

impl AnchorSet {
    pub fn get(&self, i: usize) -> (f64, f64) {
        match i {
            0 => self.p0,
            1 => self.p1,
            2 => self.p2,
            _ => panic!("anchor index {i} out of range"),
        }
    }
}

fn check_steering(delta0: f64) -> Result<()> {
    if delta0.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::SteeringSingularity(delta0));
    }
    Ok(())
}

/// Continuous-time state derivative.
pub fn continuous_dynamics(
    params: &VehicleParams,
    state: &VehicleState,
    input: &ControlInput,
) -> Result<StateVec> {
    check_steering(state.delta0)?;
    let gamma = state.gamma1();
    let psi1_dot = state.v1 / params.l1 * state.delta0.tan();
    let psi2_dot =
        state.v1 / params.l2 * gamma.sin() + params.l1b / params.l2 * psi1_dot * gamma.cos();
    Ok(StateVec::from_column_slice(&[
        state.v1 * state.psi1.cos(),
        state.v1 * state.psi1.sin(),
        psi1_dot,
        psi2_dot,
        input.a1,
        input.ddelta0,
        input.vtheta[0],
        input.vtheta[1],
        input.vtheta[2],
    ]))
}

/// State derivative plus its Jacobians with respect to state and input.
fn dynamics_with_jacobian(
    params: &VehicleParams,
    x: &StateVec,
    u: &InputVec,
) -> (StateVec, StateJac, InputJac) {
    let (psi1, psi2, v, delta) = (x[2], x[3], x[4], x[5]);
    let gamma = psi1 - psi2;
    let (sg, cg) = gamma.sin_cos();
    let (s1, c1) = psi1.sin_cos();
    let tan_d = delta.tan();
    let sec2 = 1.0 + tan_d * tan_d;
    let r1 = v / params.l1 * tan_d; // psi1_dot
    let k = params.l1b / params.l2;

    let mut f = StateVec::zeros();
    f[0] = v * c1;
    f[1] = v * s1;
    f[2] = r1;
    f[3] = v / params.l2 * sg + k * r1 * cg;
    f[4] = u[0];
    f[5] = u[1];
    f[6] = u[2];
    f[7] = u[3];
    f[8] = u[4];

    let mut a = StateJac::zeros();
    a[(0, 2)] = -v * s1;
    a[(0, 4)] = c1;
    a[(1, 2)] = v * c1;
    a[(1, 4)] = s1;
    a[(2, 4)] = tan_d / params.l1;
    a[(2, 5)] = v * sec2 / params.l1;
    let df3_dgamma = v / params.l2 * cg - k * r1 * sg;
    a[(3, 2)] = df3_dgamma;
    a[(3, 3)] = -df3_dgamma;
    a[(3, 4)] = sg / params.l2 + k * tan_d / params.l1 * cg;
    a[(3, 5)] = k * cg * v * sec2 / params.l1;

    let mut b = InputJac::zeros();
    b[(4, 0)] = 1.0;
    b[(5, 1)] = 1.0;
    b[(6, 2)] = 1.0;
    b[(7, 3)] = 1.0;
    b[(8, 4)] = 1.0;

    (f, a, b)
}

/// One classical RK4 step with the input held constant.
pub fn rk4_step(
    params: &VehicleParams,
    state: &VehicleState,
    input: &ControlInput,
    dt: f64,
) -> Result<VehicleState> {
    if dt <= 0.0 {
        return Err(Error::Validation(format!("rk4 step needs dt > 0, got {dt}")));
    }
    check_steering(state.delta0)?;
    let x = state.to_vec();
    let u = input.to_vec();
    Ok(VehicleState::from_vec(&rk4_vec(params, &x, &u, dt)))
}

/// RK4 step on raw vectors; total on reals (tan blows up smoothly, no panic).
pub fn rk4_vec(params: &VehicleParams, x: &StateVec, u: &InputVec, dt: f64) -> StateVec {
    let f = |x: &StateVec| dynamics_with_jacobian(params, x, u).0;
    let k1 = f(x);
    let k2 = f(&(x + dt / 2.0 * k1));
    let k3 = f(&(x + dt / 2.0 * k2));
    let k4 = f(&(x + dt * k3));
    x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// RK4 step together with the Jacobians of the step map.
pub fn rk4_with_jacobian(
    params: &VehicleParams,
    x: &StateVec,
    u: &InputVec,
    dt: f64,
) -> (StateVec, StateJac, InputJac) {
    let (k1, a1, b1) = dynamics_with_jacobian(params, x, u);
    let x2 = x + dt / 2.0 * k1;
    let (k2, a2, b2) = dynamics_with_jacobian(params, &x2, u);
    let x3 = x + dt / 2.0 * k2;
    let (k3, a3, b3) = dynamics_with_jacobian(params, &x3, u);
    let x4 = x + dt * k3;
    let (k4, a4, b4) = dynamics_with_jacobian(params, &x4, u);

    let id = StateJac::identity();
    let dk1dx = a1;
    let dk1du = b1;
    let dk2dx = a2 * (id + dt / 2.0 * dk1dx);
    let dk2du = a2 * (dt / 2.0 * dk1du) + b2;
    let dk3dx = a3 * (id + dt / 2.0 * dk2dx);
    let dk3du = a3 * (dt / 2.0 * dk2du) + b3;
    let dk4dx = a4 * (id + dt * dk3dx);
    let dk4du = a4 * (dt * dk3du) + b4;

    let xn = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let jx = id + dt / 6.0 * (dk1dx + 2.0 * dk2dx + 2.0 * dk3dx + dk4dx);
    let ju = dt / 6.0 * (dk1du + 2.0 * dk2du + 2.0 * dk3du + dk4du);
    (xn, jx, ju)
}

/// World positions of the anchor points for a given state.
pub fn anchor_positions(params: &VehicleParams, state: &VehicleState) -> AnchorSet {
    let (s1, c1) = state.psi1.sin_cos();
    let (s2, c2) = state.psi2.sin_cos();
    let p1 = (state.x1, state.y1);
    let p0 = (p1.0 + params.l1 * c1, p1.1 + params.l1 * s1);
    let joint = (p1.0 + params.l1b * c1, p1.1 + params.l1b * s1);
    let p2 = (joint.0 - params.l2 * c2, joint.1 - params.l2 * s2);
    AnchorSet { p0, p1, p2 }
}

/// Signed lateral acceleration of the tractor, `v1 * psi1_dot`.
pub fn lateral_acceleration(params: &VehicleParams, state: &VehicleState) -> Result<f64> {
    check_steering(state.delta0)?;
    Ok(state.v1 * state.v1 * state.delta0.tan() / params.l1)
}
