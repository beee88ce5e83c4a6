//! Post-hoc analysis of closed-loop logs: swept-path rasterization, exact
//! corridor-violation checks, jackknife detection, and aggregate metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ocp::{contour_lag_errors, OcpDefinition};
use crate::path::ReferencePath;
use crate::sim::SimLog;
use crate::vehicle::{anchor_positions, VehicleParams, VehicleState, N_ANCHORS};

/// Articulation angle at which a maneuver is considered jackknifed.
pub const DEFAULT_JACKKNIFE_THRESHOLD: f64 = std::f64::consts::FRAC_PI_2;

/// Occupancy-grid resolution for swept-path unions [m].
pub const RASTER_CELL: f64 = 0.05;

/// A constraint counts as active when its residual drops below this [m].
const ACTIVITY_TOLERANCE: f64 = 1e-3;

/// Body rectangles attached to the tractor rear axle and the articulation
/// joint. Longitudinal offsets are measured along the respective heading.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BodyFootprint {
    pub tractor_length: f64,
    pub tractor_width: f64,
    /// Distance from the rear tractor axle back to the tractor's rear edge.
    pub tractor_rear_overhang: f64,
    pub trailer_length: f64,
    pub trailer_width: f64,
    /// Distance from the joint forward to the semitrailer's front edge.
    pub trailer_front_overhang: f64,
}

impl BodyFootprint {
    /// Standard European tractor-semitrailer envelope for a given body width.
    pub fn standard(width: f64) -> Self {
        Self {
            tractor_length: 6.0,
            tractor_width: width,
            tractor_rear_overhang: 1.0,
            trailer_length: 13.6,
            trailer_width: width,
            trailer_front_overhang: 1.6,
        }
    }

    pub fn validate(&self, params: &VehicleParams) -> Result<()> {
        if self.tractor_width != params.width || self.trailer_width != params.width {
            return Err(Error::Validation(
                "footprint widths must match the vehicle width".into(),
            ));
        }
        if !(self.tractor_length > 0.0 && self.trailer_length > 0.0) {
            return Err(Error::Validation("footprint lengths must be positive".into()));
        }
        if self.tractor_rear_overhang < 0.0 || self.trailer_front_overhang < 0.0 {
            return Err(Error::Validation("footprint overhangs must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One oriented body rectangle, corners in counterclockwise order.
pub type BodyRect = [(f64, f64); 4];

/// Per-timestep body rectangles plus a rasterized union of the covered area.
#[derive(Debug, Clone)]
pub struct SweptPath {
    pub tractor: Vec<BodyRect>,
    pub trailer: Vec<BodyRect>,
    /// Centers of occupied cells that touch free space (the union boundary).
    pub outline: Vec<(f64, f64)>,
    /// Union area from the occupancy count [m^2].
    pub area: f64,
    pub cell: f64,
}

/// Rectangle with longitudinal extent [back, front] from `origin` along the
/// heading `psi` and the given width.
fn oriented_rect(origin: (f64, f64), psi: f64, back: f64, front: f64, width: f64) -> BodyRect {
    let (c, s) = (psi.cos(), psi.sin());
    let h = 0.5 * width;
    let corner = |lon: f64, lat: f64| (origin.0 + lon * c - lat * s, origin.1 + lon * s + lat * c);
    [corner(front, -h), corner(front, h), corner(back, h), corner(back, -h)]
}

fn body_rects(params: &VehicleParams, footprint: &BodyFootprint, state: &VehicleState) -> (BodyRect, BodyRect) {
    let (c1, s1) = (state.psi1.cos(), state.psi1.sin());
    let tractor = oriented_rect(
        (state.x1, state.y1),
        state.psi1,
        -footprint.tractor_rear_overhang,
        footprint.tractor_length - footprint.tractor_rear_overhang,
        footprint.tractor_width,
    );
    let joint = (state.x1 + params.l1b * c1, state.y1 + params.l1b * s1);
    let trailer = oriented_rect(
        joint,
        state.psi2,
        footprint.trailer_front_overhang - footprint.trailer_length,
        footprint.trailer_front_overhang,
        footprint.trailer_width,
    );
    (tractor, trailer)
}

/// Computes per-timestep body rectangles and their rasterized union.
pub fn swept_path(
    log: &SimLog,
    params: &VehicleParams,
    footprint: &BodyFootprint,
) -> Result<SweptPath> {
    footprint.validate(params)?;
    if log.states.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut tractor = Vec::with_capacity(log.states.len());
    let mut trailer = Vec::with_capacity(log.states.len());
    for s in &log.states {
        let (tr, sl) = body_rects(params, footprint, s);
        tractor.push(tr);
        trailer.push(sl);
    }

    let cell = RASTER_CELL;
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for rect in tractor.iter().chain(trailer.iter()) {
        for &(x, y) in rect {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
    }
    let nx = ((max_x - min_x) / cell).ceil() as usize + 2;
    let ny = ((max_y - min_y) / cell).ceil() as usize + 2;
    let mut occupied = vec![false; nx * ny];

    // Mark cells whose center lies in a body rectangle. Each rectangle only
    // touches cells inside its own bounding box.
    let mut mark = |rect: &BodyRect, psi: f64, origin: (f64, f64), back: f64, front: f64, width: f64| {
        let (c, s) = (psi.cos(), psi.sin());
        let h = 0.5 * width;
        let bx0 = rect.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let bx1 = rect.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let by0 = rect.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let by1 = rect.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let i0 = (((bx0 - min_x) / cell).floor().max(0.0)) as usize;
        let i1 = ((((bx1 - min_x) / cell).ceil()) as usize).min(nx - 1);
        let j0 = (((by0 - min_y) / cell).floor().max(0.0)) as usize;
        let j1 = ((((by1 - min_y) / cell).ceil()) as usize).min(ny - 1);
        for i in i0..=i1 {
            let x = min_x + (i as f64 + 0.5) * cell;
            for j in j0..=j1 {
                let y = min_y + (j as f64 + 0.5) * cell;
                let dx = x - origin.0;
                let dy = y - origin.1;
                let lon = dx * c + dy * s;
                let lat = -dx * s + dy * c;
                if lon >= back && lon <= front && lat.abs() <= h {
                    occupied[j * nx + i] = true;
                }
            }
        }
    };
    for (k, state) in log.states.iter().enumerate() {
        let (c1, s1) = (state.psi1.cos(), state.psi1.sin());
        mark(
            &tractor[k],
            state.psi1,
            (state.x1, state.y1),
            -footprint.tractor_rear_overhang,
            footprint.tractor_length - footprint.tractor_rear_overhang,
            footprint.tractor_width,
        );
        let joint = (state.x1 + params.l1b * c1, state.y1 + params.l1b * s1);
        mark(
            &trailer[k],
            state.psi2,
            joint,
            footprint.trailer_front_overhang - footprint.trailer_length,
            footprint.trailer_front_overhang,
            footprint.trailer_width,
        );
    }

    let mut outline = Vec::new();
    let mut count = 0usize;
    for j in 0..ny {
        for i in 0..nx {
            if !occupied[j * nx + i] {
                continue;
            }
            count += 1;
            let boundary = i == 0
                || i == nx - 1
                || j == 0
                || j == ny - 1
                || !occupied[j * nx + i - 1]
                || !occupied[j * nx + i + 1]
                || !occupied[(j - 1) * nx + i]
                || !occupied[(j + 1) * nx + i];
            if boundary {
                outline.push((min_x + (i as f64 + 0.5) * cell, min_y + (j as f64 + 0.5) * cell));
            }
        }
    }
    Ok(SweptPath {
        tractor,
        trailer,
        outline,
        area: count as f64 * cell * cell,
        cell,
    })
}

/// Worst corridor excursion over a log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CorridorViolation {
    pub max_violation: f64,
    /// Log time, anchor index, and arc length of the worst excursion, when
    /// there is one.
    pub worst: Option<(f64, usize, f64)>,
}

/// Recomputes corridor membership from exact orthogonal projections of each
/// active anchor, independent of the progress states.
pub fn corridor_violation(def: &OcpDefinition, log: &SimLog) -> CorridorViolation {
    let half_w = 0.5 * def.params.width;
    let mut max_violation = 0.0f64;
    let mut worst = None;
    for (k, state) in log.states.iter().enumerate() {
        let anchors = anchor_positions(&def.params, state);
        for i in def.active_anchors() {
            let p = anchors.get(i);
            let theta = def.path.project(p, Some(state.theta[i]));
            let ec = contour_lag_errors(&def.path, p, theta).ec;
            let (bl, br) = def.corridor.eval(theta);
            let v = (ec - (bl - half_w)).max((br + half_w) - ec).max(0.0);
            if v > max_violation {
                max_violation = v;
                worst = Some((log.times[k], i, theta));
            }
        }
    }
    CorridorViolation { max_violation, worst }
}

/// Earliest log time with |psi1 - psi2| at or above the threshold.
pub fn detect_jackknife(log: &SimLog, gamma_threshold: f64) -> Result<Option<f64>> {
    if !(gamma_threshold > 0.0) {
        return Err(Error::Validation("jackknife threshold must be positive".into()));
    }
    for (k, s) in log.states.iter().enumerate() {
        if s.gamma1().abs() >= gamma_threshold {
            return Ok(Some(log.times[k]));
        }
    }
    Ok(None)
}

/// A maximal run of consecutive steps on which one constraint is active.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ActivityInterval {
    pub constraint: String,
    pub start: f64,
    pub end: f64,
}

/// Aggregate metrics, all recomputable from the log and problem definition.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub travel_time: f64,
    pub min_v1: f64,
    pub max_v1: f64,
    pub max_abs_ay: f64,
    pub max_abs_gamma1: f64,
    pub max_abs_contour: [f64; N_ANCHORS],
    pub max_abs_lag: [f64; N_ANCHORS],
    pub min_corridor_residual: Option<f64>,
    /// Minimum |v1| after the vehicle first reaches 90% of the speed limit;
    /// the speed the controller holds through the tightest part of the run.
    pub min_corner_speed: Option<f64>,
    pub jackknife_flag: bool,
    pub activity: Vec<ActivityInterval>,
}

fn merge_intervals(name: &str, times: &[f64], active: &[bool]) -> Vec<ActivityInterval> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, &a) in active.iter().enumerate() {
        match (a, start) {
            (true, None) => start = Some(times[k]),
            (false, Some(s)) => {
                out.push(ActivityInterval { constraint: name.into(), start: s, end: times[k - 1] });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(ActivityInterval {
            constraint: name.into(),
            start: s,
            end: *times.last().unwrap(),
        });
    }
    out
}

pub fn compute_metrics(def: &OcpDefinition, log: &SimLog) -> Result<MetricsReport> {
    if log.states.is_empty() {
        return Err(Error::EmptyLog);
    }
    let n = log.states.len();
    let travel_time = log.duration();
    let mut min_v1 = f64::INFINITY;
    let mut max_v1 = f64::NEG_INFINITY;
    let mut max_abs_ay = 0.0f64;
    let mut max_abs_gamma1 = 0.0f64;
    for s in &log.states {
        min_v1 = min_v1.min(s.v1);
        max_v1 = max_v1.max(s.v1);
        max_abs_gamma1 = max_abs_gamma1.max(s.gamma1().abs());
    }
    for &ay in &log.lateral_accel {
        max_abs_ay = max_abs_ay.max(ay.abs());
    }

    let mut max_abs_contour = [0.0f64; N_ANCHORS];
    let mut max_abs_lag = [0.0f64; N_ANCHORS];
    for e in &log.errors {
        for i in 0..N_ANCHORS {
            max_abs_contour[i] = max_abs_contour[i].max(e[i].ec.abs());
            max_abs_lag[i] = max_abs_lag[i].max(e[i].el.abs());
        }
    }

    let min_corridor_residual = log
        .corridor
        .iter()
        .flat_map(|row| row.iter().flat_map(|&(lo, up)| [lo, up]))
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.min(r))));

    let v_ref = def.limits.v_min.abs().max(def.limits.v_max.abs());
    let min_corner_speed = log
        .states
        .iter()
        .position(|s| s.v1.abs() >= 0.9 * v_ref)
        .map(|k| log.states[k..].iter().map(|s| s.v1.abs()).fold(f64::INFINITY, f64::min));

    let jackknife_flag = detect_jackknife(log, DEFAULT_JACKKNIFE_THRESHOLD)?.is_some();

    // Constraint-activity timeline from per-step residuals.
    let mut activity = Vec::new();
    for (slot, i) in def.active_anchors().into_iter().enumerate() {
        let active: Vec<bool> = log
            .corridor
            .iter()
            .map(|row| row[slot].0.min(row[slot].1) < ACTIVITY_TOLERANCE)
            .collect();
        activity.extend(merge_intervals(&format!("corridor_anchor{i}"), &log.times, &active));
    }
    let ay_active: Vec<bool> = log
        .lateral_accel
        .iter()
        .map(|&ay| def.limits.ay_max - ay.abs() < ACTIVITY_TOLERANCE)
        .collect();
    activity.extend(merge_intervals("lateral_acceleration", &log.times, &ay_active));
    let v_active: Vec<bool> = log
        .states
        .iter()
        .map(|s| {
            (def.limits.v_max - s.v1).min(s.v1 - def.limits.v_min) < ACTIVITY_TOLERANCE
        })
        .collect();
    activity.extend(merge_intervals("velocity", &log.times, &v_active));
    if n > 1 {
        let a_active: Vec<bool> = log
            .inputs
            .iter()
            .map(|u| def.limits.a_max - u.a1.abs() < ACTIVITY_TOLERANCE)
            .collect();
        activity.extend(merge_intervals("acceleration", &log.times[..n - 1], &a_active));
    }
    let d_active: Vec<bool> = log
        .states
        .iter()
        .map(|s| def.limits.delta_max - s.delta0.abs() < ACTIVITY_TOLERANCE)
        .collect();
    activity.extend(merge_intervals("steering", &log.times, &d_active));

    Ok(MetricsReport {
        travel_time,
        min_v1,
        max_v1,
        max_abs_ay,
        max_abs_gamma1,
        max_abs_contour,
        max_abs_lag,
        min_corridor_residual,
        min_corner_speed,
        jackknife_flag,
        activity,
    })
}

/// Worst-case gap between the progress states and exact projections over a
/// state sequence: (max |theta_i - projection|, max |theta-based contour -
/// exact lateral offset|) over the tracked anchors.
pub fn projection_gaps(
    path: &ReferencePath,
    params: &VehicleParams,
    states: &[VehicleState],
    mask: [bool; N_ANCHORS],
) -> (f64, f64) {
    let mut max_theta_gap = 0.0f64;
    let mut max_ec_gap = 0.0f64;
    for s in states {
        let anchors = anchor_positions(params, s);
        for i in 0..N_ANCHORS {
            if !mask[i] {
                continue;
            }
            let p = anchors.get(i);
            let exact = path.project(p, Some(s.theta[i]));
            max_theta_gap = max_theta_gap.max((s.theta[i] - exact).abs());
            let ec_theta = contour_lag_errors(path, p, s.theta[i]).ec;
            let ec_exact = contour_lag_errors(path, p, exact).ec;
            max_ec_gap = max_ec_gap.max((ec_theta - ec_exact).abs());
        }
    }
    (max_theta_gap, max_ec_gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{corridor_residuals, Limits, Weights};
    use crate::path::{Corridor, Waypoint};
    use crate::sim::TerminationReason;
    use crate::vehicle::ControlInput;

    fn table1_params() -> VehicleParams {
        VehicleParams { l1: 4.0, l1b: 0.6, l2: 8.0, width: 2.5 }
    }

    fn straight_def(len: f64) -> OcpDefinition {
        let wps: Vec<Waypoint> = (0..=(len as usize / 10))
            .map(|i| Waypoint::new(10.0 * i as f64, 0.0))
            .collect();
        let path = ReferencePath::build(&wps).unwrap();
        let corridor = Corridor::uniform(path.total_length(), 3.5, -2.5);
        OcpDefinition {
            n: 10,
            dt: 0.2,
            weights: Weights::default(),
            limits: Limits::forward(),
            params: table1_params(),
            path,
            corridor,
            anchor_mask: [true; N_ANCHORS],
            corridor_slack_weight: None,
        }
    }

    /// Builds a log around a state sequence, recomputing the diagnostics.
    fn log_from_states(def: &OcpDefinition, states: Vec<VehicleState>) -> SimLog {
        let n = states.len();
        let errors = states
            .iter()
            .map(|s| {
                let anchors = anchor_positions(&def.params, s);
                std::array::from_fn(|i| {
                    contour_lag_errors(&def.path, anchors.get(i), s.theta[i])
                })
            })
            .collect();
        let corridor = states.iter().map(|s| corridor_residuals(def, s)).collect();
        let lateral_accel = states
            .iter()
            .map(|s| s.v1 * s.v1 * s.delta0.tan() / def.params.l1)
            .collect();
        SimLog {
            dt: def.dt,
            times: (0..n).map(|k| k as f64 * def.dt).collect(),
            states,
            inputs: vec![ControlInput::default(); n.saturating_sub(1)],
            errors,
            corridor,
            lateral_accel,
            plans: Vec::new(),
            termination: TerminationReason::GoalReached,
        }
    }

    fn aligned_state(x: f64, y: f64) -> VehicleState {
        VehicleState {
            x1: x,
            y1: y,
            psi1: 0.0,
            psi2: 0.0,
            v1: 0.0,
            delta0: 0.0,
            theta: [x + 4.0, x, x - 7.4],
        }
    }

    #[test]
    fn footprint_width_mismatch_rejected() {
        let params = table1_params();
        assert!(BodyFootprint::standard(2.5).validate(&params).is_ok());
        assert!(BodyFootprint::standard(2.0).validate(&params).is_err());
    }

    #[test]
    fn stationary_sweep_equals_footprint() {
        // Axis-aligned, psi1 = psi2 = 0: tractor spans [-1, 5] and the
        // trailer [-11.4, 2.2] from the rear axle, so the union is a single
        // 16.4 m x 2.5 m rectangle.
        let def = straight_def(100.0);
        let log = log_from_states(&def, vec![aligned_state(50.0, 0.0)]);
        let sweep = swept_path(&log, &def.params, &BodyFootprint::standard(2.5)).unwrap();
        let exact = 16.4 * 2.5;
        assert!(
            (sweep.area - exact).abs() <= 0.03 * exact,
            "area {} vs {}",
            sweep.area,
            exact
        );
        for &(_, y) in &sweep.outline {
            assert!(y.abs() <= 1.25 + RASTER_CELL);
        }
    }

    #[test]
    fn straight_sweep_is_a_rectangle() {
        let def = straight_def(100.0);
        let travel = 20.0;
        let states = (0..=40)
            .map(|k| aligned_state(30.0 + travel * k as f64 / 40.0, 0.0))
            .collect();
        let log = log_from_states(&def, states);
        let sweep = swept_path(&log, &def.params, &BodyFootprint::standard(2.5)).unwrap();
        let exact = (travel + 16.4) * 2.5;
        assert!(
            (sweep.area - exact).abs() <= 0.03 * exact,
            "area {} vs {}",
            sweep.area,
            exact
        );
        for &(_, y) in &sweep.outline {
            assert!(y.abs() <= 1.25 + RASTER_CELL);
        }
    }

    #[test]
    fn turning_sweep_exceeds_straight_sweep() {
        let def = straight_def(100.0);
        // Quarter circle of radius 12 for the rear axle, rigid articulation.
        let r = 12.0;
        let steps = 60;
        let arc_states: Vec<VehicleState> = (0..=steps)
            .map(|k| {
                let phi = std::f64::consts::FRAC_PI_2 * k as f64 / steps as f64;
                VehicleState {
                    x1: 30.0 + r * phi.sin(),
                    y1: r * (1.0 - phi.cos()),
                    psi1: phi,
                    psi2: phi,
                    v1: 0.0,
                    delta0: 0.0,
                    theta: [34.0, 30.0, 22.0],
                }
            })
            .collect();
        let arc_len = r * std::f64::consts::FRAC_PI_2;
        let straight_states: Vec<VehicleState> = (0..=steps)
            .map(|k| aligned_state(30.0 + arc_len * k as f64 / steps as f64, 0.0))
            .collect();
        let fp = BodyFootprint::standard(2.5);
        let arc_area = swept_path(&log_from_states(&def, arc_states), &def.params, &fp)
            .unwrap()
            .area;
        let straight_area =
            swept_path(&log_from_states(&def, straight_states), &def.params, &fp)
                .unwrap()
                .area;
        assert!(
            arc_area > straight_area,
            "arc {arc_area} vs straight {straight_area}"
        );
    }

    #[test]
    fn corridor_violation_zero_when_feasible() {
        let def = straight_def(100.0);
        let log = log_from_states(&def, vec![aligned_state(40.0, 0.0), aligned_state(42.0, 0.0)]);
        let v = corridor_violation(&def, &log);
        assert_eq!(v.max_violation, 0.0);
        assert!(v.worst.is_none());
    }

    #[test]
    fn corridor_violation_offset_arithmetic() {
        // Offset 3.0 m against b_l = 3.5 with half-width 1.25: the allowed
        // lateral offset is 2.25, so the excursion is 0.75.
        let def = straight_def(100.0);
        let log = log_from_states(&def, vec![aligned_state(40.0, 3.0)]);
        let v = corridor_violation(&def, &log);
        assert!((v.max_violation - 0.75).abs() < 1e-9, "violation {}", v.max_violation);
        let (t, _, _) = v.worst.unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn jackknife_detection_cases() {
        let def = straight_def(100.0);
        let straight = log_from_states(&def, vec![aligned_state(40.0, 0.0); 5]);
        assert_eq!(detect_jackknife(&straight, DEFAULT_JACKKNIFE_THRESHOLD).unwrap(), None);

        // psi2 ramps down 0.2 rad per step; gamma crosses 1.0 at step 5.
        let folding: Vec<VehicleState> = (0..10)
            .map(|k| VehicleState {
                psi2: -0.2 * k as f64,
                ..aligned_state(40.0, 0.0)
            })
            .collect();
        let log = log_from_states(&def, folding);
        let t = detect_jackknife(&log, 1.0).unwrap().unwrap();
        assert!((t - 5.0 * def.dt).abs() < 1e-12);
        // A tighter threshold fires earlier, never later.
        let t_tight = detect_jackknife(&log, 0.01).unwrap().unwrap();
        assert!(t_tight <= t);
        assert!(detect_jackknife(&log, 0.0).is_err());
    }

    #[test]
    fn metrics_reject_empty_log() {
        let def = straight_def(100.0);
        let log = log_from_states(&def, Vec::new());
        assert!(matches!(compute_metrics(&def, &log), Err(Error::EmptyLog)));
    }

    #[test]
    fn metrics_arithmetic_on_synthetic_ramp() {
        let def = straight_def(100.0);
        let v_max = def.limits.v_max;
        // Ramp to v_max in 5 steps, then hold it for 5 more.
        let states: Vec<VehicleState> = (0..10)
            .map(|k| VehicleState {
                v1: v_max * ((k as f64) / 5.0).min(1.0),
                ..aligned_state(30.0 + k as f64, 0.0)
            })
            .collect();
        let log = log_from_states(&def, states);
        let m = compute_metrics(&def, &log).unwrap();
        assert_eq!(m.travel_time, 9.0 * def.dt);
        assert_eq!(m.min_v1, 0.0);
        assert_eq!(m.max_v1, v_max);
        assert_eq!(m.max_abs_ay, 0.0);
        assert_eq!(m.max_abs_gamma1, 0.0);
        assert!(!m.jackknife_flag);
        // min corner speed: v reaches 0.9 v_max at step 5 and holds v_max.
        assert!((m.min_corner_speed.unwrap() - v_max).abs() < 1e-12);
        // Velocity bound active at t = 0 (standing start sits on v_min) and
        // again from step 5 to the end (cruise at v_max).
        let vel: Vec<&ActivityInterval> =
            m.activity.iter().filter(|a| a.constraint == "velocity").collect();
        assert_eq!(vel.len(), 2);
        assert_eq!(vel[0].start, 0.0);
        assert_eq!(vel[0].end, 0.0);
        assert!((vel[1].start - 5.0 * def.dt).abs() < 1e-12);
        assert!((vel[1].end - 9.0 * def.dt).abs() < 1e-12);
        // Corridor stays comfortably inactive on the centerline.
        assert!(m.activity.iter().all(|a| !a.constraint.starts_with("corridor")));
        assert!(m.min_corridor_residual.unwrap() > 1.0);
    }

    #[test]
    fn projection_gaps_vanish_on_path() {
        let def = straight_def(100.0);
        let states = vec![aligned_state(30.0, 0.0), aligned_state(45.0, 0.0)];
        let (dtheta, dec) = projection_gaps(&def.path, &def.params, &states, [true; 3]);
        assert!(dtheta < 1e-9, "theta gap {dtheta}");
        assert!(dec < 1e-9, "ec gap {dec}");
    }

    #[test]
    fn metrics_report_serializes() {
        let def = straight_def(100.0);
        let log = log_from_states(&def, vec![aligned_state(40.0, 0.0)]);
        let m = compute_metrics(&def, &log).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("travel_time"));
        assert!(json.contains("max_abs_ay"));
    }
}
