//! Scenario files, configuration overrides, and trace/metrics serialization.
//!
//! Scenario files are TOML with unit-suffixed keys (`v_max_kmh`, `psi1_deg`);
//! the in-memory representation is strictly SI. Every omitted field falls
//! back to the standard tractor-semitrailer defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::BodyFootprint;
use crate::error::{Error, Result};
use crate::nlp::SolverConfig;
use crate::ocp::{
    contour_lag_errors, corridor_residuals, OcpDefinition, PlannedTrajectory, Weights,
};
use crate::path::{BoundSample, Corridor, ReferencePath, Waypoint};
use crate::sim::{PlanRecord, SimConfig, SimLog, TerminationReason};
use crate::vehicle::{
    anchor_positions, ControlInput, VehicleParams, VehicleState, N_ANCHORS,
};

const KMH: f64 = 1.0 / 3.6;

/// Fully resolved scenario, ready to plan or simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub reverse: bool,
    pub footprint: BodyFootprint,
    pub def: OcpDefinition,
    /// Initial state; progress entries are filled by `initialize_progress`.
    pub start: VehicleState,
    pub sim: SimConfig,
    pub solver: SolverConfig,
}

/// On-disk scenario schema. All units are explicit in the key names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default = "default_direction")]
    pub direction: String,
    #[serde(default)]
    pub vehicle: VehicleSection,
    pub initial_state: InitialStateSection,
    #[serde(default)]
    pub horizon: HorizonSection,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub limits: LimitsSection,
    #[serde(default = "default_anchors")]
    pub anchors: [bool; N_ANCHORS],
    pub path: Vec<WaypointSection>,
    pub corridor: Vec<CorridorSection>,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub solver: SolverSection,
}

fn default_direction() -> String {
    "forward".into()
}

fn default_anchors() -> [bool; N_ANCHORS] {
    [true; N_ANCHORS]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleSection {
    pub l1_m: f64,
    pub l1b_m: f64,
    pub l2_m: f64,
    pub width_m: f64,
    pub footprint: Option<FootprintSection>,
}

impl Default for VehicleSection {
    fn default() -> Self {
        Self { l1_m: 4.0, l1b_m: 0.6, l2_m: 8.0, width_m: 2.5, footprint: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FootprintSection {
    pub tractor_length_m: f64,
    pub tractor_rear_overhang_m: f64,
    pub trailer_length_m: f64,
    pub trailer_front_overhang_m: f64,
}

impl Default for FootprintSection {
    fn default() -> Self {
        Self {
            tractor_length_m: 6.0,
            tractor_rear_overhang_m: 1.0,
            trailer_length_m: 13.6,
            trailer_front_overhang_m: 1.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialStateSection {
    pub x1_m: f64,
    pub y1_m: f64,
    pub psi1_deg: f64,
    /// Defaults to the tractor heading (straight rig).
    pub psi2_deg: Option<f64>,
    pub v1_kmh: f64,
    pub delta0_deg: f64,
}

impl Default for InitialStateSection {
    fn default() -> Self {
        Self { x1_m: 0.0, y1_m: 0.0, psi1_deg: 0.0, psi2_deg: None, v1_kmh: 0.0, delta0_deg: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonSection {
    pub n: usize,
    pub dt_s: f64,
}

impl Default for HorizonSection {
    fn default() -> Self {
        Self { n: 75, dt_s: 0.2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub qc: [f64; N_ANCHORS],
    pub ql: [f64; N_ANCHORS],
    pub qv: [f64; N_ANCHORS],
    pub qa: f64,
    pub qdelta: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = Weights::default();
        Self { qc: w.qc, ql: w.ql, qv: w.qv, qa: w.qa, qdelta: w.qdelta }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LimitsSection {
    pub delta_max_deg: Option<f64>,
    pub ddelta_max_deg_s: Option<f64>,
    /// Defaults depend on `direction`: [0, 15] km/h forward, [-5, 0] reverse.
    pub v_min_kmh: Option<f64>,
    pub v_max_kmh: Option<f64>,
    pub a_max_ms2: Option<f64>,
    pub ay_max_ms2: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSection {
    pub x_m: f64,
    pub y_m: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorSection {
    pub s_m: f64,
    pub b_l_m: f64,
    pub b_r_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub replan_fraction: f64,
    pub max_sim_time_s: f64,
    /// Rear-axle arc length at which the run counts as finished; unset means
    /// run until `max_sim_time_s`.
    pub goal_progress_m: Option<f64>,
    pub plant_integration: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            replan_fraction: s.replan_fraction,
            max_sim_time_s: s.max_sim_time,
            goal_progress_m: None,
            plant_integration: s.plant_integration,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    pub feasibility_tolerance: f64,
    pub initial_barrier: f64,
    pub iteration_log: Option<String>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let c = SolverConfig::default();
        Self {
            max_iterations: c.max_iterations,
            kkt_tolerance: c.kkt_tolerance,
            feasibility_tolerance: c.feasibility_tolerance,
            initial_barrier: c.initial_barrier,
            iteration_log: None,
        }
    }
}

impl ScenarioFile {
    /// Fills every optional field with its effective value, so the serialized
    /// form is the complete configuration actually used.
    pub fn normalized(mut self) -> Self {
        self.vehicle.footprint.get_or_insert_with(FootprintSection::default);
        let psi1 = self.initial_state.psi1_deg;
        self.initial_state.psi2_deg.get_or_insert(psi1);
        let reverse = self.direction == "reverse";
        self.limits.delta_max_deg.get_or_insert(40.0);
        self.limits.ddelta_max_deg_s.get_or_insert(20.0);
        self.limits.v_min_kmh.get_or_insert(if reverse { -5.0 } else { 0.0 });
        self.limits.v_max_kmh.get_or_insert(if reverse { 0.0 } else { 15.0 });
        self.limits.a_max_ms2.get_or_insert(0.5);
        self.limits.ay_max_ms2.get_or_insert(1.5);
        self
    }

    /// Validates and converts to SI-unit runtime types.
    pub fn resolve(&self) -> Result<Scenario> {
        let file = self.clone().normalized();
        let reverse = match file.direction.as_str() {
            "forward" => false,
            "reverse" => true,
            other => {
                return Err(Error::Validation(format!(
                    "direction must be \"forward\" or \"reverse\", got \"{other}\""
                )))
            }
        };
        let params = VehicleParams {
            l1: file.vehicle.l1_m,
            l1b: file.vehicle.l1b_m,
            l2: file.vehicle.l2_m,
            width: file.vehicle.width_m,
        };
        params.validate()?;
        let fp = file.vehicle.footprint.as_ref().unwrap();
        let footprint = BodyFootprint {
            tractor_length: fp.tractor_length_m,
            tractor_width: params.width,
            tractor_rear_overhang: fp.tractor_rear_overhang_m,
            trailer_length: fp.trailer_length_m,
            trailer_width: params.width,
            trailer_front_overhang: fp.trailer_front_overhang_m,
        };
        footprint.validate(&params)?;

        let waypoints: Vec<Waypoint> =
            file.path.iter().map(|w| Waypoint::new(w.x_m, w.y_m)).collect();
        let path = ReferencePath::build(&waypoints)?;
        let samples: Vec<BoundSample> = file
            .corridor
            .iter()
            .map(|c| BoundSample { s: c.s_m, b_l: c.b_l_m, b_r: c.b_r_m })
            .collect();
        let corridor = Corridor::new(&samples)?;

        let l = &file.limits;
        let limits = crate::ocp::Limits {
            delta_max: l.delta_max_deg.unwrap().to_radians(),
            ddelta_max: l.ddelta_max_deg_s.unwrap().to_radians(),
            v_min: l.v_min_kmh.unwrap() * KMH,
            v_max: l.v_max_kmh.unwrap() * KMH,
            a_max: l.a_max_ms2.unwrap(),
            ay_max: l.ay_max_ms2.unwrap(),
        };
        if reverse && !(limits.v_max == 0.0 && limits.v_min < 0.0) {
            return Err(Error::Validation(
                "reverse scenarios require v_min_kmh < 0 and v_max_kmh = 0".into(),
            ));
        }
        if !reverse && !(limits.v_min >= 0.0 && limits.v_max > 0.0) {
            return Err(Error::Validation(
                "forward scenarios require 0 <= v_min_kmh < v_max_kmh".into(),
            ));
        }

        let w = &file.weights;
        let def = OcpDefinition {
            n: file.horizon.n,
            dt: file.horizon.dt_s,
            weights: Weights { qc: w.qc, ql: w.ql, qv: w.qv, qa: w.qa, qdelta: w.qdelta },
            limits,
            params,
            path,
            corridor,
            anchor_mask: file.anchors,
            corridor_slack_weight: None,
        };
        def.validate()?;

        let init = &file.initial_state;
        let start = VehicleState {
            x1: init.x1_m,
            y1: init.y1_m,
            psi1: init.psi1_deg.to_radians(),
            psi2: init.psi2_deg.unwrap().to_radians(),
            v1: init.v1_kmh * KMH,
            delta0: init.delta0_deg.to_radians(),
            theta: [0.0; N_ANCHORS],
        };

        let sim = SimConfig {
            replan_fraction: file.sim.replan_fraction,
            max_sim_time: file.sim.max_sim_time_s,
            goal_progress: file.sim.goal_progress_m.unwrap_or(f64::INFINITY),
            plant_integration: file.sim.plant_integration,
        };
        sim.validate()?;

        let s = &file.solver;
        let solver = SolverConfig {
            max_iterations: s.max_iterations,
            kkt_tolerance: s.kkt_tolerance,
            feasibility_tolerance: s.feasibility_tolerance,
            initial_barrier: s.initial_barrier,
            iteration_log: s.iteration_log.as_ref().map(PathBuf::from),
            ..SolverConfig::default()
        };

        Ok(Scenario {
            name: file.name.clone(),
            reverse,
            footprint,
            def,
            start,
            sim,
            solver,
        })
    }
}

/// Expands short sweep keys (`qc2`) into full override paths
/// (`weights.qc.2`). Unknown keys pass through unchanged.
pub fn expand_alias(key: &str) -> String {
    if key.len() == 3 {
        let (family, idx) = key.split_at(2);
        if matches!(family, "qc" | "ql" | "qv") && idx.chars().all(|c| c.is_ascii_digit()) {
            return format!("weights.{family}.{idx}");
        }
    }
    key.to_string()
}

/// Applies one `path.to.field=value` override to a parsed document. Array
/// segments are numeric indices; the target must already exist for arrays.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override \"{spec}\" is not key=value")))?;
    let key = expand_alias(key.trim());
    let value = parse_toml_value(raw.trim())?;

    let segments: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for (si, seg) in segments.iter().enumerate() {
        let last = si + 1 == segments.len();
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = node
                .as_array_mut()
                .ok_or_else(|| Error::Parse(format!("\"{key}\": {seg} indexes a non-array")))?;
            let slot = arr
                .get_mut(idx)
                .ok_or_else(|| Error::Parse(format!("\"{key}\": index {idx} out of range")))?;
            if last {
                *slot = value;
                return Ok(());
            }
            node = slot;
        } else {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Parse(format!("\"{key}\": {seg} is not a table")))?;
            if last {
                table.insert(seg.to_string(), value);
                return Ok(());
            }
            node = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    unreachable!("override paths have at least one segment")
}

fn parse_toml_value(raw: &str) -> Result<toml::Value> {
    let doc: toml::Value = toml::from_str(&format!("v = {raw}"))
        .or_else(|_| toml::from_str(&format!("v = \"{raw}\"")))
        .map_err(|e| Error::Parse(format!("bad override value \"{raw}\": {e}")))?;
    Ok(doc.get("v").cloned().unwrap())
}

/// Parses a scenario file, applies `--set` overrides, and resolves it.
/// Returns the runtime scenario plus the normalized file for the effective
/// configuration sidecar.
pub fn load_scenario(path: &Path, overrides: &[String]) -> Result<(Scenario, ScenarioFile)> {
    let text = std::fs::read_to_string(path)?;
    load_scenario_str(&text, overrides)
}

pub fn load_scenario_str(text: &str, overrides: &[String]) -> Result<(Scenario, ScenarioFile)> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    // Overrides run against the re-serialized document so array targets like
    // weights.qc.2 exist even when the file leaves the section to defaults.
    // Direction-dependent defaults are still unresolved at this point, so an
    // override may change the direction and get the matching limits.
    let mut doc = toml::Value::try_from(file)
        .map_err(|e| Error::Parse(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let file: ScenarioFile = doc.try_into().map_err(|e: toml::de::Error| {
        Error::Parse(e.to_string())
    })?;
    let scenario = file.resolve()?;
    Ok((scenario, file.normalized()))
}

/// Serializes the effective configuration as TOML.
pub fn effective_config_toml(file: &ScenarioFile) -> Result<String> {
    toml::to_string_pretty(file).map_err(|e| Error::Parse(e.to_string()))
}

/// Fixed trace schema; one row per planning step.
pub const TRACE_HEADER: &str = "t,x1,y1,psi1,psi2,v1,delta0,theta0,theta1,theta2,\
a1,ddelta0,vtheta0,vtheta1,vtheta2,ec0,el0,ec1,el1,ec2,el2,ay,corridor_min,plan";

fn fmt(v: f64) -> String {
    // Nine significant digits, bit-stable for identical inputs.
    format!("{v:.8e}")
}

/// Plan index active at time `t` (the latest plan computed at or before `t`).
fn plan_index(plans: &[PlanRecord], t: f64) -> Option<usize> {
    plans
        .iter()
        .rposition(|p| p.time <= t + 1e-9)
}

/// Writes the closed-loop trace as CSV. The final row carries no applied
/// input, so its input columns are empty.
pub fn write_trace(log: &SimLog, dest: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (log.states.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (k, s) in log.states.iter().enumerate() {
        let mut row: Vec<String> = vec![
            fmt(log.times[k]),
            fmt(s.x1),
            fmt(s.y1),
            fmt(s.psi1),
            fmt(s.psi2),
            fmt(s.v1),
            fmt(s.delta0),
            fmt(s.theta[0]),
            fmt(s.theta[1]),
            fmt(s.theta[2]),
        ];
        if let Some(u) = log.inputs.get(k) {
            row.extend([
                fmt(u.a1),
                fmt(u.ddelta0),
                fmt(u.vtheta[0]),
                fmt(u.vtheta[1]),
                fmt(u.vtheta[2]),
            ]);
        } else {
            row.extend(std::iter::repeat(String::new()).take(5));
        }
        for i in 0..N_ANCHORS {
            row.push(fmt(log.errors[k][i].ec));
            row.push(fmt(log.errors[k][i].el));
        }
        row.push(fmt(log.lateral_accel[k]));
        let cmin = log.corridor[k]
            .iter()
            .map(|&(lo, up)| lo.min(up))
            .fold(f64::INFINITY, f64::min);
        row.push(if cmin.is_finite() { fmt(cmin) } else { String::new() });
        row.push(match plan_index(&log.plans, log.times[k]) {
            Some(i) => i.to_string(),
            None => String::new(),
        });
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(dest, out)?;
    Ok(())
}

/// Reads back the state/input columns of a trace.
pub fn read_trace(src: &Path) -> Result<(Vec<f64>, Vec<VehicleState>, Vec<ControlInput>)> {
    let text = std::fs::read_to_string(src)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRACE_HEADER => {}
        _ => return Err(Error::Parse("trace header does not match the schema".into())),
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (ln, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != TRACE_HEADER.split(',').count() {
            return Err(Error::Parse(format!("trace row {}: wrong column count", ln + 2)));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| Error::Parse(format!("trace row {}: bad number \"{}\"", ln + 2, cols[i])))
        };
        times.push(num(0)?);
        states.push(VehicleState {
            x1: num(1)?,
            y1: num(2)?,
            psi1: num(3)?,
            psi2: num(4)?,
            v1: num(5)?,
            delta0: num(6)?,
            theta: [num(7)?, num(8)?, num(9)?],
        });
        if !cols[10].is_empty() {
            inputs.push(ControlInput {
                a1: num(10)?,
                ddelta0: num(11)?,
                vtheta: [num(12)?, num(13)?, num(14)?],
            });
        }
    }
    Ok((times, states, inputs))
}

/// Rebuilds a log around externally supplied states, recomputing every
/// diagnostic column from the problem definition.
pub fn rebuild_log(
    def: &OcpDefinition,
    times: Vec<f64>,
    states: Vec<VehicleState>,
    inputs: Vec<ControlInput>,
) -> Result<SimLog> {
    if times.len() != states.len() {
        return Err(Error::DimensionMismatch("one time per state required".into()));
    }
    if !states.is_empty() && inputs.len() != states.len() - 1 {
        return Err(Error::DimensionMismatch("one input per transition required".into()));
    }
    let errors = states
        .iter()
        .map(|s| {
            let anchors = anchor_positions(&def.params, s);
            std::array::from_fn(|i| contour_lag_errors(&def.path, anchors.get(i), s.theta[i]))
        })
        .collect();
    let corridor = states.iter().map(|s| corridor_residuals(def, s)).collect();
    let lateral_accel = states
        .iter()
        .map(|s| s.v1 * s.v1 * s.delta0.tan() / def.params.l1)
        .collect();
    Ok(SimLog {
        dt: def.dt,
        times,
        states,
        inputs,
        errors,
        corridor,
        lateral_accel,
        plans: Vec::new(),
        termination: TerminationReason::MaxTime,
    })
}

/// Presents a single plan as a log so it shares the trace schema.
pub fn plan_log(def: &OcpDefinition, plan: &PlannedTrajectory) -> Result<SimLog> {
    let times = (0..plan.states.len()).map(|j| j as f64 * def.dt).collect();
    rebuild_log(def, times, plan.states.clone(), plan.inputs.clone())
}
