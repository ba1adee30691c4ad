//! Scenario files, the simulate/predict/plan pipelines and their CSV exports.
//!
//! A scenario is one JSON document describing one reproducible run. Units are
//! SI throughout: meters, radians, seconds.

use std::fs;
use std::path::Path;

use nalgebra::{DVector, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpg::{CpgParams, CpgState, PhaseCoupling, DEFAULT_GAMMA, DEFAULT_MU};
use crate::error::{Error, Result};
use crate::gaits;
use crate::motion_model::{ModelOptions, ModelState, MotionModel};
use crate::nmpc::{self, BoundMargins, Corridor, LogEntry, NmpcProblem, NmpcSolution, ParamBounds, Segment, SolverSettings};
use crate::robot_model::{RobotConfig, RobotState};
use crate::rom::{RomState, DEFAULT_EPSILON};

pub const DEFAULT_DT: f64 = 0.005;
pub const DEFAULT_DURATION: f64 = 10.0;

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn default_duration() -> f64 {
    DEFAULT_DURATION
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_mu() -> f64 {
    DEFAULT_MU
}

/// How the initial pose is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Rest the synchronized robot on the ground with a level reduced-order
    /// frame, CoM at `com_xy` and body axis along `heading`.
    #[default]
    Leveled,
    /// Use `p_b` and `phi_b` verbatim.
    AsGiven,
}

/// Initial robot and oscillator state. Joint angles always start at the
/// oscillator output, so only the base pose is configurable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    pub placement: Placement,
    /// m, used by `leveled`.
    pub com_xy: Vector2<f64>,
    /// rad about world z, used by `leveled`.
    pub heading: f64,
    /// m, used by `as_given`.
    pub p_b: Vector3<f64>,
    /// rad, XYZ Euler angles, used by `as_given`.
    pub phi_b: Vector3<f64>,
    /// rad, phase of the first oscillator; the rest follow the offsets.
    pub theta0: f64,
    /// rad, half-width of a uniform random perturbation of every initial
    /// phase, drawn from the scenario seed.
    pub phase_jitter: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        Self {
            placement: Placement::Leveled,
            com_xy: Vector2::zeros(),
            heading: 0.0,
            p_b: Vector3::zeros(),
            phi_b: Vector3::zeros(),
            theta0: 0.0,
            phase_jitter: 0.0,
        }
    }
}

/// Oscillator parameters: a named preset, explicit values, or a preset with
/// some fields overridden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpgSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// rad, one per joint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<Vec<f64>>,
    /// rad/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    /// rad, one per consecutive joint pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_offsets: Option<Vec<f64>>,
    /// 1/s.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// 1/s.
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub coupling: PhaseCoupling,
}

impl CpgSpec {
    pub fn preset(name: &str) -> Self {
        Self {
            preset: Some(name.to_string()),
            amplitude: None,
            omega: None,
            phase_offsets: None,
            gamma: DEFAULT_GAMMA,
            mu: DEFAULT_MU,
            coupling: PhaseCoupling::Laplacian,
        }
    }

    pub fn resolve(&self) -> Result<CpgParams> {
        let base = match &self.preset {
            Some(name) => Some(gaits::preset(name)?.params),
            None => None,
        };
        let missing = |field: &str| Error::invalid(format!("cpg.{field}"), "required when no preset is given");
        let amplitude = match (&self.amplitude, &base) {
            (Some(a), _) => DVector::from_vec(a.clone()),
            (None, Some(b)) => b.amplitude.clone(),
            (None, None) => return Err(missing("amplitude")),
        };
        let omega = match (self.omega, &base) {
            (Some(w), _) => w,
            (None, Some(b)) => b.omega,
            (None, None) => return Err(missing("omega")),
        };
        let phase_offsets = match (&self.phase_offsets, &base) {
            (Some(p), _) => DVector::from_vec(p.clone()),
            (None, Some(b)) => b.phase_offsets.clone(),
            (None, None) => return Err(missing("phase_offsets")),
        };
        let params = CpgParams {
            amplitude,
            omega,
            phase_offsets,
            gamma: self.gamma,
            mu: self.mu,
            coupling: self.coupling,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictOptions {
    /// Prediction steps per horizon at the scenario `dt`.
    pub horizon_steps: usize,
    /// Plant steps per prediction step; 1 compares the model with itself.
    pub plant_substeps: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            horizon_steps: 20,
            plant_substeps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOptions {
    pub horizon_steps: usize,
    /// s of simulated time each solution is applied before re-solving.
    pub replan_interval: f64,
    /// m, distance of the executed CoM to the goal that ends the run.
    pub goal_tolerance: f64,
    /// m, the planner sees every corridor segment shrunk by this amount.
    pub corridor_margin: f64,
    /// Explicit parameter box; when absent it is built from `margins`
    /// around the scenario gait.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<ParamBounds>,
    pub margins: BoundMargins,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub solver: SolverSettings,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            horizon_steps: 20,
            replan_interval: 0.5,
            goal_tolerance: 0.1,
            corridor_margin: 0.01,
            bounds: None,
            margins: BoundMargins::default(),
            weights: None,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub robot: RobotConfig,
    #[serde(default)]
    pub initial_state: InitialState,
    pub cpg: CpgSpec,
    #[serde(default)]
    pub model: ModelOptions,
    /// s.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// s.
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// m, contact threshold above the lowest point of the box.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corridor: Option<Corridor>,
    /// m, desired CoM as x-y or x-y-z.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec<f64>>,
    #[serde(default)]
    pub predict: PredictOptions,
    #[serde(default)]
    pub plan: PlanOptions,
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be positive, got {v}")))
    }
}

impl Scenario {
    /// Minimal scenario: default robot driven by a preset.
    pub fn with_preset(name: &str) -> Self {
        Self {
            robot: RobotConfig::default(),
            initial_state: InitialState::default(),
            cpg: CpgSpec::preset(name),
            model: ModelOptions::default(),
            dt: DEFAULT_DT,
            duration: DEFAULT_DURATION,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            corridor: None,
            goal: None,
            predict: PredictOptions::default(),
            plan: PlanOptions::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        positive("dt", self.dt)?;
        positive("duration", self.duration)?;
        positive("epsilon", self.epsilon)?;
        self.model.validate()?;
        let params = self.cpg.resolve()?;
        if params.joint_count() != self.robot.joint_count() {
            return Err(Error::invalid(
                "cpg.amplitude",
                format!(
                    "robot has {} joints, gait has {}",
                    self.robot.joint_count(),
                    params.joint_count()
                ),
            ));
        }
        let init = &self.initial_state;
        let pose_finite = init
            .com_xy
            .iter()
            .chain(init.p_b.iter())
            .chain(init.phi_b.iter())
            .chain([init.heading, init.theta0].iter())
            .all(|v| v.is_finite());
        if !pose_finite {
            return Err(Error::invalid("initial_state", "all values must be finite"));
        }
        if !(init.phase_jitter.is_finite() && init.phase_jitter >= 0.0) {
            return Err(Error::invalid("initial_state.phase_jitter", "must be non-negative"));
        }
        if let Some(corridor) = &self.corridor {
            corridor.validate()?;
        }
        if let Some(goal) = &self.goal {
            if !(2..=3).contains(&goal.len()) || goal.iter().any(|g| !g.is_finite()) {
                return Err(Error::invalid("goal", "must be a finite 2- or 3-vector"));
            }
        }
        if self.predict.horizon_steps == 0 {
            return Err(Error::invalid("predict.horizon_steps", "must be at least 1"));
        }
        if self.predict.plant_substeps == 0 {
            return Err(Error::invalid("predict.plant_substeps", "must be at least 1"));
        }
        let plan = &self.plan;
        if plan.horizon_steps == 0 {
            return Err(Error::invalid("plan.horizon_steps", "must be at least 1"));
        }
        positive("plan.replan_interval", plan.replan_interval)?;
        positive("plan.goal_tolerance", plan.goal_tolerance)?;
        if !(plan.corridor_margin.is_finite() && plan.corridor_margin >= 0.0) {
            return Err(Error::invalid("plan.corridor_margin", "must be non-negative"));
        }
        if let Some(b) = &plan.bounds {
            b.validate(self.robot.joint_count())
                .map_err(|e| prefix_field(e, "plan."))?;
        }
        plan.solver.validate().map_err(|e| prefix_field(e, "plan."))?;
        Ok(())
    }

    pub fn params(&self) -> Result<CpgParams> {
        self.cpg.resolve()
    }

    pub fn model(&self) -> Result<MotionModel> {
        MotionModel::new(self.robot.clone(), &self.params()?, self.epsilon)?.with_options(self.model)
    }

    /// Initial state of the run, including the seeded phase perturbation.
    pub fn initial_model_state(&self, model: &MotionModel, params: &CpgParams) -> Result<ModelState> {
        let init = &self.initial_state;
        let mut cpg = CpgState::locked(params, init.theta0);
        if init.phase_jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for theta in cpg.theta.iter_mut() {
                *theta += rng.gen_range(-init.phase_jitter..=init.phase_jitter);
            }
        }
        match init.placement {
            Placement::AsGiven => {
                let robot = RobotState {
                    p_b: init.p_b,
                    phi_b: init.phi_b,
                    q: DVector::zeros(self.robot.joint_count()),
                };
                model.synchronized(robot, cpg, params)
            }
            Placement::Leveled => {
                let synced = model.synchronized(RobotState::straight(&self.robot), cpg, params)?;
                let mut state = model.leveled(&synced, init.heading)?;
                let (rom, _) = model.observe(&state)?;
                state.robot.p_b.x += init.com_xy.x - rom.p_com.x;
                state.robot.p_b.y += init.com_xy.y - rom.p_com.y;
                Ok(state)
            }
        }
    }

    fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Validation { field, reason } => Error::Validation {
            field: format!("{prefix}{}", field.trim_start_matches("solver.")),
            reason,
        },
        other => other,
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    Scenario::from_json(&text)
}

/// One sampled instant of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub robot: RobotState,
    /// Base linear and Euler-angle rates over the step that starts here.
    pub base_velocity: Vector6<f64>,
    pub rom: RomState,
    pub residual: f64,
    /// Cost of the active plan and corridor excess of the executed box.
    pub planning: Option<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn trajectory_header(joints: usize, links: usize, planning: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for name in ["p_b", "phi_b", "v_b", "phi_b_dot"] {
        h.extend(["x", "y", "z"].iter().map(|a| format!("{name}_{a}")));
    }
    h.extend((0..joints).map(|j| format!("q_{j}")));
    h.extend(["x", "y", "z"].iter().map(|a| format!("p_com_{a}")));
    for r in 0..3 {
        h.extend((0..3).map(|c| format!("r_com_{r}{c}")));
    }
    h.extend(["x", "y", "z"].iter().map(|a| format!("delta_{a}")));
    h.extend(["x", "y", "z"].iter().map(|a| format!("box_center_{a}")));
    h.extend((0..links).map(|i| format!("c_{i}")));
    h.push("residual".into());
    if planning {
        h.push("cost".into());
        h.push("violation".into());
    }
    h
}

impl TrajectoryRecord {
    fn fields(&self) -> Vec<String> {
        let mut f = vec![fmt(self.t)];
        f.extend(self.robot.p_b.iter().map(|v| fmt(*v)));
        f.extend(self.robot.phi_b.iter().map(|v| fmt(*v)));
        f.extend(self.base_velocity.iter().map(|v| fmt(*v)));
        f.extend(self.robot.q.iter().map(|v| fmt(*v)));
        f.extend(self.rom.p_com.iter().map(|v| fmt(*v)));
        for r in 0..3 {
            f.extend((0..3).map(|c| fmt(self.rom.r_com[(r, c)])));
        }
        f.extend(self.rom.delta.iter().map(|v| fmt(*v)));
        f.extend(self.rom.box_center.iter().map(|v| fmt(*v)));
        f.extend(self.rom.contacts.iter().map(|c| if *c { "1".into() } else { "0".into() }));
        f.push(fmt(self.residual));
        if let Some((cost, violation)) = self.planning {
            f.push(fmt(cost));
            f.push(fmt(violation));
        }
        f
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory(path: &Path, config: &RobotConfig, records: &[TrajectoryRecord]) -> Result<()> {
    let planning = records.first().is_some_and(|r| r.planning.is_some());
    let header = trajectory_header(config.joint_count(), config.link_count, planning);
    write_csv(path, &header, records.iter().map(TrajectoryRecord::fields))
}

fn with_time<T>(t: f64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Integration { .. } => Error::Integration { t },
        other => other,
    })
}

/// Samples the current state; the step is taken only for its diagnostics.
fn record(model: &MotionModel, state: &ModelState, params: &CpgParams, dt: f64, t: f64) -> Result<(TrajectoryRecord, ModelState)> {
    let (next, report) = with_time(t, model.step(state, params, dt))?;
    let rec = TrajectoryRecord {
        t,
        robot: state.robot.clone(),
        base_velocity: Vector6::from_column_slice(&report.base_rates.as_slice()[..6]),
        rom: report.rom,
        residual: report.residual,
        planning: None,
    };
    Ok((rec, next))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateReport {
    pub records: Vec<TrajectoryRecord>,
    /// m, CoM at the end minus CoM at the start.
    pub displacement: Vector3<f64>,
    /// Fraction of samples in contact, per link.
    pub contact_duty: Vec<f64>,
}

/// Fixed-parameter run over the scenario duration, both endpoints included.
pub fn run_simulate(scenario: &Scenario, out_dir: Option<&Path>) -> Result<SimulateReport> {
    scenario.validate()?;
    let params = scenario.params()?;
    let model = scenario.model()?;
    let mut state = scenario.initial_model_state(&model, &params)?;
    let steps = scenario.steps();
    let mut records = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let (rec, next) = record(&model, &state, &params, scenario.dt, k as f64 * scenario.dt)?;
        records.push(rec);
        state = next;
    }
    let first = records.first().map(|r| r.rom.p_com).unwrap_or_default();
    let last = records.last().map(|r| r.rom.p_com).unwrap_or_default();
    let links = scenario.robot.link_count;
    let contact_duty = (0..links)
        .map(|i| records.iter().filter(|r| r.rom.contacts[i]).count() as f64 / records.len() as f64)
        .collect();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_trajectory(&dir.join("trajectory.csv"), &scenario.robot, &records)?;
    }
    Ok(SimulateReport {
        records,
        displacement: last - first,
        contact_duty,
    })
}

/// One prediction horizon compared with the plant.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonComparison {
    pub start_time: f64,
    pub predicted: Vec<Vector3<f64>>,
    pub actual: Vec<Vector3<f64>>,
}

impl HorizonComparison {
    pub fn terminal_error(&self) -> f64 {
        match (self.predicted.last(), self.actual.last()) {
            (Some(p), Some(a)) => (p - a).norm(),
            _ => 0.0,
        }
    }

    pub fn max_error(&self) -> f64 {
        self.predicted
            .iter()
            .zip(&self.actual)
            .map(|(p, a)| (p - a).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictReport {
    pub horizons: Vec<HorizonComparison>,
}

impl PredictReport {
    pub fn max_terminal_error(&self) -> f64 {
        self.horizons.iter().map(|h| h.terminal_error()).fold(0.0, f64::max)
    }

    pub fn mean_terminal_error(&self) -> f64 {
        if self.horizons.is_empty() {
            return 0.0;
        }
        self.horizons.iter().map(|h| h.terminal_error()).sum::<f64>() / self.horizons.len() as f64
    }
}

/// Runs the plant at `dt / plant_substeps` and, at the start of every
/// horizon, restarts the predictor from the plant state at `dt`.
pub fn run_predict(scenario: &Scenario, out_dir: Option<&Path>) -> Result<PredictReport> {
    scenario.validate()?;
    let params = scenario.params()?;
    let model = scenario.model()?;
    let opts = scenario.predict;
    let plant_dt = scenario.dt / opts.plant_substeps as f64;
    let horizon_time = opts.horizon_steps as f64 * scenario.dt;
    let count = (scenario.duration / horizon_time + 1e-9).floor() as usize;

    let mut plant = scenario.initial_model_state(&model, &params)?;
    plant.frame = model.observe(&plant)?.1;
    let mut horizons = Vec::with_capacity(count);
    for h in 0..count {
        let start_time = h as f64 * horizon_time;
        let prediction = with_time(
            start_time,
            model.rollout(&plant, &params, scenario.dt, opts.horizon_steps),
        )?;
        let mut actual = Vec::with_capacity(opts.horizon_steps);
        for k in 0..opts.horizon_steps {
            for s in 0..opts.plant_substeps {
                let t = start_time + (k * opts.plant_substeps + s) as f64 * plant_dt;
                plant = with_time(t, model.step(&plant, &params, plant_dt))?.0;
            }
            let (rom, frame) = model.observe(&plant)?;
            plant.frame = frame;
            actual.push(rom.p_com);
        }
        horizons.push(HorizonComparison {
            start_time,
            predicted: prediction.predicted_com(),
            actual,
        });
    }
    let report = PredictReport { horizons };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_prediction(&dir.join("prediction.csv"), &report, scenario.dt)?;
    }
    Ok(report)
}

fn write_prediction(path: &Path, report: &PredictReport, dt: f64) -> Result<()> {
    let header: Vec<String> = [
        "t", "horizon", "step", "pred_x", "pred_y", "pred_z", "actual_x", "actual_y", "actual_z", "error",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for (h, cmp) in report.horizons.iter().enumerate() {
        for (k, (p, a)) in cmp.predicted.iter().zip(&cmp.actual).enumerate() {
            let mut row = vec![fmt(cmp.start_time + (k + 1) as f64 * dt), h.to_string(), (k + 1).to_string()];
            row.extend(p.iter().map(|v| fmt(*v)));
            row.extend(a.iter().map(|v| fmt(*v)));
            row.push(fmt((p - a).norm()));
            rows.push(row);
        }
    }
    write_csv(path, &header, rows)
}

/// Diagnostics of one receding-horizon solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveRecord {
    pub t: f64,
    pub cost: f64,
    pub violation: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<LogEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanReport {
    pub records: Vec<TrajectoryRecord>,
    pub solves: Vec<SolveRecord>,
    pub reached: bool,
    /// m, CoM distance to the goal at the last sample.
    pub final_distance: f64,
    /// Largest corridor excess of the executed box over the run [m].
    pub max_violation: f64,
}

impl PlanReport {
    pub fn elapsed(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.t)
    }
}

/// Corridor with every segment shrunk by `margin` on all sides.
pub fn shrink(corridor: &Corridor, margin: f64) -> Result<Corridor> {
    let m = Vector2::new(margin, margin);
    let shrunk = Corridor {
        segments: corridor
            .segments
            .iter()
            .map(|s| Segment::new(s.p_min + m, s.p_max - m))
            .collect(),
    };
    shrunk.validate().map_err(|_| {
        Error::invalid("plan.corridor_margin", format!("{margin} m leaves no room inside the corridor"))
    })?;
    Ok(shrunk)
}

fn distance_to(goal: &[f64], p: &Vector3<f64>) -> f64 {
    goal.iter()
        .enumerate()
        .map(|(i, g)| (p[i] - g).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Closed-loop receding-horizon control against the kinematic simulator.
pub fn run_plan(scenario: &Scenario, out_dir: Option<&Path>) -> Result<PlanReport> {
    scenario.validate()?;
    let corridor = scenario
        .corridor
        .clone()
        .ok_or_else(|| Error::invalid("corridor", "required for planning"))?;
    let goal = scenario
        .goal
        .clone()
        .ok_or_else(|| Error::invalid("goal", "required for planning"))?;
    let nominal = scenario.params()?;
    let model = scenario.model()?;
    let opts = &scenario.plan;
    let bounds = match &opts.bounds {
        Some(b) => b.clone(),
        None => ParamBounds::around(&nominal, &opts.margins),
    };
    let problem = NmpcProblem {
        goal: DVector::from_vec(goal.clone()),
        horizon_steps: opts.horizon_steps,
        dt: scenario.dt,
        bounds,
        corridor: shrink(&corridor, opts.corridor_margin)?,
        weights: opts.weights.clone(),
        solver: opts.solver,
    };
    problem.validate(nominal.joint_count())?;

    let replan_steps = ((opts.replan_interval / scenario.dt).round() as usize).max(1);
    let steps = scenario.steps();
    let mut state = scenario.initial_model_state(&model, &nominal)?;
    let mut records = Vec::new();
    let mut solves = Vec::new();
    let mut active: Option<NmpcSolution> = None;
    let mut applied = nominal.clone();
    let mut reached = false;
    let mut max_violation: f64 = 0.0;
    let mut final_distance = f64::INFINITY;

    for k in 0..=steps {
        let t = k as f64 * scenario.dt;
        let (rom, frame) = model.observe(&state)?;
        state.frame = frame;
        final_distance = distance_to(&goal, &rom.p_com);
        let (lo, hi) = nmpc::footprint(&rom);
        let violation = corridor.box_violation(&lo, &hi)?;
        max_violation = max_violation.max(violation);
        if final_distance <= opts.goal_tolerance {
            reached = true;
        } else if k < steps && k % replan_steps == 0 {
            let (params, solution) =
                with_time(t, nmpc::mpc_step(&model, &problem, &state, active.as_ref(), &nominal))?;
            solves.push(SolveRecord {
                t,
                cost: solution.cost,
                violation: solution.constraint_violation,
                iterations: solution.iterations,
                converged: solution.converged,
                log: solution.log.clone(),
            });
            applied = params;
            active = Some(solution);
        }
        let cost = active.as_ref().map_or(0.0, |s| s.cost);
        let (mut rec, next) = record(&model, &state, &applied, scenario.dt, t)?;
        rec.planning = Some((cost, violation));
        records.push(rec);
        if reached || k == steps {
            break;
        }
        state = next;
    }

    let report = PlanReport {
        records,
        solves,
        reached,
        final_distance,
        max_violation,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_trajectory(&dir.join("trajectory.csv"), &scenario.robot, &report.records)?;
        write_solver_log(&dir.join("solver_log.csv"), &report.solves)?;
        write_corridor(&dir.join("corridor.csv"), &corridor, &goal)?;
    }
    Ok(report)
}

fn write_solver_log(path: &Path, solves: &[SolveRecord]) -> Result<()> {
    let header: Vec<String> = [
        "solve", "t", "outer", "iteration", "penalty", "objective", "cost", "violation", "step",
        "final_cost", "final_violation", "iterations", "converged",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for (i, s) in solves.iter().enumerate() {
        for e in &s.log {
            rows.push(vec![
                i.to_string(),
                fmt(s.t),
                e.outer.to_string(),
                e.iteration.to_string(),
                fmt(e.penalty),
                fmt(e.objective),
                fmt(e.cost),
                fmt(e.violation),
                fmt(e.step),
                fmt(s.cost),
                fmt(s.violation),
                s.iterations.to_string(),
                (s.converged as u8).to_string(),
            ]);
        }
    }
    write_csv(path, &header, rows)
}

/// Segments as rectangles plus one `goal` row, in world x-y meters.
fn write_corridor(path: &Path, corridor: &Corridor, goal: &[f64]) -> Result<()> {
    let header: Vec<String> = ["kind", "index", "x_min", "y_min", "x_max", "y_max"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows: Vec<Vec<String>> = corridor
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                "segment".into(),
                i.to_string(),
                fmt(s.p_min.x),
                fmt(s.p_min.y),
                fmt(s.p_max.x),
                fmt(s.p_max.y),
            ]
        })
        .collect();
    rows.push(vec!["goal".into(), "0".into(), fmt(goal[0]), fmt(goal[1]), fmt(goal[0]), fmt(goal[1])]);
    write_csv(path, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "robot": {
            "link_count": 12,
            "link_length": 0.14166666666666666,
            "link_masses": [1,1,1,1,1,1,1,1,1,1,1,1],
            "joint_axes": ["pitch","yaw","pitch","yaw","pitch","yaw","pitch","yaw","pitch","yaw","pitch"]
        },
        "cpg": { "preset": "sidewinding" }
    }"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.dt, 0.005);
        assert_eq!(s.epsilon, 0.015);
        assert_eq!(s.duration, DEFAULT_DURATION);
        assert_eq!(s.predict.horizon_steps, 20);
        assert_eq!(s.initial_state.placement, Placement::Leveled);
        assert_eq!(s.params().unwrap(), gaits::preset("sidewinding").unwrap().params);
    }

    #[test]
    fn round_trip_makes_defaults_explicit() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        let text = s.to_json().unwrap();
        assert!(text.contains("\"dt\": 0.005"));
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
    }

    fn field_of(text: &str) -> String {
        match Scenario::from_json(text) {
            Err(Error::Validation { field, .. }) => field,
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn validation_names_the_field() {
        let with = |extra: &str| MINIMAL.trim_end().trim_end_matches('}').to_string() + "," + extra + "}";
        assert_eq!(field_of(&with(r#""dt": 0"#)), "dt");
        assert_eq!(field_of(&with(r#""duration": -1"#)), "duration");
        assert_eq!(
            field_of(&with(r#""corridor": {"segments": [{"p_min": [0, 0], "p_max": [1, 0]}]}"#)),
            "corridor.segments[0]"
        );
        assert_eq!(field_of(&with(r#""goal": [1]"#)), "goal");
        assert_eq!(field_of(&with(r#""plan": {"replan_interval": 0}"#)), "plan.replan_interval");
        let explicit = MINIMAL.replace(r#"{ "preset": "sidewinding" }"#, r#"{ "omega": 1 }"#);
        assert_eq!(field_of(&explicit), "cpg.amplitude");
    }

    #[test]
    fn unknown_preset_and_fields_are_rejected() {
        let bad = MINIMAL.replace("sidewinding", "gallop");
        assert_eq!(Scenario::from_json(&bad), Err(Error::UnknownPreset("gallop".into())));
        let typo = MINIMAL.replace("\"cpg\"", "\"dtt\": 1, \"cpg\"");
        assert!(matches!(Scenario::from_json(&typo), Err(Error::Parse(_))));
    }

    #[test]
    fn preset_fields_can_be_overridden() {
        let mut s = Scenario::with_preset("forward");
        s.cpg.omega = Some(1.0);
        s.cpg.gamma = 5.0;
        let p = s.params().unwrap();
        assert_eq!(p.omega, 1.0);
        assert_eq!(p.gamma, 5.0);
        assert_eq!(p.amplitude, gaits::preset("forward").unwrap().params.amplitude);
    }

    #[test]
    fn leveled_start_sits_where_requested() {
        let mut s = Scenario::with_preset("sidewinding");
        s.initial_state.com_xy = Vector2::new(1.0, -2.0);
        s.initial_state.heading = 0.7;
        let params = s.params().unwrap();
        let model = s.model().unwrap();
        let state = s.initial_model_state(&model, &params).unwrap();
        let (rom, _) = model.observe(&state).unwrap();
        assert!((rom.p_com.x - 1.0).abs() < 1e-12 && (rom.p_com.y + 2.0).abs() < 1e-12);
        assert!((rom.r_com[(1, 0)].atan2(rom.r_com[(0, 0)]) - 0.7).abs() < 1e-9);
        assert!((rom.r_com[(2, 2)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seed_changes_only_jittered_runs() {
        let mut s = Scenario::with_preset("forward");
        let params = s.params().unwrap();
        let model = s.model().unwrap();
        let a = s.initial_model_state(&model, &params).unwrap();
        s.seed = 7;
        assert_eq!(a, s.initial_model_state(&model, &params).unwrap());
        s.initial_state.phase_jitter = 0.1;
        let b = s.initial_model_state(&model, &params).unwrap();
        assert_ne!(a.cpg, b.cpg);
        assert_eq!(b, s.initial_model_state(&model, &params).unwrap());
    }

    #[test]
    fn simulate_counts_rows_and_still_gait_stays_put() {
        let mut s = Scenario::with_preset("shape");
        s.duration = 1.0;
        let report = run_simulate(&s, None).unwrap();
        assert_eq!(report.records.len(), 201);
        assert!(report.records.windows(2).all(|w| w[1].t > w[0].t));

        let mut still = Scenario::with_preset("forward");
        still.cpg.amplitude = Some(vec![0.0; 11]);
        still.duration = 0.5;
        let report = run_simulate(&still, None).unwrap();
        assert!(report.displacement.norm() < 1e-12);
    }

    #[test]
    fn trajectory_rows_have_fixed_width() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Scenario::with_preset("sidewinding");
        s.duration = 0.2;
        run_simulate(&s, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        let widths: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
        assert_eq!(widths.len(), 42);
        assert!(widths.iter().all(|w| *w == widths[0]));
        assert_eq!(widths[0], 1 + 12 + 11 + 3 + 9 + 3 + 3 + 12 + 1);
    }

    #[test]
    fn self_prediction_is_exact() {
        let mut s = Scenario::with_preset("sidewinding");
        s.duration = 0.5;
        s.predict.plant_substeps = 1;
        let report = run_predict(&s, None).unwrap();
        assert_eq!(report.horizons.len(), 5);
        assert!(report.horizons.iter().all(|h| h.predicted.len() == 20));
        assert!(report.max_terminal_error() < 1e-9);
    }

    #[test]
    fn plan_needs_corridor_and_goal() {
        let s = Scenario::with_preset("forward");
        match run_plan(&s, None) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "corridor"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plan_from_the_goal_stops_at_once() {
        let mut s = Scenario::with_preset("forward");
        s.corridor = Some(Corridor::straight(-3.0, 3.0, 0.0, 0.3));
        s.goal = Some(vec![0.0, 0.0]);
        let report = run_plan(&s, None).unwrap();
        assert!(report.reached);
        assert_eq!(report.records.len(), 1);
        assert!(report.solves.is_empty());
        assert_eq!(report.elapsed(), 0.0);
    }

    #[test]
    fn shrinking_too_far_is_rejected() {
        let c = Corridor::straight(0.0, 1.0, 0.0, 0.3);
        assert!(shrink(&c, 0.01).is_ok());
        assert!(shrink(&c, 0.2).is_err());
    }
}
