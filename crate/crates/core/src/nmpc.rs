//! Receding-horizon gait generation inside a 2D safety corridor.
//!
//! The CoM trajectory is eliminated through the motion model (single
//! shooting), so the decision vector holds only CPG parameters:
//! `[a (n), omega, phi (n - 1)]`. Corridor constraints are handled by a
//! quadratic penalty around a projected quasi-Newton descent whose gradients
//! come from central finite differences.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpg::CpgParams;
use crate::error::{Error, Result};
use crate::motion_model::{ModelState, MotionModel};
use crate::rom::RomState;

/// Axis-aligned rectangle of the corridor, world x-y in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub p_min: Vector2<f64>,
    pub p_max: Vector2<f64>,
}

impl Segment {
    pub fn new(p_min: Vector2<f64>, p_max: Vector2<f64>) -> Self {
        Self { p_min, p_max }
    }

    /// Largest distance by which the box `[lo, hi]` sticks out of `self`.
    pub fn excess(&self, lo: &Vector2<f64>, hi: &Vector2<f64>) -> f64 {
        let below = self.p_min - lo;
        let above = hi - self.p_max;
        below.max().max(above.max()).max(0.0)
    }

    pub fn contains(&self, lo: &Vector2<f64>, hi: &Vector2<f64>) -> bool {
        lo.x >= self.p_min.x && lo.y >= self.p_min.y && hi.x <= self.p_max.x && hi.y <= self.p_max.y
    }

    fn overlaps(&self, other: &Segment) -> bool {
        self.p_min.x <= other.p_max.x
            && other.p_min.x <= self.p_max.x
            && self.p_min.y <= other.p_max.y
            && other.p_min.y <= self.p_max.y
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corridor {
    pub segments: Vec<Segment>,
}

impl Corridor {
    /// Single segment of the given `width` centred on `y = center_y`.
    pub fn straight(x_start: f64, x_end: f64, center_y: f64, width: f64) -> Self {
        let h = 0.5 * width;
        Self {
            segments: vec![Segment::new(
                Vector2::new(x_start, center_y - h),
                Vector2::new(x_end, center_y + h),
            )],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::EmptyCorridor);
        }
        for (i, s) in self.segments.iter().enumerate() {
            let finite = s.p_min.iter().chain(s.p_max.iter()).all(|v| v.is_finite());
            if !finite || s.p_min.x >= s.p_max.x || s.p_min.y >= s.p_max.y {
                return Err(Error::invalid(
                    format!("corridor.segments[{i}]"),
                    "p_min must be strictly below p_max in x and y",
                ));
            }
        }
        for (i, pair) in self.segments.windows(2).enumerate() {
            if !pair[0].overlaps(&pair[1]) {
                return Err(Error::invalid(
                    format!("corridor.segments[{}]", i + 1),
                    format!("does not overlap segment {i}"),
                ));
            }
        }
        Ok(())
    }

    /// Distance by which the box exits every segment; 0 if some segment holds it.
    pub fn box_violation(&self, lo: &Vector2<f64>, hi: &Vector2<f64>) -> Result<f64> {
        self.segments
            .iter()
            .map(|s| s.excess(lo, hi))
            .reduce(f64::min)
            .ok_or(Error::EmptyCorridor)
    }
}

/// World x-y extent of the oriented bounding box of one reduced-order state.
pub fn footprint(rom: &RomState) -> (Vector2<f64>, Vector2<f64>) {
    let c = rom.box_center_world();
    let h = rom.world_half_extents();
    let c = Vector2::new(c.x, c.y);
    let h = Vector2::new(h.x, h.y);
    (c - h, c + h)
}

/// Per-step corridor excess of a sequence of reduced-order states.
pub fn step_violations(rom_states: &[RomState], corridor: &Corridor) -> Result<Vec<f64>> {
    if corridor.segments.is_empty() {
        return Err(Error::EmptyCorridor);
    }
    rom_states
        .iter()
        .map(|rom| {
            let (lo, hi) = footprint(rom);
            corridor.box_violation(&lo, &hi)
        })
        .collect()
}

pub fn corridor_violation(rom_states: &[RomState], corridor: &Corridor) -> Result<f64> {
    Ok(step_violations(rom_states, corridor)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Weighted sum of squared distances between the predicted CoM and the goal.
/// A 2-vector goal compares only x-y.
pub fn cost(predicted_com: &[Vector3<f64>], goal: &DVector<f64>, weights: &[f64]) -> Result<f64> {
    if predicted_com.len() != weights.len() {
        return Err(Error::Dimension {
            what: "cost weights",
            expected: predicted_com.len(),
            got: weights.len(),
        });
    }
    let dims = goal.len();
    if !(2..=3).contains(&dims) {
        return Err(Error::Dimension {
            what: "goal",
            expected: 3,
            got: dims,
        });
    }
    Ok(predicted_com
        .iter()
        .zip(weights)
        .map(|(p, w)| {
            let d2: f64 = (0..dims).map(|i| (p[i] - goal[i]).powi(2)).sum();
            w * d2
        })
        .sum())
}

/// Per-entry box on the decision vector `[a, omega, phi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBounds {
    #[serde(with = "crate::serde_vec")]
    pub lower: DVector<f64>,
    #[serde(with = "crate::serde_vec")]
    pub upper: DVector<f64>,
}

/// Half-widths of a box built around a nominal parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundMargins {
    /// rad, applied to every amplitude; the result is clipped to `[0, pi/2]`.
    pub amplitude: f64,
    /// rad/s.
    pub omega: f64,
    /// rad, applied to every phase offset.
    pub phase: f64,
}

impl Default for BoundMargins {
    fn default() -> Self {
        Self {
            amplitude: 0.2,
            omega: 0.0,
            phase: 0.3,
        }
    }
}

impl ParamBounds {
    pub fn around(params: &CpgParams, margins: &BoundMargins) -> Self {
        let n = params.joint_count();
        let x = params.to_decision_vector();
        let widths = DVector::from_fn(x.len(), |i, _| {
            if i < n {
                margins.amplitude
            } else if i == n {
                margins.omega
            } else {
                margins.phase
            }
        });
        let mut lower = &x - &widths;
        let mut upper = &x + &widths;
        for i in 0..n {
            lower[i] = lower[i].clamp(0.0, std::f64::consts::FRAC_PI_2);
            upper[i] = upper[i].clamp(0.0, std::f64::consts::FRAC_PI_2);
        }
        Self { lower, upper }
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        let len = 2 * n_joints;
        for (name, v) in [("bounds.lower", &self.lower), ("bounds.upper", &self.upper)] {
            if v.len() != len {
                return Err(Error::invalid(name, format!("expected {len} entries, got {}", v.len())));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("{name}[{i}]"), "must be finite"));
            }
        }
        if let Some(i) = (0..len).find(|&i| self.lower[i] > self.upper[i]) {
            return Err(Error::invalid(format!("bounds.lower[{i}]"), "exceeds the upper bound"));
        }
        for i in 0..n_joints {
            if self.lower[i].abs() > std::f64::consts::FRAC_PI_2
                || self.upper[i].abs() > std::f64::consts::FRAC_PI_2
            {
                return Err(Error::invalid(
                    format!("bounds[{i}]"),
                    "amplitude bounds must lie within [-pi/2, pi/2]",
                ));
            }
        }
        Ok(())
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        x.zip_zip_map(&self.lower, &self.upper, |v, lo, hi| v.clamp(lo, hi))
    }

    /// Largest amount by which `x` leaves the box.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        (0..x.len())
            .map(|i| (self.lower[i] - x[i]).max(x[i] - self.upper[i]))
            .fold(0.0, f64::max)
    }

    /// Indices whose bounds leave room to move.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.lower.len())
            .filter(|&i| self.lower[i] < self.upper[i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Finite-difference step on the decision vector.
    pub fd_step: f64,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    /// Corridor excess [m] regarded as feasible.
    pub violation_tolerance: f64,
    /// Largest change of any decision entry in one line search.
    pub max_step: f64,
    /// Objective assigned to candidates whose rollout fails.
    pub infeasible_cost: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_outer_iterations: 3,
            max_inner_iterations: 3,
            initial_penalty: 1e3,
            penalty_growth: 10.0,
            fd_step: 1e-4,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-8,
            violation_tolerance: 1e-4,
            max_step: 0.2,
            infeasible_cost: 1e9,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_penalty", self.initial_penalty),
            ("fd_step", self.fd_step),
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("violation_tolerance", self.violation_tolerance),
            ("max_step", self.max_step),
            ("infeasible_cost", self.infeasible_cost),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("solver.{name}"), "must be positive"));
            }
        }
        if !(self.penalty_growth.is_finite() && self.penalty_growth >= 1.0) {
            return Err(Error::invalid("solver.penalty_growth", "must be at least 1"));
        }
        if self.max_outer_iterations == 0 {
            return Err(Error::invalid("solver.max_outer_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmpcProblem {
    /// Desired CoM, 2- or 3-vector [m].
    pub goal: DVector<f64>,
    pub horizon_steps: usize,
    pub dt: f64,
    pub bounds: ParamBounds,
    pub corridor: Corridor,
    /// Per-step cost weights; `None` means uniform 1.
    pub weights: Option<Vec<f64>>,
    pub solver: SolverSettings,
}

impl NmpcProblem {
    pub fn validate(&self, n_joints: usize) -> Result<()> {
        if !(2..=3).contains(&self.goal.len()) || self.goal.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("goal", "must be a finite 2- or 3-vector"));
        }
        if self.horizon_steps == 0 {
            return Err(Error::invalid("horizon_steps", "must be at least 1"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.horizon_steps {
                return Err(Error::invalid(
                    "weights",
                    format!("expected {} entries, got {}", self.horizon_steps, w.len()),
                ));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid("weights", "must be finite and non-negative"));
            }
        }
        self.bounds.validate(n_joints)?;
        self.corridor.validate()?;
        self.solver.validate()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.horizon_steps])
    }
}

/// Outcome of one candidate rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    /// Largest per-step corridor excess [m].
    pub violation: f64,
    /// Sum of squared per-step excesses, the quantity penalized by the solver.
    pub excess_sq: f64,
    pub predicted_com: Vec<Vector3<f64>>,
    pub feasible: bool,
}

impl Evaluation {
    pub fn penalized(&self, penalty: f64) -> f64 {
        self.cost + penalty * self.excess_sq
    }
}

/// Rolls the model out with `candidate` and scores the prediction. A failed
/// rollout is not an error: it is returned as an infeasible evaluation with
/// the configured large finite cost.
pub fn evaluate(
    model: &MotionModel,
    problem: &NmpcProblem,
    state: &ModelState,
    candidate: &CpgParams,
) -> Result<Evaluation> {
    let weights = problem.weights();
    match model.rollout(state, candidate, problem.dt, problem.horizon_steps) {
        Ok(result) => {
            let predicted_com = result.predicted_com();
            let excess = step_violations(&result.rom_states, &problem.corridor)?;
            Ok(Evaluation {
                cost: cost(&predicted_com, &problem.goal, &weights)?,
                violation: excess.iter().copied().fold(0.0, f64::max),
                excess_sq: excess.iter().map(|e| e * e).sum(),
                predicted_com,
                feasible: true,
            })
        }
        Err(_) => {
            let (rom, _) = model.observe(state)?;
            Ok(Evaluation {
                cost: problem.solver.infeasible_cost,
                violation: problem.solver.infeasible_cost.sqrt(),
                excess_sq: 0.0,
                predicted_com: vec![rom.p_com; problem.horizon_steps],
                feasible: false,
            })
        }
    }
}

/// One accepted iterate of the solver.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub outer: usize,
    pub iteration: usize,
    pub penalty: f64,
    pub objective: f64,
    pub cost: f64,
    pub violation: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmpcSolution {
    pub params: CpgParams,
    pub predicted_com: Vec<Vector3<f64>>,
    pub cost: f64,
    /// Largest corridor or bound excess of the returned parameters.
    pub constraint_violation: f64,
    /// Accepted line-search steps over all penalty rounds.
    pub iterations: usize,
    pub converged: bool,
    pub penalty: f64,
    pub log: Vec<LogEntry>,
}

struct Objective<'a> {
    model: &'a MotionModel,
    problem: &'a NmpcProblem,
    state: &'a ModelState,
    template: &'a CpgParams,
}

impl Objective<'_> {
    fn eval(&self, x: &DVector<f64>) -> Result<Evaluation> {
        evaluate(
            self.model,
            self.problem,
            self.state,
            &self.template.with_decision_vector(x),
        )
    }

    /// Central differences of `f` over the `free` entries, one-sided where a
    /// bound is closer than `h`. Entries not in `free` are zero.
    fn gradient<F>(&self, x: &DVector<f64>, free: &[usize], h: f64, f: F) -> Result<DVector<f64>>
    where
        F: Fn(&Evaluation) -> f64 + Sync,
    {
        let bounds = &self.problem.bounds;
        let parts: Vec<Result<(usize, f64)>> = free
            .par_iter()
            .map(|&i| {
                let up = x[i] + h <= bounds.upper[i];
                let down = x[i] - h >= bounds.lower[i];
                let at = |delta: f64| -> Result<f64> {
                    let mut y = x.clone();
                    y[i] += delta;
                    Ok(f(&self.eval(&y)?))
                };
                let g = match (up, down) {
                    (true, true) => (at(h)? - at(-h)?) / (2.0 * h),
                    (true, false) => (at(h)? - at(0.0)?) / h,
                    (false, true) => (at(0.0)? - at(-h)?) / h,
                    (false, false) => {
                        let span = bounds.upper[i] - bounds.lower[i];
                        let mut lo = x.clone();
                        lo[i] = bounds.lower[i];
                        let mut hi = x.clone();
                        hi[i] = bounds.upper[i];
                        (f(&self.eval(&hi)?) - f(&self.eval(&lo)?)) / span
                    }
                };
                Ok((i, g))
            })
            .collect();
        let mut g = DVector::zeros(x.len());
        for part in parts {
            let (i, v) = part?;
            g[i] = v;
        }
        Ok(g)
    }
}

/// Finite-difference gradient of the unpenalized cost with respect to the
/// free entries of the decision vector, at step `h`.
pub fn cost_gradient(
    model: &MotionModel,
    problem: &NmpcProblem,
    state: &ModelState,
    params: &CpgParams,
    h: f64,
) -> Result<DVector<f64>> {
    let x = params.to_decision_vector();
    let objective = Objective {
        model,
        problem,
        state,
        template: params,
    };
    objective.gradient(&x, &problem.bounds.free_indices(), h, |e| e.cost)
}

fn projected_gradient_norm(x: &DVector<f64>, g: &DVector<f64>, bounds: &ParamBounds, free: &[usize]) -> f64 {
    free.iter()
        .map(|&i| {
            let blocked = (x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0);
            if blocked {
                0.0
            } else {
                g[i] * g[i]
            }
        })
        .sum::<f64>()
        .sqrt()
}

/// Whether `a` should be preferred over `b` as the returned iterate.
fn better(a: &Evaluation, b: &Evaluation, tol: f64) -> bool {
    match (a.violation <= tol, b.violation <= tol) {
        (true, true) => a.cost < b.cost,
        (true, false) => true,
        (false, true) => false,
        (false, false) => a.violation < b.violation,
    }
}

/// Optimizes the CPG parameters over one horizon starting from `warm_start`.
pub fn solve(
    model: &MotionModel,
    problem: &NmpcProblem,
    state: &ModelState,
    warm_start: &CpgParams,
) -> Result<NmpcSolution> {
    warm_start.validate()?;
    problem.validate(warm_start.joint_count())?;
    let settings = &problem.solver;
    let bounds = &problem.bounds;
    let free = bounds.free_indices();
    let objective = Objective {
        model,
        problem,
        state,
        template: warm_start,
    };

    let mut x = bounds.project(&warm_start.to_decision_vector());
    let mut current = objective.eval(&x)?;
    let mut best = (x.clone(), current.clone());
    let mut penalty = settings.initial_penalty;
    let mut log = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    for outer in 0..settings.max_outer_iterations {
        let mut f = current.penalized(penalty);
        log.push(LogEntry {
            outer,
            iteration: 0,
            penalty,
            objective: f,
            cost: current.cost,
            violation: current.violation,
            step: 0.0,
        });
        let mut inner_converged = free.is_empty();
        let n = free.len();
        let mut h_inv = DMatrix::<f64>::identity(n, n);
        let mut g = objective.gradient(&x, &free, settings.fd_step, |e| e.penalized(penalty))?;

        for inner in 1..=settings.max_inner_iterations {
            if inner_converged {
                break;
            }
            if projected_gradient_norm(&x, &g, bounds, &free) < settings.gradient_tolerance {
                inner_converged = true;
                break;
            }
            let g_free = DVector::from_iterator(n, free.iter().map(|&i| g[i]));
            let mut accepted = None;
            for attempt in 0..2 {
                let mut d_free = -(&h_inv * &g_free);
                if attempt == 1 || d_free.dot(&g_free) >= 0.0 {
                    h_inv = DMatrix::identity(n, n);
                    d_free = -g_free.clone();
                }
                let mut alpha = (settings.max_step / d_free.amax()).min(1.0);
                for _ in 0..30 {
                    let mut trial = x.clone();
                    for (k, &i) in free.iter().enumerate() {
                        trial[i] += alpha * d_free[k];
                    }
                    let trial = bounds.project(&trial);
                    let s = &trial - &x;
                    if s.norm() < settings.step_tolerance {
                        break;
                    }
                    let eval = objective.eval(&trial)?;
                    let f_trial = eval.penalized(penalty);
                    if f_trial <= f + 1e-4 * g.dot(&s) && f_trial <= f {
                        accepted = Some((trial, eval, f_trial, s));
                        break;
                    }
                    alpha *= 0.5;
                }
                if accepted.is_some() {
                    break;
                }
            }
            let Some((trial, eval, f_trial, s)) = accepted else {
                inner_converged = true;
                break;
            };
            iterations += 1;
            log.push(LogEntry {
                outer,
                iteration: inner,
                penalty,
                objective: f_trial,
                cost: eval.cost,
                violation: eval.violation,
                step: s.norm(),
            });
            let g_new = objective.gradient(&trial, &free, settings.fd_step, |e| e.penalized(penalty))?;
            let s_free = DVector::from_iterator(n, free.iter().map(|&i| s[i]));
            let y_free = DVector::from_iterator(n, free.iter().map(|&i| g_new[i] - g[i]));
            let sy = s_free.dot(&y_free);
            if sy > 1e-12 * s_free.norm() * y_free.norm() && sy > 0.0 {
                let rho = 1.0 / sy;
                let eye = DMatrix::<f64>::identity(n, n);
                let left = &eye - rho * &s_free * y_free.transpose();
                let right = &eye - rho * &y_free * s_free.transpose();
                h_inv = &left * &h_inv * &right + rho * &s_free * s_free.transpose();
            }
            x = trial;
            current = eval;
            f = f_trial;
            g = g_new;
            if better(&current, &best.1, settings.violation_tolerance) {
                best = (x.clone(), current.clone());
            }
            if s.norm() < settings.step_tolerance {
                inner_converged = true;
                break;
            }
        }

        let feasible = current.violation <= settings.violation_tolerance;
        if feasible {
            converged = inner_converged;
            break;
        }
        penalty *= settings.penalty_growth;
    }

    let (x_best, eval_best) = best;
    Ok(NmpcSolution {
        params: warm_start.with_decision_vector(&x_best),
        predicted_com: eval_best.predicted_com,
        cost: eval_best.cost,
        constraint_violation: eval_best.violation.max(bounds.violation(&x_best)),
        iterations,
        converged: converged && eval_best.violation <= settings.violation_tolerance,
        penalty,
        log,
    })
}

/// One receding-horizon update: warm-starts from the previous solution, or
/// from `nominal` on the first call, and returns the parameters to apply.
pub fn mpc_step(
    model: &MotionModel,
    problem: &NmpcProblem,
    plant_state: &ModelState,
    prev_solution: Option<&NmpcSolution>,
    nominal: &CpgParams,
) -> Result<(CpgParams, NmpcSolution)> {
    let warm = prev_solution.map_or(nominal, |s| &s.params);
    let solution = solve(model, problem, plant_state, warm)?;
    Ok((solution.params.clone(), solution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpg::CpgState;
    use crate::gaits;
    use crate::robot_model::{RobotConfig, RobotState};
    use crate::rom::DEFAULT_EPSILON;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rom_at(center: Vector3<f64>, delta: Vector3<f64>, r: Matrix3<f64>) -> RomState {
        RomState {
            p_com: center,
            r_com: r,
            delta,
            box_center: Vector3::zeros(),
            contacts: vec![false; 12],
        }
    }

    fn naive_cost(p: &[Vector3<f64>], goal: &DVector<f64>, w: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..p.len() {
            let mut d2 = 0.0;
            for i in 0..goal.len() {
                let d = p[k][i] - goal[i];
                d2 += d * d;
            }
            total += w[k] * d2;
        }
        total
    }

    #[test]
    fn cost_examples() {
        let goal = DVector::from_vec(vec![1.0, 2.0, 0.0]);
        let at_goal = vec![Vector3::new(1.0, 2.0, 0.0); 5];
        assert_eq!(cost(&at_goal, &goal, &[1.0; 5]).unwrap(), 0.0);
        let mut one_off = at_goal.clone();
        one_off[3] += Vector3::new(0.3, -0.4, 0.0);
        assert_relative_eq!(cost(&one_off, &goal, &[1.0; 5]).unwrap(), 0.25, epsilon = 1e-15);
        assert!(cost(&one_off, &goal, &[1.0; 4]).is_err());
    }

    #[test]
    fn cost_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let dims = rng.gen_range(2..=3);
            let p: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let goal = DVector::from_fn(dims, |_, _| rng.gen_range(-2.0..2.0));
            assert_relative_eq!(cost(&p, &goal, &w).unwrap(), naive_cost(&p, &goal, &w), epsilon = 1e-12);
        }
    }

    #[test]
    fn box_wider_than_corridor_reports_overhang() {
        let corridor = Corridor::straight(-5.0, 5.0, 0.0, 0.3);
        let rom = rom_at(Vector3::zeros(), Vector3::new(0.5, 0.2, 0.05), Matrix3::identity());
        assert_relative_eq!(corridor_violation(std::slice::from_ref(&rom), &corridor).unwrap(), 0.05, epsilon = 1e-12);
        let inside = rom_at(Vector3::zeros(), Vector3::new(0.5, 0.1, 0.05), Matrix3::identity());
        assert_eq!(corridor_violation(&[inside], &corridor).unwrap(), 0.0);
        assert_eq!(
            corridor_violation(&[rom], &Corridor::default()),
            Err(Error::EmptyCorridor)
        );
    }

    #[test]
    fn rotated_box_uses_its_world_hull() {
        let corridor = Corridor::straight(-5.0, 5.0, 0.0, 0.3);
        let quarter = crate::robot_model::rot_z(std::f64::consts::FRAC_PI_2);
        let rom = rom_at(Vector3::zeros(), Vector3::new(0.8, 0.1, 0.05), quarter);
        assert_relative_eq!(corridor_violation(&[rom], &corridor).unwrap(), 0.65, epsilon = 1e-12);
    }

    #[test]
    fn box_may_sit_in_any_segment() {
        let corridor = Corridor {
            segments: vec![
                Segment::new(Vector2::new(0.0, -0.2), Vector2::new(2.0, 0.2)),
                Segment::new(Vector2::new(1.8, -0.2), Vector2::new(2.2, 3.0)),
            ],
        };
        corridor.validate().unwrap();
        let up_the_leg = rom_at(Vector3::new(2.0, 2.0, 0.0), Vector3::new(0.1, 0.5, 0.05), Matrix3::identity());
        let along = rom_at(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.5, 0.1, 0.05), Matrix3::identity());
        assert_eq!(corridor_violation(&[up_the_leg, along], &corridor).unwrap(), 0.0);
    }

    #[test]
    fn zero_violation_means_every_box_fits_some_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let corridor = Corridor {
            segments: vec![
                Segment::new(Vector2::new(0.0, -0.3), Vector2::new(2.0, 0.3)),
                Segment::new(Vector2::new(1.5, -0.3), Vector2::new(2.1, 2.0)),
            ],
        };
        for _ in 0..2000 {
            let rom = rom_at(
                Vector3::new(rng.gen_range(-0.5..2.5), rng.gen_range(-0.5..2.5), 0.0),
                Vector3::new(rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6), 0.05),
                crate::robot_model::rot_z(rng.gen_range(-0.4..0.4)),
            );
            let v = corridor_violation(std::slice::from_ref(&rom), &corridor).unwrap();
            let (lo, hi) = footprint(&rom);
            let fits = corridor.segments.iter().any(|s| s.contains(&lo, &hi));
            assert_eq!(v == 0.0, fits);
        }
    }

    #[test]
    fn corridor_validation_names_the_segment() {
        let bad = Corridor {
            segments: vec![
                Segment::new(Vector2::new(0.0, 0.0), Vector2::new(1.0, 1.0)),
                Segment::new(Vector2::new(2.0, 0.0), Vector2::new(2.0, 1.0)),
            ],
        };
        match bad.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "corridor.segments[1]"),
            other => panic!("unexpected {other:?}"),
        }
        let gap = Corridor {
            segments: vec![
                Segment::new(Vector2::new(0.0, 0.0), Vector2::new(1.0, 1.0)),
                Segment::new(Vector2::new(1.5, 0.0), Vector2::new(2.0, 1.0)),
            ],
        };
        assert!(gap.validate().is_err());
        assert_eq!(Corridor::default().validate(), Err(Error::EmptyCorridor));
    }

    #[test]
    fn projection_respects_bounds() {
        let p = gaits::preset("forward").unwrap().params;
        let b = ParamBounds::around(&p, &BoundMargins::default());
        b.validate(11).unwrap();
        let far = p.to_decision_vector().map(|v| v * 10.0 - 3.0);
        let y = b.project(&far);
        assert_eq!(b.violation(&y), 0.0);
        assert!(b.violation(&far) > 0.0);
        assert!(!b.free_indices().contains(&11));
    }

    fn setup(preset: &str, heading: f64) -> (MotionModel, ModelState, CpgParams) {
        let params = gaits::preset(preset).unwrap().params;
        let config = RobotConfig::default();
        let model = MotionModel::new(config.clone(), &params, DEFAULT_EPSILON).unwrap();
        let state = model
            .synchronized(RobotState::straight(&config), CpgState::locked(&params, 0.0), &params)
            .unwrap();
        let state = model.leveled(&state, heading).unwrap();
        (model, state, params)
    }

    fn problem_for(params: &CpgParams, goal: DVector<f64>, horizon_steps: usize) -> NmpcProblem {
        NmpcProblem {
            goal,
            horizon_steps,
            dt: 0.005,
            bounds: ParamBounds::around(params, &BoundMargins::default()),
            corridor: Corridor::straight(-5.0, 5.0, 0.0, 0.3),
            weights: None,
            solver: SolverSettings {
                max_outer_iterations: 2,
                max_inner_iterations: 3,
                ..SolverSettings::default()
            },
        }
    }

    #[test]
    fn still_candidate_costs_horizon_times_squared_distance() {
        let (model, state, _) = setup("forward", 0.0);
        let still = CpgParams::still(11);
        let state = ModelState {
            robot: RobotState::straight(&model.config),
            ..state
        };
        let state = ModelState {
            cpg: CpgState::zeros(11),
            ..state
        };
        let (rom, _) = model.observe(&state).unwrap();
        let goal = DVector::from_vec(vec![1.0, 0.5]);
        let problem = problem_for(&still, goal.clone(), 20);
        let e = evaluate(&model, &problem, &state, &still).unwrap();
        let d2 = (rom.p_com.x - 1.0).powi(2) + (rom.p_com.y - 0.5).powi(2);
        assert_relative_eq!(e.cost, 20.0 * d2, epsilon = 1e-12);
        assert_eq!(e, evaluate(&model, &problem, &state, &still).unwrap());
    }

    #[test]
    fn cost_is_translation_invariant() {
        let (model, state, params) = setup("forward", 0.0);
        let goal = DVector::from_vec(vec![1.0, 0.0]);
        let problem = problem_for(&params, goal.clone(), 40);
        let a = evaluate(&model, &problem, &state, &params).unwrap().cost;
        let offset = Vector3::new(3.0, -2.0, 0.0);
        let mut moved = state.clone();
        moved.robot.p_b += offset;
        let mut shifted = problem.clone();
        shifted.goal = DVector::from_vec(vec![4.0, -2.0]);
        let b = evaluate(&model, &shifted, &moved, &params).unwrap().cost;
        assert_relative_eq!(a, b, max_relative = 1e-9);
    }

    #[test]
    fn solver_log_is_monotone_and_stays_in_bounds() {
        let (model, state, params) = setup("forward", 0.0);
        let (rom, _) = model.observe(&state).unwrap();
        let goal = DVector::from_vec(vec![rom.p_com.x + 1.0, rom.p_com.y]);
        let problem = problem_for(&params, goal, 40);
        let sol = solve(&model, &problem, &state, &params).unwrap();
        for pair in sol.log.windows(2) {
            if pair[0].outer == pair[1].outer {
                assert!(pair[1].objective <= pair[0].objective);
            }
        }
        let x = sol.params.to_decision_vector();
        assert_eq!(problem.bounds.violation(&x), 0.0);
        assert!(sol.predicted_com.len() == 40);
        assert!(sol.constraint_violation >= 0.0);
    }

    #[test]
    fn start_at_goal_keeps_the_warm_start() {
        let (model, _, _) = setup("forward", 0.0);
        let still = CpgParams::still(11);
        let state = model
            .synchronized(RobotState::straight(&model.config), CpgState::zeros(11), &still)
            .unwrap();
        let (rom, _) = model.observe(&state).unwrap();
        let goal = DVector::from_vec(vec![rom.p_com.x, rom.p_com.y]);
        let mut problem = problem_for(&still, goal, 20);
        problem.bounds = ParamBounds::around(&still, &BoundMargins { amplitude: 0.1, omega: 0.0, phase: 0.0 });
        let sol = solve(&model, &problem, &state, &still).unwrap();
        assert!(sol.cost < 1e-12);
        assert!(sol.iterations <= 1);
        assert_eq!(sol.params, still);
    }
}
