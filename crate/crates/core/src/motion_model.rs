//! Quasi-static kinematic motion model.
//!
//! Links flagged as in contact may not move in the world x-y plane. With the
//! joint motion known from the CPG, those constraints are linear in the
//! twelve base unknowns `[p_b_dot, Phi_b_dot, p_b_ddot, Phi_b_ddot]`, which
//! are recovered with a minimum-norm least-squares solve and integrated with
//! a second-order Taylor update.

use nalgebra::{DMatrix, DVector, Rotation3, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::cpg::{Cpg, CpgParams, CpgState, JointReference};
use crate::error::{Error, Result};
use crate::robot_model::{
    euler_xyz_from_rotation, forward_kinematics, jacobian_dot_times_v, kinematics, RobotConfig,
    RobotState, BASE_DOF,
};
use crate::rom::{reduce_links, FrameMemory, RomState};

/// Number of base unknowns solved per step.
pub const UNKNOWNS: usize = 12;

/// Relative singular-value cutoff of the pseudoinverse.
pub const PINV_TOLERANCE: f64 = 1e-8;

pub type BaseRates = SVector<f64, UNKNOWNS>;

/// Everything needed to advance the model: robot pose, oscillator state and
/// the frame-sign memory of the reduced-order model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub robot: RobotState,
    pub cpg: CpgState,
    #[serde(default)]
    pub frame: FrameMemory,
}

/// Stacked no-slip rows: velocity rows first, then acceleration rows, two
/// (world x, world y) per contacting link.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl ConstraintSystem {
    pub fn contact_count(&self) -> usize {
        self.matrix.nrows() / 4
    }

    pub fn residual(&self, x: &BaseRates) -> f64 {
        if self.matrix.nrows() == 0 {
            return 0.0;
        }
        (&self.matrix * x - &self.rhs).norm()
    }
}

fn contact_indices(contacts: &[bool]) -> Vec<usize> {
    contacts
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.then_some(i))
        .collect()
}

fn assemble_with_jacobian(
    jac: &DMatrix<f64>,
    bias: Option<&DVector<f64>>,
    reference: &JointReference,
    contacts: &[usize],
) -> ConstraintSystem {
    let k = contacts.len();
    let nj = reference.q_dot.len();
    let mut matrix = DMatrix::zeros(4 * k, UNKNOWNS);
    let mut rhs = DVector::zeros(4 * k);
    for (c, &link) in contacts.iter().enumerate() {
        for d in 0..2 {
            let row = 3 * link + d;
            let base = jac.view((row, 0), (1, BASE_DOF));
            let joints = jac.view((row, BASE_DOF), (1, nj));
            let v_row = 2 * c + d;
            let a_row = 2 * k + v_row;
            matrix.view_mut((v_row, 0), (1, BASE_DOF)).copy_from(&base);
            matrix.view_mut((a_row, BASE_DOF), (1, BASE_DOF)).copy_from(&base);
            rhs[v_row] = -(joints * &reference.q_dot)[0];
            let b = bias.map_or(0.0, |b| b[row]);
            rhs[a_row] = -(joints * &reference.q_ddot)[0] - b;
        }
    }
    ConstraintSystem { matrix, rhs }
}

fn rates_vector(base_rates: &Vector6<f64>, q_dot: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(BASE_DOF + q_dot.len());
    v.fixed_rows_mut::<6>(0).copy_from(base_rates);
    v.rows_mut(BASE_DOF, q_dot.len()).copy_from(q_dot);
    v
}

/// No-slip constraint rows for the contacting links.
///
/// `base_rates` supplies the base velocity used in the acceleration bias
/// `Jdot * [base_rates, q_dot]`.
pub fn assemble_constraints(
    config: &RobotConfig,
    state: &RobotState,
    reference: &JointReference,
    contacts: &[bool],
    base_rates: &Vector6<f64>,
) -> Result<ConstraintSystem> {
    if contacts.len() != config.link_count {
        return Err(Error::Dimension {
            what: "contact vector",
            expected: config.link_count,
            got: contacts.len(),
        });
    }
    for (what, got) in [
        ("joint rate reference", reference.q_dot.len()),
        ("joint acceleration reference", reference.q_ddot.len()),
    ] {
        if got != config.joint_count() {
            return Err(Error::Dimension {
                what,
                expected: config.joint_count(),
                got,
            });
        }
    }
    let (_, jac) = kinematics(config, state)?;
    let bias = jacobian_dot_times_v(config, state, &rates_vector(base_rates, &reference.q_dot))?;
    Ok(assemble_with_jacobian(
        &jac,
        Some(&bias),
        reference,
        &contact_indices(contacts),
    ))
}

fn pinv_solve(matrix: &DMatrix<f64>, rhs: &DVector<f64>, tolerance: f64) -> Result<DVector<f64>> {
    let cols = matrix.ncols();
    if matrix.nrows() == 0 {
        return Ok(DVector::zeros(cols));
    }
    if matrix.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("constraint system"));
    }
    let svd = matrix.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    if s_max == 0.0 {
        return Ok(DVector::zeros(cols));
    }
    svd.solve(rhs, tolerance * s_max)
        .map_err(|e| Error::DegenerateFrame(e.to_string()))
}

/// Minimum-norm least-squares solution of the no-slip system.
pub fn solve_base_rates(sys: &ConstraintSystem) -> Result<BaseRates> {
    let x = pinv_solve(&sys.matrix, &sys.rhs, PINV_TOLERANCE)?;
    Ok(BaseRates::from_column_slice(x.as_slice()))
}

/// Least-squares solution of the no-slip system, treating singular values
/// below `tolerance * sigma_max` as zero.
pub fn solve_base_rates_with(sys: &ConstraintSystem, tolerance: f64) -> Result<BaseRates> {
    let x = pinv_solve(&sys.matrix, &sys.rhs, tolerance)?;
    Ok(BaseRates::from_column_slice(x.as_slice()))
}

/// Rigidly rotates the robot about the centroid of its contacting links so
/// that the reduced-order frame's `z` axis points straight up, then lowers or
/// raises it so the lowest link rests on the ground plane `z = 0`.
///
/// A rotation about a horizontal axis through ground-level points moves them
/// vertically to first order, so the contacts keep their x-y positions.
pub fn settle(
    config: &RobotConfig,
    robot: &RobotState,
    memory: &FrameMemory,
    epsilon: f64,
) -> Result<RobotState> {
    let links = forward_kinematics(config, robot)?;
    let (rom, _) = reduce_links(config, &links, memory, epsilon)?;
    let z_hat = rom.r_com.column(2).into_owned();
    let up = Vector3::z() * z_hat.z.signum();
    let Some(rotation) = Rotation3::rotation_between(&z_hat, &up) else {
        return Ok(robot.clone());
    };
    let contacts = contact_indices(&rom.contacts);
    let pivot = contacts.iter().map(|&i| links.link(i)).sum::<Vector3<f64>>() / contacts.len().max(1) as f64;
    let base = rotation * robot.base_rotation();
    let mut settled = RobotState {
        p_b: pivot + rotation * (robot.p_b - pivot),
        phi_b: euler_xyz_from_rotation(&base),
        q: robot.q.clone(),
    };
    let lowest = forward_kinematics(config, &settled)?.as_matrix().row(2).min();
    settled.p_b.z -= lowest;
    settled.validate(config)?;
    Ok(settled)
}

/// Diagnostics of a single model step, evaluated at the start of the step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub rom: RomState,
    pub base_rates: BaseRates,
    pub residual: f64,
}

/// Result of a fixed-parameter horizon rollout. Entry `k` describes the
/// state after `k + 1` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub states: Vec<RobotState>,
    pub rom_states: Vec<RomState>,
    pub residuals: Vec<f64>,
    pub final_state: ModelState,
}

impl RolloutResult {
    pub fn predicted_com(&self) -> Vec<Vector3<f64>> {
        self.rom_states.iter().map(|r| r.p_com).collect()
    }
}

/// Motion model bound to one robot, oscillator coupling and contact threshold.
#[derive(Clone, Debug)]
pub struct MotionModel {
    pub config: RobotConfig,
    pub epsilon: f64,
    pub options: ModelOptions,
    cpg: Cpg,
}

/// Solver choices of the motion model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// Relative singular-value cutoff of the no-slip solve.
    pub rank_tolerance: f64,
    /// Level the reduced-order frame after every step, see [`settle`].
    pub settle: bool,
}

/// Default cutoff of the simulator's no-slip solve. Roll and pitch only
/// move the contacts horizontally through their small height differences,
/// and resolving those directions exactly produces spurious tumbling.
pub const DEFAULT_RANK_TOLERANCE: f64 = 5e-2;

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
            settle: true,
        }
    }
}

impl ModelOptions {
    /// Plain minimum-norm solve without settling.
    pub fn exact() -> Self {
        Self {
            rank_tolerance: PINV_TOLERANCE,
            settle: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rank_tolerance.is_finite() && self.rank_tolerance > 0.0 && self.rank_tolerance < 1.0) {
            return Err(Error::invalid(
                "model.rank_tolerance",
                format!("must lie in (0, 1), got {}", self.rank_tolerance),
            ));
        }
        Ok(())
    }
}

impl MotionModel {
    pub fn new(config: RobotConfig, params: &CpgParams, epsilon: f64) -> Result<Self> {
        config.validate()?;
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
        }
        if params.joint_count() != config.joint_count() {
            return Err(Error::Dimension {
                what: "cpg amplitude vector",
                expected: config.joint_count(),
                got: params.joint_count(),
            });
        }
        let cpg = Cpg::for_params(params)?;
        Ok(Self {
            config,
            epsilon,
            options: ModelOptions::default(),
            cpg,
        })
    }

    pub fn with_options(mut self, options: ModelOptions) -> Result<Self> {
        options.validate()?;
        self.options = options;
        Ok(self)
    }

    pub fn cpg(&self) -> &Cpg {
        &self.cpg
    }

    /// Model state whose joint angles match the oscillator output.
    pub fn synchronized(
        &self,
        robot: RobotState,
        cpg: CpgState,
        params: &CpgParams,
    ) -> Result<ModelState> {
        let reference = self.cpg.output(&cpg, params)?;
        let robot = RobotState { q: reference.q, ..robot };
        robot.validate(&self.config)?;
        Ok(ModelState {
            robot,
            cpg,
            frame: FrameMemory::empty(),
        })
    }

    /// Moves the robot rigidly so that its reduced-order frame is level with
    /// `x` pointing along `heading` (radians about world `z`), its centre of
    /// mass keeps its x-y position and its lowest link rests on `z = 0`.
    pub fn leveled(&self, state: &ModelState, heading: f64) -> Result<ModelState> {
        let (rom, _) = self.observe(state)?;
        let turn = Rotation3::from_axis_angle(&Vector3::z_axis(), heading).into_inner()
            * rom.r_com.transpose();
        let base = turn * state.robot.base_rotation();
        let mut robot = RobotState {
            p_b: rom.p_com + turn * (state.robot.p_b - rom.p_com),
            phi_b: euler_xyz_from_rotation(&base),
            q: state.robot.q.clone(),
        };
        let links = forward_kinematics(&self.config, &robot)?;
        robot.p_b.z -= links.as_matrix().row(2).min();
        robot.validate(&self.config)?;
        Ok(ModelState {
            robot,
            cpg: state.cpg.clone(),
            frame: FrameMemory::empty(),
        })
    }

    /// Reduced-order state of a model state, without advancing it.
    pub fn observe(&self, state: &ModelState) -> Result<(RomState, FrameMemory)> {
        let links = forward_kinematics(&self.config, &state.robot)?;
        reduce_links(&self.config, &links, &state.frame, self.epsilon)
    }

    /// Advances the oscillators, contacts and base pose by `dt`.
    ///
    /// Joint tracking is perfect: the robot's joint angles are the oscillator
    /// output at the start and at the end of the step.
    pub fn step(
        &self,
        state: &ModelState,
        params: &CpgParams,
        dt: f64,
    ) -> Result<(ModelState, StepReport)> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        let reference = self.cpg.output(&state.cpg, params)?;
        let robot = RobotState {
            q: reference.q.clone(),
            ..state.robot.clone()
        };
        let (links, jac) = kinematics(&self.config, &robot)?;
        let (rom, frame) = reduce_links(&self.config, &links, &state.frame, self.epsilon)?;
        let contacts = contact_indices(&rom.contacts);

        let (base_rates, residual) = if contacts.is_empty() {
            (BaseRates::zeros(), 0.0)
        } else {
            let velocity_only = assemble_with_jacobian(&jac, None, &reference, &contacts);
            let k = contacts.len();
            let v_rows = velocity_only.matrix.view((0, 0), (2 * k, BASE_DOF)).into_owned();
            let v_rhs = velocity_only.rhs.rows(0, 2 * k).into_owned();
            let v = pinv_solve(&v_rows, &v_rhs, self.options.rank_tolerance)?;
            let v = Vector6::from_column_slice(v.as_slice());
            let bias = jacobian_dot_times_v(
                &self.config,
                &robot,
                &rates_vector(&v, &reference.q_dot),
            )?;
            let sys = assemble_with_jacobian(&jac, Some(&bias), &reference, &contacts);
            let x = solve_base_rates_with(&sys, self.options.rank_tolerance)?;
            let residual = sys.residual(&x);
            (x, residual)
        };

        let half_dt2 = 0.5 * dt * dt;
        let dp = base_rates.fixed_rows::<3>(0) * dt + base_rates.fixed_rows::<3>(6) * half_dt2;
        let dphi = base_rates.fixed_rows::<3>(3) * dt + base_rates.fixed_rows::<3>(9) * half_dt2;
        let cpg_next = self.cpg.step(&state.cpg, params, dt)?;
        let q_next = self.cpg.output(&cpg_next, params)?.q;
        let mut next_robot = RobotState {
            p_b: robot.p_b + dp,
            phi_b: robot.phi_b + dphi,
            q: q_next,
        };
        if next_robot.p_b.iter().chain(next_robot.phi_b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Integration { t: dt });
        }
        next_robot.validate(&self.config)?;
        if self.options.settle && !contacts.is_empty() {
            next_robot = settle(&self.config, &next_robot, &frame, self.epsilon)?;
        }
        Ok((
            ModelState {
                robot: next_robot,
                cpg: cpg_next,
                frame,
            },
            StepReport {
                rom,
                base_rates,
                residual,
            },
        ))
    }

    /// Repeats [`MotionModel::step`] with fixed parameters.
    pub fn rollout(
        &self,
        state: &ModelState,
        params: &CpgParams,
        dt: f64,
        horizon_steps: usize,
    ) -> Result<RolloutResult> {
        if horizon_steps == 0 {
            return Err(Error::invalid("horizon_steps", "must be at least 1"));
        }
        let mut states = Vec::with_capacity(horizon_steps);
        let mut rom_states = Vec::with_capacity(horizon_steps);
        let mut residuals = Vec::with_capacity(horizon_steps);
        let mut current = state.clone();
        for k in 0..horizon_steps {
            let (next, report) = self.step(&current, params, dt)?;
            if k > 0 {
                rom_states.push(report.rom);
            }
            residuals.push(report.residual);
            states.push(next.robot.clone());
            current = next;
        }
        let (last_rom, frame) = self.observe(&current)?;
        rom_states.push(last_rom);
        current.frame = frame;
        Ok(RolloutResult {
            states,
            rom_states,
            residuals,
            final_state: current,
        })
    }
}

/// Free-function form of [`MotionModel::step`].
pub fn step(
    config: &RobotConfig,
    state: &ModelState,
    params: &CpgParams,
    dt: f64,
    epsilon: f64,
) -> Result<(ModelState, StepReport)> {
    MotionModel::new(config.clone(), params, epsilon)?.step(state, params, dt)
}

/// Free-function form of [`MotionModel::rollout`].
pub fn rollout(
    config: &RobotConfig,
    state: &ModelState,
    params: &CpgParams,
    dt: f64,
    horizon_steps: usize,
    epsilon: f64,
) -> Result<RolloutResult> {
    MotionModel::new(config.clone(), params, epsilon)?.rollout(state, params, dt, horizon_steps)
}
