//! Articulated chain model: configuration, floating-base state, forward
//! kinematics and its first- and second-order differential maps.
//!
//! The chain is a sequence of point masses. Link 1 (the head) carries the
//! base frame. Joint `i` sits at the origin of link `i` and sets the
//! direction of the segment running from link `i` to link `i + 1`, so with
//! all joints at zero the links lie along the base x-axis at `i * L`.
//!
//! Base orientation uses intrinsic X-Y-Z Euler angles:
//! `R_b = Rx(roll) * Ry(pitch) * Rz(yaw)`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance from `|pitch| = pi/2` inside which the Euler-rate map is treated as singular.
pub const GIMBAL_GUARD: f64 = 1e-3;

/// Total robot length used by the default configuration, in meters.
pub const DEFAULT_TOTAL_LENGTH: f64 = 1.7;

/// Number of links used by the default configuration.
pub const DEFAULT_LINK_COUNT: usize = 12;

/// Step used for the directional finite difference of the Jacobian.
pub const JACOBIAN_DOT_STEP: f64 = 1e-6;

/// Number of base coordinates: position (3) and Euler angles (3).
pub const BASE_DOF: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointAxis {
    Pitch,
    Yaw,
}

impl JointAxis {
    /// Rotation axis in the parent link frame.
    pub fn unit(self) -> Vector3<f64> {
        match self {
            JointAxis::Pitch => Vector3::y(),
            JointAxis::Yaw => Vector3::z(),
        }
    }

    /// Axis of the `index`-th joint (0-based): pitch first, then alternating.
    pub fn alternating(index: usize) -> Self {
        if index.is_multiple_of(2) {
            JointAxis::Pitch
        } else {
            JointAxis::Yaw
        }
    }
}

/// Geometry and mass distribution of the chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub link_count: usize,
    /// Distance between consecutive link origins [m].
    pub link_length: f64,
    /// Point mass of every link [kg].
    pub link_masses: Vec<f64>,
    /// Axis tag of each joint, `link_count - 1` entries.
    pub joint_axes: Vec<JointAxis>,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self::uniform(DEFAULT_LINK_COUNT, DEFAULT_TOTAL_LENGTH)
    }
}

impl RobotConfig {
    /// Uniform chain of `link_count` unit-mass modules, each `total_length / link_count` long.
    pub fn uniform(link_count: usize, total_length: f64) -> Self {
        Self {
            link_count,
            link_length: total_length / link_count.max(1) as f64,
            link_masses: vec![1.0; link_count],
            joint_axes: (0..link_count.saturating_sub(1))
                .map(JointAxis::alternating)
                .collect(),
        }
    }

    pub fn with_link_length(mut self, link_length: f64) -> Self {
        self.link_length = link_length;
        self
    }

    pub fn joint_count(&self) -> usize {
        self.link_count - 1
    }

    /// Dimension of the full coordinate vector `[p_b, Phi_b, q]`.
    pub fn dof(&self) -> usize {
        BASE_DOF + self.joint_count()
    }

    pub fn total_mass(&self) -> f64 {
        self.link_masses.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.link_count < 3 {
            return Err(Error::invalid(
                "robot.link_count",
                format!("need at least 3 links, got {}", self.link_count),
            ));
        }
        if !(self.link_length.is_finite() && self.link_length > 0.0) {
            return Err(Error::invalid(
                "robot.link_length",
                format!("must be positive and finite, got {}", self.link_length),
            ));
        }
        if self.link_masses.len() != self.link_count {
            return Err(Error::invalid(
                "robot.link_masses",
                format!(
                    "expected {} entries, got {}",
                    self.link_count,
                    self.link_masses.len()
                ),
            ));
        }
        if let Some(i) = self
            .link_masses
            .iter()
            .position(|m| !(m.is_finite() && *m > 0.0))
        {
            return Err(Error::invalid(
                format!("robot.link_masses[{i}]"),
                "masses must be positive and finite",
            ));
        }
        if self.joint_axes.len() != self.joint_count() {
            return Err(Error::invalid(
                "robot.joint_axes",
                format!(
                    "expected {} entries, got {}",
                    self.joint_count(),
                    self.joint_axes.len()
                ),
            ));
        }
        for (i, axis) in self.joint_axes.iter().enumerate() {
            if *axis != JointAxis::alternating(i) {
                return Err(Error::invalid(
                    format!("robot.joint_axes[{i}]"),
                    "joints must alternate pitch, yaw starting with pitch",
                ));
            }
        }
        Ok(())
    }
}

/// Floating-base state: head position, XYZ-Euler orientation and joint angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub p_b: Vector3<f64>,
    pub phi_b: Vector3<f64>,
    #[serde(with = "crate::serde_vec")]
    pub q: DVector<f64>,
}

impl RobotState {
    /// Straight chain at the origin with identity orientation.
    pub fn straight(config: &RobotConfig) -> Self {
        Self {
            p_b: Vector3::zeros(),
            phi_b: Vector3::zeros(),
            q: DVector::zeros(config.joint_count()),
        }
    }

    pub fn validate(&self, config: &RobotConfig) -> Result<()> {
        if self.q.len() != config.joint_count() {
            return Err(Error::Dimension {
                what: "joint angle vector",
                expected: config.joint_count(),
                got: self.q.len(),
            });
        }
        if self.p_b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("base position"));
        }
        if self.phi_b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("base orientation"));
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint angles"));
        }
        let pitch = self.phi_b[1];
        if pitch.abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_GUARD {
            return Err(Error::GimbalGuard { pitch });
        }
        Ok(())
    }

    /// Packs `[p_b, Phi_b, q]` into one coordinate vector.
    pub fn to_coordinates(&self) -> DVector<f64> {
        let mut x = DVector::zeros(BASE_DOF + self.q.len());
        x.fixed_rows_mut::<3>(0).copy_from(&self.p_b);
        x.fixed_rows_mut::<3>(3).copy_from(&self.phi_b);
        x.rows_mut(BASE_DOF, self.q.len()).copy_from(&self.q);
        x
    }

    pub fn from_coordinates(x: &DVector<f64>) -> Self {
        Self {
            p_b: x.fixed_rows::<3>(0).into_owned(),
            phi_b: x.fixed_rows::<3>(3).into_owned(),
            q: x.rows(BASE_DOF, x.len() - BASE_DOF).into_owned(),
        }
    }

    /// Returns the state moved by `rates * h` in coordinate space.
    pub fn advanced(&self, rates: &DVector<f64>, h: f64) -> Self {
        Self::from_coordinates(&(self.to_coordinates() + rates * h))
    }

    /// Base rotation `R_b` (world <- base).
    pub fn base_rotation(&self) -> Matrix3<f64> {
        euler_xyz(&self.phi_b)
    }
}

/// World-frame link origins, one column per link.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkPositions(pub Matrix3xX<f64>);

impl LinkPositions {
    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }

    pub fn link(&self, i: usize) -> Vector3<f64> {
        self.0.column(i).into_owned()
    }

    pub fn as_matrix(&self) -> &Matrix3xX<f64> {
        &self.0
    }
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Intrinsic X-Y-Z rotation `Rx(phi[0]) * Ry(phi[1]) * Rz(phi[2])`.
pub fn euler_xyz(phi: &Vector3<f64>) -> Matrix3<f64> {
    rot_x(phi[0]) * rot_y(phi[1]) * rot_z(phi[2])
}

/// Inverse of [`euler_xyz`], returning the pitch in `[-pi/2, pi/2]`.
pub fn euler_xyz_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let roll = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let yaw = (-r[(0, 1)]).atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

/// World-frame axes `w_k` such that `dR_b/dphi_k = [w_k]x R_b`.
pub fn euler_rate_axes(phi: &Vector3<f64>) -> [Vector3<f64>; 3] {
    let rx = rot_x(phi[0]);
    let rxy = rx * rot_y(phi[1]);
    [Vector3::x(), rx * Vector3::y(), rxy * Vector3::z()]
}

fn joint_rotation(axis: JointAxis, angle: f64) -> Matrix3<f64> {
    match axis {
        JointAxis::Pitch => rot_y(angle),
        JointAxis::Yaw => rot_z(angle),
    }
}

/// Link positions plus the world-frame joint axes needed by the Jacobian.
struct ChainPose {
    positions: Matrix3xX<f64>,
    joint_axes_world: Vec<Vector3<f64>>,
}

fn chain_pose(config: &RobotConfig, state: &RobotState) -> ChainPose {
    let n = config.link_count;
    let mut positions = Matrix3xX::zeros(n);
    let mut joint_axes_world = Vec::with_capacity(n - 1);
    let mut rotation = state.base_rotation();
    let mut p = state.p_b;
    positions.set_column(0, &p);
    let step = Vector3::new(config.link_length, 0.0, 0.0);
    for (j, axis) in config.joint_axes.iter().enumerate() {
        joint_axes_world.push(rotation * axis.unit());
        rotation *= joint_rotation(*axis, state.q[j]);
        p += rotation * step;
        positions.set_column(j + 1, &p);
    }
    ChainPose {
        positions,
        joint_axes_world,
    }
}

fn check(config: &RobotConfig, state: &RobotState) -> Result<()> {
    if state.q.len() != config.joint_count() || config.joint_axes.len() != config.joint_count() {
        return Err(Error::Dimension {
            what: "joint angle vector",
            expected: config.joint_count(),
            got: state.q.len(),
        });
    }
    state.validate(config)
}

/// World positions of all link origins.
pub fn forward_kinematics(config: &RobotConfig, state: &RobotState) -> Result<LinkPositions> {
    check(config, state)?;
    Ok(LinkPositions(chain_pose(config, state).positions))
}

fn jacobian_unchecked(config: &RobotConfig, state: &RobotState) -> (Matrix3xX<f64>, DMatrix<f64>) {
    let n = config.link_count;
    let pose = chain_pose(config, state);
    let mut jac = DMatrix::zeros(3 * n, config.dof());
    let euler_axes = euler_rate_axes(&state.phi_b);
    for i in 0..n {
        let p_i: Vector3<f64> = pose.positions.column(i).into_owned();
        let row = 3 * i;
        jac.fixed_view_mut::<3, 3>(row, 0)
            .copy_from(&Matrix3::identity());
        let lever = p_i - state.p_b;
        for (k, w) in euler_axes.iter().enumerate() {
            jac.fixed_view_mut::<3, 1>(row, 3 + k)
                .copy_from(&w.cross(&lever));
        }
        for j in 0..i {
            let origin: Vector3<f64> = pose.positions.column(j).into_owned();
            let col = pose.joint_axes_world[j].cross(&(p_i - origin));
            jac.fixed_view_mut::<3, 1>(row, BASE_DOF + j).copy_from(&col);
        }
    }
    (pose.positions, jac)
}

/// Stacked `3N x (6 + N - 1)` Jacobian of link positions with respect to
/// `[p_b, Phi_b, q]`. Rows are grouped per link as (x, y, z).
pub fn stacked_jacobian(config: &RobotConfig, state: &RobotState) -> Result<DMatrix<f64>> {
    check(config, state)?;
    Ok(jacobian_unchecked(config, state).1)
}

/// Forward kinematics and Jacobian from a single chain traversal.
pub fn kinematics(
    config: &RobotConfig,
    state: &RobotState,
) -> Result<(LinkPositions, DMatrix<f64>)> {
    check(config, state)?;
    let (p, j) = jacobian_unchecked(config, state);
    Ok((LinkPositions(p), j))
}

/// Acceleration bias `Jdot * rates`, so that `Pddot = J * Xddot + Jdot * Xdot`.
///
/// Computed as a central directional difference of the Jacobian along `rates`.
pub fn jacobian_dot_times_v(
    config: &RobotConfig,
    state: &RobotState,
    rates: &DVector<f64>,
) -> Result<DVector<f64>> {
    check(config, state)?;
    if rates.len() != config.dof() {
        return Err(Error::Dimension {
            what: "rate vector",
            expected: config.dof(),
            got: rates.len(),
        });
    }
    if rates.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rate vector"));
    }
    let scale = rates.amax();
    if scale == 0.0 {
        return Ok(DVector::zeros(3 * config.link_count));
    }
    // Normalize the direction so the probe step stays at JACOBIAN_DOT_STEP.
    let h = JACOBIAN_DOT_STEP / scale;
    let plus = state.advanced(rates, h);
    let minus = state.advanced(rates, -h);
    check(config, &plus)?;
    check(config, &minus)?;
    let j_plus = jacobian_unchecked(config, &plus).1;
    let j_minus = jacobian_unchecked(config, &minus).1;
    Ok((j_plus - j_minus) * rates / (2.0 * h))
}
