//! Coupled-oscillator central pattern generator.
//!
//! Each joint has an oscillator with phase `theta`, amplitude `r` and
//! amplitude rate `r_dot`:
//!
//! ```text
//! theta_dot = mu * A * theta + omega - mu * B * phi
//! r_ddot    = gamma^2 * (a - r) - gamma * r_dot
//! ```
//!
//! and the joint reference is `q = r sin(theta)` with its first two time
//! derivatives, holding the parameters constant over a step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Control rate of the oscillators [Hz].
pub const CONTROL_RATE_HZ: f64 = 200.0;
pub const DEFAULT_GAMMA: f64 = 20.0;
pub const DEFAULT_MU: f64 = 10.0;

/// Boundary treatment of the phase-coupling matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseCoupling {
    /// Graph Laplacian of the joint chain: boundary rows `(-1, 1)` and
    /// `(1, -1)`. Phase differences converge to the commanded offsets.
    #[default]
    Laplacian,
    /// Boundary rows `(1, 1)`. This matrix has a positive eigenvalue, so the
    /// phases diverge exponentially for any `mu > 0`.
    Displayed,
}

/// Oscillator inputs: per-joint amplitude, shared frequency, relative phases
/// between consecutive joints, and the two tracking gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpgParams {
    #[serde(with = "crate::serde_vec")]
    pub amplitude: DVector<f64>,
    pub omega: f64,
    /// `phi_i = varphi_{i+1} - varphi_i`.
    #[serde(with = "crate::serde_vec")]
    pub phase_offsets: DVector<f64>,
    pub gamma: f64,
    pub mu: f64,
    #[serde(default)]
    pub coupling: PhaseCoupling,
}

impl CpgParams {
    /// Zero-amplitude oscillators with default gains.
    pub fn still(n_joints: usize) -> Self {
        Self {
            amplitude: DVector::zeros(n_joints),
            omega: 0.0,
            phase_offsets: DVector::zeros(n_joints.saturating_sub(1)),
            gamma: DEFAULT_GAMMA,
            mu: DEFAULT_MU,
            coupling: PhaseCoupling::Laplacian,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.amplitude.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.amplitude.len();
        if n < 2 {
            return Err(Error::invalid("cpg.amplitude", "need at least 2 joints"));
        }
        if self.phase_offsets.len() != n - 1 {
            return Err(Error::invalid(
                "cpg.phase_offsets",
                format!("expected {} entries, got {}", n - 1, self.phase_offsets.len()),
            ));
        }
        for (i, a) in self.amplitude.iter().enumerate() {
            if !a.is_finite() || a.abs() > FRAC_PI_2 {
                return Err(Error::invalid(
                    format!("cpg.amplitude[{i}]"),
                    format!("must be finite with |a| <= pi/2, got {a}"),
                ));
            }
        }
        if let Some(i) = self.phase_offsets.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("cpg.phase_offsets[{i}]"), "must be finite"));
        }
        if !self.omega.is_finite() {
            return Err(Error::invalid("cpg.omega", "must be finite"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid("cpg.gamma", "must be positive"));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::invalid("cpg.mu", "must be non-negative"));
        }
        Ok(())
    }

    /// Flattens the optimizable part as `[a, omega, phi]`.
    pub fn to_decision_vector(&self) -> DVector<f64> {
        let n = self.amplitude.len();
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&self.amplitude);
        x[n] = self.omega;
        x.rows_mut(n + 1, n - 1).copy_from(&self.phase_offsets);
        x
    }

    /// Inverse of [`CpgParams::to_decision_vector`], keeping gains from `self`.
    pub fn with_decision_vector(&self, x: &DVector<f64>) -> Self {
        let n = self.amplitude.len();
        Self {
            amplitude: x.rows(0, n).into_owned(),
            omega: x[n],
            phase_offsets: x.rows(n + 1, n - 1).into_owned(),
            ..self.clone()
        }
    }
}

/// Internal oscillator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpgState {
    #[serde(with = "crate::serde_vec")]
    pub theta: DVector<f64>,
    #[serde(with = "crate::serde_vec")]
    pub r: DVector<f64>,
    #[serde(with = "crate::serde_vec")]
    pub r_dot: DVector<f64>,
}

impl CpgState {
    pub fn zeros(n_joints: usize) -> Self {
        Self {
            theta: DVector::zeros(n_joints),
            r: DVector::zeros(n_joints),
            r_dot: DVector::zeros(n_joints),
        }
    }

    /// Steady state of `params`: amplitudes settled and phases locked to the
    /// commanded offsets, with the first oscillator at `theta0`.
    pub fn locked(params: &CpgParams, theta0: f64) -> Self {
        let n = params.joint_count();
        let mut theta = DVector::zeros(n);
        theta[0] = theta0;
        for i in 1..n {
            theta[i] = theta[i - 1] + params.phase_offsets[i - 1];
        }
        Self {
            theta,
            r: params.amplitude.clone(),
            r_dot: DVector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.r.iter()).chain(self.r_dot.iter()).all(|v| v.is_finite())
    }

    fn to_stacked(&self) -> DVector<f64> {
        let n = self.theta.len();
        let mut s = DVector::zeros(3 * n);
        s.rows_mut(0, n).copy_from(&self.theta);
        s.rows_mut(n, n).copy_from(&self.r);
        s.rows_mut(2 * n, n).copy_from(&self.r_dot);
        s
    }

    fn from_stacked(s: &DVector<f64>) -> Self {
        let n = s.len() / 3;
        Self {
            theta: s.rows(0, n).into_owned(),
            r: s.rows(n, n).into_owned(),
            r_dot: s.rows(2 * n, n).into_owned(),
        }
    }
}

/// Time derivatives of the oscillator state.
#[derive(Clone, Debug, PartialEq)]
pub struct CpgDerivatives {
    pub theta_dot: DVector<f64>,
    pub r_dot: DVector<f64>,
    pub r_ddot: DVector<f64>,
}

/// Desired joint angles, rates and accelerations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointReference {
    #[serde(with = "crate::serde_vec")]
    pub q: DVector<f64>,
    #[serde(with = "crate::serde_vec")]
    pub q_dot: DVector<f64>,
    #[serde(with = "crate::serde_vec")]
    pub q_ddot: DVector<f64>,
}

/// Phase and amplitude coupling matrices `(A, B)` exactly as displayed:
/// `A` tridiagonal with interior rows `(1, -2, 1)` and boundary rows
/// `(1, 1, 0, ...)`, `(..., 0, 1, 1)`; `B` with `+1` on the diagonal and `-1`
/// on the subdiagonal.
pub fn coupling_matrices(n_joints: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    coupling_matrices_for(n_joints, PhaseCoupling::Displayed)
}

pub fn coupling_matrices_for(
    n_joints: usize,
    coupling: PhaseCoupling,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = n_joints;
    if n < 2 {
        return Err(Error::invalid("n_joints", format!("need at least 2, got {n}")));
    }
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        if i > 0 {
            a[(i, i - 1)] = 1.0;
        }
        if i + 1 < n {
            a[(i, i + 1)] = 1.0;
        }
        a[(i, i)] = -2.0;
    }
    let boundary = match coupling {
        PhaseCoupling::Displayed => 1.0,
        PhaseCoupling::Laplacian => -1.0,
    };
    a[(0, 0)] = boundary;
    a[(n - 1, n - 1)] = boundary;
    let mut b = DMatrix::zeros(n, n - 1);
    for j in 0..n - 1 {
        b[(j, j)] = 1.0;
        b[(j + 1, j)] = -1.0;
    }
    Ok((a, b))
}

/// Precomputed coupling for one joint count; avoids rebuilding matrices
/// every step.
#[derive(Clone, Debug)]
pub struct Cpg {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    coupling: PhaseCoupling,
}

impl Cpg {
    pub fn new(n_joints: usize, coupling: PhaseCoupling) -> Result<Self> {
        let (a, b) = coupling_matrices_for(n_joints, coupling)?;
        Ok(Self { a, b, coupling })
    }

    pub fn for_params(params: &CpgParams) -> Result<Self> {
        Self::new(params.joint_count(), params.coupling)
    }

    pub fn joint_count(&self) -> usize {
        self.a.nrows()
    }

    fn check(&self, state: &CpgState, params: &CpgParams) -> Result<()> {
        let n = self.joint_count();
        for (what, got) in [
            ("cpg theta", state.theta.len()),
            ("cpg r", state.r.len()),
            ("cpg r_dot", state.r_dot.len()),
            ("cpg amplitude", params.amplitude.len()),
        ] {
            if got != n {
                return Err(Error::Dimension { what, expected: n, got });
            }
        }
        if params.phase_offsets.len() != n - 1 {
            return Err(Error::Dimension {
                what: "cpg phase offsets",
                expected: n - 1,
                got: params.phase_offsets.len(),
            });
        }
        if params.coupling != self.coupling {
            return Err(Error::invalid("cpg.coupling", "does not match the prepared coupling"));
        }
        Ok(())
    }

    fn theta_dot(&self, theta: &DVector<f64>, params: &CpgParams) -> DVector<f64> {
        let mut td = &self.a * theta - &self.b * &params.phase_offsets;
        td *= params.mu;
        td.add_scalar_mut(params.omega);
        td
    }

    pub fn derivatives(&self, state: &CpgState, params: &CpgParams) -> Result<CpgDerivatives> {
        self.check(state, params)?;
        Ok(self.derivatives_unchecked(state, params))
    }

    fn derivatives_unchecked(&self, state: &CpgState, params: &CpgParams) -> CpgDerivatives {
        let g = params.gamma;
        let r_ddot = (&params.amplitude - &state.r) * (g * g) - &state.r_dot * g;
        CpgDerivatives {
            theta_dot: self.theta_dot(&state.theta, params),
            r_dot: state.r_dot.clone(),
            r_ddot,
        }
    }

    fn stacked_rate(&self, s: &DVector<f64>, params: &CpgParams) -> DVector<f64> {
        let d = self.derivatives_unchecked(&CpgState::from_stacked(s), params);
        let n = d.theta_dot.len();
        let mut out = DVector::zeros(3 * n);
        out.rows_mut(0, n).copy_from(&d.theta_dot);
        out.rows_mut(n, n).copy_from(&d.r_dot);
        out.rows_mut(2 * n, n).copy_from(&d.r_ddot);
        out
    }

    /// One classical Runge-Kutta step of length `dt`.
    pub fn step(&self, state: &CpgState, params: &CpgParams, dt: f64) -> Result<CpgState> {
        self.check(state, params)?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        let y = state.to_stacked();
        let k1 = self.stacked_rate(&y, params);
        let k2 = self.stacked_rate(&(&y + &k1 * (0.5 * dt)), params);
        let k3 = self.stacked_rate(&(&y + &k2 * (0.5 * dt)), params);
        let k4 = self.stacked_rate(&(&y + &k3 * dt), params);
        let next = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let next = CpgState::from_stacked(&next);
        if !next.is_finite() {
            return Err(Error::Integration { t: dt });
        }
        Ok(next)
    }

    /// Joint position, rate and acceleration references.
    pub fn output(&self, state: &CpgState, params: &CpgParams) -> Result<JointReference> {
        self.check(state, params)?;
        let d = self.derivatives_unchecked(state, params);
        let theta_ddot = (&self.a * &d.theta_dot) * params.mu;
        let n = state.theta.len();
        let mut q = DVector::zeros(n);
        let mut q_dot = DVector::zeros(n);
        let mut q_ddot = DVector::zeros(n);
        for i in 0..n {
            let (s, c) = state.theta[i].sin_cos();
            let (r, rd, rdd) = (state.r[i], state.r_dot[i], d.r_ddot[i]);
            let (td, tdd) = (d.theta_dot[i], theta_ddot[i]);
            q[i] = r * s;
            q_dot[i] = rd * s + r * td * c;
            q_ddot[i] = rdd * s + 2.0 * rd * td * c + r * tdd * c - r * td * td * s;
        }
        Ok(JointReference { q, q_dot, q_ddot })
    }
}

/// Free-function form of [`Cpg::derivatives`].
pub fn cpg_derivatives(state: &CpgState, params: &CpgParams) -> Result<CpgDerivatives> {
    Cpg::for_params(params)?.derivatives(state, params)
}

/// Free-function form of [`Cpg::step`].
pub fn cpg_step(state: &CpgState, params: &CpgParams, dt: f64) -> Result<CpgState> {
    Cpg::for_params(params)?.step(state, params, dt)
}

/// Free-function form of [`Cpg::output`].
pub fn cpg_output(state: &CpgState, params: &CpgParams) -> Result<JointReference> {
    Cpg::for_params(params)?.output(state, params)
}
