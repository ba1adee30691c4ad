//! Reduced-order model: center of mass, SVD floating frame, bounding box and
//! geometric contact estimate.
//!
//! The CoM frame axes come from the left singular vectors of the
//! CoM-relative link cloud: `x` is the direction of largest spread and `z`
//! the direction of smallest spread. Signs are kept continuous through an
//! explicit [`FrameMemory`] value owned by the caller.

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robot_model::{forward_kinematics, LinkPositions, RobotConfig, RobotState};

/// Default contact threshold [m].
pub const DEFAULT_EPSILON: f64 = 0.015;

/// Relative singular-value tolerance used for rank decisions.
pub const SINGULAR_TOLERANCE: f64 = 1e-8;

/// Axes from the previous timestep, used to keep singular-vector signs continuous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMemory {
    pub prev_x_hat: Option<Vector3<f64>>,
    pub prev_z_hat: Option<Vector3<f64>>,
}

impl FrameMemory {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        Self {
            prev_x_hat: Some(r.column(0).into_owned()),
            prev_z_hat: Some(r.column(2).into_owned()),
        }
    }

    /// Memory expressed in a world frame rotated by `rotation`.
    pub fn rotated(&self, rotation: &Matrix3<f64>) -> Self {
        Self {
            prev_x_hat: self.prev_x_hat.map(|v| rotation * v),
            prev_z_hat: self.prev_z_hat.map(|v| rotation * v),
        }
    }
}

/// Box in the CoM frame: half-extents per axis plus the box center, which
/// sits at the midpoint of the link extremes and is generally not the CoM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub half_extents: Vector3<f64>,
    pub center: Vector3<f64>,
}

impl BoundingBox {
    pub fn min(&self) -> Vector3<f64> {
        self.center - self.half_extents
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + self.half_extents
    }
}

/// Reduced-order state of the whole robot at one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RomState {
    pub p_com: Vector3<f64>,
    /// World <- CoM-frame rotation, columns `[x_hat, y_hat, z_hat]`.
    pub r_com: Matrix3<f64>,
    /// Half-extents of the box along the CoM-frame axes.
    pub delta: Vector3<f64>,
    /// Box center in the CoM frame.
    pub box_center: Vector3<f64>,
    pub contacts: Vec<bool>,
}

impl RomState {
    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox {
            half_extents: self.delta,
            center: self.box_center,
        }
    }

    pub fn contact_count(&self) -> usize {
        self.contacts.iter().filter(|c| **c).count()
    }

    /// World-frame center of the box.
    pub fn box_center_world(&self) -> Vector3<f64> {
        self.p_com + self.r_com * self.box_center
    }

    /// Half-extents of the world-axis-aligned hull of the oriented box.
    pub fn world_half_extents(&self) -> Vector3<f64> {
        self.r_com.abs() * self.delta
    }

    /// Checks the structural invariants of the state against a tolerance.
    pub fn check_invariants(&self, tol: f64) -> std::result::Result<(), String> {
        let orth = (self.r_com.transpose() * self.r_com - Matrix3::identity()).amax();
        if orth > tol {
            return Err(format!("R_com not orthonormal: {orth:e}"));
        }
        let det = self.r_com.determinant();
        if (det - 1.0).abs() > tol {
            return Err(format!("det(R_com) = {det}"));
        }
        if self.delta.iter().any(|d| *d < 0.0) {
            return Err("negative half-extent".into());
        }
        Ok(())
    }
}

/// Mass-weighted mean of the link positions.
pub fn com_position(config: &RobotConfig, links: &LinkPositions) -> Vector3<f64> {
    let m = links.as_matrix();
    let weighted: Vector3<f64> = m
        .column_iter()
        .zip(&config.link_masses)
        .map(|(p, mass)| p * *mass)
        .sum();
    weighted / config.total_mass()
}

/// Link positions relative to the CoM.
pub fn relative_positions(links: &LinkPositions, p_com: &Vector3<f64>) -> Matrix3xX<f64> {
    let mut rel = links.as_matrix().clone();
    for mut col in rel.column_iter_mut() {
        col -= p_com;
    }
    rel
}

fn orient(v: Vector3<f64>, reference: &Vector3<f64>) -> Vector3<f64> {
    let d = v.dot(reference);
    if d < 0.0 {
        -v
    } else if d > 0.0 {
        v
    } else {
        // Tie: make the first non-negligible component positive.
        match v.iter().find(|c| c.abs() > 1e-12) {
            Some(c) if *c < 0.0 => -v,
            _ => v,
        }
    }
}

/// Unit vector along `reference` with its `axis` component removed, if it survives.
fn project_out(reference: &Vector3<f64>, axis: &Vector3<f64>) -> Option<Vector3<f64>> {
    let v = reference - axis * axis.dot(reference);
    let n = v.norm();
    (n > 1e-6).then(|| v / n)
}

/// Orientation of the CoM frame from the SVD of the CoM-relative cloud.
///
/// Returns the rotation (columns `x_hat`, `y_hat = z_hat x x_hat`, `z_hat`)
/// and the updated memory. When the two smallest singular values coincide
/// (for example a straight chain), `z_hat` falls back to the remembered
/// `z_hat`, or world z, projected orthogonal to `x_hat`.
pub fn com_frame(
    rel: &Matrix3xX<f64>,
    memory: &FrameMemory,
) -> Result<(Matrix3<f64>, FrameMemory)> {
    if rel.ncols() < 2 {
        return Err(Error::DegenerateFrame(format!(
            "need at least 2 links, got {}",
            rel.ncols()
        )));
    }
    if rel.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("relative link positions"));
    }
    let svd = rel.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|a, b| sv[*b].total_cmp(&sv[*a]));
    let sigma = |k: usize| order.get(k).map_or(0.0, |&i| sv[i]);
    let s1 = sigma(0);
    if s1 <= 1e-12 {
        return Err(Error::DegenerateFrame("all links collocated".into()));
    }
    let x_ref = memory.prev_x_hat.unwrap_or_else(Vector3::x);
    let x_hat = orient(u.column(order[0]).normalize(), &x_ref);

    let well_separated = sigma(1) - sigma(2) > SINGULAR_TOLERANCE * s1;
    let z_hat = if well_separated && order.len() == 3 {
        let z = u.column(order[2]).into_owned();
        let z = (z - x_hat * x_hat.dot(&z)).normalize();
        orient(z, &memory.prev_z_hat.unwrap_or_else(Vector3::z))
    } else {
        memory
            .prev_z_hat
            .and_then(|z| project_out(&z, &x_hat))
            .or_else(|| project_out(&Vector3::z(), &x_hat))
            .or_else(|| project_out(&Vector3::y(), &x_hat))
            .ok_or_else(|| Error::DegenerateFrame("no usable normal direction".into()))?
    };
    let y_hat = z_hat.cross(&x_hat);
    let r = Matrix3::from_columns(&[x_hat, y_hat, z_hat]);
    Ok((r, FrameMemory::from_rotation(&r)))
}

/// Half-extents and center of the box enclosing a CoM-frame cloud.
pub fn bounding_box(rel_in_com_frame: &Matrix3xX<f64>) -> BoundingBox {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for col in rel_in_com_frame.column_iter() {
        lo = lo.inf(&col.into_owned());
        hi = hi.sup(&col.into_owned());
    }
    BoundingBox {
        half_extents: (hi - lo) * 0.5,
        center: (hi + lo) * 0.5,
    }
}

/// Flags links whose CoM-frame z lies within `epsilon` of the box bottom face.
pub fn contact_estimate(
    rel_in_com_frame: &Matrix3xX<f64>,
    bbox: &BoundingBox,
    epsilon: f64,
) -> Vec<bool> {
    let bottom = bbox.center.z - bbox.half_extents.z;
    rel_in_com_frame
        .column_iter()
        .map(|p| p.z <= bottom + epsilon)
        .collect()
}

/// Reduced-order state from already computed link positions.
pub fn reduce_links(
    config: &RobotConfig,
    links: &LinkPositions,
    memory: &FrameMemory,
    epsilon: f64,
) -> Result<(RomState, FrameMemory)> {
    let p_com = com_position(config, links);
    let rel = relative_positions(links, &p_com);
    let (r_com, memory) = com_frame(&rel, memory)?;
    let local = r_com.transpose() * &rel;
    let bbox = bounding_box(&local);
    let contacts = contact_estimate(&local, &bbox, epsilon);
    Ok((
        RomState {
            p_com,
            r_com,
            delta: bbox.half_extents,
            box_center: bbox.center,
            contacts,
        },
        memory,
    ))
}

/// Maps a full robot state to its reduced-order state.
pub fn reduce(
    config: &RobotConfig,
    state: &RobotState,
    memory: &FrameMemory,
    epsilon: f64,
) -> Result<(RomState, FrameMemory)> {
    let links = forward_kinematics(config, state)?;
    reduce_links(config, &links, memory, epsilon)
}
