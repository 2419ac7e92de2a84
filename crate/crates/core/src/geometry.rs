//! Rigid transforms, point clouds and the ego/residual flow split.
//!
//! Every transform here maps coordinates expressed in frame `t` into frame
//! `t + 1`. Under that convention a point that is static in the world moves by
//! exactly its ego flow, so its residual flow is zero.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::error::{validation, Result};

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// Rotation plus translation, `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(validation("transform has non-finite entries"));
        }
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > ORTHO_TOL || (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(validation(format!(
                "rotation is not a proper orthonormal matrix (|RᵀR - I| = {ortho_err:e}, det = {})",
                rotation.determinant()
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation of `yaw` radians about +z followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let rotation = *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix();
        Self { rotation, translation }
    }

    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        let rotation = *Rotation3::new(axis_angle).matrix();
        Self { rotation, translation }
    }

    /// Row-major homogeneous 4×4.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_homogeneous();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64; 16]) -> Result<Self> {
        let m = Matrix4::from_row_slice(values);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(validation(format!("homogeneous bottom row is {bottom:?}, expected [0, 0, 0, 1]")));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    #[inline]
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vec3::zeros()
    }
}

pub fn apply_transform(t: &RigidTransform, points: &[Vec3]) -> Result<Vec<Vec3>> {
    ensure_finite(points)?;
    Ok(points.iter().map(|p| t.apply_point(p)).collect())
}

pub fn invert_transform(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Flow induced purely by sensor motion: `T p - p`.
pub fn ego_flow(t: &RigidTransform, points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|p| t.apply_point(p) - p).collect()
}

fn ensure_finite(points: &[Vec3]) -> Result<()> {
    match points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        Some(i) => Err(validation(format!("point {i} is not finite"))),
        None => Ok(()),
    }
}

/// One LiDAR sweep with optional annotations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub gt_flow: Option<Vec<Vec3>>,
    pub foreground_mask: Option<Vec<bool>>,
    pub ground_mask: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>) -> Self {
        Self { positions, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite(&self.positions)?;
        let n = self.len();
        if let Some(flow) = &self.gt_flow {
            if flow.len() != n {
                return Err(validation(format!("gt_flow has {} rows, cloud has {n}", flow.len())));
            }
            ensure_finite(flow)?;
        }
        for (name, mask) in [("foreground_mask", &self.foreground_mask), ("ground_mask", &self.ground_mask)] {
            if let Some(m) = mask {
                if m.len() != n {
                    return Err(validation(format!("{name} has {} entries, cloud has {n}", m.len())));
                }
            }
        }
        Ok(())
    }

    pub fn is_ground(&self, i: usize) -> bool {
        self.ground_mask.as_ref().is_some_and(|m| m[i])
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        self.foreground_mask.as_ref().is_some_and(|m| m[i])
    }

    /// Copy with ground points removed.
    pub fn without_ground(&self) -> PointCloud {
        let Some(ground) = &self.ground_mask else {
            return self.clone();
        };
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !ground[i]).collect();
        PointCloud {
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            gt_flow: self.gt_flow.as_ref().map(|f| keep.iter().map(|&i| f[i]).collect()),
            foreground_mask: self.foreground_mask.as_ref().map(|m| keep.iter().map(|&i| m[i]).collect()),
            ground_mask: None,
        }
    }
}

/// Predicted flow split as `total = ego + residual`. Only the two parts are
/// stored.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEstimate {
    pub ego: Vec<Vec3>,
    pub residual: Vec<Vec3>,
}

impl FlowEstimate {
    pub fn new(ego: Vec<Vec3>, residual: Vec<Vec3>) -> Result<Self> {
        if ego.len() != residual.len() {
            return Err(validation(format!("ego has {} rows, residual has {}", ego.len(), residual.len())));
        }
        Ok(Self { ego, residual })
    }

    pub fn len(&self) -> usize {
        self.ego.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego.is_empty()
    }

    pub fn total(&self) -> Vec<Vec3> {
        self.ego.iter().zip(&self.residual).map(|(e, r)| e + r).collect()
    }
}
