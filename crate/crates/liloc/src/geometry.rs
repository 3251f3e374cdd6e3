//! SE(3)/SO(3) types and manifold operations shared by every other module.
//!
//! Rotations are stored as unit quaternions and renormalized after each
//! composition so long factor chains stay orthonormal.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation angle {angle} rad is within {margin} of pi; logarithm is ill-conditioned")]
    NearSingularLog { angle: f64, margin: f64 },
}

/// Margin below pi at which `log` refuses to answer.
pub const LOG_ANGLE_MARGIN: f64 = 1e-3;

/// 3D rotation, internally a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation(q)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Rotation(UnitQuaternion::from_matrix(m))
    }

    /// Exponential map: axis-angle vector to rotation.
    pub fn exp(w: &Vector3<f64>) -> Self {
        Rotation(UnitQuaternion::from_scaled_axis(*w))
    }

    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Rotation(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    pub fn yaw(angle: f64) -> Self {
        Rotation(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        // renormalize so repeated composition cannot drift off the unit sphere
        let q = self.0.into_inner() * other.0.into_inner();
        Rotation(UnitQuaternion::new_normalize(q))
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.inverse())
    }

    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    /// Logarithm map. Errors when the angle is within [`LOG_ANGLE_MARGIN`] of pi.
    pub fn log(&self) -> Result<Vector3<f64>, GeometryError> {
        let angle = self.0.angle();
        if angle >= std::f64::consts::PI - LOG_ANGLE_MARGIN {
            return Err(GeometryError::NearSingularLog {
                angle,
                margin: LOG_ANGLE_MARGIN,
            });
        }
        Ok(self.0.scaled_axis())
    }

    /// Euler angles (roll, pitch, yaw).
    pub fn euler(&self) -> (f64, f64, f64) {
        self.0.euler_angles()
    }

    pub fn slerp(&self, other: &Rotation, t: f64) -> Rotation {
        Rotation(self.0.slerp(&other.0, t))
    }
}

/// Skew-symmetric (hat) matrix of a 3-vector.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3) at tangent vector `w`.
pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = hat(w);
    if theta < 1e-8 {
        return Matrix3::identity() - 0.5 * wx + wx * wx / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - wx * ((1.0 - theta.cos()) / t2)
        + wx * wx * ((theta - theta.sin()) / (t2 * theta))
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = hat(w);
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * wx + wx * wx / 12.0;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * wx + wx * wx * coeff
}

/// Rigid transform in SE(3) with an optional timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    pub timestamp: Option<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
            timestamp: None,
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
            timestamp: None,
        }
    }

    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose::new(Rotation::yaw(yaw), Vector3::new(x, y, z))
    }

    pub fn with_timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }

    /// Group product `self * other`. Timestamp of the result is taken
    /// from `other` (the operand being mapped into the new frame).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
            timestamp: other.timestamp,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -rinv.rotate(&self.translation),
            timestamp: self.timestamp,
        }
    }

    /// Relative transform `self^-1 * other`; its translation norm is the
    /// SE(3) translation distance used for submap gating.
    pub fn relative(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (other.translation - self.translation).norm()
    }

    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        self.rotation.inverse().compose(&other.rotation).angle()
    }

    pub fn log(&self) -> Result<Twist, GeometryError> {
        Ok(Twist {
            rotational: self.rotation.log()?,
            translational: self.translation,
        })
    }

    pub fn exp(x: &Twist) -> Pose {
        Pose {
            rotation: Rotation::exp(&x.rotational),
            translation: x.translational,
            timestamp: None,
        }
    }

    /// Retraction used by the optimizer: rotation right-multiplied by
    /// `exp(dw)`, translation shifted additively in the world frame.
    pub fn retract(&self, dw: &Vector3<f64>, dt: &Vector3<f64>) -> Pose {
        Pose {
            rotation: self.rotation.compose(&Rotation::exp(dw)),
            translation: self.translation + dt,
            timestamp: self.timestamp,
        }
    }

    /// Inverse of [`Pose::retract`] between two poses sharing a base.
    pub fn local_coordinates(&self, other: &Pose) -> Result<(Vector3<f64>, Vector3<f64>), GeometryError> {
        let dw = self.rotation.inverse().compose(&other.rotation).log()?;
        Ok((dw, other.translation - self.translation))
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Tangent-space element: rotational and translational parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotational: Vector3<f64>,
    pub translational: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rotational: Vector3::zeros(),
            translational: Vector3::zeros(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.rotational.norm_squared() + self.translational.norm_squared()).sqrt()
    }
}

/// Quaternion components (x, y, z, w) for serialization.
pub fn quat_xyzw(r: &Rotation) -> [f64; 4] {
    let q: &Quaternion<f64> = r.quaternion();
    [q.i, q.j, q.k, q.w]
}

pub fn rotation_from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Rotation {
    Rotation(UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_pose(rng: &mut StdRng) -> Pose {
        let w = Vector3::new(
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
        );
        let t = Vector3::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        );
        Pose::new(Rotation::exp(&w), t)
    }

    #[test]
    fn identity_compose() {
        let mut rng = StdRng::seed_from_u64(1);
        let t = random_pose(&mut rng);
        let r = Pose::identity().compose(&t);
        assert_abs_diff_eq!((r.translation - t.translation).norm(), 0.0, epsilon = 1e-12);
        assert!(r.rotation.inverse().compose(&t.rotation).angle() < 1e-12);
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = StdRng::seed_from_u64(2);
        let t = random_pose(&mut rng);
        let i = t.compose(&t.inverse());
        assert!(i.translation.norm() < 1e-9);
        assert!(i.rotation.angle() < 1e-9);
    }

    #[test]
    fn compose_matches_homogeneous_matrix_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = a.compose(&b);
            let oracle = a.to_homogeneous() * b.to_homogeneous();
            assert!((c.to_homogeneous() - oracle).norm() < 1e-9);
        }
    }

    #[test]
    fn relative_of_equal_is_identity() {
        let mut rng = StdRng::seed_from_u64(4);
        let t = random_pose(&mut rng);
        let r = t.relative(&t);
        assert!(r.translation.norm() < 1e-9);
        assert!(r.rotation.angle() < 1e-9);
    }

    #[test]
    fn relative_translation_norm_is_distance() {
        let a = Pose::identity();
        let b = Pose::from_xyz_yaw(20.0, 0.0, 0.0, 0.0);
        let r = a.relative(&b);
        assert_abs_diff_eq!(r.translation.norm(), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_matches_matrix_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let r = a.relative(&b);
            let oracle = a.to_homogeneous().try_inverse().unwrap() * b.to_homogeneous();
            assert!((r.to_homogeneous() - oracle).norm() < 1e-9);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        let t = Pose::identity().log().unwrap();
        assert_eq!(t.norm(), 0.0);
    }

    #[test]
    fn exp_of_quarter_yaw() {
        let tw = Twist {
            rotational: Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            translational: Vector3::zeros(),
        };
        let p = Pose::exp(&tw);
        let rotated = p.rotation.rotate(&Vector3::x());
        assert!((rotated - Vector3::y()).norm() < 1e-12);
    }

    // Rodrigues-formula oracle for the rotation exponential.
    fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta = w.norm();
        if theta < 1e-12 {
            return Matrix3::identity();
        }
        let k = hat(&(w / theta));
        Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
    }

    #[test]
    fn exp_matches_rodrigues_and_round_trips() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..100 {
            let w = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            if w.norm() >= std::f64::consts::PI - 2e-3 {
                continue;
            }
            let r = Rotation::exp(&w);
            assert!((r.matrix() - rodrigues(&w)).norm() < 1e-10);
            let back = r.log().unwrap();
            assert!((back - w).norm() < 1e-8);
        }
    }

    #[test]
    fn near_pi_log_errors() {
        let r = Rotation::exp(&Vector3::new(std::f64::consts::PI - 1e-5, 0.0, 0.0));
        assert!(r.log().is_err());
    }

    #[test]
    fn group_axioms_randomized() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert!((left.to_homogeneous() - right.to_homogeneous()).norm() < 1e-9);
            // inverse(compose(a,b)) == compose(inverse(b), inverse(a))
            let l = a.compose(&b).inverse();
            let r = b.inverse().compose(&a.inverse());
            assert!((l.to_homogeneous() - r.to_homogeneous()).norm() < 1e-9);
            // orthonormality after composition
            let m = left.rotation.matrix();
            assert!((m * m.transpose() - Matrix3::identity()).norm() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn right_jacobian_inverse_consistency() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..50 {
            let w = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let jr = right_jacobian(&w);
            let jr_inv = right_jacobian_inv(&w);
            assert!((jr * jr_inv - Matrix3::identity()).norm() < 1e-8);
        }
    }

    #[test]
    fn right_jacobian_finite_difference() {
        // Jr(w) relates exp(w + dw) ~ exp(w) exp(Jr dw)
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..20 {
            let w = Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            let jr = right_jacobian(&w);
            for k in 0..3 {
                let eps = 1e-7;
                let mut dw = Vector3::zeros();
                dw[k] = eps;
                let lhs = Rotation::exp(&(w + dw));
                let rhs = Rotation::exp(&w).compose(&Rotation::exp(&(jr * dw)));
                assert!(
                    lhs.inverse().compose(&rhs).angle() < 1e-9,
                    "column {k} of right Jacobian off"
                );
            }
        }
    }
}
