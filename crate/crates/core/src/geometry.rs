//! Rigid-body geometry shared by every stage of the pipeline.
//!
//! Rotations are stored as 3x3 matrices and re-orthonormalized after every
//! composition. Tangent vectors use the `[translation; rotation]` ordering
//! throughout, so a [`Twist`] maps onto a `Vector6` as `(rho, phi)`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rotations closer than this to pi are rejected by [`RigidPose::log`].
pub const LOG_SINGULARITY_MARGIN: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-5;

/// SE(3) rigid transform: `x -> R x + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Mat3,
    translation: Vec3,
}

impl fmt::Debug for RigidPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion();
        f.debug_struct("RigidPose")
            .field("t", &[self.translation.x, self.translation.y, self.translation.z])
            .field("q_xyzw", &q)
            .finish()
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose from a (nearly) orthonormal matrix; the matrix is
    /// projected back onto SO(3).
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn from_rotation_vector(rotation_vector: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: so3_exp(&rotation_vector),
            translation,
        }
    }

    /// Rotation about the z axis by `yaw` radians.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self::from_rotation_vector(Vec3::new(0.0, 0.0, yaw), translation)
    }

    /// Intrinsic ZYX (yaw, pitch, roll) Euler angles in radians.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64, translation: Vec3) -> Self {
        let rz = so3_exp(&Vec3::new(0.0, 0.0, yaw));
        let ry = so3_exp(&Vec3::new(0.0, pitch, 0.0));
        let rx = so3_exp(&Vec3::new(roll, 0.0, 0.0));
        Self::new(rz * ry * rx, translation)
    }

    /// Quaternion in TUM order `(qx, qy, qz, qw)`; normalized before use.
    pub fn from_quaternion(q: [f64; 4], translation: Vec3) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        Self {
            rotation: *uq.to_rotation_matrix().matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Quaternion in TUM order `(qx, qy, qz, qw)` with `qw >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.i, q.j, q.k, q.w]
    }

    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: orthonormalize(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self^-1 * other`, the pose of `other` expressed in `self`'s frame.
    pub fn between(&self, other: &RigidPose) -> RigidPose {
        self.inverse().compose(other)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Heading about the z axis (ZYX convention), radians.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn exp(twist: &Twist) -> RigidPose {
        let rotation = so3_exp(&twist.rotation);
        let translation = so3_left_jacobian(&twist.rotation) * twist.translation;
        RigidPose {
            rotation,
            translation,
        }
    }

    /// SE(3) logarithm. Fails when the rotation angle is within
    /// [`LOG_SINGULARITY_MARGIN`] of pi.
    pub fn log(&self) -> Result<Twist> {
        let angle = self.rotation_angle();
        if angle > std::f64::consts::PI - LOG_SINGULARITY_MARGIN {
            return Err(Error::NearSingular { angle });
        }
        Ok(self.log_unchecked())
    }

    /// SE(3) logarithm without the near-pi guard; used inside optimizers
    /// where the residual is expected to be small.
    pub fn log_unchecked(&self) -> Twist {
        let phi = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        Twist {
            translation: rho,
            rotation: phi,
        }
    }

    /// Adjoint in `[rho; phi]` ordering: `[[R, t^ R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }

    /// Largest absolute entry difference over the 3x4 `[R | t]` block.
    pub fn max_abs_diff(&self, other: &RigidPose) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }

    /// `(translation distance, rotation angle)` between two poses.
    pub fn distance_to(&self, other: &RigidPose) -> (f64, f64) {
        let rel = self.between(other);
        (rel.translation.norm(), rel.rotation_angle())
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

impl Mul for RigidPose {
    type Output = RigidPose;
    fn mul(self, rhs: RigidPose) -> RigidPose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a RigidPose> for &'a RigidPose {
    type Output = RigidPose;
    fn mul(self, rhs: &'a RigidPose) -> RigidPose {
        self.compose(rhs)
    }
}

/// se(3) tangent vector: `translation` is the `rho` part (not the pose
/// translation), `rotation` is the rotation vector.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub translation: Vec3,
    pub rotation: Vec3,
}

impl Twist {
    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.translation.x,
            self.translation.y,
            self.translation.z,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            translation: Vec3::new(v[0], v[1], v[2]),
            rotation: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Projects a nearly orthonormal matrix onto SO(3) with one Newton-Schulz
/// polar step, `R (3I - R^T R) / 2`.
pub fn orthonormalize(r: &Mat3) -> Mat3 {
    let rtr = r.transpose() * r;
    r * (Mat3::identity() * 3.0 - rtr) * 0.5
}

pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn rotation_angle(r: &Mat3) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = 0.5 * vee(&(r - r.transpose())).norm();
    sin.atan2(cos)
}

pub fn so3_exp(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

pub fn so3_log(r: &Mat3) -> Vec3 {
    let theta = rotation_angle(r);
    let skew = vee(&(r - r.transpose()));
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        return skew * 0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0);
    }
    if std::f64::consts::PI - theta > 1e-3 {
        return skew * (theta / (2.0 * theta.sin()));
    }
    // Near pi: recover the axis from the symmetric part.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * theta.cos();
    let (mut best, mut diag) = (0, sym[(0, 0)]);
    for i in 1..3 {
        if sym[(i, i)] > diag {
            best = i;
            diag = sym[(i, i)];
        }
    }
    let mut axis: Vec3 = sym.column(best).into_owned() / diag.max(1e-300).sqrt();
    axis /= axis.norm();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() - k * 0.5 + k * k * c
}

/// Coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q(rho: &Vec3, phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let rx = hat(rho);
    let px = hat(phi);
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        (
            1.0 / 6.0 - theta2 / 120.0,
            1.0 / 24.0 - theta2 / 720.0,
            1.0 / 120.0 - theta2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        (
            (theta - s) / t3,
            (theta2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let pr = px * rx;
    let rp = rx * px;
    let prp = pr * px;
    rx * 0.5 + (pr + rp + prp) * c1 + (px * pr + rp * px - prp * 3.0) * c2 + (prp * px + px * prp) * c3
}

/// SE(3) left Jacobian in `[rho; phi]` ordering.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.rotation);
    let q = se3_q(&xi.translation, &xi.rotation);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let ji = so3_left_jacobian_inv(&xi.rotation);
    let q = se3_q(&xi.translation, &xi.rotation);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    out
}

/// `J_r(xi) = J_l(-xi)`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist::new(-xi.translation, -xi.rotation))
}

/// Ordered set of 3D points in meters; every coordinate is finite.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(index) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Callers guarantee finiteness (outputs of finite arithmetic on finite input).
    pub(crate) fn from_finite(points: Vec<Vec3>) -> Self {
        debug_assert!(points.iter().all(|p| p.iter().all(|v| v.is_finite())));
        Self { points }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &RigidPose) -> PointCloud {
        transform_cloud(pose, self)
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }
}

pub fn transform_cloud(pose: &RigidPose, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(),
    }
}

/// One sensor ping: sensor-frame cloud plus its odometry pose.
#[derive(Clone, Debug)]
pub struct SonarFrame {
    pub index: usize,
    pub timestamp: f64,
    pub odom_pose: RigidPose,
    pub cloud: PointCloud,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn arb_vec3(scale: f64) -> impl Strategy<Value = Vec3> {
        (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn arb_pose() -> impl Strategy<Value = RigidPose> {
        (arb_vec3(3.0), arb_vec3(10.0)).prop_map(|(r, t)| {
            let r = if r.norm() > 3.0 { r * (3.0 / r.norm()) } else { r };
            RigidPose::from_rotation_vector(r, t)
        })
    }

    fn rz90_t100() -> RigidPose {
        RigidPose::from_yaw(FRAC_PI_2, Vec3::new(1.0, 0.0, 0.0))
    }

    #[test]
    fn compose_identity_left() {
        let p = RigidPose::from_rotation_vector(Vec3::new(0.3, -0.2, 1.1), Vec3::new(1.0, 2.0, 3.0));
        assert!(RigidPose::identity().compose(&p).max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = rz90_t100();
        let c = a.compose(&a);
        let oracle = a.to_homogeneous() * a.to_homogeneous();
        assert!(c.max_abs_diff(&RigidPose::from_homogeneous(&oracle)) < 1e-12);
        let expected = RigidPose::from_yaw(PI, Vec3::new(1.0, 1.0, 0.0));
        assert!(c.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn inverse_cases() {
        assert_eq!(RigidPose::identity().inverse(), RigidPose::identity());
        let p = RigidPose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(*p.inverse().translation(), Vec3::new(-1.0, -2.0, -3.0));
    }

    #[test]
    fn exp_cases() {
        assert_eq!(RigidPose::exp(&Twist::zero()), RigidPose::identity());
        let p = RigidPose::exp(&Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2)));
        assert!(p.max_abs_diff(&RigidPose::from_yaw(FRAC_PI_2, Vec3::zeros())) < 1e-15);
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = RigidPose::from_rotation_vector(Vec3::new(PI, 0.0, 0.0), Vec3::zeros());
        assert!(matches!(p.log(), Err(Error::NearSingular { .. })));
    }

    #[test]
    fn log_close_to_pi_round_trips() {
        let axis = Vec3::new(1.0, 2.0, -0.5).normalize();
        for gap in [1e-3, 1e-4, 1e-5, 2e-6] {
            let phi = axis * (PI - gap);
            let p = RigidPose::from_rotation_vector(phi, Vec3::new(0.5, -1.0, 2.0));
            let back = RigidPose::exp(&p.log().unwrap());
            assert!(back.max_abs_diff(&p) < 1e-9, "gap {gap}");
        }
    }

    #[test]
    fn quaternion_round_trip_is_tight() {
        let p = RigidPose::from_rotation_vector(Vec3::new(0.4, -2.0, 0.7), Vec3::new(1.0, 2.0, 3.0));
        let q = p.quaternion();
        let back = RigidPose::from_quaternion(q, *p.translation());
        assert!(back.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn long_chain_stays_orthonormal() {
        let step = RigidPose::from_rotation_vector(Vec3::new(0.013, -0.021, 0.037), Vec3::new(0.1, 0.0, 0.01));
        let mut acc = RigidPose::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&step);
        }
        let err = (acc.rotation().transpose() * acc.rotation() - Mat3::identity()).abs().max();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn transform_single_point() {
        let c = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let out = transform_cloud(&RigidPose::from_translation(Vec3::new(0.0, 0.0, 1.0)), &c);
        assert_eq!(out.points()[0], Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(transform_cloud(&RigidPose::identity(), &c), c);
    }

    #[test]
    fn rejects_non_finite_points() {
        let err = PointCloud::new(vec![Vec3::zeros(), Vec3::new(f64::NAN, 0.0, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::NonFinitePoint { index: 1 }));
    }

    #[test]
    fn jacobian_inverse_is_inverse() {
        let xi = Twist::new(Vec3::new(0.3, -1.2, 0.5), Vec3::new(0.8, 0.1, -0.4));
        let prod = se3_left_jacobian(&xi) * se3_left_jacobian_inv(&xi);
        assert_relative_eq!(prod, Matrix6::identity(), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.max_abs_diff(&r) < 1e-9);
        }

        #[test]
        fn compose_with_inverse_is_identity(a in arb_pose()) {
            prop_assert!(a.compose(&a.inverse()).max_abs_diff(&RigidPose::identity()) < 1e-9);
            let oracle = a.to_homogeneous().try_inverse().unwrap();
            prop_assert!(a.inverse().max_abs_diff(&RigidPose::from_homogeneous(&oracle)) < 1e-9);
        }

        #[test]
        fn log_exp_round_trip(t in arb_vec3(5.0), r in arb_vec3(1.8)) {
            let r = if r.norm() >= 3.0 { r * (2.99 / r.norm()) } else { r };
            let v = Twist::new(t, r);
            let back = RigidPose::exp(&v).log().unwrap();
            prop_assert!((back.to_vector() - v.to_vector()).abs().max() < 1e-9);
        }

        #[test]
        fn transform_preserves_distances(p in arb_pose(), pts in proptest::collection::vec(arb_vec3(5.0), 2..12)) {
            let c = PointCloud::new(pts).unwrap();
            let out = transform_cloud(&p, &c);
            for i in 0..c.len() {
                for j in 0..c.len() {
                    let d0 = (c.points()[i] - c.points()[j]).norm();
                    let d1 = (out.points()[i] - out.points()[j]).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn transform_composes(a in arb_pose(), b in arb_pose(), pts in proptest::collection::vec(arb_vec3(5.0), 1..8)) {
            let c = PointCloud::new(pts).unwrap();
            let lhs = transform_cloud(&a.compose(&b), &c);
            let rhs = transform_cloud(&a, &transform_cloud(&b, &c));
            for (x, y) in lhs.points().iter().zip(rhs.points()) {
                prop_assert!((x - y).abs().max() < 1e-9);
            }
        }
    }
}
