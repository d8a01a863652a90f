//! Core 3D math: rotations in three parameterizations and similarity
//! transforms, the unit of all motion in the pipeline.
//!
//! Conventions (these also fix the file formats):
//! - Euler angles are intrinsic XYZ in radians: `R = Rx(a) * Ry(b) * Rz(c)`.
//! - Quaternions are scalar-first `(w, x, y, z)` with the Hamilton product.
//! - Matrices are row-major in serialized form.

use nalgebra::{Matrix3, Matrix4, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

const ORTHONORMALITY_EPS: f64 = 1e-9;

/// A 3D rotation stored as a 3x3 orthonormal matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    mat: Matrix3<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            mat: Matrix3::identity(),
        }
    }

    /// Wraps a matrix that is already known to be orthonormal with det +1.
    pub fn from_matrix_unchecked(mat: Matrix3<f64>) -> Self {
        Rotation { mat }
    }

    /// Validates orthonormality (`R^T R = I` within 1e-9) and `det = +1`.
    /// Reflections are rejected.
    pub fn try_from_matrix(mat: Matrix3<f64>) -> Result<Self> {
        let gram = mat.transpose() * mat;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > ORTHONORMALITY_EPS {
            return Err(Error::Degenerate(format!(
                "matrix is not orthonormal (max |R^T R - I| = {err:.3e})"
            )));
        }
        let det = mat.determinant();
        if (det - 1.0).abs() > ORTHONORMALITY_EPS {
            return Err(Error::Degenerate(format!(
                "matrix determinant is {det:.9}, expected +1"
            )));
        }
        Ok(Rotation { mat })
    }

    pub fn from_quaternion(q: &Quat) -> Self {
        Rotation {
            mat: q.to_rotation_matrix().into_inner(),
        }
    }

    /// Intrinsic XYZ Euler angles in radians: `R = Rx(a) * Ry(b) * Rz(c)`.
    pub fn from_euler_xyz(a: f64, b: f64, c: f64) -> Self {
        Self::about_x(a) * Self::about_y(b) * Self::about_z(c)
    }

    pub fn from_axis_angle(axis: &Unit<Vec3>, angle: f64) -> Self {
        Rotation {
            mat: nalgebra::Rotation3::from_axis_angle(axis, angle).into_inner(),
        }
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation {
            mat: Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        }
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation {
            mat: Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        }
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation {
            mat: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.mat
    }

    /// Unit quaternion `(w, x, y, z)` of this rotation. The sign is the one
    /// produced by the standard largest-component extraction.
    pub fn quaternion(&self) -> Quat {
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(self.mat))
    }

    /// Intrinsic XYZ Euler angles `(a, b, c)`. The pitch `b` is reported in
    /// `[-pi/2, pi/2]`; angles round-trip exactly for `b` strictly inside
    /// that range.
    pub fn euler_xyz(&self) -> (f64, f64, f64) {
        let m = &self.mat;
        let sb = m[(0, 2)].clamp(-1.0, 1.0);
        let b = sb.asin();
        if sb.abs() < 1.0 - 1e-12 {
            let a = (-m[(1, 2)]).atan2(m[(2, 2)]);
            let c = (-m[(0, 1)]).atan2(m[(0, 0)]);
            (a, b, c)
        } else {
            // Gimbal lock: only a +/- c is observable; report c = 0.
            let a = m[(1, 0)].atan2(m[(1, 1)]);
            (a, b, 0.0)
        }
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.mat * v
    }

    pub fn inverse(&self) -> Self {
        Rotation {
            mat: self.mat.transpose(),
        }
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let tr = self.mat.trace();
        (((tr - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
    }

    /// Rotation axis, or `None` for the identity. Stable near 180 degrees
    /// (extraction goes through the quaternion's largest component).
    pub fn axis(&self) -> Option<Unit<Vec3>> {
        self.quaternion().axis()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation {
            mat: self.mat * rhs.mat,
        }
    }
}

/// Geodesic distance between two rotations in radians, in `[0, pi]`.
///
/// `arccos((trace(a^T b) - 1) / 2)` with the argument clamped to `[-1, 1]`
/// to absorb round-off near 0 and pi.
pub fn rotation_geodesic(a: &Rotation, b: &Rotation) -> f64 {
    let tr = (a.mat.transpose() * b.mat).trace();
    (((tr - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// A similarity transform `pi = (R, t, s)`: `x -> s * R * x + t`.
///
/// The scale is a single positive scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(rotation: Rotation, translation: Vec3, scale: f64) -> Self {
        assert!(scale > 0.0, "scale must be positive, got {scale}");
        SimilarityTransform {
            rotation,
            translation,
            scale,
        }
    }

    pub fn rigid(rotation: Rotation, translation: Vec3) -> Self {
        Self::new(rotation, translation, 1.0)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::rigid(Rotation::identity(), translation)
    }

    /// `s * R * mu + t`.
    pub fn apply_to_point(&self, mu: &Vec3) -> Vec3 {
        self.scale * (self.rotation.apply(mu)) + self.translation
    }

    /// Composition: `apply(compose(a, b), x) = apply(a, apply(b, x))`.
    pub fn compose(a: &SimilarityTransform, b: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: a.rotation * b.rotation,
            translation: a.scale * a.rotation.apply(&b.translation) + a.translation,
            scale: a.scale * b.scale,
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        SimilarityTransform {
            rotation: inv_rot,
            translation: -inv_scale * inv_rot.apply(&self.translation),
            scale: inv_scale,
        }
    }

    /// Homogeneous 4x4 of the rigid part (rotation + translation); the scale
    /// is carried separately in serialized form.
    pub fn rigid_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use rand::Rng;

    /// Uniform over SO(3) via a normalized 4-Gaussian quaternion.
    pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
        loop {
            let q = nalgebra::Quaternion::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            if q.norm() > 1e-3 {
                return Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q));
            }
        }
    }

    pub fn random_transform(rng: &mut impl Rng) -> SimilarityTransform {
        SimilarityTransform::new(
            random_rotation(rng),
            Vec3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            ),
            0.5 + rng.gen::<f64>() * 1.5,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::{random_rotation, random_transform};
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        )
    }

    #[test]
    fn apply_to_point_examples() {
        let id = SimilarityTransform::identity();
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_relative_eq!(id.apply_to_point(&p), p, epsilon = 1e-15);

        let t = SimilarityTransform::new(
            Rotation::identity(),
            Vec3::new(1.0, 0.0, 0.0),
            2.0,
        );
        assert_relative_eq!(
            t.apply_to_point(&Vec3::new(1.0, 1.0, 1.0)),
            Vec3::new(3.0, 2.0, 2.0),
            epsilon = 1e-15
        );

        let r = SimilarityTransform::rigid(
            Rotation::about_z(std::f64::consts::FRAC_PI_2),
            Vec3::zeros(),
        );
        assert_relative_eq!(
            r.apply_to_point(&Vec3::new(1.0, 0.0, 0.0)),
            Vec3::new(0.0, 1.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_transform(&mut rng);
        let id = SimilarityTransform::identity();
        let c = SimilarityTransform::compose(&id, &b);
        for _ in 0..10 {
            let p = random_point(&mut rng);
            assert_relative_eq!(c.apply_to_point(&p), b.apply_to_point(&p), epsilon = 1e-12);
        }

        let inv = b.inverse();
        let round = SimilarityTransform::compose(&b, &inv);
        for _ in 0..10 {
            let p = random_point(&mut rng);
            assert_relative_eq!(round.apply_to_point(&p), p, epsilon = 1e-9);
        }
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = SimilarityTransform::compose(&a, &b);
            for _ in 0..10 {
                let p = random_point(&mut rng);
                let seq = a.apply_to_point(&b.apply_to_point(&p));
                assert_relative_eq!(c.apply_to_point(&p), seq, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn compose_is_associative_on_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            let left = SimilarityTransform::compose(&SimilarityTransform::compose(&a, &b), &c);
            let right = SimilarityTransform::compose(&a, &SimilarityTransform::compose(&b, &c));
            for _ in 0..5 {
                let p = random_point(&mut rng);
                assert_relative_eq!(
                    left.apply_to_point(&p),
                    right.apply_to_point(&p),
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn inverse_compose_roundtrip_many() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let a = random_transform(&mut rng);
            let round = SimilarityTransform::compose(&a.inverse(), &a);
            let p = random_point(&mut rng);
            assert_relative_eq!(round.apply_to_point(&p), p, epsilon = 1e-9);
        }
    }

    #[test]
    fn euler_matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let a = (rng.gen::<f64>() * 2.0 - 1.0) * std::f64::consts::PI;
            let b = (rng.gen::<f64>() * 2.0 - 1.0) * (std::f64::consts::FRAC_PI_2 - 1e-3);
            let c = (rng.gen::<f64>() * 2.0 - 1.0) * std::f64::consts::PI;
            let r = Rotation::from_euler_xyz(a, b, c);
            // Orthonormality invariant of the construction.
            assert!(Rotation::try_from_matrix(*r.matrix()).is_ok());
            let (a2, b2, c2) = r.euler_xyz();
            assert_relative_eq!(a, a2, epsilon = 1e-7);
            assert_relative_eq!(b, b2, epsilon = 1e-7);
            assert_relative_eq!(c, c2, epsilon = 1e-7);
        }
    }

    #[test]
    fn quaternion_product_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let r1 = random_rotation(&mut rng);
            let r2 = random_rotation(&mut rng);
            let qprod = r1.quaternion() * r2.quaternion();
            let via_quat = Rotation::from_quaternion(&qprod);
            let via_mat = r1 * r2;
            let p = random_point(&mut rng);
            assert_relative_eq!(via_quat.apply(&p), via_mat.apply(&p), epsilon = 1e-9);
        }
    }

    #[test]
    fn quaternion_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            assert_relative_eq!(r.quaternion().norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn geodesic_examples() {
        let a = Rotation::about_z(30f64.to_radians());
        let b = Rotation::about_z(10f64.to_radians());
        assert_relative_eq!(rotation_geodesic(&a, &a), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            rotation_geodesic(&a, &b),
            20f64.to_radians(),
            epsilon = 1e-12
        );
        let flip = Rotation::about_x(std::f64::consts::PI);
        assert_relative_eq!(
            rotation_geodesic(&flip, &Rotation::identity()),
            std::f64::consts::PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn geodesic_symmetric_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..300 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let c = random_rotation(&mut rng);
            let dab = rotation_geodesic(&a, &b);
            let dba = rotation_geodesic(&b, &a);
            assert_relative_eq!(dab, dba, epsilon = 1e-9);
            let dac = rotation_geodesic(&a, &c);
            let dcb = rotation_geodesic(&c, &b);
            assert!(dab <= dac + dcb + 1e-9);
        }
    }

    #[test]
    fn axis_angle_near_pi_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..100 {
            let axis = Unit::new_normalize(random_point(&mut rng) + Vec3::new(0.1, 0.0, 0.0));
            let angle = std::f64::consts::PI - rng.gen::<f64>() * 1e-4;
            let r = Rotation::from_axis_angle(&axis, angle);
            let got = r.axis().expect("non-identity rotation has an axis");
            let dot = got.dot(&axis).abs();
            assert!(dot > 1.0 - 1e-6, "axis off by {dot}");
            assert_relative_eq!(r.angle(), angle, epsilon = 1e-6);
        }
    }

    #[test]
    fn reflection_rejected() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Rotation::try_from_matrix(m).is_err());
    }
}
