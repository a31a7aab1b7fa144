//! Minimal SO(3)/SE(3) toolkit: exponential/logarithm maps and the boxplus
//! perturbation used by the registration solver.
//!
//! Rotations are stored as unit quaternions and exposed through their matrix
//! action; poses are [`nalgebra::Isometry3`]. The solver correction is a
//! 6-vector `[d_translation; d_rotation]` applied with [`se3_boxplus`]:
//! rotation is perturbed on the right (body frame), translation additively in
//! the world frame, i.e. the SO(3) x R^3 convention matching the per-block
//! Jacobians in [`crate::registration`].

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Body/world rotation, unit quaternion under the hood.
pub type Rotation = UnitQuaternion<f64>;
/// Rigid transform (rotation + translation).
pub type Pose = Isometry3<f64>;
/// Solver correction `[d_rho (m); d_theta (rad)]`.
pub type Twist = Vector6<f64>;

/// Below this angle the exp/log series are evaluated by their second-order
/// Taylor expansion to avoid dividing by a vanishing angle.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("matrix is not a rotation: {detail}")]
    NotARotation { detail: String },
}

/// Skew-symmetric (cross-product) matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Full rigid action on a point stored as a vector. nalgebra's
/// `Isometry3 * Vector3` rotates without translating, so point transforms go
/// through here.
pub fn transform_point(pose: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation * p + pose.translation.vector
}

/// Exponential map on SO(3) (Rodrigues rotation from an axis-angle vector).
pub fn so3_exp(phi: &Vector3<f64>) -> Rotation {
    assert!(
        phi.iter().all(|c| c.is_finite()),
        "non-finite input to so3_exp"
    );
    let angle = phi.norm();
    let half = 0.5 * angle;
    // q = (cos(a/2), sinc(a/2) * phi/2)
    let k = if angle < SMALL_ANGLE {
        0.5 * (1.0 - half * half / 6.0)
    } else {
        half.sin() / angle
    };
    UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
        half.cos(),
        k * phi.x,
        k * phi.y,
        k * phi.z,
    ))
}

/// Principal logarithm on SO(3); `‖result‖ <= pi`.
///
/// The quaternion form stays well conditioned near pi, where the classic
/// trace formula degenerates.
pub fn so3_log(rot: &Rotation) -> Vector3<f64> {
    let q = rot.quaternion();
    // Force the w >= 0 hemisphere for the principal branch.
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.vector())
    } else {
        (q.w, q.vector().clone_owned())
    };
    let s = v.norm();
    if s < SMALL_ANGLE {
        // theta/s -> 2/w * (1 - s^2/(3 w^2))
        v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
    } else {
        let theta = 2.0 * s.atan2(w);
        v * (theta / s)
    }
}

/// Validates a 3x3 matrix as a rotation (orthonormal within `tol`, det +1)
/// and converts it to the quaternion representation.
pub fn rotation_from_matrix(m: &Matrix3<f64>, tol: f64) -> Result<Rotation, GeometryError> {
    if !m.iter().all(|c| c.is_finite()) {
        return Err(GeometryError::NonFinite {
            op: "rotation_from_matrix",
        });
    }
    let ortho_err = (m.transpose() * m - Matrix3::identity()).norm();
    if ortho_err > tol {
        return Err(GeometryError::NotARotation {
            detail: format!("orthonormality error {ortho_err:.3e} exceeds {tol:.1e}"),
        });
    }
    let det = m.determinant();
    if (det - 1.0).abs() > tol {
        return Err(GeometryError::NotARotation {
            detail: format!("determinant {det} is not +1"),
        });
    }
    Ok(UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(*m),
    ))
}

/// Splits a twist into its translation and rotation blocks.
pub fn twist_parts(delta: &Twist) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(delta[0], delta[1], delta[2]),
        Vector3::new(delta[3], delta[4], delta[5]),
    )
}

/// Builds a twist from translation and rotation blocks.
pub fn twist_from_parts(rho: &Vector3<f64>, theta: &Vector3<f64>) -> Twist {
    Vector6::new(rho.x, rho.y, rho.z, theta.x, theta.y, theta.z)
}

/// Applies a solver correction to a pose: rotation right-perturbed, translation
/// perturbed additively in the world frame (SO(3) x R^3).
pub fn se3_boxplus(pose: &Pose, delta: &Twist) -> Pose {
    let (rho, theta) = twist_parts(delta);
    let rotation = pose.rotation * so3_exp(&theta);
    Pose::from_parts(Translation3::from(pose.translation.vector + rho), rotation)
}

/// Translational component of the SE(3) logarithm of `pose`.
///
/// This is `V(phi)^-1 * t`, not the raw translation: the left-Jacobian inverse
/// couples rotation and translation whenever the rotation is non-trivial.
pub fn se3_log_translation(pose: &Pose) -> Vector3<f64> {
    let phi = so3_log(&pose.rotation);
    let theta = phi.norm();
    let hat = skew(&phi);
    // V^-1 = I - 1/2 [phi]x + c [phi]x^2 with c = (1 - (theta/2) cot(theta/2)) / theta^2
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - 0.5 * hat + c * (hat * hat);
    v_inv * pose.translation.vector
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_vector(rng: &mut StdRng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    /// Independent Rodrigues-formula construction, used as the oracle for the
    /// quaternion-based exponential.
    fn rodrigues(phi: &Vector3<f64>) -> Matrix3<f64> {
        let theta = phi.norm();
        if theta < 1e-12 {
            return Matrix3::identity();
        }
        let k = skew(&(phi / theta));
        Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * (k * k)
    }

    /// Dense matrix logarithm by inverse scaling-and-squaring: repeated
    /// Denman–Beavers square roots followed by a log(I + X) series. Entirely
    /// independent of the quaternion code paths it checks.
    fn matrix_log_4x4(m: &nalgebra::Matrix4<f64>) -> nalgebra::Matrix4<f64> {
        use nalgebra::Matrix4;
        let mut a = *m;
        let mut squarings = 0u32;
        while (a - Matrix4::identity()).norm() > 0.25 {
            // Denman–Beavers iteration for the principal square root.
            let mut y = a;
            let mut z = Matrix4::identity();
            for _ in 0..60 {
                let y_inv = y.try_inverse().expect("singular during sqrt");
                let z_inv = z.try_inverse().expect("singular during sqrt");
                let y_next = 0.5 * (y + z_inv);
                let z_next = 0.5 * (z + y_inv);
                y = y_next;
                z = z_next;
            }
            a = y;
            squarings += 1;
        }
        let x = a - Matrix4::identity();
        let mut term = x;
        let mut acc = Matrix4::zeros();
        for n in 1..60 {
            acc += term / (n as f64) * if n % 2 == 1 { 1.0 } else { -1.0 };
            term *= x;
        }
        acc * 2f64.powi(squarings as i32)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let r = so3_exp(&Vector3::zeros());
        assert_eq!(r.to_rotation_matrix().into_inner(), Matrix3::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let mapped = r * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(mapped, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_matches_rodrigues_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let phi = random_vector(&mut rng, 3.0);
            let got = so3_exp(&phi).to_rotation_matrix().into_inner();
            let want = rodrigues(&phi);
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(so3_log(&Rotation::identity()), Vector3::zeros());
    }

    #[test]
    fn log_of_quarter_turn() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert_relative_eq!(
            so3_log(&r),
            Vector3::new(0.0, 0.0, FRAC_PI_2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn exp_log_roundtrip_1000_random_rotations() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..1000 {
            let mut phi = random_vector(&mut rng, 1.0);
            let scale = rng.random_range(0.0..0.999 * PI);
            phi = if phi.norm() > 0.0 {
                phi.normalize() * scale
            } else {
                phi
            };
            let back = so3_log(&so3_exp(&phi));
            assert!(
                (back - phi).norm() <= 1e-9,
                "roundtrip error {} for phi {:?}",
                (back - phi).norm(),
                phi
            );
        }
    }

    #[test]
    fn log_near_pi_stays_principal() {
        let phi = Vector3::new(0.0, 0.0, PI - 1e-7);
        let back = so3_log(&so3_exp(&phi));
        assert_relative_eq!(back, phi, epsilon = 1e-9);
        assert!(so3_log(&so3_exp(&Vector3::new(1.0, -2.0, 0.5))).norm() <= PI);
    }

    #[test]
    fn half_angle_squares_to_full() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let mut phi = random_vector(&mut rng, 1.0);
            if phi.norm() >= PI {
                phi = phi.normalize() * 0.99 * PI;
            }
            let half = so3_exp(&(phi / 2.0));
            let full = so3_exp(&phi);
            let err = so3_log(&(full.inverse() * half * half)).norm();
            assert!(err <= 1e-9, "subdivision error {err}");
        }
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn exp_rejects_non_finite() {
        so3_exp(&Vector3::new(f64::NAN, 0.0, 0.0));
    }

    #[test]
    fn rotation_from_matrix_validates() {
        let good = so3_exp(&Vector3::new(0.3, -0.2, 0.9))
            .to_rotation_matrix()
            .into_inner();
        assert!(rotation_from_matrix(&good, 1e-6).is_ok());

        let mut bad = good;
        bad[(0, 0)] += 1e-3;
        assert!(matches!(
            rotation_from_matrix(&bad, 1e-6),
            Err(GeometryError::NotARotation { .. })
        ));

        // Orthonormal but det = -1 (a reflection).
        let mut reflect = Matrix3::identity();
        reflect[(2, 2)] = -1.0;
        assert!(rotation_from_matrix(&reflect, 1e-6).is_err());
    }

    #[test]
    fn boxplus_zero_is_identity_map() {
        let pose = Pose::from_parts(
            Translation3::new(1.0, -2.0, 0.5),
            so3_exp(&Vector3::new(0.1, 0.2, -0.3)),
        );
        let same = se3_boxplus(&pose, &Twist::zeros());
        assert_eq!(same.translation.vector, pose.translation.vector);
        assert_eq!(same.rotation.quaternion(), pose.rotation.quaternion());
    }

    #[test]
    fn boxplus_pure_translation_from_identity() {
        let t = se3_boxplus(
            &Pose::identity(),
            &twist_from_parts(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros()),
        );
        assert_eq!(t.translation.vector, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.rotation, Rotation::identity());
    }

    #[test]
    fn boxplus_small_perturbation_inverts() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let pose = Pose::from_parts(
                Translation3::from(random_vector(&mut rng, 5.0)),
                so3_exp(&random_vector(&mut rng, 1.0)),
            );
            let mut delta = Twist::zeros();
            for i in 0..6 {
                delta[i] = rng.random_range(-0.04..0.04);
            }
            let there = se3_boxplus(&pose, &delta);
            let back = se3_boxplus(&there, &(-delta));
            let residual = pose.inverse() * back;
            let err = se3_log_translation(&residual).norm() + so3_log(&residual.rotation).norm();
            assert!(err < 1e-6, "inverse residual {err}");
        }
    }

    #[test]
    fn log_translation_trivial_cases() {
        assert_eq!(se3_log_translation(&Pose::identity()), Vector3::zeros());
        let pure = Pose::from_parts(Translation3::new(0.1, 0.0, 0.0), Rotation::identity());
        assert_eq!(
            se3_log_translation(&pure),
            Vector3::new(0.1, 0.0, 0.0),
            "zero rotation decouples translation"
        );
    }

    #[test]
    fn log_translation_matches_dense_matrix_log() {
        // Hand case from the quarter-turn example plus randomized poses.
        let mut rng = StdRng::seed_from_u64(19);
        let mut poses = vec![Pose::from_parts(
            Translation3::new(1.0, 0.0, 0.0),
            so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2)),
        )];
        for _ in 0..100 {
            let mut phi = random_vector(&mut rng, 1.2);
            if phi.norm() > 0.95 * PI {
                phi = phi.normalize() * 0.9 * PI;
            }
            poses.push(Pose::from_parts(
                Translation3::from(random_vector(&mut rng, 4.0)),
                so3_exp(&phi),
            ));
        }
        for pose in &poses {
            let dense = matrix_log_4x4(&pose.to_homogeneous());
            let rho_oracle = Vector3::new(dense[(0, 3)], dense[(1, 3)], dense[(2, 3)]);
            let rho = se3_log_translation(pose);
            assert!(
                (rho - rho_oracle).norm() <= 1e-8,
                "log_t mismatch {} for {:?}",
                (rho - rho_oracle).norm(),
                pose
            );
        }
    }
}
