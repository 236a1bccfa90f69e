//! Rotation-group helpers: skew maps, the Rodrigues exponential, its right
//! Jacobian and the attitude-error map used by the controller, observer and
//! loss.
//!
//! Tangent perturbations of a rotation are always taken on the right,
//! `R ↦ R·exp(δφ)`, so every Jacobian in the crate is expressed in body-frame
//! exponential coordinates about the nominal rotation.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const SMALL_ANGLE: f64 = 1e-8;

/// Tolerance on the symmetric part accepted by [`vee`].
pub const VEE_TOLERANCE: f64 = 1e-12;

/// Skew-symmetric matrix with `hat(w) * x == w.cross(x)`.
#[inline]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds
/// [`VEE_TOLERANCE`] (scaled by the matrix magnitude when it is above one).
pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = m.amax().max(1.0);
    let asym = sym.amax();
    if asym > VEE_TOLERANCE * scale {
        return Err(Error::NotSkew(asym));
    }
    Ok(vee_unchecked(m))
}

/// Reads the axial vector of the antisymmetric part without validation.
#[inline]
pub fn vee_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues exponential of an axis-angle vector.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let k2 = k * k;
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k2 * b
}

/// Right Jacobian of the exponential: `exp(w + δ) ≈ exp(w)·exp(Jr(w)·δ)`.
pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let k2 = k * k;
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() - k * a + k2 * b
}

/// Principal logarithm of a rotation matrix (angle in `[0, π]`).
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let axial = vee_unchecked(r);
    if theta < 1e-6 {
        return axial;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near π the antisymmetric part vanishes; read the axis from R + I.
        let b = (r + Matrix3::identity()) * 0.5;
        let i = (0..3).max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)])).unwrap_or(0);
        let mut axis = b.column(i).into_owned();
        axis /= axis.norm();
        return axis * theta;
    }
    axial * (theta / theta.sin())
}

/// Rotation about the world vertical axis.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Attitude error `½·vee(Aᵀ R − Rᵀ A)` of `r` relative to `a`.
#[inline]
pub fn attitude_error(a: &Matrix3<f64>, r: &Matrix3<f64>) -> Vector3<f64> {
    vee_unchecked(&(a.transpose() * r))
}

/// Derivative of [`attitude_error`] with respect to a right perturbation of
/// `r`: `½·(tr(AᵀR)·I − RᵀA)`.
#[inline]
pub fn attitude_error_jacobian(a: &Matrix3<f64>, r: &Matrix3<f64>) -> Matrix3<f64> {
    let m = a.transpose() * r;
    (Matrix3::identity() * m.trace() - m.transpose()) * 0.5
}

/// Frobenius distance of `RᵀR` from the identity.
pub fn orthonormality_defect(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn hat_of_zero_is_zero() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
    }

    #[test]
    fn vee_inverts_hat() {
        let w = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(vee(&hat(&w)).unwrap(), w);
    }

    #[test]
    fn hat_is_cross_product() {
        let x = hat(&Vector3::x()) * Vector3::y();
        assert_eq!(x, Vector3::z());
    }

    #[test]
    fn vee_rejects_symmetric_input() {
        let m = Matrix3::identity();
        assert!(matches!(vee(&m), Err(Error::NotSkew(_))));
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_so3(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn exp_quarter_yaw() {
        let r = exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).amax() < 1e-15);
    }

    #[test]
    fn exp_inverse_pair() {
        let w = Vector3::new(0.3, -1.2, 2.1);
        let prod = exp_so3(&w) * exp_so3(&-w);
        assert!((prod - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn log_inverts_exp() {
        for w in [
            Vector3::new(0.3, -1.2, 0.4),
            Vector3::new(1e-9, 0.0, 0.0),
            Vector3::new(0.0, 3.1, 0.0),
        ] {
            let back = log_so3(&exp_so3(&w));
            assert!((back - w).norm() < 1e-6, "{w:?} -> {back:?}");
        }
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let w = Vector3::new(0.4, -0.7, 0.2);
        let jr = right_jacobian(&w);
        let base = exp_so3(&w);
        let eps = 1e-6;
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = eps;
            let plus = log_so3(&(base.transpose() * exp_so3(&(w + d))));
            let minus = log_so3(&(base.transpose() * exp_so3(&(w - d))));
            let col = (plus - minus) / (2.0 * eps);
            assert!((col - jr.column(i)).norm() < 1e-8);
        }
    }

    #[test]
    fn attitude_error_jacobian_matches_finite_differences() {
        let a = exp_so3(&Vector3::new(0.1, 0.5, -0.3));
        let r = exp_so3(&Vector3::new(-0.4, 0.2, 0.9));
        let jac = attitude_error_jacobian(&a, &r);
        let eps = 1e-6;
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = eps;
            let plus = attitude_error(&a, &(r * exp_so3(&d)));
            let minus = attitude_error(&a, &(r * exp_so3(&-d)));
            let col = (plus - minus) / (2.0 * eps);
            assert!((col - jac.column(i)).norm() < 1e-9);
        }
    }

    #[test]
    fn attitude_error_is_first_order_log() {
        let a = exp_so3(&Vector3::new(0.2, 0.1, 0.0));
        let small = Vector3::new(1e-4, -2e-4, 3e-4);
        let e = attitude_error(&a, &(a * exp_so3(&small)));
        assert!((e - small).norm() < 1e-10);
    }
}
