//! Small SO(3)/SE(3) toolkit shared by the MW generator, the local solver and
//! extraction.

use nalgebra::{Matrix3, Vector3, SVD};

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < 1e-8 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Left Jacobian of SO(3); the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() + (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Applies `exp(delta^)` on the left of the transform `(c, t)`, where
/// `delta = (rho, phi)` stacks translation then rotation.
pub fn se3_left_update(
    c: &Matrix3<f64>,
    t: &Vector3<f64>,
    rho: &Vector3<f64>,
    phi: &Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let r = so3_exp(phi);
    let v = so3_left_jacobian(phi);
    (r * c, r * t + v * rho)
}

/// Rotation about the z axis.
pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Nearest rotation in Frobenius norm (orthogonal polar factor with a
/// determinant fix).
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let d = (u * vt).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    u * fix * vt
}

/// Column-major `vec(C)`.
pub fn vec_mat3(c: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    out.copy_from_slice(c.as_slice());
    out
}

pub fn unvec_mat3(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_column_slice(&v[..9])
}

/// `||a - b||_F`, the chordal distance between rotations.
pub fn chordal_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).norm()
}

pub fn orthogonality_error(c: &Matrix3<f64>) -> f64 {
    (c.transpose() * c - Matrix3::identity()).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_is_rotation() {
        for phi in [Vector3::new(0.1, -0.3, 2.0), Vector3::zeros(), Vector3::new(1e-10, 0.0, 0.0)] {
            let r = so3_exp(&phi);
            assert!(orthogonality_error(&r) < 1e-14);
            assert!((r.determinant() - 1.0).abs() < 1e-14);
        }
        let r = so3_exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert!((r - rot_z(std::f64::consts::FRAC_PI_2)).norm() < 1e-15);
    }

    #[test]
    fn projection_fixes_reflections() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let p = project_to_so3(&m);
        assert!((p.determinant() - 1.0).abs() < 1e-12);
        let r = so3_exp(&Vector3::new(0.3, 0.2, -0.1));
        assert!((project_to_so3(&(r * 1.7)) - r).norm() < 1e-12);
    }

    #[test]
    fn vec_is_column_major() {
        let c = Matrix3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0);
        assert_eq!(vec_mat3(&c), [1.0, 4.0, 7.0, 2.0, 5.0, 8.0, 3.0, 6.0, 9.0]);
        assert_eq!(unvec_mat3(&vec_mat3(&c)), c);
    }

    #[test]
    fn half_turn_chordal_distance() {
        let c = rot_z(std::f64::consts::PI);
        assert!((chordal_distance(&c, &Matrix3::identity()) - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
