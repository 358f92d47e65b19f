//! Rotation helpers shared by the dynamics model and the attitude
//! pre-integrator, generic over the scalar type so the same code runs on
//! the tape.
//!
//! Convention throughout: 3-2-1 Euler angles `(roll, pitch, yaw)`; the
//! rotation matrix maps body coordinates into world coordinates,
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use super::Scalar;

pub type Mat3<S> = [[S; 3]; 3];
pub type Vec3<S> = [S; 3];

pub fn mat3_mul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            a[i][0].clone() * b[0][j].clone()
                + a[i][1].clone() * b[1][j].clone()
                + a[i][2].clone() * b[2][j].clone()
        })
    })
}

pub fn mat3_transpose<S: Scalar>(a: &Mat3<S>) -> Mat3<S> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i].clone()))
}

pub fn mat3_vec<S: Scalar>(a: &Mat3<S>, v: &Vec3<S>) -> Vec3<S> {
    std::array::from_fn(|i| {
        a[i][0].clone() * v[0].clone()
            + a[i][1].clone() * v[1].clone()
            + a[i][2].clone() * v[2].clone()
    })
}

pub fn cross<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [
        a[1].clone() * b[2].clone() - a[2].clone() * b[1].clone(),
        a[2].clone() * b[0].clone() - a[0].clone() * b[2].clone(),
        a[0].clone() * b[1].clone() - a[1].clone() * b[0].clone(),
    ]
}

/// Body-to-world rotation from 3-2-1 Euler angles.
pub fn rot_from_euler<S: Scalar>(euler: &Vec3<S>) -> Mat3<S> {
    let (sr, cr) = (euler[0].sin(), euler[0].cos());
    let (sp, cp) = (euler[1].sin(), euler[1].cos());
    let (sy, cy) = (euler[2].sin(), euler[2].cos());
    [
        [
            cy.clone() * cp.clone(),
            cy.clone() * sp.clone() * sr.clone() - sy.clone() * cr.clone(),
            cy.clone() * sp.clone() * cr.clone() + sy.clone() * sr.clone(),
        ],
        [
            sy.clone() * cp.clone(),
            sy.clone() * sp.clone() * sr.clone() + cy.clone() * cr.clone(),
            sy.clone() * sp.clone() * cr.clone() - cy.clone() * sr.clone(),
        ],
        [-sp, cp.clone() * sr, cp * cr],
    ]
}

/// 3-2-1 Euler angles recovered from a body-to-world rotation.
///
/// The pitch entry is clamped into the domain of `asin` to absorb rounding;
/// callers that care about gimbal lock must check the pitch magnitude
/// themselves (the dynamics layer does).
pub fn euler_from_rot<S: Scalar>(r: &Mat3<S>) -> Vec3<S> {
    let m = r[2][0].value();
    let pitch_arg = if m.abs() > 1.0 {
        S::from_f64(m.clamp(-1.0, 1.0))
    } else {
        r[2][0].clone()
    };
    [
        r[2][1].atan2(&r[2][2]),
        -pitch_arg.asin(),
        r[1][0].atan2(&r[0][0]),
    ]
}

/// Rodrigues' formula: the SO(3) exponential of a rotation vector.
///
/// Below an angle of 1e-8 rad the sinc-style coefficients switch to their
/// Taylor expansions; the branch is chosen on the numeric value, which is
/// fine for differentiation because both branches agree to machine
/// precision there.
pub fn exp_so3<S: Scalar>(w: &Vec3<S>) -> Mat3<S> {
    let sq = w[0].clone() * w[0].clone()
        + w[1].clone() * w[1].clone()
        + w[2].clone() * w[2].clone();
    let (a, b) = if sq.value() < 1e-16 {
        // sin(t)/t ~ 1 - t^2/6, (1 - cos t)/t^2 ~ 1/2 - t^2/24
        (
            S::one() - sq.clone().scale(1.0 / 6.0),
            S::from_f64(0.5) - sq.clone().scale(1.0 / 24.0),
        )
    } else {
        let t = sq.clone().sqrt();
        (
            t.sin() / t.clone(),
            (S::one() - t.cos()) / sq.clone(),
        )
    };
    // I + a [w]_x + b [w]_x^2
    let (x, y, z) = (w[0].clone(), w[1].clone(), w[2].clone());
    let (xx, yy, zz) = (
        x.clone() * x.clone(),
        y.clone() * y.clone(),
        z.clone() * z.clone(),
    );
    let (xy, xz, yz) = (
        x.clone() * y.clone(),
        x.clone() * z.clone(),
        y.clone() * z.clone(),
    );
    [
        [
            S::one() - b.clone() * (yy.clone() + zz.clone()),
            b.clone() * xy.clone() - a.clone() * z.clone(),
            b.clone() * xz.clone() + a.clone() * y.clone(),
        ],
        [
            b.clone() * xy + a.clone() * z,
            S::one() - b.clone() * (xx.clone() + zz),
            b.clone() * yz.clone() - a.clone() * x.clone(),
        ],
        [
            b.clone() * xz - a.clone() * y,
            b.clone() * yz + a * x,
            S::one() - b * (xx + yy),
        ],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx3x3(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (a[i][j] - b[i][j]).abs() < tol,
                    "entry ({i},{j}): {} vs {}",
                    a[i][j],
                    b[i][j]
                );
            }
        }
    }

    #[test]
    fn euler_roundtrip() {
        let angles = [[0.3, -0.4, 1.2], [0.0, 0.0, 0.0], [-1.0, 0.9, -2.5]];
        for e in angles {
            let r = rot_from_euler(&e);
            let back = euler_from_rot(&r);
            for k in 0..3 {
                assert!((back[k] - e[k]).abs() < 1e-12, "angle {k}: {back:?} vs {e:?}");
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rot_from_euler(&[0.7, -0.2, 0.5]);
        let rt = mat3_transpose(&r);
        let eye = mat3_mul(&rt, &r);
        approx3x3(
            &eye,
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            1e-14,
        );
    }

    #[test]
    fn exp_of_z_axis_matches_planar_rotation() {
        let r = exp_so3(&[0.0, 0.0, 0.9]);
        let (s, c) = (0.9f64.sin(), 0.9f64.cos());
        approx3x3(&r, &[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], 1e-15);
    }

    #[test]
    fn exp_small_angle_branch_matches_closed_form() {
        // Below the cutoff the Taylor branch must still be an x rotation.
        let w = 5e-9;
        let r = exp_so3(&[w, 0.0, 0.0]);
        assert!((r[1][2] - (-w)).abs() < 1e-20);
        assert!((r[2][1] - w).abs() < 1e-20);
        assert!((r[0][0] - 1.0).abs() < 1e-20);
        let rt = mat3_transpose(&r);
        let eye = mat3_mul(&rt, &r);
        approx3x3(
            &eye,
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            1e-16,
        );
    }

    #[test]
    fn composed_exps_equal_single_exp_for_constant_axis() {
        // exp(w dt) applied n times equals exp(w n dt) for a fixed axis.
        let step = [0.02, -0.01, 0.015];
        let mut acc = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for _ in 0..100 {
            acc = mat3_mul(&acc, &exp_so3(&step));
        }
        let whole = exp_so3(&[2.0, -1.0, 1.5]);
        approx3x3(&acc, &whole, 1e-12);
    }
}
