//! Geometric SE(3) tracking controller acting on the observer estimate.
//!
//! The desired force `F_d = −k_p∘e_p − k_v∘e_v − m g e3 + m a_d − d̂_f`
//! fixes the desired body z axis `b3 = −F_d/‖F_d‖`; the reference yaw fixes
//! the heading. The desired body rate is taken as zero.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::dynamics::{e3, ControlInput, QuadParams, ATT, INPUT_DIM, OMEGA, P, V};
use crate::gains::{ControllerGains, CONTROLLER_GAINS};
use crate::observer::{ObserverState, DF, DTAU, EST_DIM};
use crate::reference::RefPoint;
use crate::so3::{attitude_error, attitude_error_jacobian, hat, vee_unchecked};

/// Below this desired-force magnitude the thrust direction is taken from the
/// current attitude estimate.
pub const SINGULAR_FORCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerLimits {
    /// N
    pub max_thrust: f64,
    /// Per-axis bound, N·m
    pub max_torque: f64,
}

impl ControllerLimits {
    pub fn for_params(params: &QuadParams) -> Self {
        Self {
            max_thrust: 4.0 * params.hover_thrust(),
            max_torque: 5.0,
        }
    }
}

struct Frame {
    b1c: Vector3<f64>,
    cn: f64,
    b2: Vector3<f64>,
    b3: Vector3<f64>,
    rd: Matrix3<f64>,
}

fn frame(b3: Vector3<f64>, yaw: f64) -> Frame {
    let b1c = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let mut c = b3.cross(&b1c);
    let mut cn = c.norm();
    if cn < 1e-9 {
        // Heading parallel to thrust axis; any perpendicular heading will do.
        c = b3.cross(&Vector3::y());
        cn = c.norm();
    }
    let b2 = c / cn;
    let b1 = b2.cross(&b3);
    Frame {
        b1c,
        cn,
        b2,
        b3,
        rd: Matrix3::from_columns(&[b1, b2, b3]),
    }
}

/// Directional derivative of the desired rotation for a change `db3`.
fn frame_derivative(f: &Frame, db3: &Vector3<f64>) -> Matrix3<f64> {
    let dc = db3.cross(&f.b1c);
    let db2 = (dc - f.b2 * f.b2.dot(&dc)) / f.cn;
    let db1 = db2.cross(&f.b3) + f.b2.cross(db3);
    Matrix3::from_columns(&[db1, db2, *db3])
}

struct Evaluation {
    fd: Vector3<f64>,
    singular: bool,
    frame: Frame,
    e_p: Vector3<f64>,
    e_v: Vector3<f64>,
    e_r: Vector3<f64>,
    thrust_raw: f64,
    torque_raw: Vector3<f64>,
}

fn evaluate(xhat: &ObserverState, r: &RefPoint, gains: &ControllerGains, params: &QuadParams) -> Evaluation {
    let m = params.mass;
    let s = &xhat.sys;
    let e_p = s.p - r.p;
    let e_v = s.v - r.v;
    let fd = -gains.k_p.component_mul(&e_p) - gains.k_v.component_mul(&e_v) - e3() * (m * params.gravity) + r.a * m
        - xhat.d_force;
    let n = fd.norm();
    let singular = !(n >= SINGULAR_FORCE);
    let b3 = if singular { s.r * e3() } else { -fd / n };
    let frame = frame(b3, r.yaw);
    let e_r = attitude_error(&frame.rd, &s.r);
    let thrust_raw = -fd.dot(&(s.r * e3()));
    let j = params.inertia_matrix();
    let torque_raw = -gains.k_r.component_mul(&e_r) - gains.k_omega.component_mul(&s.omega)
        + s.omega.cross(&(j * s.omega))
        - xhat.d_torque;
    Evaluation {
        fd,
        singular,
        frame,
        e_p,
        e_v,
        e_r,
        thrust_raw,
        torque_raw,
    }
}

pub fn control_law(
    xhat: &ObserverState,
    r: &RefPoint,
    gains: &ControllerGains,
    params: &QuadParams,
    limits: &ControllerLimits,
) -> ControlInput {
    let ev = evaluate(xhat, r, gains, params);
    ControlInput {
        thrust: ev.thrust_raw.clamp(0.0, limits.max_thrust),
        torque: ev.torque_raw.map(|t| t.clamp(-limits.max_torque, limits.max_torque)),
    }
}

/// Desired attitude, exposed for diagnostics.
pub fn desired_attitude(
    xhat: &ObserverState,
    r: &RefPoint,
    gains: &ControllerGains,
    params: &QuadParams,
) -> Matrix3<f64> {
    evaluate(xhat, r, gains, params).frame.rd
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerJacobians {
    pub dxhat: SMatrix<f64, INPUT_DIM, EST_DIM>,
    pub dtheta: SMatrix<f64, INPUT_DIM, CONTROLLER_GAINS>,
}

/// Jacobians of [`control_law`]. Saturated channels get zero rows.
pub fn controller_jacobians(
    xhat: &ObserverState,
    r: &RefPoint,
    gains: &ControllerGains,
    params: &QuadParams,
    limits: &ControllerLimits,
) -> ControllerJacobians {
    let ev = evaluate(xhat, r, gains, params);
    let s = &xhat.sys;
    let j = params.inertia_matrix();
    let re3 = s.r * e3();

    // Sensitivity of e_R to F_d and (directly) to the attitude estimate.
    let mut der_dfd = Matrix3::<f64>::zeros();
    let mut der_dphi = attitude_error_jacobian(&ev.frame.rd, &s.r);
    let rd_dir_to_er = |d_rd: &Matrix3<f64>| vee_unchecked(&(d_rd.transpose() * s.r));
    if ev.singular {
        // b3 = R̂ e3, so db3 = −R̂ hat(e3) δφ.
        let db3_dphi = -s.r * hat(&e3());
        for k in 0..3 {
            let d_rd = frame_derivative(&ev.frame, &db3_dphi.column(k).into_owned());
            let col = der_dphi.column(k) + rd_dir_to_er(&d_rd);
            der_dphi.set_column(k, &col);
        }
    } else {
        let n = ev.fd.norm();
        let b3 = ev.frame.b3;
        let db3_dfd = -(Matrix3::identity() - b3 * b3.transpose()) / n;
        for k in 0..3 {
            let d_rd = frame_derivative(&ev.frame, &db3_dfd.column(k).into_owned());
            der_dfd.set_column(k, &rd_dir_to_er(&d_rd));
        }
    }

    // F_d partials.
    let dfd_dp = -Matrix3::from_diagonal(&gains.k_p);
    let dfd_dv = -Matrix3::from_diagonal(&gains.k_v);
    let dfd_ddf = -Matrix3::<f64>::identity();
    let dfd_dkp = -Matrix3::from_diagonal(&ev.e_p);
    let dfd_dkv = -Matrix3::from_diagonal(&ev.e_v);

    let mut dxhat = SMatrix::<f64, INPUT_DIM, EST_DIM>::zeros();
    let mut dtheta = SMatrix::<f64, INPUT_DIM, CONTROLLER_GAINS>::zeros();

    // Thrust row: f = −F_d · R̂e3.
    if ev.thrust_raw > 0.0 && ev.thrust_raw < limits.max_thrust {
        let df_dfd = -re3.transpose();
        dxhat.fixed_view_mut::<1, 3>(0, P).copy_from(&(df_dfd * dfd_dp));
        dxhat.fixed_view_mut::<1, 3>(0, V).copy_from(&(df_dfd * dfd_dv));
        dxhat.fixed_view_mut::<1, 3>(0, DF).copy_from(&(df_dfd * dfd_ddf));
        let df_dphi = ev.fd.transpose() * s.r * hat(&e3());
        dxhat.fixed_view_mut::<1, 3>(0, ATT).copy_from(&df_dphi);
        dtheta.fixed_view_mut::<1, 3>(0, 0).copy_from(&(df_dfd * dfd_dkp));
        dtheta.fixed_view_mut::<1, 3>(0, 3).copy_from(&(df_dfd * dfd_dkv));
    }

    // Torque rows.
    let kr = Matrix3::from_diagonal(&gains.k_r);
    let dtau_der = -kr;
    let dtau_dfd = dtau_der * der_dfd;
    let mut tq_x = SMatrix::<f64, 3, EST_DIM>::zeros();
    tq_x.fixed_view_mut::<3, 3>(0, P).copy_from(&(dtau_dfd * dfd_dp));
    tq_x.fixed_view_mut::<3, 3>(0, V).copy_from(&(dtau_dfd * dfd_dv));
    tq_x.fixed_view_mut::<3, 3>(0, DF).copy_from(&(dtau_dfd * dfd_ddf));
    tq_x.fixed_view_mut::<3, 3>(0, ATT).copy_from(&(dtau_der * der_dphi));
    let dtau_domega = -Matrix3::from_diagonal(&gains.k_omega) + hat(&s.omega) * j - hat(&(j * s.omega));
    tq_x.fixed_view_mut::<3, 3>(0, OMEGA).copy_from(&dtau_domega);
    tq_x.fixed_view_mut::<3, 3>(0, DTAU)
        .copy_from(&(-Matrix3::<f64>::identity()));

    let mut tq_t = SMatrix::<f64, 3, CONTROLLER_GAINS>::zeros();
    tq_t.fixed_view_mut::<3, 3>(0, 0).copy_from(&(dtau_dfd * dfd_dkp));
    tq_t.fixed_view_mut::<3, 3>(0, 3).copy_from(&(dtau_dfd * dfd_dkv));
    tq_t.fixed_view_mut::<3, 3>(0, 6)
        .copy_from(&(-Matrix3::from_diagonal(&ev.e_r)));
    tq_t.fixed_view_mut::<3, 3>(0, 9)
        .copy_from(&(-Matrix3::from_diagonal(&s.omega)));

    for i in 0..3 {
        if ev.torque_raw[i].abs() < limits.max_torque {
            dxhat.set_row(1 + i, &tq_x.row(i));
            dtheta.set_row(1 + i, &tq_t.row(i));
        }
    }

    ControllerJacobians { dxhat, dtheta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::RigidState;
    use crate::observer::EstCovector;
    use crate::so3::exp_so3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn hover_gains() -> ControllerGains {
        ControllerGains::from_slice(&[6.0, 6.0, 8.0, 4.0, 4.0, 5.0, 6.0, 6.0, 4.0, 1.5, 1.5, 1.0])
    }

    #[test]
    fn hover_at_reference_outputs_weight() {
        let params = QuadParams::default();
        let x = RigidState::at_rest(Vector3::new(0.0, 0.0, -2.0));
        let xhat = ObserverState::from_state(&x);
        let r = RefPoint {
            p: x.p,
            ..RefPoint::default()
        };
        let u = control_law(
            &xhat,
            &r,
            &hover_gains(),
            &params,
            &ControllerLimits::for_params(&params),
        );
        assert!((u.thrust - params.mass * params.gravity).abs() < 1e-12);
        assert!(u.torque.amax() < 1e-12);
    }

    #[test]
    fn disturbance_estimate_is_cancelled() {
        let params = QuadParams::default();
        let x = RigidState::at_rest(Vector3::zeros());
        let mut xhat = ObserverState::from_state(&x);
        xhat.d_force = Vector3::new(0.0, 0.0, 2.0);
        xhat.d_torque = Vector3::new(0.1, -0.2, 0.05);
        let u = control_law(
            &xhat,
            &RefPoint::default(),
            &hover_gains(),
            &params,
            &ControllerLimits::for_params(&params),
        );
        assert!((u.thrust - (params.hover_thrust() + 2.0)).abs() < 1e-12);
        assert!((u.torque + xhat.d_torque).amax() < 1e-12);
    }

    #[test]
    fn lateral_error_tilts_desired_axis() {
        let params = QuadParams::default();
        let x = RigidState::at_rest(Vector3::new(1.0, 0.0, 0.0));
        let xhat = ObserverState::from_state(&x);
        let rd = desired_attitude(&xhat, &RefPoint::default(), &hover_gains(), &params);
        // Push toward −x means the thrust axis −b3 gains a −x component.
        assert!(rd[(0, 2)] > 0.0);
        assert!((rd.transpose() * rd - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn saturation_zeroes_rows() {
        let params = QuadParams::default();
        let mut x = RigidState::at_rest(Vector3::zeros());
        x.omega = Vector3::new(50.0, 0.0, 0.0);
        let xhat = ObserverState::from_state(&x);
        let lim = ControllerLimits::for_params(&params);
        let u = control_law(&xhat, &RefPoint::default(), &hover_gains(), &params, &lim);
        assert_eq!(u.torque.x, -lim.max_torque);
        let jac = controller_jacobians(&xhat, &RefPoint::default(), &hover_gains(), &params, &lim);
        assert!(jac.dxhat.row(1).amax() == 0.0 && jac.dtheta.row(1).amax() == 0.0);
    }

    fn check_fd(xhat: &ObserverState, r: &RefPoint, gains: &ControllerGains, params: &QuadParams) {
        let lim = ControllerLimits {
            max_thrust: 1e9,
            max_torque: 1e9,
        };
        let jac = controller_jacobians(xhat, r, gains, params, &lim);
        let eps = 1e-6;
        let mut fd = SMatrix::<f64, INPUT_DIM, EST_DIM>::zeros();
        for i in 0..EST_DIM {
            let mut d = EstCovector::zeros();
            d[i] = eps;
            let up = control_law(&xhat.retract(&d), r, gains, params, &lim).as_vector();
            let um = control_law(&xhat.retract(&-d), r, gains, params, &lim).as_vector();
            fd.set_column(i, &((up - um) / (2.0 * eps)));
        }
        let err = (jac.dxhat - fd).norm() / fd.norm().max(1e-12);
        assert!(err < 1e-5, "dxhat rel err {err}");

        let mut g = [0.0; CONTROLLER_GAINS];
        for (b, v) in [gains.k_p, gains.k_v, gains.k_r, gains.k_omega].iter().enumerate() {
            g[3 * b..3 * b + 3].copy_from_slice(v.as_slice());
        }
        let mut fdt = SMatrix::<f64, INPUT_DIM, CONTROLLER_GAINS>::zeros();
        for i in 0..CONTROLLER_GAINS {
            let mut gp = g;
            gp[i] += eps;
            let mut gm = g;
            gm[i] -= eps;
            let up = control_law(xhat, r, &ControllerGains::from_slice(&gp), params, &lim).as_vector();
            let um = control_law(xhat, r, &ControllerGains::from_slice(&gm), params, &lim).as_vector();
            fdt.set_column(i, &((up - um) / (2.0 * eps)));
        }
        let err = (jac.dtheta - fdt).norm() / fdt.norm().max(1e-12);
        assert!(err < 1e-5, "dtheta rel err {err}");
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let params = QuadParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let xhat = ObserverState {
                sys: RigidState {
                    p: v3(&mut rng, 2.0),
                    v: v3(&mut rng, 2.0),
                    r: exp_so3(&v3(&mut rng, 0.8)),
                    omega: v3(&mut rng, 2.0),
                },
                d_force: v3(&mut rng, 2.0),
                d_torque: v3(&mut rng, 0.5),
            };
            let r = RefPoint {
                p: v3(&mut rng, 2.0),
                v: v3(&mut rng, 2.0),
                a: v3(&mut rng, 3.0),
                yaw: rng.random_range(-3.0..3.0),
                ..RefPoint::default()
            };
            let gains = ControllerGains::from_slice(&(0..12).map(|_| rng.random_range(0.5..10.0)).collect::<Vec<_>>());
            check_fd(&xhat, &r, &gains, &params);
        }
    }

    #[test]
    fn singular_branch_jacobian_matches_finite_differences() {
        // Reference acceleration cancelling gravity makes F_d vanish.
        let params = QuadParams::default();
        let x = RigidState {
            r: exp_so3(&Vector3::new(0.1, -0.2, 0.3)),
            omega: Vector3::new(0.3, 0.1, -0.2),
            ..RigidState::at_rest(Vector3::zeros())
        };
        let xhat = ObserverState::from_state(&x);
        let r = RefPoint {
            a: e3() * params.gravity,
            yaw: 0.4,
            ..RefPoint::default()
        };
        let gains = hover_gains();
        let lim = ControllerLimits::for_params(&params);
        let u = control_law(&xhat, &r, &gains, &params, &lim);
        assert!(u.thrust.abs() < 1e-12 && u.torque.iter().all(|t| t.is_finite()));
        // Only the attitude columns are smooth at this point; check them.
        let jac = controller_jacobians(&xhat, &r, &gains, &params, &lim);
        let eps = 1e-7;
        for i in ATT..ATT + 3 {
            let mut d = EstCovector::zeros();
            d[i] = eps;
            let up = control_law(&xhat.retract(&d), &r, &gains, &params, &lim).as_vector();
            let um = control_law(&xhat.retract(&-d), &r, &gains, &params, &lim).as_vector();
            let col = (up - um) / (2.0 * eps);
            for k in 1..4 {
                assert!((col[k] - jac.dxhat[(k, i)]).abs() < 1e-5, "({k},{i})");
            }
        }
    }
}
