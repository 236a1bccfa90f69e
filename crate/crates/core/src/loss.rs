//! Quadratic per-step objective over tracking error, estimation error and
//! control effort.

use nalgebra::SVector;

use crate::dynamics::{ControlInput, Disturbance, RigidState, ATT, INPUT_DIM, OMEGA, P, STATE_DIM, V};
use crate::error::{Error, Result};
use crate::observer::{ObserverState, DF, DTAU, EST_DIM};
use crate::reference::RefPoint;
use crate::so3::{attitude_error, attitude_error_jacobian, yaw_rotation};

/// Diagonal weights. `w_x` indexes the 12-dim state error, `w_xhat` the
/// 18-dim estimation error (including the disturbance channels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub w_x: SVector<f64, STATE_DIM>,
    pub w_xhat: SVector<f64, EST_DIM>,
    pub lambda_u: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        let mut w_x = SVector::<f64, STATE_DIM>::zeros();
        let mut w_xhat = SVector::<f64, EST_DIM>::zeros();
        for i in 0..3 {
            w_x[P + i] = 1.0;
            w_x[V + i] = 0.05;
            w_x[OMEGA + i] = 0.01;
            w_xhat[P + i] = 0.1;
            w_xhat[V + i] = 0.1;
            w_xhat[DF + i] = 0.01;
        }
        Self {
            w_x,
            w_xhat,
            lambda_u: 1e-4,
        }
    }
}

impl LossSpec {
    pub fn zero() -> Self {
        Self {
            w_x: SVector::zeros(),
            w_xhat: SVector::zeros(),
            lambda_u: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .w_x
            .iter()
            .chain(self.w_xhat.iter())
            .all(|w| *w >= 0.0 && w.is_finite())
            && self.lambda_u >= 0.0
            && self.lambda_u.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(
                "loss weights must be finite and non-negative".into(),
            ))
        }
    }
}

/// `[p − p_d, v − v_d, e_R(R_yaw, R), Ω]`.
pub fn state_error(x: &RigidState, r: &RefPoint) -> SVector<f64, STATE_DIM> {
    let mut e = SVector::<f64, STATE_DIM>::zeros();
    e.fixed_rows_mut::<3>(P).copy_from(&(x.p - r.p));
    e.fixed_rows_mut::<3>(V).copy_from(&(x.v - r.v));
    e.fixed_rows_mut::<3>(ATT)
        .copy_from(&attitude_error(&yaw_rotation(r.yaw), &x.r));
    e.fixed_rows_mut::<3>(OMEGA).copy_from(&x.omega);
    e
}

/// `[p̂ − p, v̂ − v, e_R(R, R̂), Ω̂ − Ω, d̂_f − d_f, d̂_τ − d_τ]`.
pub fn estimation_error(xhat: &ObserverState, x: &RigidState, d: &Disturbance) -> SVector<f64, EST_DIM> {
    let mut e = SVector::<f64, EST_DIM>::zeros();
    e.fixed_rows_mut::<3>(P).copy_from(&(xhat.sys.p - x.p));
    e.fixed_rows_mut::<3>(V).copy_from(&(xhat.sys.v - x.v));
    e.fixed_rows_mut::<3>(ATT).copy_from(&attitude_error(&x.r, &xhat.sys.r));
    e.fixed_rows_mut::<3>(OMEGA).copy_from(&(xhat.sys.omega - x.omega));
    e.fixed_rows_mut::<3>(DF).copy_from(&(xhat.d_force - d.force));
    e.fixed_rows_mut::<3>(DTAU).copy_from(&(xhat.d_torque - d.torque));
    e
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLoss {
    pub value: f64,
    pub dx: SVector<f64, STATE_DIM>,
    pub dxhat: SVector<f64, EST_DIM>,
    pub du: SVector<f64, INPUT_DIM>,
}

/// Loss and its gradients on the tangent coordinates. `d` is the true
/// disturbance acting at this step.
pub fn stage_loss(
    x: &RigidState,
    xhat: &ObserverState,
    u: &ControlInput,
    r: &RefPoint,
    d: &Disturbance,
    spec: &LossSpec,
) -> StageLoss {
    let ex = state_error(x, r);
    let ee = estimation_error(xhat, x, d);
    let uv = u.as_vector();
    let wex = spec.w_x.component_mul(&ex);
    let wee = spec.w_xhat.component_mul(&ee);
    let value = ex.dot(&wex) + ee.dot(&wee) + spec.lambda_u * uv.norm_squared();

    // Error Jacobians are identity except for the attitude blocks.
    let mut dx = wex * 2.0;
    let ga = dx.fixed_rows::<3>(ATT).into_owned();
    let att_x = attitude_error_jacobian(&yaw_rotation(r.yaw), &x.r).transpose() * ga;
    dx.fixed_rows_mut::<3>(ATT).copy_from(&att_x);

    let ge = wee * 2.0;
    let mut dxhat = ge;
    let ge_att = ge.fixed_rows::<3>(ATT).into_owned();
    dxhat
        .fixed_rows_mut::<3>(ATT)
        .copy_from(&(attitude_error_jacobian(&x.r, &xhat.sys.r).transpose() * ge_att));

    let mut from_est = SVector::<f64, STATE_DIM>::zeros();
    for blk in [P, V, OMEGA] {
        from_est.fixed_rows_mut::<3>(blk).copy_from(&(-ge.fixed_rows::<3>(blk)));
    }
    from_est
        .fixed_rows_mut::<3>(ATT)
        .copy_from(&(-attitude_error_jacobian(&xhat.sys.r, &x.r).transpose() * ge_att));
    dx += from_est;

    StageLoss {
        value,
        dx,
        dxhat,
        du: uv * (2.0 * spec.lambda_u),
    }
}

/// Position tracking error norm, m.
pub fn position_error(x: &RigidState, r: &RefPoint) -> f64 {
    (x.p - r.p).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::EstCovector;
    use crate::so3::exp_so3;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    #[test]
    fn zero_at_reference() {
        let x = RigidState::at_rest(Vector3::new(1.0, 2.0, -3.0));
        let r = RefPoint {
            p: x.p,
            ..RefPoint::default()
        };
        let xhat = ObserverState::from_state(&x);
        let u = ControlInput::from_vector(&SVector::zeros());
        let l = stage_loss(&x, &xhat, &u, &r, &Disturbance::zero(), &LossSpec::default());
        assert_eq!(l.value, 0.0);
        assert_eq!(l.dx.norm() + l.dxhat.norm() + l.du.norm(), 0.0);
    }

    #[test]
    fn position_only_closed_form() {
        let mut spec = LossSpec::zero();
        for i in 0..3 {
            spec.w_x[P + i] = 1.0;
        }
        let x = RigidState::at_rest(Vector3::new(1.0, 0.0, 0.0));
        let xhat = ObserverState::from_state(&x);
        let u = ControlInput::from_vector(&SVector::zeros());
        let l = stage_loss(&x, &xhat, &u, &RefPoint::default(), &Disturbance::zero(), &spec);
        assert_eq!(l.value, 1.0);
        assert_eq!(l.dx[0], 2.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut spec = LossSpec::default();
        for i in 0..STATE_DIM {
            spec.w_x[i] = rng.random_range(0.0..2.0);
        }
        for i in 0..EST_DIM {
            spec.w_xhat[i] = rng.random_range(0.0..2.0);
        }
        spec.lambda_u = 0.3;
        for _ in 0..20 {
            let x = RigidState {
                p: v3(&mut rng, 2.0),
                v: v3(&mut rng, 2.0),
                r: exp_so3(&v3(&mut rng, 1.0)),
                omega: v3(&mut rng, 1.0),
            };
            let xhat = ObserverState {
                sys: x.retract(&SVector::from_fn(|_, _| rng.random_range(-0.3..0.3))),
                d_force: v3(&mut rng, 1.0),
                d_torque: v3(&mut rng, 1.0),
            };
            let u = ControlInput::from_vector(&SVector::from_fn(|_, _| rng.random_range(-5.0..5.0)));
            let r = RefPoint {
                p: v3(&mut rng, 2.0),
                v: v3(&mut rng, 2.0),
                yaw: rng.random_range(-3.0..3.0),
                ..RefPoint::default()
            };
            let d = Disturbance {
                force: v3(&mut rng, 1.0),
                torque: v3(&mut rng, 1.0),
            };
            let l = stage_loss(&x, &xhat, &u, &r, &d, &spec);
            let eps = 1e-6;
            for i in 0..STATE_DIM {
                let mut dv = SVector::<f64, STATE_DIM>::zeros();
                dv[i] = eps;
                let f = |s: f64| stage_loss(&x.retract(&(dv * s)), &xhat, &u, &r, &d, &spec).value;
                let fd = (f(1.0) - f(-1.0)) / (2.0 * eps);
                assert!(
                    (fd - l.dx[i]).abs() < 1e-8 * (1.0 + fd.abs()) + 1e-8,
                    "x{i}: {fd} {}",
                    l.dx[i]
                );
            }
            for i in 0..EST_DIM {
                let mut dv = EstCovector::zeros();
                dv[i] = eps;
                let f = |s: f64| stage_loss(&x, &xhat.retract(&(dv * s)), &u, &r, &d, &spec).value;
                let fd = (f(1.0) - f(-1.0)) / (2.0 * eps);
                assert!((fd - l.dxhat[i]).abs() < 1e-8 * (1.0 + fd.abs()) + 1e-8, "xhat{i}");
            }
            for i in 0..INPUT_DIM {
                let mut up = u.as_vector();
                up[i] += eps;
                let mut um = u.as_vector();
                um[i] -= eps;
                let fd = (stage_loss(&x, &xhat, &ControlInput::from_vector(&up), &r, &d, &spec).value
                    - stage_loss(&x, &xhat, &ControlInput::from_vector(&um), &r, &d, &spec).value)
                    / (2.0 * eps);
                assert!((fd - l.du[i]).abs() < 1e-7 * (1.0 + fd.abs()), "u{i}");
            }
        }
    }
}
