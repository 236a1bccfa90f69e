//! Extended state observer with bandwidth-parameterized corrections.
//!
//! Each step forms innovations against the measurement of the current index,
//! propagates the estimate through the nominal plant using the current
//! disturbance estimate, then corrects every channel. Per axis the
//! velocity/disturbance pair uses gains `(2ω, ω²)`, which places both poles
//! of the linearized error dynamics at `1 − ω·dt`.
//!
//! Estimate tangent layout (18): `[δp, δv, δφ, δΩ, δd_f, δd_τ]`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::dynamics::{
    dynamics_jacobians, step_dynamics, ControlInput, Disturbance, Measurement, QuadParams, RigidState, ATT, INPUT_DIM,
    OMEGA, P, STATE_DIM, V,
};
use crate::gains::{ObserverGains, OBSERVER_GAINS};
use crate::so3::{attitude_error, attitude_error_jacobian, exp_so3, right_jacobian};

pub const EST_DIM: usize = 18;
pub const DF: usize = 12;
pub const DTAU: usize = 15;

pub type EstCovector = SVector<f64, EST_DIM>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverState {
    pub sys: RigidState,
    /// Estimated world-frame force disturbance, N
    pub d_force: Vector3<f64>,
    /// Estimated body torque disturbance, N·m
    pub d_torque: Vector3<f64>,
}

impl ObserverState {
    /// Estimate initialized at `x` with no disturbance.
    pub fn from_state(x: &RigidState) -> Self {
        Self {
            sys: *x,
            d_force: Vector3::zeros(),
            d_torque: Vector3::zeros(),
        }
    }

    pub fn disturbance(&self) -> Disturbance {
        Disturbance {
            force: self.d_force,
            torque: self.d_torque,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.sys.is_finite() && self.d_force.iter().chain(self.d_torque.iter()).all(|x| x.is_finite())
    }

    pub fn retract(&self, delta: &EstCovector) -> Self {
        Self {
            sys: self.sys.retract(&delta.fixed_rows::<STATE_DIM>(0).into_owned()),
            d_force: self.d_force + delta.fixed_rows::<3>(DF),
            d_torque: self.d_torque + delta.fixed_rows::<3>(DTAU),
        }
    }

    pub fn local(&self, other: &Self) -> EstCovector {
        let mut d = EstCovector::zeros();
        d.fixed_rows_mut::<STATE_DIM>(0).copy_from(&self.sys.local(&other.sys));
        d.fixed_rows_mut::<3>(DF).copy_from(&(other.d_force - self.d_force));
        d.fixed_rows_mut::<3>(DTAU).copy_from(&(other.d_torque - self.d_torque));
        d
    }
}

struct Innovation {
    p: Vector3<f64>,
    v: Vector3<f64>,
    att: Vector3<f64>,
    omega: Vector3<f64>,
}

fn innovation(xhat: &ObserverState, y: &Measurement) -> Innovation {
    Innovation {
        p: y.p - xhat.sys.p,
        v: y.v - xhat.sys.v,
        att: attitude_error(&xhat.sys.r, &y.r),
        omega: y.omega - xhat.sys.omega,
    }
}

pub fn observer_step(
    xhat: &ObserverState,
    y: &Measurement,
    u: &ControlInput,
    gains: &ObserverGains,
    params: &QuadParams,
) -> ObserverState {
    let dt = params.dt;
    let e = innovation(xhat, y);
    let pred = step_dynamics(&xhat.sys, u, &xhat.disturbance(), params);

    let wt = &gains.omega_t;
    let wr = &gains.omega_r;
    let correction = wr.component_mul(&e.att) * (2.0 * dt);
    let sys = RigidState {
        p: pred.p + wt.component_mul(&e.p) * (2.0 * dt),
        v: pred.v + wt.component_mul(&e.v) * (2.0 * dt),
        r: pred.r * exp_so3(&correction),
        omega: pred.omega + wr.component_mul(&e.omega) * (2.0 * dt),
    };
    let d_force = xhat.d_force + wt.component_mul(wt).component_mul(&e.v) * (params.mass * dt);
    let d_torque = xhat.d_torque
        + params
            .inertia
            .component_mul(&wr.component_mul(wr))
            .component_mul(&e.omega)
            * dt;
    ObserverState { sys, d_force, d_torque }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverJacobians {
    pub dxhat: SMatrix<f64, EST_DIM, EST_DIM>,
    /// Through the measurement map.
    pub dx: SMatrix<f64, EST_DIM, STATE_DIM>,
    pub du: SMatrix<f64, EST_DIM, INPUT_DIM>,
    pub dpsi: SMatrix<f64, EST_DIM, OBSERVER_GAINS>,
}

pub fn observer_jacobians(
    xhat: &ObserverState,
    y: &Measurement,
    u: &ControlInput,
    gains: &ObserverGains,
    params: &QuadParams,
) -> ObserverJacobians {
    let dt = params.dt;
    let m = params.mass;
    let e = innovation(xhat, y);
    let plant = dynamics_jacobians(&xhat.sys, u, &xhat.disturbance(), params);

    let wt = &gains.omega_t;
    let wr = &gains.omega_r;
    let lt = Matrix3::from_diagonal(&(wt * (2.0 * dt)));
    let lr = Matrix3::from_diagonal(&(wr * (2.0 * dt)));
    let kt = Matrix3::from_diagonal(&(wt.component_mul(wt) * (m * dt)));
    let kr = Matrix3::from_diagonal(&params.inertia.component_mul(&wr.component_mul(wr)).scale(dt));
    let c = wr.component_mul(&e.att) * (2.0 * dt);
    let exp_c_t = exp_so3(&c).transpose();
    let jr_c = right_jacobian(&c);
    let i3 = Matrix3::<f64>::identity();

    let mut dxhat = SMatrix::<f64, EST_DIM, EST_DIM>::zeros();
    let mut dx = SMatrix::<f64, EST_DIM, STATE_DIM>::zeros();
    let mut du = SMatrix::<f64, EST_DIM, INPUT_DIM>::zeros();
    let mut dpsi = SMatrix::<f64, EST_DIM, OBSERVER_GAINS>::zeros();

    // Prediction through the nominal plant; the attitude rows are rotated by
    // the correction applied on the right.
    let mut pred_x = plant.dx;
    let mut pred_u = plant.du;
    let rot_x = exp_c_t * pred_x.fixed_rows::<3>(ATT);
    pred_x.fixed_rows_mut::<3>(ATT).copy_from(&rot_x);
    let rot_u = exp_c_t * pred_u.fixed_rows::<3>(ATT);
    pred_u.fixed_rows_mut::<3>(ATT).copy_from(&rot_u);
    dxhat.fixed_view_mut::<STATE_DIM, STATE_DIM>(0, 0).copy_from(&pred_x);
    du.fixed_view_mut::<STATE_DIM, INPUT_DIM>(0, 0).copy_from(&pred_u);

    // Disturbance estimate fed into the prediction.
    dxhat.fixed_view_mut::<3, 3>(V, DF).copy_from(&(i3 * (dt / m)));
    dxhat.fixed_view_mut::<3, 3>(P, DF).copy_from(&(i3 * (dt * dt / m)));
    dxhat
        .fixed_view_mut::<3, 3>(OMEGA, DTAU)
        .copy_from(&(params.inertia_inverse() * dt));
    dxhat.fixed_view_mut::<3, 3>(DF, DF).copy_from(&i3);
    dxhat.fixed_view_mut::<3, 3>(DTAU, DTAU).copy_from(&i3);

    // Innovation terms.
    let datt_dhat = -attitude_error_jacobian(&y.r, &xhat.sys.r);
    let datt_dx = attitude_error_jacobian(&xhat.sys.r, &y.r);
    let rot_gain = jr_c * lr;

    let add = |rows: usize, col: usize, blk: Matrix3<f64>, target: &mut SMatrix<f64, EST_DIM, EST_DIM>| {
        let cur = target.fixed_view::<3, 3>(rows, col).into_owned();
        target.fixed_view_mut::<3, 3>(rows, col).copy_from(&(cur + blk));
    };
    add(P, P, -lt, &mut dxhat);
    add(V, V, -lt, &mut dxhat);
    add(ATT, ATT, rot_gain * datt_dhat, &mut dxhat);
    add(OMEGA, OMEGA, -lr, &mut dxhat);
    add(DF, V, -kt, &mut dxhat);
    add(DTAU, OMEGA, -kr, &mut dxhat);

    dx.fixed_view_mut::<3, 3>(P, P).copy_from(&lt);
    dx.fixed_view_mut::<3, 3>(V, V).copy_from(&lt);
    dx.fixed_view_mut::<3, 3>(ATT, ATT).copy_from(&(rot_gain * datt_dx));
    dx.fixed_view_mut::<3, 3>(OMEGA, OMEGA).copy_from(&lr);
    dx.fixed_view_mut::<3, 3>(DF, V).copy_from(&kt);
    dx.fixed_view_mut::<3, 3>(DTAU, OMEGA).copy_from(&kr);

    for i in 0..3 {
        dpsi[(P + i, i)] = 2.0 * e.p[i] * dt;
        dpsi[(V + i, i)] = 2.0 * e.v[i] * dt;
        dpsi[(DF + i, i)] = 2.0 * m * wt[i] * e.v[i] * dt;
        let col = jr_c.column(i) * (2.0 * e.att[i] * dt);
        dpsi.fixed_view_mut::<3, 1>(ATT, 3 + i).copy_from(&col);
        dpsi[(OMEGA + i, 3 + i)] = 2.0 * e.omega[i] * dt;
        dpsi[(DTAU + i, 3 + i)] = 2.0 * params.inertia[i] * wr[i] * e.omega[i] * dt;
    }

    ObserverJacobians { dxhat, dx, du, dpsi }
}
