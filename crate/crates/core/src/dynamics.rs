//! Discrete-time quadrotor rigid-body model.
//!
//! World frame has z pointing down: gravity acts along `+e3` and thrust along
//! `−R·e3`. Translational and rotational rates use semi-implicit Euler (the
//! position update sees the new velocity), while the attitude is propagated
//! with the exact exponential `R·exp(Ω·dt)` of the current body rate. The
//! lumped disturbance enters linearly, so the step Jacobians never depend
//! on it.
//!
//! State tangent layout (12): `[δp, δv, δφ, δΩ]` with `R ↦ R·exp(δφ)`.
//! Input layout (4): `[f, τx, τy, τz]`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{exp_so3, hat, right_jacobian};

pub const STATE_DIM: usize = 12;
pub const INPUT_DIM: usize = 4;

pub const P: usize = 0;
pub const V: usize = 3;
pub const ATT: usize = 6;
pub const OMEGA: usize = 9;

pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type StateInputMatrix = SMatrix<f64, STATE_DIM, INPUT_DIM>;
pub type StateCovector = SVector<f64, STATE_DIM>;

/// Basis vector along the world (and body) z axis.
pub fn e3() -> Vector3<f64> {
    Vector3::z()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the body inertia, kg·m²
    pub inertia: Vector3<f64>,
    /// m/s²
    pub gravity: f64,
    /// s
    pub dt: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.5,
            inertia: Vector3::new(0.08, 0.08, 0.12),
            gravity: 9.81,
            dt: 0.01,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "mass must be positive, got {}",
                self.mass
            )));
        }
        if self.inertia.iter().any(|&j| !(j > 0.0 && j.is_finite())) {
            return Err(Error::InvalidParams("inertia entries must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParams(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.gravity.is_finite() {
            return Err(Error::InvalidParams("gravity must be finite".into()));
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia)
    }

    pub fn inertia_inverse(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia.map(|j| 1.0 / j))
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Body-to-world rotation.
    pub r: Matrix3<f64>,
    /// Body angular rate.
    pub omega: Vector3<f64>,
}

impl RigidState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            r: Matrix3::identity(),
            omega: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p
            .iter()
            .chain(self.v.iter())
            .chain(self.omega.iter())
            .all(|x| x.is_finite())
            && self.r.iter().all(|x| x.is_finite())
    }

    /// Applies a tangent increment `[δp, δv, δφ, δΩ]`.
    pub fn retract(&self, delta: &StateCovector) -> Self {
        Self {
            p: self.p + delta.fixed_rows::<3>(P),
            v: self.v + delta.fixed_rows::<3>(V),
            r: self.r * exp_so3(&delta.fixed_rows::<3>(ATT).into_owned()),
            omega: self.omega + delta.fixed_rows::<3>(OMEGA),
        }
    }

    /// Tangent difference `other ⊖ self`, the inverse of [`retract`](Self::retract).
    pub fn local(&self, other: &Self) -> StateCovector {
        let mut d = StateCovector::zeros();
        d.fixed_rows_mut::<3>(P).copy_from(&(other.p - self.p));
        d.fixed_rows_mut::<3>(V).copy_from(&(other.v - self.v));
        d.fixed_rows_mut::<3>(ATT)
            .copy_from(&crate::so3::log_so3(&(self.r.transpose() * other.r)));
        d.fixed_rows_mut::<3>(OMEGA).copy_from(&(other.omega - self.omega));
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Disturbance {
    /// World-frame force, N
    pub force: Vector3<f64>,
    /// Body-frame torque, N·m
    pub torque: Vector3<f64>,
}

impl Disturbance {
    pub fn zero() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    /// Total thrust, N
    pub thrust: f64,
    /// Body torque, N·m
    pub torque: Vector3<f64>,
}

impl ControlInput {
    pub fn as_vector(&self) -> SVector<f64, INPUT_DIM> {
        SVector::<f64, INPUT_DIM>::new(self.thrust, self.torque.x, self.torque.y, self.torque.z)
    }

    pub fn from_vector(u: &SVector<f64, INPUT_DIM>) -> Self {
        Self {
            thrust: u[0],
            torque: Vector3::new(u[1], u[2], u[3]),
        }
    }
}

/// One integration step of the plant.
pub fn step_dynamics(x: &RigidState, u: &ControlInput, d: &Disturbance, params: &QuadParams) -> RigidState {
    let dt = params.dt;
    let m = params.mass;
    let j = params.inertia_matrix();
    let j_inv = params.inertia_inverse();

    let accel = e3() * params.gravity - x.r * e3() * (u.thrust / m) + d.force / m;
    let v = x.v + accel * dt;
    let p = x.p + v * dt;

    let omega_dot = j_inv * (-x.omega.cross(&(j * x.omega)) + u.torque + d.torque);
    let omega = x.omega + omega_dot * dt;
    let r = x.r * exp_so3(&(x.omega * dt));

    RigidState { p, v, r, omega }
}

/// Like [`step_dynamics`] but reports a non-finite result as divergence.
pub fn try_step_dynamics(
    x: &RigidState,
    u: &ControlInput,
    d: &Disturbance,
    params: &QuadParams,
    step: usize,
) -> Result<RigidState> {
    let next = step_dynamics(x, u, d, params);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::Diverged {
            step,
            reason: "non-finite plant state".into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsJacobians {
    pub dx: StateMatrix,
    pub du: StateInputMatrix,
}

/// Jacobians of [`step_dynamics`] on the tangent coordinates.
///
/// `_d` is accepted for signature symmetry: the disturbance enters additively
/// and never changes the linearization.
pub fn dynamics_jacobians(
    x: &RigidState,
    u: &ControlInput,
    _d: &Disturbance,
    params: &QuadParams,
) -> DynamicsJacobians {
    let dt = params.dt;
    let m = params.mass;
    let j = params.inertia_matrix();
    let j_inv = params.inertia_inverse();
    let i3 = Matrix3::<f64>::identity();

    let mut dx = StateMatrix::zeros();
    let mut du = StateInputMatrix::zeros();

    // v' = v + dt·(g e3 − f/m R e3 + d_f/m)
    let dv_dphi = x.r * hat(&e3()) * (u.thrust / m * dt);
    let dv_df = -(x.r * e3()) * (dt / m);
    dx.fixed_view_mut::<3, 3>(V, V).copy_from(&i3);
    dx.fixed_view_mut::<3, 3>(V, ATT).copy_from(&dv_dphi);
    du.fixed_view_mut::<3, 1>(V, 0).copy_from(&dv_df);

    // p' = p + dt·v'
    dx.fixed_view_mut::<3, 3>(P, P).copy_from(&i3);
    dx.fixed_view_mut::<3, 3>(P, V).copy_from(&(i3 * dt));
    dx.fixed_view_mut::<3, 3>(P, ATT).copy_from(&(dv_dphi * dt));
    du.fixed_view_mut::<3, 1>(P, 0).copy_from(&(dv_df * dt));

    // Ω' = Ω + dt·J⁻¹(−Ω×JΩ + τ + d_τ)
    let jw = j * x.omega;
    let domega = i3 + j_inv * (hat(&jw) - hat(&x.omega) * j) * dt;
    dx.fixed_view_mut::<3, 3>(OMEGA, OMEGA).copy_from(&domega);
    du.fixed_view_mut::<3, 3>(OMEGA, 1).copy_from(&(j_inv * dt));

    // R' = R·exp(Ω dt)
    let w = x.omega * dt;
    dx.fixed_view_mut::<3, 3>(ATT, ATT).copy_from(&exp_so3(&w).transpose());
    dx.fixed_view_mut::<3, 3>(ATT, OMEGA)
        .copy_from(&(right_jacobian(&w) * dt));

    DynamicsJacobians { dx, du }
}

/// Per-channel standard deviations of the additive measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Position noise, m
    pub sigma_p_m: f64,
    /// Velocity noise, m/s
    pub sigma_v_mps: f64,
}

/// Full-state measurement; position and velocity carry additive noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub omega: Vector3<f64>,
}

impl Measurement {
    /// `[p; v; vec(R) row-major; Ω]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(18);
        out.extend(self.p.iter());
        out.extend(self.v.iter());
        for i in 0..3 {
            for k in 0..3 {
                out.push(self.r[(i, k)]);
            }
        }
        out.extend(self.omega.iter());
        out
    }

    pub fn noiseless(x: &RigidState) -> Self {
        Self {
            p: x.p,
            v: x.v,
            r: x.r,
            omega: x.omega,
        }
    }
}

pub fn measure<R: Rng + ?Sized>(x: &RigidState, noise: &NoiseConfig, rng: &mut R) -> Measurement {
    let mut y = Measurement::noiseless(x);
    if noise.sigma_p_m > 0.0 {
        let n = Normal::new(0.0, noise.sigma_p_m).expect("finite sigma");
        for i in 0..3 {
            y.p[i] += n.sample(rng);
        }
    }
    if noise.sigma_v_mps > 0.0 {
        let n = Normal::new(0.0, noise.sigma_v_mps).expect("finite sigma");
        for i in 0..3 {
            y.v[i] += n.sample(rng);
        }
    }
    y
}
