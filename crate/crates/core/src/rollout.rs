//! Closed-loop simulation and its linearization.
//!
//! Step order at index `k`: evaluate the reference and wind; at a window
//! start, fetch the window's gains; compute `u_k` from `x̂_k`; measure `x_k`;
//! record the stage loss; advance the plant; advance the observer with
//! `y_k` and `u_k`.

use nalgebra::{DVector, SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controller::{control_law, controller_jacobians, ControllerLimits};
use crate::dynamics::{
    dynamics_jacobians, measure, step_dynamics, ControlInput, Disturbance, Measurement, NoiseConfig, QuadParams,
    RigidState, INPUT_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::gains::{split, GainBounds, GainVec, CONTROLLER_GAINS, GAIN_DIM, OBSERVER_GAINS};
use crate::gradients::{adjoint_sweep, window_count, AdjointResult, GainTrajectory, Stage};
use crate::loss::{stage_loss, LossSpec};
use crate::observer::{observer_jacobians, observer_step, ObserverState, EST_DIM};
use crate::policy::{Policy, PolicyOutput};
use crate::reference::{eval_ref, RefPoint, Task};
use crate::so3::yaw_rotation;

pub type QuadStage = Stage<STATE_DIM, EST_DIM, INPUT_DIM, GAIN_DIM>;
pub type QuadAdjoint = AdjointResult<STATE_DIM, EST_DIM, INPUT_DIM, GAIN_DIM>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Airframe assumed by the controller, observer and gradients.
    pub model: QuadParams,
    /// Airframe actually simulated.
    pub plant: QuadParams,
    pub limits: ControllerLimits,
    pub noise: NoiseConfig,
    /// First-order actuator time constant; zero disables the lag.
    pub actuator_tau_s: f64,
    pub stride: usize,
    pub horizon: usize,
    pub loss: LossSpec,
    pub bounds: GainBounds,
    pub crash_radius_m: f64,
}

impl SimConfig {
    pub fn nominal(horizon: usize) -> Self {
        let p = QuadParams::default();
        Self {
            model: p,
            plant: p,
            limits: ControllerLimits::for_params(&p),
            noise: NoiseConfig::default(),
            actuator_tau_s: 0.0,
            stride: 5,
            horizon,
            loss: LossSpec::default(),
            bounds: GainBounds::default(),
            crash_radius_m: 100.0,
        }
    }

    /// Whether the simulated loop is exactly the one the gradients model.
    pub fn is_differentiable(&self) -> bool {
        self.plant == self.model && self.actuator_tau_s == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plant.validate()?;
        self.loss.validate()?;
        self.bounds.validate()?;
        if self.stride == 0 || self.horizon == 0 {
            return Err(Error::InvalidParams("stride and horizon must be positive".into()));
        }
        if self.horizon % self.stride != 0 {
            return Err(Error::InvalidParams("stride must divide the horizon".into()));
        }
        if self.plant.dt != self.model.dt {
            return Err(Error::InvalidParams("plant and model must share dt".into()));
        }
        if !(self.actuator_tau_s >= 0.0) {
            return Err(Error::InvalidParams(
                "actuator time constant must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GainSource<'a> {
    Schedule(&'a GainTrajectory),
    Policy(&'a Policy),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub x: RigidState,
    pub xhat: ObserverState,
    /// Commanded input, as seen by the observer and the loss.
    pub u: ControlInput,
    pub y: Measurement,
    pub r: RefPoint,
    pub d: Disturbance,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub start: usize,
    pub gains: GainVec,
    pub policy: Option<PolicyOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub steps: Vec<StepRecord>,
    pub windows: Vec<WindowRecord>,
    pub final_x: RigidState,
    pub final_xhat: ObserverState,
    /// Step at which the state became non-finite or left the crash radius.
    pub crashed: Option<usize>,
    pub total_loss: f64,
}

impl RolloutRecord {
    pub fn is_crashed(&self) -> bool {
        self.crashed.is_some()
    }

    /// Position RMSE over the recorded steps, m.
    pub fn rmse(&self) -> f64 {
        if self.steps.is_empty() {
            return f64::NAN;
        }
        let s: f64 = self.steps.iter().map(|s| (s.x.p - s.r.p).norm_squared()).sum();
        (s / self.steps.len() as f64).sqrt()
    }

    pub fn mean_loss(&self) -> f64 {
        self.total_loss / self.steps.len().max(1) as f64
    }

    pub fn gains_at(&self, k: usize, stride: usize) -> &GainVec {
        &self.windows[k / stride].gains
    }

    /// Largest orthonormality defect of any plant or estimate attitude.
    pub fn max_orthonormality_defect(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| [s.x.r, s.xhat.sys.r])
            .chain([self.final_x.r, self.final_xhat.sys.r])
            .map(|r| crate::so3::orthonormality_defect(&r))
            .fold(0.0, f64::max)
    }
}

/// Plant state at rest on the reference start.
pub fn initial_state(task: &Task) -> RigidState {
    let r = eval_ref(task, 0.0);
    RigidState {
        p: r.p,
        v: r.v,
        r: yaw_rotation(r.yaw),
        omega: SVector::zeros(),
    }
}

const NOISE_STREAM: u64 = 0x6e6f_6973_6500;

pub fn rollout_closed_loop(task: &Task, source: GainSource<'_>, cfg: &SimConfig) -> Result<RolloutRecord> {
    cfg.validate()?;
    if let GainSource::Schedule(g) = source {
        if g.horizon != cfg.horizon || g.stride != cfg.stride {
            return Err(Error::InvalidParams(
                "gain schedule does not match horizon and stride".into(),
            ));
        }
        g.validate(&cfg.bounds)?;
    }
    let dt = cfg.model.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ NOISE_STREAM);
    let mut x = initial_state(task);
    let mut xhat = ObserverState::from_state(&x);
    let mut applied = ControlInput {
        thrust: cfg.plant.hover_thrust(),
        torque: SVector::zeros(),
    };
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut windows = Vec::with_capacity(window_count(cfg.horizon, cfg.stride));
    let mut crashed = None;
    let mut total = 0.0;

    for k in 0..cfg.horizon {
        let t = k as f64 * dt;
        let r = eval_ref(task, t);
        let d = task.wind.at(t);
        if k % cfg.stride == 0 {
            let w = match source {
                GainSource::Schedule(g) => WindowRecord {
                    start: k,
                    gains: *g.window(k / cfg.stride),
                    policy: None,
                },
                GainSource::Policy(p) => {
                    let out = p.evaluate(&xhat, task, t);
                    WindowRecord {
                        start: k,
                        gains: out.gains,
                        policy: Some(out),
                    }
                }
            };
            debug_assert!(cfg.bounds.contains(&w.gains));
            windows.push(w);
        }
        let gains = windows.last().expect("window opened at k = 0").gains;
        let (cg, og) = split(&gains);
        let u = control_law(&xhat, &r, &cg, &cfg.model, &cfg.limits);
        let y = measure(&x, &cfg.noise, &mut rng);
        let l = stage_loss(&x, &xhat, &u, &r, &d, &cfg.loss).value;
        total += l;
        steps.push(StepRecord {
            x,
            xhat,
            u,
            y,
            r,
            d,
            loss: l,
        });

        applied = if cfg.actuator_tau_s > 0.0 {
            let a = (dt / cfg.actuator_tau_s).min(1.0);
            ControlInput::from_vector(&(applied.as_vector() + (u.as_vector() - applied.as_vector()) * a))
        } else {
            u
        };
        x = step_dynamics(&x, &applied, &d, &cfg.plant);
        xhat = observer_step(&xhat, &y, &u, &og, &cfg.model);
        if !x.is_finite() || !xhat.is_finite() || x.p.norm() > cfg.crash_radius_m {
            crashed = Some(k + 1);
            break;
        }
    }

    Ok(RolloutRecord {
        steps,
        windows,
        final_x: x,
        final_xhat: xhat,
        crashed,
        total_loss: total,
    })
}

/// Total loss, or NaN when the rollout crashes.
pub fn rollout_loss(task: &Task, source: GainSource<'_>, cfg: &SimConfig) -> f64 {
    match rollout_closed_loop(task, source, cfg) {
        Ok(r) if !r.is_crashed() => r.total_loss,
        _ => f64::NAN,
    }
}

/// Per-step Jacobians along a recorded rollout.
pub fn linearize(record: &RolloutRecord, cfg: &SimConfig) -> Result<Vec<QuadStage>> {
    if record.is_crashed() {
        return Err(Error::Diverged {
            step: record.crashed.unwrap_or(0),
            reason: "cannot linearize a crashed rollout".into(),
        });
    }
    if !cfg.is_differentiable() {
        return Err(Error::InvalidParams(
            "gradients require the plant to match the model without actuator lag".into(),
        ));
    }
    Ok(record
        .steps
        .iter()
        .enumerate()
        .map(|(k, s)| linearize_step(s, record.gains_at(k, cfg.stride), cfg))
        .collect())
}

fn linearize_step(s: &StepRecord, gains: &GainVec, cfg: &SimConfig) -> QuadStage {
    let (cg, og) = split(gains);
    let dj = dynamics_jacobians(&s.x, &s.u, &s.d, &cfg.model);
    let oj = observer_jacobians(&s.xhat, &s.y, &s.u, &og, &cfg.model);
    let cj = controller_jacobians(&s.xhat, &s.r, &cg, &cfg.model, &cfg.limits);
    let l = stage_loss(&s.x, &s.xhat, &s.u, &s.r, &s.d, &cfg.loss);

    let mut h_g = SMatrix::<f64, INPUT_DIM, GAIN_DIM>::zeros();
    h_g.fixed_columns_mut::<CONTROLLER_GAINS>(0).copy_from(&cj.dtheta);
    let mut o_g = SMatrix::<f64, EST_DIM, GAIN_DIM>::zeros();
    o_g.fixed_columns_mut::<OBSERVER_GAINS>(CONTROLLER_GAINS)
        .copy_from(&oj.dpsi);
    Stage {
        f_x: dj.dx,
        f_u: dj.du,
        o_xhat: oj.dxhat,
        o_x: oj.dx,
        o_u: oj.du,
        o_g,
        h_xhat: cj.dxhat,
        h_g,
        l_x: l.dx,
        l_xhat: l.dxhat,
        l_u: l.du,
    }
}

/// Adjoint gradients for a schedule-driven rollout.
pub fn schedule_adjoint(record: &RolloutRecord, cfg: &SimConfig) -> Result<QuadAdjoint> {
    let stages = linearize(record, cfg)?;
    Ok(adjoint_sweep(&stages, cfg.stride, None))
}

/// Loss and meta-gradient with respect to the flat policy parameters for a
/// policy-driven rollout. Includes the dependence of each window's gains on
/// the estimate through the features.
pub fn policy_gradient(policy: &Policy, record: &RolloutRecord, cfg: &SimConfig) -> Result<DVector<f64>> {
    let stages = linearize(record, cfg)?;
    let outs: Vec<&PolicyOutput> = record
        .windows
        .iter()
        .map(|w| {
            w.policy
                .as_ref()
                .ok_or_else(|| Error::InvalidParams("rollout was not policy-driven".into()))
        })
        .collect::<Result<_>>()?;
    let coupling = |w: usize, g: &GainVec| -> SVector<f64, EST_DIM> {
        let xhat = &record.steps[record.windows[w].start].xhat;
        policy.backward(outs[w], xhat, g).1
    };
    let adj = adjoint_sweep(&stages, cfg.stride, Some(&coupling));
    let mut grad = DVector::zeros(policy.net.param_count());
    for (w, g) in adj.per_window.iter().enumerate() {
        let xhat = &record.steps[record.windows[w].start].xhat;
        grad += policy.backward(outs[w], xhat, g).0;
    }
    Ok(grad)
}
