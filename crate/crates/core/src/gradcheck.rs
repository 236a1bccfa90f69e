//! Finite-difference audit of every analytic Jacobian and gradient engine
//! along sampled closed-loop rollouts.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::controller::{control_law, controller_jacobians};
use crate::dynamics::{
    dynamics_jacobians, step_dynamics, ControlInput, Measurement, RigidState, StateCovector, INPUT_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::gains::{nominal_gains, split, GainVec, ObserverGains, CONTROLLER_GAINS, GAIN_DIM, OBSERVER_GAINS};
use crate::gradients::{
    forward_sens_ctg, forward_sens_fixed, forward_sens_history, relative_error, GainTrajectory, Lift,
};
use crate::loss::stage_loss;
use crate::observer::{observer_jacobians, observer_step, EstCovector, ObserverState, EST_DIM};
use crate::oracle::fd_gradient;
use crate::policy::{FeatureScales, Policy};
use crate::reference::{sample_tasks, Task, TaskDistribution};
use crate::rollout::{
    linearize, policy_gradient, rollout_closed_loop, rollout_loss, GainSource, RolloutRecord, SimConfig,
};

/// Jacobian blocks audited per sampled step.
pub const JACOBIAN_BLOCKS: [&str; 11] = [
    "dynamics.dx",
    "dynamics.du",
    "controller.dxhat",
    "controller.dtheta",
    "observer.dxhat",
    "observer.dx",
    "observer.du",
    "observer.dpsi",
    "loss.dx",
    "loss.dxhat",
    "loss.du",
];

pub const ENGINES: [&str; 6] = [
    "adjoint-fixed",
    "forward-fixed",
    "adjoint-adaptive",
    "ctg",
    "history-sum",
    "meta-gradient",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub horizon: usize,
    pub samples: usize,
    pub fd_step: f64,
    pub threshold: f64,
    pub seed: u64,
    /// Engines to audit; empty means all.
    pub engines: Vec<String>,
    /// Test hook: perturbs the named Jacobian block before comparison.
    pub corrupt: Option<String>,
    pub policy_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub kind: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub horizon: usize,
    pub samples: usize,
    pub threshold: f64,
    pub entries: Vec<CheckEntry>,
    pub failing: Vec<String>,
    pub passed: bool,
}

fn max_entry(entries: &mut Vec<CheckEntry>, name: &str, kind: &'static str, err: f64) {
    match entries.iter_mut().find(|e| e.name == name) {
        // NaN must stick: a skipped coordinate is a failure.
        Some(e) => {
            if !(err <= e.max_rel_error) {
                e.max_rel_error = err;
            }
        }
        None => entries.push(CheckEntry {
            name: name.to_string(),
            kind,
            max_rel_error: err,
            passed: false,
        }),
    }
}

/// Central-difference Jacobian of `f` over an `n`-dimensional tangent.
fn fd_matrix(n: usize, eps: f64, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let mut d = DVector::zeros(n);
        d[i] = eps;
        cols.push((f(&d) - f(&-d)) / (2.0 * eps));
    }
    DMatrix::from_columns(&cols)
}

fn mat_error(analytic: DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    relative_error(analytic.as_slice(), fd.as_slice())
}

fn est(d: &DVector<f64>) -> EstCovector {
    EstCovector::from_column_slice(d.as_slice())
}

fn st(d: &DVector<f64>) -> StateCovector {
    StateCovector::from_column_slice(d.as_slice())
}

fn jacobian_errors(
    rec: &RolloutRecord,
    k: usize,
    sim: &SimConfig,
    eps: f64,
    corrupt: Option<&str>,
) -> Vec<(&'static str, f64)> {
    let s = &rec.steps[k];
    let p = &sim.model;
    let lim = &sim.limits;
    let theta = *rec.gains_at(k, sim.stride);
    let (cg, og) = split(&theta);
    let with = |offset: usize, dl: &DVector<f64>| {
        let mut g = theta;
        g.rows_mut(offset, dl.len()).add_assign(dl);
        split(&g)
    };
    let (x, xhat, u, y, r, d) = (&s.x, &s.xhat, &s.u, &s.y, &s.r, &s.d);
    let uvec = |v: &DVector<f64>| {
        ControlInput::from_vector(
            &(u.as_vector() + nalgebra::SVector::<f64, INPUT_DIM>::from_column_slice(v.as_slice())),
        )
    };
    let next = step_dynamics(x, u, d, p);
    let xhat_next = observer_step(xhat, y, u, &og, p);

    let dj = dynamics_jacobians(x, u, d, p);
    let cj = controller_jacobians(xhat, r, &cg, p, lim);
    let oj = observer_jacobians(xhat, y, u, &og, p);
    let lj = stage_loss(x, xhat, u, r, d, &sim.loss);

    let dyn_x = fd_matrix(STATE_DIM, eps, |dl| {
        DVector::from_column_slice(next.local(&step_dynamics(&x.retract(&st(dl)), u, d, p)).as_slice())
    });
    let dyn_u = fd_matrix(INPUT_DIM, eps, |dl| {
        DVector::from_column_slice(next.local(&step_dynamics(x, &uvec(dl), d, p)).as_slice())
    });
    let ctl_x = fd_matrix(EST_DIM, eps, |dl| {
        DVector::from_column_slice(
            control_law(&xhat.retract(&est(dl)), r, &cg, p, lim)
                .as_vector()
                .as_slice(),
        )
    });
    let ctl_g = fd_matrix(CONTROLLER_GAINS, eps, |dl| {
        DVector::from_column_slice(control_law(xhat, r, &with(0, dl).0, p, lim).as_vector().as_slice())
    });
    let obs = |xh: &ObserverState, yy: &Measurement, uu: &ControlInput, g: &ObserverGains| {
        DVector::from_column_slice(xhat_next.local(&observer_step(xh, yy, uu, g, p)).as_slice())
    };
    let obs_xhat = fd_matrix(EST_DIM, eps, |dl| obs(&xhat.retract(&est(dl)), y, u, &og));
    // Noise is additive, so the perturbed measurement keeps the recorded offset.
    let measure_at = |xx: &RigidState| {
        let mut m = Measurement::noiseless(xx);
        m.p += y.p - x.p;
        m.v += y.v - x.v;
        m
    };
    let obs_x = fd_matrix(STATE_DIM, eps, |dl| obs(xhat, &measure_at(&x.retract(&st(dl))), u, &og));
    let obs_u = fd_matrix(INPUT_DIM, eps, |dl| obs(xhat, y, &uvec(dl), &og));
    let obs_g = fd_matrix(OBSERVER_GAINS, eps, |dl| obs(xhat, y, u, &with(CONTROLLER_GAINS, dl).1));
    let loss = |xx: &RigidState, xh: &ObserverState, uu: &ControlInput| {
        DVector::from_element(1, stage_loss(xx, xh, uu, r, d, &sim.loss).value)
    };
    let l_x = fd_matrix(STATE_DIM, eps, |dl| loss(&x.retract(&st(dl)), xhat, u));
    let l_xhat = fd_matrix(EST_DIM, eps, |dl| loss(x, &xhat.retract(&est(dl)), u));
    let l_u = fd_matrix(INPUT_DIM, eps, |dl| loss(x, xhat, &uvec(dl)));

    let mut out: Vec<(&'static str, DMatrix<f64>, DMatrix<f64>)> = vec![
        (
            "dynamics.dx",
            DMatrix::from_column_slice(STATE_DIM, STATE_DIM, dj.dx.as_slice()),
            dyn_x,
        ),
        (
            "dynamics.du",
            DMatrix::from_column_slice(STATE_DIM, INPUT_DIM, dj.du.as_slice()),
            dyn_u,
        ),
        (
            "controller.dxhat",
            DMatrix::from_column_slice(INPUT_DIM, EST_DIM, cj.dxhat.as_slice()),
            ctl_x,
        ),
        (
            "controller.dtheta",
            DMatrix::from_column_slice(INPUT_DIM, CONTROLLER_GAINS, cj.dtheta.as_slice()),
            ctl_g,
        ),
        (
            "observer.dxhat",
            DMatrix::from_column_slice(EST_DIM, EST_DIM, oj.dxhat.as_slice()),
            obs_xhat,
        ),
        (
            "observer.dx",
            DMatrix::from_column_slice(EST_DIM, STATE_DIM, oj.dx.as_slice()),
            obs_x,
        ),
        (
            "observer.du",
            DMatrix::from_column_slice(EST_DIM, INPUT_DIM, oj.du.as_slice()),
            obs_u,
        ),
        (
            "observer.dpsi",
            DMatrix::from_column_slice(EST_DIM, OBSERVER_GAINS, oj.dpsi.as_slice()),
            obs_g,
        ),
        ("loss.dx", DMatrix::from_row_slice(1, STATE_DIM, lj.dx.as_slice()), l_x),
        (
            "loss.dxhat",
            DMatrix::from_row_slice(1, EST_DIM, lj.dxhat.as_slice()),
            l_xhat,
        ),
        ("loss.du", DMatrix::from_row_slice(1, INPUT_DIM, lj.du.as_slice()), l_u),
    ];
    if let Some(name) = corrupt {
        if let Some(entry) = out.iter_mut().find(|e| e.0 == name) {
            let bump = 0.1 * (entry.1.amax() + 1.0);
            entry.1[(0, 0)] += bump;
        }
    }
    out.into_iter().map(|(n, a, f)| (n, mat_error(a, &f))).collect()
}

fn jittered_gains(rng: &mut ChaCha8Rng, sim: &SimConfig) -> GainVec {
    let g = nominal_gains().map(|v| v * rng.random_range(0.8..1.2));
    sim.bounds.project(&g)
}

fn fd_schedule(task: &Task, sim: &SimConfig, base: &GainTrajectory, block: Option<usize>, eps: f64) -> Vec<f64> {
    let point: Vec<f64> = match block {
        Some(b) => base.blocks[b].iter().copied().collect(),
        None => base.blocks[0].iter().copied().collect(),
    };
    fd_gradient(
        |th: &[f64]| {
            let mut g = base.clone();
            let v = GainVec::from_column_slice(th);
            match block {
                Some(b) => g.blocks[b] = v,
                None => g.blocks.iter_mut().for_each(|x| *x = v),
            }
            rollout_loss(task, GainSource::Schedule(&g), sim)
        },
        &point,
        eps,
    )
    .grad
}

/// Runs the audit. Jacobian blocks are checked at one random step per
/// sample; engines are checked against finite differences of the full
/// rollout loss.
pub fn run_gradcheck(
    sim: &SimConfig,
    dist: &TaskDistribution,
    scales: &FeatureScales,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if let Some(c) = &opts.corrupt {
        if !JACOBIAN_BLOCKS.contains(&c.as_str()) {
            return Err(Error::Config(format!("unknown Jacobian block {c:?}")));
        }
    }
    for e in &opts.engines {
        if !ENGINES.contains(&e.as_str()) {
            return Err(Error::Config(format!("unknown engine {e:?}")));
        }
    }
    let want = |e: &str| opts.engines.is_empty() || opts.engines.iter().any(|x| x == e);
    let sim = SimConfig {
        horizon: opts.horizon,
        ..*sim
    };
    sim.validate()?;
    let dist = TaskDistribution {
        min_duration_s: opts.horizon as f64 * sim.model.dt + 1.0,
        ..*dist
    };
    let tasks = sample_tasks(opts.seed, opts.samples.max(1), &dist)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6a09_e667);
    let mut entries = Vec::new();
    let eps = opts.fd_step;

    for task in &tasks {
        let gains = jittered_gains(&mut rng, &sim);
        let fixed = GainTrajectory::fixed(gains, sim.horizon, sim.stride);
        let rec = rollout_closed_loop(task, GainSource::Schedule(&fixed), &sim)?;
        if rec.is_crashed() {
            return Err(Error::Diverged {
                step: rec.crashed.unwrap_or(0),
                reason: "gradcheck rollout crashed".into(),
            });
        }
        let k = rng.random_range(0..sim.horizon);
        for (name, err) in jacobian_errors(&rec, k, &sim, eps, opts.corrupt.as_deref()) {
            max_entry(&mut entries, name, "jacobian", err);
        }

        let stages = linearize(&rec, &sim)?;
        let need_fixed_fd = ["adjoint-fixed", "forward-fixed", "history-sum"]
            .iter()
            .any(|e| want(e));
        if need_fixed_fd {
            let fd = fd_schedule(task, &sim, &fixed, None, eps);
            let adj = crate::gradients::adjoint_sweep(&stages, sim.stride, None);
            if want("adjoint-fixed") {
                max_entry(
                    &mut entries,
                    "adjoint-fixed",
                    "engine",
                    relative_error(adj.total.as_slice(), &fd),
                );
            }
            if want("forward-fixed") {
                let fwd = forward_sens_fixed(&stages, &Lift::identity(GAIN_DIM));
                max_entry(
                    &mut entries,
                    "forward-fixed",
                    "engine",
                    relative_error(fwd.as_slice(), &fd),
                );
            }
            if want("history-sum") {
                let sum = forward_sens_history(&stages, sim.stride)
                    .iter()
                    .fold(GainVec::zeros(), |a, b| a + b);
                max_entry(
                    &mut entries,
                    "history-sum",
                    "engine",
                    relative_error(sum.as_slice(), &fd),
                );
            }
        }
        if want("adjoint-adaptive") || want("ctg") {
            let adaptive = GainTrajectory::adaptive(gains, sim.horizon, sim.stride);
            let arec = rollout_closed_loop(task, GainSource::Schedule(&adaptive), &sim)?;
            let astages = linearize(&arec, &sim)?;
            let adj = crate::gradients::adjoint_sweep(&astages, sim.stride, None);
            let ctg = if want("ctg") {
                forward_sens_ctg(&astages, sim.stride)
            } else {
                Vec::new()
            };
            let w = rng.random_range(0..adaptive.blocks.len());
            let fd = fd_schedule(task, &sim, &adaptive, Some(w), eps);
            if want("adjoint-adaptive") {
                max_entry(
                    &mut entries,
                    "adjoint-adaptive",
                    "engine",
                    relative_error(adj.per_window[w].as_slice(), &fd),
                );
            }
            if want("ctg") {
                max_entry(&mut entries, "ctg", "engine", relative_error(ctg[w].as_slice(), &fd));
            }
        }
        if want("meta-gradient") {
            let policy = Policy::new(sim.bounds, *scales, opts.policy_hidden, 0.1, &gains, opts.seed);
            let prec = rollout_closed_loop(task, GainSource::Policy(&policy), &sim)?;
            let grad = policy_gradient(&policy, &prec, &sim)?;
            let flat = policy.net.to_flat();
            let first_layer = policy.net.hidden() * (policy.net.inputs() + 1);
            let picks: Vec<usize> = (0..10)
                .map(|i| {
                    if i < 5 {
                        rng.random_range(0..first_layer)
                    } else {
                        rng.random_range(first_layer..flat.len())
                    }
                })
                .collect();
            let point: Vec<f64> = picks.iter().map(|&i| flat[i]).collect();
            let fd = fd_gradient(
                |w: &[f64]| {
                    let mut p = policy.clone();
                    let mut v = flat.clone();
                    for (&i, &wi) in picks.iter().zip(w) {
                        v[i] = wi;
                    }
                    p.net.set_flat(&v);
                    rollout_loss(task, GainSource::Policy(&p), &sim)
                },
                &point,
                eps,
            )
            .grad;
            let analytic: Vec<f64> = picks.iter().map(|&i| grad[i]).collect();
            max_entry(&mut entries, "meta-gradient", "engine", relative_error(&analytic, &fd));
        }
    }

    for e in entries.iter_mut() {
        e.passed = e.max_rel_error <= opts.threshold;
    }
    let failing: Vec<String> = entries.iter().filter(|e| !e.passed).map(|e| e.name.clone()).collect();
    Ok(GradcheckReport {
        horizon: opts.horizon,
        samples: tasks.len(),
        threshold: opts.threshold,
        passed: failing.is_empty(),
        failing,
        entries,
    })
}
