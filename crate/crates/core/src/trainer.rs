//! Gain tuning, policy training, timing benchmarks and evaluation suites.

use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::NoiseConfig;
use crate::error::{Error, Result};
use crate::gains::{GainVec, GAIN_DIM};
use crate::gradients::{
    adjoint_sweep, forward_sens_ctg, forward_sens_fixed, forward_sens_history, GainMode, GainTrajectory, Lift,
};
use crate::policy::{adam_step, AdamConfig, AdamState, Policy};
use crate::reference::{preset_task, sample_tasks, Shape, Task, TaskDistribution};
use crate::rollout::{linearize, policy_gradient, rollout_closed_loop, GainSource, RolloutRecord, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DtBase,
    DtFixed,
    DtHistory,
    DtCtg,
    AdjFixed,
    AdjAdaptive,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::DtBase,
        Method::DtFixed,
        Method::DtHistory,
        Method::DtCtg,
        Method::AdjFixed,
        Method::AdjAdaptive,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::DtBase => "dt-base",
            Method::DtFixed => "dt-fixed",
            Method::DtHistory => "dt-history",
            Method::DtCtg => "dt-ctg",
            Method::AdjFixed => "adj-fixed",
            Method::AdjAdaptive => "adj-adaptive",
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, Method::DtHistory | Method::DtCtg | Method::AdjAdaptive)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Gradient of one rollout's total loss for each gain block of `method`.
pub fn method_gradient(method: Method, record: &RolloutRecord, sim: &SimConfig) -> Result<Vec<GainVec>> {
    let stages = linearize(record, sim)?;
    let to_gain = |v: &DVector<f64>| {
        let mut g = GainVec::zeros();
        g.rows_mut(0, v.len()).copy_from(v);
        g
    };
    Ok(match method {
        Method::DtBase => vec![to_gain(&forward_sens_fixed(&stages, &Lift::controller_only()))],
        Method::DtFixed => vec![to_gain(&forward_sens_fixed(&stages, &Lift::identity(GAIN_DIM)))],
        Method::AdjFixed => vec![adjoint_sweep(&stages, sim.stride, None).total],
        Method::AdjAdaptive => adjoint_sweep(&stages, sim.stride, None).per_window,
        Method::DtCtg => forward_sens_ctg(&stages, sim.stride),
        Method::DtHistory => forward_sens_history(&stages, sim.stride),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// A run whose loss exceeds this multiple of its initial loss is flagged
    /// unstable.
    pub unstable_factor: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            adam: AdamConfig {
                lr: 0.03,
                ..AdamConfig::default()
            },
            unstable_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TunePoint {
    pub iteration: usize,
    /// Mean per-step loss averaged over tasks; infinite after a crash.
    pub loss: f64,
    pub rmse: f64,
    /// Wall time of the gradient computation for this iteration, s.
    pub grad_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub method: Method,
    pub curve: Vec<TunePoint>,
    pub gains: GainTrajectory,
    pub crashed: bool,
    pub unstable: bool,
}

impl TuneResult {
    pub fn final_point(&self) -> &TunePoint {
        self.curve.last().expect("curve holds the initial point")
    }
}

fn rollout_all(tasks: &[Task], gains: &GainTrajectory, sim: &SimConfig) -> Result<Vec<RolloutRecord>> {
    tasks
        .par_iter()
        .map(|t| rollout_closed_loop(t, GainSource::Schedule(gains), sim))
        .collect()
}

/// Projected Adam on the gains of `method`, averaging the loss over `tasks`.
/// Iteration 0 of the curve is the initial point.
pub fn tune_gains(
    tasks: &[Task],
    method: Method,
    initial: &GainVec,
    sim: &SimConfig,
    tc: &TuneConfig,
) -> Result<TuneResult> {
    if tasks.is_empty() {
        return Err(Error::InvalidParams("tuning needs at least one task".into()));
    }
    if !sim.bounds.contains(initial) {
        return Err(Error::InvalidParams("initial gains outside bounds".into()));
    }
    let mut gains = if method.is_adaptive() {
        GainTrajectory::adaptive(*initial, sim.horizon, sim.stride)
    } else {
        GainTrajectory::fixed(*initial, sim.horizon, sim.stride)
    };
    let mut adam = AdamState::new(gains.blocks.len() * GAIN_DIM);
    let mut curve = Vec::with_capacity(tc.iterations + 1);
    let mut crashed = false;
    let scale = 1.0 / (tasks.len() * sim.horizon) as f64;

    for it in 0..=tc.iterations {
        let records = rollout_all(tasks, &gains, sim)?;
        if records.iter().any(|r| r.is_crashed()) {
            crashed = true;
            curve.push(TunePoint {
                iteration: it,
                loss: f64::INFINITY,
                rmse: f64::INFINITY,
                grad_seconds: 0.0,
            });
            break;
        }
        let loss = records.iter().map(|r| r.total_loss).sum::<f64>() * scale;
        let rmse = records.iter().map(|r| r.rmse()).sum::<f64>() / records.len() as f64;
        let mut point = TunePoint {
            iteration: it,
            loss,
            rmse,
            grad_seconds: 0.0,
        };
        if it == tc.iterations {
            curve.push(point);
            break;
        }
        let start = Instant::now();
        let per_task: Vec<Vec<GainVec>> = records
            .iter()
            .map(|r| method_gradient(method, r, sim))
            .collect::<Result<_>>()?;
        point.grad_seconds = start.elapsed().as_secs_f64();
        curve.push(point);

        let mut flat = vec![0.0; adam.m.len()];
        for g in &per_task {
            for (b, blk) in g.iter().enumerate() {
                for i in 0..GAIN_DIM {
                    flat[b * GAIN_DIM + i] += blk[i] * scale;
                }
            }
        }
        let mut params: Vec<f64> = gains.blocks.iter().flat_map(|b| b.iter().copied()).collect();
        adam_step(&mut params, &flat, &mut adam, &tc.adam);
        for (b, blk) in gains.blocks.iter_mut().enumerate() {
            *blk = sim
                .bounds
                .project(&GainVec::from_column_slice(&params[b * GAIN_DIM..(b + 1) * GAIN_DIM]));
        }
    }

    let initial_loss = curve[0].loss;
    let unstable = crashed || curve.iter().any(|p| !(p.loss <= tc.unstable_factor * initial_loss));
    Ok(TuneResult {
        method,
        curve,
        gains,
        crashed,
        unstable,
    })
}

/// The disturbed task used by the single-task tuning experiments.
pub fn default_tuning_task(horizon: usize, dt: f64) -> Result<Task> {
    preset_task(Shape::Circle2d, 3.0, 1.0, horizon as f64 * dt, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Adjoint,
    ForwardFixed,
    Ctg,
    History,
}

impl Engine {
    pub const ALL: [Engine; 4] = [Engine::Adjoint, Engine::ForwardFixed, Engine::Ctg, Engine::History];

    pub fn label(&self) -> &'static str {
        match self {
            Engine::Adjoint => "adjoint",
            Engine::ForwardFixed => "forward-fixed",
            Engine::Ctg => "ctg",
            Engine::History => "history",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Engine::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown engine {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub engine: Engine,
    pub horizon: usize,
    pub params: usize,
    pub median_s: f64,
}

/// Times one gradient evaluation (linearization plus engine) on a recorded
/// rollout. `copies` inflates the parameter dimension by duplicating the
/// gain vector.
pub fn time_gradient(engine: Engine, record: &RolloutRecord, sim: &SimConfig, copies: usize) -> Result<f64> {
    let lift = if copies <= 1 {
        Lift::identity(GAIN_DIM)
    } else {
        Lift::inflated(GAIN_DIM, copies)
    };
    let start = Instant::now();
    let stages = linearize(record, sim)?;
    let checksum = match engine {
        Engine::Adjoint => lift
            .pull_back(adjoint_sweep(&stages, sim.stride, None).total.as_slice())
            .sum(),
        Engine::ForwardFixed => forward_sens_fixed(&stages, &lift).sum(),
        Engine::Ctg => forward_sens_ctg(&stages, sim.stride).iter().map(|g| g.sum()).sum(),
        Engine::History => forward_sens_history(&stages, sim.stride).iter().map(|g| g.sum()).sum(),
    };
    let elapsed = start.elapsed().as_secs_f64();
    std::hint::black_box(checksum);
    Ok(elapsed)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median gradient wall time per horizon on the default tuning task.
/// Repetitions cycle through the horizons so slow drift in machine state
/// does not bias the slope, and short calls are batched to about 2 ms per
/// sample to stay clear of timer resolution.
pub fn benchmark_gradient_time(
    engine: Engine,
    horizons: &[usize],
    repetitions: usize,
    copies: usize,
    base: &SimConfig,
    gains: &GainVec,
) -> Result<Vec<BenchRow>> {
    let mut cases = Vec::with_capacity(horizons.len());
    for &n in horizons {
        let sim = SimConfig { horizon: n, ..*base };
        let task = default_tuning_task(n, sim.model.dt)?;
        let g = GainTrajectory::fixed(*gains, n, sim.stride);
        let rec = rollout_closed_loop(&task, GainSource::Schedule(&g), &sim)?;
        let warm = time_gradient(engine, &rec, &sim, copies)?;
        let batch = (2e-3 / warm.max(1e-9)).ceil().clamp(1.0, 1000.0) as usize;
        cases.push((sim, rec, batch, Vec::with_capacity(repetitions)));
    }
    for _ in 0..repetitions.max(1) {
        for (sim, rec, batch, times) in cases.iter_mut() {
            let mut total = 0.0;
            for _ in 0..*batch {
                total += time_gradient(engine, rec, sim, copies)?;
            }
            times.push(total / *batch as f64);
        }
    }
    Ok(cases
        .into_iter()
        .map(|(sim, _, _, times)| BenchRow {
            engine,
            horizon: sim.horizon,
            params: GAIN_DIM * copies.max(1),
            median_s: median(times),
        })
        .collect())
}

/// Least-squares slope of `log t` against `log n`.
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.horizon as f64).ln(), r.median_s.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Set from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
    pub hidden: usize,
    pub output_init_scale: f64,
    pub tasks: TaskDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            epochs: 200,
            adam: AdamConfig::default(),
            seed: 0,
            hidden: 128,
            output_init_scale: 0.1,
            tasks: TaskDistribution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_rmse: f64,
    pub crash_count: usize,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Task batch drawn for `epoch`; fixed by the training seed.
pub fn epoch_tasks(tc: &TrainConfig, epoch: usize) -> Result<Vec<Task>> {
    sample_tasks(tc.seed.wrapping_add(1 + epoch as u64 * 7919), tc.batch, &tc.tasks)
}

/// One optimizer step on a freshly sampled batch. Crashed tasks are left out
/// of the average; a fully crashed batch skips the update.
pub fn train_epoch(policy: &mut Policy, epoch: usize, tc: &TrainConfig, sim: &SimConfig) -> Result<EpochMetrics> {
    let start = Instant::now();
    let tasks = epoch_tasks(tc, epoch)?;
    let p: &Policy = policy;
    let results: Vec<Result<Option<(f64, f64, DVector<f64>)>>> = tasks
        .par_iter()
        .map(|task| {
            let rec = rollout_closed_loop(task, GainSource::Policy(p), sim)?;
            if rec.is_crashed() {
                return Ok(None);
            }
            let g = policy_gradient(p, &rec, sim)? / sim.horizon as f64;
            Ok(Some((rec.mean_loss(), rec.rmse(), g)))
        })
        .collect();
    let mut survivors = Vec::new();
    let mut crashes = 0;
    for r in results {
        match r? {
            Some(v) => survivors.push(v),
            None => crashes += 1,
        }
    }
    if survivors.is_empty() {
        return Err(Error::AllCrashed);
    }
    let n = survivors.len() as f64;
    let mut grad = DVector::zeros(policy.net.param_count());
    for (_, _, g) in &survivors {
        grad += g;
    }
    grad /= n;
    policy.apply_gradient(grad.as_slice(), &tc.adam);
    Ok(EpochMetrics {
        epoch,
        mean_loss: survivors.iter().map(|s| s.0).sum::<f64>() / n,
        mean_rmse: survivors.iter().map(|s| s.1).sum::<f64>() / n,
        crash_count: crashes,
        grad_norm: grad.norm(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Mismatch between the training model and the validation plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    pub mass_scale: f64,
    pub inertia_scale: f64,
    pub actuator_tau_s: f64,
    pub sigma_p_m: f64,
    pub sigma_v_mps: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            mass_scale: 1.1,
            inertia_scale: 1.2,
            actuator_tau_s: 0.02,
            sigma_p_m: 0.01,
            sigma_v_mps: 0.02,
        }
    }
}

impl Perturbation {
    pub fn apply(&self, sim: &SimConfig) -> SimConfig {
        let mut out = *sim;
        out.plant.mass *= self.mass_scale;
        out.plant.inertia *= self.inertia_scale;
        out.actuator_tau_s = self.actuator_tau_s;
        out.noise = NoiseConfig {
            sigma_p_m: self.sigma_p_m,
            sigma_v_mps: self.sigma_v_mps,
        };
        out
    }
}

/// Wind level × speed × shape grid with repeated seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Suite {
    /// Torque magnitude of the preset wind, N·m
    pub wind_levels: Vec<f64>,
    pub speeds_mps: Vec<f64>,
    pub shapes: Vec<Shape>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for Suite {
    fn default() -> Self {
        Self {
            wind_levels: vec![0.0, 1.0, 2.0],
            speeds_mps: vec![2.0, 3.0, 4.0],
            shapes: Shape::ALL.to_vec(),
            repeats: 3,
            seed: 100,
        }
    }
}

impl Suite {
    /// Tasks of one grid cell; repeats differ in gust phase and noise seed.
    pub fn cell_tasks(&self, level: f64, speed: f64, shape: Shape, duration: f64) -> Result<Vec<Task>> {
        (0..self.repeats.max(1))
            .map(|r| {
                let seed = self
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((level * 10.0) as u64 * 10_007 + (speed * 10.0) as u64 * 101 + r as u64)
                    .wrapping_add(shape as u64 * 7);
                let mut task = preset_task(shape, speed, level, duration, seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                task.wind.phase += Vector3::from_fn(|_, _| rng.random_range(0.0..std::f64::consts::TAU));
                Ok(task)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Fixed(&'a GainVec),
    Policy(&'a Policy),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub wind: f64,
    pub velocity: f64,
    pub method: String,
    pub category: String,
    pub mean: f64,
    pub sd: f64,
    pub crashes: usize,
    pub runs: usize,
}

/// One row per wind × speed × method × shape. Crashed runs are excluded
/// from the mean and counted separately.
pub fn evaluate_suite(methods: &[(&str, Controller<'_>)], suite: &Suite, sim: &SimConfig) -> Result<Vec<EvalRow>> {
    let duration = sim.horizon as f64 * sim.model.dt;
    let mut cells = Vec::new();
    for &w in &suite.wind_levels {
        for &v in &suite.speeds_mps {
            for &(name, ctl) in methods {
                for &s in &suite.shapes {
                    cells.push((w, v, name, ctl, s));
                }
            }
        }
    }
    cells
        .par_iter()
        .map(|&(w, v, name, ctl, shape)| {
            let tasks = suite.cell_tasks(w, v, shape, duration)?;
            let mut rmse = Vec::new();
            let mut crashes = 0;
            for task in &tasks {
                let rec = match ctl {
                    Controller::Fixed(g) => {
                        let tr = GainTrajectory::fixed(*g, sim.horizon, sim.stride);
                        rollout_closed_loop(task, GainSource::Schedule(&tr), sim)?
                    }
                    Controller::Policy(p) => rollout_closed_loop(task, GainSource::Policy(p), sim)?,
                };
                if rec.is_crashed() {
                    crashes += 1;
                } else {
                    rmse.push(rec.rmse());
                }
            }
            let n = rmse.len() as f64;
            let mean = if rmse.is_empty() {
                f64::NAN
            } else {
                rmse.iter().sum::<f64>() / n
            };
            let sd = if rmse.len() > 1 {
                (rmse.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(EvalRow {
                wind: w,
                velocity: v,
                method: name.to_string(),
                category: shape.label().to_string(),
                mean,
                sd,
                crashes,
                runs: tasks.len(),
            })
        })
        .collect()
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("wind,velocity,method,category,mean,sd,crashes,runs\n");
    for r in rows {
        let mean = if r.crashes == r.runs {
            "crash".to_string()
        } else {
            format!("{:.6}", r.mean)
        };
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{}\n",
            r.wind, r.velocity, r.method, r.category, mean, r.sd, r.crashes, r.runs
        ));
    }
    s
}

/// Whether an applied gain ever left the bounds during a rollout.
pub fn gains_within_bounds(record: &RolloutRecord, sim: &SimConfig) -> bool {
    record.windows.iter().all(|w| sim.bounds.contains(&w.gains))
}

pub fn is_fixed(g: &GainTrajectory) -> bool {
    g.mode == GainMode::Fixed
}
