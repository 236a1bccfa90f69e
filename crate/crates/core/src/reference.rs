//! Reference trajectories and the task distribution.
//!
//! Position axes are 7th-order polynomials minimizing integrated squared snap
//! with C⁴ continuity at interior knots; yaw minimizes integrated squared
//! angular acceleration with C² continuity. Both are solved as one dense KKT
//! system per axis in segment-normalized time.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Disturbance;
use crate::error::{Error, Result};

pub const COEFFS: usize = 8;
/// Axis order inside [`PolySegment::coeffs`].
pub const AXES: usize = 4;
const YAW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub time: f64,
    pub position: Vector3<f64>,
    pub yaw: f64,
}

impl Waypoint {
    pub fn new(time: f64, position: Vector3<f64>) -> Self {
        Self {
            time,
            position,
            yaw: 0.0,
        }
    }
}

/// Boundary velocities of the whole trajectory; higher derivatives are pinned to zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Boundary {
    pub start_velocity: Vector3<f64>,
    pub end_velocity: Vector3<f64>,
}

/// One polynomial piece. `coeffs[axis][j]` multiplies `t^j` in local time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolySegment {
    pub coeffs: [[f64; COEFFS]; AXES],
    pub duration: f64,
}

impl PolySegment {
    /// `q`-th time derivative of `axis` at local time `t` (Horner scheme).
    pub fn eval(&self, axis: usize, q: usize, t: f64) -> f64 {
        if q >= COEFFS {
            return 0.0;
        }
        let c = &self.coeffs[axis];
        let mut acc = 0.0;
        for j in (q..COEFFS).rev() {
            acc = acc * t + c[j] * falling(j, q);
        }
        acc
    }

    pub fn position(&self, q: usize, t: f64) -> Vector3<f64> {
        Vector3::new(self.eval(0, q, t), self.eval(1, q, t), self.eval(2, q, t))
    }
}

/// `j·(j−1)···(j−q+1)`.
fn falling(j: usize, q: usize) -> f64 {
    if q > j {
        return 0.0;
    }
    ((j - q + 1)..=j).map(|x| x as f64).product()
}

/// Structure of a single-axis interpolation problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisProblem {
    /// Derivative order whose squared integral is minimized.
    pub cost_order: usize,
    /// Derivatives `1..=continuity` must agree at interior knots.
    pub continuity: usize,
    /// Derivatives `1..=boundary_order` are pinned at both ends.
    pub boundary_order: usize,
}

pub const SNAP_PROBLEM: AxisProblem = AxisProblem {
    cost_order: 4,
    continuity: 4,
    boundary_order: 3,
};

pub const YAW_PROBLEM: AxisProblem = AxisProblem {
    cost_order: 2,
    continuity: 2,
    boundary_order: 1,
};

/// Boundary data of one axis: waypoint values and first-derivative
/// values at both ends. Higher pinned derivatives are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisData {
    pub values: Vec<f64>,
    pub start_rate: f64,
    pub end_rate: f64,
}

#[derive(Debug, Clone, Copy)]
enum Rhs {
    Value(usize),
    StartRate,
    EndRate,
    Zero,
}

/// Solves several axes sharing `durations` and `problem` with one
/// factorization. Returns per-axis, per-segment coefficients in local
/// (unnormalized) time.
pub fn solve_axes(axes: &[AxisData], durations: &[f64], problem: AxisProblem) -> Result<Vec<Vec<[f64; COEFFS]>>> {
    let segs = durations.len();
    if segs == 0 || axes.iter().any(|a| a.values.len() != segs + 1) {
        return Err(Error::InvalidWaypoints("need one more value than segments".into()));
    }
    let n = segs * COEFFS;
    let mut rows: Vec<(Vec<(usize, f64)>, Rhs)> = Vec::new();

    // Coefficient of a_j (normalized) in the q-th derivative w.r.t. real time at τ ∈ {0, 1}.
    let basis = |j: usize, q: usize, tau_one: bool, duration: f64| -> f64 {
        let d = falling(j, q);
        if d == 0.0 {
            return 0.0;
        }
        let pow = if tau_one {
            1.0
        } else if j == q {
            1.0
        } else {
            0.0
        };
        d * pow / duration.powi(q as i32)
    };

    for (i, &dur) in durations.iter().enumerate() {
        rows.push((
            (0..COEFFS).map(|j| (i * COEFFS + j, basis(j, 0, false, dur))).collect(),
            Rhs::Value(i),
        ));
        rows.push((
            (0..COEFFS).map(|j| (i * COEFFS + j, basis(j, 0, true, dur))).collect(),
            Rhs::Value(i + 1),
        ));
    }
    for q in 1..=problem.boundary_order {
        let first = durations[0];
        let last = durations[segs - 1];
        let (s, e) = if q == 1 {
            (Rhs::StartRate, Rhs::EndRate)
        } else {
            (Rhs::Zero, Rhs::Zero)
        };
        rows.push(((0..COEFFS).map(|j| (j, basis(j, q, false, first))).collect(), s));
        rows.push((
            (0..COEFFS)
                .map(|j| ((segs - 1) * COEFFS + j, basis(j, q, true, last)))
                .collect(),
            e,
        ));
    }
    for i in 0..segs.saturating_sub(1) {
        for q in 1..=problem.continuity {
            let mut row: Vec<(usize, f64)> = (0..COEFFS)
                .map(|j| (i * COEFFS + j, basis(j, q, true, durations[i])))
                .collect();
            row.extend((0..COEFFS).map(|j| ((i + 1) * COEFFS + j, -basis(j, q, false, durations[i + 1]))));
            rows.push((row, Rhs::Zero));
        }
    }

    let m = rows.len();
    let mut kkt = DMatrix::<f64>::zeros(n + m, n + m);
    let mut rhs = DMatrix::<f64>::zeros(n + m, axes.len());
    for (i, &dur) in durations.iter().enumerate() {
        let r = problem.cost_order;
        let scale = dur.powi(1 - 2 * r as i32);
        for j in r..COEFFS {
            for l in r..COEFFS {
                let power = (j + l - 2 * r + 1) as f64;
                kkt[(i * COEFFS + j, i * COEFFS + l)] = 2.0 * scale * falling(j, r) * falling(l, r) / power;
            }
        }
    }
    for (k, (row, kind)) in rows.iter().enumerate() {
        for &(col, val) in row {
            kkt[(n + k, col)] = val;
            kkt[(col, n + k)] = val;
        }
        for (a, axis) in axes.iter().enumerate() {
            rhs[(n + k, a)] = match *kind {
                Rhs::Value(i) => axis.values[i],
                Rhs::StartRate => axis.start_rate,
                Rhs::EndRate => axis.end_rate,
                Rhs::Zero => 0.0,
            };
        }
    }
    let sol = kkt.lu().solve(&rhs).ok_or(Error::Singular("trajectory KKT system"))?;
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular("trajectory KKT system"));
    }

    Ok((0..axes.len())
        .map(|a| {
            durations
                .iter()
                .enumerate()
                .map(|(i, &dur)| {
                    let mut c = [0.0; COEFFS];
                    for (j, cj) in c.iter_mut().enumerate() {
                        *cj = sol[(i * COEFFS + j, a)] / dur.powi(j as i32);
                    }
                    c
                })
                .collect()
        })
        .collect())
}

fn validate_waypoints(waypoints: &[Waypoint]) -> Result<Vec<f64>> {
    if waypoints.len() < 2 {
        return Err(Error::InvalidWaypoints("at least two waypoints are required".into()));
    }
    let durations: Vec<f64> = waypoints.windows(2).map(|w| w[1].time - w[0].time).collect();
    if durations.iter().any(|&d| !(d > 1e-9)) {
        return Err(Error::InvalidWaypoints(
            "waypoint times must be strictly increasing".into(),
        ));
    }
    if waypoints
        .iter()
        .any(|w| !(w.time.is_finite() && w.yaw.is_finite() && w.position.iter().all(|x| x.is_finite())))
    {
        return Err(Error::InvalidWaypoints("non-finite waypoint".into()));
    }
    Ok(durations)
}

/// Minimum-snap trajectory through `waypoints`, starting and ending at rest.
pub fn solve_min_snap(waypoints: &[Waypoint]) -> Result<Vec<PolySegment>> {
    solve_min_snap_with(waypoints, &Boundary::default(), SNAP_PROBLEM)
}

/// Minimum-snap (or other `position_problem`) trajectory with boundary velocities.
pub fn solve_min_snap_with(
    waypoints: &[Waypoint],
    boundary: &Boundary,
    position_problem: AxisProblem,
) -> Result<Vec<PolySegment>> {
    let durations = validate_waypoints(waypoints)?;
    let position: Vec<AxisData> = (0..3)
        .map(|axis| AxisData {
            values: waypoints.iter().map(|w| w.position[axis]).collect(),
            start_rate: boundary.start_velocity[axis],
            end_rate: boundary.end_velocity[axis],
        })
        .collect();
    let mut axes = solve_axes(&position, &durations, position_problem)?;
    let yaw = AxisData {
        values: waypoints.iter().map(|w| w.yaw).collect(),
        start_rate: 0.0,
        end_rate: 0.0,
    };
    // Zero data has the zero polynomial as its unique solution.
    if yaw.values.iter().all(|&v| v == 0.0) {
        axes.push(vec![[0.0; COEFFS]; durations.len()]);
    } else {
        axes.extend(solve_axes(&[yaw], &durations, YAW_PROBLEM)?);
    }

    Ok(durations
        .iter()
        .enumerate()
        .map(|(i, &duration)| PolySegment {
            coeffs: [axes[0][i], axes[1][i], axes[2][i], axes[3][i]],
            duration,
        })
        .collect())
}

/// Integrated squared snap summed over the position axes.
pub fn snap_cost(segments: &[PolySegment]) -> f64 {
    let mut total = 0.0;
    for seg in segments {
        for axis in 0..3 {
            let c = &seg.coeffs[axis];
            for j in 4..COEFFS {
                for l in 4..COEFFS {
                    let power = (j + l - 7) as f64;
                    total += c[j] * c[l] * falling(j, 4) * falling(l, 4) * seg.duration.powf(power) / power;
                }
            }
        }
    }
    total
}

/// Desired state at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RefPoint {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub jerk: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
}

/// Lumped wind: constant force, one sinusoid per force axis, constant torque.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindProfile {
    pub force: Vector3<f64>,
    pub amplitude: Vector3<f64>,
    pub frequency_hz: Vector3<f64>,
    pub phase: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl WindProfile {
    pub fn calm() -> Self {
        Self::default()
    }

    pub fn at(&self, t: f64) -> Disturbance {
        let gust = Vector3::from_fn(|i, _| self.amplitude[i] * (TAU * self.frequency_hz[i] * t + self.phase[i]).sin());
        Disturbance {
            force: self.force + gust,
            torque: self.torque,
        }
    }

    pub fn is_calm(&self) -> bool {
        self.force == Vector3::zeros() && self.amplitude == Vector3::zeros() && self.torque == Vector3::zeros()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub segments: Vec<PolySegment>,
    pub wind: WindProfile,
    pub seed: u64,
    starts: Vec<f64>,
}

impl Task {
    pub fn new(segments: Vec<PolySegment>, wind: WindProfile, seed: u64) -> Result<Self> {
        if segments.is_empty() || segments.iter().any(|s| !(s.duration > 0.0)) {
            return Err(Error::InvalidWaypoints("task needs positive-duration segments".into()));
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut t = 0.0;
        for s in &segments {
            starts.push(t);
            t += s.duration;
        }
        Ok(Self {
            segments,
            wind,
            seed,
            starts,
        })
    }

    pub fn duration(&self) -> f64 {
        self.starts.last().copied().unwrap_or(0.0) + self.segments.last().map_or(0.0, |s| s.duration)
    }

    /// Active segment index and local time; `None` outside `[0, duration]`.
    pub fn locate(&self, t: f64) -> Option<(usize, f64)> {
        if !(0.0..=self.duration() + 1e-12).contains(&t) {
            return None;
        }
        let idx = match self.starts.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let local = (t - self.starts[idx]).min(self.segments[idx].duration);
        Some((idx, local))
    }

    pub fn segment_start(&self, idx: usize) -> f64 {
        self.starts[idx]
    }
}

/// Evaluates the reference. Outside `[0, duration]` the nearest endpoint is
/// returned with all derivatives zeroed.
pub fn eval_ref(task: &Task, t: f64) -> RefPoint {
    match task.locate(t) {
        Some((idx, local)) => {
            let seg = &task.segments[idx];
            RefPoint {
                p: seg.position(0, local),
                v: seg.position(1, local),
                a: seg.position(2, local),
                jerk: seg.position(3, local),
                yaw: seg.eval(YAW, 0, local),
                yaw_rate: seg.eval(YAW, 1, local),
            }
        }
        None => {
            let (seg, local) = if t < 0.0 {
                (&task.segments[0], 0.0)
            } else {
                let last = task.segments.last().expect("non-empty task");
                (last, last.duration)
            };
            RefPoint {
                p: seg.position(0, local),
                yaw: seg.eval(YAW, 0, local),
                ..RefPoint::default()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle2d,
    Circle3d,
    Figure8,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle2d, Shape::Circle3d, Shape::Figure8];

    pub fn label(&self) -> &'static str {
        match self {
            Shape::Circle2d => "2D Circle",
            Shape::Circle3d => "3D Circle",
            Shape::Figure8 => "Figure-8",
        }
    }

    /// Point on the closed curve at phase `s ∈ [0, 2π)`, relative to its center.
    fn point(&self, s: f64, radius: f64) -> Vector3<f64> {
        match self {
            Shape::Circle2d => Vector3::new(radius * s.cos(), radius * s.sin(), 0.0),
            Shape::Circle3d => Vector3::new(radius * s.cos(), radius * s.sin(), -0.25 * radius * s.sin()),
            Shape::Figure8 => Vector3::new(radius * s.sin(), radius * s.sin() * s.cos(), 0.0),
        }
    }

    fn tangent(&self, s: f64, radius: f64) -> Vector3<f64> {
        let h = 1e-6;
        (self.point(s + h, radius) - self.point(s - h, radius)) / (2.0 * h)
    }
}

/// Closed-curve reference flown at roughly constant `speed` for at least `min_duration`.
pub fn shape_trajectory(
    shape: Shape,
    center: Vector3<f64>,
    radius: f64,
    speed: f64,
    min_duration: f64,
) -> Result<Vec<PolySegment>> {
    const PER_LAP: usize = 16;
    let mut waypoints = vec![Waypoint::new(0.0, center + shape.point(0.0, radius))];
    let mut k = 0usize;
    let mut t = 0.0;
    while t < min_duration + 1e-9 {
        let s0 = TAU * k as f64 / PER_LAP as f64;
        let s1 = TAU * (k + 1) as f64 / PER_LAP as f64;
        // Arc length of the chunk by fine quadrature of the tangent.
        let arc: f64 = (0..32)
            .map(|i| {
                let s = s0 + (s1 - s0) * (i as f64 + 0.5) / 32.0;
                shape.tangent(s, radius).norm() * (s1 - s0) / 32.0
            })
            .sum();
        t += arc / speed;
        k += 1;
        waypoints.push(Waypoint::new(t, center + shape.point(s1, radius)));
    }
    let phase_rate = |s: f64| speed / shape.tangent(s, radius).norm();
    let s_end = TAU * k as f64 / PER_LAP as f64;
    let boundary = Boundary {
        start_velocity: shape.tangent(0.0, radius) * phase_rate(0.0),
        end_velocity: shape.tangent(s_end, radius) * phase_rate(s_end),
    };
    solve_min_snap_with(&waypoints, &boundary, SNAP_PROBLEM)
}

/// Wind used by the named evaluation presets at a given torque level (N·m).
pub fn preset_wind(level: f64) -> WindProfile {
    WindProfile {
        force: Vector3::new(0.6, -0.4, 0.2) * level,
        amplitude: Vector3::new(0.5, 0.5, 0.0) * level,
        frequency_hz: Vector3::new(0.4, 0.3, 0.0),
        phase: Vector3::new(0.0, PI / 3.0, 0.0),
        torque: Vector3::new(0.6, 0.8, 0.0) * level,
    }
}

pub const PRESET_CENTER: Vector3<f64> = Vector3::new(0.0, 0.0, -2.0);
pub const PRESET_RADIUS: f64 = 3.0;

/// Named preset task: shape flown at `speed` m/s under wind `level`.
pub fn preset_task(shape: Shape, speed: f64, level: f64, min_duration: f64, seed: u64) -> Result<Task> {
    let segments = shape_trajectory(shape, PRESET_CENTER, PRESET_RADIUS, speed, min_duration)?;
    Task::new(segments, preset_wind(level), seed)
}

/// Hover at a fixed point for `duration` seconds.
pub fn hover_task(position: Vector3<f64>, duration: f64, wind: WindProfile, seed: u64) -> Result<Task> {
    let segments = solve_min_snap(&[Waypoint::new(0.0, position), Waypoint::new(duration, position)])?;
    Task::new(segments, wind, seed)
}

/// Sampling ranges for the task distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskDistribution {
    /// Minimum reference duration, s
    pub min_duration_s: f64,
    /// Scales every wind magnitude; 0 gives calm tasks.
    pub difficulty: f64,
    /// Per-axis constant force bound, N
    pub max_force_n: f64,
    /// Per-axis sinusoidal force amplitude bound, N
    pub max_gust_n: f64,
    /// Constant torque magnitude bound, N·m
    pub max_torque_nm: f64,
    /// Flight speed range, m/s
    pub speed_min_mps: f64,
    pub speed_max_mps: f64,
    /// Half-extent of the random-waypoint box, m
    pub box_half_m: f64,
    /// Fraction of tasks drawn from the closed-curve family
    pub shape_fraction: f64,
}

impl Default for TaskDistribution {
    fn default() -> Self {
        Self {
            min_duration_s: 10.0,
            difficulty: 1.0,
            max_force_n: 2.0,
            max_gust_n: 1.0,
            max_torque_nm: 2.0,
            speed_min_mps: 1.5,
            speed_max_mps: 4.0,
            box_half_m: 3.0,
            shape_fraction: 0.75,
        }
    }
}

fn sample_wind(rng: &mut ChaCha8Rng, cfg: &TaskDistribution) -> WindProfile {
    let scale = cfg.difficulty.max(0.0);
    let force = Vector3::from_fn(|_, _| {
        let mag = rng.random_range(0.0..=cfg.max_force_n);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let amplitude = Vector3::new(
        rng.random_range(0.0..=cfg.max_gust_n),
        rng.random_range(0.0..=cfg.max_gust_n),
        0.0,
    );
    let frequency_hz = Vector3::from_fn(|_, _| rng.random_range(0.1..1.0));
    let phase = Vector3::from_fn(|_, _| rng.random_range(0.0..TAU));
    let dir = loop {
        let d = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = d.norm();
        if n > 1e-3 && n <= 1.0 {
            break d / n;
        }
    };
    let torque = dir * rng.random_range(0.0..=cfg.max_torque_nm);
    WindProfile {
        force: force * scale,
        amplitude: amplitude * scale,
        frequency_hz,
        phase,
        torque: torque * scale,
    }
}

fn sample_waypoint_task(rng: &mut ChaCha8Rng, cfg: &TaskDistribution) -> Result<Vec<PolySegment>> {
    let speed = rng.random_range(cfg.speed_min_mps..=cfg.speed_max_mps);
    let h = cfg.box_half_m;
    let mut pos = Vector3::new(0.0, 0.0, -2.0);
    let mut t = 0.0;
    let mut waypoints = vec![Waypoint::new(0.0, pos)];
    while t < cfg.min_duration_s + 1e-9 {
        let next = loop {
            let cand = Vector3::new(
                rng.random_range(-h..h),
                rng.random_range(-h..h),
                -2.0 + rng.random_range(-0.5 * h..0.5 * h),
            );
            if (cand - pos).norm() > 0.5 {
                break cand;
            }
        };
        // Rest-to-rest segments average about half of cruise speed.
        t += ((next - pos).norm() / speed).max(1.0) * 1.5;
        pos = next;
        waypoints.push(Waypoint::new(t, pos));
    }
    solve_min_snap(&waypoints)
}

fn sample_shape_task(rng: &mut ChaCha8Rng, cfg: &TaskDistribution) -> Result<Vec<PolySegment>> {
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let speed = rng.random_range(cfg.speed_min_mps..=cfg.speed_max_mps);
    let radius = rng.random_range(2.0..4.0);
    let center = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -2.0);
    shape_trajectory(shape, center, radius, speed, cfg.min_duration_s)
}

/// Draws `count` tasks; identical seeds give identical lists.
pub fn sample_tasks(seed: u64, count: usize, cfg: &TaskDistribution) -> Result<Vec<Task>> {
    (0..count)
        .map(|i| {
            let task_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
            let segments = if rng.random_bool(cfg.shape_fraction.clamp(0.0, 1.0)) {
                sample_shape_task(&mut rng, cfg)?
            } else {
                sample_waypoint_task(&mut rng, cfg)?
            };
            let wind = sample_wind(&mut rng, cfg);
            Task::new(segments, wind, task_seed)
        })
        .collect()
}
