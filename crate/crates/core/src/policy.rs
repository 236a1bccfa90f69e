//! Gain-scheduling policy: task features → MLP → sigmoid-bounded gains.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gains::{GainBounds, GainVec, GAIN_DIM};
use crate::observer::{ObserverState, EST_DIM};
use crate::reference::{eval_ref, Task, AXES, COEFFS};
use crate::so3::hat;

pub const FEATURE_DIM: usize = 68;
pub const ESTIMATE_FEATURES: usize = 24;
pub const DEFAULT_HIDDEN: usize = 128;

/// Divisors applied to raw feature groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureScales {
    pub position_m: f64,
    pub velocity_mps: f64,
    pub accel_mps2: f64,
    pub rate_radps: f64,
    pub force_n: f64,
    pub torque_nm: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            position_m: 5.0,
            velocity_mps: 5.0,
            accel_mps2: 10.0,
            rate_radps: 5.0,
            force_n: 5.0,
            torque_nm: 2.0,
        }
    }
}

/// Layout: estimate (p̂, v̂, vec R̂ row-major, Ω̂, d̂_f, d̂_τ: 24), desired
/// (p_d, v_d, a_d, yaw_d: 10), active segment coefficients normalized by
/// their max magnitude (32), time in segment / segment duration and
/// global time / task duration (2).
pub fn build_features(xhat: &ObserverState, task: &Task, t: f64, sc: &FeatureScales) -> DVector<f64> {
    let mut z = DVector::zeros(FEATURE_DIM);
    let mut put = |at: usize, v: &Vector3<f64>, s: f64| {
        for i in 0..3 {
            z[at + i] = v[i] / s;
        }
    };
    put(0, &xhat.sys.p, sc.position_m);
    put(3, &xhat.sys.v, sc.velocity_mps);
    put(15, &xhat.sys.omega, sc.rate_radps);
    put(18, &xhat.d_force, sc.force_n);
    put(21, &xhat.d_torque, sc.torque_nm);
    let r = eval_ref(task, t);
    put(24, &r.p, sc.position_m);
    put(27, &r.v, sc.velocity_mps);
    put(30, &r.a, sc.accel_mps2);
    for i in 0..3 {
        for k in 0..3 {
            z[6 + 3 * i + k] = xhat.sys.r[(i, k)];
        }
    }
    z[33] = r.yaw / PI;

    let tc = t.clamp(0.0, task.duration());
    let (idx, local) = task.locate(tc).expect("clamped time lies in the task");
    let seg = &task.segments[idx];
    let scale = seg
        .coeffs
        .iter()
        .flatten()
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(1e-12);
    for a in 0..AXES {
        for c in 0..COEFFS {
            z[34 + a * COEFFS + c] = seg.coeffs[a][c] / scale;
        }
    }
    z[66] = local / seg.duration;
    z[67] = tc / task.duration();
    z
}

/// `∂z/∂x̂` on the estimate tangent; only the first 24 rows are nonzero.
pub fn feature_jacobian(xhat: &ObserverState, sc: &FeatureScales) -> SMatrix<f64, ESTIMATE_FEATURES, EST_DIM> {
    let mut j = SMatrix::<f64, ESTIMATE_FEATURES, EST_DIM>::zeros();
    for i in 0..3 {
        j[(i, i)] = 1.0 / sc.position_m;
        j[(3 + i, 3 + i)] = 1.0 / sc.velocity_mps;
        j[(15 + i, 9 + i)] = 1.0 / sc.rate_radps;
        j[(18 + i, 12 + i)] = 1.0 / sc.force_n;
        j[(21 + i, 15 + i)] = 1.0 / sc.torque_nm;
    }
    // R exp(δ) ≈ R + R hat(δ)
    for c in 0..3 {
        let d = xhat.sys.r * hat(&Vector3::ith(c, 1.0));
        for i in 0..3 {
            for k in 0..3 {
                j[(6 + 3 * i + k, 6 + c)] = d[(i, k)];
            }
        }
    }
    j
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Θ = min + (max − min)·σ(η)` and the diagonal of `∂Θ/∂η`.
pub fn bound_gains(eta: &GainVec, bounds: &GainBounds) -> (GainVec, GainVec) {
    let mut theta = GainVec::zeros();
    let mut diag = GainVec::zeros();
    for i in 0..GAIN_DIM {
        let s = sigmoid(eta[i]);
        let span = bounds.max[i] - bounds.min[i];
        theta[i] = (bounds.min[i] + span * s).clamp(bounds.min[i], bounds.max[i]);
        diag[i] = span * s * (1.0 - s);
    }
    (theta, diag)
}

/// Pre-activation that maps to `theta`; targets on the boundary are pulled
/// slightly inside.
pub fn unbound_gains(theta: &GainVec, bounds: &GainBounds) -> GainVec {
    GainVec::from_fn(|i, _| {
        let s = ((theta[i] - bounds.min[i]) / (bounds.max[i] - bounds.min[i])).clamp(1e-6, 1.0 - 1e-6);
        (s / (1.0 - s)).ln()
    })
}

/// Single-hidden-layer ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub input: DVector<f64>,
    pub pre: DVector<f64>,
    pub hidden: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub params: DVector<f64>,
    pub input: DVector<f64>,
}

impl Mlp {
    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, inputs),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(outputs, hidden),
            b2: DVector::zeros(outputs),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero hidden bias, output weights
    /// additionally scaled by `output_scale`.
    pub fn init(inputs: usize, hidden: usize, outputs: usize, output_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(inputs, hidden, outputs);
        let a1 = 1.0 / (inputs as f64).sqrt();
        for i in 0..hidden {
            for j in 0..inputs {
                m.w1[(i, j)] = rng.random_range(-a1..a1);
            }
        }
        let a2 = 1.0 / (hidden as f64).sqrt();
        for i in 0..outputs {
            for j in 0..hidden {
                m.w2[(i, j)] = rng.random_range(-a2..a2) * output_scale;
            }
        }
        m
    }

    pub fn inputs(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        let (h, i, o) = (self.hidden(), self.inputs(), self.outputs());
        h * i + h + o * h + o
    }

    pub fn forward(&self, z: &DVector<f64>) -> (DVector<f64>, MlpCache) {
        assert_eq!(z.len(), self.inputs(), "feature length must match the network input");
        let pre = &self.w1 * z + &self.b1;
        let hidden = pre.map(|a| a.max(0.0));
        let out = &self.w2 * &hidden + &self.b2;
        (
            out,
            MlpCache {
                input: z.clone(),
                pre,
                hidden,
            },
        )
    }

    /// Reverse pass for upstream `∂ℓ/∂η`; parameter gradient uses the flat
    /// layout of [`Mlp::to_flat`].
    pub fn backward(&self, cache: &MlpCache, upstream: &DVector<f64>) -> MlpGrad {
        assert_eq!(
            cache.hidden.len(),
            self.hidden(),
            "cache does not belong to this network"
        );
        let (h, i, o) = (self.hidden(), self.inputs(), self.outputs());
        let g_hidden = self.w2.tr_mul(upstream);
        let g_pre = g_hidden.zip_map(&cache.pre, |g, a| if a > 0.0 { g } else { 0.0 });
        let mut p = DVector::zeros(self.param_count());
        let mut at = 0;
        for r in 0..h {
            for c in 0..i {
                p[at] = g_pre[r] * cache.input[c];
                at += 1;
            }
        }
        for r in 0..h {
            p[at] = g_pre[r];
            at += 1;
        }
        for r in 0..o {
            for c in 0..h {
                p[at] = upstream[r] * cache.hidden[c];
                at += 1;
            }
        }
        for r in 0..o {
            p[at] = upstream[r];
            at += 1;
        }
        MlpGrad {
            params: p,
            input: self.w1.tr_mul(&g_pre),
        }
    }

    /// `[W1 row-major, b1, W2 row-major, b2]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for r in 0..self.hidden() {
            v.extend(self.w1.row(r).iter());
        }
        v.extend(self.b1.iter());
        for r in 0..self.outputs() {
            v.extend(self.w2.row(r).iter());
        }
        v.extend(self.b2.iter());
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_count());
        let (h, i, o) = (self.hidden(), self.inputs(), self.outputs());
        let mut it = v.iter().copied();
        for r in 0..h {
            for c in 0..i {
                self.w1[(r, c)] = it.next().unwrap();
            }
        }
        for r in 0..h {
            self.b1[r] = it.next().unwrap();
        }
        for r in 0..o {
            for c in 0..h {
                self.w2[(r, c)] = it.next().unwrap();
            }
        }
        for r in 0..o {
            self.b2[r] = it.next().unwrap();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], st: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), st.m.len());
    st.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(st.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(st.step as i32);
    for i in 0..params.len() {
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * grad[i];
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mh = st.m[i] / c1;
        let vh = st.v[i] / c2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    pub bounds: GainBounds,
    pub scales: FeatureScales,
    pub seed: u64,
    pub adam: AdamState,
}

/// Gains emitted at one update instant, with everything needed to
/// differentiate them.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub gains: GainVec,
    pub eta: GainVec,
    pub bound_diag: GainVec,
    pub cache: MlpCache,
}

impl Policy {
    /// Network initialized from `seed` with the output bias set so that the
    /// initial gains equal `warm_start` wherever the hidden layer is silent.
    pub fn new(
        bounds: GainBounds,
        scales: FeatureScales,
        hidden: usize,
        output_scale: f64,
        warm_start: &GainVec,
        seed: u64,
    ) -> Self {
        let mut net = Mlp::init(FEATURE_DIM, hidden, GAIN_DIM, output_scale, seed);
        let eta0 = unbound_gains(warm_start, &bounds);
        net.b2 = DVector::from_column_slice(eta0.as_slice());
        let n = net.param_count();
        Self {
            net,
            bounds,
            scales,
            seed,
            adam: AdamState::new(n),
        }
    }

    pub fn evaluate(&self, xhat: &ObserverState, task: &Task, t: f64) -> PolicyOutput {
        let z = build_features(xhat, task, t, &self.scales);
        let (out, cache) = self.net.forward(&z);
        let eta = GainVec::from_column_slice(out.as_slice());
        let (gains, bound_diag) = bound_gains(&eta, &self.bounds);
        PolicyOutput {
            gains,
            eta,
            bound_diag,
            cache,
        }
    }

    /// Backpropagates a gain gradient: returns the parameter gradient and
    /// the gradient on the estimate tangent through the features.
    pub fn backward(
        &self,
        out: &PolicyOutput,
        xhat: &ObserverState,
        g_gains: &GainVec,
    ) -> (DVector<f64>, nalgebra::SVector<f64, EST_DIM>) {
        let up = DVector::from_column_slice(g_gains.component_mul(&out.bound_diag).as_slice());
        let g = self.net.backward(&out.cache, &up);
        let fj = feature_jacobian(xhat, &self.scales);
        let gz = g.input.rows(0, ESTIMATE_FEATURES).into_owned();
        let gx = fj.tr_mul(&nalgebra::SVector::<f64, ESTIMATE_FEATURES>::from_column_slice(
            gz.as_slice(),
        ));
        (g.params, gx)
    }

    pub fn apply_gradient(&mut self, grad: &[f64], cfg: &AdamConfig) {
        let mut flat = self.net.to_flat();
        adam_step(&mut flat, grad, &mut self.adam, cfg);
        self.net.set_flat(&flat);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub bounds_min: Vec<f64>,
    pub bounds_max: Vec<f64>,
    pub scales: FeatureScales,
    pub seed: u64,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "gain-policy-v1";

impl Checkpoint {
    pub fn from_policy(p: &Policy) -> Self {
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                inputs: p.net.inputs(),
                hidden: p.net.hidden(),
                outputs: p.net.outputs(),
                bounds_min: p.bounds.min.iter().copied().collect(),
                bounds_max: p.bounds.max.iter().copied().collect(),
                scales: p.scales,
                seed: p.seed,
                step_count: p.adam.step,
            },
            weights: p.net.to_flat(),
            adam_m: p.adam.m.clone(),
            adam_v: p.adam.v.clone(),
        }
    }

    pub fn into_policy(self) -> Result<Policy> {
        let h = &self.header;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", h.format)));
        }
        if h.inputs != FEATURE_DIM || h.outputs != GAIN_DIM || h.hidden == 0 {
            return Err(Error::Checkpoint(format!(
                "unsupported shape {}x{}x{}",
                h.inputs, h.hidden, h.outputs
            )));
        }
        let mut net = Mlp::zeros(h.inputs, h.hidden, h.outputs);
        let n = net.param_count();
        for (name, len) in [
            ("weights", self.weights.len()),
            ("adam_m", self.adam_m.len()),
            ("adam_v", self.adam_v.len()),
        ] {
            if len != n {
                return Err(Error::Checkpoint(format!("{name} has {len} entries, expected {n}")));
            }
        }
        if h.bounds_min.len() != GAIN_DIM || h.bounds_max.len() != GAIN_DIM {
            return Err(Error::Checkpoint("bounds must have 18 entries".into()));
        }
        net.set_flat(&self.weights);
        let bounds = GainBounds::new(
            GainVec::from_column_slice(&h.bounds_min),
            GainVec::from_column_slice(&h.bounds_max),
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Policy {
            net,
            bounds,
            scales: h.scales,
            seed: h.seed,
            adam: AdamState {
                m: self.adam_m,
                v: self.adam_v,
                step: h.step_count,
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Policy> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s)?.into_policy()
    }
}
