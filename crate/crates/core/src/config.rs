//! Experiment configuration file. Every key carries its unit in the name;
//! unknown keys are rejected and every section has defaults.

use std::path::{Path, PathBuf};

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::controller::ControllerLimits;
use crate::dynamics::{NoiseConfig, QuadParams, ATT, OMEGA, P, V};
use crate::error::{Error, Result};
use crate::gains::{join, ControllerGains, GainBounds, GainVec, ObserverGains};
use crate::loss::LossSpec;
use crate::observer::{DF, DTAU};
use crate::policy::FeatureScales;
use crate::reference::{sample_tasks, Task};
use crate::rollout::SimConfig;
use crate::trainer::{Perturbation, Suite, TrainConfig, TuneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadSection {
    pub mass_kg: f64,
    pub inertia_kgm2: [f64; 3],
    pub gravity_mps2: f64,
    pub dt_s: f64,
}

impl Default for QuadSection {
    fn default() -> Self {
        let p = QuadParams::default();
        Self {
            mass_kg: p.mass,
            inertia_kgm2: p.inertia.into(),
            gravity_mps2: p.gravity,
            dt_s: p.dt,
        }
    }
}

impl QuadSection {
    pub fn params(&self) -> QuadParams {
        QuadParams {
            mass: self.mass_kg,
            inertia: Vector3::from(self.inertia_kgm2),
            gravity: self.gravity_mps2,
            dt: self.dt_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub horizon_steps: usize,
    /// Steps per gain update (zero-order hold)
    pub stride_steps: usize,
    pub crash_radius_m: f64,
    /// Thrust ceiling; absent means four times hover thrust.
    pub max_thrust_n: Option<f64>,
    pub max_torque_nm: f64,
    pub sigma_p_m: f64,
    pub sigma_v_mps: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            horizon_steps: 1000,
            stride_steps: 5,
            crash_radius_m: 100.0,
            max_thrust_n: None,
            max_torque_nm: 5.0,
            sigma_p_m: 0.0,
            sigma_v_mps: 0.0,
        }
    }
}

/// Per-group diagonal weights of the stage loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
    pub rate: f64,
    pub est_position: f64,
    pub est_velocity: f64,
    pub est_attitude: f64,
    pub est_rate: f64,
    pub est_force: f64,
    pub est_torque: f64,
    pub control: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossSpec::default();
        Self {
            position: d.w_x[P],
            velocity: d.w_x[V],
            attitude: d.w_x[ATT],
            rate: d.w_x[OMEGA],
            est_position: d.w_xhat[P],
            est_velocity: d.w_xhat[V],
            est_attitude: d.w_xhat[ATT],
            est_rate: d.w_xhat[OMEGA],
            est_force: d.w_xhat[DF],
            est_torque: d.w_xhat[DTAU],
            control: d.lambda_u,
        }
    }
}

impl LossSection {
    pub fn spec(&self) -> LossSpec {
        let mut w_x = SVector::zeros();
        let mut w_xhat = SVector::zeros();
        for i in 0..3 {
            w_x[P + i] = self.position;
            w_x[V + i] = self.velocity;
            w_x[ATT + i] = self.attitude;
            w_x[OMEGA + i] = self.rate;
            w_xhat[P + i] = self.est_position;
            w_xhat[V + i] = self.est_velocity;
            w_xhat[ATT + i] = self.est_attitude;
            w_xhat[OMEGA + i] = self.est_rate;
            w_xhat[DF + i] = self.est_force;
            w_xhat[DTAU + i] = self.est_torque;
        }
        LossSpec {
            w_x,
            w_xhat,
            lambda_u: self.control,
        }
    }
}

/// `[min, max]` per gain group, applied to all three axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub kp: [f64; 2],
    pub kv: [f64; 2],
    pub kr: [f64; 2],
    pub komega: [f64; 2],
    pub omega_t_radps: [f64; 2],
    pub omega_r_radps: [f64; 2],
}

impl Default for BoundsSection {
    fn default() -> Self {
        let b = GainBounds::default();
        let r = |i: usize| [b.min[3 * i], b.max[3 * i]];
        Self {
            kp: r(0),
            kv: r(1),
            kr: r(2),
            komega: r(3),
            omega_t_radps: r(4),
            omega_r_radps: r(5),
        }
    }
}

impl BoundsSection {
    pub fn bounds(&self) -> Result<GainBounds> {
        let groups = [
            self.kp,
            self.kv,
            self.kr,
            self.komega,
            self.omega_t_radps,
            self.omega_r_radps,
        ];
        let mut min = GainVec::zeros();
        let mut max = GainVec::zeros();
        for (g, [lo, hi]) in groups.iter().enumerate() {
            for i in 0..3 {
                min[3 * g + i] = *lo;
                max[3 * g + i] = *hi;
            }
        }
        GainBounds::new(min, max)
    }
}

/// Per-axis initial gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainsSection {
    pub kp: [f64; 3],
    pub kv: [f64; 3],
    pub kr: [f64; 3],
    pub komega: [f64; 3],
    pub omega_t_radps: [f64; 3],
    pub omega_r_radps: [f64; 3],
}

impl Default for GainsSection {
    fn default() -> Self {
        let g = crate::gains::nominal_gains();
        let r = |i: usize| [g[3 * i], g[3 * i + 1], g[3 * i + 2]];
        Self {
            kp: r(0),
            kv: r(1),
            kr: r(2),
            komega: r(3),
            omega_t_radps: r(4),
            omega_r_radps: r(5),
        }
    }
}

impl GainsSection {
    pub fn gains(&self) -> GainVec {
        join(
            &ControllerGains {
                k_p: self.kp.into(),
                k_v: self.kv.into(),
                k_r: self.kr.into(),
                k_omega: self.komega.into(),
            },
            &ObserverGains {
                omega_t: self.omega_t_radps.into(),
                omega_r: self.omega_r_radps.into(),
            },
        )
    }
}

/// How the fixed-gain baseline is tuned before policy comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub tasks: usize,
    pub iterations: usize,
    pub task_seed: u64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            tasks: 16,
            iterations: 300,
            task_seed: 12345,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub horizons_steps: Vec<usize>,
    pub repetitions: usize,
    /// Parameter inflation factor for the dimension study
    pub copies: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            horizons_steps: vec![100, 200, 400, 800],
            repetitions: 9,
            copies: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub horizon_steps: usize,
    pub samples: usize,
    pub fd_step: f64,
    pub threshold: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            horizon_steps: 30,
            samples: 3,
            fd_step: 1e-6,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub quad: QuadSection,
    pub sim: SimSection,
    pub loss: LossSection,
    pub bounds: BoundsSection,
    pub initial_gains: GainsSection,
    pub features: FeatureScales,
    pub tune: TuneConfig,
    pub train: TrainConfig,
    pub baseline: BaselineSection,
    pub bench: BenchSection,
    pub eval: Suite,
    pub perturbation: Perturbation,
    pub gradcheck: GradcheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            quad: QuadSection::default(),
            sim: SimSection::default(),
            loss: LossSection::default(),
            bounds: BoundsSection::default(),
            initial_gains: GainsSection::default(),
            features: FeatureScales::default(),
            tune: TuneConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineSection::default(),
            bench: BenchSection::default(),
            eval: Suite::default(),
            perturbation: Perturbation::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sim(&self) -> Result<SimConfig> {
        let params = self.quad.params();
        let mut limits = ControllerLimits::for_params(&params);
        if let Some(t) = self.sim.max_thrust_n {
            limits.max_thrust = t;
        }
        limits.max_torque = self.sim.max_torque_nm;
        let sim = SimConfig {
            model: params,
            plant: params,
            limits,
            noise: NoiseConfig {
                sigma_p_m: self.sim.sigma_p_m,
                sigma_v_mps: self.sim.sigma_v_mps,
            },
            actuator_tau_s: 0.0,
            stride: self.sim.stride_steps,
            horizon: self.sim.horizon_steps,
            loss: self.loss.spec(),
            bounds: self.bounds.bounds()?,
            crash_radius_m: self.sim.crash_radius_m,
        };
        sim.validate()?;
        Ok(sim)
    }

    pub fn initial(&self) -> Result<GainVec> {
        let g = self.initial_gains.gains();
        if !self.bounds.bounds()?.contains(&g) {
            return Err(Error::Config("initial gains lie outside the gain bounds".into()));
        }
        Ok(g)
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn baseline_tasks(&self) -> Result<Vec<Task>> {
        sample_tasks(self.baseline.task_seed, self.baseline.tasks, &self.train.tasks)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim()?;
        self.initial()?;
        let positive = [
            ("sim.horizon_steps", self.sim.horizon_steps),
            ("train.batch", self.train.batch),
            ("train.hidden", self.train.hidden),
            ("baseline.tasks", self.baseline.tasks),
            ("bench.repetitions", self.bench.repetitions),
            ("bench.copies", self.bench.copies),
            ("gradcheck.horizon_steps", self.gradcheck.horizon_steps),
            ("eval.repeats", self.eval.repeats),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tune.adam.lr >= 0.0 && self.train.adam.lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(self.gradcheck.fd_step > 0.0 && self.gradcheck.threshold > 0.0) {
            return Err(Error::Config("gradcheck step and threshold must be positive".into()));
        }
        if self.bench.horizons_steps.iter().any(|&n| n == 0) {
            return Err(Error::Config("bench horizons must be positive".into()));
        }
        Ok(())
    }
}
