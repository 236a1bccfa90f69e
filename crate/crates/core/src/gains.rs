//! The joint gain vector `[k_p, k_v, k_R, k_Ω, ω_t, ω_r]` and its safety box.

use nalgebra::{SVector, Vector3};

use crate::error::{Error, Result};

pub const CONTROLLER_GAINS: usize = 12;
pub const OBSERVER_GAINS: usize = 6;
pub const GAIN_DIM: usize = CONTROLLER_GAINS + OBSERVER_GAINS;

pub type GainVec = SVector<f64, GAIN_DIM>;

pub const GAIN_NAMES: [&str; GAIN_DIM] = [
    "kp_x",
    "kp_y",
    "kp_z",
    "kv_x",
    "kv_y",
    "kv_z",
    "kR_x",
    "kR_y",
    "kR_z",
    "kOmega_x",
    "kOmega_y",
    "kOmega_z",
    "omega_t_x",
    "omega_t_y",
    "omega_t_z",
    "omega_r_x",
    "omega_r_y",
    "omega_r_z",
];

/// Axis-wise geometric-controller gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerGains {
    pub k_p: Vector3<f64>,
    pub k_v: Vector3<f64>,
    pub k_r: Vector3<f64>,
    pub k_omega: Vector3<f64>,
}

/// Observer bandwidths, rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverGains {
    pub omega_t: Vector3<f64>,
    pub omega_r: Vector3<f64>,
}

impl ControllerGains {
    pub fn from_slice(g: &[f64]) -> Self {
        let v = |i: usize| Vector3::new(g[i], g[i + 1], g[i + 2]);
        Self {
            k_p: v(0),
            k_v: v(3),
            k_r: v(6),
            k_omega: v(9),
        }
    }
}

impl ObserverGains {
    pub fn from_slice(g: &[f64]) -> Self {
        Self {
            omega_t: Vector3::new(g[0], g[1], g[2]),
            omega_r: Vector3::new(g[3], g[4], g[5]),
        }
    }

    pub fn zero() -> Self {
        Self {
            omega_t: Vector3::zeros(),
            omega_r: Vector3::zeros(),
        }
    }
}

pub fn split(g: &GainVec) -> (ControllerGains, ObserverGains) {
    (
        ControllerGains::from_slice(&g.as_slice()[..CONTROLLER_GAINS]),
        ObserverGains::from_slice(&g.as_slice()[CONTROLLER_GAINS..]),
    )
}

pub fn join(c: &ControllerGains, o: &ObserverGains) -> GainVec {
    let mut g = GainVec::zeros();
    for (i, v) in [c.k_p, c.k_v, c.k_r, c.k_omega, o.omega_t, o.omega_r]
        .iter()
        .enumerate()
    {
        g.fixed_rows_mut::<3>(3 * i).copy_from(v);
    }
    g
}

/// Stable hand-tuned gains for the default airframe.
pub fn nominal_gains() -> GainVec {
    join(
        &ControllerGains {
            k_p: Vector3::new(6.0, 6.0, 8.0),
            k_v: Vector3::new(4.0, 4.0, 5.0),
            k_r: Vector3::new(6.0, 6.0, 4.0),
            k_omega: Vector3::new(1.5, 1.5, 1.0),
        },
        &ObserverGains {
            omega_t: Vector3::new(5.0, 5.0, 5.0),
            omega_r: Vector3::new(8.0, 8.0, 8.0),
        },
    )
}

/// Element-wise box `[min, max]` on the gain vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainBounds {
    pub min: GainVec,
    pub max: GainVec,
}

impl Default for GainBounds {
    fn default() -> Self {
        let mut min = GainVec::zeros();
        let mut max = GainVec::zeros();
        let ranges = [
            (0.5, 24.0),
            (0.5, 24.0),
            (0.5, 30.0),
            (0.1, 8.0),
            (1.0, 50.0),
            (1.0, 50.0),
        ];
        for (block, (lo, hi)) in ranges.iter().enumerate() {
            for i in 0..3 {
                min[3 * block + i] = *lo;
                max[3 * block + i] = *hi;
            }
        }
        Self { min, max }
    }
}

impl GainBounds {
    pub fn new(min: GainVec, max: GainVec) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..GAIN_DIM {
            if !(self.min[i] > 0.0 && self.min[i] < self.max[i] && self.max[i].is_finite()) {
                return Err(Error::InvalidParams(format!(
                    "gain bound {} must satisfy 0 < min < max, got [{}, {}]",
                    GAIN_NAMES[i], self.min[i], self.max[i]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, g: &GainVec) -> bool {
        g.iter().enumerate().all(|(i, &x)| x >= self.min[i] && x <= self.max[i])
    }

    pub fn project(&self, g: &GainVec) -> GainVec {
        GainVec::from_fn(|i, _| g[i].clamp(self.min[i], self.max[i]))
    }

    pub fn midpoint(&self) -> GainVec {
        (self.min + self.max) * 0.5
    }
}
