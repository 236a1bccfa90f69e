//! Brute-force references for the analytic engines.
//!
//! [`fd_gradient`] differentiates any scalar functional by central
//! differences. The toy loop below is small enough to differentiate by hand:
//!
//! ```text
//! u_k     = −θ_k x̂_k
//! x_{k+1} = a x_k + b u_k
//! x̂_{k+1} = a x̂_k + b u_k + ψ_k (x_k − x̂_k)
//! ℓ_k     = q x_k² + r u_k² + s (x̂_k − x_k)²
//! ```
//!
//! For two steps, write `e_k = x̂_k − x_k`. Then `∂ℓ₁/∂x₁ = 2q x₁ − 2s e₁`,
//! and through `u₁` the total derivative in `x̂₁` is
//! `D₁ = 2s e₁ − 2r θ₁ u₁`. The gain gradients are
//!
//! ```text
//! ∂J/∂θ₁ = −2r u₁ x̂₁
//! ∂J/∂ψ₁ = 0                          (ψ₁ only moves x̂₂)
//! ∂J/∂ψ₀ = D₁ (x₀ − x̂₀)
//! ∂J/∂θ₀ = −x̂₀ (2r u₀ + b ∂ℓ₁/∂x₁ + b D₁)
//! ```
//!
//! The costates match term by term: `λ_u,0 = 2r u₀ + b λ_x,1 + b λ_x̂,1`,
//! with `λ_x,1 = ∂ℓ₁/∂x₁` and `λ_x̂,1 = D₁`. The cross term in the costate
//! of the true state is `ψ₀ λ_x̂,1`, so it vanishes when `ψ₀ = 0`.

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;

use crate::gradients::Stage;

#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub grad: Vec<f64>,
    /// Coordinates where a probe produced a non-finite value; their entry
    /// in `grad` is NaN.
    pub skipped: Vec<usize>,
}

/// Central differences on every coordinate of `point`.
pub fn fd_gradient<F>(f: F, point: &[f64], eps: f64) -> FdGradient
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let grad: Vec<f64> = (0..point.len())
        .into_par_iter()
        .map(|i| {
            let mut p = point.to_vec();
            p[i] = point[i] + eps;
            let fp = f(&p);
            p[i] = point[i] - eps;
            let fm = f(&p);
            if fp.is_finite() && fm.is_finite() {
                (fp - fm) / (2.0 * eps)
            } else {
                f64::NAN
            }
        })
        .collect();
    let skipped = grad
        .iter()
        .enumerate()
        .filter(|(_, g)| g.is_nan())
        .map(|(i, _)| i)
        .collect();
    FdGradient { grad, skipped }
}

/// Central difference along `dir`.
pub fn fd_directional<F>(f: F, point: &[f64], dir: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let shifted = |s: f64| -> Vec<f64> { point.iter().zip(dir).map(|(p, d)| p + s * d).collect() };
    (f(&shifted(eps)) - f(&shifted(-eps))) / (2.0 * eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySystem {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub r: f64,
    pub s: f64,
}

impl Default for ToySystem {
    fn default() -> Self {
        Self {
            a: 1.1,
            b: 0.5,
            q: 1.0,
            r: 0.1,
            s: 0.5,
        }
    }
}

pub type ToyStage = Stage<1, 1, 1, 2>;

/// Per-step trace `(x_k, x̂_k, u_k)` and total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrace {
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub u: Vec<f64>,
    pub loss: f64,
}

impl ToySystem {
    /// `gains[k] = (θ_k, ψ_k)`.
    pub fn rollout(&self, x0: f64, xhat0: f64, gains: &[(f64, f64)]) -> ToyTrace {
        let (mut x, mut xh) = (x0, xhat0);
        let mut tr = ToyTrace {
            x: vec![],
            xhat: vec![],
            u: vec![],
            loss: 0.0,
        };
        for &(theta, psi) in gains {
            let u = -theta * xh;
            tr.loss += self.q * x * x + self.r * u * u + self.s * (xh - x).powi(2);
            tr.x.push(x);
            tr.xhat.push(xh);
            tr.u.push(u);
            let xn = self.a * x + self.b * u;
            xh = self.a * xh + self.b * u + psi * (x - xh);
            x = xn;
        }
        tr
    }

    pub fn stages(&self, x0: f64, xhat0: f64, gains: &[(f64, f64)]) -> Vec<ToyStage> {
        let tr = self.rollout(x0, xhat0, gains);
        gains
            .iter()
            .enumerate()
            .map(|(k, &(theta, psi))| {
                let (x, xh, u) = (tr.x[k], tr.xhat[k], tr.u[k]);
                let e = xh - x;
                Stage {
                    f_x: SMatrix::from_element(self.a),
                    f_u: SMatrix::from_element(self.b),
                    o_xhat: SMatrix::from_element(self.a - psi),
                    o_x: SMatrix::from_element(psi),
                    o_u: SMatrix::from_element(self.b),
                    o_g: SMatrix::from_row_slice(&[0.0, x - xh]),
                    h_xhat: SMatrix::from_element(-theta),
                    h_g: SMatrix::from_row_slice(&[-xh, 0.0]),
                    l_x: SVector::from_element(2.0 * self.q * x - 2.0 * self.s * e),
                    l_xhat: SVector::from_element(2.0 * self.s * e),
                    l_u: SVector::from_element(2.0 * self.r * u),
                }
            })
            .collect()
    }

    /// Closed-form per-step gradients of the two-step loss, ordered
    /// `[∂θ₀, ∂ψ₀, ∂θ₁, ∂ψ₁]`.
    pub fn two_step_gradient(&self, x0: f64, xhat0: f64, gains: [(f64, f64); 2]) -> [f64; 4] {
        let tr = self.rollout(x0, xhat0, &gains);
        let (x1, xh1, u0, u1) = (tr.x[1], tr.xhat[1], tr.u[0], tr.u[1]);
        let theta1 = gains[1].0;
        let e1 = xh1 - x1;
        let dl1_dx1 = 2.0 * self.q * x1 - 2.0 * self.s * e1;
        let d1 = 2.0 * self.s * e1 - 2.0 * self.r * theta1 * u1;
        [
            -xhat0 * (2.0 * self.r * u0 + self.b * dl1_dx1 + self.b * d1),
            d1 * (x0 - xhat0),
            -2.0 * self.r * u1 * xh1,
            0.0,
        ]
    }

    /// Closed-form costates at the first step: `(λ_u,0, λ_x̂,1, λ_x,1, λ_x,0)`.
    pub fn two_step_costates(&self, x0: f64, xhat0: f64, gains: [(f64, f64); 2]) -> (f64, f64, f64, f64) {
        let tr = self.rollout(x0, xhat0, &gains);
        let (x1, xh1, u0, u1) = (tr.x[1], tr.xhat[1], tr.u[0], tr.u[1]);
        let e1 = xh1 - x1;
        let lx1 = 2.0 * self.q * x1 - 2.0 * self.s * e1;
        let le1 = 2.0 * self.s * e1 - 2.0 * self.r * gains[1].0 * u1;
        let lu0 = 2.0 * self.r * u0 + self.b * lx1 + self.b * le1;
        let e0 = xhat0 - x0;
        let lx0 = 2.0 * self.q * x0 - 2.0 * self.s * e0 + self.a * lx1 + gains[0].1 * le1;
        (lu0, le1, lx1, lx0)
    }
}
