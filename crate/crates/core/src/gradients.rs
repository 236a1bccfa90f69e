//! Trajectory-gradient engines over a linearized closed loop.
//!
//! A closed loop is the triple
//!
//! ```text
//! u_k     = h(x̂_k; Θ_k)
//! x_{k+1} = f(x_k, u_k)
//! x̂_{k+1} = o(x̂_k, x_k, u_k; Θ_k)
//! J       = Σ_k ℓ(x_k, x̂_k, u_k)
//! ```
//!
//! with `Θ_k` held over windows of `stride` steps. Every engine consumes the
//! same per-step [`Stage`] linearizations, so they differ only in how the
//! chain rule is ordered. Controller and observer gain Jacobians share one
//! gain axis of width `NG` (columns a block does not depend on are zero).

use nalgebra::{Const, DMatrix, DVector, Dyn, OMatrix, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::gains::{GainBounds, GainVec, CONTROLLER_GAINS, GAIN_DIM};

/// Per-step Jacobians and loss gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<const NX: usize, const NE: usize, const NU: usize, const NG: usize> {
    pub f_x: SMatrix<f64, NX, NX>,
    pub f_u: SMatrix<f64, NX, NU>,
    pub o_xhat: SMatrix<f64, NE, NE>,
    pub o_x: SMatrix<f64, NE, NX>,
    pub o_u: SMatrix<f64, NE, NU>,
    pub o_g: SMatrix<f64, NE, NG>,
    pub h_xhat: SMatrix<f64, NU, NE>,
    pub h_g: SMatrix<f64, NU, NG>,
    pub l_x: SVector<f64, NX>,
    pub l_xhat: SVector<f64, NE>,
    pub l_u: SVector<f64, NU>,
}

impl<const NX: usize, const NE: usize, const NU: usize, const NG: usize> Stage<NX, NE, NU, NG> {
    pub fn zeros() -> Self {
        Self {
            f_x: SMatrix::zeros(),
            f_u: SMatrix::zeros(),
            o_xhat: SMatrix::zeros(),
            o_x: SMatrix::zeros(),
            o_u: SMatrix::zeros(),
            o_g: SMatrix::zeros(),
            h_xhat: SMatrix::zeros(),
            h_g: SMatrix::zeros(),
            l_x: SVector::zeros(),
            l_xhat: SVector::zeros(),
            l_u: SVector::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainMode {
    Fixed,
    Adaptive,
}

/// Gains per hold window. In fixed mode a single block covers the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTrajectory {
    pub mode: GainMode,
    pub stride: usize,
    pub horizon: usize,
    pub blocks: Vec<GainVec>,
}

pub fn window_count(horizon: usize, stride: usize) -> usize {
    horizon.div_ceil(stride)
}

impl GainTrajectory {
    pub fn fixed(gains: GainVec, horizon: usize, stride: usize) -> Self {
        Self {
            mode: GainMode::Fixed,
            stride,
            horizon,
            blocks: vec![gains],
        }
    }

    /// Every window starts at `gains`.
    pub fn adaptive(gains: GainVec, horizon: usize, stride: usize) -> Self {
        Self {
            mode: GainMode::Adaptive,
            stride,
            horizon,
            blocks: vec![gains; window_count(horizon, stride)],
        }
    }

    pub fn windows(&self) -> usize {
        window_count(self.horizon, self.stride)
    }

    pub fn window(&self, w: usize) -> &GainVec {
        match self.mode {
            GainMode::Fixed => &self.blocks[0],
            GainMode::Adaptive => &self.blocks[w],
        }
    }

    pub fn at_step(&self, k: usize) -> &GainVec {
        self.window(k / self.stride)
    }

    pub fn validate(&self, bounds: &GainBounds) -> Result<()> {
        if self.stride == 0 || self.horizon == 0 {
            return Err(Error::InvalidParams("stride and horizon must be positive".into()));
        }
        let expected = match self.mode {
            GainMode::Fixed => 1,
            GainMode::Adaptive => self.windows(),
        };
        if self.blocks.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: self.blocks.len(),
            });
        }
        if let Some(i) = self.blocks.iter().position(|g| !bounds.contains(g)) {
            return Err(Error::InvalidParams(format!("gain block {i} outside bounds")));
        }
        Ok(())
    }
}

/// Costates; `lambda_x[N]` and `lambda_xhat[N]` are the zero terminal values.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointBundle<const NX: usize, const NE: usize, const NU: usize> {
    pub lambda_x: Vec<SVector<f64, NX>>,
    pub lambda_xhat: Vec<SVector<f64, NE>>,
    pub lambda_u: Vec<SVector<f64, NU>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult<const NX: usize, const NE: usize, const NU: usize, const NG: usize> {
    /// `(∂h/∂Θ)ᵀλ_u,k + (∂o/∂Θ)ᵀλ_x̂,k+1`
    pub per_step: Vec<SVector<f64, NG>>,
    /// `per_step` summed over each hold window.
    pub per_window: Vec<SVector<f64, NG>>,
    /// Gradient with every window tied to one gain vector.
    pub total: SVector<f64, NG>,
    pub bundle: AdjointBundle<NX, NE, NU>,
}

/// Extra costate injected at a window start when the window's gains are
/// themselves a function of the estimate there (gain scheduling). Receives
/// the window index and the window gradient, returns `(∂Θ_w/∂x̂)ᵀ g_w`.
pub type WindowCoupling<'a, const NE: usize, const NG: usize> =
    &'a (dyn Fn(usize, &SVector<f64, NG>) -> SVector<f64, NE> + Sync);

/// Single backward pass from zero terminal costates.
pub fn adjoint_sweep<const NX: usize, const NE: usize, const NU: usize, const NG: usize>(
    stages: &[Stage<NX, NE, NU, NG>],
    stride: usize,
    coupling: Option<WindowCoupling<'_, NE, NG>>,
) -> AdjointResult<NX, NE, NU, NG> {
    let n = stages.len();
    let mut lambda_x = vec![SVector::<f64, NX>::zeros(); n + 1];
    let mut lambda_xhat = vec![SVector::<f64, NE>::zeros(); n + 1];
    let mut lambda_u = vec![SVector::<f64, NU>::zeros(); n];
    let mut per_step = vec![SVector::<f64, NG>::zeros(); n];
    let mut per_window = vec![SVector::<f64, NG>::zeros(); window_count(n, stride.max(1))];

    for k in (0..n).rev() {
        let s = &stages[k];
        let lx1 = lambda_x[k + 1];
        let le1 = lambda_xhat[k + 1];
        let lu = s.l_u + s.f_u.tr_mul(&lx1) + s.o_u.tr_mul(&le1);
        let g = s.h_g.tr_mul(&lu) + s.o_g.tr_mul(&le1);
        let mut le = s.l_xhat + s.o_xhat.tr_mul(&le1) + s.h_xhat.tr_mul(&lu);
        let lx = s.l_x + s.f_x.tr_mul(&lx1) + s.o_x.tr_mul(&le1);

        let w = k / stride;
        per_window[w] += g;
        if k % stride == 0 {
            if let Some(c) = coupling {
                le += c(w, &per_window[w]);
            }
        }
        per_step[k] = g;
        lambda_u[k] = lu;
        lambda_xhat[k] = le;
        lambda_x[k] = lx;
    }

    let total = per_window.iter().fold(SVector::zeros(), |a, g| a + g);
    AdjointResult {
        per_step,
        per_window,
        total,
        bundle: AdjointBundle {
            lambda_x,
            lambda_xhat,
            lambda_u,
        },
    }
}

/// Linear map from the active parameters to the gain axis, `Θ = L·p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lift {
    pub matrix: DMatrix<f64>,
}

impl Lift {
    pub fn identity(ng: usize) -> Self {
        Self {
            matrix: DMatrix::identity(ng, ng),
        }
    }

    /// Controller gains only; observer gains held.
    pub fn controller_only() -> Self {
        let mut m = DMatrix::zeros(GAIN_DIM, CONTROLLER_GAINS);
        for i in 0..CONTROLLER_GAINS {
            m[(i, i)] = 1.0;
        }
        Self { matrix: m }
    }

    /// `copies` duplicated parameter sets whose mean is the gain vector.
    /// Inflates the parameter dimension without changing the closed loop.
    pub fn inflated(ng: usize, copies: usize) -> Self {
        let mut m = DMatrix::zeros(ng, ng * copies);
        for c in 0..copies {
            for i in 0..ng {
                m[(i, c * ng + i)] = 1.0 / copies as f64;
            }
        }
        Self { matrix: m }
    }

    pub fn params(&self) -> usize {
        self.matrix.ncols()
    }

    /// Gradient on the active parameters given the gradient on the gain axis.
    pub fn pull_back(&self, g: &[f64]) -> DVector<f64> {
        self.matrix.tr_mul(&DVector::from_column_slice(g))
    }
}

/// Forward sensitivity `S = [S_x; S_x̂]` with columns on the active parameters.
struct Sensitivity<const NX: usize, const NE: usize> {
    sx: OMatrix<f64, Const<NX>, Dyn>,
    se: OMatrix<f64, Const<NE>, Dyn>,
}

impl<const NX: usize, const NE: usize> Sensitivity<NX, NE> {
    fn zeros(p: usize) -> Self {
        Self {
            sx: OMatrix::<f64, Const<NX>, Dyn>::zeros(p),
            se: OMatrix::<f64, Const<NE>, Dyn>::zeros(p),
        }
    }

    /// Loss gradient contribution of this step and the propagated state.
    /// `lift` is `None` for steps whose gains are not active parameters.
    fn step<const NU: usize, const NG: usize>(
        &mut self,
        s: &Stage<NX, NE, NU, NG>,
        lift: Option<&DMatrix<f64>>,
    ) -> DVector<f64> {
        let mut su = &s.h_xhat * &self.se;
        let mut direct_e = None;
        if let Some(l) = lift {
            su += &s.h_g * l;
            direct_e = Some(&s.o_g * l);
        }
        let grad = self.sx.tr_mul(&s.l_x) + self.se.tr_mul(&s.l_xhat) + su.tr_mul(&s.l_u);
        let sx = &s.f_x * &self.sx + &s.f_u * &su;
        let mut se = &s.o_x * &self.sx + &s.o_xhat * &self.se + &s.o_u * &su;
        if let Some(d) = direct_e {
            se += d;
        }
        self.sx = sx;
        self.se = se;
        DVector::from_column_slice(grad.as_slice())
    }
}

/// Gradient of `J` with the same gains applied at every step.
pub fn forward_sens_fixed<const NX: usize, const NE: usize, const NU: usize, const NG: usize>(
    stages: &[Stage<NX, NE, NU, NG>],
    lift: &Lift,
) -> DVector<f64> {
    assert_eq!(lift.matrix.nrows(), NG, "lift rows must match the gain axis");
    let mut sens = Sensitivity::<NX, NE>::zeros(lift.params());
    let mut grad = DVector::zeros(lift.params());
    for s in stages {
        grad += sens.step(s, Some(&lift.matrix));
    }
    grad
}

/// Cost-to-go gradient per hold window: sensitivity restarted from zero at
/// every window start and propagated to the horizon. Quadratic in N.
pub fn forward_sens_ctg<const NX: usize, const NE: usize, const NU: usize, const NG: usize>(
    stages: &[Stage<NX, NE, NU, NG>],
    stride: usize,
) -> Vec<SVector<f64, NG>> {
    let n = stages.len();
    let id = DMatrix::<f64>::identity(NG, NG);
    (0..window_count(n, stride))
        .map(|w| {
            let start = w * stride;
            let end = (start + stride).min(n);
            let mut sens = Sensitivity::<NX, NE>::zeros(NG);
            let mut grad = DVector::<f64>::zeros(NG);
            for (k, s) in stages.iter().enumerate().skip(start) {
                let lift = (k < end).then_some(&id);
                grad += sens.step(s, lift);
            }
            SVector::from_column_slice(grad.as_slice())
        })
        .collect()
}

/// Single tied-parameter sensitivity pass whose step-`k` loss derivative is
/// credited to the window containing `k`.
///
/// This attributes to each window the influence of all past gains on its own
/// losses, not the influence of its gains on future losses, so it is not a
/// cost-to-go gradient. Only the sum over windows is meaningful: it equals
/// the fixed-gain gradient.
pub fn forward_sens_history<const NX: usize, const NE: usize, const NU: usize, const NG: usize>(
    stages: &[Stage<NX, NE, NU, NG>],
    stride: usize,
) -> Vec<SVector<f64, NG>> {
    let n = stages.len();
    let id = DMatrix::<f64>::identity(NG, NG);
    let mut sens = Sensitivity::<NX, NE>::zeros(NG);
    let mut out = vec![SVector::<f64, NG>::zeros(); window_count(n, stride)];
    for (k, s) in stages.iter().enumerate() {
        let g = sens.step(s, Some(&id));
        out[k / stride] += SVector::<f64, NG>::from_column_slice(g.as_slice());
    }
    out
}

/// Cosine similarity of two flattened gradient sets.
pub fn cosine_similarity<const NG: usize>(a: &[SVector<f64, NG>], b: &[SVector<f64, NG>]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.dot(y)).sum();
    let na: f64 = a.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// `‖a−b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type S = Stage<3, 2, 1, 2>;

    fn random_stages(n: usize, seed: u64) -> Vec<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || rng.random_range(-0.6..0.6);
        (0..n)
            .map(|_| S {
                f_x: SMatrix::from_fn(|_, _| r()),
                f_u: SMatrix::from_fn(|_, _| r()),
                o_xhat: SMatrix::from_fn(|_, _| r()),
                o_x: SMatrix::from_fn(|_, _| r()),
                o_u: SMatrix::from_fn(|_, _| r()),
                o_g: SMatrix::from_fn(|_, _| r()),
                h_xhat: SMatrix::from_fn(|_, _| r()),
                h_g: SMatrix::from_fn(|_, _| r()),
                l_x: SVector::from_fn(|_, _| r()),
                l_xhat: SVector::from_fn(|_, _| r()),
                l_u: SVector::from_fn(|_, _| r()),
            })
            .collect()
    }

    #[test]
    fn adjoint_matches_forward_on_random_linear_systems() {
        for seed in 0..10 {
            let st = random_stages(40, seed);
            let adj = adjoint_sweep(&st, 5, None);
            let fwd = forward_sens_fixed(&st, &Lift::identity(2));
            assert!(relative_error(adj.total.as_slice(), fwd.as_slice()) < 1e-12);
            let ctg = forward_sens_ctg(&st, 5);
            for (a, c) in adj.per_window.iter().zip(&ctg) {
                assert!(relative_error(a.as_slice(), c.as_slice()) < 1e-10);
            }
        }
    }

    #[test]
    fn history_sum_equals_fixed_gradient() {
        let st = random_stages(30, 3);
        let h = forward_sens_history(&st, 5);
        let sum = h.iter().fold(SVector::<f64, 2>::zeros(), |a, g| a + g);
        let fwd = forward_sens_fixed(&st, &Lift::identity(2));
        assert!(relative_error(sum.as_slice(), fwd.as_slice()) < 1e-12);
    }

    #[test]
    fn single_window_ctg_is_fixed_gradient() {
        let st = random_stages(25, 4);
        let ctg = forward_sens_ctg(&st, 25);
        let fwd = forward_sens_fixed(&st, &Lift::identity(2));
        assert_eq!(ctg.len(), 1);
        assert!(relative_error(ctg[0].as_slice(), fwd.as_slice()) < 1e-12);
    }

    #[test]
    fn zero_objective_gives_zero_gradients() {
        let mut st = random_stages(20, 6);
        for s in &mut st {
            s.l_x = SVector::zeros();
            s.l_xhat = SVector::zeros();
            s.l_u = SVector::zeros();
        }
        let adj = adjoint_sweep(&st, 4, None);
        assert_eq!(adj.total.norm(), 0.0);
        assert!(adj.bundle.lambda_x.iter().all(|l| l.norm() == 0.0));
        assert!(forward_sens_fixed(&st, &Lift::identity(2)).norm() == 0.0);
    }

    #[test]
    fn inflated_lift_averages_copies() {
        let st = random_stages(20, 7);
        let base = forward_sens_fixed(&st, &Lift::identity(2));
        let lift = Lift::inflated(2, 10);
        let infl = forward_sens_fixed(&st, &lift);
        assert_eq!(infl.len(), 20);
        for c in 0..10 {
            for i in 0..2 {
                assert!((infl[2 * c + i] - base[i] / 10.0).abs() < 1e-14);
            }
        }
        let adj = adjoint_sweep(&st, 5, None);
        let pulled = lift.pull_back(adj.total.as_slice());
        assert!(relative_error(pulled.as_slice(), infl.as_slice()) < 1e-12);
    }

    #[test]
    fn controller_only_lift_drops_observer_columns() {
        let l = Lift::controller_only();
        assert_eq!(l.params(), CONTROLLER_GAINS);
        let g: Vec<f64> = (0..GAIN_DIM).map(|i| i as f64).collect();
        let p = l.pull_back(&g);
        assert_eq!(p.as_slice(), &g[..CONTROLLER_GAINS]);
    }

    #[test]
    fn terminal_costates_are_zero() {
        let st = random_stages(10, 8);
        let adj = adjoint_sweep(&st, 2, None);
        assert_eq!(adj.bundle.lambda_x[10].norm(), 0.0);
        assert_eq!(adj.bundle.lambda_xhat[10].norm(), 0.0);
    }

    #[test]
    fn gain_trajectory_indexing() {
        let g = crate::gains::nominal_gains();
        let t = GainTrajectory::adaptive(g, 12, 5);
        assert_eq!(t.windows(), 3);
        assert_eq!(t.at_step(11), &t.blocks[2]);
        assert!(t.validate(&GainBounds::default()).is_ok());
        let f = GainTrajectory::fixed(g, 12, 5);
        assert_eq!(f.at_step(11), &g);
    }
}
