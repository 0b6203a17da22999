//! Model-based ground truth: exact stationary cost and gradient, closed-form
//! moments at a finite horizon, the projected-gradient stationarity measure
//! and a small scalar example on which the cost is not convex.

use crate::error::Result;
use crate::linmath::{solve_lyapunov_continuous, symmetrize, van_loan, Matrix, Vector};
use crate::plant::{build_closed_loop, AugmentedClosedLoop, InitialState, LtiPlant, PiGain};
use crate::tuner::{project_onto_omega, ConstraintBox};

/// Stationary cost `f(K)`, its gradient and the two Lyapunov solutions.
#[derive(Debug, Clone)]
pub struct CostGradient {
    pub value: f64,
    /// `m x 2p`, laid out like `[K_P K_I]`.
    pub grad: Matrix,
    /// Stationary covariance: `A_K X + X A_K^T + W~_K = 0`.
    pub x: Matrix,
    /// Cost-to-go: `A_K^T Y + Y A_K + Q' = 0`.
    pub y: Matrix,
}

/// `f(K) = tr(Q' X) + tr(Q1 V)`. Fails with a stability error when the gain
/// does not stabilize the augmented loop.
pub fn analytic_cost(cl: &AugmentedClosedLoop) -> Result<f64> {
    let x = solve_lyapunov_continuous(&cl.abar_k, &cl.wtilde_k)?;
    Ok((&cl.qprime * x).trace() + (&cl.q1 * &cl.v).trace())
}

/// Exact cost and gradient.
///
/// The gradient is `-2 B̄^T Y X C̄^T + 2 B̄^T Y (I1 + B̄ K_P) V [I 0]`, where
/// `I1 = [0; I_p]` selects the integrator rows. The second term comes from
/// the dependence of `W~_K` on `K_P`.
pub fn analytic_gradient(cl: &AugmentedClosedLoop) -> Result<CostGradient> {
    let x = solve_lyapunov_continuous(&cl.abar_k, &cl.wtilde_k)?;
    let y = solve_lyapunov_continuous(&cl.abar_k.transpose(), &cl.qprime)?;
    let value = (&cl.qprime * &x).trace() + (&cl.q1 * &cl.v).trace();
    let (n, p) = (cl.n(), cl.p());
    let bty = cl.bbar.transpose() * &y;
    let mut grad = &bty * &x * cl.cbar.transpose() * -2.0;
    let mut g = &cl.bbar * &cl.gain.kp;
    for i in 0..p {
        g[(n + i, i)] += 1.0;
    }
    let noise_term = &bty * g * &cl.v * 2.0;
    let mut left = grad.columns_mut(0, p);
    left += noise_term;
    Ok(CostGradient { value, grad, x, y })
}

/// Mean and covariance of the augmented state `(e_x, z)` at time `tau`,
/// starting from the given moments, for feedforward offset `u0 - u*`.
///
/// The offset enters through `∫_0^τ exp(A_K t) dt B̄`, which equals
/// `(exp(A_K τ) - I) A_K^{-1} B̄` whenever `A_K` is invertible.
pub fn finite_horizon_moments(
    cl: &AugmentedClosedLoop,
    u0: &Vector,
    u_star: &Vector,
    init_mean: &Vector,
    init_cov: &Matrix,
    tau: f64,
) -> Result<(Vector, Matrix)> {
    let dim = cl.dim();
    if init_mean.len() != dim || init_cov.shape() != (dim, dim) || u0.len() != u_star.len() {
        return Err(crate::Error::Dimension("moment inputs do not match the augmented state".into()));
    }
    if !(tau >= 0.0) {
        return Err(crate::Error::Domain(format!("tau must be non-negative, got {tau}")));
    }
    if tau == 0.0 {
        return Ok((init_mean.clone(), init_cov.clone()));
    }
    let vl = van_loan(&cl.abar_k, &cl.bbar, &cl.wtilde_k, tau)?;
    let mean = &vl.ad * init_mean + &vl.bd * (u0 - u_star);
    let cov = symmetrize(&(&vl.ad * init_cov * vl.ad.transpose() + vl.wd));
    Ok((mean, cov))
}

/// Augmented-state moments at `t = 0` for a plant's initial distribution:
/// `e_x(0) = x(0) - x*`, `z(0) = 0`.
pub fn initial_augmented_moments(init: &InitialState, x_star: &Vector, p: usize) -> (Vector, Matrix) {
    let n = x_star.len();
    let mut mean = Vector::zeros(n + p);
    mean.rows_mut(0, n).copy_from(&(init.mean(n) - x_star));
    let mut cov = Matrix::zeros(n + p, n + p);
    cov.view_mut((0, 0), (n, n)).copy_from(&init.covariance(n));
    (mean, cov)
}

/// `‖(proj_Ω(K - η ∇f) - K) / η‖_F`.
pub fn stationarity_measure(k: &PiGain, grad: &Matrix, omega: &ConstraintBox, eta: f64) -> f64 {
    let stepped = k.perturbed(-eta, grad);
    let projected = project_onto_omega(&stepped, omega);
    ((projected.concat() - k.concat()) / eta).norm()
}

/// Scalar plant `A = 0.1, B = C = 1, W = 0.5, V = 1`. It is open-loop
/// unstable, and its PI cost with `Q1 = Q2 = 1` is not convex.
pub fn scalar_example_plant() -> LtiPlant {
    let s = |v: f64| Matrix::from_element(1, 1, v);
    LtiPlant::new(s(0.1), s(1.0), s(1.0), s(0.5), s(1.0), InitialState::point(Vector::zeros(1)))
        .expect("scalar example plant is valid")
}

/// Cost of the scalar example plant at `K = (k_p, k_i)` with `Q1 = Q2 = 1`.
pub fn scalar_example_cost(kp: f64, ki: f64) -> Result<f64> {
    let plant = scalar_example_plant();
    let one = Matrix::identity(1, 1);
    let k = PiGain::new(Matrix::from_element(1, 1, kp), Matrix::from_element(1, 1, ki))?;
    analytic_cost(&build_closed_loop(&plant, &k, &one, &one)?)
}

/// A published rational expression for the scalar example cost, kept for
/// comparison against the Lyapunov evaluation. It does not agree with it.
pub fn scalar_example_printed_cost(kp: f64, ki: f64) -> f64 {
    (ki + 1.0) * (0.5 * ki + kp * kp * ki + 1.0) / (ki * (kp - 0.1)) + (kp - 0.1) / (2.0 * ki) + kp
}

/// Cost values at two gains and their midpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidpointTriple {
    pub k1: (f64, f64),
    pub k2: (f64, f64),
    pub f1: f64,
    pub f2: f64,
    pub fmid: f64,
}

impl MidpointTriple {
    pub fn evaluate(k1: (f64, f64), k2: (f64, f64)) -> Result<Self> {
        let mid = (0.5 * (k1.0 + k2.0), 0.5 * (k1.1 + k2.1));
        Ok(Self {
            k1,
            k2,
            f1: scalar_example_cost(k1.0, k1.1)?,
            f2: scalar_example_cost(k2.0, k2.1)?,
            fmid: scalar_example_cost(mid.0, mid.1)?,
        })
    }

    /// True when the midpoint lies strictly above the chord.
    pub fn violates_convexity(&self) -> bool {
        0.5 * (self.f1 + self.f2) < self.fmid
    }
}

/// Scalar example at `K1 = (1, 4)`, `K2 = (4, 1.6)` and their midpoint.
pub fn nonconvexity_witness() -> Result<MidpointTriple> {
    MidpointTriple::evaluate((1.0, 4.0), (4.0, 1.6))
}

/// A pair of stabilizing gains of the scalar example whose midpoint cost
/// exceeds the chord, found near the stability boundary `k_p = 0.1`.
pub fn nonconvexity_counterexample() -> Result<MidpointTriple> {
    MidpointTriple::evaluate((0.1358, 5.985), (0.1301, 3.474))
}
