//! Model-free PI gain tuning: a two-point zeroth-order gradient estimator
//! driven by closed-loop rollouts, and projected gradient descent over a
//! product of Frobenius balls.

use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBoxPlant, PiRun};
use crate::error::{Error, Result, RolloutIndex};
use crate::linmath::{sample_frobenius_sphere, Matrix, Vector};
use crate::oracle::analytic_cost;
use crate::plant::{build_closed_loop, is_stabilizing, GainDocument, LtiPlant, PiGain};
use crate::rng::{child_rng, child_seed};

/// `Ω = {‖K_P‖_F ≤ kp_radius, ‖K_I‖_F ≤ ki_radius}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBox {
    pub kp_radius: f64,
    pub ki_radius: f64,
}

impl ConstraintBox {
    pub fn new(kp_radius: f64, ki_radius: f64) -> Result<Self> {
        if !(kp_radius > 0.0 && ki_radius > 0.0) {
            return Err(Error::Domain(format!("radii must be positive, got ({kp_radius}, {ki_radius})")));
        }
        Ok(Self { kp_radius, ki_radius })
    }

    pub fn contains(&self, k: &PiGain) -> bool {
        k.kp.norm() <= self.kp_radius * (1.0 + 1e-12) && k.ki.norm() <= self.ki_radius * (1.0 + 1e-12)
    }
}

impl Default for ConstraintBox {
    fn default() -> Self {
        Self { kp_radius: 5.0, ki_radius: 5.0 }
    }
}

/// Radial scaling onto the ball. The factor is nudged down until the rounded
/// result lies inside, so that projecting twice changes nothing.
fn shrink(m: &Matrix, radius: f64) -> Matrix {
    let norm = m.norm();
    if norm <= radius {
        return m.clone();
    }
    let mut factor = radius / norm;
    loop {
        let out = m * factor;
        if out.norm() <= radius {
            return out;
        }
        factor = f64::from_bits(factor.to_bits() - 1);
    }
}

/// Euclidean projection onto `Ω`: each block is scaled back radially.
pub fn project_onto_omega(k: &PiGain, omega: &ConstraintBox) -> PiGain {
    PiGain { kp: shrink(&k.kp, omega.kp_radius), ki: shrink(&k.ki, omega.ki_radius) }
}

/// Settings of the two-point gradient estimator.
#[derive(Debug, Clone)]
pub struct ZoConfig {
    /// Number of random directions `N`.
    pub directions: usize,
    /// Rollouts averaged per direction and sign, `N_sub`.
    pub inner_samples: usize,
    /// Rollout horizon.
    pub tau: f64,
    /// Smoothing radius.
    pub r: f64,
    pub q1: Matrix,
    pub q2: Matrix,
    pub master_seed: u64,
    /// Use the same random stream for the `K + rU` and `K - rU` rollouts of
    /// each `(i, j)` pair (common random numbers). Off by default.
    pub paired_noise: bool,
}

impl ZoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.directions == 0 || self.inner_samples == 0 {
            return Err(Error::Config("N and N_sub must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Config(format!("need tau > 0 and r > 0, got tau={}, r={}", self.tau, self.r)));
        }
        if self.q1.shape() != self.q2.shape() || !self.q1.is_square() {
            return Err(Error::Config("Q1 and Q2 must be square of equal size".into()));
        }
        Ok(())
    }

    /// Simulated time consumed by one gradient estimate.
    pub fn simulated_time_per_estimate(&self) -> f64 {
        2.0 * (self.directions * self.inner_samples) as f64 * self.tau
    }
}

/// Settings of projected gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig {
    /// Maximum number of iterations `T`.
    pub iterations: usize,
    pub eta: f64,
    /// Stop once `‖K^{i+1} - K^i‖_F ≤ eps_stop · eta`.
    pub eps_stop: f64,
    pub stop_test: bool,
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.eta > 0.0) || !(self.eps_stop >= 0.0) {
            return Err(Error::Config("need T >= 1, eta > 0 and eps >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneTrace {
    /// `K^0, K^1, ...`; one more entry than `est_gradients`.
    pub iterates: Vec<PiGain>,
    pub est_gradients: Vec<Matrix>,
    /// Exact cost of each iterate; empty unless a reference plant was given.
    pub analytic_costs: Vec<f64>,
    /// Iteration at which the stopping test fired.
    pub stopped_at: Option<usize>,
}

impl TuneTrace {
    pub fn final_gain(&self) -> &PiGain {
        self.iterates.last().expect("trace always holds K^0")
    }

    pub fn to_document(&self) -> TraceDocument {
        TraceDocument {
            iterates: self.iterates.iter().map(PiGain::to_document).collect(),
            est_gradients: self.est_gradients.iter().map(crate::plant::to_rows).collect(),
            analytic_costs: self.analytic_costs.clone(),
            stopped_at: self.stopped_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub iterates: Vec<GainDocument>,
    pub est_gradients: Vec<Vec<Vec<f64>>>,
    pub analytic_costs: Vec<f64>,
    pub stopped_at: Option<usize>,
}

const DIRECTION_STREAM: u64 = 1;
const ROLLOUT_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;

/// Seed of rollout `(i, j, k)` of a given iteration.
fn rollout_seed(cfg: &ZoConfig, iteration: usize, i: usize, j: usize, sign: usize) -> u64 {
    let sign = if cfg.paired_noise { 0 } else { sign };
    child_seed(cfg.master_seed, &[ROLLOUT_STREAM, iteration as u64, i as u64, j as u64, sign as u64])
}

fn directions(cfg: &ZoConfig, m: usize, p: usize, iteration: usize) -> Vec<Matrix> {
    let radius = ((2 * m * p) as f64).sqrt();
    (0..cfg.directions)
        .map(|i| {
            let mut rng = child_rng(cfg.master_seed, &[DIRECTION_STREAM, iteration as u64, i as u64]);
            sample_frobenius_sphere(m, 2 * p, radius, &mut rng)
        })
        .collect()
}

fn mean_cost<R: PiRun>(
    run: &R,
    n: usize,
    seed_of: impl Fn(usize) -> u64,
    idx: impl Fn(usize) -> RolloutIndex,
) -> Result<f64> {
    let seeds: Vec<u64> = (0..n).map(seed_of).collect();
    let samples = run.rollouts(&seeds).map_err(|(j, e)| e.with_rollout(idx(j)))?;
    Ok(samples.iter().map(|s| s.cost_sample).sum::<f64>() / n as f64)
}

/// Estimator core with explicit directions and rollout seeds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn estimate_with_directions<P: BlackBoxPlant>(
    plant: &P,
    k: &PiGain,
    u_hat: &Vector,
    y_star: &Vector,
    cfg: &ZoConfig,
    dirs: &[Matrix],
    seed_of: impl Fn(usize, usize, usize) -> u64,
) -> Result<Matrix> {
    let mut est = Matrix::zeros(k.m(), 2 * k.p());
    for (i, u) in dirs.iter().enumerate() {
        let mut f = [0.0; 2];
        for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
            let run = plant.pi_run(&k.perturbed(sign * cfg.r, u), u_hat, y_star, &cfg.q1, &cfg.q2, cfg.tau)?;
            let idx = |j| RolloutIndex { iteration: None, direction: i, sample: j, sign: s + 1 };
            f[s] = mean_cost(&run, cfg.inner_samples, |j| seed_of(i, j, s + 1), idx)?;
        }
        est += u * (f[0] - f[1]);
    }
    Ok(est / (2.0 * cfg.r * dirs.len() as f64))
}

/// Two-point zeroth-order estimate of `∇f(K)` with feedforward `u_hat`.
///
/// Directions are uniform on the Frobenius sphere of radius `√(2mp)`. The
/// perturbed gains `K ± rU` are not projected onto `Ω`. A diverging rollout
/// aborts the estimate and reports its `(i, j, k)` index.
pub fn estimate_gradient<P: BlackBoxPlant>(
    plant: &P,
    k: &PiGain,
    u_hat: &Vector,
    y_star: &Vector,
    cfg: &ZoConfig,
    iteration: usize,
) -> Result<Matrix> {
    cfg.validate()?;
    check_gain_dims(plant, k, u_hat, y_star)?;
    let dirs = directions(cfg, k.m(), k.p(), iteration);
    estimate_with_directions(plant, k, u_hat, y_star, cfg, &dirs, |i, j, s| rollout_seed(cfg, iteration, i, j, s))
        .map_err(|e| e.with_iteration(iteration))
}

fn check_gain_dims<P: BlackBoxPlant>(plant: &P, k: &PiGain, u: &Vector, y: &Vector) -> Result<()> {
    let (m, p) = (plant.input_dim(), plant.output_dim());
    if k.m() != m || k.p() != p || u.len() != m || y.len() != p {
        return Err(Error::Dimension(format!("plant has m={m}, p={p}")));
    }
    Ok(())
}

/// Projected gradient descent with zeroth-order gradient estimates.
///
/// `K^0` must lie in `Ω`. It is checked to stabilize the plant by a probe
/// rollout and, when `reference` is given, by an eigenvalue test; the
/// reference plant is also used to record exact costs of the iterates.
#[allow(clippy::too_many_arguments)]
pub fn tune_gains<P: BlackBoxPlant>(
    plant: &P,
    k0: &PiGain,
    u_hat: &Vector,
    y_star: &Vector,
    omega: &ConstraintBox,
    zo: &ZoConfig,
    pgd: &PgdConfig,
    reference: Option<&LtiPlant>,
) -> Result<TuneTrace> {
    zo.validate()?;
    pgd.validate()?;
    check_gain_dims(plant, k0, u_hat, y_star)?;
    if !omega.contains(k0) {
        return Err(Error::Domain("initial gain lies outside the constraint set".into()));
    }
    let exact_cost = |k: &PiGain| -> Result<f64> {
        let cl = build_closed_loop(reference.expect("checked"), k, &zo.q1, &zo.q2)?;
        analytic_cost(&cl)
    };
    if let Some(r) = reference {
        let cl = build_closed_loop(r, k0, &zo.q1, &zo.q2)?;
        if !is_stabilizing(&cl) {
            return Err(Error::Stability { what: "initial closed loop", margin: 0.0 });
        }
    }
    plant.pi_run(k0, u_hat, y_star, &zo.q1, &zo.q2, zo.tau)?.rollout(child_seed(zo.master_seed, &[PROBE_STREAM]))?;

    let mut trace = TuneTrace {
        iterates: vec![k0.clone()],
        est_gradients: Vec::new(),
        analytic_costs: Vec::new(),
        stopped_at: None,
    };
    if reference.is_some() {
        trace.analytic_costs.push(exact_cost(k0)?);
    }
    let mut k = k0.clone();
    for it in 0..pgd.iterations {
        let g = estimate_gradient(plant, &k, u_hat, y_star, zo, it)?;
        let next = project_onto_omega(&k.perturbed(-pgd.eta, &g), omega);
        let step = (next.concat() - k.concat()).norm();
        trace.est_gradients.push(g);
        if reference.is_some() {
            trace.analytic_costs.push(exact_cost(&next)?);
        }
        trace.iterates.push(next.clone());
        k = next;
        if pgd.stop_test && step <= pgd.eps_stop * pgd.eta {
            trace.stopped_at = Some(it + 1);
            break;
        }
    }
    Ok(trace)
}
