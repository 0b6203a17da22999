//! Model-free estimation of the equilibrium input from `m + 1` proportional
//! closed-loop experiments, the horizon/error bound calculator that goes with
//! it, and a data-driven estimate of the closed-loop decay constant.

use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBoxPlant, PRun};
use crate::error::{Error, Result};
use crate::linmath::{
    min_sym_eigenvalue, right_pinv, singular_values, solve_lyapunov_continuous, spectral_norm, Matrix, Vector,
};
use crate::plant::{compute_equilibrium, to_rows, LtiPlant};
use crate::rng::child_seed;

/// Result of one feedforward estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardEstimate {
    pub u_hat: Vector,
    /// Columns `e^i(τ_u) - e^0(τ_u)`, `i = 1 .. m`.
    pub e: Matrix,
    pub e0_tau: Vector,
    pub tau_u: f64,
    pub kp_probe: Matrix,
    pub min_sv_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardDocument {
    pub u_hat: Vec<f64>,
    #[serde(rename = "E")]
    pub e: Vec<Vec<f64>>,
    pub e0_tau: Vec<f64>,
    pub tau_u: f64,
    pub kp_probe: Vec<Vec<f64>>,
    #[serde(rename = "min_sv_E")]
    pub min_sv_e: f64,
}

impl FeedforwardEstimate {
    pub fn to_document(&self) -> FeedforwardDocument {
        FeedforwardDocument {
            u_hat: self.u_hat.iter().copied().collect(),
            e: to_rows(&self.e),
            e0_tau: self.e0_tau.iter().copied().collect(),
            tau_u: self.tau_u,
            kp_probe: to_rows(&self.kp_probe),
            min_sv_e: self.min_sv_e,
        }
    }
}

/// Runs the baseline experiment `u = K'_P e` and one probe experiment per
/// input channel with feedforward `u0 = e_i`, each from a fresh initial state
/// and with its own noise stream, and returns `û0 = -E^+ e^0(τ_u)`.
pub fn estimate_feedforward<P: BlackBoxPlant>(
    plant: &P,
    kp_probe: &Matrix,
    y_star: &Vector,
    tau_u: f64,
    seed: u64,
) -> Result<FeedforwardEstimate> {
    let (m, p) = (plant.input_dim(), plant.output_dim());
    if !(tau_u > 0.0 && tau_u.is_finite()) {
        return Err(Error::Config(format!("feedforward horizon must be positive, got {tau_u}")));
    }
    if y_star.len() != p {
        return Err(Error::Dimension(format!("y* has length {}, expected {p}", y_star.len())));
    }
    let run = |u0: &Vector, i: usize| -> Result<Vector> {
        plant.p_run(kp_probe, u0, y_star, tau_u)?.final_error(child_seed(seed, &[i as u64]))
    };
    let e0 = run(&Vector::zeros(m), 0)?;
    let mut e = Matrix::zeros(p, m);
    for i in 0..m {
        let ei = run(&Vector::from_fn(m, |j, _| if j == i { 1.0 } else { 0.0 }), i + 1)?;
        e.set_column(i, &(ei - &e0));
    }
    let sv = singular_values(&e);
    let min_sv_e = sv.get(p.saturating_sub(1)).copied().unwrap_or(0.0);
    let u_hat = -(right_pinv(&e)? * &e0);
    Ok(FeedforwardEstimate { u_hat, e, e0_tau: e0, tau_u, kp_probe: kp_probe.clone(), min_sv_e })
}

/// Confidence and constant settings of the horizon bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    pub eps_u: f64,
    pub delta_u: f64,
    /// Sub-Gaussian norm of a standard normal variable.
    pub subgauss_norm: f64,
    /// Absolute constant of the Hanson-Wright type tail bound.
    pub abs_const_c: f64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self { eps_u: 1e-3, delta_u: 0.05, subgauss_norm: 1.0, abs_const_c: 1.0 }
    }
}

impl BoundSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_u >= 0.0) || !(self.delta_u > 0.0 && self.delta_u < 1.0) {
            return Err(Error::Config("need eps_u >= 0 and 0 < delta_u < 1".into()));
        }
        if !(self.subgauss_norm > 0.0 && self.abs_const_c > 0.0) {
            return Err(Error::Config("sub-Gaussian norm and constant c must be positive".into()));
        }
        Ok(())
    }
}

/// Horizon lower bound and error bound of the feedforward estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Bounds {
    /// Solution of `A_K^T Z + Z A_K + I = 0`.
    pub z: Matrix,
    pub z_norm: f64,
    /// Stationary covariance: `A_K Σ + Σ A_K^T + W + B K_P V K_P^T B^T = 0`.
    pub sigma: Matrix,
    pub m1: f64,
    /// `None` when the output noise covariance `C Σ C^T` vanishes.
    pub m2: Option<f64>,
    pub m3: f64,
    pub m4: f64,
    /// `S(δ_u / 2)`.
    pub s_val: f64,
    /// `S_m(δ_u / 2)`.
    pub sm_val: f64,
    pub sbar: f64,
    pub tau_lower: f64,
    /// `σ_p(C A_K^{-1} B)`.
    pub sigma_p: f64,
    /// Whether `σ_p(C A_K^{-1} B) >= 4 sqrt(2 m tr(C Σ C^T))`.
    pub precondition_holds: bool,
    /// False when a logarithm argument is not finite and positive.
    pub applicable: bool,
    pub settings: BoundSettings,
}

impl Theorem1Bounds {
    /// The horizon bound with `‖Z‖_2` replaced by an estimate.
    pub fn horizon_with_decay(&self, z_norm: f64) -> f64 {
        let l1 = (self.m1 / self.settings.eps_u).max(self.m3).ln();
        let l2 = self.m2.map_or(0.0, f64::ln);
        (2.0 * z_norm * l1).max(z_norm * l2).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsDocument {
    pub z_norm: f64,
    pub m1: f64,
    pub m2: Option<f64>,
    pub m3: f64,
    pub m4: f64,
    pub s_val: f64,
    pub sm_val: f64,
    pub sbar: f64,
    pub tau_lower: f64,
    pub sigma_p: f64,
    pub precondition_holds: bool,
    pub applicable: bool,
}

impl Theorem1Bounds {
    pub fn to_document(&self) -> BoundsDocument {
        BoundsDocument {
            z_norm: self.z_norm,
            m1: self.m1,
            m2: self.m2,
            m3: self.m3,
            m4: self.m4,
            s_val: self.s_val,
            sm_val: self.sm_val,
            sbar: self.sbar,
            tau_lower: self.tau_lower,
            sigma_p: self.sigma_p,
            precondition_holds: self.precondition_holds,
            applicable: self.applicable,
        }
    }
}

/// Evaluates the horizon and error bound for a known plant. This is an
/// analysis tool; the model-free path never calls it.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_bounds(
    plant: &LtiPlant,
    kp_probe: &Matrix,
    y_star: &Vector,
    u_star: &Vector,
    sigma0: &Matrix,
    dx: f64,
    settings: &BoundSettings,
) -> Result<Theorem1Bounds> {
    settings.validate()?;
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    if kp_probe.shape() != (m, p) || sigma0.shape() != (n, n) {
        return Err(Error::Dimension("probe gain must be m x p and Σ0 n x n".into()));
    }
    let bkp = &plant.b * kp_probe;
    let a_k = &plant.a - &bkp * &plant.c;
    let z = solve_lyapunov_continuous(&a_k.transpose(), &Matrix::identity(n, n))?;
    let sigma = solve_lyapunov_continuous(&a_k, &(&plant.w + &bkp * &plant.v * bkp.transpose()))?;
    let a_k_inv = a_k.clone().try_inverse().ok_or(Error::Singular("closed-loop matrix A_K"))?;
    let e_star = &plant.c * &a_k_inv * &plant.b;
    let sigma_p = singular_values(&e_star)[p - 1];

    let zn = spectral_norm(&z);
    let zmin = min_sym_eigenvalue(&z);
    let cn = spectral_norm(&plant.c);
    let bn = spectral_norm(&plant.b);
    let an = spectral_norm(&a_k_inv);
    let us = u_star.norm();
    let ys = y_star.norm();
    let mpf = (m * p) as f64;
    let mf = m as f64;
    let (g, c) = (settings.subgauss_norm, settings.abs_const_c);

    let m1 = zn / zmin
        * f64::max(
            2.0 * cn * (dx + an * bn * us) / sigma_p,
            8.0 * (2.0 * mpf).sqrt() * cn * cn * an * an * bn * bn * us / sigma_p,
        );
    let csc = &plant.c * &sigma * plant.c.transpose();
    let tr = csc.trace();
    let fro = csc.norm();
    let m2 = (tr > 0.0 && fro > 0.0)
        .then(|| zn * zn * cn * cn / (zmin * zmin) * f64::max(sigma0.trace() / tr, sigma0.norm() / fro));
    let m3 = zn * cn / zmin * f64::max(2.0 * (2.0 * mpf).sqrt() * cn * an * an * bn * bn, (dx + an * bn * us) / ys);

    let log_term = (2.0 / (settings.delta_u / 2.0)).ln();
    let s_val = (2.0 * tr + 9.0 * ((2.0 * c).sqrt() + 2.0) * g * g * fro / (c * c) * log_term).sqrt();
    let sm_val = (2.0 * mf * tr + 9.0 * ((2.0 * mf * c).sqrt() + 2.0) * g * g * fro / (c * c) * log_term).sqrt();
    let gain = 2f64.sqrt() * cn * an * bn;
    let sbar = (4.0 * gain * ys * sm_val + 2.0 * (1.0 + gain * sm_val) * s_val) / sigma_p;
    let m4_den = 9.0 * ((2.0 * mf * c).sqrt() + 2.0) * g * g * fro;
    let m4_num = sigma_p * sigma_p / 16.0 - 2.0 * mf * tr;
    let m4 = if m4_den > 0.0 { (2.0 * (-c * c * m4_num / m4_den).exp()).clamp(0.0, 2.0) } else { 0.0 };

    let arg1 = (m1 / settings.eps_u).max(m3);
    let applicable = arg1.is_finite() && arg1 > 0.0 && m2.is_none_or(|v| v.is_finite() && v > 0.0);
    let tau_lower = if applicable { (2.0 * zn * arg1.ln()).max(zn * m2.map_or(0.0, f64::ln)) } else { f64::INFINITY };
    Ok(Theorem1Bounds {
        z,
        z_norm: zn,
        sigma,
        m1,
        m2,
        m3,
        m4,
        s_val,
        sm_val,
        sbar,
        tau_lower,
        sigma_p,
        precondition_holds: sigma_p >= 4.0 * (2.0 * mf * tr).sqrt(),
        applicable: applicable && tau_lower > 0.0,
        settings: *settings,
    })
}

/// [`theorem1_bounds`] with `u*`, `D_x = ‖E[x(0)] - x*‖` and `Σ0` taken from
/// the plant's initial-state distribution.
pub fn theorem1_bounds_for_plant(
    plant: &LtiPlant,
    kp_probe: &Matrix,
    y_star: &Vector,
    settings: &BoundSettings,
) -> Result<Theorem1Bounds> {
    let eq = compute_equilibrium(plant, y_star)?;
    let n = plant.n();
    let dx = (plant.init.mean(n) - &eq.x_star).norm();
    theorem1_bounds(plant, kp_probe, y_star, &eq.u_star, &plant.init.covariance(n), dx, settings)
}

const NOISE_MARGIN: f64 = 10.0;

/// Estimates `‖Z‖_2` from one proportional experiment with `u0 = 0` by fitting
/// `log ‖y(t) - ȳ‖ ≈ a - t / (2 ‖Z‖_2)` over `[τ/4, 3τ/4]`, where `ȳ` and the
/// noise level are measured on `[3τ/4, τ]`. The fit stops at the first sample
/// within `NOISE_MARGIN` noise levels of `ȳ`.
pub fn estimate_decay_constant<P: BlackBoxPlant>(
    plant: &P,
    kp_probe: &Matrix,
    y_star: &Vector,
    tau_large: f64,
    seed: u64,
) -> Result<f64> {
    let m = plant.input_dim();
    let traj = plant.p_run(kp_probe, &Vector::zeros(m), y_star, tau_large)?.output_trajectory(seed)?;
    let (t_end, y_end) = traj.last().cloned().ok_or_else(|| Error::Estimation("empty trajectory".into()))?;
    let tail: Vec<&Vector> = traj.iter().filter(|(t, _)| *t >= 0.75 * t_end).map(|(_, y)| y).collect();
    let tail_mean = tail.iter().fold(Vector::zeros(y_end.len()), |acc, y| acc + *y) / tail.len() as f64;
    let floor = (tail.iter().map(|y| (*y - &tail_mean).norm_squared()).sum::<f64>() / tail.len() as f64).sqrt();
    let pts: Vec<(f64, f64)> = traj
        .iter()
        .filter(|(t, _)| *t >= 0.25 * t_end && *t <= 0.75 * t_end)
        .map(|(t, y)| (*t, (y - &tail_mean).norm()))
        .take_while(|&(_, d)| d > NOISE_MARGIN * floor && d > 0.0)
        .map(|(t, d)| (t, d.ln()))
        .collect();
    if pts.len() < 10 {
        return Err(Error::Estimation("decay signal is below the noise floor over the fit window".into()));
    }
    let k = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let lm = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - lm)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0 && slope.is_finite()) {
        return Err(Error::Estimation(format!("fitted decay slope {slope} is not negative")));
    }
    Ok(-1.0 / (2.0 * slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::SimulatedPlant;
    use crate::plant::{generate_random_plant, InitialState};
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;

    fn scalar(w: f64, v: f64) -> LtiPlant {
        let s = |x: f64| Matrix::from_element(1, 1, x);
        LtiPlant::new(s(-1.0), s(1.0), s(1.0), s(w), s(v), InitialState::point(Vector::zeros(1))).unwrap()
    }

    fn six_state() -> LtiPlant {
        let mut rng = rng_from_seed(11);
        let mut plant = generate_random_plant(6, 2, 2, &mut rng).unwrap().noiseless();
        plant.init = InitialState::point(Vector::zeros(6));
        plant
    }

    #[test]
    fn scalar_lag_recovers_equilibrium() {
        let bb = SimulatedPlant::new(scalar(0.0, 0.0), 0.01).unwrap();
        let est = estimate_feedforward(&bb, &Matrix::zeros(1, 1), &Vector::from_element(1, 5.0), 20.0, 1).unwrap();
        assert_relative_eq!(est.e0_tau[0], 5.0, epsilon = 1e-7);
        assert_relative_eq!(est.e[(0, 0)], -1.0, epsilon = 1e-7);
        assert_relative_eq!(est.u_hat[0], 5.0, epsilon = 1e-6);
    }

    #[test]
    fn data_matrix_approaches_static_gain() {
        let plant = six_state();
        let kp = Matrix::identity(2, 2) * 1e-3;
        let a_k = &plant.a - &plant.b * &kp * &plant.c;
        let e_star = &plant.c * a_k.try_inverse().unwrap() * &plant.b;
        let bb = SimulatedPlant::new(plant.clone(), 0.01).unwrap();
        let y = Vector::from_element(2, 5.0);
        let z = theorem1_bounds_for_plant(&plant, &kp, &y, &BoundSettings::default()).unwrap().z_norm;
        let est = estimate_feedforward(&bb, &kp, &y, 60.0 * z, 2).unwrap();
        assert!((&est.e - &e_star).norm() < 1e-6);
        let u_star = compute_equilibrium(&plant, &y).unwrap().u_star;
        assert!((&est.u_hat - &u_star).norm() < 1e-6);
        let again = -(right_pinv(&est.e).unwrap() * &est.e0_tau);
        assert!((again - &est.u_hat).norm() <= 1e-12 * (1.0 + est.u_hat.norm()));
    }

    #[test]
    fn error_decreases_with_horizon_and_scales_with_setpoint() {
        let plant = six_state();
        let bb = SimulatedPlant::new(plant.clone(), 0.01).unwrap();
        let kp = Matrix::zeros(2, 2);
        let y = Vector::from_vec(vec![5.0, -2.0]);
        let u_star = compute_equilibrium(&plant, &y).unwrap().u_star;
        let errs: Vec<f64> = [5.0, 10.0, 20.0, 40.0]
            .iter()
            .map(|&t| (estimate_feedforward(&bb, &kp, &y, t, 3).unwrap().u_hat - &u_star).norm())
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
        let a = estimate_feedforward(&bb, &kp, &y, 10.0, 3).unwrap().u_hat;
        let b = estimate_feedforward(&bb, &kp, &(&y * 2.5), 10.0, 3).unwrap().u_hat;
        assert!((b - a * 2.5).norm() < 1e-8);
    }

    #[test]
    fn unstable_probe_gain_is_rejected() {
        let bb = SimulatedPlant::new(scalar(0.0, 0.0), 0.01).unwrap();
        let err = estimate_feedforward(&bb, &Matrix::from_element(1, 1, -2.0), &Vector::from_element(1, 1.0), 5.0, 0);
        assert!(matches!(err, Err(Error::Stability { .. })));
    }

    #[test]
    fn scalar_bounds_match_hand_evaluation() {
        let (w, v) = (0.02, 0.01);
        let plant = scalar(w, v);
        let st = BoundSettings { eps_u: 1e-3, delta_u: 0.1, subgauss_norm: 1.0, abs_const_c: 1.0 };
        let (dx, s0, ys, us) = (0.5, 0.3, 5.0, 5.0);
        let b = theorem1_bounds(
            &plant,
            &Matrix::zeros(1, 1),
            &Vector::from_element(1, ys),
            &Vector::from_element(1, us),
            &Matrix::from_element(1, 1, s0),
            dx,
            &st,
        )
        .unwrap();
        // A_K = -1: Z = 1/2, Σ = w/2, C A_K^{-1} B = -1, every norm is 1.
        let sig = w / 2.0;
        assert_relative_eq!(b.z_norm, 0.5, epsilon = 1e-14);
        assert_relative_eq!(b.sigma[(0, 0)], sig, epsilon = 1e-14);
        assert_relative_eq!(b.sigma_p, 1.0, epsilon = 1e-14);
        let m1 = f64::max(2.0 * (dx + us), 8.0 * 2f64.sqrt() * us);
        assert_relative_eq!(b.m1, m1, max_relative = 1e-12);
        assert_relative_eq!(b.m2.unwrap(), s0 / sig, max_relative = 1e-12);
        let m3 = f64::max(2.0 * 2f64.sqrt(), (dx + us) / ys);
        assert_relative_eq!(b.m3, m3, max_relative = 1e-12);
        let lg = (2.0f64 / 0.05).ln();
        let s = (2.0 * sig + 9.0 * (2f64.sqrt() + 2.0) * sig * lg).sqrt();
        assert_relative_eq!(b.s_val, s, max_relative = 1e-12);
        assert_relative_eq!(b.sm_val, s, max_relative = 1e-12);
        let g = 2f64.sqrt();
        assert_relative_eq!(b.sbar, 4.0 * g * ys * s + 2.0 * (1.0 + g * s) * s, max_relative = 1e-12);
        let m4 = 2.0 * (-(1.0 / 16.0 - 2.0 * sig) / (9.0 * (2f64.sqrt() + 2.0) * sig)).exp();
        assert_relative_eq!(b.m4, m4, max_relative = 1e-12);
        let tau = f64::max((m1 / 1e-3f64).max(m3).ln(), 0.5 * (s0 / sig).ln());
        assert_relative_eq!(b.tau_lower, tau, max_relative = 1e-12);
        assert_eq!(b.precondition_holds, 1.0 >= 4.0 * (2.0 * sig).sqrt());

        let half = theorem1_bounds(
            &plant,
            &Matrix::zeros(1, 1),
            &Vector::from_element(1, ys),
            &Vector::from_element(1, us),
            &Matrix::from_element(1, 1, s0),
            dx,
            &BoundSettings { eps_u: 5e-4, ..st },
        )
        .unwrap();
        assert_relative_eq!(half.tau_lower - b.tau_lower, 2.0 * 0.5 * 2f64.ln(), max_relative = 1e-10);
    }

    #[test]
    fn noise_free_branch_has_zero_stochastic_terms() {
        let plant = six_state();
        let b = theorem1_bounds_for_plant(
            &plant,
            &Matrix::zeros(2, 2),
            &Vector::from_element(2, 5.0),
            &BoundSettings::default(),
        )
        .unwrap();
        assert_eq!(b.m2, None);
        assert_eq!((b.sbar, b.m4), (0.0, 0.0));
        assert!(b.applicable && b.precondition_holds && b.tau_lower > 0.0);
    }

    #[test]
    fn decay_constant_of_first_order_lag() {
        let mut plant = scalar(0.0, 0.0);
        plant.init = InitialState::point(Vector::from_element(1, 1.0));
        let bb = SimulatedPlant::new(plant, 0.01).unwrap();
        let z = estimate_decay_constant(&bb, &Matrix::zeros(1, 1), &Vector::from_element(1, 5.0), 20.0, 0).unwrap();
        assert!((z - 0.5).abs() < 0.05, "{z}");
    }
}
