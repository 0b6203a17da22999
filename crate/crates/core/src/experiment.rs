//! Head-to-head experiment harness: random plant families, the model-free
//! pipeline (feedforward estimation and zeroth-order tuning) against the
//! identification-based pipeline under matched sample budgets, metrics and
//! CSV/JSON artifacts.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{
    discrete_equilibrium, identify_ho_kalman, tune_gains_modelbased, IdentificationConfig, ZohClosedLoop,
};
use crate::blackbox::SimulatedPlant;
use crate::error::{Error, Result};
use crate::feedforward::{estimate_feedforward, theorem1_bounds_for_plant, BoundSettings};
use crate::linmath::{Matrix, Vector};
use crate::plant::{
    build_closed_loop, compute_equilibrium, generate_random_plant, ClosedLoopSimulator, LtiPlant, PiGain,
};
use crate::rng::{child_seed, rng_from_seed};
use crate::tuner::{tune_gains, ConstraintBox, PgdConfig, ZoConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantFamilyConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// One generated system per seed.
    pub system_seeds: Vec<u64>,
}

impl Default for PlantFamilyConfig {
    fn default() -> Self {
        Self { n: 20, m: 2, p: 2, system_seeds: (0..10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedforwardConfig {
    /// Horizon `τ_u`; `None` uses the horizon bound of the true plant.
    pub tau_u: Option<f64>,
    /// Probe gain `K'_P = kp_probe_scale · I`.
    pub kp_probe_scale: f64,
    pub eps_u: f64,
    pub delta_u: f64,
    pub subgauss_norm: f64,
    pub abs_const_c: f64,
}

impl Default for FeedforwardConfig {
    fn default() -> Self {
        let b = BoundSettings::default();
        Self {
            tau_u: None,
            kp_probe_scale: 1e-3,
            eps_u: b.eps_u,
            delta_u: b.delta_u,
            subgauss_norm: b.subgauss_norm,
            abs_const_c: b.abs_const_c,
        }
    }
}

impl FeedforwardConfig {
    pub fn bound_settings(&self) -> BoundSettings {
        BoundSettings {
            eps_u: self.eps_u,
            delta_u: self.delta_u,
            subgauss_norm: self.subgauss_norm,
            abs_const_c: self.abs_const_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoSettings {
    pub n_dirs: usize,
    pub n_sub: usize,
    pub tau: f64,
    pub r: f64,
    /// `Q1 = q1 · I`, `Q2 = q2 · I`; also the weights of the evaluation metric.
    pub q1: f64,
    pub q2: f64,
    pub paired_noise: bool,
}

impl Default for ZoSettings {
    fn default() -> Self {
        Self { n_dirs: 15, n_sub: 20, tau: 10.0, r: 0.09, q1: 200.0, q2: 20.0, paired_noise: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdSettings {
    pub eta: f64,
    pub iterations: usize,
    pub eps_stop: f64,
    pub stop_test: bool,
    /// `K^0 = (k0_p I, k0_i I)`.
    pub k0_p: f64,
    pub k0_i: f64,
    pub kp_radius: f64,
    pub ki_radius: f64,
}

impl Default for PgdSettings {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            iterations: 20,
            eps_stop: 1e-3,
            stop_test: false,
            k0_p: 1.0,
            k0_i: 1.0,
            kp_radius: 5.0,
            ki_radius: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub h: f64,
    pub eta: f64,
    pub iterations: usize,
    pub q1: f64,
    pub q2: f64,
    pub k0_p: f64,
    pub k0_i: f64,
    /// Model order; `None` picks the largest Hankel singular-value gap.
    pub order: Option<usize>,
    pub fir_lags: usize,
    pub input_std: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            h: 1e-2,
            eta: 1e-5,
            iterations: 100_000,
            q1: 1e-1,
            q2: 1e-2,
            k0_p: 1e-2,
            k0_i: 1e-2,
            order: None,
            fir_lags: 50,
            input_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_eval: usize,
    pub tau_eval: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { n_eval: 200, tau_eval: 300.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySettings {
    /// Dump output trajectories of trial 0 of every system.
    pub enabled: bool,
    pub horizon: f64,
    pub gnuplot: bool,
}

impl Default for TrajectorySettings {
    fn default() -> Self {
        Self { enabled: true, horizon: 50.0, gnuplot: true }
    }
}

/// Full experiment description. Every field has a default, so `{}` is a
/// valid configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantFamilyConfig,
    pub y_star: Vec<f64>,
    pub h_sim: f64,
    pub feedforward: FeedforwardConfig,
    pub zo: ZoSettings,
    pub pgd: PgdSettings,
    pub baseline: BaselineSettings,
    pub eval: EvalSettings,
    /// Run the gain tuning stage; when false only feedforwards are compared.
    pub tuning: bool,
    pub trajectory: TrajectorySettings,
    pub trials: usize,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: PlantFamilyConfig::default(),
            y_star: vec![5.0, 5.0],
            h_sim: 1e-2,
            feedforward: FeedforwardConfig::default(),
            zo: ZoSettings::default(),
            pgd: PgdSettings::default(),
            baseline: BaselineSettings::default(),
            eval: EvalSettings::default(),
            tuning: true,
            trajectory: TrajectorySettings::default(),
            trials: 10,
            master_seed: 0,
        }
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let pl = &self.plant;
        if !(pl.p >= 1 && pl.p <= pl.m && pl.m <= pl.n) {
            return Err(Error::Config(format!("need 1 <= p <= m <= n, got n={}, m={}, p={}", pl.n, pl.m, pl.p)));
        }
        if pl.system_seeds.is_empty() || self.trials == 0 {
            return Err(Error::Config("need at least one system and one trial".into()));
        }
        if self.y_star.len() != pl.p {
            return Err(Error::Config(format!("y_star has length {}, expected p = {}", self.y_star.len(), pl.p)));
        }
        if self.y_star.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("y_star must be nonzero for relative errors".into()));
        }
        positive(self.h_sim, "h_sim")?;
        if let Some(t) = self.feedforward.tau_u {
            positive(t, "tau_u")?;
        }
        self.feedforward.bound_settings().validate()?;
        if self.zo.n_dirs == 0 || self.zo.n_sub == 0 || self.pgd.iterations == 0 || self.eval.n_eval == 0 {
            return Err(Error::Config("all counts must be at least 1".into()));
        }
        positive(self.zo.tau, "zo.tau")?;
        positive(self.zo.r, "zo.r")?;
        positive(self.pgd.eta, "pgd.eta")?;
        positive(self.pgd.kp_radius, "pgd.kp_radius")?;
        positive(self.pgd.ki_radius, "pgd.ki_radius")?;
        positive(self.baseline.h, "baseline.h")?;
        positive(self.baseline.eta, "baseline.eta")?;
        positive(self.baseline.input_std, "baseline.input_std")?;
        positive(self.eval.tau_eval, "eval.tau_eval")?;
        positive(self.trajectory.horizon, "trajectory.horizon")?;
        if self.baseline.iterations == 0 || self.baseline.fir_lags < 2 || !self.baseline.fir_lags.is_multiple_of(2) {
            return Err(Error::Config("baseline needs iterations >= 1 and an even FIR length >= 2".into()));
        }
        Ok(())
    }

    pub fn y_star(&self) -> Vector {
        Vector::from_vec(self.y_star.clone())
    }

    pub fn omega(&self) -> ConstraintBox {
        ConstraintBox { kp_radius: self.pgd.kp_radius, ki_radius: self.pgd.ki_radius }
    }

    pub fn zo_config(&self, master_seed: u64) -> ZoConfig {
        let p = self.plant.p;
        ZoConfig {
            directions: self.zo.n_dirs,
            inner_samples: self.zo.n_sub,
            tau: self.zo.tau,
            r: self.zo.r,
            q1: Matrix::identity(p, p) * self.zo.q1,
            q2: Matrix::identity(p, p) * self.zo.q2,
            master_seed,
            paired_noise: self.zo.paired_noise,
        }
    }

    pub fn pgd_config(&self) -> PgdConfig {
        PgdConfig {
            iterations: self.pgd.iterations,
            eta: self.pgd.eta,
            eps_stop: self.pgd.eps_stop,
            stop_test: self.pgd.stop_test,
        }
    }

    pub fn generate_system(&self, seed: u64) -> Result<LtiPlant> {
        generate_random_plant(self.plant.n, self.plant.m, self.plant.p, &mut rng_from_seed(seed))
    }
}

/// Simulated time the model-free pipeline spends on the plant: `m + 1`
/// feedforward experiments plus `2 N N_sub` rollouts per tuning iteration.
pub fn model_free_budget(m: usize, tau_u: f64, zo: Option<(&ZoConfig, usize)>) -> f64 {
    let ff = (m + 1) as f64 * tau_u;
    ff + zo.map_or(0.0, |(z, iters)| z.simulated_time_per_estimate() * iters as f64)
}

/// Number of identification samples of period `h` covering `budget`.
pub fn matched_samples(budget: f64, h: f64) -> usize {
    (budget / h).round() as usize
}

/// `‖y* + C A^{-1} B u0‖ / ‖y*‖`, the relative error of the expected
/// steady-state output under the constant input `u0`.
pub fn steady_state_rel_err(plant: &LtiPlant, u0: &Vector, y_star: &Vector) -> Result<f64> {
    if u0.len() != plant.m() || y_star.len() != plant.p() {
        return Err(Error::Dimension("u0 must have length m and y* length p".into()));
    }
    let x = plant.a.clone().lu().solve(&(&plant.b * u0)).ok_or(Error::Singular("plant matrix A"))?;
    Ok((y_star + &plant.c * x).norm() / y_star.norm())
}

/// Controller implementation used when evaluating a gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FbarMode {
    /// Continuous-time PI law, simulated exactly on a grid of step `h_sim`.
    Continuous,
    /// Sampled-data PI law with period `h`.
    Zoh { h: f64 },
}

/// Average over `n_eval` independent runs of the time-averaged cost
/// `e^T Q1 e + z^T Q2 z` on `[0, tau_eval]`. In ZOH mode the integral state is
/// taken as `h z_k`.
#[allow(clippy::too_many_arguments)]
pub fn eval_fbar(
    plant: &LtiPlant,
    k: &PiGain,
    u0: &Vector,
    y_star: &Vector,
    q1: &Matrix,
    q2: &Matrix,
    n_eval: usize,
    tau_eval: f64,
    h_sim: f64,
    mode: FbarMode,
    seed: u64,
) -> Result<f64> {
    if n_eval == 0 {
        return Err(Error::Config("N_eval must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_eval as u64).map(|i| child_seed(seed, &[i])).collect();
    let costs = match mode {
        FbarMode::Continuous => {
            let eq = compute_equilibrium(plant, y_star)?;
            let cl = build_closed_loop(plant, k, q1, q2)?;
            ClosedLoopSimulator::new(&cl, plant, u0, &eq, tau_eval, h_sim)?.time_averaged_cost_batch(&seeds)
        }
        FbarMode::Zoh { h } => {
            ZohClosedLoop::new(plant, k, u0, y_star, h, q1, q2)?.time_averaged_costs(tau_eval, &seeds)
        }
    }
    .map_err(|(_, e)| e)?;
    Ok(costs.iter().sum::<f64>() / n_eval as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Proposed,
    ModelBased,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::ModelBased => "model-based",
        }
    }
}

/// One method's outcome on one trial. Metrics that were not reached (stage
/// disabled or failed) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub system_id: usize,
    pub trial_id: usize,
    pub method: Method,
    pub steady_state_rel_err: Option<f64>,
    pub fbar: Option<f64>,
    pub u0_err: Option<f64>,
    pub wallclock_s: f64,
    pub status: String,
}

pub const CSV_HEADER: &str = "system_id,trial_id,method,steady_state_rel_err,fbar,u0_err,wallclock_s,status";

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.system_id,
            self.trial_id,
            self.method.tag(),
            fmt_opt(self.steady_state_rel_err),
            fmt_opt(self.fbar),
            fmt_opt(self.u0_err),
            fmt_real(self.wallclock_s),
            self.status
        )
    }
}

/// Median and quartiles (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
        })
    }
}

/// Per-system statistics, recomputable from the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemAggregate {
    pub system_id: usize,
    pub system_seed: u64,
    pub tau_u: f64,
    pub ssre_proposed: Option<Summary>,
    pub ssre_model_based: Option<Summary>,
    pub fbar_proposed: Option<Summary>,
    pub fbar_model_based: Option<Summary>,
    /// Mean `f̄` of the proposed method over mean `f̄` of the baseline.
    pub fbar_ratio: Option<f64>,
    pub failures_proposed: usize,
    pub failures_model_based: usize,
}

/// Tuning history of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTrace {
    pub system_id: usize,
    pub trial_id: usize,
    /// Exact cost of each model-free iterate on the true plant.
    pub proposed_costs: Vec<f64>,
    pub proposed_gain: Option<crate::plant::GainDocument>,
    pub model_based_gain: Option<crate::plant::GainDocument>,
    pub identified_order: Option<usize>,
    pub identification_samples: usize,
    pub model_free_time: f64,
}

/// Output trajectories of both closed loops on one plant.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDump {
    pub system_id: usize,
    pub proposed: Option<Vec<(f64, Vector)>>,
    pub model_based: Option<Vec<(f64, Vector)>>,
}

impl TrajectoryDump {
    /// `max_t y_i(t) - y*_i`, maximized over components.
    pub fn overshoot(traj: &[(f64, Vector)], y_star: &Vector) -> f64 {
        traj.iter()
            .flat_map(|(_, y)| y.iter().zip(y_star.iter()).map(|(a, b)| a - b).collect::<Vec<_>>())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<SystemAggregate>,
    pub traces: Vec<TrialTrace>,
    pub trajectories: Vec<TrajectoryDump>,
}

const FF_STREAM: u64 = 1;
const ZO_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const ID_FF_STREAM: u64 = 4;
const ID_PI_STREAM: u64 = 5;
const TRAJ_STREAM: u64 = 6;

fn elapsed(start: Instant, timing: bool) -> f64 {
    if timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

struct SystemContext {
    id: usize,
    plant: LtiPlant,
    bb: SimulatedPlant,
    u_star: Vector,
    tau_u: f64,
}

struct TrialOutcome {
    rows: [MetricRow; 2],
    trace: TrialTrace,
    traj: Option<TrajectoryDump>,
}

fn row(sys: usize, trial: usize, method: Method) -> MetricRow {
    MetricRow {
        system_id: sys,
        trial_id: trial,
        method,
        steady_state_rel_err: None,
        fbar: None,
        u0_err: None,
        wallclock_s: 0.0,
        status: "ok".into(),
    }
}

fn run_trial(cfg: &ExperimentConfig, sys: &SystemContext, trial: usize, timing: bool, want_traj: bool) -> TrialOutcome {
    let (m, p) = (cfg.plant.m, cfg.plant.p);
    let y_star = cfg.y_star();
    let seed = child_seed(cfg.master_seed, &[sys.id as u64, trial as u64]);
    let q1 = Matrix::identity(p, p) * cfg.zo.q1;
    let q2 = Matrix::identity(p, p) * cfg.zo.q2;
    let zo = cfg.zo_config(child_seed(seed, &[ZO_STREAM]));
    let eval_seed = child_seed(seed, &[EVAL_STREAM]);
    let mut traj = want_traj.then_some(TrajectoryDump { system_id: sys.id, proposed: None, model_based: None });
    let fbar = |k: &PiGain, mode: FbarMode| {
        eval_fbar(
            &sys.plant,
            k,
            &sys.u_star,
            &y_star,
            &q1,
            &q2,
            cfg.eval.n_eval,
            cfg.eval.tau_eval,
            cfg.h_sim,
            mode,
            eval_seed,
        )
    };
    let budget = model_free_budget(m, sys.tau_u, cfg.tuning.then_some((&zo, cfg.pgd.iterations)));
    let mut trace = TrialTrace {
        system_id: sys.id,
        trial_id: trial,
        proposed_costs: Vec::new(),
        proposed_gain: None,
        model_based_gain: None,
        identified_order: None,
        identification_samples: matched_samples(budget, cfg.baseline.h),
        model_free_time: budget,
    };

    // Model-free pipeline.
    let start = Instant::now();
    let mut mf = row(sys.id, trial, Method::Proposed);
    let proposed = (|| -> Result<()> {
        let kp_probe = Matrix::identity(m, p) * cfg.feedforward.kp_probe_scale;
        let ff = estimate_feedforward(&sys.bb, &kp_probe, &y_star, sys.tau_u, child_seed(seed, &[FF_STREAM]))?;
        mf.u0_err = Some((&ff.u_hat - &sys.u_star).norm());
        mf.steady_state_rel_err = Some(steady_state_rel_err(&sys.plant, &ff.u_hat, &y_star)?);
        if !cfg.tuning {
            return Ok(());
        }
        let k0 = PiGain::scaled_identity(m, p, cfg.pgd.k0_p, cfg.pgd.k0_i);
        let tr = tune_gains(&sys.bb, &k0, &ff.u_hat, &y_star, &cfg.omega(), &zo, &cfg.pgd_config(), Some(&sys.plant))?;
        let k = tr.final_gain().clone();
        trace.proposed_costs = tr.analytic_costs.clone();
        trace.proposed_gain = Some(k.to_document());
        mf.fbar = Some(fbar(&k, FbarMode::Continuous)?);
        if let Some(t) = traj.as_mut() {
            let eq = compute_equilibrium(&sys.plant, &y_star)?;
            let cl = build_closed_loop(&sys.plant, &k, &q1, &q2)?;
            let sim = ClosedLoopSimulator::new(&cl, &sys.plant, &ff.u_hat, &eq, cfg.trajectory.horizon, cfg.h_sim)?;
            t.proposed = Some(sim.output_trajectory(&y_star, &mut rng_from_seed(child_seed(seed, &[TRAJ_STREAM])))?);
        }
        Ok(())
    })();
    if let Err(e) = proposed {
        mf.status = e.tag().into();
    }
    mf.wallclock_s = elapsed(start, timing);

    // Identification-based pipeline with the same plant time.
    let start = Instant::now();
    let mut mb = row(sys.id, trial, Method::ModelBased);
    let b = &cfg.baseline;
    let id_cfg = |samples: usize, stream: u64| IdentificationConfig {
        samples,
        h: b.h,
        input_std: b.input_std,
        fir_lags: b.fir_lags,
        order: b.order,
        seed: child_seed(seed, &[stream]),
    };
    let baseline = (|| -> Result<()> {
        let ff_samples = matched_samples(model_free_budget(m, sys.tau_u, None), b.h);
        let id = identify_ho_kalman(&sys.bb, &id_cfg(ff_samples, ID_FF_STREAM))?;
        let u_id = discrete_equilibrium(&id.model, &y_star)?.u_star_d;
        mb.u0_err = Some((&u_id - &sys.u_star).norm());
        mb.steady_state_rel_err = Some(steady_state_rel_err(&sys.plant, &u_id, &y_star)?);
        if !cfg.tuning {
            trace.identified_order = Some(id.order);
            return Ok(());
        }
        let id = identify_ho_kalman(&sys.bb, &id_cfg(trace.identification_samples, ID_PI_STREAM))?;
        trace.identified_order = Some(id.order);
        let k0 = PiGain::scaled_identity(m, p, b.k0_p, b.k0_i);
        let qb1 = Matrix::identity(p, p) * b.q1;
        let qb2 = Matrix::identity(p, p) * b.q2;
        let tr = tune_gains_modelbased(&id.model, &k0, &cfg.omega(), &qb1, &qb2, b.eta, b.iterations)?;
        let k = tr.final_gain().clone();
        trace.model_based_gain = Some(k.to_document());
        mb.fbar = Some(fbar(&k, FbarMode::Zoh { h: b.h })?);
        if let Some(t) = traj.as_mut() {
            let u_id = discrete_equilibrium(&id.model, &y_star)?.u_star_d;
            let sim = ZohClosedLoop::new(&sys.plant, &k, &u_id, &y_star, b.h, &q1, &q2)?;
            t.model_based = Some(sim.rollout(cfg.trajectory.horizon, child_seed(seed, &[TRAJ_STREAM]))?.trajectory);
        }
        Ok(())
    })();
    if let Err(e) = baseline {
        mb.status = e.tag().into();
    }
    mb.wallclock_s = elapsed(start, timing);
    TrialOutcome { rows: [mf, mb], trace, traj }
}

fn aggregate(sys: &SystemContext, seed: u64, rows: &[MetricRow]) -> SystemAggregate {
    let pick = |method: Method, f: fn(&MetricRow) -> Option<f64>| -> Vec<f64> {
        rows.iter().filter(|r| r.system_id == sys.id && r.method == method).filter_map(f).collect()
    };
    let failures = |method: Method| {
        rows.iter().filter(|r| r.system_id == sys.id && r.method == method && r.status != "ok").count()
    };
    let fp = Summary::of(&pick(Method::Proposed, |r| r.fbar));
    let fm = Summary::of(&pick(Method::ModelBased, |r| r.fbar));
    SystemAggregate {
        system_id: sys.id,
        system_seed: seed,
        tau_u: sys.tau_u,
        ssre_proposed: Summary::of(&pick(Method::Proposed, |r| r.steady_state_rel_err)),
        ssre_model_based: Summary::of(&pick(Method::ModelBased, |r| r.steady_state_rel_err)),
        fbar_ratio: fp.zip(fm).map(|(a, b)| a.mean / b.mean),
        fbar_proposed: fp,
        fbar_model_based: fm,
        failures_proposed: failures(Method::Proposed),
        failures_model_based: failures(Method::ModelBased),
    }
}

/// Runs every system and trial in `(system, trial)` order. `progress` sees
/// each pair of rows as it completes. A system whose plant cannot be
/// generated or whose horizon bound is unavailable is a hard error; failures
/// inside a trial are recorded in the row status.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    timing: bool,
    mut progress: impl FnMut(&MetricRow),
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let y_star = cfg.y_star();
    let mut report =
        ExperimentReport { rows: Vec::new(), aggregates: Vec::new(), traces: Vec::new(), trajectories: Vec::new() };
    for (id, &seed) in cfg.plant.system_seeds.iter().enumerate() {
        let plant = cfg.generate_system(seed)?;
        let u_star = compute_equilibrium(&plant, &y_star)?.u_star;
        let tau_u = match cfg.feedforward.tau_u {
            Some(t) => t,
            None => {
                let kp = Matrix::identity(cfg.plant.m, cfg.plant.p) * cfg.feedforward.kp_probe_scale;
                let bounds = theorem1_bounds_for_plant(&plant, &kp, &y_star, &cfg.feedforward.bound_settings())?;
                if !bounds.applicable {
                    return Err(Error::Estimation(format!("horizon bound not applicable for system {id}")));
                }
                bounds.tau_lower
            }
        };
        let sys = SystemContext { id, bb: SimulatedPlant::new(plant.clone(), cfg.h_sim)?, plant, u_star, tau_u };
        for trial in 0..cfg.trials {
            let out = run_trial(cfg, &sys, trial, timing, cfg.trajectory.enabled && trial == 0);
            for r in &out.rows {
                progress(r);
            }
            report.rows.extend(out.rows);
            report.traces.push(out.trace);
            report.trajectories.extend(out.traj);
        }
        report.aggregates.push(aggregate(&sys, seed, &report.rows));
    }
    Ok(report)
}

pub fn rows_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn aggregates_csv(aggs: &[SystemAggregate]) -> String {
    let mut s = String::from("system_id,system_seed,tau_u,metric,method,count,mean,q1,median,q3\n");
    for a in aggs {
        let entries = [
            ("steady_state_rel_err", Method::Proposed, a.ssre_proposed),
            ("steady_state_rel_err", Method::ModelBased, a.ssre_model_based),
            ("fbar", Method::Proposed, a.fbar_proposed),
            ("fbar", Method::ModelBased, a.fbar_model_based),
        ];
        for (metric, method, summary) in entries {
            if let Some(q) = summary {
                let _ = writeln!(
                    s,
                    "{},{},{},{metric},{},{},{},{},{},{}",
                    a.system_id,
                    a.system_seed,
                    fmt_real(a.tau_u),
                    method.tag(),
                    q.count,
                    fmt_real(q.mean),
                    fmt_real(q.q1),
                    fmt_real(q.median),
                    fmt_real(q.q3)
                );
            }
        }
    }
    s
}

pub fn trajectory_csv(dump: &TrajectoryDump) -> String {
    let p =
        dump.proposed.iter().chain(&dump.model_based).flat_map(|t| t.first()).map(|(_, y)| y.len()).next().unwrap_or(0);
    let mut s = String::from("method,t");
    for i in 1..=p {
        let _ = write!(s, ",y{i}");
    }
    s.push('\n');
    for (method, traj) in [(Method::Proposed, &dump.proposed), (Method::ModelBased, &dump.model_based)] {
        for (t, y) in traj.iter().flatten() {
            let _ = write!(s, "{},{}", method.tag(), fmt_real(*t));
            for v in y.iter() {
                let _ = write!(s, ",{}", fmt_real(*v));
            }
            s.push('\n');
        }
    }
    s
}

/// gnuplot script drawing the output trajectories and the per-system `f̄`
/// ratio from the emitted CSV files.
pub fn gnuplot_script(report: &ExperimentReport, y_star: &[f64]) -> String {
    let mut s = String::from("set datafile separator ','\nset terminal pngcairo size 900,600\n");
    for d in &report.trajectories {
        for (i, ys) in y_star.iter().enumerate() {
            let col = i + 3;
            let _ = writeln!(
                s,
                "set output 'trajectory_{id}_y{c}.png'\nset xlabel 't'\nset ylabel 'y{c}'\nplot 'trajectory_{id}.csv' every ::1 using (strcol(1) eq 'proposed' ? $2 : 1/0):{col} with lines title 'proposed', \\\n     '' every ::1 using (strcol(1) eq 'model-based' ? $2 : 1/0):{col} with lines title 'model-based', \\\n     {ys} with lines dashtype 2 title 'set point'",
                id = d.system_id,
                c = i + 1,
            );
        }
    }
    s.push_str(
        "set output 'fbar_ratio.png'\nset xlabel 'system'\nset ylabel 'fbar ratio'\nset style data histograms\nplot 'summary.csv' every ::1 using 2:xtic(1) title 'proposed / model-based'\n",
    );
    s
}

pub fn summary_csv(aggs: &[SystemAggregate]) -> String {
    let mut s = String::from("system_id,fbar_ratio,median_ssre_proposed,median_ssre_model_based\n");
    for a in aggs {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            a.system_id,
            fmt_opt(a.fbar_ratio),
            fmt_opt(a.ssre_proposed.map(|q| q.median)),
            fmt_opt(a.ssre_model_based.map(|q| q.median))
        );
    }
    s
}

/// Writes `rows.csv`, `aggregates.csv`, `summary.csv`, `traces.json`,
/// `trajectory_<id>.csv` and optionally `plots.gp` into `dir`.
pub fn write_artifacts(report: &ExperimentReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("rows.csv"), rows_csv(&report.rows))?;
    std::fs::write(dir.join("aggregates.csv"), aggregates_csv(&report.aggregates))?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&report.aggregates))?;
    std::fs::write(dir.join("traces.json"), serde_json::to_string_pretty(&report.traces)? + "\n")?;
    for d in &report.trajectories {
        std::fs::write(dir.join(format!("trajectory_{}.csv", d.system_id)), trajectory_csv(d))?;
    }
    if cfg.trajectory.gnuplot {
        std::fs::write(dir.join("plots.gp"), gnuplot_script(report, &cfg.y_star))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::InitialState;
    use approx::assert_relative_eq;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            plant: PlantFamilyConfig { n: 6, m: 2, p: 2, system_seeds: vec![1] },
            trials: 1,
            ..Default::default()
        };
        cfg.feedforward.tau_u = Some(20.0);
        cfg.zo = ZoSettings { n_dirs: 2, n_sub: 2, tau: 2.0, r: 0.05, q1: 1.0, q2: 0.1, paired_noise: false };
        cfg.pgd.iterations = 2;
        cfg.pgd.eta = 1e-3;
        cfg.baseline.iterations = 50;
        cfg.baseline.fir_lags = 10;
        cfg.eval = EvalSettings { n_eval: 4, tau_eval: 5.0 };
        cfg.trajectory.horizon = 2.0;
        cfg
    }

    #[test]
    fn defaults_mirror_the_reference_setup() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!((cfg.plant.n, cfg.plant.m, cfg.plant.p, cfg.trials), (20, 2, 2, 10));
        assert_eq!((cfg.zo.n_dirs, cfg.zo.n_sub, cfg.zo.tau, cfg.zo.r), (15, 20, 10.0, 0.09));
        assert_eq!((cfg.pgd.eta, cfg.pgd.iterations, cfg.pgd.stop_test), (1e-3, 20, false));
        assert_eq!((cfg.baseline.eta, cfg.baseline.iterations, cfg.baseline.h), (1e-5, 100_000, 1e-2));
        assert_eq!((cfg.eval.n_eval, cfg.eval.tau_eval), (200, 300.0));
        assert!(matches!(ExperimentConfig::from_json(r#"{"trials": 0}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
    }

    #[test]
    fn budget_matches_reference_step_count() {
        let cfg = ExperimentConfig::default();
        let zo = cfg.zo_config(0);
        let tau_u = (32_680.0 * 0.01) / 3.0;
        let budget = model_free_budget(2, tau_u, Some((&zo, 20)));
        assert_eq!(matched_samples(budget, 0.01), 12_032_680);
    }

    #[test]
    fn steady_state_error_cases() {
        let mut rng = rng_from_seed(3);
        let plant = generate_random_plant(5, 2, 2, &mut rng).unwrap();
        let y = Vector::from_vec(vec![5.0, 5.0]);
        let eq = compute_equilibrium(&plant, &y).unwrap();
        assert!(steady_state_rel_err(&plant, &eq.u_star, &y).unwrap() < 1e-12);
        assert_relative_eq!(steady_state_rel_err(&plant, &Vector::zeros(2), &y).unwrap(), 1.0);
    }

    #[test]
    fn fbar_is_zero_at_rest() {
        let mut rng = rng_from_seed(4);
        let mut plant = generate_random_plant(4, 2, 2, &mut rng).unwrap().noiseless();
        let y = Vector::from_element(2, 5.0);
        let eq = compute_equilibrium(&plant, &y).unwrap();
        plant.init = InitialState::point(eq.x_star.clone());
        let q = Matrix::identity(2, 2);
        let k = PiGain::scaled_identity(2, 2, 0.01, 0.01);
        for mode in [FbarMode::Continuous, FbarMode::Zoh { h: 0.01 }] {
            let f = eval_fbar(&plant, &k, &eq.u_star, &y, &q, &q, 3, 5.0, 0.01, mode, 0).unwrap();
            assert!(f.abs() < 1e-18, "{mode:?}: {f}");
        }
    }

    #[test]
    fn smoke_run_populates_every_row() {
        let cfg = tiny();
        let rep = run_experiment(&cfg, false, |_| {}).unwrap();
        assert_eq!(rep.rows.len(), 2);
        for r in &rep.rows {
            assert_eq!(r.status, "ok", "{r:?}");
            assert!(r.steady_state_rel_err.unwrap() >= 0.0 && r.fbar.unwrap() >= 0.0 && r.u0_err.unwrap() >= 0.0);
        }
        let again = run_experiment(&cfg, false, |_| {}).unwrap();
        assert_eq!(rows_csv(&rep.rows), rows_csv(&again.rows));
        let agg = &rep.aggregates[0];
        assert_relative_eq!(agg.fbar_ratio.unwrap(), rep.rows[0].fbar.unwrap() / rep.rows[1].fbar.unwrap());
        assert!(rep.trajectories[0].proposed.is_some() && rep.trajectories[0].model_based.is_some());
    }

    #[test]
    fn csv_rows_have_fixed_columns() {
        let mut r = row(1, 2, Method::ModelBased);
        r.fbar = Some(0.1);
        let line = r.to_csv();
        assert_eq!(line.split(',').count(), CSV_HEADER.split(',').count());
        assert_eq!(line, "1,2,model-based,,1.0000000000000001e-1,,0.0000000000000000e0,ok");
        assert_eq!(fmt_real(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
