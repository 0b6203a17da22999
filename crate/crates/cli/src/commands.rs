use std::fs;
use std::path::{Path, PathBuf};

use pi2dof::baseline::{
    discrete_equilibrium, identify_ho_kalman, model_spectral_radius, tune_gains_modelbased, IdentificationConfig,
};
use pi2dof::blackbox::SimulatedPlant;
use pi2dof::experiment::{
    eval_fbar, matched_samples, model_free_budget, run_experiment, steady_state_rel_err, summary_csv, write_artifacts,
    ExperimentConfig, FbarMode,
};
use pi2dof::feedforward::{
    estimate_decay_constant, estimate_feedforward, theorem1_bounds_for_plant, BoundsDocument, FeedforwardDocument,
};
use pi2dof::plant::{compute_equilibrium, GainDocument};
use pi2dof::rng::child_seed;
use pi2dof::tuner::{tune_gains, TraceDocument};
use pi2dof::{ConstraintBox, Error, LtiPlant, Matrix, PiGain, Result, Vector};
use serde::Serialize;

use crate::{BaselineArgs, Cli, Command, EvalArgs, ExperimentArgs, FeedforwardArgs, GenSystemArgs, TuneArgs};

const DECAY_STREAM: u64 = 1;

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let ctx = Context { cfg, seed: cli.seed.unwrap_or(0), out_dir: cli.out_dir.clone() };
    match &cli.command {
        Command::GenSystem(a) => gen_system(&ctx, a),
        Command::Feedforward(a) => feedforward(&ctx, a),
        Command::Tune(a) => tune(&ctx, a),
        Command::Baseline(a) => baseline(&ctx, a),
        Command::Experiment(a) => experiment(&ctx, cli.seed, cli.timing, a),
        Command::Eval(a) => eval(&ctx, a),
    }
}

struct Context {
    cfg: ExperimentConfig,
    seed: u64,
    out_dir: PathBuf,
}

impl Context {
    fn write_json<T: Serialize>(&self, name: &Path, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    fn write(&self, name: &Path, text: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    fn y_star(&self, arg: Option<&str>, p: usize) -> Result<Vector> {
        let y = match arg {
            Some(s) => parse_list(s, "y-star")?,
            None => self.cfg.y_star.clone(),
        };
        if y.len() != p {
            return Err(Error::Config(format!("setpoint has {} entries but the plant has p={p}", y.len())));
        }
        Ok(Vector::from_vec(y))
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_json(&read(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_plant(path: &Path) -> Result<LtiPlant> {
    LtiPlant::from_json(&read(path)?).map(|(p, _)| p).map_err(config_error)
}

fn load_feedforward(path: &Path) -> Result<FeedforwardDocument> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Reads a gain stored directly or under `final_gain` or `gain`.
fn load_gain(path: &Path) -> Result<PiGain> {
    let value: serde_json::Value =
        serde_json::from_str(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let node = value.get("final_gain").or_else(|| value.get("gain")).unwrap_or(&value);
    let doc: GainDocument = serde_json::from_value(node.clone())
        .map_err(|e| Error::Config(format!("{}: no gain found ({e})", path.display())))?;
    PiGain::from_document(&doc).map_err(config_error)
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Json(j) => Error::Config(j.to_string()),
        other => other,
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("{what}: cannot parse '{t}' as a number"))))
        .collect()
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    match parse_list(s, what)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{what} expects two comma-separated values"))),
    }
}

fn parse_auto<T: std::str::FromStr>(s: &str, what: &str) -> Result<Option<T>> {
    if s == "auto" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Config(format!("{what}: expected 'auto' or a number, got '{s}'")))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn kp_probe(arg: Option<&str>, cfg: &ExperimentConfig, m: usize, p: usize) -> Result<Matrix> {
    let Some(arg) = arg else {
        return Ok(Matrix::identity(m, p) * cfg.feedforward.kp_probe_scale);
    };
    if let Ok(scale) = arg.parse::<f64>() {
        return Ok(Matrix::identity(m, p) * scale);
    }
    let data: Vec<Vec<f64>> =
        serde_json::from_str(&read(Path::new(arg))?).map_err(|e| Error::Config(format!("{arg}: {e}")))?;
    if data.len() != m || data.iter().any(|r| r.len() != p) {
        return Err(Error::Config(format!("probe gain in {arg} must be {m} x {p}")));
    }
    Ok(Matrix::from_fn(m, p, |i, j| data[i][j]))
}

fn gen_system(ctx: &Context, a: &GenSystemArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    cfg.plant.n = a.n.unwrap_or(cfg.plant.n);
    cfg.plant.m = a.m.unwrap_or(cfg.plant.m);
    cfg.plant.p = a.p.unwrap_or(cfg.plant.p);
    let mut plant = cfg.generate_system(ctx.seed).map_err(|e| match e {
        Error::Dimension(s) => Error::Config(s),
        other => other,
    })?;
    if a.noiseless {
        plant = plant.noiseless();
    }
    let path = ctx.write(&a.out, &(plant.to_json(Some(ctx.seed))? + "\n"))?;
    println!("wrote {} (n={}, m={}, p={})", path.display(), plant.n(), plant.m(), plant.p());
    Ok(())
}

/// Shortens the experiment until the transient is visible above the noise
/// floor in the fit window.
fn decay_constant(bb: &SimulatedPlant, kp: &Matrix, y_star: &Vector, tau_large: f64, seed: u64) -> Result<f64> {
    let mut tau = tau_large;
    for _ in 0..8 {
        match estimate_decay_constant(bb, kp, y_star, tau, seed) {
            Err(Error::Estimation(_)) => tau /= 2.0,
            other => return other,
        }
    }
    estimate_decay_constant(bb, kp, y_star, tau, seed)
}

#[derive(Serialize)]
struct FeedforwardOutput {
    #[serde(flatten)]
    estimate: FeedforwardDocument,
    diagnostics: FeedforwardDiagnostics,
}

#[derive(Serialize)]
struct FeedforwardDiagnostics {
    u_star: Vec<f64>,
    u0_err: f64,
    steady_state_rel_err: f64,
    tau_u_source: &'static str,
    z_norm_estimate: Option<f64>,
    bounds: Option<BoundsDocument>,
}

fn feedforward(ctx: &Context, a: &FeedforwardArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let plant = load_plant(&a.plant)?;
    let (m, p) = (plant.m(), plant.p());
    let y_star = ctx.y_star(a.y_star.as_deref(), p)?;
    let kp = kp_probe(a.kp_probe.as_deref(), cfg, m, p)?;
    let bb = SimulatedPlant::new(plant.clone(), cfg.h_sim)?;
    let settings = cfg.feedforward.bound_settings();
    let bounds = theorem1_bounds_for_plant(&plant, &kp, &y_star, &settings).ok();
    let mut z_est = None;
    let (tau_u, source) = match a.tau_u.as_deref() {
        Some("auto") => {
            let b = bounds.as_ref().ok_or_else(|| Error::Estimation("horizon bound constants unavailable".into()))?;
            let z = decay_constant(&bb, &kp, &y_star, a.tau_large, child_seed(ctx.seed, &[DECAY_STREAM]))?;
            z_est = Some(z);
            (b.horizon_with_decay(z), "decay-estimate")
        }
        Some(s) => (parse_auto::<f64>(s, "tau-u")?.expect("not auto"), "given"),
        None => match cfg.feedforward.tau_u {
            Some(t) => (t, "config"),
            None => match &bounds {
                Some(b) if b.applicable => (b.tau_lower, "bound"),
                _ => return Err(Error::Estimation("horizon bound not applicable; pass --tau-u".into())),
            },
        },
    };
    if !(tau_u > 0.0 && tau_u.is_finite()) {
        return Err(Error::Config(format!("tau-u must be positive, got {tau_u}")));
    }
    let est = estimate_feedforward(&bb, &kp, &y_star, tau_u, ctx.seed)?;
    let u_star = compute_equilibrium(&plant, &y_star)?.u_star;
    let out = FeedforwardOutput {
        diagnostics: FeedforwardDiagnostics {
            u_star: u_star.iter().copied().collect(),
            u0_err: (&est.u_hat - &u_star).norm(),
            steady_state_rel_err: steady_state_rel_err(&plant, &est.u_hat, &y_star)?,
            tau_u_source: source,
            z_norm_estimate: z_est,
            bounds: bounds.map(|b| b.to_document()),
        },
        estimate: est.to_document(),
    };
    let path = ctx.write_json(&a.out, &out)?;
    println!(
        "wrote {} (tau_u={:.6}, u0_err={:.6e}, min_sv_E={:.6e})",
        path.display(),
        tau_u,
        out.diagnostics.u0_err,
        out.estimate.min_sv_e
    );
    Ok(())
}

#[derive(Serialize)]
struct TuneOutput {
    final_gain: GainDocument,
    u_hat: Vec<f64>,
    trace: TraceDocument,
}

fn tune(ctx: &Context, a: &TuneArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    let plant = load_plant(&a.plant)?;
    let (m, p) = (plant.m(), plant.p());
    let y_star = ctx.y_star(a.y_star.as_deref(), p)?;
    if let Some(o) = &a.omega {
        (cfg.pgd.kp_radius, cfg.pgd.ki_radius) = parse_pair(o, "omega")?;
    }
    if let Some(k) = &a.k0 {
        (cfg.pgd.k0_p, cfg.pgd.k0_i) = parse_pair(k, "k0")?;
    }
    cfg.zo.n_dirs = a.n_dirs.unwrap_or(cfg.zo.n_dirs);
    cfg.zo.n_sub = a.n_sub.unwrap_or(cfg.zo.n_sub);
    cfg.zo.tau = a.tau.unwrap_or(cfg.zo.tau);
    cfg.zo.r = a.r.unwrap_or(cfg.zo.r);
    cfg.zo.q1 = a.q1.unwrap_or(cfg.zo.q1);
    cfg.zo.q2 = a.q2.unwrap_or(cfg.zo.q2);
    cfg.zo.paired_noise |= a.paired_noise;
    cfg.pgd.eta = a.eta.unwrap_or(cfg.pgd.eta);
    cfg.pgd.iterations = a.iterations.unwrap_or(cfg.pgd.iterations);
    cfg.pgd.stop_test = cfg.pgd.stop_test && !a.no_stop_test;
    let mut zo = cfg.zo_config(ctx.seed);
    zo.q1 = Matrix::identity(p, p) * cfg.zo.q1;
    zo.q2 = Matrix::identity(p, p) * cfg.zo.q2;
    let omega = ConstraintBox::new(cfg.pgd.kp_radius, cfg.pgd.ki_radius).map_err(config_error)?;
    let u_hat = match &a.ff {
        Some(f) => Vector::from_vec(load_feedforward(f)?.u_hat),
        None => compute_equilibrium(&plant, &y_star)?.u_star,
    };
    if u_hat.len() != m {
        return Err(Error::Config(format!("feedforward has {} entries but the plant has m={m}", u_hat.len())));
    }
    let k0 = PiGain::scaled_identity(m, p, cfg.pgd.k0_p, cfg.pgd.k0_i);
    let bb = SimulatedPlant::new(plant.clone(), cfg.h_sim)?;
    let tr = tune_gains(&bb, &k0, &u_hat, &y_star, &omega, &zo, &cfg.pgd_config(), Some(&plant))?;
    let out = TuneOutput {
        final_gain: tr.final_gain().to_document(),
        u_hat: u_hat.iter().copied().collect(),
        trace: tr.to_document(),
    };
    let path = ctx.write_json(&a.trace, &out)?;
    let costs = &tr.analytic_costs;
    println!(
        "wrote {} ({} iterations, cost {:.6} -> {:.6})",
        path.display(),
        tr.iterates.len() - 1,
        costs.first().copied().unwrap_or(f64::NAN),
        costs.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct DiscreteModelDocument {
    h: f64,
    #[serde(rename = "Ad")]
    ad: Vec<Vec<f64>>,
    #[serde(rename = "Bd")]
    bd: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "Wd")]
    wd: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct BaselineOutput {
    gain: GainDocument,
    samples: usize,
    order: usize,
    stable: bool,
    spectral_radius: f64,
    hankel_sv: Vec<f64>,
    u_star_id: Vec<f64>,
    steady_state_rel_err: f64,
    initial_cost: f64,
    final_cost: f64,
    model: DiscreteModelDocument,
}

fn baseline(ctx: &Context, a: &BaselineArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let b = &cfg.baseline;
    let plant = load_plant(&a.plant)?;
    let (m, p) = (plant.m(), plant.p());
    let y_star = ctx.y_star(a.y_star.as_deref(), p)?;
    let h = a.h.unwrap_or(b.h);
    let samples = match parse_auto::<usize>(&a.n_id, "Nid")? {
        Some(s) => s,
        None => {
            let tau_u = match (&a.ff, cfg.feedforward.tau_u) {
                (Some(f), _) => load_feedforward(f)?.tau_u,
                (None, Some(t)) => t,
                (None, None) => {
                    let kp = Matrix::identity(m, p) * cfg.feedforward.kp_probe_scale;
                    let bounds = theorem1_bounds_for_plant(&plant, &kp, &y_star, &cfg.feedforward.bound_settings())?;
                    if !bounds.applicable {
                        return Err(Error::Estimation("horizon bound not applicable; pass --ff or --Nid".into()));
                    }
                    bounds.tau_lower
                }
            };
            let zo = cfg.zo_config(ctx.seed);
            let budget = model_free_budget(m, tau_u, cfg.tuning.then_some((&zo, cfg.pgd.iterations)));
            matched_samples(budget, h)
        }
    };
    let id_cfg = IdentificationConfig {
        samples,
        h,
        input_std: b.input_std,
        fir_lags: b.fir_lags,
        order: parse_auto(&a.order, "order")?.or(b.order),
        seed: ctx.seed,
    };
    let bb = SimulatedPlant::new(plant.clone(), cfg.h_sim)?;
    let id = identify_ho_kalman(&bb, &id_cfg)?;
    let u_id = discrete_equilibrium(&id.model, &y_star)?.u_star_d;
    let k0 = PiGain::scaled_identity(m, p, b.k0_p, b.k0_i);
    let q1 = Matrix::identity(p, p) * b.q1;
    let q2 = Matrix::identity(p, p) * b.q2;
    let tr = tune_gains_modelbased(
        &id.model,
        &k0,
        &cfg.omega(),
        &q1,
        &q2,
        a.eta.unwrap_or(b.eta),
        a.iters.unwrap_or(b.iterations),
    )?;
    let md = &id.model;
    let out = BaselineOutput {
        gain: tr.final_gain().to_document(),
        samples,
        order: id.order,
        stable: id.stable,
        spectral_radius: model_spectral_radius(md),
        hankel_sv: id.hankel_sv.clone(),
        u_star_id: u_id.iter().copied().collect(),
        steady_state_rel_err: steady_state_rel_err(&plant, &u_id, &y_star)?,
        initial_cost: tr.analytic_costs.first().copied().unwrap_or(f64::NAN),
        final_cost: tr.analytic_costs.last().copied().unwrap_or(f64::NAN),
        model: DiscreteModelDocument {
            h: md.h,
            ad: rows(&md.ad),
            bd: rows(&md.bd),
            c: rows(&md.c),
            wd: rows(&md.wd),
            v: rows(&md.v),
        },
    };
    let path = ctx.write_json(&a.out, &out)?;
    println!(
        "wrote {} (N_id={samples}, order={}, model cost {:.6} -> {:.6})",
        path.display(),
        id.order,
        out.initial_cost,
        out.final_cost
    );
    Ok(())
}

fn experiment(ctx: &Context, seed: Option<u64>, timing: bool, a: &ExperimentArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    cfg.trials = a.trials.unwrap_or(cfg.trials);
    if let Some(k) = a.systems {
        if k == 0 || k > cfg.plant.system_seeds.len() {
            return Err(Error::Config(format!("--systems must be in 1..={}", cfg.plant.system_seeds.len())));
        }
        cfg.plant.system_seeds.truncate(k);
    }
    cfg.validate()?;
    let report = run_experiment(&cfg, timing, |r| {
        if a.progress {
            eprintln!("system {} trial {} {}: {}", r.system_id, r.trial_id, r.method.tag(), r.status);
        }
    })?;
    fs::create_dir_all(&ctx.out_dir)?;
    write_artifacts(&report, &cfg, &ctx.out_dir)?;
    print!("{}", summary_csv(&report.aggregates));
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    fbar: f64,
    mode: &'static str,
    h: Option<f64>,
    n_eval: usize,
    tau_eval: f64,
    u0: Vec<f64>,
    steady_state_rel_err: f64,
}

fn eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let plant = load_plant(&a.plant)?;
    let (m, p) = (plant.m(), plant.p());
    let y_star = ctx.y_star(a.y_star.as_deref(), p)?;
    let k = load_gain(&a.gain)?;
    if k.m() != m || k.p() != p {
        return Err(Error::Config(format!("gain is {} x {} but the plant needs {m} x {p}", k.m(), k.p())));
    }
    let u0 = match &a.ff {
        Some(f) => Vector::from_vec(load_feedforward(f)?.u_hat),
        None => compute_equilibrium(&plant, &y_star)?.u_star,
    };
    let (mode, tag, h) = match a.mode.as_str() {
        "continuous" => (FbarMode::Continuous, "continuous", None),
        "zoh" => {
            let h = a.h.unwrap_or(cfg.baseline.h);
            (FbarMode::Zoh { h }, "zoh", Some(h))
        }
        other => return Err(Error::Config(format!("mode must be 'continuous' or 'zoh', got '{other}'"))),
    };
    let q1 = Matrix::identity(p, p) * a.q1.unwrap_or(cfg.zo.q1);
    let q2 = Matrix::identity(p, p) * a.q2.unwrap_or(cfg.zo.q2);
    let n_eval = a.n_eval.unwrap_or(cfg.eval.n_eval);
    let tau_eval = a.tau_eval.unwrap_or(cfg.eval.tau_eval);
    let fbar = eval_fbar(&plant, &k, &u0, &y_star, &q1, &q2, n_eval, tau_eval, cfg.h_sim, mode, ctx.seed)?;
    let out = EvalOutput {
        fbar,
        mode: tag,
        h,
        n_eval,
        tau_eval,
        u0: u0.iter().copied().collect(),
        steady_state_rel_err: steady_state_rel_err(&plant, &u0, &y_star)?,
    };
    let path = ctx.write_json(&a.out, &out)?;
    println!("wrote {} (fbar={fbar:.6})", path.display());
    Ok(())
}
