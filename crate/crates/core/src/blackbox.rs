//! Experiment interface between the model-free algorithms and a plant.
//!
//! Feedforward estimation, gain tuning and identification only ever see a
//! plant through [`BlackBoxPlant`]: they choose gains, feedforward inputs,
//! horizons and seeds, and get measured errors or outputs back. No model
//! matrices cross this boundary. [`SimulatedPlant`] implements it with the
//! exact sampled simulator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linmath::{
    max_real_eigenvalue, psd_factor, standard_normal_vector, van_loan, Matrix, Vector, STABILITY_MARGIN,
};
use crate::plant::{
    build_closed_loop, check_state, compute_equilibrium, ClosedLoopSimulator, Equilibrium, ExactPropagator, LtiPlant,
    PiGain, RolloutSample,
};
use crate::rng::rng_from_seed;

/// One prepared PI experiment (fixed gain, feedforward, set point, horizon).
pub trait PiRun {
    /// Runs the loop from a fresh initial state and reports `e(τ)`, `z(τ)`
    /// and the stage cost `e^T Q1 e + z^T Q2 z` at the horizon.
    fn rollout(&self, seed: u64) -> Result<RolloutSample>;

    /// One rollout per seed. On failure, reports the position of the first
    /// failing seed together with its error.
    fn rollouts(&self, seeds: &[u64]) -> std::result::Result<Vec<RolloutSample>, (usize, Error)> {
        seeds.iter().enumerate().map(|(j, &s)| self.rollout(s).map_err(|e| (j, e))).collect()
    }
}

/// One prepared proportional-control experiment `u = K_P e + u0`.
pub trait PRun {
    /// Measured tracking error at the horizon.
    fn final_error(&self, seed: u64) -> Result<Vector>;
    /// Measured output on the sampling grid, `t = 0` through the horizon.
    fn output_trajectory(&self, seed: u64) -> Result<Vec<(f64, Vector)>>;
}

/// Sampled open-loop access: measure `y_k`, then hold `u_k` for one period.
pub trait ZohSession {
    fn measure(&mut self) -> Vector;
    fn apply(&mut self, u: &Vector) -> Result<()>;
}

pub trait BlackBoxPlant {
    type Pi: PiRun;
    type P: PRun;
    type Session: ZohSession;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn pi_run(&self, k: &PiGain, u0: &Vector, y_star: &Vector, q1: &Matrix, q2: &Matrix, tau: f64) -> Result<Self::Pi>;
    fn p_run(&self, kp: &Matrix, u0: &Vector, y_star: &Vector, tau: f64) -> Result<Self::P>;
    fn zoh_session(&self, h: f64, seed: u64) -> Result<Self::Session>;
}

/// Exact simulation of an [`LtiPlant`] on a grid of step `h_sim`.
#[derive(Debug, Clone)]
pub struct SimulatedPlant {
    plant: LtiPlant,
    h_sim: f64,
}

impl SimulatedPlant {
    pub fn new(plant: LtiPlant, h_sim: f64) -> Result<Self> {
        if !(h_sim > 0.0 && h_sim.is_finite()) {
            return Err(Error::Domain(format!("sampling step must be positive, got {h_sim}")));
        }
        Ok(Self { plant, h_sim })
    }

    pub fn plant(&self) -> &LtiPlant {
        &self.plant
    }

    pub fn h_sim(&self) -> f64 {
        self.h_sim
    }
}

pub struct SimulatedPiRun {
    sim: ClosedLoopSimulator,
}

impl PiRun for SimulatedPiRun {
    fn rollout(&self, seed: u64) -> Result<RolloutSample> {
        self.sim.rollout(&mut rng_from_seed(seed))
    }

    fn rollouts(&self, seeds: &[u64]) -> std::result::Result<Vec<RolloutSample>, (usize, Error)> {
        self.sim.rollout_batch(seeds)
    }
}

pub struct SimulatedPRun {
    prop: ExactPropagator,
    eq: Equilibrium,
    plant: LtiPlant,
    v_factor: Matrix,
}

impl SimulatedPRun {
    fn start(&self, rng: &mut crate::rng::SimRng) -> Vector {
        self.plant.init.sample(self.plant.n(), rng) - &self.eq.x_star
    }

    fn measured_error(&self, ex: &Vector, rng: &mut crate::rng::SimRng) -> Vector {
        -(&self.plant.c * ex) + &self.v_factor * standard_normal_vector(self.plant.p(), rng)
    }
}

impl PRun for SimulatedPRun {
    fn final_error(&self, seed: u64) -> Result<Vector> {
        let mut rng = rng_from_seed(seed);
        let mut ex = self.start(&mut rng);
        self.prop.run(&mut ex, &mut rng, |_, _, _| {})?;
        Ok(self.measured_error(&ex, &mut rng))
    }

    fn output_trajectory(&self, seed: u64) -> Result<Vec<(f64, Vector)>> {
        let mut rng = rng_from_seed(seed);
        let mut ex = self.start(&mut rng);
        let mut out = Vec::with_capacity(self.prop.grid_len());
        self.prop.run(&mut ex, &mut rng, |t, x, r| {
            out.push((t, &self.eq.y_star - self.measured_error(x, r)));
        })?;
        Ok(out)
    }
}

pub struct SimulatedSession {
    ad: Matrix,
    bd: Matrix,
    wd_factor: Matrix,
    c: Matrix,
    v_factor: Matrix,
    x: Vector,
    scratch: Vector,
    w: Vector,
    v: Vector,
    rng: crate::rng::SimRng,
    t: f64,
    h: f64,
}

fn fill_standard_normal(v: &mut Vector, rng: &mut crate::rng::SimRng) {
    for x in v.iter_mut() {
        *x = rng.sample(rand_distr::StandardNormal);
    }
}

impl ZohSession for SimulatedSession {
    fn measure(&mut self) -> Vector {
        fill_standard_normal(&mut self.v, &mut self.rng);
        let mut y = &self.c * &self.x;
        y.gemv(1.0, &self.v_factor, &self.v, 1.0);
        y
    }

    fn apply(&mut self, u: &Vector) -> Result<()> {
        fill_standard_normal(&mut self.w, &mut self.rng);
        self.scratch.gemv(1.0, &self.bd, u, 0.0);
        self.scratch.gemv(1.0, &self.ad, &self.x, 1.0);
        self.scratch.gemv(1.0, &self.wd_factor, &self.w, 1.0);
        std::mem::swap(&mut self.x, &mut self.scratch);
        self.t += self.h;
        check_state(&self.x, self.t)
    }
}

impl BlackBoxPlant for SimulatedPlant {
    type Pi = SimulatedPiRun;
    type P = SimulatedPRun;
    type Session = SimulatedSession;

    fn input_dim(&self) -> usize {
        self.plant.m()
    }

    fn output_dim(&self) -> usize {
        self.plant.p()
    }

    fn pi_run(
        &self,
        k: &PiGain,
        u0: &Vector,
        y_star: &Vector,
        q1: &Matrix,
        q2: &Matrix,
        tau: f64,
    ) -> Result<SimulatedPiRun> {
        let eq = compute_equilibrium(&self.plant, y_star)?;
        let cl = build_closed_loop(&self.plant, k, q1, q2)?;
        Ok(SimulatedPiRun { sim: ClosedLoopSimulator::new(&cl, &self.plant, u0, &eq, tau, self.h_sim)? })
    }

    fn p_run(&self, kp: &Matrix, u0: &Vector, y_star: &Vector, tau: f64) -> Result<SimulatedPRun> {
        let plant = &self.plant;
        if kp.shape() != (plant.m(), plant.p()) || u0.len() != plant.m() {
            return Err(Error::Dimension("probe gain must be m x p and u0 of length m".into()));
        }
        let eq = compute_equilibrium(plant, y_star)?;
        let bkp = &plant.b * kp;
        let a_k = &plant.a - &bkp * &plant.c;
        let margin = max_real_eigenvalue(&a_k);
        if margin >= -STABILITY_MARGIN {
            return Err(Error::Stability { what: "probe gain closed loop A - B K_P C", margin });
        }
        let wint = &plant.w + &bkp * &plant.v * bkp.transpose();
        let prop = ExactPropagator::new(&a_k, &plant.b, &(u0 - &eq.u_star), &wint, tau, self.h_sim)?;
        Ok(SimulatedPRun { prop, eq, plant: plant.clone(), v_factor: psd_factor(&plant.v) })
    }

    fn zoh_session(&self, h: f64, seed: u64) -> Result<SimulatedSession> {
        let plant = &self.plant;
        let vl = van_loan(&plant.a, &plant.b, &plant.w, h)?;
        let mut rng = rng_from_seed(seed);
        let x = plant.init.sample(plant.n(), &mut rng);
        Ok(SimulatedSession {
            wd_factor: psd_factor(&vl.wd),
            ad: vl.ad,
            bd: vl.bd,
            c: plant.c.clone(),
            v_factor: psd_factor(&plant.v),
            scratch: Vector::zeros(x.len()),
            w: Vector::zeros(x.len()),
            v: Vector::zeros(plant.p()),
            x,
            rng,
            t: 0.0,
            h,
        })
    }
}
