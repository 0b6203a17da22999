use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pi2dof::baseline::{discrete_cost_gradient, identify_ho_kalman, IdentificationConfig};
use pi2dof::blackbox::SimulatedPlant;
use pi2dof::linmath::{solve_lyapunov_continuous, solve_lyapunov_discrete, van_loan};
use pi2dof::oracle::analytic_gradient;
use pi2dof::plant::{build_closed_loop, compute_equilibrium, generate_random_plant, ClosedLoopSimulator};
use pi2dof::rng::rng_from_seed;
use pi2dof::tuner::estimate_gradient;
use pi2dof::{LtiPlant, Matrix, PiGain, Vector, ZoConfig};

/// Reference-size plant: n = 20, m = p = 2.
fn plant() -> LtiPlant {
    generate_random_plant(20, 2, 2, &mut rng_from_seed(0)).unwrap()
}

fn weights() -> (Matrix, Matrix) {
    (Matrix::identity(2, 2) * 200.0, Matrix::identity(2, 2) * 20.0)
}

fn lyapunov(c: &mut Criterion) {
    let plant = plant();
    let (q1, q2) = weights();
    let cl = build_closed_loop(&plant, &PiGain::scaled_identity(2, 2, 1.0, 1.0), &q1, &q2).unwrap();
    c.bench_function("lyapunov_continuous_22", |b| {
        b.iter(|| solve_lyapunov_continuous(black_box(&cl.abar_k), black_box(&cl.wtilde_k)).unwrap())
    });
    let ad = van_loan(&cl.abar_k, &cl.bbar, &cl.wtilde_k, 0.01).unwrap().ad;
    c.bench_function("lyapunov_discrete_22", |b| {
        b.iter(|| solve_lyapunov_discrete(black_box(&ad), black_box(&cl.wtilde_k)).unwrap())
    });
    c.bench_function("van_loan_22", |b| {
        b.iter(|| van_loan(black_box(&cl.abar_k), &cl.bbar, &cl.wtilde_k, 0.01).unwrap())
    });
}

fn gradients(c: &mut Criterion) {
    let plant = plant();
    let (q1, q2) = weights();
    let k = PiGain::scaled_identity(2, 2, 1.0, 1.0);
    c.bench_function("analytic_gradient_n20", |b| {
        b.iter(|| analytic_gradient(&build_closed_loop(&plant, black_box(&k), &q1, &q2).unwrap()).unwrap())
    });
    let model = pi2dof::baseline::discretize_zoh(&plant, 0.01).unwrap();
    let kd = PiGain::scaled_identity(2, 2, 0.01, 0.01);
    c.bench_function("discrete_gradient_n20", |b| {
        b.iter(|| discrete_cost_gradient(&model, black_box(&kd), &q1, &q2).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let plant = plant();
    let (q1, q2) = weights();
    let y_star = Vector::from_element(2, 5.0);
    let eq = compute_equilibrium(&plant, &y_star).unwrap();
    let k = PiGain::scaled_identity(2, 2, 1.0, 1.0);
    let cl = build_closed_loop(&plant, &k, &q1, &q2).unwrap();
    let sim = ClosedLoopSimulator::new(&cl, &plant, &eq.u_star, &eq, 10.0, 0.01).unwrap();
    let seeds: Vec<u64> = (0..20).collect();
    c.bench_function("rollout_batch_20x1000", |b| b.iter(|| sim.rollout_batch(black_box(&seeds)).unwrap()));

    let bb = SimulatedPlant::new(plant.clone(), 0.01).unwrap();
    let zo =
        ZoConfig { directions: 3, inner_samples: 4, tau: 10.0, r: 0.09, q1, q2, master_seed: 1, paired_noise: false };
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("zo_gradient_24_rollouts", |b| {
        b.iter(|| estimate_gradient(&bb, black_box(&k), &eq.u_star, &y_star, &zo, 0).unwrap())
    });
    let id = IdentificationConfig::new(20_000, 0.01, 3);
    group.bench_function("ho_kalman_20k_samples", |b| b.iter(|| identify_ho_kalman(&bb, black_box(&id)).unwrap()));
    group.finish();
}

criterion_group!(benches, lyapunov, gradients, simulation);
criterion_main!(benches);
