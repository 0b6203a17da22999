//! Model-based comparison pipeline: zero-order-hold discretization,
//! Ho-Kalman identification from sampled input/output data, the discrete
//! equilibrium feedforward, projected gradient on the identified model with
//! exact discrete gradients, and simulation of the sampled-data PI loop.

use rand::Rng;

use crate::blackbox::{BlackBoxPlant, ZohSession};
use crate::error::{Error, Result};
use crate::linmath::{
    block_diag, hstack, is_schur_stable, psd_factor, right_pinv, solve_lyapunov_discrete, spectral_radius,
    standard_normal_vector, symmetrize, van_loan, vstack, Matrix, Vector,
};
use crate::oracle::CostGradient;
use crate::plant::{augmented_noise, compute_equilibrium, LtiPlant, PiGain, RolloutSample};
use crate::rng::{rng_from_seed, SimRng};
use crate::tuner::{project_onto_omega, ConstraintBox, TuneTrace};

/// Discrete-time model `x_{k+1} = A_d x_k + B_d u_k + w_k`, `y_k = C x_k + v_k`
/// with `w_k ~ N(0, W_d)` and `v_k ~ N(0, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePlant {
    pub ad: Matrix,
    pub bd: Matrix,
    pub c: Matrix,
    pub wd: Matrix,
    pub v: Matrix,
    pub h: f64,
}

impl DiscretePlant {
    pub fn n(&self) -> usize {
        self.ad.nrows()
    }

    pub fn m(&self) -> usize {
        self.bd.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Markov parameters `C A_d^k B_d`, `k = 0 .. count - 1`.
    pub fn markov_parameters(&self, count: usize) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(count);
        let mut ab = self.bd.clone();
        for _ in 0..count {
            out.push(&self.c * &ab);
            ab = &self.ad * ab;
        }
        out
    }

    /// `C (z I - A_d)^{-1} B_d` at `z = exp(i ω h)`, as (real, imaginary) parts.
    pub fn frequency_response(&self, omega: f64) -> Result<(Matrix, Matrix)> {
        let n = self.n();
        let (c, s) = ((omega * self.h).cos(), (omega * self.h).sin());
        // (zI - A)(X + iY) = B  <=>  [[cI - A, -sI], [sI, cI - A]] [X; Y] = [B; 0]
        let re = Matrix::identity(n, n) * c - &self.ad;
        let im = Matrix::identity(n, n) * s;
        let big = vstack(&hstack(&re, &(-&im)), &hstack(&im, &re));
        let rhs = vstack(&self.bd, &Matrix::zeros(n, self.m()));
        let sol = big.lu().solve(&rhs).ok_or(Error::Singular("resolvent at the requested frequency"))?;
        Ok((&self.c * sol.rows(0, n), &self.c * sol.rows(n, n)))
    }
}

/// Exact zero-order-hold discretization with step `h`.
pub fn discretize_zoh(plant: &LtiPlant, h: f64) -> Result<DiscretePlant> {
    let vl = van_loan(&plant.a, &plant.b, &plant.w, h)?;
    Ok(DiscretePlant { ad: vl.ad, bd: vl.bd, c: plant.c.clone(), wd: vl.wd, v: plant.v.clone(), h })
}

/// Settings of the identification experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationConfig {
    /// Number of sampled input/output pairs `N_id`.
    pub samples: usize,
    pub h: f64,
    /// Standard deviation of the white excitation input.
    pub input_std: f64,
    /// FIR length `L`; the block Hankel matrix is `L/2 x L/2` blocks.
    pub fir_lags: usize,
    /// Model order; `None` picks the largest ratio gap in the Hankel spectrum.
    pub order: Option<usize>,
    pub seed: u64,
}

impl IdentificationConfig {
    pub fn new(samples: usize, h: f64, seed: u64) -> Self {
        Self { samples, h, input_std: 1.0, fir_lags: 50, order: None, seed }
    }
}

/// Identified discrete model and diagnostics.
#[derive(Debug, Clone)]
pub struct IdentifiedModel {
    pub model: DiscretePlant,
    pub hankel_sv: Vec<f64>,
    pub order: usize,
    /// FIR estimates of `C A^k B`, `k = 0 .. L - 1`.
    pub markov: Vec<Matrix>,
    /// False when the realized `A_Id` is not Schur stable.
    pub stable: bool,
}

/// Lagged products `Σ_j u_{j+d} u_j^T` and cross products with the output.
struct LagSums {
    m: usize,
    p: usize,
    lags: usize,
}

impl LagSums {
    /// Normal equations of `y_k ≈ Σ_{i=1}^{L} G_i u_{k-i}` over `k = L .. N-1`.
    fn normal_equations(&self, u: &[f64], y: &[f64], n: usize) -> (Matrix, Matrix) {
        let (m, p, l) = (self.m, self.p, self.lags);
        // lag[d * m * m + r * m + c] = Σ_k u_k[r] u_{k-d}[c]
        let mut lag = vec![0.0; l * m * m];
        let head = (l - 1).min(n);
        for k in 0..head {
            let uk = &u[k * m..(k + 1) * m];
            for d in 0..=k {
                for (r, &ur) in uk.iter().enumerate() {
                    for c in 0..m {
                        lag[d * m * m + r * m + c] += ur * u[(k - d) * m + c];
                    }
                }
            }
        }
        // From k = L - 1 on, the window u_{k-L+1} .. u_k is complete:
        // win_acc[r][q] += u_k[r] * window[q], an axpy per input channel.
        let mut win_acc = vec![vec![0.0; l * m]; m];
        for k in head..n {
            let win = &u[(k + 1 - l) * m..(k + 1) * m];
            for (r, acc) in win_acc.iter_mut().enumerate() {
                let ur = u[k * m + r];
                for (a, &w) in acc.iter_mut().zip(win) {
                    *a += ur * w;
                }
            }
        }
        for d in 0..l {
            for r in 0..m {
                for c in 0..m {
                    lag[d * m * m + r * m + c] += win_acc[r][(l - 1 - d) * m + c];
                }
            }
        }
        let full: Vec<Matrix> =
            (0..l).map(|d| Matrix::from_row_slice(m, m, &lag[d * m * m..(d + 1) * m * m])).collect();
        let outer = |j: usize, d: usize| -> Matrix {
            let a = Vector::from_column_slice(&u[(j + d) * m..(j + d + 1) * m]);
            let b = Vector::from_column_slice(&u[j * m..(j + 1) * m]);
            a * b.transpose()
        };
        let mut gram = Matrix::zeros(l * m, l * m);
        for a in 1..=l {
            for b in a..=l {
                // Σ_{k=L}^{n-1} u_{k-a} u_{k-b}^T = Σ_{j=L-b}^{n-1-b} u_{j+d} u_j^T, d = b - a
                let d = b - a;
                let mut blk = full[d].clone();
                for j in (n - b)..(n - d) {
                    blk -= outer(j, d);
                }
                for j in 0..(l - b) {
                    blk -= outer(j, d);
                }
                gram.view_mut(((a - 1) * m, (b - 1) * m), (m, m)).copy_from(&blk);
                if a != b {
                    gram.view_mut(((b - 1) * m, (a - 1) * m), (m, m)).copy_from(&blk.transpose());
                }
            }
        }
        // acc[c][q] = Σ_k y_k[c] window_k[q] with window_k = u_{k-L} .. u_{k-1}
        let mut acc = vec![vec![0.0; l * m]; p];
        for k in l..n {
            let win = &u[(k - l) * m..k * m];
            for (c, ac) in acc.iter_mut().enumerate() {
                let yc = y[k * p + c];
                for (a, &w) in ac.iter_mut().zip(win) {
                    *a += yc * w;
                }
            }
        }
        let mut cross = Matrix::zeros(l * m, p);
        for i in 1..=l {
            for r in 0..m {
                for c in 0..p {
                    cross[((i - 1) * m + r, c)] = acc[c][(l - i) * m + r];
                }
            }
        }
        (gram, cross)
    }
}

/// Ho-Kalman identification from one open-loop experiment.
///
/// The black box is driven by white Gaussian input for `samples` periods.
/// Markov parameters come from least-squares FIR regression, the model from a
/// balanced realization of the block Hankel matrix. The noise covariances are
/// a heuristic: `W_Id = σ_w² I` and `V_Id = σ_v² I` are fitted to the lag-0
/// and lag-1 autocovariance of the FIR residual.
pub fn identify_ho_kalman<P: BlackBoxPlant>(plant: &P, cfg: &IdentificationConfig) -> Result<IdentifiedModel> {
    let (m, p) = (plant.input_dim(), plant.output_dim());
    let l = cfg.fir_lags;
    if l < 2 || !l.is_multiple_of(2) {
        return Err(Error::Config(format!("FIR length must be even and at least 2, got {l}")));
    }
    if cfg.samples < 20 * l {
        return Err(Error::Config(format!("need at least {} samples for L = {l}, got {}", 20 * l, cfg.samples)));
    }
    if !(cfg.input_std > 0.0) {
        return Err(Error::Config("input standard deviation must be positive".into()));
    }
    let n = cfg.samples;
    let mut session = plant.zoh_session(cfg.h, cfg.seed)?;
    let mut excite = rng_from_seed(crate::rng::child_seed(cfg.seed, &[1]));
    let mut u = vec![0.0; n * m];
    let mut y = vec![0.0; n * p];
    for k in 0..n {
        y[k * p..(k + 1) * p].copy_from_slice(session.measure().as_slice());
        let uk = standard_normal_vector(m, &mut excite) * cfg.input_std;
        u[k * m..(k + 1) * m].copy_from_slice(uk.as_slice());
        session.apply(&uk)?;
    }

    let (gram, cross) = LagSums { m, p, lags: l }.normal_equations(&u, &y, n);
    let theta = gram
        .cholesky()
        .ok_or_else(|| Error::Identification("FIR normal equations are not positive definite".into()))?
        .solve(&cross);
    let markov: Vec<Matrix> = (0..l).map(|i| theta.rows(i * m, m).transpose()).collect();

    let half = l / 2;
    let hankel = Matrix::from_fn(half * p, half * m, |r, c| markov[r / p + c / m][(r % p, c % m)]);
    let shifted = Matrix::from_fn(half * p, half * m, |r, c| markov[r / p + c / m + 1][(r % p, c % m)]);
    let svd = hankel.svd(true, true);
    let mut order_idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    order_idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let hankel_sv: Vec<f64> = order_idx.iter().map(|&i| svd.singular_values[i]).collect();
    if hankel_sv.first().is_none_or(|&s| s < 1e-12) {
        return Err(Error::Identification("Hankel matrix has collapsed rank".into()));
    }
    let order = match cfg.order {
        Some(r) if r == 0 || r > hankel_sv.len() => {
            return Err(Error::Config(format!("model order must be in 1..={}", hankel_sv.len())))
        }
        Some(r) => r,
        None => largest_gap(&hankel_sv, m.max(p)),
    };
    let uu = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let ur = Matrix::from_fn(uu.nrows(), order, |r, c| uu[(r, order_idx[c])]);
    let vr = Matrix::from_fn(vt.ncols(), order, |r, c| vt[(order_idx[c], r)]);
    let s_half = Vector::from_fn(order, |i, _| hankel_sv[i].sqrt());
    let s_inv_half = s_half.map(|s| 1.0 / s);
    let obs = &ur * Matrix::from_diagonal(&s_half);
    let ctrb = Matrix::from_diagonal(&s_half) * vr.transpose();
    let a_id =
        Matrix::from_diagonal(&s_inv_half) * ur.transpose() * &shifted * &vr * Matrix::from_diagonal(&s_inv_half);
    let c_id = obs.rows(0, p).into_owned();
    let b_id = ctrb.columns(0, m).into_owned();

    let (wd, v) = fit_noise(&a_id, &c_id, &markov, &u, &y, n, m, p);
    let stable = is_schur_stable(&a_id);
    Ok(IdentifiedModel {
        model: DiscretePlant { ad: a_id, bd: b_id, c: c_id, wd, v, h: cfg.h },
        hankel_sv,
        order,
        markov,
        stable,
    })
}

/// Index of the largest ratio `σ_i / σ_{i+1}` (counting from one), among
/// strictly positive singular values.
/// Order at the largest ratio `σ_i / σ_{i+1}` with `min_order <= i <= len/2`.
/// Orders below `max(m, p)` cannot map `m` inputs onto `p` independent
/// setpoints; the noisy tail of the spectrum is excluded.
fn largest_gap(sv: &[f64], min_order: usize) -> usize {
    let floor = sv[0] * 1e-14;
    let max_order = (sv.len() / 2).max(1);
    let min_order = min_order.clamp(1, max_order);
    let mut best = (min_order, 0.0);
    for i in min_order - 1..max_order.min(sv.len() - 1) {
        if sv[i] <= floor {
            break;
        }
        let ratio = sv[i] / sv[i + 1].max(floor);
        if ratio > best.1 {
            best = (i + 1, ratio);
        }
    }
    best.0
}

#[allow(clippy::too_many_arguments)]
fn fit_noise(
    a: &Matrix,
    c: &Matrix,
    markov: &[Matrix],
    u: &[f64],
    y: &[f64],
    n: usize,
    m: usize,
    p: usize,
) -> (Matrix, Matrix) {
    let l = markov.len();
    let mut r0 = Matrix::zeros(p, p);
    let mut r1 = Matrix::zeros(p, p);
    let count = (n - l) as f64;
    // coef[c][q]: weight of window entry q in y_k[c], window = u_{k-L} .. u_{k-1}
    let coef: Vec<Vec<f64>> = (0..p).map(|c| (0..l * m).map(|q| markov[l - 1 - q / m][(c, q % m)]).collect()).collect();
    let mut prev = vec![0.0; p];
    let mut cur = vec![0.0; p];
    for k in l..n {
        let win = &u[(k - l) * m..k * m];
        for (c, rc) in cur.iter_mut().enumerate() {
            let dot: f64 = coef[c].iter().zip(win).map(|(a, b)| a * b).sum();
            *rc = y[k * p + c] - dot;
        }
        for a in 0..p {
            for b in 0..p {
                r0[(a, b)] += cur[a] * cur[b];
                if k > l {
                    r1[(a, b)] += cur[a] * prev[b];
                }
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    r0 /= count;
    r1 /= count - 1.0;
    let nn = a.nrows();
    let zero_w = Matrix::zeros(nn, nn);
    let Ok(p1) = solve_lyapunov_discrete(a, &Matrix::identity(nn, nn)) else {
        return (zero_w, symmetrize(&r0));
    };
    let m1 = c * a * &p1 * c.transpose();
    let m0 = c * &p1 * c.transpose();
    let sw = if m1.norm_squared() > 0.0 { (r1.dot(&m1) / m1.norm_squared()).max(0.0) } else { 0.0 };
    let sv = ((r0 - &m0 * sw).trace() / p as f64).max(0.0);
    (Matrix::identity(nn, nn) * sw, Matrix::identity(p, p) * sv)
}

/// Discrete equilibrium `x* = A_d x* + B_d u*`, `y* = C x*`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteEquilibrium {
    pub x_star_d: Vector,
    pub u_star_d: Vector,
}

/// Minimum-norm solution of `[[A_d - I, B_d], [C, 0]] (x; u) = (0; y*)`.
pub fn discrete_equilibrium(model: &DiscretePlant, y_star: &Vector) -> Result<DiscreteEquilibrium> {
    let (n, m, p) = (model.n(), model.m(), model.p());
    if y_star.len() != p {
        return Err(Error::Dimension(format!("y* has length {}, expected {p}", y_star.len())));
    }
    let top = hstack(&(&model.ad - Matrix::identity(n, n)), &model.bd);
    let bottom = hstack(&model.c, &Matrix::zeros(p, m));
    let pinv = right_pinv(&vstack(&top, &bottom))?;
    let mut rhs = Vector::zeros(n + p);
    rhs.rows_mut(n, p).copy_from(y_star);
    let sol = pinv * rhs;
    Ok(DiscreteEquilibrium { x_star_d: sol.rows(0, n).into_owned(), u_star_d: sol.rows(n, m).into_owned() })
}

/// Closed-loop matrices of the sampled-data PI loop in `(e_x, z)`
/// coordinates: `z_{k+1} = z_k + e_k` with `e_k = -C e_{x,k} + v_k`.
pub struct DiscreteClosedLoop {
    pub abar_k: Matrix,
    pub bbar: Matrix,
    pub cbar: Matrix,
    /// Joint covariance of `(w_k + B_d K_P v_k, v_k)`.
    pub noise: Matrix,
    pub qprime: Matrix,
}

pub fn build_discrete_closed_loop(
    model: &DiscretePlant,
    k: &PiGain,
    q1: &Matrix,
    q2: &Matrix,
) -> Result<DiscreteClosedLoop> {
    let (n, m, p) = (model.n(), model.m(), model.p());
    if k.m() != m || k.p() != p || q1.shape() != (p, p) || q2.shape() != (p, p) {
        return Err(Error::Dimension("gain or weights do not match the model".into()));
    }
    let abar = vstack(&hstack(&model.ad, &Matrix::zeros(n, p)), &hstack(&(-&model.c), &Matrix::identity(p, p)));
    let bbar = vstack(&model.bd, &Matrix::zeros(p, m));
    let cbar = block_diag(&model.c, &(-Matrix::identity(p, p)));
    let abar_k = abar - &bbar * k.concat() * &cbar;
    let noise = augmented_noise(&model.bd, &k.kp, &model.wd, &model.v);
    let qprime = block_diag(&(model.c.transpose() * q1 * &model.c), q2);
    Ok(DiscreteClosedLoop { abar_k, bbar, cbar, noise, qprime })
}

/// Average stage cost `f_d(K) = tr(Q' X_d) + tr(Q1 V)` and its gradient.
pub fn discrete_cost_gradient(model: &DiscretePlant, k: &PiGain, q1: &Matrix, q2: &Matrix) -> Result<CostGradient> {
    let cl = build_discrete_closed_loop(model, k, q1, q2)?;
    let x = solve_lyapunov_discrete(&cl.abar_k, &cl.noise)?;
    let y = solve_lyapunov_discrete(&cl.abar_k.transpose(), &cl.qprime)?;
    let value = (&cl.qprime * &x).trace() + (q1 * &model.v).trace();
    let (n, p) = (model.n(), model.p());
    let bty = cl.bbar.transpose() * &y;
    let mut grad = &bty * &cl.abar_k * &x * cl.cbar.transpose() * -2.0;
    let mut g = vstack(&(&model.bd * &k.kp), &Matrix::zeros(p, p));
    for i in 0..p {
        g[(n + i, i)] += 1.0;
    }
    let noise_term = &bty * g * &model.v * 2.0;
    let mut left = grad.columns_mut(0, p);
    left += noise_term;
    Ok(CostGradient { value, grad, x, y })
}

/// Projected gradient descent on `f_d` with exact gradients. Fails with
/// [`Error::IterateUnstable`] if an iterate leaves the stabilizing set.
pub fn tune_gains_modelbased(
    model: &DiscretePlant,
    k0: &PiGain,
    omega: &ConstraintBox,
    q1: &Matrix,
    q2: &Matrix,
    eta: f64,
    iters: usize,
) -> Result<TuneTrace> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {eta}")));
    }
    let unstable = |e: Error, it: usize| match e {
        Error::Stability { .. } => Error::IterateUnstable { iteration: it },
        other => other,
    };
    let mut k = project_onto_omega(k0, omega);
    let mut trace = TuneTrace {
        iterates: vec![k.clone()],
        est_gradients: Vec::new(),
        analytic_costs: Vec::new(),
        stopped_at: None,
    };
    let mut cg = discrete_cost_gradient(model, &k, q1, q2).map_err(|e| unstable(e, 0))?;
    trace.analytic_costs.push(cg.value);
    for it in 1..=iters {
        k = project_onto_omega(&k.perturbed(-eta, &cg.grad), omega);
        cg = discrete_cost_gradient(model, &k, q1, q2).map_err(|e| unstable(e, it))?;
        trace.analytic_costs.push(cg.value);
    }
    trace.iterates.push(k);
    Ok(trace)
}

/// Outcome of a sampled-data PI run.
#[derive(Debug, Clone)]
pub struct ZohRollout {
    pub sample: RolloutSample,
    /// Measured output `y_k` at `t = kh`.
    pub trajectory: Vec<(f64, Vector)>,
}

/// Prepared simulator of the continuous plant under the sampled-data PI law
/// `u = K_P e_k + K_I z_k + u0` held over `[kh, (k+1)h)`.
pub struct ZohClosedLoop {
    abar_k: Matrix,
    offset: Vector,
    w_factor: Matrix,
    /// `[B_d K_P; I]`, how `v_k` enters the next state.
    v_gain: Matrix,
    v_factor: Matrix,
    c: Matrix,
    x_star: Vector,
    y_star: Vector,
    init: crate::plant::InitialState,
    q1: Matrix,
    q2: Matrix,
    h: f64,
    n: usize,
    p: usize,
}

impl ZohClosedLoop {
    pub fn new(
        plant: &LtiPlant,
        k: &PiGain,
        u0: &Vector,
        y_star: &Vector,
        h: f64,
        q1: &Matrix,
        q2: &Matrix,
    ) -> Result<Self> {
        let (n, p) = (plant.n(), plant.p());
        let eq = compute_equilibrium(plant, y_star)?;
        let d = discretize_zoh(plant, h)?;
        let cl = build_discrete_closed_loop(&d, k, q1, q2)?;
        let v_gain = vstack(&(&d.bd * &k.kp), &Matrix::identity(p, p));
        Ok(Self {
            offset: &cl.bbar * (u0 - &eq.u_star),
            abar_k: cl.abar_k,
            w_factor: psd_factor(&d.wd),
            v_gain,
            v_factor: psd_factor(&plant.v),
            c: plant.c.clone(),
            x_star: eq.x_star,
            y_star: y_star.clone(),
            init: plant.init.clone(),
            q1: q1.clone(),
            q2: q2.clone(),
            h,
            n,
            p,
        })
    }

    fn steps(&self, horizon: f64) -> usize {
        (horizon / self.h + 1e-9).floor() as usize
    }

    /// Runs columns in parallel; `observe(k, e, z)` sees the measured errors
    /// and integrator states of all columns at step `k`.
    fn run_batch<O>(
        &self,
        rngs: &mut [SimRng],
        steps: usize,
        mut observe: O,
    ) -> std::result::Result<Matrix, (usize, Error)>
    where
        O: FnMut(usize, &Matrix, &Matrix),
    {
        let (n, p, b) = (self.n, self.p, rngs.len());
        let mut s = Matrix::zeros(n + p, b);
        for (j, rng) in rngs.iter_mut().enumerate() {
            let ex = self.init.sample(n, rng) - &self.x_star;
            s.view_mut((0, j), (n, 1)).copy_from(&ex);
        }
        let mut scratch = Matrix::zeros(n + p, b);
        let mut wn = Matrix::zeros(n, b);
        let mut vn = Matrix::zeros(p, b);
        for k in 0..=steps {
            for (j, rng) in rngs.iter_mut().enumerate() {
                for i in 0..p {
                    vn[(i, j)] = rng.sample(rand_distr::StandardNormal);
                }
            }
            let v = &self.v_factor * &vn;
            let e = -(&self.c * s.rows(0, n)) + &v;
            observe(k, &e, &s.rows(n, p).into_owned());
            if k == steps {
                break;
            }
            for (j, rng) in rngs.iter_mut().enumerate() {
                for i in 0..n {
                    wn[(i, j)] = rng.sample(rand_distr::StandardNormal);
                }
            }
            scratch.gemm(1.0, &self.abar_k, &s, 0.0);
            scratch.gemm(1.0, &self.v_gain, &v, 1.0);
            let mut top = scratch.rows_mut(0, n);
            top.gemm(1.0, &self.w_factor, &wn, 1.0);
            for mut col in scratch.column_iter_mut() {
                col += &self.offset;
            }
            std::mem::swap(&mut s, &mut scratch);
            for (j, col) in s.column_iter().enumerate() {
                let sq = col.norm_squared();
                if !(sq.is_finite() && sq < 1e200) {
                    return Err((j, Error::Divergence { time: (k + 1) as f64 * self.h, at: None }));
                }
            }
        }
        Ok(s)
    }

    /// Single run to `horizon` with the output trajectory on the grid.
    pub fn rollout(&self, horizon: f64, seed: u64) -> Result<ZohRollout> {
        let steps = self.steps(horizon);
        let mut rngs = vec![rng_from_seed(seed)];
        let mut traj = Vec::with_capacity(steps + 1);
        let mut last = (Vector::zeros(self.p), Vector::zeros(self.p));
        self.run_batch(&mut rngs, steps, |k, e, z| {
            let e = e.column(0).into_owned();
            traj.push((k as f64 * self.h, &self.y_star - &e));
            last = (e, z.column(0).into_owned());
        })
        .map_err(|(_, e)| e)?;
        let (e, z) = last;
        let cost = (e.transpose() * &self.q1 * &e)[(0, 0)] + (z.transpose() * &self.q2 * &z)[(0, 0)];
        Ok(ZohRollout { sample: RolloutSample { e_tau: e, z_tau: z, cost_sample: cost }, trajectory: traj })
    }

    /// Trapezoidal time averages of `e^T Q1 e + (h z)^T Q2 (h z)`, one per
    /// seed. The sum `h z_k` approximates the integral of the error, so the
    /// value is comparable with the continuous-time PI cost.
    pub fn time_averaged_costs(&self, horizon: f64, seeds: &[u64]) -> std::result::Result<Vec<f64>, (usize, Error)> {
        let steps = self.steps(horizon);
        let b = seeds.len();
        let mut rngs: Vec<SimRng> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
        let mut acc = vec![0.0; b];
        let mut prev = vec![0.0; b];
        let h = self.h;
        self.run_batch(&mut rngs, steps, |k, e, z| {
            for j in 0..b {
                let ej = e.column(j);
                let zj = z.column(j) * h;
                let c = (ej.transpose() * &self.q1 * ej)[(0, 0)] + (zj.transpose() * &self.q2 * &zj)[(0, 0)];
                if k > 0 {
                    acc[j] += 0.5 * h * (c + prev[j]);
                }
                prev[j] = c;
            }
        })?;
        let t = steps as f64 * h;
        Ok(if t > 0.0 { acc.iter().map(|a| a / t).collect() } else { prev })
    }
}

/// The continuous plant under the sampled-data PI law, simulated exactly
/// between samples.
#[allow(clippy::too_many_arguments)]
pub fn simulate_zoh_closed_loop<R: Rng + ?Sized>(
    plant: &LtiPlant,
    k: &PiGain,
    u0: &Vector,
    y_star: &Vector,
    horizon: f64,
    h: f64,
    q1: &Matrix,
    q2: &Matrix,
    rng: &mut R,
) -> Result<ZohRollout> {
    ZohClosedLoop::new(plant, k, u0, y_star, h, q1, q2)?.rollout(horizon, rng.random())
}

/// `ρ(A_Id)`, reported with identified models.
pub fn model_spectral_radius(model: &DiscretePlant) -> f64 {
    spectral_radius(&model.ad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::SimulatedPlant;
    use crate::plant::{generate_random_plant, InitialState};
    use approx::assert_relative_eq;

    fn two_state() -> LtiPlant {
        LtiPlant::new(
            Matrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]),
            Matrix::from_row_slice(2, 1, &[0.0, 1.0]),
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::zeros(2, 2),
            Matrix::zeros(1, 1),
            InitialState::point(Vector::zeros(2)),
        )
        .unwrap()
    }

    #[test]
    fn zoh_of_zero_dynamics_and_scalar() {
        let i2 = Matrix::identity(2, 2);
        let plant =
            LtiPlant::new(Matrix::zeros(2, 2), i2.clone(), i2.clone(), i2.clone(), i2.clone(), InitialState::default());
        // A = 0 with B = C = I still satisfies the rank condition.
        let d = discretize_zoh(&plant.unwrap(), 0.1).unwrap();
        assert_relative_eq!(d.ad, i2, epsilon = 1e-14);
        assert_relative_eq!(d.bd, &i2 * 0.1, epsilon = 1e-14);
        assert_relative_eq!(d.wd, &i2 * 0.1, epsilon = 1e-14);
        let s = |v: f64| Matrix::from_element(1, 1, v);
        let lag = LtiPlant::new(s(-1.0), s(2.0), s(1.0), s(0.0), s(0.0), InitialState::default()).unwrap();
        let d = discretize_zoh(&lag, 0.01).unwrap();
        assert_relative_eq!(d.ad[(0, 0)], (-0.01f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(d.bd[(0, 0)], 2.0 * (1.0 - (-0.01f64).exp()), epsilon = 1e-15);
    }

    #[test]
    fn zoh_preserves_equilibrium_input() {
        let mut rng = rng_from_seed(2);
        let plant = generate_random_plant(5, 2, 2, &mut rng).unwrap();
        let y = Vector::from_vec(vec![5.0, 5.0]);
        let eq = compute_equilibrium(&plant, &y).unwrap();
        let deq = discrete_equilibrium(&discretize_zoh(&plant, 0.01).unwrap(), &y).unwrap();
        assert_relative_eq!(deq.u_star_d, eq.u_star, max_relative = 1e-9);
        let zero = discrete_equilibrium(&discretize_zoh(&plant, 0.01).unwrap(), &Vector::zeros(2)).unwrap();
        assert_eq!(zero.u_star_d.norm() + zero.x_star_d.norm(), 0.0);
    }

    #[test]
    fn noiseless_identification_recovers_markov_parameters() {
        let plant = two_state();
        // h = 1 makes the impulse response negligible after 20 periods
        let truth = discretize_zoh(&plant, 1.0).unwrap();
        let bb = SimulatedPlant::new(plant, 1.0).unwrap();
        let mut cfg = IdentificationConfig::new(2000, 1.0, 3);
        cfg.fir_lags = 20;
        let id = identify_ho_kalman(&bb, &cfg).unwrap();
        assert_eq!(id.order, 2);
        let true_markov = truth.markov_parameters(20);
        for (a, b) in id.markov.iter().zip(&true_markov) {
            assert!((a - b).norm() < 1e-7, "{a} vs {b}");
        }
        for (a, b) in id.model.markov_parameters(20).iter().zip(&true_markov) {
            assert!((a - b).norm() < 1e-7, "{a} vs {b}");
        }
        for w in [0.1, 0.5, 1.0, 3.0] {
            let (re, im) = id.model.frequency_response(w).unwrap();
            let (tre, tim) = truth.frequency_response(w).unwrap();
            assert!((re - tre).norm() + (im - tim).norm() < 1e-6);
        }
    }

    #[test]
    fn discrete_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(7);
        let plant = generate_random_plant(4, 2, 2, &mut rng).unwrap();
        let d = discretize_zoh(&plant, 0.05).unwrap();
        let q1 = Matrix::identity(2, 2);
        let q2 = Matrix::identity(2, 2) * 0.3;
        let k =
            PiGain::new(Matrix::from_row_slice(2, 2, &[0.02, 0.01, 0.0, 0.03]), Matrix::identity(2, 2) * 0.01).unwrap();
        let g = discrete_cost_gradient(&d, &k, &q1, &q2).unwrap().grad;
        let step = 1e-6 * (1.0 + k.frobenius_norm());
        let fd = Matrix::from_fn(2, 4, |i, j| {
            let mut e = Matrix::zeros(2, 4);
            e[(i, j)] = 1.0;
            let fp = discrete_cost_gradient(&d, &k.perturbed(step, &e), &q1, &q2).unwrap().value;
            let fm = discrete_cost_gradient(&d, &k.perturbed(-step, &e), &q1, &q2).unwrap().value;
            (fp - fm) / (2.0 * step)
        });
        assert!((&g - &fd).norm() <= 1e-5 * g.norm(), "{g} vs {fd}");
    }

    #[test]
    fn zoh_loop_at_equilibrium_stays_put() {
        let mut rng = rng_from_seed(8);
        let mut plant = generate_random_plant(4, 2, 2, &mut rng).unwrap().noiseless();
        let y = Vector::from_element(2, 5.0);
        let eq = compute_equilibrium(&plant, &y).unwrap();
        plant.init = InitialState::point(eq.x_star.clone());
        let q = Matrix::identity(2, 2);
        let k = PiGain::scaled_identity(2, 2, 0.01, 0.01);
        let run = simulate_zoh_closed_loop(&plant, &k, &eq.u_star, &y, 2.0, 0.01, &q, &q, &mut rng).unwrap();
        assert!(run.sample.e_tau.norm() < 1e-10);
        assert!(run.trajectory.iter().all(|(_, yk)| (yk - &y).norm() < 1e-10));
    }

    #[test]
    fn zoh_loop_matches_deterministic_recursion() {
        let mut rng = rng_from_seed(9);
        let mut plant = generate_random_plant(3, 2, 2, &mut rng).unwrap().noiseless();
        plant.init = InitialState::point(Vector::from_vec(vec![1.0, -1.0, 0.5]));
        let y = Vector::from_element(2, 1.0);
        let eq = compute_equilibrium(&plant, &y).unwrap();
        let h = 0.05;
        let d = discretize_zoh(&plant, h).unwrap();
        let k = PiGain::scaled_identity(2, 2, 0.1, 0.05);
        let u0 = Vector::from_vec(vec![0.3, -0.2]);
        let q = Matrix::identity(2, 2);
        let run = ZohClosedLoop::new(&plant, &k, &u0, &y, h, &q, &q).unwrap().rollout(1.0, 0).unwrap();
        let mut x = plant.init.mean(3);
        let mut z = Vector::zeros(2);
        for (_, yk) in &run.trajectory {
            let e = &y - &plant.c * &x;
            assert!((yk - (&y - &e)).norm() < 1e-10);
            let u = &k.kp * &e + &k.ki * &z + &u0;
            x = &d.ad * &x + &d.bd * u;
            z += e;
        }
        let _ = eq;
    }

    #[test]
    fn modelbased_descent_is_monotone() {
        let mut rng = rng_from_seed(10);
        let plant = generate_random_plant(4, 2, 2, &mut rng).unwrap();
        let d = discretize_zoh(&plant, 0.01).unwrap();
        let q1 = Matrix::identity(2, 2) * 0.1;
        let q2 = Matrix::identity(2, 2) * 0.01;
        let t = tune_gains_modelbased(
            &d,
            &PiGain::scaled_identity(2, 2, 0.01, 0.01),
            &ConstraintBox::default(),
            &q1,
            &q2,
            1e-3,
            200,
        )
        .unwrap();
        assert!(t.analytic_costs.windows(2).all(|w| w[1] <= w[0]));
    }
}
