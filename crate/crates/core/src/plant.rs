//! Continuous-time plant, the 2DOF PI law and an exact sampled simulator of
//! the stochastic closed loop.
//!
//! Noise conventions: `w` and the measurement noise `v` feeding the controller
//! are white with intensities `W` and `V`. The measurement taken when a cost
//! sample is recorded is an independent `Normal(0, V)` draw, which is what
//! makes long-horizon cost samples average to `tr(Q'X + Q1 V)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmath::{
    block_diag, ensure_finite, hstack, is_hurwitz, min_sym_eigenvalue, psd_factor, right_pinv, singular_values,
    standard_normal_vector, van_loan, vstack, Matrix, Vector, RANK_TOL,
};
use crate::rng::{rng_from_seed, SimRng};

/// Distribution of the initial plant state `x(0)`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// Independent uniform coordinates on `[low, high]`.
    UniformBox {
        low: f64,
        high: f64,
    },
    Gaussian {
        mean: Vector,
        cov: Matrix,
    },
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::UniformBox { low: -3.0, high: 3.0 }
    }
}

impl InitialState {
    pub fn point(x: Vector) -> Self {
        let n = x.len();
        InitialState::Gaussian { mean: x, cov: Matrix::zeros(n, n) }
    }

    pub fn mean(&self, n: usize) -> Vector {
        match self {
            InitialState::UniformBox { low, high } => Vector::from_element(n, 0.5 * (low + high)),
            InitialState::Gaussian { mean, .. } => mean.clone(),
        }
    }

    pub fn covariance(&self, n: usize) -> Matrix {
        match self {
            InitialState::UniformBox { low, high } => {
                let w = high - low;
                Matrix::identity(n, n) * (w * w / 12.0)
            }
            InitialState::Gaussian { cov, .. } => cov.clone(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vector {
        match self {
            InitialState::UniformBox { low, high } => {
                Vector::from_fn(n, |_, _| if high > low { rng.random_range(*low..*high) } else { *low })
            }
            InitialState::Gaussian { mean, cov } => {
                let l = psd_factor(cov);
                mean + l * standard_normal_vector(n, rng)
            }
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            InitialState::UniformBox { low, high } => {
                if !(low.is_finite() && high.is_finite() && low <= high) {
                    return Err(Error::Domain(format!("invalid initial box [{low}, {high}]")));
                }
            }
            InitialState::Gaussian { mean, cov } => {
                if mean.len() != n || cov.shape() != (n, n) {
                    return Err(Error::Dimension("initial-state mean/covariance do not match n".into()));
                }
                check_psd(cov, "initial-state covariance")?;
            }
        }
        Ok(())
    }
}

fn check_psd(s: &Matrix, what: &'static str) -> Result<()> {
    ensure_finite(s, what)?;
    let scale = 1.0 + s.norm();
    if (s - s.transpose()).norm() > 1e-12 * scale {
        return Err(Error::Domain(format!("{what} is not symmetric")));
    }
    if s.nrows() > 0 && min_sym_eigenvalue(s) < -1e-10 * scale {
        return Err(Error::Domain(format!("{what} is not positive semidefinite")));
    }
    Ok(())
}

/// Continuous-time plant `dx = (Ax + Bu) dt + dw`, `y = Cx + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiPlant {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    /// Process-noise intensity.
    pub w: Matrix,
    /// Measurement-noise intensity / per-sample covariance.
    pub v: Matrix,
    pub init: InitialState,
}

impl LtiPlant {
    /// Validates dimensions, noise matrices and the full-row-rank condition
    /// on `[[A, B], [C, 0]]`.
    pub fn new(a: Matrix, b: Matrix, c: Matrix, w: Matrix, v: Matrix, init: InitialState) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::Dimension("A must be square".into()));
        }
        let m = b.ncols();
        let p = c.nrows();
        if b.nrows() != n || c.ncols() != n {
            return Err(Error::Dimension(format!("B is {}x{}, C is {}x{}, A is {n}x{n}", b.nrows(), m, p, c.ncols())));
        }
        if p > m {
            return Err(Error::Dimension(format!("need p <= m, got p={p}, m={m}")));
        }
        if w.shape() != (n, n) || v.shape() != (p, p) {
            return Err(Error::Dimension("noise intensities have the wrong shape".into()));
        }
        ensure_finite(&a, "A")?;
        ensure_finite(&b, "B")?;
        ensure_finite(&c, "C")?;
        check_psd(&w, "W")?;
        check_psd(&v, "V")?;
        init.validate(n)?;
        let plant = Self { a, b, c, w, v, init };
        plant.check_equilibrium_rank()?;
        Ok(plant)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// `[[A, B], [C, 0]]`.
    pub fn equilibrium_matrix(&self) -> Matrix {
        let top = hstack(&self.a, &self.b);
        let bottom = hstack(&self.c, &Matrix::zeros(self.p(), self.m()));
        vstack(&top, &bottom)
    }

    fn check_equilibrium_rank(&self) -> Result<()> {
        let s = singular_values(&self.equilibrium_matrix());
        let sigma_max = s.first().copied().unwrap_or(0.0);
        let sigma_min = s.get(self.n() + self.p() - 1).copied().unwrap_or(0.0);
        if s.len() < self.n() + self.p() || !(sigma_min > RANK_TOL * sigma_max) {
            return Err(Error::Rank { what: "[[A, B], [C, 0]]", sigma_min, sigma_max });
        }
        Ok(())
    }

    /// Copy of the plant with both noise intensities zeroed.
    pub fn noiseless(&self) -> Self {
        let mut p = self.clone();
        p.w.fill(0.0);
        p.v.fill(0.0);
        p
    }

    pub fn to_document(&self, seed: Option<u64>) -> PlantDocument {
        PlantDocument {
            n: self.n(),
            m: self.m(),
            p: self.p(),
            a: to_rows(&self.a),
            b: to_rows(&self.b),
            c: to_rows(&self.c),
            w: to_rows(&self.w),
            v: to_rows(&self.v),
            init: match &self.init {
                InitialState::UniformBox { low, high } => InitDocument::Uniform { low: *low, high: *high },
                InitialState::Gaussian { mean, cov } => {
                    InitDocument::Gaussian { mean: mean.iter().copied().collect(), cov: to_rows(cov) }
                }
            },
            seed,
        }
    }

    pub fn from_document(doc: &PlantDocument) -> Result<Self> {
        let a = from_rows(&doc.a, doc.n, doc.n, "A")?;
        let b = from_rows(&doc.b, doc.n, doc.m, "B")?;
        let c = from_rows(&doc.c, doc.p, doc.n, "C")?;
        let w = from_rows(&doc.w, doc.n, doc.n, "W")?;
        let v = from_rows(&doc.v, doc.p, doc.p, "V")?;
        let init = match &doc.init {
            InitDocument::Uniform { low, high } => InitialState::UniformBox { low: *low, high: *high },
            InitDocument::Gaussian { mean, cov } => InitialState::Gaussian {
                mean: Vector::from_vec(mean.clone()),
                cov: from_rows(cov, doc.n, doc.n, "init.cov")?,
            },
        };
        Self::new(a, b, c, w, v, init)
    }

    pub fn to_json(&self, seed: Option<u64>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document(seed))?)
    }

    pub fn from_json(s: &str) -> Result<(Self, Option<u64>)> {
        let doc: PlantDocument = serde_json::from_str(s)?;
        Ok((Self::from_document(&doc)?, doc.seed))
    }
}

pub(crate) fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>], nr: usize, nc: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension(format!("{what} must be {nr}x{nc}")));
    }
    Ok(Matrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// On-disk plant description; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantDocument {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
    pub init: InitDocument,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum InitDocument {
    Uniform { low: f64, high: f64 },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

/// PI gain `K = [K_P K_I]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiGain {
    pub kp: Matrix,
    pub ki: Matrix,
}

impl PiGain {
    pub fn new(kp: Matrix, ki: Matrix) -> Result<Self> {
        if kp.shape() != ki.shape() {
            return Err(Error::Dimension(format!(
                "K_P is {}x{} but K_I is {}x{}",
                kp.nrows(),
                kp.ncols(),
                ki.nrows(),
                ki.ncols()
            )));
        }
        ensure_finite(&kp, "K_P")?;
        ensure_finite(&ki, "K_I")?;
        Ok(Self { kp, ki })
    }

    pub fn zeros(m: usize, p: usize) -> Self {
        Self { kp: Matrix::zeros(m, p), ki: Matrix::zeros(m, p) }
    }

    /// `[s_p I, s_i I]` for square `m = p` layouts (rectangular identity
    /// otherwise).
    pub fn scaled_identity(m: usize, p: usize, sp: f64, si: f64) -> Self {
        Self { kp: Matrix::identity(m, p) * sp, ki: Matrix::identity(m, p) * si }
    }

    pub fn m(&self) -> usize {
        self.kp.nrows()
    }

    pub fn p(&self) -> usize {
        self.kp.ncols()
    }

    /// The `m x 2p` matrix `[K_P K_I]`.
    pub fn concat(&self) -> Matrix {
        hstack(&self.kp, &self.ki)
    }

    pub fn from_concat(k: &Matrix) -> Result<Self> {
        if !k.ncols().is_multiple_of(2) {
            return Err(Error::Dimension(format!("[K_P K_I] needs an even column count, got {}", k.ncols())));
        }
        let p = k.ncols() / 2;
        Self::new(k.columns(0, p).into_owned(), k.columns(p, p).into_owned())
    }

    /// `self + alpha * dir` with `dir` in the concatenated `m x 2p` layout.
    pub fn perturbed(&self, alpha: f64, dir: &Matrix) -> Self {
        let p = self.p();
        Self { kp: &self.kp + dir.columns(0, p) * alpha, ki: &self.ki + dir.columns(p, p) * alpha }
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.kp.norm_squared() + self.ki.norm_squared()).sqrt()
    }

    pub fn to_document(&self) -> GainDocument {
        GainDocument { kp: to_rows(&self.kp), ki: to_rows(&self.ki) }
    }

    pub fn from_document(doc: &GainDocument) -> Result<Self> {
        let nr = doc.kp.len();
        let nc = doc.kp.first().map_or(0, Vec::len);
        Self::new(from_rows(&doc.kp, nr, nc, "K_P")?, from_rows(&doc.ki, nr, nc, "K_I")?)
    }
}

/// Row-major gain blocks as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainDocument {
    #[serde(rename = "Kp")]
    pub kp: Vec<Vec<f64>>,
    #[serde(rename = "Ki")]
    pub ki: Vec<Vec<f64>>,
}

/// Equilibrium `(x*, u*)` with `0 = A x* + B u*` and `y* = C x*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub x_star: Vector,
    pub u_star: Vector,
    pub y_star: Vector,
}

/// Minimum-norm solution of `[[A, B], [C, 0]] (x*; u*) = (0; y*)`.
pub fn compute_equilibrium(plant: &LtiPlant, y_star: &Vector) -> Result<Equilibrium> {
    let (n, p) = (plant.n(), plant.p());
    if y_star.len() != p {
        return Err(Error::Dimension(format!("y* has length {}, expected {p}", y_star.len())));
    }
    let pinv = right_pinv(&plant.equilibrium_matrix())?;
    let mut rhs = Vector::zeros(n + p);
    rhs.rows_mut(n, p).copy_from(y_star);
    let sol = pinv * rhs;
    Ok(Equilibrium {
        x_star: sol.rows(0, n).into_owned(),
        u_star: sol.rows(n, plant.m()).into_owned(),
        y_star: y_star.clone(),
    })
}

/// Augmented error dynamics of the PI loop, state `(e_x, z)`.
#[derive(Debug, Clone)]
pub struct AugmentedClosedLoop {
    pub abar: Matrix,
    pub bbar: Matrix,
    pub cbar: Matrix,
    pub abar_k: Matrix,
    pub wtilde_k: Matrix,
    pub qprime: Matrix,
    pub q1: Matrix,
    pub q2: Matrix,
    pub gain: PiGain,
    pub v: Matrix,
    n: usize,
}

impl AugmentedClosedLoop {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.q1.nrows()
    }

    pub fn dim(&self) -> usize {
        self.abar.nrows()
    }
}

/// `W~_K` for a given `K_P`: `[[W + B K_P V (B K_P)^T, B K_P V], [., V]]`.
pub(crate) fn augmented_noise(b: &Matrix, kp: &Matrix, w: &Matrix, v: &Matrix) -> Matrix {
    let bkp = b * kp;
    let bkpv = &bkp * v;
    let top_left = w + &bkpv * bkp.transpose();
    vstack(&hstack(&top_left, &bkpv), &hstack(&bkpv.transpose(), v))
}

pub fn build_closed_loop(plant: &LtiPlant, k: &PiGain, q1: &Matrix, q2: &Matrix) -> Result<AugmentedClosedLoop> {
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    if k.m() != m || k.p() != p {
        return Err(Error::Dimension(format!("gain is {}x{}, plant needs {m}x{p} blocks", k.m(), k.p())));
    }
    if q1.shape() != (p, p) || q2.shape() != (p, p) {
        return Err(Error::Dimension("Q1 and Q2 must be p x p".into()));
    }
    let abar = vstack(&hstack(&plant.a, &Matrix::zeros(n, p)), &hstack(&(-&plant.c), &Matrix::zeros(p, p)));
    let bbar = vstack(&plant.b, &Matrix::zeros(p, m));
    let cbar = block_diag(&plant.c, &(-Matrix::identity(p, p)));
    let abar_k = &abar - &bbar * k.concat() * &cbar;
    let wtilde_k = augmented_noise(&plant.b, &k.kp, &plant.w, &plant.v);
    let qprime = block_diag(&(plant.c.transpose() * q1 * &plant.c), q2);
    Ok(AugmentedClosedLoop {
        abar,
        bbar,
        cbar,
        abar_k,
        wtilde_k,
        qprime,
        q1: q1.clone(),
        q2: q2.clone(),
        gain: k.clone(),
        v: plant.v.clone(),
        n,
    })
}

/// True iff every eigenvalue of `A_K` has real part below `-1e-9`.
pub fn is_stabilizing(cl: &AugmentedClosedLoop) -> bool {
    is_hurwitz(&cl.abar_k)
}

/// Outcome of one rollout at the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSample {
    pub e_tau: Vector,
    pub z_tau: Vector,
    pub cost_sample: f64,
}

/// States whose norm exceeds this are treated as diverged.
const DIVERGENCE_LIMIT: f64 = 1e100;

/// One exact step `x <- Phi x + c + L xi` of a linear SDE with constant input.
#[derive(Debug, Clone)]
pub(crate) struct ExactStep {
    phi: Matrix,
    offset: Vector,
    noise: Matrix,
    h: f64,
}

impl ExactStep {
    fn new(a: &Matrix, b: &Matrix, input: &Vector, wint: &Matrix, h: f64) -> Result<Self> {
        let vl = van_loan(a, b, wint, h)?;
        Ok(Self { offset: &vl.bd * input, noise: psd_factor(&vl.wd), phi: vl.ad, h })
    }

    #[inline]
    fn apply<R: Rng + ?Sized>(&self, x: &mut Vector, scratch: &mut Vector, xi: &mut Vector, rng: &mut R) {
        for v in xi.iter_mut() {
            *v = rng.sample(rand_distr::StandardNormal);
        }
        scratch.copy_from(&self.offset);
        scratch.gemv(1.0, &self.phi, x, 1.0);
        scratch.gemv(1.0, &self.noise, xi, 1.0);
        std::mem::swap(x, scratch);
    }

    /// Same step for a batch of states stored as columns, each column
    /// drawing its noise from its own stream.
    fn apply_batch(&self, x: &mut Matrix, scratch: &mut Matrix, xi: &mut Matrix, rngs: &mut [SimRng]) {
        for (mut col, rng) in xi.column_iter_mut().zip(rngs.iter_mut()) {
            for v in col.iter_mut() {
                *v = rng.sample(rand_distr::StandardNormal);
            }
        }
        scratch.gemm(1.0, &self.phi, x, 0.0);
        scratch.gemm(1.0, &self.noise, xi, 1.0);
        for mut col in scratch.column_iter_mut() {
            col += &self.offset;
        }
        std::mem::swap(x, scratch);
    }
}

/// Exact sampled propagation of `dx = (F x + G u) dt + dw` on a uniform grid
/// of step `h`, with a shorter final step when `h` does not divide the
/// horizon.
#[derive(Debug, Clone)]
pub(crate) struct ExactPropagator {
    full: ExactStep,
    tail: Option<ExactStep>,
    steps: usize,
}

impl ExactPropagator {
    pub(crate) fn new(f: &Matrix, g: &Matrix, input: &Vector, wint: &Matrix, horizon: f64, h: f64) -> Result<Self> {
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be non-negative, got {horizon}")));
        }
        if !(h > 0.0) {
            return Err(Error::Domain(format!("sampling step must be positive, got {h}")));
        }
        let ratio = horizon / h;
        let mut steps = ratio.floor() as usize;
        let mut rem = horizon - steps as f64 * h;
        if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) {
            steps = ratio.round() as usize;
            rem = 0.0;
        }
        let full = ExactStep::new(f, g, input, wint, h)?;
        let tail = if rem > 0.0 { Some(ExactStep::new(f, g, input, wint, rem)?) } else { None };
        Ok(Self { full, tail, steps })
    }

    /// Grid times including 0 and the horizon.
    pub(crate) fn grid_len(&self) -> usize {
        self.steps + 1 + usize::from(self.tail.is_some())
    }

    /// Advances `x` to the horizon, calling `observe(t, x, rng)` at every
    /// grid point (including `t = 0`).
    pub(crate) fn run<R, O>(&self, x: &mut Vector, rng: &mut R, mut observe: O) -> Result<()>
    where
        R: Rng + ?Sized,
        O: FnMut(f64, &Vector, &mut R),
    {
        let mut scratch = Vector::zeros(x.len());
        let mut xi = Vector::zeros(self.full.noise.ncols());
        observe(0.0, x, rng);
        let mut t = 0.0;
        for k in 0..self.steps {
            self.full.apply(x, &mut scratch, &mut xi, rng);
            t = (k + 1) as f64 * self.full.h;
            check_state(x, t)?;
            observe(t, x, rng);
        }
        if let Some(tail) = &self.tail {
            let mut xi = Vector::zeros(tail.noise.ncols());
            tail.apply(x, &mut scratch, &mut xi, rng);
            t += tail.h;
            check_state(x, t)?;
            observe(t, x, rng);
        }
        Ok(())
    }

    /// Batched [`ExactPropagator::run`]: column `j` of `x` is driven by
    /// `rngs[j]`. On divergence the first offending column is reported.
    pub(crate) fn run_batch<O>(
        &self,
        x: &mut Matrix,
        rngs: &mut [SimRng],
        mut observe: O,
    ) -> std::result::Result<(), (usize, Error)>
    where
        O: FnMut(f64, &Matrix, &mut [SimRng]),
    {
        let (dim, cols) = x.shape();
        let mut scratch = Matrix::zeros(dim, cols);
        observe(0.0, x, rngs);
        let mut t = 0.0;
        let mut xi = Matrix::zeros(self.full.noise.ncols(), cols);
        for k in 0..self.steps {
            self.full.apply_batch(x, &mut scratch, &mut xi, rngs);
            t = (k + 1) as f64 * self.full.h;
            check_columns(x, t)?;
            observe(t, x, rngs);
        }
        if let Some(tail) = &self.tail {
            let mut xi = Matrix::zeros(tail.noise.ncols(), cols);
            tail.apply_batch(x, &mut scratch, &mut xi, rngs);
            t += tail.h;
            check_columns(x, t)?;
            observe(t, x, rngs);
        }
        Ok(())
    }
}

fn check_columns(x: &Matrix, t: f64) -> std::result::Result<(), (usize, Error)> {
    let limit = DIVERGENCE_LIMIT * DIVERGENCE_LIMIT;
    for (j, col) in x.column_iter().enumerate() {
        let sq = col.norm_squared();
        if !(sq.is_finite() && sq < limit) {
            return Err((j, Error::Divergence { time: t, at: None }));
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn check_state(x: &Vector, t: f64) -> Result<()> {
    let mut sq = 0.0;
    for v in x.iter() {
        sq += v * v;
    }
    if sq.is_finite() && sq < DIVERGENCE_LIMIT * DIVERGENCE_LIMIT {
        Ok(())
    } else {
        Err(Error::Divergence { time: t, at: None })
    }
}

/// Prepared exact simulator of the augmented PI closed loop for a fixed gain
/// and feedforward.
#[derive(Debug, Clone)]
pub struct ClosedLoopSimulator {
    prop: ExactPropagator,
    x_star: Vector,
    c: Matrix,
    v_factor: Matrix,
    q1: Matrix,
    q2: Matrix,
    init: InitialState,
    n: usize,
    p: usize,
}

impl ClosedLoopSimulator {
    pub fn new(
        cl: &AugmentedClosedLoop,
        plant: &LtiPlant,
        u0: &Vector,
        eq: &Equilibrium,
        horizon: f64,
        step: f64,
    ) -> Result<Self> {
        if u0.len() != plant.m() || eq.u_star.len() != plant.m() {
            return Err(Error::Dimension("feedforward must have length m".into()));
        }
        let offset = u0 - &eq.u_star;
        let prop = ExactPropagator::new(&cl.abar_k, &cl.bbar, &offset, &cl.wtilde_k, horizon, step)?;
        Ok(Self {
            prop,
            x_star: eq.x_star.clone(),
            c: plant.c.clone(),
            v_factor: psd_factor(&plant.v),
            q1: cl.q1.clone(),
            q2: cl.q2.clone(),
            init: plant.init.clone(),
            n: plant.n(),
            p: plant.p(),
        })
    }

    pub fn grid_len(&self) -> usize {
        self.prop.grid_len()
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let ex0 = self.init.sample(self.n, rng) - &self.x_star;
        let mut s = Vector::zeros(self.n + self.p);
        s.rows_mut(0, self.n).copy_from(&ex0);
        s
    }

    /// Measured error `-C e_x + v` with a fresh measurement-noise draw.
    fn measured_error<R: Rng + ?Sized>(&self, state: &Vector, rng: &mut R) -> Vector {
        let ex = state.rows(0, self.n);
        -(&self.c * ex) + &self.v_factor * standard_normal_vector(self.p, rng)
    }

    fn stage_cost(&self, e: &Vector, z: &Vector) -> f64 {
        (e.transpose() * &self.q1 * e)[(0, 0)] + (z.transpose() * &self.q2 * z)[(0, 0)]
    }

    /// Augmented state `(e_x, z)` at the horizon, no output measurement.
    pub fn final_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vector> {
        let mut s = self.initial_state(rng);
        self.prop.run(&mut s, rng, |_, _, _| {})?;
        Ok(s)
    }

    pub fn rollout<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RolloutSample> {
        let s = self.final_state(rng)?;
        let e = self.measured_error(&s, rng);
        let z = s.rows(self.n, self.p).into_owned();
        let cost = self.stage_cost(&e, &z);
        Ok(RolloutSample { e_tau: e, z_tau: z, cost_sample: cost })
    }

    /// Trapezoidal time average of `e^T Q1 e + z^T Q2 z` over the grid.
    pub fn time_averaged_cost<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let mut s = self.initial_state(rng);
        let mut acc = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        self.prop.run(&mut s, rng, |t, st, r| {
            let e = self.measured_error(st, r);
            let z = st.rows(self.n, self.p).into_owned();
            let c = self.stage_cost(&e, &z);
            if let Some((t0, c0)) = prev {
                acc += 0.5 * (t - t0) * (c + c0);
            }
            prev = Some((t, c));
        })?;
        let horizon = prev.map(|(t, _)| t).unwrap_or(0.0);
        Ok(if horizon > 0.0 { acc / horizon } else { prev.map(|(_, c)| c).unwrap_or(0.0) })
    }

    fn initial_batch(&self, rngs: &mut [SimRng]) -> Matrix {
        let mut x = Matrix::zeros(self.n + self.p, rngs.len());
        for (j, rng) in rngs.iter_mut().enumerate() {
            let s = self.initial_state(rng);
            x.set_column(j, &s);
        }
        x
    }

    /// Stage costs of every column, with a fresh measurement draw per column.
    fn batch_stage_costs(&self, x: &Matrix, rngs: &mut [SimRng], out: &mut [f64]) {
        let ex = x.rows(0, self.n);
        let e_clean = -(&self.c * ex);
        for (j, rng) in rngs.iter_mut().enumerate() {
            let e: Vector = e_clean.column(j) + &self.v_factor * standard_normal_vector(self.p, rng);
            let z: Vector = x.view((self.n, j), (self.p, 1)).column(0).into_owned();
            out[j] = self.stage_cost(&e, &z);
        }
    }

    /// Independent rollouts, one per seed, advanced together. Each result
    /// has the same law as [`ClosedLoopSimulator::rollout`] with that seed.
    pub fn rollout_batch(&self, seeds: &[u64]) -> std::result::Result<Vec<RolloutSample>, (usize, Error)> {
        let mut rngs: Vec<SimRng> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
        let mut x = self.initial_batch(&mut rngs);
        self.prop.run_batch(&mut x, &mut rngs, |_, _, _| {})?;
        Ok(rngs
            .iter_mut()
            .enumerate()
            .map(|(j, rng)| {
                let s = x.column(j).into_owned();
                let e = self.measured_error(&s, rng);
                let z = s.rows(self.n, self.p).into_owned();
                let cost = self.stage_cost(&e, &z);
                RolloutSample { e_tau: e, z_tau: z, cost_sample: cost }
            })
            .collect())
    }

    /// Batched [`ClosedLoopSimulator::time_averaged_cost`].
    pub fn time_averaged_cost_batch(&self, seeds: &[u64]) -> std::result::Result<Vec<f64>, (usize, Error)> {
        let b = seeds.len();
        let mut rngs: Vec<SimRng> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
        let mut x = self.initial_batch(&mut rngs);
        let mut acc = vec![0.0; b];
        let mut prev = vec![0.0; b];
        let mut cur = vec![0.0; b];
        let mut t_prev: Option<f64> = None;
        self.prop.run_batch(&mut x, &mut rngs, |t, st, r| {
            self.batch_stage_costs(st, r, &mut cur);
            if let Some(t0) = t_prev {
                for j in 0..b {
                    acc[j] += 0.5 * (t - t0) * (cur[j] + prev[j]);
                }
            }
            std::mem::swap(&mut prev, &mut cur);
            t_prev = Some(t);
        })?;
        let horizon = t_prev.unwrap_or(0.0);
        Ok(if horizon > 0.0 { acc.iter().map(|a| a / horizon).collect() } else { prev })
    }

    /// Output trajectory `y(t) = y* - e(t)` on the grid.
    pub fn output_trajectory<R: Rng + ?Sized>(&self, y_star: &Vector, rng: &mut R) -> Result<Vec<(f64, Vector)>> {
        let mut s = self.initial_state(rng);
        let mut out = Vec::with_capacity(self.grid_len());
        self.prop.run(&mut s, rng, |t, st, r| {
            out.push((t, y_star - self.measured_error(st, r)));
        })?;
        Ok(out)
    }
}

/// Single rollout of the PI closed loop to the horizon `tau`.
///
/// The augmented state starts at `(x(0) - x*, 0)` with `x(0)` drawn from the
/// plant's initial distribution and is advanced exactly over each sampling
/// step of length `step`.
pub fn simulate_closed_loop<R: Rng + ?Sized>(
    cl: &AugmentedClosedLoop,
    plant: &LtiPlant,
    u0: &Vector,
    eq: &Equilibrium,
    tau: f64,
    step: f64,
    rng: &mut R,
) -> Result<RolloutSample> {
    ClosedLoopSimulator::new(cl, plant, u0, eq, tau, step)?.rollout(rng)
}

/// Random plant with `A = J - R` (`J` skew, `R = R̄ R̄^T`, `R̄ = 2 randn`),
/// `B = 3 randn(n, m)`, `C` the first `p` rows of `B^T`, `W = 1e-2 I`,
/// `V = 5e-4 I` and `x(0)` uniform on `[-3, 3]^n`.
pub fn generate_random_plant<R: Rng + ?Sized>(n: usize, m: usize, p: usize, rng: &mut R) -> Result<LtiPlant> {
    if !(p <= m && m <= n) || p == 0 {
        return Err(Error::Dimension(format!("need 0 < p <= m <= n, got n={n}, m={m}, p={p}")));
    }
    let mut randn = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    for _ in 0..100 {
        let jbar = randn(n, n);
        let j = (&jbar - jbar.transpose()) * 0.5;
        let rbar = randn(n, n) * 2.0;
        let r = &rbar * rbar.transpose();
        let a = j - r;
        let b = randn(n, m) * 3.0;
        let c = b.transpose().rows(0, p).into_owned();
        match LtiPlant::new(
            a,
            b,
            c,
            Matrix::identity(n, n) * 1e-2,
            Matrix::identity(p, p) * 5e-4,
            InitialState::default(),
        ) {
            Ok(plant) => return Ok(plant),
            Err(Error::Rank { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Rank { what: "random plant after 100 attempts", sigma_min: 0.0, sigma_max: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;

    fn scalar_plant(a: f64, w: f64, v: f64) -> LtiPlant {
        LtiPlant::new(
            Matrix::from_element(1, 1, a),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, w),
            Matrix::from_element(1, 1, v),
            InitialState::point(Vector::zeros(1)),
        )
        .unwrap()
    }

    #[test]
    fn equilibrium_of_first_order_lag() {
        let i2 = Matrix::identity(2, 2);
        let plant =
            LtiPlant::new(-&i2, i2.clone(), i2.clone(), i2.clone() * 0.0, i2.clone() * 0.0, InitialState::default())
                .unwrap();
        let eq = compute_equilibrium(&plant, &Vector::from_vec(vec![5.0, 5.0])).unwrap();
        assert_relative_eq!(eq.x_star, Vector::from_vec(vec![5.0, 5.0]), epsilon = 1e-12);
        assert_relative_eq!(eq.u_star, Vector::from_vec(vec![5.0, 5.0]), epsilon = 1e-12);
        let eq0 = compute_equilibrium(&plant, &Vector::zeros(2)).unwrap();
        assert_eq!(eq0.x_star.norm() + eq0.u_star.norm(), 0.0);
    }

    #[test]
    fn random_plant_equilibrium_residuals() {
        let mut rng = rng_from_seed(11);
        let plant = generate_random_plant(6, 2, 2, &mut rng).unwrap();
        let y = Vector::from_vec(vec![1.5, -2.0]);
        let eq = compute_equilibrium(&plant, &y).unwrap();
        let scale = 1.0 + eq.x_star.norm() + eq.u_star.norm();
        assert!((&plant.a * &eq.x_star + &plant.b * &eq.u_star).norm() <= 1e-9 * scale);
        assert!((&plant.c * &eq.x_star - &y).norm() <= 1e-9 * scale);
    }

    #[test]
    fn plant_validation() {
        let i2 = Matrix::identity(2, 2);
        // p > m
        let err = LtiPlant::new(
            -&i2,
            Matrix::from_element(2, 1, 1.0),
            i2.clone(),
            i2.clone(),
            i2.clone(),
            InitialState::default(),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
        // rank-deficient [[A, B], [C, 0]]: A = 0, B = 0
        let err = LtiPlant::new(
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            i2.clone(),
            i2.clone(),
            i2.clone(),
            InitialState::default(),
        );
        assert!(matches!(err, Err(Error::Rank { .. })));
        let err = LtiPlant::new(-&i2, i2.clone(), i2.clone(), -&i2, i2.clone(), InitialState::default());
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn zero_gain_closed_loop() {
        let plant = scalar_plant(0.1, 0.5, 1.0);
        let q = Matrix::identity(1, 1);
        let cl = build_closed_loop(&plant, &PiGain::zeros(1, 1), &q, &q).unwrap();
        assert_eq!(cl.abar_k, cl.abar);
        assert_eq!(cl.wtilde_k, Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]));
        assert!(!is_stabilizing(&cl));
    }

    #[test]
    fn scalar_closed_loop_matrix() {
        let plant = scalar_plant(0.1, 0.5, 1.0);
        let q = Matrix::identity(1, 1);
        let k = PiGain::new(Matrix::from_element(1, 1, 1.0), Matrix::from_element(1, 1, 4.0)).unwrap();
        let cl = build_closed_loop(&plant, &k, &q, &q).unwrap();
        assert_relative_eq!(cl.abar_k, Matrix::from_row_slice(2, 2, &[0.1 - 1.0, 4.0, -1.0, 0.0]), epsilon = 1e-15);
        // trace -0.9, det 4: complex pair with real part -0.45
        assert!(is_stabilizing(&cl));
        let bad = PiGain::new(Matrix::from_element(1, 1, -3.0), Matrix::from_element(1, 1, 4.0)).unwrap();
        assert!(!is_stabilizing(&build_closed_loop(&plant, &bad, &q, &q).unwrap()));
    }

    #[test]
    fn closed_loop_blocks_reassemble() {
        let mut rng = rng_from_seed(5);
        let plant = generate_random_plant(5, 2, 2, &mut rng).unwrap();
        let k = PiGain::new(
            Matrix::from_fn(2, 2, |i, j| 0.3 * (i as f64) - 0.2 * (j as f64) + 0.5),
            Matrix::from_fn(2, 2, |i, j| 0.1 * (i + 2 * j) as f64),
        )
        .unwrap();
        let q = Matrix::identity(2, 2);
        let cl = build_closed_loop(&plant, &k, &q, &q).unwrap();
        let n = 5;
        let top_left = &plant.a - &plant.b * &k.kp * &plant.c;
        let top_right = &plant.b * &k.ki;
        assert_relative_eq!(cl.abar_k.view((0, 0), (n, n)).into_owned(), top_left, epsilon = 1e-12);
        assert_relative_eq!(cl.abar_k.view((0, n), (n, 2)).into_owned(), top_right, epsilon = 1e-12);
        assert_relative_eq!(cl.abar_k.view((n, 0), (2, n)).into_owned(), -&plant.c, epsilon = 0.0);
        assert_eq!(cl.abar_k.view((n, n), (2, 2)).norm(), 0.0);
        assert!(min_sym_eigenvalue(&cl.wtilde_k) >= -1e-10);
    }

    #[test]
    fn equilibrium_is_invariant_without_noise() {
        let mut rng = rng_from_seed(8);
        let plant = generate_random_plant(4, 2, 2, &mut rng).unwrap().noiseless();
        let y = Vector::from_vec(vec![5.0, 5.0]);
        let eq = compute_equilibrium(&plant, &y).unwrap();
        let mut plant = plant;
        plant.init = InitialState::point(eq.x_star.clone());
        let q = Matrix::identity(2, 2);
        let k = PiGain::scaled_identity(2, 2, 1.0, 1.0);
        let cl = build_closed_loop(&plant, &k, &q, &q).unwrap();
        let s = simulate_closed_loop(&cl, &plant, &eq.u_star, &eq, 3.0, 0.01, &mut rng).unwrap();
        assert!(s.e_tau.norm() < 1e-12 && s.z_tau.norm() < 1e-12);
        assert!(s.cost_sample < 1e-20);
    }

    #[test]
    fn generated_plants_have_expected_structure() {
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let plant = generate_random_plant(6, 2, 2, &mut rng).unwrap();
            assert_eq!(plant.c, plant.b.transpose());
            assert!(crate::linmath::max_real_eigenvalue(&plant.a) < 0.0);
            let sym = &plant.a + plant.a.transpose();
            assert!(crate::linmath::symmetrize(&sym).symmetric_eigenvalues().max() < 0.0);
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = rng_from_seed(2);
        let plant = generate_random_plant(3, 2, 1, &mut rng).unwrap();
        let s = plant.to_json(Some(2)).unwrap();
        let (back, seed) = LtiPlant::from_json(&s).unwrap();
        assert_eq!(seed, Some(2));
        assert_eq!(back, plant);
        assert!(s.contains("\"kind\": \"uniform\""));
    }

    #[test]
    fn divergence_is_reported_with_time() {
        // Strongly unstable loop over a long horizon overflows.
        let plant = scalar_plant(50.0, 0.0, 0.0);
        let mut plant = plant;
        plant.init = InitialState::point(Vector::from_element(1, 1.0));
        let q = Matrix::identity(1, 1);
        let cl = build_closed_loop(&plant, &PiGain::zeros(1, 1), &q, &q).unwrap();
        let eq = compute_equilibrium(&plant, &Vector::zeros(1)).unwrap();
        let mut rng = rng_from_seed(0);
        let err = simulate_closed_loop(&cl, &plant, &Vector::zeros(1), &eq, 20.0, 0.1, &mut rng).unwrap_err();
        match err {
            Error::Divergence { time, .. } => assert!(time > 0.0 && time <= 20.0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
