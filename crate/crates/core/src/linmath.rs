//! Dense linear-algebra kernels shared by the rest of the crate.
//!
//! Everything here works on heap-allocated `nalgebra` matrices; the sizes in
//! this problem are small (augmented closed loops of a few dozen states), so
//! dense `O(q^3)` algorithms are the right tool.

use nalgebra::{DMatrix, DVector, Schur, SVD};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Margin used for all Hurwitz / Schur membership checks.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Exact zero-order-hold discretization of `dx = A x dt + B u dt + dw` with
/// noise intensity `W` over a step `h`.
#[derive(Debug, Clone)]
pub struct VanLoanResult {
    pub ad: Matrix,
    pub bd: Matrix,
    pub wd: Matrix,
}

pub fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn ensure_square(m: &Matrix, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())))
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Block-diagonal matrix from two square blocks.
pub fn block_diag(a: &Matrix, b: &Matrix) -> Matrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Matrix::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}

/// `[a b]`.
pub fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

/// `[a; b]`.
pub fn vstack(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.ncols());
    let mut out = Matrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

/// Matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    ensure_square(a, "expm argument")?;
    ensure_finite(a, "expm argument")?;
    if a.nrows() == 0 {
        return Ok(a.clone());
    }
    let e = a.exp();
    ensure_finite(&e, "matrix exponential (overflow)")?;
    Ok(e)
}

/// Van Loan discretization: `Ad = e^{Ah}`, `Bd = ∫_0^h e^{At} dt B` and
/// `Wd = ∫_0^h e^{At} W e^{A^T t} dt`, all from one exponential of the
/// `(2n+m)`-dimensional block matrix
///
/// ```text
/// [ -A   W   0 ]
/// [  0  A^T  0 ] * h
/// [  0  B^T  0 ]
/// ```
///
/// When `|A| h` is large the exponential is taken over `h / 2^s` and the
/// result is doubled `s` times through the semigroup identities, which keeps
/// the `e^{-Ah}` block from overflowing.
pub fn van_loan(a: &Matrix, b: &Matrix, wint: &Matrix, h: f64) -> Result<VanLoanResult> {
    ensure_square(a, "A")?;
    let n = a.nrows();
    let m = b.ncols();
    if b.nrows() != n {
        return Err(Error::Dimension(format!("B has {} rows, A is {n}x{n}", b.nrows())));
    }
    if wint.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "noise intensity is {}x{}, expected {n}x{n}",
            wint.nrows(),
            wint.ncols()
        )));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("step h must be positive, got {h}")));
    }
    ensure_finite(a, "A")?;
    ensure_finite(b, "B")?;
    ensure_finite(wint, "noise intensity")?;

    let scale = a.abs().row_sum().max() * h;
    let doublings = if scale > 1.0 { scale.log2().ceil() as u32 } else { 0 };
    let h0 = h / f64::from(2u32.pow(doublings));

    let dim = 2 * n + m;
    let mut big = Matrix::zeros(dim, dim);
    big.view_mut((0, 0), (n, n)).copy_from(&(-a * h0));
    big.view_mut((0, n), (n, n)).copy_from(&(wint * h0));
    big.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * h0));
    big.view_mut((2 * n, n), (m, n)).copy_from(&(b.transpose() * h0));
    let e = expm(&big)?;

    let f22 = e.view((n, n), (n, n)).into_owned();
    let g12 = e.view((0, n), (n, n)).into_owned();
    let mut ad = f22.transpose();
    let mut bd = e.view((2 * n, n), (m, n)).transpose();
    let mut wd = symmetrize(&(&ad * g12));

    for _ in 0..doublings {
        wd = symmetrize(&(&ad * &wd * ad.transpose() + &wd));
        bd = &ad * &bd + &bd;
        ad = &ad * &ad;
    }
    Ok(VanLoanResult { ad, bd, wd })
}

/// Real Schur form `A = U T U^T` with the diagonal block partition of `T`.
struct RealSchur {
    u: Matrix,
    t: Matrix,
    /// `(start, size)` of each diagonal block.
    blocks: Vec<(usize, usize)>,
}

impl RealSchur {
    fn new(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        let schur = Schur::try_new(a.clone(), f64::EPSILON, 1000 * n.max(1))
            .ok_or_else(|| Error::Estimation("Schur decomposition did not converge".into()))?;
        let (u, t) = schur.unpack();
        let mut blocks = Vec::new();
        let mut i = 0;
        while i < n {
            let mut size = 1;
            while i + size < n && t[(i + size, i + size - 1)] != 0.0 {
                size += 1;
            }
            blocks.push((i, size));
            i += size;
        }
        Ok(Self { u, t, blocks })
    }

    fn eigenvalues(&self) -> Vec<nalgebra::Complex<f64>> {
        let mut out = Vec::with_capacity(self.t.nrows());
        for &(s, k) in &self.blocks {
            if k == 1 {
                out.push(nalgebra::Complex::new(self.t[(s, s)], 0.0));
            } else {
                let blk = self.t.view((s, s), (k, k)).into_owned();
                out.extend(blk.complex_eigenvalues().iter().copied());
            }
        }
        out
    }

    fn max_real(&self) -> f64 {
        self.eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    fn max_modulus(&self) -> f64 {
        self.eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Largest real part among the eigenvalues of `a`.
pub fn max_real_eigenvalue(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_radius(a: &Matrix) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn is_hurwitz(a: &Matrix) -> bool {
    max_real_eigenvalue(a) < -STABILITY_MARGIN
}

pub fn is_schur_stable(a: &Matrix) -> bool {
    spectral_radius(a) < 1.0 - STABILITY_MARGIN
}

/// Solves `S1 X + X S2^T = R` for small dense blocks by vectorization.
fn small_sylvester(s1: &Matrix, s2: &Matrix, rhs: &Matrix) -> Option<Matrix> {
    let (r, c) = rhs.shape();
    let kron = Matrix::identity(c, c).kronecker(s1) + s2.kronecker(&Matrix::identity(r, r));
    let v = Vector::from_column_slice(rhs.as_slice());
    let sol = kron.lu().solve(&v)?;
    Some(Matrix::from_column_slice(r, c, sol.as_slice()))
}

/// Solves `S1 X S2^T - X = R` for small dense blocks.
fn small_stein(s1: &Matrix, s2: &Matrix, rhs: &Matrix) -> Option<Matrix> {
    let (r, c) = rhs.shape();
    let kron = s2.kronecker(s1) - Matrix::identity(r * c, r * c);
    let v = Vector::from_column_slice(rhs.as_slice());
    let sol = kron.lu().solve(&v)?;
    Some(Matrix::from_column_slice(r, c, sol.as_slice()))
}

fn check_lyapunov_args(f: &Matrix, q: &Matrix) -> Result<()> {
    ensure_square(f, "Lyapunov coefficient")?;
    if q.shape() != f.shape() {
        return Err(Error::Dimension(format!(
            "Lyapunov right-hand side is {}x{}, coefficient is {}x{}",
            q.nrows(),
            q.ncols(),
            f.nrows(),
            f.ncols()
        )));
    }
    ensure_finite(f, "Lyapunov coefficient")?;
    ensure_finite(q, "Lyapunov right-hand side")
}

/// Solves `F X + X F^T + Qc = 0` for Hurwitz `F` (Bartels–Stewart on the
/// real Schur form of `F`).
pub fn solve_lyapunov_continuous(f: &Matrix, qc: &Matrix) -> Result<Matrix> {
    check_lyapunov_args(f, qc)?;
    let q = f.nrows();
    if q == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let schur = RealSchur::new(f)?;
    let margin = schur.max_real();
    if margin >= -STABILITY_MARGIN {
        return Err(Error::Stability { what: "Lyapunov coefficient (continuous)", margin });
    }
    let RealSchur { u, t, blocks } = &schur;
    let c = -(u.transpose() * qc * u);
    let mut x = Matrix::zeros(q, q);

    for &(ri, si) in blocks.iter().rev() {
        let end_i = ri + si;
        for &(rj, sj) in blocks.iter().rev() {
            let end_j = rj + sj;
            let mut rhs = c.view((ri, rj), (si, sj)).into_owned();
            if end_i < q {
                rhs -= t.view((ri, end_i), (si, q - end_i)) * x.view((end_i, rj), (q - end_i, sj));
            }
            if end_j < q {
                rhs -= x.view((ri, end_j), (si, q - end_j)) * t.view((rj, end_j), (sj, q - end_j)).transpose();
            }
            let tii = t.view((ri, ri), (si, si)).into_owned();
            let tjj = t.view((rj, rj), (sj, sj)).into_owned();
            let blk = small_sylvester(&tii, &tjj, &rhs).ok_or(Error::Singular("Lyapunov block system"))?;
            x.view_mut((ri, rj), (si, sj)).copy_from(&blk);
        }
    }
    Ok(symmetrize(&(u * x * u.transpose())))
}

/// Solves `F X F^T - X + Qd = 0` for Schur-stable `F`.
pub fn solve_lyapunov_discrete(f: &Matrix, qd: &Matrix) -> Result<Matrix> {
    check_lyapunov_args(f, qd)?;
    let q = f.nrows();
    if q == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let schur = RealSchur::new(f)?;
    let radius = schur.max_modulus();
    if radius >= 1.0 - STABILITY_MARGIN {
        return Err(Error::Stability { what: "Lyapunov coefficient (discrete)", margin: radius - 1.0 });
    }
    let RealSchur { u, t, blocks } = &schur;
    let qt = u.transpose() * qd * u;
    let mut x = Matrix::zeros(q, q);

    // Row blocks are solved bottom-up, within a row right to left. `p` holds
    // T[I, >I] X[>I, :] and `m` holds T_II X[I, :] for the solved columns.
    for &(ri, si) in blocks.iter().rev() {
        let end_i = ri + si;
        let p = if end_i < q {
            t.view((ri, end_i), (si, q - end_i)) * x.view((end_i, 0), (q - end_i, q))
        } else {
            Matrix::zeros(si, q)
        };
        let mut m = Matrix::zeros(si, q);
        for &(rj, sj) in blocks.iter().rev() {
            let end_j = rj + sj;
            let mut rhs = [[0.0f64; 2]; 2];
            #[allow(clippy::needless_range_loop)]
            for a in 0..si {
                for b in 0..sj {
                    let tr = rj + b;
                    let mut acc = -qt[(ri + a, tr)];
                    for c in rj..q {
                        acc -= p[(a, c)] * t[(tr, c)];
                    }
                    for c in end_j..q {
                        acc -= m[(a, c)] * t[(tr, c)];
                    }
                    rhs[a][b] = acc;
                }
            }
            if si == 1 && sj == 1 {
                let den = t[(ri, ri)] * t[(rj, rj)] - 1.0;
                if den == 0.0 {
                    return Err(Error::Singular("Stein block system"));
                }
                x[(ri, rj)] = rhs[0][0] / den;
            } else {
                let r = Matrix::from_fn(si, sj, |a, b| rhs[a][b]);
                let tii = t.view((ri, ri), (si, si)).into_owned();
                let tjj = t.view((rj, rj), (sj, sj)).into_owned();
                let blk = small_stein(&tii, &tjj, &r).ok_or(Error::Singular("Stein block system"))?;
                x.view_mut((ri, rj), (si, sj)).copy_from(&blk);
            }
            for a in 0..si {
                for b in rj..end_j {
                    let mut acc = 0.0;
                    for c in 0..si {
                        acc += t[(ri + a, ri + c)] * x[(ri + c, b)];
                    }
                    m[(a, b)] = acc;
                }
            }
        }
    }
    Ok(symmetrize(&(u * x * u.transpose())))
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn spectral_norm(m: &Matrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Right pseudo-inverse `M^T (M M^T)^{-1}` of a full-row-rank `p x m` matrix
/// (`p <= m`), computed through the SVD.
pub fn right_pinv(m: &Matrix) -> Result<Matrix> {
    let (p, cols) = m.shape();
    if p > cols {
        return Err(Error::Dimension(format!("right pseudo-inverse needs rows <= cols, got {p}x{cols}")));
    }
    ensure_finite(m, "pseudo-inverse argument")?;
    let svd = SVD::new(m.clone(), true, true);
    let s = &svd.singular_values;
    let sigma_max = s.max();
    let sigma_min = s.min();
    if !(sigma_max > 0.0) || sigma_min <= RANK_TOL * sigma_max {
        return Err(Error::Rank { what: "pseudo-inverse argument", sigma_min, sigma_max });
    }
    let u = svd.u.as_ref().expect("U requested");
    let vt = svd.v_t.as_ref().expect("V^T requested");
    let mut vs = vt.transpose();
    for (j, sj) in s.iter().enumerate() {
        vs.column_mut(j).scale_mut(1.0 / sj);
    }
    Ok(vs * u.transpose())
}

/// Factor `L` with `L L^T = S` for a symmetric PSD `S`. Uses Cholesky when it
/// succeeds and an eigen-decomposition (negative eigenvalues clipped)
/// otherwise, so singular covariances are allowed.
pub fn psd_factor(s: &Matrix) -> Matrix {
    if s.nrows() == 0 {
        return s.clone();
    }
    if let Some(ch) = s.clone().cholesky() {
        return ch.l();
    }
    let eig = symmetrize(s).symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        v.column_mut(j).scale_mut(lam.max(0.0).sqrt());
    }
    v
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(s: &Matrix) -> f64 {
    symmetrize(s).symmetric_eigenvalues().min()
}

/// Draws an `m x q` matrix uniformly from the Frobenius sphere of the given
/// radius.
pub fn sample_frobenius_sphere<R: Rng + ?Sized>(m: usize, q: usize, radius: f64, rng: &mut R) -> Matrix {
    assert!(radius > 0.0, "sphere radius must be positive");
    loop {
        let g = Matrix::from_fn(m, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 {
            return g * (radius / norm);
        }
    }
}

/// Vector of i.i.d. standard normals.
pub fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vector {
    Vector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}
