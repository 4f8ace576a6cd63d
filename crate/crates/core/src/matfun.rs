//! Dense small-matrix functions underpinning the model and filter layers:
//! matrix exponential, Lyapunov/Sylvester solvers, Van Loan noise
//! discretization, psd factorization and stability checks.
//!
//! All routines target the small dense matrices of this crate (n up to a few
//! hundred); none of them is meant for large or sparse problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative spectrum-gap tolerance for the Sylvester solver.
const SPECTRUM_GAP_RTOL: f64 = 1e-8;

/// Outcome of a stability check: `stable` iff every eigenvalue of the drift
/// matrix has negative real part, `margin` is minus the largest real part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    pub stable: bool,
    pub margin: f64,
}

/// Lower-triangular factor `L` with nonnegative diagonal, `L L^T = S`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactor {
    l: DMatrix<f64>,
}

impl PsdFactor {
    /// Wrap a lower-triangular matrix with nonnegative diagonal.
    pub fn new(l: DMatrix<f64>) -> Result<Self> {
        if !l.is_square() {
            return Err(Error::InvalidInput("psd factor must be square".into()));
        }
        for j in 0..l.ncols() {
            if l[(j, j)] < 0.0 {
                return Err(Error::InvalidInput(
                    "psd factor diagonal must be nonnegative".into(),
                ));
            }
            for i in 0..j {
                if l[(i, j)] != 0.0 {
                    return Err(Error::InvalidInput(
                        "psd factor must be lower triangular".into(),
                    ));
                }
            }
        }
        Ok(Self { l })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.l
    }

    /// Reconstruct `L L^T`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }
}

pub(crate) fn check_square_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::InvalidInput(format!(
            "{name} must be square and nonempty ({}x{})",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, rtol: f64) -> bool {
    let scale = m.norm().max(1e-300);
    (m - m.transpose()).norm() <= rtol * scale
}

/// Matrix 1-norm (max absolute column sum).
fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// True iff all eigenvalues of `a` lie in the open left half plane; the
/// margin is minus the largest real part (positive when stable).
pub fn is_stable(a: &DMatrix<f64>) -> Result<Stability> {
    check_square_finite("A", a)?;
    let max_re = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Stability {
        stable: max_re < 0.0,
        margin: -max_re,
    })
}

/// Matrix exponential `e^{A t}` by scaling-and-squaring with Padé
/// approximants of order 3/5/7/9/13 (Higham 2005 switching thresholds).
pub fn expm(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_square_finite("A", a)?;
    if !t.is_finite() {
        return Err(Error::InvalidInput("time must be finite".into()));
    }
    Ok(expm_unchecked(&(a * t)))
}

/// `e^M` for a finite square matrix; no validation.
pub(crate) fn expm_unchecked(m: &DMatrix<f64>) -> DMatrix<f64> {
    const THETA3: f64 = 1.495585217958292e-2;
    const THETA5: f64 = 2.539398330063230e-1;
    const THETA7: f64 = 9.504178996162932e-1;
    const THETA9: f64 = 2.097847961257068e0;
    const THETA13: f64 = 5.371920351148152e0;

    let norm = one_norm(m);
    let m2 = m * m;

    let (u, v) = if norm <= THETA3 {
        pade_uv(m, &[&m2], &PADE3)
    } else if norm <= THETA5 {
        let m4 = &m2 * &m2;
        pade_uv(m, &[&m2, &m4], &PADE5)
    } else if norm <= THETA7 {
        let m4 = &m2 * &m2;
        let m6 = &m4 * &m2;
        pade_uv(m, &[&m2, &m4, &m6], &PADE7)
    } else if norm <= THETA9 {
        let m4 = &m2 * &m2;
        let m6 = &m4 * &m2;
        let m8 = &m6 * &m2;
        pade_uv(m, &[&m2, &m4, &m6, &m8], &PADE9)
    } else {
        let s = ((norm / THETA13).log2().ceil().max(0.0)) as u32;
        let ms = m / 2f64.powi(s as i32);
        let s2 = &ms * &ms;
        let s4 = &s2 * &s2;
        let s6 = &s4 * &s2;
        let (u, v) = pade13_uv(&ms, &s2, &s4, &s6);
        let mut r = solve_pade(&u, &v);
        for _ in 0..s {
            r = &r * &r;
        }
        return r;
    };
    solve_pade(&u, &v)
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const PADE9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// U and V of the [m/m] Padé approximant from precomputed even powers.
fn pade_uv(m: &DMatrix<f64>, powers: &[&DMatrix<f64>], b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // odd coefficients build U = m * (b1 I + b3 m^2 + ...), even build V.
    let mut u_inner = &eye * b[1];
    let mut v = &eye * b[0];
    for (i, p) in powers.iter().enumerate() {
        u_inner += *p * b[2 * i + 3];
        v += *p * b[2 * i + 2];
    }
    (m * u_inner, v)
}

fn pade13_uv(
    m: &DMatrix<f64>,
    m2: &DMatrix<f64>,
    m4: &DMatrix<f64>,
    m6: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let n = m.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let u_high = m6 * (m6 * b[13] + m4 * b[11] + m2 * b[9]);
    let u_low = m6 * b[7] + m4 * b[5] + m2 * b[3] + &eye * b[1];
    let v_high = m6 * (m6 * b[12] + m4 * b[10] + m2 * b[8]);
    let v_low = m6 * b[6] + m4 * b[4] + m2 * b[2] + &eye * b[0];
    (m * (u_high + u_low), v_high + v_low)
}

/// Solve (V - U) R = (V + U) for R.
fn solve_pade(u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let denom = v - u;
    let numer = v + u;
    denom
        .full_piv_lu()
        .solve(&numer)
        .expect("Pade denominator is singular; input matrix norm out of range")
}

fn schur_decompose(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    let (q, t) = schur.unpack();
    Ok((q, t))
}

/// Diagonal block layout (start, size) of a real quasi-triangular matrix,
/// sizes 1 or 2 depending on the subdiagonal.
fn quasi_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

/// Solve `P Y + Y S = G` for tiny blocks (h, w <= 2) via the Kronecker form.
fn solve_small_sylvester(
    p: &DMatrix<f64>,
    s: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let h = p.nrows();
    let w = s.nrows();
    let mut m = DMatrix::<f64>::zeros(h * w, h * w);
    // vec(P Y) = (I_w ⊗ P) vec(Y); vec(Y S) = (S^T ⊗ I_h) vec(Y)
    for c in 0..w {
        for i in 0..h {
            for k in 0..h {
                m[(c * h + i, c * h + k)] += p[(i, k)];
            }
        }
    }
    for c in 0..w {
        for r in 0..w {
            for i in 0..h {
                m[(c * h + i, r * h + i)] += s[(r, c)];
            }
        }
    }
    let rhs = DVector::from_fn(h * w, |idx, _| g[(idx % h, idx / h)]);
    let sol = m
        .full_piv_lu()
        .solve(&rhs)
        .ok_or(Error::SpectrumOverlap { gap: 0.0 })?;
    Ok(DMatrix::from_fn(h, w, |i, j| sol[j * h + i]))
}

/// Back-substitution for `T_a Y + Y T_b = F` with both factors upper
/// quasi-triangular (the Bartels–Stewart core).
fn solve_quasi_triangular_sylvester(
    ta: &DMatrix<f64>,
    tb: &DMatrix<f64>,
    f: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let a_blocks = quasi_blocks(ta);
    let b_blocks = quasi_blocks(tb);
    let mut y = DMatrix::<f64>::zeros(f.nrows(), f.ncols());

    for &(jc, jw) in &b_blocks {
        // right-hand side for this block column: F_j - sum_{k<j} Y_k Tb[k, j]
        let mut g = f.view((0, jc), (f.nrows(), jw)).into_owned();
        if jc > 0 {
            g -= y.view((0, 0), (f.nrows(), jc)) * tb.view((0, jc), (jc, jw));
        }
        let s_jj = tb.view((jc, jc), (jw, jw)).into_owned();
        for &(ir, ih) in a_blocks.iter().rev() {
            let mut rhs = g.view((ir, 0), (ih, jw)).into_owned();
            let below = ir + ih;
            if below < f.nrows() {
                rhs -= ta.view((ir, below), (ih, f.nrows() - below))
                    * y.view((below, jc), (f.nrows() - below, jw));
            }
            let p_ii = ta.view((ir, ir), (ih, ih)).into_owned();
            let y_block = solve_small_sylvester(&p_ii, &s_jj, &rhs)?;
            y.view_mut((ir, jc), (ih, jw)).copy_from(&y_block);
        }
    }
    Ok(y)
}

/// Solve the Sylvester equation `A E + E B = C` by Schur decomposition of
/// both coefficient matrices and blockwise back-substitution.
///
/// Fails with [`Error::SpectrumOverlap`] when an eigenvalue of `A` and one
/// of `B` sum to (numerically) zero, the excluded degenerate case.
pub fn solve_sylvester(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_square_finite("A", a)?;
    check_square_finite("B", b)?;
    if c.nrows() != a.nrows() || c.ncols() != b.nrows() {
        return Err(Error::InvalidInput(format!(
            "C must be {}x{}, got {}x{}",
            a.nrows(),
            b.nrows(),
            c.nrows(),
            c.ncols()
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("C has non-finite entries".into()));
    }

    let scale = a.norm() + b.norm();
    let eig_a = a.complex_eigenvalues();
    let eig_b = b.complex_eigenvalues();
    let gap = eig_a
        .iter()
        .flat_map(|la| eig_b.iter().map(move |lb| (la + lb).norm()))
        .fold(f64::INFINITY, f64::min);
    if gap <= SPECTRUM_GAP_RTOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::SpectrumOverlap { gap });
    }

    let (qa, ta) = schur_decompose(a)?;
    let (qb, tb) = schur_decompose(b)?;
    let f = qa.transpose() * c * &qb;
    let y = solve_quasi_triangular_sylvester(&ta, &tb, &f).map_err(|e| match e {
        Error::SpectrumOverlap { .. } => Error::SpectrumOverlap { gap },
        other => other,
    })?;
    Ok(&qa * y * qb.transpose())
}

/// Solve the Lyapunov equation `A Σ + Σ A^T = -K` for the stationary
/// covariance of a stable system driven by white noise of covariance rate
/// `K`. The result is symmetrized.
pub fn solve_lyapunov(a: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square_finite("A", a)?;
    check_square_finite("K", k)?;
    if k.nrows() != a.nrows() {
        return Err(Error::InvalidInput("A and K dimensions differ".into()));
    }
    let st = is_stable(a)?;
    if !st.stable {
        return Err(Error::UnstableSystem { margin: st.margin });
    }
    check_symmetric_psd("K", k, 1e-10)?;
    solve_lyapunov_symmetric(a, k)
}

/// Lyapunov solve for any symmetric right-hand side (no psd requirement);
/// used for differentiated Lyapunov equations whose RHS is indefinite.
pub(crate) fn solve_lyapunov_symmetric(a: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sigma = solve_sylvester(a, &a.transpose(), &(-k))?;
    Ok(symmetrize(&sigma))
}

/// Error unless `m` is symmetric with min eigenvalue >= -rtol * trace.
pub(crate) fn check_symmetric_psd(name: &str, m: &DMatrix<f64>, rtol: f64) -> Result<()> {
    if !is_symmetric(m, 1e-9) {
        return Err(Error::InvalidInput(format!("{name} must be symmetric")));
    }
    let min_eig = symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let floor = -rtol * m.trace().abs().max(f64::MIN_POSITIVE);
    if min_eig < floor {
        return Err(Error::NotPsd { min_eig });
    }
    Ok(())
}

/// Exact discretization of a linear stochastic system over a step `tau`:
/// returns the propagator `Φ = e^{A tau}` and the accumulated process-noise
/// covariance `G = ∫_0^tau e^{A s} K e^{A^T s} ds`, both read off one
/// exponential of the augmented block matrix `[[A, K], [0, -A^T]]`.
pub fn van_loan_discretize(
    a: &DMatrix<f64>,
    k: &DMatrix<f64>,
    tau: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_square_finite("A", a)?;
    check_square_finite("K", k)?;
    let n = a.nrows();
    if k.nrows() != n {
        return Err(Error::InvalidInput("A and K dimensions differ".into()));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("step must be >= 0, got {tau}")));
    }
    check_symmetric_psd("K", k, 1e-10)?;
    if tau == 0.0 {
        return Ok((DMatrix::identity(n, n), DMatrix::zeros(n, n)));
    }

    let mut aug = DMatrix::<f64>::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, n)).copy_from(k);
    aug.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    // The -A^T block grows like e^{+margin*tau}; keep the exponentiated
    // horizon short and extend by the exact composition
    // G(2t) = Φ(t) G(t) Φ(t)^T + G(t).
    let scaled_norm = one_norm(&aug) * tau;
    let doublings = if scaled_norm > 2.0 {
        (scaled_norm / 2.0).log2().ceil() as u32
    } else {
        0
    };
    let sub_tau = tau / 2f64.powi(doublings as i32);

    let e = expm_unchecked(&(aug * sub_tau));
    let mut phi = e.view((0, 0), (n, n)).into_owned();
    // top-right block is G e^{-A^T tau}, so G = block * Φ^T
    let mut g = symmetrize(&(e.view((0, n), (n, n)) * phi.transpose()));
    for _ in 0..doublings {
        g = symmetrize(&(&phi * &g * phi.transpose() + &g));
        phi = &phi * &phi;
    }
    Ok((phi, g))
}

/// Cholesky-style factorization of a symmetric psd matrix, tolerating zero
/// (and slightly negative, within `tol * trace`) eigenvalues by zeroing the
/// corresponding columns.
pub fn cholesky_psd(s: &DMatrix<f64>, tol: f64) -> Result<PsdFactor> {
    check_square_finite("S", s)?;
    check_symmetric_psd("S", s, tol)?;
    let n = s.nrows();
    let scale = s.trace().abs().max(f64::MIN_POSITIVE);
    let pivot_floor = tol.max(1e-14) * scale;

    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= pivot_floor {
            // treat as exactly semidefinite: zero pivot, zero column
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    PsdFactor::new(l)
}
