//! Dense linear-algebra kernels: Lyapunov solves, spectra and block helpers.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

use crate::scalar::{lit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Lyapunov operator is singular (A and -A share an eigenvalue)")]
    SingularLyapunov,
    #[error("real Schur decomposition did not converge")]
    SchurFailed,
    #[error("eigenvalue decomposition did not converge")]
    EigenFailed,
}

/// Returns `(M + Mᵀ)/2`.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut v: Vec<T> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(v)
}

pub fn min_sym_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let v = sym_eigenvalues(m);
    if v.is_empty() {
        T::zero()
    } else {
        v[0]
    }
}

pub fn max_sym_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let v = sym_eigenvalues(m);
    if v.is_empty() {
        T::zero()
    } else {
        v[v.len() - 1]
    }
}

/// Complex spectrum of a general square matrix.
pub fn spectrum<T: Scalar>(m: &DMatrix<T>) -> Result<Vec<Complex<T>>, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if let Some(s) = schur_attempt(m) {
        return Ok(s.complex_eigenvalues().iter().copied().collect());
    }
    // Diagonal balancing keeps the spectrum and often unsticks the QR sweep.
    let d = balance_diag(m);
    let bal = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[j] / d[i]);
    let (_, t) = schur_robust(&bal)?;
    Ok(quasi_triangular_eigenvalues(&t))
}

/// Francis QR sweeps allowed per dimension before a retry.
const SCHUR_SWEEPS_PER_DIM: usize = 300;

/// Deflation tolerances tried in turn, as multiples of machine epsilon.
/// Clustered spectra can stall the sweep at the tightest setting.
const SCHUR_TOL_LADDER: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

fn schur_attempt<T: Scalar>(m: &DMatrix<T>) -> Option<nalgebra::linalg::Schur<T, nalgebra::Dyn>> {
    let iters = SCHUR_SWEEPS_PER_DIM * m.nrows().max(1);
    SCHUR_TOL_LADDER
        .iter()
        .find_map(|k| m.clone().try_schur(T::default_epsilon() * lit(*k), iters))
}

/// Real Schur form `A = U T Uᵀ`. When the QR sweep stalls the input is
/// rotated by fixed pseudo-random orthogonal matrices and retried.
pub fn schur_robust<T: Scalar>(a: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>), LinalgError> {
    if let Some(s) = schur_attempt(a) {
        return Ok(s.unpack());
    }
    use rand::{Rng, SeedableRng};
    let n = a.nrows();
    for seed in 0..4u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5c4u64 + seed);
        let g = DMatrix::<T>::from_fn(n, n, |_, _| lit(rng.gen_range(-1.0..1.0)));
        let w = g.qr().q();
        let rotated = &w * a * w.transpose();
        if let Some(s) = schur_attempt(&rotated) {
            let (u, t) = s.unpack();
            return Ok((w.transpose() * u, t));
        }
    }
    Err(LinalgError::SchurFailed)
}

/// Eigenvalues of a real upper quasi-triangular matrix.
fn quasi_triangular_eigenvalues<T: Scalar>(t: &DMatrix<T>) -> Vec<Complex<T>> {
    let mut out = Vec::with_capacity(t.nrows());
    for (k, size) in schur_blocks(t) {
        if size == 1 {
            out.push(Complex::new(t[(k, k)], T::zero()));
        } else {
            let (a, b, c, d) = (t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]);
            let half = lit::<T>(0.5);
            let mean = (a + d) * half;
            let disc = ((a - d) * half).powi(2) + b * c;
            if disc >= T::zero() {
                let r = disc.sqrt();
                out.push(Complex::new(mean + r, T::zero()));
                out.push(Complex::new(mean - r, T::zero()));
            } else {
                let r = (-disc).sqrt();
                out.push(Complex::new(mean, r));
                out.push(Complex::new(mean, -r));
            }
        }
    }
    out
}

/// Power-of-two diagonal scaling equalizing row and column norms.
fn balance_diag<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let n = m.nrows();
    let two = lit::<T>(2.0);
    let mut d = vec![T::one(); n];
    for _ in 0..20 {
        let mut changed = false;
        for i in 0..n {
            let (mut c, mut r) = (T::zero(), T::zero());
            for j in 0..n {
                if j != i {
                    c += (m[(j, i)] * d[i] / d[j]).abs();
                    r += (m[(i, j)] * d[j] / d[i]).abs();
                }
            }
            if c == T::zero() || r == T::zero() {
                continue;
            }
            let mut f = T::one();
            while c * f < r / two {
                f *= two;
                if f > lit(1e150) {
                    break;
                }
            }
            while c * f > r * two {
                f /= two;
                if f < lit(1e-150) {
                    break;
                }
            }
            if f != T::one() {
                d[i] *= f;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    d
}

/// Largest real part over the spectrum (`-inf` for an empty matrix).
pub fn spectral_abscissa<T: Scalar>(spec: &[Complex<T>]) -> T {
    spec.iter()
        .map(|z| z.re)
        .fold(-T::max_value().unwrap_or_else(|| lit(f64::MAX)), |a, b| {
            if b > a {
                b
            } else {
                a
            }
        })
}

/// Largest modulus over the spectrum.
pub fn spectral_radius<T: Scalar>(spec: &[Complex<T>]) -> T {
    spec.iter()
        .map(|z| (z.re * z.re + z.im * z.im).sqrt())
        .fold(T::zero(), |a, b| if b > a { b } else { a })
}

/// Singular values, descending.
pub fn singular_values<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<T> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Largest absolute entry (zero for an empty matrix).
pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter()
        .fold(T::zero(), |a, &b| if b.abs() > a { b.abs() } else { a })
}

pub fn max_abs_vec<T: Scalar>(v: &DVector<T>) -> T {
    v.iter()
        .fold(T::zero(), |a, &b| if b.abs() > a { b.abs() } else { a })
}

/// Block-diagonal concatenation.
pub fn block_diag<T: Scalar>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Vertical concatenation; all blocks must share the column count `cols`.
pub fn vstack<T: Scalar>(cols: usize, blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), cols);
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub fn vcat<T: Scalar>(parts: &[&DVector<T>]) -> DVector<T> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.len()).copy_from(*p);
        r += p.len();
    }
    out
}

/// `rows x cols` selector with an identity block starting at column `offset`.
pub fn selector<T: Scalar>(rows: usize, cols: usize, offset: usize) -> DMatrix<T> {
    let mut s = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        s[(i, offset + i)] = T::one();
    }
    s
}

/// Solves `Aᵀ X + X A = F` by Bartels–Stewart on the real Schur form of `A`.
///
/// Unique whenever no two eigenvalues of `A` sum to zero (e.g. `A` Hurwitz).
pub fn solve_lyapunov<T: Scalar>(a: &DMatrix<T>, f: &DMatrix<T>) -> Result<DMatrix<T>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if f.nrows() != n || f.ncols() != n {
        return Err(LinalgError::Dimension(format!(
            "rhs is {}x{}, expected {n}x{n}",
            f.nrows(),
            f.ncols()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (u, t) = schur_robust(a)?;
    let fh = u.transpose() * f * &u;
    let blocks = schur_blocks(&t);
    let mut y = DMatrix::<T>::zeros(n, n);

    // Tᵀ Y + Y T = F̂ with T upper quasi-triangular: block (I, J) depends
    // only on blocks (K, J), K < I and (I, K), K < J.
    for &(j0, jb) in &blocks {
        for &(i0, ib) in &blocks {
            let mut rhs = fh.view((i0, j0), (ib, jb)).into_owned();
            if i0 > 0 {
                rhs -= t.view((0, i0), (i0, ib)).transpose() * y.view((0, j0), (i0, jb));
            }
            if j0 > 0 {
                rhs -= y.view((i0, 0), (ib, j0)) * t.view((0, j0), (j0, jb));
            }
            let tii = t.view((i0, i0), (ib, ib)).into_owned();
            let tjj = t.view((j0, j0), (jb, jb)).into_owned();
            let blk = solve_small_sylvester(&tii, &tjj, &rhs)?;
            y.view_mut((i0, j0), (ib, jb)).copy_from(&blk);
        }
    }
    Ok(symmetrize(&(&u * y * u.transpose())))
}

/// Diagonal block partition `(start, size)` of a real quasi-triangular matrix.
fn schur_blocks<T: Scalar>(t: &DMatrix<T>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let scale = max_abs(t).max(T::min_value().unwrap_or_else(T::zero));
    let tol = T::default_epsilon() * scale * lit(8.0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].abs() > tol {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

/// Solves `Pᵀ Y + Y Q = R` for blocks of size at most 2 via the Kronecker form.
fn solve_small_sylvester<T: Scalar>(
    p: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<DMatrix<T>, LinalgError> {
    let a = p.nrows();
    let b = q.nrows();
    let k = a * b;
    let mut m = DMatrix::<T>::zeros(k, k);
    for qq in 0..b {
        for pp in 0..a {
            let row = pp + a * qq;
            for p2 in 0..a {
                m[(row, p2 + a * qq)] += p[(p2, pp)];
            }
            for q2 in 0..b {
                m[(row, pp + a * q2)] += q[(q2, qq)];
            }
        }
    }
    let rhs = DVector::from_iterator(k, r.iter().copied());
    let scale = max_abs(&m);
    let lu = m.lu();
    let sol = lu.solve(&rhs).ok_or(LinalgError::SingularLyapunov)?;
    if !sol.iter().all(|v| crate::scalar::is_finite(*v)) {
        return Err(LinalgError::SingularLyapunov);
    }
    let det = lu.determinant().abs();
    if det <= T::default_epsilon() * scale.powi(k as i32) * lit(1e-6) {
        return Err(LinalgError::SingularLyapunov);
    }
    Ok(DMatrix::from_iterator(a, b, sol.iter().copied()))
}

/// Solves a square system with one round of iterative refinement.
pub fn solve_refined<T: Scalar>(m: &DMatrix<T>, rhs: &DVector<T>) -> Option<DVector<T>> {
    let lu = m.clone().lu();
    let mut x = lu.solve(rhs)?;
    if !x.iter().all(|v| crate::scalar::is_finite(*v)) {
        return None;
    }
    let r = rhs - m * &x;
    if let Some(dx) = lu.solve(&r) {
        if dx.iter().all(|v| crate::scalar::is_finite(*v)) {
            x += dx;
        }
    }
    Some(x)
}
