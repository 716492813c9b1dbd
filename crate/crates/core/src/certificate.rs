//! Numerical checks of the controller's stability certificate: metric floor,
//! shifted field and its dissipation matrix, vertex inequality and the
//! scalar margin chain.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augpdgd::{eta_floor, field_matrix, ControllerParams};
use crate::linalg;
use crate::optprogram::{ProgramError, SteadyStateProgram};
use crate::scalar::{lit, to_f64, Scalar};

/// Largest constraint count checked by exhaustive vertex enumeration.
pub const MAX_VERTEX_ROWS: usize = 14;
/// Samples drawn when enumeration is not possible.
pub const VERTEX_SAMPLES: usize = 100_000;
/// Tolerance on minimum eigenvalues treated as nonnegative.
pub const PSD_TOL: f64 = 1e-8;
/// Exact slack of the margin chain at the unit point, `45359/64000`.
pub const DELTA_SLACK: f64 = 45359.0 / 64000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("length mismatch: {0}")]
    Dimension(String),
    #[error("Hessian violates mu*I <= H <= ell*I (eigenvalues in [{lo:e}, {hi:e}], mu={mu:e}, ell={ell:e})")]
    HessianBounds { lo: f64, hi: f64, mu: f64, ell: f64 },
    #[error("gamma entry {0} outside [0, 1]")]
    GammaRange(usize),
    #[error("parameter {0} must be positive")]
    NonPositive(&'static str),
    #[error("need mu <= ell and kappa1 <= kappa2")]
    Ordering,
    #[error(transparent)]
    Program(#[from] ProgramError),
}

/// `λ_min(P2) - ε c min(η, 1)`.
pub fn p2_floor<T: Scalar>(params: &ControllerParams<T>) -> T {
    params.p2_min_eig - params.epsilon * params.c * eta_floor(params.eta)
}

/// Secant slopes of `max(·, 0)` between `φ` and `φ̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaDiag<T: Scalar> {
    pub phi: DVector<T>,
    pub phi_bar: DVector<T>,
    pub gamma: DVector<T>,
}

fn gamma_entry<T: Scalar>(p: T, pb: T) -> T {
    let z = T::zero();
    match (p > z, pb > z) {
        (true, true) => T::one(),
        (false, false) => z,
        (true, false) => p / (p - pb),
        (false, true) => -pb / (p - pb),
    }
}

pub fn gamma_diag<T: Scalar>(phi: &DVector<T>, phi_bar: &DVector<T>) -> Result<GammaDiag<T>, CertificateError> {
    if phi.len() != phi_bar.len() {
        return Err(CertificateError::Dimension(format!("{} vs {}", phi.len(), phi_bar.len())));
    }
    let gamma = phi.zip_map(phi_bar, gamma_entry);
    Ok(GammaDiag {
        phi: phi.clone(),
        phi_bar: phi_bar.clone(),
        gamma,
    })
}

/// `φ = ν_ineq + ρ(R_ineq ξ - h)` for a stacked controller state.
pub fn phi_of<T: Scalar>(program: &SteadyStateProgram<T>, theta: &DVector<T>, rho: T) -> DVector<T> {
    let st = program.split_theta(theta);
    &st.nu_ineq + (&program.r_ineq * &st.xi - &program.h) * rho
}

fn check_hessian<T: Scalar>(program: &SteadyStateProgram<T>, hess: &DMatrix<T>) -> Result<(), CertificateError> {
    let n = program.n_xi();
    if hess.shape() != (n, n) {
        return Err(CertificateError::Dimension(format!("Hessian is {:?}, expected {n}x{n}", hess.shape())));
    }
    let ev = linalg::sym_eigenvalues(hess);
    let (lo, hi) = (to_f64(ev[0]), to_f64(ev[n - 1]));
    let (mu, ell) = (to_f64(program.cost.mu()), to_f64(program.cost.ell()));
    let slack = 1e-9 * ell.max(1.0);
    if lo < mu - slack || hi > ell + slack {
        return Err(CertificateError::HessianBounds { lo, hi, mu, ell });
    }
    Ok(())
}

/// Shifted field matrix `F` for Hessian `H` and slopes `γ`.
pub fn shifted_field<T: Scalar>(
    params: &ControllerParams<T>,
    program: &SteadyStateProgram<T>,
    hess: &DMatrix<T>,
    gamma: &DVector<T>,
) -> Result<DMatrix<T>, CertificateError> {
    check_hessian(program, hess)?;
    if gamma.len() != program.n_ineq() {
        return Err(CertificateError::Dimension(format!(
            "gamma has length {}, expected {}",
            gamma.len(),
            program.n_ineq()
        )));
    }
    if let Some(i) = gamma.iter().position(|g| *g < T::zero() || *g > T::one()) {
        return Err(CertificateError::GammaRange(i));
    }
    Ok(field_matrix(params.eta, params.rho, program, hess, gamma.as_slice()))
}

/// `Q = -FᵀP2 - P2F - τ2P2` and its smallest eigenvalue.
pub fn q_matrix<T: Scalar>(
    params: &ControllerParams<T>,
    program: &SteadyStateProgram<T>,
    hess: &DMatrix<T>,
    gamma: &DVector<T>,
) -> Result<(DMatrix<T>, T), CertificateError> {
    let f = shifted_field(params, program, hess, gamma)?;
    let fp = f.transpose() * &params.p2;
    let q = linalg::symmetrize(&(-(&fp + fp.transpose()) - &params.p2 * params.tau2));
    let lmin = linalg::min_sym_eigenvalue(&q);
    Ok((q, lmin))
}

/// Random symmetric `H` with spectrum in `[μ, ℓ]`.
pub fn sample_hessian<R: Rng>(n: usize, mu: f64, ell: f64, rng: &mut R) -> DMatrix<f64> {
    match rng.gen_range(0..3) {
        0 => {
            let t: f64 = rng.gen();
            DMatrix::identity(n, n) * (mu + t * (ell - mu))
        }
        1 => DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.gen_range(mu..=ell))),
        _ => {
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = g.qr().q();
            let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.gen_range(mu..=ell)));
            linalg::symmetrize(&(&q * d * q.transpose()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexReport {
    pub worst_margin: f64,
    pub worst_vertex: Vec<bool>,
    pub checked: usize,
    pub exhaustive: bool,
}

impl VertexReport {
    pub fn passed(&self) -> bool {
        self.worst_margin >= -PSD_TOL
    }
}

fn vertex_margin<T: Scalar>(rrt: &DMatrix<T>, b: &[bool], eta: T, rho: T, c: T) -> T {
    let n = rrt.nrows();
    let w = eta * c * lit(2.0) / rho;
    let mut m = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let gi = if b[i] { T::one() } else { T::zero() };
            let gj = if b[j] { T::one() } else { T::zero() };
            m[(i, j)] = eta * (gi + gj) * rrt[(i, j)] - rrt[(i, j)] * eta * lit(1.5);
        }
        if !b[i] {
            m[(i, i)] += w;
        }
    }
    let full = linalg::min_sym_eigenvalue(&m);
    let act: Vec<usize> = (0..n).filter(|&i| b[i]).collect();
    let ina: Vec<usize> = (0..n).filter(|&i| !b[i]).collect();
    if act.is_empty() || ina.is_empty() {
        return full;
    }
    schur_min_eig(&m, &act, &ina).unwrap_or(full)
}

/// Smallest eigenvalue of `m` below the spectrum of its `ina` block, solved
/// on the Schur complement `S(λ) = M_aa - M_ai (M_ii - λI)⁻¹ M_ia` so that a
/// dominant diagonal on `ina` does not swamp the `act` block in rounding.
fn schur_min_eig<T: Scalar>(m: &DMatrix<T>, act: &[usize], ina: &[usize]) -> Option<T> {
    let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| m[(r[i], c[j])]);
    let (m_aa, m_ai, m_ii) = (sub(act, act), sub(act, ina), sub(ina, ina));
    let floor = linalg::min_sym_eigenvalue(&m_ii);
    if floor <= T::zero() {
        return None;
    }
    let k = ina.len();
    let mut lam = T::zero();
    for _ in 0..100 {
        let shifted = &m_ii - DMatrix::<T>::identity(k, k) * lam;
        let x = shifted.cholesky()?.solve(&m_ai.transpose());
        let next = linalg::min_sym_eigenvalue(&linalg::symmetrize(&(&m_aa - &m_ai * x)));
        if next >= floor {
            return None;
        }
        let done = (next - lam).abs() <= lit::<T>(1e-14) * (next.abs() + T::one());
        lam = next;
        if done {
            return Some(lam);
        }
    }
    None
}

/// Worst `λ_min` of `η(ΓRRᵀ + RRᵀΓ) + (2ηc/ρ)(I - Γ) - (3/2)ηRRᵀ` over `Γ = diag(b)`.
pub fn vertex_inequality<T: Scalar, R: Rng>(r: &DMatrix<T>, eta: T, rho: T, c: T, rng: &mut R) -> VertexReport {
    let nc = r.nrows();
    let rrt = r * r.transpose();
    let mut worst = f64::INFINITY;
    let mut worst_b = vec![false; nc];
    let mut visit = |b: Vec<bool>| {
        let v = to_f64(vertex_margin(&rrt, &b, eta, rho, c));
        if v < worst {
            worst = v;
            worst_b = b;
        }
    };
    let (checked, exhaustive) = if nc <= MAX_VERTEX_ROWS {
        let total = 1usize << nc;
        for mask in 0..total {
            visit((0..nc).map(|i| mask >> i & 1 == 1).collect());
        }
        (total, true)
    } else {
        for _ in 0..VERTEX_SAMPLES {
            visit((0..nc).map(|_| rng.gen::<bool>()).collect());
        }
        (VERTEX_SAMPLES, false)
    };
    if nc == 0 {
        worst = 0.0;
    }
    VertexReport {
        worst_margin: worst,
        worst_vertex: worst_b,
        checked,
        exhaustive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub q_rho: f64,
    pub q_eta: f64,
    pub c_o: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub h4: f64,
    pub delta: f64,
    /// `Δ / (2ημc_o)`.
    pub ratio: f64,
}

/// Evaluates the margin chain at the tight metric `c_o`.
pub fn delta_margin(eta: f64, rho: f64, mu: f64, ell: f64, kappa1: f64, kappa2: f64) -> Result<MarginReport, CertificateError> {
    for (v, name) in [
        (eta, "eta"),
        (rho, "rho"),
        (mu, "mu"),
        (ell, "ell"),
        (kappa1, "kappa1"),
        (kappa2, "kappa2"),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CertificateError::NonPositive(name));
        }
    }
    if mu > ell || kappa1 > kappa2 {
        return Err(CertificateError::Ordering);
    }
    let q_rho = (rho * kappa2 / mu).max(ell / mu);
    let q_eta = (eta / (ell * rho)).max(ell / mu);
    let c = 20.0 * ell * q_rho.powi(2) * q_eta.powi(2) * kappa2 / kappa1;
    let k = kappa2 / kappa1;
    let s = rho * kappa2 + eta * kappa1 / (2.0 * c);
    let h1 = 2.0 * eta * eta * kappa2 + eta * eta * kappa1 / 2.0;
    let h2 = 2.0 * eta * ell * s + eta * s * s;
    let h3 = 2.0 * eta * eta / rho * (ell + s) * k;
    let h4 = eta.powi(3) / (rho * rho) * k;
    let lead = 2.0 * eta * mu * c;
    let delta = lead - (eta * mu * ell + h1 + h2 + h3 + h4);
    Ok(MarginReport {
        q_rho,
        q_eta,
        c_o: c,
        h1,
        h2,
        h3,
        h4,
        delta,
        ratio: delta / lead,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub p2_floor_margin: f64,
    pub q_min_eig: f64,
    pub vertex_worst_margin: f64,
    pub delta: f64,
    pub delta_ratio: f64,
}

/// Runs every check for one synthesized controller; `samples` random
/// `(H, Γ)` pairs feed the dissipation check.
pub fn certify<R: Rng>(
    params: &ControllerParams<f64>,
    program: &SteadyStateProgram<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<CertificateSummary, CertificateError> {
    let (mu, ell) = (program.cost.mu(), program.cost.ell());
    let mut q_min = f64::INFINITY;
    for _ in 0..samples.max(1) {
        let h = match program.cost.as_quadratic() {
            Some(q) => q.weight().clone(),
            None => sample_hessian(program.n_xi(), mu, ell, rng),
        };
        let g = DVector::from_fn(program.n_ineq(), |_, _| rng.gen::<f64>());
        q_min = q_min.min(q_matrix(params, program, &h, &g)?.1);
    }
    let r = program.stacked();
    let vr = vertex_inequality(&r, params.eta, params.rho, params.c, rng);
    let mr = delta_margin(params.eta, params.rho, mu, ell, params.kappa1, params.kappa2)?;
    Ok(CertificateSummary {
        p2_floor_margin: p2_floor(params),
        q_min_eig: q_min,
        vertex_worst_margin: vr.worst_margin,
        delta: mr.delta,
        delta_ratio: mr.ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augpdgd::{controller_gains, controller_rhs, params_with_metric};
    use crate::optprogram::{Cost, Layout};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn scalar_program() -> SteadyStateProgram<f64> {
        SteadyStateProgram::from_parts(
            Layout::StateInput { n: 1, m: 1 },
            m(1, 2, &[-1.0, 1.0]),
            DVector::zeros(1),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            Cost::quadratic(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0])).unwrap(),
        )
        .unwrap()
    }

    /// Scalar plant program with one input limit `u ≤ 0.3`.
    fn limited_program() -> SteadyStateProgram<f64> {
        SteadyStateProgram::from_parts(
            Layout::StateInput { n: 1, m: 1 },
            m(1, 2, &[-1.0, 1.0]),
            DVector::zeros(1),
            m(1, 2, &[0.0, 1.0]),
            DVector::from_vec(vec![0.3]),
            Cost::quadratic(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0])).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn gamma_examples() {
        let g = |a: f64, b: f64| gamma_diag(&DVector::from_vec(vec![a]), &DVector::from_vec(vec![b])).unwrap().gamma[0];
        assert_eq!(g(2.0, 1.0), 1.0);
        assert_eq!(g(-1.0, -2.0), 0.0);
        assert_eq!(g(1.0, -1.0), 0.5);
        assert_eq!(g(-1.0, 3.0), 0.75);
        assert_eq!(g(0.0, 0.0), 0.0);
        assert!(gamma_diag::<f64>(&DVector::zeros(2), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn gamma_identity_many_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let phi = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let bar = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let gd = gamma_diag(&phi, &bar).unwrap();
        for i in 0..n {
            let (p, b, g): (f64, f64, f64) = (phi[i], bar[i], gd.gamma[i]);
            assert!((0.0..=1.0).contains(&g));
            let lhs = p.max(0.0) - b.max(0.0);
            assert!((lhs - g * (p - b)).abs() <= 1e-12 * (1.0 + lhs.abs()), "{p} {b}");
        }
    }

    #[test]
    fn p2_floor_examples() {
        let prog = SteadyStateProgram::from_parts(
            Layout::StateInput { n: 1, m: 1 },
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            Cost::quadratic(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap(),
        )
        .unwrap();
        let p = controller_gains(&prog, 1.0, 1.0, 0.5, None).unwrap();
        let base = p2_floor(&p);
        assert!(base >= -1e-9);
        let big = controller_gains(&prog, 1.0, 1.0, 0.5, Some(p.c * 10.0)).unwrap();
        assert!(p2_floor(&big) > base);

        let free = SteadyStateProgram::from_parts(
            Layout::StateInput { n: 1, m: 1 },
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            Cost::quadratic(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap(),
        )
        .unwrap();
        let p = controller_gains(&free, 2.0, 1.0, 0.5, None).unwrap();
        let fl: f64 = p2_floor(&p);
        assert!((fl - (2.0 * p.c - 0.5 * p.c)).abs() < 1e-12);
    }

    #[test]
    fn q_psd_on_scalar_benchmark() {
        let prog = limited_program();
        let p = controller_gains(&prog, 1.0, 1.0, 0.5, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = DMatrix::identity(2, 2);
        for _ in 0..100 {
            let g = DVector::from_fn(1, |_, _| rng.gen::<f64>());
            let (_, l) = q_matrix(&p, &prog, &h, &g).unwrap();
            assert!(l >= -PSD_TOL, "{l}");
        }
        let eq_only = scalar_program();
        let p = controller_gains(&eq_only, 1.0, 1.0, 0.5, None).unwrap();
        let (q, l) = q_matrix(&p, &eq_only, &DMatrix::identity(2, 2), &DVector::zeros(0)).unwrap();
        assert_eq!(q.shape(), (3, 3));
        assert!(l >= -PSD_TOL);
    }

    #[test]
    fn q_rejects_bad_inputs() {
        let prog = limited_program();
        let p = controller_gains(&prog, 1.0, 1.0, 0.5, None).unwrap();
        let h = DMatrix::identity(2, 2) * 3.0;
        assert!(matches!(
            q_matrix(&p, &prog, &h, &DVector::zeros(1)),
            Err(CertificateError::HessianBounds { .. })
        ));
        assert!(matches!(
            q_matrix(&p, &prog, &DMatrix::identity(2, 2), &DVector::from_vec(vec![1.5])),
            Err(CertificateError::GammaRange(0))
        ));
    }

    /// Stiff program (ℓ/μ = 10) with three inequality rows.
    fn stiff_program() -> SteadyStateProgram<f64> {
        SteadyStateProgram::from_parts(
            Layout::StateInput { n: 2, m: 2 },
            m(2, 4, &[-1.0, 0.5, 1.0, 0.0, 0.2, -1.0, 0.0, 1.0]),
            DVector::zeros(2),
            m(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![0.1, 0.1]),
            Cost::quadratic(
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 10.0, 1.0, 10.0])),
                DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]),
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn q_psd_on_stiff_program_with_synthesized_metric() {
        let prog = stiff_program();
        let p = controller_gains(&prog, 1.0, 1.0, 0.5, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let h = sample_hessian(4, 1.0, 10.0, &mut rng);
            let g = DVector::from_fn(2, |_, _| rng.gen::<f64>());
            let (_, l) = q_matrix(&p, &prog, &h, &g).unwrap();
            assert!(l >= -PSD_TOL, "{l}");
        }
    }

    #[test]
    fn undersized_metric_breaks_dissipation() {
        // c = c2 alone on the stiff program: some vertex Γ with H = μI or ℓI
        // gives an indefinite Q.
        let prog = stiff_program();
        let full = controller_gains(&prog, 1.0, 1.0, 0.5, None).unwrap();
        let p = params_with_metric(&prog, 1.0, 1.0, 0.5, full.c2).unwrap();
        let mut worst = f64::INFINITY;
        for hs in [1.0, 10.0] {
            let h = DMatrix::identity(4, 4) * hs;
            for mask in 0..4u32 {
                let g = DVector::from_fn(2, |i, _| f64::from(mask >> i & 1));
                worst = worst.min(q_matrix(&p, &prog, &h, &g).unwrap().1);
            }
            let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 10.0, 1.0, 10.0]));
            for mask in 0..4u32 {
                let g = DVector::from_fn(2, |i, _| f64::from(mask >> i & 1));
                worst = worst.min(q_matrix(&p, &prog, &h, &g).unwrap().1);
            }
        }
        assert!(worst < 0.0, "no violation found: {worst}");
    }

    #[test]
    fn vertex_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = vertex_inequality(&m(1, 1, &[1.0]), 1.0, 1.0, 1.0, &mut rng);
        assert!(r.exhaustive && r.checked == 2);
        assert!((r.worst_margin - 0.5).abs() < 1e-12);
        let rmat = m(2, 3, &[1.0, 0.0, 2.0, 0.5, 1.0, 0.0]);
        let rrt = &rmat * rmat.transpose();
        let l = to_f64(vertex_margin(&rrt, &[true, true], 1.0, 1.0, 100.0));
        assert!((l - 0.5 * linalg::min_sym_eigenvalue(&rrt)).abs() < 1e-12);

        let prog = limited_program();
        let p = controller_gains(&prog, 1.0, 1.0, 0.5, None).unwrap();
        let r = vertex_inequality(&prog.stacked(), p.eta, p.rho, p.c, &mut rng);
        assert_eq!(r.checked, 4);
        assert!(r.passed());
    }

    #[test]
    fn vertex_margin_resolves_dominant_inactive_block() {
        // Γ = diag(1, 0) with a huge inactive weight: the margin tends to
        // η/2·(RRᵀ)_11 minus a vanishing coupling term.
        let rrt = m(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let l = to_f64(vertex_margin(&rrt, &[true, false], 1.0, 1.0, 1e16));
        let w = 2e16 - 1.5;
        let exact = 1.0 - 0.25 * 0.25 / (w - 1.0);
        assert!((l - exact).abs() < 1e-12, "{l} vs {exact}");
        let small = to_f64(vertex_margin(&rrt, &[true, false], 1.0, 1.0, 3.0));
        let mut mm = m(2, 2, &[1.0, -0.25, -0.25, 4.5]);
        mm[(1, 1)] = 6.0 - 1.5;
        assert!((small - linalg::min_sym_eigenvalue(&mm)).abs() < 1e-10);
    }

    #[test]
    fn vertex_sampling_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = DMatrix::from_fn(15, 16, |i, j| if i == j { 1.0 } else { 0.0 });
        let rep = vertex_inequality(&r, 1.0, 1.0, 1.0, &mut rng);
        assert!(!rep.exhaustive);
        assert_eq!(rep.checked, VERTEX_SAMPLES);
        assert!(rep.passed());
    }

    #[test]
    fn delta_unit_point() {
        let r = delta_margin(1.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!((r.q_rho, r.q_eta, r.c_o), (1.0, 1.0, 20.0));
        // h1 = 2.5, s = 1.025, h2 = 2.05 + 1.050625, h3 = 2*2.025, h4 = 1.
        assert!((r.h1 - 2.5).abs() < 1e-15);
        assert!((r.h2 - 3.100625).abs() < 1e-12);
        assert!((r.h3 - 4.05).abs() < 1e-12);
        assert!((r.h4 - 1.0).abs() < 1e-15);
        assert!((r.delta - 28.349375).abs() < 1e-12);
        assert!((r.ratio - DELTA_SLACK).abs() < 1e-12);
        assert!(delta_margin(1.0, 1.0, 2.0, 1.0, 1.0, 1.0).is_err());
        assert!(delta_margin(-1.0, 1.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn delta_positive_over_ell_grid() {
        for ell in [1.0, 2.0, 5.0, 10.0] {
            let r = delta_margin(1.0, 1.0, 1.0, ell, 1.0, 1.0).unwrap();
            assert!(r.delta > 0.0);
            assert!(r.ratio >= DELTA_SLACK - 1e-9);
        }
    }

    #[test]
    fn field_consistency_quadratic() {
        let prog = stiff_program();
        let p = controller_gains(&prog, 1.3, 0.7, 0.5, None).unwrap();
        let h = prog.cost.as_quadratic().unwrap().weight().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zero = DVector::zeros(prog.layout.p());
        for _ in 0..50 {
            let a = DVector::from_fn(prog.n_theta(), |_, _| rng.gen_range(-2.0..2.0));
            let b = DVector::from_fn(prog.n_theta(), |_, _| rng.gen_range(-2.0..2.0));
            let fa = controller_rhs(&p, &prog, &prog.split_theta(&a), &zero).unwrap();
            let fb = controller_rhs(&p, &prog, &prog.split_theta(&b), &zero).unwrap();
            let gd = gamma_diag(&phi_of(&prog, &a, p.rho), &phi_of(&prog, &b, p.rho)).unwrap();
            let f = shifted_field(&p, &prog, &h, &gd.gamma).unwrap();
            let diff = fa - fb - f * (a - b);
            assert!(linalg::max_abs_vec(&diff) <= 1e-8, "{diff}");
        }
    }

    #[test]
    fn summary_json_fields() {
        let prog = limited_program();
        let p = controller_gains(&prog, 1.0, 1.0, 0.5, None).unwrap();
        let s = certify(&p, &prog, 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        for k in ["p2_floor_margin", "q_min_eig", "vertex_worst_margin", "delta", "delta_ratio"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(s.q_min_eig >= -PSD_TOL && s.vertex_worst_margin >= -PSD_TOL && s.p2_floor_margin >= -1e-9);
    }

    proptest! {
        #[test]
        fn delta_positive_on_random_params(
            eta in 0.05f64..5.0, rho in 0.05f64..5.0, mu in 0.05f64..5.0,
            lr in 1.0f64..20.0, k1 in 0.05f64..5.0, kr in 1.0f64..20.0,
        ) {
            let r = delta_margin(eta, rho, mu, mu * lr, k1, k1 * kr).unwrap();
            prop_assert!(r.delta > 0.0);
            prop_assert!(r.ratio >= DELTA_SLACK - 1e-9);
        }

        #[test]
        fn vertex_passes_when_c_large_enough(seed in 0u64..1000, rho in 0.1f64..3.0, eta in 0.1f64..3.0, extra in 1.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nc = rng.gen_range(1..5);
            let r = DMatrix::from_fn(nc, nc + 2, |_, _| rng.gen_range(-1.0..1.0));
            let k2 = linalg::max_sym_eigenvalue(&(&r * r.transpose()));
            let rep = vertex_inequality(&r, eta, rho, k2 * rho * extra, &mut rng);
            prop_assert!(rep.passed(), "{:?}", rep);
        }
    }
}
