//! Augmented primal-dual gradient dynamics with an input port, and the
//! closed-form synthesis of its metric `P2` and input matrix `Bpd`.

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::optprogram::{Cost, KktPoint, ProgramError, SteadyStateProgram};
use crate::scalar::{lit, max, min, to_f64, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("penalty parameter rho must be positive, got {0:e}")]
    BadRho(f64),
    #[error("dual gain eta must be positive, got {0:e}")]
    BadEta(f64),
    #[error("epsilon must lie in (0, 1), got {0:e}")]
    BadEpsilon(f64),
    #[error("override c = {given:e} is below the lower bound {bound:e} set by {violated:?}")]
    OverrideBelowBound {
        given: f64,
        bound: f64,
        violated: Vec<&'static str>,
    },
    #[error("metric P2 is singular")]
    SingularMetric,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

/// `H_ρ(a, b)` and its partial derivatives `(∂a, ∂b)`.
pub fn penalty_h<T: Scalar>(a: T, b: T, rho: T) -> Result<(T, T, T), ControllerError> {
    if !(rho > T::zero()) {
        return Err(ControllerError::BadRho(to_f64(rho)));
    }
    if rho * a + b >= T::zero() {
        Ok((a * b + rho * a * a * lit(0.5), b + rho * a, a))
    } else {
        Ok((-(b * b) / (rho * lit(2.0)), T::zero(), -b / rho))
    }
}

/// `g = max(ν + ρ(R_ineq ξ - h), 0)` componentwise.
pub fn clip_multiplier<T: Scalar>(
    program: &SteadyStateProgram<T>,
    xi: &DVector<T>,
    nu_ineq: &DVector<T>,
    rho: T,
) -> DVector<T> {
    let mut g = nu_ineq + (&program.r_ineq * xi - &program.h) * rho;
    g.apply(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    g
}

/// Controller state `θ = col(ξ, ν_eq, ν_ineq)`.
pub type ControllerState<T> = KktPoint<T>;

/// Synthesized controller gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams<T: Scalar> {
    pub eta: T,
    pub rho: T,
    pub epsilon: T,
    pub c: T,
    pub c1: T,
    pub c2: T,
    pub c3: T,
    pub kappa1: T,
    pub kappa2: T,
    pub mu: T,
    pub ell: T,
    pub p2: DMatrix<T>,
    pub mu_sel: DMatrix<T>,
    pub my_sel: DMatrix<T>,
    pub bpd: DMatrix<T>,
    pub tau2: T,
    pub p2_min_eig: T,
    pub p2_cond: T,
}

/// Gains dump for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainsReport {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c: f64,
    pub tau2: f64,
    pub p2_min_eig: f64,
    pub p2_cond: f64,
}

impl<T: Scalar> ControllerParams<T> {
    pub fn report(&self) -> GainsReport {
        GainsReport {
            c1: to_f64(self.c1),
            c2: to_f64(self.c2),
            c3: to_f64(self.c3),
            c: to_f64(self.c),
            tau2: to_f64(self.tau2),
            p2_min_eig: to_f64(self.p2_min_eig),
            p2_cond: to_f64(self.p2_cond),
        }
    }

    pub fn n_theta(&self) -> usize {
        self.p2.nrows()
    }
}

/// `(κ1, κ2)` of the program; an unconstrained program uses the vacuous
/// bounds `(1, 1)`.
pub fn kappas<T: Scalar>(program: &SteadyStateProgram<T>) -> Result<(T, T), ProgramError> {
    if program.n_c() == 0 {
        Ok((T::one(), T::one()))
    } else {
        program.spectral_bounds()
    }
}

/// The three lower bounds `(c1, c2, c3)` on the metric scalar.
pub fn metric_bounds<T: Scalar>(eta: T, rho: T, epsilon: T, kappa1: T, kappa2: T, mu: T, ell: T) -> (T, T, T) {
    let one = T::one();
    let c1 = if eta >= one {
        eta * (kappa2 / ((eta - epsilon) * (one - epsilon))).sqrt()
    } else {
        (eta * kappa2 / ((one - epsilon) * (one - eta * epsilon))).sqrt()
    };
    let c2 = kappa2 * rho;
    let q_rho = max(rho * kappa2 / mu, ell / mu);
    let q_eta = max(eta / (ell * rho), ell / mu);
    let c3 = lit::<T>(20.0) * ell * q_rho * q_rho * q_eta * q_eta * kappa2 / kappa1;
    (c1, c2, c3)
}

fn check_scalars<T: Scalar>(eta: T, rho: T, epsilon: T) -> Result<(), ControllerError> {
    if !(eta > T::zero()) {
        return Err(ControllerError::BadEta(to_f64(eta)));
    }
    if !(rho > T::zero()) {
        return Err(ControllerError::BadRho(to_f64(rho)));
    }
    if !(epsilon > T::zero() && epsilon < T::one()) {
        return Err(ControllerError::BadEpsilon(to_f64(epsilon)));
    }
    Ok(())
}

/// Synthesizes `c`, `P2`, the port selectors, `Bpd` and `τ2`.
pub fn controller_gains<T: Scalar>(
    program: &SteadyStateProgram<T>,
    eta: T,
    rho: T,
    epsilon: T,
    override_c: Option<T>,
) -> Result<ControllerParams<T>, ControllerError> {
    check_scalars(eta, rho, epsilon)?;
    let (k1, k2) = kappas(program)?;
    let (mu, ell) = (program.cost.mu(), program.cost.ell());
    let (c1, c2, c3) = metric_bounds(eta, rho, epsilon, k1, k2, mu, ell);
    let bound = max(c1, max(c2, c3));
    let c = match override_c {
        None => bound,
        Some(c) if c >= bound => c,
        Some(c) => {
            let violated = [("c1", c1), ("c2", c2), ("c3", c3)]
                .into_iter()
                .filter(|(_, b)| c < *b)
                .map(|(n, _)| n)
                .collect();
            return Err(ControllerError::OverrideBelowBound {
                given: to_f64(c),
                bound: to_f64(bound),
                violated,
            });
        }
    };
    assemble_params(program, eta, rho, epsilon, c, (c1, c2, c3), (k1, k2))
}

/// Builds the controller for an arbitrary metric scalar `c`, bypassing the
/// lower bounds. Used to probe what happens when they are violated.
pub fn params_with_metric<T: Scalar>(
    program: &SteadyStateProgram<T>,
    eta: T,
    rho: T,
    epsilon: T,
    c: T,
) -> Result<ControllerParams<T>, ControllerError> {
    check_scalars(eta, rho, epsilon)?;
    let (k1, k2) = kappas(program)?;
    let bounds = metric_bounds(eta, rho, epsilon, k1, k2, program.cost.mu(), program.cost.ell());
    assemble_params(program, eta, rho, epsilon, c, bounds, (k1, k2))
}

/// `P2 = [[ηcI, ηR_eqᵀ, ηR_ineqᵀ], [ηR_eq, cI, 0], [ηR_ineq, 0, cI]]`.
pub fn metric_matrix<T: Scalar>(program: &SteadyStateProgram<T>, eta: T, c: T) -> DMatrix<T> {
    let (nx, nc) = (program.n_xi(), program.n_c());
    let r = program.stacked();
    let mut p2 = DMatrix::<T>::identity(nx + nc, nx + nc) * c;
    p2.view_mut((0, 0), (nx, nx)).scale_mut(eta);
    p2.view_mut((nx, 0), (nc, nx)).copy_from(&(&r * eta));
    p2.view_mut((0, nx), (nx, nc)).copy_from(&(r.transpose() * eta));
    p2
}

fn assemble_params<T: Scalar>(
    program: &SteadyStateProgram<T>,
    eta: T,
    rho: T,
    epsilon: T,
    c: T,
    (c1, c2, c3): (T, T, T),
    (kappa1, kappa2): (T, T),
) -> Result<ControllerParams<T>, ControllerError> {
    let lay = program.layout;
    let nt = program.n_theta();
    let p2 = metric_matrix(program, eta, c);
    let mu_sel = linalg::selector::<T>(lay.m(), nt, lay.u_offset());
    let my_sel = linalg::selector::<T>(lay.p(), nt, lay.y_offset());
    let rhs = mu_sel.transpose() * lit::<T>(0.5);
    let bpd = match p2.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => p2.clone().lu().solve(&rhs).ok_or(ControllerError::SingularMetric)?,
    };
    let eig = linalg::sym_eigenvalues(&p2);
    let (lo, hi) = (eig[0], eig[eig.len() - 1]);
    let p2_cond = if lo > T::zero() { hi / lo } else { lit(f64::INFINITY) };
    Ok(ControllerParams {
        eta,
        rho,
        epsilon,
        c,
        c1,
        c2,
        c3,
        kappa1,
        kappa2,
        mu: program.cost.mu(),
        ell: program.cost.ell(),
        p2,
        mu_sel,
        my_sel,
        bpd,
        tau2: eta * kappa1 / (c * lit(2.0)),
        p2_min_eig: lo,
        p2_cond,
    })
}

/// Vector field of the controller, allocation-free after construction.
#[derive(Debug, Clone)]
pub struct ControllerField<T: Scalar> {
    eta: T,
    rho: T,
    r_eq: DMatrix<T>,
    r_eq_t: DMatrix<T>,
    r_in: DMatrix<T>,
    r_in_t: DMatrix<T>,
    b: DVector<T>,
    h: DVector<T>,
    bpd: DMatrix<T>,
    cost: Cost<T>,
    k_target: Option<DVector<T>>,
    grad: DVector<T>,
    g: DVector<T>,
    xi_buf: DVector<T>,
}

impl<T: Scalar> ControllerField<T> {
    pub fn new(params: &ControllerParams<T>, program: &SteadyStateProgram<T>) -> Self {
        let k_target = program.cost.as_quadratic().map(|q| q.weight() * q.target());
        Self {
            eta: params.eta,
            rho: params.rho,
            r_eq: program.r_eq.clone(),
            r_eq_t: program.r_eq.transpose(),
            r_in: program.r_ineq.clone(),
            r_in_t: program.r_ineq.transpose(),
            b: program.b.clone(),
            h: program.h.clone(),
            bpd: params.bpd.clone(),
            cost: program.cost.clone(),
            k_target,
            grad: DVector::zeros(program.n_xi()),
            g: DVector::zeros(program.n_ineq()),
            xi_buf: DVector::zeros(program.n_xi()),
        }
    }

    pub fn n_theta(&self) -> usize {
        self.bpd.nrows()
    }

    /// Writes `f(θ) + Bpd v` into `out`.
    pub fn eval(&mut self, theta: DVectorView<T>, v_pd: DVectorView<T>, mut out: DVectorViewMut<T>) {
        let nx = self.grad.len();
        let ne = self.b.len();
        let ni = self.h.len();
        let xi = theta.rows(0, nx);
        let nu_eq = theta.rows(nx, ne);
        let nu_in = theta.rows(nx + ne, ni);
        let one = T::one();

        match (&self.cost, &self.k_target) {
            (Cost::Quadratic(q), Some(kt)) => {
                self.grad.gemv(one, q.weight(), &xi, T::zero());
                self.grad -= kt;
            }
            _ => {
                self.xi_buf.copy_from(&xi);
                self.grad = self.cost.gradient(&self.xi_buf);
            }
        }

        self.g.copy_from(&nu_in);
        self.g.gemv(self.rho, &self.r_in, &xi, one);
        self.g.axpy(-self.rho, &self.h, one);
        self.g.apply(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });

        out.gemv(one, &self.bpd, &v_pd, T::zero());
        {
            let mut o = out.rows_mut(0, nx);
            o -= &self.grad;
            o.gemv(-one, &self.r_eq_t, &nu_eq, one);
            o.gemv(-one, &self.r_in_t, &self.g, one);
        }
        {
            let mut o = out.rows_mut(nx, ne);
            o.gemv(self.eta, &self.r_eq, &xi, one);
            o.axpy(-self.eta, &self.b, one);
        }
        {
            let k = self.eta / self.rho;
            let mut o = out.rows_mut(nx + ne, ni);
            o.axpy(k, &self.g, one);
            o.axpy(-k, &nu_in, one);
        }
    }
}

/// `f(θ) + Bpd v_pd`.
pub fn controller_rhs<T: Scalar>(
    params: &ControllerParams<T>,
    program: &SteadyStateProgram<T>,
    theta: &ControllerState<T>,
    v_pd: &DVector<T>,
) -> Result<DVector<T>, ControllerError> {
    let t = theta.theta();
    if t.len() != params.n_theta() || t.len() != program.n_theta() || v_pd.len() != params.bpd.ncols() {
        return Err(ControllerError::Dimension(format!(
            "theta has length {}, v_pd {}; expected {} and {}",
            t.len(),
            v_pd.len(),
            params.n_theta(),
            params.bpd.ncols()
        )));
    }
    if theta.xi.len() != program.n_xi() || theta.nu_eq.len() != program.n_eq() {
        return Err(ControllerError::Dimension("controller state blocks do not match program".into()));
    }
    let mut field = ControllerField::new(params, program);
    let mut out = DVector::zeros(t.len());
    field.eval(t.as_view(), v_pd.as_view(), out.as_view_mut());
    Ok(out)
}

/// `min(η, 1)`.
pub fn eta_floor<T: Scalar>(eta: T) -> T {
    min(eta, T::one())
}

/// Jacobian-like matrix of the unforced field for a Hessian sample `hess`
/// and clipping slopes `gamma` (each in `[0, 1]`):
///
/// ```text
/// [ -H - ρR_inᵀΓR_in   -R_eqᵀ   -R_inᵀΓ      ]
/// [  ηR_eq              0        0           ]
/// [  ηΓR_in             0        (η/ρ)(Γ - I) ]
/// ```
pub fn field_matrix<T: Scalar>(
    eta: T,
    rho: T,
    program: &SteadyStateProgram<T>,
    hess: &DMatrix<T>,
    gamma: &[T],
) -> DMatrix<T> {
    let (nx, ne, ni) = (program.n_xi(), program.n_eq(), program.n_ineq());
    let nt = nx + ne + ni;
    let gam = DMatrix::from_diagonal(&DVector::from_column_slice(gamma));
    let rin = &program.r_ineq;
    let g_rin = &gam * rin;
    let mut f = DMatrix::<T>::zeros(nt, nt);
    f.view_mut((0, 0), (nx, nx))
        .copy_from(&(-hess - rin.transpose() * &g_rin * rho));
    f.view_mut((0, nx), (nx, ne)).copy_from(&(-program.r_eq.transpose()));
    f.view_mut((0, nx + ne), (nx, ni)).copy_from(&(-(rin.transpose() * &gam)));
    f.view_mut((nx, 0), (ne, nx)).copy_from(&(&program.r_eq * eta));
    f.view_mut((nx + ne, 0), (ni, nx)).copy_from(&(&g_rin * eta));
    let k = eta / rho;
    for i in 0..ni {
        f[(nx + ne + i, nx + ne + i)] = k * (gamma[i] - T::one());
    }
    f
}

/// Clipping slopes at `θ`: `1` where `ν + ρ(R_ineq ξ - h) > 0`, else `0`.
pub fn active_pattern<T: Scalar>(program: &SteadyStateProgram<T>, theta: &ControllerState<T>, rho: T) -> Vec<T> {
    let phi = &theta.nu_ineq + (&program.r_ineq * &theta.xi - &program.h) * rho;
    phi.iter()
        .map(|v| if *v > T::zero() { T::one() } else { T::zero() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optprogram::{solve_oracle, Layout};
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

    #[test]
    fn penalty_branches() {
        assert_eq!(penalty_h(1.0, 1.0, 1.0).unwrap().0, 1.5);
        assert_eq!(penalty_h(-1.0, 1.0, 2.0).unwrap().0, -0.25);
        let (v, da, db) = penalty_h(-1.0f64, 1.0, 1.0).unwrap();
        assert_eq!(v, -0.5);
        assert_eq!((da, db), (0.0, -1.0));
        let below = penalty_h(-1.0, 1.0 - 1e-13, 1.0).unwrap().0;
        assert!((below - v).abs() < 1e-12);
        assert!(penalty_h(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let p = SteadyStateProgram::from_parts(
            Layout::StateInput { n: 1, m: 1 },
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            m(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![1.0]),
            Cost::quadratic(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap(),
        )
        .unwrap();
        let g = clip_multiplier(&p, &DVector::from_vec(vec![0.0, 0.0]), &DVector::zeros(1), 1.0);
        assert_eq!(g[0], 0.0);
        let g = clip_multiplier(&p, &DVector::from_vec(vec![1.5, 0.0]), &DVector::from_vec(vec![1.0]), 2.0);
        assert_eq!(g[0], 2.0);
    }

    #[test]
    fn gains_unit_case() {
        let (c1, c2, c3) = metric_bounds(1.0f64, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0);
        assert!((c1 - 2.0).abs() < 1e-14);
        assert_eq!(c2, 1.0);
        assert!((c3 - 20.0).abs() < 1e-12);
        let (c1, _, _) = metric_bounds(0.5f64, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0);
        assert!((c1 - (0.5f64 / 0.375).sqrt()).abs() < 1e-14);
        assert!((c1 - 1.1547).abs() < 1e-4);
    }

    #[test]
    fn scalar_gains_and_port() {
        let p = scalar_program();
        let g = controller_gains(&p, 1.05, 1.0, 0.5, None).unwrap();
        assert_eq!(g.c, max(g.c1, max(g.c2, g.c3)));
        assert!((g.tau2 - 1.05 * 2.0 / (2.0 * g.c)).abs() < 1e-15);
        let recon = g.bpd.transpose() * &g.p2 * 2.0;
        assert!(linalg::max_abs(&(recon - &g.mu_sel)) < 1e-10);
        assert!(g.p2_min_eig >= 0.5 * g.c * 1.0 - 1e-9);
        assert_eq!(g.mu_sel, m(1, 3, &[0.0, 1.0, 0.0]));
        assert_eq!(g.my_sel, m(1, 3, &[1.0, 0.0, 0.0]));
    }

    #[test]
    fn override_rules() {
        let p = scalar_program();
        let g = controller_gains(&p, 1.05, 1.0, 0.5, None).unwrap();
        assert_eq!(controller_gains(&p, 1.05, 1.0, 0.5, Some(2.0 * g.c)).unwrap().c, 2.0 * g.c);
        match controller_gains(&p, 1.05, 1.0, 0.5, Some(1.0)) {
            Err(ControllerError::OverrideBelowBound { violated, .. }) => assert!(violated.contains(&"c3")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            controller_gains(&p, 1.0, 1.0, 1.0, None),
            Err(ControllerError::BadEpsilon(_))
        ));
    }

    #[test]
    fn rhs_vanishes_at_oracle() {
        let p = scalar_program();
        let g = controller_gains(&p, 1.05, 1.0, 0.5, None).unwrap();
        let s = solve_oracle(&p).unwrap();
        let f = controller_rhs(&g, &p, &s, &DVector::zeros(1)).unwrap();
        assert!(linalg::max_abs_vec(&f) < 1e-12);
    }

    #[test]
    fn unconstrained_is_gradient_flow() {
        let k = m(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let target = DVector::from_vec(vec![1.0, -1.0]);
        let p = SteadyStateProgram::from_parts(
            Layout::StateInput { n: 1, m: 1 },
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            Cost::quadratic(k.clone(), target.clone()).unwrap(),
        )
        .unwrap();
        let g = controller_gains(&p, 1.0, 1.0, 0.5, None).unwrap();
        let xi = DVector::from_vec(vec![0.3, 0.7]);
        let v = DVector::from_vec(vec![0.4]);
        let st = KktPoint {
            xi: xi.clone(),
            nu_eq: DVector::zeros(0),
            nu_ineq: DVector::zeros(0),
        };
        let f = controller_rhs(&g, &p, &st, &v).unwrap();
        let expect = -(&k * (&xi - &target)) + &g.bpd * &v;
        assert!(linalg::max_abs_vec(&(f - expect)) < 1e-14);
    }

    #[test]
    fn inactive_multiplier_decays() {
        let p = SteadyStateProgram::from_parts(
            Layout::StateInput { n: 1, m: 1 },
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            m(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![100.0]),
            Cost::quadratic(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap(),
        )
        .unwrap();
        let g = controller_gains(&p, 2.0, 4.0, 0.5, None).unwrap();
        let st = KktPoint {
            xi: DVector::zeros(2),
            nu_eq: DVector::zeros(0),
            nu_ineq: DVector::from_vec(vec![3.0]),
        };
        let f = controller_rhs(&g, &p, &st, &DVector::zeros(1)).unwrap();
        assert!((f[2] + 0.5 * 3.0).abs() < 1e-14);
    }

    fn random_program(rng: &mut ChaCha8Rng) -> SteadyStateProgram<f64> {
        loop {
            let n = 2;
            let mm = 1;
            let nx = n + mm;
            let ne = rng.gen_range(0..2);
            let ni = rng.gen_range(0..3);
            let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
            let r_eq = mat(ne, nx);
            let r_in = mat(ni, nx);
            let l = mat(nx, nx);
            let x0 = mat(nx, 1).column(0).into_owned();
            let target = mat(nx, 1).column(0).into_owned() * 3.0;
            let k = &l * l.transpose() + DMatrix::identity(nx, nx) * 0.5;
            let b = &r_eq * &x0;
            let h = &r_in * &x0 + DVector::from_element(ni, 0.2);
            if let Ok(p) = SteadyStateProgram::from_parts(
                Layout::StateInput { n, m: mm },
                r_eq,
                b,
                r_in,
                h,
                Cost::quadratic(k, target).unwrap(),
            ) {
                if p.n_c() == 0 || p.spectral_bounds().map(|(k1, _)| k1 > 1e-3).unwrap_or(false) {
                    return p;
                }
            }
        }
    }

    #[test]
    fn equilibrium_equivalence_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = random_program(&mut rng);
            let g = controller_gains(&p, 1.3, 0.7, 0.5, None).unwrap();
            let s = solve_oracle(&p).unwrap();
            let gm = clip_multiplier(&p, &s.xi, &s.nu_ineq, g.rho);
            assert!(linalg::max_abs_vec(&(gm - &s.nu_ineq)) < 1e-9);
            let f = controller_rhs(&g, &p, &s, &DVector::zeros(1)).unwrap();
            assert!(linalg::max_abs_vec(&f) <= 1e-8, "{f}");
            assert!(g.p2_min_eig >= g.epsilon * g.c * eta_floor(g.eta) - 1e-9);
            let recon = g.bpd.transpose() * &g.p2 * 2.0;
            assert!(linalg::max_abs(&(recon - &g.mu_sel)) < 1e-10);
        }
    }

    #[test]
    fn c3_monotone_on_grid() {
        // Grid where ℓ/μ dominates η/(ℓρ).
        for &(eta, rho, mu) in &[(0.5, 1.0, 1.0), (1.2, 2.0, 0.5), (3.0, 1.0, 0.2)] {
            let mut prev = 0.0;
            for i in 0..40 {
                let ell = mu * (1.0 + 0.25 * i as f64);
                if eta / (ell * rho) > ell / mu {
                    continue;
                }
                let (_, _, c3) = metric_bounds(eta, rho, 0.5, 1.0, 2.0, mu, ell);
                assert!(c3 >= prev);
                prev = c3;
            }
            let mut prev = 0.0;
            for i in 0..40 {
                let k2 = 1.0 + 0.5 * i as f64;
                let (_, _, c3) = metric_bounds(eta, rho, 0.5, 1.0, k2, mu, 2.0 * mu);
                assert!(c3 >= prev);
                prev = c3;
            }
        }
    }

    #[test]
    fn c3_decreases_in_ell_when_dual_term_dominates() {
        // q_η = η/(ℓρ) makes ℓ·q_η² = η²/(ℓρ²) shrink as ℓ grows.
        let (_, _, a) = metric_bounds(1.2f64, 0.8, 0.5, 1.0, 2.0, 0.5, 0.5);
        let (_, _, b) = metric_bounds(1.2f64, 0.8, 0.5, 1.0, 2.0, 0.5, 1.0);
        assert!(b < a);
    }

    proptest! {
        #[test]
        fn penalty_gradient_matches_fd(a in -5.0f64..5.0, b in -5.0f64..5.0, rho in 0.1f64..5.0) {
            prop_assume!((rho * a + b).abs() > 1e-4);
            let (_, da, db) = penalty_h(a, b, rho).unwrap();
            let step = 1e-6;
            let fa = (penalty_h(a + step, b, rho).unwrap().0 - penalty_h(a - step, b, rho).unwrap().0) / (2.0 * step);
            let fb = (penalty_h(a, b + step, rho).unwrap().0 - penalty_h(a, b - step, rho).unwrap().0) / (2.0 * step);
            prop_assert!((fa - da).abs() < 1e-5);
            prop_assert!((fb - db).abs() < 1e-5);
        }

        #[test]
        fn penalty_continuous_at_boundary(a in -5.0f64..5.0, rho in 0.1f64..5.0) {
            let b = -rho * a;
            let on = penalty_h(a, b, rho).unwrap().0;
            let branch2 = -(b * b) / (2.0 * rho);
            prop_assert!((on - branch2).abs() <= 1e-12 * (1.0 + on.abs()));
        }

        #[test]
        fn penalty_convex_in_a(a1 in -5.0f64..5.0, a2 in -5.0f64..5.0, b in -5.0f64..5.0, rho in 0.1f64..5.0) {
            let f = |a: f64| penalty_h(a, b, rho).unwrap().0;
            let mid = f(0.5 * (a1 + a2));
            prop_assert!(mid <= 0.5 * (f(a1) + f(a2)) + 1e-12);
        }

        #[test]
        fn clip_lipschitz(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_program(&mut rng);
            let rho = rng.gen_range(0.1..3.0);
            let mut vecn = |k: usize| DVector::from_fn(k, |_, _| rng.gen_range(-2.0..2.0));
            let (x1, x2) = (vecn(p.n_xi()), vecn(p.n_xi()));
            let (n1, n2) = (vecn(p.n_ineq()), vecn(p.n_ineq()));
            let g11 = clip_multiplier(&p, &x1, &n1, rho);
            let g12 = clip_multiplier(&p, &x1, &n2, rho);
            let g21 = clip_multiplier(&p, &x2, &n1, rho);
            prop_assert!((&g11 - &g12).norm() <= (&n1 - &n2).norm() + 1e-12);
            let rn = if p.n_ineq() > 0 { linalg::singular_values(&p.r_ineq)[0] } else { 0.0 };
            prop_assert!((&g11 - &g21).norm() <= rho * rn * (&x1 - &x2).norm() + 1e-12);
        }
    }
}
