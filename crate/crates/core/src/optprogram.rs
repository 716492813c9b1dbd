//! Steady-state optimization programs over `ξ = col(x, y, u)` and their
//! exact KKT oracle.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::netplant::{CompactPlant, SubsystemDims};
use crate::scalar::{lit, to_f64, Scalar};

/// Smallest admissible singular value of the stacked constraint matrix.
pub const RANK_TOL: f64 = 1e-9;
/// Largest number of inequality rows the enumeration oracle accepts.
pub const MAX_ORACLE_INEQ: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("constraint matrix has {rows} rows but only {cols} decision variables")]
    TooManyConstraints { rows: usize, cols: usize },
    #[error("constraint matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficient { sigma_min: f64 },
    #[error("program has no constraints")]
    NoConstraints,
    #[error("cost weight is not symmetric positive definite (smallest eigenvalue {0:e})")]
    NotStronglyConvex(f64),
    #[error("cost constants must satisfy 0 < mu <= ell, got mu={mu:e}, ell={ell:e}")]
    BadCostConstants { mu: f64, ell: f64 },
    #[error("state-input layout requires y = x (C = I)")]
    OutputNotState,
    #[error("oracle needs a quadratic cost")]
    NotQuadratic,
    #[error("oracle supports at most {max} inequality rows, got {got}")]
    TooManyInequalities { got: usize, max: usize },
    #[error("program is infeasible")]
    Infeasible,
    #[error("inequality row {row} out of range ({n_ineq} rows)")]
    BadRow { row: usize, n_ineq: usize },
    #[error("serialization: {0}")]
    Serde(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Arrangement of `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// `ξ = col(x, y, u)`.
    Full { n: usize, p: usize, m: usize },
    /// `ξ = col(x, u)`, valid when `y ≡ x`.
    StateInput { n: usize, m: usize },
}

impl Layout {
    pub fn n(&self) -> usize {
        match *self {
            Layout::Full { n, .. } | Layout::StateInput { n, .. } => n,
        }
    }
    pub fn m(&self) -> usize {
        match *self {
            Layout::Full { m, .. } | Layout::StateInput { m, .. } => m,
        }
    }
    pub fn p(&self) -> usize {
        match *self {
            Layout::Full { p, .. } => p,
            Layout::StateInput { n, .. } => n,
        }
    }
    pub fn n_xi(&self) -> usize {
        match *self {
            Layout::Full { n, p, m } => n + p + m,
            Layout::StateInput { n, m } => n + m,
        }
    }
    pub fn y_offset(&self) -> usize {
        match *self {
            Layout::Full { n, .. } => n,
            Layout::StateInput { .. } => 0,
        }
    }
    pub fn u_offset(&self) -> usize {
        match *self {
            Layout::Full { n, p, .. } => n + p,
            Layout::StateInput { n, .. } => n,
        }
    }
    /// Number of leading equality rows generated by the plant itself.
    pub fn plant_rows(&self) -> usize {
        match *self {
            Layout::Full { n, p, .. } => n + p,
            Layout::StateInput { n, .. } => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Full,
    StateInput,
}

/// Per-subsystem constraint rows acting on `x_i`, `y_i` and `u_i` separately.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintTemplate<T: Scalar> {
    pub eq_x: DMatrix<T>,
    pub b_x: DVector<T>,
    pub eq_y: DMatrix<T>,
    pub b_y: DVector<T>,
    pub eq_u: DMatrix<T>,
    pub b_u: DVector<T>,
    pub ineq_x: DMatrix<T>,
    pub h_x: DVector<T>,
    pub ineq_y: DMatrix<T>,
    pub h_y: DVector<T>,
    pub ineq_u: DMatrix<T>,
    pub h_u: DVector<T>,
}

impl<T: Scalar> ConstraintTemplate<T> {
    /// Template with no rows.
    pub fn empty(d: SubsystemDims) -> Self {
        Self {
            eq_x: DMatrix::zeros(0, d.n),
            b_x: DVector::zeros(0),
            eq_y: DMatrix::zeros(0, d.p),
            b_y: DVector::zeros(0),
            eq_u: DMatrix::zeros(0, d.m),
            b_u: DVector::zeros(0),
            ineq_x: DMatrix::zeros(0, d.n),
            h_x: DVector::zeros(0),
            ineq_y: DMatrix::zeros(0, d.p),
            h_y: DVector::zeros(0),
            ineq_u: DMatrix::zeros(0, d.m),
            h_u: DVector::zeros(0),
        }
    }

    fn check(&self, k: usize, d: SubsystemDims) -> Result<(), ProgramError> {
        let pairs: [(&str, &DMatrix<T>, &DVector<T>, usize); 6] = [
            ("eq_x", &self.eq_x, &self.b_x, d.n),
            ("eq_y", &self.eq_y, &self.b_y, d.p),
            ("eq_u", &self.eq_u, &self.b_u, d.m),
            ("ineq_x", &self.ineq_x, &self.h_x, d.n),
            ("ineq_y", &self.ineq_y, &self.h_y, d.p),
            ("ineq_u", &self.ineq_u, &self.h_u, d.m),
        ];
        for (name, mat, rhs, cols) in pairs {
            if mat.ncols() != cols || mat.nrows() != rhs.len() {
                return Err(ProgramError::Dimension(format!(
                    "template {k}: {name} is {}x{} with rhs length {}, expected {cols} columns",
                    mat.nrows(),
                    mat.ncols(),
                    rhs.len()
                )));
            }
        }
        Ok(())
    }
}

pub type ValueFn<T> = Arc<dyn Fn(&DVector<T>) -> T + Send + Sync>;
pub type GradientFn<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;
pub type HessianFn<T> = Arc<dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync>;

/// `½ (ξ - ξ*)ᵀ K (ξ - ξ*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost<T: Scalar> {
    weight: DMatrix<T>,
    target: DVector<T>,
    mu: T,
    ell: T,
}

impl<T: Scalar> QuadraticCost<T> {
    pub fn new(weight: DMatrix<T>, target: DVector<T>) -> Result<Self, ProgramError> {
        let n = target.len();
        if weight.shape() != (n, n) {
            return Err(ProgramError::Dimension(format!(
                "weight is {:?}, target has length {n}",
                weight.shape()
            )));
        }
        let asym = linalg::max_abs(&(&weight - weight.transpose()));
        if asym > lit::<T>(1e-12) * linalg::max_abs(&weight).max(T::one()) {
            return Err(ProgramError::NotStronglyConvex(f64::NAN));
        }
        let eig = linalg::sym_eigenvalues(&weight);
        let (mu, ell) = if n == 0 {
            (T::one(), T::one())
        } else {
            (eig[0], eig[n - 1])
        };
        if mu <= T::zero() {
            return Err(ProgramError::NotStronglyConvex(to_f64(mu)));
        }
        Ok(Self {
            weight: linalg::symmetrize(&weight),
            target,
            mu,
            ell,
        })
    }

    pub fn weight(&self) -> &DMatrix<T> {
        &self.weight
    }
    pub fn target(&self) -> &DVector<T> {
        &self.target
    }
}

/// Black-box strongly convex cost with declared curvature bounds.
#[derive(Clone)]
pub struct OpaqueCost<T: Scalar> {
    pub dim: usize,
    pub mu: T,
    pub ell: T,
    pub value: ValueFn<T>,
    pub gradient: GradientFn<T>,
    pub hessian: Option<HessianFn<T>>,
}

impl<T: Scalar> fmt::Debug for OpaqueCost<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpaqueCost")
            .field("dim", &self.dim)
            .field("mu", &self.mu)
            .field("ell", &self.ell)
            .field("hessian", &self.hessian.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum Cost<T: Scalar> {
    Quadratic(QuadraticCost<T>),
    Opaque(OpaqueCost<T>),
}

impl<T: Scalar> Cost<T> {
    pub fn quadratic(weight: DMatrix<T>, target: DVector<T>) -> Result<Self, ProgramError> {
        Ok(Cost::Quadratic(QuadraticCost::new(weight, target)?))
    }

    pub fn opaque(
        dim: usize,
        mu: T,
        ell: T,
        value: ValueFn<T>,
        gradient: GradientFn<T>,
        hessian: Option<HessianFn<T>>,
    ) -> Result<Self, ProgramError> {
        if !(mu > T::zero() && mu <= ell) {
            return Err(ProgramError::BadCostConstants {
                mu: to_f64(mu),
                ell: to_f64(ell),
            });
        }
        Ok(Cost::Opaque(OpaqueCost {
            dim,
            mu,
            ell,
            value,
            gradient,
            hessian,
        }))
    }

    pub fn dim(&self) -> usize {
        match self {
            Cost::Quadratic(q) => q.target.len(),
            Cost::Opaque(o) => o.dim,
        }
    }

    /// Strong convexity constant.
    pub fn mu(&self) -> T {
        match self {
            Cost::Quadratic(q) => q.mu,
            Cost::Opaque(o) => o.mu,
        }
    }

    /// Gradient Lipschitz constant.
    pub fn ell(&self) -> T {
        match self {
            Cost::Quadratic(q) => q.ell,
            Cost::Opaque(o) => o.ell,
        }
    }

    pub fn value(&self, xi: &DVector<T>) -> T {
        match self {
            Cost::Quadratic(q) => {
                let e = xi - &q.target;
                (e.transpose() * &q.weight * &e)[(0, 0)] * lit(0.5)
            }
            Cost::Opaque(o) => (o.value)(xi),
        }
    }

    pub fn gradient(&self, xi: &DVector<T>) -> DVector<T> {
        match self {
            Cost::Quadratic(q) => &q.weight * (xi - &q.target),
            Cost::Opaque(o) => (o.gradient)(xi),
        }
    }

    /// Hessian at `xi` when available.
    pub fn hessian(&self, xi: &DVector<T>) -> Option<DMatrix<T>> {
        match self {
            Cost::Quadratic(q) => Some(q.weight.clone()),
            Cost::Opaque(o) => o.hessian.as_ref().map(|h| h(xi)),
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticCost<T>> {
        match self {
            Cost::Quadratic(q) => Some(q),
            Cost::Opaque(_) => None,
        }
    }
}

/// `min J(ξ)` s.t. `R_eq ξ = b`, `R_ineq ξ ≤ h`.
#[derive(Debug, Clone)]
pub struct SteadyStateProgram<T: Scalar> {
    pub layout: Layout,
    pub r_eq: DMatrix<T>,
    pub b: DVector<T>,
    pub r_ineq: DMatrix<T>,
    pub h: DVector<T>,
    pub cost: Cost<T>,
    /// Row weights applied to the plant rows when they are rebuilt.
    pub plant_row_scale: Option<DVector<T>>,
}

impl<T: Scalar> SteadyStateProgram<T> {
    /// Validates dimensions and full row rank of the stacked constraints.
    pub fn from_parts(
        layout: Layout,
        r_eq: DMatrix<T>,
        b: DVector<T>,
        r_ineq: DMatrix<T>,
        h: DVector<T>,
        cost: Cost<T>,
    ) -> Result<Self, ProgramError> {
        let nx = layout.n_xi();
        if r_eq.ncols() != nx || r_ineq.ncols() != nx || cost.dim() != nx {
            return Err(ProgramError::Dimension(format!(
                "R_eq has {} columns, R_ineq {}, cost dimension {}; expected {nx}",
                r_eq.ncols(),
                r_ineq.ncols(),
                cost.dim()
            )));
        }
        if r_eq.nrows() != b.len() || r_ineq.nrows() != h.len() {
            return Err(ProgramError::Dimension(format!(
                "R_eq has {} rows for b of length {}, R_ineq has {} rows for h of length {}",
                r_eq.nrows(),
                b.len(),
                r_ineq.nrows(),
                h.len()
            )));
        }
        let p = Self {
            layout,
            r_eq,
            b,
            r_ineq,
            h,
            cost,
            plant_row_scale: None,
        };
        if p.n_c() > 0 {
            p.spectral_bounds()?;
        }
        Ok(p)
    }

    pub fn n_xi(&self) -> usize {
        self.layout.n_xi()
    }
    pub fn n_eq(&self) -> usize {
        self.r_eq.nrows()
    }
    pub fn n_ineq(&self) -> usize {
        self.r_ineq.nrows()
    }
    pub fn n_c(&self) -> usize {
        self.n_eq() + self.n_ineq()
    }
    /// Dimension of the controller state `col(ξ, ν_eq, ν_ineq)`.
    pub fn n_theta(&self) -> usize {
        self.n_xi() + self.n_c()
    }

    /// `R = col(R_eq, R_ineq)`.
    pub fn stacked(&self) -> DMatrix<T> {
        linalg::vstack(self.n_xi(), &[&self.r_eq, &self.r_ineq])
    }

    /// `(κ1, κ2) = (σ_min(R)², σ_max(R)²)`.
    pub fn spectral_bounds(&self) -> Result<(T, T), ProgramError> {
        let (nc, nx) = (self.n_c(), self.n_xi());
        if nc == 0 {
            return Err(ProgramError::NoConstraints);
        }
        if nc > nx {
            return Err(ProgramError::TooManyConstraints { rows: nc, cols: nx });
        }
        let s = linalg::singular_values(&self.stacked());
        let (smax, smin) = (s[0], s[s.len() - 1]);
        if smin <= lit(RANK_TOL) {
            return Err(ProgramError::RankDeficient {
                sigma_min: to_f64(smin),
            });
        }
        Ok((smin * smin, smax * smax))
    }

    /// Replaces the right-hand side of inequality row `row`.
    pub fn set_limit(&mut self, row: usize, value: T) -> Result<(), ProgramError> {
        if row >= self.n_ineq() {
            return Err(ProgramError::BadRow {
                row,
                n_ineq: self.n_ineq(),
            });
        }
        self.h[row] = value;
        Ok(())
    }

    /// Rewrites the plant-generated equality rows from `plant`.
    pub fn restack_plant_rows(&mut self, plant: &CompactPlant<T>) -> Result<(), ProgramError> {
        let (mut rows, mut rhs) = plant_rows(plant, self.layout)?;
        let k = rows.nrows();
        if let Some(w) = &self.plant_row_scale {
            if w.len() != k {
                return Err(ProgramError::Dimension(format!("row scale has length {}, expected {k}", w.len())));
            }
            for i in 0..k {
                rows.row_mut(i).scale_mut(w[i]);
                rhs[i] *= w[i];
            }
        }
        if self.n_eq() < k {
            return Err(ProgramError::Dimension("program lacks plant rows".into()));
        }
        self.r_eq.view_mut((0, 0), (k, self.n_xi())).copy_from(&rows);
        self.b.rows_mut(0, k).copy_from(&rhs);
        if self.n_c() > 0 {
            self.spectral_bounds()?;
        }
        Ok(())
    }

    pub fn split_theta(&self, theta: &DVector<T>) -> KktPoint<T> {
        let (nx, ne) = (self.n_xi(), self.n_eq());
        KktPoint {
            xi: theta.rows(0, nx).into_owned(),
            nu_eq: theta.rows(nx, ne).into_owned(),
            nu_ineq: theta.rows(nx + ne, self.n_ineq()).into_owned(),
        }
    }
}

fn plant_rows<T: Scalar>(plant: &CompactPlant<T>, layout: Layout) -> Result<(DMatrix<T>, DVector<T>), ProgramError> {
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    if layout.n() != n || layout.m() != m || layout.p() != p {
        return Err(ProgramError::Dimension(format!(
            "layout {layout:?} does not match plant (n={n}, m={m}, p={p})"
        )));
    }
    let nx = layout.n_xi();
    match layout {
        Layout::Full { .. } => {
            let mut r = DMatrix::zeros(p + n, nx);
            r.view_mut((0, 0), (p, n)).copy_from(&(-&plant.c));
            r.view_mut((0, n), (p, p)).fill_with_identity();
            r.view_mut((p, 0), (n, n)).copy_from(&plant.ap);
            r.view_mut((p, n + p), (n, m)).copy_from(&plant.b);
            let rhs = linalg::vcat(&[&DVector::zeros(p), &(DVector::zeros(n) - &plant.d)]);
            Ok((r, rhs))
        }
        Layout::StateInput { .. } => {
            let id = DMatrix::<T>::identity(n, n);
            if p != n || linalg::max_abs(&(&plant.c - id)) > lit(1e-12) {
                return Err(ProgramError::OutputNotState);
            }
            let mut r = DMatrix::zeros(n, nx);
            r.view_mut((0, 0), (n, n)).copy_from(&plant.ap);
            r.view_mut((0, n), (n, m)).copy_from(&plant.b);
            Ok((r, DVector::zeros(n) - &plant.d))
        }
    }
}

/// Stacks plant rows and per-subsystem template rows into one program.
pub fn assemble_program<T: Scalar>(
    plant: &CompactPlant<T>,
    templates: &[ConstraintTemplate<T>],
    cost: Cost<T>,
    kind: LayoutKind,
) -> Result<SteadyStateProgram<T>, ProgramError> {
    if templates.len() != plant.subsystems.len() {
        return Err(ProgramError::Dimension(format!(
            "{} templates for {} subsystems",
            templates.len(),
            plant.subsystems.len()
        )));
    }
    for (k, (t, s)) in templates.iter().zip(&plant.subsystems).enumerate() {
        t.check(k + 1, s.dims())?;
    }
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    let layout = match kind {
        LayoutKind::Full => Layout::Full { n, p, m },
        LayoutKind::StateInput => Layout::StateInput { n, m },
    };
    let (prow, prhs) = plant_rows(plant, layout)?;
    let nx = layout.n_xi();
    let (yo, uo) = (layout.y_offset(), layout.u_offset());

    let bd = |f: fn(&ConstraintTemplate<T>) -> &DMatrix<T>| {
        linalg::block_diag(&templates.iter().map(f).collect::<Vec<_>>())
    };
    let cat = |f: fn(&ConstraintTemplate<T>) -> &DVector<T>| linalg::vcat(&templates.iter().map(f).collect::<Vec<_>>());
    let place = |blk: DMatrix<T>, off: usize| {
        let mut r = DMatrix::zeros(blk.nrows(), nx);
        r.view_mut((0, off), blk.shape()).copy_from(&blk);
        r
    };

    let ex = place(bd(|t| &t.eq_x), 0);
    let ey = place(bd(|t| &t.eq_y), yo);
    let eu = place(bd(|t| &t.eq_u), uo);
    let r_eq = linalg::vstack(nx, &[&prow, &ex, &ey, &eu]);
    let b = linalg::vcat(&[&prhs, &cat(|t| &t.b_x), &cat(|t| &t.b_y), &cat(|t| &t.b_u)]);

    let ix = place(bd(|t| &t.ineq_x), 0);
    let iy = place(bd(|t| &t.ineq_y), yo);
    let iu = place(bd(|t| &t.ineq_u), uo);
    let r_ineq = linalg::vstack(nx, &[&ix, &iy, &iu]);
    let h = linalg::vcat(&[&cat(|t| &t.h_x), &cat(|t| &t.h_y), &cat(|t| &t.h_u)]);

    SteadyStateProgram::from_parts(layout, r_eq, b, r_ineq, h, cost)
}

/// Primal-dual point `(ξ, ν_eq, ν_ineq)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint<T: Scalar> {
    pub xi: DVector<T>,
    pub nu_eq: DVector<T>,
    pub nu_ineq: DVector<T>,
}

impl<T: Scalar> KktPoint<T> {
    /// `θ = col(ξ, ν_eq, ν_ineq)`.
    pub fn theta(&self) -> DVector<T> {
        linalg::vcat(&[&self.xi, &self.nu_eq, &self.nu_ineq])
    }
}

/// Infinity-norm KKT residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualReport {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub dual_neg: f64,
    pub complementarity: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        [
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.dual_neg,
            self.complementarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn kkt_residual<T: Scalar>(
    program: &SteadyStateProgram<T>,
    point: &KktPoint<T>,
) -> Result<ResidualReport, ProgramError> {
    if point.xi.len() != program.n_xi()
        || point.nu_eq.len() != program.n_eq()
        || point.nu_ineq.len() != program.n_ineq()
    {
        return Err(ProgramError::Dimension("KKT point does not match program".into()));
    }
    let stat = program.cost.gradient(&point.xi)
        + program.r_eq.transpose() * &point.nu_eq
        + program.r_ineq.transpose() * &point.nu_ineq;
    let eq = &program.r_eq * &point.xi - &program.b;
    let slack = &program.r_ineq * &point.xi - &program.h;
    let mut r = ResidualReport {
        stationarity: to_f64(linalg::max_abs_vec(&stat)),
        primal_eq: to_f64(linalg::max_abs_vec(&eq)),
        ..Default::default()
    };
    for i in 0..program.n_ineq() {
        r.primal_ineq = r.primal_ineq.max(to_f64(slack[i]).max(0.0));
        r.dual_neg = r.dual_neg.max((-to_f64(point.nu_ineq[i])).max(0.0));
        r.complementarity = r
            .complementarity
            .max((to_f64(point.nu_ineq[i]) * to_f64(slack[i])).abs());
    }
    Ok(r)
}

/// Next `k`-subset of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exact KKT point of a strictly convex quadratic program.
///
/// Active sets are tried by size, then lexicographically; the first one whose
/// equality-constrained solution is primal feasible with nonnegative
/// multipliers is returned.
pub fn solve_oracle<T: Scalar>(program: &SteadyStateProgram<T>) -> Result<KktPoint<T>, ProgramError> {
    let q = program.cost.as_quadratic().ok_or(ProgramError::NotQuadratic)?;
    let (nx, ne, ni) = (program.n_xi(), program.n_eq(), program.n_ineq());
    if ni > MAX_ORACLE_INEQ {
        return Err(ProgramError::TooManyInequalities {
            got: ni,
            max: MAX_ORACLE_INEQ,
        });
    }
    let kt = &q.weight * &q.target;
    let max_active = ni.min(nx.saturating_sub(ne));
    for size in 0..=max_active {
        let mut set: Vec<usize> = (0..size).collect();
        loop {
            if let Some(pt) = try_active_set(program, &kt, &set) {
                return Ok(pt);
            }
            if size == 0 || !next_combination(&mut set, ni) {
                break;
            }
        }
    }
    let _ = ne;
    Err(ProgramError::Infeasible)
}

fn try_active_set<T: Scalar>(program: &SteadyStateProgram<T>, kt: &DVector<T>, set: &[usize]) -> Option<KktPoint<T>> {
    let q = program.cost.as_quadratic()?;
    let (nx, ne, ni) = (program.n_xi(), program.n_eq(), program.n_ineq());
    let na = ne + set.len();
    let dim = nx + na;
    let mut m = DMatrix::<T>::zeros(dim, dim);
    let mut rhs = DVector::<T>::zeros(dim);
    m.view_mut((0, 0), (nx, nx)).copy_from(&q.weight);
    rhs.rows_mut(0, nx).copy_from(kt);
    for r in 0..na {
        let (row, val) = if r < ne {
            (program.r_eq.row(r), program.b[r])
        } else {
            let k = set[r - ne];
            (program.r_ineq.row(k), program.h[k])
        };
        for j in 0..nx {
            m[(nx + r, j)] = row[j];
            m[(j, nx + r)] = row[j];
        }
        rhs[nx + r] = val;
    }
    let sol = linalg::solve_refined(&m, &rhs)?;
    let xi = sol.rows(0, nx).into_owned();
    let lam = sol.rows(nx, na).into_owned();
    let slack = &program.r_ineq * &xi - &program.h;
    let scale = T::one() + linalg::max_abs_vec(&program.h) + linalg::max_abs(&program.r_ineq) * linalg::max_abs_vec(&xi);
    let tol_p = lit::<T>(1e-9) * scale;
    for i in 0..ni {
        if !set.contains(&i) && slack[i] > tol_p {
            return None;
        }
    }
    let tol_d = lit::<T>(1e-9) * (T::one() + linalg::max_abs_vec(&lam));
    let mut nu_ineq = DVector::zeros(ni);
    for (a, &k) in set.iter().enumerate() {
        let v = lam[ne + a];
        if v < -tol_d {
            return None;
        }
        nu_ineq[k] = v.max(T::zero());
    }
    Some(KktPoint {
        xi,
        nu_eq: lam.rows(0, ne).into_owned(),
        nu_ineq,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CostRecord {
    Quadratic { weight: Vec<Vec<f64>>, target: Vec<f64> },
    Opaque { dim: usize, mu: f64, ell: f64 },
}

#[derive(Serialize, Deserialize)]
struct ProgramRecord {
    layout: Layout,
    r_eq: Vec<Vec<f64>>,
    b: Vec<f64>,
    r_ineq: Vec<Vec<f64>>,
    h: Vec<f64>,
    cost: CostRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plant_row_scale: Option<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>, ProgramError> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(ProgramError::Serde(format!("ragged matrix, expected {cols} columns")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl SteadyStateProgram<f64> {
    /// JSON form; opaque costs serialize only their constants.
    pub fn to_json(&self) -> Result<String, ProgramError> {
        let cost = match &self.cost {
            Cost::Quadratic(q) => CostRecord::Quadratic {
                weight: rows_of(&q.weight),
                target: q.target.iter().copied().collect(),
            },
            Cost::Opaque(o) => CostRecord::Opaque {
                dim: o.dim,
                mu: o.mu,
                ell: o.ell,
            },
        };
        let rec = ProgramRecord {
            layout: self.layout,
            r_eq: rows_of(&self.r_eq),
            b: self.b.iter().copied().collect(),
            r_ineq: rows_of(&self.r_ineq),
            h: self.h.iter().copied().collect(),
            cost,
            plant_row_scale: self.plant_row_scale.as_ref().map(|w| w.iter().copied().collect()),
        };
        serde_json::to_string_pretty(&rec).map_err(|e| ProgramError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, ProgramError> {
        let rec: ProgramRecord = serde_json::from_str(s).map_err(|e| ProgramError::Serde(e.to_string()))?;
        let nx = rec.layout.n_xi();
        let cost = match rec.cost {
            CostRecord::Quadratic { weight, target } => {
                Cost::quadratic(matrix_of(&weight, nx)?, DVector::from_vec(target))?
            }
            CostRecord::Opaque { .. } => {
                return Err(ProgramError::Serde("opaque cost cannot be deserialized".into()))
            }
        };
        let mut p = Self::from_parts(
            rec.layout,
            matrix_of(&rec.r_eq, nx)?,
            DVector::from_vec(rec.b),
            matrix_of(&rec.r_ineq, nx)?,
            DVector::from_vec(rec.h),
            cost,
        )?;
        p.plant_row_scale = rec.plant_row_scale.map(DVector::from_vec);
        Ok(p)
    }
}
