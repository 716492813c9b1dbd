//! Plant-controller interconnection, tuning condition, fault-aware RK4
//! simulation and the composite Lyapunov monitor.

use std::io::{self, Write};

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augpdgd::{
    active_pattern, controller_gains, eta_floor, field_matrix, ControllerError, ControllerParams,
};
use crate::linalg;
use crate::netplant::{assemble_plant, CompactPlant, NetError, Subsystem};
use crate::optprogram::{kkt_residual, solve_oracle, Cost, KktPoint, ProgramError, ResidualReport, SteadyStateProgram};
use crate::scalar::{is_finite, lit, max, min, to_f64, Scalar};

/// Safety factor applied to the minimal dual gain by [`auto_eta`].
pub const ETA_SAFETY: f64 = 1.05;
/// Largest admissible `dt · max|λ|`.
pub const STIFFNESS_FACTOR: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosedLoopError {
    #[error("tuning condition fails: eta={eta:e}, beta={beta:e}; minimal eta is {min_eta:e}")]
    TuningCondition { beta: f64, eta: f64, min_eta: f64 },
    #[error("input dimension {m} differs from output dimension {p}")]
    PortMismatch { m: usize, p: usize },
    #[error("state became non-finite; last finite time {time:e}")]
    Diverged { time: f64 },
    #[error("fault at t={time:e} lies outside [0, {t_end:e}]")]
    EventOutOfRange { time: f64, t_end: f64 },
    #[error("fault times must be strictly increasing")]
    EventOrder,
    #[error("step {dt:e} exceeds the stiffness limit {limit:e}")]
    TooStiff { dt: f64, limit: f64 },
    #[error("invalid simulation settings: {0}")]
    Settings(String),
    #[error("unknown subsystem {0}")]
    UnknownSubsystem(usize),
    #[error("dwell time needs gamma >= 1 and tau > 0, got gamma={gamma:e}, tau={tau:e}")]
    DwellDomain { gamma: f64, tau: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// `u = Mu θ`, `v_pd = -(y - My θ)`.
pub fn coupling<T: Scalar>(
    params: &ControllerParams<T>,
    theta: &DVector<T>,
    y: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>), ClosedLoopError> {
    if theta.len() != params.n_theta() || y.len() != params.my_sel.nrows() {
        return Err(ClosedLoopError::Dimension(format!(
            "theta has length {}, y {}; expected {} and {}",
            theta.len(),
            y.len(),
            params.n_theta(),
            params.my_sel.nrows()
        )));
    }
    let u = &params.mu_sel * theta;
    let v = &params.my_sel * theta - y;
    Ok((u, v))
}

/// `λ_max(MuᵀMy + MyᵀMu)`.
pub fn beta<T: Scalar>(params: &ControllerParams<T>) -> Result<T, ClosedLoopError> {
    let (m, p) = (params.mu_sel.nrows(), params.my_sel.nrows());
    if m != p {
        return Err(ClosedLoopError::PortMismatch { m, p });
    }
    let cross = params.mu_sel.transpose() * &params.my_sel;
    Ok(linalg::max_sym_eigenvalue(&(&cross + cross.transpose())))
}

/// Smallest `η` with `η κ1 ε min(η, 1) ≥ β`.
pub fn minimal_eta<T: Scalar>(beta: T, kappa1: T, epsilon: T) -> T {
    let r = beta / (kappa1 * epsilon);
    if r >= T::one() {
        r
    } else {
        r.sqrt()
    }
}

/// [`minimal_eta`] inflated by [`ETA_SAFETY`].
pub fn auto_eta<T: Scalar>(beta: T, kappa1: T, epsilon: T) -> T {
    minimal_eta(beta, kappa1, epsilon) * lit(ETA_SAFETY)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityMargin<T: Scalar> {
    pub beta: T,
    pub eta_condition_ok: bool,
    pub tau1: T,
    pub tau2e: T,
    pub tau: T,
    pub min_eta: T,
}

/// Evaluates the tuning condition and decay rates without failing.
pub fn evaluate_margin<T: Scalar>(
    params: &ControllerParams<T>,
    kappa1: T,
    tau1: T,
) -> Result<StabilityMargin<T>, ClosedLoopError> {
    let b = beta(params)?;
    let mf = eta_floor(params.eta);
    let ok = params.eta * kappa1 * params.epsilon * mf > b;
    let tau2 = params.eta * kappa1 / (params.c * lit(2.0));
    let ecm = params.epsilon * params.c * mf * lit(2.0);
    let tau2e = (tau2 * ecm - b) / ecm;
    Ok(StabilityMargin {
        beta: b,
        eta_condition_ok: ok,
        tau1,
        tau2e,
        tau: min(tau1, tau2e) * lit(0.5),
        min_eta: minimal_eta(b, kappa1, params.epsilon),
    })
}

/// Like [`evaluate_margin`] but fails when the tuning condition does.
pub fn stability_margin<T: Scalar>(
    params: &ControllerParams<T>,
    kappa1: T,
    tau1: T,
) -> Result<StabilityMargin<T>, ClosedLoopError> {
    let m = evaluate_margin(params, kappa1, tau1)?;
    if !m.eta_condition_ok {
        return Err(ClosedLoopError::TuningCondition {
            beta: to_f64(m.beta),
            eta: to_f64(params.eta),
            min_eta: to_f64(m.min_eta),
        });
    }
    Ok(m)
}

/// `ln(γ_f) / (2τ)`.
pub fn dwell_time<T: Scalar>(gamma_f: T, tau: T) -> Result<T, ClosedLoopError> {
    if !(gamma_f >= T::one() && tau > T::zero()) {
        return Err(ClosedLoopError::DwellDomain {
            gamma: to_f64(gamma_f),
            tau: to_f64(tau),
        });
    }
    Ok(gamma_f.ln() / (tau * lit(2.0)))
}

/// Replacement matrices for one subsystem; `None` keeps the current value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubsystemPatch<T: Scalar> {
    pub a: Option<DMatrix<T>>,
    pub b: Option<DMatrix<T>>,
    pub c: Option<DMatrix<T>>,
    pub e: Option<DMatrix<T>>,
    pub g: Option<DMatrix<T>>,
    pub d: Option<DVector<T>>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum FaultKind<T: Scalar> {
    /// Sets `h[row] = value`.
    LimitChange { row: usize, value: T },
    /// Replaces matrices of subsystem `subsystem` (1-based).
    MatrixChange { subsystem: usize, patch: SubsystemPatch<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultEvent<T: Scalar> {
    pub time: T,
    pub kind: FaultKind<T>,
}

/// Mutates plant and program; returns whether `R` changed.
pub fn apply_fault<T: Scalar>(
    plant: &mut CompactPlant<T>,
    program: &mut SteadyStateProgram<T>,
    kind: &FaultKind<T>,
) -> Result<bool, ClosedLoopError> {
    match kind {
        FaultKind::LimitChange { row, value } => {
            program.set_limit(*row, *value)?;
            Ok(false)
        }
        FaultKind::MatrixChange { subsystem, patch } => {
            let mut subs = plant.subsystems.clone();
            let s = subs
                .iter_mut()
                .find(|s| s.index == *subsystem)
                .ok_or(ClosedLoopError::UnknownSubsystem(*subsystem))?;
            let pick = |new: &Option<DMatrix<T>>, old: &DMatrix<T>| new.clone().unwrap_or_else(|| old.clone());
            *s = Subsystem::new(
                s.index,
                pick(&patch.a, &s.a),
                pick(&patch.b, &s.b),
                pick(&patch.c, &s.c),
                pick(&patch.e, &s.e),
                pick(&patch.g, &s.g),
                patch.d.clone().unwrap_or_else(|| s.d.clone()),
            )?;
            let new_plant = assemble_plant(subs, plant.map.clone())?;
            let before = program.r_eq.clone();
            let mut new_prog = program.clone();
            new_prog.restack_plant_rows(&new_plant)?;
            let changed = new_prog.r_eq != before;
            *plant = new_plant;
            *program = new_prog;
            Ok(changed)
        }
    }
}

/// Stacked closed-loop field on `z = col(x, θ)`:
/// `ż = M z + q + N max(P z + r, 0)` plus `-∇J(ξ)` for opaque costs.
#[derive(Debug, Clone)]
pub struct ClosedLoopField<T: Scalar> {
    n: usize,
    nx: usize,
    m: DMatrix<T>,
    q: DVector<T>,
    nmat: DMatrix<T>,
    pmat: DMatrix<T>,
    r: DVector<T>,
    g: DVector<T>,
    opaque: Option<Cost<T>>,
    xi_buf: DVector<T>,
}

impl<T: Scalar> ClosedLoopField<T> {
    pub fn new(
        plant: &CompactPlant<T>,
        params: &ControllerParams<T>,
        program: &SteadyStateProgram<T>,
    ) -> Result<Self, ClosedLoopError> {
        let (n, nxi, ne, ni) = (plant.n(), program.n_xi(), program.n_eq(), program.n_ineq());
        let nt = program.n_theta();
        if params.n_theta() != nt || program.layout.n() != n || program.layout.m() != plant.m() {
            return Err(ClosedLoopError::Dimension("plant, program and controller disagree".into()));
        }
        let nz = n + nt;
        let (eta, rho) = (params.eta, params.rho);
        let mut m = DMatrix::<T>::zeros(nz, nz);
        let mut q = DVector::<T>::zeros(nz);

        m.view_mut((0, 0), (n, n)).copy_from(&plant.ap);
        m.view_mut((0, n), (n, nt)).copy_from(&(&plant.b * &params.mu_sel));
        q.rows_mut(0, n).copy_from(&plant.d);

        let opaque = match &program.cost {
            Cost::Quadratic(c) => {
                m.view_mut((n, n), (nxi, nxi)).copy_from(&(-c.weight()));
                q.rows_mut(n, nxi).copy_from(&(c.weight() * c.target()));
                None
            }
            Cost::Opaque(_) => Some(program.cost.clone()),
        };
        m.view_mut((n, n + nxi), (nxi, ne)).copy_from(&(-program.r_eq.transpose()));
        m.view_mut((n + nxi, n), (ne, nxi)).copy_from(&(&program.r_eq * eta));
        q.rows_mut(n + nxi, ne).copy_from(&(&program.b * (-eta)));
        let k = eta / rho;
        for i in 0..ni {
            let d = n + nxi + ne + i;
            m[(d, d)] -= k;
        }
        // Port: θ̇ += Bpd (My θ - C x).
        let bc = &params.bpd * &plant.c;
        let mut tx = m.view_mut((n, 0), (nt, n));
        tx -= &bc;
        let bm = &params.bpd * &params.my_sel;
        let mut tt = m.view_mut((n, n), (nt, nt));
        tt += &bm;

        let mut nmat = DMatrix::<T>::zeros(nz, ni);
        nmat.view_mut((n, 0), (nxi, ni)).copy_from(&(-program.r_ineq.transpose()));
        let mut pmat = DMatrix::<T>::zeros(ni, nz);
        pmat.view_mut((0, n), (ni, nxi)).copy_from(&(&program.r_ineq * rho));
        for i in 0..ni {
            nmat[(n + nxi + ne + i, i)] = k;
            pmat[(i, n + nxi + ne + i)] = T::one();
        }
        let r = &program.h * (-rho);
        Ok(Self {
            n,
            nx: nxi,
            m,
            q,
            nmat,
            pmat,
            r,
            g: DVector::zeros(ni),
            opaque,
            xi_buf: DVector::zeros(nxi),
        })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn eval(&mut self, z: &DVector<T>, out: &mut DVector<T>) {
        out.copy_from(&self.q);
        out.gemv(T::one(), &self.m, z, T::one());
        if !self.g.is_empty() {
            self.g.copy_from(&self.r);
            self.g.gemv(T::one(), &self.pmat, z, T::one());
            self.g.apply(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
            out.gemv(T::one(), &self.nmat, &self.g, T::one());
        }
        if let Some(cost) = &self.opaque {
            self.xi_buf.copy_from(&z.rows(self.n, self.nx));
            let grad = cost.gradient(&self.xi_buf);
            let mut o = out.rows_mut(self.n, self.nx);
            o -= grad;
        }
    }
}

/// Reusable RK4 stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4<T: Scalar> {
    k1: DVector<T>,
    k2: DVector<T>,
    k3: DVector<T>,
    k4: DVector<T>,
    tmp: DVector<T>,
}

impl<T: Scalar> Rk4<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: DVector::zeros(dim),
            k2: DVector::zeros(dim),
            k3: DVector::zeros(dim),
            k4: DVector::zeros(dim),
            tmp: DVector::zeros(dim),
        }
    }

    /// One classical RK4 step of the autonomous field `f`.
    pub fn step<F: FnMut(&DVector<T>, &mut DVector<T>)>(&mut self, f: &mut F, z: &mut DVector<T>, h: T) {
        let half = h * lit(0.5);
        f(z, &mut self.k1);
        self.tmp.copy_from(z);
        self.tmp.axpy(half, &self.k1, T::one());
        f(&self.tmp, &mut self.k2);
        self.tmp.copy_from(z);
        self.tmp.axpy(half, &self.k2, T::one());
        f(&self.tmp, &mut self.k3);
        self.tmp.copy_from(z);
        self.tmp.axpy(h, &self.k3, T::one());
        f(&self.tmp, &mut self.k4);
        let s = h / lit(6.0);
        self.k2 += &self.k3;
        z.axpy(s, &self.k1, T::one());
        z.axpy(s * lit(2.0), &self.k2, T::one());
        z.axpy(s, &self.k4, T::one());
    }
}

/// Integrates `ż = f(z)` with `steps` RK4 steps of size `dt`.
pub fn rk4_integrate<T: Scalar, F: FnMut(&DVector<T>, &mut DVector<T>)>(
    mut f: F,
    z0: &DVector<T>,
    dt: T,
    steps: usize,
) -> DVector<T> {
    let mut rk = Rk4::new(z0.len());
    let mut z = z0.clone();
    for _ in 0..steps {
        rk.step(&mut f, &mut z, dt);
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions<T: Scalar> {
    pub dt: T,
    pub t_end: T,
    pub record_every: usize,
    /// Storage matrix `P1` for the composite Lyapunov function.
    pub storage: Option<DMatrix<T>>,
    /// Plant decay rate used for per-segment margins.
    pub tau1: Option<T>,
    /// Metric override reused when gains are re-synthesized.
    pub override_c: Option<T>,
}

impl<T: Scalar> SimOptions<T> {
    pub fn new(dt: T, t_end: T) -> Self {
        Self {
            dt,
            t_end,
            record_every: 1,
            storage: None,
            tau1: None,
            override_c: None,
        }
    }
}

/// Fault-free stretch of a simulation.
#[derive(Debug, Clone)]
pub struct Segment<T: Scalar> {
    pub t_start: T,
    pub t_end: T,
    pub program: SteadyStateProgram<T>,
    pub params: ControllerParams<T>,
    pub margin: Option<StabilityMargin<T>>,
    /// Equilibrium `(x̄, θ̄)` used for tilde coordinates.
    pub equilibrium: Option<(DVector<T>, DVector<T>)>,
    /// True when the equilibrium is the final state rather than the oracle.
    pub surrogate: bool,
    /// Sample rows belonging to this segment.
    pub rows: std::ops::Range<usize>,
    pub final_x: DVector<T>,
    pub final_theta: DVector<T>,
}

#[derive(Debug, Clone)]
pub struct EventMark<T: Scalar> {
    pub time: T,
    pub kind: FaultKind<T>,
    pub x: DVector<T>,
    pub theta: DVector<T>,
    pub segment_before: usize,
    pub segment_after: usize,
}

/// Sampled closed-loop trajectory.
#[derive(Debug, Clone)]
pub struct Trace<T: Scalar> {
    pub times: Vec<T>,
    pub x: Vec<DVector<T>>,
    pub theta: Vec<DVector<T>>,
    pub u: Vec<DVector<T>>,
    pub y: Vec<DVector<T>>,
    /// Composite Lyapunov samples (NaN where unavailable).
    pub s: Vec<T>,
    pub kkt: Vec<ResidualReport>,
    pub segment_of: Vec<usize>,
    pub segments: Vec<Segment<T>>,
    pub events: Vec<EventMark<T>>,
    pub steps: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_x(&self) -> Option<&DVector<T>> {
        self.segments.last().map(|s| &s.final_x)
    }

    pub fn final_theta(&self) -> Option<&DVector<T>> {
        self.segments.last().map(|s| &s.final_theta)
    }

    /// KKT residuals of the final controller state for the final program.
    pub fn final_kkt(&self) -> Option<ResidualReport> {
        let seg = self.segments.last()?;
        kkt_residual(&seg.program, &seg.program.split_theta(&seg.final_theta)).ok()
    }
}

fn csv_f64(v: f64) -> String {
    format!("{v:?}")
}

impl Trace<f64> {
    /// CSV with header `t,x0..,theta0..,u0..,y0..,S,kkt_*`.
    pub fn write_csv<W: Write>(&self, mut w: W, n: usize, n_theta: usize, m: usize, p: usize) -> io::Result<()> {
        let mut head = vec!["t".to_string()];
        head.extend((0..n).map(|i| format!("x{i}")));
        head.extend((0..n_theta).map(|i| format!("theta{i}")));
        head.extend((0..m).map(|i| format!("u{i}")));
        head.extend((0..p).map(|i| format!("y{i}")));
        head.extend(
            ["S", "kkt_stationarity", "kkt_eq", "kkt_ineq", "kkt_comp"]
                .iter()
                .map(|s| s.to_string()),
        );
        writeln!(w, "{}", head.join(","))?;
        for k in 0..self.len() {
            let mut row = Vec::with_capacity(head.len());
            row.push(csv_f64(self.times[k]));
            row.extend(self.x[k].iter().map(|v| csv_f64(*v)));
            row.extend(self.theta[k].iter().map(|v| csv_f64(*v)));
            row.extend(self.u[k].iter().map(|v| csv_f64(*v)));
            row.extend(self.y[k].iter().map(|v| csv_f64(*v)));
            let r = &self.kkt[k];
            row.push(csv_f64(self.s[k]));
            row.push(csv_f64(r.stationarity));
            row.push(csv_f64(r.primal_eq));
            row.push(csv_f64(r.primal_ineq.max(r.dual_neg)));
            row.push(csv_f64(r.complementarity));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Largest stable step per the stiffness guard at state `θ0`.
pub fn stiffness_limit<T: Scalar>(
    plant: &CompactPlant<T>,
    params: &ControllerParams<T>,
    program: &SteadyStateProgram<T>,
    theta0: &DVector<T>,
) -> Result<T, ClosedLoopError> {
    let st = program.split_theta(theta0);
    let hess = program
        .cost
        .hessian(&st.xi)
        .unwrap_or_else(|| DMatrix::identity(program.n_xi(), program.n_xi()) * program.cost.ell());
    let gam = active_pattern(program, &st, params.rho);
    let f = field_matrix(params.eta, params.rho, program, &hess, &gam);
    let rc = linalg::spectral_radius(&linalg::spectrum(&f)?);
    let rp = linalg::spectral_radius(&plant.spectrum);
    let lam = max(rc, rp);
    Ok(if lam > T::zero() {
        lit::<T>(STIFFNESS_FACTOR) / lam
    } else {
        lit(f64::INFINITY)
    })
}

/// Number of steps covering `span` with steps no longer than `dt`.
fn steps_for<T: Scalar>(span: T, dt: T) -> usize {
    let r = to_f64(span / dt);
    let near = r.round();
    if (r - near).abs() <= 1e-9 * near.max(1.0) {
        near as usize
    } else {
        r.ceil() as usize
    }
}

fn oracle_equilibrium<T: Scalar>(program: &SteadyStateProgram<T>, n: usize) -> Option<(DVector<T>, DVector<T>)> {
    let pt = solve_oracle(program).ok()?;
    let x = pt.xi.rows(0, n).into_owned();
    Some((x, pt.theta()))
}

/// Integrates the closed loop over `[0, T]` through the fault schedule.
#[allow(clippy::too_many_arguments)]
pub fn simulate<T: Scalar>(
    plant: &CompactPlant<T>,
    params: &ControllerParams<T>,
    program: &SteadyStateProgram<T>,
    schedule: &[FaultEvent<T>],
    x0: &DVector<T>,
    theta0: &DVector<T>,
    opts: &SimOptions<T>,
) -> Result<Trace<T>, ClosedLoopError> {
    let (dt, t_end) = (opts.dt, opts.t_end);
    if !(dt > T::zero()) || !(t_end > T::zero()) || opts.record_every == 0 {
        return Err(ClosedLoopError::Settings("dt, T and record_every must be positive".into()));
    }
    if x0.len() != plant.n() || theta0.len() != program.n_theta() {
        return Err(ClosedLoopError::Dimension(format!(
            "x0 has length {}, theta0 {}; expected {} and {}",
            x0.len(),
            theta0.len(),
            plant.n(),
            program.n_theta()
        )));
    }
    let mut prev = -T::one();
    for ev in schedule {
        if ev.time < T::zero() || ev.time > t_end {
            return Err(ClosedLoopError::EventOutOfRange {
                time: to_f64(ev.time),
                t_end: to_f64(t_end),
            });
        }
        if ev.time <= prev {
            return Err(ClosedLoopError::EventOrder);
        }
        prev = ev.time;
    }
    let limit = stiffness_limit(plant, params, program, theta0)?;
    if dt > limit {
        return Err(ClosedLoopError::TooStiff {
            dt: to_f64(dt),
            limit: to_f64(limit),
        });
    }

    let n = plant.n();
    let nt = program.n_theta();
    let mut plant = plant.clone();
    let mut program = program.clone();
    let mut params = params.clone();
    let mut z = linalg::vcat(&[x0, theta0]);
    let mut trace = Trace {
        times: Vec::new(),
        x: Vec::new(),
        theta: Vec::new(),
        u: Vec::new(),
        y: Vec::new(),
        s: Vec::new(),
        kkt: Vec::new(),
        segment_of: Vec::new(),
        segments: Vec::new(),
        events: Vec::new(),
        steps: 0,
    };

    let mut bounds: Vec<T> = schedule.iter().map(|e| e.time).collect();
    bounds.push(t_end);
    let mut t0 = T::zero();
    let mut global = 0usize;
    for (si, &t1) in bounds.iter().enumerate() {
        if si > 0 {
            let ev = &schedule[si - 1];
            let seg_before = trace.segments.len() - 1;
            let r_changed = apply_fault(&mut plant, &mut program, &ev.kind)?;
            if r_changed {
                params = controller_gains(&program, params.eta, params.rho, params.epsilon, opts.override_c)
                    .or_else(|_| controller_gains(&program, params.eta, params.rho, params.epsilon, None))?;
                info!("gains re-synthesized at t={:e}: c={:e}", to_f64(ev.time), to_f64(params.c));
            }
            trace.events.push(EventMark {
                time: ev.time,
                kind: ev.kind.clone(),
                x: z.rows(0, n).into_owned(),
                theta: z.rows(n, nt).into_owned(),
                segment_before: seg_before,
                segment_after: seg_before + 1,
            });
        }
        let margin = match opts.tau1 {
            Some(t1v) => Some(evaluate_margin(&params, params.kappa1, t1v)?),
            None => None,
        };
        let equilibrium = oracle_equilibrium(&program, n);
        let row_start = trace.times.len();
        let seg_idx = trace.segments.len();
        let mut field = ClosedLoopField::new(&plant, &params, &program)?;
        let mut rk = Rk4::new(field.dim());
        let span = t1 - t0;
        let steps = if span > T::zero() { steps_for(span, dt) } else { 0 };
        let h = if steps > 0 { span / lit(steps as f64) } else { dt };
        debug!("segment {seg_idx}: {steps} steps of {:e}", to_f64(h));

        let record = |trace: &mut Trace<T>, t: T, z: &DVector<T>, program: &SteadyStateProgram<T>, params: &ControllerParams<T>, plant: &CompactPlant<T>| {
            let x = z.rows(0, n).into_owned();
            let th = z.rows(n, nt).into_owned();
            trace.y.push(&plant.c * &x);
            trace.u.push(&params.mu_sel * &th);
            trace
                .kkt
                .push(kkt_residual(program, &program.split_theta(&th)).unwrap_or_default());
            trace.times.push(t);
            trace.x.push(x);
            trace.theta.push(th);
            trace.s.push(lit(f64::NAN));
            trace.segment_of.push(seg_idx);
        };

        if si == 0 {
            record(&mut trace, t0, &z, &program, &params, &plant);
        }
        let mut f = |s: &DVector<T>, o: &mut DVector<T>| field.eval(s, o);
        let mut last_t = t0;
        for k in 1..=steps {
            rk.step(&mut f, &mut z, h);
            global += 1;
            let t = if k == steps { t1 } else { t0 + h * lit(k as f64) };
            if !z.iter().all(|v| is_finite(*v)) {
                return Err(ClosedLoopError::Diverged { time: to_f64(last_t) });
            }
            last_t = t;
            if global.is_multiple_of(opts.record_every) {
                record(&mut trace, t, &z, &program, &params, &plant);
            }
        }
        trace.segments.push(Segment {
            t_start: t0,
            t_end: t1,
            program: program.clone(),
            params: params.clone(),
            margin,
            surrogate: equilibrium.is_none(),
            equilibrium,
            rows: row_start..trace.times.len(),
            final_x: z.rows(0, n).into_owned(),
            final_theta: z.rows(n, nt).into_owned(),
        });
        t0 = t1;
    }
    trace.steps = global;
    for seg in trace.segments.iter_mut() {
        if seg.equilibrium.is_none() {
            seg.equilibrium = Some((seg.final_x.clone(), seg.final_theta.clone()));
        }
    }
    if let Some(p1) = &opts.storage {
        trace.s = composite_storage(&trace, p1)?;
    }
    Ok(trace)
}

/// `½ x̃ᵀP1x̃ + θ̃ᵀP2θ̃` relative to a segment's equilibrium.
pub fn storage_value<T: Scalar>(seg: &Segment<T>, p1: &DMatrix<T>, x: &DVector<T>, theta: &DVector<T>) -> Option<T> {
    let (xb, tb) = seg.equilibrium.as_ref()?;
    let dx = x - xb;
    let dt = theta - tb;
    let sp = (dx.transpose() * p1 * &dx)[(0, 0)] * lit(0.5);
    let sc = (dt.transpose() * &seg.params.p2 * &dt)[(0, 0)];
    Some(sp + sc)
}

/// Composite Lyapunov samples for every trace row.
pub fn composite_storage<T: Scalar>(trace: &Trace<T>, p1: &DMatrix<T>) -> Result<Vec<T>, ClosedLoopError> {
    if let Some(x) = trace.x.first() {
        if p1.shape() != (x.len(), x.len()) {
            return Err(ClosedLoopError::Dimension("storage matrix does not match the plant".into()));
        }
    }
    Ok((0..trace.len())
        .map(|k| {
            let seg = &trace.segments[trace.segment_of[k]];
            storage_value(seg, p1, &trace.x[k], &trace.theta[k]).unwrap_or_else(|| lit(f64::NAN))
        })
        .collect())
}

/// Envelope of one fault-free segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEnvelope {
    pub max_s: f64,
    /// Largest increase between consecutive samples.
    pub max_increase: f64,
    /// Least-squares rate `-d(ln S)/dt` over samples above the noise floor.
    pub fitted_rate: Option<f64>,
    pub tau: Option<f64>,
    pub samples_used: usize,
    pub surrogate: bool,
    /// `S` never leaves the rounding floor of the equilibrium; nothing to certify.
    pub stationary: bool,
}

impl SegmentEnvelope {
    pub fn monotone(&self, rel_tol: f64) -> bool {
        self.max_increase <= rel_tol * self.max_s
    }

    /// Monotone with a fitted rate of at least `τ`, or stationary.
    pub fn holds(&self, rel_tol: f64) -> bool {
        if self.stationary {
            return true;
        }
        let decays = match (self.fitted_rate, self.tau) {
            (Some(f), Some(t)) => f >= t,
            _ => false,
        };
        self.monotone(rel_tol) && decays
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub segments: Vec<SegmentEnvelope>,
    /// `S⁺/S⁻` at each event.
    pub gammas: Vec<f64>,
}

impl EnvelopeReport {
    /// Largest observed jump factor (1 without events).
    pub fn gamma_f(&self) -> f64 {
        self.gammas.iter().copied().fold(1.0, f64::max)
    }
}

/// Samples below `floor · max S` are excluded from the rate fit.
pub const FIT_FLOOR: f64 = 1e-16;

/// Relative deviation from the equilibrium treated as rounding noise.
pub const RESOLUTION_REL: f64 = 1e-10;

/// Largest `S` compatible with every coordinate lying within
/// `RESOLUTION_REL · scale` of the equilibrium.
fn resolution_floor<T: Scalar>(seg: &Segment<T>, p1: &DMatrix<T>) -> Option<f64> {
    let (xb, tb) = seg.equilibrium.as_ref()?;
    let scale = to_f64(xb.amax()).max(to_f64(tb.amax())).max(1.0);
    let d = RESOLUTION_REL * scale;
    let lam = 0.5 * to_f64(linalg::max_sym_eigenvalue(p1)) + to_f64(linalg::max_sym_eigenvalue(&seg.params.p2));
    Some(lam * d * d * (xb.len() + tb.len()) as f64)
}

/// Checks monotonicity and decay of the composite storage per segment.
pub fn lyapunov_monitor<T: Scalar>(
    trace: &Trace<T>,
    p1: &DMatrix<T>,
    tau1: Option<T>,
) -> Result<EnvelopeReport, ClosedLoopError> {
    if trace.is_empty() {
        return Err(ClosedLoopError::Settings("empty trace".into()));
    }
    let s: Vec<f64> = composite_storage(trace, p1)?.into_iter().map(to_f64).collect();
    let mut segments = Vec::new();
    for seg in &trace.segments {
        let tau = match tau1 {
            Some(t1) => Some(to_f64(evaluate_margin(&seg.params, seg.params.kappa1, t1)?.tau)),
            None => seg.margin.map(|m| to_f64(m.tau)),
        };
        // The first sample of a later segment was taken after one step.
        let rows = seg.rows.clone();
        let vals: Vec<(f64, f64)> = rows.clone().map(|k| (to_f64(trace.times[k]), s[k])).collect();
        let max_s = vals.iter().map(|v| v.1).fold(0.0, f64::max);
        let max_increase = vals.windows(2).map(|w| w[1].1 - w[0].1).fold(0.0, f64::max);
        let floor = FIT_FLOOR * max_s;
        let pts: Vec<(f64, f64)> = vals
            .iter()
            .filter(|(_, v)| *v > floor && *v > 0.0)
            .map(|(t, v)| (*t, v.ln()))
            .collect();
        let fitted_rate = if pts.len() >= 3 {
            let nf = pts.len() as f64;
            let mt = pts.iter().map(|p| p.0).sum::<f64>() / nf;
            let ml = pts.iter().map(|p| p.1).sum::<f64>() / nf;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
            if sxx > 0.0 {
                Some(-sxy / sxx)
            } else {
                None
            }
        } else {
            None
        };
        segments.push(SegmentEnvelope {
            max_s,
            max_increase,
            fitted_rate,
            tau,
            samples_used: pts.len(),
            surrogate: seg.surrogate,
            stationary: resolution_floor(seg, p1).is_some_and(|f| max_s <= f),
        });
    }
    let mut gammas = Vec::new();
    for ev in &trace.events {
        let before = storage_value(&trace.segments[ev.segment_before], p1, &ev.x, &ev.theta);
        let after = storage_value(&trace.segments[ev.segment_after], p1, &ev.x, &ev.theta);
        if let (Some(b), Some(a)) = (before, after) {
            let (b, a) = (to_f64(b), to_f64(a));
            gammas.push(if b > 0.0 {
                (a / b).max(1.0)
            } else if a > 0.0 {
                f64::INFINITY
            } else {
                1.0
            });
        }
    }
    Ok(EnvelopeReport { segments, gammas })
}

/// Controller state at the oracle point, or zeros.
pub fn oracle_theta<T: Scalar>(program: &SteadyStateProgram<T>) -> Result<DVector<T>, ClosedLoopError> {
    Ok(solve_oracle(program)?.theta())
}

/// `(ξ, ν)` of a stacked controller state.
pub fn split<T: Scalar>(program: &SteadyStateProgram<T>, theta: &DVector<T>) -> KktPoint<T> {
    program.split_theta(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augpdgd::controller_rhs;
    use crate::netplant::{passivity_certificate, plant_rhs, InterconnectionMap};
    use crate::optprogram::{assemble_program, ConstraintTemplate, LayoutKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn scalar_setup() -> (CompactPlant<f64>, SteadyStateProgram<f64>, ControllerParams<f64>) {
        let s = Subsystem::new(
            1,
            m(1, 1, &[-1.0]),
            m(1, 1, &[1.0]),
            m(1, 1, &[1.0]),
            DMatrix::zeros(0, 1),
            DMatrix::zeros(1, 0),
            DVector::zeros(1),
        )
        .unwrap();
        let plant = assemble_plant(vec![s], InterconnectionMap::new()).unwrap();
        let cost = Cost::quadratic(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let t = ConstraintTemplate::empty(plant.subsystems[0].dims());
        let prog = assemble_program(&plant, &[t], cost, LayoutKind::StateInput).unwrap();
        let (k1, _) = prog.spectral_bounds().unwrap();
        let eta = auto_eta(1.0, k1, 0.5);
        let params = controller_gains(&prog, eta, 1.0, 0.5, None).unwrap();
        (plant, prog, params)
    }

    #[test]
    fn coupling_examples() {
        let (_, _, params) = scalar_setup();
        let th = DVector::from_vec(vec![0.7, 0.2, 0.0]);
        let (u, v) = coupling(&params, &th, &DVector::from_vec(vec![0.7])).unwrap();
        assert_eq!(u[0], 0.2);
        assert_eq!(v[0], 0.0);
        let (u, v) = coupling(&params, &DVector::zeros(3), &DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!((u[0], v[0]), (0.0, -1.0));
    }

    #[test]
    fn margin_examples() {
        let (_, _, params) = scalar_setup();
        assert!((beta(&params).unwrap() - 1.0).abs() < 1e-14);
        // η κ1 ε min(η,1) vs β = 1 with κ1 = 1, ε = 0.5.
        for (eta, ok) in [(1.5, false), (2.5, true)] {
            let mut p = params.clone();
            p.eta = eta;
            p.epsilon = 0.5;
            let mg = evaluate_margin(&p, 1.0, 1.0).unwrap();
            assert_eq!(mg.eta_condition_ok, ok);
            assert_eq!(stability_margin(&p, 1.0, 1.0).is_ok(), ok);
        }
        assert_eq!(minimal_eta(1.0, 1.0, 0.5), 2.0);
        assert!((minimal_eta::<f64>(1.0, 8.0, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tau_is_half_min() {
        let (_, _, mut params) = scalar_setup();
        // η=3, κ1=1, ε=0.5, β=1, c=50 gives τ2e = (3 - 2)/100 = 0.01.
        params.eta = 3.0;
        params.epsilon = 0.5;
        params.c = 50.0;
        let mg = evaluate_margin(&params, 1.0, 1.0).unwrap();
        assert!((mg.tau2e - 0.01).abs() < 1e-15);
        assert!((mg.tau - 0.005).abs() < 1e-15);
    }

    #[test]
    fn dwell_examples() {
        assert_eq!(dwell_time(1.0, 0.3).unwrap(), 0.0);
        assert!((dwell_time::<f64>(std::f64::consts::E.powi(2), 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((dwell_time::<f64>(2.0, 0.005).unwrap() - 69.3147).abs() < 1e-4);
        assert!(dwell_time(0.5, 1.0).is_err());
        assert!(dwell_time(2.0, 0.0).is_err());
    }

    #[test]
    fn pure_decay_rk4() {
        let z = rk4_integrate(|z: &DVector<f64>, o: &mut DVector<f64>| o.copy_from(&(-z)), &DVector::from_vec(vec![1.0]), 1e-3, 1000);
        assert!((z[0] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn field_matches_componentwise_rhs() {
        let (plant, prog, params) = scalar_setup();
        let mut field = ClosedLoopField::new(&plant, &params, &prog).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let z = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let mut out = DVector::zeros(4);
            field.eval(&z, &mut out);
            let x = z.rows(0, 1).into_owned();
            let th = z.rows(1, 3).into_owned();
            let (u, v) = coupling(&params, &th, &(&plant.c * &x)).unwrap();
            let xd = plant_rhs(&plant, &x, &u).unwrap();
            let td = controller_rhs(&params, &prog, &prog.split_theta(&th), &v).unwrap();
            assert!((out[0] - xd[0]).abs() < 1e-12);
            assert!(linalg::max_abs_vec(&(out.rows(1, 3).into_owned() - td)) < 1e-12);
        }
    }

    #[test]
    fn scalar_benchmark_converges() {
        let (plant, prog, params) = scalar_setup();
        let dt = 0.05;
        let opts = SimOptions {
            record_every: 100,
            storage: Some(DMatrix::identity(1, 1)),
            tau1: Some(1.0),
            ..SimOptions::new(dt, 200.0)
        };
        let tr = simulate(&plant, &params, &prog, &[], &DVector::zeros(1), &DVector::zeros(3), &opts).unwrap();
        assert!((tr.final_x().unwrap()[0] - 0.5).abs() < 1e-4);
        assert_eq!(tr.len(), (200.0f64 / (dt * 100.0)).floor() as usize + 1);
        let env = lyapunov_monitor(&tr, &DMatrix::identity(1, 1), Some(1.0)).unwrap();
        let seg = &env.segments[0];
        assert!(seg.monotone(1e-9), "{seg:?}");
        assert!(seg.fitted_rate.unwrap() >= seg.tau.unwrap());
        assert!(!seg.stationary && seg.holds(1e-9));
        assert_eq!(env.gamma_f(), 1.0);
    }

    #[test]
    fn equilibrium_start_stays_put() {
        let (plant, prog, params) = scalar_setup();
        let th = oracle_theta(&prog).unwrap();
        let x0 = th.rows(0, 1).into_owned();
        let opts = SimOptions {
            storage: Some(DMatrix::identity(1, 1)),
            ..SimOptions::new(0.01, 5.0)
        };
        let tr = simulate(&plant, &params, &prog, &[], &x0, &th, &opts).unwrap();
        assert!((tr.final_x().unwrap() - &x0).amax() <= 1e-9);
        assert!(tr.s.iter().all(|s| s.abs() < 1e-20));
        let env = lyapunov_monitor(&tr, &DMatrix::identity(1, 1), Some(1.0)).unwrap();
        assert!(env.segments[0].stationary && env.segments[0].holds(1e-9));
    }

    #[test]
    fn rk4_order() {
        let (plant, prog, params) = scalar_setup();
        let run = |dt: f64| {
            let opts = SimOptions::new(dt, 4.0);
            simulate(&plant, &params, &prog, &[], &DVector::zeros(1), &DVector::zeros(3), &opts)
                .unwrap()
                .final_x()
                .unwrap()[0]
        };
        let reference = run(0.0025);
        let e1 = (run(0.04) - reference).abs();
        let e2 = (run(0.02) - reference).abs();
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn stiffness_guard_and_events_validated() {
        let (plant, prog, params) = scalar_setup();
        let x0 = DVector::zeros(1);
        let th = DVector::zeros(3);
        assert!(matches!(
            simulate(&plant, &params, &prog, &[], &x0, &th, &SimOptions::new(1.0, 10.0)),
            Err(ClosedLoopError::TooStiff { .. })
        ));
        let late = FaultEvent {
            time: 20.0,
            kind: FaultKind::LimitChange { row: 0, value: 1.0 },
        };
        assert!(matches!(
            simulate(&plant, &params, &prog, &[late], &x0, &th, &SimOptions::new(0.01, 10.0)),
            Err(ClosedLoopError::EventOutOfRange { .. })
        ));
    }

    #[test]
    fn divergence_reported() {
        let (plant, prog, mut params) = scalar_setup();
        params.bpd *= -1e6;
        let opts = SimOptions::new(0.05, 50.0);
        let r = simulate(&plant, &params, &prog, &[], &DVector::zeros(1), &DVector::from_vec(vec![1.0, 0.0, 0.0]), &opts);
        assert!(matches!(r, Err(ClosedLoopError::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn limit_fault_moves_equilibrium() {
        let s = Subsystem::new(
            1,
            m(1, 1, &[-1.0]),
            m(1, 1, &[1.0]),
            m(1, 1, &[1.0]),
            DMatrix::zeros(0, 1),
            DMatrix::zeros(1, 0),
            DVector::zeros(1),
        )
        .unwrap();
        let plant = assemble_plant(vec![s], InterconnectionMap::new()).unwrap();
        let mut t = ConstraintTemplate::empty(plant.subsystems[0].dims());
        t.ineq_u = m(1, 1, &[1.0]);
        t.h_u = DVector::from_vec(vec![10.0]);
        let cost = Cost::quadratic(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let prog = assemble_program(&plant, &[t], cost, LayoutKind::StateInput).unwrap();
        let (k1, _) = prog.spectral_bounds().unwrap();
        let params = controller_gains(&prog, auto_eta(1.0, k1, 0.5), 1.0, 0.5, None).unwrap();
        let cert = passivity_certificate(&plant, 1.0).unwrap();
        let th0 = oracle_theta(&prog).unwrap();
        let x0 = th0.rows(0, 1).into_owned();
        let sched = [FaultEvent {
            time: 5.0,
            kind: FaultKind::LimitChange { row: 0, value: 0.2 },
        }];
        let opts = SimOptions {
            record_every: 10,
            storage: Some(cert.p1.clone()),
            tau1: Some(1.0),
            ..SimOptions::new(0.01, 400.0)
        };
        let tr = simulate(&plant, &params, &prog, &sched, &x0, &th0, &opts).unwrap();
        assert_eq!(tr.segments.len(), 2);
        assert!((tr.final_x().unwrap()[0] - 0.2).abs() < 1e-4);
        let env = lyapunov_monitor(&tr, &cert.p1, Some(1.0)).unwrap();
        assert_eq!(env.gammas.len(), 1);
        assert!(env.gammas[0].is_infinite() || env.gammas[0] > 1.0);
        assert!(env.segments[1].monotone(1e-9));
    }

    #[test]
    fn csv_layout() {
        let (plant, prog, params) = scalar_setup();
        let tr = simulate(
            &plant,
            &params,
            &prog,
            &[],
            &DVector::zeros(1),
            &DVector::zeros(3),
            &SimOptions {
                record_every: 10,
                ..SimOptions::new(0.05, 1.0)
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, 1, 3, 1, 1).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,x0,theta0,theta1,theta2,u0,y0,S,kkt_stationarity,kkt_eq,kkt_ineq,kkt_comp"
        );
        assert_eq!(lines.count(), 3);
    }
}
