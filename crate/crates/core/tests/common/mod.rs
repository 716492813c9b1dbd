//! Random well-conditioned passive networks with box limits on the inputs.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pdftc::augpdgd::controller_gains;
use pdftc::closedloop::{auto_eta, beta, minimal_eta};
use pdftc::netplant::{assemble_plant, verify_storage, InterconnectionMap, Subsystem};
use pdftc::optprogram::{assemble_program, solve_oracle, ConstraintTemplate, Cost, LayoutKind};
use pdftc::{ControllerParams, Plant, Program};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EPSILON: f64 = 0.5;
/// Multiple of the minimal step size gain used by the random suite.
pub const ETA_MULT: f64 = 8.0;
/// Largest accepted `κ2/κ1` of the stacked constraint matrix.
pub const MAX_KAPPA_RATIO: f64 = 2.5;

pub struct Case {
    pub plant: Plant,
    pub program: Program,
    pub storage: DMatrix<f64>,
    pub tau1: f64,
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
}

fn skew(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let s = uniform(rng, n, n, -1.0, 1.0);
    (&s - s.transpose()) * 0.5
}

/// Size classes `(n_i, m_i)` per subsystem, all with `Σn ≤ 6` and `Σm ≤ 3`.
pub const SIZE_CLASSES: [&[(usize, usize)]; 10] = [
    &[(1, 1)],
    &[(2, 2)],
    &[(3, 3)],
    &[(4, 2)],
    &[(5, 3)],
    &[(6, 3)],
    &[(1, 1), (1, 1)],
    &[(2, 1), (2, 2)],
    &[(3, 1), (3, 2)],
    &[(2, 2), (1, 1)],
];

/// Draws one case; `None` when the draw is rejected.
pub fn draw(rng: &mut ChaCha8Rng, dims: &[(usize, usize)]) -> Option<Case> {
    let mut subs = Vec::new();
    let mut s_min = f64::INFINITY;
    for (k, &(n, m)) in dims.iter().enumerate() {
        let s = rng.gen_range(0.8..1.2);
        s_min = s_min.min(s);
        let a = skew(rng, n) * 0.5 - DMatrix::identity(n, n) * s;
        let q = uniform(rng, n, m, -1.0, 1.0).qr().q();
        let gains = DVector::from_fn(m, |_, _| rng.gen_range(0.1..0.6));
        let b = q * DMatrix::from_diagonal(&gains);
        let c = b.transpose();
        let e = uniform(rng, 1, n, -0.5, 0.5);
        let g = e.transpose();
        let d = uniform(rng, n, 1, -1.0, 1.0).column(0).into_owned();
        subs.push(Subsystem::new(k + 1, a, b, c, e, g, d).ok()?);
    }
    let mut map = InterconnectionMap::new();
    if subs.len() == 2 {
        let w = rng.gen_range(0.2..1.0);
        map.insert(1, 2, DMatrix::from_element(1, 1, w));
        map.insert(2, 1, DMatrix::from_element(1, 1, -w));
    }
    let plant = assemble_plant(subs, map).ok()?;
    let tau1 = 1.8 * s_min;
    let storage = DMatrix::identity(plant.n(), plant.n());
    verify_storage(&plant, storage.clone(), tau1).ok()?;

    let m = plant.m();
    let nx = plant.n() + 2 * plant.p();
    let diag = DVector::from_fn(nx, |_, _| rng.gen_range(1.0..1.5));
    let target = uniform(rng, nx, 1, -2.0, 2.0).column(0).into_owned();
    let base = assemble_program(
        &plant,
        &plant.subsystems.iter().map(|s| ConstraintTemplate::empty(s.dims())).collect::<Vec<_>>(),
        Cost::quadratic(DMatrix::from_diagonal(&diag), target.clone()).ok()?,
        LayoutKind::Full,
    )
    .ok()?;
    let free = solve_oracle(&base).ok()?;
    let u_free = free.xi.rows(nx - m, m).into_owned();

    // Box rows on the inputs, roughly half of them binding.
    let mut templates = Vec::new();
    let mut off = 0;
    for s in &plant.subsystems {
        let d = s.dims();
        let mut t = ConstraintTemplate::empty(d);
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for j in 0..d.m {
            if rng.gen_bool(0.25) {
                continue;
            }
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let shift = if rng.gen_bool(0.5) { -0.3 } else { 0.3 };
            let mut r = DMatrix::zeros(1, d.m);
            r[(0, j)] = sign;
            rows.push(r);
            rhs.push(sign * u_free[off + j] + shift);
        }
        t.ineq_u = DMatrix::from_fn(rows.len(), d.m, |i, j| rows[i][(0, j)]);
        t.h_u = DVector::from_vec(rhs);
        off += d.m;
        templates.push(t);
    }
    let mut program = assemble_program(
        &plant,
        &templates,
        Cost::quadratic(DMatrix::from_diagonal(&diag), target.clone()).ok()?,
        LayoutKind::Full,
    )
    .ok()?;
    let k = plant.n() + plant.p();
    let norms = DVector::from_fn(k, |i, _| 1.0 / program.r_eq.row(i).norm());
    program.plant_row_scale = Some(norms);
    program.restack_plant_rows(&plant).ok()?;
    let (k1, k2) = program.spectral_bounds().ok()?;
    if k2 / k1 > MAX_KAPPA_RATIO {
        return None;
    }
    let eta = ETA_MULT * minimal_eta(1.0, k1, EPSILON);
    let ell = (eta * k2).sqrt();
    program.cost = Cost::quadratic(DMatrix::from_diagonal(&(diag * ell)), target).ok()?;
    Some(Case {
        plant,
        program,
        storage,
        tau1,
    })
}

/// Next accepted case of size class `class % SIZE_CLASSES.len()`.
pub fn random_case(rng: &mut ChaCha8Rng, class: usize) -> Case {
    let dims = SIZE_CLASSES[class % SIZE_CLASSES.len()];
    loop {
        if let Some(c) = draw(rng, dims) {
            return c;
        }
    }
}

/// Gains for a case: `η` a fixed multiple of its minimum, `ρ` balancing the
/// metric bound.
pub fn tuned_params(program: &Program) -> ControllerParams {
    let (k1, k2) = program.spectral_bounds().unwrap();
    let probe = controller_gains(program, 1.0, 1.0, EPSILON, None).unwrap();
    let b = beta(&probe).unwrap();
    let eta = ETA_MULT * auto_eta(b, k1, EPSILON) / pdftc::closedloop::ETA_SAFETY;
    let rho = (eta / k2).sqrt();
    controller_gains(program, eta, rho, EPSILON, None).unwrap()
}
