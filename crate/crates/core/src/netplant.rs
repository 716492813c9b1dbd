//! Networked LTI plants: subsystems, power-preserving interconnection and
//! the assembled compact plant with its passivity certificate.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::scalar::{lit, Scalar};

/// Strict Hurwitz tolerance on the spectral abscissa.
pub const HURWITZ_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("subsystem {index}: {what}")]
    Dimension { index: usize, what: String },
    #[error("subsystem {index}: A is not Hurwitz (spectral abscissa {abscissa:e})")]
    NotHurwitz { index: usize, abscissa: f64 },
    #[error("subsystem indices must be 1..=N without gaps, got {0:?}")]
    BadIndexing(Vec<usize>),
    #[error("interconnection block ({i},{j}) references a missing subsystem")]
    MissingSubsystem { i: usize, j: usize },
    #[error("interconnection block ({i},{j}) has shape {got:?}, expected {expected:?}")]
    BlockShape {
        i: usize,
        j: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("interconnection is not power-preserving: {0:?}")]
    NotPowerPreserving(Vec<Violation>),
    #[error("tau1 = {tau1:e} outside (0, {bound:e}); spectral bound of Ap is {abscissa:e}")]
    Tau1OutOfRange { tau1: f64, bound: f64, abscissa: f64 },
    #[error("storage matrix rejected: {0}")]
    Storage(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// One LTI subsystem `ẋ = A x + B u + d + G w`, `y = C x`, `z = E x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem<T: Scalar> {
    /// 1-based position in the network.
    pub index: usize,
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: DMatrix<T>,
    pub e: DMatrix<T>,
    pub g: DMatrix<T>,
    pub d: DVector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsystemDims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Interconnection output dimension (rows of `E`).
    pub s: usize,
    /// Interconnection input dimension (columns of `G`).
    pub q: usize,
}

impl<T: Scalar> Subsystem<T> {
    /// Validates shapes, `m = p` and the Hurwitz property of `A`.
    pub fn new(
        index: usize,
        a: DMatrix<T>,
        b: DMatrix<T>,
        c: DMatrix<T>,
        e: DMatrix<T>,
        g: DMatrix<T>,
        d: DVector<T>,
    ) -> Result<Self, NetError> {
        let s = Self { index, a, b, c, e, g, d };
        s.check()?;
        Ok(s)
    }

    pub fn dims(&self) -> SubsystemDims {
        SubsystemDims {
            n: self.a.nrows(),
            m: self.b.ncols(),
            p: self.c.nrows(),
            s: self.e.nrows(),
            q: self.g.ncols(),
        }
    }

    fn check(&self) -> Result<(), NetError> {
        let n = self.a.nrows();
        let err = |what: String| NetError::Dimension {
            index: self.index,
            what,
        };
        if self.a.ncols() != n {
            return Err(err(format!("A is {}x{}", n, self.a.ncols())));
        }
        if self.b.nrows() != n {
            return Err(err(format!("B has {} rows, expected {n}", self.b.nrows())));
        }
        if self.c.ncols() != n {
            return Err(err(format!("C has {} columns, expected {n}", self.c.ncols())));
        }
        if self.e.ncols() != n {
            return Err(err(format!("E has {} columns, expected {n}", self.e.ncols())));
        }
        if self.g.nrows() != n {
            return Err(err(format!("G has {} rows, expected {n}", self.g.nrows())));
        }
        if self.d.len() != n {
            return Err(err(format!("d has length {}, expected {n}", self.d.len())));
        }
        if self.b.ncols() != self.c.nrows() {
            return Err(err(format!(
                "input dimension {} differs from output dimension {}",
                self.b.ncols(),
                self.c.nrows()
            )));
        }
        let spec = linalg::spectrum(&self.a)?;
        if !spec.is_empty() {
            let ab = linalg::spectral_abscissa(&spec);
            if ab >= -lit::<T>(HURWITZ_TOL) {
                return Err(NetError::NotHurwitz {
                    index: self.index,
                    abscissa: crate::scalar::to_f64(ab),
                });
            }
        }
        Ok(())
    }
}

/// Sparse block map `Ω`: block `(i, j)` routes `z_j` into `w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterconnectionMap<T: Scalar> {
    blocks: BTreeMap<(usize, usize), DMatrix<T>>,
}

impl<T: Scalar> Default for InterconnectionMap<T> {
    fn default() -> Self {
        Self {
            blocks: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> InterconnectionMap<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts block `(i, j)`; all-zero blocks are dropped.
    pub fn insert(&mut self, i: usize, j: usize, block: DMatrix<T>) {
        if block.iter().all(|v| *v == T::zero()) {
            self.blocks.remove(&(i, j));
        } else {
            self.blocks.insert((i, j), block);
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&DMatrix<T>> {
        self.blocks.get(&(i, j))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &DMatrix<T>)> {
        self.blocks.iter()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub i: usize,
    pub j: usize,
    /// `max |Ω_ij + Ω_jiᵀ|` over the block pair.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub pairs_checked: usize,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Relative tolerance of the skew-symmetry check.
pub const SKEW_TOL: f64 = 1e-12;

/// Checks `Ω_ij + Ω_jiᵀ = 0` for every pair, including diagonal blocks.
///
/// A missing partner block counts as zero.
pub fn validate_interconnection<T: Scalar>(map: &InterconnectionMap<T>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = std::collections::BTreeSet::new();
    for (&(i, j), blk) in map.iter() {
        let key = (i.min(j), i.max(j));
        if !seen.insert(key) {
            continue;
        }
        report.pairs_checked += 1;
        let sum = match map.get(j, i) {
            Some(partner) if partner.shape() == (blk.ncols(), blk.nrows()) => blk + partner.transpose(),
            Some(_) => {
                report.violations.push(Violation {
                    i: key.0,
                    j: key.1,
                    magnitude: f64::INFINITY,
                });
                continue;
            }
            None => blk.clone(),
        };
        let mag = crate::scalar::to_f64(linalg::max_abs(&sum));
        let scale = crate::scalar::to_f64(linalg::max_abs(blk)).max(1.0);
        if mag > SKEW_TOL * scale {
            report.violations.push(Violation {
                i: key.0,
                j: key.1,
                magnitude: mag,
            });
        }
    }
    report
}

/// Block-diagonal stack of the subsystems closed by `Ω`.
#[derive(Debug, Clone)]
pub struct CompactPlant<T: Scalar> {
    pub subsystems: Vec<Subsystem<T>>,
    pub map: InterconnectionMap<T>,
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: DMatrix<T>,
    pub e: DMatrix<T>,
    pub g: DMatrix<T>,
    pub omega: DMatrix<T>,
    /// `A + G Ω E`.
    pub ap: DMatrix<T>,
    pub d: DVector<T>,
    pub spectrum: Vec<Complex<T>>,
}

impl<T: Scalar> CompactPlant<T> {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn spectral_abscissa(&self) -> T {
        linalg::spectral_abscissa(&self.spectrum)
    }

    pub fn is_hurwitz(&self) -> bool {
        self.spectrum.is_empty() || self.spectral_abscissa() < -lit::<T>(HURWITZ_TOL)
    }

    /// Supremum of admissible `tau1`: `2 min_i(-Re λ_i(Ap))`.
    pub fn tau1_bound(&self) -> T {
        -self.spectral_abscissa() * lit(2.0)
    }

    /// State offsets of each subsystem in the stacked vector.
    pub fn state_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.subsystems.len());
        let mut k = 0;
        for s in &self.subsystems {
            off.push(k);
            k += s.dims().n;
        }
        off
    }

    /// Unique equilibrium `-Ap⁻¹(B u + d)` for a constant input.
    pub fn equilibrium(&self, u: &DVector<T>) -> Option<DVector<T>> {
        let rhs = -(&self.b * u + &self.d);
        linalg::solve_refined(&self.ap, &rhs)
    }
}

/// Stacks subsystems and closes the interconnection.
pub fn assemble_plant<T: Scalar>(
    mut subsystems: Vec<Subsystem<T>>,
    map: InterconnectionMap<T>,
) -> Result<CompactPlant<T>, NetError> {
    subsystems.sort_by_key(|s| s.index);
    let idx: Vec<usize> = subsystems.iter().map(|s| s.index).collect();
    if idx.iter().enumerate().any(|(k, &i)| i != k + 1) {
        return Err(NetError::BadIndexing(idx));
    }
    for s in &subsystems {
        s.check()?;
    }
    let nsub = subsystems.len();
    let mut w_off = vec![0usize; nsub + 1];
    let mut z_off = vec![0usize; nsub + 1];
    for (k, s) in subsystems.iter().enumerate() {
        let dm = s.dims();
        w_off[k + 1] = w_off[k] + dm.q;
        z_off[k + 1] = z_off[k] + dm.s;
    }
    for (&(i, j), blk) in map.iter() {
        if i == 0 || j == 0 || i > nsub || j > nsub {
            return Err(NetError::MissingSubsystem { i, j });
        }
        let expected = (subsystems[i - 1].dims().q, subsystems[j - 1].dims().s);
        if blk.shape() != expected {
            return Err(NetError::BlockShape {
                i,
                j,
                got: blk.shape(),
                expected,
            });
        }
    }
    let report = validate_interconnection(&map);
    if !report.passed() {
        return Err(NetError::NotPowerPreserving(report.violations));
    }

    let a = linalg::block_diag(&subsystems.iter().map(|s| &s.a).collect::<Vec<_>>());
    let b = linalg::block_diag(&subsystems.iter().map(|s| &s.b).collect::<Vec<_>>());
    let c = linalg::block_diag(&subsystems.iter().map(|s| &s.c).collect::<Vec<_>>());
    let e = linalg::block_diag(&subsystems.iter().map(|s| &s.e).collect::<Vec<_>>());
    let g = linalg::block_diag(&subsystems.iter().map(|s| &s.g).collect::<Vec<_>>());
    let d = linalg::vcat(&subsystems.iter().map(|s| &s.d).collect::<Vec<_>>());
    let mut omega = DMatrix::zeros(w_off[nsub], z_off[nsub]);
    for (&(i, j), blk) in map.iter() {
        omega
            .view_mut((w_off[i - 1], z_off[j - 1]), blk.shape())
            .copy_from(blk);
    }
    let ap = &a + &g * &omega * &e;
    let spectrum = linalg::spectrum(&ap)?;
    let plant = CompactPlant {
        subsystems,
        map,
        a,
        b,
        c,
        e,
        g,
        omega,
        ap,
        d,
        spectrum,
    };
    if !plant.is_hurwitz() {
        warn!(
            "assembled plant is not Hurwitz: spectral abscissa {:e}",
            crate::scalar::to_f64(plant.spectral_abscissa())
        );
    }
    Ok(plant)
}

/// `ẋ = Ap x + B u + d`.
pub fn plant_rhs<T: Scalar>(
    plant: &CompactPlant<T>,
    x: &DVector<T>,
    u: &DVector<T>,
) -> Result<DVector<T>, NetError> {
    if x.len() != plant.n() || u.len() != plant.m() {
        return Err(NetError::Dimension {
            index: 0,
            what: format!(
                "x has length {}, u has length {}; expected {} and {}",
                x.len(),
                u.len(),
                plant.n(),
                plant.m()
            ),
        });
    }
    Ok(&plant.ap * x + &plant.b * u + &plant.d)
}

/// Quadratic storage `½ xᵀ P1 x` certifying `ApᵀP1 + P1Ap ⪯ -τ1 P1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PassivityCertificate<T: Scalar> {
    pub p1: DMatrix<T>,
    pub tau1: T,
    /// Largest eigenvalue of `ApᵀP1 + P1Ap + τ1 P1`.
    pub slack_max_eig: T,
    /// `max |P1 B - Cᵀ|`; zero when the output is the passive one.
    pub output_mismatch: T,
}

impl<T: Scalar> PassivityCertificate<T> {
    /// True when the supply rate `uᵀy` is certified (`P1 B = Cᵀ`).
    pub fn output_passive(&self, tol: T) -> bool {
        self.output_mismatch <= tol
    }
}

fn certificate_from<T: Scalar>(plant: &CompactPlant<T>, p1: DMatrix<T>, tau1: T) -> PassivityCertificate<T> {
    let slack = plant.ap.transpose() * &p1 + &p1 * &plant.ap + &p1 * tau1;
    let slack_max_eig = linalg::max_sym_eigenvalue(&slack);
    let output_mismatch = linalg::max_abs(&(&p1 * &plant.b - plant.c.transpose()));
    PassivityCertificate {
        p1,
        tau1,
        slack_max_eig,
        output_mismatch,
    }
}

fn check_tau1<T: Scalar>(plant: &CompactPlant<T>, tau1: T) -> Result<(), NetError> {
    let bound = plant.tau1_bound();
    if !(tau1 > T::zero() && tau1 < bound) {
        return Err(NetError::Tau1OutOfRange {
            tau1: crate::scalar::to_f64(tau1),
            bound: crate::scalar::to_f64(bound),
            abscissa: crate::scalar::to_f64(plant.spectral_abscissa()),
        });
    }
    Ok(())
}

/// Solves `(Ap + τ1/2 I)ᵀ P1 + P1 (Ap + τ1/2 I) = -I`.
pub fn passivity_certificate<T: Scalar>(
    plant: &CompactPlant<T>,
    tau1: T,
) -> Result<PassivityCertificate<T>, NetError> {
    check_tau1(plant, tau1)?;
    let n = plant.n();
    let shifted = &plant.ap + DMatrix::<T>::identity(n, n) * (tau1 * lit(0.5));
    let p1 = linalg::solve_lyapunov(&shifted, &(-DMatrix::<T>::identity(n, n)))?;
    Ok(certificate_from(plant, p1, tau1))
}

/// Verifies a caller-supplied storage matrix against the dissipation inequality.
pub fn verify_storage<T: Scalar>(
    plant: &CompactPlant<T>,
    p1: DMatrix<T>,
    tau1: T,
) -> Result<PassivityCertificate<T>, NetError> {
    check_tau1(plant, tau1)?;
    let n = plant.n();
    if p1.shape() != (n, n) {
        return Err(NetError::Storage(format!("expected {n}x{n}, got {:?}", p1.shape())));
    }
    let asym = linalg::max_abs(&(&p1 - p1.transpose()));
    if asym > lit::<T>(1e-12) * linalg::max_abs(&p1).max(T::one()) {
        return Err(NetError::Storage("matrix is not symmetric".into()));
    }
    if linalg::min_sym_eigenvalue(&p1) <= T::zero() {
        return Err(NetError::Storage("matrix is not positive definite".into()));
    }
    let cert = certificate_from(plant, linalg::symmetrize(&p1), tau1);
    let scale = linalg::max_abs(&(plant.ap.transpose() * &cert.p1)).max(T::one());
    if cert.slack_max_eig > lit::<T>(1e-8) * scale {
        return Err(NetError::Storage(format!(
            "dissipation slack has eigenvalue {:e} > 0",
            crate::scalar::to_f64(cert.slack_max_eig)
        )));
    }
    Ok(cert)
}
