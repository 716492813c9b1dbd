//! Clustered DC microgrids: topology, per-cluster state-space models,
//! tie-line coupling, the steady-state program and fault helpers.
//!
//! Each cluster `i` has state `x = (V_f, I_a)` (following-bus voltages and
//! owned line currents), input `u = (I_f, V_s)`, interconnection input
//! `w = (I_ab, V_fb)` and output `z = (-(B_fa^ab)ᵀ V_f, B_fb^a I_a)`.
//! Lines are oriented `from → to` with incidence `+1` at `from`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closedloop::{FaultEvent, FaultKind};
use crate::linalg;
use crate::netplant::{assemble_plant, verify_storage, CompactPlant, InterconnectionMap, NetError, Subsystem};
use crate::optprogram::{Cost, Layout, ProgramError, SteadyStateProgram};
use crate::scalar::{lit, Scalar};

/// Fraction of the exact physical decay rate used as `τ1`.
pub const TAU1_FRACTION: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicrogridError {
    #[error("duplicate {what} id {id}")]
    DuplicateId { what: &'static str, id: usize },
    #[error("line {line} references unknown bus {bus}")]
    UnknownBus { line: usize, bus: usize },
    #[error("unknown bus {0}")]
    NoSuchBus(usize),
    #[error("cluster {0} has no voltage-setting bus")]
    NoSettingBus(usize),
    #[error("line {0} connects two voltage-setting buses")]
    SettingToSetting(usize),
    #[error("line {0} is a self-loop")]
    SelfLoop(usize),
    #[error("line {line}: {why}")]
    Ownership { line: usize, why: String },
    #[error("bus {bus} lacks parameter {field}")]
    MissingParameter { bus: usize, field: &'static str },
    #[error("{what} {id}: parameter {field} out of range")]
    BadParameter { what: &'static str, id: usize, field: &'static str },
    #[error("foreign bus {bus} is reached by lines {first} and {second} of the same cluster; tie-line stacking is ambiguous")]
    InconsistentStacking { bus: usize, first: usize, second: usize },
    #[error("missing target for bus {0}")]
    MissingTarget(usize),
    #[error("bus {0} has no such limit row")]
    NoLimitRow(usize),
    #[error("plant equilibrium for the targets is not unique")]
    NoEquilibrium,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Setting,
    Following,
}

/// Bus data in SI units. Following buses need `c_f` (F) and `psi_load` (S);
/// `delta_load` (A) defaults to zero. Absent limits mean no constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: usize,
    pub cluster: usize,
    pub kind: BusKind,
    #[serde(default)]
    pub c_f: Option<f64>,
    #[serde(default)]
    pub psi_load: Option<f64>,
    #[serde(default)]
    pub delta_load: Option<f64>,
    #[serde(default)]
    pub i_f_max: Option<f64>,
    #[serde(default)]
    pub v_min: Option<f64>,
}

impl Bus {
    pub fn setting(id: usize, cluster: usize, v_min: Option<f64>) -> Self {
        Self {
            id,
            cluster,
            kind: BusKind::Setting,
            c_f: None,
            psi_load: None,
            delta_load: None,
            i_f_max: None,
            v_min,
        }
    }

    pub fn following(id: usize, cluster: usize, c_f: f64, psi_load: f64, delta_load: f64) -> Self {
        Self {
            id,
            cluster,
            kind: BusKind::Following,
            c_f: Some(c_f),
            psi_load: Some(psi_load),
            delta_load: Some(delta_load),
            i_f_max: None,
            v_min: None,
        }
    }
}

/// Resistive-inductive line `from_bus → to_bus` (Ω, H). Tie-lines between
/// two following buses must name their owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub l: f64,
    #[serde(default)]
    pub owner_cluster: Option<usize>,
}

impl Line {
    pub fn new(id: usize, from_bus: usize, to_bus: usize, r: f64, l: f64) -> Self {
        Self {
            id,
            from_bus,
            to_bus,
            r,
            l,
            owner_cluster: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    #[serde(default)]
    pub tie_lines: Vec<Line>,
}

impl Topology {
    pub fn bus(&self, id: usize) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn all_lines(&self) -> impl Iterator<Item = &Line> {
        self.lines.iter().chain(self.tie_lines.iter())
    }
}

/// Tie-line owned elsewhere that ends at one of this cluster's buses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IncidentLine {
    pub line: usize,
    pub owner: usize,
    pub local_bus: usize,
    pub sign: i8,
}

/// Foreign following bus reached by an owned line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteBus {
    pub bus: usize,
    pub cluster: usize,
    pub via_line: usize,
    pub sign: i8,
}

/// Matrices of one cluster in physical (capacitance/inductance weighted) form.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel<T: Scalar> {
    pub cluster: usize,
    /// 1-based subsystem index.
    pub index: usize,
    pub following: Vec<usize>,
    pub setting: Vec<usize>,
    pub owned_lines: Vec<usize>,
    pub incident: Vec<IncidentLine>,
    pub remote: Vec<RemoteBus>,
    pub b_sa: DMatrix<T>,
    pub b_fa: DMatrix<T>,
    pub b_fa_ab: DMatrix<T>,
    pub b_fb_a: DMatrix<T>,
    pub c_f: DVector<T>,
    pub y_load: DVector<T>,
    pub i_load: DVector<T>,
    pub l: DVector<T>,
    pub r: DVector<T>,
}

impl<T: Scalar> ClusterModel<T> {
    pub fn n(&self) -> usize {
        self.following.len() + self.owned_lines.len()
    }

    pub fn m(&self) -> usize {
        self.following.len() + self.setting.len()
    }

    /// Diagonal of the physical storage weight `blkdiag(C_f, L)`.
    pub fn storage_diag(&self) -> DVector<T> {
        linalg::vcat(&[&self.c_f, &self.l])
    }
}

fn check_positive(v: f64, what: &'static str, id: usize, field: &'static str) -> Result<(), MicrogridError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(MicrogridError::BadParameter { what, id, field })
    }
}

struct Resolved<'a> {
    buses: BTreeMap<usize, &'a Bus>,
    lines: BTreeMap<usize, (&'a Line, usize)>,
    clusters: Vec<usize>,
}

fn resolve(topo: &Topology) -> Result<Resolved<'_>, MicrogridError> {
    let mut buses = BTreeMap::new();
    for b in &topo.buses {
        if buses.insert(b.id, b).is_some() {
            return Err(MicrogridError::DuplicateId { what: "bus", id: b.id });
        }
        if b.kind == BusKind::Following {
            let c_f = b.c_f.ok_or(MicrogridError::MissingParameter { bus: b.id, field: "c_f" })?;
            check_positive(c_f, "bus", b.id, "c_f")?;
            let psi = b.psi_load.ok_or(MicrogridError::MissingParameter { bus: b.id, field: "psi_load" })?;
            if !(psi >= 0.0 && psi.is_finite()) {
                return Err(MicrogridError::BadParameter { what: "bus", id: b.id, field: "psi_load" });
            }
            if !b.delta_load.unwrap_or(0.0).is_finite() {
                return Err(MicrogridError::BadParameter { what: "bus", id: b.id, field: "delta_load" });
            }
        }
    }
    let clusters: Vec<usize> = buses.values().map(|b| b.cluster).collect::<BTreeSet<_>>().into_iter().collect();
    let mut lines = BTreeMap::new();
    for ln in topo.all_lines() {
        check_positive(ln.r, "line", ln.id, "r")?;
        check_positive(ln.l, "line", ln.id, "l")?;
        let from = *buses.get(&ln.from_bus).ok_or(MicrogridError::UnknownBus { line: ln.id, bus: ln.from_bus })?;
        let to = *buses.get(&ln.to_bus).ok_or(MicrogridError::UnknownBus { line: ln.id, bus: ln.to_bus })?;
        if from.id == to.id {
            return Err(MicrogridError::SelfLoop(ln.id));
        }
        let (fs, ts) = (from.kind == BusKind::Setting, to.kind == BusKind::Setting);
        if fs && ts {
            return Err(MicrogridError::SettingToSetting(ln.id));
        }
        let owner = if from.cluster == to.cluster {
            from.cluster
        } else if fs || ts {
            if fs {
                from.cluster
            } else {
                to.cluster
            }
        } else {
            ln.owner_cluster.ok_or_else(|| MicrogridError::Ownership {
                line: ln.id,
                why: "tie-line between following buses needs owner_cluster".into(),
            })?
        };
        if let Some(o) = ln.owner_cluster {
            if o != owner && !(from.cluster != to.cluster && !fs && !ts) {
                return Err(MicrogridError::Ownership {
                    line: ln.id,
                    why: format!("declared owner {o}, ownership rule requires {owner}"),
                });
            }
        }
        if owner != from.cluster && owner != to.cluster {
            return Err(MicrogridError::Ownership {
                line: ln.id,
                why: format!("owner {owner} is not an endpoint cluster"),
            });
        }
        if lines.insert(ln.id, (ln, owner)).is_some() {
            return Err(MicrogridError::DuplicateId { what: "line", id: ln.id });
        }
    }
    Ok(Resolved { buses, lines, clusters })
}

fn sign_at(ln: &Line, bus: usize) -> i8 {
    if ln.from_bus == bus {
        1
    } else {
        -1
    }
}

/// Splits the incidence structure of cluster `cluster_id` into its blocks.
pub fn build_cluster<T: Scalar>(topo: &Topology, cluster_id: usize) -> Result<ClusterModel<T>, MicrogridError> {
    let res = resolve(topo)?;
    build_resolved(&res, cluster_id)
}

fn build_resolved<T: Scalar>(res: &Resolved<'_>, cluster_id: usize) -> Result<ClusterModel<T>, MicrogridError> {
    let index = res
        .clusters
        .iter()
        .position(|c| *c == cluster_id)
        .map(|k| k + 1)
        .ok_or(MicrogridError::NoSettingBus(cluster_id))?;
    let mine = |b: usize| res.buses[&b].cluster == cluster_id;
    let following: Vec<usize> = res
        .buses
        .values()
        .filter(|b| b.cluster == cluster_id && b.kind == BusKind::Following)
        .map(|b| b.id)
        .collect();
    let setting: Vec<usize> = res
        .buses
        .values()
        .filter(|b| b.cluster == cluster_id && b.kind == BusKind::Setting)
        .map(|b| b.id)
        .collect();
    if setting.is_empty() {
        return Err(MicrogridError::NoSettingBus(cluster_id));
    }
    let owned: Vec<&Line> = res.lines.values().filter(|(_, o)| *o == cluster_id).map(|(l, _)| *l).collect();
    let mut incident = Vec::new();
    let mut remote_map: BTreeMap<usize, RemoteBus> = BTreeMap::new();
    for (ln, owner) in res.lines.values() {
        if *owner != cluster_id {
            for b in [ln.from_bus, ln.to_bus] {
                if mine(b) {
                    incident.push(IncidentLine {
                        line: ln.id,
                        owner: res.clusters.iter().position(|c| c == owner).unwrap() + 1,
                        local_bus: b,
                        sign: sign_at(ln, b),
                    });
                }
            }
        } else {
            for b in [ln.from_bus, ln.to_bus] {
                if !mine(b) {
                    let rb = RemoteBus {
                        bus: b,
                        cluster: res.clusters.iter().position(|c| *c == res.buses[&b].cluster).unwrap() + 1,
                        via_line: ln.id,
                        sign: sign_at(ln, b),
                    };
                    if let Some(prev) = remote_map.insert(b, rb) {
                        return Err(MicrogridError::InconsistentStacking {
                            bus: b,
                            first: prev.via_line,
                            second: ln.id,
                        });
                    }
                }
            }
        }
    }
    let remote: Vec<RemoteBus> = remote_map.into_values().collect();
    let (nf, ns, na, nab, nfb) = (following.len(), setting.len(), owned.len(), incident.len(), remote.len());
    let inc = |bus: usize, ln: &Line| -> T {
        if ln.from_bus == bus {
            T::one()
        } else if ln.to_bus == bus {
            -T::one()
        } else {
            T::zero()
        }
    };
    let b_sa = DMatrix::from_fn(ns, na, |i, k| inc(setting[i], owned[k]));
    let b_fa = DMatrix::from_fn(nf, na, |i, k| inc(following[i], owned[k]));
    let b_fa_ab = DMatrix::from_fn(nf, nab, |i, k| {
        let il = &incident[k];
        if il.local_bus == following[i] {
            lit(f64::from(il.sign))
        } else {
            T::zero()
        }
    });
    let b_fb_a = DMatrix::from_fn(nfb, na, |p, k| {
        let rb = &remote[p];
        if rb.via_line == owned[k].id {
            lit(f64::from(rb.sign))
        } else {
            T::zero()
        }
    });
    let fb = |f: fn(&Bus) -> f64| DVector::from_fn(nf, |i, _| lit::<T>(f(res.buses[&following[i]])));
    Ok(ClusterModel {
        cluster: cluster_id,
        index,
        following: following.clone(),
        setting,
        owned_lines: owned.iter().map(|l| l.id).collect(),
        incident,
        remote,
        b_sa,
        b_fa,
        b_fa_ab,
        b_fb_a,
        c_f: fb(|b| b.c_f.unwrap_or(1.0)),
        y_load: fb(|b| b.psi_load.unwrap_or(0.0)),
        i_load: fb(|b| b.delta_load.unwrap_or(0.0)),
        l: DVector::from_fn(na, |k, _| lit(owned[k].l)),
        r: DVector::from_fn(na, |k, _| lit(owned[k].r)),
    })
}

/// Standard-form subsystem `ẋ = A x + B u + d + G w`, `y = x`, `z = E x`.
pub fn cluster_to_subsystem<T: Scalar>(model: &ClusterModel<T>) -> Result<Subsystem<T>, MicrogridError> {
    let (nf, ns, na) = (model.following.len(), model.setting.len(), model.owned_lines.len());
    let (nab, nfb) = (model.incident.len(), model.remote.len());
    let n = nf + na;
    let cinv = model.c_f.map(|v| T::one() / v);
    let linv = model.l.map(|v| T::one() / v);
    let ci = DMatrix::from_diagonal(&cinv);
    let li = DMatrix::from_diagonal(&linv);
    let mut a = DMatrix::<T>::zeros(n, n);
    a.view_mut((0, 0), (nf, nf))
        .copy_from(&DMatrix::from_diagonal(&model.y_load.component_mul(&cinv).map(|v| -v)));
    a.view_mut((0, nf), (nf, na)).copy_from(&(-(&ci * &model.b_fa)));
    a.view_mut((nf, 0), (na, nf)).copy_from(&(&li * model.b_fa.transpose()));
    a.view_mut((nf, nf), (na, na))
        .copy_from(&DMatrix::from_diagonal(&model.r.component_mul(&linv).map(|v| -v)));
    let mut b = DMatrix::<T>::zeros(n, nf + ns);
    b.view_mut((0, 0), (nf, nf)).copy_from(&ci);
    b.view_mut((nf, nf), (na, ns)).copy_from(&(&li * model.b_sa.transpose()));
    let mut g = DMatrix::<T>::zeros(n, nab + nfb);
    g.view_mut((0, 0), (nf, nab)).copy_from(&(-(&ci * &model.b_fa_ab)));
    g.view_mut((nf, nab), (na, nfb)).copy_from(&(&li * model.b_fb_a.transpose()));
    let mut e = DMatrix::<T>::zeros(nab + nfb, n);
    e.view_mut((0, 0), (nab, nf)).copy_from(&(-model.b_fa_ab.transpose()));
    e.view_mut((nab, nf), (nfb, na)).copy_from(&model.b_fb_a);
    let mut d = DVector::<T>::zeros(n);
    d.rows_mut(0, nf).copy_from(&(-model.i_load.component_mul(&cinv)));
    Ok(Subsystem::new(model.index, a, b, DMatrix::identity(n, n), e, g, d)?)
}

/// Tie-line coupling blocks between all cluster pairs.
pub fn tie_line_omega<T: Scalar>(models: &[ClusterModel<T>]) -> Result<InterconnectionMap<T>, MicrogridError> {
    let mut map = InterconnectionMap::new();
    let by_index: BTreeMap<usize, &ClusterModel<T>> = models.iter().map(|m| (m.index, m)).collect();
    for mi in models {
        let mut blocks: BTreeMap<usize, DMatrix<T>> = BTreeMap::new();
        let rows = mi.incident.len() + mi.remote.len();
        for (k, il) in mi.incident.iter().enumerate() {
            let mj = by_index[&il.owner];
            let p = mj
                .remote
                .iter()
                .position(|rb| rb.via_line == il.line)
                .ok_or(MicrogridError::InconsistentStacking {
                    bus: il.local_bus,
                    first: il.line,
                    second: il.line,
                })?;
            let cols = mj.incident.len() + mj.remote.len();
            blocks.entry(il.owner).or_insert_with(|| DMatrix::zeros(rows, cols))[(k, mj.incident.len() + p)] = lit(f64::from(il.sign));
        }
        for (p, rb) in mi.remote.iter().enumerate() {
            let mj = by_index[&rb.cluster];
            let k = mj
                .incident
                .iter()
                .position(|il| il.line == rb.via_line)
                .ok_or(MicrogridError::InconsistentStacking {
                    bus: rb.bus,
                    first: rb.via_line,
                    second: rb.via_line,
                })?;
            let cols = mj.incident.len() + mj.remote.len();
            blocks.entry(rb.cluster).or_insert_with(|| DMatrix::zeros(rows, cols))[(mi.incident.len() + p, k)] = lit(-f64::from(rb.sign));
        }
        for (j, blk) in blocks {
            map.insert(mi.index, j, blk);
        }
    }
    Ok(map)
}

/// Positions of physical quantities in the stacked plant vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkIndex {
    pub vf: BTreeMap<usize, usize>,
    pub line: BTreeMap<usize, usize>,
    pub i_f: BTreeMap<usize, usize>,
    pub v_s: BTreeMap<usize, usize>,
    pub n: usize,
    pub m: usize,
}

impl NetworkIndex {
    /// Index into `ξ = (x, u)` of a following-bus voltage.
    pub fn xi_vf(&self, bus: usize) -> Option<usize> {
        self.vf.get(&bus).copied()
    }

    pub fn xi_line(&self, line: usize) -> Option<usize> {
        self.line.get(&line).copied()
    }

    pub fn xi_if(&self, bus: usize) -> Option<usize> {
        self.i_f.get(&bus).map(|k| self.n + k)
    }

    pub fn xi_vs(&self, bus: usize) -> Option<usize> {
        self.v_s.get(&bus).map(|k| self.n + k)
    }
}

#[derive(Debug, Clone)]
pub struct MicrogridNetwork<T: Scalar> {
    pub topology: Topology,
    pub clusters: Vec<ClusterModel<T>>,
    pub plant: CompactPlant<T>,
    /// Physical storage `blkdiag(C_f, L)` over all clusters.
    pub storage: DMatrix<T>,
    pub tau1: T,
    pub index: NetworkIndex,
}

/// Builds every cluster, the tie-line map and the assembled plant.
pub fn build_network<T: Scalar>(topo: &Topology) -> Result<MicrogridNetwork<T>, MicrogridError> {
    let res = resolve(topo)?;
    let clusters = res
        .clusters
        .iter()
        .map(|c| build_resolved::<T>(&res, *c))
        .collect::<Result<Vec<_>, _>>()?;
    let subs = clusters.iter().map(cluster_to_subsystem).collect::<Result<Vec<_>, _>>()?;
    let map = tie_line_omega(&clusters)?;
    let plant = assemble_plant(subs, map)?;

    let mut index = NetworkIndex::default();
    let (mut xo, mut uo) = (0, 0);
    let mut diag = Vec::new();
    let mut rate = f64::INFINITY;
    for cm in &clusters {
        for (k, b) in cm.following.iter().enumerate() {
            index.vf.insert(*b, xo + k);
            index.i_f.insert(*b, uo + k);
            rate = rate.min(crate::to_f64(cm.y_load[k] / cm.c_f[k]));
        }
        for (k, l) in cm.owned_lines.iter().enumerate() {
            index.line.insert(*l, xo + cm.following.len() + k);
            rate = rate.min(crate::to_f64(cm.r[k] / cm.l[k]));
        }
        for (k, b) in cm.setting.iter().enumerate() {
            index.v_s.insert(*b, uo + cm.following.len() + k);
        }
        xo += cm.n();
        uo += cm.m();
        diag.extend(cm.storage_diag().iter().copied());
    }
    index.n = xo;
    index.m = uo;
    let storage = DMatrix::from_diagonal(&DVector::from_vec(diag));
    let tau1 = lit::<T>(TAU1_FRACTION * 2.0 * rate);
    Ok(MicrogridNetwork {
        topology: topo.clone(),
        clusters,
        plant,
        storage,
        tau1,
        index,
    })
}

impl<T: Scalar> MicrogridNetwork<T> {
    /// Checks the physical storage against the plant with `τ1`.
    pub fn storage_certificate(&self) -> Result<crate::netplant::PassivityCertificate<T>, MicrogridError> {
        Ok(verify_storage(&self.plant, self.storage.clone(), self.tau1)?)
    }

    /// Stacked input vector from per-bus targets.
    pub fn input_vector(&self, targets: &Targets) -> Result<DVector<T>, MicrogridError> {
        let mut u = DVector::zeros(self.index.m);
        for (bus, k) in &self.index.i_f {
            u[*k] = lit(*targets.i_f.get(bus).ok_or(MicrogridError::MissingTarget(*bus))?);
        }
        for (bus, k) in &self.index.v_s {
            u[*k] = lit(*targets.v_s.get(bus).ok_or(MicrogridError::MissingTarget(*bus))?);
        }
        Ok(u)
    }
}

/// Pre-fault operating point: injections `i_f` (A) at following buses and
/// voltages `v_s` (V) at setting buses, keyed by bus id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targets {
    pub i_f: BTreeMap<usize, f64>,
    pub v_s: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgramOptions {
    /// Weight on state deviations.
    pub k_x: f64,
    /// Weight on input deviations.
    pub k_u: f64,
    /// Adds `V_f ≥ V_f^min` rows.
    pub include_vf_rows: bool,
}

impl Default for ProgramOptions {
    fn default() -> Self {
        Self {
            k_x: 1.0,
            k_u: 1.0,
            include_vf_rows: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitKind {
    /// `i_f ≤ i_f^max`.
    InjectionMax,
    /// `-v_s ≤ -v_s^min`.
    SettingVoltageMin,
    /// `-v_f ≤ -v_f^min`.
    FollowingVoltageMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimitRow {
    pub kind: LimitKind,
    pub bus: usize,
}

#[derive(Debug, Clone)]
pub struct MicrogridProgram<T: Scalar> {
    pub program: SteadyStateProgram<T>,
    pub rows: Vec<LimitRow>,
    /// `ξ* = (x*, u*)`.
    pub xi_star: DVector<T>,
}

impl<T: Scalar> MicrogridProgram<T> {
    pub fn limit_row(&self, kind: LimitKind, bus: usize) -> Option<usize> {
        self.rows.iter().position(|r| r.kind == kind && r.bus == bus)
    }

    /// Fault event setting the injection limit of `bus` to `amps` at `time`.
    pub fn injection_limit_fault(&self, time: T, bus: usize, amps: T) -> Result<FaultEvent<T>, MicrogridError> {
        let row = self
            .limit_row(LimitKind::InjectionMax, bus)
            .ok_or(MicrogridError::NoLimitRow(bus))?;
        Ok(FaultEvent {
            time,
            kind: FaultKind::LimitChange { row, value: amps },
        })
    }
}

fn finite_limit(v: Option<f64>, upper: bool) -> Option<f64> {
    v.filter(|x| if upper { *x < f64::INFINITY } else { *x > f64::NEG_INFINITY })
}

/// `min ‖ξ - ξ*‖²_K` s.t. physically weighted steady-state rows and limits.
pub fn microgrid_program<T: Scalar>(
    net: &MicrogridNetwork<T>,
    targets: &Targets,
    opts: &ProgramOptions,
) -> Result<MicrogridProgram<T>, MicrogridError> {
    let (n, m) = (net.index.n, net.index.m);
    let nx = n + m;
    let u_star = net.input_vector(targets)?;
    let x_star = net.plant.equilibrium(&u_star).ok_or(MicrogridError::NoEquilibrium)?;
    let xi_star = linalg::vcat(&[&x_star, &u_star]);

    let w = net.storage.diagonal();
    let mut r_eq = DMatrix::<T>::zeros(n, nx);
    r_eq.view_mut((0, 0), (n, n)).copy_from(&net.plant.ap);
    r_eq.view_mut((0, n), (n, m)).copy_from(&net.plant.b);
    let mut b = DVector::zeros(n) - &net.plant.d;
    for i in 0..n {
        r_eq.row_mut(i).scale_mut(w[i]);
        b[i] *= w[i];
    }

    let mut rows = Vec::new();
    let mut h = Vec::new();
    let mut sel: Vec<(usize, T)> = Vec::new();
    for bus in net.index.i_f.keys() {
        if let Some(v) = finite_limit(net.topology.bus(*bus).and_then(|b| b.i_f_max), true) {
            rows.push(LimitRow { kind: LimitKind::InjectionMax, bus: *bus });
            sel.push((net.index.xi_if(*bus).unwrap(), T::one()));
            h.push(lit::<T>(v));
        }
    }
    for bus in net.index.v_s.keys() {
        if let Some(v) = finite_limit(net.topology.bus(*bus).and_then(|b| b.v_min), false) {
            rows.push(LimitRow { kind: LimitKind::SettingVoltageMin, bus: *bus });
            sel.push((net.index.xi_vs(*bus).unwrap(), -T::one()));
            h.push(lit::<T>(-v));
        }
    }
    if opts.include_vf_rows {
        for bus in net.index.vf.keys() {
            if let Some(v) = finite_limit(net.topology.bus(*bus).and_then(|b| b.v_min), false) {
                rows.push(LimitRow { kind: LimitKind::FollowingVoltageMin, bus: *bus });
                sel.push((net.index.xi_vf(*bus).unwrap(), -T::one()));
                h.push(lit::<T>(-v));
            }
        }
    }
    let mut r_ineq = DMatrix::<T>::zeros(rows.len(), nx);
    for (k, (col, v)) in sel.iter().enumerate() {
        r_ineq[(k, *col)] = *v;
    }
    let k_diag = DVector::from_fn(nx, |i, _| lit::<T>(2.0 * if i < n { opts.k_x } else { opts.k_u }));
    let cost = Cost::quadratic(DMatrix::from_diagonal(&k_diag), xi_star.clone())?;
    let mut program = SteadyStateProgram::from_parts(
        Layout::StateInput { n, m },
        r_eq,
        b,
        r_ineq,
        DVector::from_vec(h),
        cost,
    )?;
    program.plant_row_scale = Some(w.clone_owned());
    Ok(MicrogridProgram { program, rows, xi_star })
}

/// Representative two-cluster network: cluster 1 holds setting buses 1, 3
/// and following bus 2; cluster 2 holds setting buses 4, 6 and following
/// bus 5. Tie-lines 3→5 and 6→2 are owned by the setting side.
pub fn fig1_topology() -> Topology {
    let (c_f, psi, delta) = (2.2e-3, 0.5, 10.0);
    let (r, l) = (0.05, 1.8e-6);
    let mut buses = vec![
        Bus::setting(1, 1, Some(370.0)),
        Bus::following(2, 1, c_f, psi, delta),
        Bus::setting(3, 1, Some(370.0)),
        Bus::setting(4, 2, Some(370.0)),
        Bus::following(5, 2, c_f, psi, delta),
        Bus::setting(6, 2, Some(370.0)),
    ];
    for b in buses.iter_mut().filter(|b| b.kind == BusKind::Following) {
        b.i_f_max = Some(150.0);
        b.v_min = Some(350.0);
    }
    Topology {
        buses,
        lines: vec![Line::new(1, 1, 2, r, l), Line::new(2, 4, 5, r, l)],
        tie_lines: vec![Line::new(3, 3, 5, r, l), Line::new(4, 6, 2, r, l)],
    }
}

/// Pre-fault targets for [`fig1_topology`].
pub fn fig1_targets() -> Targets {
    Targets {
        i_f: [(2, 100.0), (5, 100.0)].into_iter().collect(),
        v_s: [(1, 380.0), (3, 380.0), (4, 380.0), (6, 380.0)].into_iter().collect(),
    }
}
