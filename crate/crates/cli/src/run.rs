//! Scenario pipeline: assemble, program, gains, margin, simulate, monitor, certify.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use pdftc::augpdgd::{controller_gains, GainsReport};
use pdftc::certificate::{certify, CertificateSummary, PSD_TOL};
use pdftc::closedloop::{
    auto_eta, beta, dwell_time, evaluate_margin, lyapunov_monitor, simulate, stiffness_limit, ClosedLoopError,
    EnvelopeReport, FaultKind, SegmentEnvelope, StabilityMargin, SubsystemPatch,
};
use pdftc::microgrid::{build_network, microgrid_program, MicrogridProgram, NetworkIndex, TAU1_FRACTION};
use pdftc::netplant::{assemble_plant, passivity_certificate, verify_storage};
use pdftc::{InterconnectionMap, Subsystem};
use pdftc::optprogram::{assemble_program, solve_oracle, ConstraintTemplate, ResidualReport};
use pdftc::Cost;
use pdftc::{ControllerParams, FaultEvent, Plant, Program, SimOptions, Trace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    block, dense, patch_matrix, subsystem_matrices, vector, ConfigError, EtaSpec, FaultSpec, ScenarioConfig, StartTag,
    StateSpec, StepSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 1;
pub const EXIT_TUNING: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
/// Any other failure, including a certificate that does not hold.
pub const EXIT_OTHER: i32 = 4;

/// Random `(H, Γ)` samples per certificate check.
pub const CERT_SAMPLES: usize = 100;
/// Tolerance of the metric floor check.
pub const FLOOR_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("tuning condition fails for eta = {eta}: beta = {beta}, smallest admissible eta is {min_eta}")]
    Tuning { eta: f64, beta: f64, min_eta: f64 },
    #[error("closed loop diverged at t = {time}")]
    Diverged { time: f64 },
    #[error("{0}")]
    Pipeline(String),
    #[error("certificates failed: {0}")]
    Certificate(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_SCHEMA,
            RunError::Tuning { .. } => EXIT_TUNING,
            RunError::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_OTHER,
        }
    }
}

fn pipe<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> RunError {
    move |e| RunError::Pipeline(format!("{stage}: {e}"))
}

/// Plant, program and storage built from a config.
pub struct Assembled {
    pub plant: Plant,
    pub program: Program,
    pub storage: DMatrix<f64>,
    pub tau1: f64,
    pub microgrid: Option<(NetworkIndex, MicrogridProgram<f64>)>,
}

pub fn assemble(cfg: &ScenarioConfig) -> Result<Assembled, RunError> {
    if let Some(mg) = &cfg.microgrid {
        let net = build_network::<f64>(&mg.topology).map_err(pipe("microgrid"))?;
        net.storage_certificate().map_err(pipe("storage certificate"))?;
        let mp = microgrid_program(&net, &mg.targets, &mg.options).map_err(pipe("microgrid program"))?;
        return Ok(Assembled {
            program: mp.program.clone(),
            plant: net.plant.clone(),
            storage: net.storage.clone(),
            tau1: net.tau1,
            microgrid: Some((net.index.clone(), mp)),
        });
    }
    let spec = cfg.plant.as_ref().ok_or_else(|| RunError::Pipeline("no plant".into()))?;
    let mut subs = Vec::new();
    let mut templates = Vec::new();
    for (k, s) in spec.subsystems.iter().enumerate() {
        let (a, b, c, e, g, d) = subsystem_matrices(s, k)?;
        let sub = Subsystem::new(k + 1, a, b, c, e, g, d).map_err(pipe("subsystem"))?;
        let dm = sub.dims();
        let cs = &s.constraints;
        let p = format!("/plant/subsystems/{k}/constraints");
        let eq_x = block(&cs.eq_x, 0, dm.n, &format!("{p}/eq_x"))?;
        let eq_y = block(&cs.eq_y, 0, dm.p, &format!("{p}/eq_y"))?;
        let eq_u = block(&cs.eq_u, 0, dm.m, &format!("{p}/eq_u"))?;
        let ineq_x = block(&cs.ineq_x, 0, dm.n, &format!("{p}/ineq_x"))?;
        let ineq_y = block(&cs.ineq_y, 0, dm.p, &format!("{p}/ineq_y"))?;
        let ineq_u = block(&cs.ineq_u, 0, dm.m, &format!("{p}/ineq_u"))?;
        templates.push(ConstraintTemplate {
            b_x: vector(&cs.b_x, eq_x.nrows()),
            b_y: vector(&cs.b_y, eq_y.nrows()),
            b_u: vector(&cs.b_u, eq_u.nrows()),
            h_x: vector(&cs.h_x, ineq_x.nrows()),
            h_y: vector(&cs.h_y, ineq_y.nrows()),
            h_u: vector(&cs.h_u, ineq_u.nrows()),
            eq_x,
            eq_y,
            eq_u,
            ineq_x,
            ineq_y,
            ineq_u,
        });
        subs.push(sub);
    }
    let mut map = InterconnectionMap::new();
    for (k, blk) in spec.interconnection.iter().enumerate() {
        map.insert(blk.i, blk.j, dense(&blk.block, &format!("/plant/interconnection/{k}/block"))?);
    }
    let plant = assemble_plant(subs, map).map_err(pipe("plant"))?;
    let weight = dense(&spec.cost.weight, "/plant/cost/weight")?;
    let cost = Cost::quadratic(weight, DVector::from_vec(spec.cost.target.clone())).map_err(pipe("cost"))?;
    let mut program = assemble_program(&plant, &templates, cost, spec.layout).map_err(pipe("program"))?;
    if let Some(w) = &spec.plant_row_scale {
        program.plant_row_scale = Some(DVector::from_vec(w.clone()));
        program.restack_plant_rows(&plant).map_err(pipe("program"))?;
    }
    let tau1 = spec.tau1.unwrap_or_else(|| TAU1_FRACTION * plant.tau1_bound());
    let storage = match &spec.storage {
        Some(m) => {
            let p1 = dense(m, "/plant/storage")?;
            verify_storage(&plant, p1, tau1).map_err(pipe("storage"))?.p1
        }
        None => passivity_certificate(&plant, tau1).map_err(pipe("storage"))?.p1,
    };
    Ok(Assembled {
        plant,
        program,
        storage,
        tau1,
        microgrid: None,
    })
}

/// Gains with `η` from the config, or the automatic choice times the multiplier.
pub fn synthesize(cfg: &ScenarioConfig, program: &Program) -> Result<ControllerParams, RunError> {
    let c = &cfg.controller;
    let probe = controller_gains(program, 1.0, c.rho, c.epsilon, None).map_err(pipe("gains"))?;
    let b = beta(&probe).map_err(pipe("margin"))?;
    let eta = match c.eta {
        EtaSpec::Value(v) => v,
        EtaSpec::Auto(_) => auto_eta(b, probe.kappa1, c.epsilon) * c.eta_multiplier,
    };
    controller_gains(program, eta, c.rho, c.epsilon, c.override_c).map_err(pipe("gains"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateBlock {
    /// Segment the certified controller belongs to.
    pub segment: usize,
    #[serde(flatten)]
    pub summary: CertificateSummary,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub status: String,
    pub beta: f64,
    pub eta: f64,
    pub min_eta: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub c: MetricReport,
    pub tau1: f64,
    pub tau2: f64,
    pub tau2e: f64,
    pub tau: f64,
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub gamma_f: Option<f64>,
    pub dwell_time: Option<f64>,
    pub final_kkt_residuals: Option<ResidualReport>,
    pub final_x: Option<Vec<f64>>,
    pub envelope: Option<Vec<SegmentEnvelope>>,
    pub certificate: Vec<CertificateBlock>,
}

fn base_report(params: &ControllerParams, margin: &StabilityMargin<f64>) -> Report {
    let g: GainsReport = params.report();
    Report {
        status: "ok".into(),
        beta: margin.beta,
        eta: params.eta,
        min_eta: margin.min_eta,
        rho: params.rho,
        epsilon: params.epsilon,
        kappa1: params.kappa1,
        kappa2: params.kappa2,
        c: MetricReport {
            c1: g.c1,
            c2: g.c2,
            c3: g.c3,
            c: g.c,
        },
        tau1: margin.tau1,
        tau2: params.tau2,
        tau2e: margin.tau2e,
        tau: margin.tau,
        dt: None,
        steps: None,
        gamma_f: None,
        dwell_time: None,
        final_kkt_residuals: None,
        final_x: None,
        envelope: None,
        certificate: Vec::new(),
    }
}

/// True when every certificate check holds.
pub fn certificate_passes(s: &CertificateSummary) -> bool {
    s.p2_floor_margin >= -FLOOR_TOL && s.q_min_eig >= -PSD_TOL && s.vertex_worst_margin >= -PSD_TOL && s.delta > 0.0
}

fn start_state(spec: &StateSpec, oracle: &DVector<f64>, len: usize, pointer: &str) -> Result<DVector<f64>, RunError> {
    match spec {
        StateSpec::Named(StartTag::Zero) => Ok(DVector::zeros(len)),
        StateSpec::Named(StartTag::Oracle) => Ok(oracle.clone()),
        StateSpec::Values(v) if v.len() == len => Ok(DVector::from_vec(v.clone())),
        StateSpec::Values(v) => Err(RunError::Config(ConfigError::Schema {
            pointer: pointer.into(),
            message: format!("has {} entries, expected {len}", v.len()),
        })),
    }
}

fn fault_events(cfg: &ScenarioConfig, asm: &Assembled) -> Result<Vec<FaultEvent>, RunError> {
    let mut events = Vec::new();
    for (k, f) in cfg.faults.iter().enumerate() {
        let p = format!("/faults/{k}");
        let ev = match f {
            FaultSpec::LimitChange { time, row, value } => FaultEvent {
                time: *time,
                kind: FaultKind::LimitChange { row: *row, value: *value },
            },
            FaultSpec::InjectionLimit { time, bus, amps } => {
                let (_, mp) = asm.microgrid.as_ref().ok_or_else(|| RunError::Pipeline("no microgrid".into()))?;
                mp.injection_limit_fault(*time, *bus, *amps).map_err(|e| {
                    RunError::Config(ConfigError::Schema {
                        pointer: format!("{p}/bus"),
                        message: e.to_string(),
                    })
                })?
            }
            FaultSpec::MatrixChange { time, subsystem, patch } => FaultEvent {
                time: *time,
                kind: FaultKind::MatrixChange {
                    subsystem: *subsystem,
                    patch: SubsystemPatch {
                        a: patch_matrix(&patch.a, &format!("{p}/patch/a"))?,
                        b: patch_matrix(&patch.b, &format!("{p}/patch/b"))?,
                        c: patch_matrix(&patch.c, &format!("{p}/patch/c"))?,
                        e: patch_matrix(&patch.e, &format!("{p}/patch/e"))?,
                        g: patch_matrix(&patch.g, &format!("{p}/patch/g"))?,
                        d: patch.d.as_ref().map(|d| DVector::from_vec(d.clone())),
                    },
                },
            },
        };
        events.push(ev);
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(events)
}

/// Everything a run produces.
pub struct RunOutput {
    pub assembled: Assembled,
    pub params: ControllerParams,
    pub trace: Trace,
    pub envelope: EnvelopeReport,
    pub report: Report,
}

/// Runs the pipeline. A tuning failure returns the partial report alongside the error.
pub fn run_config(cfg: &ScenarioConfig, seed: u64) -> Result<RunOutput, (RunError, Option<Box<Report>>)> {
    let asm = assemble(cfg).map_err(|e| (e, None))?;
    info!(
        "assembled plant n={} m={}, program with {} equality and {} inequality rows",
        asm.plant.n(),
        asm.plant.m(),
        asm.program.n_eq(),
        asm.program.n_ineq()
    );
    let params = synthesize(cfg, &asm.program).map_err(|e| (e, None))?;
    let margin = evaluate_margin(&params, params.kappa1, asm.tau1).map_err(|e| (pipe("margin")(e), None))?;
    let mut report = base_report(&params, &margin);
    if !margin.eta_condition_ok {
        report.status = "tuning_failed".into();
        return Err((
            RunError::Tuning {
                eta: params.eta,
                beta: margin.beta,
                min_eta: margin.min_eta,
            },
            Some(Box::new(report)),
        ));
    }
    info!("eta = {:e}, c = {:e}, tau = {:e}", params.eta, params.c, margin.tau);

    let oracle = solve_oracle(&asm.program).map_err(|e| (pipe("oracle")(e), None))?.theta();
    let n = asm.plant.n();
    let sim = &cfg.simulation;
    let x0 = start_state(&sim.x0, &oracle.rows(0, n).into_owned(), n, "/simulation/x0").map_err(|e| (e, None))?;
    let theta0 = start_state(&sim.theta0, &oracle, oracle.len(), "/simulation/theta0").map_err(|e| (e, None))?;
    let dt = match sim.dt {
        StepSpec::Value(v) => v,
        StepSpec::Auto(_) => stiffness_limit(&asm.plant, &params, &asm.program, &theta0).map_err(|e| (pipe("stiffness")(e), None))?,
    };
    let events = fault_events(cfg, &asm).map_err(|e| (e, None))?;
    let opts = SimOptions {
        dt,
        t_end: sim.t_end,
        record_every: sim.record_every,
        storage: Some(asm.storage.clone()),
        tau1: Some(asm.tau1),
        override_c: cfg.controller.override_c,
    };
    let trace = simulate(&asm.plant, &params, &asm.program, &events, &x0, &theta0, &opts).map_err(|e| match e {
        ClosedLoopError::Diverged { time } => (RunError::Diverged { time }, None),
        e => (pipe("simulation")(e), None),
    })?;
    info!("simulated {} steps, {} samples", trace.steps, trace.len());

    let envelope = lyapunov_monitor(&trace, &asm.storage, Some(asm.tau1)).map_err(|e| (pipe("monitor")(e), None))?;
    let gamma_f = envelope.gamma_f();
    report.dt = Some(dt);
    report.steps = Some(trace.steps);
    report.gamma_f = Some(gamma_f);
    report.dwell_time = dwell_time(gamma_f, margin.tau).ok();
    report.final_kkt_residuals = trace.final_kkt();
    report.final_x = trace.final_x().map(|x| x.iter().copied().collect());
    report.envelope = Some(envelope.segments.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, seg) in trace.segments.iter().enumerate() {
        if k > 0 && seg.params == trace.segments[k - 1].params && seg.program.h == trace.segments[k - 1].program.h {
            continue;
        }
        let summary = certify(&seg.params, &seg.program, CERT_SAMPLES, &mut rng).map_err(|e| (pipe("certificate")(e), None))?;
        let passed = certificate_passes(&summary);
        if !passed {
            warn!("segment {k} certificate fails: {summary:?}");
        }
        report.certificate.push(CertificateBlock {
            segment: k,
            summary,
            passed,
        });
    }
    if report.certificate.iter().any(|c| !c.passed) {
        report.status = "certificate_failed".into();
    }
    Ok(RunOutput {
        assembled: asm,
        params,
        trace,
        envelope,
        report,
    })
}

/// Writes the trace CSV.
pub fn emit_trace(trace: &Trace, plant: &Plant, program: &Program, path: &Path) -> Result<(), RunError> {
    let io = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    trace
        .write_csv(&mut w, plant.n(), program.n_theta(), plant.m(), plant.p())
        .map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_report(report: &Report, path: &Path) -> Result<(), RunError> {
    let io = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    let text = serde_json::to_string_pretty(report).map_err(|e| RunError::Pipeline(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a config, runs it and writes its outputs; returns the exit code.
/// Relative output paths resolve against the config's directory.
pub fn run_scenario(config_path: &Path, seed: u64) -> i32 {
    let cfg = match ScenarioConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", config_path.display());
            return match e {
                ConfigError::Io { .. } => EXIT_OTHER,
                ConfigError::Schema { .. } => EXIT_SCHEMA,
            };
        }
    };
    let base = config_path.parent().unwrap_or(Path::new("."));
    let report_path = cfg.outputs.report_path.as_ref().map(|p| resolve(base, p));
    let trace_path = cfg.outputs.trace_path.as_ref().map(|p| resolve(base, p));
    match run_config(&cfg, seed) {
        Ok(out) => {
            let mut code = EXIT_OK;
            if let Some(p) = &trace_path {
                if let Err(e) = emit_trace(&out.trace, &out.assembled.plant, &out.assembled.program, p) {
                    eprintln!("{e}");
                    code = EXIT_OTHER;
                }
            }
            if let Some(p) = &report_path {
                if let Err(e) = write_report(&out.report, p) {
                    eprintln!("{e}");
                    code = EXIT_OTHER;
                }
            }
            if out.report.certificate.iter().any(|c| !c.passed) {
                eprintln!("{}: {}", config_path.display(), RunError::Certificate(out.report.status.clone()));
                code = EXIT_OTHER;
            }
            code
        }
        Err((e, partial)) => {
            eprintln!("{}: {e}", config_path.display());
            if let (Some(r), Some(p)) = (partial, &report_path) {
                if let Err(w) = write_report(&r, p) {
                    eprintln!("{w}");
                }
            }
            e.exit_code()
        }
    }
}

/// Runs every `*.json` config in `dir` in parallel; returns the largest exit code.
pub fn run_sweep(dir: &Path, seed: u64) -> i32 {
    use rayon::prelude::*;
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("cannot read {}: {e}", dir.display());
            return EXIT_OTHER;
        }
    };
    let mut configs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        eprintln!("no scenario files in {}", dir.display());
        return EXIT_OTHER;
    }
    let codes: Vec<(PathBuf, i32)> = configs.par_iter().map(|p| (p.clone(), run_scenario(p, seed))).collect();
    for (p, c) in &codes {
        println!("{}\t{c}", p.display());
    }
    codes.iter().map(|(_, c)| *c).max().unwrap_or(EXIT_OK)
}
