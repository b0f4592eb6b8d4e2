//! Experiment drivers behind the `mcf` binary: `run`, `compare`, `converge`
//! and `verify`. Every run writes CSV files into the configured output
//! directory; files of a stopped run are kept.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{EocTable, ErrorRecord};
use crate::assembly::Assembler;
use crate::baseline::{compare_runs, dziuk_startup, run_dziuk};
use crate::config::{CurveSpec, MethodKind, RunConfig, StartupKind, Study};
use crate::error::ConfigError;
use crate::geometry::{
    initial_data, AngenentOval, Circle, CircleFlow, Ellipse, ExactSolution, ParametrizedCurve, Sinusoid, Trefoil,
};
use crate::mesh::{
    build_circle_mesh, build_parametric_mesh, max_element_diameter, snapshot_header, write_snapshot_rows, CurveMesh,
    PositionVector, StateVector,
};
use crate::refelem::ReferenceElement;
use crate::stepper::{
    bdf_coefficients, run_flow, startup, BdfScheme, FlowRecord, FlowResult, RunOptions, Snapshot, Startup, StepOptions,
    Termination, DEFAULT_MAX_SUBSTEPS,
};
use crate::verify::{run_all, GroupReport, VerifyOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Config = 2,
    Solver = 3,
    Singularity = 4,
    Verify = 5,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn of(termination: &Termination) -> Self {
        match termination {
            Termination::Completed => ExitStatus::Ok,
            Termination::Singularity { .. } => ExitStatus::Singularity,
            Termination::Failure { .. } => ExitStatus::Solver,
        }
    }

    /// Solver failures outrank singularity stops.
    fn worst(self, other: Self) -> Self {
        let rank = |s: Self| match s {
            ExitStatus::Ok => 0,
            ExitStatus::Singularity => 1,
            ExitStatus::Solver => 2,
            ExitStatus::Verify => 3,
            ExitStatus::Config => 4,
        };
        if rank(other) > rank(self) {
            other
        } else {
            self
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot set up the problem: {0}")]
    Setup(String),
    #[error("output error at {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{0}")]
    Step(crate::error::StepError),
}

impl CliError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            CliError::Config(_) | CliError::Setup(_) | CliError::Io { .. } => ExitStatus::Config,
            CliError::Step(e) if e.is_singularity() => ExitStatus::Singularity,
            CliError::Step(_) => ExitStatus::Solver,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), reason: e.to_string() }
}

/// Mesh, initial data and (optionally) the exact flow of a configuration.
pub struct Problem {
    pub mesh: CurveMesh,
    pub x0: PositionVector,
    pub u0: StateVector,
    pub exact: Option<Box<dyn ExactSolution>>,
    pub scheme: BdfScheme,
}

impl Problem {
    pub fn build(config: &RunConfig, elements: usize) -> Result<Self, CliError> {
        let setup = |e: String| CliError::Setup(e);
        let n = config.ambient_dim;
        let k = config.degree;
        let mut exact: Option<Box<dyn ExactSolution>> = None;
        let (mesh, x0, curve): (CurveMesh, PositionVector, Box<dyn ParametrizedCurve>) = match &config.curve {
            CurveSpec::Circle { radius, rotation } => {
                let (mesh, x) =
                    build_circle_mesh(elements, k, *radius, *rotation, n).map_err(|e| setup(e.to_string()))?;
                if config.register_exact {
                    exact = Some(Box::new(CircleFlow::new(*radius, *rotation, n).map_err(|e| setup(e.to_string()))?));
                }
                (mesh, x, Box::new(Circle::new(*radius, *rotation, n)))
            }
            CurveSpec::Angenent { t0 } => {
                let oval = AngenentOval::new(*t0, n).map_err(|e| setup(e.to_string()))?;
                let curve = oval.initial_curve().map_err(|e| setup(e.to_string()))?;
                let (mesh, x) = build_parametric_mesh(elements, k, n, &curve).map_err(|e| setup(e.to_string()))?;
                if config.register_exact {
                    exact = Some(Box::new(oval));
                }
                (mesh, x, Box::new(curve))
            }
            other => {
                let curve: Box<dyn ParametrizedCurve> = match other {
                    CurveSpec::Ellipse { a, b } => Box::new(Ellipse { a: *a, b: *b, ambient_dim: n }),
                    CurveSpec::Trefoil { scale } => {
                        Box::new(Trefoil::new(*scale, n).map_err(|e| setup(e.to_string()))?)
                    }
                    CurveSpec::Sinusoid { amplitude, frequency } => {
                        Box::new(Sinusoid::new(*amplitude, *frequency, n).map_err(|e| setup(e.to_string()))?)
                    }
                    _ => unreachable!(),
                };
                let (mesh, x) =
                    build_parametric_mesh(elements, k, n, curve.as_ref()).map_err(|e| setup(e.to_string()))?;
                (mesh, x, curve)
            }
        };
        let mesh = match config.quad_points {
            Some(nq) => {
                let r = ReferenceElement::new(k, nq).map_err(CliError::Config)?;
                mesh.with_reference(r).map_err(|e| setup(e.to_string()))?
            }
            None => mesh,
        };
        let (_, u0) = initial_data(curve.as_ref(), &mesh).map_err(|e| setup(e.to_string()))?;
        let scheme = bdf_coefficients(config.q)?;
        Ok(Problem { mesh, x0, u0, exact, scheme })
    }

    fn exact_ref(&self) -> Option<&dyn ExactSolution> {
        self.exact.as_deref()
    }

    fn startup_method(&self, config: &RunConfig) -> Startup<'_> {
        match (config.startup, self.exact_ref()) {
            (StartupKind::Exact, Some(e)) => Startup::Exact(e),
            _ => Startup::Bdf1 { max_substeps: DEFAULT_MAX_SUBSTEPS },
        }
    }
}

fn step_options(config: &RunConfig) -> StepOptions {
    StepOptions { idempotency_tol: config.idempotency_tol, solver_tol: config.solver_tol, ..StepOptions::default() }
}

/// Exact radius and maximal curvature, where known.
fn exact_observables(curve: &CurveSpec, t: f64) -> (Option<f64>, Option<f64>) {
    match curve {
        CurveSpec::Circle { radius, .. } => {
            let r2 = radius * radius - 2.0 * t;
            if r2 > 0.0 {
                (Some(r2.sqrt()), Some(1.0 / r2.sqrt()))
            } else {
                (None, None)
            }
        }
        CurveSpec::Angenent { t0 } => {
            if t0 + t < 0.0 {
                (None, Some(crate::geometry::angenent_kappa(0.0, t0 + t)))
            } else {
                (None, None)
            }
        }
        _ => (None, None),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.16e}"))
}

/// Per-method CSV writers: flow, observables and (optionally) snapshots.
struct CsvSink {
    method: &'static str,
    curve: CurveSpec,
    with_errors: bool,
    with_exact: bool,
    flow: BufWriter<File>,
    observables: BufWriter<File>,
    snapshots: Option<BufWriter<File>>,
    error: Option<std::io::Error>,
}

impl CsvSink {
    fn create(dir: &Path, method: &'static str, config: &RunConfig, problem: &Problem) -> Result<Self, CliError> {
        let open = |name: String| -> Result<BufWriter<File>, CliError> {
            let path = dir.join(name);
            File::create(&path).map(BufWriter::new).map_err(|e| io_error(&path, e))
        };
        let with_errors = problem.exact_ref().is_some_and(|e| e.is_material());
        let with_exact = problem.exact.is_some();
        let mut sink = CsvSink {
            method,
            curve: config.curve.clone(),
            with_errors,
            with_exact,
            flow: open(format!("flow_{method}.csv"))?,
            observables: open(format!("observables_{method}.csv"))?,
            snapshots: if config.snapshots { Some(open(format!("snapshots_{method}.csv"))?) } else { None },
            error: None,
        };
        let mut flow_header = String::from("method,step,t,length,min_sqrt_g");
        if with_errors {
            flow_header.push_str(",err_x_H1,err_v_H1,err_pi_H1,err_H_H1");
        }
        let mut obs_header = String::from("method,step,t,mean_radius,max_curvature,idempotency_defect");
        if with_exact {
            obs_header.push_str(",exact_radius,exact_max_curvature");
        }
        let res = writeln!(sink.flow, "{flow_header}")
            .and_then(|_| writeln!(sink.observables, "{obs_header}"))
            .and_then(|_| match sink.snapshots.as_mut() {
                Some(s) => writeln!(s, "{}", snapshot_header(config.ambient_dim)),
                None => Ok(()),
            });
        res.map_err(|e| io_error(dir, e))?;
        Ok(sink)
    }

    fn record(&mut self, r: &FlowRecord, snap: &Snapshot) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = self.write_record(r, snap) {
            self.error = Some(e);
        }
    }

    fn write_record(&mut self, r: &FlowRecord, snap: &Snapshot) -> std::io::Result<()> {
        let m = self.method;
        write!(self.flow, "{m},{},{:.16e},{:.16e},{:.16e}", r.step, r.t, r.length, r.min_sqrt_g)?;
        if self.with_errors {
            let e: Option<&ErrorRecord> = r.errors.as_ref();
            write!(
                self.flow,
                ",{},{},{},{}",
                fmt_opt(e.map(|e| e.x.h1)),
                fmt_opt(e.map(|e| e.v.h1)),
                fmt_opt(e.and_then(|e| e.pi).map(|n| n.h1)),
                fmt_opt(e.and_then(|e| e.h).map(|n| n.h1)),
            )?;
        }
        writeln!(self.flow)?;
        write!(
            self.observables,
            "{m},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step, r.t, r.mean_radius, r.max_curvature, r.idempotency_defect
        )?;
        if self.with_exact {
            let (radius, kappa) = exact_observables(&self.curve, r.t);
            write!(self.observables, ",{},{}", fmt_opt(radius), fmt_opt(kappa))?;
        }
        writeln!(self.observables)?;
        if let Some(s) = self.snapshots.as_mut() {
            write_snapshot_rows(s, snap.t, &snap.x)?;
        }
        Ok(())
    }

    fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        if let Some(e) = self.error.take() {
            return Err(io_error(dir, e));
        }
        self.flow.flush().map_err(|e| io_error(dir, e))?;
        self.observables.flush().map_err(|e| io_error(dir, e))?;
        if let Some(s) = self.snapshots.as_mut() {
            s.flush().map_err(|e| io_error(dir, e))?;
        }
        Ok(())
    }
}

/// Outcome of one method within a run.
#[derive(Debug)]
pub struct MethodOutcome {
    pub method: &'static str,
    pub result: Result<FlowResult, crate::error::StepError>,
}

impl MethodOutcome {
    pub fn status(&self) -> ExitStatus {
        match &self.result {
            Ok(r) => ExitStatus::of(&r.termination),
            Err(e) if e.is_singularity() => ExitStatus::Singularity,
            Err(_) => ExitStatus::Solver,
        }
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub outcomes: Vec<MethodOutcome>,
    pub status: ExitStatus,
}

impl RunReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            match &o.result {
                Ok(r) => {
                    let state = match &r.termination {
                        Termination::Completed => "completed".to_string(),
                        Termination::Singularity { step, t, error } => {
                            format!("singularity stop at step {step} (t = {t}): {error}")
                        }
                        Termination::Failure { step, t, error } => format!("failed at step {step} (t = {t}): {error}"),
                    };
                    s.push_str(&format!("{}: {} steps to t = {:.6}, {state}\n", o.method, r.steps, r.last.t));
                    if let Some(m) = r.max_errors {
                        s.push_str(&format!(
                            "{}: max H1 errors x {:.3e}  v {:.3e}  pi {:.3e}  H {:.3e}\n",
                            o.method, m.x, m.v, m.pi, m.h
                        ));
                    }
                }
                Err(e) => s.push_str(&format!("{}: startup failed: {e}\n", o.method)),
            }
        }
        s.push_str(&format!("output: {}\n", self.output_dir.display()));
        s
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// Runs the configured method(s) and writes `flow_*.csv`,
/// `observables_*.csv` and `snapshots_*.csv`.
pub fn cmd_run(config: &RunConfig) -> Result<RunReport, CliError> {
    let problem = Problem::build(config, config.elements)?;
    let dir = config.output_dir.clone();
    create_dir(&dir)?;
    info!(
        "{} with E = {}, k = {}, q = {}, tau = {}",
        config.curve.name(),
        config.elements,
        config.degree,
        config.q,
        config.tau
    );
    let assembler = Assembler::new(&problem.mesh);
    let options = RunOptions {
        final_time: config.final_time,
        stride: config.stride,
        step: step_options(config),
        exact: problem.exact_ref(),
    };
    let method = problem.startup_method(config);
    let scheme = &problem.scheme;
    let outcomes = match config.method {
        MethodKind::Coupled => {
            let mut sink = CsvSink::create(&dir, "coupled", config, &problem)?;
            let result = startup(
                &assembler,
                problem.x0.clone(),
                problem.u0.clone(),
                scheme,
                config.tau,
                0.0,
                method,
                &options.step,
            )
            .map(|h| run_flow(&assembler, h, scheme, &options, &mut |r, s| sink.record(r, s)));
            sink.finish(&dir)?;
            vec![MethodOutcome { method: "coupled", result }]
        }
        MethodKind::Dziuk => {
            let mut sink = CsvSink::create(&dir, "dziuk", config, &problem)?;
            let result = dziuk_startup(&assembler, problem.x0.clone(), scheme, config.tau, 0.0, method, &options.step)
                .map(|h| run_dziuk(&assembler, h, scheme, &options, &mut |r, s| sink.record(r, s)));
            sink.finish(&dir)?;
            vec![MethodOutcome { method: "dziuk", result }]
        }
        MethodKind::Both => {
            let mut coupled = CsvSink::create(&dir, "coupled", config, &problem)?;
            let mut dziuk = CsvSink::create(&dir, "dziuk", config, &problem)?;
            let paired = compare_runs(
                &assembler,
                &problem.x0,
                &problem.u0,
                scheme,
                config.tau,
                method,
                &options,
                &mut |r, s| coupled.record(r, s),
                &mut |r, s| dziuk.record(r, s),
            );
            coupled.finish(&dir)?;
            dziuk.finish(&dir)?;
            vec![
                MethodOutcome { method: "coupled", result: paired.coupled },
                MethodOutcome { method: "dziuk", result: paired.dziuk },
            ]
        }
    };
    let status = outcomes.iter().fold(ExitStatus::Ok, |s, o| s.worst(o.status()));
    Ok(RunReport { output_dir: dir, outcomes, status })
}

/// Coupled scheme against the baseline on the same data.
pub fn cmd_compare(config: &RunConfig) -> Result<RunReport, CliError> {
    let mut config = config.clone();
    config.method = MethodKind::Both;
    cmd_run(&config)
}

pub const EOC_QUANTITIES: [&str; 4] = ["x", "v", "pi", "H"];

/// One refinement sequence of a convergence study.
#[derive(Debug)]
pub struct EocSeries {
    /// The parameter held fixed along the sequence (`tau` or `E`).
    pub fixed: String,
    /// Orders of the nodal errors.
    pub table: Option<EocTable>,
    /// Orders of the lifted errors, for comparison.
    pub lifted: Option<EocTable>,
    /// Levels that did not complete, with the reason.
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug)]
pub struct ConvergeReport {
    pub output_dir: PathBuf,
    pub series: Vec<EocSeries>,
    pub status: ExitStatus,
}

struct LevelResult {
    parameter: f64,
    errors: Result<([f64; 4], [f64; 4]), (ExitStatus, String)>,
}

fn run_level(config: &RunConfig, elements: usize, tau: f64, dir: &Path, study: Study) -> Result<LevelResult, CliError> {
    let mut config = config.clone();
    config.elements = elements;
    config.tau = tau;
    config.snapshots = false;
    let problem = Problem::build(&config, elements)?;
    let parameter = match study {
        Study::Space => max_element_diameter(&problem.mesh, &problem.x0),
        Study::Time => tau,
    };
    let assembler = Assembler::new(&problem.mesh);
    let options = RunOptions {
        final_time: config.final_time,
        stride: config.stride,
        step: step_options(&config),
        exact: problem.exact_ref(),
    };
    let path = dir.join(format!("flow_E{elements}_tau{tau:e}.csv"));
    let file = File::create(&path).map_err(|e| io_error(&path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "method,step,t,length,min_sqrt_g,err_x_H1,err_v_H1,err_pi_H1,err_H_H1")
        .map_err(|e| io_error(&path, e))?;
    let mut write_err = None;
    let scheme = &problem.scheme;
    let result = startup(
        &assembler,
        problem.x0.clone(),
        problem.u0.clone(),
        scheme,
        tau,
        0.0,
        problem.startup_method(&config),
        &options.step,
    )
    .map(|h| {
        run_flow(&assembler, h, scheme, &options, &mut |r, _| {
            let e = r.errors.as_ref();
            let res = writeln!(
                w,
                "coupled,{},{:.16e},{:.16e},{:.16e},{},{},{},{}",
                r.step,
                r.t,
                r.length,
                r.min_sqrt_g,
                fmt_opt(e.map(|e| e.x.h1)),
                fmt_opt(e.map(|e| e.v.h1)),
                fmt_opt(e.and_then(|e| e.pi).map(|n| n.h1)),
                fmt_opt(e.and_then(|e| e.h).map(|n| n.h1)),
            );
            if let Err(err) = res {
                write_err.get_or_insert(err);
            }
        })
    });
    if let Some(e) = write_err {
        return Err(io_error(&path, e));
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    let errors = match result {
        Ok(r) => match (&r.termination, r.max_errors, r.max_lifted_errors) {
            (Termination::Completed, Some(m), Some(l)) => Ok((m.as_array(), l.as_array())),
            (Termination::Completed, _, _) => Err((ExitStatus::Config, "no exact solution registered".to_string())),
            (t, _, _) => Err((ExitStatus::of(t), format!("{t:?}"))),
        },
        Err(e) => {
            let status = if e.is_singularity() { ExitStatus::Singularity } else { ExitStatus::Solver };
            Err((status, format!("startup: {e}")))
        }
    };
    Ok(LevelResult { parameter, errors })
}

/// Convergence study: every level of every series runs on a pool of
/// `workers` threads; each level writes its own flow CSV.
pub fn cmd_converge(config: &RunConfig) -> Result<ConvergeReport, CliError> {
    let spec = config.converge.clone().ok_or_else(|| ConfigError::Missing("converge".into()))?;
    let dir = config.output_dir.clone();
    create_dir(&dir)?;
    // (series index, elements, tau)
    let mut jobs = Vec::new();
    let series_labels: Vec<String> = match spec.study {
        Study::Space => {
            for (s, &tau) in spec.taus.iter().enumerate() {
                for &e in &spec.elements {
                    jobs.push((s, e, tau));
                }
            }
            spec.taus.iter().map(|t| format!("tau={t:e}")).collect()
        }
        Study::Time => {
            for (s, &e) in spec.elements.iter().enumerate() {
                for &tau in &spec.taus {
                    jobs.push((s, e, tau));
                }
            }
            spec.elements.iter().map(|e| format!("E={e}")).collect()
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| CliError::Setup(e.to_string()))?;
    let results: Vec<Result<LevelResult, CliError>> =
        pool.install(|| jobs.par_iter().map(|&(_, e, tau)| run_level(config, e, tau, &dir, spec.study)).collect());

    let mut status = ExitStatus::Ok;
    let mut series = Vec::new();
    for (s, label) in series_labels.iter().enumerate() {
        let mut params = Vec::new();
        let mut errors = Vec::new();
        let mut lifted = Vec::new();
        let mut failures = Vec::new();
        for (level, ((job_series, _, _), res)) in
            jobs.iter().zip(&results).filter(|((js, _, _), _)| *js == s).enumerate()
        {
            debug_assert_eq!(*job_series, s);
            match res {
                Err(e) => return Err(CliError::Setup(format!("level {level} of {label}: {e}"))),
                Ok(LevelResult { parameter, errors: Ok((err, lift)) }) => {
                    params.push(*parameter);
                    errors.push(err.to_vec());
                    lifted.push(lift.to_vec());
                }
                Ok(LevelResult { errors: Err((st, reason)), .. }) => {
                    status = status.worst(*st);
                    failures.push((level, reason.clone()));
                }
            }
        }
        let (table, lifted) = if params.len() >= 2 {
            let stem = if series_labels.len() == 1 { "eoc".to_string() } else { format!("eoc_{s}") };
            let table = write_table(&dir, &stem, label, params.clone(), errors)?;
            let lifted = write_table(&dir, &format!("{stem}_lifted"), label, params, lifted)?;
            (Some(table), Some(lifted))
        } else {
            status = status.worst(ExitStatus::Solver);
            (None, None)
        };
        series.push(EocSeries { fixed: label.clone(), table, lifted, failures });
    }
    Ok(ConvergeReport { output_dir: dir, series, status })
}

fn write_table(
    dir: &Path,
    stem: &str,
    label: &str,
    params: Vec<f64>,
    errors: Vec<Vec<f64>>,
) -> Result<EocTable, CliError> {
    let table = EocTable::new(&EOC_QUANTITIES, params, errors).map_err(|e| CliError::Setup(e.to_string()))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, table.to_csv()).map_err(|e| io_error(&csv, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    fs::write(&txt, format!("# {label}\n{}", table.to_text())).map_err(|e| io_error(&txt, e))?;
    Ok(table)
}

impl ConvergeReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for series in &self.series {
            s.push_str(&format!("# {}\n", series.fixed));
            match &series.table {
                Some(t) => {
                    s.push_str("nodal errors\n");
                    s.push_str(&t.to_text());
                    if let Some(l) = &series.lifted {
                        s.push_str("lifted errors\n");
                        s.push_str(&l.to_text());
                    }
                }
                None => s.push_str("fewer than 2 levels completed, no table\n"),
            }
            for (level, reason) in &series.failures {
                s.push_str(&format!("level {level} did not complete: {reason}\n"));
            }
        }
        s.push_str(&format!("output: {}\n", self.output_dir.display()));
        s
    }
}

/// Runs all verification groups; the status is nonzero if any fails.
pub fn cmd_verify(options: &VerifyOptions) -> (Vec<GroupReport>, ExitStatus) {
    let reports = run_all(options);
    let status = if reports.iter().all(|r| r.passed()) { ExitStatus::Ok } else { ExitStatus::Verify };
    (reports, status)
}
