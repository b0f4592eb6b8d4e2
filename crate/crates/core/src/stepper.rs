//! Linearly implicit BDF time stepping of the coupled system
//!
//! ```text
//! vⁿ = Huⁿ,   M(x̃ⁿ) u̇ⁿ + A(x̃ⁿ) uⁿ = f(x̃ⁿ, ũⁿ),   ẋⁿ = vⁿ
//! ```
//!
//! where `u = (π, H)`, dots are BDF difference quotients and tildes are
//! extrapolations from the previous `q` steps.

use std::collections::VecDeque;

use log::{debug, warn};
use num_rational::Rational64;
use rayon::prelude::*;

use crate::analysis::{
    correct_projection_field, error_vs_exact_with, lifted_error_vs_exact, pi_diagnostics, ErrorRecord, SolutionView,
};
use crate::assembly::Assembler;
use crate::error::{ConfigError, StepError};
use crate::geometry::{exact_nodal_data, ExactSolution};
use crate::mesh::{
    check_orientation, length_from_geometry, mean_radius, NodalField, PositionVector, QuadGeometry, StateVector,
};
use crate::sparse::{SolveStats, SpdSolver, DEFAULT_RESIDUAL_TOLERANCE};

pub const MAX_BDF_ORDER: usize = 5;

/// Coefficients of the q-step BDF method and its extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct BdfScheme {
    q: usize,
    delta: Vec<f64>,
    gamma: Vec<f64>,
    delta_exact: Vec<Rational64>,
    gamma_exact: Vec<Rational64>,
}

fn binomial(n: usize, k: usize) -> i64 {
    (0..k).fold(1i64, |acc, i| acc * (n - i) as i64 / (i + 1) as i64)
}

/// `δ(ζ) = Σ_{ℓ=1}^q (1/ℓ)(1−ζ)^ℓ` and `γ(ζ) = (1 − (1−ζ)^q)/ζ`.
pub fn bdf_coefficients(q: usize) -> Result<BdfScheme, ConfigError> {
    if !(1..=MAX_BDF_ORDER).contains(&q) {
        return Err(ConfigError::Invalid {
            key: "q".into(),
            reason: format!("BDF order {q} unsupported; supported range is 1..={MAX_BDF_ORDER}"),
        });
    }
    let sign = |j: usize| if j.is_multiple_of(2) { 1 } else { -1 };
    let delta_exact: Vec<Rational64> =
        (0..=q).map(|j| (j.max(1)..=q).map(|l| Rational64::new(sign(j) * binomial(l, j), l as i64)).sum()).collect();
    let gamma_exact: Vec<Rational64> = (1..=q).map(|j| Rational64::from_integer(-sign(j) * binomial(q, j))).collect();
    let to_f64 = |r: &Rational64| *r.numer() as f64 / *r.denom() as f64;
    Ok(BdfScheme {
        q,
        delta: delta_exact.iter().map(to_f64).collect(),
        gamma: gamma_exact.iter().map(to_f64).collect(),
        delta_exact,
        gamma_exact,
    })
}

impl BdfScheme {
    pub fn order(&self) -> usize {
        self.q
    }

    /// `δ₀, …, δ_q`.
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// `γ₀, …, γ_{q−1}`.
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn delta_exact(&self) -> &[Rational64] {
        &self.delta_exact
    }

    pub fn gamma_exact(&self) -> &[Rational64] {
        &self.gamma_exact
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub x: PositionVector,
    pub u: StateVector,
}

/// The last `q` snapshots, newest first, at times `origin + i·τ`.
#[derive(Debug, Clone)]
pub struct History {
    tau: f64,
    capacity: usize,
    origin: f64,
    newest: usize,
    snapshots: VecDeque<Snapshot>,
    geometry: Option<QuadGeometry>,
}

impl History {
    /// History starting from a single snapshot at step 0, time `origin`.
    pub fn new(capacity: usize, tau: f64, origin: f64, x: PositionVector, u: StateVector) -> Self {
        let mut snapshots = VecDeque::with_capacity(capacity);
        snapshots.push_front(Snapshot { t: origin, x, u });
        History { tau, capacity: capacity.max(1), origin, newest: 0, snapshots, geometry: None }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.snapshots.len() == self.capacity
    }

    /// Step index of the newest snapshot.
    pub fn index(&self) -> usize {
        self.newest
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.origin + index as f64 * self.tau
    }

    /// `j = 0` is the newest snapshot.
    pub fn get(&self, j: usize) -> &Snapshot {
        &self.snapshots[j]
    }

    pub fn newest(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.iter()
    }

    pub fn push(&mut self, x: PositionVector, u: StateVector) {
        self.newest += 1;
        let t = self.time_of(self.newest);
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_back();
        }
        self.snapshots.push_front(Snapshot { t, x, u });
        self.geometry = None;
    }

    fn push_with_geometry(&mut self, x: PositionVector, u: StateVector, geometry: QuadGeometry) {
        self.push(x, u);
        self.geometry = Some(geometry);
    }

    fn check_full(&self) -> Result<(), StepError> {
        if !self.is_full() {
            return Err(StepError::History { expected: self.capacity, found: self.len() });
        }
        Ok(())
    }
}

/// `x̃ = Σ_j γ_j x^{n−1−j}`, likewise for `u`.
pub fn extrapolate(history: &History, scheme: &BdfScheme) -> Result<(PositionVector, StateVector), StepError> {
    if history.len() < scheme.order() {
        return Err(StepError::History { expected: scheme.order(), found: history.len() });
    }
    let first = history.get(0);
    let mut x = first.x.scaled(scheme.gamma[0]);
    let mut u = first.u.scaled(scheme.gamma[0]);
    for (j, &g) in scheme.gamma.iter().enumerate().skip(1) {
        let s = history.get(j);
        x.axpy(g, &s.x);
        u.axpy(g, &s.u);
    }
    Ok((x, u))
}

/// Switches for the individual terms of the step, used by structural tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorMask {
    pub stiffness: bool,
    pub rhs: bool,
}

impl Default for OperatorMask {
    fn default() -> Self {
        OperatorMask { stiffness: true, rhs: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    /// Correct extrapolated projections whose idempotency defect exceeds this.
    pub idempotency_tol: Option<f64>,
    pub solver_tol: f64,
    pub mask: OperatorMask,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { idempotency_tol: None, solver_tol: DEFAULT_RESIDUAL_TOLERANCE, mask: OperatorMask::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub t: f64,
    /// Fingerprint of the one system matrix used for every component.
    pub fingerprint: u64,
    pub max_relative_residual: f64,
    pub refinements: usize,
    pub corrected_nodes: usize,
    pub min_sqrt_g: f64,
    pub length: f64,
}

/// Solves `matrix · y_c = b_c` for every column, sharing one factorization.
pub(crate) fn solve_components(
    solver: &SpdSolver,
    rhs: Vec<Vec<f64>>,
) -> Result<(Vec<Vec<f64>>, SolveStats), StepError> {
    let solved: Vec<(Vec<f64>, SolveStats)> = rhs.par_iter().map(|b| solver.solve(b)).collect::<Result<_, _>>()?;
    let mut stats = SolveStats { relative_residual: 0.0, refinements: 0 };
    let mut out = Vec::with_capacity(solved.len());
    for (y, s) in solved {
        stats.relative_residual = stats.relative_residual.max(s.relative_residual);
        stats.refinements += s.refinements;
        out.push(y);
    }
    Ok((out, stats))
}

/// Position update `xⁿ = (τ vⁿ − Σ_{j≥1} δ_j x^{n−j}) / δ₀`.
pub(crate) fn position_update(history: &History, scheme: &BdfScheme, v: &NodalField) -> PositionVector {
    let tau = history.tau();
    let delta = scheme.delta();
    let mut x = v.scaled(tau / delta[0]);
    for j in 1..=scheme.order() {
        x.axpy(-delta[j] / delta[0], &history.get(j - 1).x);
    }
    x
}

/// Checks a new position against the previous one and returns its geometry.
pub(crate) fn validate_position(
    assembler: &Assembler,
    previous: Option<&QuadGeometry>,
    previous_x: &PositionVector,
    x: &PositionVector,
) -> Result<QuadGeometry, StepError> {
    if !x.is_finite() {
        return Err(StepError::NonFinite);
    }
    let geo = assembler.geometry(x)?;
    let prev_owned;
    let prev = match previous {
        Some(g) => g,
        None => {
            prev_owned = assembler.geometry(previous_x)?;
            &prev_owned
        }
    };
    check_orientation(assembler.mesh(), prev, &geo)?;
    Ok(geo)
}

/// One linearly implicit BDF step; pushes the new snapshot onto `history`.
pub fn step(
    assembler: &Assembler,
    history: &mut History,
    scheme: &BdfScheme,
    options: &StepOptions,
) -> Result<StepOutcome, StepError> {
    history.check_full()?;
    if history.capacity() != scheme.order() {
        return Err(StepError::History { expected: scheme.order(), found: history.capacity() });
    }
    let tau = history.tau();
    let delta = scheme.delta();
    let (xt, mut ut) = extrapolate(history, scheme)?;
    let corrected_nodes = match options.idempotency_tol {
        Some(tol) => correct_projection_field(&mut ut.pi, tol).map_err(|_| StepError::NonFinite)?,
        None => 0,
    };
    if !xt.is_finite() || !ut.is_finite() {
        return Err(StepError::NonFinite);
    }

    let geo = assembler.geometry(&xt)?;
    let (mass, mut stiffness) = assembler.operators_on(&geo);
    let (f1, f2) = if options.mask.rhs {
        (assembler.f1_on(&geo, &ut.pi)?, assembler.f2_on(&geo, &ut.pi, &ut.h)?)
    } else {
        (NodalField::zeros(ut.pi.n_nodes(), ut.pi.components()), NodalField::zeros(ut.h.n_nodes(), ut.h.components()))
    };
    if !options.mask.stiffness {
        stiffness = stiffness.scaled(0.0);
    }
    let system = mass.linear_combination(delta[0], tau, &stiffness);
    let fingerprint = system.fingerprint();
    let solver = SpdSolver::new(system, options.solver_tol)?;

    let n_pi = ut.pi.components();
    let components = ut.components();
    let nodes = ut.pi.n_nodes();
    let rhs: Vec<Vec<f64>> = (0..components)
        .map(|c| {
            let mut past = vec![0.0; nodes];
            for j in 1..=scheme.order() {
                for (p, v) in past.iter_mut().zip(history.get(j - 1).u.component(c)) {
                    *p += delta[j] * v;
                }
            }
            let mp = mass.mul_vec(&past);
            let f = if c < n_pi { f1.component(c) } else { f2.component(c - n_pi) };
            f.iter().zip(&mp).map(|(f, m)| tau * f - m).collect()
        })
        .collect();
    let (solved, stats) = solve_components(&solver, rhs)?;

    let mut u = StateVector::zeros(nodes, ut.h.components());
    for (c, y) in solved.into_iter().enumerate() {
        u.component_mut(c).copy_from_slice(&y);
    }
    if !u.is_finite() {
        return Err(StepError::NonFinite);
    }
    let x = position_update(history, scheme, &u.h);
    let new_geo = validate_position(assembler, history.geometry.as_ref(), &history.newest().x, &x)?;
    let outcome = StepOutcome {
        step: history.index() + 1,
        t: history.time_of(history.index() + 1),
        fingerprint,
        max_relative_residual: stats.relative_residual,
        refinements: stats.refinements,
        corrected_nodes,
        min_sqrt_g: new_geo.min_sqrt_g(),
        length: length_from_geometry(assembler.mesh(), &new_geo),
    };
    history.push_with_geometry(x, u, new_geo);
    Ok(outcome)
}

/// How the first `q − 1` steps are obtained.
#[derive(Clone, Copy)]
pub enum Startup<'a> {
    /// Nodal interpolation of a known solution.
    Exact(&'a dyn ExactSolution),
    /// Backward Euler on a finer grid.
    Bdf1 { max_substeps: usize },
}

impl Default for Startup<'_> {
    fn default() -> Self {
        Startup::Bdf1 { max_substeps: DEFAULT_MAX_SUBSTEPS }
    }
}

pub const DEFAULT_MAX_SUBSTEPS: usize = 4096;

/// Substeps per step so that the backward Euler local error `τ_sub²` stays
/// below `τ^{q+1/2}`, i.e. `⌈τ^{(3−2q)/4}⌉`, clamped to `1..=max`.
pub fn startup_substeps(tau: f64, q: usize, max_substeps: usize) -> usize {
    let raw = tau.powf((3.0 - 2.0 * q as f64) / 4.0).ceil();
    if raw.is_finite() {
        (raw as usize).clamp(1, max_substeps.max(1))
    } else {
        max_substeps.max(1)
    }
}

/// Builds a full history `x⁰ … x^{q−1}` from initial data at time `t0`.
pub fn startup(
    assembler: &Assembler,
    x0: PositionVector,
    u0: StateVector,
    scheme: &BdfScheme,
    tau: f64,
    t0: f64,
    method: Startup<'_>,
    options: &StepOptions,
) -> Result<History, StepError> {
    let q = scheme.order();
    let mut history = History::new(q, tau, t0, x0, u0);
    match method {
        Startup::Exact(exact) => {
            for i in 1..q {
                let (x, u) =
                    exact_nodal_data(exact, assembler.mesh(), t0 + i as f64 * tau).map_err(StepError::Exact)?;
                history.push(x, u);
            }
        }
        Startup::Bdf1 { max_substeps } => {
            if q == 1 {
                return Ok(history);
            }
            let subs = startup_substeps(tau, q, max_substeps);
            let bdf1 = bdf_coefficients(1).expect("order 1 is supported");
            let newest = history.newest().clone();
            let mut fine = History::new(1, tau / subs as f64, t0, newest.x, newest.u);
            debug!("startup: {subs} backward Euler substeps per step");
            for _ in 1..q {
                for _ in 0..subs {
                    step(assembler, &mut fine, &bdf1, options)?;
                }
                let s = fine.newest().clone();
                history.push(s.x, s.u);
            }
        }
    }
    Ok(history)
}

/// Observables recorded at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub step: usize,
    pub t: f64,
    pub length: f64,
    pub min_sqrt_g: f64,
    pub mean_radius: f64,
    /// Largest nodal `|v|`, an approximation of the maximal curvature.
    pub max_curvature: f64,
    pub idempotency_defect: f64,
    pub errors: Option<ErrorRecord>,
}

/// `L∞` in time of the `H¹` errors over all steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorMaxima {
    pub x: f64,
    pub v: f64,
    pub pi: f64,
    pub h: f64,
}

impl ErrorMaxima {
    pub fn update(&mut self, e: &ErrorRecord) {
        self.x = self.x.max(e.x.h1);
        self.v = self.v.max(e.v.h1);
        if let Some(p) = e.pi {
            self.pi = self.pi.max(p.h1);
        }
        if let Some(h) = e.h {
            self.h = self.h.max(h.h1);
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.v, self.pi, self.h]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Completed,
    Singularity { step: usize, t: f64, error: StepError },
    Failure { step: usize, t: f64, error: StepError },
}

impl Termination {
    pub fn from_error(step: usize, t: f64, error: StepError) -> Self {
        if error.is_singularity() {
            Termination::Singularity { step, t, error }
        } else {
            Termination::Failure { step, t, error }
        }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self, Termination::Completed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub records: Vec<FlowRecord>,
    pub termination: Termination,
    pub last: Snapshot,
    pub steps: usize,
    /// Maxima of the nodal errors (discrete solution against the
    /// interpolated exact solution).
    pub max_errors: Option<ErrorMaxima>,
    /// Maxima of the lifted errors, which include the interpolation error.
    pub max_lifted_errors: Option<ErrorMaxima>,
    pub corrected_nodes: usize,
}

#[derive(Clone, Copy)]
pub struct RunOptions<'a> {
    pub final_time: f64,
    pub stride: usize,
    pub step: StepOptions,
    pub exact: Option<&'a dyn ExactSolution>,
}

/// Index of the last step, the first with `t ≥ T`.
pub fn final_step(t0: f64, tau: f64, final_time: f64) -> usize {
    (((final_time - t0) / tau) - 1e-9).ceil().max(0.0) as usize
}

/// Per-step bookkeeping shared by the coupled and baseline drivers.
pub(crate) struct Recorder<'a, 'o> {
    assembler: &'a Assembler,
    exact: Option<&'a dyn ExactSolution>,
    stride: usize,
    last_step: usize,
    pub records: Vec<FlowRecord>,
    pub maxima: Option<ErrorMaxima>,
    pub lifted: Option<ErrorMaxima>,
    observer: &'o mut dyn FnMut(&FlowRecord, &Snapshot),
}

impl<'a, 'o> Recorder<'a, 'o> {
    pub fn new(
        assembler: &'a Assembler,
        exact: Option<&'a dyn ExactSolution>,
        stride: usize,
        last_step: usize,
        observer: &'o mut dyn FnMut(&FlowRecord, &Snapshot),
    ) -> Self {
        let maxima = exact.filter(|e| e.is_material()).map(|_| ErrorMaxima::default());
        Recorder {
            assembler,
            exact,
            stride: stride.max(1),
            last_step,
            records: Vec::new(),
            maxima,
            lifted: maxima,
            observer,
        }
    }

    /// Errors are evaluated at every step; observables only at the stride.
    pub fn observe(&mut self, step: usize, snap: &Snapshot, v: &NodalField, with_u: bool) {
        let view = SolutionView { x: &snap.x, v, u: with_u.then_some(&snap.u) };
        if let (Some(exact), Some(max)) = (self.exact, self.lifted.as_mut()) {
            if snap.t < exact.horizon() {
                match lifted_error_vs_exact(self.assembler, view, exact, snap.t) {
                    Ok(e) => max.update(&e),
                    Err(err) => warn!("lifted error evaluation failed at t = {}: {err}", snap.t),
                }
            }
        }
        let errors = match (self.exact, self.maxima.as_mut()) {
            (Some(exact), Some(max)) if snap.t < exact.horizon() => {
                match error_vs_exact_with(self.assembler, view, exact, snap.t) {
                    Ok(e) => {
                        max.update(&e);
                        Some(e)
                    }
                    Err(err) => {
                        warn!("error evaluation failed at t = {}: {err}", snap.t);
                        None
                    }
                }
            }
            _ => None,
        };
        if !step.is_multiple_of(self.stride) && step != self.last_step {
            return;
        }
        let Ok(geo) = self.assembler.geometry(&snap.x) else {
            return;
        };
        let record = FlowRecord {
            step,
            t: snap.t,
            length: length_from_geometry(self.assembler.mesh(), &geo),
            min_sqrt_g: geo.min_sqrt_g(),
            mean_radius: mean_radius(&snap.x),
            max_curvature: max_node_norm(v),
            idempotency_defect: if with_u { pi_diagnostics(&snap.u.pi).idempotency } else { 0.0 },
            errors,
        };
        (self.observer)(&record, snap);
        self.records.push(record);
    }
}

pub fn max_node_norm(field: &NodalField) -> f64 {
    (0..field.n_nodes()).map(|j| field.node(j).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

/// Runs the coupled scheme from a full history to `T`, calling `observer`
/// on every recorded step (including the startup steps).
pub fn run_flow(
    assembler: &Assembler,
    mut history: History,
    scheme: &BdfScheme,
    options: &RunOptions<'_>,
    observer: &mut dyn FnMut(&FlowRecord, &Snapshot),
) -> FlowResult {
    let last_step = final_step(history.time_of(0), history.tau(), options.final_time);
    let mut rec = Recorder::new(assembler, options.exact, options.stride, last_step, observer);
    let mut startup: Vec<&Snapshot> = history.iter().collect();
    startup.reverse();
    let first = history.index() + 1 - startup.len();
    for (i, s) in startup.into_iter().enumerate() {
        rec.observe(first + i, s, &s.u.h, true);
    }
    let mut termination = Termination::Completed;
    let mut corrected = 0;
    while history.index() < last_step {
        if let Some(exact) = options.exact {
            let n = history.index() + 1;
            let t = history.time_of(n);
            if t >= exact.horizon() {
                let error = StepError::Horizon { t, horizon: exact.horizon() };
                termination = Termination::from_error(n, t, error);
                break;
            }
        }
        match step(assembler, &mut history, scheme, &options.step) {
            Ok(out) => {
                corrected += out.corrected_nodes;
                let s = history.newest();
                rec.observe(out.step, s, &s.u.h, true);
            }
            Err(error) => {
                let n = history.index() + 1;
                termination = Termination::from_error(n, history.time_of(n), error);
                break;
            }
        }
    }
    FlowResult {
        records: rec.records,
        termination,
        last: history.newest().clone(),
        steps: history.index(),
        max_errors: rec.maxima,
        max_lifted_errors: rec.lifted,
        corrected_nodes: corrected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::apply_blocked;
    use crate::geometry::{initial_data, CircleFlow, DEFAULT_PLANE_ROTATION};
    use crate::mesh::{build_circle_mesh, CurveMesh};
    use num_rational::Rational64 as R;
    use rand::{Rng, SeedableRng};

    #[test]
    fn coefficients_low_order() {
        let s = bdf_coefficients(1).unwrap();
        assert_eq!(s.delta_exact(), &[R::from_integer(1), R::from_integer(-1)]);
        assert_eq!(s.gamma_exact(), &[R::from_integer(1)]);
        let s = bdf_coefficients(2).unwrap();
        assert_eq!(s.delta_exact(), &[R::new(3, 2), R::from_integer(-2), R::new(1, 2)]);
        assert_eq!(s.gamma_exact(), &[R::from_integer(2), R::from_integer(-1)]);
    }

    #[test]
    fn coefficient_identities() {
        for q in 1..=5 {
            let s = bdf_coefficients(q).unwrap();
            assert_eq!(s.delta_exact().iter().sum::<R>(), R::from_integer(0));
            assert_eq!(s.gamma_exact().iter().sum::<R>(), R::from_integer(1));
            assert!(s.delta()[0] > 0.0);
            // first-order consistency: Σ j δ_j = −1
            let d1: R = s.delta_exact().iter().enumerate().map(|(j, d)| d * R::from_integer(j as i64)).sum();
            assert_eq!(d1, R::from_integer(-1));
        }
        assert!(bdf_coefficients(0).is_err());
        let err = bdf_coefficients(6).unwrap_err().to_string();
        assert!(err.contains("1..=5"), "{err}");
    }

    #[test]
    fn bdf_differentiates_polynomials_exactly() {
        // Σ δ_j p(t_{n−j}) = τ p'(t_n) for deg p ≤ q, in rational arithmetic
        for q in 1..=5 {
            let s = bdf_coefficients(q).unwrap();
            for deg in 0..=q as u32 {
                let lhs: R = s
                    .delta_exact()
                    .iter()
                    .enumerate()
                    .map(|(j, d)| d * R::from_integer(-(j as i64)).pow(deg as i32))
                    .sum();
                let rhs = if deg == 1 { R::from_integer(1) } else { R::from_integer(0) };
                // p(s) = s^deg at t_n = 0, τ = 1: p'(0) = [deg == 1]
                assert_eq!(lhs, rhs, "q={q} deg={deg}");
            }
        }
    }

    fn field(nodes: usize, comps: usize, f: impl Fn(usize) -> f64) -> NodalField {
        NodalField::from_values(nodes, comps, (0..nodes * comps).map(f).collect()).unwrap()
    }

    fn state(nodes: usize, n: usize, f: impl Fn(usize) -> f64 + Copy) -> StateVector {
        StateVector { pi: field(nodes, n * n, f), h: field(nodes, n, move |i| f(i + 1000)) }
    }

    fn history_from(q: usize, tau: f64, snaps: Vec<(PositionVector, StateVector)>) -> History {
        let mut it = snaps.into_iter();
        let (x, u) = it.next().unwrap();
        let mut h = History::new(q, tau, 0.0, x, u);
        for (x, u) in it {
            h.push(x, u);
        }
        h
    }

    #[test]
    fn extrapolation_examples() {
        let s = bdf_coefficients(2).unwrap();
        let b = (field(3, 2, |i| i as f64), state(3, 2, |i| i as f64));
        let a = (field(3, 2, |i| 2.0 * i as f64 + 1.0), state(3, 2, |i| 0.5 * i as f64));
        let h = history_from(2, 0.1, vec![b.clone(), a.clone()]);
        let (x, u) = extrapolate(&h, &s).unwrap();
        for i in 0..6 {
            assert_eq!(x.values()[i], 2.0 * a.0.values()[i] - b.0.values()[i]);
        }
        assert_eq!(u.h.values()[1], 2.0 * a.1.h.values()[1] - b.1.h.values()[1]);

        for q in 1..=5 {
            let s = bdf_coefficients(q).unwrap();
            let c = (field(4, 2, |i| i as f64 * 0.3 - 1.0), state(4, 2, |i| (i as f64).sin()));
            let h = history_from(q, 0.1, vec![c.clone(); q]);
            let (x, u) = extrapolate(&h, &s).unwrap();
            assert!(x.difference(&c.0).max_abs() < 1e-13);
            assert!(u.pi.difference(&c.1.pi).max_abs() < 1e-13);
        }
    }

    #[test]
    fn extrapolation_reproduces_polynomials() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let tau = 0.01;
        for q in 1..=5 {
            let s = bdf_coefficients(q).unwrap();
            let coef: Vec<Vec<f64>> = (0..6).map(|_| (0..q).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let p = |i: usize, t: f64| coef[i % 6].iter().enumerate().map(|(d, c)| c * t.powi(d as i32)).sum::<f64>();
            let snaps: Vec<_> = (0..q)
                .map(|m| {
                    let t = m as f64 * tau;
                    (field(3, 2, |i| p(i, t)), state(3, 1, |i| p(i, t)))
                })
                .collect();
            let h = history_from(q, tau, snaps);
            let (x, u) = extrapolate(&h, &s).unwrap();
            let tn = q as f64 * tau;
            let expect = field(3, 2, |i| p(i, tn));
            assert!(x.difference(&expect).max_abs() < 1e-12, "q={q}");
            assert!(u.h.difference(&field(3, 1, |i| p(i + 1000, tn))).max_abs() < 1e-12);
        }
    }

    #[test]
    fn history_bookkeeping() {
        let mut h = History::new(3, 0.25, 1.0, field(3, 2, |_| 0.0), state(3, 2, |_| 0.0));
        assert!(!h.is_full());
        for _ in 0..5 {
            h.push(field(3, 2, |_| 0.0), state(3, 2, |_| 0.0));
        }
        assert_eq!(h.len(), 3);
        assert_eq!(h.index(), 5);
        let ts: Vec<f64> = h.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![2.25, 2.0, 1.75]);
    }

    fn circle_setup(e: usize, n: usize) -> (CurveMesh, CircleFlow, PositionVector, StateVector) {
        let flow = CircleFlow::new(1.0, DEFAULT_PLANE_ROTATION, n).unwrap();
        let (mesh, _) = build_circle_mesh(e, 2, 1.0, DEFAULT_PLANE_ROTATION, n).unwrap();
        let (x, u) = initial_data(&flow.initial_curve(), &mesh).unwrap();
        (mesh, flow, x, u)
    }

    #[test]
    fn one_bdf2_step_tracks_radius() {
        let (mesh, flow, x, u) = circle_setup(64, 3);
        let asm = Assembler::new(&mesh);
        let s = bdf_coefficients(2).unwrap();
        let tau = 1e-4;
        let opts = StepOptions::default();
        let mut h = startup(&asm, x, u, &s, tau, 0.0, Startup::Exact(&flow), &opts).unwrap();
        let out = step(&asm, &mut h, &s, &opts).unwrap();
        let r = mean_radius(&h.newest().x);
        let exact = flow.radius(out.t).unwrap();
        assert!((r - exact).abs() < 1e-6, "{r} vs {exact}");
        assert!(out.max_relative_residual <= 1e-12);
    }

    #[test]
    fn system_matrix_matches_operators() {
        let (mesh, flow, x, u) = circle_setup(16, 2);
        let asm = Assembler::new(&mesh);
        let s = bdf_coefficients(2).unwrap();
        let tau = 1e-2;
        let mut h = startup(&asm, x, u, &s, tau, 0.0, Startup::Exact(&flow), &StepOptions::default()).unwrap();
        let (xt, _) = extrapolate(&h, &s).unwrap();
        let ops = asm.operators(&xt).unwrap();
        let expected = ops.mass.linear_combination(1.5, tau, &ops.stiffness).fingerprint();
        let out = step(&asm, &mut h, &s, &StepOptions::default()).unwrap();
        assert_eq!(out.fingerprint, expected);
    }

    #[test]
    fn projection_stays_symmetric() {
        let (mesh, flow, x, u) = circle_setup(32, 3);
        let asm = Assembler::new(&mesh);
        let s = bdf_coefficients(2).unwrap();
        let opts = StepOptions::default();
        let mut h = startup(&asm, x, u, &s, 1e-3, 0.0, Startup::Exact(&flow), &opts).unwrap();
        for _ in 0..100 {
            step(&asm, &mut h, &s, &opts).unwrap();
        }
        assert!(pi_diagnostics(&h.newest().u.pi).symmetry <= 1e-10);
    }

    #[test]
    fn constant_state_is_preserved() {
        let (mesh, _, x, _) = circle_setup(16, 2);
        let asm = Assembler::new(&mesh);
        let nodes = mesh.n_nodes();
        let u = StateVector { pi: NodalField::constant(nodes, &[0.3, 0.1, 0.1, 0.7]), h: NodalField::zeros(nodes, 2) };
        for q in 1..=3 {
            let s = bdf_coefficients(q).unwrap();
            let mut h = History::new(q, 1e-2, 0.0, x.clone(), u.clone());
            for _ in 1..q {
                h.push(x.clone(), u.clone());
            }
            let opts = StepOptions { mask: OperatorMask { stiffness: true, rhs: false }, ..Default::default() };
            step(&asm, &mut h, &s, &opts).unwrap();
            assert!(h.newest().u.pi.difference(&u.pi).max_abs() < 1e-13);
            assert!(h.newest().u.h.max_abs() < 1e-13);
            assert!(h.newest().x.difference(&x).max_abs() < 1e-13);
        }
    }

    #[test]
    fn step_is_linear_in_history_data() {
        let (mesh, flow, x, u) = circle_setup(16, 2);
        let asm = Assembler::new(&mesh);
        let s = bdf_coefficients(2).unwrap();
        let opts = StepOptions { mask: OperatorMask { stiffness: true, rhs: false }, ..Default::default() };
        let h0 = startup(&asm, x, u, &s, 1e-2, 0.0, Startup::Exact(&flow), &opts).unwrap();
        let mut h1 = h0.clone();
        step(&asm, &mut h1, &s, &opts).unwrap();
        let mut h2 = History::new(2, 1e-2, 0.0, h0.get(1).x.clone(), h0.get(1).u.scaled(2.0));
        h2.push(h0.get(0).x.clone(), h0.get(0).u.scaled(2.0));
        // v enters the position update, so only compare u
        let u1 = &h1.newest().u;
        let (x2t, _) = extrapolate(&h2, &s).unwrap();
        let (x1t, _) = extrapolate(&h0, &s).unwrap();
        assert_eq!(x1t, x2t);
        step(&asm, &mut h2, &s, &opts).unwrap();
        let u2 = &h2.newest().u;
        assert!(u2.pi.difference(&u1.pi.scaled(2.0)).max_abs() < 1e-12);
        assert!(u2.h.difference(&u1.h.scaled(2.0)).max_abs() < 1e-12);
    }

    #[test]
    fn pure_recurrence_without_operators() {
        // with f = 0 and A = 0: δ₀uⁿ = −Σ δ_j u^{n−j}, which for polynomial
        // history p gives uⁿ = p(tₙ) − τ p'(tₙ)/δ₀
        let (mesh, _, x, _) = circle_setup(8, 2);
        let asm = Assembler::new(&mesh);
        let nodes = mesh.n_nodes();
        let tau = 0.05;
        for q in 1..=4 {
            let s = bdf_coefficients(q).unwrap();
            let p = |t: f64| 0.2 + 0.3 * t - 0.7 * t.powi(2) + 0.1 * t.powi(q as i32);
            let dp = |t: f64| 0.3 - 1.4 * t + 0.1 * q as f64 * t.powi(q as i32 - 1);
            let snap = |m: usize| {
                let v = p(m as f64 * tau);
                (
                    x.clone(),
                    StateVector { pi: NodalField::constant(nodes, &[v; 4]), h: NodalField::constant(nodes, &[0.0; 2]) },
                )
            };
            let mut h = history_from(q, tau, (0..q).map(snap).collect());
            let opts = StepOptions { mask: OperatorMask { stiffness: false, rhs: false }, ..Default::default() };
            step(&asm, &mut h, &s, &opts).unwrap();
            let tn = q as f64 * tau;
            let expect = p(tn) - tau * dp(tn) / s.delta()[0];
            if q >= 2 {
                assert!((h.newest().u.pi.get(0, 0) - expect).abs() < 1e-12, "q={q}");
            }
        }
    }

    #[test]
    fn startup_paths_agree() {
        let (mesh, flow, x, u) = circle_setup(64, 3);
        let asm = Assembler::new(&mesh);
        let s = bdf_coefficients(2).unwrap();
        let tau = 1e-3;
        let opts = StepOptions::default();
        let exact = startup(&asm, x.clone(), u.clone(), &s, tau, 0.0, Startup::Exact(&flow), &opts).unwrap();
        let bdf1 = startup(&asm, x, u, &s, tau, 0.0, Startup::default(), &opts).unwrap();
        assert_eq!(exact.newest().t, bdf1.newest().t);
        let r = mean_radius(&exact.newest().x);
        assert!((r - flow.radius(tau).unwrap()).abs() < 1e-6);
        let ops = asm.operators(&exact.newest().x).unwrap();
        let d = crate::analysis::norms_with(&ops.mass, &ops.stiffness, &bdf1.newest().x.difference(&exact.newest().x));
        assert!(d.h1 <= 1e-5, "{}", d.h1);
    }

    #[test]
    fn substep_bookkeeping() {
        for q in 1..=5 {
            for tau in [1e-1, 1e-2, 1e-3, 1e-4] {
                let n = startup_substeps(tau, q, DEFAULT_MAX_SUBSTEPS);
                assert!((1..=DEFAULT_MAX_SUBSTEPS).contains(&n));
                let sub = tau / n as f64;
                if n < DEFAULT_MAX_SUBSTEPS {
                    assert!(sub * sub <= tau.powf(q as f64 + 0.5) * (1.0 + 1e-12));
                }
                // total span of the substeps is (q − 1)τ
                let span = (q - 1) as f64 * n as f64 * sub;
                assert!((span - (q - 1) as f64 * tau).abs() < 1e-15);
            }
        }
    }

    fn circle_run(e: usize, tau: f64, t_end: f64) -> FlowResult {
        let (mesh, flow, x, u) = circle_setup(e, 3);
        let asm = Assembler::new(&mesh);
        let s = bdf_coefficients(2).unwrap();
        let opts = StepOptions::default();
        let h = startup(&asm, x, u, &s, tau, 0.0, Startup::Exact(&flow), &opts).unwrap();
        let run = RunOptions { final_time: t_end, stride: 1, step: opts, exact: Some(&flow) };
        run_flow(&asm, h, &s, &run, &mut |_, _| {})
    }

    #[test]
    fn circle_run_completes_and_shortens() {
        let res = circle_run(32, 1e-2, 0.4);
        assert!(res.termination.is_completed(), "{:?}", res.termination);
        assert_eq!(res.steps, 40);
        assert_eq!(res.records.len(), 41);
        for w in res.records.windows(2) {
            assert!(w[1].length < w[0].length);
        }
        let m = res.max_errors.unwrap();
        assert!(m.x < 1e-2 && m.h < 0.2, "{m:?}");
    }

    #[test]
    fn circle_past_horizon_stops_at_singularity() {
        let res = circle_run(16, 1e-2, 0.51);
        match res.termination {
            Termination::Singularity { t, step, .. } => {
                assert_eq!(step, 50);
                assert!((0.5..0.51).contains(&t), "{t}");
            }
            other => panic!("{other:?}"),
        }
        assert!(res.last.x.is_finite());
    }

    #[test]
    fn blocked_mass_is_componentwise() {
        let (mesh, _, x, _) = circle_setup(8, 2);
        let m = Assembler::new(&mesh).mass(&x).unwrap();
        let b = apply_blocked(&m, &x).unwrap();
        assert_eq!(b.component(1), m.mul_vec(x.component(1)).as_slice());
    }
}
