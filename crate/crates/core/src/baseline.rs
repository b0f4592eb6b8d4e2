//! Linearly implicit BDF version of Dziuk's curve shortening scheme,
//! `M(x̃ⁿ) ẋⁿ + A(x̃ⁿ) xⁿ = 0`, for side-by-side comparisons.

use std::collections::VecDeque;

use crate::assembly::Assembler;
use crate::error::StepError;
use crate::geometry::exact_nodal_data;
use crate::mesh::{NodalField, PositionVector, QuadGeometry, StateVector};
use crate::sparse::{SpdSolver, DEFAULT_RESIDUAL_TOLERANCE};
use crate::stepper::{
    bdf_coefficients, final_step, run_flow, solve_components, startup, startup_substeps, validate_position, BdfScheme,
    FlowResult, History, Recorder, RunOptions, Snapshot, Startup, StepOptions, Termination,
};

/// The last `q` positions, newest first.
#[derive(Debug, Clone)]
pub struct DziukHistory {
    tau: f64,
    capacity: usize,
    origin: f64,
    newest: usize,
    positions: VecDeque<PositionVector>,
    geometry: Option<QuadGeometry>,
}

impl DziukHistory {
    pub fn new(capacity: usize, tau: f64, origin: f64, x: PositionVector) -> Self {
        let mut positions = VecDeque::with_capacity(capacity);
        positions.push_front(x);
        DziukHistory { tau, capacity: capacity.max(1), origin, newest: 0, positions, geometry: None }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.positions.len() == self.capacity
    }

    pub fn index(&self) -> usize {
        self.newest
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.origin + index as f64 * self.tau
    }

    /// `j = 0` is the newest position.
    pub fn get(&self, j: usize) -> &PositionVector {
        &self.positions[j]
    }

    pub fn push(&mut self, x: PositionVector) {
        self.newest += 1;
        if self.positions.len() == self.capacity {
            self.positions.pop_back();
        }
        self.positions.push_front(x);
        self.geometry = None;
    }
}

/// One step of the baseline; returns the discrete velocity
/// `(δ₀xⁿ + Σ δ_j x^{n−j})/τ` and pushes `xⁿ`.
pub fn dziuk_step(
    assembler: &Assembler,
    history: &mut DziukHistory,
    scheme: &BdfScheme,
    options: &StepOptions,
) -> Result<NodalField, StepError> {
    let q = scheme.order();
    if history.len() != q || history.capacity != q {
        return Err(StepError::History { expected: q, found: history.len() });
    }
    let tau = history.tau();
    let delta = scheme.delta();
    let mut xt = history.get(0).scaled(scheme.gamma()[0]);
    for (j, &g) in scheme.gamma().iter().enumerate().skip(1) {
        xt.axpy(g, history.get(j));
    }
    if !xt.is_finite() {
        return Err(StepError::NonFinite);
    }
    let geo = assembler.geometry(&xt)?;
    let (mass, stiffness) = assembler.operators_on(&geo);
    let system = mass.linear_combination(delta[0], tau, &stiffness);
    let solver = SpdSolver::new(system, options.solver_tol)?;

    let mut past = NodalField::zeros(xt.n_nodes(), xt.components());
    for j in 1..=q {
        past.axpy(delta[j], history.get(j - 1));
    }
    let rhs: Vec<Vec<f64>> =
        (0..xt.components()).map(|c| mass.mul_vec(past.component(c)).into_iter().map(|v| -v).collect()).collect();
    let (solved, _) = solve_components(&solver, rhs)?;
    let mut x = NodalField::zeros(xt.n_nodes(), xt.components());
    for (c, y) in solved.into_iter().enumerate() {
        x.component_mut(c).copy_from_slice(&y);
    }
    let new_geo = validate_position(assembler, history.geometry.as_ref(), history.get(0), &x)?;
    let mut v = x.scaled(delta[0] / tau);
    v.axpy(1.0 / tau, &past);
    history.push(x);
    history.geometry = Some(new_geo);
    Ok(v)
}

/// Discrete curvature vector `−M⁻¹A x`, standing in for the velocity at
/// startup steps; zero if the curve is degenerate.
fn discrete_curvature(assembler: &Assembler, x: &PositionVector) -> NodalField {
    let mut v = NodalField::zeros(x.n_nodes(), x.components());
    let Ok(ops) = assembler.operators(x) else {
        return v;
    };
    let Ok(solver) = SpdSolver::new(ops.mass, DEFAULT_RESIDUAL_TOLERANCE) else {
        return v;
    };
    for c in 0..x.components() {
        let rhs: Vec<f64> = ops.stiffness.mul_vec(x.component(c)).iter().map(|a| -a).collect();
        if let Ok((sol, _)) = solver.solve(&rhs) {
            v.component_mut(c).copy_from_slice(&sol);
        }
    }
    v
}

fn snapshot(t: f64, x: &PositionVector, v: &NodalField) -> Snapshot {
    let n = x.components();
    Snapshot { t, x: x.clone(), u: StateVector { pi: NodalField::zeros(x.n_nodes(), n * n), h: v.clone() } }
}

/// Startup positions `x¹ … x^{q−1}`, mirroring the coupled scheme.
pub fn dziuk_startup(
    assembler: &Assembler,
    x0: PositionVector,
    scheme: &BdfScheme,
    tau: f64,
    t0: f64,
    method: Startup<'_>,
    options: &StepOptions,
) -> Result<DziukHistory, StepError> {
    let q = scheme.order();
    let mut history = DziukHistory::new(q, tau, t0, x0);
    match method {
        Startup::Exact(exact) => {
            for i in 1..q {
                let (x, _) =
                    exact_nodal_data(exact, assembler.mesh(), t0 + i as f64 * tau).map_err(StepError::Exact)?;
                history.push(x);
            }
        }
        Startup::Bdf1 { max_substeps } => {
            if q > 1 {
                let subs = startup_substeps(tau, q, max_substeps);
                let bdf1 = bdf_coefficients(1).expect("order 1 is supported");
                let mut fine = DziukHistory::new(1, tau / subs as f64, t0, history.get(0).clone());
                for _ in 1..q {
                    for _ in 0..subs {
                        dziuk_step(assembler, &mut fine, &bdf1, options)?;
                    }
                    history.push(fine.get(0).clone());
                }
            }
        }
    }
    Ok(history)
}

/// Runs the baseline to `T`. Snapshots passed to `observer` carry the
/// discrete velocity in the `H` slot and a zero projection.
pub fn run_dziuk(
    assembler: &Assembler,
    mut history: DziukHistory,
    scheme: &BdfScheme,
    options: &RunOptions<'_>,
    observer: &mut dyn FnMut(&crate::stepper::FlowRecord, &Snapshot),
) -> FlowResult {
    let last_step = final_step(history.time_of(0), history.tau(), options.final_time);
    let mut rec = Recorder::new(assembler, options.exact, options.stride, last_step, observer);
    let first = history.index() + 1 - history.len();
    for i in (0..history.len()).rev() {
        let step = first + (history.len() - 1 - i);
        let x = history.get(i);
        // startup velocities are not available from positions alone
        let v = match options.exact {
            Some(exact) if exact.is_material() => exact_nodal_data(exact, assembler.mesh(), history.time_of(step))
                .map(|(_, u)| u.h)
                .unwrap_or_else(|_| discrete_curvature(assembler, x)),
            _ => discrete_curvature(assembler, x),
        };
        let s = snapshot(history.time_of(step), x, &v);
        rec.observe(step, &s, &v, false);
    }
    let mut termination = Termination::Completed;
    let mut last =
        snapshot(history.time_of(history.index()), history.get(0), &discrete_curvature(assembler, history.get(0)));
    while history.index() < last_step {
        let n = history.index() + 1;
        let t = history.time_of(n);
        if let Some(exact) = options.exact {
            if t >= exact.horizon() {
                let error = StepError::Horizon { t, horizon: exact.horizon() };
                termination = Termination::from_error(n, t, error);
                break;
            }
        }
        match dziuk_step(assembler, &mut history, scheme, &options.step) {
            Ok(v) => {
                last = snapshot(t, history.get(0), &v);
                rec.observe(n, &last, &v, false);
            }
            Err(error) => {
                termination = Termination::from_error(n, t, error);
                break;
            }
        }
    }
    FlowResult {
        records: rec.records,
        termination,
        last,
        steps: history.index(),
        max_errors: rec.maxima,
        max_lifted_errors: rec.lifted,
        corrected_nodes: 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedRuns {
    pub coupled: Result<FlowResult, StepError>,
    pub dziuk: Result<FlowResult, StepError>,
}

/// Runs the coupled scheme and the baseline from the same initial data,
/// concurrently. Startup failures are reported per method.
#[allow(clippy::too_many_arguments)]
pub fn compare_runs(
    assembler: &Assembler,
    x0: &PositionVector,
    u0: &StateVector,
    scheme: &BdfScheme,
    tau: f64,
    method: Startup<'_>,
    options: &RunOptions<'_>,
    coupled_observer: &mut (dyn FnMut(&crate::stepper::FlowRecord, &Snapshot) + Send),
    dziuk_observer: &mut (dyn FnMut(&crate::stepper::FlowRecord, &Snapshot) + Send),
) -> PairedRuns {
    let (coupled, dziuk) = rayon::join(
        || {
            startup(assembler, x0.clone(), u0.clone(), scheme, tau, 0.0, method, &options.step)
                .map(|h: History| run_flow(assembler, h, scheme, options, coupled_observer))
        },
        || {
            dziuk_startup(assembler, x0.clone(), scheme, tau, 0.0, method, &options.step)
                .map(|h| run_dziuk(assembler, h, scheme, options, dziuk_observer))
        },
    );
    PairedRuns { coupled, dziuk }
}
