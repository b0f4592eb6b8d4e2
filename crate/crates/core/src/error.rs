use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("degenerate element {element} at quadrature point {quad}: sqrt(g) = {sqrt_g:e}")]
    DegenerateElement { element: usize, quad: usize, sqrt_g: f64 },
    #[error("element {element} reversed orientation between steps (curve passed through a collapse)")]
    Inverted { element: usize },
    #[error("non-finite node coordinate at node {node}")]
    NonFinite { node: usize },
    #[error("degenerate parametrization at theta = {theta}: |X'| = {speed:e}")]
    DegenerateParametrization { theta: f64, speed: f64 },
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("arc-length inversion failed: {0}")]
    ArcLength(String),
    #[error("field length {found} does not match {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssemblyError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("dimension mismatch: expected {expected} components, found {found}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("linear solve residual {relative:e} exceeds tolerance {tolerance:e}")]
    Residual { relative: f64, tolerance: f64 },
    #[error("right-hand side length {found} does not match system size {expected}")]
    Length { expected: usize, found: usize },
}

/// Failure of a single time step.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    /// Geometry degenerated: the flow has reached (or numerically crossed) a singularity.
    #[error("singularity: {0}")]
    Singularity(MeshError),
    #[error("solver failure: {0}")]
    Solver(#[from] SolverError),
    #[error("non-finite values in solution")]
    NonFinite,
    #[error(transparent)]
    Assembly(AssemblyError),
    #[error("history holds {found} snapshots, scheme needs {expected}")]
    History { expected: usize, found: usize },
    #[error("flow reaches its singular time {horizon} at t = {t}")]
    Horizon { t: f64, horizon: f64 },
    #[error("exact startup data: {0}")]
    Exact(GeometryError),
}

impl From<AssemblyError> for StepError {
    fn from(e: AssemblyError) -> Self {
        match e {
            AssemblyError::Mesh(m) => StepError::Singularity(m),
            other => StepError::Assembly(other),
        }
    }
}

impl From<MeshError> for StepError {
    fn from(e: MeshError) -> Self {
        StepError::Singularity(e)
    }
}

impl StepError {
    pub fn is_singularity(&self) -> bool {
        matches!(self, StepError::Singularity(_) | StepError::NonFinite | StepError::Horizon { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("curve is not an immersion near theta = {theta}: |X'| = {speed:e}")]
    NotImmersed { theta: f64, speed: f64 },
    #[error("quadrature failed to converge: {0}")]
    Quadrature(String),
    #[error("time {t} beyond exact-solution horizon {horizon}")]
    Horizon { t: f64, horizon: f64 },
    #[error("invalid curve parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("field has {found} entries, expected {expected}")]
    Length { expected: usize, found: usize },
    #[error("EOC needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("EOC parameters must be positive and strictly monotone")]
    NonMonotone,
    #[error("eigendecomposition failed: non-finite input")]
    NonFinite,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}
