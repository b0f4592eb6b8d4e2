//! Experiment configuration files (TOML, one experiment per file).
//!
//! ```toml
//! [curve]
//! name = "circle"          # circle | ellipse | trefoil | sinusoid | angenent
//! radius = 1.0
//! ambient_dim = 3
//!
//! [discretization]
//! degree = 2
//! dof = 128                # or: elements = 64
//!
//! [method]
//! name = "both"            # coupled | dziuk | both
//! q = 2
//! tau = 0.0125
//! final_time = 0.4875
//!
//! [output]
//! dir = "circle_compare"
//! stride = 1
//! ```

use std::path::{Path, PathBuf};

use log::warn;
use serde::Deserialize;

use crate::error::ConfigError;
use crate::stepper::{bdf_coefficients, MAX_BDF_ORDER};

/// Overrides the root directory that relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "MCF_OUTPUT_ROOT";

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    curve: Option<RawCurve>,
    discretization: Option<RawDiscretization>,
    method: Option<RawMethod>,
    #[serde(default)]
    output: RawOutput,
    converge: Option<RawConverge>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCurve {
    name: Option<String>,
    ambient_dim: Option<usize>,
    radius: Option<f64>,
    rotation: Option<f64>,
    a: Option<f64>,
    b: Option<f64>,
    scale: Option<f64>,
    amplitude: Option<f64>,
    frequency: Option<u32>,
    t0: Option<f64>,
    exact: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDiscretization {
    degree: Option<usize>,
    elements: Option<usize>,
    dof: Option<usize>,
    quad_points: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMethod {
    name: Option<String>,
    q: Option<usize>,
    tau: Option<f64>,
    final_time: Option<f64>,
    idempotency: Option<bool>,
    idempotency_tol: Option<f64>,
    startup: Option<String>,
    solver_tol: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
    stride: Option<usize>,
    snapshots: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConverge {
    study: Option<String>,
    elements: Option<Vec<usize>>,
    taus: Option<Vec<f64>>,
    workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CurveSpec {
    Circle { radius: f64, rotation: f64 },
    Ellipse { a: f64, b: f64 },
    Trefoil { scale: f64 },
    Sinusoid { amplitude: f64, frequency: u32 },
    Angenent { t0: f64 },
}

impl CurveSpec {
    pub fn name(&self) -> &'static str {
        match self {
            CurveSpec::Circle { .. } => "circle",
            CurveSpec::Ellipse { .. } => "ellipse",
            CurveSpec::Trefoil { .. } => "trefoil",
            CurveSpec::Sinusoid { .. } => "sinusoid",
            CurveSpec::Angenent { .. } => "angenent",
        }
    }

    pub fn has_exact_solution(&self) -> bool {
        matches!(self, CurveSpec::Circle { .. } | CurveSpec::Angenent { .. })
    }

    /// Whether the exact solution labels material points.
    pub fn has_material_exact_solution(&self) -> bool {
        matches!(self, CurveSpec::Circle { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Coupled,
    Dziuk,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartupKind {
    Exact,
    Bdf1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Space,
    Time,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeSpec {
    pub study: Study,
    pub elements: Vec<usize>,
    pub taus: Vec<f64>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub curve: CurveSpec,
    pub ambient_dim: usize,
    pub degree: usize,
    pub elements: usize,
    pub quad_points: Option<usize>,
    pub q: usize,
    pub tau: f64,
    pub final_time: f64,
    pub method: MethodKind,
    pub idempotency_tol: Option<f64>,
    pub startup: StartupKind,
    pub solver_tol: f64,
    pub output_dir: PathBuf,
    pub stride: usize,
    pub snapshots: bool,
    pub register_exact: bool,
    pub converge: Option<ConvergeSpec>,
}

pub const DEFAULT_IDEMPOTENCY_TOL: f64 = 1e-2;

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.into() }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be a positive number, got {v}")))
    }
}

fn required<T>(v: Option<T>, key: &str) -> Result<T, ConfigError> {
    v.ok_or_else(|| ConfigError::Missing(key.into()))
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        Self::parse(&text, stem, root.as_deref())
    }

    /// Parses config text; `default_dir` names the output directory when the
    /// file gives none, `root` prefixes relative output directories.
    pub fn parse(text: &str, default_dir: &str, root: Option<&Path>) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let curve_raw = required(raw.curve, "curve")?;
        let name = required(curve_raw.name.clone(), "curve.name")?;
        let ambient_dim = curve_raw.ambient_dim.unwrap_or(3);
        if ambient_dim < 2 {
            return Err(invalid("curve.ambient_dim", "must be at least 2"));
        }
        let curve = match name.as_str() {
            "circle" => CurveSpec::Circle {
                radius: positive("curve.radius", curve_raw.radius.unwrap_or(1.0))?,
                rotation: curve_raw.rotation.unwrap_or(crate::geometry::DEFAULT_PLANE_ROTATION),
            },
            "ellipse" => CurveSpec::Ellipse {
                a: positive("curve.a", curve_raw.a.unwrap_or(2.0))?,
                b: positive("curve.b", curve_raw.b.unwrap_or(1.0))?,
            },
            "trefoil" => CurveSpec::Trefoil { scale: positive("curve.scale", curve_raw.scale.unwrap_or(1.0))? },
            "sinusoid" => CurveSpec::Sinusoid {
                amplitude: curve_raw.amplitude.unwrap_or(0.5),
                frequency: match curve_raw.frequency.unwrap_or(4) {
                    0 => return Err(invalid("curve.frequency", "must be at least 1")),
                    f => f,
                },
            },
            "angenent" => {
                let t0 = required(curve_raw.t0, "curve.t0")?;
                if !(t0 < 0.0) {
                    return Err(invalid("curve.t0", format!("must be negative, got {t0}")));
                }
                CurveSpec::Angenent { t0 }
            }
            other => {
                return Err(invalid(
                    "curve.name",
                    format!("unknown curve `{other}` (expected circle, ellipse, trefoil, sinusoid or angenent)"),
                ))
            }
        };
        if matches!(curve, CurveSpec::Trefoil { .. } | CurveSpec::Sinusoid { .. }) && ambient_dim < 3 {
            return Err(invalid("curve.ambient_dim", format!("{} needs at least 3 dimensions", curve.name())));
        }
        let register_exact = curve_raw.exact.unwrap_or(curve.has_exact_solution());
        if register_exact && !curve.has_exact_solution() {
            return Err(invalid("curve.exact", format!("no exact solution is known for {}", curve.name())));
        }

        let disc = raw.discretization.unwrap_or_default();
        let degree = disc.degree.unwrap_or(2);
        if !(1..=4).contains(&degree) {
            return Err(invalid("discretization.degree", format!("supported degrees are 1..=4, got {degree}")));
        }
        let elements = match (disc.elements, disc.dof) {
            (Some(_), Some(_)) => return Err(invalid("discretization", "give either `elements` or `dof`, not both")),
            (Some(e), None) => e,
            (None, Some(dof)) => {
                if dof % degree != 0 {
                    return Err(invalid("discretization.dof", format!("{dof} is not divisible by degree {degree}")));
                }
                dof / degree
            }
            (None, None) => {
                if raw.converge.as_ref().and_then(|c| c.elements.as_ref()).is_some() {
                    0
                } else {
                    return Err(ConfigError::Missing("discretization.elements".into()));
                }
            }
        };
        if elements != 0 && elements < 3 {
            return Err(invalid("discretization.elements", "a closed curve needs at least 3 elements"));
        }
        if let Some(nq) = disc.quad_points {
            if nq < degree + 1 || nq > 32 {
                return Err(invalid("discretization.quad_points", format!("must be in {}..=32", degree + 1)));
            }
        }

        let m = required(raw.method, "method")?;
        let method = match m.name.as_deref().unwrap_or("coupled") {
            "coupled" => MethodKind::Coupled,
            "dziuk" => MethodKind::Dziuk,
            "both" => MethodKind::Both,
            other => return Err(invalid("method.name", format!("unknown method `{other}` (coupled, dziuk, both)"))),
        };
        let q = m.q.unwrap_or(2);
        bdf_coefficients(q).map_err(|_| {
            invalid("method.q", format!("BDF order {q} unsupported; supported range is 1..={MAX_BDF_ORDER}"))
        })?;
        let tau_given = m.tau;
        let converge_taus = raw.converge.as_ref().and_then(|c| c.taus.clone());
        let tau = match (tau_given, &converge_taus) {
            (Some(t), _) => positive("method.tau", t)?,
            (None, Some(_)) => 0.0,
            (None, None) => return Err(ConfigError::Missing("method.tau".into())),
        };
        let final_time = positive("method.final_time", required(m.final_time, "method.final_time")?)?;
        if tau > final_time {
            return Err(invalid("method.tau", format!("step {tau} exceeds final time {final_time}")));
        }
        let idempotency_tol = match (m.idempotency.unwrap_or(false), m.idempotency_tol) {
            (true, tol) => Some(positive("method.idempotency_tol", tol.unwrap_or(DEFAULT_IDEMPOTENCY_TOL))?),
            (false, _) => None,
        };
        let startup = match m.startup.as_deref() {
            None if register_exact && curve.has_material_exact_solution() => StartupKind::Exact,
            None => StartupKind::Bdf1,
            Some("exact") => {
                if !(register_exact && curve.has_material_exact_solution()) {
                    return Err(invalid(
                        "method.startup",
                        format!(
                            "exact startup needs a registered exact solution in material form; {} has none",
                            curve.name()
                        ),
                    ));
                }
                StartupKind::Exact
            }
            Some("bdf1") => StartupKind::Bdf1,
            Some(other) => return Err(invalid("method.startup", format!("unknown startup `{other}` (exact, bdf1)"))),
        };
        let solver_tol =
            positive("method.solver_tol", m.solver_tol.unwrap_or(crate::sparse::DEFAULT_RESIDUAL_TOLERANCE))?;

        let dir = PathBuf::from(raw.output.dir.unwrap_or_else(|| default_dir.to_string()));
        let output_dir = match root {
            Some(root) if dir.is_relative() => root.join(dir),
            _ => dir,
        };
        let stride = raw.output.stride.unwrap_or(1);
        if stride == 0 {
            return Err(invalid("output.stride", "must be at least 1"));
        }

        let converge = match raw.converge {
            None => None,
            Some(c) => {
                let study = match c.study.as_deref() {
                    Some("space") => Study::Space,
                    Some("time") => Study::Time,
                    Some(other) => {
                        return Err(invalid("converge.study", format!("unknown study `{other}` (space, time)")))
                    }
                    None => return Err(ConfigError::Missing("converge.study".into())),
                };
                let elements = c.elements.unwrap_or_else(|| vec![elements]);
                let taus = c.taus.unwrap_or_else(|| vec![tau]);
                if elements.iter().any(|&e| e < 3) {
                    return Err(invalid("converge.elements", "every level needs at least 3 elements"));
                }
                for &t in &taus {
                    positive("converge.taus", t)?;
                }
                let levels = match study {
                    Study::Space => elements.len(),
                    Study::Time => taus.len(),
                };
                if levels < 2 {
                    return Err(invalid("converge", "EOC needs at least 2 levels"));
                }
                if !curve.has_material_exact_solution() || !register_exact {
                    return Err(invalid(
                        "converge",
                        format!("convergence studies need the exact {} solution", curve.name()),
                    ));
                }
                Some(ConvergeSpec { study, elements, taus, workers: c.workers.unwrap_or(1).max(1) })
            }
        };
        if converge.is_none() && (elements == 0 || tau == 0.0) {
            return Err(ConfigError::Missing(
                if elements == 0 { "discretization.elements" } else { "method.tau" }.into(),
            ));
        }

        let config = RunConfig {
            curve,
            ambient_dim,
            degree,
            elements,
            quad_points: disc.quad_points,
            q,
            tau,
            final_time,
            method,
            idempotency_tol,
            startup,
            solver_tol,
            output_dir,
            stride,
            snapshots: raw.output.snapshots.unwrap_or(true),
            register_exact,
            converge,
        };
        for w in config.warnings() {
            warn!("{w}");
        }
        Ok(config)
    }

    /// Parameters outside the range covered by the convergence theory.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.degree < 2 {
            w.push(format!("degree k = {} is below 2; convergence is only established for k >= 2", self.degree));
        }
        if !(2..=5).contains(&self.q) {
            w.push(format!("BDF order q = {} is outside 2..=5; convergence is only established there", self.q));
        }
        w
    }

    pub fn dof(&self) -> usize {
        self.elements * self.degree
    }
}
