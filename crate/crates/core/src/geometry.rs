//! Test curves, exact flows and exact initial data `(π⁰, H⁰)`.
//!
//! Curves are `2π`-periodic maps `θ ↦ X(θ) ∈ Rⁿ`. For a curve the tangent
//! projection is `π = t ⊗ t` with `t = X'/|X'|`, and the curvature vector is
//! the normal part of `X''/|X'|²`:
//!
//! ```text
//! H = X''/|X'|² − (X'·X''/|X'|⁴) X'
//! ```
//!
//! which points towards the centre of curvature and has length `1/R` on a
//! circle of radius `R`.

use std::f64::consts::{E, PI, TAU};

use crate::error::GeometryError;
use crate::mesh::{CurveMesh, NodalField, PositionVector, StateVector};

/// The in-plane angle used by the convergence experiments.
pub const DEFAULT_PLANE_ROTATION: f64 = PI / E;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Column-major `n×n` outer product `a ⊗ b`, entry `(α, β)` at `α + nβ`.
pub fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m = vec![0.0; n * n];
    for beta in 0..n {
        for alpha in 0..n {
            m[alpha + n * beta] = a[alpha] * b[beta];
        }
    }
    m
}

/// Tangent projection `t ⊗ t` from a (not necessarily unit) tangent.
pub fn tangent_projection(d1: &[f64]) -> Vec<f64> {
    let s = norm(d1);
    let t: Vec<f64> = d1.iter().map(|v| v / s).collect();
    outer(&t, &t)
}

/// Curvature vector of a parametrized curve from `X'` and `X''`.
pub fn curvature_vector(d1: &[f64], d2: &[f64]) -> Vec<f64> {
    let g = dot(d1, d1);
    let c = dot(d1, d2) / (g * g);
    d1.iter().zip(d2).map(|(a, b)| b / g - c * a).collect()
}

/// Orthonormal pair spanning the plane of a rotated planar curve in `Rⁿ`.
///
/// For `n = 2` the angle rotates within the plane. For `n ≥ 3` the `x`–`y`
/// plane is tilted so that neither spanning vector is axis-aligned unless
/// `angle = 0`.
pub fn plane_basis(angle: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (s, c) = angle.sin_cos();
    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    if n == 2 {
        u1[0] = c;
        u1[1] = s;
        u2[0] = -s;
        u2[1] = c;
    } else {
        u1[0] = c;
        u1[1] = s;
        u2[0] = -s * c;
        u2[1] = c * c;
        u2[2] = s;
    }
    (u1, u2)
}

pub trait ParametrizedCurve: Send + Sync {
    fn name(&self) -> &str;
    fn ambient_dim(&self) -> usize;
    fn position(&self, theta: f64) -> Vec<f64>;
    fn d1(&self, theta: f64) -> Vec<f64>;
    fn d2(&self, theta: f64) -> Vec<f64>;

    fn speed(&self, theta: f64) -> f64 {
        norm(&self.d1(theta))
    }
}

/// Checks `|X'| > tol` at `samples` equispaced parameters.
pub fn check_immersion(curve: &dyn ParametrizedCurve, samples: usize, tol: f64) -> Result<f64, GeometryError> {
    let mut min_speed = f64::INFINITY;
    for i in 0..samples {
        let theta = TAU * i as f64 / samples as f64;
        let s = curve.speed(theta);
        if !(s > tol) {
            return Err(GeometryError::NotImmersed { theta, speed: s });
        }
        min_speed = min_speed.min(s);
    }
    Ok(min_speed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Circle {
    pub radius: f64,
    u1: Vec<f64>,
    u2: Vec<f64>,
}

impl Circle {
    pub fn new(radius: f64, rotation: f64, ambient_dim: usize) -> Self {
        let (u1, u2) = plane_basis(rotation, ambient_dim);
        Circle { radius, u1, u2 }
    }

    fn combine(&self, a: f64, b: f64) -> Vec<f64> {
        self.u1.iter().zip(&self.u2).map(|(x, y)| self.radius * (a * x + b * y)).collect()
    }
}

impl ParametrizedCurve for Circle {
    fn name(&self) -> &str {
        "circle"
    }
    fn ambient_dim(&self) -> usize {
        self.u1.len()
    }
    fn position(&self, theta: f64) -> Vec<f64> {
        self.combine(theta.cos(), theta.sin())
    }
    fn d1(&self, theta: f64) -> Vec<f64> {
        self.combine(-theta.sin(), theta.cos())
    }
    fn d2(&self, theta: f64) -> Vec<f64> {
        self.combine(-theta.cos(), -theta.sin())
    }
}

/// Axis-aligned ellipse `(a cos θ, b sin θ)` in the first two coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipse {
    pub a: f64,
    pub b: f64,
    pub ambient_dim: usize,
}

impl Ellipse {
    fn pad(&self, x: f64, y: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.ambient_dim];
        v[0] = x;
        v[1] = y;
        v
    }
}

impl ParametrizedCurve for Ellipse {
    fn name(&self) -> &str {
        "ellipse"
    }
    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    fn position(&self, theta: f64) -> Vec<f64> {
        self.pad(self.a * theta.cos(), self.b * theta.sin())
    }
    fn d1(&self, theta: f64) -> Vec<f64> {
        self.pad(-self.a * theta.sin(), self.b * theta.cos())
    }
    fn d2(&self, theta: f64) -> Vec<f64> {
        self.pad(-self.a * theta.cos(), -self.b * theta.sin())
    }
}

/// `((2 + cos 3θ) cos 2θ, (2 + cos 3θ) sin 2θ, sin 3θ) · scale`
#[derive(Debug, Clone, PartialEq)]
pub struct Trefoil {
    pub scale: f64,
    pub ambient_dim: usize,
}

impl Trefoil {
    pub fn new(scale: f64, ambient_dim: usize) -> Result<Self, GeometryError> {
        if !(scale > 0.0) {
            return Err(GeometryError::Parameter(format!("trefoil scale {scale} must be > 0")));
        }
        if ambient_dim < 3 {
            return Err(GeometryError::Parameter("trefoil needs ambient_dim >= 3".into()));
        }
        Ok(Trefoil { scale, ambient_dim })
    }

    fn pad(&self, v: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim];
        for i in 0..3 {
            out[i] = self.scale * v[i];
        }
        out
    }
}

impl ParametrizedCurve for Trefoil {
    fn name(&self) -> &str {
        "trefoil"
    }
    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    fn position(&self, th: f64) -> Vec<f64> {
        let r = 2.0 + (3.0 * th).cos();
        self.pad([r * (2.0 * th).cos(), r * (2.0 * th).sin(), (3.0 * th).sin()])
    }
    fn d1(&self, th: f64) -> Vec<f64> {
        let r = 2.0 + (3.0 * th).cos();
        let dr = -3.0 * (3.0 * th).sin();
        let (s2, c2) = (2.0 * th).sin_cos();
        self.pad([dr * c2 - 2.0 * r * s2, dr * s2 + 2.0 * r * c2, 3.0 * (3.0 * th).cos()])
    }
    fn d2(&self, th: f64) -> Vec<f64> {
        let r = 2.0 + (3.0 * th).cos();
        let dr = -3.0 * (3.0 * th).sin();
        let ddr = -9.0 * (3.0 * th).cos();
        let (s2, c2) = (2.0 * th).sin_cos();
        self.pad([
            ddr * c2 - 4.0 * dr * s2 - 4.0 * r * c2,
            ddr * s2 + 4.0 * dr * c2 - 4.0 * r * s2,
            -9.0 * (3.0 * th).sin(),
        ])
    }
}

/// `(cos θ, sin θ, amplitude · sin(frequency · θ))`
#[derive(Debug, Clone, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency: u32,
    pub ambient_dim: usize,
}

impl Sinusoid {
    pub fn new(amplitude: f64, frequency: u32, ambient_dim: usize) -> Result<Self, GeometryError> {
        if frequency == 0 {
            return Err(GeometryError::Parameter("sinusoid frequency must be >= 1".into()));
        }
        if ambient_dim < 3 {
            return Err(GeometryError::Parameter("sinusoid needs ambient_dim >= 3".into()));
        }
        Ok(Sinusoid { amplitude, frequency, ambient_dim })
    }

    fn pad(&self, v: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim];
        out[..3].copy_from_slice(&v);
        out
    }
}

impl ParametrizedCurve for Sinusoid {
    fn name(&self) -> &str {
        "sinusoid"
    }
    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    fn position(&self, th: f64) -> Vec<f64> {
        let f = self.frequency as f64;
        self.pad([th.cos(), th.sin(), self.amplitude * (f * th).sin()])
    }
    fn d1(&self, th: f64) -> Vec<f64> {
        let f = self.frequency as f64;
        self.pad([-th.sin(), th.cos(), self.amplitude * f * (f * th).cos()])
    }
    fn d2(&self, th: f64) -> Vec<f64> {
        let f = self.frequency as f64;
        self.pad([-th.cos(), -th.sin(), -self.amplitude * f * f * (f * th).sin()])
    }
}

/// Exact interpolation data at the mesh nodes: `x⁰ = X(θ_j)`, `π⁰ = t⊗t`, `H⁰`.
pub fn initial_data(
    curve: &dyn ParametrizedCurve,
    mesh: &CurveMesh,
) -> Result<(PositionVector, StateVector), GeometryError> {
    let n = mesh.ambient_dim();
    let nodes = mesh.n_nodes();
    let mut x = NodalField::zeros(nodes, n);
    let mut pi = NodalField::zeros(nodes, n * n);
    let mut h = NodalField::zeros(nodes, n);
    for j in 0..nodes {
        let theta = mesh.node_param(j);
        let d1 = curve.d1(theta);
        let speed = norm(&d1);
        if !(speed > 1e-12) {
            return Err(GeometryError::NotImmersed { theta, speed });
        }
        let d2 = curve.d2(theta);
        x.set_node(j, &curve.position(theta));
        pi.set_node(j, &tangent_projection(&d1));
        h.set_node(j, &curvature_vector(&d1, &d2));
    }
    Ok((x, StateVector { pi, h }))
}

/// Exact nodal data of an exact flow at time `t`.
pub fn exact_nodal_data(
    exact: &dyn ExactSolution,
    mesh: &CurveMesh,
    t: f64,
) -> Result<(PositionVector, StateVector), GeometryError> {
    let n = mesh.ambient_dim();
    let nodes = mesh.n_nodes();
    let mut x = NodalField::zeros(nodes, n);
    let mut pi = NodalField::zeros(nodes, n * n);
    let mut h = NodalField::zeros(nodes, n);
    for j in 0..nodes {
        let theta = mesh.node_param(j);
        x.set_node(j, &exact.position(theta, t)?);
        pi.set_node(j, &exact.projection(theta, t)?);
        h.set_node(j, &exact.curvature_vector(theta, t)?);
    }
    Ok((x, StateVector { pi, h }))
}

/// A known solution of the flow, parametrized over `[0, 2π)`.
pub trait ExactSolution: Send + Sync {
    fn name(&self) -> &str;
    fn ambient_dim(&self) -> usize;
    /// Existence interval `[0, horizon)`.
    fn horizon(&self) -> f64;
    fn position(&self, theta: f64, t: f64) -> Result<Vec<f64>, GeometryError>;
    fn projection(&self, theta: f64, t: f64) -> Result<Vec<f64>, GeometryError>;
    fn curvature_vector(&self, theta: f64, t: f64) -> Result<Vec<f64>, GeometryError>;

    fn velocity(&self, theta: f64, t: f64) -> Result<Vec<f64>, GeometryError> {
        self.curvature_vector(theta, t)
    }

    /// Whether `θ` labels material points (so nodal comparison is meaningful).
    fn is_material(&self) -> bool {
        true
    }

    fn check_time(&self, t: f64) -> Result<(), GeometryError> {
        if t < 0.0 || t >= self.horizon() {
            return Err(GeometryError::Horizon { t, horizon: self.horizon() });
        }
        Ok(())
    }
}

/// Shrinking circle: `R(t) = √(R₀² − 2t)` up to `T_max = R₀²/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleFlow {
    pub r0: f64,
    shape: Circle,
}

impl CircleFlow {
    pub fn new(r0: f64, rotation: f64, ambient_dim: usize) -> Result<Self, GeometryError> {
        if !(r0 > 0.0) {
            return Err(GeometryError::Parameter(format!("radius {r0} must be > 0")));
        }
        Ok(CircleFlow { r0, shape: Circle::new(1.0, rotation, ambient_dim) })
    }

    pub fn radius(&self, t: f64) -> Result<f64, GeometryError> {
        self.check_time(t)?;
        Ok((self.r0 * self.r0 - 2.0 * t).sqrt())
    }

    pub fn initial_curve(&self) -> Circle {
        Circle { radius: self.r0, ..self.shape.clone() }
    }
}

impl ExactSolution for CircleFlow {
    fn name(&self) -> &str {
        "circle"
    }
    fn ambient_dim(&self) -> usize {
        self.shape.ambient_dim()
    }
    fn horizon(&self) -> f64 {
        0.5 * self.r0 * self.r0
    }
    fn position(&self, theta: f64, t: f64) -> Result<Vec<f64>, GeometryError> {
        let r = self.radius(t)?;
        Ok(self.shape.position(theta).into_iter().map(|v| r * v).collect())
    }
    fn projection(&self, theta: f64, t: f64) -> Result<Vec<f64>, GeometryError> {
        self.check_time(t)?;
        Ok(tangent_projection(&self.shape.d1(theta)))
    }
    fn curvature_vector(&self, theta: f64, t: f64) -> Result<Vec<f64>, GeometryError> {
        let r = self.radius(t)?;
        Ok(self.shape.position(theta).into_iter().map(|v| -v / r).collect())
    }
}

/// Adaptive Gauss–Legendre integration of a 2-vector integrand: compare
/// 8- and 16-point rules and bisect until they agree to `tol`.
fn adaptive_gauss2(f: &dyn Fn(f64) -> [f64; 2], a: f64, b: f64, tol: f64) -> Result<[f64; 2], GeometryError> {
    thread_local! {
        static RULES: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = {
            let (p8, w8) = crate::refelem::gauss_legendre(8);
            let (p16, w16) = crate::refelem::gauss_legendre(16);
            (p8, w8, p16, w16)
        };
    }
    fn rule(f: &dyn Fn(f64) -> [f64; 2], a: f64, b: f64, p: &[f64], w: &[f64]) -> [f64; 2] {
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        let mut s = [0.0; 2];
        for (x, w) in p.iter().zip(w) {
            let v = f(c + r * x);
            s[0] += w * v[0];
            s[1] += w * v[1];
        }
        [r * s[0], r * s[1]]
    }
    fn recurse(
        f: &dyn Fn(f64) -> [f64; 2],
        a: f64,
        b: f64,
        tol: f64,
        depth: usize,
        rules: &(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
    ) -> Result<[f64; 2], GeometryError> {
        let coarse = rule(f, a, b, &rules.0, &rules.1);
        let fine = rule(f, a, b, &rules.2, &rules.3);
        let err = (coarse[0] - fine[0]).abs().max((coarse[1] - fine[1]).abs());
        if err <= tol || (b - a).abs() < 1e-14 {
            return Ok(fine);
        }
        if depth == 0 {
            return Err(GeometryError::Quadrature(format!("no convergence on [{a}, {b}], estimate {err:e}")));
        }
        let m = 0.5 * (a + b);
        let l = recurse(f, a, m, 0.5 * tol, depth - 1, rules)?;
        let r = recurse(f, m, b, 0.5 * tol, depth - 1, rules)?;
        Ok([l[0] + r[0], l[1] + r[1]])
    }
    RULES.with(|rules| recurse(f, a, b, tol, 40, rules))
}

/// Angenent oval: ancient solution of planar curve shortening with
/// `κ²(φ, s) = (e^{−2s} − 1)^{−1} + cos²φ` for `s < 0`.
///
/// `φ` is the tangent angle, so `dX/dφ = (cos φ, sin φ)/κ`. The curve is
/// translated so that its centre of symmetry sits at the origin.
/// Parametrization by tangent angle is not material, so only geometric
/// quantities (curvature, shape) are comparable with a discrete flow.
#[derive(Debug, Clone)]
pub struct AngenentOval {
    pub t0: f64,
    pub ambient_dim: usize,
    pub tol: f64,
}

impl AngenentOval {
    pub fn new(t0: f64, ambient_dim: usize) -> Result<Self, GeometryError> {
        if !(t0 < 0.0) {
            return Err(GeometryError::Parameter(format!("Angenent oval needs t0 < 0, got {t0}")));
        }
        if ambient_dim < 2 {
            return Err(GeometryError::Parameter("ambient_dim must be >= 2".into()));
        }
        Ok(AngenentOval { t0, ambient_dim, tol: 1e-10 })
    }

    /// `κ(φ, t₀ + t)`.
    pub fn curvature(&self, phi: f64, t: f64) -> Result<f64, GeometryError> {
        self.check_time(t)?;
        Ok(angenent_kappa(phi, self.t0 + t))
    }

    /// Curvature at the tips `φ = 0, π`, the maximum over the curve.
    pub fn max_curvature(&self, t: f64) -> Result<f64, GeometryError> {
        self.curvature(0.0, t)
    }

    /// The oval at time `t` as a parametrized curve (tabulated positions).
    pub fn curve_at(&self, t: f64) -> Result<AngenentCurve, GeometryError> {
        self.check_time(t)?;
        AngenentCurve::new(self.t0 + t, self.ambient_dim, self.tol)
    }

    pub fn initial_curve(&self) -> Result<AngenentCurve, GeometryError> {
        self.curve_at(0.0)
    }

    fn raw_position(&self, phi: f64, s: f64) -> Result<[f64; 2], GeometryError> {
        let f = |p: f64| {
            let k = angenent_kappa(p, s);
            [p.cos() / k, p.sin() / k]
        };
        let p = adaptive_gauss2(&f, 0.0, phi, self.tol)?;
        let top = adaptive_gauss2(&f, 0.0, PI, self.tol)?;
        Ok([p[0], p[1] - 0.5 * top[1]])
    }
}

pub fn angenent_kappa(phi: f64, s: f64) -> f64 {
    let c = phi.cos();
    (1.0 / ((-2.0 * s).exp_m1()) + c * c).sqrt()
}

fn pad2(v: [f64; 2], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    out[0] = v[0];
    out[1] = v[1];
    out
}

impl ExactSolution for AngenentOval {
    fn name(&self) -> &str {
        "angenent"
    }
    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    fn horizon(&self) -> f64 {
        -self.t0
    }
    fn position(&self, phi: f64, t: f64) -> Result<Vec<f64>, GeometryError> {
        self.check_time(t)?;
        Ok(pad2(self.raw_position(phi, self.t0 + t)?, self.ambient_dim))
    }
    fn projection(&self, phi: f64, t: f64) -> Result<Vec<f64>, GeometryError> {
        self.check_time(t)?;
        Ok(tangent_projection(&pad2([phi.cos(), phi.sin()], self.ambient_dim)))
    }
    fn curvature_vector(&self, phi: f64, t: f64) -> Result<Vec<f64>, GeometryError> {
        let k = self.curvature(phi, t)?;
        Ok(pad2([-k * phi.sin(), k * phi.cos()], self.ambient_dim))
    }
    fn is_material(&self) -> bool {
        false
    }
}

/// Angenent oval at a fixed time with positions tabulated on panels.
#[derive(Debug, Clone)]
pub struct AngenentCurve {
    s: f64,
    ambient_dim: usize,
    tol: f64,
    panel_starts: Vec<[f64; 2]>,
}

const ANGENENT_PANELS: usize = 256;

impl AngenentCurve {
    fn new(s: f64, ambient_dim: usize, tol: f64) -> Result<Self, GeometryError> {
        let f = |p: f64| {
            let k = angenent_kappa(p, s);
            [p.cos() / k, p.sin() / k]
        };
        let width = TAU / ANGENENT_PANELS as f64;
        let mut starts = Vec::with_capacity(ANGENENT_PANELS + 1);
        let mut acc = [0.0; 2];
        starts.push(acc);
        for i in 0..ANGENENT_PANELS {
            let a = i as f64 * width;
            let d = adaptive_gauss2(&f, a, a + width, tol / ANGENENT_PANELS as f64)?;
            acc = [acc[0] + d[0], acc[1] + d[1]];
            starts.push(acc);
        }
        let shift = 0.5 * starts[ANGENENT_PANELS / 2][1];
        for p in starts.iter_mut() {
            p[1] -= shift;
        }
        Ok(AngenentCurve { s, ambient_dim, tol, panel_starts: starts })
    }

    /// Gap `X(2π) − X(0)` of the tabulated curve.
    pub fn closure_gap(&self) -> f64 {
        let a = self.panel_starts[0];
        let b = self.panel_starts[ANGENENT_PANELS];
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    pub fn curvature(&self, phi: f64) -> f64 {
        angenent_kappa(phi, self.s)
    }
}

impl ParametrizedCurve for AngenentCurve {
    fn name(&self) -> &str {
        "angenent"
    }
    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    fn position(&self, phi: f64) -> Vec<f64> {
        let width = TAU / ANGENENT_PANELS as f64;
        let wrapped = phi.rem_euclid(TAU);
        let i = ((wrapped / width) as usize).min(ANGENENT_PANELS - 1);
        let a = i as f64 * width;
        let s = self.s;
        let f = |p: f64| {
            let k = angenent_kappa(p, s);
            [p.cos() / k, p.sin() / k]
        };
        // Panels are short and the integrand analytic; failure here would
        // already have failed while building the table.
        let d = adaptive_gauss2(&f, a, wrapped, self.tol / ANGENENT_PANELS as f64).expect("Angenent panel quadrature");
        let base = self.panel_starts[i];
        pad2([base[0] + d[0], base[1] + d[1]], self.ambient_dim)
    }
    fn d1(&self, phi: f64) -> Vec<f64> {
        let k = angenent_kappa(phi, self.s);
        pad2([phi.cos() / k, phi.sin() / k], self.ambient_dim)
    }
    fn d2(&self, phi: f64) -> Vec<f64> {
        let k = angenent_kappa(phi, self.s);
        // κ_φ = −sin φ cos φ / κ
        let dk = -phi.sin() * phi.cos() / k;
        let (s, c) = phi.sin_cos();
        pad2([-s / k - c * dk / (k * k), c / k - s * dk / (k * k)], self.ambient_dim)
    }
}
