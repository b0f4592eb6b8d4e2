//! Periodic Lagrange meshes of closed curves and nodal field storage.

use std::f64::consts::TAU;
use std::io::Write;

use crate::error::MeshError;
use crate::geometry::{self, Circle, ParametrizedCurve};
use crate::refelem::ReferenceElement;

/// Absolute floor on `√g` below which an element counts as collapsed.
pub const DEGENERATE_SQRT_G: f64 = 1e-12;

/// Nodal values of a `d`-component field, stored component-major: all `N`
/// values of component 0, then component 1, and so on.
///
/// Matrix fields store entry `(α, β)` as component `α + n·β`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    n_nodes: usize,
    components: usize,
    values: Vec<f64>,
}

pub type PositionVector = NodalField;

impl NodalField {
    pub fn zeros(n_nodes: usize, components: usize) -> Self {
        NodalField { n_nodes, components, values: vec![0.0; n_nodes * components] }
    }

    pub fn from_values(n_nodes: usize, components: usize, values: Vec<f64>) -> Result<Self, MeshError> {
        if values.len() != n_nodes * components {
            return Err(MeshError::LengthMismatch { expected: n_nodes * components, found: values.len() });
        }
        Ok(NodalField { n_nodes, components, values })
    }

    /// Field whose value at every node is `value`.
    pub fn constant(n_nodes: usize, value: &[f64]) -> Self {
        let mut f = Self::zeros(n_nodes, value.len());
        for j in 0..n_nodes {
            f.set_node(j, value);
        }
        f
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_nodes..(c + 1) * self.n_nodes]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.n_nodes;
        &mut self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, node: usize, c: usize) -> f64 {
        self.values[c * self.n_nodes + node]
    }

    /// All components at one node.
    pub fn node(&self, j: usize) -> Vec<f64> {
        (0..self.components).map(|c| self.get(j, c)).collect()
    }

    pub fn set_node(&mut self, j: usize, value: &[f64]) {
        debug_assert_eq!(value.len(), self.components);
        for (c, v) in value.iter().enumerate() {
            self.values[c * self.n_nodes + j] = *v;
        }
    }

    pub fn same_shape(&self, other: &NodalField) -> bool {
        self.n_nodes == other.n_nodes && self.components == other.components
    }

    pub fn scaled(&self, s: f64) -> NodalField {
        NodalField { values: self.values.iter().map(|v| s * v).collect(), ..self.clone() }
    }

    /// `self += a · other`
    pub fn axpy(&mut self, a: f64, other: &NodalField) {
        debug_assert!(self.same_shape(other));
        for (y, x) in self.values.iter_mut().zip(&other.values) {
            *y += a * x;
        }
    }

    pub fn difference(&self, other: &NodalField) -> NodalField {
        debug_assert!(self.same_shape(other));
        NodalField { values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(), ..self.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Nodal unknowns `u = (π, H)`: one `n×n` matrix and one `n`-vector per node.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub pi: NodalField,
    pub h: NodalField,
}

impl StateVector {
    pub fn zeros(n_nodes: usize, ambient_dim: usize) -> Self {
        StateVector {
            pi: NodalField::zeros(n_nodes, ambient_dim * ambient_dim),
            h: NodalField::zeros(n_nodes, ambient_dim),
        }
    }

    /// Number of scalar components `n² + n`.
    pub fn components(&self) -> usize {
        self.pi.components() + self.h.components()
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let np = self.pi.components();
        if c < np {
            self.pi.component(c)
        } else {
            self.h.component(c - np)
        }
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let np = self.pi.components();
        if c < np {
            self.pi.component_mut(c)
        } else {
            self.h.component_mut(c - np)
        }
    }

    pub fn axpy(&mut self, a: f64, other: &StateVector) {
        self.pi.axpy(a, &other.pi);
        self.h.axpy(a, &other.h);
    }

    pub fn scaled(&self, s: f64) -> StateVector {
        StateVector { pi: self.pi.scaled(s), h: self.h.scaled(s) }
    }

    pub fn is_finite(&self) -> bool {
        self.pi.is_finite() && self.h.is_finite()
    }
}

/// Topology of a closed curve discretized by `E` degree-`k` elements.
///
/// There are `N = E·k` nodes; element `e` holds nodes `e·k, …, e·k + k`
/// (mod `N`), so the last node of one element is the first of the next.
/// Each node carries the curve parameter it was sampled at, which labels the
/// material point it follows.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveMesh {
    ambient_dim: usize,
    n_elements: usize,
    reference: ReferenceElement,
    node_params: Vec<f64>,
}

impl CurveMesh {
    pub fn new(
        n_elements: usize,
        reference: ReferenceElement,
        ambient_dim: usize,
        node_params: Vec<f64>,
    ) -> Result<Self, MeshError> {
        if n_elements < 3 {
            return Err(MeshError::Invalid(format!("need at least 3 elements, got {n_elements}")));
        }
        if ambient_dim < 2 {
            return Err(MeshError::Invalid(format!("ambient dimension {ambient_dim} < 2")));
        }
        let expected = n_elements * reference.degree();
        if node_params.len() != expected {
            return Err(MeshError::LengthMismatch { expected, found: node_params.len() });
        }
        Ok(CurveMesh { ambient_dim, n_elements, reference, node_params })
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn degree(&self) -> usize {
        self.reference.degree()
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn n_nodes(&self) -> usize {
        self.n_elements * self.reference.degree()
    }

    pub fn reference(&self) -> &ReferenceElement {
        &self.reference
    }

    pub fn node_param(&self, j: usize) -> f64 {
        self.node_params[j]
    }

    pub fn node_params(&self) -> &[f64] {
        &self.node_params
    }

    /// Global node indices of element `e` in local order.
    pub fn element_nodes(&self, e: usize) -> impl Iterator<Item = usize> + '_ {
        let k = self.degree();
        let n = self.n_nodes();
        (0..=k).map(move |a| (e * k + a) % n)
    }

    /// Same mesh with a different quadrature rule.
    pub fn with_reference(&self, reference: ReferenceElement) -> Result<Self, MeshError> {
        if reference.degree() != self.degree() {
            return Err(MeshError::Invalid("reference degree differs from mesh degree".into()));
        }
        Ok(CurveMesh { reference, ..self.clone() })
    }
}

/// Element geometry at the quadrature points.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadGeometry {
    n_quad: usize,
    ambient_dim: usize,
    sqrt_g: Vec<f64>,
    tangent: Vec<f64>,
    derivative: Vec<f64>,
}

impl QuadGeometry {
    /// `√g = |∂_ξ X_h|` at quadrature point `q` of element `e`.
    pub fn sqrt_g(&self, e: usize, q: usize) -> f64 {
        self.sqrt_g[e * self.n_quad + q]
    }

    pub fn tangent(&self, e: usize, q: usize) -> &[f64] {
        let i = (e * self.n_quad + q) * self.ambient_dim;
        &self.tangent[i..i + self.ambient_dim]
    }

    /// Unnormalized element-map derivative `∂_ξ X_h`.
    pub fn derivative(&self, e: usize, q: usize) -> &[f64] {
        let i = (e * self.n_quad + q) * self.ambient_dim;
        &self.derivative[i..i + self.ambient_dim]
    }

    pub fn min_sqrt_g(&self) -> f64 {
        self.sqrt_g.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_sqrt_g(&self) -> &[f64] {
        &self.sqrt_g
    }
}

fn check_field(mesh: &CurveMesh, x: &PositionVector) -> Result<(), MeshError> {
    let expected = mesh.n_nodes() * mesh.ambient_dim();
    if x.n_nodes() != mesh.n_nodes() || x.components() != mesh.ambient_dim() {
        return Err(MeshError::LengthMismatch { expected, found: x.values().len() });
    }
    Ok(())
}

/// Metric factor and unit tangent at every quadrature point, with a
/// degenerate-element check against [`DEGENERATE_SQRT_G`].
pub fn metric_at_quad(mesh: &CurveMesh, x: &PositionVector) -> Result<QuadGeometry, MeshError> {
    metric_at_quad_with_floor(mesh, x, DEGENERATE_SQRT_G)
}

pub fn metric_at_quad_with_floor(mesh: &CurveMesh, x: &PositionVector, floor: f64) -> Result<QuadGeometry, MeshError> {
    check_field(mesh, x)?;
    let n = mesh.ambient_dim();
    let el = mesh.reference();
    let nq = el.n_quad();
    let ne = mesh.n_elements();
    let mut sqrt_g = Vec::with_capacity(ne * nq);
    let mut tangent = Vec::with_capacity(ne * nq * n);
    let mut derivative = Vec::with_capacity(ne * nq * n);
    let mut d = vec![0.0; n];
    for e in 0..ne {
        let nodes: Vec<usize> = mesh.element_nodes(e).collect();
        for q in 0..nq {
            let dphi = el.dbasis_at_quad(q);
            for (i, di) in d.iter_mut().enumerate() {
                let comp = x.component(i);
                *di = nodes.iter().zip(dphi).map(|(&j, w)| comp[j] * w).sum();
            }
            let s = geometry::norm(&d);
            if !(s > floor) {
                return Err(MeshError::DegenerateElement { element: e, quad: q, sqrt_g: s });
            }
            sqrt_g.push(s);
            derivative.extend_from_slice(&d);
            tangent.extend(d.iter().map(|v| v / s));
        }
    }
    Ok(QuadGeometry { n_quad: nq, ambient_dim: n, sqrt_g, tangent, derivative })
}

/// Fails if any element map reversed its direction between two snapshots.
pub fn check_orientation(mesh: &CurveMesh, before: &QuadGeometry, after: &QuadGeometry) -> Result<(), MeshError> {
    let nq = mesh.reference().n_quad();
    for e in 0..mesh.n_elements() {
        for q in 0..nq {
            if geometry::dot(before.tangent(e, q), after.tangent(e, q)) <= 0.0 {
                return Err(MeshError::Inverted { element: e });
            }
        }
    }
    Ok(())
}

/// `Σ_e ∫ √g`, the length of the discrete curve.
pub fn discrete_length(mesh: &CurveMesh, x: &PositionVector) -> Result<f64, MeshError> {
    let geo = metric_at_quad(mesh, x)?;
    Ok(length_from_geometry(mesh, &geo))
}

pub fn length_from_geometry(mesh: &CurveMesh, geo: &QuadGeometry) -> f64 {
    let w = mesh.reference().quad_weights();
    (0..mesh.n_elements()).map(|e| (0..w.len()).map(|q| w[q] * geo.sqrt_g(e, q)).sum::<f64>()).sum()
}

/// Largest distance between two nodes of the same element.
pub fn max_element_diameter(mesh: &CurveMesh, x: &PositionVector) -> f64 {
    let mut h: f64 = 0.0;
    for e in 0..mesh.n_elements() {
        let nodes: Vec<Vec<f64>> = mesh.element_nodes(e).map(|j| x.node(j)).collect();
        for a in 0..nodes.len() {
            for b in a + 1..nodes.len() {
                let d: Vec<f64> = nodes[a].iter().zip(&nodes[b]).map(|(p, q)| p - q).collect();
                h = h.max(geometry::norm(&d));
            }
        }
    }
    h
}

/// Mean distance of the nodes from their centroid.
pub fn mean_radius(x: &PositionVector) -> f64 {
    let n = x.n_nodes();
    let centroid: Vec<f64> = (0..x.components()).map(|c| x.component(c).iter().sum::<f64>() / n as f64).collect();
    (0..n)
        .map(|j| {
            let p = x.node(j);
            geometry::norm(&p.iter().zip(&centroid).map(|(a, b)| a - b).collect::<Vec<_>>())
        })
        .sum::<f64>()
        / n as f64
}

fn sample_positions(mesh_params: &[f64], curve: &dyn ParametrizedCurve) -> PositionVector {
    let n = curve.ambient_dim();
    let mut x = NodalField::zeros(mesh_params.len(), n);
    for (j, &th) in mesh_params.iter().enumerate() {
        x.set_node(j, &curve.position(th));
    }
    x
}

/// Circle of given radius in the rotated plane (see
/// [`geometry::plane_basis`]), nodes equispaced in arc length.
pub fn build_circle_mesh(
    n_elements: usize,
    degree: usize,
    radius: f64,
    rotation: f64,
    ambient_dim: usize,
) -> Result<(CurveMesh, PositionVector), MeshError> {
    let reference = ReferenceElement::with_default_quadrature(degree).map_err(|e| MeshError::Invalid(e.to_string()))?;
    let nodes = n_elements * degree;
    let params: Vec<f64> = (0..nodes).map(|j| TAU * j as f64 / nodes as f64).collect();
    let mesh = CurveMesh::new(n_elements, reference, ambient_dim, params)?;
    let x = sample_positions(mesh.node_params(), &Circle::new(radius, rotation, ambient_dim));
    Ok((mesh, x))
}

const ARC_OVERSAMPLING: usize = 64;
const ARC_TOLERANCE: f64 = 1e-10;

/// Cumulative arc length of a parametrized curve on a uniform parameter grid.
struct ArcLengthTable<'a> {
    curve: &'a dyn ParametrizedCurve,
    grid: Vec<f64>,
    cumulative: Vec<f64>,
    gauss: (Vec<f64>, Vec<f64>),
}

impl<'a> ArcLengthTable<'a> {
    fn new(curve: &'a dyn ParametrizedCurve, samples: usize) -> Result<Self, MeshError> {
        let gauss = crate::refelem::gauss_legendre_unit(10);
        let grid: Vec<f64> = (0..=samples).map(|i| TAU * i as f64 / samples as f64).collect();
        for &th in &grid {
            let s = curve.speed(th);
            if !(s > DEGENERATE_SQRT_G) {
                return Err(MeshError::DegenerateParametrization { theta: th, speed: s });
            }
        }
        let mut table = ArcLengthTable { curve, grid, cumulative: vec![0.0], gauss };
        for i in 0..samples {
            let seg = table.segment(table.grid[i], table.grid[i + 1]);
            let last = *table.cumulative.last().unwrap();
            table.cumulative.push(last + seg);
        }
        Ok(table)
    }

    fn segment(&self, a: f64, b: f64) -> f64 {
        let (p, w) = &self.gauss;
        (b - a) * p.iter().zip(w).map(|(x, w)| w * self.curve.speed(a + (b - a) * x)).sum::<f64>()
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn arc_length_at(&self, theta: f64) -> f64 {
        let h = self.grid[1];
        let i = ((theta / h) as usize).min(self.grid.len() - 2);
        self.cumulative[i] + self.segment(self.grid[i], theta)
    }

    /// Parameter `θ` with `s(θ) = target`.
    fn invert(&self, target: f64) -> Result<f64, MeshError> {
        // bracket in the table, linear guess, then Newton with bisection safeguard
        let i = match self.cumulative.binary_search_by(|v| v.partial_cmp(&target).unwrap()) {
            Ok(i) => return Ok(self.grid[i]),
            Err(i) => i.clamp(1, self.grid.len() - 1) - 1,
        };
        let (mut lo, mut hi) = (self.grid[i], self.grid[i + 1]);
        let (s0, s1) = (self.cumulative[i], self.cumulative[i + 1]);
        let mut th = lo + (hi - lo) * (target - s0) / (s1 - s0);
        for _ in 0..60 {
            let r = self.arc_length_at(th) - target;
            if r.abs() < ARC_TOLERANCE {
                return Ok(th);
            }
            if r > 0.0 {
                hi = th;
            } else {
                lo = th;
            }
            let next = th - r / self.curve.speed(th);
            th = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        }
        Err(MeshError::ArcLength(format!("no convergence for arc length {target}")))
    }
}

/// Mesh of a parametrized curve with nodes equispaced in arc length.
pub fn build_parametric_mesh(
    n_elements: usize,
    degree: usize,
    ambient_dim: usize,
    curve: &dyn ParametrizedCurve,
) -> Result<(CurveMesh, PositionVector), MeshError> {
    if curve.ambient_dim() != ambient_dim {
        return Err(MeshError::LengthMismatch { expected: ambient_dim, found: curve.ambient_dim() });
    }
    let reference = ReferenceElement::with_default_quadrature(degree).map_err(|e| MeshError::Invalid(e.to_string()))?;
    let nodes = n_elements * degree;
    let table = ArcLengthTable::new(curve, ARC_OVERSAMPLING * n_elements.max(1))?;
    let total = table.total();
    let mut params = Vec::with_capacity(nodes);
    params.push(0.0);
    for j in 1..nodes {
        params.push(table.invert(total * j as f64 / nodes as f64)?);
    }
    let mesh = CurveMesh::new(n_elements, reference, ambient_dim, params)?;
    let x = sample_positions(mesh.node_params(), curve);
    Ok((mesh, x))
}

/// Appends `t,node,comp0..comp{n-1}` rows; floats use 17 significant digits.
pub fn write_snapshot_rows<W: Write>(w: &mut W, t: f64, x: &PositionVector) -> std::io::Result<()> {
    for j in 0..x.n_nodes() {
        write!(w, "{t:.16e},{j}")?;
        for c in 0..x.components() {
            write!(w, ",{:.16e}", x.get(j, c))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn snapshot_header(ambient_dim: usize) -> String {
    let mut h = String::from("t,node");
    for c in 0..ambient_dim {
        h.push_str(&format!(",comp{c}"));
    }
    h
}
