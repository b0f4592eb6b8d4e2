//! Surface mass/stiffness matrices and the nonlinear right-hand sides on a
//! discrete curve.
//!
//! For curves the tangential gradient of a finite element function is
//! `∇u = g⁻¹ ∂_ξu ∂_ξX`, so every gradient dot product reduces to
//! `g⁻¹ ∂_ξu ∂_ξw` and the measure is `√g dξ`.

use std::collections::BTreeSet;

use crate::error::AssemblyError;
use crate::geometry;
use crate::mesh::{metric_at_quad, CurveMesh, NodalField, PositionVector, QuadGeometry};
use crate::sparse::CsrMatrix;

/// Scalar sparsity pattern of a mesh plus the element scatter map.
#[derive(Debug, Clone)]
pub struct SparsityPattern {
    template: CsrMatrix,
    /// For element `e`, local pair `(a, b)` lands at `scatter[e*(k+1)² + a*(k+1) + b]`.
    scatter: Vec<usize>,
    local: usize,
}

impl SparsityPattern {
    pub fn for_mesh(mesh: &CurveMesh) -> Self {
        let n = mesh.n_nodes();
        let mut rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for e in 0..mesh.n_elements() {
            let nodes: Vec<usize> = mesh.element_nodes(e).collect();
            for &i in &nodes {
                rows[i].extend(nodes.iter().copied());
            }
        }
        let rows: Vec<Vec<usize>> = rows.into_iter().map(|r| r.into_iter().collect()).collect();
        let template = CsrMatrix::from_pattern(&rows);
        let local = mesh.degree() + 1;
        let mut scatter = Vec::with_capacity(mesh.n_elements() * local * local);
        for e in 0..mesh.n_elements() {
            let nodes: Vec<usize> = mesh.element_nodes(e).collect();
            for &i in &nodes {
                for &j in &nodes {
                    scatter.push(template.offset(i, j).expect("pattern covers element pairs"));
                }
            }
        }
        SparsityPattern { template, scatter, local }
    }

    pub fn empty_matrix(&self) -> CsrMatrix {
        self.template.clone()
    }

    fn slot(&self, e: usize, a: usize, b: usize) -> usize {
        self.scatter[e * self.local * self.local + a * self.local + b]
    }
}

/// Mass and stiffness matrices assembled on one position snapshot.
#[derive(Debug, Clone)]
pub struct SurfaceOperators {
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    pub geometry: QuadGeometry,
}

/// Nonlinear terms `f₁ (n² components)` and `f₂ (n components)` tested
/// against the basis.
#[derive(Debug, Clone, PartialEq)]
pub struct RhsVector {
    pub f1: NodalField,
    pub f2: NodalField,
}

/// Coefficients of the two terms in each nonlinearity. The defaults are the
/// mean curvature flow values; other values exist for mutation checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonlinearCoefficients {
    pub f1_gradient: f64,
    pub f1_projection: f64,
    pub f2_gradient: f64,
    pub f2_projection: f64,
}

impl Default for NonlinearCoefficients {
    fn default() -> Self {
        NonlinearCoefficients { f1_gradient: 2.0, f1_projection: -4.0, f2_gradient: 2.0, f2_projection: 4.0 }
    }
}

/// Assembles operators for a fixed mesh topology, reusing the pattern.
#[derive(Debug, Clone)]
pub struct Assembler {
    mesh: CurveMesh,
    pattern: SparsityPattern,
    coefficients: NonlinearCoefficients,
}

impl Assembler {
    pub fn new(mesh: &CurveMesh) -> Self {
        Assembler {
            mesh: mesh.clone(),
            pattern: SparsityPattern::for_mesh(mesh),
            coefficients: NonlinearCoefficients::default(),
        }
    }

    pub fn with_coefficients(mut self, coefficients: NonlinearCoefficients) -> Self {
        self.coefficients = coefficients;
        self
    }

    pub fn mesh(&self) -> &CurveMesh {
        &self.mesh
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn geometry(&self, x: &PositionVector) -> Result<QuadGeometry, AssemblyError> {
        Ok(metric_at_quad(&self.mesh, x)?)
    }

    pub fn operators(&self, x: &PositionVector) -> Result<SurfaceOperators, AssemblyError> {
        let geometry = self.geometry(x)?;
        let (mass, stiffness) = self.operators_on(&geometry);
        Ok(SurfaceOperators { mass, stiffness, geometry })
    }

    /// `M` and `A` from precomputed quadrature geometry.
    pub fn operators_on(&self, geo: &QuadGeometry) -> (CsrMatrix, CsrMatrix) {
        let el = self.mesh.reference();
        let mut mass = self.pattern.empty_matrix();
        let mut stiff = self.pattern.empty_matrix();
        let nb = el.n_basis();
        for e in 0..self.mesh.n_elements() {
            for q in 0..el.n_quad() {
                let w = el.quad_weights()[q];
                let sg = geo.sqrt_g(e, q);
                let phi = el.basis_at_quad(q);
                let dphi = el.dbasis_at_quad(q);
                for a in 0..nb {
                    for b in 0..nb {
                        let slot = self.pattern.slot(e, a, b);
                        mass.values_mut()[slot] += w * sg * (phi[a] * phi[b]);
                        stiff.values_mut()[slot] += w / sg * (dphi[a] * dphi[b]);
                    }
                }
            }
        }
        (mass, stiff)
    }

    pub fn mass(&self, x: &PositionVector) -> Result<CsrMatrix, AssemblyError> {
        Ok(self.operators_on(&self.geometry(x)?).0)
    }

    pub fn stiffness(&self, x: &PositionVector) -> Result<CsrMatrix, AssemblyError> {
        Ok(self.operators_on(&self.geometry(x)?).1)
    }

    fn check_components(&self, field: &NodalField, expected: usize) -> Result<(), AssemblyError> {
        if field.components() != expected || field.n_nodes() != self.mesh.n_nodes() {
            return Err(AssemblyError::Dimension { expected, found: field.components() });
        }
        Ok(())
    }

    /// Values and `ξ`-derivatives of a nodal field at one quadrature point.
    fn interpolate(&self, field: &NodalField, nodes: &[usize], q: usize, val: &mut [f64], der: &mut [f64]) {
        let el = self.mesh.reference();
        let phi = el.basis_at_quad(q);
        let dphi = el.dbasis_at_quad(q);
        for c in 0..field.components() {
            let comp = field.component(c);
            let mut v = 0.0;
            let mut d = 0.0;
            for (a, &j) in nodes.iter().enumerate() {
                v += comp[j] * phi[a];
                d += comp[j] * dphi[a];
            }
            val[c] = v;
            der[c] = d;
        }
    }

    pub fn f1(&self, x: &PositionVector, pi: &NodalField) -> Result<NodalField, AssemblyError> {
        let geo = self.geometry(x)?;
        self.f1_on(&geo, pi)
    }

    pub fn f1_on(&self, geo: &QuadGeometry, pi: &NodalField) -> Result<NodalField, AssemblyError> {
        let n = self.mesh.ambient_dim();
        self.check_components(pi, n * n)?;
        let el = self.mesh.reference();
        let c = self.coefficients;
        let mut out = NodalField::zeros(self.mesh.n_nodes(), n * n);
        let mut p = vec![0.0; n * n];
        let mut dp = vec![0.0; n * n];
        let mut dpp = vec![0.0; n * n];
        let mut integrand = vec![0.0; n * n];
        for e in 0..self.mesh.n_elements() {
            let nodes: Vec<usize> = self.mesh.element_nodes(e).collect();
            for q in 0..el.n_quad() {
                self.interpolate(pi, &nodes, q, &mut p, &mut dp);
                // dpp = dP · P
                for beta in 0..n {
                    for alpha in 0..n {
                        dpp[alpha + n * beta] = (0..n).map(|m| dp[alpha + n * m] * p[m + n * beta]).sum();
                    }
                }
                for beta in 0..n {
                    for alpha in 0..n {
                        let mut grad = 0.0;
                        let mut proj = 0.0;
                        for m in 0..n {
                            // Σ_μ ∂π_{αμ} ∂π_{βμ}  and  Σ_{μκ} ∂π_{αμ} π_{μκ} ∂π_{βκ}
                            grad += dp[alpha + n * m] * dp[beta + n * m];
                            proj += dpp[alpha + n * m] * dp[beta + n * m];
                        }
                        integrand[alpha + n * beta] = c.f1_gradient * grad + c.f1_projection * proj;
                    }
                }
                // g⁻¹ from the gradient dots times the measure √g
                let scale = el.quad_weights()[q] / geo.sqrt_g(e, q);
                let phi = el.basis_at_quad(q);
                for (comp, val) in integrand.iter().enumerate() {
                    let dst = out.component_mut(comp);
                    for (a, &j) in nodes.iter().enumerate() {
                        dst[j] += scale * val * phi[a];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn f2(&self, x: &PositionVector, pi: &NodalField, h: &NodalField) -> Result<NodalField, AssemblyError> {
        let geo = self.geometry(x)?;
        self.f2_on(&geo, pi, h)
    }

    pub fn f2_on(&self, geo: &QuadGeometry, pi: &NodalField, h: &NodalField) -> Result<NodalField, AssemblyError> {
        let n = self.mesh.ambient_dim();
        self.check_components(pi, n * n)?;
        self.check_components(h, n)?;
        let el = self.mesh.reference();
        let c = self.coefficients;
        let mut out = NodalField::zeros(self.mesh.n_nodes(), n);
        let mut p = vec![0.0; n * n];
        let mut dp = vec![0.0; n * n];
        let mut hv = vec![0.0; n];
        let mut dh = vec![0.0; n];
        let mut integrand = vec![0.0; n];
        for e in 0..self.mesh.n_elements() {
            let nodes: Vec<usize> = self.mesh.element_nodes(e).collect();
            for q in 0..el.n_quad() {
                self.interpolate(pi, &nodes, q, &mut p, &mut dp);
                self.interpolate(h, &nodes, q, &mut hv, &mut dh);
                // dP·H
                let dph: Vec<f64> = (0..n).map(|m| (0..n).map(|k| dp[m + n * k] * hv[k]).sum()).collect();
                for (alpha, out_a) in integrand.iter_mut().enumerate() {
                    let mut grad = 0.0;
                    let mut proj = 0.0;
                    for m in 0..n {
                        grad += dp[alpha + n * m] * dh[m];
                        proj += dp[alpha + n * m] * dph[m];
                    }
                    *out_a = c.f2_gradient * grad + c.f2_projection * proj;
                }
                let scale = el.quad_weights()[q] / geo.sqrt_g(e, q);
                let phi = el.basis_at_quad(q);
                for (comp, val) in integrand.iter().enumerate() {
                    let dst = out.component_mut(comp);
                    for (a, &j) in nodes.iter().enumerate() {
                        dst[j] += scale * val * phi[a];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn rhs(&self, x: &PositionVector, pi: &NodalField, h: &NodalField) -> Result<RhsVector, AssemblyError> {
        let geo = self.geometry(x)?;
        Ok(RhsVector { f1: self.f1_on(&geo, pi)?, f2: self.f2_on(&geo, pi, h)? })
    }
}

pub fn assemble_mass(mesh: &CurveMesh, x: &PositionVector) -> Result<CsrMatrix, AssemblyError> {
    Assembler::new(mesh).mass(x)
}

pub fn assemble_stiffness(mesh: &CurveMesh, x: &PositionVector) -> Result<CsrMatrix, AssemblyError> {
    Assembler::new(mesh).stiffness(x)
}

pub fn assemble_f1(mesh: &CurveMesh, x: &PositionVector, pi: &NodalField) -> Result<NodalField, AssemblyError> {
    Assembler::new(mesh).f1(x, pi)
}

pub fn assemble_f2(
    mesh: &CurveMesh,
    x: &PositionVector,
    pi: &NodalField,
    h: &NodalField,
) -> Result<NodalField, AssemblyError> {
    Assembler::new(mesh).f2(x, pi, h)
}

/// `(I_d ⊗ matrix) · field`
pub fn apply_blocked(matrix: &CsrMatrix, field: &NodalField) -> Result<NodalField, AssemblyError> {
    if field.n_nodes() != matrix.n() {
        return Err(AssemblyError::Dimension { expected: matrix.n(), found: field.n_nodes() });
    }
    let mut out = NodalField::zeros(field.n_nodes(), field.components());
    for c in 0..field.components() {
        let src = field.component(c).to_vec();
        matrix.mul_vec_into(&src, out.component_mut(c));
    }
    Ok(out)
}

/// Ambient tangential gradient `g⁻¹ ∂_ξu ∂_ξX` of a scalar nodal field at
/// quadrature point `q` of element `e`.
pub fn tangential_gradient(mesh: &CurveMesh, geo: &QuadGeometry, u: &[f64], e: usize, q: usize) -> Vec<f64> {
    let dphi = mesh.reference().dbasis_at_quad(q);
    let du: f64 = mesh.element_nodes(e).zip(dphi).map(|(j, w)| u[j] * w).sum();
    let sg = geo.sqrt_g(e, q);
    geo.derivative(e, q).iter().map(|d| du * d / (sg * sg)).collect()
}

/// Intrinsic form `g⁻¹ ∂_ξu ∂_ξw` of the gradient dot product.
pub fn gradient_dot(mesh: &CurveMesh, geo: &QuadGeometry, u: &[f64], w: &[f64], e: usize, q: usize) -> f64 {
    let dphi = mesh.reference().dbasis_at_quad(q);
    let du: f64 = mesh.element_nodes(e).zip(dphi).map(|(j, c)| u[j] * c).sum();
    let dw: f64 = mesh.element_nodes(e).zip(dphi).map(|(j, c)| w[j] * c).sum();
    let sg = geo.sqrt_g(e, q);
    du * dw / (sg * sg)
}

#[doc(hidden)]
pub fn ambient_gradient_dot(mesh: &CurveMesh, geo: &QuadGeometry, u: &[f64], w: &[f64], e: usize, q: usize) -> f64 {
    geometry::dot(&tangential_gradient(mesh, geo, u, e, q), &tangential_gradient(mesh, geo, w, e, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{initial_data, Circle, ParametrizedCurve, DEFAULT_PLANE_ROTATION};
    use crate::mesh::build_circle_mesh;
    use crate::refelem::ReferenceElement;
    use nalgebra::{DMatrix, SymmetricEigen};
    use std::f64::consts::TAU;

    fn dense(m: &CsrMatrix) -> DMatrix<f64> {
        let d = m.to_dense();
        DMatrix::from_fn(m.n(), m.n(), |i, j| d[i][j])
    }

    fn uniform_polygon(e: usize, length: f64) -> (CurveMesh, PositionVector) {
        // regular polygon inscribed so every edge has the given length
        let r = length / (2.0 * (std::f64::consts::PI / e as f64).sin());
        build_circle_mesh(e, 1, r, 0.0, 2).unwrap()
    }

    #[test]
    fn mass_sum_is_length() {
        for (e, k) in [(8, 1), (16, 2), (10, 3), (6, 4)] {
            let (mesh, x) = build_circle_mesh(e, k, 1.0, 0.4, 3).unwrap();
            let m = assemble_mass(&mesh, &x).unwrap();
            let total: f64 = m.values().iter().sum();
            let len = crate::mesh::discrete_length(&mesh, &x).unwrap();
            assert!((total - len).abs() < 1e-13);
            assert!(m.max_asymmetry() == 0.0);
        }
    }

    #[test]
    fn linear_mass_and_stiffness_by_hand() {
        let l = 0.3;
        let (mesh, x) = uniform_polygon(7, l);
        let m = assemble_mass(&mesh, &x).unwrap();
        let a = assemble_stiffness(&mesh, &x).unwrap();
        for i in 0..7 {
            assert!((m.get(i, i) - 2.0 * l / 3.0).abs() < 1e-14);
            assert!((m.get(i, (i + 1) % 7) - l / 6.0).abs() < 1e-14);
            assert!((a.get(i, i) - 2.0 / l).abs() < 1e-12);
            assert!((a.get(i, (i + 6) % 7) + 1.0 / l).abs() < 1e-12);
            assert_eq!(m.row(i).count(), 3);
        }
    }

    #[test]
    fn mass_is_spd() {
        let (mesh, x) = build_circle_mesh(8, 2, 1.0, DEFAULT_PLANE_ROTATION, 3).unwrap();
        let m = dense(&assemble_mass(&mesh, &x).unwrap());
        let eig = SymmetricEigen::new(m);
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        for k in 1..=4 {
            let (mesh, x) = build_circle_mesh(9, k, 1.3, 0.2, 3).unwrap();
            let a = assemble_stiffness(&mesh, &x).unwrap();
            let ones = vec![1.0; mesh.n_nodes()];
            assert!(a.mul_vec(&ones).iter().all(|v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn bandwidth_respects_elements() {
        let (mesh, x) = build_circle_mesh(10, 3, 1.0, 0.0, 2).unwrap();
        let a = assemble_stiffness(&mesh, &x).unwrap();
        let n = mesh.n_nodes();
        for i in 0..n {
            for (j, _) in a.row(i) {
                let d = i.abs_diff(j).min(n - i.abs_diff(j));
                assert!(d <= 3);
            }
        }
    }

    #[test]
    fn laplace_beltrami_spectrum_on_circle() {
        let (mesh, x) = build_circle_mesh(64, 2, 1.0, DEFAULT_PLANE_ROTATION, 3).unwrap();
        let m = dense(&assemble_mass(&mesh, &x).unwrap());
        let a = dense(&assemble_stiffness(&mesh, &x).unwrap());
        let l = m.cholesky().unwrap().l();
        let linv = l.clone().try_inverse().unwrap();
        let s = &linv * a * linv.transpose();
        let s = 0.5 * (&s + s.transpose());
        let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected = [0.0, 1.0, 1.0, 4.0, 4.0, 9.0, 9.0];
        for (v, e) in ev.iter().zip(expected) {
            assert!((v - e).abs() < 1e-3, "{v} vs {e}");
        }
    }

    #[test]
    fn dilation_scales_operators() {
        let (mesh, x) = build_circle_mesh(12, 2, 1.0, 0.3, 3).unwrap();
        let lambda = 2.5;
        let m1 = assemble_mass(&mesh, &x).unwrap();
        let a1 = assemble_stiffness(&mesh, &x).unwrap();
        let m2 = assemble_mass(&mesh, &x.scaled(lambda)).unwrap();
        let a2 = assemble_stiffness(&mesh, &x.scaled(lambda)).unwrap();
        for (u, v) in m1.values().iter().zip(m2.values()) {
            assert!((lambda * u - v).abs() < 1e-13);
        }
        for (u, v) in a1.values().iter().zip(a2.values()) {
            assert!((u / lambda - v).abs() < 1e-12);
        }
    }

    #[test]
    fn reassembly_is_bitwise_deterministic() {
        let (mesh, x) = build_circle_mesh(20, 2, 1.0, 0.3, 3).unwrap();
        let asm = Assembler::new(&mesh);
        let a = asm.operators(&x).unwrap();
        let b = asm.operators(&x).unwrap();
        assert_eq!(a.mass.fingerprint(), b.mass.fingerprint());
        assert_eq!(a.stiffness.fingerprint(), b.stiffness.fingerprint());
    }

    #[test]
    fn constant_fields_give_zero_nonlinearity() {
        let (mesh, x) = build_circle_mesh(10, 2, 1.0, 0.3, 3).unwrap();
        let nodes = mesh.n_nodes();
        let pi = NodalField::constant(nodes, &[0.2, 0.1, 0.0, 0.1, 0.7, 0.3, 0.0, 0.3, 0.1]);
        let h = NodalField::constant(nodes, &[1.0, -2.0, 0.5]);
        // gradients of constants vanish up to the rounding of Σ_a φ'_a
        let f1 = assemble_f1(&mesh, &x, &pi).unwrap();
        assert!(f1.max_abs() < 1e-13);
        let f2 = assemble_f2(&mesh, &x, &pi, &h).unwrap();
        assert!(f2.max_abs() < 1e-13);
        // constant π, varying H
        let (_, u) = initial_data(&Circle::new(1.0, 0.3, 3), &mesh).unwrap();
        let f2 = assemble_f2(&mesh, &x, &pi, &u.h).unwrap();
        assert!(f2.max_abs() < 1e-13);
    }

    #[test]
    fn f1_is_symmetric_for_symmetric_input() {
        let tref = crate::geometry::Trefoil::new(1.0, 3).unwrap();
        let (mesh, x) = crate::mesh::build_parametric_mesh(12, 2, 3, &tref).unwrap();
        let (_, u) = initial_data(&tref, &mesh).unwrap();
        let f1 = assemble_f1(&mesh, &x, &u.pi).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let ab = f1.component(a + 3 * b);
                let ba = f1.component(b + 3 * a);
                for (p, q) in ab.iter().zip(ba) {
                    assert!((p - q).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (mesh, x) = build_circle_mesh(6, 2, 1.0, 0.0, 3).unwrap();
        let bad = NodalField::zeros(mesh.n_nodes(), 4);
        assert!(matches!(assemble_f1(&mesh, &x, &bad), Err(AssemblyError::Dimension { expected: 9, found: 4 })));
    }

    #[test]
    fn blocked_application() {
        let (mesh, x) = build_circle_mesh(8, 2, 1.0, 0.0, 2).unwrap();
        let a = assemble_stiffness(&mesh, &x).unwrap();
        let nodes = mesh.n_nodes();
        let scalar: Vec<f64> = (0..nodes).map(|j| (j as f64).sin()).collect();
        let f1 = NodalField::from_values(nodes, 1, scalar.clone()).unwrap();
        assert_eq!(apply_blocked(&a, &f1).unwrap().values(), a.mul_vec(&scalar).as_slice());
        let mut vals = scalar.clone();
        vals.extend(&scalar);
        vals.extend(&scalar);
        let f3 = NodalField::from_values(nodes, 3, vals).unwrap();
        let out = apply_blocked(&a, &f3).unwrap();
        assert_eq!(out.component(0), out.component(1));
        assert_eq!(out.component(1), out.component(2));
        for c in 0..3 {
            assert!(out.component(c).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn intrinsic_and_ambient_gradient_dots_agree() {
        let tref = crate::geometry::Trefoil::new(1.0, 3).unwrap();
        let (mesh, x) = crate::mesh::build_parametric_mesh(10, 3, 3, &tref).unwrap();
        let geo = metric_at_quad(&mesh, &x).unwrap();
        let u: Vec<f64> = (0..mesh.n_nodes()).map(|j| (0.3 * j as f64).cos()).collect();
        let w: Vec<f64> = (0..mesh.n_nodes()).map(|j| (0.7 * j as f64).sin()).collect();
        for e in 0..mesh.n_elements() {
            for q in 0..mesh.reference().n_quad() {
                let a = gradient_dot(&mesh, &geo, &u, &w, e, q);
                let b = ambient_gradient_dot(&mesh, &geo, &u, &w, e, q);
                assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    /// Pointwise f₁, f₂ on the unit circle by central differences in θ
    /// (arc length equals θ for the unit circle).
    fn fd_nonlinearity(theta: f64, n: usize, rot: f64) -> (Vec<f64>, Vec<f64>) {
        let c = Circle::new(1.0, rot, n);
        let pi = |t: f64| geometry::tangent_projection(&c.d1(t));
        let hv = |t: f64| geometry::curvature_vector(&c.d1(t), &c.d2(t));
        let s = 1e-5;
        let p = pi(theta);
        let dp: Vec<f64> = pi(theta + s).iter().zip(pi(theta - s)).map(|(a, b)| (a - b) / (2.0 * s)).collect();
        let h = hv(theta);
        let dh: Vec<f64> = hv(theta + s).iter().zip(hv(theta - s)).map(|(a, b)| (a - b) / (2.0 * s)).collect();
        let mut f1 = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut v = 0.0;
                for m in 0..n {
                    v += 2.0 * dp[a + n * m] * dp[b + n * m];
                    for k in 0..n {
                        v -= 4.0 * p[m + n * k] * dp[a + n * m] * dp[b + n * k];
                    }
                }
                f1[a + n * b] = v;
            }
        }
        let mut f2 = vec![0.0; n];
        for a in 0..n {
            let mut v = 0.0;
            for m in 0..n {
                v += 2.0 * dp[a + n * m] * dh[m];
                for k in 0..n {
                    v += 4.0 * dp[a + n * m] * dp[m + n * k] * h[k];
                }
            }
            f2[a] = v;
        }
        (f1, f2)
    }

    fn nodal_defect(e: usize, n: usize) -> (f64, f64) {
        let rot = 0.4;
        let (mesh, x) = build_circle_mesh(e, 2, 1.0, rot, n).unwrap();
        let (_, u) = initial_data(&Circle::new(1.0, rot, n), &mesh).unwrap();
        let asm = Assembler::new(&mesh);
        let m = crate::sparse::SpdSolver::new(asm.mass(&x).unwrap(), 1e-12).unwrap();
        let f1 = asm.f1(&x, &u.pi).unwrap();
        let f2 = asm.f2(&x, &u.pi, &u.h).unwrap();
        let mut err1: f64 = 0.0;
        let mut err2: f64 = 0.0;
        let g1: Vec<Vec<f64>> = (0..n * n).map(|c| m.solve(f1.component(c)).unwrap().0).collect();
        let g2: Vec<Vec<f64>> = (0..n).map(|c| m.solve(f2.component(c)).unwrap().0).collect();
        for j in 0..mesh.n_nodes() {
            let (o1, o2) = fd_nonlinearity(mesh.node_param(j), n, rot);
            for c in 0..n * n {
                err1 = err1.max((g1[c][j] - o1[c]).abs());
            }
            for c in 0..n {
                err2 = err2.max((g2[c][j] - o2[c]).abs());
            }
        }
        (err1, err2)
    }

    #[test]
    fn nonlinearities_converge_to_pointwise_oracle() {
        for n in [2, 3] {
            let (a1, a2) = nodal_defect(16, n);
            let (b1, b2) = nodal_defect(32, n);
            let (c1, c2) = nodal_defect(64, n);
            let r1 = (b1 / c1).log2();
            let r2 = (b2 / c2).log2();
            assert!(c1 < 2e-2 && c2 < 2e-2, "n={n}: {a1} {b1} {c1} / {a2} {b2} {c2}");
            assert!(r1 > 1.8, "f1 order {r1} ({a1} {b1} {c1})");
            assert!(r2 > 1.8, "f2 order {r2} ({a2} {b2} {c2})");
        }
    }

    #[test]
    fn quadrature_order_sensitivity() {
        // over-integration beyond k+2 points changes M by far less than the h² error
        let (mesh, x) = build_circle_mesh(32, 2, 1.0, 0.0, 2).unwrap();
        let fine = mesh.with_reference(ReferenceElement::new(2, 10).unwrap()).unwrap();
        let a = assemble_mass(&mesh, &x).unwrap();
        let b = assemble_mass(&fine, &x).unwrap();
        let diff = a.values().iter().zip(b.values()).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        assert!(diff < 1e-6, "{diff}");
        let len: f64 = a.values().iter().sum();
        assert!((len - TAU).abs() < 1e-4);
    }
}
