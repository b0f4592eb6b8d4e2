//! Discrete norms, errors against exact flows, convergence orders and
//! diagnostics for the projection field.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::assembly::Assembler;
use crate::error::{AnalysisError, GeometryError};
use crate::geometry::{exact_nodal_data, ExactSolution};
use crate::mesh::{length_from_geometry, CurveMesh, NodalField, PositionVector, StateVector};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Norms {
    pub l2: f64,
    pub h1: f64,
}

/// `‖e‖²_{L²} = Σ_c e_cᵀ M e_c` and `‖e‖²_{H¹} = ‖e‖²_{L²} + Σ_c e_cᵀ A e_c`.
pub fn norms_with(mass: &CsrMatrix, stiffness: &CsrMatrix, field: &NodalField) -> Norms {
    let mut l2 = 0.0;
    let mut semi = 0.0;
    for c in 0..field.components() {
        let e = field.component(c);
        l2 += dot(e, &mass.mul_vec(e));
        semi += dot(e, &stiffness.mul_vec(e));
    }
    // rounding can push a zero seminorm slightly negative
    let l2 = l2.max(0.0);
    Norms { l2: l2.sqrt(), h1: (l2 + semi.max(0.0)).sqrt() }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Norms of a nodal field on the discrete curve `x`.
pub fn discrete_norms(mesh: &CurveMesh, x: &PositionVector, field: &NodalField) -> Result<Norms, AnalysisError> {
    if field.n_nodes() != mesh.n_nodes() {
        return Err(AnalysisError::Length { expected: mesh.n_nodes(), found: field.n_nodes() });
    }
    let ops = Assembler::new(mesh).operators(x)?;
    Ok(norms_with(&ops.mass, &ops.stiffness, field))
}

/// Errors of one snapshot against an exact solution, measured on the
/// current discrete curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRecord {
    pub t: f64,
    pub x: Norms,
    pub v: Norms,
    pub pi: Option<Norms>,
    pub h: Option<Norms>,
    pub length: f64,
    pub min_sqrt_g: f64,
}

/// Borrowed view of a discrete solution at one time.
#[derive(Debug, Clone, Copy)]
pub struct SolutionView<'a> {
    pub x: &'a PositionVector,
    pub v: &'a NodalField,
    pub u: Option<&'a StateVector>,
}

pub fn error_vs_exact(
    mesh: &CurveMesh,
    solution: SolutionView<'_>,
    exact: &dyn ExactSolution,
    t: f64,
) -> Result<ErrorRecord, AnalysisError> {
    error_vs_exact_with(&Assembler::new(mesh), solution, exact, t)
}

pub fn error_vs_exact_with(
    assembler: &Assembler,
    solution: SolutionView<'_>,
    exact: &dyn ExactSolution,
    t: f64,
) -> Result<ErrorRecord, AnalysisError> {
    if !exact.is_material() {
        return Err(GeometryError::Parameter(format!("{} is not parametrized by material points", exact.name())).into());
    }
    let mesh = assembler.mesh();
    let (xe, ue) = exact_nodal_data(exact, mesh, t)?;
    let ops = assembler.operators(solution.x)?;
    let norms = |f: &NodalField, g: &NodalField| norms_with(&ops.mass, &ops.stiffness, &f.difference(g));
    // v = H for the exact flow
    let v = norms(solution.v, &ue.h);
    Ok(ErrorRecord {
        t,
        x: norms(solution.x, &xe),
        v,
        pi: solution.u.map(|u| norms(&u.pi, &ue.pi)),
        h: solution.u.map(|u| norms(&u.h, &ue.h)),
        length: length_from_geometry(mesh, &ops.geometry),
        min_sqrt_g: ops.geometry.min_sqrt_g(),
    })
}

/// Extra Gauss points (beyond `k + 1`) for lifted errors.
const LIFTED_EXTRA_POINTS: usize = 3;
/// Central difference step in `θ` for derivatives of the exact flow.
const LIFTED_FD_STEP: f64 = 1e-5;

/// Errors of the finite element functions against the exact functions,
/// `‖f_h^ℓ − f‖_{H¹}` over the exact curve, with discrete points identified
/// with exact ones through the interpolated parameter `θ_h(ξ) = Σ φ_a θ_a`.
/// Unlike [`error_vs_exact_with`] this includes the interpolation error.
pub fn lifted_error_vs_exact(
    assembler: &Assembler,
    solution: SolutionView<'_>,
    exact: &dyn ExactSolution,
    t: f64,
) -> Result<ErrorRecord, AnalysisError> {
    if !exact.is_material() {
        return Err(GeometryError::Parameter(format!("{} is not parametrized by material points", exact.name())).into());
    }
    let mesh = assembler.mesh();
    let k = mesh.degree();
    let geo = assembler.geometry(solution.x)?;
    let reference = crate::refelem::ReferenceElement::new(k, k + 1 + LIFTED_EXTRA_POINTS)
        .map_err(|e| GeometryError::Parameter(e.to_string()))?;
    let fields: Vec<&NodalField> = match solution.u {
        Some(u) => vec![solution.x, solution.v, &u.pi, &u.h],
        None => vec![solution.x, solution.v],
    };
    // exact values of x, v, π, H at one parameter
    let eval = |th: f64| -> Result<[Vec<f64>; 4], GeometryError> {
        Ok([exact.position(th, t)?, exact.velocity(th, t)?, exact.projection(th, t)?, exact.curvature_vector(th, t)?])
    };
    let mut sq = vec![(0.0, 0.0); fields.len()];
    let mut thetas = vec![0.0; k + 1];
    for e in 0..mesh.n_elements() {
        let nodes: Vec<usize> = mesh.element_nodes(e).collect();
        for (a, &j) in nodes.iter().enumerate() {
            let mut th = mesh.node_param(j);
            if a > 0 {
                while th <= thetas[a - 1] {
                    th += std::f64::consts::TAU;
                }
            }
            thetas[a] = th;
        }
        for q in 0..reference.n_quad() {
            let phi = reference.basis_at_quad(q);
            let dphi = reference.dbasis_at_quad(q);
            let w = reference.quad_weights()[q];
            let th: f64 = phi.iter().zip(&thetas).map(|(p, t)| p * t).sum();
            let dth: f64 = dphi.iter().zip(&thetas).map(|(p, t)| p * t).sum();
            let val = eval(th)?;
            let plus = eval(th + LIFTED_FD_STEP)?;
            let minus = eval(th - LIFTED_FD_STEP)?;
            let speed = plus[0]
                .iter()
                .zip(&minus[0])
                .map(|(p, m)| ((p - m) / (2.0 * LIFTED_FD_STEP)).powi(2))
                .sum::<f64>()
                .sqrt();
            // arc length on the exact curve per unit ξ
            let ds_dxi = speed * dth;
            let ds = w * ds_dxi;
            for (i, f) in fields.iter().enumerate() {
                let comps = f.components();
                let mut l2 = 0.0;
                let mut semi = 0.0;
                for c in 0..comps {
                    let mut fh = 0.0;
                    let mut dfh = 0.0;
                    for (a, &j) in nodes.iter().enumerate() {
                        let v = f.get(j, c);
                        fh += phi[a] * v;
                        dfh += dphi[a] * v;
                    }
                    let d_exact = (plus[i][c] - minus[i][c]) / (2.0 * LIFTED_FD_STEP) / speed;
                    l2 += (fh - val[i][c]).powi(2);
                    semi += (dfh / ds_dxi - d_exact).powi(2);
                }
                sq[i].0 += ds * l2;
                sq[i].1 += ds * semi;
            }
        }
    }
    let norms: Vec<Norms> = sq.iter().map(|&(l2, semi)| Norms { l2: l2.sqrt(), h1: (l2 + semi).sqrt() }).collect();
    Ok(ErrorRecord {
        t,
        x: norms[0],
        v: norms[1],
        pi: norms.get(2).copied(),
        h: norms.get(3).copied(),
        length: length_from_geometry(mesh, &geo),
        min_sqrt_g: geo.min_sqrt_g(),
    })
}

/// Orders `log(e_i/e_{i+1}) / log(p_i/p_{i+1})` between consecutive levels.
/// A level pair with a zero error has no order.
pub fn eoc(levels: &[(f64, f64)]) -> Result<Vec<Option<f64>>, AnalysisError> {
    if levels.len() < 2 {
        return Err(AnalysisError::TooFewLevels(levels.len()));
    }
    let increasing = levels[1].0 > levels[0].0;
    for w in levels.windows(2) {
        let (a, b) = (w[0].0, w[1].0);
        if !(a > 0.0 && b > 0.0) || a == b || (b > a) != increasing {
            return Err(AnalysisError::NonMonotone);
        }
    }
    Ok(levels
        .windows(2)
        .map(|w| {
            let ((p0, e0), (p1, e1)) = (w[0], w[1]);
            if e0 > 0.0 && e1 > 0.0 {
                Some((e0 / e1).ln() / (p0 / p1).ln())
            } else {
                None
            }
        })
        .collect())
}

/// Errors and orders of several quantities over a refinement sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EocTable {
    pub quantities: Vec<String>,
    pub parameters: Vec<f64>,
    /// `errors[level][quantity]`
    pub errors: Vec<Vec<f64>>,
    /// `orders[level][quantity]`; level 0 has none
    pub orders: Vec<Vec<Option<f64>>>,
}

impl EocTable {
    pub fn new(quantities: &[&str], parameters: Vec<f64>, errors: Vec<Vec<f64>>) -> Result<Self, AnalysisError> {
        let q = quantities.len();
        if errors.len() != parameters.len() || errors.iter().any(|r| r.len() != q) {
            return Err(AnalysisError::Length { expected: parameters.len(), found: errors.len() });
        }
        let mut orders = vec![vec![None; q]; parameters.len()];
        for k in 0..q {
            let levels: Vec<(f64, f64)> = parameters.iter().zip(&errors).map(|(p, e)| (*p, e[k])).collect();
            for (i, o) in eoc(&levels)?.into_iter().enumerate() {
                orders[i + 1][k] = o;
            }
        }
        Ok(EocTable { quantities: quantities.iter().map(|s| s.to_string()).collect(), parameters, errors, orders })
    }

    /// Order between the last two levels.
    pub fn final_orders(&self) -> Vec<Option<f64>> {
        self.orders.last().cloned().unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,h_or_tau");
        for q in &self.quantities {
            s.push_str(&format!(",err_{q}"));
        }
        for q in &self.quantities {
            s.push_str(&format!(",order_{q}"));
        }
        s.push('\n');
        for (i, p) in self.parameters.iter().enumerate() {
            let _ = write!(s, "{i},{p:.16e}");
            for e in &self.errors[i] {
                let _ = write!(s, ",{e:.16e}");
            }
            for o in &self.orders[i] {
                match o {
                    Some(o) => {
                        let _ = write!(s, ",{o:.16e}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>5} {:>12}", "level", "h_or_tau");
        for q in &self.quantities {
            let _ = write!(s, " {:>12} {:>7}", format!("err_{q}"), format!("eoc_{q}"));
        }
        s.push('\n');
        for (i, p) in self.parameters.iter().enumerate() {
            let _ = write!(s, "{i:>5} {p:>12.4e}");
            for (e, o) in self.errors[i].iter().zip(&self.orders[i]) {
                let o = o.map_or("-".to_string(), |o| format!("{o:.3}"));
                let _ = write!(s, " {e:>12.4e} {o:>7}");
            }
            s.push('\n');
        }
        s
    }
}

/// Largest per-node defects of the projection field: `‖π − πᵀ‖_F`,
/// `‖π² − π‖_F` and `|tr π − 1|`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiDiagnostics {
    pub symmetry: f64,
    pub idempotency: f64,
    pub trace: f64,
}

fn matrix_dim(components: usize) -> usize {
    (components as f64).sqrt().round() as usize
}

pub fn node_matrix(pi: &NodalField, j: usize) -> Vec<f64> {
    pi.node(j)
}

pub fn idempotency_defect(p: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for b in 0..n {
        for a in 0..n {
            let sq: f64 = (0..n).map(|m| p[a + n * m] * p[m + n * b]).sum();
            let d = sq - p[a + n * b];
            s += d * d;
        }
    }
    s.sqrt()
}

pub fn symmetry_defect(p: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for b in 0..n {
        for a in 0..n {
            let d = p[a + n * b] - p[b + n * a];
            s += d * d;
        }
    }
    s.sqrt()
}

pub fn pi_diagnostics(pi: &NodalField) -> PiDiagnostics {
    let n = matrix_dim(pi.components());
    let mut d = PiDiagnostics::default();
    for j in 0..pi.n_nodes() {
        let p = pi.node(j);
        let tr: f64 = (0..n).map(|a| p[a + n * a]).sum();
        d.symmetry = d.symmetry.max(symmetry_defect(&p, n));
        d.idempotency = d.idempotency.max(idempotency_defect(&p, n));
        d.trace = d.trace.max((tr - 1.0).abs());
    }
    d
}

/// Rank of the tangent projection of a curve.
const PROJECTION_RANK: usize = 1;
/// Spectral gap above which the rank is enforced.
const RANK_GAP: f64 = 0.1;

/// Replaces a near-projection by a symmetric idempotent matrix if its
/// idempotency defect exceeds `tol`.
///
/// The symmetric part is diagonalized and every eigenvalue snapped to 0 or 1.
/// When the top eigenvalue is separated from the rest by more than 0.1 the
/// result has rank exactly one (the nearest rank-one projection in the
/// Frobenius norm); otherwise eigenvalues go to the nearer of 0 and 1.
pub fn idempotency_correct(p: &[f64], n: usize, tol: f64) -> Result<Vec<f64>, AnalysisError> {
    if p.len() != n * n {
        return Err(AnalysisError::Length { expected: n * n, found: p.len() });
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    if idempotency_defect(p, n) <= tol {
        return Ok(p.to_vec());
    }
    let sym = DMatrix::from_fn(n, n, |a, b| 0.5 * (p[a + n * b] + p[b + n * a]));
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or(AnalysisError::NonFinite)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let enforce_rank = n > PROJECTION_RANK && lambda[PROJECTION_RANK - 1] - lambda[PROJECTION_RANK] > RANK_GAP;
    let mut keep = Vec::new();
    for (rank, &l) in lambda.iter().enumerate() {
        let one = if enforce_rank {
            rank < PROJECTION_RANK
        } else if l == 0.5 {
            keep.len() < PROJECTION_RANK
        } else {
            l > 0.5
        };
        if one {
            keep.push(order[rank]);
        }
    }
    let mut out = vec![0.0; n * n];
    for b in 0..n {
        for a in 0..n {
            out[a + n * b] = keep.iter().map(|&k| eig.eigenvectors[(a, k)] * eig.eigenvectors[(b, k)]).sum();
        }
    }
    Ok(out)
}

/// Applies [`idempotency_correct`] to every node; returns the number of
/// corrected nodes.
pub fn correct_projection_field(pi: &mut NodalField, tol: f64) -> Result<usize, AnalysisError> {
    let n = matrix_dim(pi.components());
    let mut corrected = 0;
    for j in 0..pi.n_nodes() {
        let p = pi.node(j);
        if idempotency_defect(&p, n) > tol {
            let q = idempotency_correct(&p, n, tol)?;
            pi.set_node(j, &q);
            corrected += 1;
        }
    }
    Ok(corrected)
}
