//! Lagrange shape functions and Gauss–Legendre quadrature on the reference
//! interval `[0, 1]`.

use crate::error::ConfigError;

pub const MAX_DEGREE: usize = 4;
pub const MAX_QUAD_POINTS: usize = 32;

/// Gauss–Legendre points and weights on `[-1, 1]`.
///
/// Newton iteration on the three-term Legendre recurrence, started from the
/// Chebyshev-like initial guess. Symmetric pairs are filled together so the
/// rule is exactly symmetric.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre: n must be >= 1");
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        points[i] = -z;
        points[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        points[n / 2] = 0.0;
    }
    (points, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss–Legendre rule mapped to `[0, 1]`; weights sum to one.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (p, w) = gauss_legendre(n);
    (p.iter().map(|x| 0.5 * (x + 1.0)).collect(), w.iter().map(|w| 0.5 * w).collect())
}

/// Degree-`k` Lagrange element on `[0, 1]` with tabulated values at the
/// quadrature points.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceElement {
    degree: usize,
    nodes: Vec<f64>,
    quad_points: Vec<f64>,
    quad_weights: Vec<f64>,
    /// `basis[q][a] = φ_a(ξ_q)`
    basis: Vec<Vec<f64>>,
    /// `dbasis[q][a] = φ'_a(ξ_q)`
    dbasis: Vec<Vec<f64>>,
}

impl ReferenceElement {
    pub fn new(degree: usize, n_quad: usize) -> Result<Self, ConfigError> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(ConfigError::Invalid {
                key: "degree".into(),
                reason: format!("element degree {degree} outside supported range 1..={MAX_DEGREE}"),
            });
        }
        if n_quad < degree + 1 || n_quad > MAX_QUAD_POINTS {
            return Err(ConfigError::Invalid {
                key: "n_quad".into(),
                reason: format!("quadrature point count {n_quad} outside {}..={MAX_QUAD_POINTS}", degree + 1),
            });
        }
        let nodes: Vec<f64> = (0..=degree).map(|a| a as f64 / degree as f64).collect();
        let (quad_points, quad_weights) = gauss_legendre_unit(n_quad);
        let mut el =
            ReferenceElement { degree, nodes, quad_points, quad_weights, basis: Vec::new(), dbasis: Vec::new() };
        el.basis = el.quad_points.iter().map(|&xi| el.eval_basis(xi)).collect();
        el.dbasis = el.quad_points.iter().map(|&xi| el.eval_dbasis(xi)).collect();
        Ok(el)
    }

    /// Default rule: `k + 2` Gauss points.
    pub fn with_default_quadrature(degree: usize) -> Result<Self, ConfigError> {
        Self::new(degree, degree + 2)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.degree + 1
    }

    pub fn n_quad(&self) -> usize {
        self.quad_points.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn quad_points(&self) -> &[f64] {
        &self.quad_points
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Shape function values at quadrature point `q`.
    pub fn basis_at_quad(&self, q: usize) -> &[f64] {
        &self.basis[q]
    }

    /// Shape function derivatives at quadrature point `q`.
    pub fn dbasis_at_quad(&self, q: usize) -> &[f64] {
        &self.dbasis[q]
    }

    pub fn eval_basis(&self, xi: f64) -> Vec<f64> {
        (0..=self.degree)
            .map(|a| {
                self.nodes
                    .iter()
                    .enumerate()
                    .filter(|&(b, _)| b != a)
                    .map(|(_, &nb)| (xi - nb) / (self.nodes[a] - nb))
                    .product()
            })
            .collect()
    }

    pub fn eval_dbasis(&self, xi: f64) -> Vec<f64> {
        let k = self.degree;
        (0..=k)
            .map(|a| {
                let mut sum = 0.0;
                for m in 0..=k {
                    if m == a {
                        continue;
                    }
                    let mut term = 1.0 / (self.nodes[a] - self.nodes[m]);
                    for b in 0..=k {
                        if b != a && b != m {
                            term *= (xi - self.nodes[b]) / (self.nodes[a] - self.nodes[b]);
                        }
                    }
                    sum += term;
                }
                sum
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn linear_hat_functions() {
        let el = ReferenceElement::new(1, 2).unwrap();
        for xi in [0.0, 0.25, 0.7, 1.0] {
            let phi = el.eval_basis(xi);
            assert!((phi[0] - (1.0 - xi)).abs() < 1e-15);
            assert!((phi[1] - xi).abs() < 1e-15);
        }
    }

    #[test]
    fn lagrange_property() {
        for k in 1..=MAX_DEGREE {
            let el = ReferenceElement::with_default_quadrature(k).unwrap();
            for (b, &xb) in el.nodes().iter().enumerate() {
                let phi = el.eval_basis(xb);
                for (a, v) in phi.iter().enumerate() {
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!((v - expected).abs() < 1e-14, "k={k} a={a} b={b}");
                }
            }
        }
    }

    #[test]
    fn quadratic_mass_matrix_matches_exact() {
        // Exact ∫₀¹ φ_a φ_b for equispaced quadratic Lagrange: (1/30)·[[4,2,-1],[2,16,2],[-1,2,4]].
        let exact = [
            [4.0 / 30.0, 2.0 / 30.0, -1.0 / 30.0],
            [2.0 / 30.0, 16.0 / 30.0, 2.0 / 30.0],
            [-1.0 / 30.0, 2.0 / 30.0, 4.0 / 30.0],
        ];
        let el = ReferenceElement::new(2, 4).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let m: f64 = (0..el.n_quad())
                    .map(|q| el.quad_weights()[q] * el.basis_at_quad(q)[a] * el.basis_at_quad(q)[b])
                    .sum();
                assert!((m - exact[a][b]).abs() < 1e-14, "({a},{b}): {m}");
            }
        }
        assert!((exact[0][0] - 2.0 / 15.0).abs() < 1e-16);
    }

    #[test]
    fn quadrature_exact_on_monomials() {
        for n in 1..=12 {
            let (p, w) = gauss_legendre_unit(n);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for deg in 0..2 * n {
                let approx: f64 = p.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = 1.0 / (deg as f64 + 1.0);
                assert!((approx - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn partition_of_unity_at_random_points() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for k in 1..=MAX_DEGREE {
            let el = ReferenceElement::with_default_quadrature(k).unwrap();
            for q in 0..el.n_quad() {
                assert!((el.basis_at_quad(q).iter().sum::<f64>() - 1.0).abs() < 1e-14);
                assert!(el.dbasis_at_quad(q).iter().sum::<f64>().abs() < 1e-12);
            }
            for _ in 0..100 {
                let xi: f64 = rng.random();
                assert!((el.eval_basis(xi).iter().sum::<f64>() - 1.0).abs() < 1e-13);
                assert!(el.eval_dbasis(xi).iter().sum::<f64>().abs() < 1e-11);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let el = ReferenceElement::with_default_quadrature(3).unwrap();
        let h = 1e-6;
        for xi in [0.1, 0.45, 0.9] {
            let d = el.eval_dbasis(xi);
            let p = el.eval_basis(xi + h);
            let m = el.eval_basis(xi - h);
            for a in 0..4 {
                assert!((d[a] - (p[a] - m[a]) / (2.0 * h)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(ReferenceElement::new(0, 3).is_err());
        assert!(ReferenceElement::new(5, 8).is_err());
        assert!(ReferenceElement::new(2, 2).is_err());
    }
}
