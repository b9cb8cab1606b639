//! Time discretization of a path of diffeomorphisms: interior nodes on
//! `(0, 1)`, quadrature weights, and the symmetric velocity-to-particle map
//! `Q = ½(Q⁰ + Q^{T+1}) + V Z`.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `M × T` velocities; column `t` holds the particle velocities at node `t`.
pub type VelocityGrid = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchemeKind {
    /// Cell-centered equispaced nodes `s_t = (t − ½)/T` with equal weights.
    #[default]
    PiecewiseLinear,
    /// Interior Legendre-Gauss-Lobatto nodes with interpolatory weights.
    GaussLobatto,
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::PiecewiseLinear => "pl",
            SchemeKind::GaussLobatto => "gl",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pl" | "piecewise_linear" | "piecewise-linear" => Ok(SchemeKind::PiecewiseLinear),
            "gl" | "gauss_lobatto" | "gauss-lobatto" => Ok(SchemeKind::GaussLobatto),
            other => Err(Error::BadParameter(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Nodes, weights and integration matrix of a time discretization.
#[derive(Debug, Clone)]
pub struct QuadratureScheme {
    kind: SchemeKind,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `Z_{r,t}`: contribution of `v^r` to `q^t`.
    z: DMatrix<f64>,
    /// Barycentric weights for the interpolation on the nodes (GL only).
    bary: Vec<f64>,
}

impl QuadratureScheme {
    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Coefficients `a_r` with `v(s) ≈ Σ_r a_r v^r`: linear extrapolation
    /// from the two nearest nodes for the piecewise-linear scheme, the
    /// interpolating polynomial otherwise.
    pub fn interpolation_weights(&self, s: f64) -> Vec<f64> {
        let t = self.len();
        match self.kind {
            SchemeKind::PiecewiseLinear => {
                let mut a = vec![0.0; t];
                let h = 1.0 / t as f64;
                let x = (s / h - 0.5).clamp(0.0, (t - 1) as f64);
                let i = (x.floor() as usize).min(t - 2);
                let frac = s / h - 0.5 - i as f64;
                a[i] = 1.0 - frac;
                a[i + 1] = frac;
                a
            }
            SchemeKind::GaussLobatto => lagrange_at(&self.nodes, &self.bary, s),
        }
    }

    /// Velocities at time `s` from a grid.
    pub fn velocity_at(&self, v: &VelocityGrid, s: f64) -> DVector<f64> {
        let a = self.interpolation_weights(s);
        v * DVector::from_vec(a)
    }
}

/// Build the time discretization with `t` interior nodes.
pub fn build_quadrature(kind: SchemeKind, t: usize) -> Result<QuadratureScheme> {
    if t < 2 {
        return Err(Error::InvalidT(t));
    }
    match kind {
        SchemeKind::PiecewiseLinear => {
            let h = 1.0 / t as f64;
            let nodes = (0..t).map(|k| (k as f64 + 0.5) * h).collect();
            let z = DMatrix::from_fn(t, t, |r, c| match r.cmp(&c) {
                std::cmp::Ordering::Less => 0.5 * h,
                std::cmp::Ordering::Equal => 0.0,
                std::cmp::Ordering::Greater => -0.5 * h,
            });
            Ok(QuadratureScheme {
                kind,
                nodes,
                weights: vec![h; t],
                z,
                bary: Vec::new(),
            })
        }
        SchemeKind::GaussLobatto => Ok(gauss_lobatto(t)),
    }
}

/// Legendre `P_n(x)` and `P′_n(x)`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut r = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, r);
            let step = p / dp;
            r -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, r);
        x[n - 1 - i] = r;
        w[n - 1 - i] = 2.0 / ((1.0 - r * r) * dp * dp);
    }
    (x, w)
}

/// Roots of `P′_{n}` (the interior Lobatto points), ascending.
fn lobatto_interior(n: usize) -> Vec<f64> {
    let count = n - 1;
    let mut x = vec![0.0; count];
    for (i, xi) in x.iter_mut().enumerate() {
        // Chebyshev-Gauss-Lobatto guess
        let mut r = -(PI * (i + 1) as f64 / n as f64).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, r);
            // (1 − x²) P″ = 2x P′ − n(n+1) P
            let nf = n as f64;
            let d2 = (2.0 * r * dp - nf * (nf + 1.0) * p) / (1.0 - r * r);
            let step = dp / d2;
            r -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        *xi = r;
    }
    x
}

fn barycentric_weights(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let prod: f64 = (0..x.len()).filter(|&j| j != i).map(|j| x[i] - x[j]).product();
            1.0 / prod
        })
        .collect()
}

/// Lagrange cardinal functions at `s`.
fn lagrange_at(nodes: &[f64], bary: &[f64], s: f64) -> Vec<f64> {
    if let Some(k) = nodes.iter().position(|&x| x == s) {
        let mut out = vec![0.0; nodes.len()];
        out[k] = 1.0;
        return out;
    }
    let terms: Vec<f64> = nodes.iter().zip(bary).map(|(&x, &b)| b / (s - x)).collect();
    let denom: f64 = terms.iter().sum();
    terms.into_iter().map(|t| t / denom).collect()
}

fn gauss_lobatto(t: usize) -> QuadratureScheme {
    let interior = lobatto_interior(t + 1);
    // enforce exact mirror symmetry about ½
    let mut nodes: Vec<f64> = interior.iter().map(|&x| 0.5 * (x + 1.0)).collect();
    for k in 0..t / 2 {
        let a = 0.5 * (nodes[k] + 1.0 - nodes[t - 1 - k]);
        nodes[k] = a;
        nodes[t - 1 - k] = 1.0 - a;
    }
    if t % 2 == 1 {
        nodes[t / 2] = 0.5;
    }
    let bary = barycentric_weights(&nodes);
    let (gx, gw) = gauss_legendre(t);

    // ∫_a^b ℓ_r for all r
    let integrate = |a: f64, b: f64| -> Vec<f64> {
        let mut acc = vec![0.0; t];
        let half = 0.5 * (b - a);
        for (&x, &w) in gx.iter().zip(&gw) {
            let s = a + half * (x + 1.0);
            for (r, l) in lagrange_at(&nodes, &bary, s).into_iter().enumerate() {
                acc[r] += w * half * l;
            }
        }
        acc
    };

    let mut weights = integrate(0.0, 1.0);
    for k in 0..t / 2 {
        let a = 0.5 * (weights[k] + weights[t - 1 - k]);
        weights[k] = a;
        weights[t - 1 - k] = a;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    let mut z = DMatrix::zeros(t, t);
    for c in 0..t {
        let left = integrate(0.0, nodes[c]);
        for r in 0..t {
            let right = weights[r] - left[r];
            z[(r, c)] = 0.5 * (left[r] - right);
        }
    }
    // Z_{r,t} = −Z_{T+1−r, T+1−t}
    let mut zs = z.clone();
    for r in 0..t {
        for c in 0..t {
            zs[(r, c)] = 0.5 * (z[(r, c)] - z[(t - 1 - r, t - 1 - c)]);
        }
    }
    QuadratureScheme {
        kind: SchemeKind::GaussLobatto,
        nodes,
        weights,
        z: zs,
        bary,
    }
}

fn check_dims(q0: &DVector<f64>, qt1: &DVector<f64>, v: &VelocityGrid, scheme: &QuadratureScheme) -> Result<()> {
    if q0.len() != qt1.len() || v.nrows() != q0.len() || v.ncols() != scheme.len() {
        return Err(Error::DimensionMismatch(format!(
            "endpoints {}/{}, velocity grid {}×{}, scheme T = {}",
            q0.len(),
            qt1.len(),
            v.nrows(),
            v.ncols(),
            scheme.len()
        )));
    }
    Ok(())
}

/// `Q = ½(q0 + qT1) 1ᵀ + V Z` without the ordering check.
pub fn particles_unchecked(
    q0: &DVector<f64>,
    qt1: &DVector<f64>,
    v: &VelocityGrid,
    scheme: &QuadratureScheme,
) -> DMatrix<f64> {
    let mid = (q0 + qt1) * 0.5;
    let mut q = v * scheme.z();
    for mut col in q.column_iter_mut() {
        col += &mid;
    }
    q
}

/// First time slice whose particles are not strictly increasing with span
/// below `2π`.
pub fn first_unordered_slice(q: &DMatrix<f64>) -> Option<usize> {
    q.column_iter().position(|col| {
        let m = col.len();
        !(col.as_slice().windows(2).all(|w| w[1] > w[0]) && col[m - 1] - col[0] < TAU)
    })
}

/// Particle trajectory from velocities; fails if particles crossed.
pub fn particles_from_velocities(
    q0: &DVector<f64>,
    qt1: &DVector<f64>,
    v: &VelocityGrid,
    scheme: &QuadratureScheme,
) -> Result<DMatrix<f64>> {
    check_dims(q0, qt1, v, scheme)?;
    let q = particles_unchecked(q0, qt1, v, scheme);
    match first_unordered_slice(&q) {
        Some(slice) => Err(Error::OrderingViolated { slice }),
        None => Ok(q),
    }
}

/// `A V = Σ_t h^t v^t`.
pub fn constraint_apply(v: &VelocityGrid, scheme: &QuadratureScheme) -> DVector<f64> {
    v * DVector::from_column_slice(scheme.weights())
}

/// `qT1 − q0 − Σ_t h^t v^t`.
pub fn endpoint_residual(
    q0: &DVector<f64>,
    qt1: &DVector<f64>,
    v: &VelocityGrid,
    scheme: &QuadratureScheme,
) -> DVector<f64> {
    qt1 - q0 - constraint_apply(v, scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn invalid_t() {
        for kind in [SchemeKind::PiecewiseLinear, SchemeKind::GaussLobatto] {
            assert!(matches!(build_quadrature(kind, 1), Err(Error::InvalidT(1))));
            assert!(matches!(build_quadrature(kind, 0), Err(Error::InvalidT(0))));
        }
    }

    #[test]
    fn sign_pattern() {
        let s = build_quadrature(SchemeKind::PiecewiseLinear, 3).unwrap();
        let h = s.weights()[0];
        let c = |r: usize, t: usize| s.z()[(r - 1, t - 1)] / (0.5 * h);
        assert_eq!(c(1, 3), 1.0);
        assert_eq!(c(3, 1), -1.0);
        assert_eq!(c(2, 2), 0.0);
    }

    #[test]
    fn weights_partition_unity() {
        for t in [2, 3, 7, 20, 150] {
            for kind in [SchemeKind::PiecewiseLinear, SchemeKind::GaussLobatto] {
                let s = build_quadrature(kind, t).unwrap();
                let sum: f64 = s.weights().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{kind:?} {t}");
                assert!(s.nodes().windows(2).all(|w| w[1] > w[0]));
                assert!(s.nodes()[0] > 0.0 && s.nodes()[t - 1] < 1.0);
            }
        }
    }

    #[test]
    fn lobatto_is_polynomially_exact() {
        let s = build_quadrature(SchemeKind::GaussLobatto, 8).unwrap();
        let i: f64 = s.nodes().iter().zip(s.weights()).map(|(x, w)| w * x.powi(5)).sum();
        assert!((i - 1.0 / 6.0).abs() < 1e-12);
        // T = 3 interior Lobatto points of degree 4: 0, ±sqrt(3/7)
        let s = build_quadrature(SchemeKind::GaussLobatto, 3).unwrap();
        let r = (3.0f64 / 7.0).sqrt();
        assert!((s.nodes()[0] - 0.5 * (1.0 - r)).abs() < 1e-14);
        assert_eq!(s.nodes()[1], 0.5);
    }

    #[test]
    fn lobatto_z_integrates_polynomials() {
        // q^t = ½(∫₀^{s_t} v − ∫_{s_t}^1 v) for v = s²
        let s = build_quadrature(SchemeKind::GaussLobatto, 6).unwrap();
        let v: Vec<f64> = s.nodes().iter().map(|x| x * x).collect();
        for t in 0..6 {
            let st = s.nodes()[t];
            let exact = 0.5 * (st.powi(3) / 3.0 - (1.0 - st.powi(3)) / 3.0);
            let got: f64 = (0..6).map(|r| v[r] * s.z()[(r, t)]).sum();
            assert!((got - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_flow_is_linear() {
        for kind in [SchemeKind::PiecewiseLinear, SchemeKind::GaussLobatto] {
            let s = build_quadrature(kind, 9).unwrap();
            let q0 = DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0]);
            let delta = 0.7;
            let qt1 = q0.add_scalar(delta);
            let v = DMatrix::from_element(4, 9, delta);
            let q = particles_from_velocities(&q0, &qt1, &v, &s).unwrap();
            for t in 0..9 {
                for m in 0..4 {
                    assert!((q[(m, t)] - q0[m] - s.nodes()[t] * delta).abs() < 1e-12);
                }
            }
            assert!(endpoint_residual(&q0, &qt1, &v, &s).amax() < 1e-14);
        }
    }

    #[test]
    fn zero_velocity() {
        let s = build_quadrature(SchemeKind::PiecewiseLinear, 4).unwrap();
        let q0 = DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0]);
        let qt1 = DVector::from_vec(vec![0.2, 1.0, 2.5, 3.0]);
        let v = DMatrix::zeros(4, 4);
        let q = particles_from_velocities(&q0, &qt1, &v, &s).unwrap();
        let mid = (&q0 + &qt1) * 0.5;
        for col in q.column_iter() {
            assert_eq!(col, mid);
        }
        assert_eq!(endpoint_residual(&q0, &qt1, &v, &s), &qt1 - &q0);
        assert_eq!(endpoint_residual(&q0, &q0, &v, &s).amax(), 0.0);
    }

    #[test]
    fn explicit_piecewise_linear_update() {
        // q^t = q0 + h Σ_{r<t} v^r + (h/2) v^t, written as the endpoint average
        let t = 7;
        let s = build_quadrature(SchemeKind::PiecewiseLinear, t).unwrap();
        let q0 = DVector::from_vec(vec![0.0, 1.5, 3.0, 4.5]);
        let qt1 = DVector::from_vec(vec![0.3, 1.4, 3.3, 4.8]);
        let v = DMatrix::from_fn(4, t, |m, r| ((m * 7 + r * 3) as f64 * 0.37).sin() * 0.1);
        let q = particles_unchecked(&q0, &qt1, &v, &s);
        let h = 1.0 / t as f64;
        for col in 0..t {
            for m in 0..4 {
                let fwd: f64 = q0[m] + (0..col).map(|r| h * v[(m, r)]).sum::<f64>() + 0.5 * h * v[(m, col)];
                let bwd: f64 = qt1[m] - ((col + 1)..t).map(|r| h * v[(m, r)]).sum::<f64>() - 0.5 * h * v[(m, col)];
                assert!((q[(m, col)] - 0.5 * (fwd + bwd)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn ordering_violation_is_reported() {
        let s = build_quadrature(SchemeKind::PiecewiseLinear, 3).unwrap();
        let q0 = DVector::from_vec(vec![0.0, 0.1, 2.0, 4.0]);
        let mut v = DMatrix::zeros(4, 3);
        // particle 0 overtakes particle 1 from the second slice on
        v[(0, 0)] = 3.0;
        assert!(matches!(
            particles_from_velocities(&q0, &q0, &v, &s),
            Err(Error::OrderingViolated { slice: 1 })
        ));
    }

    #[test]
    fn extrapolation() {
        let s = build_quadrature(SchemeKind::PiecewiseLinear, 10).unwrap();
        let a = s.interpolation_weights(0.0);
        assert!((a[0] - 1.5).abs() < 1e-14 && (a[1] + 0.5).abs() < 1e-14);
        let g = build_quadrature(SchemeKind::GaussLobatto, 6).unwrap();
        let v = DMatrix::from_fn(1, 6, |_, r| 1.0 + 2.0 * g.nodes()[r] - g.nodes()[r].powi(3));
        assert!((g.velocity_at(&v, 0.0)[0] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn time_reversal(seed in 0u64..1000, gl in any::<bool>(), t in 2usize..12) {
            let kind = if gl { SchemeKind::GaussLobatto } else { SchemeKind::PiecewiseLinear };
            let s = build_quadrature(kind, t).unwrap();
            let f = |i: u64| ((seed * 31 + i) as f64 * 0.618).sin();
            let q0 = DVector::from_fn(5, |m, _| m as f64 + 0.1 * f(m as u64));
            let qt1 = DVector::from_fn(5, |m, _| m as f64 + 0.1 * f(50 + m as u64));
            let v = DMatrix::from_fn(5, t, |m, r| 0.1 * f(100 + (m * t + r) as u64));
            let vrev = DMatrix::from_fn(5, t, |m, r| -v[(m, t - 1 - r)]);
            let qa = particles_unchecked(&q0, &qt1, &v, &s);
            let qb = particles_unchecked(&qt1, &q0, &vrev, &s);
            for r in 0..t {
                for m in 0..5 {
                    prop_assert!((qa[(m, r)] - qb[(m, t - 1 - r)]).abs() < 1e-14);
                }
            }
        }
    }
}
