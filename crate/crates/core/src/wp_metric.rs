//! Discrete WP norm on a particle configuration: minimal-norm horizontal
//! lifts, momenta and kernel coefficients, inner products, and the variation
//! of the squared norm with respect to particle positions.
//!
//! The norm is normalized so that `‖v‖² = Σ_{n≥2} (n³ − n)|a_n|²` for
//! `v = Σ a_n e^{inθ}`. In that normalization the reproducing kernel of the
//! complement of `span{1, cos, sin}` is `2G`, with `G` the Green's function
//! from [`crate::circle`].
//!
//! Lifts are computed as the equality-constrained least-squares problem
//! "minimize the basis seminorm subject to interpolating the data", with the
//! kernel coefficients carrying no weight. The solve eliminates the
//! constraint through a triangular factor of the Gram matrix and an
//! orthogonal factorization, so `L_F` is never formed explicitly.

use std::sync::OnceLock;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::circle::{
    green_function, green_function_derivative, green_function_pair_half, kernel_basis, kernel_basis_derivative,
    ParticleConfig,
};
use crate::error::{Error, Result};

/// Reproducing-kernel scale: `K(θ) = KERNEL_SCALE · G(θ)`.
pub const KERNEL_SCALE: f64 = 2.0;

const ILL_CONDITIONED: f64 = 1e13;
const EIGEN_FLOOR: f64 = 1e-14;

/// Interpolation space used for lifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Basis {
    /// Translates of the Green's function centered at the particles. This
    /// yields the true minimal-norm lift.
    #[default]
    Greens,
    /// `modes` real functions `cos nθ, sin nθ` for `n = 2, 3, …`.
    Fourier { modes: usize },
}

impl Basis {
    fn fourier_frequency(k: usize) -> f64 {
        (k / 2 + 2) as f64
    }

    /// Number of basis functions on a configuration of `m` particles.
    pub fn dimension(&self, m: usize) -> usize {
        match *self {
            Basis::Greens => m,
            Basis::Fourier { modes } => modes,
        }
    }
}

/// Result of a minimal-norm lift for one configuration.
#[derive(Debug, Clone)]
pub struct LiftResult {
    /// Particle positions the lift was computed on.
    pub nodes: Vec<f64>,
    pub basis: Basis,
    /// Momenta `p = L_F v`.
    pub p: DVector<f64>,
    /// Coefficients of `(1, cos, sin)`.
    pub w: [f64; 3],
    /// Basis coefficients. Equal to `p` for the Green's basis.
    pub c: DVector<f64>,
    /// Squared discrete WP norm.
    pub norm_sq: f64,
}

impl LiftResult {
    /// Evaluate the lifted field at `theta`.
    pub fn eval(&self, theta: f64) -> f64 {
        lift_eval(self, theta)
    }

    pub fn eval_derivative(&self, theta: f64) -> f64 {
        lift_eval_derivative(self, theta)
    }

    /// Derivative of the lift at each node.
    pub fn node_derivatives(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.nodes.len(),
            self.nodes.iter().map(|&q| lift_eval_derivative(self, q)),
        )
    }
}

/// `G_ij = G(q_i − q_j)`.
pub fn build_gram(config: &ParticleConfig) -> Result<DMatrix<f64>> {
    check_gaps(config.positions())?;
    Ok(gram_pass(config.positions(), false).0)
}

/// `G_ij = G(q_i − q_j)` and `G′_ij = G′(q_i − q_j)`.
pub fn build_gram_with_derivative(config: &ParticleConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_gaps(config.positions())?;
    Ok(gram_pass(config.positions(), true))
}

fn check_gaps(q: &[f64]) -> Result<()> {
    let m = q.len();
    for i in 0..m {
        let next = (i + 1) % m;
        let gap = if next == 0 {
            q[0] + std::f64::consts::TAU - q[m - 1]
        } else {
            q[next] - q[i]
        };
        if gap < 1e-12 {
            return Err(Error::DuplicateParticles { i, j: next, gap });
        }
    }
    Ok(())
}

/// One pass over the pairs; the derivative matrix is empty unless requested.
fn gram_pass(q: &[f64], derivative: bool) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = q.len();
    let half: Vec<(f64, f64)> = q.iter().map(|x| (0.5 * x).sin_cos()).collect();
    let mut g = DMatrix::zeros(m, m);
    let mut gd = if derivative {
        DMatrix::zeros(m, m)
    } else {
        DMatrix::zeros(0, 0)
    };
    for i in 0..m {
        g[(i, i)] = green_function(0.0);
        let (si, ci) = half[i];
        for j in 0..i {
            let (sj, cj) = half[j];
            // half-angle of q_i − q_j by the addition formulas
            let (v, d) = green_function_pair_half(q[i] - q[j], si * cj - ci * sj, ci * cj + si * sj);
            g[(i, j)] = v;
            g[(j, i)] = v;
            if derivative {
                gd[(i, j)] = d;
                gd[(j, i)] = -d;
            }
        }
    }
    (g, gd)
}

/// `B_{m,k} = b_k(q_m)` for the kernel basis `(1, cos, sin)`.
pub fn kernel_matrix(nodes: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(nodes.len(), 3, |i, k| kernel_basis(nodes[i])[k])
}

/// Factor `F` with `F Fᵀ ≈ A` for a symmetric positive (semi)definite `A`.
#[derive(Debug, Clone)]
enum SpdFactor {
    Cholesky(DMatrix<f64>),
    /// `A ≈ U Λ Uᵀ` with floored eigenvalues: `F = U Λ^{1/2}`.
    Eigen {
        u: DMatrix<f64>,
        sqrt_lambda: DVector<f64>,
    },
}

impl SpdFactor {
    fn new(a: &DMatrix<f64>) -> Self {
        if let Some(ch) = a.clone().cholesky() {
            return SpdFactor::Cholesky(ch.unpack());
        }
        let eig = a.clone().symmetric_eigen();
        let scale = eig.eigenvalues.amax();
        let floor = EIGEN_FLOOR * scale;
        let sqrt_lambda = eig.eigenvalues.map(|l| l.max(floor).sqrt());
        SpdFactor::Eigen {
            u: eig.eigenvectors,
            sqrt_lambda,
        }
    }

    /// `F⁻¹ x`.
    fn solve_factor(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SpdFactor::Cholesky(l) => l
                .solve_lower_triangular(x)
                .expect("cholesky factor has a nonzero diagonal"),
            SpdFactor::Eigen { u, sqrt_lambda } => {
                let mut y = u.transpose() * x;
                for (mut row, s) in y.row_iter_mut().zip(sqrt_lambda.iter()) {
                    row /= *s;
                }
                y
            }
        }
    }

    /// `F⁻ᵀ x`.
    fn solve_factor_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SpdFactor::Cholesky(l) => l
                .tr_solve_lower_triangular(x)
                .expect("cholesky factor has a nonzero diagonal"),
            SpdFactor::Eigen { u, sqrt_lambda } => {
                let mut y = x.clone();
                for (mut row, s) in y.row_iter_mut().zip(sqrt_lambda.iter()) {
                    row /= *s;
                }
                u * y
            }
        }
    }

    /// Rough 2-norm condition estimate of `F Fᵀ`.
    fn condition_estimate(&self) -> f64 {
        let d: Vec<f64> = match self {
            SpdFactor::Cholesky(l) => l.diagonal().iter().map(|x| x.abs()).collect(),
            SpdFactor::Eigen { sqrt_lambda, .. } => sqrt_lambda.iter().copied().collect(),
        };
        let max = d.iter().cloned().fold(0.0, f64::max);
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        (max / min).powi(2)
    }
}

/// Factorized Green's-basis interpolation system for one configuration.
///
/// Reused across many right-hand sides on the same particles.
#[derive(Debug, Clone)]
pub struct GreensSystem {
    nodes: Vec<f64>,
    kernel: DMatrix<f64>,
    /// `K′_ij = K′(q_i − q_j)`, built on first use: rejected line-search
    /// trials never need it.
    kernel_derivative: OnceLock<DMatrix<f64>>,
    factor: SpdFactor,
    b: DMatrix<f64>,
    /// `F⁻¹ B`, orthonormalized: `F⁻¹B = Q R`.
    whitened_q: DMatrix<f64>,
    whitened_r: DMatrix<f64>,
}

impl GreensSystem {
    pub fn new(config: &ParticleConfig) -> Result<Self> {
        let kernel = build_gram(config)? * KERNEL_SCALE;
        let factor = SpdFactor::new(&kernel);
        let cond = factor.condition_estimate();
        if cond > ILL_CONDITIONED {
            warn!("Green's Gram matrix is ill-conditioned (cond ≈ {cond:e})");
        }
        let nodes = config.positions().to_vec();
        let b = kernel_matrix(&nodes);
        let wb = factor.solve_factor(&b);
        let qr = wb.qr();
        let whitened_r = qr.r();
        if whitened_r.diagonal().iter().any(|d| d.abs() < 1e-14) {
            return Err(Error::RankDeficient("kernel evaluations are degenerate".into()));
        }
        Ok(GreensSystem {
            nodes,
            kernel,
            kernel_derivative: OnceLock::new(),
            factor,
            b,
            whitened_q: qr.q(),
            whitened_r,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// The scaled Gram matrix `K = 2G` of the Green's basis.
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    /// Kernel evaluation matrix `B`.
    pub fn kernel_basis_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Minimal-norm lift of `v`.
    pub fn lift(&self, v: &DVector<f64>) -> Result<LiftResult> {
        let m = self.nodes.len();
        if v.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "velocity has {} entries for {m} particles",
                v.len()
            )));
        }
        let vm = DMatrix::from_column_slice(m, 1, v.as_slice());
        let z = self.factor.solve_factor(&vm);
        // weighted least squares for the kernel coefficients
        let qtz = self.whitened_q.transpose() * &z;
        let w = self
            .whitened_r
            .solve_upper_triangular(&qtz)
            .ok_or_else(|| Error::RankDeficient("kernel block".into()))?;
        let r = &z - &self.whitened_q * &qtz;
        let p = self.factor.solve_factor_transpose(&r);
        let p = DVector::from_column_slice(p.as_slice());
        let norm_sq = r.norm_squared();
        Ok(LiftResult {
            nodes: self.nodes.clone(),
            basis: Basis::Greens,
            c: p.clone(),
            p,
            w: [w[0], w[1], w[2]],
            norm_sq,
        })
    }

    /// Derivative of a lift computed by this system at each node; the same
    /// as [`LiftResult::node_derivatives`] at the cost of one product.
    pub fn node_derivatives(&self, lift: &LiftResult) -> DVector<f64> {
        let kd = self
            .kernel_derivative
            .get_or_init(|| gram_pass(&self.nodes, true).1 * KERNEL_SCALE);
        let mut d = kd * &lift.c;
        for (i, di) in d.iter_mut().enumerate() {
            // B′ = (0, −sin, cos) = (0, −B₂, B₁)
            *di += lift.w[2] * self.b[(i, 1)] - lift.w[1] * self.b[(i, 2)];
        }
        d
    }

    /// `∂‖v‖²/∂q = −2 p ∘ ṽ′(q)` for a lift computed by this system.
    pub fn norm_particle_gradient(&self, lift: &LiftResult) -> DVector<f64> {
        lift.p.component_mul(&self.node_derivatives(lift)) * -2.0
    }

    /// `L_F⁺ = P⊥ K P⊥`, the inverse of `L_F` on the complement of the
    /// kernel evaluations, where `P⊥` is the Euclidean projector onto
    /// `span(B)^⊥`. Also returns an orthonormal basis of `span(B)`.
    pub fn metric_pseudo_inverse(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let qb = self.b.clone().qr().q();
        let k = &self.kernel;
        let kq = k * &qb;
        let qkq = qb.transpose() * &kq;
        let pinv = k - &qb * kq.transpose() - &kq * qb.transpose() + &qb * qkq * qb.transpose();
        (pinv, qb)
    }
}

/// General-basis interpolation: Fourier modes.
fn fourier_lift(config: &ParticleConfig, v: &DVector<f64>, modes: usize) -> Result<LiftResult> {
    let q = config.positions();
    let m = q.len();
    if modes + 3 < m {
        return Err(Error::RankDeficient(format!(
            "{modes} Fourier modes cannot interpolate {m} particles"
        )));
    }
    // whitened evaluation matrix: columns f_k(q)/sqrt((G_F)_kk)
    let gram_diag: Vec<f64> = (0..modes)
        .map(|k| {
            let n = Basis::fourier_frequency(k);
            (n * n * n - n) / 4.0
        })
        .collect();
    let lambda = DMatrix::from_fn(m, modes, |i, k| {
        let n = Basis::fourier_frequency(k);
        if k % 2 == 0 {
            (n * q[i]).cos()
        } else {
            (n * q[i]).sin()
        }
    });
    let mut white = lambda.clone();
    for (k, mut col) in white.column_iter_mut().enumerate() {
        col /= gram_diag[k].sqrt();
    }
    let b = kernel_matrix(q);
    let qr_b = b.clone().qr();
    let qb = qr_b.q();
    let rb = qr_b.r();
    let project = |x: &DMatrix<f64>| x - &qb * (qb.transpose() * x);
    let pa = project(&white);
    let vm = DMatrix::from_column_slice(m, 1, v.as_slice());
    let pv = project(&vm);

    let svd = pa.transpose().svd(true, true);
    // pa' = U S Vᵀ  ⇒  pa = V S Uᵀ, with V spanning the column space of pa
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let smax = svd.singular_values.amax();
    let tol = smax * 1e-13 * (m.max(modes) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < m - 3 {
        return Err(Error::RankDeficient(format!(
            "Fourier basis has rank {rank} < {} on this configuration",
            m - 3
        )));
    }
    let mut y = DMatrix::zeros(modes, 1);
    let mut p = DVector::zeros(m);
    let vt_pv = vt * &pv;
    for s in 0..svd.singular_values.len() {
        let sigma = svd.singular_values[s];
        if sigma <= tol {
            continue;
        }
        let coeff = vt_pv[(s, 0)];
        y += u.column(s) * (coeff / sigma);
        p += vt.row(s).transpose() * (coeff / (sigma * sigma));
    }
    let resid = &vm - &white * &y;
    let w = rb
        .solve_upper_triangular(&(qb.transpose() * resid))
        .ok_or_else(|| Error::RankDeficient("kernel block".into()))?;
    let c = DVector::from_iterator(modes, (0..modes).map(|k| y[(k, 0)] / gram_diag[k].sqrt()));
    Ok(LiftResult {
        nodes: q.to_vec(),
        basis: Basis::Fourier { modes },
        p,
        w: [w[0], w[1], w[2]],
        c,
        norm_sq: y.norm_squared(),
    })
}

/// Minimal-seminorm interpolant of `v` from `basis ⊕ span{1, cos, sin}`.
pub fn minimal_lift(config: &ParticleConfig, v: &DVector<f64>, basis: Basis) -> Result<LiftResult> {
    match basis {
        Basis::Greens => GreensSystem::new(config)?.lift(v),
        Basis::Fourier { modes } => {
            if v.len() != config.len() {
                return Err(Error::DimensionMismatch(format!(
                    "velocity has {} entries for {} particles",
                    v.len(),
                    config.len()
                )));
            }
            fourier_lift(config, v, modes)
        }
    }
}

fn kernel_part(w: &[f64; 3], b: [f64; 3]) -> f64 {
    w[0] * b[0] + w[1] * b[1] + w[2] * b[2]
}

/// `ṽ(θ) = Σ c_n f_n(θ) + Σ w_j b_j(θ)`.
pub fn lift_eval(lift: &LiftResult, theta: f64) -> f64 {
    let k = kernel_part(&lift.w, kernel_basis(theta));
    match lift.basis {
        Basis::Greens => {
            k + KERNEL_SCALE
                * lift
                    .nodes
                    .iter()
                    .zip(lift.c.iter())
                    .map(|(&q, &c)| c * green_function(theta - q))
                    .sum::<f64>()
        }
        Basis::Fourier { .. } => {
            k + lift
                .c
                .iter()
                .enumerate()
                .map(|(j, &c)| {
                    let n = Basis::fourier_frequency(j);
                    if j % 2 == 0 {
                        c * (n * theta).cos()
                    } else {
                        c * (n * theta).sin()
                    }
                })
                .sum::<f64>()
        }
    }
}

/// `ṽ′(θ)`.
pub fn lift_eval_derivative(lift: &LiftResult, theta: f64) -> f64 {
    let k = kernel_part(&lift.w, kernel_basis_derivative(theta));
    match lift.basis {
        Basis::Greens => {
            k + KERNEL_SCALE
                * lift
                    .nodes
                    .iter()
                    .zip(lift.c.iter())
                    .map(|(&q, &c)| c * green_function_derivative(theta - q))
                    .sum::<f64>()
        }
        Basis::Fourier { .. } => {
            k + lift
                .c
                .iter()
                .enumerate()
                .map(|(j, &c)| {
                    let n = Basis::fourier_frequency(j);
                    if j % 2 == 0 {
                        -c * n * (n * theta).sin()
                    } else {
                        c * n * (n * theta).cos()
                    }
                })
                .sum::<f64>()
        }
    }
}

/// Squared discrete WP norm.
pub fn wp_norm_sq(config: &ParticleConfig, v: &DVector<f64>, basis: Basis) -> Result<f64> {
    Ok(minimal_lift(config, v, basis)?.norm_sq)
}

/// `v1ᵀ L_F v2` by polarization.
pub fn wp_inner(config: &ParticleConfig, v1: &DVector<f64>, v2: &DVector<f64>, basis: Basis) -> Result<f64> {
    let plus = v1 + v2;
    let minus = v1 - v2;
    match basis {
        Basis::Greens => {
            let sys = GreensSystem::new(config)?;
            Ok((sys.lift(&plus)?.norm_sq - sys.lift(&minus)?.norm_sq) / 4.0)
        }
        _ => Ok((wp_norm_sq(config, &plus, basis)? - wp_norm_sq(config, &minus, basis)?) / 4.0),
    }
}

/// `∂‖v‖²/∂q = −2 p ∘ ṽ′(q)`.
pub fn norm_particle_gradient(lift: &LiftResult) -> DVector<f64> {
    let d = lift.node_derivatives();
    lift.p.component_mul(&d) * -2.0
}
