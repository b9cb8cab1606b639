//! Discrete geodesics: path energy, its gradient, the path-space metric,
//! the constrained natural-gradient direction and the descent loop.
//!
//! A path is stored as its velocity grid `V` (`M × T`); particle positions
//! follow from the fixed linear map of [`crate::temporal`]. Admissible
//! updates keep the endpoint constraint `Σ_t h^t v^t = qT1 − q0`, so every
//! descent direction lies in the null space of the [`ConstraintMap`].

use std::f64::consts::{PI, TAU};

use log::{debug, info};
use nalgebra::{DMatrix, DVector};

use crate::circle::ParticleConfig;
use crate::error::{Error, Result};
use crate::temporal::{
    build_quadrature, endpoint_residual, first_unordered_slice, particles_unchecked, QuadratureScheme, SchemeKind,
    VelocityGrid,
};
use crate::wp_metric::{wp_inner, Basis, GreensSystem, LiftResult};

/// Smallest LU pivot of a per-particle Jacobian block before the path
/// metric is declared degenerate.
const PIVOT_FLOOR: f64 = 1e-8;
/// Below this the structured block solve falls back to dense LU.
const SEMISEPARABLE_FLOOR: f64 = 1e-6;

/// Solver settings for [`minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicConfig {
    pub scheme: SchemeKind,
    pub time_steps: usize,
    pub max_iter: usize,
    /// Bound on the relative energy decrease of an accepted step.
    pub tol_obj: f64,
    /// Bound on `‖d‖_F / sqrt(MT)` for the projected direction `d`.
    pub tol_grad: f64,
    /// Energies below this are treated as zero and stop the descent.
    pub energy_floor: f64,
    /// Weight of the Möbius directions in the regularized metric, relative
    /// to `3/M`.
    pub kappa_rel: f64,
    /// Try a constant-speed reparametrization every this many iterations
    /// while the norm constancy exceeds 1e-6; 0 disables it.
    pub reparametrize_every: usize,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        GeodesicConfig {
            scheme: SchemeKind::PiecewiseLinear,
            time_steps: 150,
            max_iter: 500,
            tol_obj: 1e-8,
            tol_grad: 1e-6,
            energy_floor: 1e-14,
            kappa_rel: 10.0,
            reparametrize_every: 10,
        }
    }
}

/// The linear map `A V = Σ_t h^t v^t`.
#[derive(Debug, Clone)]
pub struct ConstraintMap {
    weights: DVector<f64>,
}

impl ConstraintMap {
    pub fn new(scheme: &QuadratureScheme) -> Self {
        ConstraintMap {
            weights: DVector::from_column_slice(scheme.weights()),
        }
    }

    pub fn apply(&self, v: &VelocityGrid) -> DVector<f64> {
        v * &self.weights
    }

    /// `Aᵀ λ`: column `t` is `h^t λ`.
    pub fn adjoint(&self, lambda: &DVector<f64>) -> VelocityGrid {
        lambda * self.weights.transpose()
    }

    /// Remove the component of `d` outside the null space in the Euclidean
    /// inner product.
    pub fn project_euclidean(&self, d: &mut VelocityGrid) {
        let r = self.apply(d) / self.weights.norm_squared();
        *d -= self.adjoint(&r);
    }
}

/// A discrete path with its per-slice lifts.
#[derive(Debug, Clone)]
pub struct PathState {
    pub q0: DVector<f64>,
    pub qt1: DVector<f64>,
    pub v: VelocityGrid,
    pub q: DMatrix<f64>,
    pub lifts: Vec<LiftResult>,
    pub energy: f64,
    systems: Vec<GreensSystem>,
    weights: Vec<f64>,
}

impl PathState {
    pub fn new(q0: DVector<f64>, qt1: DVector<f64>, v: VelocityGrid, scheme: &QuadratureScheme) -> Result<Self> {
        if q0.len() != qt1.len() || v.nrows() != q0.len() || v.ncols() != scheme.len() {
            return Err(Error::DimensionMismatch(format!(
                "endpoints {}/{}, velocity grid {}×{}, T = {}",
                q0.len(),
                qt1.len(),
                v.nrows(),
                v.ncols(),
                scheme.len()
            )));
        }
        let q = particles_unchecked(&q0, &qt1, &v, scheme);
        if let Some(slice) = first_unordered_slice(&q) {
            return Err(Error::OrderingViolated { slice });
        }
        let mut systems = Vec::with_capacity(scheme.len());
        let mut lifts = Vec::with_capacity(scheme.len());
        let mut energy = 0.0;
        for t in 0..scheme.len() {
            let config = ParticleConfig::new(q.column(t).iter().copied().collect())?;
            let sys = GreensSystem::new(&config)?;
            let lift = sys.lift(&v.column(t).into_owned())?;
            energy += scheme.weights()[t] * lift.norm_sq;
            systems.push(sys);
            lifts.push(lift);
        }
        Ok(PathState {
            q0,
            qt1,
            v,
            q,
            lifts,
            energy,
            systems,
            weights: scheme.weights().to_vec(),
        })
    }

    pub fn particles(&self) -> usize {
        self.q0.len()
    }

    pub fn time_steps(&self) -> usize {
        self.weights.len()
    }

    /// Unweighted `‖v^t‖²` for each slice.
    pub fn slice_norms(&self) -> Vec<f64> {
        self.lifts.iter().map(|l| l.norm_sq).collect()
    }
}

/// `E = Σ_t h^t (v^t)ᵀ L_F^t v^t`.
pub fn path_energy(state: &PathState) -> f64 {
    state.energy
}

/// `∂E/∂V`.
///
/// `½ ∂E/∂v^t = h^t p^t − Σ_r Z_{t,r} h^r p^r ∘ ṽ′^r(q^r)`: the direct term
/// from the quadratic form plus the chain rule through the particle
/// positions.
pub fn energy_gradient(state: &PathState, scheme: &QuadratureScheme) -> DMatrix<f64> {
    let m = state.particles();
    let t = state.time_steps();
    let h = scheme.weights();
    let mut direct = DMatrix::zeros(m, t);
    let mut through_q = DMatrix::zeros(m, t);
    for (k, lift) in state.lifts.iter().enumerate() {
        direct.set_column(k, &(&lift.p * h[k]));
        // −½ ∂(h‖v‖²)/∂q
        through_q.set_column(k, &(state.systems[k].norm_particle_gradient(lift) * (-0.5 * h[k])));
    }
    (direct - through_q * scheme.z().transpose()) * 2.0
}

/// LU factors of a per-particle block `Y_m = I − diag(W_m) Zᵀ`, able to
/// solve with the block and its transpose.
#[derive(Debug, Clone)]
struct BlockLu {
    l: DMatrix<f64>,
    u: DMatrix<f64>,
    perm: nalgebra::linalg::PermutationSequence<nalgebra::Dyn>,
}

impl BlockLu {
    fn new(a: DMatrix<f64>) -> Option<Self> {
        let lu = a.lu();
        let u = lu.u();
        let scale = u.amax().max(1.0);
        if u.diagonal().iter().any(|d| d.abs() < PIVOT_FLOOR * scale) {
            return None;
        }
        Some(BlockLu {
            l: lu.l(),
            u,
            perm: lu.p().clone(),
        })
    }

    /// `Y⁻¹ b` with `P Y = L U`.
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.perm.permute_rows(&mut x);
        let y = self.l.solve_lower_triangular(&x).expect("unit diagonal");
        self.u.solve_upper_triangular(&y).expect("pivots checked")
    }

    /// `Y⁻ᵀ b`, using `Yᵀ = Uᵀ Lᵀ P`.
    fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let a = self.u.tr_solve_upper_triangular(b).expect("pivots checked");
        let mut x = self.l.tr_solve_lower_triangular(&a).expect("unit diagonal");
        self.perm.inv_permute_rows(&mut x);
        x
    }
}

/// A block `Y = I − diag(w) Zᵀ` of the symmetric piecewise-linear rule,
/// where `Z_{r,c} = ±h/2` above and below the diagonal. Writing
/// `Y = T + u 1ᵀ` with `u = h w / 2` and `T` lower triangular, both `T` and
/// `Tᵀ` are solved by running sums and the rank-one term by
/// Sherman-Morrison, so each solve is `O(T)`.
#[derive(Debug, Clone)]
struct SemiseparableBlock {
    w: Vec<f64>,
    h: f64,
    /// `T⁻¹u` and `1 + 1ᵀT⁻¹u`.
    t_inv_u: Vec<f64>,
    denom: f64,
    /// `Tᵀ⁻¹1` and `1 + uᵀTᵀ⁻¹1`.
    tt_inv_one: Vec<f64>,
    denom_t: f64,
}

impl SemiseparableBlock {
    fn new(w: Vec<f64>, h: f64) -> Option<Self> {
        if w.iter().any(|&x| (1.0 - 0.5 * h * x).abs() < SEMISEPARABLE_FLOOR) {
            return None;
        }
        let mut block = SemiseparableBlock {
            w,
            h,
            t_inv_u: Vec::new(),
            denom: 0.0,
            tt_inv_one: Vec::new(),
            denom_t: 0.0,
        };
        let u: Vec<f64> = block.w.iter().map(|x| 0.5 * h * x).collect();
        block.t_inv_u = block.solve_t(&u);
        block.denom = 1.0 + block.t_inv_u.iter().sum::<f64>();
        block.tt_inv_one = block.solve_t_transpose(&vec![1.0; u.len()]);
        block.denom_t = 1.0 + u.iter().zip(&block.tt_inv_one).map(|(a, b)| a * b).sum::<f64>();
        if block.denom.abs() < SEMISEPARABLE_FLOOR || block.denom_t.abs() < SEMISEPARABLE_FLOOR {
            return None;
        }
        Some(block)
    }

    /// `T x = b`: `(1 − h w_a/2) x_a − h w_a Σ_{b<a} x_b = b_a`.
    fn solve_t(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; b.len()];
        let mut sum = 0.0;
        for a in 0..b.len() {
            let wa = self.w[a];
            x[a] = (b[a] + self.h * wa * sum) / (1.0 - 0.5 * self.h * wa);
            sum += x[a];
        }
        x
    }

    /// `Tᵀ x = b`: `(1 − h w_a/2) x_a − h Σ_{b>a} w_b x_b = b_a`.
    fn solve_t_transpose(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; b.len()];
        let mut sum = 0.0;
        for a in (0..b.len()).rev() {
            let wa = self.w[a];
            x[a] = (b[a] + self.h * sum) / (1.0 - 0.5 * self.h * wa);
            sum += wa * x[a];
        }
        x
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.solve_t(b.as_slice());
        let f = y.iter().sum::<f64>() / self.denom;
        DVector::from_iterator(y.len(), y.iter().zip(&self.t_inv_u).map(|(a, c)| a - f * c))
    }

    fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.solve_t_transpose(b.as_slice());
        let f = self.w.iter().zip(&y).map(|(w, a)| 0.5 * self.h * w * a).sum::<f64>() / self.denom_t;
        DVector::from_iterator(y.len(), y.iter().zip(&self.tt_inv_one).map(|(a, c)| a - f * c))
    }
}

/// Solver for one per-particle block of `Y`.
#[derive(Debug, Clone)]
enum BlockSolver {
    Dense(BlockLu),
    Semiseparable(SemiseparableBlock),
}

impl BlockSolver {
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            BlockSolver::Dense(lu) => lu.solve(b),
            BlockSolver::Semiseparable(s) => s.solve(b),
        }
    }

    fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            BlockSolver::Dense(lu) => lu.solve_transpose(b),
            BlockSolver::Semiseparable(s) => s.solve_transpose(b),
        }
    }
}

/// Discrete path-space metric `H = Yᵀ D Y`.
///
/// `Y u = u − W (u Z)` linearizes the Eulerian velocity of a perturbed path
/// at the fixed particle labels: `W^t = diag(ṽ′(q^t))` and `D` is
/// block-diagonal with blocks `h^t L_F^t`. With this `Y` the energy gradient
/// is exactly `2 Yᵀ D V`.
///
/// The natural-gradient solve uses `D_reg`, which adds `κ h^t P_S^t` to each
/// block, where `P_S^t` is the projector onto the Möbius directions at
/// `q^t`. Its inverse is available slice by slice without a dense solve.
#[derive(Debug)]
pub struct PathMetric<'a> {
    state: &'a PathState,
    z: DMatrix<f64>,
    /// `ṽ′` at the particles, `M × T`.
    w: DMatrix<f64>,
    blocks: Vec<BlockSolver>,
    /// `(L_F^t + κ P_S^t)⁻¹`.
    reg_inverse: Vec<DMatrix<f64>>,
    pub kappa: f64,
}

/// Assemble the metric for `state`.
pub fn build_path_metric<'a>(
    state: &'a PathState,
    scheme: &QuadratureScheme,
    kappa_rel: f64,
) -> Result<PathMetric<'a>> {
    let m = state.particles();
    let t = state.time_steps();
    let mut w = DMatrix::zeros(m, t);
    for (k, lift) in state.lifts.iter().enumerate() {
        w.set_column(k, &state.systems[k].node_derivatives(lift));
    }
    let z = scheme.z().clone();
    let zt = z.transpose();
    let piecewise_linear = scheme.kind() == SchemeKind::PiecewiseLinear;
    let mut blocks = Vec::with_capacity(m);
    for j in 0..m {
        if piecewise_linear {
            let wj: Vec<f64> = w.row(j).iter().copied().collect();
            if let Some(b) = SemiseparableBlock::new(wj, scheme.weights()[0]) {
                blocks.push(BlockSolver::Semiseparable(b));
                continue;
            }
        }
        let mut y = -zt.clone();
        for (r, mut row) in y.row_iter_mut().enumerate() {
            row *= w[(j, r)];
        }
        for d in 0..t {
            y[(d, d)] += 1.0;
        }
        let lu = BlockLu::new(y).ok_or(Error::DegenerateJacobian { particle: j })?;
        blocks.push(BlockSolver::Dense(lu));
    }
    let kappa = kappa_rel * 3.0 / m as f64;
    let reg_inverse = state
        .systems
        .iter()
        .map(|sys| {
            let (pinv, qb) = sys.metric_pseudo_inverse();
            pinv + &qb * qb.transpose() / kappa
        })
        .collect();
    Ok(PathMetric {
        state,
        z,
        w,
        blocks,
        reg_inverse,
        kappa,
    })
}

impl PathMetric<'_> {
    /// `Y u`.
    pub fn apply_y(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        u - (u * &self.z).component_mul(&self.w)
    }

    /// `Yᵀ x`.
    pub fn apply_y_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x - x.component_mul(&self.w) * self.z.transpose()
    }

    /// `D u`: per slice `h^t L_F^t u^t`.
    fn apply_d(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(u.nrows(), u.ncols());
        for (k, sys) in self.state.systems.iter().enumerate() {
            let lift = sys.lift(&u.column(k).into_owned())?;
            out.set_column(k, &(lift.p * self.state.weights[k]));
        }
        Ok(out)
    }

    /// `H u = Yᵀ D Y u`.
    pub fn apply(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.apply_y_transpose(&self.apply_d(&self.apply_y(u))?))
    }

    /// `⟨u, H w⟩`.
    pub fn inner(&self, u: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
        Ok(u.dot(&self.apply(w)?))
    }

    fn solve_y(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (j, lu) in self.blocks.iter().enumerate() {
            let s = lu.solve(&x.row(j).transpose());
            out.set_row(j, &s.transpose());
        }
        out
    }

    fn solve_y_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (j, lu) in self.blocks.iter().enumerate() {
            let s = lu.solve_transpose(&x.row(j).transpose());
            out.set_row(j, &s.transpose());
        }
        out
    }

    /// `D_reg⁻¹ x`.
    fn solve_d_reg(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (k, n) in self.reg_inverse.iter().enumerate() {
            out.set_column(k, &(n * x.column(k) / self.state.weights[k]));
        }
        out
    }
}

/// Constrained natural-gradient direction.
///
/// Solves the KKT system `H_reg d + Aᵀλ = grad`, `A d = 0`, with
/// `H_reg = Yᵀ D_reg Y`. The pairing `⟨grad, d⟩ = ⟨d, H_reg d⟩` is then
/// nonnegative, so `V − ε d` descends for small `ε`.
pub fn project_natural_gradient(
    grad: &DMatrix<f64>,
    metric: &PathMetric<'_>,
    a: &ConstraintMap,
) -> Result<DMatrix<f64>> {
    NaturalProjector::new(metric, a)?.apply(grad)
}

/// The linear map `grad ↦ d` of [`project_natural_gradient`] with its
/// Schur complement factored once. It is symmetric positive semidefinite
/// in the Euclidean pairing and maps into `null(A)`.
pub struct NaturalProjector<'m, 'a> {
    metric: &'m PathMetric<'a>,
    constraint: &'m ConstraintMap,
    c: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl<'m, 'a> NaturalProjector<'m, 'a> {
    pub fn new(metric: &'m PathMetric<'a>, a: &'m ConstraintMap) -> Result<Self> {
        let m = metric.state.particles();
        let t = metric.state.time_steps();
        // c_j = Y_j⁻ᵀ h: the image of the constraint normal of particle j
        let h = &a.weights;
        let c = DMatrix::from_rows(
            &metric
                .blocks
                .iter()
                .map(|lu| lu.solve_transpose(h).transpose())
                .collect::<Vec<_>>(),
        );
        let mut schur = DMatrix::zeros(m, m);
        for k in 0..t {
            let ck = c.column(k);
            let n = &metric.reg_inverse[k];
            let scale = 1.0 / metric.state.weights[k];
            for i in 0..m {
                for j in 0..=i {
                    schur[(i, j)] += ck[i] * ck[j] * n[(i, j)] * scale;
                }
            }
        }
        for i in 0..m {
            for j in 0..i {
                schur[(j, i)] = schur[(i, j)];
            }
        }
        let chol = schur.cholesky().ok_or(Error::SingularProjection)?;
        Ok(NaturalProjector {
            metric,
            constraint: a,
            c,
            chol,
        })
    }

    pub fn apply(&self, grad: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let metric = self.metric;
        let m = grad.nrows();
        let e_g = metric.solve_d_reg(&metric.solve_y_transpose(grad));
        let rhs = DVector::from_iterator(m, (0..m).map(|i| self.c.row(i).dot(&e_g.row(i))));
        let lambda = self.chol.solve(&rhs);
        if lambda.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularProjection);
        }
        let mut corr = self.c.clone();
        for (i, mut row) in corr.row_iter_mut().enumerate() {
            row *= lambda[i];
        }
        let e = e_g - metric.solve_d_reg(&corr);
        let mut d = metric.solve_y(&e);
        self.constraint.project_euclidean(&mut d);
        Ok(d)
    }
}

/// Why the descent loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Both stopping tolerances were met.
    Converged,
    /// The energy fell below the configured floor.
    ZeroEnergy,
    /// No step length decreased the energy.
    Stalled,
    MaxIterReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// `max_t ‖v^t‖² / min_t ‖v^t‖² − 1`, or 0 for a path of zero velocity.
    pub norm_constancy: f64,
    /// `‖d‖_F / sqrt(MT)` of the last projected direction.
    pub projected_gradient_norm: f64,
    /// `max |qT1 − q0 − A V|`.
    pub endpoint_residual: f64,
    /// `⟨grad, d⟩ / (‖grad‖ ‖d‖)` of the last direction.
    pub gradient_alignment: f64,
}

#[derive(Debug, Clone)]
pub struct GeodesicResult {
    pub state: PathState,
    pub scheme: QuadratureScheme,
    pub energy_history: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub diagnostics: Diagnostics,
}

impl GeodesicResult {
    pub fn converged(&self) -> bool {
        matches!(self.stop, StopReason::Converged | StopReason::ZeroEnergy)
    }

    pub fn energy(&self) -> f64 {
        self.state.energy
    }

    /// Path length; equals `sqrt(E)` on a constant-speed path.
    pub fn length(&self) -> f64 {
        self.state.energy.max(0.0).sqrt()
    }

    /// Velocity at the start of the path, extrapolated from the grid.
    pub fn initial_velocity(&self) -> DVector<f64> {
        self.scheme.velocity_at(&self.state.v, 0.0)
    }
}

/// Norm-constancy diagnostic of a velocity profile.
pub fn norm_constancy(norms: &[f64]) -> f64 {
    let max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    if max < 1e-10 {
        // noise-level velocities carry no constancy information
        return 0.0;
    }
    max / min - 1.0
}

fn diagnostics(
    state: &PathState,
    scheme: &QuadratureScheme,
    grad: Option<&DMatrix<f64>>,
    d: Option<&DMatrix<f64>>,
) -> Diagnostics {
    let size = (state.particles() * state.time_steps()) as f64;
    let (pg, align) = match (grad, d) {
        (Some(g), Some(d)) => {
            let denom = g.norm() * d.norm();
            let align = if denom > 0.0 { g.dot(d) / denom } else { 0.0 };
            (d.norm() / size.sqrt(), align)
        }
        _ => (0.0, 0.0),
    };
    Diagnostics {
        norm_constancy: norm_constancy(&state.slice_norms()),
        projected_gradient_norm: pg,
        endpoint_residual: endpoint_residual(&state.q0, &state.qt1, &state.v, scheme).amax(),
        gradient_alignment: align,
    }
}

/// The same particle path traversed at constant WP speed, adjusted to meet
/// the endpoint constraint. Speeds are taken piecewise constant on the
/// quadrature cells.
fn constant_speed(state: &PathState, scheme: &QuadratureScheme, a: &ConstraintMap) -> Option<VelocityGrid> {
    let speed: Vec<f64> = state.slice_norms().iter().map(|n| n.max(0.0).sqrt()).collect();
    if speed.iter().any(|&x| x < 1e-12) {
        return None;
    }
    let h = scheme.weights();
    let mut bounds = vec![0.0];
    let mut cum = vec![0.0];
    for k in 0..h.len() {
        bounds.push(bounds[k] + h[k]);
        cum.push(cum[k] + h[k] * speed[k]);
    }
    let total = cum[h.len()];
    let span = bounds[h.len()];
    let mut v = DMatrix::zeros(state.v.nrows(), h.len());
    for (k, &tau) in scheme.nodes().iter().enumerate() {
        let target = tau / span * total;
        let j = cum.partition_point(|&c| c <= target).clamp(1, h.len()) - 1;
        let s = bounds[j] + (target - cum[j]) / speed[j];
        let col = scheme.velocity_at(&state.v, s) * (total / span / speed[j]);
        v.set_column(k, &col);
    }
    let shift = (&state.qt1 - &state.q0 - a.apply(&v)) / span;
    for mut col in v.column_iter_mut() {
        col += &shift;
    }
    Some(v)
}

/// Shift `qt1` by a multiple of `2π` so that it is as close as possible to
/// `q0` on average.
fn align_branch(q0: &DVector<f64>, qt1: &DVector<f64>) -> DVector<f64> {
    let mean = (q0 - qt1).mean();
    let k = (mean / TAU).round();
    qt1.add_scalar(k * TAU)
}

fn validate_endpoint(q: &DVector<f64>) -> Result<()> {
    ParticleConfig::new(q.iter().copied().collect()).map(|_| ())
}

/// Minimize the path energy between two particle configurations.
///
/// `q0` and `qt1` are the positions of the same particles at the two ends;
/// each must be strictly increasing with span below `2π`.
pub fn minimize(q0: &DVector<f64>, qt1: &DVector<f64>, config: &GeodesicConfig) -> Result<GeodesicResult> {
    minimize_from(q0, qt1, None, config)
}

/// [`minimize`] started from a velocity grid given on another time
/// discretization, for example a coarser solve of the same problem. The
/// grid is resampled at the nodes of `config` and shifted per particle to
/// satisfy the endpoint constraint; if the resulting path is not ordered
/// the default initialization is used.
pub fn minimize_from(
    q0: &DVector<f64>,
    qt1: &DVector<f64>,
    initial: Option<(&QuadratureScheme, &VelocityGrid)>,
    config: &GeodesicConfig,
) -> Result<GeodesicResult> {
    validate_endpoint(q0)?;
    validate_endpoint(qt1)?;
    if q0.len() != qt1.len() {
        return Err(Error::DimensionMismatch(format!(
            "endpoints have {} and {} particles",
            q0.len(),
            qt1.len()
        )));
    }
    let scheme = build_quadrature(config.scheme, config.time_steps)?;
    let qt1 = align_branch(q0, qt1);
    let m = q0.len();
    let t = scheme.len();
    let delta = &qt1 - q0;
    let warm = initial.and_then(|(coarse, v)| {
        if v.nrows() != m {
            return None;
        }
        let mut v0 = DMatrix::zeros(m, t);
        for (k, &s) in scheme.nodes().iter().enumerate() {
            v0.set_column(k, &coarse.velocity_at(v, s));
        }
        let a = ConstraintMap::new(&scheme);
        let total: f64 = scheme.weights().iter().sum();
        let shift = (&delta - a.apply(&v0)) / total;
        for mut col in v0.column_iter_mut() {
            col += &shift;
        }
        PathState::new(q0.clone(), qt1.clone(), v0, &scheme).ok()
    });
    let mut state = match warm {
        Some(state) => state,
        None => {
            let v0 = DMatrix::from_fn(m, t, |i, _| delta[i]);
            PathState::new(q0.clone(), qt1, v0, &scheme)?
        }
    };
    let a = ConstraintMap::new(&scheme);
    let size = ((m * t) as f64).sqrt();

    let mut history = vec![state.energy];
    let mut step = 0.5;
    let mut last_grad = None;
    let mut last_dir = None;
    let mut stop = StopReason::MaxIterReached;
    let mut iterations = 0;
    info!("geodesic: M = {m}, T = {t}, initial energy {:.6e}", state.energy);

    while iterations < config.max_iter {
        if state.energy < config.energy_floor {
            stop = StopReason::ZeroEnergy;
            break;
        }
        if config.reparametrize_every > 0
            && iterations % config.reparametrize_every == 0
            && norm_constancy(&state.slice_norms()) > 1e-6
        {
            if let Some(v) = constant_speed(&state, &scheme, &a) {
                if let Ok(trial) = PathState::new(state.q0.clone(), state.qt1.clone(), v, &scheme) {
                    if trial.energy < state.energy {
                        debug!("reparametrized: E {:.12e} -> {:.12e}", state.energy, trial.energy);
                        state = trial;
                    }
                }
            }
        }
        let grad = energy_gradient(&state, &scheme);
        let metric = build_path_metric(&state, &scheme, config.kappa_rel)?;
        let d = project_natural_gradient(&grad, &metric, &a)?;
        drop(metric);
        let dnorm = d.norm() / size;
        let slope = grad.dot(&d);
        let current = state.energy;

        // backtracking line search along −d
        let mut accepted = None;
        let mut any_ordered = false;
        let mut eps = step;
        for _ in 0..60 {
            let trial_v = &state.v - &d * eps;
            match PathState::new(state.q0.clone(), state.qt1.clone(), trial_v, &scheme) {
                Ok(trial) => {
                    any_ordered = true;
                    let j = trial.energy;
                    if j <= current - 1e-4 * eps * slope && j < current {
                        accepted = Some((trial, eps));
                        break;
                    }
                }
                Err(Error::OrderingViolated { .. }) => {}
                Err(e) => return Err(e),
            }
            eps *= 0.5;
        }
        last_grad = Some(grad);
        last_dir = Some(d);
        let Some((trial, eps)) = accepted else {
            if !any_ordered {
                return Err(Error::OrderingViolated { slice: 0 });
            }
            stop = StopReason::Stalled;
            break;
        };
        iterations += 1;
        state = trial;
        history.push(state.energy);
        let rel = (current - state.energy) / current;
        debug!(
            "iter {iterations}: E = {:.12e}, step = {eps:.3e}, |d| = {dnorm:.3e}, constancy = {:.3e}",
            state.energy,
            norm_constancy(&state.slice_norms())
        );
        step = (2.0 * eps).min(1.0);
        if rel < config.tol_obj && dnorm < config.tol_grad {
            stop = StopReason::Converged;
            break;
        }
    }
    if state.energy < config.energy_floor {
        stop = StopReason::ZeroEnergy;
    }
    let diagnostics = diagnostics(&state, &scheme, last_grad.as_ref(), last_dir.as_ref());
    info!(
        "geodesic: stopped after {iterations} iterations ({stop:?}), E = {:.6e}, constancy = {:.3e}",
        state.energy, diagnostics.norm_constancy
    );
    Ok(GeodesicResult {
        state,
        scheme,
        energy_history: history,
        iterations,
        stop,
        diagnostics,
    })
}

/// Angle between two tangent vectors at the same configuration, in the WP
/// inner product.
pub fn vertex_angle(config: &ParticleConfig, v1: &DVector<f64>, v2: &DVector<f64>) -> Result<f64> {
    let sys = GreensSystem::new(config)?;
    let n1 = sys.lift(v1)?.norm_sq;
    let n2 = sys.lift(v2)?.norm_sq;
    for n in [n1, n2] {
        if n.max(0.0).sqrt() < 1e-12 {
            return Err(Error::ZeroVelocity(n.max(0.0).sqrt()));
        }
    }
    let inner = wp_inner(config, v1, v2, Basis::Greens)?;
    let cos = (inner / (n1 * n2).sqrt()).clamp(-1.0, 1.0);
    let angle = cos.acos();
    debug_assert!((0.0..=PI).contains(&angle));
    Ok(angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::particles_from_velocities;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(seed: u64, m: usize, t: usize, kind: SchemeKind) -> (PathState, QuadratureScheme) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scheme = build_quadrature(kind, t).unwrap();
        let q0 = DVector::from_fn(m, |i, _| (i as f64 + rng.random_range(-0.2..0.2)) * TAU / m as f64);
        let qt1 = DVector::from_fn(m, |i, _| q0[i] + 0.1 * ((i as f64) * 1.3).sin());
        let v = DMatrix::from_fn(m, t, |i, _| qt1[i] - q0[i] + rng.random_range(-0.05..0.05));
        (PathState::new(q0, qt1, v, &scheme).unwrap(), scheme)
    }

    #[test]
    fn semiseparable_block_matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = 17;
        let scheme = build_quadrature(SchemeKind::PiecewiseLinear, t).unwrap();
        let w: Vec<f64> = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let zt = scheme.z().transpose();
        let y = DMatrix::from_fn(t, t, |a, b| if a == b { 1.0 } else { 0.0 } - w[a] * zt[(a, b)]);
        let fast = SemiseparableBlock::new(w, scheme.weights()[0]).unwrap();
        let b = DVector::from_fn(t, |_, _| rng.random_range(-1.0..1.0));
        let x = fast.solve(&b);
        assert!((&y * &x - &b).amax() < 1e-12);
        let x = fast.solve_transpose(&b);
        assert!((y.transpose() * &x - &b).amax() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, kind) in [(1, SchemeKind::PiecewiseLinear), (2, SchemeKind::GaussLobatto)] {
            let (state, scheme) = random_state(seed, 8, 5, kind);
            let g = energy_gradient(&state, &scheme);
            let h = 1e-6;
            for i in 0..8 {
                for t in 0..5 {
                    let energy = |delta: f64| {
                        let mut v = state.v.clone();
                        v[(i, t)] += delta;
                        PathState::new(state.q0.clone(), state.qt1.clone(), v, &scheme)
                            .unwrap()
                            .energy
                    };
                    let fd = (energy(h) - energy(-h)) / (2.0 * h);
                    assert!(
                        (fd - g[(i, t)]).abs() <= 1e-5 * g[(i, t)].abs().max(1e-3),
                        "{kind:?} ({i},{t}) fd={fd} g={}",
                        g[(i, t)]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_and_kernel_paths() {
        let scheme = build_quadrature(SchemeKind::PiecewiseLinear, 6).unwrap();
        let q0 = DVector::from_fn(10, |i, _| i as f64 * TAU / 10.0);
        let state = PathState::new(q0.clone(), q0.clone(), DMatrix::zeros(10, 6), &scheme).unwrap();
        assert_eq!(path_energy(&state), 0.0);
        assert_eq!(energy_gradient(&state, &scheme).amax(), 0.0);

        // a rigid rotation is a kernel-valued path
        let rot = 0.3;
        let v = DMatrix::from_element(10, 6, rot);
        let state = PathState::new(q0.clone(), q0.add_scalar(rot), v, &scheme).unwrap();
        assert!(path_energy(&state) < 1e-14);
        assert!(energy_gradient(&state, &scheme).amax() < 1e-12);
    }

    #[test]
    fn metric_is_symmetric_semidefinite() {
        let (state, scheme) = random_state(4, 10, 6, SchemeKind::PiecewiseLinear);
        let metric = build_path_metric(&state, &scheme, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let u = DMatrix::from_fn(10, 6, |_, _| rng.random_range(-1.0..1.0));
            let w = DMatrix::from_fn(10, 6, |_, _| rng.random_range(-1.0..1.0));
            assert!(metric.inner(&u, &u).unwrap() >= -1e-12);
            let a = metric.inner(&u, &w).unwrap();
            let b = metric.inner(&w, &u).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_is_metric_applied_to_velocity() {
        let (state, scheme) = random_state(6, 9, 5, SchemeKind::GaussLobatto);
        let metric = build_path_metric(&state, &scheme, 1.0).unwrap();
        let hv = metric.apply_y_transpose(&metric.apply_d(&state.v).unwrap()) * 2.0;
        let g = energy_gradient(&state, &scheme);
        assert!((hv - &g).amax() < 1e-12 * g.amax().max(1.0));
    }

    #[test]
    fn zero_velocity_metric_is_block_diagonal() {
        let scheme = build_quadrature(SchemeKind::PiecewiseLinear, 4).unwrap();
        let q0 = DVector::from_fn(8, |i, _| i as f64 * TAU / 8.0 + 0.05 * (i as f64).sin());
        let state = PathState::new(q0.clone(), q0, DMatrix::zeros(8, 4), &scheme).unwrap();
        let metric = build_path_metric(&state, &scheme, 1.0).unwrap();
        assert_eq!(metric.w.amax(), 0.0);
        let u = DMatrix::from_fn(8, 4, |i, t| ((i * 4 + t) as f64).cos());
        assert_eq!(metric.apply_y(&u), u);
    }

    #[test]
    fn projection_properties() {
        for seed in 0..5 {
            let (state, scheme) = random_state(10 + seed, 12, 7, SchemeKind::PiecewiseLinear);
            let a = ConstraintMap::new(&scheme);
            let metric = build_path_metric(&state, &scheme, 1.0).unwrap();
            let grad = energy_gradient(&state, &scheme);
            let d = project_natural_gradient(&grad, &metric, &a).unwrap();
            assert!(a.apply(&d).amax() < 1e-10);
            assert!(grad.dot(&d) >= 0.0);
        }
    }

    #[test]
    fn projection_with_inactive_constraint() {
        // at V = 0 an admissible gradient is only rescaled by the metric
        let scheme = build_quadrature(SchemeKind::PiecewiseLinear, 4).unwrap();
        let m = 8;
        let q0 = DVector::from_fn(m, |i, _| i as f64 * TAU / m as f64);
        let state = PathState::new(q0.clone(), q0.clone(), DMatrix::zeros(m, 4), &scheme).unwrap();
        let a = ConstraintMap::new(&scheme);
        let metric = build_path_metric(&state, &scheme, 1.0).unwrap();
        let mut grad = DMatrix::from_fn(m, 4, |i, t| (2.0 * q0[i]).sin() * (t as f64 - 1.5));
        a.project_euclidean(&mut grad);
        let d = project_natural_gradient(&grad, &metric, &a).unwrap();
        let direct = metric.solve_y(&metric.solve_d_reg(&metric.solve_y_transpose(&grad)));
        assert!((d - &direct).amax() < 1e-10 * direct.amax());
    }

    #[test]
    fn identity_path_needs_no_descent() {
        let q = DVector::from_fn(12, |i, _| i as f64 * TAU / 12.0 + 0.1 * (i as f64).cos());
        let config = GeodesicConfig {
            time_steps: 6,
            ..Default::default()
        };
        let r = minimize(&q, &q, &config).unwrap();
        assert!(r.energy() < 1e-12);
        assert_eq!(r.iterations, 0);
        assert!(r.converged());
    }

    #[test]
    fn geodesic_between_perturbed_configs() {
        let m = 12;
        let q0 = DVector::from_fn(m, |i, _| i as f64 * TAU / m as f64);
        let qt1 = DVector::from_fn(m, |i, _| q0[i] + 0.15 * (2.0 * q0[i]).sin());
        let config = GeodesicConfig {
            time_steps: 10,
            max_iter: 200,
            ..Default::default()
        };
        let r = minimize(&q0, &qt1, &config).unwrap();
        assert!(r.converged(), "{:?}", r.stop);
        assert!(r.energy_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.diagnostics.endpoint_residual < 1e-9);
        assert!(r.diagnostics.norm_constancy < 1e-3, "{}", r.diagnostics.norm_constancy);
        let q = particles_from_velocities(&r.state.q0, &r.state.qt1, &r.state.v, &r.scheme).unwrap();
        assert!((q - &r.state.q).amax() < 1e-12);

        let back = minimize(&qt1, &q0, &config).unwrap();
        assert!((back.energy() - r.energy()).abs() < 1e-6 * r.energy());
    }

    #[test]
    fn constant_speed_reparametrization() {
        let m = 12;
        let t = 30;
        let scheme = build_quadrature(SchemeKind::PiecewiseLinear, t).unwrap();
        let q0 = DVector::from_fn(m, |i, _| i as f64 * TAU / m as f64);
        let bump = DVector::from_fn(m, |i, _| 0.05 * (2.0 * q0[i]).sin());
        // the same direction at a speed that grows along the path
        let v = DMatrix::from_fn(m, t, |i, k| bump[i] * 3.0 * scheme.nodes()[k].powi(2));
        let a = ConstraintMap::new(&scheme);
        let qt1 = &q0 + a.apply(&v);
        let state = PathState::new(q0.clone(), qt1.clone(), v, &scheme).unwrap();
        let w = constant_speed(&state, &scheme, &a).unwrap();
        assert!((a.apply(&w) - (&qt1 - &q0)).amax() < 1e-14);
        let even = PathState::new(q0, qt1, w, &scheme).unwrap();
        assert!(even.energy < 0.6 * state.energy);
        assert!(norm_constancy(&even.slice_norms()) < 1e-2 * norm_constancy(&state.slice_norms()));
    }

    #[test]
    fn vertex_angles() {
        let c = ParticleConfig::equispaced(16, 0.0).unwrap();
        let v = DVector::from_fn(16, |i, _| (2.0 * c.positions()[i]).sin());
        assert!(vertex_angle(&c, &v, &v).unwrap().abs() < 1e-7);
        assert!((vertex_angle(&c, &v, &-&v).unwrap() - PI).abs() < 1e-7);
        let zero = DVector::zeros(16);
        assert!(matches!(vertex_angle(&c, &v, &zero), Err(Error::ZeroVelocity(_))));
    }
}
