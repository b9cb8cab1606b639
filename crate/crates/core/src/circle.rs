//! Primitives on the unit circle: angles, particle configurations, the
//! Green's function of the WP operator and the Möbius kernel basis.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

/// Below this distance from 0 (mod 2π) the Green's function and its
/// derivative are evaluated from their expansion around the origin.
const SERIES_THRESHOLD: f64 = 1e-4;

/// Minimum number of particles accepted by [`ParticleConfig`].
pub const MIN_PARTICLES: usize = 4;

/// An angle with canonical representative in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Angle(f64);

impl Angle {
    pub fn new(theta: f64) -> Self {
        Angle(normalize(theta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<f64> for Angle {
    fn from(theta: f64) -> Self {
        Angle::new(theta)
    }
}

/// Reduce to `[0, 2π)`.
pub fn normalize(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Reduce to `(-π, π]`.
pub fn centered(theta: f64) -> f64 {
    let r = normalize(theta);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Strictly ordered configuration of `M >= 4` particles on the circle.
///
/// Positions are stored as an unwrapped, strictly increasing sequence whose
/// total span is below `2π`, so that consecutive differences are the arc
/// gaps. Only differences of positions enter the metric, and those are taken
/// through 2π-periodic functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleConfig {
    q: Vec<f64>,
}

impl ParticleConfig {
    /// Accept an already unwrapped, strictly increasing sequence.
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.len() < MIN_PARTICLES {
            return Err(Error::TooFewParticles {
                min: MIN_PARTICLES,
                got: q.len(),
            });
        }
        check_cyclic_order(&q)?;
        Ok(ParticleConfig { q })
    }

    /// Unwrap angles given in cyclic order (any branch) starting at the first.
    pub fn from_cyclic(angles: &[f64]) -> Result<Self> {
        Self::new(unwrap_cyclic(angles))
    }

    /// `m` equispaced particles starting at `offset`.
    pub fn equispaced(m: usize, offset: f64) -> Result<Self> {
        Self::new((0..m).map(|k| offset + TAU * k as f64 / m as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.q
    }

    pub fn into_positions(self) -> Vec<f64> {
        self.q
    }

    /// Smallest arc gap, including the wrap-around gap.
    pub fn min_gap(&self) -> f64 {
        let n = self.q.len();
        let wrap = self.q[0] + TAU - self.q[n - 1];
        self.q.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::min)
    }
}

/// Check that an unwrapped sequence is strictly increasing with span < 2π.
/// The error carries the first offending index.
pub fn check_cyclic_order(q: &[f64]) -> Result<()> {
    for (i, w) in q.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::NotOrdered { index: i + 1 });
        }
    }
    if let (Some(first), Some(last)) = (q.first(), q.last()) {
        if !(last - first < TAU) {
            return Err(Error::NotOrdered { index: q.len() - 1 });
        }
    }
    Ok(())
}

/// Lift angles listed in cyclic order to an increasing real sequence.
pub fn unwrap_cyclic(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len());
    let mut prev = match angles.first() {
        Some(&a) => a,
        None => return out,
    };
    out.push(prev);
    for &a in &angles[1..] {
        let next = prev + normalize(a - prev);
        out.push(next);
        prev = next;
    }
    out
}

/// Green's function of the WP operator,
/// `G(θ) = (1 − cos θ) log[2(1 − cos θ)] + (3/2) cos θ − 1`.
///
/// Equals `2 Σ_{n≥2} cos(nθ)/(n³ − n)`; even, 2π-periodic, `G(0) = 1/2`.
pub fn green_function(theta: f64) -> f64 {
    let t = centered(theta);
    if t.abs() < SERIES_THRESHOLD {
        let t2 = t * t;
        if t2 == 0.0 {
            return 0.5;
        }
        let l = t2.ln();
        // 1/2 − 3θ²/4 + (θ²/2) log θ² − (θ⁴/24) log θ² + θ⁴/48
        return 0.5 - 0.75 * t2 + 0.5 * t2 * l + t2 * t2 * (1.0 / 48.0 - l / 24.0);
    }
    let s = (0.5 * t).sin();
    // 2(1 − cos θ) = 4 sin²(θ/2), which keeps relative accuracy near 0
    let x = 4.0 * s * s;
    0.5 * x * x.ln() + 1.5 * t.cos() - 1.0
}

/// `G′(θ) = sin θ · [log(2(1 − cos θ)) − 1/2]`; odd, with `G′(0) = 0`.
pub fn green_function_derivative(theta: f64) -> f64 {
    let t = centered(theta);
    if t.abs() < SERIES_THRESHOLD {
        let t2 = t * t;
        if t2 == 0.0 {
            return 0.0;
        }
        // sin θ ≈ θ − θ³/6, log(2(1−cos θ)) ≈ log θ² − θ²/12
        let sin = t - t * t2 / 6.0;
        return sin * (t2.ln() - t2 / 12.0 - 0.5);
    }
    let s = (0.5 * t).sin();
    t.sin() * ((4.0 * s * s).ln() - 0.5)
}

/// `(G(θ), G′(θ))` from one `sin_cos` and one logarithm.
pub fn green_function_pair(theta: f64) -> (f64, f64) {
    let (s, c) = (0.5 * theta).sin_cos();
    green_function_pair_half(theta, s, c)
}

/// `(G(θ), G′(θ))` given `s = sin(θ/2)` and `c = cos(θ/2)`.
///
/// Both closed forms depend on `θ` only through `s²` and `sc`, so no
/// reduction to `(−π, π]` is needed; `θ` itself is only used for the series
/// near `θ ≡ 0`.
pub fn green_function_pair_half(theta: f64, s: f64, c: f64) -> (f64, f64) {
    if s.abs() < 0.5 * SERIES_THRESHOLD {
        return (green_function(theta), green_function_derivative(theta));
    }
    let s2 = s * s;
    let x = 4.0 * s2;
    let l = x.ln();
    (0.5 * x * l + 0.5 - 3.0 * s2, 2.0 * s * c * (l - 0.5))
}

/// Evaluations of the Möbius kernel basis `(1, cos θ, sin θ)`.
pub fn kernel_basis(theta: f64) -> [f64; 3] {
    let (s, c) = theta.sin_cos();
    [1.0, c, s]
}

/// Derivatives of the kernel basis, `(0, −sin θ, cos θ)`.
pub fn kernel_basis_derivative(theta: f64) -> [f64; 3] {
    let (s, c) = theta.sin_cos();
    [0.0, -s, c]
}
