//! Conformal welding of planar Jordan curves.
//!
//! [`compute_weld`] runs the geodesic zipper on a closed polygon and returns
//! the correspondence between the boundary parametrizations of the interior
//! and exterior conformal maps. [`invert_weld`] runs the zipper backwards to
//! recover a curve from a welding. [`WeldingMap`] interpolates the samples
//! monotonically so that welds can be evaluated on arbitrary particle sets.
//!
//! Normalizations: the exterior map fixes `∞` with positive derivative
//! there; the interior map sends an interior reference point (the area
//! centroid when it lies inside the curve) to `0` with positive derivative.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;

use crate::circle::{centered, normalize, unwrap_cyclic};
use crate::error::{Error, Result};

/// Smallest admissible polygon.
pub const MIN_SHAPE_POINTS: usize = 8;

/// Derivative ratio above which the conformal maps are considered crowded.
pub const CROWDING_LIMIT: f64 = 1e12;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// A simple closed polygon, stored counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    points: Vec<Complex64>,
}

impl Shape {
    /// Validate a closed polyline. Clockwise input is reversed.
    pub fn new(mut points: Vec<Complex64>) -> Result<Self> {
        if points.len() < MIN_SHAPE_POINTS {
            return Err(Error::BadParameter(format!(
                "shape needs at least {MIN_SHAPE_POINTS} points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::BadParameter("shape has non-finite coordinates".into()));
        }
        if let Some((i, j)) = find_self_intersection(&points) {
            return Err(Error::SelfIntersecting(i, j));
        }
        if signed_area(&points) < 0.0 {
            points.reverse();
        }
        Ok(Shape { points })
    }

    pub fn from_xy(xy: &[(f64, f64)]) -> Result<Self> {
        Self::new(xy.iter().map(|&(x, y)| Complex64::new(x, y)).collect())
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.points)
    }

    pub fn centroid(&self) -> Complex64 {
        area_centroid(&self.points)
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, z: Complex64) -> bool {
        let n = self.points.len();
        let mut inside = false;
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            if (a.im > z.im) != (b.im > z.im) {
                let x = a.re + (z.im - a.im) * (b.re - a.re) / (b.im - a.im);
                if x > z.re {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `z` to the polyline.
    pub fn boundary_distance(&self, z: Complex64) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| segment_distance(z, self.points[i], self.points[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Interior reference point: the area centroid if it lies well inside,
    /// otherwise the deepest point of a grid over the bounding box.
    pub fn interior_point(&self) -> Complex64 {
        let c = self.centroid();
        let scale = self.diameter();
        if self.contains(c) && self.boundary_distance(c) > 0.02 * scale {
            return c;
        }
        let (mut lo, mut hi) = (self.points[0], self.points[0]);
        for z in &self.points {
            lo = Complex64::new(lo.re.min(z.re), lo.im.min(z.im));
            hi = Complex64::new(hi.re.max(z.re), hi.im.max(z.im));
        }
        let k = 64;
        let mut best = (f64::NEG_INFINITY, c);
        for i in 0..k {
            for j in 0..k {
                let z = Complex64::new(
                    lo.re + (hi.re - lo.re) * (i as f64 + 0.5) / k as f64,
                    lo.im + (hi.im - lo.im) * (j as f64 + 0.5) / k as f64,
                );
                if self.contains(z) {
                    let d = self.boundary_distance(z);
                    if d > best.0 {
                        best = (d, z);
                    }
                }
            }
        }
        best.1
    }

    /// Apply `z ↦ scale·z + shift`.
    pub fn affine(&self, scale: f64, shift: Complex64) -> Shape {
        Shape {
            points: self.points.iter().map(|z| z * scale + shift).collect(),
        }
    }

    /// Rotate by `angle` about the centroid.
    pub fn rotated(&self, angle: f64) -> Shape {
        let c = self.centroid();
        let r = Complex64::from_polar(1.0, angle);
        Shape {
            points: self.points.iter().map(|z| c + (z - c) * r).collect(),
        }
    }

    /// `n` points equally spaced in arclength along the polyline, starting
    /// at the first vertex.
    pub fn resampled(&self, n: usize) -> Result<Shape> {
        Shape::new(resample_by_arclength(&self.points, n))
    }

    /// `sqrt(λ_max/λ_min)` of the second area moments about the centroid;
    /// equals the axis ratio for an ellipse.
    pub fn aspect_ratio(&self) -> f64 {
        let (ixx, iyy, ixy) = second_moments(&self.points);
        let tr = ixx + iyy;
        let disc = ((ixx - iyy).powi(2) + 4.0 * ixy * ixy).sqrt();
        ((tr + disc) / (tr - disc)).sqrt()
    }

    /// `(max_k |z_k − c| − min_k |z_k − c|) / mean_k |z_k − c|` about the
    /// area centroid.
    pub fn circularity_defect(&self) -> f64 {
        let c = self.centroid();
        let r: Vec<f64> = self.points.iter().map(|z| (z - c).norm()).collect();
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
        (max - min) / (r.iter().sum::<f64>() / r.len() as f64)
    }
}

fn signed_area(p: &[Complex64]) -> f64 {
    let n = p.len();
    0.5 * (0..n)
        .map(|i| {
            let a = p[i];
            let b = p[(i + 1) % n];
            a.re * b.im - b.re * a.im
        })
        .sum::<f64>()
}

fn area_centroid(p: &[Complex64]) -> Complex64 {
    let n = p.len();
    let a = signed_area(p);
    let mut c = Complex64::new(0.0, 0.0);
    for i in 0..n {
        let u = p[i];
        let v = p[(i + 1) % n];
        let cross = u.re * v.im - v.re * u.im;
        c += (u + v) * cross;
    }
    c / (6.0 * a)
}

/// Second area moments about the centroid.
fn second_moments(p: &[Complex64]) -> (f64, f64, f64) {
    let c = area_centroid(p);
    let n = p.len();
    let (mut ixx, mut iyy, mut ixy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let u = p[i] - c;
        let v = p[(i + 1) % n] - c;
        let cross = u.re * v.im - v.re * u.im;
        ixx += cross * (u.re * u.re + u.re * v.re + v.re * v.re);
        iyy += cross * (u.im * u.im + u.im * v.im + v.im * v.im);
        ixy += cross * (2.0 * u.re * u.im + u.re * v.im + v.re * u.im + 2.0 * v.re * v.im);
    }
    (ixx / 12.0, iyy / 12.0, ixy / 24.0)
}

fn segment_distance(z: Complex64, a: Complex64, b: Complex64) -> f64 {
    let d = b - a;
    let len2 = d.norm_sqr();
    if len2 == 0.0 {
        return (z - a).norm();
    }
    let t = (((z - a) * d.conj()).re / len2).clamp(0.0, 1.0);
    (z - (a + d * t)).norm()
}

fn orient(a: Complex64, b: Complex64, c: Complex64) -> f64 {
    ((b - a).conj() * (c - a)).im
}

fn segments_intersect(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: Complex64, q: Complex64, r: Complex64, o: f64| {
        o == 0.0 && r.re >= p.re.min(q.re) && r.re <= p.re.max(q.re) && r.im >= p.im.min(q.im) && r.im <= p.im.max(q.im)
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

/// First pair of non-adjacent edges `(i, j)` that meet, where edge `i`
/// joins points `i` and `i + 1`.
pub fn find_self_intersection(p: &[Complex64]) -> Option<(usize, usize)> {
    let n = p.len();
    for i in 0..n {
        let (a, b) = (p[i], p[(i + 1) % n]);
        if a == b {
            return Some((i, (i + 1) % n));
        }
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_intersect(a, b, p[j], p[(j + 1) % n]) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Parametric shape families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    /// `(r cos t, sin t)`.
    Ellipse(f64),
    /// Equilateral triangle with corners replaced by a power-law cap of
    /// exponent `α`; `α = 1` is the sharp triangle.
    RoundedTriangle(f64),
}

/// Fraction of each half edge taken by a rounded corner.
const CORNER_FRACTION: f64 = 0.35;

/// Sample a parametric shape at `n` points.
pub fn make_shape(kind: ShapeKind, n: usize) -> Result<Shape> {
    if n < 64 {
        return Err(Error::BadParameter(format!("need n >= 64 samples, got {n}")));
    }
    match kind {
        ShapeKind::Ellipse(r) => {
            if !(r >= 1.0) || !r.is_finite() {
                return Err(Error::BadParameter(format!("ellipse aspect must be >= 1, got {r}")));
            }
            Shape::new(
                (0..n)
                    .map(|k| {
                        let t = TAU * k as f64 / n as f64;
                        Complex64::new(r * t.cos(), t.sin())
                    })
                    .collect(),
            )
        }
        ShapeKind::RoundedTriangle(alpha) => {
            if !(alpha >= 1.0) || !alpha.is_finite() {
                return Err(Error::BadParameter(format!(
                    "corner exponent must be >= 1, got {alpha}"
                )));
            }
            Shape::new(resample_by_arclength(&rounded_triangle_outline(alpha), n))
        }
    }
}

/// Dense outline of the rounded triangle, counter-clockwise.
///
/// In coordinates where the corner is at the origin with the bisector along
/// `+y`, the edges are `y = √3|x|`. Within `|x| ≤ δ` the corner is replaced
/// by `y = √3 δ g(|x|/δ)` with `g(s) = 1 − 1/α + s^α/α`, which matches the
/// edge in value and slope at `|x| = δ` and reduces to the edge for `α = 1`.
fn rounded_triangle_outline(alpha: f64) -> Vec<Complex64> {
    let corners: Vec<Complex64> = (0..3)
        .map(|k| Complex64::from_polar(1.0, PI / 2.0 + TAU * k as f64 / 3.0))
        .collect();
    let half_edge = 3f64.sqrt() / 2.0;
    // the corner cap spans |x| ≤ δ measured across the bisector
    let delta = CORNER_FRACTION * half_edge * 0.5;
    let g = |s: f64| 1.0 - 1.0 / alpha + s.powf(alpha) / alpha;
    let per_corner = 4000;
    let per_edge = 2000;
    let mut out = Vec::new();
    for k in 0..3 {
        let c = corners[k];
        // unit vector from the corner into the triangle along the bisector
        let inward = -c / c.norm();
        // local x axis, pointing back along the incoming edge
        let across = inward * I;
        for i in 0..=per_corner {
            let x = delta * (1.0 - 2.0 * i as f64 / per_corner as f64);
            let y = 3f64.sqrt() * delta * g(x.abs() / delta);
            out.push(c + across * x + inward * y);
        }
        // straight edge to the next corner's cap
        let next = corners[(k + 1) % 3];
        let start = *out.last().expect("cap emitted");
        let n_in = -next / next.norm();
        let n_across = n_in * I;
        let end = next + n_across * delta + n_in * (3f64.sqrt() * delta);
        for i in 1..per_edge {
            let t = i as f64 / per_edge as f64;
            out.push(start + (end - start) * t);
        }
    }
    out
}

fn resample_by_arclength(dense: &[Complex64], n: usize) -> Vec<Complex64> {
    let m = dense.len();
    let mut cum = vec![0.0; m + 1];
    for i in 0..m {
        cum[i + 1] = cum[i] + (dense[(i + 1) % m] - dense[i]).norm();
    }
    let total = cum[m];
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let s = total * k as f64 / n as f64;
        while cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        out.push(dense[seg] + (dense[(seg + 1) % m] - dense[seg]) * t);
    }
    out
}

/// Disk automorphism `z ↦ e^{iα}(z − a)/(1 − ā z)`, `|a| < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskMobius {
    pub rotation: f64,
    pub a: Complex64,
}

impl DiskMobius {
    pub fn identity() -> Self {
        DiskMobius {
            rotation: 0.0,
            a: Complex64::new(0.0, 0.0),
        }
    }

    pub fn new(rotation: f64, a: Complex64) -> Result<Self> {
        if !(a.norm() < 1.0) {
            return Err(Error::BadParameter(format!("|a| must be < 1, got {}", a.norm())));
        }
        Ok(DiskMobius { rotation, a })
    }

    pub fn apply(&self, z: Complex64) -> Complex64 {
        Complex64::from_polar(1.0, self.rotation) * (z - self.a) / (1.0 - self.a.conj() * z)
    }

    /// Continuous lift of the induced circle map: `θ ↦ θ + α − 2 arg(1 − ā e^{iθ})`.
    pub fn apply_angle(&self, theta: f64) -> f64 {
        let w = 1.0 - self.a.conj() * Complex64::from_polar(1.0, theta);
        theta + self.rotation - 2.0 * w.arg()
    }

    /// Derivative of the lifted circle map.
    pub fn angle_derivative(&self, theta: f64) -> f64 {
        let e = Complex64::from_polar(1.0, theta);
        (1.0 - self.a.norm_sqr()) / (e - self.a).norm_sqr()
    }

    pub fn inverse(&self) -> Self {
        DiskMobius {
            rotation: -self.rotation,
            a: -self.a * Complex64::from_polar(1.0, self.rotation),
        }
    }
}

/// Monotone periodic interpolation of circle-homeomorphism samples.
#[derive(Debug, Clone)]
struct MonotoneCurve {
    x: Vec<f64>,
    y: Vec<f64>,
    slope: Vec<f64>,
}

impl MonotoneCurve {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let h = |i: usize| {
            if i + 1 < n {
                x[i + 1] - x[i]
            } else {
                x[0] + TAU - x[n - 1]
            }
        };
        let dy = |i: usize| {
            if i + 1 < n {
                y[i + 1] - y[i]
            } else {
                y[0] + TAU - y[n - 1]
            }
        };
        let slope = (0..n)
            .map(|i| {
                let prev = (i + n - 1) % n;
                let (h0, h1) = (h(prev), h(i));
                let (d0, d1) = (dy(prev) / h0, dy(i) / h1);
                if d0 * d1 <= 0.0 {
                    0.0
                } else {
                    // weighted harmonic mean keeps the Hermite cubic monotone
                    let w1 = 2.0 * h1 + h0;
                    let w2 = h1 + 2.0 * h0;
                    (w1 + w2) / (w1 / d0 + w2 / d1)
                }
            })
            .collect();
        MonotoneCurve { x, y, slope }
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let x0 = self.x[0];
        let turns = ((t - x0) / TAU).floor();
        let mut s = t - turns * TAU;
        if s >= x0 + TAU {
            s -= TAU;
        }
        // last knot ≤ s
        let i = match self.x.binary_search_by(|v| v.partial_cmp(&s).expect("finite knots")) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let (xa, ya, da) = (self.x[i], self.y[i], self.slope[i]);
        let (xb, yb, db) = if i + 1 < n {
            (self.x[i + 1], self.y[i + 1], self.slope[i + 1])
        } else {
            (self.x[0] + TAU, self.y[0] + TAU, self.slope[0])
        };
        let h = xb - xa;
        let u = (s - xa) / h;
        let u2 = u * u;
        let u3 = u2 * u;
        let value = (2.0 * u3 - 3.0 * u2 + 1.0) * ya
            + (u3 - 2.0 * u2 + u) * h * da
            + (-2.0 * u3 + 3.0 * u2) * yb
            + (u3 - u2) * h * db;
        value + turns * TAU
    }
}

/// Samples `(θ_m, φ_m)` of an orientation-preserving circle homeomorphism,
/// optionally post-composed with an exact disk automorphism.
#[derive(Debug, Clone)]
pub struct WeldingMap {
    theta: Vec<f64>,
    phi: Vec<f64>,
    forward: MonotoneCurve,
    backward: MonotoneCurve,
    post: Option<DiskMobius>,
}

impl WeldingMap {
    /// Build from samples given in cyclic order. Both coordinates are
    /// unwrapped and must be strictly increasing with total turn one.
    pub fn new(theta: &[f64], phi: &[f64]) -> Result<Self> {
        if theta.len() != phi.len() {
            return Err(Error::InvalidWeld(format!(
                "{} θ samples but {} φ samples",
                theta.len(),
                phi.len()
            )));
        }
        if theta.len() < 4 {
            return Err(Error::InvalidWeld("need at least 4 samples".into()));
        }
        let n = theta.len();
        // rotate so the first θ is the smallest canonical angle
        let start = (0..n)
            .min_by(|&i, &j| normalize(theta[i]).total_cmp(&normalize(theta[j])))
            .expect("nonempty");
        let th: Vec<f64> = (0..n).map(|k| theta[(start + k) % n]).collect();
        let ph: Vec<f64> = (0..n).map(|k| phi[(start + k) % n]).collect();
        let mut th = unwrap_cyclic(&th);
        let shift = normalize(th[0]) - th[0];
        th.iter_mut().for_each(|t| *t += shift);
        let mut ph = unwrap_cyclic(&ph);
        let shift = normalize(ph[0]) - ph[0];
        ph.iter_mut().for_each(|p| *p += shift);
        for (name, v) in [("θ", &th), ("φ", &ph)] {
            if !v.windows(2).all(|w| w[1] > w[0]) || !(v[n - 1] - v[0] < TAU) {
                return Err(Error::InvalidWeld(format!(
                    "{name} samples are not strictly increasing with one turn"
                )));
            }
        }
        Ok(WeldingMap {
            forward: MonotoneCurve::new(th.clone(), ph.clone()),
            backward: MonotoneCurve::new(ph.clone(), th.clone()),
            theta: th,
            phi: ph,
            post: None,
        })
    }

    /// The identity weld sampled at `n` equispaced angles.
    pub fn identity(n: usize) -> Self {
        let t: Vec<f64> = (0..n).map(|k| TAU * k as f64 / n as f64).collect();
        WeldingMap::new(&t, &t).expect("identity samples are valid")
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Sample pairs; `φ` includes any post-composed automorphism.
    pub fn samples(&self) -> Vec<(f64, f64)> {
        self.theta
            .iter()
            .zip(&self.phi)
            .map(|(&t, &p)| (t, self.post.map_or(p, |m| m.apply_angle(p))))
            .collect()
    }

    /// `φ(θ)` as a continuous lift: `eval(θ + 2π) = eval(θ) + 2π`.
    pub fn eval(&self, theta: f64) -> f64 {
        let p = self.forward.eval(theta);
        self.post.map_or(p, |m| m.apply_angle(p))
    }

    /// `θ(φ)`, the inverse map.
    pub fn eval_inverse(&self, phi: f64) -> f64 {
        let p = self.post.map_or(phi, |m| m.inverse().apply_angle(phi));
        self.backward.eval(p)
    }

    /// `m ∘ φ`, a weld of the same shape under a different interior
    /// normalization.
    pub fn compose_interior(&self, m: DiskMobius) -> WeldingMap {
        let mut out = self.clone();
        out.post = Some(match self.post {
            // compose two automorphisms by evaluating the product exactly
            None => m,
            Some(p) => compose_disk(m, p),
        });
        out
    }

    /// Ratio of the largest to smallest sample slope `Δφ/Δθ`.
    pub fn derivative_ratio(&self) -> f64 {
        let s = self.samples();
        let n = s.len();
        let mut max: f64 = 0.0;
        let mut min = f64::INFINITY;
        for i in 0..n {
            let (t0, p0) = s[i];
            let (t1, p1) = if i + 1 < n {
                s[i + 1]
            } else {
                (s[0].0 + TAU, s[0].1 + TAU)
            };
            let r = (p1 - p0) / (t1 - t0);
            max = max.max(r);
            min = min.min(r);
        }
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// `max_m |φ_m − θ_m|` over the samples, with the difference reduced
    /// modulo 2π.
    pub fn sup_deviation_from_identity(&self) -> f64 {
        self.samples()
            .iter()
            .map(|(t, p)| centered(p - t).abs())
            .fold(0.0, f64::max)
    }
}

/// `m1 ∘ m2` as a single automorphism.
fn compose_disk(m1: DiskMobius, m2: DiskMobius) -> DiskMobius {
    // the composite sends b = m2⁻¹(m1⁻¹(0)) to 0; the rotation is fixed by
    // the image of one more point
    let b = m2.inverse().apply(m1.inverse().apply(Complex64::new(0.0, 0.0)));
    let base = DiskMobius { rotation: 0.0, a: b };
    let probe = Complex64::new(0.0, 0.0);
    let target = m1.apply(m2.apply(probe));
    let got = base.apply(probe);
    let rotation = if got.norm() > 1e-300 {
        (target / got).arg()
    } else {
        let probe = Complex64::new(0.5, 0.0);
        (m1.apply(m2.apply(probe)) / base.apply(probe)).arg()
    };
    // keep the lift continuous with the two factors
    let composed = DiskMobius { rotation, a: b };
    let t = 0.0;
    let want = m1.apply_angle(m2.apply_angle(t));
    let have = composed.apply_angle(t);
    DiskMobius {
        rotation: rotation + TAU * ((want - have) / TAU).round(),
        a: b,
    }
}

/// `φ` at each grid angle.
pub fn interpolate_weld(weld: &WeldingMap, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&t| weld.eval(t)).collect()
}

/// Principal square root continued into the upper half-plane, with real
/// arguments resolved by `side` (−1 or +1).
fn sqrt_upper(z: Complex64, side: f64) -> Complex64 {
    let s = z.sqrt();
    if s.im < 0.0 {
        -s
    } else if s.im == 0.0 {
        Complex64::new(side * s.re.abs(), 0.0)
    } else {
        s
    }
}

/// `sign(x) · sqrt(x² + c²)` for real boundary points.
fn unzip_real(x: f64, c: f64, side: f64) -> f64 {
    let r = (x * x + c * c).sqrt();
    if x > 0.0 {
        r
    } else if x < 0.0 {
        -r
    } else {
        side * r
    }
}

/// A point on the real axis or at infinity.
fn real_mobius(x: Option<f64>, inv_b: f64) -> Option<f64> {
    match x {
        None => {
            if inv_b == 0.0 {
                None
            } else {
                Some(-1.0 / inv_b)
            }
        }
        Some(x) => {
            let d = 1.0 - x * inv_b;
            if d == 0.0 {
                None
            } else {
                Some(x / d)
            }
        }
    }
}

/// Compute the welding map of a shape with the geodesic zipper.
pub fn compute_weld(shape: &Shape) -> Result<WeldingMap> {
    let z = shape.points();
    let n = z.len();
    let center = shape.interior_point();
    let diam = shape.diameter();
    let r_in = 1e-3 * diam.min(shape.boundary_distance(center) * 10.0);
    let inner: Vec<Complex64> = (0..8)
        .map(|k| center + Complex64::from_polar(r_in, TAU * k as f64 / 8.0))
        .collect();
    let outer: Vec<Complex64> = (0..64)
        .map(|k| center + Complex64::from_polar(4.0 * diam, TAU * k as f64 / 64.0))
        .collect();

    let (z0, z1) = (z[0], z[1]);
    let first = |w: Complex64| I * ((w - z1) / (w - z0)).sqrt();
    // generic points: [center, inner.., outer.., ∞]
    let mut generic: Vec<Complex64> = std::iter::once(center)
        .chain(inner.iter().copied())
        .chain(outer.iter().copied())
        .map(first)
        .collect();
    generic.push(I); // image of ∞
    let mut pending: Vec<Complex64> = z[2..].iter().map(|&w| first(w)).collect();
    let mut side_a = vec![0.0; n];
    let mut side_b = vec![0.0; n];
    let mut x0: Option<f64> = None;

    for k in 2..n {
        let a = pending[k - 2];
        if !(a.im > 0.0) || !a.re.is_finite() {
            return Err(Error::Crowded(f64::INFINITY));
        }
        let inv_b = a.re / a.norm_sqr();
        let c = a.norm_sqr() / a.im;
        let c2 = Complex64::new(c * c, 0.0);
        let step = |w: Complex64| {
            let u = w / (1.0 - w * inv_b);
            sqrt_upper(u * u + c2, 1.0)
        };
        for w in pending[k - 1..].iter_mut() {
            *w = step(*w);
        }
        for w in generic.iter_mut() {
            *w = step(*w);
        }
        for j in 1..k {
            let ua = side_a[j] / (1.0 - side_a[j] * inv_b);
            let ub = side_b[j] / (1.0 - side_b[j] * inv_b);
            side_a[j] = unzip_real(ua, c, -1.0);
            side_b[j] = unzip_real(ub, c, 1.0);
        }
        x0 = real_mobius(x0, inv_b).map(|u| unzip_real(u, c, 1.0));
        side_a[k] = 0.0;
        side_b[k] = 0.0;
    }

    // send z0 to ∞ and open the last edge
    let finish = |w: Complex64| -> Complex64 {
        let u = match x0 {
            Some(x) => w / (1.0 - w / x),
            None => w,
        };
        u * u
    };
    let finish_real = |x: f64| -> f64 {
        let u = match x0 {
            Some(x0) => x / (1.0 - x / x0),
            None => x,
        };
        u * u
    };
    for w in generic.iter_mut() {
        *w = finish(*w);
    }
    let mut fa: Vec<f64> = side_a.iter().map(|&x| finish_real(x)).collect();
    let mut fb: Vec<f64> = side_b.iter().map(|&x| finish_real(x)).collect();
    // A copies bound −H before this flip
    let flip = generic[0].im < 0.0;
    if flip {
        generic.iter_mut().for_each(|w| *w = -*w);
        fa.iter_mut().for_each(|x| *x = -*x);
        fb.iter_mut().for_each(|x| *x = -*x);
    }
    let (interior, exterior) = if flip { (fa, fb) } else { (fb, fa) };
    let c_img = generic[0];
    let p_img = generic[generic.len() - 1];
    if !(c_img.im > 0.0) || !(p_img.im < 0.0) {
        return Err(Error::Crowded(f64::INFINITY));
    }

    let disk_in = |w: Complex64| (w - c_img) / (w - c_img.conj());
    let disk_out = |w: Complex64| (w - p_img.conj()) / (w - p_img);
    let deriv: Complex64 = inner
        .iter()
        .zip(&generic[1..9])
        .map(|(&zz, &w)| disk_in(w) / (zz - center))
        .sum::<Complex64>()
        / 8.0;
    let beta = -deriv.arg();
    let at_inf: Complex64 = outer
        .iter()
        .zip(&generic[9..73])
        .map(|(&zz, &w)| disk_out(w) / (zz - center))
        .sum::<Complex64>()
        / 64.0;
    let gamma = -at_inf.arg();

    let mut theta = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for j in 0..n {
        if j == 0 {
            // z0 sits at ∞ on both sides
            theta.push(gamma);
            phi.push(beta);
            continue;
        }
        let e = disk_out(Complex64::new(exterior[j], 0.0));
        let i = disk_in(Complex64::new(interior[j], 0.0));
        theta.push(e.arg() + gamma);
        phi.push(i.arg() + beta);
    }
    let th = unwrap_cyclic(&theta);
    let ph = unwrap_cyclic(&phi);
    let monotone = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]) && v[n - 1] - v[0] < TAU;
    if !monotone(&th) || !monotone(&ph) {
        return Err(Error::Crowded(f64::INFINITY));
    }
    let weld = WeldingMap::new(&th, &ph)?;
    let ratio = weld.derivative_ratio();
    if ratio > CROWDING_LIMIT {
        return Err(Error::Crowded(ratio));
    }
    Ok(weld)
}

/// Resample a weld at `n` pairs equispaced in `(θ + φ)/2`.
fn balanced_samples(weld: &WeldingMap, n: usize) -> (Vec<f64>, Vec<f64>) {
    let base = weld.samples()[0].0;
    let s = |t: f64| 0.5 * (t + weld.eval(t));
    let s0 = s(base);
    let mut theta = Vec::with_capacity(n);
    for k in 0..n {
        let target = s0 + TAU * k as f64 / n as f64;
        let (mut lo, mut hi) = (base - TAU, base + TAU);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if s(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        theta.push(0.5 * (lo + hi));
    }
    let phi = theta.iter().map(|&t| weld.eval(t)).collect();
    (theta, phi)
}

/// Real Möbius map of the circle onto the line sending `e^{i·a} ↦ 0`,
/// `e^{i·b} ↦ ∞`, `e^{i·c} ↦ −1`. Returns the map and the image of `∞`.
fn circle_to_line(a: f64, b: f64, c: f64) -> (impl Fn(f64) -> f64, Complex64) {
    let ea = Complex64::from_polar(1.0, a);
    let eb = Complex64::from_polar(1.0, b);
    let ec = Complex64::from_polar(1.0, c);
    let lambda = -(ec - eb) / (ec - ea);
    let map = move |t: f64| {
        let e = Complex64::from_polar(1.0, t);
        (lambda * (e - ea) / (e - eb)).re
    };
    (map, lambda)
}

/// Recover a curve with `n` boundary points from a welding map.
///
/// The result is normalized to zero area centroid and unit RMS radius.
pub fn invert_weld(weld: &WeldingMap, n: usize) -> Result<Shape> {
    if n < MIN_SHAPE_POINTS {
        return Err(Error::BadParameter(format!(
            "need at least {MIN_SHAPE_POINTS} points, got {n}"
        )));
    }
    let (theta, phi) = balanced_samples(weld, n);
    let (last, mid) = (n - 1, n / 2);
    // pair 0 → ∞, pair n−1 → 0, a middle pair → −1, on both sides
    let (map_in, _) = circle_to_line(phi[last], phi[0], phi[mid]);
    let (map_out, inf_img) = circle_to_line(theta[last], theta[0], theta[mid]);

    // Interior copies lie on the boundary of H and exterior copies on −H,
    // all on the negative axis. Negate, then take square roots on the
    // matching quadrants: interior → second, exterior → first.
    let mut side_a = vec![0.0; n];
    let mut side_b = vec![0.0; n];
    for j in 1..last {
        let xi = map_in(phi[j]);
        let xe = map_out(theta[j]);
        if !(xi < 0.0) || !(xe < 0.0) {
            return Err(Error::InvalidWeld(format!("sample {j} is out of cyclic order")));
        }
        side_a[j] = -(-xi).sqrt();
        side_b[j] = (-xe).sqrt();
    }
    let mut tracked: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); n];
    let mut active = vec![false; n];
    let mut inf = (-inf_img).sqrt();
    if inf.im < 0.0 {
        inf = -inf;
    }
    let mut x0: Option<f64> = None;

    for k in (2..n).rev() {
        // pair k−1 sits at (−α, β) around the tip at 0
        let alpha = -side_a[k - 1];
        let beta = side_b[k - 1];
        if !(alpha > 0.0) || !(beta > 0.0) {
            return Err(Error::Crowded(f64::INFINITY));
        }
        let s = (beta - alpha) / (2.0 * alpha * beta);
        let c = 2.0 * alpha * beta / (alpha + beta);
        let c2 = Complex64::new(c * c, 0.0);
        let step = |w: Complex64| {
            let u = w / (1.0 + w * s);
            sqrt_upper(u * u - c2, 1.0)
        };
        let step_real = |x: f64| -> Complex64 {
            let u = x / (1.0 + x * s);
            if u.abs() >= c {
                Complex64::new(u.signum() * (u * u - c * c).sqrt(), 0.0)
            } else {
                Complex64::new(0.0, (c * c - u * u).sqrt())
            }
        };
        for j in (k + 1)..n {
            if active[j] {
                tracked[j] = step(tracked[j]);
            }
        }
        inf = step(inf);
        // the tip enters the upper half-plane
        tracked[k] = step_real(0.0);
        active[k] = true;
        for j in 1..(k - 1) {
            side_a[j] = step_real(side_a[j]).re;
            side_b[j] = step_real(side_b[j]).re;
        }
        side_a[k - 1] = 0.0;
        side_b[k - 1] = 0.0;
        x0 = match x0 {
            None => {
                if s == 0.0 {
                    None
                } else {
                    Some(step_real(1.0 / s).re)
                }
            }
            Some(x) => {
                let d = 1.0 + x * s;
                if d == 0.0 {
                    None
                } else {
                    Some(step_real(x).re)
                }
            }
        };
    }

    // undo the first slit map with z1 = 0, z0 = 1
    let to_front = |w: Complex64| match x0 {
        Some(x) => w / (1.0 - w / x),
        None => w,
    };
    let unslit = |w: Complex64| {
        let r = -(w * w);
        -r / (1.0 - r)
    };
    let mut pts = vec![Complex64::new(0.0, 0.0); n];
    pts[0] = Complex64::new(1.0, 0.0);
    pts[1] = Complex64::new(0.0, 0.0);
    for j in 2..n {
        pts[j] = unslit(to_front(tracked[j]));
    }
    let p = unslit(to_front(inf));
    for z in pts.iter_mut() {
        *z = 1.0 / (*z - p);
    }
    if pts.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Crowded(f64::INFINITY));
    }
    let c = area_centroid(&pts);
    let rms = (pts.iter().map(|z| (z - c).norm_sqr()).sum::<f64>() / n as f64).sqrt();
    let pts: Vec<Complex64> = pts.iter().map(|z| (z - c) / rms).collect();
    Shape::new(pts)
}

/// Best alignment of `candidate` to `reference` within the Möbius class:
/// `candidate(θ) ≈ m(reference(θ + ω))`.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub mobius: DiskMobius,
    pub domain_rotation: f64,
    /// Largest remaining angular discrepancy on the evaluation grid.
    pub sup_error: f64,
}

fn alignment_residuals(reference: &WeldingMap, candidate: &WeldingMap, grid: &[f64], p: &[f64; 4]) -> Vec<f64> {
    let m = DiskMobius {
        rotation: p[2],
        a: Complex64::new(p[0], p[1]),
    };
    grid.iter()
        .map(|&t| centered(candidate.eval(t) - m.apply_angle(reference.eval(t + p[3]))))
        .collect()
}

const ALIGNMENT_STARTS: usize = 6;

fn levenberg_marquardt(
    reference: &WeldingMap,
    candidate: &WeldingMap,
    grid: &[f64],
    cost: &dyn Fn(&[f64; 4]) -> f64,
    mut p: [f64; 4],
    mut c: f64,
) -> ([f64; 4], f64) {
    let mut mu = 1e-3;
    for _ in 0..100 {
        let r = alignment_residuals(reference, candidate, grid, &p);
        let mut jac = nalgebra::DMatrix::zeros(r.len(), 4);
        for k in 0..4 {
            let mut q = p;
            let h = 1e-7;
            q[k] += h;
            let rq = alignment_residuals(reference, candidate, grid, &q);
            for i in 0..r.len() {
                jac[(i, k)] = (rq[i] - r[i]) / h;
            }
        }
        let rv = nalgebra::DVector::from_vec(r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &rv;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for k in 0..4 {
                a[(k, k)] += mu * (1.0 + jtj[(k, k)]);
            }
            let Some(delta) = a.lu().solve(&jtr) else {
                mu *= 10.0;
                continue;
            };
            let q = [p[0] - delta[0], p[1] - delta[1], p[2] - delta[2], p[3] - delta[3]];
            let cq = cost(&q);
            if cq < c {
                p = q;
                c = cq;
                mu = (mu * 0.3).max(1e-12);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (p, c)
}

/// Fit a disk automorphism and a domain rotation by Levenberg-Marquardt.
pub fn align_mobius(reference: &WeldingMap, candidate: &WeldingMap) -> Alignment {
    let grid: Vec<f64> = (0..256).map(|k| TAU * k as f64 / 256.0).collect();
    let cost = |p: &[f64; 4]| -> f64 {
        if Complex64::new(p[0], p[1]).norm() >= 0.99 {
            return f64::INFINITY;
        }
        alignment_residuals(reference, candidate, &grid, p)
            .iter()
            .map(|r| r * r)
            .sum()
    };
    // coarse search over the domain rotation with the best constant shift;
    // symmetric shapes have several nearly equal minima, so refine a few
    let mut starts: Vec<([f64; 4], f64)> = (0..72)
        .map(|k| {
            let omega = TAU * k as f64 / 72.0;
            let r = alignment_residuals(reference, candidate, &grid, &[0.0, 0.0, 0.0, omega]);
            let shift = r.iter().sum::<f64>() / r.len() as f64;
            let p = [0.0, 0.0, shift, omega];
            (p, cost(&p))
        })
        .collect();
    starts.sort_by(|x, y| x.1.total_cmp(&y.1));
    let p = starts
        .iter()
        .take(ALIGNMENT_STARTS)
        .map(|&(p, c)| levenberg_marquardt(reference, candidate, &grid, &cost, p, c))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|x| x.0)
        .expect("at least one start");
    let fine: Vec<f64> = (0..2048).map(|k| TAU * k as f64 / 2048.0).collect();
    let sup = alignment_residuals(reference, candidate, &fine, &p)
        .iter()
        .fold(0.0f64, |m, r| m.max(r.abs()));
    Alignment {
        mobius: DiskMobius {
            rotation: p[2],
            a: Complex64::new(p[0], p[1]),
        },
        domain_rotation: p[3],
        sup_error: sup,
    }
}

/// Sup-norm distance between two welds after Möbius alignment.
pub fn aligned_distance(reference: &WeldingMap, candidate: &WeldingMap) -> f64 {
    align_mobius(reference, candidate).sup_error
}

/// Common particle labels for a pair of welds, and the two endpoint
/// configurations `q0 = φ0(x)`, `qT1 = φ1(x)`.
#[derive(Debug, Clone)]
pub struct ParticlePlacement {
    pub labels: Vec<f64>,
    pub q0: nalgebra::DVector<f64>,
    pub qt1: nalgebra::DVector<f64>,
}

/// Place about `m` particles so that both the domain and the two range
/// circles are covered: a third equispaced in the domain, a third at the
/// preimages of equispaced range points of `φ0`, and a third at (offset)
/// preimages for `φ1`. Labels closer than `1e-6` are merged.
pub fn place_particles(w0: &WeldingMap, w1: &WeldingMap, m: usize) -> Result<ParticlePlacement> {
    let labels = common_labels(&[w0, w1], m)?;
    let q0 = nalgebra::DVector::from_iterator(labels.len(), labels.iter().map(|&x| w0.eval(x)));
    let qt1 = nalgebra::DVector::from_iterator(labels.len(), labels.iter().map(|&x| w1.eval(x)));
    Ok(ParticlePlacement { labels, q0, qt1 })
}

/// Particle labels shared by several welds: `m / (n + 1)` preimages of
/// equispaced range points for each of the `n` welds, offset by a quarter
/// spacing from one weld to the next, and the rest equispaced in the domain.
/// Sorted, in `[0, 2π)`, with labels closer than `1e-6` merged.
pub fn common_labels(welds: &[&WeldingMap], m: usize) -> Result<Vec<f64>> {
    if m < crate::circle::MIN_PARTICLES {
        return Err(Error::TooFewParticles {
            min: crate::circle::MIN_PARTICLES,
            got: m,
        });
    }
    let k = m / (welds.len() + 1);
    let k0 = m - welds.len() * k;
    let mut labels: Vec<f64> = (0..k0).map(|j| TAU * (j as f64 + 0.5) / k0 as f64).collect();
    for (i, w) in welds.iter().enumerate() {
        let offset = 0.25 * i as f64;
        labels.extend((0..k).map(|j| normalize(w.eval_inverse(TAU * (j as f64 + offset) / k as f64))));
    }
    labels.sort_by(f64::total_cmp);
    let mut merged: Vec<f64> = Vec::with_capacity(labels.len());
    for x in labels {
        if merged.last().is_none_or(|&p| x - p >= 1e-6) {
            merged.push(x);
        }
    }
    while merged.len() > 1 && merged[0] + TAU - merged[merged.len() - 1] < 1e-6 {
        merged.pop();
    }
    Ok(merged)
}
