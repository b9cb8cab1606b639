//! Weil-Petersson geodesics between planar shapes represented by their
//! conformal welding diffeomorphisms.
//!
//! The pipeline is: a closed curve is turned into a welding
//! ([`welding::compute_weld`]), two weldings are discretized on a common set
//! of particles, and a discrete geodesic between them is found by minimizing
//! the path energy ([`geodesic::minimize`]). Intermediate weldings can be
//! turned back into curves with [`welding::invert_weld`].

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circle;
pub mod error;
pub mod geodesic;
pub mod io;
pub mod temporal;
pub mod welding;
pub mod wp_metric;

pub use circle::{Angle, ParticleConfig};
pub use error::{Error, Result};
pub use geodesic::{minimize, minimize_from, GeodesicConfig, GeodesicResult};
pub use temporal::{build_quadrature, QuadratureScheme, SchemeKind};
pub use welding::{compute_weld, invert_weld, make_shape, place_particles, DiskMobius, Shape, ShapeKind, WeldingMap};
pub use wp_metric::{minimal_lift, Basis, GreensSystem, LiftResult};
