use thiserror::Error;

/// Errors produced by the geodesic, metric and welding routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("particle configuration needs at least {min} points, got {got}")]
    TooFewParticles { min: usize, got: usize },
    #[error("particles {i} and {j} coincide (gap {gap:e})")]
    DuplicateParticles { i: usize, j: usize, gap: f64 },
    #[error("particles are not strictly ordered on the circle at index {index}")]
    NotOrdered { index: usize },
    #[error("interpolation system is rank deficient: {0}")]
    RankDeficient(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("time discretization needs T >= 2, got {0}")]
    InvalidT(usize),
    #[error("particles crossed at time slice {slice}")]
    OrderingViolated { slice: usize },
    #[error("velocity-to-particle Jacobian is degenerate for particle {particle}")]
    DegenerateJacobian { particle: usize },
    #[error("constraint normal equations are singular")]
    SingularProjection,
    #[error("velocity has zero WP norm ({0:e})")]
    ZeroVelocity(f64),
    #[error("boundary polyline self-intersects: segments {0} and {1}")]
    SelfIntersecting(usize, usize),
    #[error("conformal maps are crowded: derivative ratio {0:e}")]
    Crowded(f64),
    #[error("invalid welding map: {0}")]
    InvalidWeld(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed input file: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
