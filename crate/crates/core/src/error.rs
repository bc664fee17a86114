use thiserror::Error;

/// Errors surfaced by field evaluation, quadrature and the solvers.
#[derive(Debug, Clone, Error)]
pub enum CcxError {
    #[error("transform inverse did not converge at ({0}, {1})")]
    TransformNotInvertibleAt(f64, f64),
    #[error("transform is not invertible on the declared support: {0}")]
    InvalidTransform(String),
    #[error("gradient requested exactly at a core point ({0}, {1})")]
    AtCore(f64, f64),
    #[error("a single cell's log-contribution exceeds the representable range")]
    OverflowDominant,
    #[error("bisection did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("field is identically zero")]
    ZeroField,
    #[error("profile is identically zero")]
    ZeroProfile,
    #[error("negative profile shift {0}")]
    NegativeShift(f64),
    #[error("cutoff requires 0 < a < M, got a = {0}, M = {1}")]
    BadRange(f64, f64),
    #[error("parameter {0} outside its admissible range")]
    DomainError(String),
    #[error("gradient constraint violated: Dirichlet energy {0} exceeds 1")]
    GradientConstraintViolated(f64),
    #[error("degenerate annulus: inner radius {0} >= outer radius {1}")]
    DegenerateAnnulus(f64, f64),
    #[error("point at radius {0} outside annulus [{1}, {2}]")]
    OutOfAnnulus(f64, f64, f64),
    #[error("degenerate measures: need 0 < |E1| < |B|, got |E1| = {0}, |B| = {1}")]
    DegenerateMeasures(f64, f64),
    #[error("matrix condition {0} violated: {1}")]
    MatrixConditionViolated(&'static str, String),
    #[error("no concentration scale detected above the floor")]
    NoScale,
    #[error("no candidate core captures the required level-set fraction")]
    ScatteredMass,
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("obstacle solver did not converge within {0} sweeps")]
    SolverNoConvergence(usize),
}
