use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is singular (condition estimate {cond:.3e})")]
    SingularMatrix { cond: f64 },
    #[error("eigenvalue iteration did not converge")]
    ConvergenceFailure,
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("Newton iteration from seed {seed:?} did not converge")]
    NoConvergence { seed: Vec<f64> },
    #[error("equilibrium is marginal (an eigenvalue has |Re| <= 1e-9)")]
    MarginalEquilibrium,
    #[error("antisymmetric equation has no unique solution (null space dimension {nullity})")]
    NonUniqueSolution { nullity: usize },
    #[error("trace of M vanishes; chi is undetermined")]
    TraceZero,
    #[error("resonant spectrum: lambda_i + lambda_j = 0 for some eigenvalue pair")]
    ResonantSpectrum,
    #[error("(-D + A) is not invertible; a singular diffusion matrix can cause this")]
    NotInvertible,
    #[error("equilibrium is not an attractor")]
    NotAttractor,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("beta is complex: discriminant 1 - 4 U''/gamma^2 = {discriminant} < 0")]
    ComplexBeta { discriminant: f64 },
    #[error("equilibrium is not an exit saddle (need exactly one eigenvalue with positive real part)")]
    NotExitSaddle,
    #[error("unstable eigenvalue {re} + {im}i is not real")]
    ComplexUnstableEigenvalue { re: f64, im: f64 },
    #[error("Hamiltonian drifted to {h:.3e} at t = {t}; reduce dt")]
    StepRejected { t: f64, h: f64 },
    #[error("path diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
