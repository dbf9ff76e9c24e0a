//! Pass thresholds. Each one is the number stated by the criterion it
//! serves; none was tuned to make a run pass.

/// QMF with the Haar prototype: residual energy after delay compensation.
pub const HAAR_RESIDUAL_ENERGY: f64 = 1e-6;
/// QMF with the default prototype on speech-like signals.
pub const DEFAULT_QMF_MIN_SNR_DB: f64 = 55.0;

/// Convolutions and the GRU cell against the direct-summation oracles.
pub const KERNEL_ABS: f64 = 1e-5;
/// Structured matvecs against the densified-mask oracle (relative to the
/// largest output magnitude).
pub const MATVEC_REL: f64 = 1e-6;
/// Randomized cases per kernel.
pub const KERNEL_CASES: usize = 100;

pub const MOL_DRAWS: usize = 100_000;
pub const MOL_PARAM_SETS: usize = 10;
pub const MOL_KS_MAX: f64 = 0.01;
pub const MOL_INTEGRAL_TOL: f64 = 1e-3;

/// Requested vs achieved mixing SNR.
pub const MIX_SNR_DB: f64 = 1e-6;
/// SI-SNR of a reference plus equal-power orthogonal noise.
pub const ORTHOGONAL_SI_SNR_DB: f64 = 0.1;
