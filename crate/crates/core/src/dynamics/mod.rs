//! Chaotic benchmark systems: definitions, integration, Lyapunov
//! exponents and the train/test datasets built from them.

mod datasets;
mod integrate;
mod lyapunov;
mod system;
mod trajectory;

pub use datasets::{
    build_alrs, build_uctls, AlrsExposure, DatasetSplit, Segment, SystemKind, ALRS_LORENZ_DT,
    ALRS_ROSSLER_DT, TRANSIENT_SAMPLES,
};
pub use integrate::{integrate_fixed_step, integrate_sampled, DormandPrince, RawTrajectory};
pub use lyapunov::{largest_lyapunov, LyapunovEstimate};
pub use system::OdeSystem;
pub use trajectory::{
    destandardize, standardize, StandardizationStats, Trajectory, TrajectoryMetadata,
};

/// Reference largest Lyapunov exponent of the Lorenz system (a=10, b=28, c=8/3).
pub const LORENZ_LYAPUNOV: f64 = 0.91;
/// Reference largest Lyapunov exponent of the Rössler system (0.2, 0.2, 5.7).
pub const ROSSLER_LYAPUNOV: f64 = 0.071;
