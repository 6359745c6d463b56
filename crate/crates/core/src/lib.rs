//! Attention-enhanced reservoir computing.
//!
//! The crate is split along the experiment pipeline:
//!
//! ```text
//! dynamics  -> chaotic benchmark series (UCTLS, ALRS), Lyapunov exponents
//! reservoir -> masking, Lang-Kobayashi delay laser, leaky ESN surrogate
//! readout   -> ridge regression, linear and nonlinear attention readouts
//! eval      -> NRMSE, VPT, spectra, open/closed-loop runs, sweeps
//! config    -> experiment configuration with defaults and overrides
//! ```

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod io;
pub mod readout;
pub mod reservoir;
pub mod rng;

pub use error::{Error, Result};
