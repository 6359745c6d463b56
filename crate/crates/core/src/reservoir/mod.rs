//! Reservoirs: input masking, the delay-based laser model, the echo-state
//! surrogate, and handling of harvested state matrices.

mod backend;
pub mod cache;
mod esn;
mod laser;
mod mask;
mod states;

pub use backend::{
    check_input_coupling, harvest, run_lang_kobayashi, run_leaky_esn, BackendKind, Harvest,
    InputCoupling, Reservoir, ReservoirBackend,
};
pub use cache::StateCache;
pub use esn::{spectral_radius, EsnParams, EsnReservoir};
pub use laser::{CouplingVariant, LaserParams, LaserReservoir};
pub use mask::{make_mask, mask_input, Mask};
pub use states::{destandardize_states, node_stats, standardize_states, StateMatrix};
