//! Acquisition function and next-stimulus selection.

pub mod components;
pub mod ntk;
pub mod sampling;
pub mod select;
pub mod sobol;

pub use components::{
    combine, exploration_probability, grad_component, lookahead_component, normalize_component, prox_component,
    prox_density, unc_component, AcquisitionConfig, AcquisitionWeights, ComponentSet, ExplorationSchedule,
};
pub use ntk::{ntk_cross, ntk_lookahead_predict, LookaheadCache, NtkFeatures};
pub use sampling::{blue_noise_subsample, on_grid, snap_to_grid, BlueNoise};
pub use select::{select_next, CandidateScore, ComponentValues, RawComponents, SelectRequest, Selection, TrialScorer};
pub use sobol::{sobol_point, Sobol, MAX_SOBOL_DIM};
