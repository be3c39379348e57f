//! The feedforward estimator and its training.

pub mod data;
pub mod mc;
pub mod network;
pub mod psych;
pub mod snapshot;
pub mod train;

pub use data::{fit_normalization, Bound, TrialDataset, TrialRecord};
pub use mc::{mc_dropout_stats, McDropout};
pub use network::{
    forward, init_network, input_gradient, param_gradient, BatchPass, Dense, DropoutMask, NetworkState,
    HIDDEN_WIDTHS,
};
pub use psych::{scale_probability, weibull_squash, PsychScaleConfig};
pub use snapshot::NetworkSnapshot;
pub use train::{bce_loss, fisher_energy, train_trial, TrainConfig, TrainReport};
