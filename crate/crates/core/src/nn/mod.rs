//! Parameter storage, layers and the optimizer.

pub mod layers;
pub mod optim;
pub mod params;

pub use optim::Sgd;
pub use params::{update_running_stats, BnObservation, Bound, Mode, Net, ParamSet};
