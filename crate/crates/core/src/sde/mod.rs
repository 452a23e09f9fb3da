//! Monte Carlo integration of nominal, perturbed, and filtered stochastic
//! master equations.

pub mod integrate;
pub mod noise;
pub mod nondemolition;

pub use integrate::{
    reconstruct_filter, simulate_coupled, simulate_coupled_with, simulate_nominal, simulate_perturbed,
    simulate_perturbed_with, CoupledSpec, CoupledTrajectoryRecord, SimOptions, TrajectoryRecord,
};
pub use noise::{CoarsenedIncrements, GaussianIncrements, IncrementSource, NoiseStream, RecordedIncrements};
pub use nondemolition::{
    channel_spreads, check_a1, check_a2, check_h1, check_h2, feedback_law_eval, ChannelParams, FeedbackLaw,
    FilterParams, NonDemolitionModel,
};
