//! Iterated prisoner's dilemma agents, a toy transformer trained on game
//! transcripts with a planted persona, sparse autoencoders over its
//! residual stream, and feature steering and screening on top.

pub mod checkpoint;
pub mod error;
pub mod game;
pub mod gradcheck;
pub mod lm;
pub mod rng;
pub mod sae;
pub mod screening;
pub mod stats;
pub mod steering;
pub mod strategies;

pub use error::{Error, Result};
pub use game::{
    defection_count, enumerate_histories, payoff, play_game, Action, Agent, GameHistory, GameLengths, PayoffMatrix, Round,
    Seat,
};
pub use sae::SaeModel;
pub use screening::{DeltaRecord, ScreeningConfig, ScreeningReport};
pub use steering::{SteeringSpec, SweepCurve};
pub use strategies::{Policy, PolicySpec};
