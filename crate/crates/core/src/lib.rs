//! Inline autocomplete modelled as a sequential decision problem: corpus
//! preparation, a prefix-conditioned bigram language model, the suggestion
//! MDP, exact small-instance solvers, learning agents, evaluation and the
//! keystroke study service.

pub mod agents;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod lm;
pub mod mdp;
pub mod rng;
pub mod study;
pub mod theory;

pub use error::{Error, Result};
