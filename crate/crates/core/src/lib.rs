//! Conditional posterior sampling for episodic reinforcement learning over
//! finite value-function classes, with exact posteriors, complexity
//! diagnostics and a regret-measurement harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod class;
pub mod cli;
pub mod complexity;
pub mod diagnostics;
pub mod error;
pub mod generators;
pub mod harness;
pub mod io;
pub mod mdp;
pub mod numeric;
pub mod posterior;
pub mod rng;

pub use class::{MemberIndexTuple, QFunctionClass};
pub use error::{Error, Result};
pub use mdp::{DeterministicPolicy, QTable, TabularMdp, Trajectory};
pub use posterior::{Hyperparameters, LogWeightChain, PosteriorState};
