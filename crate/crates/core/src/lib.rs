//! Desk-scale stochastic latent actor-critic.
//!
//! The pieces: a reverse-mode autodiff tape ([`autograd`]), reparameterizable
//! distributions ([`distributions`]), a sequential latent-variable model
//! ([`latent_model`]), a max-entropy actor-critic trained in the learned
//! latent space ([`actor_critic`]), episode replay with fixed-length window
//! sampling ([`replay`]), small POMDP environments ([`envs`]), exact
//! linear-Gaussian and tabular oracles for verification ([`oracle`]), and the
//! end-to-end training loop ([`trainer`]).

pub mod actor_critic;
pub mod autograd;
pub mod checkpoint;
pub mod distributions;
pub mod envs;
pub mod latent_model;
pub mod nn;
pub mod oracle;
pub mod replay;
pub mod trainer;
pub mod verify;

pub use autograd::{Param, ParamGroup, Tape, Tensor};

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("autograd: {0}")]
    Autograd(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
