//! Latent-imagination reinforcement learning with particle-based rollouts.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] — dense tensors, reverse-mode autodiff on a tape, Gaussian
//!   utilities, Adam, parameter stores and checkpoints.
//! * [`tag_env`] — the seeded predator–prey pursuit simulator the agent is
//!   trained on.
//! * [`world_model`] — recurrent state-space model: posterior encoder, prior
//!   ensemble, decoder, reward and continue heads, and their losses.
//! * [`actor_critic`] — tanh-squashed Gaussian policy, critic with EMA target,
//!   lambda-returns and the policy/value losses.
//! * [`imagination`] — particle rollouts in latent space with branching,
//!   free-energy scoring and pruning.
//! * [`trainer`] — replay buffer, the collect/update loop, evaluation,
//!   metrics and experiment orchestration.

pub mod actor_critic;
pub mod imagination;
pub mod numerics;
pub mod tag_env;
pub mod trainer;
pub mod world_model;
