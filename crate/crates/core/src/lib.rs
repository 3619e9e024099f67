//! Incentive design for active inference of a follower's type.
//!
//! A leader offers side payments on selected state-action pairs to a follower
//! whose type (dynamics, rewards, discount) is unknown. Each type plays the
//! entropy-regularized best response, which makes its policy a smooth function
//! of the payment. The leader partially observes the follower and picks the
//! payment that minimizes the conditional entropy of the type given the
//! observations plus the payment cost.
//!
//! | module | contents |
//! |---|---|
//! | [`mdp`] | follower MDPs, side payments, soft value iteration |
//! | [`q_gradient`] | `dQ*/dR` by solving the linearized Bellman equation |
//! | [`hmm`] | policy-induced HMMs, observable operators, likelihood gradients, sampling |
//! | [`inference`] | type posteriors, conditional entropy and its gradient |
//! | [`incentive`] | the single-level objective and projected gradient descent |
//! | [`gridworld`] | slippery grid worlds and the bundled experiment configs |

pub mod error;
pub mod gridworld;
pub mod hmm;
pub mod incentive;
pub mod inference;
pub mod mdp;
pub mod q_gradient;

pub use error::{Error, Result};
