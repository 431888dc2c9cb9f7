//! Latent-space counterfactuals for small image classifiers.
//!
//! The pipeline: a VAE provides an encoder `E` and a generator `G`; a
//! counterfactual for input `x` under classifier `f` is found by gradient
//! ascent (or descent) on the latent code `z = E(x)` until `f(G(z))` crosses
//! a target probability. GLM attribute models fitted in the same latent space
//! turn each counterfactual into feature importance scores, and logistic
//! directions support closed-form single-attribute edits.
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode autodiff
//! - [`nets`]: MLP classifier, VAE, Adam optimizer, training loops
//! - [`attack`]: latent gradient attacks, misclassification repair, trajectories
//! - [`attribution`]: GLM attribute models, local and global importance scores
//! - [`linear`]: logistic latent directions and the closed-form step length
//! - [`data`]: IDX I/O, synthetic corpora, derived attribute labels

pub mod attack;
pub mod attribution;
pub mod data;
mod error;
pub mod linear;
pub mod nets;
pub mod tensor;

pub use error::{Error, Result};
