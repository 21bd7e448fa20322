//! Bayesian symbolic state estimation for insertion tasks.
//!
//! The crate tracks discrete symbolic states (FREE, ONSURFACE, SEARCHING,
//! ALIGNED, INSERTED, FALLEN) of a peg-in-hole task from noisy multimodal
//! observations. Binary predicate classifiers act as virtual sensors, 1-D
//! Gaussian mixtures model their log-output noise per (state, action,
//! predicate), and a discrete Bayes filter fuses everything into a belief
//! over states that can drive a closed-loop insertion state machine.
//!
//! A deterministic, seedable simulator ([`sim`]) produces labeled
//! trajectories so the full train/fit/filter/evaluate pipeline runs at desk
//! scale, and [`eval`] reproduces the offline, generalization and online
//! experiment protocols.
//!
//! Data-parallel inner loops (episode generation, per-predicate training,
//! per-triple mixture fits, folds) run on rayon when the default `parallel`
//! feature is enabled and fall back to sequential iteration without it;
//! results are bit-identical either way.

pub mod domain;
pub mod eval;
pub mod executor;
pub mod filter;
pub mod io;
pub mod obsmodel;
pub mod par;
pub mod sensors;
pub mod sim;

pub use domain::DomainSpec;
pub use filter::{Belief, TransitionModel};
pub use obsmodel::ObservationModelSet;
pub use sensors::{LabeledFrame, ObservationFrame, PredicateSensorSet, StateClassifier};
pub use sim::Trajectory;
