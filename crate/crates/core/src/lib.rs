//! Topology-conditioned Stackelberg coordination lab.
//!
//! * [`topo`]: agent-centric frames, weaving distances, pairwise priorities.
//! * [`field`]: priority graphs, least-squares score fields, de-cycling, labels.
//! * [`sim`]: kinematic multi-vehicle microsimulator and CR/AS/SM metrics.
//! * [`tscnet`]: the priority-conditioned actor-critic network and its losses.
//! * [`lemmalab`]: exact tabular checks of the Bellman-error bound and the
//!   performance-difference identity.
//! * [`trainer`]: rollout collection, training, evaluation and ablations.

pub mod error;
pub mod field;
pub mod lemmalab;
pub mod par;
pub mod rng;
pub mod sim;
pub mod topo;
pub mod trainer;
pub mod tscnet;

pub use error::{Error, Result};
pub use par::Exec;
