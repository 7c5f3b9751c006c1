//! Core library for graph-encoded structured channel pruning.
//!
//! A convolutional network is modeled as a feature-annotated DAG over layers.
//! Channels that must be pruned together (e.g. across residual additions) are
//! grouped into decision units; a graph-attention encoder embeds the annotated
//! DAG, a PPO agent emits keep/prune bits per unit group, and a two-phase
//! self-competition rule converts sparse terminal evaluations into rewards.
//! Autoencoder pretraining of the encoder and a CMA-ES search baseline are
//! included, along with binary container formats for weights, masks and data.

pub mod analysis;
pub mod cma;
pub mod config;
pub mod diff;
pub mod env;
pub mod eval;
pub mod gae;
pub mod gat;
pub mod io;
pub mod net;
pub mod ppo;
pub mod seed;
pub mod toynets;
pub mod trainer;

pub use diff::{Tape, Tensor, Var};
pub use eval::Dataset;
pub use net::{ChannelIndexing, GraphObservation, LayerKind, LayerSpec, NetworkSpec, PruningMask};
