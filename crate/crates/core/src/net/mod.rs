//! Feature-annotated DAG representation of convolutional networks.
//!
//! A network is a topologically ordered list of layers plus typed edges.
//! Channels that must share a pruning decision (because an Add merges them)
//! are grouped into decision units by union-find over channel provenance;
//! masks, FLOPs accounting, observation graphs and physical mask application
//! all operate in terms of those units.

mod accounting;
mod apply;
mod graph;
mod groups;
mod indexing;
mod layer;
mod mask;
mod network;

pub use accounting::{channel_l1, flops, flops_ratio, layer_flops, param_count, unit_l1};
pub use apply::apply_mask;
pub use graph::{build_graph, GraphObservation, NODE_BASE_FEATURES};
pub use groups::group_partition;
pub use indexing::{build_indexing, ChannelIndexing};
pub use layer::{EdgeKind, LayerKind, LayerSpec, Nonlinearity};
pub use mask::PruningMask;
pub use network::{Edge, LayerOut, NetError, NetworkSpec};
