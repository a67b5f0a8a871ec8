//! Typed relational graphs over question instances: mention discovery,
//! reasoning paths, relation synthesis, and serialization.

mod build;
mod instance;
mod mention;
mod paths;
mod serial;
mod stats;

pub use build::{build_graph, Edge, Node, NodeKind, RelGraph, Relation};
pub use instance::{normalize_phrase, normalize_token, GraphConfig, Instance, NerMode};
pub use mention::{find_mentions, Mention, MentionSet};
pub use paths::{find_reasoning_paths, ReasonPath};
pub use serial::{deserialize_graph, serialize_graph, GRAPH_VERSION};
pub use stats::{graph_stats, GraphStats};
