//! Graph (de)serialization: one versioned JSON document per graph.

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

use super::build::RelGraph;

pub const GRAPH_VERSION: &str = "hopgraph.graph.v1";

#[derive(Serialize, Deserialize)]
struct GraphFile {
    version: String,
    graph: RelGraph,
}

/// Render a graph as a single JSON line. Nodes are already in canonical
/// order, so equal graphs serialize to equal bytes.
pub fn serialize_graph(graph: &RelGraph) -> String {
    let file = GraphFile {
        version: GRAPH_VERSION.to_string(),
        graph: graph.clone(),
    };
    let mut s = serde_json::to_string(&file).expect("graphs always serialize");
    s.push('\n');
    s
}

pub fn deserialize_graph(text: &str) -> Result<RelGraph, GraphError> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| GraphError::BadGraphFile {
        path: String::new(),
        what: e.to_string(),
    })?;
    if file.version != GRAPH_VERSION {
        return Err(GraphError::Version {
            expected: GRAPH_VERSION,
            got: file.version,
        });
    }
    file.graph.validate()?;
    Ok(file.graph)
}
