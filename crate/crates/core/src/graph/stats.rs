//! Corpus-level graph summaries.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

use super::build::{RelGraph, Relation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_graphs: usize,
    pub mean_nodes: f64,
    pub mean_edges: f64,
    /// Total directed edge count per relation name, over all graphs.
    pub per_relation: BTreeMap<String, usize>,
}

pub fn graph_stats(graphs: &[RelGraph]) -> Result<GraphStats, GraphError> {
    if graphs.is_empty() {
        return Err(GraphError::NoGraphs);
    }
    let mut per_relation: BTreeMap<String, usize> = Relation::ALL
        .iter()
        .map(|r| (r.name().to_string(), 0))
        .collect();
    let (mut nodes, mut edges) = (0usize, 0usize);
    for g in graphs {
        nodes += g.nodes.len();
        edges += g.edges.len();
        for e in &g.edges {
            *per_relation.get_mut(e.rel.name()).unwrap() += 1;
        }
    }
    let n = graphs.len() as f64;
    Ok(GraphStats {
        n_graphs: graphs.len(),
        mean_nodes: nodes as f64 / n,
        mean_edges: edges as f64 / n,
        per_relation,
    })
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "graphs: {}  mean nodes: {:.2}  mean edges: {:.2}",
            self.n_graphs, self.mean_nodes, self.mean_edges
        )?;
        for (name, count) in &self.per_relation {
            writeln!(f, "  {name:<15} {count}")?;
        }
        Ok(())
    }
}
