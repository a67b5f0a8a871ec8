//! Independent recomputations of core algorithms, used by tests to
//! cross-check the main implementations. Everything here is deliberately
//! written the slow, direct way: per-pair predicates, per-node loops.

use std::collections::BTreeSet;

use crate::graph::{
    find_mentions, find_reasoning_paths, GraphConfig, Instance, Node, NodeKind, RelGraph,
    Relation,
};
use crate::num::Tensor;
use crate::rgcn::NeighborIndex;

/// Expected edge set for `nodes`, evaluated one ordered pair at a time.
pub fn pairwise_edges(
    inst: &Instance,
    config: &GraphConfig,
    nodes: &[Node],
) -> BTreeSet<(usize, usize, Relation)> {
    // Path adjacency recomputed from scratch.
    let mut adjacent: BTreeSet<(usize, usize)> = BTreeSet::new();
    if config.use_reasoning {
        let mentions = find_mentions(inst, config);
        let node_of = |m: &crate::graph::Mention| {
            nodes
                .iter()
                .position(|n| n.kind == NodeKind::Reason && n.mention.as_ref() == Some(m))
        };
        for p in find_reasoning_paths(inst, &mentions, config) {
            for w in p.reason_mentions.windows(2) {
                if let (Some(a), Some(b)) = (node_of(&w[0]), node_of(&w[1])) {
                    adjacent.insert((a, b));
                    adjacent.insert((b, a));
                }
            }
        }
    }

    let n = nodes.len();
    let holds = |i: usize, j: usize, rel: Relation| -> bool {
        let (a, b) = (&nodes[i], &nodes[j]);
        let entities = a.is_entity() && b.is_entity();
        let sentences = a.kind == NodeKind::Sent && b.kind == NodeKind::Sent;
        let same_doc = a.doc().is_some() && a.doc() == b.doc();
        match rel {
            Relation::CoDoc => entities && same_doc,
            Relation::MatchAcross => entities && a.referent() == b.referent() && !same_doc,
            Relation::MatchWithin => entities && a.referent() == b.referent() && same_doc,
            Relation::QueryReason => {
                config.use_reasoning
                    && entities
                    && a.location() == b.location()
                    && ((a.kind, b.kind) == (NodeKind::Query, NodeKind::Reason)
                        || (a.kind, b.kind) == (NodeKind::Reason, NodeKind::Query))
            }
            Relation::ReasonCand => {
                config.use_reasoning
                    && entities
                    && a.location() == b.location()
                    && ((a.kind, b.kind) == (NodeKind::Reason, NodeKind::Cand)
                        || (a.kind, b.kind) == (NodeKind::Cand, NodeKind::Reason))
            }
            Relation::ReasonReason => config.use_reasoning && adjacent.contains(&(i, j)),
            Relation::Complement => unreachable!("evaluated separately"),
            Relation::SentSameDoc => sentences && same_doc,
            Relation::SentAdj => {
                sentences && same_doc && a.sentence.unwrap().1.abs_diff(b.sentence.unwrap().1) == 1
            }
            Relation::SentPrev => {
                sentences && same_doc && a.sentence.unwrap().1 == b.sentence.unwrap().1 + 1
            }
            Relation::SentNext => {
                sentences && same_doc && a.sentence.unwrap().1 + 1 == b.sentence.unwrap().1
            }
            Relation::SentContains => {
                let contains = |s: &Node, e: &Node| {
                    s.kind == NodeKind::Sent
                        && e.is_entity()
                        && e.location() == s.sentence
                };
                config.use_sentences && (contains(a, b) || contains(b, a))
            }
        }
    };

    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for rel in Relation::ALL {
                if rel != Relation::Complement && holds(i, j, rel) {
                    out.insert((i, j, rel));
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let related = Relation::ALL.iter().any(|&r| {
                r != Relation::Complement
                    && (out.contains(&(i, j, r)) || out.contains(&(j, i, r)))
            });
            if !related {
                out.insert((i, j, Relation::Complement));
            }
        }
    }
    out
}

/// Message passing recomputed one scalar at a time: row i accumulates, for
/// every relation r and every occurrence of j in i's incoming list, the
/// product (1/|N_i^r|) * (h_j W_r).
pub fn message_oracle(h: &Tensor, weights: &[Tensor], index: &NeighborIndex) -> Tensor {
    let (n, d) = h.dims2().expect("node matrix");
    let mut out = Tensor::zeros(&[n, d]);
    for (r, w) in weights.iter().enumerate() {
        for i in 0..n {
            let list = index.incoming(r, i);
            if list.is_empty() {
                continue;
            }
            let norm = 1.0 / list.len() as f64;
            for &j in list {
                for k in 0..d {
                    let mut s = 0.0;
                    for t in 0..d {
                        s += h.at2(j, t) * w.at2(t, k);
                    }
                    out.set2(i, k, out.at2(i, k) + norm * s);
                }
            }
        }
    }
    out
}

/// Complement edges must connect exactly the pairs with no other relation,
/// in either direction.
pub fn complement_is_exclusive(graph: &RelGraph) -> bool {
    let es = graph.edge_set();
    let n = graph.nodes.len();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let complement = es.contains(&(i, j, Relation::Complement));
            let other = Relation::ALL.iter().any(|&r| {
                r != Relation::Complement
                    && (es.contains(&(i, j, r)) || es.contains(&(j, i, r)))
            });
            if complement == other {
                return false;
            }
        }
    }
    true
}
