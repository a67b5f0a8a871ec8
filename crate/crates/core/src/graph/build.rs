//! Relational graph assembly: nodes from mentions (and optionally sentences),
//! twelve typed relations, canonical ordering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{GraphError, Result};

use super::instance::{GraphConfig, Instance};
use super::mention::{find_mentions, Mention};
use super::paths::{find_reasoning_paths, ReasonPath};

/// Edge label. Entity relations first, then the complement filler, then the
/// sentence relations.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relation {
    /// Entity mentions in the same document.
    CoDoc,
    /// Same referent in different documents.
    MatchAcross,
    /// Same referent twice in one document.
    MatchWithin,
    /// Query and reason mention in the same sentence.
    QueryReason,
    /// Consecutive reason mentions on a reasoning path.
    ReasonReason,
    /// Reason and candidate mention in the same sentence.
    ReasonCand,
    /// Connects every pair that no other relation touches.
    Complement,
    /// Sentences of the same document.
    SentSameDoc,
    /// Sentences at distance one, either side.
    SentAdj,
    /// Sentence to its predecessor.
    SentPrev,
    /// Sentence to its successor.
    SentNext,
    /// Sentence to each entity mention inside it.
    SentContains,
}

impl Relation {
    pub const ALL: [Relation; 12] = [
        Relation::CoDoc,
        Relation::MatchAcross,
        Relation::MatchWithin,
        Relation::QueryReason,
        Relation::ReasonReason,
        Relation::ReasonCand,
        Relation::Complement,
        Relation::SentSameDoc,
        Relation::SentAdj,
        Relation::SentPrev,
        Relation::SentNext,
        Relation::SentContains,
    ];

    /// The relations a config can actually produce, in enum order. Message
    /// passing allocates one weight matrix per member.
    pub fn active_set(config: &GraphConfig) -> Vec<Relation> {
        Relation::ALL
            .into_iter()
            .filter(|r| match r {
                Relation::QueryReason | Relation::ReasonReason | Relation::ReasonCand => {
                    config.use_reasoning
                }
                Relation::SentSameDoc
                | Relation::SentAdj
                | Relation::SentPrev
                | Relation::SentNext
                | Relation::SentContains => config.use_sentences,
                _ => true,
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::CoDoc => "CO_DOC",
            Relation::MatchAcross => "MATCH_ACROSS",
            Relation::MatchWithin => "MATCH_WITHIN",
            Relation::QueryReason => "QUERY_REASON",
            Relation::ReasonReason => "REASON_REASON",
            Relation::ReasonCand => "REASON_CAND",
            Relation::Complement => "COMPLEMENT",
            Relation::SentSameDoc => "SENT_SAME_DOC",
            Relation::SentAdj => "SENT_ADJ",
            Relation::SentPrev => "SENT_PREV",
            Relation::SentNext => "SENT_NEXT",
            Relation::SentContains => "SENT_CONTAINS",
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeKind {
    Query,
    Cand,
    Reason,
    Sent,
}

/// A graph node: an entity mention, a sentence, or a placeholder for a
/// candidate that never appears in the text (mention = None, kind = Cand).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mention: Option<Mention>,
    /// (doc, sentence) for sentence nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_index: Option<usize>,
}

impl Node {
    /// Entity nodes are the mention-backed ones; sentence nodes and
    /// placeholder candidates are not.
    pub fn is_entity(&self) -> bool {
        self.mention.is_some()
    }

    pub fn referent(&self) -> Option<&str> {
        self.mention.as_ref().map(|m| m.referent.as_str())
    }

    pub fn doc(&self) -> Option<usize> {
        match (&self.mention, self.sentence) {
            (Some(m), _) => Some(m.doc),
            (None, Some((d, _))) => Some(d),
            _ => None,
        }
    }

    /// (doc, sentence) for anything anchored in text.
    pub fn location(&self) -> Option<(usize, usize)> {
        match (&self.mention, self.sentence) {
            (Some(m), _) => Some((m.doc, m.sentence)),
            (None, loc) => loc,
        }
    }

    /// Canonical ordering: reading position, then kind, with placeholder
    /// candidates at the end.
    fn sort_key(&self) -> (usize, usize, (usize, usize), NodeKind, usize) {
        let ci = self.candidate_index.unwrap_or(0);
        match (&self.mention, self.sentence) {
            (Some(m), _) => (m.doc, m.sentence, m.span, self.kind, ci),
            (None, Some((d, s))) => (d, s, (0, 0), self.kind, ci),
            (None, None) => (usize::MAX, 0, (0, 0), self.kind, ci),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: Relation,
}

/// The relational graph for one instance. Nodes are in canonical order and
/// the edge list is sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelGraph {
    pub instance_id: String,
    pub n_candidates: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl RelGraph {
    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        for e in &self.edges {
            let worst = e.src.max(e.dst);
            if worst >= n {
                return Err(GraphError::EdgeOutOfRange {
                    index: worst,
                    n_nodes: n,
                });
            }
            if e.src == e.dst {
                return Err(GraphError::BadGraphFile {
                    path: String::new(),
                    what: format!("self loop at node {}", e.src),
                });
            }
        }
        for node in &self.nodes {
            if node.kind == NodeKind::Cand {
                match node.candidate_index {
                    Some(ci) if ci < self.n_candidates => {}
                    other => {
                        return Err(GraphError::BadGraphFile {
                            path: String::new(),
                            what: format!(
                                "candidate node with index {other:?} outside 0..{}",
                                self.n_candidates
                            ),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    /// (node index, candidate index) for every candidate node.
    pub fn candidate_nodes(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                (n.kind == NodeKind::Cand).then(|| (i, n.candidate_index.unwrap()))
            })
            .collect()
    }

    pub fn edge_set(&self) -> BTreeSet<(usize, usize, Relation)> {
        self.edges.iter().map(|e| (e.src, e.dst, e.rel)).collect()
    }
}

/// Build the full relational graph for an instance.
pub fn build_graph(inst: &Instance, config: &GraphConfig) -> Result<RelGraph, GraphError> {
    inst.validate()?;
    config.validate()?;
    let mentions = find_mentions(inst, config);
    let paths = if config.use_reasoning {
        find_reasoning_paths(inst, &mentions, config)
    } else {
        Vec::new()
    };
    let nodes = assemble_nodes(inst, config, &mentions, &paths);
    let edges = synthesize_edges(inst, config, &nodes, &paths);
    let graph = RelGraph {
        instance_id: inst.id.clone(),
        n_candidates: inst.candidates.len(),
        nodes,
        edges,
    };
    graph.validate()?;
    Ok(graph)
}

fn assemble_nodes(
    inst: &Instance,
    config: &GraphConfig,
    mentions: &super::mention::MentionSet,
    paths: &[ReasonPath],
) -> Vec<Node> {
    let mut nodes = Vec::new();
    for m in &mentions.query {
        nodes.push(Node {
            kind: NodeKind::Query,
            mention: Some(m.clone()),
            sentence: None,
            candidate_index: None,
        });
    }
    let mut seen_cands = BTreeSet::new();
    for (m, ci) in &mentions.cand {
        seen_cands.insert(*ci);
        nodes.push(Node {
            kind: NodeKind::Cand,
            mention: Some(m.clone()),
            sentence: None,
            candidate_index: Some(*ci),
        });
    }
    // Reason mentions survive only if some path uses them.
    let surviving: BTreeSet<&Mention> =
        paths.iter().flat_map(|p| p.reason_mentions.iter()).collect();
    for m in surviving {
        nodes.push(Node {
            kind: NodeKind::Reason,
            mention: Some(m.clone()),
            sentence: None,
            candidate_index: None,
        });
    }
    if config.use_sentences {
        for (d, doc) in inst.supports.iter().enumerate() {
            for s in 0..doc.len() {
                nodes.push(Node {
                    kind: NodeKind::Sent,
                    mention: None,
                    sentence: Some((d, s)),
                    candidate_index: None,
                });
            }
        }
    }
    // Unmentioned candidates still need a node for total scoring.
    for ci in 0..inst.candidates.len() {
        if !seen_cands.contains(&ci) {
            nodes.push(Node {
                kind: NodeKind::Cand,
                mention: None,
                sentence: None,
                candidate_index: Some(ci),
            });
        }
    }
    nodes.sort_by_key(Node::sort_key);
    nodes
}

fn synthesize_edges(
    inst: &Instance,
    config: &GraphConfig,
    nodes: &[Node],
    paths: &[ReasonPath],
) -> Vec<Edge> {
    let mut set: BTreeSet<(usize, usize, Relation)> = BTreeSet::new();
    let n = nodes.len();
    let both = |set: &mut BTreeSet<(usize, usize, Relation)>, a: usize, b: usize, r| {
        set.insert((a, b, r));
        set.insert((b, a, r));
    };

    // Entity-entity relations by pairwise predicate.
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&nodes[i], &nodes[j]);
            if !(a.is_entity() && b.is_entity()) {
                continue;
            }
            let same_doc = a.doc() == b.doc();
            let same_sentence = a.location() == b.location();
            let same_referent = a.referent() == b.referent();
            if same_doc {
                both(&mut set, i, j, Relation::CoDoc);
            }
            if same_referent {
                let rel = if same_doc {
                    Relation::MatchWithin
                } else {
                    Relation::MatchAcross
                };
                both(&mut set, i, j, rel);
            }
            if config.use_reasoning && same_sentence {
                let kinds = (a.kind.min(b.kind), a.kind.max(b.kind));
                if kinds == (NodeKind::Query, NodeKind::Reason) {
                    both(&mut set, i, j, Relation::QueryReason);
                }
                if kinds == (NodeKind::Cand, NodeKind::Reason) {
                    both(&mut set, i, j, Relation::ReasonCand);
                }
            }
        }
    }

    // Path adjacency between consecutive reason mentions.
    if config.use_reasoning {
        let reason_idx: BTreeMap<&Mention, usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, nd)| nd.kind == NodeKind::Reason)
            .map(|(i, nd)| (nd.mention.as_ref().unwrap(), i))
            .collect();
        for p in paths {
            for w in p.reason_mentions.windows(2) {
                let (a, b) = (reason_idx[&w[0]], reason_idx[&w[1]]);
                if a != b {
                    both(&mut set, a, b, Relation::ReasonReason);
                }
            }
        }
    }

    if config.use_sentences {
        let sents: Vec<(usize, (usize, usize))> = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.sentence.map(|loc| (i, loc)))
            .collect();
        for (k, &(i, (d1, s1))) in sents.iter().enumerate() {
            for &(j, (d2, s2)) in &sents[k + 1..] {
                if d1 != d2 {
                    continue;
                }
                both(&mut set, i, j, Relation::SentSameDoc);
                if s1.abs_diff(s2) == 1 {
                    both(&mut set, i, j, Relation::SentAdj);
                    let (early, late) = if s1 < s2 { (i, j) } else { (j, i) };
                    set.insert((late, early, Relation::SentPrev));
                    set.insert((early, late, Relation::SentNext));
                }
            }
        }
        for &(i, loc) in &sents {
            for (j, nd) in nodes.iter().enumerate() {
                if nd.is_entity() && nd.location() == Some(loc) {
                    both(&mut set, i, j, Relation::SentContains);
                }
            }
        }
    }

    // Complement: every pair no other relation touched, in either direction.
    for i in 0..n {
        for j in (i + 1)..n {
            let touched = Relation::ALL
                .iter()
                .any(|&r| set.contains(&(i, j, r)) || set.contains(&(j, i, r)));
            if !touched {
                both(&mut set, i, j, Relation::Complement);
            }
        }
    }

    let _ = inst;
    set.into_iter()
        .map(|(src, dst, rel)| Edge { src, dst, rel })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::instance::NerMode;
    use crate::verify::pairwise_edges;

    fn inst(body: &str) -> Instance {
        serde_json::from_str(body).unwrap()
    }

    fn cfg(reason: bool, sents: bool) -> GraphConfig {
        GraphConfig {
            use_reasoning: reason,
            use_sentences: sents,
            max_path_docs: 3,
            ner_mode: NerMode::Heuristic,
        }
    }

    fn bridge_instance() -> Instance {
        inst(
            r#"{"id":"g1","query":"r Alpha","candidates":["Beta","Missing"],
                "supports":[
                    [["Alpha", "visited", "Gamma"]],
                    [["Gamma", "borders", "Beta"]]
                ],
                "answer":"Beta"}"#,
        )
    }

    #[test]
    fn base_graph_matches_hand_enumerated_edges() {
        let g = build_graph(&bridge_instance(), &cfg(false, false)).unwrap();
        // Canonical node order: alpha@d0, beta@d1, placeholder last.
        let kinds: Vec<NodeKind> = g.nodes.iter().map(|n| n.kind).collect();
        assert_eq!(kinds, vec![NodeKind::Query, NodeKind::Cand, NodeKind::Cand]);
        assert_eq!(g.nodes[2].mention, None);
        assert_eq!(g.nodes[2].candidate_index, Some(1));
        // No pair shares a document or referent, so everything is complement.
        let expect: BTreeSet<(usize, usize, Relation)> = [
            (0, 1, Relation::Complement),
            (1, 0, Relation::Complement),
            (0, 2, Relation::Complement),
            (2, 0, Relation::Complement),
            (1, 2, Relation::Complement),
            (2, 1, Relation::Complement),
        ]
        .into_iter()
        .collect();
        assert_eq!(g.edge_set(), expect);
    }

    #[test]
    fn reason_graph_adds_bridge_nodes_and_relations() {
        let g = build_graph(&bridge_instance(), &cfg(true, false)).unwrap();
        // gamma mentions in both documents become reason nodes.
        let kinds: Vec<NodeKind> = g.nodes.iter().map(|n| n.kind).collect();
        assert_eq!(
            kinds,
            vec![
                NodeKind::Query,
                NodeKind::Reason,
                NodeKind::Reason,
                NodeKind::Cand,
                NodeKind::Cand
            ]
        );
        let es = g.edge_set();
        // Query-reason in doc 0's sentence, reason-cand in doc 1's.
        assert!(es.contains(&(0, 1, Relation::QueryReason)));
        assert!(es.contains(&(1, 0, Relation::QueryReason)));
        assert!(es.contains(&(2, 3, Relation::ReasonCand)));
        // The two gamma mentions match across documents and sit on one path.
        assert!(es.contains(&(1, 2, Relation::MatchAcross)));
        assert!(es.contains(&(1, 2, Relation::ReasonReason)));
        // Same document pairs carry co-doc.
        assert!(es.contains(&(0, 1, Relation::CoDoc)));
        assert!(es.contains(&(2, 3, Relation::CoDoc)));
        // The bridged pairs are no longer complement.
        assert!(!es.contains(&(0, 1, Relation::Complement)));
        // Placeholder candidate connects only through complement.
        let placeholder = 4;
        for (s, d, r) in &es {
            if *s == placeholder || *d == placeholder {
                assert_eq!(*r, Relation::Complement);
            }
        }
    }

    #[test]
    fn sentence_nodes_get_ordering_and_containment_edges() {
        let body = r#"{"id":"g2","query":"r Alpha","candidates":["Beta"],
            "supports":[
                [["Alpha", "sleeps"], ["Beta", "waits"], ["nothing", "here"]]
            ],
            "answer":"Beta"}"#;
        let g = build_graph(&inst(body), &cfg(false, true)).unwrap();
        // Sentence nodes precede the mentions they contain in canonical
        // order: sent0, alpha, sent1, beta, sent2.
        let kinds: Vec<NodeKind> = g.nodes.iter().map(|n| n.kind).collect();
        assert_eq!(
            kinds,
            vec![
                NodeKind::Sent,
                NodeKind::Query,
                NodeKind::Sent,
                NodeKind::Cand,
                NodeKind::Sent
            ]
        );
        let es = g.edge_set();
        // Same-document everywhere, adjacency only between neighbors.
        assert!(es.contains(&(0, 2, Relation::SentSameDoc)));
        assert!(es.contains(&(0, 4, Relation::SentSameDoc)));
        assert!(es.contains(&(0, 2, Relation::SentAdj)));
        assert!(!es.contains(&(0, 4, Relation::SentAdj)));
        // Direction: successor edge from sent0 to sent1, predecessor back.
        assert!(es.contains(&(0, 2, Relation::SentNext)));
        assert!(es.contains(&(2, 0, Relation::SentPrev)));
        assert!(!es.contains(&(0, 2, Relation::SentPrev)));
        // Containment, both ways.
        assert!(es.contains(&(0, 1, Relation::SentContains)));
        assert!(es.contains(&(1, 0, Relation::SentContains)));
        assert!(!es.contains(&(0, 3, Relation::SentContains)));
        // Entity-entity co-doc still present between the two mentions.
        assert!(es.contains(&(1, 3, Relation::CoDoc)));
    }

    #[test]
    fn single_node_graph_has_no_edges() {
        let body = r#"{"id":"g3","query":"r missing subject","candidates":["Only"],
            "supports":[[["Only", "word", "here"]]],
            "answer":"Only"}"#;
        let g = build_graph(&inst(body), &cfg(false, false)).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn symmetric_relations_are_mirrored_and_prev_next_pair_up() {
        let g = build_graph(&bridge_instance(), &cfg(true, true)).unwrap();
        let es = g.edge_set();
        for &(s, d, r) in &es {
            match r {
                Relation::SentPrev => assert!(es.contains(&(d, s, Relation::SentNext))),
                Relation::SentNext => assert!(es.contains(&(d, s, Relation::SentPrev))),
                _ => assert!(es.contains(&(d, s, r)), "missing mirror of {s}->{d} {r:?}"),
            }
        }
    }

    #[test]
    fn edges_match_pairwise_oracle_in_all_settings() {
        let bodies = [
            r#"{"id":"o1","query":"r Alpha","candidates":["Beta","Missing"],
                "supports":[
                    [["Alpha", "visited", "Gamma"], ["Gamma", "stayed"]],
                    [["Gamma", "borders", "Beta"]]
                ],
                "answer":"Beta"}"#,
            r#"{"id":"o2","query":"r Alpha Prime","candidates":["Beta","Alpha Prime"],
                "supports":[
                    [["Alpha", "Prime", "is", "Beta"], ["Beta", "is", "Alpha", "Prime"]],
                    [["Delta", "saw", "Epsilon"]]
                ],
                "answer":"Beta"}"#,
            r#"{"id":"o3","query":"r Solo","candidates":["Target"],
                "supports":[
                    [["Solo", "met", "Bridge", "One"]],
                    [["Bridge", "One", "met", "Bridge", "Two"]],
                    [["Bridge", "Two", "met", "Target"]]
                ],
                "answer":"Target"}"#,
        ];
        for body in bodies {
            let instance = inst(body);
            for (reason, sents) in [(false, false), (true, false), (false, true), (true, true)] {
                let config = cfg(reason, sents);
                let g = build_graph(&instance, &config).unwrap();
                let expect = pairwise_edges(&instance, &config, &g.nodes);
                assert_eq!(g.edge_set(), expect, "{:?} {:?}", instance.id, (reason, sents));
            }
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_graph(&bridge_instance(), &cfg(true, true)).unwrap();
        let b = build_graph(&bridge_instance(), &cfg(true, true)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn active_set_tracks_config() {
        assert_eq!(Relation::active_set(&cfg(false, false)).len(), 4);
        assert_eq!(Relation::active_set(&cfg(true, false)).len(), 7);
        assert_eq!(Relation::active_set(&cfg(false, true)).len(), 9);
        assert_eq!(Relation::active_set(&cfg(true, true)).len(), 12);
    }
}
