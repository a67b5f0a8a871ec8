//! Reasoning paths: chains of documents leading from a query mention to a
//! candidate mention, linked by shared entities.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::instance::{GraphConfig, Instance};
use super::mention::{Mention, MentionSet};

/// One document chain from a query-bearing document to a candidate-bearing
/// document. `connectors[i]` is the referent shared by `docs[i]` and
/// `docs[i+1]`; `reason_mentions` are the connectors' reason-entity mentions
/// inside the chain, in reading order along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonPath {
    pub docs: Vec<usize>,
    pub connectors: Vec<String>,
    pub reason_mentions: Vec<Mention>,
}

/// Enumerate all simple document chains d1..dk (k <= max_path_docs) where a
/// query mention occurs in d1, a candidate mention in dk, and consecutive
/// documents share a referent. Any shared referent may serve as the link:
/// reason entities usually do, but the query subject or a candidate can
/// bridge two documents too. Chains differing only in connector choice are
/// distinct paths.
pub fn find_reasoning_paths(
    inst: &Instance,
    mentions: &MentionSet,
    config: &GraphConfig,
) -> Vec<ReasonPath> {
    let n_docs = inst.supports.len();
    // referent -> documents it occurs in, over all mention kinds.
    let mut occ: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    let all = mentions
        .query
        .iter()
        .chain(mentions.cand.iter().map(|(m, _)| m))
        .chain(mentions.reason.iter());
    for m in all {
        occ.entry(&m.referent).or_default().insert(m.doc);
    }

    let query_docs: BTreeSet<usize> = mentions.query.iter().map(|m| m.doc).collect();
    let cand_docs: BTreeSet<usize> = mentions.cand.iter().map(|(m, _)| m.doc).collect();

    // Shared referents per unordered document pair.
    let mut shared: BTreeMap<(usize, usize), Vec<&str>> = BTreeMap::new();
    for (r, docs) in &occ {
        for &a in docs {
            for &b in docs {
                if a < b {
                    shared.entry((a, b)).or_default().push(r);
                }
            }
        }
    }
    let shared_of = |a: usize, b: usize| -> &[&str] {
        let key = if a < b { (a, b) } else { (b, a) };
        shared.get(&key).map(Vec::as_slice).unwrap_or(&[])
    };

    let mut out = Vec::new();
    // Depth-first over (chain, connector choices), documents never repeating.
    let mut stack: Vec<(Vec<usize>, Vec<String>)> = query_docs
        .iter()
        .map(|&d| (vec![d], Vec::new()))
        .collect();
    while let Some((docs, connectors)) = stack.pop() {
        let last = *docs.last().expect("chains start non-empty");
        if cand_docs.contains(&last) {
            out.push(make_path(docs.clone(), connectors.clone(), mentions));
        }
        if docs.len() >= config.max_path_docs {
            continue;
        }
        for next in 0..n_docs {
            if docs.contains(&next) {
                continue;
            }
            for r in shared_of(last, next) {
                let mut d2 = docs.clone();
                d2.push(next);
                let mut c2 = connectors.clone();
                c2.push((*r).to_string());
                stack.push((d2, c2));
            }
        }
    }
    out.sort_by(|a, b| (&a.docs, &a.connectors).cmp(&(&b.docs, &b.connectors)));
    out.dedup();
    out
}

fn make_path(docs: Vec<usize>, connectors: Vec<String>, mentions: &MentionSet) -> ReasonPath {
    let pos_of = |d: usize| docs.iter().position(|&x| x == d).unwrap();
    let mut picked: Vec<&Mention> = Vec::new();
    for (i, r) in connectors.iter().enumerate() {
        for m in &mentions.reason {
            if m.referent == *r && (m.doc == docs[i] || m.doc == docs[i + 1]) {
                picked.push(m);
            }
        }
    }
    picked.sort_by_key(|m| (pos_of(m.doc), m.sentence, m.span));
    picked.dedup();
    ReasonPath {
        docs,
        connectors,
        reason_mentions: picked.into_iter().cloned().collect(),
    }
}
