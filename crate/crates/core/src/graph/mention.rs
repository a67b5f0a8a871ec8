//! Mention discovery: exact matching for query/candidate strings plus a
//! capitalization heuristic (or provided annotations) for other entities.

use serde::{Deserialize, Serialize};

use super::instance::{normalize_phrase, normalize_token, GraphConfig, Instance, NerMode};

/// One occurrence of an entity in the supports.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    /// Canonical (normalized) form shared by all mentions of the same entity.
    pub referent: String,
    /// Tokens as written, space-joined.
    pub surface: String,
    pub doc: usize,
    pub sentence: usize,
    /// Token span within the sentence, half-open.
    pub span: (usize, usize),
}

impl Mention {
    fn from_span(inst: &Instance, doc: usize, sentence: usize, span: (usize, usize)) -> Mention {
        let toks = &inst.supports[doc][sentence][span.0..span.1];
        Mention {
            referent: normalize_phrase(toks),
            surface: toks.join(" "),
            doc,
            sentence,
            span,
        }
    }
}

/// Mentions partitioned by role. Candidate mentions carry the index of the
/// candidate they match.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MentionSet {
    pub query: Vec<Mention>,
    pub cand: Vec<(Mention, usize)>,
    pub reason: Vec<Mention>,
}

/// Common capitalized sentence-starters that are not entity names.
const STOPWORDS: &[&str] = &[
    "a", "an", "and", "as", "at", "but", "by", "for", "from", "he", "her", "his", "i", "if", "in",
    "is", "it", "its", "of", "on", "or", "our", "she", "so", "that", "the", "their", "there",
    "these", "they", "this", "those", "to", "was", "we", "were", "with", "you",
];

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(|c| c.is_uppercase())
}

fn is_stopword(tok: &str) -> bool {
    let low = normalize_token(tok);
    STOPWORDS.contains(&low.as_str())
}

/// All start positions where `target` (normalized tokens) occurs in `sent`.
fn occurrences(sent: &[String], target: &[String]) -> Vec<usize> {
    if target.is_empty() || sent.len() < target.len() {
        return Vec::new();
    }
    (0..=sent.len() - target.len())
        .filter(|&i| {
            target
                .iter()
                .enumerate()
                .all(|(k, t)| normalize_token(&sent[i + k]) == *t)
        })
        .collect()
}

/// Find every mention of the query subject, each candidate, and (per config)
/// reason entities. Matching is exact over lowercased token sequences.
pub fn find_mentions(inst: &Instance, config: &GraphConfig) -> MentionSet {
    let mut out = MentionSet::default();

    let query_target: Vec<String> = inst
        .query_subject
        .split_whitespace()
        .map(normalize_token)
        .collect();
    let cand_targets: Vec<Vec<String>> = inst
        .candidates
        .iter()
        .map(|c| c.split_whitespace().map(normalize_token).collect())
        .collect();

    // Referents already taken by the query or a candidate; the heuristic
    // recognizer must not re-report those.
    let mut taken: Vec<String> = vec![query_target.join(" ")];
    taken.extend(cand_targets.iter().map(|t| t.join(" ")));

    for (d, doc) in inst.supports.iter().enumerate() {
        for (s, sent) in doc.iter().enumerate() {
            for start in occurrences(sent, &query_target) {
                out.query
                    .push(Mention::from_span(inst, d, s, (start, start + query_target.len())));
            }
            for (ci, target) in cand_targets.iter().enumerate() {
                for start in occurrences(sent, target) {
                    out.cand.push((
                        Mention::from_span(inst, d, s, (start, start + target.len())),
                        ci,
                    ));
                }
            }
        }
    }

    match config.ner_mode {
        NerMode::Provided => {
            for &(d, s, a, b) in &inst.ner_spans {
                let m = Mention::from_span(inst, d, s, (a, b));
                if !taken.contains(&m.referent) {
                    out.reason.push(m);
                }
            }
        }
        NerMode::Heuristic => {
            for (d, doc) in inst.supports.iter().enumerate() {
                for (s, sent) in doc.iter().enumerate() {
                    for (a, b) in capitalized_runs(sent) {
                        let m = Mention::from_span(inst, d, s, (a, b));
                        if !taken.contains(&m.referent) {
                            out.reason.push(m);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Maximal runs of capitalized tokens. A sentence-initial stopword such as
/// "The" is not evidence of a name, so it is trimmed from the first run.
fn capitalized_runs(sent: &[String]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < sent.len() {
        if !is_capitalized(&sent[i]) {
            i += 1;
            continue;
        }
        let mut start = i;
        while i < sent.len() && is_capitalized(&sent[i]) {
            i += 1;
        }
        if start == 0 && is_stopword(&sent[0]) {
            start = 1;
        }
        if start < i {
            runs.push((start, i));
        }
    }
    runs
}
