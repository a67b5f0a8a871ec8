//! Question instances and graph-construction configuration.

use serde::{Deserialize, Serialize};

use crate::error::{GraphError, Result};

/// One multi-hop question: a (subject, relation, ?) query, a candidate set,
/// and the support documents the answer must be read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct Instance {
    pub id: String,
    pub query_relation: String,
    pub query_subject: String,
    pub candidates: Vec<String>,
    /// Documents, each a list of sentences, each a list of tokens.
    pub supports: Vec<Vec<Vec<String>>>,
    pub answer: String,
    /// Optional entity annotations as (doc, sentence, start, end) token spans.
    pub ner_spans: Vec<(usize, usize, usize, usize)>,
}

/// On-disk shape: the query is a single string that splits at the first
/// space into relation and subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawInstance {
    id: String,
    query: String,
    candidates: Vec<String>,
    supports: Vec<Vec<Vec<String>>>,
    answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    ner_spans: Vec<(usize, usize, usize, usize)>,
}

impl TryFrom<RawInstance> for Instance {
    type Error = GraphError;

    fn try_from(raw: RawInstance) -> Result<Self, GraphError> {
        let bad = |what: String| GraphError::BadInstance {
            id: raw.id.clone(),
            what,
        };
        let (relation, subject) = match raw.query.split_once(' ') {
            Some((r, s)) if !r.is_empty() && !s.trim().is_empty() => {
                (r.to_string(), s.trim().to_string())
            }
            _ => {
                return Err(bad(format!(
                    "query {:?} does not split into relation and subject",
                    raw.query
                )))
            }
        };
        let inst = Instance {
            id: raw.id,
            query_relation: relation,
            query_subject: subject,
            candidates: raw.candidates,
            supports: raw.supports,
            answer: raw.answer,
            ner_spans: raw.ner_spans,
        };
        inst.validate()?;
        Ok(inst)
    }
}

impl From<Instance> for RawInstance {
    fn from(inst: Instance) -> Self {
        RawInstance {
            id: inst.id,
            query: format!("{} {}", inst.query_relation, inst.query_subject),
            candidates: inst.candidates,
            supports: inst.supports,
            answer: inst.answer,
            ner_spans: inst.ner_spans,
        }
    }
}

impl Instance {
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |what: String| GraphError::BadInstance {
            id: self.id.clone(),
            what,
        };
        if self.candidates.is_empty() {
            return Err(bad("no candidates".into()));
        }
        if !self.candidates.contains(&self.answer) {
            return Err(bad(format!(
                "answer {:?} is not one of the candidates",
                self.answer
            )));
        }
        if self.supports.is_empty() {
            return Err(bad("no support documents".into()));
        }
        for (d, doc) in self.supports.iter().enumerate() {
            if doc.is_empty() {
                return Err(GraphError::EmptyDocument {
                    id: self.id.clone(),
                    doc: d,
                });
            }
            for (s, sent) in doc.iter().enumerate() {
                if sent.is_empty() {
                    return Err(bad(format!("document {d} sentence {s} is empty")));
                }
            }
        }
        for &(d, s, a, b) in &self.ner_spans {
            let len = self
                .supports
                .get(d)
                .and_then(|doc| doc.get(s))
                .map(|sent| sent.len());
            let ok = match len {
                Some(len) => a < b && b <= len,
                None => false,
            };
            if !ok {
                return Err(bad(format!(
                    "annotation span ({d},{s},{a},{b}) out of bounds"
                )));
            }
        }
        Ok(())
    }

    /// Index of the gold answer in the candidate list.
    pub fn answer_index(&self) -> usize {
        self.candidates
            .iter()
            .position(|c| c == &self.answer)
            .expect("validated: answer is a candidate")
    }

    /// The query as a token sequence: relation tokens then subject tokens.
    pub fn query_tokens(&self) -> Vec<String> {
        self.query_relation
            .split_whitespace()
            .chain(self.query_subject.split_whitespace())
            .map(String::from)
            .collect()
    }
}

/// How to recognize entity mentions in text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NerMode {
    /// Reason-entity spans come from the instance's annotations.
    Provided,
    /// Reason entities are maximal runs of capitalized tokens.
    Heuristic,
}

/// Which node and relation families a graph gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Add reasoning-entity nodes found along document paths.
    pub use_reasoning: bool,
    /// Add one node per support sentence.
    pub use_sentences: bool,
    /// Longest document chain considered when tracing paths.
    pub max_path_docs: usize,
    pub ner_mode: NerMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            use_reasoning: false,
            use_sentences: false,
            max_path_docs: 3,
            ner_mode: NerMode::Heuristic,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.max_path_docs < 2 {
            return Err(GraphError::BadInstance {
                id: String::new(),
                what: format!("max_path_docs must be at least 2, got {}", self.max_path_docs),
            });
        }
        Ok(())
    }
}

/// Lowercase a token for exact matching.
pub fn normalize_token(tok: &str) -> String {
    tok.to_lowercase()
}

/// Normalized, space-joined form of a token sequence; mention referents and
/// match keys use this.
pub fn normalize_phrase<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| normalize_token(t.as_ref()))
        .collect::<Vec<_>>()
        .join(" ")
}
