//! Embedding sources for nodes and query tokens.
//!
//! Three kinds: a static token table (text file), a contextual sidecar of
//! precomputed span vectors (line-delimited JSON), and a deterministic hash
//! fallback that needs no files. A node's feature is the concatenation of
//! one vector per configured source, in order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EmbedError, Result};
use crate::graph::{normalize_phrase, normalize_token, Instance, NodeKind, RelGraph};
use crate::num::Tensor;
use crate::util::{keyed_rng, uniform_sym};

pub const TABLE_VERSION: &str = "hopgraph.embtable.v1";
pub const SIDECAR_VERSION: &str = "hopgraph.sidecar.v1";

/// How to construct one embedding source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedSourceSpec {
    StaticTable { name: String, path: String },
    ContextualFile {
        name: String,
        path: String,
        strict: bool,
    },
    HashFallback { name: String, dim: usize },
}

impl EmbedSourceSpec {
    pub fn name(&self) -> &str {
        match self {
            EmbedSourceSpec::StaticTable { name, .. }
            | EmbedSourceSpec::ContextualFile { name, .. }
            | EmbedSourceSpec::HashFallback { name, .. } => name,
        }
    }
}

type SpanKey = (String, usize, usize, usize, usize);

#[derive(Debug)]
enum SourceData {
    Static(HashMap<String, Vec<f64>>),
    Contextual {
        spans: HashMap<SpanKey, Vec<f64>>,
        tokens: HashMap<(String, String), Vec<f64>>,
        strict: bool,
    },
    Hash,
}

/// One loaded embedding source. Immutable after load.
#[derive(Debug)]
pub struct EmbeddingSource {
    pub name: String,
    pub dim: usize,
    data: SourceData,
}

impl EmbeddingSource {
    pub fn load(spec: &EmbedSourceSpec) -> Result<EmbeddingSource, EmbedError> {
        match spec {
            EmbedSourceSpec::StaticTable { name, path } => load_static_table(name, path),
            EmbedSourceSpec::ContextualFile { name, path, strict } => {
                load_sidecar(name, path, *strict)
            }
            EmbedSourceSpec::HashFallback { name, dim } => Ok(EmbeddingSource {
                name: name.clone(),
                dim: *dim,
                data: SourceData::Hash,
            }),
        }
    }

    /// Vector for a token span in a support document. `referent` is the
    /// normalized span text; `tokens` its raw tokens.
    pub fn span_vector(
        &self,
        instance_id: &str,
        doc: usize,
        sent: usize,
        span: (usize, usize),
        tokens: &[String],
        referent: &str,
    ) -> Result<Vec<f64>, EmbedError> {
        match &self.data {
            SourceData::Static(table) => Ok(mean_of(
                tokens
                    .iter()
                    .map(|t| table.get(&normalize_token(t)).cloned()),
                self.dim,
            )),
            SourceData::Contextual { spans, strict, .. } => {
                let key = (
                    instance_id.to_string(),
                    doc,
                    sent,
                    span.0,
                    span.1,
                );
                match spans.get(&key) {
                    Some(v) => Ok(v.clone()),
                    None if *strict => Err(EmbedError::MissingContextual {
                        source_name: self.name.clone(),
                        key: format!(
                            "instance {instance_id:?} doc {doc} sent {sent} span [{}, {})",
                            span.0, span.1
                        ),
                    }),
                    None => Ok(vec![0.0; self.dim]),
                }
            }
            SourceData::Hash => Ok(hash_unit_vector(referent, self.dim)),
        }
    }

    /// Type-level vector for a single token (query tokens, placeholder
    /// candidates).
    pub fn token_vector(&self, instance_id: &str, token: &str) -> Result<Vec<f64>, EmbedError> {
        let norm = normalize_token(token);
        match &self.data {
            SourceData::Static(table) => {
                Ok(table.get(&norm).cloned().unwrap_or_else(|| vec![0.0; self.dim]))
            }
            SourceData::Contextual { tokens, strict, .. } => {
                match tokens.get(&(instance_id.to_string(), norm.clone())) {
                    Some(v) => Ok(v.clone()),
                    None if *strict => Err(EmbedError::MissingContextual {
                        source_name: self.name.clone(),
                        key: format!("instance {instance_id:?} token {norm:?}"),
                    }),
                    None => Ok(vec![0.0; self.dim]),
                }
            }
            SourceData::Hash => Ok(hash_unit_vector(&norm, self.dim)),
        }
    }
}

/// Mean of available vectors; absent entries count as zero vectors (still
/// divide by the span length).
fn mean_of(vecs: impl Iterator<Item = Option<Vec<f64>>>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for v in vecs {
        count += 1;
        if let Some(v) = v {
            for (a, x) in acc.iter_mut().zip(&v) {
                *a += x;
            }
        }
    }
    if count > 0 {
        for a in &mut acc {
            *a /= count as f64;
        }
    }
    acc
}

/// Deterministic unit vector for a referent string.
pub fn hash_unit_vector(referent: &str, dim: usize) -> Vec<f64> {
    let mut rng = keyed_rng(dim as u64, referent);
    let mut v: Vec<f64> = (0..dim).map(|_| uniform_sym(&mut rng, 1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v[0] = 1.0;
        return v;
    }
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn load_static_table(name: &str, path: &str) -> Result<EmbeddingSource, EmbedError> {
    let bad = |what: String, line: usize| EmbedError::BadTable {
        path: path.to_string(),
        what,
        line,
    };
    let text = fs::read_to_string(Path::new(path))
        .map_err(|e| EmbedError::Io(path.to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == TABLE_VERSION => {}
        other => {
            return Err(bad(
                format!(
                    "expected header {TABLE_VERSION:?}, found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
                1,
            ))
        }
    }
    let mut table: HashMap<String, Vec<f64>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a first field");
        let vec: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| bad(format!("bad number {p:?}"), lineno))
            })
            .collect::<Result<_, _>>()?;
        if vec.is_empty() {
            return Err(bad(format!("token {token:?} has no values"), lineno));
        }
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(bad(
                    format!("{} values but earlier lines had {d}", vec.len()),
                    lineno,
                ))
            }
            _ => {}
        }
        table.insert(normalize_token(token), vec);
    }
    let dim = dim.ok_or_else(|| bad("table has no entries".into(), 1))?;
    Ok(EmbeddingSource {
        name: name.to_string(),
        dim,
        data: SourceData::Static(table),
    })
}

#[derive(Deserialize)]
struct SidecarRecord {
    instance: String,
    #[serde(default)]
    doc: Option<usize>,
    #[serde(default)]
    sent: Option<usize>,
    #[serde(default)]
    span: Option<(usize, usize)>,
    #[serde(default)]
    token: Option<String>,
    vec: Vec<f64>,
}

fn load_sidecar(name: &str, path: &str, strict: bool) -> Result<EmbeddingSource, EmbedError> {
    let bad = |what: String| EmbedError::BadSidecar {
        path: path.to_string(),
        what,
    };
    let text = fs::read_to_string(Path::new(path))
        .map_err(|e| EmbedError::Io(path.to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == SIDECAR_VERSION => {}
        other => {
            return Err(bad(format!(
                "expected header {SIDECAR_VERSION:?}, found {:?}",
                other.map(|(_, l)| l).unwrap_or("")
            )))
        }
    }
    let mut spans: HashMap<SpanKey, Vec<f64>> = HashMap::new();
    let mut tokens: HashMap<(String, String), Vec<f64>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SidecarRecord = serde_json::from_str(line)
            .map_err(|e| bad(format!("line {lineno}: {e}")))?;
        match dim {
            None => dim = Some(rec.vec.len()),
            Some(d) if d != rec.vec.len() => {
                return Err(bad(format!(
                    "line {lineno}: {} values but earlier lines had {d}",
                    rec.vec.len()
                )))
            }
            _ => {}
        }
        match (rec.doc, rec.sent, rec.span, rec.token) {
            (Some(d), Some(s), Some((a, b)), None) => {
                spans.insert((rec.instance, d, s, a, b), rec.vec);
            }
            (None, None, None, Some(tok)) => {
                tokens.insert((rec.instance, normalize_token(&tok)), rec.vec);
            }
            _ => {
                return Err(bad(format!(
                    "line {lineno}: record must carry either doc/sent/span or token"
                )))
            }
        }
    }
    let dim = dim.ok_or_else(|| bad("sidecar has no entries".into()))?;
    Ok(EmbeddingSource {
        name: name.to_string(),
        dim,
        data: SourceData::Contextual {
            spans,
            tokens,
            strict,
        },
    })
}

/// An ordered set of sources; features are their concatenation.
pub struct Embedder {
    sources: Vec<EmbeddingSource>,
}

impl Embedder {
    pub fn new(sources: Vec<EmbeddingSource>) -> Result<Embedder, EmbedError> {
        if sources.is_empty() {
            return Err(EmbedError::BadSidecar {
                path: String::new(),
                what: "no embedding sources configured".into(),
            });
        }
        Ok(Embedder { sources })
    }

    pub fn from_specs(specs: &[EmbedSourceSpec]) -> Result<Embedder, EmbedError> {
        Embedder::new(
            specs
                .iter()
                .map(EmbeddingSource::load)
                .collect::<Result<_, _>>()?,
        )
    }

    pub fn sources(&self) -> &[EmbeddingSource] {
        &self.sources
    }

    pub fn total_dim(&self) -> usize {
        self.sources.iter().map(|s| s.dim).sum()
    }

    /// Start offset of each source's slice in the combined feature.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.sources.len());
        let mut acc = 0;
        for s in &self.sources {
            out.push(acc);
            acc += s.dim;
        }
        out
    }

    /// Concatenate one vector per source, validating lengths.
    pub fn combine(&self, parts: &[Vec<f64>]) -> Result<Vec<f64>, EmbedError> {
        if parts.len() != self.sources.len() {
            return Err(EmbedError::DimMismatch {
                source_name: "<combined>".into(),
                expected: self.sources.len(),
                got: parts.len(),
            });
        }
        let mut out = Vec::with_capacity(self.total_dim());
        for (src, part) in self.sources.iter().zip(parts) {
            if part.len() != src.dim {
                return Err(EmbedError::DimMismatch {
                    source_name: src.name.clone(),
                    expected: src.dim,
                    got: part.len(),
                });
            }
            out.extend_from_slice(part);
        }
        Ok(out)
    }

    /// Combined features for every node of a graph, rows in node order.
    pub fn node_features(
        &self,
        inst: &Instance,
        graph: &RelGraph,
    ) -> Result<Tensor, EmbedError> {
        let mut rows = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let parts: Vec<Vec<f64>> = self
                .sources
                .iter()
                .map(|src| self.node_part(src, inst, node))
                .collect::<Result<_, _>>()?;
            rows.push(self.combine(&parts)?);
        }
        Ok(Tensor::from_rows(&rows).expect("rows share total_dim"))
    }

    fn node_part(
        &self,
        src: &EmbeddingSource,
        inst: &Instance,
        node: &crate::graph::Node,
    ) -> Result<Vec<f64>, EmbedError> {
        if let Some(m) = &node.mention {
            let tokens = &inst.supports[m.doc][m.sentence][m.span.0..m.span.1];
            return src.span_vector(&inst.id, m.doc, m.sentence, m.span, tokens, &m.referent);
        }
        if let Some((d, s)) = node.sentence {
            let sent = &inst.supports[d][s];
            let referent = normalize_phrase(sent);
            return src.span_vector(&inst.id, d, s, (0, sent.len()), sent, &referent);
        }
        // Placeholder candidate: type-level vector for the candidate string.
        let ci = node
            .candidate_index
            .expect("placeholder nodes carry a candidate index");
        debug_assert_eq!(node.kind, NodeKind::Cand);
        let cand = &inst.candidates[ci];
        match &src.data {
            SourceData::Hash => {
                let toks: Vec<&str> = cand.split_whitespace().collect();
                Ok(hash_unit_vector(&normalize_phrase(&toks), src.dim))
            }
            _ => {
                let parts: Vec<Vec<f64>> = cand
                    .split_whitespace()
                    .map(|t| src.token_vector(&inst.id, t))
                    .collect::<Result<_, _>>()?;
                Ok(mean_of(parts.into_iter().map(Some), src.dim))
            }
        }
    }

    /// Combined features for the query tokens, one row per token.
    pub fn query_features(&self, inst: &Instance) -> Result<Tensor, EmbedError> {
        let toks = inst.query_tokens();
        let mut rows = Vec::with_capacity(toks.len());
        for t in &toks {
            let parts: Vec<Vec<f64>> = self
                .sources
                .iter()
                .map(|src| src.token_vector(&inst.id, t))
                .collect::<Result<_, _>>()?;
            rows.push(self.combine(&parts)?);
        }
        Ok(Tensor::from_rows(&rows).expect("rows share total_dim"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphConfig};
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, contents: &str) -> String {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path.to_string_lossy().into_owned()
    }

    fn hash_spec(name: &str, dim: usize) -> EmbedSourceSpec {
        EmbedSourceSpec::HashFallback {
            name: name.into(),
            dim,
        }
    }

    #[test]
    fn combine_concatenates_at_documented_offsets() {
        let embedder = Embedder::from_specs(&[
            hash_spec("s300", 300),
            hash_spec("s1024", 1024),
            hash_spec("s768", 768),
        ])
        .unwrap();
        assert_eq!(embedder.total_dim(), 2092);
        assert_eq!(embedder.offsets(), vec![0, 300, 1324]);
        let parts = vec![vec![1.0; 300], vec![2.0; 1024], vec![3.0; 768]];
        let combined = embedder.combine(&parts).unwrap();
        assert_eq!(combined.len(), 2092);
        // Slices recover the originals exactly.
        assert_eq!(&combined[0..300], &parts[0][..]);
        assert_eq!(&combined[300..1324], &parts[1][..]);
        assert_eq!(&combined[1324..2092], &parts[2][..]);
        // Wrong part length is rejected and names the source.
        let bad = embedder.combine(&[vec![0.0; 300], vec![0.0; 1000], vec![0.0; 768]]);
        match bad {
            Err(EmbedError::DimMismatch { source_name, expected, got }) => {
                assert_eq!(source_name, "s1024");
                assert_eq!((expected, got), (1024, 1000));
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn hash_vectors_are_unit_norm_and_deterministic() {
        let a = hash_unit_vector("european union", 64);
        let b = hash_unit_vector("european union", 64);
        let c = hash_unit_vector("european commission", 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert!((norm(&c) - 1.0).abs() < 1e-9);
        // Same referent at a different width is a different (still unit) vector.
        let d = hash_unit_vector("european union", 32);
        assert_eq!(d.len(), 32);
        assert!((norm(&d) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn static_table_means_over_spans_and_zeros_oov() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "table.txt",
            "hopgraph.embtable.v1\nAlpha 1.0 2.0\nbeta 3.0 5.0\n",
        );
        let spec = EmbedSourceSpec::StaticTable {
            name: "t".into(),
            path,
        };
        let src = EmbeddingSource::load(&spec).unwrap();
        assert_eq!(src.dim, 2);
        // Lookup is case-normalized.
        assert_eq!(src.token_vector("i", "ALPHA").unwrap(), vec![1.0, 2.0]);
        assert_eq!(src.token_vector("i", "gone").unwrap(), vec![0.0, 0.0]);
        // Mean over a two-token span: ((1,2)+(3,5))/2 = (2, 3.5).
        let toks = vec!["Alpha".to_string(), "Beta".to_string()];
        let v = src
            .span_vector("i", 0, 0, (0, 2), &toks, "alpha beta")
            .unwrap();
        assert_eq!(v, vec![2.0, 3.5]);
        // An OOV token inside a span contributes a zero vector to the mean.
        let toks = vec!["Alpha".to_string(), "gone".to_string()];
        let v = src
            .span_vector("i", 0, 0, (0, 2), &toks, "alpha gone")
            .unwrap();
        assert_eq!(v, vec![0.5, 1.0]);
    }

    #[test]
    fn static_table_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let load = |name: &str, contents: &str| {
            let path = write_file(&dir, name, contents);
            EmbeddingSource::load(&EmbedSourceSpec::StaticTable {
                name: "t".into(),
                path,
            })
        };
        // Mixed dimensions: error names line 3.
        match load("mixed.txt", "hopgraph.embtable.v1\na 1.0 2.0\nb 1.0\n") {
            Err(EmbedError::BadTable { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected BadTable, got {other:?}"),
        }
        // Unparsable number.
        match load("nan.txt", "hopgraph.embtable.v1\na 1.0 x\n") {
            Err(EmbedError::BadTable { line, what, .. }) => {
                assert_eq!(line, 2);
                assert!(what.contains("\"x\""));
            }
            other => panic!("expected BadTable, got {other:?}"),
        }
        // Missing header.
        assert!(load("hdr.txt", "a 1.0\n").is_err());
        // Missing file.
        assert!(EmbeddingSource::load(&EmbedSourceSpec::StaticTable {
            name: "t".into(),
            path: dir.path().join("absent.txt").to_string_lossy().into_owned(),
        })
        .is_err());
    }

    #[test]
    fn sidecar_serves_span_and_token_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "side.jsonl",
            concat!(
                "hopgraph.sidecar.v1\n",
                r#"{"instance":"i1","doc":0,"sent":1,"span":[2,4],"vec":[1.0,0.0,0.0]}"#,
                "\n",
                r#"{"instance":"i1","token":"alpha","vec":[0.0,1.0,0.0]}"#,
                "\n",
            ),
        );
        let strict = EmbeddingSource::load(&EmbedSourceSpec::ContextualFile {
            name: "ctx".into(),
            path: path.clone(),
            strict: true,
        })
        .unwrap();
        assert_eq!(strict.dim, 3);
        let toks = vec!["x".to_string(), "y".to_string()];
        assert_eq!(
            strict.span_vector("i1", 0, 1, (2, 4), &toks, "x y").unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            strict.token_vector("i1", "Alpha").unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        // Strict mode: the error names the exact missing key.
        match strict.span_vector("i1", 0, 1, (2, 5), &toks, "x y") {
            Err(EmbedError::MissingContextual { source_name, key }) => {
                assert_eq!(source_name, "ctx");
                assert_eq!(key, "instance \"i1\" doc 0 sent 1 span [2, 5)");
            }
            other => panic!("expected MissingContextual, got {other:?}"),
        }
        match strict.token_vector("i2", "alpha") {
            Err(EmbedError::MissingContextual { key, .. }) => {
                assert_eq!(key, "instance \"i2\" token \"alpha\"");
            }
            other => panic!("expected MissingContextual, got {other:?}"),
        }
        // Lenient mode returns zeros instead.
        let lenient = EmbeddingSource::load(&EmbedSourceSpec::ContextualFile {
            name: "ctx".into(),
            path,
            strict: false,
        })
        .unwrap();
        assert_eq!(
            lenient.span_vector("i1", 0, 1, (2, 5), &toks, "x y").unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn sidecar_rejects_ambiguous_and_mixed_dim_records() {
        let dir = tempfile::tempdir().unwrap();
        let load = |name: &str, contents: &str| {
            let path = write_file(&dir, name, contents);
            EmbeddingSource::load(&EmbedSourceSpec::ContextualFile {
                name: "ctx".into(),
                path,
                strict: false,
            })
        };
        let mixed = concat!(
            "hopgraph.sidecar.v1\n",
            r#"{"instance":"i","token":"a","vec":[1.0]}"#,
            "\n",
            r#"{"instance":"i","token":"b","vec":[1.0,2.0]}"#,
            "\n",
        );
        assert!(matches!(
            load("mixed.jsonl", mixed),
            Err(EmbedError::BadSidecar { .. })
        ));
        let ambiguous = concat!(
            "hopgraph.sidecar.v1\n",
            r#"{"instance":"i","doc":0,"token":"a","vec":[1.0]}"#,
            "\n",
        );
        assert!(load("ambiguous.jsonl", ambiguous).is_err());
        assert!(load("empty.jsonl", "hopgraph.sidecar.v1\n").is_err());
    }

    #[test]
    fn node_and_query_features_cover_every_node_kind() {
        let inst: Instance = serde_json::from_str(
            r#"{"id":"e1","query":"r Alpha","candidates":["Beta","Missing"],
                "supports":[
                    [["Alpha", "visited", "Gamma"]],
                    [["Gamma", "borders", "Beta"]]
                ],
                "answer":"Beta"}"#,
        )
        .unwrap();
        let cfg = GraphConfig {
            use_reasoning: true,
            use_sentences: true,
            ..GraphConfig::default()
        };
        let graph = build_graph(&inst, &cfg).unwrap();
        let embedder = Embedder::from_specs(&[hash_spec("h", 8)]).unwrap();
        let h0 = embedder.node_features(&inst, &graph).unwrap();
        assert_eq!(h0.shape(), &[graph.nodes.len(), 8]);
        // Mention rows equal the hash of their referent; the placeholder row
        // equals the hash of the unmentioned candidate string.
        for (i, node) in graph.nodes.iter().enumerate() {
            let expect = match (&node.mention, node.sentence) {
                (Some(m), _) => hash_unit_vector(&m.referent, 8),
                (None, Some((d, s))) => {
                    hash_unit_vector(&normalize_phrase(&inst.supports[d][s]), 8)
                }
                (None, None) => hash_unit_vector("missing", 8),
            };
            assert_eq!(h0.row_slice(i), &expect[..]);
        }
        let q = embedder.query_features(&inst).unwrap();
        assert_eq!(q.shape(), &[2, 8]);
        assert_eq!(q.row_slice(0), &hash_unit_vector("r", 8)[..]);
        assert_eq!(q.row_slice(1), &hash_unit_vector("alpha", 8)[..]);
    }
}
