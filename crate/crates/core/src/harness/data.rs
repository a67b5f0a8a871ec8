//! Dataset files and the synthetic multihop task generator.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::graph::Instance;
use crate::util::keyed_rng;

/// Read a line-delimited JSON dataset; every record is validated. Bad
/// records are rejected with their line number; an empty file is legal but
/// warned about.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (ix, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // Deserialization runs full instance validation.
        let inst: Instance = serde_json::from_str(&line).map_err(|e| DataError::BadRecord {
            path: path.display().to_string(),
            line: ix + 1,
            what: e.to_string(),
        })?;
        out.push(inst);
    }
    if out.is_empty() {
        eprintln!("warning: {}: dataset is empty", path.display());
    }
    Ok(out)
}

/// Write instances as line-delimited JSON (the inverse of [`load_dataset`]).
pub fn save_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| DataError::json(path, e))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))?;
    Ok(())
}

/// Shape of a generated dataset.
///
/// Depth 1 plants the answer next to the query subject in one document.
/// Depth 2 plants it two documents away: the query document names a bridge
/// entity, and exactly one candidate document pairs that bridge with its
/// candidate. Every candidate gets a structurally identical document, so no
/// single document separates the answer from the distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    /// Documents per instance; the first is the query document, the next
    /// `n_candidates` belong to the candidates, the rest are pure filler.
    pub n_docs: usize,
    pub n_candidates: usize,
    /// 1 or 2.
    pub hop_depth: u8,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_instances == 0 {
            return Err(DataError::BadSyntheticSpec(
                "n_instances must be >= 1".into(),
            ));
        }
        if self.n_candidates < 2 {
            return Err(DataError::BadSyntheticSpec(
                "n_candidates must be >= 2".into(),
            ));
        }
        if !matches!(self.hop_depth, 1 | 2) {
            return Err(DataError::BadSyntheticSpec(format!(
                "hop_depth must be 1 or 2, got {}",
                self.hop_depth
            )));
        }
        if self.n_docs < self.n_candidates + 1 {
            return Err(DataError::BadSyntheticSpec(format!(
                "need at least {} documents (query + one per candidate), got {}",
                self.n_candidates + 1,
                self.n_docs
            )));
        }
        let needed = self.entities_needed();
        let vocab = entity_vocab_len();
        if needed > vocab {
            return Err(DataError::BadSyntheticSpec(format!(
                "instance needs {needed} distinct entities; built-in vocabulary has {vocab}"
            )));
        }
        Ok(())
    }

    fn entities_needed(&self) -> usize {
        match self.hop_depth {
            // Subject + one bridge per candidate + the candidates.
            2 => 2 * self.n_candidates + 1,
            _ => self.n_candidates + 1,
        }
    }
}

const ONSETS: [&str; 20] = [
    "Bral", "Crin", "Dorv", "Felm", "Gast", "Harn", "Jolk", "Kemb", "Lurd", "Morv",
    "Nast", "Olph", "Prell", "Quorn", "Ralv", "Sker", "Tulm", "Ulzen", "Varn", "Welg",
];
const SUFFIXES: [&str; 20] = [
    "ia", "or", "eth", "und", "ara", "ost", "ive", "ank", "oss", "ume",
    "edo", "arn", "ilt", "ough", "ay", "ert", "ino", "usk", "ola", "emm",
];

const FILLERS: [&str; 24] = [
    "the", "old", "road", "runs", "past", "quiet", "fields", "and", "low", "stone",
    "walls", "near", "a", "small", "market", "where", "traders", "rest", "by", "early",
    "light", "every", "spring", "morning",
];

const RELATIONS: [&str; 6] = [
    "located_in",
    "member_of",
    "created_by",
    "adjacent_to",
    "led_by",
    "part_of",
];

fn entity_vocab_len() -> usize {
    ONSETS.len() * SUFFIXES.len()
}

fn entity(ix: usize) -> String {
    format!("{}{}", ONSETS[ix / SUFFIXES.len()], SUFFIXES[ix % SUFFIXES.len()])
}

/// Distinct indices into the entity vocabulary.
fn sample_distinct(rng: &mut impl Rng, count: usize, extent: usize) -> Vec<usize> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let pick = rng.random_range(0..extent);
        if seen.insert(pick) {
            out.push(pick);
        }
    }
    out
}

fn filler_sentence(rng: &mut impl Rng) -> Vec<String> {
    let len = rng.random_range(3..=6);
    (0..len)
        .map(|_| FILLERS[rng.random_range(0..FILLERS.len())].to_string())
        .collect()
}

/// `[a, filler…, b]` with one or two lowercase tokens between the entities,
/// so capitalized runs never merge.
fn pair_sentence(rng: &mut impl Rng, a: &str, b: &str) -> Vec<String> {
    let mut s = vec![a.to_string()];
    for _ in 0..rng.random_range(1..=2usize) {
        s.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
    }
    s.push(b.to_string());
    for _ in 0..rng.random_range(0..=2usize) {
        s.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
    }
    s
}

/// Generate a dataset, deterministic given the same settings and seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Instance>> {
    spec.validate()?;
    let k = spec.n_candidates;
    let mut out = Vec::with_capacity(spec.n_instances);
    for i in 0..spec.n_instances {
        let mut rng = keyed_rng(spec.seed, &format!("instance {i}"));
        let picks = sample_distinct(&mut rng, spec.entities_needed(), entity_vocab_len());
        let subject = entity(picks[0]);
        let candidates: Vec<String> = (0..k).map(|j| entity(picks[1 + j])).collect();
        let gold = rng.random_range(0..k);
        let relation = RELATIONS[rng.random_range(0..RELATIONS.len())];

        let mut supports: Vec<Vec<Vec<String>>> = Vec::with_capacity(spec.n_docs);
        match spec.hop_depth {
            1 => {
                // Query document pairs the subject with the answer...
                supports.push(vec![
                    filler_sentence(&mut rng),
                    pair_sentence(&mut rng, &subject, &candidates[gold]),
                ]);
                // ...and every candidate gets a solo document, so presence in
                // some document separates nothing.
                for cand in &candidates {
                    let mut sent = filler_sentence(&mut rng);
                    sent.insert(0, cand.clone());
                    supports.push(vec![filler_sentence(&mut rng), sent]);
                }
            }
            _ => {
                let bridges: Vec<String> = (0..k).map(|j| entity(picks[1 + k + j])).collect();
                // Query document names the gold bridge next to the subject.
                supports.push(vec![
                    filler_sentence(&mut rng),
                    pair_sentence(&mut rng, &subject, &bridges[gold]),
                ]);
                // Candidate document j pairs bridge j with candidate j; only
                // the gold bridge also occurs in the query document.
                for j in 0..k {
                    supports.push(vec![
                        filler_sentence(&mut rng),
                        pair_sentence(&mut rng, &bridges[j], &candidates[j]),
                    ]);
                }
            }
        }
        while supports.len() < spec.n_docs {
            supports.push(vec![filler_sentence(&mut rng), filler_sentence(&mut rng)]);
        }

        let inst = Instance {
            id: format!("synth{}-{i:04}", spec.hop_depth),
            query_relation: relation.to_string(),
            query_subject: subject,
            candidates: candidates.clone(),
            supports,
            answer: candidates[gold].clone(),
            ner_spans: Vec::new(),
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}
