//! Knowledge bases: coding rules for the deductive agent and historical
//! vulnerability/fix pairs for the inductive agent.
//!
//! Ingestion is strict: the first malformed or invalid record aborts with
//! its line number or entry id.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::model::CodeSample;
use crate::retrieval::{Embedder, EmbeddingVector, RetrievalError, RetrievalIndex};

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error(transparent)]
    Parse(#[from] JsonlError),
    #[error("entry {entry_id:?}: {reason}")]
    InvariantViolation { entry_id: String, reason: String },
    #[error("knowledge base is empty")]
    Empty,
    #[error("index entry {0:?} has no matching knowledge-base record")]
    UnknownIndexEntry(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// A flawed-behaviour description paired with the coding rule it violates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeductiveEntry {
    pub entry_id: String,
    pub description: String,
    pub rule: String,
}

#[derive(Deserialize)]
struct DeductiveRecord {
    #[serde(default)]
    entry_id: Option<String>,
    description: String,
    rule: String,
}

impl DeductiveEntry {
    /// The leading rule identifier, e.g. `MEM30-C`.
    pub fn rule_id(&self) -> &str {
        rule_identifier(&self.rule).unwrap_or(&self.rule)
    }
}

/// Extracts a leading `LETTERS digits -C` identifier from rule text.
pub fn rule_identifier(rule: &str) -> Option<&str> {
    let token = rule.split_whitespace().next()?;
    let token = token.trim_end_matches(['.', ':', ',', ';']);
    let body = token.strip_suffix("-C")?;
    let letters = body.chars().take_while(|c| c.is_ascii_uppercase()).count();
    let digits = &body[letters..];
    (letters > 0 && !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()))
        .then_some(token)
}

/// Reads a rules file. Entries without an explicit `entry_id` are keyed by
/// their rule identifier.
pub fn ingest_deductive(path: &Path) -> Result<Vec<DeductiveEntry>, KnowledgeError> {
    deductive_from_records(jsonl::read_records(path)?)
}

/// Parses rules-file content; `source` only labels parse errors.
pub fn parse_deductive(text: &str, source: &Path) -> Result<Vec<DeductiveEntry>, KnowledgeError> {
    deductive_from_records(jsonl::parse_records(text, source)?)
}

fn deductive_from_records(
    records: Vec<(usize, DeductiveRecord)>,
) -> Result<Vec<DeductiveEntry>, KnowledgeError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (_, rec) in records {
        let rule_id = rule_identifier(&rec.rule).map(str::to_owned);
        let entry_id = rec
            .entry_id
            .filter(|id| !id.trim().is_empty())
            .or_else(|| rule_id.clone())
            .unwrap_or_else(|| rec.rule.clone());
        let violation = |reason: &str| KnowledgeError::InvariantViolation {
            entry_id: entry_id.clone(),
            reason: reason.into(),
        };
        if rec.description.trim().is_empty() {
            return Err(violation("description is empty"));
        }
        if rec.rule.trim().is_empty() {
            return Err(violation("rule is empty"));
        }
        if rule_id.is_none() {
            return Err(violation("rule must start with an identifier like MEM30-C"));
        }
        if !seen.insert(entry_id.clone()) {
            return Err(violation("duplicate entry_id"));
        }
        out.push(DeductiveEntry {
            entry_id,
            description: rec.description,
            rule: rec.rule,
        });
    }
    Ok(out)
}

/// A historical vulnerable function and its patched version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductivePair {
    pub pair_id: String,
    pub vuln_code: String,
    pub fix_code: String,
    #[serde(default)]
    pub origin: String,
}

pub fn ingest_inductive(path: &Path) -> Result<Vec<InductivePair>, KnowledgeError> {
    inductive_from_records(jsonl::read_records(path)?)
}

pub fn parse_inductive(text: &str, source: &Path) -> Result<Vec<InductivePair>, KnowledgeError> {
    inductive_from_records(jsonl::parse_records(text, source)?)
}

fn inductive_from_records(
    records: Vec<(usize, InductivePair)>,
) -> Result<Vec<InductivePair>, KnowledgeError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (_, pair) in records {
        validate_pair(&pair)?;
        if !seen.insert(pair.pair_id.clone()) {
            return Err(KnowledgeError::InvariantViolation {
                entry_id: pair.pair_id,
                reason: "duplicate pair_id".into(),
            });
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn validate_pair(pair: &InductivePair) -> Result<(), KnowledgeError> {
    let violation = |reason: &str| KnowledgeError::InvariantViolation {
        entry_id: pair.pair_id.clone(),
        reason: reason.into(),
    };
    if pair.pair_id.trim().is_empty() {
        return Err(violation("pair_id is empty"));
    }
    if pair.vuln_code.trim().is_empty() || pair.fix_code.trim().is_empty() {
        return Err(violation("vuln_code and fix_code must be non-empty"));
    }
    if normalize_code(&pair.vuln_code) == normalize_code(&pair.fix_code) {
        return Err(violation(
            "vuln_code and fix_code are identical after normalization",
        ));
    }
    Ok(())
}

/// Strips C comments, collapses whitespace runs to one space, lowercases.
///
/// String and character literals are kept intact so `"//"` inside a literal
/// is not mistaken for a comment.
pub fn normalize_code(code: &str) -> String {
    #[derive(PartialEq)]
    enum State {
        Code,
        Line,
        Block,
        Str(char),
    }
    let mut stripped = String::with_capacity(code.len());
    let mut state = State::Code;
    let mut chars = code.chars().peekable();
    while let Some(c) = chars.next() {
        match state {
            State::Code => match (c, chars.peek()) {
                ('/', Some('/')) => {
                    chars.next();
                    state = State::Line;
                    stripped.push(' ');
                }
                ('/', Some('*')) => {
                    chars.next();
                    state = State::Block;
                    stripped.push(' ');
                }
                ('"' | '\'', _) => {
                    state = State::Str(c);
                    stripped.push(c);
                }
                _ => stripped.push(c),
            },
            State::Line => {
                if c == '\n' {
                    state = State::Code;
                    stripped.push('\n');
                }
            }
            State::Block => {
                if c == '*' && chars.peek() == Some(&'/') {
                    chars.next();
                    state = State::Code;
                }
            }
            State::Str(quote) => {
                stripped.push(c);
                if c == '\\' {
                    if let Some(next) = chars.next() {
                        stripped.push(next);
                    }
                } else if c == quote || c == '\n' {
                    state = State::Code;
                }
            }
        }
    }
    stripped
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn code_fingerprint(code: &str) -> String {
    crate::sha256_hex(normalize_code(code))
}

/// Coding rules plus an index over their descriptions.
#[derive(Debug, Clone)]
pub struct DeductiveKnowledge {
    entries: Vec<DeductiveEntry>,
    by_id: HashMap<String, usize>,
    index: RetrievalIndex,
}

/// Embeds each entry's description; rule text is never embedded.
pub fn build_deductive_index(
    entries: &[DeductiveEntry],
    embedder: &dyn Embedder,
) -> Result<RetrievalIndex, KnowledgeError> {
    if entries.is_empty() {
        return Err(KnowledgeError::Empty);
    }
    Ok(RetrievalIndex::build(
        entries
            .iter()
            .map(|e| (e.entry_id.as_str(), e.description.as_str())),
        embedder,
    )?)
}

/// Embeds each pair's vulnerable code; fixed code is never embedded.
pub fn build_inductive_index(
    pairs: &[InductivePair],
    embedder: &dyn Embedder,
) -> Result<RetrievalIndex, KnowledgeError> {
    if pairs.is_empty() {
        return Err(KnowledgeError::Empty);
    }
    Ok(RetrievalIndex::build(
        pairs
            .iter()
            .map(|p| (p.pair_id.as_str(), p.vuln_code.as_str())),
        embedder,
    )?)
}

/// Keeps the records present in `index`, in index order; errors if the index
/// names a record that does not exist.
fn align<T: Clone>(
    records: &[T],
    id_of: impl Fn(&T) -> &str,
    index: &RetrievalIndex,
) -> Result<(Vec<T>, HashMap<String, usize>), KnowledgeError> {
    let lookup: HashMap<&str, &T> = records.iter().map(|r| (id_of(r), r)).collect();
    let mut kept = Vec::with_capacity(index.len());
    let mut by_id = HashMap::with_capacity(index.len());
    for entry in index.entries() {
        let rec = lookup
            .get(entry.entry_id.as_str())
            .ok_or_else(|| KnowledgeError::UnknownIndexEntry(entry.entry_id.clone()))?;
        by_id.insert(entry.entry_id.clone(), kept.len());
        kept.push((*rec).clone());
    }
    if kept.is_empty() {
        return Err(KnowledgeError::Empty);
    }
    Ok((kept, by_id))
}

impl DeductiveKnowledge {
    pub fn build(
        entries: Vec<DeductiveEntry>,
        embedder: &dyn Embedder,
    ) -> Result<Self, KnowledgeError> {
        let index = build_deductive_index(&entries, embedder)?;
        Self::from_parts(&entries, index)
    }

    /// Pairs a previously persisted index with the entries it was built from.
    pub fn from_parts(
        entries: &[DeductiveEntry],
        index: RetrievalIndex,
    ) -> Result<Self, KnowledgeError> {
        let (entries, by_id) = align(entries, |e| e.entry_id.as_str(), &index)?;
        Ok(Self {
            entries,
            by_id,
            index,
        })
    }

    pub fn entries(&self) -> &[DeductiveEntry] {
        &self.entries
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }

    pub fn get(&self, entry_id: &str) -> Option<&DeductiveEntry> {
        self.by_id.get(entry_id).map(|&i| &self.entries[i])
    }

    pub fn retrieve(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<(&DeductiveEntry, f64)>, KnowledgeError> {
        Ok(self
            .index
            .top_k(query, k)?
            .into_iter()
            .map(|hit| (self.get(&hit.entry_id).expect("aligned index"), hit.score))
            .collect())
    }
}

/// Vulnerability/fix pairs plus an index over their vulnerable code.
#[derive(Debug, Clone)]
pub struct InductiveKnowledge {
    pairs: Vec<InductivePair>,
    by_id: HashMap<String, usize>,
    index: RetrievalIndex,
}

impl InductiveKnowledge {
    pub fn build(
        pairs: Vec<InductivePair>,
        embedder: &dyn Embedder,
    ) -> Result<Self, KnowledgeError> {
        let index = build_inductive_index(&pairs, embedder)?;
        Self::from_parts(&pairs, index)
    }

    /// Pairs a persisted index with the corpus. Pairs absent from the index
    /// (for instance removed by the leak filter) are dropped.
    pub fn from_parts(
        pairs: &[InductivePair],
        index: RetrievalIndex,
    ) -> Result<Self, KnowledgeError> {
        let (pairs, by_id) = align(pairs, |p| p.pair_id.as_str(), &index)?;
        Ok(Self {
            pairs,
            by_id,
            index,
        })
    }

    pub fn pairs(&self) -> &[InductivePair] {
        &self.pairs
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }

    pub fn get(&self, pair_id: &str) -> Option<&InductivePair> {
        self.by_id.get(pair_id).map(|&i| &self.pairs[i])
    }

    /// The single most similar historical case.
    pub fn most_similar(
        &self,
        query: &EmbeddingVector,
    ) -> Result<(&InductivePair, f64), KnowledgeError> {
        let hit = self
            .index
            .top_k(query, 1)?
            .into_iter()
            .next()
            .ok_or(KnowledgeError::Empty)?;
        Ok((self.get(&hit.entry_id).expect("aligned index"), hit.score))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSide {
    Vuln,
    Fix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakEvidence {
    pub eval_id: String,
    pub side: PairSide,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovedPair {
    pub pair: InductivePair,
    pub evidence: Vec<LeakEvidence>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeakFilterOutcome {
    pub kept: Vec<InductivePair>,
    pub removed: Vec<RemovedPair>,
}

/// One line of the leak audit file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakAuditRecord {
    pub pair_id: String,
    pub eval_id: String,
    pub side: PairSide,
}

impl LeakFilterOutcome {
    pub fn audit_records(&self) -> Vec<LeakAuditRecord> {
        self.removed
            .iter()
            .flat_map(|r| {
                r.evidence.iter().map(|e| LeakAuditRecord {
                    pair_id: r.pair.pair_id.clone(),
                    eval_id: e.eval_id.clone(),
                    side: e.side,
                })
            })
            .collect()
    }

    pub fn write_audit(&self, path: &Path) -> std::io::Result<()> {
        jsonl::write_records(path, &self.audit_records())
    }
}

/// Removes every pair whose vulnerable or fixed code equals some evaluation
/// sample's code after [`normalize_code`].
pub fn leak_filter(pairs: Vec<InductivePair>, eval_samples: &[CodeSample]) -> LeakFilterOutcome {
    let mut eval: HashMap<String, Vec<&str>> = HashMap::new();
    for s in eval_samples {
        eval.entry(code_fingerprint(&s.code))
            .or_default()
            .push(&s.id);
    }
    let mut out = LeakFilterOutcome::default();
    for pair in pairs {
        let mut evidence = Vec::new();
        for (side, code) in [
            (PairSide::Vuln, &pair.vuln_code),
            (PairSide::Fix, &pair.fix_code),
        ] {
            if let Some(ids) = eval.get(&code_fingerprint(code)) {
                evidence.extend(ids.iter().map(|id| LeakEvidence {
                    eval_id: (*id).to_owned(),
                    side,
                }));
            }
        }
        if evidence.is_empty() {
            out.kept.push(pair);
        } else {
            out.removed.push(RemovedPair { pair, evidence });
        }
    }
    out
}
