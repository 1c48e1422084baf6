//! Interprocedural context for repository-level detection.
//!
//! Callers and callees of a target function come from an external
//! call-graph tool as a line-delimited candidate file. The most similar
//! candidates are kept and serialized around the target as
//!
//! ```text
//! [Caller Context]
//! <signature>
//! <body>
//!
//! [Target Function]
//! <code>
//!
//! [Callee Context]
//! (none)
//! ```
//!
//! The result replaces the sample's code, so agents need no special handling.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::{read_records, JsonlError};
use crate::model::CodeSample;
use crate::retrieval::{cosine_sim, embed, Embedder, RetrievalError};

pub const DEFAULT_CONTEXT_K: usize = 5;
pub const CALLER_MARKER: &str = "[Caller Context]";
pub const TARGET_MARKER: &str = "[Target Function]";
pub const CALLEE_MARKER: &str = "[Callee Context]";
pub const EMPTY_SECTION: &str = "(none)";

#[derive(Debug, thiserror::Error)]
pub enum ContextError {
    #[error("function signature is empty")]
    EmptySignature,
    #[error("function `{0}` has an empty body but is not declaration-only")]
    EmptyBody(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Parse(#[from] JsonlError),
    #[error("duplicate candidate record for target `{0}`")]
    DuplicateTarget(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFunction")]
pub struct ContextFunction {
    signature: String,
    body: String,
    declaration_only: bool,
}

#[derive(Deserialize)]
struct RawFunction {
    signature: String,
    #[serde(default)]
    body: String,
    #[serde(default)]
    declaration_only: bool,
}

impl TryFrom<RawFunction> for ContextFunction {
    type Error = ContextError;

    fn try_from(raw: RawFunction) -> Result<Self, Self::Error> {
        ContextFunction::new(raw.signature, raw.body, raw.declaration_only)
    }
}

impl ContextFunction {
    pub fn new(
        signature: impl Into<String>,
        body: impl Into<String>,
        declaration_only: bool,
    ) -> Result<Self, ContextError> {
        let signature = signature.into();
        let body = body.into();
        if signature.trim().is_empty() {
            return Err(ContextError::EmptySignature);
        }
        if body.trim().is_empty() && !declaration_only {
            return Err(ContextError::EmptyBody(signature));
        }
        Ok(Self {
            signature,
            body,
            declaration_only,
        })
    }

    pub fn signature(&self) -> &str {
        &self.signature
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn declaration_only(&self) -> bool {
        self.declaration_only
    }

    /// Text compared against the target when ranking candidates.
    pub fn similarity_text(&self) -> String {
        if self.body.trim().is_empty() {
            self.signature.clone()
        } else {
            format!("{}\n{}", self.signature, self.body)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionContext {
    pub target: CodeSample,
    pub callers: Vec<ContextFunction>,
    pub callees: Vec<ContextFunction>,
}

impl FunctionContext {
    pub fn target_only(target: CodeSample) -> Self {
        Self {
            target,
            callers: Vec::new(),
            callees: Vec::new(),
        }
    }
}

fn most_similar(
    target: &crate::retrieval::EmbeddingVector,
    candidates: Vec<ContextFunction>,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<ContextFunction>, ContextError> {
    let mut scored = candidates
        .into_iter()
        .map(|f| {
            let score = cosine_sim(target, &embed(&f.similarity_text(), embedder)?)?;
            Ok((score, f))
        })
        .collect::<Result<Vec<_>, ContextError>>()?;
    // Stable: equal scores keep candidate order.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("cosine is finite"));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(_, f)| f).collect())
}

/// Keeps the `k` callers and `k` callees most similar to the target, each
/// list in descending similarity.
pub fn select_context(
    ctx: FunctionContext,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<FunctionContext, ContextError> {
    if ctx.callers.is_empty() && ctx.callees.is_empty() {
        return Ok(ctx);
    }
    let target = embed(&ctx.target.code, embedder)?;
    Ok(FunctionContext {
        callers: most_similar(&target, ctx.callers, embedder, k)?,
        callees: most_similar(&target, ctx.callees, embedder, k)?,
        target: ctx.target,
    })
}

fn section(marker: &str, functions: &[ContextFunction]) -> String {
    if functions.is_empty() {
        return format!("{marker}\n{EMPTY_SECTION}");
    }
    let entries: Vec<String> = functions
        .iter()
        .map(|f| {
            if f.body.trim().is_empty() {
                f.signature.trim_end().to_owned()
            } else {
                format!("{}\n{}", f.signature.trim_end(), f.body.trim_end())
            }
        })
        .collect();
    format!("{marker}\n{}", entries.join("\n\n"))
}

/// Callers, then the target, then callees, each under its marker. Empty
/// sections read `(none)`. The text ends with a single newline.
pub fn serialize_context(ctx: &FunctionContext) -> String {
    format!(
        "{}\n\n{TARGET_MARKER}\n{}\n\n{}\n",
        section(CALLER_MARKER, &ctx.callers),
        ctx.target.code.trim_end(),
        section(CALLEE_MARKER, &ctx.callees),
    )
}

/// Selects and serializes context, returning a sample whose code is the
/// serialized form. Identity, label and pairing are kept.
pub fn contextualize(
    ctx: FunctionContext,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<CodeSample, ContextError> {
    let selected = select_context(ctx, embedder, k)?;
    let code = serialize_context(&selected);
    Ok(CodeSample {
        code,
        ..selected.target
    })
}

/// One line of the candidate file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub target_id: String,
    #[serde(default)]
    pub callers: Vec<ContextFunction>,
    #[serde(default)]
    pub callees: Vec<ContextFunction>,
}

/// Candidate records keyed by target id.
pub fn load_candidates(path: &Path) -> Result<HashMap<String, CandidateRecord>, ContextError> {
    let mut out = HashMap::new();
    for (_, record) in read_records::<CandidateRecord>(path)? {
        if out.contains_key(&record.target_id) {
            return Err(ContextError::DuplicateTarget(record.target_id));
        }
        out.insert(record.target_id.clone(), record);
    }
    Ok(out)
}

/// Applies context to every sample; samples without a candidate record get
/// a target-only context.
pub fn contextualize_all(
    samples: &[CodeSample],
    candidates: &HashMap<String, CandidateRecord>,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<CodeSample>, ContextError> {
    samples
        .iter()
        .map(|s| {
            let ctx = match candidates.get(&s.id) {
                Some(c) => FunctionContext {
                    target: s.clone(),
                    callers: c.callers.clone(),
                    callees: c.callees.clone(),
                },
                None => FunctionContext::target_only(s.clone()),
            };
            contextualize(ctx, embedder, k)
        })
        .collect()
}
