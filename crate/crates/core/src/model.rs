//! Domain types shared across the detector.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("sample {id:?}: code is empty")]
    EmptyCode { id: String },
    #[error("sample id is empty")]
    EmptyId,
    #[error("duplicate sample id {id:?}")]
    DuplicateId { id: String },
    #[error("sample {id:?}: unrecognised label {label}")]
    InvalidLabel { id: String, label: String },
    #[error("{paradigm} output for round {round} has an empty explanation")]
    EmptyExplanation { paradigm: Paradigm, round: u32 },
    #[error("{paradigm} output: retrieved_refs must be {expected}")]
    RefsMismatch {
        paradigm: Paradigm,
        expected: &'static str,
    },
    #[error("a default-after-max-rounds verdict must be benign")]
    DefaultMustBeBenign,
}

/// Ground truth for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Vulnerable,
    Benign,
    Unknown,
}

impl Label {
    pub fn verdict(self) -> Option<Verdict> {
        match self {
            Label::Vulnerable => Some(Verdict::Vulnerable),
            Label::Benign => Some(Verdict::Benign),
            Label::Unknown => None,
        }
    }
}

/// A function or program under analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    pub id: String,
    pub code: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default)]
    pub cwe_ids: Vec<String>,
    #[serde(default)]
    pub language_hint: String,
}

/// Loosely-typed sample record as found in input files.
///
/// `label` accepts `"vulnerable"`/`"benign"`/`"unknown"` (any case) or the
/// integers `1`/`0`; a missing label means unknown.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub code: String,
    #[serde(default)]
    pub label: Option<serde_json::Value>,
    #[serde(default)]
    pub pair_id: Option<String>,
    #[serde(default)]
    pub cwe_ids: Vec<String>,
    #[serde(default)]
    pub language_hint: Option<String>,
}

pub fn validate_sample(raw: SampleRecord) -> Result<CodeSample, ModelError> {
    if raw.id.trim().is_empty() {
        return Err(ModelError::EmptyId);
    }
    if raw.code.trim().is_empty() {
        return Err(ModelError::EmptyCode { id: raw.id });
    }
    let label = match &raw.label {
        None | Some(serde_json::Value::Null) => Label::Unknown,
        Some(value) => parse_label(value).ok_or_else(|| ModelError::InvalidLabel {
            id: raw.id.clone(),
            label: value.to_string(),
        })?,
    };
    Ok(CodeSample {
        id: raw.id,
        code: raw.code,
        label,
        pair_id: raw.pair_id.filter(|p| !p.trim().is_empty()),
        cwe_ids: raw.cwe_ids,
        language_hint: raw.language_hint.unwrap_or_default(),
    })
}

fn parse_label(value: &serde_json::Value) -> Option<Label> {
    match value {
        serde_json::Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "vulnerable" | "1" => Some(Label::Vulnerable),
            "benign" | "0" => Some(Label::Benign),
            "unknown" => Some(Label::Unknown),
            _ => None,
        },
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(1) => Some(Label::Vulnerable),
            Some(0) => Some(Label::Benign),
            _ => None,
        },
        serde_json::Value::Bool(b) => Some(if *b { Label::Vulnerable } else { Label::Benign }),
        _ => None,
    }
}

/// Validates a whole dataset, rejecting duplicate ids.
pub fn validate_samples(
    raws: impl IntoIterator<Item = SampleRecord>,
) -> Result<Vec<CodeSample>, ModelError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for raw in raws {
        let sample = validate_sample(raw)?;
        if !seen.insert(sample.id.clone()) {
            return Err(ModelError::DuplicateId { id: sample.id });
        }
        out.push(sample);
    }
    Ok(out)
}

/// Binary vulnerability judgment, persisted as `0` (benign) or `1`
/// (vulnerable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Benign,
    Vulnerable,
}

impl Verdict {
    pub fn as_u8(self) -> u8 {
        match self {
            Verdict::Benign => 0,
            Verdict::Vulnerable => 1,
        }
    }

    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 => Some(Verdict::Benign),
            1 => Some(Verdict::Vulnerable),
            _ => None,
        }
    }

    pub fn is_vulnerable(self) -> bool {
        self == Verdict::Vulnerable
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Verdict::Benign => "BENIGN",
            Verdict::Vulnerable => "VULNERABLE",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Verdict::from_u8(v)
            .ok_or_else(|| serde::de::Error::custom(format!("verdict must be 0 or 1, got {v}")))
    }
}

/// The three reasoning paradigms; every debate has exactly one agent each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Paradigm {
    Deductive,
    Inductive,
    Abductive,
}

impl Paradigm {
    /// Canonical order used for rounds, transcripts and synthesized reports.
    pub const ALL: [Paradigm; 3] = [
        Paradigm::Deductive,
        Paradigm::Inductive,
        Paradigm::Abductive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Deductive => "Deductive",
            Paradigm::Inductive => "Inductive",
            Paradigm::Abductive => "Abductive",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Paradigm::Deductive => 0,
            Paradigm::Inductive => 1,
            Paradigm::Abductive => 2,
        }
    }

    /// Whether this paradigm draws on an external knowledge base.
    pub fn uses_knowledge_base(self) -> bool {
        self != Paradigm::Abductive
    }

    pub fn peers(self) -> [Paradigm; 2] {
        match self {
            Paradigm::Deductive => [Paradigm::Inductive, Paradigm::Abductive],
            Paradigm::Inductive => [Paradigm::Deductive, Paradigm::Abductive],
            Paradigm::Abductive => [Paradigm::Deductive, Paradigm::Inductive],
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "deductive" | "d" => Ok(Paradigm::Deductive),
            "inductive" | "i" => Ok(Paradigm::Inductive),
            "abductive" | "a" => Ok(Paradigm::Abductive),
            other => Err(format!("unknown paradigm {other:?}")),
        }
    }
}

/// One agent's verdict and explanation for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AgentOutputRecord")]
pub struct AgentOutput {
    pub paradigm: Paradigm,
    /// 0 for the independent phase, `t` for debate round `t`.
    pub round: u32,
    pub verdict: Verdict,
    pub explanation: String,
    pub retrieved_refs: Vec<String>,
    pub parse_recovered: bool,
}

#[derive(Deserialize)]
struct AgentOutputRecord {
    paradigm: Paradigm,
    round: u32,
    verdict: Verdict,
    explanation: String,
    #[serde(default)]
    retrieved_refs: Vec<String>,
    #[serde(default)]
    parse_recovered: bool,
}

impl TryFrom<AgentOutputRecord> for AgentOutput {
    type Error = ModelError;

    fn try_from(r: AgentOutputRecord) -> Result<Self, Self::Error> {
        AgentOutput::new(
            r.paradigm,
            r.round,
            r.verdict,
            r.explanation,
            r.retrieved_refs,
            r.parse_recovered,
        )
    }
}

impl AgentOutput {
    pub fn new(
        paradigm: Paradigm,
        round: u32,
        verdict: Verdict,
        explanation: impl Into<String>,
        retrieved_refs: Vec<String>,
        parse_recovered: bool,
    ) -> Result<Self, ModelError> {
        let explanation = explanation.into();
        if explanation.trim().is_empty() {
            return Err(ModelError::EmptyExplanation { paradigm, round });
        }
        match (paradigm.uses_knowledge_base(), retrieved_refs.is_empty()) {
            (true, true) => {
                return Err(ModelError::RefsMismatch {
                    paradigm,
                    expected: "non-empty",
                })
            }
            (false, false) => {
                return Err(ModelError::RefsMismatch {
                    paradigm,
                    expected: "empty",
                })
            }
            _ => {}
        }
        Ok(Self {
            paradigm,
            round,
            verdict,
            explanation,
            retrieved_refs,
            parse_recovered,
        })
    }
}

/// Consensus check result after a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionState {
    Exit,
    Debate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalReason {
    UnanimousInitial,
    UnanimousAfterDebate {
        round: u32,
    },
    DefaultAfterMaxRounds,
    /// Plain majority over the independent verdicts; only produced when the
    /// debate is disabled (`t_max = 0`).
    MajorityVote,
}

impl fmt::Display for FinalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinalReason::UnanimousInitial => f.write_str("unanimous-initial"),
            FinalReason::UnanimousAfterDebate { round } => {
                write!(f, "unanimous-after-debate({round})")
            }
            FinalReason::DefaultAfterMaxRounds => f.write_str("default-after-max-rounds"),
            FinalReason::MajorityVote => f.write_str("majority-vote"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FinalVerdictRecord")]
pub struct FinalVerdict {
    pub verdict: Verdict,
    pub explanation: String,
    pub reason: FinalReason,
}

#[derive(Deserialize)]
struct FinalVerdictRecord {
    verdict: Verdict,
    explanation: String,
    reason: FinalReason,
}

impl TryFrom<FinalVerdictRecord> for FinalVerdict {
    type Error = ModelError;

    fn try_from(r: FinalVerdictRecord) -> Result<Self, Self::Error> {
        FinalVerdict::new(r.verdict, r.explanation, r.reason)
    }
}

impl FinalVerdict {
    pub fn new(
        verdict: Verdict,
        explanation: impl Into<String>,
        reason: FinalReason,
    ) -> Result<Self, ModelError> {
        if reason == FinalReason::DefaultAfterMaxRounds && verdict != Verdict::Benign {
            return Err(ModelError::DefaultMustBeBenign);
        }
        Ok(Self {
            verdict,
            explanation: explanation.into(),
            reason,
        })
    }

    /// The conservative fallback when the debate never converges.
    pub fn default_benign(explanation: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Benign,
            explanation: explanation.into(),
            reason: FinalReason::DefaultAfterMaxRounds,
        }
    }
}
