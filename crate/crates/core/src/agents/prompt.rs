//! Prompt construction for the three paradigms and for debate rounds.

use serde::{Deserialize, Serialize};

use super::template::{TemplateError, TemplateSet};
use super::AgentError;
use crate::backend::{ChatMessage, ChatRequest, GenerationConfig};
use crate::knowledge::{DeductiveEntry, InductivePair};
use crate::model::{AgentOutput, CodeSample, Paradigm};

/// Upper bound on rules cited by a deductive prompt.
pub const MAX_RULES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Independent,
    Debate { round: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub paradigm: Paradigm,
    pub phase: Phase,
    pub messages: Vec<ChatMessage>,
    pub cited_entry_ids: Vec<String>,
}

impl Prompt {
    pub fn to_request(&self, config: &GenerationConfig) -> ChatRequest {
        ChatRequest {
            messages: self.messages.clone(),
            config: config.clone(),
        }
    }

    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Paradigm-specific knowledge attached to a prompt.
#[derive(Debug, Clone, Copy)]
pub enum Knowledge<'a> {
    Rules(&'a [&'a DeductiveEntry]),
    Example(&'a InductivePair),
    Intrinsic,
}

impl Knowledge<'_> {
    pub fn paradigm(&self) -> Paradigm {
        match self {
            Knowledge::Rules(_) => Paradigm::Deductive,
            Knowledge::Example(_) => Paradigm::Inductive,
            Knowledge::Intrinsic => Paradigm::Abductive,
        }
    }

    pub fn cited_ids(&self) -> Vec<String> {
        match self {
            Knowledge::Rules(rules) => rules.iter().map(|r| r.entry_id.clone()).collect(),
            Knowledge::Example(pair) => vec![pair.pair_id.clone()],
            Knowledge::Intrinsic => Vec::new(),
        }
    }
}

fn system_template(paradigm: Paradigm) -> &'static str {
    match paradigm {
        Paradigm::Deductive => "deductive_system",
        Paradigm::Inductive => "inductive_system",
        Paradigm::Abductive => "abductive_system",
    }
}

fn method(paradigm: Paradigm) -> &'static str {
    match paradigm {
        Paradigm::Deductive => "check the code against the secure coding rules listed above and cite any rule that is violated.",
        Paradigm::Inductive => "compare the code with the historical vulnerable and patched example and decide whether the flawed pattern recurs.",
        Paradigm::Abductive => "hypothesise concrete attacks, trace them through the code, and critique whether each one is actually feasible.",
    }
}

fn format_rules(rules: &[&DeductiveEntry]) -> String {
    rules
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!(
                "{}. {}\n   Flawed behaviour: {}",
                i + 1,
                r.rule.trim(),
                r.description.trim()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_knowledge(knowledge: &Knowledge<'_>) -> String {
    match knowledge {
        Knowledge::Rules(rules) => format!("Secure coding rules:\n{}", format_rules(rules)),
        Knowledge::Example(pair) => format!(
            "Historical vulnerable version:\n```\n{}\n```\nHistorical patched version:\n```\n{}\n```",
            pair.vuln_code.trim_end(),
            pair.fix_code.trim_end()
        ),
        Knowledge::Intrinsic => "No external knowledge base; rely on your own understanding of software security and attack techniques.".into(),
    }
}

fn messages(
    templates: &TemplateSet,
    paradigm: Paradigm,
    user_template: &str,
    values: &[(&str, &str)],
) -> Result<Vec<ChatMessage>, TemplateError> {
    Ok(vec![
        ChatMessage::system(templates.render(system_template(paradigm), &[])?),
        ChatMessage::user(templates.render(user_template, values)?),
    ])
}

pub fn build_deductive_prompt(
    templates: &TemplateSet,
    sample: &CodeSample,
    rules: &[&DeductiveEntry],
) -> Result<Prompt, AgentError> {
    if rules.is_empty() || rules.len() > MAX_RULES {
        return Err(AgentError::Precondition(format!(
            "deductive prompt needs 1 to {MAX_RULES} rules, got {}",
            rules.len()
        )));
    }
    let rendered = format_rules(rules);
    Ok(Prompt {
        paradigm: Paradigm::Deductive,
        phase: Phase::Independent,
        messages: messages(
            templates,
            Paradigm::Deductive,
            "deductive",
            &[("rules", &rendered), ("code", &sample.code)],
        )?,
        cited_entry_ids: Knowledge::Rules(rules).cited_ids(),
    })
}

pub fn build_inductive_prompt(
    templates: &TemplateSet,
    sample: &CodeSample,
    pair: &InductivePair,
) -> Result<Prompt, AgentError> {
    Ok(Prompt {
        paradigm: Paradigm::Inductive,
        phase: Phase::Independent,
        messages: messages(
            templates,
            Paradigm::Inductive,
            "inductive",
            &[
                ("example_vuln", pair.vuln_code.trim_end()),
                ("example_fix", pair.fix_code.trim_end()),
                ("code", &sample.code),
            ],
        )?,
        cited_entry_ids: vec![pair.pair_id.clone()],
    })
}

pub fn build_abductive_prompt(
    templates: &TemplateSet,
    sample: &CodeSample,
) -> Result<Prompt, AgentError> {
    Ok(Prompt {
        paradigm: Paradigm::Abductive,
        phase: Phase::Independent,
        messages: messages(
            templates,
            Paradigm::Abductive,
            "abductive",
            &[("code", &sample.code)],
        )?,
        cited_entry_ids: Vec::new(),
    })
}

pub fn build_independent_prompt(
    templates: &TemplateSet,
    sample: &CodeSample,
    knowledge: &Knowledge<'_>,
) -> Result<Prompt, AgentError> {
    match knowledge {
        Knowledge::Rules(rules) => build_deductive_prompt(templates, sample, rules),
        Knowledge::Example(pair) => build_inductive_prompt(templates, sample, pair),
        Knowledge::Intrinsic => build_abductive_prompt(templates, sample),
    }
}

fn format_history(history: &[AgentOutput]) -> String {
    history
        .iter()
        .map(|o| {
            format!(
                "Round {}: your verdict was {}\n{}",
                o.round,
                o.verdict,
                o.explanation.trim()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn format_peers(peers: &[&AgentOutput]) -> String {
    peers
        .iter()
        .map(|o| {
            format!(
                "{} agent (round {}): verdict {}\nReasoning:\n{}",
                o.paradigm,
                o.round,
                o.verdict,
                o.explanation.trim()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Debate prompt for round `own_history.len()`: the agent's whole history
/// plus the peers' outputs from the previous round only.
///
/// Callers must have validated `own_history` and `peers` (see
/// [`super::deliberate`]).
pub fn build_debate_prompt(
    templates: &TemplateSet,
    sample: &CodeSample,
    knowledge: &Knowledge<'_>,
    own_history: &[AgentOutput],
    peers: &[&AgentOutput],
) -> Result<Prompt, AgentError> {
    let paradigm = knowledge.paradigm();
    let round = own_history.len() as u32;
    let round_text = round.to_string();
    let knowledge_text = format_knowledge(knowledge);
    let history_text = format_history(own_history);
    let peer_text = format_peers(peers);
    Ok(Prompt {
        paradigm,
        phase: Phase::Debate { round },
        messages: messages(
            templates,
            paradigm,
            "debate",
            &[
                ("round", &round_text),
                ("paradigm", paradigm.name()),
                ("code", &sample.code),
                ("knowledge", &knowledge_text),
                ("own_history", &history_text),
                ("peer_outputs", &peer_text),
                ("method", method(paradigm)),
            ],
        )?,
        cited_entry_ids: knowledge.cited_ids(),
    })
}
