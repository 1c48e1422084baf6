//! The three reasoning agents.
//!
//! [`run_agent`] performs the independent analysis of one paradigm:
//! retrieval (top-5 rules, the single most similar vulnerability/fix pair, or
//! nothing), prompt construction, generation and verdict parsing.
//! [`deliberate`] produces the agent's output for a debate round from its own
//! history and its peers' previous-round outputs.

pub mod prompt;
pub mod template;
pub mod verdict;

use std::sync::Arc;

use crate::backend::{generate, Backend, BackendError, ChatMessage, GenerationConfig};
use crate::knowledge::{DeductiveEntry, DeductiveKnowledge, InductiveKnowledge, KnowledgeError};
use crate::model::{AgentOutput, CodeSample, ModelError, Paradigm, Verdict};
use crate::retrieval::{embed, Embedder, RetrievalError};

pub use prompt::{
    build_abductive_prompt, build_debate_prompt, build_deductive_prompt, build_inductive_prompt,
    Knowledge, Phase, Prompt, MAX_RULES,
};
pub use template::{TemplateError, TemplateSet};
pub use verdict::{missing_abductive_sections, parse_verdict, Unparseable};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Everything the agents need: knowledge bases, embedder, templates,
/// sampling settings and one backend per paradigm.
#[derive(Clone)]
pub struct AgentBundle {
    pub deductive: Arc<DeductiveKnowledge>,
    pub inductive: Arc<InductiveKnowledge>,
    pub embedder: Arc<dyn Embedder>,
    pub templates: Arc<TemplateSet>,
    pub generation: GenerationConfig,
    backends: [Arc<dyn Backend>; 3],
}

impl AgentBundle {
    pub fn new(
        deductive: Arc<DeductiveKnowledge>,
        inductive: Arc<InductiveKnowledge>,
        embedder: Arc<dyn Embedder>,
        backends: [Arc<dyn Backend>; 3],
    ) -> Self {
        Self {
            deductive,
            inductive,
            embedder,
            templates: Arc::new(TemplateSet::builtin()),
            generation: GenerationConfig::default(),
            backends,
        }
    }

    /// Same backend for all three agents.
    pub fn with_shared_backend(
        deductive: Arc<DeductiveKnowledge>,
        inductive: Arc<InductiveKnowledge>,
        embedder: Arc<dyn Embedder>,
        backend: Arc<dyn Backend>,
    ) -> Self {
        Self::new(
            deductive,
            inductive,
            embedder,
            [backend.clone(), backend.clone(), backend],
        )
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn with_generation(mut self, generation: GenerationConfig) -> Self {
        self.generation = generation;
        self
    }

    pub fn backend(&self, paradigm: Paradigm) -> &Arc<dyn Backend> {
        &self.backends[paradigm.index()]
    }

    pub fn backend_ids(&self) -> [String; 3] {
        Paradigm::ALL.map(|p| self.backend(p).id().to_owned())
    }
}

enum OwnedKnowledge<'a> {
    Rules(Vec<&'a DeductiveEntry>),
    Example(&'a crate::knowledge::InductivePair),
    Intrinsic,
}

impl<'a> OwnedKnowledge<'a> {
    fn view(&self) -> Knowledge<'_> {
        match self {
            OwnedKnowledge::Rules(r) => Knowledge::Rules(r),
            OwnedKnowledge::Example(p) => Knowledge::Example(p),
            OwnedKnowledge::Intrinsic => Knowledge::Intrinsic,
        }
    }
}

fn retrieve<'a>(
    paradigm: Paradigm,
    sample: &CodeSample,
    bundle: &'a AgentBundle,
) -> Result<OwnedKnowledge<'a>, AgentError> {
    Ok(match paradigm {
        Paradigm::Deductive => {
            let query = embed(&sample.code, &*bundle.embedder)?;
            let hits = bundle.deductive.retrieve(&query, MAX_RULES)?;
            OwnedKnowledge::Rules(hits.into_iter().map(|(e, _)| e).collect())
        }
        Paradigm::Inductive => {
            let query = embed(&sample.code, &*bundle.embedder)?;
            OwnedKnowledge::Example(bundle.inductive.most_similar(&query)?.0)
        }
        Paradigm::Abductive => OwnedKnowledge::Intrinsic,
    })
}

/// Knowledge cited in the agent's round-0 output, re-resolved for debate.
fn recall<'a>(
    paradigm: Paradigm,
    first: &AgentOutput,
    bundle: &'a AgentBundle,
) -> Result<OwnedKnowledge<'a>, AgentError> {
    let missing = |id: &str| {
        AgentError::Precondition(format!(
            "cited entry {id:?} is not in the {paradigm} knowledge base"
        ))
    };
    Ok(match paradigm {
        Paradigm::Deductive => OwnedKnowledge::Rules(
            first
                .retrieved_refs
                .iter()
                .map(|id| bundle.deductive.get(id).ok_or_else(|| missing(id)))
                .collect::<Result<_, _>>()?,
        ),
        Paradigm::Inductive => {
            let id = first
                .retrieved_refs
                .first()
                .ok_or_else(|| AgentError::Precondition("inductive output cites no pair".into()))?;
            OwnedKnowledge::Example(bundle.inductive.get(id).ok_or_else(|| missing(id))?)
        }
        Paradigm::Abductive => OwnedKnowledge::Intrinsic,
    })
}

/// Sends the prompt and parses the verdict, re-asking once with a reminder
/// if no verdict line is found. A second failure yields a benign verdict with
/// `parse_recovered` set.
fn ask(
    backend: &dyn Backend,
    prompt: &Prompt,
    bundle: &AgentBundle,
) -> Result<(Verdict, String, bool), AgentError> {
    let request = prompt.to_request(&bundle.generation);
    let first = generate(backend, &request)?;
    if prompt.paradigm == Paradigm::Abductive && prompt.phase == Phase::Independent {
        let missing = missing_abductive_sections(&first.text);
        if !missing.is_empty() {
            tracing::debug!(?missing, "abductive response lacks required sections");
        }
    }
    if let Ok((verdict, explanation)) = parse_verdict(&first.text) {
        return Ok((verdict, explanation, false));
    }
    let mut retry = request.clone();
    retry.messages.push(ChatMessage::assistant(first.text));
    retry
        .messages
        .push(ChatMessage::user(bundle.templates.render("reminder", &[])?));
    let second = generate(backend, &retry)?;
    match parse_verdict(&second.text) {
        Ok((verdict, explanation)) => Ok((verdict, explanation, true)),
        Err(Unparseable) => {
            tracing::warn!(
                paradigm = %prompt.paradigm,
                "no verdict line after reminder; defaulting to benign"
            );
            Ok((Verdict::Benign, second.text.trim().to_owned(), true))
        }
    }
}

/// Independent analysis (round 0) for one paradigm.
pub fn run_agent(
    paradigm: Paradigm,
    sample: &CodeSample,
    bundle: &AgentBundle,
) -> Result<AgentOutput, AgentError> {
    let knowledge = retrieve(paradigm, sample, bundle)?;
    let prompt = prompt::build_independent_prompt(&bundle.templates, sample, &knowledge.view())?;
    let (verdict, explanation, recovered) =
        ask(bundle.backend(paradigm).as_ref(), &prompt, bundle)?;
    Ok(AgentOutput::new(
        paradigm,
        0,
        verdict,
        explanation,
        prompt.cited_entry_ids,
        recovered,
    )?)
}

fn check_debate_inputs(
    paradigm: Paradigm,
    own_history: &[AgentOutput],
    peer_latest: &[AgentOutput],
) -> Result<(), AgentError> {
    let fail = |m: String| Err(AgentError::Precondition(m));
    if own_history.is_empty() {
        return fail("own history is empty".into());
    }
    for (i, o) in own_history.iter().enumerate() {
        if o.paradigm != paradigm || o.round != i as u32 {
            return fail(format!(
                "own history entry {i} is {} round {}, expected {paradigm} round {i}",
                o.paradigm, o.round
            ));
        }
    }
    let previous = own_history.len() as u32 - 1;
    let mut peers: Vec<Paradigm> = peer_latest.iter().map(|o| o.paradigm).collect();
    peers.sort();
    if peers != paradigm.peers() {
        return fail(format!(
            "peer outputs must come from {:?}, got {peers:?}",
            paradigm.peers()
        ));
    }
    if let Some(o) = peer_latest.iter().find(|o| o.round != previous) {
        return fail(format!(
            "peer {} output is from round {}, expected round {previous}",
            o.paradigm, o.round
        ));
    }
    Ok(())
}

/// Debate deliberation for round `own_history.len()`.
///
/// The prompt carries the sample, the knowledge cited at round 0, every
/// earlier output of this agent and the two peers' previous-round outputs.
pub fn deliberate(
    paradigm: Paradigm,
    sample: &CodeSample,
    bundle: &AgentBundle,
    own_history: &[AgentOutput],
    peer_latest: &[AgentOutput],
) -> Result<AgentOutput, AgentError> {
    check_debate_inputs(paradigm, own_history, peer_latest)?;
    let knowledge = recall(paradigm, &own_history[0], bundle)?;
    let mut peers: Vec<&AgentOutput> = peer_latest.iter().collect();
    peers.sort_by_key(|o| o.paradigm);
    let prompt = build_debate_prompt(
        &bundle.templates,
        sample,
        &knowledge.view(),
        own_history,
        &peers,
    )?;
    let (verdict, explanation, recovered) =
        ask(bundle.backend(paradigm).as_ref(), &prompt, bundle)?;
    Ok(AgentOutput::new(
        paradigm,
        own_history.len() as u32,
        verdict,
        explanation,
        prompt.cited_entry_ids,
        recovered,
    )?)
}

#[cfg(test)]
pub(crate) mod testkit {
    use super::*;
    use crate::knowledge::InductivePair;
    use crate::model::Label;
    use crate::retrieval::HashEmbedder;

    pub fn rules() -> Vec<DeductiveEntry> {
        [
            (
                "MEM30-C",
                "Accessing freed memory corrupts heap data structures.",
            ),
            ("MEM31-C", "Memory that is never freed leaks resources."),
            (
                "STR31-C",
                "Copying strings without bounds overflows the destination buffer.",
            ),
            (
                "ARR30-C",
                "Indexing arrays out of range reads or writes adjacent memory.",
            ),
            (
                "INT30-C",
                "Unsigned arithmetic wraps around and yields small sizes.",
            ),
            (
                "EXP34-C",
                "Dereferencing null pointers crashes the program.",
            ),
            (
                "FIO30-C",
                "Format strings built from user input allow memory disclosure.",
            ),
        ]
        .iter()
        .map(|(id, d)| DeductiveEntry {
            entry_id: (*id).into(),
            description: (*d).into(),
            rule: format!("{id}. rule text for {id}"),
        })
        .collect()
    }

    pub fn pairs() -> Vec<InductivePair> {
        vec![
            InductivePair {
                pair_id: "hist-1".into(),
                vuln_code: "void g(char *s) { char b[8]; strcpy(b, s); }".into(),
                fix_code: "void g(char *s) { char b[8]; strncpy(b, s, 7); b[7] = 0; }".into(),
                origin: "test".into(),
            },
            InductivePair {
                pair_id: "hist-2".into(),
                vuln_code: "void h(struct o *p) { free(p); p->n = 0; }".into(),
                fix_code: "void h(struct o *p) { p->n = 0; free(p); }".into(),
                origin: "test".into(),
            },
        ]
    }

    pub fn bundle(backend: Arc<dyn Backend>) -> AgentBundle {
        let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::default());
        let d = DeductiveKnowledge::build(rules(), &*embedder).unwrap();
        let i = InductiveKnowledge::build(pairs(), &*embedder).unwrap();
        AgentBundle::with_shared_backend(Arc::new(d), Arc::new(i), embedder, backend)
    }

    pub fn sample() -> CodeSample {
        CodeSample {
            id: "s1".into(),
            code: "void f(char *in) { char buf[16]; strcpy(buf, in); }".into(),
            label: Label::Vulnerable,
            pair_id: None,
            cwe_ids: vec!["CWE-787".into()],
            language_hint: "C".into(),
        }
    }
}
