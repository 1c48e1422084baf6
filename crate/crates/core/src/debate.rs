//! Two-stage detection: independent analysis by all three agents, then up to
//! `t_max` parallel debate rounds until the verdicts are unanimous.
//!
//! A debate that never converges ends with a benign verdict. With
//! `t_max = 0` the debate is skipped and a plain majority over the
//! independent verdicts decides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::agents::{deliberate, run_agent, AgentBundle, AgentError};
use crate::backend::{generate, Backend, ChatMessage, ChatRequest};
use crate::model::{
    AgentOutput, CodeSample, FinalReason, FinalVerdict, Paradigm, TransitionState, Verdict,
};

pub const DEFAULT_T_MAX: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DebateError {
    #[error("expected 3 outputs, got {0}")]
    WrongCount(usize),
    #[error("outputs come from different rounds")]
    MixedRounds,
    #[error("no output from the {0} agent")]
    MissingParadigm(Paradigm),
    #[error("verdicts are not unanimous")]
    NotUnanimous,
    #[error("transcript invariant violated: {0}")]
    InvalidTranscript(String),
}

/// `Exit` when all three verdicts agree, `Debate` otherwise.
pub fn check_consensus(outputs: &[AgentOutput]) -> Result<TransitionState, DebateError> {
    if outputs.len() != 3 {
        return Err(DebateError::WrongCount(outputs.len()));
    }
    for p in Paradigm::ALL {
        if !outputs.iter().any(|o| o.paradigm == p) {
            return Err(DebateError::MissingParadigm(p));
        }
    }
    if outputs.iter().any(|o| o.round != outputs[0].round) {
        return Err(DebateError::MixedRounds);
    }
    Ok(if outputs.iter().all(|o| o.verdict == outputs[0].verdict) {
        TransitionState::Exit
    } else {
        TransitionState::Debate
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisMode {
    #[default]
    Concatenate,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synthesis {
    pub text: String,
    /// Set when model synthesis failed and concatenation was used instead.
    pub fallback: bool,
}

fn sorted(outputs: &[AgentOutput]) -> Vec<&AgentOutput> {
    let mut v: Vec<&AgentOutput> = outputs.iter().collect();
    v.sort_by_key(|o| o.paradigm);
    v
}

/// Deductive, inductive, abductive explanations under labelled headers.
pub fn concatenate_explanations(outputs: &[AgentOutput]) -> String {
    sorted(outputs)
        .iter()
        .map(|o| format!("### {} agent\n{}", o.paradigm, o.explanation.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Merges the explanations of three agreeing outputs.
///
/// In model mode one extra generation call rewrites the three explanations
/// into a single report; a failure there falls back to concatenation.
pub fn synthesize_explanation(
    outputs: &[AgentOutput],
    mode: SynthesisMode,
    synthesizer: Option<&dyn Backend>,
    bundle: &AgentBundle,
    sample: &CodeSample,
) -> Result<Synthesis, DebateError> {
    if check_consensus(outputs)? != TransitionState::Exit {
        return Err(DebateError::NotUnanimous);
    }
    let concatenated = concatenate_explanations(outputs);
    let backend = match (mode, synthesizer) {
        (SynthesisMode::Concatenate, _) => {
            return Ok(Synthesis {
                text: concatenated,
                fallback: false,
            })
        }
        (SynthesisMode::Model, Some(b)) => b,
        (SynthesisMode::Model, None) => bundle.backend(Paradigm::Deductive).as_ref(),
    };
    let verdict = outputs[0].verdict.keyword();
    let attempt = (|| -> Result<String, Box<dyn std::error::Error>> {
        let system = bundle.templates.render("synthesis_system", &[])?;
        let user = bundle.templates.render(
            "synthesis",
            &[
                ("verdict", verdict),
                ("code", &sample.code),
                ("explanations", &concatenated),
            ],
        )?;
        let req = ChatRequest::new(
            vec![ChatMessage::system(system), ChatMessage::user(user)],
            bundle.generation.clone(),
        )?;
        Ok(generate(backend, &req)?.text.trim().to_owned())
    })();
    Ok(match attempt {
        Ok(text) => Synthesis {
            text,
            fallback: false,
        },
        Err(e) => {
            tracing::warn!(error = %e, "explanation synthesis failed; concatenating");
            Synthesis {
                text: concatenated,
                fallback: true,
            }
        }
    })
}

fn disagreement_summary(outputs: &[AgentOutput], rounds: u32) -> String {
    let mut s = format!("No consensus after {rounds} debate round(s); defaulting to BENIGN.\n\n");
    for o in sorted(outputs) {
        let _ = write!(
            s,
            "### {} agent: {}\n{}\n\n",
            o.paradigm,
            o.verdict,
            o.explanation.trim()
        );
    }
    s.trim_end().to_owned()
}

fn majority(outputs: &[AgentOutput]) -> Verdict {
    let votes = outputs.iter().filter(|o| o.verdict.is_vulnerable()).count();
    if votes * 2 > outputs.len() {
        Verdict::Vulnerable
    } else {
        Verdict::Benign
    }
}

fn majority_summary(outputs: &[AgentOutput], verdict: Verdict) -> String {
    let n = outputs.iter().filter(|o| o.verdict == verdict).count();
    let mut s = format!("Majority vote ({n} of {}): {verdict}.\n\n", outputs.len());
    for o in sorted(outputs) {
        let _ = write!(
            s,
            "### {} agent: {}\n{}\n\n",
            o.paradigm,
            o.verdict,
            o.explanation.trim()
        );
    }
    s.trim_end().to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptMeta {
    /// Backend id per paradigm.
    pub backends: BTreeMap<Paradigm, String>,
    pub embedder_id: String,
    pub template_hash: String,
    pub config_hash: String,
    pub synthesis: SynthesisMode,
    #[serde(default)]
    pub synthesis_fallback: bool,
}

/// Complete record of one detection run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub sample_id: String,
    pub t_max: u32,
    /// `rounds[t]` holds the deductive, inductive and abductive outputs of
    /// round `t`, in that order.
    pub rounds: Vec<Vec<AgentOutput>>,
    pub transitions: Vec<TransitionState>,
    #[serde(rename = "final")]
    pub final_verdict: FinalVerdict,
    pub meta: TranscriptMeta,
}

impl DebateTranscript {
    pub fn validate(&self) -> Result<(), DebateError> {
        let bad = |m: String| Err(DebateError::InvalidTranscript(m));
        if self.rounds.is_empty() {
            return bad("no rounds".into());
        }
        if self.rounds.len() > self.t_max as usize + 1 {
            return bad(format!(
                "{} rounds exceed t_max {}",
                self.rounds.len(),
                self.t_max
            ));
        }
        if self.transitions.len() != self.rounds.len() {
            return bad("transitions and rounds differ in length".into());
        }
        for (t, (outputs, transition)) in self.rounds.iter().zip(&self.transitions).enumerate() {
            let order: Vec<_> = outputs.iter().map(|o| (o.paradigm, o.round)).collect();
            let expected: Vec<_> = Paradigm::ALL.iter().map(|p| (*p, t as u32)).collect();
            if order != expected {
                return bad(format!("round {t} outputs are {order:?}"));
            }
            if check_consensus(outputs)? != *transition {
                return bad(format!("transition {t} disagrees with the verdicts"));
            }
            if *transition == TransitionState::Exit && t + 1 != self.rounds.len() {
                return bad(format!("round {} follows an exit", t + 1));
            }
        }
        let last = self.rounds.len() as u32 - 1;
        let exited = *self.transitions.last().expect("non-empty") == TransitionState::Exit;
        let consistent = match self.final_verdict.reason {
            FinalReason::UnanimousInitial => exited && last == 0,
            FinalReason::UnanimousAfterDebate { round } => exited && round == last && round >= 1,
            FinalReason::DefaultAfterMaxRounds => !exited && last == self.t_max && self.t_max > 0,
            FinalReason::MajorityVote => !exited && self.t_max == 0,
        };
        if !consistent {
            return bad(format!(
                "final reason {} does not match the rounds",
                self.final_verdict.reason
            ));
        }
        if exited && self.final_verdict.verdict != self.rounds[last as usize][0].verdict {
            return bad("final verdict differs from the unanimous verdict".into());
        }
        Ok(())
    }
}

/// A sample whose detection could not complete; `rounds` holds whatever
/// finished before the failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectFailure {
    pub sample_id: String,
    pub error: String,
    pub rounds: Vec<Vec<AgentOutput>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleResult {
    Done(DebateTranscript),
    Failed(DetectFailure),
}

impl SampleResult {
    pub fn sample_id(&self) -> &str {
        match self {
            SampleResult::Done(t) => &t.sample_id,
            SampleResult::Failed(f) => &f.sample_id,
        }
    }

    pub fn transcript(&self) -> Option<&DebateTranscript> {
        match self {
            SampleResult::Done(t) => Some(t),
            SampleResult::Failed(_) => None,
        }
    }
}

/// Runs the detection workflow for samples.
#[derive(Clone)]
pub struct DebateEngine {
    bundle: Arc<AgentBundle>,
    t_max: u32,
    synthesis: SynthesisMode,
    synthesizer: Option<Arc<dyn Backend>>,
    config_hash: Option<String>,
}

impl DebateEngine {
    pub fn new(bundle: Arc<AgentBundle>) -> Self {
        Self {
            bundle,
            t_max: DEFAULT_T_MAX,
            synthesis: SynthesisMode::Concatenate,
            synthesizer: None,
            config_hash: None,
        }
    }

    pub fn with_t_max(mut self, t_max: u32) -> Self {
        self.t_max = t_max;
        self
    }

    pub fn with_synthesis(
        mut self,
        mode: SynthesisMode,
        synthesizer: Option<Arc<dyn Backend>>,
    ) -> Self {
        self.synthesis = mode;
        self.synthesizer = synthesizer;
        self
    }

    /// Overrides the config hash recorded in transcripts.
    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    pub fn bundle(&self) -> &Arc<AgentBundle> {
        &self.bundle
    }

    fn meta(&self, synthesis_fallback: bool) -> TranscriptMeta {
        let backends = Paradigm::ALL
            .iter()
            .map(|p| (*p, self.bundle.backend(*p).id().to_owned()))
            .collect();
        let config_hash = self.config_hash.clone().unwrap_or_else(|| {
            crate::sha256_hex(format!(
                "{}|{:?}|{}",
                self.t_max,
                self.synthesis,
                crate::jsonl::to_line(&self.bundle.generation)
            ))
        });
        TranscriptMeta {
            backends,
            embedder_id: self.bundle.embedder.id(),
            template_hash: self.bundle.templates.hash(),
            config_hash,
            synthesis: self.synthesis,
            synthesis_fallback,
        }
    }

    /// Runs the three calls of one round concurrently; the round completes
    /// only when all three have returned.
    fn round<F>(f: F) -> Result<Vec<AgentOutput>, AgentError>
    where
        F: Fn(Paradigm) -> Result<AgentOutput, AgentError> + Sync,
    {
        std::thread::scope(|scope| {
            let handles = Paradigm::ALL.map(|p| {
                let f = &f;
                scope.spawn(move || f(p))
            });
            handles
                .into_iter()
                .map(|h| h.join().expect("agent thread panicked"))
                .collect()
        })
    }

    pub fn detect(&self, sample: &CodeSample) -> Result<DebateTranscript, DetectFailure> {
        let mut rounds: Vec<Vec<AgentOutput>> = Vec::new();
        let fail = |rounds: &Vec<Vec<AgentOutput>>, e: &dyn std::fmt::Display| DetectFailure {
            sample_id: sample.id.clone(),
            error: e.to_string(),
            rounds: rounds.clone(),
        };
        let bundle = &*self.bundle;

        let initial =
            Self::round(|p| run_agent(p, sample, bundle)).map_err(|e| fail(&rounds, &e))?;
        let mut transitions = vec![check_consensus(&initial).map_err(|e| fail(&rounds, &e))?];
        rounds.push(initial);

        let mut outcome = None;
        if transitions[0] == TransitionState::Exit {
            outcome = Some(FinalReason::UnanimousInitial);
        } else if self.t_max > 0 {
            for t in 1..=self.t_max {
                let previous = rounds.last().expect("round 0 exists").clone();
                let history = &rounds;
                let next = Self::round(|p| {
                    let own: Vec<AgentOutput> =
                        history.iter().map(|r| r[p.index()].clone()).collect();
                    let peers: Vec<AgentOutput> = p
                        .peers()
                        .iter()
                        .map(|q| previous[q.index()].clone())
                        .collect();
                    deliberate(p, sample, bundle, &own, &peers)
                })
                .map_err(|e| fail(&rounds, &e))?;
                let transition = check_consensus(&next).map_err(|e| fail(&rounds, &e))?;
                rounds.push(next);
                transitions.push(transition);
                if transition == TransitionState::Exit {
                    outcome = Some(FinalReason::UnanimousAfterDebate { round: t });
                    break;
                }
            }
        }

        let last = rounds.last().expect("at least one round");
        let mut synthesis_fallback = false;
        let final_verdict = match outcome {
            Some(reason) => {
                let synthesis = synthesize_explanation(
                    last,
                    self.synthesis,
                    self.synthesizer.as_deref(),
                    bundle,
                    sample,
                )
                .map_err(|e| fail(&rounds, &e))?;
                synthesis_fallback = synthesis.fallback;
                FinalVerdict::new(last[0].verdict, synthesis.text, reason)
                    .map_err(|e| fail(&rounds, &e))?
            }
            None if self.t_max == 0 => {
                let verdict = majority(last);
                FinalVerdict::new(
                    verdict,
                    majority_summary(last, verdict),
                    FinalReason::MajorityVote,
                )
                .map_err(|e| fail(&rounds, &e))?
            }
            None => FinalVerdict::default_benign(disagreement_summary(last, self.t_max)),
        };

        let transcript = DebateTranscript {
            sample_id: sample.id.clone(),
            t_max: self.t_max,
            rounds,
            transitions,
            final_verdict,
            meta: self.meta(synthesis_fallback),
        };
        debug_assert!(transcript.validate().is_ok(), "{:?}", transcript.validate());
        Ok(transcript)
    }

    /// Detects every sample with up to `parallelism` samples in flight.
    ///
    /// With `stream_to`, each result is appended to `<stream_to>.partial` as
    /// soon as it completes; once all samples finish, transcripts are written
    /// to `stream_to` in input order and failures to `failures_path` next to
    /// it, and the partial file is removed.
    pub fn run_batch(
        &self,
        samples: &[CodeSample],
        parallelism: usize,
        stream_to: Option<&Path>,
    ) -> io::Result<BatchOutcome> {
        let workers = parallelism.max(1).min(samples.len().max(1));
        let next = AtomicUsize::new(0);
        let mut results: Vec<Option<(SampleResult, Duration)>> = vec![None; samples.len()];
        let mut partial = match stream_to {
            Some(path) => {
                if let Some(parent) = path.parent() {
                    if !parent.as_os_str().is_empty() {
                        fs::create_dir_all(parent)?;
                    }
                }
                Some(fs::File::create(partial_path(path))?)
            }
            None => None,
        };
        std::thread::scope(|scope| -> io::Result<()> {
            let (tx, rx) = mpsc::channel();
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(sample) = samples.get(i) else { break };
                    let started = Instant::now();
                    let result = match self.detect(sample) {
                        Ok(t) => SampleResult::Done(t),
                        Err(f) => {
                            tracing::warn!(sample = %f.sample_id, error = %f.error, "detection failed");
                            SampleResult::Failed(f)
                        }
                    };
                    if tx.send((i, result, started.elapsed())).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (i, result, elapsed) in rx {
                if let Some(f) = partial.as_mut() {
                    writeln!(f, "{}", crate::jsonl::to_line(&result))?;
                    f.flush()?;
                }
                results[i] = Some((result, elapsed));
            }
            Ok(())
        })?;
        let (results, elapsed): (Vec<_>, Vec<_>) = results
            .into_iter()
            .map(|r| r.expect("every sample produces a result"))
            .unzip();
        let outcome = BatchOutcome { results, elapsed };
        if let Some(path) = stream_to {
            crate::jsonl::write_records(path, outcome.transcripts())?;
            crate::jsonl::write_records(&failures_path(path), outcome.failures())?;
            fs::remove_file(partial_path(path))?;
        }
        Ok(outcome)
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// `failures.jsonl` in the same directory as the transcripts file.
pub fn failures_path(transcripts: &Path) -> PathBuf {
    transcripts.with_file_name("failures.jsonl")
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// One result per input sample, in input order.
    pub results: Vec<SampleResult>,
    /// Wall-clock time per sample, same order.
    pub elapsed: Vec<Duration>,
}

impl BatchOutcome {
    pub fn transcripts(&self) -> Vec<&DebateTranscript> {
        self.results
            .iter()
            .filter_map(SampleResult::transcript)
            .collect()
    }

    pub fn failures(&self) -> Vec<&DetectFailure> {
        self.results
            .iter()
            .filter_map(|r| match r {
                SampleResult::Failed(f) => Some(f),
                SampleResult::Done(_) => None,
            })
            .collect()
    }

    pub fn failed_ids(&self) -> Vec<&str> {
        self.failures()
            .iter()
            .map(|f| f.sample_id.as_str())
            .collect()
    }
}

fn quote(text: &str) -> String {
    text.trim()
        .lines()
        .map(|l| format!("  > {l}").trim_end().to_owned())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders a transcript as readable text: each round's verdicts and
/// reasoning, the transitions, then the final verdict.
pub fn replay(transcript: &DebateTranscript) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Sample {}", transcript.sample_id);
    let _ = writeln!(s, "t_max = {}", transcript.t_max);
    for (t, (outputs, transition)) in transcript
        .rounds
        .iter()
        .zip(&transcript.transitions)
        .enumerate()
    {
        let title = if t == 0 {
            "independent analysis".to_owned()
        } else {
            "debate".to_owned()
        };
        let _ = writeln!(s, "\n## Round {t} ({title})");
        for o in outputs {
            let mut line = format!("- {}: {}", o.paradigm, o.verdict);
            if !o.retrieved_refs.is_empty() {
                let _ = write!(line, " [refs: {}]", o.retrieved_refs.join(", "));
            }
            if o.parse_recovered {
                line.push_str(" (verdict recovered)");
            }
            let _ = writeln!(s, "{line}\n{}", quote(&o.explanation));
        }
        let state = match transition {
            TransitionState::Exit => "exit (consensus)",
            TransitionState::Debate => "debate (conflict)",
        };
        let _ = writeln!(s, "Transition: {state}");
    }
    let f = &transcript.final_verdict;
    let _ = writeln!(s, "\n## Final verdict: {} ({})", f.verdict, f.reason);
    let _ = writeln!(s, "{}", f.explanation.trim());
    s
}
