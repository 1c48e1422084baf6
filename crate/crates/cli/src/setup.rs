//! Turns a [`RunConfig`] into live components. Everything is resolved up
//! front so that a misconfigured run fails before any sample is processed.

use std::collections::HashMap;
use std::env;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use vuldebate_core::agents::template::TemplateSet;
use vuldebate_core::agents::AgentBundle;
use vuldebate_core::backend::{Backend, CachedBackend, HttpBackend, Retrying, ScriptedBackend};
use vuldebate_core::context::{contextualize_all, load_candidates};
use vuldebate_core::debate::DebateEngine;
use vuldebate_core::knowledge::{
    build_deductive_index, build_inductive_index, ingest_deductive, ingest_inductive, leak_filter,
    parse_deductive, parse_inductive, DeductiveEntry, DeductiveKnowledge, InductiveKnowledge,
    InductivePair, LeakFilterOutcome,
};
use vuldebate_core::retrieval::{
    CachedEmbedder, Embedder, HashEmbedder, RemoteEmbedder, RetrievalIndex,
};
use vuldebate_core::{CodeSample, Paradigm};

use crate::config::RunConfig;

const SEED_RULES: &str = include_str!("../../../data/cert_c_rules.jsonl");
const SEED_PAIRS: &str = include_str!("../../../data/vuln_fix_pairs.jsonl");

pub const DEDUCTIVE_INDEX: &str = "deductive.index.jsonl";
pub const INDUCTIVE_INDEX: &str = "inductive.index.jsonl";
pub const LEAK_AUDIT: &str = "leak_audit.jsonl";

/// `VULDEBATE_<ID>_<SUFFIX>`, with the id upper-cased and every other
/// character replaced by `_`.
pub fn env_var_name(id: &str, suffix: &str) -> String {
    let key: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("VULDEBATE_{key}_{suffix}")
}

fn required_env(id: &str, suffix: &str) -> Result<String> {
    let name = env_var_name(id, suffix);
    env::var(&name).with_context(|| format!("backend `{id}` needs the environment variable {name}"))
}

pub fn make_embedder(cfg: &RunConfig) -> Result<Arc<dyn Embedder>> {
    let kind = cfg.embedder.trim();
    let inner: Arc<dyn Embedder> = if kind == "hash" {
        Arc::new(HashEmbedder::default())
    } else if let Some(dim) = kind.strip_prefix("hash:") {
        let dim: usize = dim
            .parse()
            .with_context(|| format!("bad embedder dimension in `{kind}`"))?;
        if dim == 0 {
            bail!("embedder dimension must be positive");
        }
        Arc::new(HashEmbedder::new(dim))
    } else if let Some(id) = kind.strip_prefix("remote:") {
        let url = required_env(id, "URL")?;
        let model = env::var(env_var_name(id, "MODEL")).unwrap_or_else(|_| id.to_owned());
        let key = env::var(env_var_name(id, "API_KEY")).ok();
        Arc::new(RemoteEmbedder::new(url, model, key))
    } else {
        bail!("unknown embedder `{kind}` (expected hash, hash:<dim> or remote:<id>)");
    };
    Ok(match &cfg.paths.cache_dir {
        Some(dir) => Arc::new(CachedEmbedder::new(inner, dir.join("embeddings"))),
        None => inner,
    })
}

/// A backend for `id`: `scripted:<path>` loads a reply script, anything
/// else is an HTTP chat-completions endpoint taken from the environment.
pub fn make_backend(id: &str, cache_dir: Option<&Path>) -> Result<Arc<dyn Backend>> {
    let base: Arc<dyn Backend> = if let Some(path) = id.strip_prefix("scripted:") {
        Arc::new(
            ScriptedBackend::from_file(id, Path::new(path))
                .with_context(|| format!("loading script for backend `{id}`"))?,
        )
    } else {
        let url = required_env(id, "URL")?;
        let model = env::var(env_var_name(id, "MODEL")).unwrap_or_else(|_| id.to_owned());
        let key = env::var(env_var_name(id, "API_KEY")).ok();
        Arc::new(Retrying::new(
            HttpBackend::new(id, url, model, key),
            Duration::from_millis(500),
        ))
    };
    Ok(match cache_dir {
        Some(dir) => Arc::new(CachedBackend::new(base, dir)),
        None => base,
    })
}

fn load_rules(cfg: &RunConfig) -> Result<Vec<DeductiveEntry>> {
    Ok(match &cfg.paths.rules {
        Some(p) => ingest_deductive(p).with_context(|| format!("loading rules {}", p.display()))?,
        None => parse_deductive(SEED_RULES, Path::new("<seed rules>"))?,
    })
}

fn load_pairs(cfg: &RunConfig) -> Result<Vec<InductivePair>> {
    Ok(match &cfg.paths.pairs {
        Some(p) => ingest_inductive(p).with_context(|| format!("loading pairs {}", p.display()))?,
        None => parse_inductive(SEED_PAIRS, Path::new("<seed pairs>"))?,
    })
}

pub struct Knowledge {
    pub deductive: DeductiveKnowledge,
    pub inductive: InductiveKnowledge,
    /// Present when the inductive index was built here against eval samples.
    pub leaks: Option<LeakFilterOutcome>,
}

/// Builds both knowledge bases, leak-filtering the pairs against `eval`.
pub fn build_knowledge(
    cfg: &RunConfig,
    embedder: &dyn Embedder,
    eval: &[CodeSample],
) -> Result<Knowledge> {
    let rules = load_rules(cfg)?;
    let filtered = leak_filter(load_pairs(cfg)?, eval);
    if filtered.kept.is_empty() {
        bail!("every vulnerability/fix pair leaks into the evaluation set");
    }
    let deductive =
        DeductiveKnowledge::build(rules, embedder).context("building the rule index")?;
    let inductive = InductiveKnowledge::build(filtered.kept.clone(), embedder)
        .context("building the pair index")?;
    Ok(Knowledge {
        deductive,
        inductive,
        leaks: (!eval.is_empty()).then_some(filtered),
    })
}

/// Loads indices written by `vuldebate index` from `dir`.
pub fn load_knowledge(cfg: &RunConfig, embedder: &dyn Embedder, dir: &Path) -> Result<Knowledge> {
    let load = |name: &str| -> Result<RetrievalIndex> {
        let path = dir.join(name);
        let index = RetrievalIndex::load(&path)
            .with_context(|| format!("loading index {}", path.display()))?;
        if index.embedder_id() != embedder.id() {
            bail!(
                "index {} was built with embedder `{}` but this run uses `{}`",
                path.display(),
                index.embedder_id(),
                embedder.id()
            );
        }
        Ok(index)
    };
    Ok(Knowledge {
        deductive: DeductiveKnowledge::from_parts(&load_rules(cfg)?, load(DEDUCTIVE_INDEX)?)?,
        inductive: InductiveKnowledge::from_parts(&load_pairs(cfg)?, load(INDUCTIVE_INDEX)?)?,
        leaks: None,
    })
}

/// Builds and saves both indices (plus the leak audit when `eval` is
/// non-empty) into `dir`.
pub fn write_indices(
    cfg: &RunConfig,
    embedder: &dyn Embedder,
    eval: &[CodeSample],
    dir: &Path,
) -> Result<Knowledge> {
    let k = build_knowledge(cfg, embedder, eval)?;
    std::fs::create_dir_all(dir)?;
    // Rebuilding from the entries keeps the saved index identical to the
    // one a fresh build would produce.
    build_deductive_index(k.deductive.entries(), embedder)?.save(&dir.join(DEDUCTIVE_INDEX))?;
    build_inductive_index(k.inductive.pairs(), embedder)?.save(&dir.join(INDUCTIVE_INDEX))?;
    if let Some(leaks) = &k.leaks {
        leaks.write_audit(&dir.join(LEAK_AUDIT))?;
    }
    Ok(k)
}

pub struct Setup {
    pub engine: DebateEngine,
    pub leaks: Option<LeakFilterOutcome>,
}

/// Wires knowledge, backends and templates into a debate engine.
pub fn engine(cfg: &RunConfig, eval: &[CodeSample]) -> Result<Setup> {
    cfg.validate()?;
    let embedder = make_embedder(cfg)?;
    let knowledge = match &cfg.paths.index_dir {
        Some(dir) => load_knowledge(cfg, embedder.as_ref(), dir)?,
        None => build_knowledge(cfg, embedder.as_ref(), eval)?,
    };
    let cache = cfg.paths.cache_dir.as_deref();
    let mut made: HashMap<String, Arc<dyn Backend>> = HashMap::new();
    let mut get = |id: &str| -> Result<Arc<dyn Backend>> {
        if let Some(b) = made.get(id) {
            return Ok(b.clone());
        }
        let b = make_backend(id, cache)?;
        made.insert(id.to_owned(), b.clone());
        Ok(b)
    };
    let backends = [
        get(cfg.models.get(Paradigm::Deductive))?,
        get(cfg.models.get(Paradigm::Inductive))?,
        get(cfg.models.get(Paradigm::Abductive))?,
    ];
    let synthesizer = cfg.synthesis_backend.as_deref().map(&mut get).transpose()?;
    let templates = match &cfg.paths.template_dir {
        Some(dir) => TemplateSet::load_dir(dir)
            .with_context(|| format!("loading templates from {}", dir.display()))?,
        None => TemplateSet::builtin(),
    };
    let bundle = AgentBundle::new(
        Arc::new(knowledge.deductive),
        Arc::new(knowledge.inductive),
        embedder,
        backends,
    )
    .with_templates(templates)
    .with_generation(cfg.generation.clone());
    let engine = DebateEngine::new(Arc::new(bundle))
        .with_t_max(cfg.t_max)
        .with_synthesis(cfg.synthesis, synthesizer)
        .with_config_hash(cfg.config_hash());
    Ok(Setup {
        engine,
        leaks: knowledge.leaks,
    })
}

/// Replaces each sample's code with its serialized caller/callee context
/// when context mode is on.
pub fn apply_context(cfg: &RunConfig, samples: Vec<CodeSample>) -> Result<Vec<CodeSample>> {
    let Some(path) = &cfg.paths.context else {
        return Ok(samples);
    };
    let candidates = load_candidates(path)
        .with_context(|| format!("loading context candidates {}", path.display()))?;
    let embedder = make_embedder(cfg)?;
    Ok(contextualize_all(
        &samples,
        &candidates,
        embedder.as_ref(),
        cfg.context_k,
    )?)
}

pub fn default_out(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.paths
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}
