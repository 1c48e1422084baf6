//! Run configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vuldebate_core::backend::{GenerationConfig, ModelAssignment};
use vuldebate_core::context::DEFAULT_CONTEXT_K;
use vuldebate_core::debate::{SynthesisMode, DEFAULT_T_MAX};
use vuldebate_core::Paradigm;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Rules file; the bundled seed rules when absent.
    pub rules: Option<PathBuf>,
    /// Vulnerability/fix pair file; the bundled seed pairs when absent.
    pub pairs: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    /// Prebuilt indices from `vuldebate index`.
    pub index_dir: Option<PathBuf>,
    /// Caller/callee candidates; enables context mode.
    pub context: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub t_max: u32,
    pub parallelism: usize,
    /// `hash`, `hash:<dim>` or `remote:<id>`.
    pub embedder: String,
    pub synthesis: SynthesisMode,
    /// Backend used for model synthesis; the deductive agent's when absent.
    pub synthesis_backend: Option<String>,
    pub context_k: usize,
    pub paths: Paths,
    pub models: ModelAssignment,
    pub generation: GenerationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_T_MAX,
            parallelism: 4,
            embedder: "hash".into(),
            synthesis: SynthesisMode::Concatenate,
            synthesis_backend: None,
            context_k: DEFAULT_CONTEXT_K,
            paths: Paths::default(),
            models: ModelAssignment::default(),
            generation: GenerationConfig::default(),
        }
    }
}

/// Fields that influence model output. Paths and parallelism are left out
/// so that identical runs in different directories hash the same.
#[derive(Serialize)]
struct HashedFields<'a> {
    t_max: u32,
    embedder: &'a str,
    synthesis: SynthesisMode,
    synthesis_backend: &'a Option<String>,
    context: bool,
    context_k: usize,
    models: &'a ModelAssignment,
    generation: &'a GenerationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.models.validate().map_err(anyhow::Error::msg)?;
        self.generation.validate()?;
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.context_k == 0 {
            bail!("context_k must be at least 1");
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        vuldebate_core::sha256_hex(
            serde_json::to_string(&HashedFields {
                t_max: self.t_max,
                embedder: &self.embedder,
                synthesis: self.synthesis,
                synthesis_backend: &self.synthesis_backend,
                context: self.paths.context.is_some(),
                context_k: self.context_k,
                models: &self.models,
                generation: &self.generation,
            })
            .expect("config serializes"),
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn set_backend(&mut self, assignment: &str) -> Result<()> {
        let (paradigm, id) = assignment
            .split_once('=')
            .with_context(|| format!("--backend expects <paradigm>=<id>, got `{assignment}`"))?;
        let id = id.trim();
        if id.is_empty() {
            bail!("--backend `{assignment}` has an empty id");
        }
        if paradigm.trim().eq_ignore_ascii_case("all") {
            for p in Paradigm::ALL {
                self.models.set(p, id);
            }
        } else {
            let p: Paradigm = paradigm.trim().parse().map_err(anyhow::Error::msg)?;
            self.models.set(p, id);
        }
        Ok(())
    }
}

/// `0,1,2`, `0-3` or `0..=3` (a single number is also accepted).
pub fn parse_rounds(text: &str) -> Result<Vec<u32>> {
    let text = text.trim();
    let range = text.split_once("..=").or_else(|| text.split_once('-'));
    let values: Vec<u32> = if let Some((a, b)) = range {
        let (a, b): (u32, u32) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty round range `{text}`");
        }
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|v| {
                v.trim()
                    .parse::<u32>()
                    .with_context(|| format!("bad round value in `{text}`"))
            })
            .collect::<Result<_>>()?
    };
    if values.is_empty() {
        bail!("no round values given");
    }
    Ok(values)
}
