//! `vuldebate`: run the three-agent debate detector from the command line.
//!
//! Exit status is 0 when every sample completed, 2 when some samples failed
//! (their records are in `failures.jsonl`), and 1 on any other error.

mod config;
mod setup;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vuldebate_core::debate::{
    replay, BatchOutcome, DebateEngine, DebateTranscript, SampleResult, SynthesisMode,
};
use vuldebate_core::eval::{
    evaluate, load_paired_dataset, render_report, render_sweep, sweep_rounds, write_timings,
    DEFAULT_TOP_CWES,
};
use vuldebate_core::jsonl::read_records;
use vuldebate_core::model::{validate_samples, SampleRecord};
use vuldebate_core::{CodeSample, Label};

use config::{parse_rounds, RunConfig};

#[derive(Parser)]
#[command(
    name = "vuldebate",
    version,
    about = "Multi-agent debate vulnerability detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save the rule and example indices.
    Index(RunArgs),
    /// Detect vulnerabilities in source files or a sample file.
    Detect {
        /// Source files, one sample each.
        files: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run detection over a paired dataset and report metrics.
    Evaluate(RunArgs),
    /// Evaluate once per debate-round limit.
    Sweep {
        /// Round limits: `0,1,2`, `0-3` or `0..=3`.
        #[arg(long, default_value = "0-3")]
        rounds: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render recorded transcripts as text.
    Replay {
        transcripts: PathBuf,
        /// Only this sample.
        #[arg(long)]
        sample: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthesisArg {
    Concat,
    Model,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample file (line-delimited JSON).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Maximum debate rounds; 0 means majority vote.
    #[arg(long)]
    tmax: Option<u32>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// `<paradigm>=<backend id>`; `all=<id>` sets every agent. Repeatable.
    #[arg(long = "backend")]
    backends: Vec<String>,
    /// Caller/callee candidate file; turns on context mode.
    #[arg(long)]
    context: Option<PathBuf>,
    #[arg(long, value_enum)]
    synthesis: Option<SynthesisArg>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Prebuilt index directory.
    #[arg(long)]
    index: Option<PathBuf>,
    /// `hash`, `hash:<dim>` or `remote:<id>`.
    #[arg(long)]
    embedder: Option<String>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let p = &mut cfg.paths;
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                *slot = v.clone();
            }
        };
        set(&mut p.dataset, &self.dataset);
        set(&mut p.context, &self.context);
        set(&mut p.cache_dir, &self.cache_dir);
        set(&mut p.out_dir, &self.out);
        set(&mut p.rules, &self.rules);
        set(&mut p.pairs, &self.pairs);
        set(&mut p.index_dir, &self.index);
        set(&mut p.template_dir, &self.templates);
        if let Some(t) = self.tmax {
            cfg.t_max = t;
        }
        if let Some(n) = self.parallelism {
            cfg.parallelism = n;
        }
        if let Some(e) = &self.embedder {
            cfg.embedder = e.clone();
        }
        if let Some(s) = self.synthesis {
            cfg.synthesis = match s {
                SynthesisArg::Concat => SynthesisMode::Concatenate,
                SynthesisArg::Model => SynthesisMode::Model,
            };
        }
        for assignment in &self.backends {
            cfg.set_backend(assignment)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Identifying details of a run, written as `run.json`.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    template_hash: String,
    embedder_id: String,
    backends: [String; 3],
    t_max: u32,
    samples: usize,
    failed: usize,
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    engine: &DebateEngine,
    samples: usize,
    failed: usize,
) -> Result<()> {
    let bundle = engine.bundle();
    let manifest = RunManifest {
        command,
        config_hash: cfg.config_hash(),
        template_hash: bundle.templates.hash(),
        embedder_id: bundle.embedder.id(),
        backends: bundle.backend_ids(),
        t_max: engine.t_max(),
        samples,
        failed,
    };
    fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<CodeSample>> {
    let records = read_records::<SampleRecord>(path)?
        .into_iter()
        .map(|(_, r)| r);
    Ok(validate_samples(records)?)
}

fn sample_from_file(path: &Path) -> Result<CodeSample> {
    let code = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if code.trim().is_empty() {
        bail!("{} is empty", path.display());
    }
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let language_hint = match path.extension().and_then(|e| e.to_str()) {
        Some("c") | Some("h") => "C",
        Some("cc") | Some("cpp") | Some("hpp") => "C++",
        _ => "",
    };
    Ok(CodeSample {
        id,
        code,
        label: Label::Unknown,
        pair_id: None,
        cwe_ids: Vec::new(),
        language_hint: language_hint.into(),
    })
}

fn status(failed: usize) -> ExitCode {
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failed} sample(s) failed; see failures.jsonl");
        ExitCode::from(2)
    }
}

fn print_results(batch: &BatchOutcome) {
    for r in &batch.results {
        match r {
            SampleResult::Done(t) => println!(
                "{}\t{}\t{}",
                t.sample_id, t.final_verdict.verdict, t.final_verdict.reason
            ),
            SampleResult::Failed(f) => println!("{}\tFAILED\t{}", f.sample_id, f.error),
        }
    }
}

fn cmd_index(run: &RunArgs) -> Result<ExitCode> {
    let cfg = run.resolve()?;
    let eval = match &cfg.paths.dataset {
        Some(p) => read_samples(p)?,
        None => Vec::new(),
    };
    let dir = cfg
        .paths
        .index_dir
        .clone()
        .unwrap_or_else(|| setup::default_out(&cfg, "index"));
    let embedder = setup::make_embedder(&cfg)?;
    let k = setup::write_indices(&cfg, embedder.as_ref(), &eval, &dir)?;
    write_snapshot(&dir, &cfg)?;
    println!(
        "indexed {} rules and {} example pairs into {}",
        k.deductive.entries().len(),
        k.inductive.pairs().len(),
        dir.display()
    );
    if let Some(leaks) = &k.leaks {
        println!(
            "leak filter removed {} pair(s); audit in {}",
            leaks.removed.len(),
            dir.join(setup::LEAK_AUDIT).display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_detect(files: &[PathBuf], run: &RunArgs) -> Result<ExitCode> {
    let cfg = run.resolve()?;
    let mut samples = files
        .iter()
        .map(|f| sample_from_file(f))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &cfg.paths.dataset {
        samples.extend(read_samples(p)?);
    }
    if samples.is_empty() {
        bail!("nothing to detect: pass source files or --dataset");
    }
    let samples = setup::apply_context(&cfg, samples)?;
    let setup = setup::engine(&cfg, &[])?;
    let dir = setup::default_out(&cfg, "detect");
    write_snapshot(&dir, &cfg)?;
    let batch = setup.engine.run_batch(
        &samples,
        cfg.parallelism,
        Some(&dir.join("transcripts.jsonl")),
    )?;
    write_timings(&dir.join("timings.jsonl"), &batch)?;
    write_manifest(
        &dir,
        "detect",
        &cfg,
        &setup.engine,
        samples.len(),
        batch.failures().len(),
    )?;
    print_results(&batch);
    Ok(status(batch.failures().len()))
}

fn load_eval(cfg: &RunConfig) -> Result<(Vec<CodeSample>, Vec<vuldebate_core::eval::SamplePair>)> {
    let path = cfg
        .paths
        .dataset
        .as_ref()
        .context("--dataset is required")?;
    load_paired_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn write_leaks(dir: &Path, setup: &setup::Setup) -> Result<()> {
    if let Some(leaks) = &setup.leaks {
        leaks.write_audit(&dir.join(setup::LEAK_AUDIT))?;
    }
    Ok(())
}

fn cmd_evaluate(run: &RunArgs) -> Result<ExitCode> {
    let cfg = run.resolve()?;
    let (raw, pairs) = load_eval(&cfg)?;
    let setup = setup::engine(&cfg, &raw)?;
    let samples = setup::apply_context(&cfg, raw)?;
    let dir = setup::default_out(&cfg, "evaluate");
    write_snapshot(&dir, &cfg)?;
    write_leaks(&dir, &setup)?;
    let result = evaluate(&setup.engine, &samples, &pairs, cfg.parallelism, Some(&dir))?;
    write_manifest(
        &dir,
        "evaluate",
        &cfg,
        &setup.engine,
        samples.len(),
        result.failed_samples(),
    )?;
    print!("{}", render_report(&result.report, DEFAULT_TOP_CWES));
    Ok(status(result.failed_samples()))
}

fn cmd_sweep(rounds: &str, run: &RunArgs) -> Result<ExitCode> {
    let t_values = parse_rounds(rounds)?;
    let cfg = run.resolve()?;
    let (raw, pairs) = load_eval(&cfg)?;
    let setup = setup::engine(&cfg, &raw)?;
    let samples = setup::apply_context(&cfg, raw)?;
    let dir = setup::default_out(&cfg, "sweep");
    write_snapshot(&dir, &cfg)?;
    write_leaks(&dir, &setup)?;
    let rows = sweep_rounds(
        &setup.engine,
        &samples,
        &pairs,
        &t_values,
        cfg.parallelism,
        Some(&dir),
    )?;
    print!("{}", render_sweep(&rows));
    let failed = rows.iter().map(|r| r.report.counts.failed_samples).sum();
    Ok(status(failed))
}

fn cmd_replay(path: &Path, only: Option<&str>) -> Result<ExitCode> {
    let transcripts = read_records::<DebateTranscript>(path)?;
    let mut shown = 0;
    for (_, t) in &transcripts {
        if only.is_some_and(|id| id != t.sample_id) {
            continue;
        }
        if shown > 0 {
            println!();
        }
        print!("{}", replay(t));
        shown += 1;
    }
    if shown == 0 {
        bail!("no matching transcript in {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Index(run) => cmd_index(run),
        Command::Detect { files, run } => cmd_detect(files, run),
        Command::Evaluate(run) => cmd_evaluate(run),
        Command::Sweep { rounds, run } => cmd_sweep(rounds, run),
        Command::Replay {
            transcripts,
            sample,
        } => cmd_replay(transcripts, sample.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
