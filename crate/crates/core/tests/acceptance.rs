//! Acceptance checks, one per numbered criterion. Each prints a single
//! `PASS`/`FAIL` line; the process exits non-zero if any check fails.
//!
//! Criterion 11 talks to a real model endpoint and only runs when
//! `VULDEBATE_LIVE_BACKEND` names a backend id whose `VULDEBATE_<ID>_URL`
//! (and optionally `_API_KEY`, `_MODEL`) is set; otherwise it is skipped.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use vuldebate_core::agents::AgentBundle;
use vuldebate_core::backend::{
    Backend, CachedBackend, HttpBackend, Matcher, Retrying, ScriptReply, ScriptRule,
    ScriptedBackend,
};
use vuldebate_core::context::{
    select_context, serialize_context, ContextFunction, FunctionContext,
};
use vuldebate_core::debate::{DebateEngine, DebateTranscript};
use vuldebate_core::eval::{
    classification_metrics, evaluate, pair_accuracy, pair_samples, PairedPrediction,
};
use vuldebate_core::knowledge::{
    leak_filter, DeductiveEntry, DeductiveKnowledge, InductiveKnowledge, InductivePair, PairSide,
};
use vuldebate_core::retrieval::{Embedder, EmbeddingVector, HashEmbedder, RetrievalIndex};
use vuldebate_core::{CodeSample, FinalReason, Label, Paradigm, TransitionState, Verdict};

type Check = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- fixtures

fn rules() -> Vec<DeductiveEntry> {
    [
        (
            "MEM30-C",
            "Pointer used after the memory it refers to was freed.",
        ),
        (
            "STR31-C",
            "String copied into a fixed buffer without checking its length.",
        ),
        (
            "ARR30-C",
            "Array index taken from input without a bounds check.",
        ),
        (
            "INT30-C",
            "Unsigned size arithmetic that can wrap before an allocation.",
        ),
        (
            "EXP34-C",
            "Result of an allocation dereferenced without a null check.",
        ),
        ("FIO30-C", "User-controlled data used as a format string."),
    ]
    .iter()
    .map(|(id, d)| DeductiveEntry {
        entry_id: (*id).into(),
        description: (*d).into(),
        rule: format!("{id}. seed rule"),
    })
    .collect()
}

fn pairs() -> Vec<InductivePair> {
    vec![
        InductivePair {
            pair_id: "hist-copy".into(),
            vuln_code: "void g(char *s) { char b[8]; strcpy(b, s); }".into(),
            fix_code: "void g(char *s) { char b[8]; snprintf(b, sizeof b, \"%s\", s); }".into(),
            origin: "acceptance".into(),
        },
        InductivePair {
            pair_id: "hist-uaf".into(),
            vuln_code: "void h(struct o *p) { free(p); p->n = 0; }".into(),
            fix_code: "void h(struct o *p) { p->n = 0; free(p); }".into(),
            origin: "acceptance".into(),
        },
    ]
}

fn bundle(backend: Arc<dyn Backend>) -> AgentBundle {
    let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::default());
    let d = DeductiveKnowledge::build(rules(), &*embedder).expect("rules index");
    let i = InductiveKnowledge::build(pairs(), &*embedder).expect("pairs index");
    AgentBundle::with_shared_backend(Arc::new(d), Arc::new(i), embedder, backend)
}

/// Marker comments are closed with `*/` so no marker is a substring of
/// another.
fn marker(case: usize) -> String {
    format!("/*case-{case}*/")
}

fn sample(case: usize, label: Label, pair: Option<&str>) -> CodeSample {
    CodeSample {
        id: format!("s{case}"),
        code: format!(
            "int f{case}(char *b, int n) {{ {} b[n] = 0; return n; }}",
            marker(case)
        ),
        label,
        pair_id: pair.map(str::to_owned),
        cwe_ids: vec!["CWE-787".into()],
        language_hint: "C".into(),
    }
}

fn phase(round: u32) -> String {
    if round == 0 {
        "Phase: independent".into()
    } else {
        format!("Phase: debate round {round}")
    }
}

/// One reply rule; the reply text embeds `sentinel` in the explanation.
fn reply_rule(case: usize, p: Paradigm, round: u32, v: Verdict, sentinel: &str) -> ScriptRule {
    ScriptRule {
        when: Matcher::All(vec![
            Matcher::System(format!("Agent: {p}")),
            Matcher::Last(phase(round)),
            Matcher::Contains(marker(case)),
        ]),
        reply: ScriptReply::Text(format!(
            "{sentinel} reasoning of {p} in round {round}.\nVERDICT: {}",
            v.keyword()
        )),
    }
}

/// Rules for `case` where `script[t][i]` is paradigm `i`'s verdict in round `t`.
fn script_rules(case: usize, script: &[[Verdict; 3]]) -> Vec<ScriptRule> {
    let mut out = Vec::new();
    for (t, verdicts) in script.iter().enumerate() {
        for (p, v) in Paradigm::ALL.iter().zip(verdicts) {
            out.push(reply_rule(
                case,
                *p,
                t as u32,
                *v,
                &sentinel(case, *p, t as u32),
            ));
        }
    }
    out
}

fn sentinel(case: usize, p: Paradigm, round: u32) -> String {
    format!("SENTINEL<{case}:{}:{round}>", p.name())
}

fn verdict(bit: bool) -> Verdict {
    if bit {
        Verdict::Vulnerable
    } else {
        Verdict::Benign
    }
}

/// The six verdict triples that are not unanimous.
fn mixed_triples() -> Vec<[Verdict; 3]> {
    (0u8..8)
        .map(|m| {
            [
                verdict(m & 4 != 0),
                verdict(m & 2 != 0),
                verdict(m & 1 != 0),
            ]
        })
        .filter(|t| !(t[0] == t[1] && t[1] == t[2]))
        .collect()
}

// -------------------------------------------------------------- criteria

fn c1_consensus_lattice() -> Check {
    let started = Instant::now();
    let mut rules = Vec::new();
    let combos: Vec<[Verdict; 3]> = (0u8..8)
        .map(|m| {
            [
                verdict(m & 4 != 0),
                verdict(m & 2 != 0),
                verdict(m & 1 != 0),
            ]
        })
        .collect();
    for (case, combo) in combos.iter().enumerate() {
        // Any debate round converges on benign; only round 0 matters here.
        rules.extend(script_rules(case, &[*combo, [Verdict::Benign; 3]]));
    }
    let backend = Arc::new(ScriptedBackend::new("lattice", rules));
    let engine = DebateEngine::new(Arc::new(bundle(backend))).with_t_max(2);
    let mut exits = Vec::new();
    for (case, combo) in combos.iter().enumerate() {
        let t = engine
            .detect(&sample(case, Label::Unknown, None))
            .map_err(|f| f.error)?;
        let oracle_exit = combo.iter().all(|v| *v == combo[0]);
        ensure!(
            (t.transitions[0] == TransitionState::Exit) == oracle_exit,
            "combo {combo:?}: transition {:?}",
            t.transitions[0]
        );
        ensure!(
            oracle_exit == (t.rounds.len() == 1),
            "combo {combo:?}: {} rounds",
            t.rounds.len()
        );
        if oracle_exit {
            exits.push(combo.iter().map(|v| v.as_u8()).collect::<Vec<_>>());
        }
    }
    ensure!(
        exits == vec![vec![0, 0, 0], vec![1, 1, 1]],
        "exiting combos {exits:?}"
    );
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "2 of 8 combinations exit, 6 debate ({elapsed:.0?})"
    ))
}

fn c2_default_benign() -> Check {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let mixed = mixed_triples();
    let mut rules = Vec::new();
    for case in 0..100 {
        let script: Vec<[Verdict; 3]> = (0..3).map(|_| *mixed.choose(&mut rng).unwrap()).collect();
        rules.extend(script_rules(case, &script));
    }
    let backend = Arc::new(ScriptedBackend::new("stubborn", rules));
    let engine = DebateEngine::new(Arc::new(bundle(backend))).with_t_max(2);
    let samples: Vec<_> = (0..100).map(|c| sample(c, Label::Unknown, None)).collect();
    let batch = engine
        .run_batch(&samples, 8, None)
        .map_err(|e| e.to_string())?;
    ensure!(
        batch.failures().is_empty(),
        "failures: {:?}",
        batch.failed_ids()
    );
    for t in batch.transcripts() {
        ensure!(
            t.final_verdict.verdict == Verdict::Benign,
            "{}: verdict {}",
            t.sample_id,
            t.final_verdict.verdict
        );
        ensure!(
            t.rounds.len() == 3,
            "{}: {} rounds",
            t.sample_id,
            t.rounds.len()
        );
        ensure!(
            t.final_verdict.reason == FinalReason::DefaultAfterMaxRounds,
            "{}: {}",
            t.sample_id,
            t.final_verdict.reason
        );
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "100/100 defaulted to benign after 3 rounds ({elapsed:.0?})"
    ))
}

fn c3_round_isolation() -> Check {
    let mut rng = StdRng::seed_from_u64(3);
    let mixed = mixed_triples();
    let mut rules = Vec::new();
    for case in 0..20 {
        let script: Vec<[Verdict; 3]> = (0..3).map(|_| *mixed.choose(&mut rng).unwrap()).collect();
        rules.extend(script_rules(case, &script));
    }
    let backend = Arc::new(ScriptedBackend::new("isolation", rules));
    let engine = DebateEngine::new(Arc::new(bundle(backend.clone()))).with_t_max(2);
    let samples: Vec<_> = (0..20).map(|c| sample(c, Label::Unknown, None)).collect();
    let batch = engine
        .run_batch(&samples, 4, None)
        .map_err(|e| e.to_string())?;
    ensure!(
        batch.failures().is_empty(),
        "failures: {:?}",
        batch.failed_ids()
    );

    let mut audited = 0;
    for req in backend.requests() {
        let text = req.full_text();
        let Some(round) = (1..=2u32).find(|t| req.last_text().starts_with(&phase(*t))) else {
            continue;
        };
        let case = (0..20)
            .find(|c| text.contains(&marker(*c)))
            .ok_or("request without a case marker")?;
        let me = Paradigm::ALL
            .into_iter()
            .find(|p| req.system_text().starts_with(&format!("Agent: {p}")))
            .ok_or("request without an agent")?;
        for p in Paradigm::ALL {
            for t in round..=2 {
                ensure!(
                    !text.contains(&sentinel(case, p, t)),
                    "case {case} {me} round {round} prompt contains {p} round {t} output"
                );
            }
            // The previous round is visible, so the audit is not vacuous.
            ensure!(
                text.contains(&sentinel(case, p, round - 1)),
                "case {case} {me} round {round} prompt lacks {p} round {}",
                round - 1
            );
        }
        audited += 1;
    }
    ensure!(
        audited == 20 * 2 * 3,
        "audited {audited} debate prompts, expected 120"
    );
    Ok(format!(
        "{audited} debate prompts carry no same-round content"
    ))
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn c4_retrieval_exactness() -> Check {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(4);
    let dim = 64;
    let mut tie_cases = 0;
    for trial in 0..200 {
        let n = rng.random_range(1..=1000);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            // A fifth of the entries repeat an earlier vector to force ties.
            if !vectors.is_empty() && rng.random_bool(0.2) {
                let j = rng.random_range(0..vectors.len());
                vectors.push(vectors[j].clone());
            } else {
                vectors.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            }
        }
        let mut index = RetrievalIndex::new(dim, "acceptance");
        for (i, v) in vectors.iter().enumerate() {
            index
                .push(format!("e{i}"), EmbeddingVector::new(v.clone()).unwrap())
                .map_err(|e| e.to_string())?;
        }
        let query: Vec<f64> = if rng.random_bool(0.5) {
            vectors[rng.random_range(0..n)].clone()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let q = EmbeddingVector::new(query.clone()).unwrap();
        for k in [1, 5] {
            let got = index.top_k(&q, k).map_err(|e| e.to_string())?;
            let mut oracle: Vec<(usize, f64)> = vectors
                .iter()
                .map(|v| cosine_oracle(&query, v))
                .enumerate()
                .collect();
            // Descending score; equal scores in insertion order.
            oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            oracle.truncate(k);
            let got_ids: Vec<&str> = got.iter().map(|h| h.entry_id.as_str()).collect();
            let want_ids: Vec<String> = oracle.iter().map(|(i, _)| format!("e{i}")).collect();
            ensure!(
                got_ids == want_ids,
                "trial {trial} k={k}: {got_ids:?} != {want_ids:?}"
            );
            for (h, (_, s)) in got.iter().zip(&oracle) {
                ensure!(
                    (h.score - s).abs() <= 1e-12,
                    "trial {trial}: score {} vs {s}",
                    h.score
                );
            }
            if got.windows(2).any(|w| w[0].score == w[1].score) {
                tie_cases += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "400 queries match brute force, {tie_cases} with ties ({elapsed:.0?})"
    ))
}

fn random_preds(rng: &mut StdRng, n: usize) -> Vec<PairedPrediction> {
    (0..n)
        .map(|i| {
            PairedPrediction::new(
                format!("p{i}"),
                verdict(rng.random_bool(0.5)),
                verdict(rng.random_bool(0.5)),
            )
        })
        .collect()
}

fn c5_pair_accuracy_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(5);
    for trial in 0..500 {
        let n = rng.random_range(1..=60);
        let preds = random_preds(&mut rng, n);
        let hits = preds
            .iter()
            .filter(|p| p.y_hat_v.as_u8() == 1 && p.y_hat_f.as_u8() == 0)
            .count();
        let oracle = hits as f64 / n as f64;
        ensure!(
            pair_accuracy(&preds) == oracle,
            "trial {trial}: {} != {oracle}",
            pair_accuracy(&preds)
        );
        let correct = preds
            .iter()
            .map(|p| usize::from(p.y_hat_v.as_u8() == 1) + usize::from(p.y_hat_f.as_u8() == 0))
            .sum::<usize>();
        let acc = correct as f64 / (2 * n) as f64;
        let r = classification_metrics(&preds);
        ensure!(
            r.accuracy == acc,
            "trial {trial}: accuracy {} != {acc}",
            r.accuracy
        );
        ensure!(
            r.pair_acc <= r.accuracy,
            "trial {trial}: pair_acc above accuracy"
        );
        ensure!(
            r.pair_acc >= 2.0 * r.accuracy - 1.0 - 1e-15,
            "trial {trial}: pair_acc below 2·acc − 1"
        );
    }
    Ok("500 instances match enumeration and bounds".into())
}

fn c6_metric_algebra() -> Check {
    let mut rng = StdRng::seed_from_u64(6);
    let mut f1_checked = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=80);
        let preds = random_preds(&mut rng, n);
        let r = classification_metrics(&preds);
        let c = r.counts;
        let (tp, fp, tn, fnn) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
        let missed_v = preds
            .iter()
            .filter(|p| p.y_hat_v == Verdict::Benign)
            .count() as f64;
        let flagged_f = preds
            .iter()
            .filter(|p| p.y_hat_f == Verdict::Vulnerable)
            .count() as f64;
        ensure!(
            tp + fnn == n as f64 && tn + fp == n as f64,
            "trial {trial}: unbalanced counts"
        );
        ensure!(
            (r.recall - (1.0 - missed_v / n as f64)).abs() <= 1e-12,
            "trial {trial}: recall balance"
        );
        ensure!(
            (r.fpr - flagged_f / n as f64).abs() <= 1e-12,
            "trial {trial}: fpr balance"
        );
        if tp + fp > 0.0 {
            ensure!(
                (r.precision - tp / (tp + fp)).abs() <= 1e-12,
                "trial {trial}: precision"
            );
        }
        if r.precision + r.recall > 0.0 {
            let harmonic = 2.0 * r.precision * r.recall / (r.precision + r.recall);
            ensure!(
                (r.f1 - harmonic).abs() <= 1e-12,
                "trial {trial}: f1 {} vs {harmonic}",
                r.f1
            );
            let lo = r.precision.min(r.recall);
            let hi = (r.precision + r.recall) / 2.0;
            ensure!(
                lo - 1e-12 <= r.f1 && r.f1 <= hi + 1e-12,
                "trial {trial}: f1 {} outside [{lo}, {hi}]",
                r.f1
            );
            f1_checked += 1;
        } else {
            ensure!(r.f1 == 0.0, "trial {trial}: undefined f1 not zero");
        }
    }
    Ok(format!(
        "1000 confusion matrices, {f1_checked} with defined F1"
    ))
}

fn c7_case_study() -> Check {
    use Verdict::{Benign as B, Vulnerable as V};
    let rules = script_rules(0, &[[B, B, V], [V, V, V]]);
    let backend: Arc<dyn Backend> = Arc::new(ScriptedBackend::new("case", rules));
    let s = sample(0, Label::Vulnerable, None);
    let debate = DebateEngine::new(Arc::new(bundle(backend.clone()))).with_t_max(2);
    let t = debate.detect(&s).map_err(|f| f.error)?;
    ensure!(
        t.final_verdict.verdict == V,
        "debate verdict {}",
        t.final_verdict.verdict
    );
    ensure!(
        t.final_verdict.reason == FinalReason::UnanimousAfterDebate { round: 1 },
        "debate reason {}",
        t.final_verdict.reason
    );
    let vote = DebateEngine::new(Arc::new(bundle(backend))).with_t_max(0);
    let m = vote.detect(&s).map_err(|f| f.error)?;
    ensure!(
        m.final_verdict.verdict == B,
        "majority verdict {}",
        m.final_verdict.verdict
    );
    ensure!(
        m.rounds.len() == 1,
        "majority arm ran {} rounds",
        m.rounds.len()
    );
    Ok("debate flips to vulnerable in round 1; majority vote says benign".into())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn c8_determinism() -> Check {
    use Verdict::{Benign as B, Vulnerable as V};
    let mut samples = Vec::new();
    let mut rules = Vec::new();
    let scripts: [[[Verdict; 3]; 2]; 3] = [
        [[V, V, V], [B, B, B]],
        [[B, V, V], [V, V, V]],
        [[V, B, V], [V, B, V]],
    ];
    for p in 0..6 {
        let pair = format!("pair{p}");
        for (k, label) in [Label::Vulnerable, Label::Benign].into_iter().enumerate() {
            let case = 2 * p + k;
            samples.push(sample(case, label, Some(&pair)));
            let script = scripts[case % 3];
            rules.extend(script_rules(case, &[script[0], script[1], script[1]]));
        }
    }
    let pairs = pair_samples(&samples).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = dir.path().join("cache");
    let mut calls = Vec::new();
    for run in 0..2 {
        let scripted = Arc::new(ScriptedBackend::new("det", rules.clone()));
        let cached: Arc<dyn Backend> = Arc::new(CachedBackend::new(scripted.clone(), &cache));
        let engine = DebateEngine::new(Arc::new(bundle(cached))).with_t_max(2);
        evaluate(
            &engine,
            &samples,
            &pairs,
            4,
            Some(&dir.path().join(format!("run{run}"))),
        )
        .map_err(|e| e.to_string())?;
        calls.push(scripted.call_count());
    }
    for f in [
        "transcripts.jsonl",
        "report.jsonl",
        "report.txt",
        "predictions.jsonl",
    ] {
        let a = read(&dir.path().join("run0").join(f))?;
        let b = read(&dir.path().join("run1").join(f))?;
        ensure!(a == b, "{f} differs between runs");
    }
    ensure!(calls[0] > 0, "first run made no backend calls");
    ensure!(calls[1] == 0, "second run made {} backend calls", calls[1]);
    Ok(format!("byte-identical outputs; {} calls then 0", calls[0]))
}

fn c9_leak_filter() -> Check {
    let eval: Vec<CodeSample> = (0..10)
        .map(|i| CodeSample {
            id: format!("eval{i}"),
            code: format!("int eval_fn{i}(int *a, int n) {{\n    if (n > {i}) return a[n];\n    return 0;\n}}"),
            label: Label::Unknown,
            pair_id: None,
            cwe_ids: vec![],
            language_hint: "C".into(),
        })
        .collect();
    let clean = |i: usize| InductivePair {
        pair_id: format!("clean{i}"),
        vuln_code: format!("void clean{i}(char *s) {{ char b[{i}]; strcpy(b, s); }}"),
        fix_code: format!("void clean{i}(char *s) {{ char b[{i}]; strncpy(b, s, {i}); }}"),
        origin: "synthetic".into(),
    };
    let mut corpus: Vec<InductivePair> = (1..=12).map(clean).collect();
    let mut expected: HashSet<(String, String, PairSide)> = HashSet::new();
    // Verbatim copies: two on the vulnerable side, one on the fixed side.
    for (pid, e, side) in [
        ("leak-v0", 0, PairSide::Vuln),
        ("leak-v3", 3, PairSide::Vuln),
        ("leak-f5", 5, PairSide::Fix),
    ] {
        let other = format!("int other_{pid}(void) {{ return {e}; }}").replace('-', "_");
        let (vuln_code, fix_code) = match side {
            PairSide::Vuln => (eval[e].code.clone(), other),
            PairSide::Fix => (other, eval[e].code.clone()),
        };
        corpus.push(InductivePair {
            pair_id: pid.into(),
            vuln_code,
            fix_code,
            origin: "synthetic".into(),
        });
        expected.insert((pid.into(), eval[e].id.clone(), side));
    }
    // Layout and comment variants.
    let spaced = eval[7]
        .code
        .replace("    ", "\t\t")
        .replace(" {\n", "\n{\n  // copied from upstream\n");
    corpus.push(InductivePair {
        pair_id: "leak-ws7".into(),
        vuln_code: spaced,
        fix_code: "int patched7(void) { return 0; }".into(),
        origin: "synthetic".into(),
    });
    expected.insert(("leak-ws7".into(), "eval7".into(), PairSide::Vuln));
    let commented = format!(
        "/* imported */ {}",
        eval[9].code.replace("return 0;", "return 0; /* default */")
    );
    corpus.push(InductivePair {
        pair_id: "leak-cm9".into(),
        vuln_code: "int before9(void) { return 1; }".into(),
        fix_code: commented,
        origin: "synthetic".into(),
    });
    expected.insert(("leak-cm9".into(), "eval9".into(), PairSide::Fix));
    corpus.shuffle(&mut StdRng::seed_from_u64(9));

    let out = leak_filter(corpus, &eval);
    ensure!(
        out.removed.len() == 5,
        "removed {} pairs",
        out.removed.len()
    );
    ensure!(out.kept.len() == 12, "kept {} pairs", out.kept.len());
    let got: HashSet<(String, String, PairSide)> = out
        .audit_records()
        .into_iter()
        .map(|r| (r.pair_id, r.eval_id, r.side))
        .collect();
    ensure!(got == expected, "evidence {got:?}");
    Ok("5 of 17 pairs removed with matching evidence".into())
}

fn c10_context_format() -> Check {
    let embedder = HashEmbedder::new(64);
    let target_code =
        "int parse_header(struct buf *b, size_t len) { return copy_field(b->data, len); }";
    let callers: Vec<ContextFunction> = [
        "{ return parse_header(&pkt->buf, pkt->len); }",
        "{ struct buf b; init(&b); parse_header(&b, 0); }",
        "{ for (i = 0; i < n; i++) parse_header(bufs[i], lens[i]); }",
        "{ if (!b) return -1; return parse_header(b, len); }",
        "{ log(\"x\"); parse_header(b, 4); }",
        "{ return parse_header(copy_field(a, 1), 2); }",
        "{ struct buf *b = alloc(); size_t len = size(b); parse_header(b, len); free(b); }",
    ]
    .iter()
    .enumerate()
    .map(|(i, body)| ContextFunction::new(format!("int caller_{i}(void)"), *body, false).unwrap())
    .collect();
    let callees = vec![
        ContextFunction::new(
            "int copy_field(char *dst, size_t len)",
            "{ memcpy(dst, src, len); return 0; }",
            false,
        )
        .unwrap(),
        ContextFunction::new("void log(const char *msg)", "", true).unwrap(),
    ];
    let target = CodeSample {
        id: "target".into(),
        code: target_code.into(),
        label: Label::Unknown,
        pair_id: None,
        cwe_ids: vec![],
        language_hint: "C".into(),
    };
    let ctx = FunctionContext {
        target,
        callers: callers.clone(),
        callees: callees.clone(),
    };
    let selected = select_context(ctx, &embedder, 5).map_err(|e| e.to_string())?;

    // Oracle: score every candidate independently and keep the best five.
    let tvec = embedder.embed_raw(target_code).map_err(|e| e.to_string())?;
    let rank = |fs: &[ContextFunction]| -> Result<Vec<ContextFunction>, String> {
        let mut scored = Vec::new();
        for (i, f) in fs.iter().enumerate() {
            let text = if f.body().is_empty() {
                f.signature().to_owned()
            } else {
                format!("{}\n{}", f.signature(), f.body())
            };
            let v = embedder.embed_raw(&text).map_err(|e| e.to_string())?;
            scored.push((cosine_oracle(&tvec, &v), i));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(5)
            .map(|(_, i)| fs[i].clone())
            .collect())
    };
    let want_callers = rank(&callers)?;
    let want_callees = rank(&callees)?;
    ensure!(
        selected.callers == want_callers,
        "caller selection differs from brute force"
    );
    ensure!(
        selected.callees == want_callees,
        "callee selection differs from brute force"
    );
    ensure!(
        selected.callers.len() == 5 && selected.callees.len() == 2,
        "kept {}/{}",
        selected.callers.len(),
        selected.callees.len()
    );

    let entry = |f: &ContextFunction| {
        if f.body().is_empty() {
            f.signature().to_owned()
        } else {
            format!("{}\n{}", f.signature(), f.body())
        }
    };
    let join = |fs: &[ContextFunction]| fs.iter().map(entry).collect::<Vec<_>>().join("\n\n");
    let expected = format!(
        "[Caller Context]\n{}\n\n[Target Function]\n{target_code}\n\n[Callee Context]\n{}\n",
        join(&want_callers),
        join(&want_callees)
    );
    let got = serialize_context(&selected);
    ensure!(
        got == expected,
        "serialization differs:\n{got}\n--- expected ---\n{expected}"
    );
    let markers: Vec<usize> = ["[Caller Context]", "[Target Function]", "[Callee Context]"]
        .iter()
        .map(|m| got.matches(m).count())
        .collect();
    ensure!(markers == vec![1, 1, 1], "marker counts {markers:?}");
    Ok("5 of 7 callers and 2 of 2 callees serialized byte-exactly".into())
}

/// Returns `None` (skip) when no live backend is configured.
fn c11_live_smoke() -> Option<Check> {
    let id = std::env::var("VULDEBATE_LIVE_BACKEND").ok()?;
    let key = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect::<String>();
    let var = |s: &str| std::env::var(format!("VULDEBATE_{key}_{s}")).ok();
    Some((|| {
        let url = var("URL").ok_or(format!("VULDEBATE_{key}_URL is not set"))?;
        let model = var("MODEL").unwrap_or_else(|| id.clone());
        let http = HttpBackend::new(id.clone(), url, model, var("API_KEY"));
        let backend: Arc<dyn Backend> = Arc::new(Retrying::new(http, Duration::from_secs(2)));
        let engine = DebateEngine::new(Arc::new(bundle(backend))).with_t_max(2);
        let pair = [
            CodeSample {
                id: "live-v".into(),
                code: "void greet(const char *name) {\n  char buf[16];\n  strcpy(buf, name);\n  printf(\"%s\\n\", buf);\n}".into(),
                label: Label::Vulnerable,
                pair_id: Some("live".into()),
                cwe_ids: vec!["CWE-787".into()],
                language_hint: "C".into(),
            },
            CodeSample {
                id: "live-f".into(),
                code: "void greet(const char *name) {\n  char buf[16];\n  snprintf(buf, sizeof buf, \"%s\", name);\n  printf(\"%s\\n\", buf);\n}".into(),
                label: Label::Benign,
                pair_id: Some("live".into()),
                cwe_ids: vec!["CWE-787".into()],
                language_hint: "C".into(),
            },
        ];
        let mut verdicts = Vec::new();
        for s in &pair {
            let t: DebateTranscript = engine.detect(s).map_err(|f| f.error)?;
            let recovered = t
                .rounds
                .iter()
                .flatten()
                .filter(|o| o.parse_recovered)
                .count();
            verdicts.push(format!(
                "{}={} ({} recovered parses)",
                s.id, t.final_verdict.verdict, recovered
            ));
        }
        Ok(verdicts.join(", "))
    })())
}

fn run(number: u8, name: &str, check: fn() -> Check) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {number:>2} {name}: {detail}");
            true
        }
        Err(why) => {
            println!("FAIL criterion {number:>2} {name}: {why}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and similar harness flags are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let checks: [Criterion; 10] = [
        (1, "consensus lattice", c1_consensus_lattice),
        (2, "default benign", c2_default_benign),
        (3, "round isolation", c3_round_isolation),
        (4, "retrieval exactness", c4_retrieval_exactness),
        (5, "pair accuracy oracle", c5_pair_accuracy_oracle),
        (6, "metric algebra", c6_metric_algebra),
        (7, "case-study regression", c7_case_study),
        (8, "determinism", c8_determinism),
        (9, "leak filter", c9_leak_filter),
        (10, "context format", c10_context_format),
    ];
    let mut ok = true;
    for (n, name, check) in checks {
        ok &= run(n, name, check);
    }
    match c11_live_smoke() {
        None => println!("SKIP criterion 11 live smoke test: set VULDEBATE_LIVE_BACKEND to run it"),
        Some(Ok(detail)) => println!("PASS criterion 11 live smoke test: {detail}"),
        Some(Err(why)) => {
            println!("FAIL criterion 11 live smoke test: {why}");
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
