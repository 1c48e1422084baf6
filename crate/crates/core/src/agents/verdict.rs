//! Verdict extraction from model output.
//!
//! Every agent prompt demands a final line `VERDICT: VULNERABLE` or
//! `VERDICT: BENIGN`. The last such line wins; markdown emphasis around it
//! is tolerated.

use crate::model::Verdict;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no verdict line in response")]
pub struct Unparseable;

/// Section headers the abductive prompt requires, in order.
pub const ABDUCTIVE_SECTIONS: [&str; 4] = [
    "Hypotheses",
    "Reasoning Traces",
    "Self-Critique",
    "Conclusion",
];

fn verdict_on_line(line: &str) -> Option<Verdict> {
    let cleaned = line
        .trim()
        .trim_matches(|c: char| matches!(c, '*' | '#' | '`' | '_' | '>') || c.is_whitespace());
    let (head, tail) = cleaned.split_once(':')?;
    if !head.trim().eq_ignore_ascii_case("verdict") {
        return None;
    }
    let word: String = tail
        .trim()
        .trim_matches(|c: char| matches!(c, '*' | '`' | '_'))
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    if word.eq_ignore_ascii_case("vulnerable") {
        Some(Verdict::Vulnerable)
    } else if word.eq_ignore_ascii_case("benign") {
        Some(Verdict::Benign)
    } else {
        None
    }
}

/// Returns the verdict of the last verdict line and the text preceding it.
/// When that text is blank the whole response becomes the explanation.
pub fn parse_verdict(response: &str) -> Result<(Verdict, String), Unparseable> {
    let lines: Vec<&str> = response.lines().collect();
    let (pos, verdict) = lines
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, l)| verdict_on_line(l).map(|v| (i, v)))
        .ok_or(Unparseable)?;
    let before = lines[..pos].join("\n");
    let explanation = if before.trim().is_empty() {
        response.trim().to_owned()
    } else {
        before.trim().to_owned()
    };
    Ok((verdict, explanation))
}

/// Required abductive section headers missing from `response`.
pub fn missing_abductive_sections(response: &str) -> Vec<&'static str> {
    ABDUCTIVE_SECTIONS
        .iter()
        .copied()
        .filter(|section| {
            !response.lines().any(|l| {
                let l = l
                    .trim()
                    .trim_start_matches('#')
                    .trim()
                    .trim_matches('*')
                    .trim();
                l.len() >= section.len() && l[..section.len()].eq_ignore_ascii_case(section)
            })
        })
        .collect()
}
