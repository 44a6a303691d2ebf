//! Response grammar and tolerant parsing of backend text into a
//! [`ReasoningTrace`].
//!
//! A clean response carries four labelled sections in order:
//!
//! ```text
//! DECOMPOSITION: <targets vs. background>
//! INITIAL: <first judgment>
//! COUNTERFACTUAL: <the opposite reading, tested>
//! FINAL: YES | NO
//! ```
//!
//! Markers are matched case-sensitively and split at their first occurrence.
//! When the sections are missing or out of order the parser falls back to the
//! last standalone yes/no word in the tail of the response (`Recovered`). A
//! trailing hedge word (maybe, unsure, ...) or no answer word at all yields
//! `Unparseable`. Parsing never fails.

use thiserror::Error;

use crate::model::{Answer, ParseStatus, ReasoningTrace, Verdict};

pub const DECOMPOSITION: &str = "DECOMPOSITION:";
pub const INITIAL: &str = "INITIAL:";
pub const COUNTERFACTUAL: &str = "COUNTERFACTUAL:";
pub const FINAL: &str = "FINAL:";

pub const MARKERS: [&str; 4] = [DECOMPOSITION, INITIAL, COUNTERFACTUAL, FINAL];

/// Characters at the end of a response searched by the fallback rule.
pub const DEFAULT_FALLBACK_WINDOW: usize = 200;

const HEDGES: [&str; 6] = [
    "maybe",
    "unsure",
    "uncertain",
    "unclear",
    "perhaps",
    "possibly",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("only clean traces can be rendered (status {0:?})")]
    NotClean(ParseStatus),
    #[error("section {0} is empty")]
    EmptySection(&'static str),
    #[error("section {0} has leading or trailing whitespace")]
    Untrimmed(&'static str),
    #[error("section {section} contains the marker {marker}")]
    ContainsMarker {
        section: &'static str,
        marker: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseGrammar {
    pub fallback_window: usize,
}

impl Default for ResponseGrammar {
    fn default() -> Self {
        Self {
            fallback_window: DEFAULT_FALLBACK_WINDOW,
        }
    }
}

/// What each section is expected to hold, in prompt wording.
pub fn section_hint(marker: &str) -> &'static str {
    match marker {
        DECOMPOSITION => "the target objects and the background elements you separated",
        INITIAL => "your initial qualitative judgment",
        COUNTERFACTUAL => {
            "the opposite interpretation you tested and what the image actually shows"
        }
        FINAL => "YES or NO",
        _ => "",
    }
}

impl ResponseGrammar {
    /// Text of the answer-format prompt block.
    pub fn format_instructions(&self) -> String {
        let mut out = String::from(
            "Respond in plain text using exactly these four labelled sections, in this order, each starting on its own line:\n",
        );
        for marker in MARKERS {
            out.push_str(&format!("{marker} {}\n", section_hint(marker)));
        }
        out.push_str(&format!(
            "The {FINAL} line must contain only the word YES or the word NO."
        ));
        out
    }

    /// Instructions for a single section, used by multi-turn exchanges.
    pub fn section_instructions(&self, markers: &[&str]) -> String {
        let mut out = String::from("Respond using exactly these labelled sections:\n");
        for marker in markers {
            out.push_str(&format!("{marker} {}\n", section_hint(marker)));
        }
        if markers.contains(&FINAL) {
            out.push_str(&format!(
                "The {FINAL} line must contain only the word YES or the word NO."
            ));
        }
        out.trim_end().to_string()
    }

    /// Appended to the prompt when a previous attempt could not be parsed.
    pub fn format_reminder(&self) -> String {
        format!(
            "FORMAT REMINDER: the previous reply could not be read. Reply again with exactly the sections {} in that order. End with a {FINAL} line containing only YES or NO, with nothing after it.",
            MARKERS.join(" ")
        )
    }

    pub fn parse(&self, text: &str) -> ReasoningTrace {
        if let Some(trace) = parse_clean(text) {
            return trace;
        }
        let sections = best_effort_sections(text);
        let final_verdict = match fallback_answer(text, self.fallback_window) {
            Some(answer) => Verdict::recovered(answer),
            None => Verdict::unparseable(),
        };
        ReasoningTrace {
            decomposition: sections[0].clone(),
            initial_judgment: sections[1].clone(),
            counterfactual: sections[2].clone(),
            final_verdict,
            raw: text.to_string(),
        }
    }

    pub fn render(&self, trace: &ReasoningTrace) -> Result<String, RenderError> {
        let status = trace.parse_status();
        let answer = match (status, trace.final_verdict.answer()) {
            (ParseStatus::Clean, Some(a)) => a,
            _ => return Err(RenderError::NotClean(status)),
        };
        let sections = [
            (DECOMPOSITION, trace.decomposition.as_str()),
            (INITIAL, trace.initial_judgment.as_str()),
            (COUNTERFACTUAL, trace.counterfactual.as_str()),
        ];
        for (name, body) in sections {
            if body.trim().is_empty() {
                return Err(RenderError::EmptySection(name));
            }
            if body.trim() != body {
                return Err(RenderError::Untrimmed(name));
            }
            if let Some(marker) = MARKERS.into_iter().find(|m| body.contains(m)) {
                return Err(RenderError::ContainsMarker {
                    section: name,
                    marker,
                });
            }
        }
        Ok(format!(
            "{DECOMPOSITION} {}\n{INITIAL} {}\n{COUNTERFACTUAL} {}\n{FINAL} {}",
            trace.decomposition,
            trace.initial_judgment,
            trace.counterfactual,
            answer.token()
        ))
    }
}

pub fn parse_response(text: &str) -> ReasoningTrace {
    ResponseGrammar::default().parse(text)
}

pub fn render_trace(trace: &ReasoningTrace) -> Result<String, RenderError> {
    ResponseGrammar::default().render(trace)
}

/// Builds a clean trace whose `raw` is its own canonical rendering.
pub fn canonical_trace(
    decomposition: &str,
    initial_judgment: &str,
    counterfactual: &str,
    answer: Answer,
) -> Result<ReasoningTrace, RenderError> {
    let mut trace = ReasoningTrace {
        decomposition: decomposition.to_string(),
        initial_judgment: initial_judgment.to_string(),
        counterfactual: counterfactual.to_string(),
        final_verdict: Verdict::clean(answer),
        raw: String::new(),
    };
    trace.raw = render_trace(&trace)?;
    Ok(trace)
}

fn parse_clean(text: &str) -> Option<ReasoningTrace> {
    let mut bounds = Vec::with_capacity(4);
    let mut from = 0;
    for marker in MARKERS {
        let at = from + text[from..].find(marker)?;
        bounds.push((at, at + marker.len()));
        from = at + marker.len();
    }
    let body = |i: usize| text[bounds[i].1..bounds[i + 1].0].trim();
    let (decomposition, initial, counterfactual) = (body(0), body(1), body(2));
    let final_body = text[bounds[3].1..].trim();
    if [decomposition, initial, counterfactual]
        .iter()
        .any(|b| b.is_empty())
    {
        return None;
    }
    if MARKERS.iter().any(|m| final_body.contains(m)) {
        return None;
    }
    let answer = answer_token(final_body)?;
    Some(ReasoningTrace {
        decomposition: decomposition.to_string(),
        initial_judgment: initial.to_string(),
        counterfactual: counterfactual.to_string(),
        final_verdict: Verdict::clean(answer),
        raw: text.to_string(),
    })
}

/// YES or NO, case-insensitive, optionally followed by `.`/`!` and spaces.
pub(crate) fn answer_token(body: &str) -> Option<Answer> {
    let token = body
        .trim_end_matches(|c: char| c == '.' || c == '!' || c.is_whitespace())
        .trim_start();
    if token.eq_ignore_ascii_case("yes") {
        Some(Answer::Yes)
    } else if token.eq_ignore_ascii_case("no") {
        Some(Answer::No)
    } else {
        None
    }
}

fn best_effort_sections(text: &str) -> [String; 3] {
    let found: Vec<(usize, &str)> = MARKERS
        .iter()
        .filter_map(|m| text.find(m).map(|at| (at, *m)))
        .collect();
    let mut out: [String; 3] = Default::default();
    for (slot, marker) in MARKERS[..3].iter().enumerate() {
        let Some(&(start, _)) = found.iter().find(|(_, m)| m == marker) else {
            continue;
        };
        let body_start = start + marker.len();
        let end = found
            .iter()
            .map(|&(at, _)| at)
            .filter(|&at| at >= body_start)
            .min()
            .unwrap_or(text.len());
        out[slot] = text[body_start..end].trim().to_string();
    }
    out
}

/// Last standalone yes/no word within the final `window` characters,
/// ignoring trailing whitespace and punctuation.
///
/// Returns `None` when there is no such word or when a hedge word comes after
/// the last one.
pub fn fallback_answer(text: &str, window: usize) -> Option<Answer> {
    // trailing whitespace and punctuation do not use up the window
    let text = text.trim_end_matches(|c: char| !c.is_alphanumeric());
    let start = text
        .char_indices()
        .rev()
        .nth(window.saturating_sub(1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut tail = &text[start..];
    if start > 0 {
        let cut_mid_word = text[..start]
            .chars()
            .next_back()
            .is_some_and(char::is_alphanumeric)
            && tail.chars().next().is_some_and(char::is_alphanumeric);
        if cut_mid_word {
            let skip = tail
                .find(|c: char| !c.is_alphanumeric())
                .unwrap_or(tail.len());
            tail = &tail[skip..];
        }
    }
    for word in tail
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .rev()
    {
        if word.eq_ignore_ascii_case("yes") {
            return Some(Answer::Yes);
        }
        if word.eq_ignore_ascii_case("no") {
            return Some(Answer::No);
        }
        if HEDGES.iter().any(|h| word.eq_ignore_ascii_case(h)) {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANONICAL: &str = "DECOMPOSITION: two segments, one occluder\nINITIAL: appear misaligned\nCOUNTERFACTUAL: extending both, they meet\nFINAL: YES";

    #[test]
    fn canonical_fixture_is_clean() {
        let t = parse_response(CANONICAL);
        assert_eq!(t.parse_status(), ParseStatus::Clean);
        assert_eq!(t.final_verdict.answer(), Some(Answer::Yes));
        assert_eq!(t.decomposition, "two segments, one occluder");
        assert_eq!(t.initial_judgment, "appear misaligned");
        assert_eq!(t.counterfactual, "extending both, they meet");
        assert_eq!(t.raw, CANONICAL);
        assert_eq!(render_trace(&t).unwrap(), CANONICAL);
    }

    #[test]
    fn empty_is_unparseable() {
        let t = parse_response("");
        assert_eq!(t.parse_status(), ParseStatus::Unparseable);
        assert_eq!(t.final_verdict.answer(), None);
    }

    #[test]
    fn rambling_recovers() {
        let t = parse_response(
            "well, the lines wiggle a bit and I looked for a while... the answer is no.",
        );
        assert_eq!(t.parse_status(), ParseStatus::Recovered);
        assert_eq!(t.final_verdict.answer(), Some(Answer::No));
    }

    #[test]
    fn hedges_are_unparseable() {
        assert_eq!(
            parse_response("DECOMPOSITION: a\nINITIAL: b\nCOUNTERFACTUAL: c\nFINAL: MAYBE")
                .parse_status(),
            ParseStatus::Unparseable
        );
        assert_eq!(
            parse_response("Yes or no? I am unsure.").parse_status(),
            ParseStatus::Unparseable
        );
    }

    #[test]
    fn disordered_sections_recover() {
        let t = parse_response("FINAL: NO\nDECOMPOSITION: a\nINITIAL: b\nCOUNTERFACTUAL: c");
        assert_eq!(t.parse_status(), ParseStatus::Recovered);
        assert_eq!(t.counterfactual, "c");
        let t = parse_response("INITIAL: b\nDECOMPOSITION: a\nCOUNTERFACTUAL: c\nFINAL: NO");
        assert_eq!(t.parse_status(), ParseStatus::Recovered);
        assert_eq!(t.final_verdict.answer(), Some(Answer::No));
        assert_eq!(t.decomposition, "a");
        assert_eq!(t.initial_judgment, "b");
    }

    #[test]
    fn empty_section_is_not_clean() {
        let t = parse_response("DECOMPOSITION:\nINITIAL: b\nCOUNTERFACTUAL: c\nFINAL: yes.");
        assert_eq!(t.parse_status(), ParseStatus::Recovered);
        assert_eq!(t.final_verdict.answer(), Some(Answer::Yes));
    }

    #[test]
    fn echoed_marker_splits_at_first_occurrence() {
        let t =
            parse_response("DECOMPOSITION: a INITIAL: b\nINITIAL: c\nCOUNTERFACTUAL: d\nFINAL: No");
        assert_eq!(t.parse_status(), ParseStatus::Clean);
        assert_eq!(t.decomposition, "a");
        assert_eq!(t.initial_judgment, "b\nINITIAL: c");
        assert!(render_trace(&t).is_err());
    }

    #[test]
    fn marker_after_final_is_not_clean() {
        let t = parse_response(
            "DECOMPOSITION: a\nINITIAL: b\nCOUNTERFACTUAL: c\nFINAL: YES\nINITIAL: again no",
        );
        assert_eq!(t.parse_status(), ParseStatus::Recovered);
        assert_eq!(t.final_verdict.answer(), Some(Answer::No));
    }

    #[test]
    fn fallback_window_bounds() {
        let text = format!("yes {}", "x ".repeat(150));
        assert_eq!(fallback_answer(&text, 200), None);
        assert_eq!(fallback_answer(&text, 400), Some(Answer::Yes));
        // a window boundary inside "piano" must not expose "no"
        let text = format!("piano{}", " ".repeat(10));
        assert_eq!(fallback_answer(&text, 12), None);
        assert_eq!(fallback_answer("know nothing, not now", 200), None);
    }

    #[test]
    fn render_errors() {
        let mut t = parse_response(CANONICAL);
        t.decomposition.clear();
        assert_eq!(
            render_trace(&t),
            Err(RenderError::EmptySection(DECOMPOSITION))
        );
        let t = parse_response("the answer is yes");
        assert!(matches!(render_trace(&t), Err(RenderError::NotClean(_))));
        assert!(matches!(
            canonical_trace("a FINAL: b", "c", "d", Answer::No),
            Err(RenderError::ContainsMarker { .. })
        ));
        assert!(matches!(
            canonical_trace(" a", "c", "d", Answer::No),
            Err(RenderError::Untrimmed(_))
        ));
    }

    #[test]
    fn instructions_name_every_marker_in_order() {
        let text = ResponseGrammar::default().format_instructions();
        let pos: Vec<usize> = MARKERS.iter().map(|m| text.find(m).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}
