//! Independent re-derivations used to check the library's arithmetic and
//! prompt layout. Deliberately written without calling the code under test.

#![allow(dead_code)]

/// Exact accuracy in percent as a rational `(numerator, denominator)` pair
/// over 100 * correct / total.
pub fn subset_percent(correct: usize, total: usize) -> f64 {
    assert!(total > 0);
    (correct as f64) * 100.0 / (total as f64)
}

/// Brute-force scoring of `(gt, prediction)` pairs, where prediction is
/// `Some(label)` or `None` for an unreadable answer.
pub fn brute_force(items: &[(u8, Option<u8>)]) -> Option<(f64, f64, f64)> {
    let mut tally = [[0usize; 2]; 2]; // [gt][correct?]
    for &(gt, pred) in items {
        let hit = pred == Some(gt);
        tally[gt as usize][hit as usize] += 1;
    }
    let total = |g: usize| tally[g][0] + tally[g][1];
    if total(0) == 0 || total(1) == 0 {
        return None;
    }
    let pert = subset_percent(tally[0][1], total(0));
    let orig = subset_percent(tally[1][1], total(1));
    Some((pert, orig, (pert + orig) / 2.0))
}

/// Half-up rounding to two decimals using decimal string arithmetic on the
/// value printed with generous precision.
pub fn half_up_2(x: f64) -> String {
    assert!(x >= 0.0);
    let s = format!("{x:.9}");
    let (int, frac) = s.split_once('.').unwrap();
    let mut cents: u64 = format!("{int}{}", &frac[..2]).parse().unwrap();
    // digits beyond the hundredths; "5000..." and up rounds up, with a small
    // tolerance for binary representation error just below a half
    let rest: u64 = frac[2..].parse().unwrap();
    if rest >= 4_999_990 {
        cents += 1;
    }
    format!("{}.{:02}", cents / 100, cents % 100)
}

pub const STAGE_HEADERS: [&str; 4] = [
    "### STAGE 1: QUALITATIVE AXIOMS",
    "### STAGE 2: SCENE DECOMPOSITION",
    "### STAGE 3: COUNTERFACTUAL SELF-VERIFICATION",
    "### STAGE 4: ANSWER FORMAT",
];

/// Checks that the four stage headers each occur exactly once, in order, and
/// that the text ends with the question line.
pub fn check_stage_order(text: &str, question: &str) -> Result<(), String> {
    let mut last = None;
    for h in STAGE_HEADERS {
        let count = text.matches(h).count();
        if count != 1 {
            return Err(format!("{h:?} occurs {count} times"));
        }
        let at = text.find(h).unwrap();
        if let Some(prev) = last {
            if at <= prev {
                return Err(format!("{h:?} out of order"));
            }
        }
        last = Some(at);
    }
    let tail = format!("QUESTION: {question}");
    if !text.ends_with(&tail) {
        return Err("prompt does not end with the question".into());
    }
    if text.rfind(STAGE_HEADERS[3]).unwrap() > text.len() - tail.len() {
        return Err("question precedes the answer-format block".into());
    }
    Ok(())
}

/// Text of the block under `header`, up to the next stage header or the
/// question line.
pub fn stage_block<'a>(text: &'a str, header: &str) -> &'a str {
    let start = text.find(header).expect("header present");
    let rest = &text[start..];
    let end = STAGE_HEADERS
        .iter()
        .filter(|h| **h != header)
        .filter_map(|h| rest.find(h))
        .chain(rest.find("QUESTION: "))
        .min()
        .unwrap_or(rest.len());
    &rest[..end]
}
