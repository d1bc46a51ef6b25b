use std::time::Duration;

use super::EvalError;

/// Lowercase, trim, drop trailing `. , ! ?`, collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let stripped = lower.trim_end_matches(|c: char| c.is_whitespace() || ".,!?".contains(c));
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

/// Median: middle element for odd n, mean of the two middle elements for even n.
pub fn p50(samples: &[f64]) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn p50_duration(samples: &[Duration]) -> Result<Duration, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let mut v = samples.to_vec();
    v.sort();
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    })
}
