/// Canonical form used for every answer comparison: trimmed, lowercased,
/// trailing periods stripped, numerals normalized (`"58.0"` -> `"58"`).
pub fn canonicalize(answer: &str) -> String {
    let mut s = answer.trim().to_lowercase();
    loop {
        let next = s.trim_end_matches('.').trim().to_string();
        if next == s {
            break;
        }
        s = next;
    }
    normalize_number(&s).unwrap_or(s)
}

pub fn answers_match(a: &str, b: &str) -> bool {
    canonicalize(a) == canonicalize(b)
}

fn normalize_number(s: &str) -> Option<String> {
    let looks_numeric = !s.is_empty()
        && s.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e'))
        && s.chars().any(|c| c.is_ascii_digit());
    if !looks_numeric {
        return None;
    }
    let value: f64 = s.parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    if value == 0.0 {
        return Some("0".to_string());
    }
    Some(format!("{value}"))
}
