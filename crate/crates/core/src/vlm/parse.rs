//! Tolerant parsers for free-form assistant answers: item lists, per-object
//! detail lines, and row-index selections.

/// Extracts list items from an answer that may be numbered ("1. car"),
/// bulleted ("- car"), or a single comma-separated line.
///
/// Items are trimmed of list markers, surrounding whitespace, and a trailing
/// period; empty items are dropped. Order is preserved.
pub fn parse_list(answer: &str) -> Vec<String> {
    let lines: Vec<&str> = answer
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();

    let mut items: Vec<String> = Vec::new();
    if lines.len() == 1 && !starts_with_marker(lines[0]) && lines[0].contains(',') {
        for piece in lines[0].split(',') {
            push_item(&mut items, piece);
        }
    } else {
        for line in lines {
            push_item(&mut items, strip_marker(line));
        }
    }
    items
}

fn starts_with_marker(line: &str) -> bool {
    let trimmed = line.trim_start();
    if trimmed.starts_with('-') || trimmed.starts_with('*') || trimmed.starts_with('•') {
        return true;
    }
    let digits: String = trimmed.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return false;
    }
    let rest = &trimmed[digits.len()..];
    rest.starts_with('.') || rest.starts_with(')') || rest.starts_with(':')
}

/// Removes a leading "1.", "2)", "3:", "-", "*", or "•" marker.
fn strip_marker(line: &str) -> &str {
    let trimmed = line.trim_start();
    for bullet in ['-', '*', '•'] {
        if let Some(rest) = trimmed.strip_prefix(bullet) {
            return rest.trim_start();
        }
    }
    let digits: usize = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &trimmed[digits..];
        for sep in ['.', ')', ':'] {
            if let Some(stripped) = rest.strip_prefix(sep) {
                return stripped.trim_start();
            }
        }
    }
    trimmed
}

fn push_item(items: &mut Vec<String>, raw: &str) {
    let cleaned = raw.trim().trim_end_matches('.').trim();
    if !cleaned.is_empty() {
        items.push(cleaned.to_string());
    }
}

/// Extracts `(subject, detail)` pairs from lines shaped like
/// "subject: detail text". Lines without a colon are skipped, as are list
/// markers before the subject.
pub fn parse_details(answer: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for line in answer.lines() {
        let line = strip_marker(line.trim());
        if let Some((subject, detail)) = line.split_once(':') {
            let subject = subject.trim().trim_end_matches('.').trim();
            let detail = detail.trim();
            if !subject.is_empty() && !detail.is_empty() {
                pairs.push((subject.to_string(), detail.to_string()));
            }
        }
    }
    pairs
}

/// Reads 1-based row numbers out of an answer like "1, 3", "rows 2 and 4",
/// or "none".
///
/// Returns `(selected, out_of_range)`: `selected` holds 0-based indices that
/// fall within `1..=max_rows` (deduplicated, ascending); `out_of_range`
/// holds the rejected raw numbers so callers can warn about them. An answer
/// that contains no digits selects nothing.
pub fn parse_row_indices(answer: &str, max_rows: usize) -> (Vec<usize>, Vec<u64>) {
    let mut selected: Vec<usize> = Vec::new();
    let mut rejected: Vec<u64> = Vec::new();
    let mut digits = String::new();
    // Iterate with a trailing sentinel so a number at end-of-string flushes.
    for c in answer.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            digits.push(c);
            continue;
        }
        if !digits.is_empty() {
            if let Ok(n) = digits.parse::<u64>() {
                if n >= 1 && (n as usize) <= max_rows {
                    let idx = n as usize - 1;
                    if !selected.contains(&idx) {
                        selected.push(idx);
                    }
                } else {
                    rejected.push(n);
                }
            }
            digits.clear();
        }
    }
    selected.sort_unstable();
    (selected, rejected)
}
