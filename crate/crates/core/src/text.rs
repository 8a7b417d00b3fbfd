//! Word-boundary helpers shared by the scorer mock and the CDA pipeline.
//!
//! A word is a maximal run of alphanumeric characters. Everything else
//! (whitespace, punctuation, apostrophes, hyphens) is a boundary, so
//! "president's" yields `president` and `s`, and "full-time" yields
//! `full` and `time`.

/// Byte ranges of the words in `text`, in order.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Lowercased words of `text`.
pub fn words_lower(text: &str) -> Vec<String> {
    word_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasePattern {
    Lower,
    Capitalized,
    Upper,
}

impl CasePattern {
    pub fn of(word: &str) -> Self {
        let mut chars = word.chars();
        let first_upper = chars.next().is_some_and(char::is_uppercase);
        let rest: Vec<char> = chars.collect();
        if first_upper && !rest.is_empty() && rest.iter().all(|c| !c.is_lowercase()) {
            CasePattern::Upper
        } else if first_upper {
            CasePattern::Capitalized
        } else {
            CasePattern::Lower
        }
    }

    pub fn apply(self, word: &str) -> String {
        match self {
            CasePattern::Lower => word.to_lowercase(),
            CasePattern::Upper => word.to_uppercase(),
            CasePattern::Capitalized => {
                let lower = word.to_lowercase();
                let mut chars = lower.chars();
                match chars.next() {
                    Some(f) => f.to_uppercase().chain(chars).collect(),
                    None => String::new(),
                }
            }
        }
    }
}
