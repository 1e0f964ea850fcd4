//! Parsing of model responses: single-line verdicts and embedded JSON.

use serde::de::DeserializeOwned;

/// Lowercased final non-empty line with markup and punctuation removed.
fn final_line(text: &str) -> Option<String> {
    let line = text.lines().rev().find(|l| !l.trim().is_empty())?;
    let cleaned: String = line
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    Some(cleaned.split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Maps the final line of `text` to the value of the first matching form.
/// Matching is exact on the normalized line, so `INCORRECT` never reads as
/// `CORRECT`.
pub fn parse_verdict<T: Copy>(text: &str, forms: &[(&str, T)]) -> Option<T> {
    let line = final_line(text)?;
    let line = line.strip_prefix("verdict ").unwrap_or(&line);
    forms
        .iter()
        .find(|(form, _)| *form == line)
        .map(|(_, value)| *value)
}

/// Deserializes the outermost `{...}` span in `text`, tolerating prose or
/// code fences around it.
pub fn parse_json_object<T: DeserializeOwned>(text: &str) -> Option<T> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&text[start..=end]).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    const GRADE: [(&str, u8); 2] = [("correct", 1), ("incorrect", 0)];

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("CORRECT", &GRADE), Some(1));
        assert_eq!(parse_verdict("Some reasoning.\n\nINCORRECT\n", &GRADE), Some(0));
        assert_eq!(parse_verdict("**Incorrect.**", &GRADE), Some(0));
        assert_eq!(parse_verdict("Verdict: correct", &GRADE), Some(1));
        assert_eq!(parse_verdict("CORRECT\nmaybe not", &GRADE), None);
        assert_eq!(parse_verdict("", &GRADE), None);
    }

    #[test]
    fn json_inside_prose() {
        let v: Value = parse_json_object("Sure:\n```json\n{\"a\": [1]}\n```").unwrap();
        assert_eq!(v["a"][0], 1);
        assert!(parse_json_object::<Value>("no json } here {").is_none());
    }
}
