//! Prompt templates. Each role maps to a versioned plain-text asset with
//! `{{slot}}` placeholders.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::GatewayError;

/// Prompt role. The string form (`grade`, `apply_items`, `baseline_3`, ...)
/// is what scripts and logs use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    Grade,
    Compress,
    Extract,
    Cluster,
    TagKeywords,
    ApplyItems,
    ConfirmItems,
    Baseline(u8),
}

impl TemplateId {
    pub const ALL: [TemplateId; 13] = [
        TemplateId::Grade,
        TemplateId::Compress,
        TemplateId::Extract,
        TemplateId::Cluster,
        TemplateId::TagKeywords,
        TemplateId::ApplyItems,
        TemplateId::ConfirmItems,
        TemplateId::Baseline(0),
        TemplateId::Baseline(1),
        TemplateId::Baseline(2),
        TemplateId::Baseline(3),
        TemplateId::Baseline(4),
        TemplateId::Baseline(5),
    ];

    fn asset(self) -> (&'static str, &'static str) {
        match self {
            TemplateId::Grade => ("grade.v1", include_str!("../../prompts/grade.v1.txt")),
            TemplateId::Compress => ("compress.v1", include_str!("../../prompts/compress.v1.txt")),
            TemplateId::Extract => ("extract.v1", include_str!("../../prompts/extract.v1.txt")),
            TemplateId::Cluster => ("cluster.v1", include_str!("../../prompts/cluster.v1.txt")),
            TemplateId::TagKeywords => (
                "tag_keywords.v1",
                include_str!("../../prompts/tag_keywords.v1.txt"),
            ),
            // The confirmation pass re-asks the application question verbatim.
            TemplateId::ApplyItems | TemplateId::ConfirmItems => (
                "apply_items.v1",
                include_str!("../../prompts/apply_items.v1.txt"),
            ),
            TemplateId::Baseline(0 | 1) => (
                "baseline_full.v1",
                include_str!("../../prompts/baseline_full.v1.txt"),
            ),
            TemplateId::Baseline(2 | 3) => (
                "baseline_snippet.v1",
                include_str!("../../prompts/baseline_snippet.v1.txt"),
            ),
            TemplateId::Baseline(_) => (
                "baseline_continue.v1",
                include_str!("../../prompts/baseline_continue.v1.txt"),
            ),
        }
    }

    /// Name and version of the asset backing this role, e.g. `apply_items.v1`.
    pub fn asset_name(self) -> &'static str {
        self.asset().0
    }

    pub fn body(self) -> &'static str {
        self.asset().1
    }

    pub fn required_slots(self) -> BTreeSet<&'static str> {
        slots(self.body())
    }

    /// Baselines 1, 3 and 5 only see the leading part of the trace.
    pub fn trims_trace(self) -> bool {
        matches!(self, TemplateId::Baseline(k) if k % 2 == 1)
    }

    /// Prompts whose trace slot may be prefix-trimmed to fit the context.
    pub fn is_classification(self) -> bool {
        matches!(
            self,
            TemplateId::TagKeywords
                | TemplateId::ApplyItems
                | TemplateId::ConfirmItems
                | TemplateId::Baseline(_)
        )
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateId::Grade => f.write_str("grade"),
            TemplateId::Compress => f.write_str("compress"),
            TemplateId::Extract => f.write_str("extract"),
            TemplateId::Cluster => f.write_str("cluster"),
            TemplateId::TagKeywords => f.write_str("tag_keywords"),
            TemplateId::ApplyItems => f.write_str("apply_items"),
            TemplateId::ConfirmItems => f.write_str("confirm_items"),
            TemplateId::Baseline(k) => write!(f, "baseline_{k}"),
        }
    }
}

impl FromStr for TemplateId {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.to_string() == s)
            .ok_or_else(|| GatewayError::Template(format!("unknown template id {s:?}")))
    }
}

impl Serialize for TemplateId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TemplateId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn is_slot_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) if is_slot_name(&after[..close]) => {
                out.push(Piece::Text(&rest[..open]));
                out.push(Piece::Slot(&after[..close]));
                rest = &after[close + 2..];
            }
            _ => {
                out.push(Piece::Text(&rest[..open + 2]));
                rest = after;
            }
        }
    }
    out.push(Piece::Text(rest));
    out
}

fn slots(body: &str) -> BTreeSet<&str> {
    pieces(body)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(name) => Some(name),
            Piece::Text(_) => None,
        })
        .collect()
}

/// Keeps the first three quarters of the lines (at least one line).
pub fn leading_lines(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    if lines.is_empty() {
        return String::new();
    }
    let keep = (lines.len() * 3 / 4).max(1);
    lines[..keep].join("\n")
}

/// Substitutes `variables` into the template body for `template`.
pub fn render(
    template: TemplateId,
    variables: &BTreeMap<String, String>,
) -> Result<String, GatewayError> {
    let body = template.body();
    let mut out = String::with_capacity(body.len() + variables.values().map(String::len).sum::<usize>());
    for piece in pieces(body) {
        match piece {
            Piece::Text(text) => out.push_str(text),
            Piece::Slot(name) => {
                let value = variables.get(name).ok_or_else(|| {
                    GatewayError::Template(format!("{template}: missing slot {name:?}"))
                })?;
                if name == "trace" && template.trims_trace() {
                    out.push_str(&leading_lines(value));
                } else {
                    out.push_str(value);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn baseline_vars(trace: &str) -> BTreeMap<String, String> {
        vars(&[
            ("question", "Q?"),
            ("trace", trace),
            ("final_answer", "42"),
            ("feedback", ""),
        ])
    }

    fn numbered_trace(n: usize) -> String {
        (1..=n)
            .map(|i| format!("trace line {i:03}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn template_ids_round_trip_through_strings() {
        for id in TemplateId::ALL {
            assert_eq!(id.to_string().parse::<TemplateId>().unwrap(), id);
        }
        assert!("baseline_6".parse::<TemplateId>().is_err());
    }

    #[test]
    fn every_template_renders_with_its_slots() {
        for id in TemplateId::ALL {
            let vars: BTreeMap<String, String> = id
                .required_slots()
                .into_iter()
                .map(|s| (s.to_string(), format!("<{s}>")))
                .collect();
            let text = render(id, &vars).unwrap();
            assert!(!text.contains("{{"), "{id} left a placeholder");
        }
    }

    #[test]
    fn missing_slot_is_an_error() {
        let err = render(TemplateId::Grade, &vars(&[("question", "q")])).unwrap_err();
        assert!(matches!(err, GatewayError::Template(_)));
    }

    #[test]
    fn trimmed_baseline_keeps_first_75_of_100_lines() {
        let trace = numbered_trace(100);
        let text = render(TemplateId::Baseline(1), &baseline_vars(&trace)).unwrap();
        let present = (1..=100)
            .filter(|i| text.contains(&format!("trace line {i:03}")))
            .count();
        assert_eq!(present, 75);
        assert!(text.contains("trace line 075"));
        assert!(!text.contains("trace line 076"));
        for k in [3, 5] {
            let text = render(TemplateId::Baseline(k), &baseline_vars(&trace)).unwrap();
            assert!(text.contains("trace line 075") && !text.contains("trace line 076"));
        }
    }

    #[test]
    fn untrimmed_baselines_keep_whole_trace() {
        let trace = numbered_trace(100);
        for k in [0, 2, 4] {
            let text = render(TemplateId::Baseline(k), &baseline_vars(&trace)).unwrap();
            assert!(text.contains("trace line 100"));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let vars = baseline_vars("a\nb");
        assert_eq!(
            render(TemplateId::Baseline(2), &vars).unwrap().as_bytes(),
            render(TemplateId::Baseline(2), &vars).unwrap().as_bytes()
        );
    }

    #[test]
    fn continue_framing_for_baselines_4_and_5() {
        for k in [4, 5] {
            let text = render(TemplateId::Baseline(k), &baseline_vars("x")).unwrap();
            assert!(text.contains("continue thinking"));
            assert!(text.contains("provide an answer"));
            assert!(!text.contains("CORRECT or INCORRECT"));
        }
        let text = render(TemplateId::Baseline(0), &baseline_vars("x")).unwrap();
        assert!(text.contains("CORRECT or INCORRECT"));
    }

    #[test]
    fn confirm_uses_apply_prompt() {
        assert_eq!(TemplateId::ConfirmItems.body(), TemplateId::ApplyItems.body());
    }

    #[test]
    fn short_traces_keep_at_least_one_line() {
        assert_eq!(leading_lines("only"), "only");
        assert_eq!(leading_lines("a\nb\nc\nd"), "a\nb\nc");
        assert_eq!(leading_lines(""), "");
    }
}
