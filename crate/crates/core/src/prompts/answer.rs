use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerValue {
    Yes,
    No,
    Unparseable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub value: AnswerValue,
    /// Byte range of the marker that decided `value`.
    pub marker_span: Option<(usize, usize)>,
}

impl ParsedAnswer {
    pub const UNPARSEABLE: ParsedAnswer = ParsedAnswer {
        value: AnswerValue::Unparseable,
        marker_span: None,
    };
}

/// Which marker wins when a response repeats it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerPolicy {
    #[default]
    Last,
    First,
}

static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[\s*Final Answer:\s*((?i:yes|no))\s*\]").expect("marker regex"));

/// Finds the `[Final Answer: Yes|No]` marker (last one by default).
pub fn parse_final_answer(text: &str) -> ParsedAnswer {
    parse_final_answer_with(text, MarkerPolicy::Last)
}

pub fn parse_final_answer_with(text: &str, policy: MarkerPolicy) -> ParsedAnswer {
    let mut found = MARKER.captures_iter(text);
    let caps = match policy {
        MarkerPolicy::First => found.next(),
        MarkerPolicy::Last => found.last(),
    };
    let Some(caps) = caps else {
        return ParsedAnswer::UNPARSEABLE;
    };
    let whole = caps.get(0).unwrap();
    let value = if caps[1].eq_ignore_ascii_case("yes") {
        AnswerValue::Yes
    } else {
        AnswerValue::No
    };
    ParsedAnswer {
        value,
        marker_span: Some((whole.start(), whole.end())),
    }
}
