//! MAVEN-ERE JSON-lines: one document per line with per-sentence tokens,
//! event clusters of mentions, and event-level relation lists.

use std::collections::HashMap;

use serde::Deserialize;

use super::{Document, DocumentBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct MavenDoc {
    id: String,
    tokens: Vec<Vec<String>>,
    #[serde(default)]
    events: Vec<MavenEvent>,
    #[serde(default)]
    causal_relations: HashMap<String, Vec<(String, String)>>,
    #[serde(default)]
    temporal_relations: HashMap<String, Vec<(String, String)>>,
    #[serde(default)]
    subevent_relations: Vec<(String, String)>,
}

#[derive(Debug, Deserialize)]
struct MavenEvent {
    id: String,
    mentions: Vec<MavenMention>,
}

#[derive(Debug, Deserialize)]
struct MavenMention {
    id: String,
    sent_id: usize,
    offset: (usize, usize),
}

pub(crate) fn parse_jsonl(rel: &str, text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("line {}", lineno + 1);
        let raw: MavenDoc =
            serde_json::from_str(line).map_err(|e| Error::parse(rel, loc(), e.to_string()))?;
        docs.push(convert(raw).map_err(|msg| Error::parse(rel, loc(), msg))?);
    }
    Ok(docs)
}

fn convert(raw: MavenDoc) -> Result<Document, String> {
    let mut b = DocumentBuilder::new(raw.id.clone(), 0);
    for (s, sent) in raw.tokens.iter().enumerate() {
        for (i, tok) in sent.iter().enumerate() {
            b.token(format!("{s}:{i}"), s, tok);
        }
    }
    let mut mentions_of: HashMap<&str, Vec<&str>> = HashMap::new();
    for ev in &raw.events {
        for m in &ev.mentions {
            let (start, end) = m.offset;
            if start >= end || raw.tokens.get(m.sent_id).is_none_or(|t| end > t.len()) {
                return Err(format!("mention `{}` has invalid offset {start}..{end}", m.id));
            }
            b.mention(
                m.id.clone(),
                (start..end).map(|i| format!("{}:{i}", m.sent_id)).collect(),
            );
            mentions_of.entry(&ev.id).or_default().push(&m.id);
        }
    }
    // Event-level relations expand to every mention pair of the two clusters.
    let expand = |a: &str, b_: &str, out: &mut Vec<(String, String)>| {
        if let (Some(ma), Some(mb)) = (mentions_of.get(a), mentions_of.get(b_)) {
            for x in ma {
                for y in mb {
                    out.push((x.to_string(), y.to_string()));
                }
            }
        }
    };
    let mut causal = Vec::new();
    for edges in raw.causal_relations.values() {
        for (x, y) in edges {
            expand(x, y, &mut causal);
        }
    }
    let mut other = Vec::new();
    for edges in raw.temporal_relations.values() {
        for (x, y) in edges {
            expand(x, y, &mut other);
        }
    }
    for (x, y) in &raw.subevent_relations {
        expand(x, y, &mut other);
    }
    for (x, y) in causal {
        b.causal(x, y);
    }
    for (x, y) in other {
        b.link(x, y);
    }
    b.build()
}
