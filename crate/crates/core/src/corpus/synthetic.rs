//! A small JSON-lines document format for fixtures and generated test corpora.
//!
//! ```json
//! {"doc_id":"d1","topic_id":1,
//!  "sentences":[["Storms","caused","floods","."]],
//!  "events":[{"id":"e1","sentence":0,"tokens":[0]},{"id":"e2","sentence":0,"tokens":[2]}],
//!  "causal":[["e1","e2"]],"links":[]}
//! ```

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, DocumentBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticEvent {
    pub id: String,
    pub sentence: usize,
    /// Token indices within the sentence.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDoc {
    pub doc_id: String,
    pub topic_id: u32,
    pub sentences: Vec<Vec<String>>,
    pub events: Vec<SyntheticEvent>,
    #[serde(default)]
    pub causal: Vec<(String, String)>,
    #[serde(default)]
    pub links: Vec<(String, String)>,
}

impl SyntheticDoc {
    pub fn to_document(&self) -> Result<Document, String> {
        let mut b = DocumentBuilder::new(self.doc_id.clone(), self.topic_id);
        for (s, sent) in self.sentences.iter().enumerate() {
            for (i, tok) in sent.iter().enumerate() {
                b.token(format!("{s}:{i}"), s, tok);
            }
        }
        for ev in &self.events {
            b.mention(
                ev.id.clone(),
                ev.tokens.iter().map(|i| format!("{}:{i}", ev.sentence)).collect(),
            );
        }
        for (x, y) in &self.causal {
            b.causal(x.clone(), y.clone());
        }
        for (x, y) in &self.links {
            b.link(x.clone(), y.clone());
        }
        b.build()
    }
}

pub(crate) fn parse_jsonl(rel: &str, text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("line {}", lineno + 1);
        let raw: SyntheticDoc =
            serde_json::from_str(line).map_err(|e| Error::parse(rel, loc(), e.to_string()))?;
        docs.push(raw.to_document().map_err(|m| Error::parse(rel, loc(), m))?);
    }
    Ok(docs)
}

const SUBJECTS: &[&str] = &[
    "The storm",
    "A strike",
    "The minister",
    "Police",
    "The fire",
    "Investors",
];
const VERBS: &[&str] = &[
    "caused",
    "triggered",
    "followed",
    "preceded",
    "damaged",
    "prompted",
    "halted",
    "sparked",
    "delayed",
    "announced",
    "closed",
    "injured",
];
const OBJECTS: &[&str] = &[
    "the bridge",
    "new protests",
    "the market",
    "several homes",
    "the talks",
];

impl SyntheticDoc {
    /// Deterministic random documents for tests and demos: `topics` topics
    /// (ids 1..=topics), `docs_per_topic` documents each, 2-4 sentences with
    /// 2-3 verb triggers per sentence and a sprinkling of causal links.
    pub fn generate(topics: u32, docs_per_topic: usize, seed: u64) -> Vec<SyntheticDoc> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut docs = Vec::new();
        for topic in 1..=topics {
            for d in 0..docs_per_topic {
                let mut sentences = Vec::new();
                let mut events = Vec::new();
                for s in 0..rng.random_range(2..=4usize) {
                    let mut toks: Vec<String> = Vec::new();
                    for clause in 0..rng.random_range(2..=3usize) {
                        if clause > 0 {
                            toks.push("and".into());
                        }
                        toks.extend(SUBJECTS.choose(&mut rng).unwrap().split(' ').map(String::from));
                        events.push(SyntheticEvent {
                            id: format!("e{}", events.len() + 1),
                            sentence: s,
                            tokens: vec![toks.len()],
                        });
                        toks.push(VERBS.choose(&mut rng).unwrap().to_string());
                        toks.extend(OBJECTS.choose(&mut rng).unwrap().split(' ').map(String::from));
                    }
                    toks.push(".".into());
                    sentences.push(toks);
                }
                let mut causal = Vec::new();
                for i in 0..events.len() {
                    for j in (i + 1)..events.len() {
                        if rng.random_bool(0.2) {
                            causal.push((events[i].id.clone(), events[j].id.clone()));
                        }
                    }
                }
                docs.push(SyntheticDoc {
                    doc_id: format!("t{topic:02}_d{d:02}"),
                    topic_id: topic,
                    sentences,
                    events,
                    causal,
                    links: Vec::new(),
                });
            }
        }
        docs
    }
}
