use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{pair_id, DatasetKind, EventMention, EventPair, Granularity, Label, NegativeUniverse};

/// An event trigger in a normalized sentence. Offsets are byte offsets into
/// `Document::sentences[sentence_index]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub id: String,
    pub sentence_index: usize,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

/// A parsed annotation document with whitespace-normalized sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub topic_id: u32,
    pub sentences: Vec<String>,
    /// Sorted by position, one entry per distinct span.
    pub mentions: Vec<Mention>,
    /// Unordered causal links over `mentions` indices, stored as (lo, hi).
    pub causal: BTreeSet<(usize, usize)>,
    /// Other annotated links over `mentions` indices, stored as (lo, hi).
    pub linked: BTreeSet<(usize, usize)>,
}

impl Document {
    pub fn passage(&self) -> String {
        self.sentences.join(" ")
    }

    fn sentence_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut at = 0;
        for s in &self.sentences {
            offsets.push(at);
            at += s.len() + 1;
        }
        offsets
    }

    /// Every candidate pair of the document, both granularities.
    pub(crate) fn candidate_pairs(
        &self,
        dataset: DatasetKind,
        negatives: NegativeUniverse,
    ) -> Vec<EventPair> {
        let passage = self.passage();
        let offsets = self.sentence_offsets();
        let mut out = Vec::new();
        for i in 0..self.mentions.len() {
            for j in (i + 1)..self.mentions.len() {
                let causal = self.causal.contains(&(i, j));
                if !causal && negatives == NegativeUniverse::LinkedOnly && !self.linked.contains(&(i, j)) {
                    continue;
                }
                let (a, b) = (&self.mentions[i], &self.mentions[j]);
                let intra = a.sentence_index == b.sentence_index;
                let (context, shift_a, shift_b) = if intra {
                    (self.sentences[a.sentence_index].clone(), 0, 0)
                } else {
                    (
                        passage.clone(),
                        offsets[a.sentence_index],
                        offsets[b.sentence_index],
                    )
                };
                let event_a = EventMention {
                    surface: a.surface.clone(),
                    char_span: (a.start + shift_a, a.end + shift_a),
                    sentence_index: a.sentence_index,
                };
                let event_b = EventMention {
                    surface: b.surface.clone(),
                    char_span: (b.start + shift_b, b.end + shift_b),
                    sentence_index: b.sentence_index,
                };
                out.push(EventPair {
                    pair_id: pair_id(dataset, &self.doc_id, &event_a, &event_b),
                    dataset,
                    topic_id: self.topic_id,
                    doc_id: self.doc_id.clone(),
                    context_text: context,
                    event_a,
                    event_b,
                    label: if causal { Label::Causal } else { Label::NonCausal },
                    granularity: if intra {
                        Granularity::IntraSentence
                    } else {
                        Granularity::InterSentence
                    },
                });
            }
        }
        out
    }
}

/// Assembles a [`Document`] from token-level annotations.
#[derive(Debug, Clone, Default)]
pub struct DocumentBuilder {
    doc_id: String,
    topic_id: u32,
    tokens: Vec<(String, usize, String)>,
    mentions: Vec<(String, Vec<String>)>,
    causal: Vec<(String, String)>,
    links: Vec<(String, String)>,
}

impl DocumentBuilder {
    pub fn new(doc_id: impl Into<String>, topic_id: u32) -> Self {
        DocumentBuilder {
            doc_id: doc_id.into(),
            topic_id,
            ..Default::default()
        }
    }

    pub fn token(&mut self, id: impl Into<String>, sentence: usize, text: &str) -> &mut Self {
        self.tokens.push((id.into(), sentence, text.to_string()));
        self
    }

    pub fn mention(&mut self, id: impl Into<String>, token_ids: Vec<String>) -> &mut Self {
        self.mentions.push((id.into(), token_ids));
        self
    }

    pub fn causal(&mut self, a: impl Into<String>, b: impl Into<String>) -> &mut Self {
        self.causal.push((a.into(), b.into()));
        self
    }

    pub fn link(&mut self, a: impl Into<String>, b: impl Into<String>) -> &mut Self {
        self.links.push((a.into(), b.into()));
        self
    }

    /// Links naming unknown mention ids are ignored, since relation layers
    /// routinely connect events to non-event markables.
    pub fn build(&self) -> Result<Document, String> {
        // Sentences are renumbered densely in ascending order of their source index.
        let source_sentences: BTreeSet<usize> = self.tokens.iter().map(|t| t.1).collect();
        let dense: BTreeMap<usize, usize> = source_sentences
            .iter()
            .enumerate()
            .map(|(i, s)| (*s, i))
            .collect();
        let mut sentences = vec![String::new(); dense.len()];
        let mut token_pos: HashMap<&str, (usize, usize, usize)> = HashMap::new();
        for (id, sent, text) in &self.tokens {
            let norm = text.split_whitespace().collect::<Vec<_>>().join(" ");
            if norm.is_empty() {
                continue;
            }
            let s = dense[sent];
            let buf = &mut sentences[s];
            if !buf.is_empty() {
                buf.push(' ');
            }
            let start = buf.len();
            buf.push_str(&norm);
            if token_pos.insert(id.as_str(), (s, start, buf.len())).is_some() {
                return Err(format!("duplicate token id `{id}`"));
            }
        }

        let mut spans: Vec<(usize, usize, usize, String)> = Vec::new();
        for (mid, toks) in &self.mentions {
            if toks.is_empty() {
                return Err(format!("mention `{mid}` has no tokens"));
            }
            let mut sentence = None;
            let (mut lo, mut hi) = (usize::MAX, 0);
            for t in toks {
                let Some(&(s, a, b)) = token_pos.get(t.as_str()) else {
                    return Err(format!("mention `{mid}` anchors unknown token `{t}`"));
                };
                if *sentence.get_or_insert(s) != s {
                    return Err(format!("mention `{mid}` spans several sentences"));
                }
                lo = lo.min(a);
                hi = hi.max(b);
            }
            spans.push((sentence.unwrap(), lo, hi, mid.clone()));
        }
        spans.sort();

        let mut mentions: Vec<Mention> = Vec::new();
        let mut index_of: HashMap<String, usize> = HashMap::new();
        for (s, start, end, mid) in spans {
            let same_span = mentions
                .last()
                .is_some_and(|m| m.sentence_index == s && m.start == start && m.end == end);
            if !same_span {
                mentions.push(Mention {
                    id: mid.clone(),
                    sentence_index: s,
                    start,
                    end,
                    surface: sentences[s][start..end].to_string(),
                });
            }
            index_of.insert(mid, mentions.len() - 1);
        }

        let resolve = |edges: &[(String, String)]| -> BTreeSet<(usize, usize)> {
            edges
                .iter()
                .filter_map(|(a, b)| {
                    let (i, j) = (*index_of.get(a)?, *index_of.get(b)?);
                    (i != j).then(|| (i.min(j), i.max(j)))
                })
                .collect()
        };
        Ok(Document {
            doc_id: self.doc_id.clone(),
            topic_id: self.topic_id,
            sentences,
            mentions,
            causal: resolve(&self.causal),
            linked: resolve(&self.links),
        })
    }
}
