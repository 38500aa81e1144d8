//! Event causality corpora: a unified pair model, format loaders, topic folds
//! and the document-level negative sampler.
//!
//! Every loader reduces its source format to a [`Document`] (normalized
//! sentences, event mentions and links) and then enumerates candidate pairs
//! with [`extract_pairs`]. A pair whose two mentions share a sentence is
//! intra-sentence and carries only that sentence as context; otherwise it is
//! inter-sentence and carries the whole passage.

mod document;
mod folds;
mod maven;
mod sample;
mod synthetic;
mod xml;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub use document::{Document, DocumentBuilder, Mention};
pub use folds::{analysis_split, make_folds, FoldSpec};
pub use sample::{sample_doc_level, DocLevelSample};
pub use synthetic::{SyntheticDoc, SyntheticEvent};

/// Bumped whenever loader output for the same input could change.
pub const LOADER_VERSION: &str = "eci-corpus/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    EventStoryLine,
    CausalTimeBank,
    MavenEre,
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::EventStoryLine => "event_story_line",
            DatasetKind::CausalTimeBank => "causal_time_bank",
            DatasetKind::MavenEre => "maven_ere",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "eventstoryline" | "esl" | "esc" => Ok(DatasetKind::EventStoryLine),
            "causaltimebank" | "ctb" => Ok(DatasetKind::CausalTimeBank),
            "mavenere" | "maven" => Ok(DatasetKind::MavenEre),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Config(format!("unknown dataset kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Causal,
    NonCausal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    IntraSentence,
    InterSentence,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "intra" | "intra_sentence" | "intra-sentence" | "sentence" => Ok(Granularity::IntraSentence),
            "inter" | "inter_sentence" | "inter-sentence" | "document" => Ok(Granularity::InterSentence),
            _ => Err(Error::Config(format!("unknown granularity `{s}`"))),
        }
    }
}

/// One event trigger located inside a pair's context text.
///
/// `char_span` holds UTF-8 byte offsets into the owning pair's
/// `context_text`, so `&context_text[start..end] == surface`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventMention {
    pub surface: String,
    pub char_span: (usize, usize),
    pub sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventPair {
    pub pair_id: String,
    pub dataset: DatasetKind,
    pub topic_id: u32,
    pub doc_id: String,
    pub context_text: String,
    pub event_a: EventMention,
    pub event_b: EventMention,
    pub label: Label,
    pub granularity: Granularity,
}

impl EventPair {
    /// A single-sentence pair built by locating `a` and then `b` (after `a`
    /// when possible) in `context`. Meant for fixtures and examples.
    pub fn in_sentence(doc_id: &str, context: &str, a: &str, b: &str, label: Label) -> Result<EventPair> {
        let missing = |s: &str| Error::Validation(format!("`{s}` does not occur in `{context}`"));
        let sa = context
            .find(a)
            .filter(|_| !a.is_empty())
            .ok_or_else(|| missing(a))?;
        let sb = context[sa + a.len()..]
            .find(b)
            .map(|i| i + sa + a.len())
            .or_else(|| context.find(b).filter(|&i| i != sa))
            .filter(|_| !b.is_empty())
            .ok_or_else(|| missing(b))?;
        let mention = |surface: &str, start: usize| EventMention {
            surface: surface.to_string(),
            char_span: (start, start + surface.len()),
            sentence_index: 0,
        };
        let (event_a, event_b) = (mention(a, sa), mention(b, sb));
        Ok(EventPair {
            pair_id: pair_id(DatasetKind::Synthetic, doc_id, &event_a, &event_b),
            dataset: DatasetKind::Synthetic,
            topic_id: 0,
            doc_id: doc_id.to_string(),
            context_text: context.to_string(),
            event_a,
            event_b,
            label,
            granularity: Granularity::IntraSentence,
        })
    }

    /// Checks the span/surface and granularity invariants.
    pub fn validate(&self) -> Result<()> {
        for m in [&self.event_a, &self.event_b] {
            let (start, end) = m.char_span;
            if !(start < end && end <= self.context_text.len()) {
                return Err(Error::Validation(format!(
                    "pair {}: span {start}..{end} outside context of length {}",
                    self.pair_id,
                    self.context_text.len()
                )));
            }
            if self.context_text.get(start..end) != Some(m.surface.as_str()) {
                return Err(Error::Validation(format!(
                    "pair {}: surface `{}` does not match context at {start}..{end}",
                    self.pair_id, m.surface
                )));
            }
        }
        let same = self.event_a.sentence_index == self.event_b.sentence_index;
        if same != (self.granularity == Granularity::IntraSentence) {
            return Err(Error::Validation(format!(
                "pair {}: granularity disagrees with sentence indices",
                self.pair_id
            )));
        }
        Ok(())
    }
}

/// Stable content hash over dataset, document and both spans.
pub fn pair_id(dataset: DatasetKind, doc_id: &str, a: &EventMention, b: &EventMention) -> String {
    let key = format!(
        "{}\u{1f}{}\u{1f}{}:{}-{}\u{1f}{}:{}-{}",
        dataset,
        doc_id,
        a.sentence_index,
        a.char_span.0,
        a.char_span.1,
        b.sentence_index,
        b.char_span.0,
        b.char_span.1
    );
    sha256_hex(key)[..16].to_string()
}

/// Which non-causal pairs a loader emits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeUniverse {
    /// Every co-occurring event mention pair without a causal link.
    #[default]
    AllMentionPairs,
    /// Only pairs joined by some other annotated (non-causal) link.
    LinkedOnly,
}

/// Which EventStoryLine plot links count as causal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotLinkPolicy {
    /// Every `PLOT_LINK` is causal.
    #[default]
    AnyPlotLink,
    /// Only plot links flagged `CAUSES` or `CAUSED_BY`.
    ExplicitOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderOptions {
    #[serde(default)]
    pub negatives: NegativeUniverse,
    #[serde(default)]
    pub plot_links: PlotLinkPolicy,
    /// Topics dropped before pair extraction.
    #[serde(default)]
    pub exclude_topics: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub loader_version: String,
    /// Digest over the sorted relative file names and file contents.
    pub source_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub pairs: Vec<EventPair>,
    pub source_kind: DatasetKind,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub total: usize,
    pub causal: usize,
    pub non_causal: usize,
}

impl LabelCounts {
    pub fn of<'a>(pairs: impl IntoIterator<Item = &'a EventPair>) -> Self {
        let mut c = LabelCounts::default();
        for p in pairs {
            c.total += 1;
            match p.label {
                Label::Causal => c.causal += 1,
                Label::NonCausal => c.non_causal += 1,
            }
        }
        c
    }
}

impl Dataset {
    pub fn counts(&self) -> LabelCounts {
        LabelCounts::of(&self.pairs)
    }

    /// Distinct topic ids, ascending.
    pub fn topics(&self) -> Vec<u32> {
        self.pairs
            .iter()
            .map(|p| p.topic_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn with_granularity(&self, granularity: Granularity) -> Dataset {
        self.filtered(|p| p.granularity == granularity)
    }

    pub fn filtered(&self, keep: impl Fn(&EventPair) -> bool) -> Dataset {
        Dataset {
            pairs: self.pairs.iter().filter(|p| keep(p)).cloned().collect(),
            source_kind: self.source_kind,
            provenance: self.provenance.clone(),
        }
    }

    /// Splits into (train, test) pairs for one fold.
    pub fn split(&self, fold: &FoldSpec) -> (Dataset, Dataset) {
        (
            self.filtered(|p| fold.train_topics.contains(&p.topic_id)),
            self.filtered(|p| fold.test_topics.contains(&p.topic_id)),
        )
    }

    /// Checks pair-level invariants and pair_id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            p.validate()?;
            if !seen.insert(p.pair_id.as_str()) {
                return Err(Error::Validation(format!("duplicate pair_id {}", p.pair_id)));
            }
        }
        Ok(())
    }

    pub(crate) fn from_documents(
        kind: DatasetKind,
        docs: &[Document],
        options: &LoaderOptions,
        source_digest: String,
    ) -> Dataset {
        let mut pairs = Vec::new();
        for doc in docs {
            if options.exclude_topics.contains(&doc.topic_id) {
                continue;
            }
            pairs.extend(doc.candidate_pairs(kind, options.negatives));
        }
        sort_pairs(&mut pairs);
        Dataset {
            pairs,
            source_kind: kind,
            provenance: Provenance {
                loader_version: LOADER_VERSION.to_string(),
                source_digest,
            },
        }
    }
}

/// Canonical dataset order: by doc_id, then mention offsets.
pub(crate) fn sort_pairs(pairs: &mut [EventPair]) {
    pairs.sort_by(|x, y| {
        (
            &x.doc_id,
            x.event_a.sentence_index,
            x.event_a.char_span,
            x.event_b.sentence_index,
            x.event_b.char_span,
            x.granularity,
        )
            .cmp(&(
                &y.doc_id,
                y.event_a.sentence_index,
                y.event_a.char_span,
                y.event_b.sentence_index,
                y.event_b.char_span,
                y.granularity,
            ))
    });
}

/// Pairs of one document at one granularity, in document order.
///
/// Pairs are unordered: each pair appears once with its earlier mention as
/// `event_a`.
pub fn extract_pairs(
    document: &Document,
    dataset: DatasetKind,
    granularity: Granularity,
    negatives: NegativeUniverse,
) -> Vec<EventPair> {
    document
        .candidate_pairs(dataset, negatives)
        .into_iter()
        .filter(|p| p.granularity == granularity)
        .collect()
}

/// Loads a corpus release directory into a [`Dataset`].
pub fn load_corpus(kind: DatasetKind, root: &Path, options: &LoaderOptions) -> Result<Dataset> {
    let files = match kind {
        DatasetKind::EventStoryLine | DatasetKind::CausalTimeBank => collect_files(root, &["xml"])?,
        DatasetKind::MavenEre | DatasetKind::Synthetic => collect_files(root, &["jsonl"])?,
    };
    if files.is_empty() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let source_digest = digest_sources(root, &files)?;
    let per_file: Vec<Result<Vec<Document>>> = crate::util::par_map(&files, 8, |path| {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rel = relative_name(root, path);
        match kind {
            DatasetKind::EventStoryLine => {
                xml::parse_document(&rel, &text, xml::Flavor::EventStoryLine, options.plot_links)
                    .map(|d| vec![d])
            }
            DatasetKind::CausalTimeBank => {
                xml::parse_document(&rel, &text, xml::Flavor::CausalTimeBank, options.plot_links)
                    .map(|d| vec![d])
            }
            DatasetKind::MavenEre => maven::parse_jsonl(&rel, &text),
            DatasetKind::Synthetic => synthetic::parse_jsonl(&rel, &text),
        }
    });
    let mut docs = Vec::new();
    for r in per_file {
        docs.extend(r?);
    }
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    for w in docs.windows(2) {
        if w[0].doc_id == w[1].doc_id {
            return Err(Error::parse(
                w[1].doc_id.clone(),
                "document",
                "duplicate document id",
            ));
        }
    }
    let dataset = Dataset::from_documents(kind, &docs, options, source_digest);
    dataset.validate()?;
    Ok(dataset)
}

fn collect_files(root: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    if !root.exists() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut out = Vec::new();
    if root.is_file() {
        out.push(root.to_path_buf());
        return Ok(out);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.contains(&e))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn relative_name(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    let rel = if rel.as_os_str().is_empty() {
        Path::new(path.file_name().unwrap_or_default())
    } else {
        rel
    };
    rel.to_string_lossy().replace('\\', "/")
}

fn digest_sources(root: &Path, files: &[PathBuf]) -> Result<String> {
    let mut acc = String::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        acc.push_str(&relative_name(root, f));
        acc.push('\t');
        acc.push_str(&sha256_hex(&bytes));
        acc.push('\n');
    }
    Ok(sha256_hex(acc))
}
