//! Prompt construction for every evaluation, generation and rewriting
//! variant, plus final-answer parsing.
//!
//! Templates live as text files with `{slot}` markers. The rewrite headers and
//! the two intervention sentences are *golden*: they are fixed text and cannot
//! be overridden from a template directory. The others may be replaced.

mod answer;
mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::corpus::{EventMention, EventPair, Label};
use crate::error::{Error, Result};

pub use answer::{parse_final_answer, parse_final_answer_with, AnswerValue, MarkerPolicy, ParsedAnswer};
pub use template::SlotTemplate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ZeroShot,
    ZeroShotCot,
    FewShotIcl,
    RewriteOfficial,
    RewriteOurs,
    InterventionWrong,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::ZeroShot,
        TemplateId::ZeroShotCot,
        TemplateId::FewShotIcl,
        TemplateId::RewriteOfficial,
        TemplateId::RewriteOurs,
        TemplateId::InterventionWrong,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateId::ZeroShot => "zero_shot",
            TemplateId::ZeroShotCot => "zero_shot_cot",
            TemplateId::FewShotIcl => "few_shot_icl",
            TemplateId::RewriteOfficial => "rewrite_official",
            TemplateId::RewriteOurs => "rewrite_ours",
            TemplateId::InterventionWrong => "intervention_wrong",
        }
    }

    pub fn is_golden(self) -> bool {
        matches!(self, TemplateId::RewriteOfficial | TemplateId::RewriteOurs)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        TemplateId::ALL
            .into_iter()
            .find(|t| t.file_stem() == norm)
            .or(match norm.as_str() {
                "cot" => Some(TemplateId::ZeroShotCot),
                "icl" | "few_shot" => Some(TemplateId::FewShotIcl),
                "official" => Some(TemplateId::RewriteOfficial),
                "ours" => Some(TemplateId::RewriteOurs),
                "intervention" => Some(TemplateId::InterventionWrong),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown template `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteVariant {
    Official,
    Ours,
}

impl RewriteVariant {
    pub fn template_id(self) -> TemplateId {
        match self {
            RewriteVariant::Official => TemplateId::RewriteOfficial,
            RewriteVariant::Ours => TemplateId::RewriteOurs,
        }
    }
}

impl FromStr for RewriteVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "official" => Ok(RewriteVariant::Official),
            "ours" => Ok(RewriteVariant::Ours),
            _ => Err(Error::Config(format!("unknown rewrite variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: SlotTemplate,
}

/// A worked demonstration shown before the query in few-shot prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotDemo {
    pub demo_id: String,
    pub pair: EventPair,
    pub trace_text: String,
    pub label: Label,
}

const BUILTIN: [(&str, &str); 9] = [
    ("zero_shot", include_str!("../../templates/zero_shot.txt")),
    ("zero_shot_cot", include_str!("../../templates/zero_shot_cot.txt")),
    ("few_shot_icl", include_str!("../../templates/few_shot_icl.txt")),
    ("demo", include_str!("../../templates/demo.txt")),
    (
        "intervention_wrong",
        include_str!("../../templates/intervention_wrong.txt"),
    ),
    (
        "intervention_causal",
        include_str!("../../templates/intervention_causal.txt"),
    ),
    (
        "intervention_non_causal",
        include_str!("../../templates/intervention_non_causal.txt"),
    ),
    (
        "rewrite_official",
        include_str!("../../templates/rewrite_official.txt"),
    ),
    ("rewrite_ours", include_str!("../../templates/rewrite_ours.txt")),
];

const GOLDEN_STEMS: [&str; 4] = [
    "rewrite_official",
    "rewrite_ours",
    "intervention_causal",
    "intervention_non_causal",
];

/// The full set of templates prompts are rendered from.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    by_stem: BTreeMap<String, SlotTemplate>,
}

static BUILTIN_SET: LazyLock<TemplateSet> = LazyLock::new(|| TemplateSet {
    by_stem: BUILTIN
        .iter()
        .map(|(k, v)| (k.to_string(), SlotTemplate::parse(v)))
        .collect(),
});

impl TemplateSet {
    pub fn builtin() -> &'static TemplateSet {
        &BUILTIN_SET
    }

    /// Built-ins overridden by any `<stem>.txt` present in `dir`. Golden
    /// templates cannot be overridden.
    pub fn from_dir(dir: &Path) -> Result<TemplateSet> {
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.to_path_buf()));
        }
        let mut set = TemplateSet::builtin().clone();
        for (stem, _) in BUILTIN {
            let path = dir.join(format!("{stem}.txt"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if GOLDEN_STEMS.contains(&stem) {
                if text != set.by_stem[stem].source() {
                    return Err(Error::Config(format!(
                        "{} differs from the fixed `{stem}` template",
                        path.display()
                    )));
                }
                continue;
            }
            set.by_stem.insert(stem.to_string(), SlotTemplate::parse(&text));
        }
        Ok(set)
    }

    fn get(&self, stem: &str) -> &SlotTemplate {
        &self.by_stem[stem]
    }

    pub fn template(&self, id: TemplateId) -> PromptTemplate {
        PromptTemplate {
            template_id: id,
            body: self.get(id.file_stem()).clone(),
        }
    }

    fn question_values<'a>(pair: &'a EventPair, a: &'a str, b: &'a str) -> BTreeMap<&'static str, &'a str> {
        BTreeMap::from([
            ("context", pair.context_text.as_str()),
            ("event_a", a),
            ("event_b", b),
        ])
    }

    pub fn eci_prompt(
        &self,
        pair: &EventPair,
        template: TemplateId,
        demos: Option<&[FewShotDemo]>,
    ) -> Result<String> {
        let (a, b) = event_slots(pair);
        match template {
            TemplateId::ZeroShot | TemplateId::ZeroShotCot => {
                if demos.is_some_and(|d| !d.is_empty()) {
                    return Err(Error::Config(format!("template {template} takes no demos")));
                }
                self.get(template.file_stem())
                    .render(&Self::question_values(pair, &a, &b))
            }
            TemplateId::FewShotIcl => {
                let demos = demos
                    .filter(|d| !d.is_empty())
                    .ok_or_else(|| Error::Config("few-shot prompt requires demos".into()))?;
                let mut ordered: Vec<&FewShotDemo> = demos.iter().collect();
                // Causal demo first; stable otherwise.
                ordered.sort_by_key(|d| d.label != Label::Causal);
                let blocks = ordered
                    .iter()
                    .map(|d| {
                        let q = self.eci_prompt(&d.pair, TemplateId::ZeroShot, None)?;
                        self.get("demo").render(&BTreeMap::from([
                            ("instruction", q.as_str()),
                            ("reference", d.trace_text.trim_end()),
                        ]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let joined = blocks.join("\n\n");
                let question = self.eci_prompt(pair, TemplateId::ZeroShot, None)?;
                self.get("few_shot_icl").render(&BTreeMap::from([
                    ("demos", joined.as_str()),
                    ("instruction", question.as_str()),
                ]))
            }
            TemplateId::InterventionWrong => self.intervention_prompt(pair),
            TemplateId::RewriteOfficial | TemplateId::RewriteOurs => Err(Error::Config(format!(
                "{template} is a rewrite template, not an ECI prompt"
            ))),
        }
    }

    /// The sentence asserting the opposite of the gold label.
    pub fn intervention_sentence(&self, pair: &EventPair) -> Result<String> {
        let (a, b) = event_slots(pair);
        let stem = match pair.label {
            Label::Causal => "intervention_causal",
            Label::NonCausal => "intervention_non_causal",
        };
        self.get(stem).render(&BTreeMap::from([
            ("event_a", a.as_str()),
            ("event_b", b.as_str()),
        ]))
    }

    pub fn intervention_prompt(&self, pair: &EventPair) -> Result<String> {
        let (a, b) = event_slots(pair);
        let sentence = self.intervention_sentence(pair)?;
        let mut values = Self::question_values(pair, &a, &b);
        values.insert("intervention", &sentence);
        self.get("intervention_wrong").render(&values)
    }

    pub fn rewrite_prompt(
        &self,
        instruction: &str,
        original_trace: &str,
        variant: RewriteVariant,
    ) -> Result<String> {
        if original_trace.trim().is_empty() {
            return Err(Error::Validation("cannot rewrite an empty trace".into()));
        }
        self.get(variant.template_id().file_stem())
            .render(&BTreeMap::from([
                ("instruction", instruction),
                ("reference", original_trace),
            ]))
    }
}

/// Trigger text as shown inside `<...>`. When both triggers share a surface,
/// each is tagged with its occurrence number within the context.
pub fn event_slots(pair: &EventPair) -> (String, String) {
    let (a, b) = (&pair.event_a, &pair.event_b);
    if a.surface != b.surface {
        return (a.surface.clone(), b.surface.clone());
    }
    let tag = |m: &EventMention| {
        let n = occurrence_number(&pair.context_text, &m.surface, m.char_span.0);
        format!("{} (occurrence {n})", m.surface)
    };
    (tag(a), tag(b))
}

fn occurrence_number(context: &str, surface: &str, start: usize) -> usize {
    context
        .match_indices(surface)
        .take_while(|(i, _)| *i <= start)
        .count()
}

pub fn build_eci_prompt(
    pair: &EventPair,
    template: TemplateId,
    demos: Option<&[FewShotDemo]>,
) -> Result<String> {
    TemplateSet::builtin().eci_prompt(pair, template, demos)
}

pub fn build_intervention_prompt(pair: &EventPair) -> String {
    TemplateSet::builtin()
        .intervention_prompt(pair)
        .expect("built-in intervention templates have all slots filled")
}

pub fn build_rewrite_prompt(
    instruction: &str,
    original_trace: &str,
    variant: RewriteVariant,
) -> Result<String> {
    TemplateSet::builtin().rewrite_prompt(instruction, original_trace, variant)
}

#[derive(Debug, Deserialize)]
struct DemoManifestEntry {
    demo_id: String,
    label: Label,
    pair: EventPair,
    trace_file: String,
}

#[derive(Debug, Deserialize)]
struct DemoManifest {
    demos: Vec<DemoManifestEntry>,
}

/// Reads `manifest.json` plus one trace text file per demo from `dir`.
pub fn load_demos(dir: &Path) -> Result<Vec<FewShotDemo>> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(manifest_path.clone()),
        _ => Error::io(&manifest_path, e),
    })?;
    let manifest: DemoManifest = serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            manifest_path.display().to_string(),
            format!("line {}", e.line()),
            e.to_string(),
        )
    })?;
    manifest
        .demos
        .into_iter()
        .map(|d| {
            let path = dir.join(&d.trace_file);
            let trace_text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(FewShotDemo {
                demo_id: d.demo_id,
                pair: d.pair,
                trace_text,
                label: d.label,
            })
        })
        .collect()
}

/// Exactly one causal and one non-causal demo.
pub fn check_generation_demos(demos: &[FewShotDemo]) -> Result<()> {
    let causal = demos.iter().filter(|d| d.label == Label::Causal).count();
    let non_causal = demos.iter().filter(|d| d.label == Label::NonCausal).count();
    if causal != 1 || non_causal != 1 {
        return Err(Error::Config(format!(
            "generation needs exactly one causal and one non-causal demo, got {causal} and {non_causal}"
        )));
    }
    Ok(())
}
