//! Supervised fine-tuning records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetKind, EventPair, Label};
use crate::error::{Error, Result};
use crate::prompts::{TemplateId, TemplateSet};
use crate::tracegen::{instruction_for, CoTTrace, TraceStage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub source_model_id: String,
    pub stage: TraceStage,
    pub template_id: TemplateId,
    pub label: Label,
    pub dataset: DatasetKind,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
}

/// One training example: the demo-free question and the trace answering it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub response: String,
    pub pair_id: String,
    pub meta: SftMeta,
}

/// Converts final traces into training records, ordered by pair id.
/// Incorrect traces are refused rather than skipped.
pub fn sft_records(
    traces: &[CoTTrace],
    pairs: &BTreeMap<String, EventPair>,
    templates: &TemplateSet,
) -> Result<Vec<SftRecord>> {
    let mut out = traces
        .iter()
        .map(|t| {
            let pair = pairs
                .get(&t.pair_id)
                .ok_or_else(|| Error::Validation(format!("trace references unknown pair {}", t.pair_id)))?;
            t.check_consistent(pair.label)?;
            if !t.is_correct {
                return Err(Error::Validation(format!(
                    "refusing to export incorrect trace for pair {}",
                    t.pair_id
                )));
            }
            Ok(SftRecord {
                instruction: instruction_for(pair, templates)?,
                response: t.response_text.clone(),
                pair_id: t.pair_id.clone(),
                meta: SftMeta {
                    source_model_id: t.source_model_id.clone(),
                    stage: t.stage,
                    template_id: t.meta.template_id,
                    label: pair.label,
                    dataset: pair.dataset,
                    doc_id: pair.doc_id.clone(),
                    perplexity: t.perplexity,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    Ok(out)
}
