//! Causal-hallucination metrics and the evaluation protocols that feed them.
//!
//! All rates are fractions in `[0, 1]`; percentages only appear in the CSV
//! presentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EventPair, Label};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::prompts::{parse_final_answer, AnswerValue, FewShotDemo, TemplateId, TemplateSet};
use crate::store::write_atomic;
use crate::util::{par_map, sha256_hex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pair_id: String,
    pub label: Label,
    pub predicted: AnswerValue,
    pub raw_text_digest: String,
    /// Set when the request failed; `predicted` is then Unparseable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Standard,
    Intervention,
}

/// 2x2 table with unparseable answers folded into the wrong class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl Confusion {
    pub fn of(records: &[PredictionRecord]) -> Confusion {
        let mut c = Confusion::default();
        for r in records {
            match (r.label, r.predicted) {
                (Label::Causal, AnswerValue::Yes) => c.tp += 1,
                (Label::Causal, _) => c.fn_ += 1,
                (Label::NonCausal, AnswerValue::No) => c.tn += 1,
                (Label::NonCausal, _) => c.fp += 1,
            }
        }
        c
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let [tp, fn_, tn, fp] = [self.tp, self.fn_, self.tn, self.fp].map(|x| x as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom.sqrt()
        }
    }
}

/// Quantities that follow from the two per-class accuracies alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub chr: f64,
    pub m_acc: f64,
    pub fpr: f64,
    pub tnr: f64,
}

pub fn rates_from_accuracies(acc_causal: f64, acc_non_causal: f64) -> ClassRates {
    ClassRates {
        chr: acc_causal - acc_non_causal,
        m_acc: (acc_causal + acc_non_causal) / 2.0,
        fpr: 1.0 - acc_non_causal,
        tnr: acc_non_causal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_causal: u64,
    pub n_non_causal: u64,
    /// Absent when the set has no pair of that class; CHR and mAcc then
    /// are absent too.
    pub acc_causal: Option<f64>,
    pub acc_non_causal: Option<f64>,
    pub chr: Option<f64>,
    pub m_acc: Option<f64>,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub mcc: f64,
    pub confusion: Confusion,
    pub unparseable_count: u64,
    pub mean_token_len: Option<f64>,
    pub tokenizer_provenance: Option<String>,
    pub mode: EvalMode,
}

pub fn evaluate_predictions(records: &[PredictionRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Validation("no predictions to evaluate".into()));
    }
    let c = Confusion::of(records);
    let n_causal = c.tp + c.fn_;
    let n_non_causal = c.tn + c.fp;
    let acc_causal = (n_causal > 0).then(|| c.tp as f64 / n_causal as f64);
    let acc_non_causal = (n_non_causal > 0).then(|| c.tn as f64 / n_non_causal as f64);
    let rates = acc_causal
        .zip(acc_non_causal)
        .map(|(a, b)| rates_from_accuracies(a, b));
    Ok(MetricsReport {
        n_causal,
        n_non_causal,
        acc_causal,
        acc_non_causal,
        chr: rates.map(|r| r.chr),
        m_acc: rates.map(|r| r.m_acc),
        fpr: acc_non_causal.map(|t| 1.0 - t),
        tnr: acc_non_causal,
        mcc: c.mcc(),
        confusion: c,
        unparseable_count: records
            .iter()
            .filter(|r| r.predicted == AnswerValue::Unparseable)
            .count() as u64,
        mean_token_len: None,
        tokenizer_provenance: None,
        mode: EvalMode::Standard,
    })
}

/// One model response as persisted alongside predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutput {
    pub pair_id: String,
    pub prompt: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<PredictionRecord>,
    pub raw: Vec<RawOutput>,
}

fn run_prompts(
    subject: &Gateway,
    pairs: &[EventPair],
    prompts: Vec<String>,
    mode: EvalMode,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Validation("evaluation needs at least one pair".into()));
    }
    let jobs: Vec<(&EventPair, String)> = pairs.iter().zip(prompts).collect();
    let results = par_map(&jobs, subject.config().max_in_flight, |(_, prompt)| {
        subject.complete(prompt)
    });
    if let Some(Err(e)) = results.last().filter(|_| results.iter().all(|r| r.is_err())) {
        return Err(Error::Stage(format!(
            "every request to {} failed; last error: {e}",
            subject.model_id()
        )));
    }
    let mut records = Vec::with_capacity(jobs.len());
    let mut raw = Vec::with_capacity(jobs.len());
    let mut lengths = Vec::new();
    let mut methods = std::collections::BTreeSet::new();
    for ((pair, prompt), result) in jobs.into_iter().zip(results) {
        let (text, predicted, error) = match result {
            Ok(c) => {
                let n = subject.completion_tokens(&c);
                lengths.push(n.count as f64);
                methods.insert(n.method);
                let v = parse_final_answer(&c.text).value;
                (c.text, v, None)
            }
            Err(e) => (String::new(), AnswerValue::Unparseable, Some(e.to_string())),
        };
        records.push(PredictionRecord {
            pair_id: pair.pair_id.clone(),
            label: pair.label,
            predicted,
            raw_text_digest: sha256_hex(text.as_bytes()),
            error: error.clone(),
        });
        raw.push(RawOutput {
            pair_id: pair.pair_id.clone(),
            prompt,
            text,
            error,
        });
    }
    let mut report = evaluate_predictions(&records)?;
    report.mode = mode;
    if !lengths.is_empty() {
        report.mean_token_len = Some(lengths.iter().sum::<f64>() / lengths.len() as f64);
        report.tokenizer_provenance = Some(methods.into_iter().collect::<Vec<_>>().join("+"));
    }
    Ok(Evaluation { report, records, raw })
}

/// Asks `subject` about every pair and scores the parsed answers.
pub fn run_evaluation(
    subject: &Gateway,
    pairs: &[EventPair],
    template: TemplateId,
    demos: Option<&[FewShotDemo]>,
    templates: &TemplateSet,
) -> Result<Evaluation> {
    let prompts = pairs
        .iter()
        .map(|p| templates.eci_prompt(p, template, demos))
        .collect::<Result<Vec<_>>>()?;
    let mode = if template == TemplateId::InterventionWrong {
        EvalMode::Intervention
    } else {
        EvalMode::Standard
    };
    run_prompts(subject, pairs, prompts, mode)
}

/// Like [`run_evaluation`], but each prompt asserts the opposite of the
/// gold label.
pub fn run_robustness(subject: &Gateway, pairs: &[EventPair], templates: &TemplateSet) -> Result<Evaluation> {
    let prompts = pairs
        .iter()
        .map(|p| templates.intervention_prompt(p))
        .collect::<Result<Vec<_>>>()?;
    run_prompts(subject, pairs, prompts, EvalMode::Intervention)
}

pub const CSV_HEADER: [&str; 14] = [
    "label",
    "mode",
    "n_causal",
    "n_non_causal",
    "acc_causal",
    "acc_non_causal",
    "chr",
    "m_acc",
    "fpr",
    "tnr",
    "mcc",
    "unparseable",
    "mean_token_len",
    "tokenizer",
];

/// Two-decimal percentage, without a negative zero.
pub fn format_percent(fraction: f64) -> String {
    let s = format!("{:.2}", fraction * 100.0);
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

pub fn format_mcc(mcc: f64) -> String {
    let s = format!("{mcc:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

/// Writes one row per report; percentages with two decimals, MCC with three.
pub fn emit_report_csv(reports: &[(String, MetricsReport)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("csv encoding: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (label, r) in reports {
        let mode = match r.mode {
            EvalMode::Standard => "standard",
            EvalMode::Intervention => "intervention",
        };
        w.write_record([
            label.clone(),
            mode.to_string(),
            r.n_causal.to_string(),
            r.n_non_causal.to_string(),
            opt(r.acc_causal, format_percent),
            opt(r.acc_non_causal, format_percent),
            opt(r.chr, format_percent),
            opt(r.m_acc, format_percent),
            opt(r.fpr, format_percent),
            opt(r.tnr, format_percent),
            format_mcc(r.mcc),
            r.unparseable_count.to_string(),
            r.mean_token_len.map(|m| format!("{m:.2}")).unwrap_or_default(),
            r.tokenizer_provenance.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv encoding: {e}")))?;
    write_atomic(path, &bytes)
}

/// A report row as read back from CSV, values in percent.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub mode: String,
    pub n_causal: u64,
    pub n_non_causal: u64,
    pub acc_causal: Option<f64>,
    pub acc_non_causal: Option<f64>,
    pub chr: Option<f64>,
    pub m_acc: Option<f64>,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub mcc: f64,
    pub unparseable: u64,
    pub mean_token_len: Option<f64>,
    pub tokenizer: Option<String>,
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::NotFound(path.into()),
        _ => Error::parse(path.display().to_string(), "header", e.to_string()),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| {
                Error::parse(
                    path.display().to_string(),
                    format!("row {}", i + 1),
                    e.to_string(),
                )
            })
        })
        .collect()
}
