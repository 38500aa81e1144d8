//! Step two of trace construction: rewrite correct traces with the target
//! model and keep a rewrite only if it stays correct and does not raise
//! perplexity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::EventPair;
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::prompts::{RewriteVariant, TemplateSet};
use crate::tracegen::{instruction_for, CoTTrace, TraceMeta, TraceStage};
use crate::util::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteReason {
    RewriteAccepted,
    RewriteIncorrect,
    RewriteFailed,
    /// The rewrite was correct but the perplexity gate sent the original back.
    PerplexityReverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub pair_id: String,
    /// Demo-free question both traces answer.
    pub instruction: String,
    pub original: CoTTrace,
    pub rewritten: Option<CoTTrace>,
    #[serde(rename = "final")]
    pub final_trace: CoTTrace,
    pub reason: RewriteReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RewriteOutcome {
    fn revert(&mut self) {
        if self.reason == RewriteReason::RewriteAccepted {
            self.final_trace = self.original.clone();
            self.reason = RewriteReason::PerplexityReverted;
        }
    }
}

/// Rewrites every trace with `target`. Output order follows input order.
pub fn rewrite_traces(
    traces: &[CoTTrace],
    pairs: &BTreeMap<String, EventPair>,
    target: &Gateway,
    variant: RewriteVariant,
    templates: &TemplateSet,
) -> Result<Vec<RewriteOutcome>> {
    let mut jobs = Vec::with_capacity(traces.len());
    for t in traces {
        if t.stage != TraceStage::Generated || !t.is_correct {
            return Err(Error::Validation(format!(
                "only correct generated traces can be rewritten (pair {})",
                t.pair_id
            )));
        }
        let pair = pairs
            .get(&t.pair_id)
            .ok_or_else(|| Error::Validation(format!("trace references unknown pair {}", t.pair_id)))?;
        let instruction = instruction_for(pair, templates)?;
        let prompt = templates.rewrite_prompt(&instruction, &t.response_text, variant)?;
        jobs.push((t, pair, instruction, prompt));
    }
    Ok(par_map(
        &jobs,
        target.config().max_in_flight,
        |(original, pair, instruction, prompt)| {
            let base = RewriteOutcome {
                pair_id: original.pair_id.clone(),
                instruction: instruction.clone(),
                original: (*original).clone(),
                rewritten: None,
                final_trace: (*original).clone(),
                reason: RewriteReason::RewriteFailed,
                error: None,
            };
            match target.complete(prompt) {
                Err(e) => {
                    log::warn!("rewrite failed for pair {}: {e}", original.pair_id);
                    RewriteOutcome {
                        error: Some(e.to_string()),
                        ..base
                    }
                }
                Ok(c) => {
                    let tokens = target.completion_tokens(&c);
                    let rewritten = CoTTrace::from_response(
                        pair,
                        target.model_id(),
                        prompt.clone(),
                        c.text,
                        tokens.count,
                        tokens.method,
                        TraceStage::Rewritten,
                        TraceMeta {
                            template_id: variant.template_id(),
                            demo_ids: Vec::new(),
                            seed: original.meta.seed,
                        },
                    );
                    if rewritten.is_correct {
                        RewriteOutcome {
                            final_trace: rewritten.clone(),
                            rewritten: Some(rewritten),
                            reason: RewriteReason::RewriteAccepted,
                            ..base
                        }
                    } else {
                        RewriteOutcome {
                            rewritten: Some(rewritten),
                            reason: RewriteReason::RewriteIncorrect,
                            ..base
                        }
                    }
                }
            }
        },
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Compare the mean over the whole set; on failure ship every original.
    #[default]
    CorpusMean,
    /// Also revert each accepted rewrite that scores worse than its original.
    PerTrace,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::CorpusMean => "corpus-mean",
            GateMode::PerTrace => "per-trace",
        })
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "corpus-mean" | "corpus" => Ok(GateMode::CorpusMean),
            "per-trace" | "trace" => Ok(GateMode::PerTrace),
            _ => Err(Error::Config(format!("unknown gate mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplGateReport {
    /// Means are absent when there were no outcomes to score.
    pub mean_ppl_original: Option<f64>,
    /// Mean over the finals the gate was asked to approve.
    pub mean_ppl_final: Option<f64>,
    pub mode: GateMode,
    pub tolerance: f64,
    pub passed: bool,
    /// Accepted rewrites sent back to their originals by the gate.
    pub reverted: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Applies the gate to outcomes whose traces already carry perplexities.
pub fn apply_gate(
    mut outcomes: Vec<RewriteOutcome>,
    mode: GateMode,
    tolerance: f64,
) -> Result<(PplGateReport, Vec<RewriteOutcome>)> {
    let ppl = |t: &CoTTrace| {
        t.perplexity
            .ok_or_else(|| Error::Validation(format!("trace for pair {} has no perplexity", t.pair_id)))
    };
    let mut reverted = 0;
    if mode == GateMode::PerTrace {
        for o in &mut outcomes {
            if o.reason == RewriteReason::RewriteAccepted && ppl(&o.final_trace)? > ppl(&o.original)? {
                o.revert();
                reverted += 1;
            }
        }
    }
    let originals = outcomes
        .iter()
        .map(|o| ppl(&o.original))
        .collect::<Result<Vec<_>>>()?;
    let finals = outcomes
        .iter()
        .map(|o| ppl(&o.final_trace))
        .collect::<Result<Vec<_>>>()?;
    let (mean_ppl_original, mean_ppl_final) = (mean(&originals), mean(&finals));
    let passed = match (mean_ppl_original, mean_ppl_final) {
        (Some(o), Some(f)) => f <= o + tolerance,
        _ => true,
    };
    if !passed {
        for o in &mut outcomes {
            if o.reason == RewriteReason::RewriteAccepted {
                o.revert();
                reverted += 1;
            }
        }
    }
    let report = PplGateReport {
        mean_ppl_original,
        mean_ppl_final,
        mode,
        tolerance,
        passed,
        reverted,
    };
    Ok((report, outcomes))
}

/// Scores originals and finals with the target model, then applies the gate.
pub fn ppl_gate(
    outcomes: Vec<RewriteOutcome>,
    target: &Gateway,
    mode: GateMode,
    tolerance: f64,
) -> Result<(PplGateReport, Vec<RewriteOutcome>)> {
    if !(tolerance >= 0.0) {
        return Err(Error::Config(format!(
            "gate tolerance must be >= 0, got {tolerance}"
        )));
    }
    let scores = par_map(&outcomes, target.config().max_in_flight, |o| {
        let original = target.score_perplexity(&o.instruction, &o.original.response_text)?;
        let rewritten = match &o.rewritten {
            Some(r) => Some(target.score_perplexity(&o.instruction, &r.response_text)?),
            None => None,
        };
        Ok::<_, Error>((original, rewritten))
    });
    let mut scored = Vec::with_capacity(outcomes.len());
    for (mut o, s) in outcomes.into_iter().zip(scores) {
        let (original, rewritten) = s?;
        o.original.perplexity = Some(original);
        if let (Some(r), Some(p)) = (&mut o.rewritten, rewritten) {
            r.perplexity = Some(p);
        }
        o.final_trace = match (&o.reason, &o.rewritten) {
            (RewriteReason::RewriteAccepted, Some(r)) => r.clone(),
            _ => o.original.clone(),
        };
        scored.push(o);
    }
    apply_gate(scored, mode, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use crate::gateway::{EndpointConfig, MockBackend};
    use crate::prompts::{parse_final_answer, TemplateId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn setup(label: Label) -> (BTreeMap<String, EventPair>, CoTTrace) {
        let pair = EventPair::in_sentence("d", "Talks collapsed and rain fell.", "collapsed", "fell", label)
            .unwrap();
        let answer = if label == Label::Causal { "Yes" } else { "No" };
        let trace = CoTTrace::from_response(
            &pair,
            "gen",
            "prompt".into(),
            format!("Separate events. [Final Answer: {answer}]"),
            4,
            "whitespace".into(),
            TraceStage::Generated,
            TraceMeta {
                template_id: TemplateId::FewShotIcl,
                demo_ids: vec![],
                seed: 1,
            },
        );
        (BTreeMap::from([(pair.pair_id.clone(), pair)]), trace)
    }

    fn target(mock: MockBackend) -> Gateway {
        let mut cfg = EndpointConfig::new("mock://t", "target");
        cfg.want_logprobs = true;
        Gateway::new(cfg, Arc::new(mock)).unwrap()
    }

    fn run(response: &'static str) -> RewriteOutcome {
        let (pairs, trace) = setup(Label::NonCausal);
        let gw = target(MockBackend::new("target").fallback(move |_| response.into()));
        rewrite_traces(
            &[trace],
            &pairs,
            &gw,
            RewriteVariant::Official,
            TemplateSet::builtin(),
        )
        .unwrap()
        .remove(0)
    }

    #[test]
    fn correct_rewrite_accepted() {
        let o = run("Rewritten reasoning. [Final Answer: No]");
        assert_eq!(o.reason, RewriteReason::RewriteAccepted);
        assert_eq!(Some(&o.final_trace), o.rewritten.as_ref());
        assert_eq!(o.final_trace.stage, TraceStage::Rewritten);
        assert_eq!(o.final_trace.meta.template_id, TemplateId::RewriteOfficial);
    }

    #[test]
    fn flipped_rewrite_falls_back() {
        let o = run("Actually causal. [Final Answer: Yes]");
        assert_eq!(o.reason, RewriteReason::RewriteIncorrect);
        assert_eq!(o.final_trace, o.original);
        assert_eq!(o.final_trace.stage, TraceStage::Generated);
    }

    #[test]
    fn markerless_rewrite_falls_back() {
        let o = run("no verdict here");
        assert_eq!(o.reason, RewriteReason::RewriteIncorrect);
        assert_eq!(o.final_trace, o.original);
    }

    #[test]
    fn transport_failure_falls_back() {
        let (pairs, trace) = setup(Label::Causal);
        let mut cfg = EndpointConfig::new("mock://t", "target");
        cfg.retry.max_attempts = 1;
        let gw = Gateway::new(cfg, Arc::new(MockBackend::new("target").fail_next(1, 0))).unwrap();
        let o = rewrite_traces(
            &[trace],
            &pairs,
            &gw,
            RewriteVariant::Ours,
            TemplateSet::builtin(),
        )
        .unwrap();
        assert_eq!(o[0].reason, RewriteReason::RewriteFailed);
        assert!(o[0].error.is_some());
        assert_eq!(o[0].final_trace, o[0].original);
    }

    #[test]
    fn rejects_incorrect_input() {
        let (pairs, mut trace) = setup(Label::Causal);
        trace.is_correct = false;
        let gw = target(MockBackend::new("target"));
        let err = rewrite_traces(
            &[trace],
            &pairs,
            &gw,
            RewriteVariant::Ours,
            TemplateSet::builtin(),
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    fn outcome(id: usize, orig: f64, rewritten: Option<f64>) -> RewriteOutcome {
        let base = CoTTrace {
            pair_id: format!("p{id}"),
            source_model_id: "gen".into(),
            prompt_text: String::new(),
            response_text: "[Final Answer: Yes]".into(),
            parsed: parse_final_answer("[Final Answer: Yes]"),
            is_correct: true,
            token_count: 3,
            token_method: "whitespace".into(),
            perplexity: Some(orig),
            stage: TraceStage::Generated,
            meta: TraceMeta {
                template_id: TemplateId::FewShotIcl,
                demo_ids: vec![],
                seed: 0,
            },
        };
        let rw = rewritten.map(|p| CoTTrace {
            perplexity: Some(p),
            stage: TraceStage::Rewritten,
            source_model_id: "target".into(),
            ..base.clone()
        });
        RewriteOutcome {
            pair_id: base.pair_id.clone(),
            instruction: "q".into(),
            final_trace: rw.clone().unwrap_or_else(|| base.clone()),
            reason: if rw.is_some() {
                RewriteReason::RewriteAccepted
            } else {
                RewriteReason::RewriteIncorrect
            },
            original: base,
            rewritten: rw,
            error: None,
        }
    }

    #[test]
    fn corpus_mean_gate_passes_on_decrease_and_equality() {
        let (r, out) = apply_gate(vec![outcome(0, 3.99, Some(3.65))], GateMode::CorpusMean, 0.0).unwrap();
        assert!(r.passed);
        assert_eq!(r.mean_ppl_original, Some(3.99));
        assert_eq!(r.mean_ppl_final, Some(3.65));
        assert_eq!(out[0].reason, RewriteReason::RewriteAccepted);

        let (r, _) = apply_gate(vec![outcome(0, 2.0, Some(2.0))], GateMode::CorpusMean, 0.0).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn corpus_mean_failure_ships_originals() {
        let set = vec![
            outcome(0, 2.0, Some(3.0)),
            outcome(1, 2.0, Some(1.5)),
            outcome(2, 2.0, None),
        ];
        let (r, out) = apply_gate(set, GateMode::CorpusMean, 0.0).unwrap();
        assert!(!r.passed);
        assert_eq!(r.reverted, 2);
        for o in &out {
            assert_eq!(o.final_trace, o.original);
            assert_ne!(o.reason, RewriteReason::RewriteAccepted);
        }
        let (r, _) = apply_gate(vec![outcome(0, 2.0, Some(2.2))], GateMode::CorpusMean, 0.25).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn per_trace_reverts_exactly_the_worse_rewrites() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set: Vec<RewriteOutcome> = (0..50)
            .map(|i| {
                let rw = rng.random_bool(0.8).then(|| rng.random_range(1.0..6.0));
                outcome(i, rng.random_range(1.0..6.0), rw)
            })
            .collect();
        let mut expected = Vec::new();
        for o in &set {
            let worse = o
                .rewritten
                .as_ref()
                .is_some_and(|r| r.perplexity > o.original.perplexity);
            expected.push(worse);
        }
        let (r, out) = apply_gate(set.clone(), GateMode::PerTrace, 0.0).unwrap();
        assert!(r.passed);
        for ((before, after), worse) in set.iter().zip(&out).zip(expected) {
            assert_eq!(after.reason == RewriteReason::PerplexityReverted, worse);
            if worse {
                assert_eq!(after.final_trace, before.original);
            } else {
                assert_eq!(after.final_trace, before.final_trace);
            }
        }
    }

    #[test]
    fn gate_scores_through_target() {
        let (pairs, trace) = setup(Label::NonCausal);
        let gw = target(MockBackend::new("target").fallback(|_| "Short. [Final Answer: No]".into()));
        let outcomes = rewrite_traces(
            &[trace],
            &pairs,
            &gw,
            RewriteVariant::Official,
            TemplateSet::builtin(),
        )
        .unwrap();
        let (report, out) = ppl_gate(outcomes, &gw, GateMode::PerTrace, 0.0).unwrap();
        assert!(report.passed);
        assert!(out[0].original.perplexity.unwrap() > 0.0);
        assert!(out[0].final_trace.perplexity.is_some());
    }

    #[test]
    fn gate_without_logprobs_is_capability_error() {
        let (pairs, trace) = setup(Label::NonCausal);
        let gw = Gateway::new(
            EndpointConfig::new("mock://t", "target"),
            Arc::new(MockBackend::new("target").fallback(|_| "x [Final Answer: No]".into())),
        )
        .unwrap();
        let outcomes = rewrite_traces(
            &[trace],
            &pairs,
            &gw,
            RewriteVariant::Official,
            TemplateSet::builtin(),
        )
        .unwrap();
        assert!(matches!(
            ppl_gate(outcomes, &gw, GateMode::CorpusMean, 0.0),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn empty_outcome_set_passes() {
        let (r, out) = apply_gate(vec![], GateMode::CorpusMean, 0.0).unwrap();
        assert!(r.passed && out.is_empty() && r.mean_ppl_original.is_none());
    }
}
