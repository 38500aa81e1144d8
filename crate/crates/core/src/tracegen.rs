//! Step one of trace construction: few-shot generation, correctness filtering
//! and cross-model selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{EventPair, Label};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::prompts::{
    check_generation_demos, parse_final_answer, AnswerValue, FewShotDemo, ParsedAnswer, TemplateId,
    TemplateSet,
};
use crate::util::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStage {
    Generated,
    Rewritten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub template_id: TemplateId,
    pub demo_ids: Vec<String>,
    pub seed: u64,
}

/// One reasoning passage for one pair, with its parsed verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTTrace {
    pub pair_id: String,
    pub source_model_id: String,
    pub prompt_text: String,
    pub response_text: String,
    pub parsed: ParsedAnswer,
    pub is_correct: bool,
    pub token_count: u64,
    pub token_method: String,
    pub perplexity: Option<f64>,
    pub stage: TraceStage,
    pub meta: TraceMeta,
}

/// Whether a parsed verdict agrees with the gold label. Unparseable never does.
pub fn answer_is_correct(value: AnswerValue, label: Label) -> bool {
    matches!(
        (value, label),
        (AnswerValue::Yes, Label::Causal) | (AnswerValue::No, Label::NonCausal)
    )
}

impl CoTTrace {
    /// Builds a trace from a model response, parsing and grading it.
    #[allow(clippy::too_many_arguments)]
    pub fn from_response(
        pair: &EventPair,
        source_model_id: &str,
        prompt_text: String,
        response_text: String,
        token_count: u64,
        token_method: String,
        stage: TraceStage,
        meta: TraceMeta,
    ) -> CoTTrace {
        let parsed = parse_final_answer(&response_text);
        CoTTrace {
            pair_id: pair.pair_id.clone(),
            source_model_id: source_model_id.to_string(),
            is_correct: answer_is_correct(parsed.value, pair.label),
            prompt_text,
            response_text,
            parsed,
            token_count,
            token_method,
            perplexity: None,
            stage,
            meta,
        }
    }

    /// Checks the stored verdict against a fresh parse of the response.
    pub fn check_consistent(&self, label: Label) -> Result<()> {
        let parsed = parse_final_answer(&self.response_text);
        if parsed != self.parsed || answer_is_correct(parsed.value, label) != self.is_correct {
            return Err(Error::Validation(format!(
                "trace for pair {} from {} disagrees with its response text",
                self.pair_id, self.source_model_id
            )));
        }
        if let Some(p) = self.perplexity {
            if !(p > 0.0) {
                return Err(Error::Validation(format!(
                    "trace for pair {} has perplexity {p}",
                    self.pair_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub pair_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationRun {
    pub traces: Vec<CoTTrace>,
    pub failures: Vec<GenerationFailure>,
}

/// The demo-free question a trace answers; used for scoring and export.
pub fn instruction_for(pair: &EventPair, templates: &TemplateSet) -> Result<String> {
    templates.eci_prompt(pair, TemplateId::ZeroShot, None)
}

/// One few-shot generation attempt per pair. Output is ordered by pair id.
pub fn generate_traces(
    pairs: &[EventPair],
    generator: &Gateway,
    demos: &[FewShotDemo],
    templates: &TemplateSet,
    seed: u64,
) -> Result<GenerationRun> {
    check_generation_demos(demos)?;
    let demo_ids: Vec<String> = demos.iter().map(|d| d.demo_id.clone()).collect();
    let prompts = pairs
        .iter()
        .map(|p| templates.eci_prompt(p, TemplateId::FewShotIcl, Some(demos)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&EventPair, &String)> = pairs.iter().zip(&prompts).collect();
    let workers = generator.config().max_in_flight;
    let results = par_map(&jobs, workers, |(pair, prompt)| {
        generator.complete(prompt).map(|c| {
            let tokens = generator.completion_tokens(&c);
            CoTTrace::from_response(
                pair,
                generator.model_id(),
                (*prompt).clone(),
                c.text,
                tokens.count,
                tokens.method,
                TraceStage::Generated,
                TraceMeta {
                    template_id: TemplateId::FewShotIcl,
                    demo_ids: demo_ids.clone(),
                    seed,
                },
            )
        })
    });
    let mut run = GenerationRun::default();
    for ((pair, _), result) in jobs.iter().zip(results) {
        match result {
            Ok(trace) => run.traces.push(trace),
            Err(e) => {
                log::warn!("generation failed for pair {}: {e}", pair.pair_id);
                run.failures.push(GenerationFailure {
                    pair_id: pair.pair_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    run.traces.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    run.failures.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    Ok(run)
}

pub fn filter_correct(traces: &[CoTTrace]) -> Vec<CoTTrace> {
    traces.iter().filter(|t| t.is_correct).cloned().collect()
}

/// Fills `perplexity` on every trace using `scorer`, conditioning each
/// response on its pair's demo-free instruction.
pub fn score_traces(
    traces: &mut [CoTTrace],
    pairs: &BTreeMap<String, EventPair>,
    scorer: &Gateway,
    templates: &TemplateSet,
) -> Result<()> {
    let instructions = traces
        .iter()
        .map(|t| {
            let pair = pairs
                .get(&t.pair_id)
                .ok_or_else(|| Error::Validation(format!("trace references unknown pair {}", t.pair_id)))?;
            instruction_for(pair, templates)
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&String, &str)> = instructions
        .iter()
        .zip(traces.iter().map(|t| t.response_text.as_str()))
        .collect();
    let scores = par_map(&jobs, scorer.config().max_in_flight, |(i, r)| {
        scorer.score_perplexity(i, r)
    });
    for (trace, score) in traces.iter_mut().zip(scores) {
        trace.perplexity = Some(score?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    PerModel { model_id: String },
    LowestPerplexity,
    LowestPerplexityLongOnly { excluded: Vec<String> },
}

impl SelectionStrategy {
    pub fn validate(&self) -> Result<()> {
        if let SelectionStrategy::LowestPerplexityLongOnly { excluded } = self {
            if excluded.is_empty() {
                return Err(Error::Config(
                    "long-only selection needs at least one excluded model".into(),
                ));
            }
        }
        Ok(())
    }

    fn needs_perplexity(&self) -> bool {
        !matches!(self, SelectionStrategy::PerModel { .. })
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionStrategy::PerModel { model_id } => write!(f, "per-model:{model_id}"),
            SelectionStrategy::LowestPerplexity => f.write_str("lowest-ppl"),
            SelectionStrategy::LowestPerplexityLongOnly { excluded } => {
                write!(f, "long-only:{}", excluded.join(","))
            }
        }
    }
}

/// Accepts `per-model:<id>`, `lowest-ppl`, `long-only:<id>[,<id>...]`.
impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let strategy = match (kind, arg) {
            ("per-model", Some(id)) if !id.is_empty() => SelectionStrategy::PerModel { model_id: id.into() },
            ("lowest-ppl", None) => SelectionStrategy::LowestPerplexity,
            ("long-only", Some(ids)) => SelectionStrategy::LowestPerplexityLongOnly {
                excluded: ids
                    .split(',')
                    .filter(|x| !x.is_empty())
                    .map(String::from)
                    .collect(),
            },
            _ => return Err(Error::Config(format!("unknown selection strategy `{s}`"))),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Picks at most one trace per pair from per-model pools.
pub fn select_traces(
    pools: &BTreeMap<String, Vec<CoTTrace>>,
    strategy: &SelectionStrategy,
) -> Result<BTreeMap<String, CoTTrace>> {
    strategy.validate()?;
    let mut out = BTreeMap::new();
    if let SelectionStrategy::PerModel { model_id } = strategy {
        let pool = pools
            .get(model_id)
            .ok_or_else(|| Error::Validation(format!("no trace pool for model {model_id}")))?;
        for t in pool {
            out.entry(t.pair_id.clone()).or_insert_with(|| t.clone());
        }
        return Ok(out);
    }
    let excluded: &[String] = match strategy {
        SelectionStrategy::LowestPerplexityLongOnly { excluded } => excluded,
        _ => &[],
    };
    let mut best: BTreeMap<&str, (f64, &CoTTrace)> = BTreeMap::new();
    // Pools iterate in model-id order, so a strict `<` keeps the smallest id on ties.
    for (model, pool) in pools {
        if excluded.contains(model) {
            continue;
        }
        for t in pool {
            let ppl = match t.perplexity {
                Some(p) if strategy.needs_perplexity() => p,
                _ => {
                    return Err(Error::Validation(format!(
                        "trace for pair {} from {model} has no perplexity",
                        t.pair_id
                    )))
                }
            };
            match best.get(t.pair_id.as_str()) {
                Some((b, _)) if !(ppl < *b) => {}
                _ => {
                    best.insert(&t.pair_id, (ppl, t));
                }
            }
        }
    }
    for (pair_id, (_, t)) in best {
        out.insert(pair_id.to_string(), t.clone());
    }
    Ok(out)
}

pub fn mean_token_length(traces: &[CoTTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Validation("mean token length of no traces".into()));
    }
    Ok(traces.iter().map(|t| t.token_count as f64).sum::<f64>() / traces.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{EndpointConfig, MockBackend};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn trace(pair_id: &str, model: &str, ppl: Option<f64>, correct: bool) -> CoTTrace {
        CoTTrace {
            pair_id: pair_id.into(),
            source_model_id: model.into(),
            prompt_text: String::new(),
            response_text: String::new(),
            parsed: ParsedAnswer::UNPARSEABLE,
            is_correct: correct,
            token_count: 1,
            token_method: "whitespace".into(),
            perplexity: ppl,
            stage: TraceStage::Generated,
            meta: TraceMeta {
                template_id: TemplateId::FewShotIcl,
                demo_ids: vec![],
                seed: 0,
            },
        }
    }

    fn demos() -> Vec<FewShotDemo> {
        let c = EventPair::in_sentence(
            "demo-c",
            "The blast killed two.",
            "blast",
            "killed",
            Label::Causal,
        )
        .unwrap();
        let n =
            EventPair::in_sentence("demo-n", "He ate and slept.", "ate", "slept", Label::NonCausal).unwrap();
        vec![
            FewShotDemo {
                demo_id: "c".into(),
                pair: c,
                trace_text: "It led to it. [Final Answer: Yes]".into(),
                label: Label::Causal,
            },
            FewShotDemo {
                demo_id: "n".into(),
                pair: n,
                trace_text: "Unrelated. [Final Answer: No]".into(),
                label: Label::NonCausal,
            },
        ]
    }

    fn gateway(mock: MockBackend) -> Gateway {
        Gateway::new(EndpointConfig::new("mock://gen", "gen"), Arc::new(mock)).unwrap()
    }

    #[test]
    fn generation_grades_each_pair() {
        let pairs = vec![
            EventPair::in_sentence(
                "d1",
                "Rain fell, so roads flooded.",
                "fell",
                "flooded",
                Label::Causal,
            )
            .unwrap(),
            EventPair::in_sentence(
                "d2",
                "She sang while he cooked.",
                "sang",
                "cooked",
                Label::NonCausal,
            )
            .unwrap(),
            EventPair::in_sentence(
                "d3",
                "The bomb exploded, injuring five.",
                "exploded",
                "injuring",
                Label::Causal,
            )
            .unwrap(),
        ];
        let mock = MockBackend::new("gen")
            .rule(&["<fell> and <flooded>?"], "Rain caused it. [Final Answer: Yes]")
            .rule(&["<sang> and <cooked>?"], "Independent. [Final Answer: No]")
            .rule(&["<exploded> and <injuring>?"], "No link. [Final Answer: No]");
        let run = generate_traces(&pairs, &gateway(mock), &demos(), TemplateSet::builtin(), 7).unwrap();
        let by_pair: BTreeMap<_, _> = run
            .traces
            .iter()
            .map(|t| (t.pair_id.clone(), t.is_correct))
            .collect();
        let expected: Vec<bool> = pairs.iter().map(|p| by_pair[&p.pair_id]).collect();
        assert_eq!(expected, vec![true, true, false]);
        assert!(run.failures.is_empty());
        assert!(run.traces.windows(2).all(|w| w[0].pair_id < w[1].pair_id));
        assert_eq!(run.traces[0].meta.demo_ids, vec!["c", "n"]);
    }

    #[test]
    fn markerless_response_is_unparseable_and_wrong() {
        let pairs = vec![EventPair::in_sentence("d", "A hit B.", "A", "hit", Label::NonCausal).unwrap()];
        let run = generate_traces(
            &pairs,
            &gateway(MockBackend::new("gen").fallback(|_| "maybe".into())),
            &demos(),
            TemplateSet::builtin(),
            0,
        )
        .unwrap();
        assert_eq!(run.traces[0].parsed.value, AnswerValue::Unparseable);
        assert!(!run.traces[0].is_correct);
    }

    #[test]
    fn transport_failures_are_recorded() {
        let pairs = vec![EventPair::in_sentence("d", "A hit B.", "A", "hit", Label::Causal).unwrap()];
        let mut cfg = EndpointConfig::new("mock://gen", "gen");
        cfg.retry.max_attempts = 1;
        let gw = Gateway::new(cfg, Arc::new(MockBackend::new("gen").fail_next(1, 0))).unwrap();
        let run = generate_traces(&pairs, &gw, &demos(), TemplateSet::builtin(), 0).unwrap();
        assert!(run.traces.is_empty());
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].pair_id, pairs[0].pair_id);
    }

    #[test]
    fn unbalanced_demos_rejected() {
        let d = demos();
        let err = generate_traces(
            &[],
            &gateway(MockBackend::new("gen")),
            &d[..1],
            TemplateSet::builtin(),
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn filter_examples() {
        let ts = vec![
            trace("a", "m", None, true),
            trace("b", "m", None, false),
            trace("c", "m", None, true),
        ];
        let ids: Vec<_> = filter_correct(&ts).into_iter().map(|t| t.pair_id).collect();
        assert_eq!(ids, ["a", "c"]);
        assert!(filter_correct(&ts[1..2]).is_empty());
    }

    #[test]
    fn filter_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ts: Vec<CoTTrace> = (0..1000)
            .map(|i| trace(&format!("p{i}"), "m", None, rng.random_bool(0.5)))
            .collect();
        let mut oracle = Vec::new();
        for t in &ts {
            if t.is_correct {
                oracle.push(t.clone());
            }
        }
        assert_eq!(filter_correct(&ts), oracle);
    }

    fn pools(table: &[(&str, &str, f64)]) -> BTreeMap<String, Vec<CoTTrace>> {
        let mut p: BTreeMap<String, Vec<CoTTrace>> = BTreeMap::new();
        for (model, pair, ppl) in table {
            p.entry(model.to_string())
                .or_default()
                .push(trace(pair, model, Some(*ppl), true));
        }
        p
    }

    #[test]
    fn lowest_perplexity_and_long_only() {
        let p = pools(&[("modelA", "x", 2.5), ("modelB", "x", 2.2)]);
        let sel = select_traces(&p, &SelectionStrategy::LowestPerplexity).unwrap();
        assert_eq!(sel["x"].source_model_id, "modelB");
        let long = SelectionStrategy::LowestPerplexityLongOnly {
            excluded: vec!["modelB".into()],
        };
        assert_eq!(select_traces(&p, &long).unwrap()["x"].source_model_id, "modelA");
    }

    #[test]
    fn ties_go_to_smallest_model_id() {
        let p = pools(&[("zeta", "x", 2.0), ("alpha", "x", 2.0)]);
        let sel = select_traces(&p, &SelectionStrategy::LowestPerplexity).unwrap();
        assert_eq!(sel["x"].source_model_id, "alpha");
    }

    #[test]
    fn missing_perplexity_names_trace() {
        let mut p = pools(&[("m", "x", 2.0)]);
        p.get_mut("m").unwrap().push(trace("y", "m", None, true));
        match select_traces(&p, &SelectionStrategy::LowestPerplexity) {
            Err(Error::Validation(msg)) => assert!(msg.contains("pair y from m")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pairs_without_traces_are_absent() {
        let p = pools(&[("a", "x", 1.0), ("b", "y", 1.0)]);
        let long = SelectionStrategy::LowestPerplexityLongOnly {
            excluded: vec!["b".into()],
        };
        let sel = select_traces(&p, &long).unwrap();
        assert_eq!(sel.keys().collect::<Vec<_>>(), ["x"]);
    }

    #[test]
    fn selection_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let models = ["m1", "m2", "m3", "m4"];
        let mut table = Vec::new();
        for pair in 0..200 {
            for m in models {
                if rng.random_bool(0.8) {
                    // Coarse values so ties occur.
                    table.push((m, format!("p{pair:03}"), rng.random_range(1..40) as f64 / 10.0));
                }
            }
        }
        let rows: Vec<(&str, &str, f64)> = table.iter().map(|(m, p, v)| (*m, p.as_str(), *v)).collect();
        let sel = select_traces(&pools(&rows), &SelectionStrategy::LowestPerplexity).unwrap();
        for pair in 0..200 {
            let id = format!("p{pair:03}");
            let mut oracle: Option<(f64, &str)> = None;
            for (m, p, v) in &rows {
                if *p == id && oracle.is_none_or(|(bv, bm)| *v < bv || (*v == bv && *m < bm)) {
                    oracle = Some((*v, m));
                }
            }
            match oracle {
                None => assert!(!sel.contains_key(&id)),
                Some((v, m)) => {
                    assert_eq!(sel[&id].source_model_id, m);
                    assert_eq!(sel[&id].perplexity, Some(v));
                }
            }
        }
    }

    #[test]
    fn strategy_strings() {
        for s in ["per-model:qwen", "lowest-ppl", "long-only:qwen,llama"] {
            assert_eq!(s.parse::<SelectionStrategy>().unwrap().to_string(), s);
        }
        assert!("long-only:".parse::<SelectionStrategy>().is_err());
        assert!("best".parse::<SelectionStrategy>().is_err());
    }

    #[test]
    fn mean_lengths() {
        let mut t = trace("a", "m", None, true);
        t.token_count = 242;
        assert_eq!(mean_token_length(&[t.clone()]).unwrap(), 242.0);
        let mut u = t.clone();
        t.token_count = 1;
        u.token_count = 3;
        assert_eq!(mean_token_length(&[t, u]).unwrap(), 2.0);
        assert!(matches!(mean_token_length(&[]), Err(Error::Validation(_))));
    }

    #[test]
    fn mean_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts: Vec<CoTTrace> = (0..500)
            .map(|i| {
                let mut t = trace(&i.to_string(), "m", None, true);
                t.token_count = rng.random_range(1..2000);
                t
            })
            .collect();
        let mut sum = 0u64;
        for t in &ts {
            sum += t.token_count;
        }
        let oracle = sum as f64 / ts.len() as f64;
        assert!((mean_token_length(&ts).unwrap() - oracle).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(mask in proptest::collection::vec(any::<bool>(), 0..60)) {
            let ts: Vec<CoTTrace> = mask.iter().enumerate().map(|(i, c)| trace(&i.to_string(), "m", None, *c)).collect();
            let once = filter_correct(&ts);
            prop_assert_eq!(filter_correct(&once), once);
        }

        #[test]
        fn single_pool_equals_per_model(ppls in proptest::collection::vec(0.5f64..10.0, 1..40)) {
            let rows: Vec<(String, f64)> = ppls.iter().enumerate().map(|(i, p)| (format!("p{i}"), *p)).collect();
            let table: Vec<(&str, &str, f64)> = rows.iter().map(|(p, v)| ("only", p.as_str(), *v)).collect();
            let p = pools(&table);
            let a = select_traces(&p, &SelectionStrategy::LowestPerplexity).unwrap();
            let b = select_traces(&p, &SelectionStrategy::PerModel { model_id: "only".into() }).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
