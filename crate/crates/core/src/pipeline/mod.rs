//! Stage orchestration over a run directory.
//!
//! Each stage reads artifacts written by earlier stages, writes its own
//! atomically and appends one record to the run manifest. A stage whose
//! config and inputs match its latest record, and whose outputs are intact,
//! is skipped.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::{
    CorpusSection, DocLevelSection, EndpointEntry, EvalSet, EvaluateSection, GenerateSection, Overrides,
    PipelineConfig, RewriteSection, Roles, RunSection, SelectSection, SplitSection, TemplatesSection,
};

use crate::corpus::{
    analysis_split, load_corpus, make_folds, sample_doc_level, EventPair, FoldSpec, LabelCounts,
};
use crate::error::{Error, Result};
use crate::export::sft_records;
use crate::gateway::{Gateway, MockBackend, MockSpec};
use crate::metrics::{emit_report_csv, run_evaluation, run_robustness, Evaluation, MetricsReport};
use crate::prompts::{check_generation_demos, load_demos, FewShotDemo, TemplateId, TemplateSet};
use crate::rewrite::{ppl_gate, GateMode, RewriteOutcome};
use crate::store::{
    file_digest, persist_jsonl, read_jsonl, unix_now, write_atomic, FileDigest, ResponseCache, RunManifest,
    Stage, StageRecord,
};
use crate::tracegen::{
    filter_correct, generate_traces, mean_token_length, score_traces, select_traces, CoTTrace,
};
use crate::util::sha256_hex;

pub const DATASET: &str = "dataset.jsonl";
pub const FOLDS: &str = "folds.json";
pub const TRAIN: &str = "train.jsonl";
pub const TEST: &str = "test.jsonl";
pub const OUTCOMES: &str = "outcomes.jsonl";
pub const SELECTED: &str = "selected.jsonl";
pub const SFT: &str = "sft.jsonl";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const RAW: &str = "raw.jsonl";
pub const REPORT: &str = "report.json";
pub const PREDICTIONS_INTERVENTION: &str = "predictions.intervention.jsonl";
pub const RAW_INTERVENTION: &str = "raw.intervention.jsonl";
pub const REPORT_INTERVENTION: &str = "report.intervention.json";
pub const REPORT_CSV: &str = "report.csv";
pub const LOCK: &str = ".lock";

/// Per-endpoint trace file name.
pub fn traces_file(endpoint: &str) -> String {
    let safe: String = endpoint
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("traces.{safe}.jsonl")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Completed,
    /// Nothing to do; the recorded outputs are current.
    UpToDate,
    /// The perplexity gate failed and the original traces were kept.
    GateFailed,
}

/// What a stage body hands back to the manifest writer.
#[derive(Debug, Default)]
struct Produced {
    outputs: Vec<String>,
    reports: BTreeMap<String, Value>,
    fingerprints: BTreeMap<String, String>,
    gate_failed: bool,
}

/// A written evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub label: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldsFile {
    pub k: usize,
    pub selected: usize,
    pub folds: Vec<FoldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<FoldSpec>,
}

/// Topics in the train side of the analysis split.
pub const ANALYSIS_TRAIN_TOPICS: usize = 16;

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<RunLock> {
        let path = run_dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Stage(format!(
                "run directory is locked by another stage; remove {} if it is stale",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    run_dir: PathBuf,
    templates: TemplateSet,
    cache: Arc<ResponseCache>,
    config_digest: String,
}

impl Pipeline {
    /// Validates `config` and prepares the run and cache directories.
    pub fn new(config: PipelineConfig) -> Result<Pipeline> {
        config.validate()?;
        let templates = match &config.templates.dir {
            Some(dir) => TemplateSet::from_dir(&config.resolve(dir))?,
            None => TemplateSet::builtin().clone(),
        };
        let run_dir = config.run_dir();
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let cache = Arc::new(ResponseCache::open(config.cache_dir())?);
        let config_digest = sha256_hex(config.effective().to_string());
        Ok(Pipeline {
            config,
            run_dir,
            templates,
            cache,
            config_digest,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        RunManifest::load_or_new(&self.run_dir, &self.config.run.id)
    }

    /// Runs one stage under the run-directory lock.
    pub fn run(&self, stage: Stage) -> Result<StageStatus> {
        let _lock = RunLock::acquire(&self.run_dir)?;
        let mut manifest = self.manifest()?;
        match stage {
            Stage::Ingest => self.ingest(&mut manifest),
            Stage::Split => self.split(&mut manifest),
            Stage::Generate => self.generate(&mut manifest),
            Stage::Rewrite => self.rewrite(&mut manifest),
            Stage::Select => self.select(&mut manifest),
            Stage::Export => self.export(&mut manifest),
            Stage::Evaluate => self.evaluate(&mut manifest, false),
            Stage::Robustness => self.evaluate(&mut manifest, true),
            Stage::Report => self.report(&mut manifest),
        }
    }

    /// Builds the gateway for a named endpoint.
    pub fn gateway(&self, name: &str) -> Result<Gateway> {
        let entry = self.config.endpoint(name)?;
        let cfg = entry.endpoint_config();
        let gw = if entry.is_mock() {
            let spec = match &entry.mock_spec {
                Some(p) => MockSpec::load(&self.config.resolve(p))?,
                None => MockSpec::default(),
            };
            Gateway::new(cfg, Arc::new(MockBackend::from_spec(&entry.model, &spec)))?
        } else {
            Gateway::http(cfg)?
        };
        Ok(gw.with_cache(self.cache.clone()))
    }

    fn role(&self, role: &str) -> Result<(String, Gateway)> {
        let name = self
            .config
            .role(role)
            .ok_or_else(|| Error::Config(format!("no endpoint bound to role `{role}`")))?;
        Ok((name.to_string(), self.gateway(name)?))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    /// Digest of a prerequisite artifact, or a stage error naming it.
    fn require(&self, rel: &str) -> Result<FileDigest> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(Error::Stage(format!("missing prerequisite {}", p.display())));
        }
        Ok(FileDigest {
            path: rel.to_string(),
            digest: file_digest(&p)?,
        })
    }

    fn read_pairs(&self, rel: &str) -> Result<Vec<EventPair>> {
        read_jsonl(&self.path(rel))
    }

    fn pair_map(&self, rel: &str) -> Result<BTreeMap<String, EventPair>> {
        Ok(self
            .read_pairs(rel)?
            .into_iter()
            .map(|p| (p.pair_id.clone(), p))
            .collect())
    }

    fn load_demo_set(&self, dir: Option<&PathBuf>) -> Result<(Vec<FewShotDemo>, FileDigest)> {
        let dir = dir.ok_or_else(|| Error::Config("generate.demos is not set".into()))?;
        let demos = load_demos(&self.config.resolve(dir))?;
        let digest = sha256_hex(serde_json::to_vec(&demos)?);
        Ok((
            demos,
            FileDigest {
                path: "@demos".into(),
                digest,
            },
        ))
    }

    fn outputs_intact(&self, record: &StageRecord) -> bool {
        record
            .outputs
            .iter()
            .all(|f| file_digest(&self.path(&f.path)).is_ok_and(|d| d == f.digest))
    }

    /// Runs `body` unless the stage is up to date, then records it.
    fn execute(
        &self,
        manifest: &mut RunManifest,
        stage: Stage,
        inputs: Vec<FileDigest>,
        skip_if_current: bool,
        body: impl FnOnce() -> Result<Produced>,
    ) -> Result<StageStatus> {
        let started_at = unix_now();
        let mut record = StageRecord {
            stage,
            config_digest: self.config_digest.clone(),
            effective_config: self.config.effective(),
            inputs,
            outputs: Vec::new(),
            seed: self.config.run.seed,
            endpoint_fingerprints: BTreeMap::new(),
            reports: BTreeMap::new(),
            parent_digest: None,
            started_at,
            finished_at: started_at,
        };
        let status_of = |r: &StageRecord| {
            if r.reports.get("gate_failed") == Some(&Value::Bool(true)) {
                StageStatus::GateFailed
            } else {
                StageStatus::UpToDate
            }
        };
        let previous = manifest
            .latest(stage)
            .filter(|p| p.same_work(&record) && self.outputs_intact(p));
        if skip_if_current {
            if let Some(prev) = previous {
                log::info!("{stage}: up to date");
                return Ok(status_of(prev));
            }
        }
        let produced = body()?;
        record.outputs = produced
            .outputs
            .iter()
            .map(|rel| {
                Ok(FileDigest {
                    path: rel.clone(),
                    digest: file_digest(&self.path(rel))?,
                })
            })
            .collect::<Result<_>>()?;
        record.reports = produced.reports;
        if produced.gate_failed {
            record.reports.insert("gate_failed".into(), Value::Bool(true));
        }
        record.endpoint_fingerprints = produced.fingerprints;
        record.finished_at = unix_now();
        let unchanged = manifest.latest(stage).is_some_and(|p| {
            p.same_work(&record) && p.outputs == record.outputs && p.reports == record.reports
        });
        if unchanged {
            log::info!("{stage}: outputs unchanged");
            return Ok(status_of(manifest.latest(stage).unwrap()));
        }
        manifest.append(record);
        manifest.save(&self.run_dir)?;
        Ok(if produced.gate_failed {
            StageStatus::GateFailed
        } else {
            StageStatus::Completed
        })
    }

    fn ingest(&self, manifest: &mut RunManifest) -> Result<StageStatus> {
        self.execute(manifest, Stage::Ingest, Vec::new(), false, || {
            let kind = self.config.dataset_kind()?;
            let root = self.config.resolve(&self.config.corpus.path);
            let loaded = load_corpus(kind, &root, &self.config.loader_options())?;
            let mut reports = BTreeMap::new();
            reports.insert("provenance".into(), serde_json::to_value(&loaded.provenance)?);
            reports.insert("loaded_counts".into(), serde_json::to_value(loaded.counts())?);
            let mut dataset = match self.config.granularity()? {
                Some(g) => loaded.with_granularity(g),
                None => loaded,
            };
            if let Some(n_neg) = self.config.doc_level.n_neg {
                let sample = sample_doc_level(&dataset, n_neg, self.config.run.seed);
                if sample.shortfall() > 0 {
                    log::warn!(
                        "doc-level sampling drew {} of {} requested negatives",
                        sample.drawn_negatives,
                        sample.requested_negatives
                    );
                }
                reports.insert(
                    "doc_level_sample".into(),
                    json!({
                        "causal": sample.causal,
                        "requested_negatives": sample.requested_negatives,
                        "available_negatives": sample.available_negatives,
                        "drawn_negatives": sample.drawn_negatives,
                        "shortfall": sample.shortfall(),
                    }),
                );
                dataset = sample.dataset;
            }
            dataset.validate()?;
            reports.insert("counts".into(), serde_json::to_value(dataset.counts())?);
            persist_jsonl(&dataset.pairs, &self.path(DATASET))?;
            Ok(Produced {
                outputs: vec![DATASET.into()],
                reports,
                ..Default::default()
            })
        })
    }

    fn split(&self, manifest: &mut RunManifest) -> Result<StageStatus> {
        let inputs = vec![self.require(DATASET)?];
        self.execute(manifest, Stage::Split, inputs, true, || {
            let pairs = self.read_pairs(DATASET)?;
            let topics: Vec<u32> = pairs
                .iter()
                .map(|p| p.topic_id)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let folds = make_folds(&topics, self.config.split.k)?;
            let analysis = (topics.len() > ANALYSIS_TRAIN_TOPICS)
                .then(|| analysis_split(&topics, ANALYSIS_TRAIN_TOPICS))
                .transpose()?;
            let per_fold: Vec<Value> = folds
                .iter()
                .map(|f| {
                    let train =
                        LabelCounts::of(pairs.iter().filter(|p| f.train_topics.contains(&p.topic_id)));
                    let test = LabelCounts::of(pairs.iter().filter(|p| f.test_topics.contains(&p.topic_id)));
                    json!({ "fold": f.fold_index, "train": train, "test": test })
                })
                .collect();
            let fold = &folds[self.config.split.fold - 1];
            let train: Vec<&EventPair> = pairs
                .iter()
                .filter(|p| fold.train_topics.contains(&p.topic_id))
                .collect();
            let test: Vec<&EventPair> = pairs
                .iter()
                .filter(|p| fold.test_topics.contains(&p.topic_id))
                .collect();
            let file = FoldsFile {
                k: self.config.split.k,
                selected: fold.fold_index,
                folds: folds.clone(),
                analysis,
            };
            write_atomic(&self.path(FOLDS), &serde_json::to_vec_pretty(&file)?)?;
            persist_jsonl(&train, &self.path(TRAIN))?;
            persist_jsonl(&test, &self.path(TEST))?;
            let reports = BTreeMap::from([
                ("folds".to_string(), Value::Array(per_fold)),
                ("selected_fold".to_string(), json!(fold.fold_index)),
            ]);
            Ok(Produced {
                outputs: vec![FOLDS.into(), TRAIN.into(), TEST.into()],
                reports,
                ..Default::default()
            })
        })
    }

    fn generate(&self, manifest: &mut RunManifest) -> Result<StageStatus> {
        let (demos, demo_digest) = self.load_demo_set(self.config.generate.demos.as_ref())?;
        check_generation_demos(&demos)?;
        let pool = self.config.pool();
        if pool.is_empty() {
            return Err(Error::Config("no generator endpoint configured".into()));
        }
        let gateways = pool
            .iter()
            .map(|n| Ok((n.clone(), self.gateway(n)?)))
            .collect::<Result<Vec<_>>>()?;
        let inputs = vec![self.require(TRAIN)?, demo_digest];
        self.execute(manifest, Stage::Generate, inputs, true, || {
            let pairs = self.read_pairs(TRAIN)?;
            let mut produced = Produced::default();
            for (name, gw) in &gateways {
                let run = generate_traces(&pairs, gw, &demos, &self.templates, self.config.run.seed)?;
                if !pairs.is_empty() && run.traces.is_empty() {
                    let first = run.failures.first().map(|f| f.error.as_str()).unwrap_or("");
                    return Err(Error::Stage(format!(
                        "every generation request to `{name}` failed: {first}"
                    )));
                }
                let correct = run.traces.iter().filter(|t| t.is_correct).count();
                let rel = traces_file(name);
                persist_jsonl(&run.traces, &self.path(&rel))?;
                produced.outputs.push(rel);
                produced.fingerprints.insert(name.clone(), gw.fingerprint());
                produced.reports.insert(
                    format!("generation.{name}"),
                    json!({
                        "pairs": pairs.len(),
                        "traces": run.traces.len(),
                        "correct": correct,
                        "failed": run.failures.len(),
                        "failures": run.failures,
                        "mean_token_len": mean_token_length(&run.traces).ok(),
                        "tokenizer": run.traces.first().map(|t| t.token_method.clone()),
                    }),
                );
            }
            Ok(produced)
        })
    }

    fn rewrite(&self, manifest: &mut RunManifest) -> Result<StageStatus> {
        let generator = self
            .config
            .role("generator")
            .ok_or_else(|| Error::Config("no endpoint bound to role `generator`".into()))?
            .to_string();
        let (target_name, target) = self.role("target")?;
        let traces_rel = traces_file(&generator);
        let inputs = vec![self.require(TRAIN)?, self.require(&traces_rel)?];
        let rw = self.config.rewrite.clone();
        self.execute(manifest, Stage::Rewrite, inputs, true, || {
            let pairs = self.pair_map(TRAIN)?;
            let traces: Vec<CoTTrace> = read_jsonl(&self.path(&traces_rel))?;
            let correct = filter_correct(&traces);
            let outcomes =
                crate::rewrite::rewrite_traces(&correct, &pairs, &target, rw.variant, &self.templates)?;
            let (gate, outcomes) = ppl_gate(outcomes, &target, rw.gate_mode, rw.tolerance)?;
            if !gate.passed {
                log::warn!(
                    "perplexity gate failed (original {:?}, rewritten {:?}); keeping original traces",
                    gate.mean_ppl_original,
                    gate.mean_ppl_final
                );
            }
            persist_jsonl(&outcomes, &self.path(OUTCOMES))?;
            let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
            for o in &outcomes {
                *reasons
                    .entry(serde_json::to_value(o.reason)?.as_str().unwrap_or("").to_string())
                    .or_default() += 1;
            }
            let reports = BTreeMap::from([
                ("gate".to_string(), serde_json::to_value(&gate)?),
                ("reasons".to_string(), serde_json::to_value(&reasons)?),
                ("variant".to_string(), serde_json::to_value(rw.variant)?),
            ]);
            Ok(Produced {
                outputs: vec![OUTCOMES.into()],
                reports,
                fingerprints: BTreeMap::from([(target_name.clone(), target.fingerprint())]),
                gate_failed: !gate.passed && rw.gate_mode == GateMode::CorpusMean,
            })
        })
    }

    fn select(&self, manifest: &mut RunManifest) -> Result<StageStatus> {
        let strategy = self.config.strategy()?;
        let pool = self.config.pool();
        let generator = self.config.role("generator").map(String::from);
        let use_outcomes = self.path(OUTCOMES).is_file();
        let mut inputs = vec![self.require(TRAIN)?];
        for name in &pool {
            inputs.push(self.require(&traces_file(name))?);
        }
        if use_outcomes {
            inputs.push(self.require(OUTCOMES)?);
        }
        let scorer = match strategy {
            crate::tracegen::SelectionStrategy::PerModel { .. } => None,
            _ => Some(self.role("target")?),
        };
        self.execute(manifest, Stage::Select, inputs, true, || {
            let pairs = self.pair_map(TRAIN)?;
            let finals: Option<Vec<CoTTrace>> = if use_outcomes {
                let outcomes: Vec<RewriteOutcome> = read_jsonl(&self.path(OUTCOMES))?;
                Some(outcomes.into_iter().map(|o| o.final_trace).collect())
            } else {
                None
            };
            let mut pools = BTreeMap::new();
            let mut fingerprints = BTreeMap::new();
            for name in &pool {
                let mut traces = match (&finals, &generator) {
                    (Some(f), Some(g)) if g == name => f.clone(),
                    _ => filter_correct(&read_jsonl::<CoTTrace>(&self.path(&traces_file(name)))?),
                };
                if let Some((scorer_name, scorer)) = &scorer {
                    let mut missing: Vec<CoTTrace> = traces
                        .iter()
                        .filter(|t| t.perplexity.is_none())
                        .cloned()
                        .collect();
                    score_traces(&mut missing, &pairs, scorer, &self.templates)?;
                    let mut scored = missing.into_iter();
                    for t in traces.iter_mut().filter(|t| t.perplexity.is_none()) {
                        *t = scored.next().expect("one score per unscored trace");
                    }
                    fingerprints.insert(scorer_name.clone(), scorer.fingerprint());
                }
                pools.insert(name.clone(), traces);
            }
            let selected = select_traces(&pools, &strategy)?;
            let chosen: Vec<&CoTTrace> = selected.values().collect();
            persist_jsonl(&chosen, &self.path(SELECTED))?;
            let mut by_source: BTreeMap<&str, usize> = BTreeMap::new();
            for t in &chosen {
                *by_source.entry(t.source_model_id.as_str()).or_default() += 1;
            }
            let ppls: Vec<f64> = chosen.iter().filter_map(|t| t.perplexity).collect();
            let owned: Vec<CoTTrace> = chosen.iter().map(|t| (*t).clone()).collect();
            let reports = BTreeMap::from([
                ("strategy".to_string(), json!(strategy.to_string())),
                ("selected".to_string(), json!(chosen.len())),
                (
                    "pool_sizes".to_string(),
                    json!(pools
                        .iter()
                        .map(|(k, v)| (k.clone(), v.len()))
                        .collect::<BTreeMap<_, _>>()),
                ),
                ("by_source".to_string(), json!(by_source)),
                (
                    "mean_token_len".to_string(),
                    json!(mean_token_length(&owned).ok()),
                ),
                (
                    "mean_perplexity".to_string(),
                    json!((!ppls.is_empty()).then(|| ppls.iter().sum::<f64>() / ppls.len() as f64)),
                ),
            ]);
            Ok(Produced {
                outputs: vec![SELECTED.into()],
                reports,
                fingerprints,
                ..Default::default()
            })
        })
    }

    fn export(&self, manifest: &mut RunManifest) -> Result<StageStatus> {
        let from_selection = manifest.latest(Stage::Select).is_some() && self.path(SELECTED).is_file();
        let source = if from_selection { SELECTED } else { OUTCOMES };
        let inputs = vec![self.require(TRAIN)?, self.require(source)?];
        self.execute(manifest, Stage::Export, inputs, true, || {
            let pairs = self.pair_map(TRAIN)?;
            let traces: Vec<CoTTrace> = if from_selection {
                read_jsonl(&self.path(SELECTED))?
            } else {
                read_jsonl::<RewriteOutcome>(&self.path(OUTCOMES))?
                    .into_iter()
                    .map(|o| o.final_trace)
                    .collect()
            };
            let records = sft_records(&traces, &pairs, &self.templates)?;
            persist_jsonl(&records, &self.path(SFT))?;
            let rewritten = traces
                .iter()
                .filter(|t| t.stage == crate::tracegen::TraceStage::Rewritten)
                .count();
            let reports = BTreeMap::from([
                ("source".to_string(), json!(source)),
                ("records".to_string(), json!(records.len())),
                ("rewritten".to_string(), json!(rewritten)),
            ]);
            Ok(Produced {
                outputs: vec![SFT.into()],
                reports,
                ..Default::default()
            })
        })
    }

    fn evaluate(&self, manifest: &mut RunManifest, intervention: bool) -> Result<StageStatus> {
        let (subject_name, subject) = self.role("subject")?;
        let set = match self.config.evaluate.set {
            EvalSet::Test => TEST,
            EvalSet::Train => TRAIN,
            EvalSet::All => DATASET,
        };
        let template = self.config.eval_template()?;
        let mut inputs = vec![self.require(set)?];
        let demos = if template == TemplateId::FewShotIcl && !intervention {
            let dir = self
                .config
                .evaluate
                .demos
                .as_ref()
                .or(self.config.generate.demos.as_ref());
            let (demos, digest) = self.load_demo_set(dir)?;
            inputs.push(digest);
            Some(demos)
        } else {
            None
        };
        let (stage, preds, raw, report) = if intervention {
            (
                Stage::Robustness,
                PREDICTIONS_INTERVENTION,
                RAW_INTERVENTION,
                REPORT_INTERVENTION,
            )
        } else {
            (Stage::Evaluate, PREDICTIONS, RAW, REPORT)
        };
        self.execute(manifest, stage, inputs, true, || {
            let pairs = self.read_pairs(set)?;
            let Evaluation {
                report: metrics,
                records,
                raw: raw_out,
            } = if intervention {
                run_robustness(&subject, &pairs, &self.templates)?
            } else {
                run_evaluation(&subject, &pairs, template, demos.as_deref(), &self.templates)?
            };
            let label = if intervention {
                format!("{subject_name}:intervention")
            } else {
                format!("{subject_name}:{template}")
            };
            persist_jsonl(&records, &self.path(preds))?;
            persist_jsonl(&raw_out, &self.path(raw))?;
            let labeled = LabeledReport {
                label,
                report: metrics,
            };
            write_atomic(&self.path(report), &serde_json::to_vec_pretty(&labeled)?)?;
            Ok(Produced {
                outputs: vec![preds.into(), raw.into(), report.into()],
                reports: BTreeMap::from([("metrics".to_string(), serde_json::to_value(&labeled)?)]),
                fingerprints: BTreeMap::from([(subject_name.clone(), subject.fingerprint())]),
                gate_failed: false,
            })
        })
    }

    fn report(&self, manifest: &mut RunManifest) -> Result<StageStatus> {
        let present: Vec<&str> = [REPORT, REPORT_INTERVENTION]
            .into_iter()
            .filter(|r| self.path(r).is_file())
            .collect();
        if present.is_empty() {
            self.require(REPORT)?;
        }
        let inputs = present
            .iter()
            .map(|r| self.require(r))
            .collect::<Result<Vec<_>>>()?;
        self.execute(manifest, Stage::Report, inputs, true, || {
            let mut rows = Vec::new();
            for r in &present {
                let p = self.path(r);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                let lr: LabeledReport = serde_json::from_slice(&bytes)?;
                rows.push((lr.label, lr.report));
            }
            emit_report_csv(&rows, &self.path(REPORT_CSV))?;
            Ok(Produced {
                outputs: vec![REPORT_CSV.into()],
                reports: BTreeMap::from([("rows".to_string(), json!(rows.len()))]),
                ..Default::default()
            })
        })
    }
}

/// The stages that build fine-tuning data, in order.
pub const TRAINING_STAGES: [Stage; 6] = [
    Stage::Ingest,
    Stage::Split,
    Stage::Generate,
    Stage::Rewrite,
    Stage::Select,
    Stage::Export,
];
