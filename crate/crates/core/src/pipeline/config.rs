//! The declarative run configuration and its command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetKind, Granularity, LoaderOptions, NegativeUniverse, PlotLinkPolicy};
use crate::error::{Error, Result};
use crate::gateway::{EndpointConfig, RetryPolicy};
use crate::prompts::{RewriteVariant, TemplateId};
use crate::rewrite::GateMode;
use crate::tracegen::SelectionStrategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    /// Output root; run files go to `<out>/runs/<id>`, the cache to `<out>/cache`.
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub kind: String,
    pub path: PathBuf,
    /// `intra`, `inter` or `both`.
    #[serde(default = "default_granularity")]
    pub granularity: String,
    #[serde(default)]
    pub exclude_topics: Vec<u32>,
    #[serde(default)]
    pub negatives: NegativeUniverse,
    #[serde(default)]
    pub plot_links: PlotLinkPolicy,
}

fn default_granularity() -> String {
    "intra".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_fold")]
    pub fold: usize,
}

fn default_k() -> usize {
    5
}

fn default_fold() -> usize {
    1
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            k: default_k(),
            fold: default_fold(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocLevelSection {
    /// Negatives to draw for inter-sentence datasets; all are kept when unset.
    #[serde(default)]
    pub n_neg: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesSection {
    /// Directory of `.txt` overrides for the non-golden templates.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointEntry {
    /// `http(s)://.../v1` for a live server, `mock://` for the built-in mock.
    pub base_url: String,
    pub model: String,
    /// Mock behaviour file (JSON), only for `mock://` endpoints.
    #[serde(default)]
    pub mock_spec: Option<PathBuf>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub logprobs: bool,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_auth_env")]
    pub auth_token_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub min_interval_ms: Option<u64>,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_in_flight() -> usize {
    4
}

fn default_auth_env() -> String {
    "OPENAI_API_KEY".into()
}

impl EndpointEntry {
    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock://")
    }

    pub fn endpoint_config(&self) -> EndpointConfig {
        EndpointConfig {
            base_url: self.base_url.clone(),
            model_name: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            want_logprobs: self.logprobs,
            max_in_flight: self.max_in_flight,
            retry: self.retry.clone(),
            auth_token_env: self.auth_token_env.clone(),
            min_interval_ms: self.min_interval_ms,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    /// Writes the first-step traces.
    #[serde(default)]
    pub generator: Option<String>,
    /// The model being distilled into; rewrites and scores perplexity.
    #[serde(default)]
    pub target: Option<String>,
    /// The model under evaluation.
    #[serde(default)]
    pub subject: Option<String>,
    /// Generators whose traces compete during selection; defaults to the generator.
    #[serde(default)]
    pub pool: Vec<String>,
    /// Answers demo questions when demos are regenerated; defaults to the generator.
    #[serde(default)]
    pub demo_source: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    /// Directory holding `manifest.json` and the demo trace files.
    #[serde(default)]
    pub demos: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteSection {
    #[serde(default = "default_variant")]
    pub variant: RewriteVariant,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default)]
    pub tolerance: f64,
}

fn default_variant() -> RewriteVariant {
    RewriteVariant::Official
}

impl Default for RewriteSection {
    fn default() -> Self {
        RewriteSection {
            variant: default_variant(),
            gate_mode: GateMode::default(),
            tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    #[serde(default = "default_strategy")]
    pub strategy: String,
}

fn default_strategy() -> String {
    "lowest-ppl".into()
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection {
            strategy: default_strategy(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    #[default]
    Test,
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub set: EvalSet,
    /// Demo directory for few-shot evaluation; defaults to `generate.demos`.
    #[serde(default)]
    pub demos: Option<PathBuf>,
}

fn default_template() -> String {
    "zero_shot".into()
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            template: default_template(),
            set: EvalSet::default(),
            demos: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub doc_level: DocLevelSection,
    #[serde(default)]
    pub templates: TemplatesSection,
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointEntry>,
    #[serde(default)]
    pub roles: Roles,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub rewrite: RewriteSection,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    /// Relative paths resolve against this directory (the config file's).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub fold: Option<usize>,
    pub strategy: Option<String>,
    pub gate_mode: Option<String>,
    pub template: Option<String>,
    /// `(role, endpoint name)` pairs.
    pub endpoints: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<PipelineConfig> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(format!("config file {} not found", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        PipelineConfig::parse(&text, &base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(f) = o.fold {
            self.split.fold = f;
        }
        if let Some(s) = &o.strategy {
            self.select.strategy = s.clone();
        }
        if let Some(g) = &o.gate_mode {
            self.rewrite.gate_mode = g.parse()?;
        }
        if let Some(t) = &o.template {
            self.evaluate.template = t.clone();
        }
        for (role, name) in &o.endpoints {
            let slot = match role.as_str() {
                "generator" => &mut self.roles.generator,
                "target" => &mut self.roles.target,
                "subject" => &mut self.roles.subject,
                "demo_source" => &mut self.roles.demo_source,
                "pool" => {
                    self.roles.pool = name.split(',').map(String::from).collect();
                    continue;
                }
                _ => return Err(Error::Config(format!("unknown endpoint role `{role}`"))),
            };
            *slot = Some(name.clone());
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(out) = &o.out {
            self.run.out = out.clone();
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        self.corpus.kind.parse()
    }

    /// `None` keeps both granularities.
    pub fn granularity(&self) -> Result<Option<Granularity>> {
        match self.corpus.granularity.as_str() {
            "both" | "all" => Ok(None),
            g => g.parse().map(Some),
        }
    }

    pub fn loader_options(&self) -> LoaderOptions {
        LoaderOptions {
            negatives: self.corpus.negatives,
            plot_links: self.corpus.plot_links,
            exclude_topics: self.corpus.exclude_topics.iter().copied().collect(),
        }
    }

    pub fn strategy(&self) -> Result<SelectionStrategy> {
        self.select.strategy.parse()
    }

    pub fn eval_template(&self) -> Result<TemplateId> {
        let t: TemplateId = self.evaluate.template.parse()?;
        if matches!(t, TemplateId::RewriteOfficial | TemplateId::RewriteOurs) {
            return Err(Error::Config(format!("{t} cannot be used for evaluation")));
        }
        Ok(t)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.run.out).join("runs").join(&self.run.id)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.resolve(&self.run.out).join("cache")
    }

    /// Endpoint name bound to `role`, if configured.
    pub fn role(&self, role: &str) -> Option<&str> {
        match role {
            "generator" => self.roles.generator.as_deref(),
            "target" => self.roles.target.as_deref(),
            "subject" => self.roles.subject.as_deref(),
            "demo_source" => self
                .roles
                .demo_source
                .as_deref()
                .or(self.roles.generator.as_deref()),
            _ => None,
        }
    }

    pub fn pool(&self) -> Vec<String> {
        if self.roles.pool.is_empty() {
            self.roles.generator.iter().cloned().collect()
        } else {
            self.roles.pool.clone()
        }
    }

    pub fn endpoint(&self, name: &str) -> Result<&EndpointEntry> {
        self.endpoints
            .get(name)
            .ok_or_else(|| Error::Config(format!("no endpoint named `{name}`")))
    }

    /// Everything that can be checked without touching the corpus or a model.
    pub fn validate(&self) -> Result<()> {
        if self.run.id.is_empty() || self.run.id.contains(['/', '\\']) || self.run.id.starts_with('.') {
            return Err(Error::Config(format!("invalid run id `{}`", self.run.id)));
        }
        self.dataset_kind()?;
        self.granularity()?;
        if self.split.k == 0 {
            return Err(Error::Config("split.k must be at least 1".into()));
        }
        if !(1..=self.split.k).contains(&self.split.fold) {
            return Err(Error::Config(format!(
                "split.fold must be in 1..={}, got {}",
                self.split.k, self.split.fold
            )));
        }
        if self.doc_level.n_neg.is_some() && self.granularity()? != Some(Granularity::InterSentence) {
            return Err(Error::Config(
                "doc_level.n_neg requires corpus.granularity = \"inter\"".into(),
            ));
        }
        self.strategy()?;
        self.eval_template()?;
        if !(self.rewrite.tolerance >= 0.0) {
            return Err(Error::Config("rewrite.tolerance must be >= 0".into()));
        }
        for (name, e) in &self.endpoints {
            e.endpoint_config()
                .validate()
                .map_err(|err| Error::Config(format!("endpoint `{name}`: {err}")))?;
            if e.mock_spec.is_some() && !e.is_mock() {
                return Err(Error::Config(format!(
                    "endpoint `{name}`: mock_spec needs a mock:// base_url"
                )));
            }
            if let Some(spec) = &e.mock_spec {
                if !self.resolve(spec).is_file() {
                    return Err(Error::Config(format!(
                        "endpoint `{name}`: mock spec {} not found",
                        self.resolve(spec).display()
                    )));
                }
            }
        }
        let roles = [
            self.roles.generator.as_deref(),
            self.roles.target.as_deref(),
            self.roles.subject.as_deref(),
            self.roles.demo_source.as_deref(),
        ];
        for name in roles
            .into_iter()
            .flatten()
            .chain(self.roles.pool.iter().map(String::as_str))
        {
            self.endpoint(name)?;
        }
        Ok(())
    }

    /// The configuration as recorded in manifests. The output location is
    /// left out because it does not change what a stage computes.
    pub fn effective(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(run) = v.get_mut("run").and_then(|r| r.as_object_mut()) {
            run.remove("out");
        }
        v
    }
}
