//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys and bad values are all reported together in one error.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use crate::augment::{AugmentConfig, ExternalBackend, GeneratorBackend};
use crate::corpus::{DEFAULT_MAX_DOC_TOKENS, DEFAULT_MAX_QUERY_TOKENS};
use crate::error::{Error, Result};
use crate::evaluation::Ranker;
use crate::model::UpdateRule;
use crate::objectives::ScoreMode;
use crate::retrieval::{StepNormalization, DEFAULT_BEAM};
use crate::trainer::{FinetuneConfig, TrainConfig};

/// Environment variable that may supply the external generation endpoint.
pub const EXTERNAL_ENDPOINT_ENV: &str = "GENRET_EXTERNAL_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendKind {
    #[default]
    Rule,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub min_count: usize,
    pub max_doc_tokens: usize,
    pub max_query_tokens: usize,
    pub queries_per_doc: usize,
    pub backend: BackendKind,
    pub external_endpoint: Option<String>,
    pub external_model: String,
    pub external_timeout_secs: u64,
    pub max_in_flight: usize,
    pub beam: usize,
    pub normalization: StepNormalization,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            min_count: 1,
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            max_query_tokens: DEFAULT_MAX_QUERY_TOKENS,
            queries_per_doc: crate::augment::DEFAULT_QUERIES_PER_DOC,
            backend: BackendKind::Rule,
            external_endpoint: None,
            external_model: "default".into(),
            external_timeout_secs: 60,
            max_in_flight: crate::augment::DEFAULT_MAX_IN_FLIGHT,
            beam: DEFAULT_BEAM,
            normalization: StepNormalization::Renormalized,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("expected a number, got {v:?}"))
}

macro_rules! keys {
    ($($name:literal),* $(,)?) => {
        pub const KEYS: &[&str] = &[$($name),*];
    };
}

impl RunConfig {
    keys!(
        "seed",
        "embed_dim",
        "hidden_dim",
        "groups",
        "clusters",
        "alpha",
        "beta",
        "gamma",
        "rho",
        "lambda",
        "tau",
        "contrastive_score",
        "total_steps",
        "first_refresh_step",
        "refresh_every",
        "learning_rate",
        "batch_n",
        "max_iterations",
        "update_rule",
        "warm_start",
        "reset_optimizer_on_refresh",
        "use_noisy",
        "dynamic_docids",
        "finetune_steps",
        "finetune_learning_rate",
        "finetune_batch_size",
        "finetune_pseudo_queries",
        "min_count",
        "max_doc_tokens",
        "max_query_tokens",
        "queries_per_doc",
        "backend",
        "external_endpoint",
        "external_model",
        "external_timeout_secs",
        "max_in_flight",
        "beam",
        "normalization",
    );

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key = value", i + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                problems.push(format!("line {}: duplicate key {k}", i + 1));
                continue;
            }
            if let Err(msg) = cfg.set(k, v) {
                problems.push(format!("line {}: {k}: {msg}", i + 1));
            }
        }
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "seed" => {
                t.seed = parse_num(v)?;
                self.finetune.seed = t.seed;
            }
            "embed_dim" => t.embed_dim = parse_num(v)?,
            "hidden_dim" => t.hidden_dim = parse_num(v)?,
            "groups" => t.groups = parse_num(v)?,
            "clusters" => t.clusters = parse_num(v)?,
            "alpha" => t.weights.alpha = parse_num(v)?,
            "beta" => t.weights.beta = parse_num(v)?,
            "gamma" => t.weights.gamma = parse_num(v)?,
            "rho" => t.weights.rho = parse_num(v)?,
            "lambda" => t.weights.lambda = parse_num(v)?,
            "tau" => t.weights.tau = parse_num(v)?,
            "contrastive_score" => {
                t.weights.contrastive_score = match v {
                    "log_likelihood" => ScoreMode::LogLikelihood,
                    "raw_prob" => ScoreMode::RawProb,
                    _ => return Err(format!("expected log_likelihood or raw_prob, got {v:?}")),
                }
            }
            "total_steps" => t.schedule.total_steps = parse_num(v)?,
            "first_refresh_step" => t.schedule.first_refresh_step = parse_num(v)?,
            "refresh_every" => t.schedule.refresh_every = parse_num(v)?,
            "learning_rate" => t.schedule.learning_rate = parse_num(v)?,
            "batch_n" => t.schedule.batch_n = parse_num(v)?,
            "max_iterations" => t.schedule.max_iterations = parse_num(v)?,
            "update_rule" => {
                t.update_rule = match v {
                    "adam" => UpdateRule::Adam,
                    "sgd" => UpdateRule::Sgd,
                    _ => return Err(format!("expected adam or sgd, got {v:?}")),
                }
            }
            "warm_start" => t.warm_start = parse_bool(v)?,
            "reset_optimizer_on_refresh" => t.reset_optimizer_on_refresh = parse_bool(v)?,
            "use_noisy" => t.use_noisy = parse_bool(v)?,
            "dynamic_docids" => t.dynamic_docids = parse_bool(v)?,
            "finetune_steps" => self.finetune.steps = parse_num(v)?,
            "finetune_learning_rate" => self.finetune.learning_rate = parse_num(v)?,
            "finetune_batch_size" => self.finetune.batch_size = parse_num(v)?,
            "finetune_pseudo_queries" => self.finetune.pseudo_queries_per_doc = parse_num(v)?,
            "min_count" => self.min_count = parse_num(v)?,
            "max_doc_tokens" => self.max_doc_tokens = parse_num(v)?,
            "max_query_tokens" => self.max_query_tokens = parse_num(v)?,
            "queries_per_doc" => self.queries_per_doc = parse_num(v)?,
            "backend" => {
                self.backend = match v {
                    "rule" => BackendKind::Rule,
                    "external" => BackendKind::External,
                    _ => return Err(format!("expected rule or external, got {v:?}")),
                }
            }
            "external_endpoint" => self.external_endpoint = Some(v.to_string()).filter(|s| !s.is_empty()),
            "external_model" => self.external_model = v.to_string(),
            "external_timeout_secs" => self.external_timeout_secs = parse_num(v)?,
            "max_in_flight" => self.max_in_flight = parse_num(v)?,
            "beam" => self.beam = parse_num(v)?,
            "normalization" => {
                self.normalization = match v {
                    "renormalized" => StepNormalization::Renormalized,
                    "masked" => StepNormalization::Masked,
                    _ => return Err(format!("expected renormalized or masked, got {v:?}")),
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every violated invariant, as messages.
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                out.push(e.to_string());
            }
        };
        check(self.train.weights.validate());
        check(self.train.schedule.validate());
        check(self.train.model_config(crate::corpus::RESERVED.len() + 1).validate());
        let mut push = |cond: bool, msg: &str| {
            if cond {
                out.push(msg.to_string());
            }
        };
        push(self.min_count == 0, "min_count must be at least 1");
        push(self.max_doc_tokens == 0, "max_doc_tokens must be positive");
        push(self.max_query_tokens == 0, "max_query_tokens must be positive");
        push(self.queries_per_doc == 0, "queries_per_doc must be at least 1");
        push(self.beam == 0, "beam must be at least 1");
        push(self.max_in_flight == 0, "max_in_flight must be at least 1");
        push(self.finetune.batch_size == 0, "finetune_batch_size must be positive");
        push(
            !self.finetune.learning_rate.is_finite() || self.finetune.learning_rate < 0.0,
            "finetune_learning_rate must be a nonnegative number",
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Serializes every key, in [`RunConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let s = &t.schedule;
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("seed", t.seed.to_string());
        put("embed_dim", t.embed_dim.to_string());
        put("hidden_dim", t.hidden_dim.to_string());
        put("groups", t.groups.to_string());
        put("clusters", t.clusters.to_string());
        put("alpha", w.alpha.to_string());
        put("beta", w.beta.to_string());
        put("gamma", w.gamma.to_string());
        put("rho", w.rho.to_string());
        put("lambda", w.lambda.to_string());
        put("tau", w.tau.to_string());
        put(
            "contrastive_score",
            match w.contrastive_score {
                ScoreMode::LogLikelihood => "log_likelihood",
                ScoreMode::RawProb => "raw_prob",
            }
            .into(),
        );
        put("total_steps", s.total_steps.to_string());
        put("first_refresh_step", s.first_refresh_step.to_string());
        put("refresh_every", s.refresh_every.to_string());
        put("learning_rate", s.learning_rate.to_string());
        put("batch_n", s.batch_n.to_string());
        put("max_iterations", s.max_iterations.to_string());
        put(
            "update_rule",
            match t.update_rule {
                UpdateRule::Adam => "adam",
                UpdateRule::Sgd => "sgd",
            }
            .into(),
        );
        put("warm_start", t.warm_start.to_string());
        put("reset_optimizer_on_refresh", t.reset_optimizer_on_refresh.to_string());
        put("use_noisy", t.use_noisy.to_string());
        put("dynamic_docids", t.dynamic_docids.to_string());
        put("finetune_steps", self.finetune.steps.to_string());
        put("finetune_learning_rate", self.finetune.learning_rate.to_string());
        put("finetune_batch_size", self.finetune.batch_size.to_string());
        put(
            "finetune_pseudo_queries",
            self.finetune.pseudo_queries_per_doc.to_string(),
        );
        put("min_count", self.min_count.to_string());
        put("max_doc_tokens", self.max_doc_tokens.to_string());
        put("max_query_tokens", self.max_query_tokens.to_string());
        put("queries_per_doc", self.queries_per_doc.to_string());
        put(
            "backend",
            match self.backend {
                BackendKind::Rule => "rule",
                BackendKind::External => "external",
            }
            .into(),
        );
        put("external_endpoint", self.external_endpoint.clone().unwrap_or_default());
        put("external_model", self.external_model.clone());
        put("external_timeout_secs", self.external_timeout_secs.to_string());
        put("max_in_flight", self.max_in_flight.to_string());
        put("beam", self.beam.to_string());
        put(
            "normalization",
            match self.normalization {
                StepNormalization::Renormalized => "renormalized",
                StepNormalization::Masked => "masked",
            }
            .into(),
        );
        out
    }

    /// Overrides the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn ranker(&self) -> Ranker {
        Ranker::Beam {
            width: self.beam,
            mode: self.normalization,
        }
    }

    /// Generator settings; the external endpoint falls back to
    /// [`EXTERNAL_ENDPOINT_ENV`].
    pub fn augment_config(&self) -> Result<AugmentConfig> {
        let backend = match self.backend {
            BackendKind::Rule => GeneratorBackend::RuleBased,
            BackendKind::External => {
                let endpoint = self
                    .external_endpoint
                    .clone()
                    .or_else(|| std::env::var(EXTERNAL_ENDPOINT_ENV).ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "external backend needs external_endpoint or {EXTERNAL_ENDPOINT_ENV}"
                        ))
                    })?;
                GeneratorBackend::External(ExternalBackend {
                    timeout: Duration::from_secs(self.external_timeout_secs),
                    max_in_flight: self.max_in_flight,
                    ..ExternalBackend::new(endpoint, self.external_model.clone())
                })
            }
        };
        Ok(AugmentConfig {
            queries_per_doc: self.queries_per_doc,
            seed: self.train.seed,
            max_doc_tokens: self.max_doc_tokens,
            max_query_tokens: self.max_query_tokens,
            backend,
        })
    }
}
