//! Run configuration: a TOML file plus dotted-name overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use coo_core::consistency::DynamicKConfig;
use coo_core::dataset::SplitConfig;
use coo_core::pipeline::{CooOptions, Method, PipelineConfig};
use coo_core::provider::{
    GenerationSettings, HttpConfig, ProviderMode, RetryPolicy, ScriptedAnswer, DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE, DEFAULT_TOP_P,
};

/// Which backend answers cache misses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// OpenAI-compatible chat-completions and embeddings endpoints.
    #[default]
    Http,
    /// The built-in offline oracle.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    /// Backend behind `live`, `record` and `strict-replay`. The `scripted`
    /// mode always uses the offline oracle.
    pub backend: BackendKind,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub base_url: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub scripted_answer: ScriptedAnswer,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Scripted,
            backend: BackendKind::Http,
            model: "gpt-3.5-turbo".into(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            embedding_model: "text-embedding-ada-002".into(),
            timeout_secs: 120,
            retry: RetryPolicy::default(),
            scripted_answer: ScriptedAnswer::First,
        }
    }
}

impl ProviderConfig {
    pub fn settings(&self) -> GenerationSettings {
        GenerationSettings {
            model_id: self.model.clone(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
        }
    }

    pub fn http(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            api_key_env: self.api_key_env.clone(),
            embedding_model: self.embedding_model.clone(),
            timeout_secs: self.timeout_secs,
            retry: self.retry.clone(),
        }
    }

    /// The backend that actually serves misses.
    pub fn effective_backend(&self) -> BackendKind {
        if self.mode == ProviderMode::Scripted {
            BackendKind::Scripted
        } else {
            self.backend
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSONL corpus read by `prepare`.
    pub dataset: PathBuf,
    /// Run directory holding the split, ledger and reports.
    pub out: PathBuf,
    /// Response cache; defaults to `<out>/cache.jsonl`.
    pub cache: Option<PathBuf>,
    pub seed: u64,
    pub parallelism: usize,
    pub method: Method,
    pub provider: ProviderConfig,
    pub split: SplitConfig,
    pub dynamic_k: DynamicKConfig,
    pub coo: CooOptions,
    pub dio_k: usize,
    pub sc_samples: usize,
    pub refine_rounds: usize,
    /// JSON map of model id to per-token prices, for `study cost`.
    pub price_table: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::new(Method::Coo, GenerationSettings::new(""));
        Self {
            dataset: PathBuf::from("dataset.jsonl"),
            out: PathBuf::from("runs/default"),
            cache: None,
            seed: 0,
            parallelism: 4,
            method: Method::Coo,
            provider: ProviderConfig::default(),
            split: SplitConfig::default(),
            dynamic_k: pipeline.dynamic_k,
            coo: pipeline.coo,
            dio_k: pipeline.dio_k,
            sc_samples: pipeline.sc_samples,
            refine_rounds: pipeline.refine_rounds,
            price_table: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides with dotted keys,
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        self.split.validate()?;
        self.pipeline().validate()?;
        self.provider.settings().request("x").validate()?;
        Ok(())
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("cache.jsonl"))
    }

    /// Embedding cache next to the response cache.
    pub fn embed_cache_path(&self) -> PathBuf {
        let cache = self.cache_path();
        let stem = cache.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        cache.with_file_name(format!("{stem}.embeddings.jsonl"))
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig { seed: self.seed, ..self.split.clone() }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            method: self.method,
            settings: self.provider.settings(),
            dynamic_k: self.dynamic_k.clone(),
            coo: self.coo.clone(),
            dio_k: self.dio_k,
            sc_samples: self.sc_samples,
            refine_rounds: self.refine_rounds,
            seed: self.seed,
        }
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key {key:?}");
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p:?} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.dynamic_k.k_values, vec![8, 10, 12]);
        assert_eq!(cfg.split.users_per_topic, 25);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::load(
            None,
            &set(&[
                ("seed", "7"),
                ("provider.mode", "strict-replay"),
                ("provider.model", "gpt-4"),
                ("dynamic_k.k_values", "[8, 10]"),
                ("method", "dio-top-k"),
                ("out", "runs/x"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.provider.mode, ProviderMode::StrictReplay);
        assert_eq!(cfg.provider.model, "gpt-4");
        assert_eq!(cfg.dynamic_k.k_values, vec![8, 10]);
        assert_eq!(cfg.method, Method::DioTopK);
        assert_eq!(cfg.cache_path(), PathBuf::from("runs/x/cache.jsonl"));
        assert_eq!(cfg.embed_cache_path(), PathBuf::from("runs/x/cache.embeddings.jsonl"));
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\nparallelism = 2\n[provider]\nmodel = \"m\"\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &set(&[("parallelism", "8")])).unwrap();
        assert_eq!((cfg.seed, cfg.parallelism, cfg.provider.model.as_str()), (3, 8, "m"));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::load(None, &set(&[("parallelism", "0")])).is_err());
        assert!(RunConfig::load(None, &set(&[("nonsense", "1")])).is_err());
        assert!(RunConfig::load(None, &set(&[("dynamic_k.k_values", "[10, 8]")])).is_err());
        assert!(RunConfig::load(None, &set(&[("seed.x", "1"), ("seed", "2")])).is_ok());
        assert!(RunConfig::load(None, &set(&[("seed", "2"), ("seed.x", "1")])).is_err());
        assert!(parse_override("novalue").is_err());
    }
}
