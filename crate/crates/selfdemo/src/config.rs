//! Run configuration: one JSON document capturing every knob of a
//! pipeline run, with `${VAR}` environment interpolation for secrets.
//!
//! All referenced paths and environment variables are validated up front
//! (fail fast), and each endpoint can be either a live OpenAI-compatible
//! server or a scripted gateway, so the same config schema drives both
//! production runs and deterministic replays.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::exporter::RenderTemplate;
use crate::gateway::{
    CachedGateway, DefaultBehavior, EndpointConfig, Gateway, GatewayError, HttpGateway, Script,
    ScriptedGateway,
};
use crate::optimizer::OptimizerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("environment variable {0} referenced by the config is not set")]
    MissingEnv(String),
    #[error("config is missing the {0} section required by this command")]
    MissingSection(&'static str),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One inference endpoint: a live server or a scripted stand-in.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointSpec {
    Openai {
        base_url: String,
        model_name: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout_ms")]
        request_timeout_ms: u64,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_base_ms: u64,
    },
    Scripted {
        #[serde(default)]
        script_path: Option<PathBuf>,
        #[serde(default)]
        default_behavior: DefaultBehavior,
        #[serde(default)]
        model_name: Option<String>,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
    },
}

fn default_timeout_ms() -> u64 {
    120_000
}
fn default_max_in_flight() -> usize {
    4
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}

impl EndpointSpec {
    pub fn model_name(&self) -> String {
        match self {
            EndpointSpec::Openai { model_name, .. } => model_name.clone(),
            EndpointSpec::Scripted { model_name, .. } => {
                model_name.clone().unwrap_or_else(|| "scripted".into())
            }
        }
    }

    /// Startup validation: named env vars must resolve and script files
    /// must exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            EndpointSpec::Openai { api_key_env: Some(var), .. } => {
                std::env::var(var).map_err(|_| ConfigError::MissingEnv(var.clone()))?;
                Ok(())
            }
            EndpointSpec::Openai { .. } => Ok(()),
            EndpointSpec::Scripted { script_path: Some(path), .. } if !path.exists() => Err(
                ConfigError::Invalid(format!("script file {} does not exist", path.display())),
            ),
            EndpointSpec::Scripted { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Endpoints {
    pub generator: EndpointSpec,
    pub judge: EndpointSpec,
    #[serde(default)]
    pub reference: Option<EndpointSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train_path: PathBuf,
    #[serde(default)]
    pub eval_path: Option<PathBuf>,
    #[serde(default = "default_schema_version")]
    pub schema_version: String,
}

fn default_schema_version() -> String {
    crate::corpus::SCHEMA_VERSION.to_string()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MixConfig {
    pub dialogue_fraction: f64,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportConfig {
    pub sft_path: PathBuf,
    pub dpo_path: PathBuf,
    /// Retrievals rendered into each exported prompt.
    pub n_retrievals: usize,
    #[serde(default = "default_true")]
    pub include_system_prompt: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_eval_n_retrievals")]
    pub n_retrievals: usize,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    /// Pre-computed candidate outputs (JSON-lines of
    /// `{instance_id, output}`). When absent, outputs are generated from
    /// the generator endpoint.
    #[serde(default)]
    pub candidate_outputs: Option<PathBuf>,
    #[serde(default)]
    pub candidate_system_prompt: Option<String>,
}

fn default_eval_n_retrievals() -> usize {
    2
}

fn default_n_list() -> Vec<usize> {
    vec![0, 1, 2, 4, 8]
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_retrievals: default_eval_n_retrievals(),
            n_list: default_n_list(),
            candidate_outputs: None,
            candidate_system_prompt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputPaths {
    #[serde(default = "default_prompt_set")]
    pub prompt_set: PathBuf,
    #[serde(default = "default_optimizer_report")]
    pub optimizer_report: PathBuf,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_selfdemo")]
    pub selfdemo: PathBuf,
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
    #[serde(default = "default_export_manifest")]
    pub export_manifest: PathBuf,
    #[serde(default = "default_report")]
    pub report: PathBuf,
    #[serde(default = "default_sweep_dir")]
    pub sweep_dir: PathBuf,
}

fn default_prompt_set() -> PathBuf {
    "out/prompt_set.json".into()
}
fn default_optimizer_report() -> PathBuf {
    "out/optimizer_report.json".into()
}
fn default_checkpoint_dir() -> PathBuf {
    "out/checkpoints".into()
}
fn default_selfdemo() -> PathBuf {
    "out/selfdemos.jsonl".into()
}
fn default_manifest() -> PathBuf {
    "out/manifest.json".into()
}
fn default_export_manifest() -> PathBuf {
    "out/export_manifest.json".into()
}
fn default_report() -> PathBuf {
    "out/report.json".into()
}
fn default_sweep_dir() -> PathBuf {
    "out/sweep".into()
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            prompt_set: default_prompt_set(),
            optimizer_report: default_optimizer_report(),
            checkpoint_dir: default_checkpoint_dir(),
            selfdemo: default_selfdemo(),
            manifest: default_manifest(),
            export_manifest: default_export_manifest(),
            report: default_report(),
            sweep_dir: default_sweep_dir(),
        }
    }
}

/// Everything a pipeline run needs, in one document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub mix: Option<MixConfig>,
    pub endpoints: Endpoints,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub template: RenderTemplate,
    #[serde(default)]
    pub export: Option<ExportConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub outputs: OutputPaths,
}

/// Replace `${VAR}` in every string value; missing variables fail fast.
fn interpolate_env(value: &mut serde_json::Value) -> Result<(), ConfigError> {
    match value {
        serde_json::Value::String(s) => {
            if s.contains("${") {
                *s = interpolate_str(s)?;
            }
            Ok(())
        }
        serde_json::Value::Array(items) => items.iter_mut().try_for_each(interpolate_env),
        serde_json::Value::Object(map) => map.values_mut().try_for_each(interpolate_env),
        _ => Ok(()),
    }
}

fn interpolate_str(input: &str) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(input.len());
    let mut rest = input;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 2..];
        let Some(end) = tail.find('}') else {
            return Err(ConfigError::Invalid(format!(
                "unterminated ${{...}} reference in {input:?}"
            )));
        };
        let name = &tail[..end];
        let value =
            std::env::var(name).map_err(|_| ConfigError::MissingEnv(name.to_string()))?;
        out.push_str(&value);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Parse a config document, applying `${VAR}` interpolation.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse { path: "<inline>".into(), message };
        let mut raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        interpolate_env(&mut raw)?;
        serde_json::from_value(raw).map_err(|e| parse_err(e.to_string()))
    }

    /// Fail-fast checks shared by every subcommand.
    pub fn validate_common(&self) -> Result<(), ConfigError> {
        if !self.corpus.train_path.exists() {
            return Err(ConfigError::Invalid(format!(
                "corpus.train_path {} does not exist",
                self.corpus.train_path.display()
            )));
        }
        self.endpoints.generator.validate()?;
        self.endpoints.judge.validate()?;
        if let Some(reference) = &self.endpoints.reference {
            reference.validate()?;
        }
        self.optimizer.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn eval_corpus_path(&self) -> Result<&PathBuf, ConfigError> {
        self.corpus
            .eval_path
            .as_ref()
            .ok_or(ConfigError::MissingSection("corpus.eval_path"))
    }

    pub fn export_config(&self) -> Result<&ExportConfig, ConfigError> {
        self.export.as_ref().ok_or(ConfigError::MissingSection("export"))
    }

    pub fn eval_config(&self) -> EvalConfig {
        self.eval.clone().unwrap_or_default()
    }

    /// Build the gateway for one endpoint role, wrapped in the on-disk
    /// call cache when `cache_dir` is configured.
    pub fn build_gateway(&self, role: GatewayRole) -> Result<Arc<dyn Gateway>, ConfigError> {
        let spec = match role {
            GatewayRole::Generator => &self.endpoints.generator,
            GatewayRole::Judge => &self.endpoints.judge,
            GatewayRole::Reference => self
                .endpoints
                .reference
                .as_ref()
                .ok_or(ConfigError::MissingSection("endpoints.reference"))?,
        };
        let inner: Arc<dyn Gateway> = match spec {
            EndpointSpec::Openai {
                base_url,
                model_name,
                api_key_env,
                request_timeout_ms,
                max_in_flight,
                max_retries,
                backoff_base_ms,
            } => Arc::new(HttpGateway::new(EndpointConfig {
                base_url: base_url.clone(),
                model_name: model_name.clone(),
                api_key_env: api_key_env.clone(),
                request_timeout: Duration::from_millis(*request_timeout_ms),
                max_in_flight: *max_in_flight,
                max_retries: *max_retries,
                backoff_base: Duration::from_millis(*backoff_base_ms),
            })?),
            EndpointSpec::Scripted { script_path, default_behavior, model_name, max_in_flight } => {
                let mut script = match script_path {
                    Some(path) => Script::load(path)?,
                    None => Script::default(),
                };
                script.default_behavior = *default_behavior;
                if script.model_name.is_none() {
                    script.model_name = model_name.clone();
                }
                Arc::new(ScriptedGateway::new(script).with_max_in_flight(*max_in_flight))
            }
        };
        match &self.cache_dir {
            Some(dir) => Ok(Arc::new(CachedGateway::new(inner, dir.join(role.as_str()))?)),
            None => Ok(inner),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatewayRole {
    Generator,
    Judge,
    Reference,
}

impl GatewayRole {
    pub fn as_str(self) -> &'static str {
        match self {
            GatewayRole::Generator => "generator",
            GatewayRole::Judge => "judge",
            GatewayRole::Reference => "reference",
        }
    }
}

/// Convenience for tests and tooling: dump a config back to JSON.
pub fn to_pretty_json(config: &RunConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serialization is infallible")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn minimal_config_json(train_path: &str) -> String {
        format!(
            r#"{{
  "corpus": {{"train_path": "{train_path}"}},
  "endpoints": {{
    "generator": {{"kind": "scripted", "default_behavior": "echo"}},
    "judge": {{"kind": "scripted", "default_behavior": "echo"}}
  }}
}}"#
        )
    }

    fn toy_path() -> String {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../data/toy_corpus.jsonl")
            .display()
            .to_string()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{}", minimal_config_json(&toy_path())).unwrap();
        let config = RunConfig::load(f.path()).unwrap();
        assert_eq!(config.seed, 0);
        assert_eq!(config.optimizer.beam_width, 4);
        assert_eq!(config.engine.samples_per_prompt, 1);
        assert_eq!(config.eval_config().n_list, vec![0, 1, 2, 4, 8]);
        config.validate_common().unwrap();
    }

    #[test]
    fn env_interpolation_resolves_and_fails_fast() {
        std::env::set_var("SELFDEMO_TEST_VALUE", "resolved");
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let json = minimal_config_json(&toy_path())
            .replace("\"echo\"}\n  }", "\"echo\", \"model_name\": \"${SELFDEMO_TEST_VALUE}\"}\n  }");
        write!(f, "{json}").unwrap();
        let config = RunConfig::load(f.path()).unwrap();
        assert_eq!(config.endpoints.judge.model_name(), "resolved");

        let mut f2 = tempfile::NamedTempFile::new().unwrap();
        let json = minimal_config_json(&toy_path())
            .replace("\"echo\"}\n  }", "\"echo\", \"model_name\": \"${SELFDEMO_UNSET_VALUE}\"}\n  }");
        write!(f2, "{json}").unwrap();
        match RunConfig::load(f2.path()) {
            Err(ConfigError::MissingEnv(var)) => assert_eq!(var, "SELFDEMO_UNSET_VALUE"),
            other => panic!("expected missing-env error, got {other:?}"),
        }
    }

    #[test]
    fn missing_api_key_env_is_named_at_validation() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let json = format!(
            r#"{{
  "corpus": {{"train_path": "{}"}},
  "endpoints": {{
    "generator": {{"kind": "openai", "base_url": "http://localhost:9", "model_name": "m",
                  "api_key_env": "SELFDEMO_NO_SUCH_KEY"}},
    "judge": {{"kind": "scripted"}}
  }}
}}"#,
            toy_path()
        );
        write!(f, "{json}").unwrap();
        let config = RunConfig::load(f.path()).unwrap();
        match config.validate_common() {
            Err(ConfigError::MissingEnv(var)) => assert_eq!(var, "SELFDEMO_NO_SUCH_KEY"),
            other => panic!("expected missing-env error, got {other:?}"),
        }
    }

    #[test]
    fn missing_corpus_path_fails_fast() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{}", minimal_config_json("/no/such/file.jsonl")).unwrap();
        let config = RunConfig::load(f.path()).unwrap();
        assert!(matches!(config.validate_common(), Err(ConfigError::Invalid(_))));
    }
}
