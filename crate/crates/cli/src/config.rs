//! Settings resolution: flags > `GEMS_*` env > JSON config file > defaults.
//!
//! Every flag of `run` has a config-file key with the same name in
//! snake_case (`--max-iters` / `"max_iters"`) and an env var with the key
//! uppercased (`GEMS_MAX_ITERS`).

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gems_core::backends::{HttpEndpointConfig, SyntheticWorldConfig};
use gems_core::LoopConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "GEMS_";
pub const DEFAULT_OUT_DIR: &str = "runs";
pub const DEFAULT_PARALLEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Synthetic,
    Http,
}

/// Refiner used by the synthetic backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RefinerKind {
    /// Emphasize the first failing feature.
    FixOne,
    /// Never edit the prompt; every iteration is a resample.
    NoOp,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {key}: {message}")]
    Env { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// One source of settings. Unset fields fall through to the next source.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    /// Backend family.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Directory of `<slug>/SKILL.md` skills.
    #[arg(long)]
    pub skills_dir: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    /// Iteration budget (n_max).
    #[arg(long)]
    pub max_iters: Option<u32>,
    /// Upper bound on triggered skills per run.
    #[arg(long)]
    pub max_skills: Option<usize>,
    /// Cap on decomposed criteria.
    #[arg(long)]
    pub max_criteria: Option<usize>,
    /// Raw images attached to each refiner call.
    #[arg(long)]
    pub image_window: Option<usize>,
    /// Verifier re-asks after an unparseable reply.
    #[arg(long)]
    pub verifier_retries: Option<u32>,
    /// Master seed; random when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root of the run store.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
    pub json: Option<bool>,
    /// Record every backend call as a cassette.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
    pub capture: Option<bool>,
    /// Concurrent runs in batch mode.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Synthetic base inclusion probability.
    #[arg(long)]
    pub synthetic_p: Option<f64>,
    /// Synthetic gain per emphasis step.
    #[arg(long)]
    pub synthetic_g: Option<f64>,
    /// Synthetic refiner policy.
    #[arg(long, value_enum)]
    pub refiner: Option<RefinerKind>,
    #[arg(long)]
    pub http_base_url: Option<String>,
    /// Model for planning, verification, refinement and compression.
    #[arg(long)]
    pub http_model: Option<String>,
    #[arg(long)]
    pub http_image_model: Option<String>,
    /// Name of the env var holding the API token.
    #[arg(long)]
    pub http_auth_env: Option<String>,
    #[arg(long)]
    pub http_timeout_secs: Option<u64>,
    #[arg(long)]
    pub http_max_retries: Option<u32>,
    #[arg(long)]
    pub http_backoff_ms: Option<u64>,
}

macro_rules! layer_fields {
    ($apply:ident) => {
        $apply!(
            backend,
            skills_dir,
            templates_dir,
            max_iters,
            max_skills,
            max_criteria,
            image_window,
            verifier_retries,
            seed,
            out_dir,
            json,
            capture,
            parallel,
            synthetic_p,
            synthetic_g,
            refiner,
            http_base_url,
            http_model,
            http_image_model,
            http_auth_env,
            http_timeout_secs,
            http_max_retries,
            http_backoff_ms
        )
    };
}

/// Env values are read as JSON first, then as a plain string.
fn env_value<T: DeserializeOwned>(
    env: &dyn Fn(&str) -> Option<String>,
    key: &str,
) -> Result<Option<T>, ConfigError> {
    let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
    let Some(raw) = env(&var) else {
        return Ok(None);
    };
    if let Ok(v) = serde_json::from_str::<T>(&raw) {
        return Ok(Some(v));
    }
    serde_json::from_value(serde_json::Value::String(raw.clone()))
        .map(Some)
        .map_err(|e| ConfigError::Env {
            key: var,
            message: format!("{raw:?}: {e}"),
        })
}

impl ConfigLayer {
    pub const KEYS: &'static [&'static str] = {
        macro_rules! names {
            ($($f:ident),*) => { &[$(stringify!($f)),*] };
        }
        layer_fields!(names)
    };

    /// Fields set here win over `lower`.
    pub fn or(self, lower: ConfigLayer) -> ConfigLayer {
        macro_rules! merge {
            ($($f:ident),*) => { ConfigLayer { $($f: self.$f.or(lower.$f)),* } };
        }
        layer_fields!(merge)
    }

    pub fn from_env(env: &dyn Fn(&str) -> Option<String>) -> Result<ConfigLayer, ConfigError> {
        let mut layer = ConfigLayer::default();
        macro_rules! read {
            ($($f:ident),*) => { $(layer.$f = env_value(env, stringify!($f))?;)* };
        }
        layer_fields!(read);
        Ok(layer)
    }

    pub fn from_file(path: &Path) -> Result<ConfigLayer, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::File {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    pub base_url: String,
    pub model: String,
    pub image_model: String,
    pub auth_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl HttpSettings {
    pub fn reasoner_endpoint(&self) -> HttpEndpointConfig {
        self.endpoint(&self.model)
    }

    pub fn generator_endpoint(&self) -> HttpEndpointConfig {
        self.endpoint(&self.image_model)
    }

    fn endpoint(&self, model: &str) -> HttpEndpointConfig {
        HttpEndpointConfig {
            base_url: self.base_url.clone(),
            auth_token_env_name: self.auth_env.clone(),
            model_name: model.to_string(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            backoff_initial_ms: self.backoff_ms,
        }
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub backend: BackendKind,
    pub skills_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub loop_config: LoopConfig,
    pub out_dir: PathBuf,
    pub json: bool,
    pub capture: bool,
    pub parallel: usize,
    pub world: SyntheticWorldConfig,
    pub refiner: RefinerKind,
    pub http: HttpSettings,
}

impl Settings {
    fn from_layer(l: ConfigLayer) -> Result<Settings, ConfigError> {
        let defaults = LoopConfig::default();
        let world_default = SyntheticWorldConfig::default();
        let settings = Settings {
            backend: l.backend.unwrap_or(BackendKind::Synthetic),
            skills_dir: l.skills_dir,
            templates_dir: l.templates_dir,
            loop_config: LoopConfig {
                n_max: l.max_iters.unwrap_or(defaults.n_max),
                max_triggered_skills: l.max_skills.unwrap_or(defaults.max_triggered_skills),
                n_max_criteria: l.max_criteria.unwrap_or(defaults.n_max_criteria),
                image_context_window: l.image_window.unwrap_or(defaults.image_context_window),
                verifier_retries: l.verifier_retries.unwrap_or(defaults.verifier_retries),
                random_seed: l.seed.or(defaults.random_seed),
            },
            out_dir: l.out_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            json: l.json.unwrap_or(false),
            capture: l.capture.unwrap_or(false),
            parallel: l.parallel.unwrap_or(DEFAULT_PARALLEL),
            world: SyntheticWorldConfig::new(
                l.synthetic_p.unwrap_or(world_default.base_inclusion_probability),
                l.synthetic_g.unwrap_or(world_default.emphasis_gain),
            ),
            refiner: l.refiner.unwrap_or(RefinerKind::FixOne),
            http: HttpSettings {
                base_url: l
                    .http_base_url
                    .unwrap_or_else(|| "https://api.openai.com/v1".into()),
                model: l.http_model.unwrap_or_else(|| "gpt-4o".into()),
                image_model: l.http_image_model.unwrap_or_else(|| "gpt-image-1".into()),
                auth_env: l.http_auth_env.unwrap_or_else(|| "OPENAI_API_KEY".into()),
                timeout_secs: l.http_timeout_secs.unwrap_or(120),
                max_retries: l.http_max_retries.unwrap_or(3),
                backoff_ms: l.http_backoff_ms.unwrap_or(500),
            },
        };
        settings
            .loop_config
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        settings.world.validate().map_err(ConfigError::Invalid)?;
        if settings.parallel == 0 {
            return Err(ConfigError::Invalid("parallel must be at least 1".into()));
        }
        Ok(settings)
    }
}

/// Resolves settings from all sources. The config file path comes from
/// `config_flag` or `GEMS_CONFIG`.
pub fn resolve(
    flags: ConfigLayer,
    config_flag: Option<&Path>,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Settings, ConfigError> {
    let env_layer = ConfigLayer::from_env(env)?;
    let config_path = config_flag
        .map(Path::to_path_buf)
        .or_else(|| env(&format!("{ENV_PREFIX}CONFIG")).map(PathBuf::from));
    let file_layer = match config_path {
        Some(p) => ConfigLayer::from_file(&p)?,
        None => ConfigLayer::default(),
    };
    Settings::from_layer(flags.or(env_layer).or(file_layer))
}

/// `std::env` lookup for [`resolve`].
pub fn process_env(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env_of(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults_without_any_source() {
        let s = resolve(ConfigLayer::default(), None, &env_of(&[])).unwrap();
        assert_eq!(s.loop_config.n_max, 5);
        assert_eq!(s.loop_config.max_triggered_skills, 1);
        assert_eq!(s.backend, BackendKind::Synthetic);
        assert_eq!(s.parallel, 4);
        assert!(!s.json && !s.capture);
    }

    #[test]
    fn precedence_flags_env_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("gems.json");
        std::fs::write(&file, r#"{"max_iters": 2, "max_skills": 0, "seed": 1, "refiner": "no-op"}"#).unwrap();
        let env = env_of(&[("GEMS_MAX_ITERS", "3"), ("GEMS_SEED", "9"), ("GEMS_SKILLS_DIR", "123")]);
        let flags = ConfigLayer {
            max_iters: Some(4),
            ..Default::default()
        };
        let s = resolve(flags, Some(&file), &env).unwrap();
        assert_eq!(s.loop_config.n_max, 4);
        assert_eq!(s.loop_config.random_seed, Some(9));
        assert_eq!(s.loop_config.max_triggered_skills, 0);
        assert_eq!(s.refiner, RefinerKind::NoOp);
        assert_eq!(s.skills_dir, Some(PathBuf::from("123")));
    }

    #[test]
    fn config_path_from_env() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"json": true}"#).unwrap();
        let env = env_of(&[("GEMS_CONFIG", file.to_str().unwrap())]);
        assert!(resolve(ConfigLayer::default(), None, &env).unwrap().json);
    }

    #[test]
    fn rejects_bad_values() {
        let zero = ConfigLayer {
            max_iters: Some(0),
            ..Default::default()
        };
        assert!(matches!(resolve(zero, None, &env_of(&[])), Err(ConfigError::Invalid(_))));
        let env = env_of(&[("GEMS_MAX_ITERS", "lots")]);
        assert!(matches!(resolve(ConfigLayer::default(), None, &env), Err(ConfigError::Env { .. })));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"max_iterations": 3}"#).unwrap();
        assert!(matches!(
            resolve(ConfigLayer::default(), Some(&file), &env_of(&[])),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn keys_cover_every_field() {
        let json = serde_json::Value::Object(
            ConfigLayer::KEYS
                .iter()
                .map(|k| (k.to_string(), serde_json::Value::Null))
                .collect(),
        );
        assert_eq!(serde_json::from_value::<ConfigLayer>(json).unwrap(), ConfigLayer::default());
        assert_eq!(ConfigLayer::KEYS.len(), 23);
    }
}
