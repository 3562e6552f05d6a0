//! `i2e.toml` loading and backend construction shared by the server and CLI.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use i2e_agents::asr::{AsrBackend, AsrBackendConfig, FixtureFileAsr};
use i2e_agents::eval::EvalParams;
use i2e_agents::http::{HttpAsr, HttpLlm, HttpLlmConfig};
use i2e_agents::llm::LlmBackend;
use i2e_agents::mock::{DeterministicMock, ScriptedLlm};
use i2e_agents::refine::RefineParams;
use i2e_core::HomophoneLexicon;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::pipeline::Backends;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsrKind {
    /// Reads the uploaded "audio" file as an ASR fixture.
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LlmKind {
    Deterministic,
    Script(PathBuf),
    Http(HttpLlmConfig),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSettings {
    pub data_root: PathBuf,
    pub port: u16,
    pub workers: usize,
    pub max_upload_bytes: usize,
    pub bearer_token: Option<String>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            data_root: PathBuf::from("i2e-data"),
            port: 8080,
            workers: 4,
            max_upload_bytes: 512 * 1024 * 1024,
            bearer_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub service: ServiceSettings,
    pub asr_kind: AsrKind,
    pub asr: AsrBackendConfig,
    pub llm: LlmKind,
    pub refine: RefineParams,
    pub lexicon: Option<PathBuf>,
    pub eval: EvalParams,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            service: ServiceSettings::default(),
            asr_kind: AsrKind::Mock,
            asr: AsrBackendConfig::default(),
            llm: LlmKind::Deterministic,
            refine: RefineParams::default(),
            lexicon: None,
            eval: EvalParams::default(),
        }
    }
}

fn take_str(table: &mut toml::Table, key: &str) -> Result<Option<String>, ConfigError> {
    match table.remove(key) {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(s)),
        Some(v) => Err(ConfigError::Invalid(format!("{key} must be a string, got {v}"))),
    }
}

/// Deserializes `table` on top of `base`, rejecting unknown keys.
fn overlay<T: Serialize + DeserializeOwned>(section: &str, base: T, table: toml::Table) -> Result<T, ConfigError> {
    let invalid = |e: String| ConfigError::Invalid(format!("[{section}] {e}"));
    let mut merged = toml::Table::try_from(&base).map_err(|e| invalid(e.to_string()))?;
    for (k, v) in table {
        match (merged.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => dst.extend(src),
            (Some(slot), v) => *slot = v,
            // optional fields are absent from the serialized base
            (None, v) if k == "context_limit" => {
                merged.insert(k, v);
            }
            (None, _) => return Err(invalid(format!("unknown key {k}"))),
        }
    }
    merged.try_into().map_err(|e: toml::de::Error| invalid(e.message().to_owned()))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Config {
    /// Relative paths inside the file resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Config, ConfigError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_owned()))?;
        let mut section = |name: &str| -> Result<toml::Table, ConfigError> {
            match doc.remove(name) {
                None => Ok(toml::Table::new()),
                Some(toml::Value::Table(t)) => Ok(t),
                Some(_) => Err(ConfigError::Invalid(format!("[{name}] must be a table"))),
            }
        };
        let mut cfg = Config::default();

        let mut service = section("service")?;
        if let Some(root) = take_str(&mut service, "data_root")? {
            cfg.service.data_root = resolve(base_dir, &root);
        }
        for (key, v) in service {
            let int = v.as_integer().filter(|n| *n > 0).ok_or_else(|| ConfigError::Invalid(format!("[service] {key} must be a positive integer")))?;
            match key.as_str() {
                "port" => cfg.service.port = u16::try_from(int).map_err(|_| ConfigError::Invalid("port out of range".into()))?,
                "workers" => cfg.service.workers = int as usize,
                "max_upload_bytes" => cfg.service.max_upload_bytes = int as usize,
                _ => return Err(ConfigError::Invalid(format!("[service] unknown key {key}"))),
            }
        }

        let mut asr = section("asr")?;
        cfg.asr_kind = match take_str(&mut asr, "kind")?.as_deref() {
            None | Some("mock") => AsrKind::Mock,
            Some("http") => AsrKind::Http,
            Some(k) => return Err(ConfigError::Invalid(format!("[asr] unknown kind {k}"))),
        };
        cfg.asr = overlay("asr", cfg.asr, asr)?;

        let mut llm = section("llm")?;
        let kind = take_str(&mut llm, "kind")?;
        let script = take_str(&mut llm, "script")?;
        cfg.llm = match kind.as_deref() {
            None | Some("deterministic") => LlmKind::Deterministic,
            Some("script") => LlmKind::Script(resolve(
                base_dir,
                &script.ok_or_else(|| ConfigError::Invalid("[llm] kind = \"script\" needs script = <path>".into()))?,
            )),
            Some("http") => LlmKind::Http(overlay("llm", HttpLlmConfig::default(), llm)?),
            Some(k) => return Err(ConfigError::Invalid(format!("[llm] unknown kind {k}"))),
        };

        let mut refine = section("refine")?;
        cfg.lexicon = take_str(&mut refine, "lexicon")?.map(|p| resolve(base_dir, &p));
        cfg.refine = overlay("refine", cfg.refine, refine)?;
        cfg.eval = overlay("eval", cfg.eval.clone(), section("eval")?)?;

        if let Some((k, _)) = doc.into_iter().next() {
            return Err(ConfigError::Invalid(format!("unknown section [{k}]")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        Config::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies I2E_* environment overrides on top of the file.
    pub fn with_env(mut self) -> Result<Config, ConfigError> {
        self.apply_env(|k| std::env::var(k).ok().filter(|v| !v.is_empty()))?;
        Ok(self)
    }

    fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(root) = get("I2E_DATA_ROOT") {
            self.service.data_root = PathBuf::from(root);
        }
        if let Some(w) = get("I2E_WORKERS") {
            self.service.workers = w
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| ConfigError::Invalid(format!("I2E_WORKERS={w} is not a positive integer")))?;
        }
        self.service.bearer_token = get("I2E_BEARER_TOKEN").or(self.service.bearer_token.take());
        if let Some(url) = get("I2E_ASR_ENDPOINT") {
            self.asr.endpoint_url = url;
            self.asr_kind = AsrKind::Http;
        }
        if let LlmKind::Http(c) = &mut self.llm {
            if let Some(url) = get("I2E_LLM_ENDPOINT") {
                c.endpoint_url = url;
            }
            if let Some(m) = get("I2E_LLM_MODEL") {
                c.model = m;
            }
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Result<HomophoneLexicon, ConfigError> {
        match &self.lexicon {
            None => Ok(HomophoneLexicon::default()),
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| ConfigError::Read { path: p.clone(), message: e.to_string() })?;
                HomophoneLexicon::load(&bytes).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn llm_backend(&self, lexicon: &HomophoneLexicon) -> Result<Arc<dyn LlmBackend>, ConfigError> {
        Ok(match &self.llm {
            LlmKind::Deterministic => Arc::new(DeterministicMock::new(lexicon.clone())),
            LlmKind::Script(p) => {
                let bytes = std::fs::read(p).map_err(|e| ConfigError::Read { path: p.clone(), message: e.to_string() })?;
                Arc::new(ScriptedLlm::load(&bytes).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?)
            }
            LlmKind::Http(c) => {
                if c.endpoint_url.is_empty() || c.model.is_empty() {
                    return Err(ConfigError::Invalid("[llm] http needs endpoint_url and model".into()));
                }
                Arc::new(HttpLlm::new(c.clone()))
            }
        })
    }

    pub fn asr_backend(&self) -> Result<Arc<dyn AsrBackend>, ConfigError> {
        self.asr.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(match self.asr_kind {
            AsrKind::Mock => Arc::new(FixtureFileAsr),
            AsrKind::Http => {
                if self.asr.endpoint_url.is_empty() {
                    return Err(ConfigError::Invalid("[asr] http needs endpoint_url".into()));
                }
                Arc::new(HttpAsr)
            }
        })
    }

    pub fn backends(&self) -> Result<Backends, ConfigError> {
        let lexicon = self.lexicon()?;
        Ok(Backends {
            asr: self.asr_backend()?,
            asr_config: self.asr.clone(),
            llm: self.llm_backend(&lexicon)?,
            lexicon,
            refine: self.refine,
            eval: self.eval.clone(),
        })
    }
}
