use std::path::{Path, PathBuf};

use optiset_core::backend::{HttpBackend, HttpConfig, LlmBackend, MockBackend, MockConfig};
use optiset_core::loss::LossConfig;
use optiset_core::metrics::EvalConfig;
use optiset_core::retrieval::Bm25Params;
use optiset_core::selection::EsrConfig;
use optiset_core::synthesis::SynthesisConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

fn default_api_key_env() -> String {
    "OPTISET_API_KEY".into()
}
fn default_max_in_flight() -> usize {
    8
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_k() -> usize {
    20
}
fn default_k1() -> f64 {
    Bm25Params::default().k1
}
fn default_b() -> f64 {
    Bm25Params::default().b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Mock behaviour file; the heuristic mock when absent.
    #[serde(default)]
    pub mock_config: Option<PathBuf>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::default(),
            base_url: None,
            api_key_env: default_api_key_env(),
            model_name: None,
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
            mock_config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_b")]
    pub b: f64,
}

impl RetrievalSection {
    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.k1,
            b: self.b,
        }
    }
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            k1: default_k1(),
            b: default_b(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Paths {
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub selection: EsrConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub seed: u64,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub mock_config: Option<PathBuf>,
    pub mock: bool,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its
    /// directory. Returns the config and the raw bytes for hashing.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.paths.corpus);
        resolve(base, &mut cfg.paths.dataset);
        resolve(base, &mut cfg.paths.prompts_dir);
        resolve(base, &mut cfg.paths.out_dir);
        resolve(base, &mut cfg.backend.mock_config);
        Ok((cfg, bytes))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.k {
            self.retrieval.k = v;
        }
        for (dst, src) in [
            (&mut self.paths.out_dir, &o.out_dir),
            (&mut self.paths.corpus, &o.corpus),
            (&mut self.paths.dataset, &o.dataset),
            (&mut self.paths.prompts_dir, &o.prompts_dir),
            (&mut self.backend.mock_config, &o.mock_config),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if o.base_url.is_some() {
            self.backend.base_url.clone_from(&o.base_url);
            self.backend.kind = BackendKind::Http;
        }
        if o.model_name.is_some() {
            self.backend.model_name.clone_from(&o.model_name);
        }
        if o.mock || o.mock_config.is_some() {
            self.backend.kind = BackendKind::Mock;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.retrieval.k == 0 {
            return Err(CliError::Input("retrieval.k must be at least 1".into()));
        }
        self.synthesis
            .validate()
            .map_err(|e| CliError::Input(e.to_string()))?;
        self.loss
            .validate()
            .map_err(|e| CliError::Input(e.to_string()))?;
        if let Some(dir) = &self.paths.prompts_dir {
            require_file(dir)?;
        }
        if let Some(mock) = &self.backend.mock_config {
            require_file(mock)?;
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self
            .paths
            .out_dir
            .clone()
            .ok_or_else(|| CliError::Input("paths.out_dir is not set".into()))?;
        std::fs::create_dir_all(&dir).map_err(|e| {
            CliError::Input(format!("out_dir {} is not writable: {e}", dir.display()))
        })?;
        Ok(dir)
    }

    pub fn dataset(&self) -> Result<PathBuf, CliError> {
        let p = self
            .paths
            .dataset
            .clone()
            .ok_or_else(|| CliError::Input("paths.dataset is not set".into()))?;
        require_file(&p)?;
        Ok(p)
    }

    pub fn corpus(&self) -> Result<PathBuf, CliError> {
        let p = self
            .paths
            .corpus
            .clone()
            .ok_or_else(|| CliError::Input("paths.corpus is not set".into()))?;
        require_file(&p)?;
        Ok(p)
    }

    pub fn build_backend(&self) -> Result<Box<dyn LlmBackend>, CliError> {
        match self.backend.kind {
            BackendKind::Mock => {
                let cfg = match &self.backend.mock_config {
                    Some(path) => {
                        let bytes = std::fs::read(path).map_err(|e| {
                            CliError::Input(format!("cannot read {}: {e}", path.display()))
                        })?;
                        serde_json::from_slice::<MockConfig>(&bytes).map_err(|e| {
                            CliError::Input(format!("invalid mock config {}: {e}", path.display()))
                        })?
                    }
                    None => return Ok(Box::new(MockBackend::heuristic())),
                };
                Ok(Box::new(MockBackend::new(cfg)))
            }
            BackendKind::Http => {
                let base_url = self
                    .backend
                    .base_url
                    .clone()
                    .ok_or_else(|| CliError::Input("backend.base_url is not set".into()))?;
                let model_name = self
                    .backend
                    .model_name
                    .clone()
                    .ok_or_else(|| CliError::Input("backend.model_name is not set".into()))?;
                let mut http = HttpConfig::new(base_url, model_name);
                http.api_key = std::env::var(&self.backend.api_key_env).ok();
                http.max_in_flight = self.backend.max_in_flight;
                http.timeout_secs = self.backend.timeout_secs;
                Ok(Box::new(HttpBackend::new(http)))
            }
        }
    }
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "{} does not exist",
            path.display()
        )))
    }
}
