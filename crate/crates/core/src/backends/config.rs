use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::mock::{MockCaptioner, MockGenerator, MockLlm, MockRule, MockVqa};
use super::{
    BackendError, CaptionerClient, Client, FailureKind, GeneratorClient, HttpTransport, LlmClient,
    ResponseCache, RetryPolicy, Role, Sampling, Transport, VqaClient,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VqaMockMode {
    #[default]
    Hashed,
    Constant,
}

/// Settings of the in-process mocks; ignored for HTTP backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockOptions {
    /// LLM: JSON list of keyword rules.
    pub rules: Option<PathBuf>,
    /// LLM: JSON object mapping prompt text to reply.
    pub script: Option<PathBuf>,
    pub vqa: VqaMockMode,
    /// VQA constant answer.
    pub answer: Option<String>,
    /// VQA hashed mode: exponent skewing answers toward the first class.
    pub skew: f64,
    /// VQA hashed mode: probability of answering unknown.
    pub unknown_rate: f64,
    /// Captioner: fixed caption returned for every image.
    pub caption: Option<String>,
    /// Generator: seeds that always fail.
    pub fail_seeds: Vec<u64>,
}

impl Default for MockOptions {
    fn default() -> Self {
        MockOptions {
            rules: None,
            script: None,
            vqa: VqaMockMode::Hashed,
            answer: None,
            skew: 2.0,
            unknown_rate: 0.0,
            caption: None,
            fail_seeds: Vec::new(),
        }
    }
}

/// One `[llm]` / `[generator]` / `[vqa]` / `[captioner]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mock: MockOptions,
}

fn default_timeout() -> f64 {
    120.0
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

impl BackendConfig {
    pub fn mock() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            token_env: None,
            timeout_secs: default_timeout(),
            max_attempts: default_attempts(),
            backoff_base_ms: default_backoff(),
            temperature: 0.0,
            seed: None,
            mock: MockOptions::default(),
        }
    }

    pub fn model_id(&self, role: Role) -> String {
        self.model.clone().unwrap_or_else(|| format!("mock-{role}"))
    }

    pub fn validate(&self, role: Role) -> Result<()> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(Error::Config(format!("[{role}] timeout_secs must be > 0")));
        }
        if self.max_attempts < 1 {
            return Err(Error::Config(format!("[{role}] max_attempts must be >= 1")));
        }
        if self.kind == BackendKind::Http {
            if self.endpoint.is_none() {
                return Err(Error::Config(format!(
                    "[{role}] http backend needs an endpoint"
                )));
            }
            if self.model.is_none() {
                return Err(Error::Config(format!(
                    "[{role}] http backend needs a model"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mock.unknown_rate) {
            return Err(Error::Config(format!(
                "[{role}] mock.unknown_rate must lie in [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            temperature: self.temperature,
            seed: self.seed,
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            backoff_base: Duration::from_millis(self.backoff_base_ms),
        }
    }

    fn transport(&self, role: Role, base_dir: &Path) -> Result<Arc<dyn Transport>> {
        self.validate(role)?;
        match self.kind {
            BackendKind::Http => {
                let token = match &self.token_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        Error::Backend(BackendError {
                            role,
                            model: self.model_id(role),
                            kind: FailureKind::Auth,
                            message: format!("token environment variable {var} is not set"),
                        })
                    })?),
                    None => None,
                };
                Ok(Arc::new(HttpTransport::new(
                    self.endpoint.clone().expect("validated"),
                    Duration::from_secs_f64(self.timeout_secs),
                    token,
                )))
            }
            BackendKind::Mock => self.mock_transport(role, base_dir),
        }
    }

    fn mock_transport(&self, role: Role, base_dir: &Path) -> Result<Arc<dyn Transport>> {
        let m = &self.mock;
        Ok(match role {
            Role::Llm => {
                if let Some(path) = &m.script {
                    let script: HashMap<String, String> =
                        crate::io::read_json(&base_dir.join(path))?;
                    Arc::new(MockLlm::scripted(script, Some("[]".into())))
                } else {
                    let rules: Vec<MockRule> = match &m.rules {
                        Some(path) => crate::io::read_json(&base_dir.join(path))?,
                        None => Vec::new(),
                    };
                    Arc::new(MockLlm::rules(rules))
                }
            }
            Role::Generator => {
                if m.fail_seeds.is_empty() {
                    Arc::new(MockGenerator::new())
                } else {
                    let fail = m.fail_seeds.clone();
                    Arc::new(MockGenerator::failing(move |_, seed| fail.contains(&seed)))
                }
            }
            Role::Vqa => match m.vqa {
                VqaMockMode::Hashed => Arc::new(MockVqa::hashed(m.skew, m.unknown_rate)),
                VqaMockMode::Constant => Arc::new(MockVqa::constant(
                    m.answer
                        .clone()
                        .unwrap_or_else(|| super::UNKNOWN.to_string()),
                )),
            },
            Role::Captioner => Arc::new(MockCaptioner::constant(
                m.caption.clone().unwrap_or_else(|| "An image.".to_string()),
            )),
        })
    }

    pub fn build_client(
        &self,
        role: Role,
        cache: Arc<ResponseCache>,
        max_in_flight: usize,
        base_dir: &Path,
    ) -> Result<Client> {
        Ok(
            Client::new(role, self.model_id(role), self.transport(role, base_dir)?)
                .with_cache(cache)
                .with_retry(self.retry())
                .with_max_in_flight(max_in_flight),
        )
    }
}

/// The four role tables of a configuration file. Missing roles are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendsConfig {
    #[serde(default)]
    pub llm: Option<BackendConfig>,
    #[serde(default)]
    pub generator: Option<BackendConfig>,
    #[serde(default)]
    pub vqa: Option<BackendConfig>,
    #[serde(default)]
    pub captioner: Option<BackendConfig>,
}

impl BackendsConfig {
    pub fn get(&self, role: Role) -> Option<&BackendConfig> {
        match role {
            Role::Llm => self.llm.as_ref(),
            Role::Generator => self.generator.as_ref(),
            Role::Vqa => self.vqa.as_ref(),
            Role::Captioner => self.captioner.as_ref(),
        }
    }

    /// All four roles as mocks with default options.
    pub fn all_mock() -> Self {
        BackendsConfig {
            llm: Some(BackendConfig::mock()),
            generator: Some(BackendConfig::mock()),
            vqa: Some(BackendConfig::mock()),
            captioner: Some(BackendConfig::mock()),
        }
    }

    fn require(&self, role: Role) -> Result<&BackendConfig> {
        self.get(role)
            .ok_or_else(|| Error::Config(format!("no [{role}] backend configured")))
    }

    pub fn client(
        &self,
        role: Role,
        cache: Arc<ResponseCache>,
        max_in_flight: usize,
        base_dir: &Path,
    ) -> Result<Client> {
        self.require(role)?
            .build_client(role, cache, max_in_flight, base_dir)
    }

    pub fn llm(
        &self,
        cache: Arc<ResponseCache>,
        max_in_flight: usize,
        base_dir: &Path,
    ) -> Result<LlmClient> {
        let cfg = self.require(Role::Llm)?;
        Ok(LlmClient::new(
            cfg.build_client(Role::Llm, cache, max_in_flight, base_dir)?,
            cfg.sampling(),
        ))
    }

    pub fn generator(
        &self,
        cache: Arc<ResponseCache>,
        max_in_flight: usize,
        base_dir: &Path,
    ) -> Result<GeneratorClient> {
        let cfg = self.require(Role::Generator)?;
        Ok(GeneratorClient::new(cfg.build_client(
            Role::Generator,
            cache,
            max_in_flight,
            base_dir,
        )?))
    }

    pub fn vqa(
        &self,
        cache: Arc<ResponseCache>,
        max_in_flight: usize,
        base_dir: &Path,
    ) -> Result<VqaClient> {
        let cfg = self.require(Role::Vqa)?;
        Ok(VqaClient::new(
            cfg.build_client(Role::Vqa, cache, max_in_flight, base_dir)?,
            cfg.sampling(),
        ))
    }

    pub fn captioner(
        &self,
        cache: Arc<ResponseCache>,
        max_in_flight: usize,
        base_dir: &Path,
    ) -> Result<CaptionerClient> {
        let cfg = self.require(Role::Captioner)?;
        Ok(CaptionerClient::new(
            cfg.build_client(Role::Captioner, cache, max_in_flight, base_dir)?,
            cfg.sampling(),
        ))
    }
}
