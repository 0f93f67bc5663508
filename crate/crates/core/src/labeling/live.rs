use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Connection settings for a chat-completions style annotator backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            token_env: "CURE_ANNOTATOR_TOKEN".into(),
            timeout_secs: 60,
            max_retries: 3,
        }
    }
}

impl BackendConfig {
    pub fn token(&self) -> Result<String> {
        match std::env::var(&self.token_env) {
            Ok(t) if !t.trim().is_empty() => Ok(t),
            _ => Err(Error::Config(format!(
                "live annotator needs an auth token in environment variable {}",
                self.token_env
            ))),
        }
    }
}

#[cfg(feature = "live")]
pub use imp::LiveClient;

#[cfg(feature = "live")]
mod imp {
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::BackendConfig;
    use crate::error::{Error, Result};
    use crate::labeling::client::AnnotatorClient;

    pub struct LiveClient {
        agent: ureq::Agent,
        config: BackendConfig,
        token: String,
    }

    impl LiveClient {
        pub fn new(config: BackendConfig) -> Result<Self> {
            let token = config.token()?;
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .build()
                .into();
            Ok(Self { agent, config, token })
        }
    }

    impl AnnotatorClient for LiveClient {
        fn complete(&self, prompt: &str) -> Result<String> {
            let body = json!({
                "model": self.config.model,
                "temperature": 0,
                "messages": [{"role": "user", "content": prompt}],
            });
            let reply: Value = self
                .agent
                .post(&self.config.endpoint)
                .header("Authorization", &format!("Bearer {}", self.token))
                .send_json(&body)
                .map_err(|e| Error::Client(e.to_string()))?
                .body_mut()
                .read_json()
                .map_err(|e| Error::Client(e.to_string()))?;
            reply["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Client(format!("unexpected response shape: {reply}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_token_names_variable() {
        let cfg = BackendConfig {
            token_env: "CURE_TEST_TOKEN_THAT_IS_NOT_SET".into(),
            ..Default::default()
        };
        let err = cfg.token().unwrap_err();
        assert!(err.to_string().contains("CURE_TEST_TOKEN_THAT_IS_NOT_SET"));
    }
}
