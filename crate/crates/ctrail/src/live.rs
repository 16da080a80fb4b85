//! Blocking client for OpenAI-compatible chat-completion endpoints, plus
//! parallel batch querying.

use std::time::Duration;

use ctrail_core::oracle::{
    build_prompt, OracleClient, OracleRequest, OracleResponse, QueryBatch, TransportError, TransportErrorKind,
};
use ctrail_core::SceneState;
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::LiveSettings;

pub const ENV_API_KEY: &str = "CTRAIL_API_KEY";
pub const ENV_API_BASE: &str = "CTRAIL_API_BASE";
pub const ENV_MODEL: &str = "CTRAIL_MODEL";
const DEFAULT_BASE: &str = "https://api.openai.com/v1";
const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("live oracle needs the {ENV_API_KEY} environment variable")]
    MissingKey,
}

pub struct LiveClient {
    agent: ureq::Agent,
    url: String,
    key: String,
    model: String,
    settings: LiveSettings,
}

impl LiveClient {
    /// Reads the key from the environment; endpoint and model come from the
    /// settings, then the environment, then built-in defaults.
    pub fn from_env(settings: &LiveSettings) -> Result<Self, LiveError> {
        let key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or(LiveError::MissingKey)?;
        let base = settings
            .base_url
            .clone()
            .or_else(|| std::env::var(ENV_API_BASE).ok())
            .unwrap_or_else(|| DEFAULT_BASE.into());
        let model = settings
            .model
            .clone()
            .or_else(|| std::env::var(ENV_MODEL).ok())
            .unwrap_or_else(|| DEFAULT_MODEL.into());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            key,
            model,
            settings: settings.clone(),
        })
    }

    fn attempt(&self, prompt: &str) -> Result<String, TransportError> {
        let body = json!({
            "model": self.model,
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(&body)
            .map_err(transport)?;
        let value: Value = resp.body_mut().read_json().map_err(transport)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError {
                kind: TransportErrorKind::Decode,
                detail: "response has no choices[0].message.content".into(),
            })
    }
}

fn transport(e: ureq::Error) -> TransportError {
    let kind = match &e {
        ureq::Error::Timeout(_) => TransportErrorKind::Timeout,
        ureq::Error::Json(_) => TransportErrorKind::Decode,
        _ => TransportErrorKind::Http,
    };
    TransportError {
        kind,
        detail: e.to_string(),
    }
}

impl OracleClient for LiveClient {
    fn complete(&self, request: &OracleRequest<'_>) -> Result<String, TransportError> {
        let mut result = self.attempt(request.prompt);
        for _ in 0..self.settings.retries {
            match &result {
                Err(e) if e.kind != TransportErrorKind::Decode => result = self.attempt(request.prompt),
                _ => break,
            }
        }
        result
    }
}

/// Issues the `m` queries of one cycle concurrently. Response order matches
/// the query index, so the batch equals the sequential one.
pub fn query_batch_parallel<C: OracleClient + ?Sized>(
    scene: &SceneState,
    intention: &str,
    m: u32,
    client: &C,
) -> QueryBatch {
    let prompt = build_prompt(scene, intention);
    let responses = (0..m.max(1))
        .into_par_iter()
        .map(|query_index| {
            let request = OracleRequest {
                prompt: &prompt,
                scene,
                query_index,
            };
            match client.complete(&request) {
                Ok(text) => OracleResponse::from_text(text, scene),
                Err(e) => OracleResponse::transport_failure(e),
            }
        })
        .collect();
    QueryBatch::from_responses(responses)
}
