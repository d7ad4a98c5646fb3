use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::{EndpointConfig, Provider, ProviderCall, ProviderError, Role};

const SYSTEM_PROMPT: &str = "You are a careful data engineer. Reply with a single JSON object and nothing else.";

/// OpenAI-compatible chat-completions client with one endpoint per role
/// and one per committee member.
pub struct HttpProvider {
    endpoints: BTreeMap<Role, EndpointConfig>,
    committee: Vec<EndpointConfig>,
}

impl HttpProvider {
    pub fn new(endpoints: BTreeMap<Role, EndpointConfig>, committee: Vec<EndpointConfig>) -> Result<Self, super::GatewayError> {
        for e in endpoints.values().chain(committee.iter()) {
            e.validate()?;
        }
        Ok(Self { endpoints, committee })
    }

    fn endpoint_for(&self, call: &ProviderCall<'_>) -> Result<&EndpointConfig, ProviderError> {
        let req = call.request;
        if let Some(member) = &req.member {
            if let Some(e) = self.committee.iter().find(|e| &e.model == member) {
                return Ok(e);
            }
        }
        self.endpoints
            .get(&req.role)
            .ok_or_else(|| ProviderError::Transport(format!("no endpoint configured for role {}", req.role)))
    }

    /// The chat-completions request body for one call.
    pub fn request_body(endpoint: &EndpointConfig, call: &ProviderCall<'_>) -> Value {
        json!({
            "model": endpoint.model,
            "temperature": call.request.temperature,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": call.prompt},
            ],
            "metadata": {"request_id": call.digest},
        })
    }

    fn send_once(endpoint: &EndpointConfig, body: &Value) -> Result<String, (bool, String)> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let mut request = agent.post(&url).header("Content-Type", "application/json");
        if let Some(var) = &endpoint.auth_env {
            let token = std::env::var(var).map_err(|_| (false, format!("environment variable {var} is not set")))?;
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}: {text}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}: {text}")));
        }
        let parsed: Value = serde_json::from_str(&text).map_err(|e| (false, format!("bad completion body: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| (false, "completion has no message content".to_string()))
    }
}

impl Provider for HttpProvider {
    fn complete(&self, call: &ProviderCall<'_>) -> Result<String, ProviderError> {
        let endpoint = self.endpoint_for(call)?;
        let body = Self::request_body(endpoint, call);
        let mut last = String::new();
        for _ in 0..=endpoint.max_retries {
            match Self::send_once(endpoint, &body) {
                Ok(content) => return Ok(content),
                Err((retryable, message)) => {
                    last = message;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(ProviderError::Transport(last))
    }
}
