//! The single boundary for model calls.
//!
//! Every call is a [`StructuredRequest`]: a role, a versioned prompt
//! template with its variables, and an [`OutputContract`] the JSON reply must
//! satisfy. The [`Gateway`] renders the prompt, computes the request digest,
//! dispatches to a [`Provider`], and re-prompts with the parse error appended
//! when a reply breaks its contract.
//!
//! Providers:
//! - [`ReplayProvider`] serves recorded replies keyed by request digest
//!   (or in recorded order) and makes whole pipeline runs deterministic.
//! - [`RecordingProvider`] wraps any provider and captures replay fixtures.
//! - [`HttpProvider`] speaks the OpenAI-compatible chat-completions format.
//! - [`ScriptedProvider`] answers from a closure, for tests and fixture
//!   authoring.

mod committee;
mod http;
pub mod prompts;
mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::sha256_hex;

pub use committee::{committee_extract, CommitteeOutcome};
pub use http::HttpProvider;
pub use prompts::PromptTemplate;
pub use replay::{FixtureRecord, RecordingProvider, ReplayMode, ReplayProvider, ScriptedProvider};

pub const DEFAULT_REPAIR_RETRIES: usize = 2;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_COMMITTEE_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Schema,
    Extract,
    Reason,
    CommitteeMember,
    Verifier,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Schema,
        Role::Extract,
        Role::Reason,
        Role::CommitteeMember,
        Role::Verifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Schema => "schema",
            Role::Extract => "extract",
            Role::Reason => "reason",
            Role::CommitteeMember => "committee_member",
            Role::Verifier => "verifier",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_max_retries() -> u32 {
    2
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            auth_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_max_retries(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.timeout_secs > 0.0) {
            return Err(GatewayError::Config(format!(
                "endpoint {} timeout must be positive",
                self.model
            )));
        }
        Ok(())
    }
}

/// A model role bound to an endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRole {
    pub role: Role,
    pub endpoint: EndpointConfig,
}

impl ProviderRole {
    /// Committee member identified by model name only; enough for replay.
    pub fn member(model: impl Into<String>) -> Self {
        Self {
            role: Role::CommitteeMember,
            endpoint: EndpointConfig::new("", model),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
    Any,
}

impl FieldType {
    fn admits(self, value: &Value) -> bool {
        match self {
            FieldType::String => value.is_string(),
            FieldType::Integer => value.is_i64() || value.is_u64(),
            FieldType::Number => value.is_number(),
            FieldType::Boolean => value.is_boolean(),
            FieldType::Array => value.is_array(),
            FieldType::Object => value.is_object(),
            FieldType::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractField {
    pub name: String,
    pub field_type: FieldType,
    pub required: bool,
}

/// The declared shape of a structured reply: a JSON object with these
/// fields. Nullable optional fields may be absent or `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputContract {
    pub fields: Vec<ContractField>,
}

impl OutputContract {
    pub fn new() -> Self {
        Self { fields: Vec::new() }
    }

    pub fn required(mut self, name: &str, field_type: FieldType) -> Self {
        self.fields.push(ContractField {
            name: name.into(),
            field_type,
            required: true,
        });
        self
    }

    pub fn optional(mut self, name: &str, field_type: FieldType) -> Self {
        self.fields.push(ContractField {
            name: name.into(),
            field_type,
            required: false,
        });
        self
    }

    pub fn check(&self, reply: &Value) -> Result<(), String> {
        let obj = reply.as_object().ok_or("reply must be a JSON object")?;
        for f in &self.fields {
            match obj.get(&f.name) {
                None | Some(Value::Null) if f.required => {
                    return Err(format!("missing field {}", f.name));
                }
                None | Some(Value::Null) => {}
                Some(v) if !f.field_type.admits(v) => {
                    return Err(format!("field {} must be {:?}", f.name, f.field_type).to_lowercase());
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

impl Default for OutputContract {
    fn default() -> Self {
        Self::new()
    }
}

/// A model call: role, template, variables, and the reply contract.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredRequest {
    pub role: Role,
    /// Committee member label (model name) for `CommitteeMember` calls.
    pub member: Option<String>,
    pub template: PromptTemplate,
    pub variables: Map<String, Value>,
    pub contract: OutputContract,
    /// Always 0; part of the wire request, not of the digest.
    pub temperature: f64,
}

impl StructuredRequest {
    pub fn new(role: Role, template: PromptTemplate, contract: OutputContract) -> Self {
        assert!(!contract.fields.is_empty(), "output contract must declare fields");
        Self {
            role,
            member: None,
            template,
            variables: Map::new(),
            contract,
            temperature: 0.0,
        }
    }

    pub fn var(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.variables.insert(name.to_string(), value.into());
        self
    }

    pub fn member(mut self, label: impl Into<String>) -> Self {
        self.member = Some(label.into());
        self
    }

    /// Digest over role, member, template name and version, the canonical
    /// variable map, and the repair attempt number.
    pub fn digest(&self, attempt: usize) -> String {
        let canonical = serde_json::json!({
            "role": self.role,
            "member": self.member,
            "template": self.template.name,
            "version": self.template.version(),
            "variables": self.variables,
            "attempt": attempt,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }

    pub fn prompt(&self) -> String {
        self.template.render(&self.variables)
    }
}

/// What a provider receives for one attempt.
#[derive(Debug, Clone)]
pub struct ProviderCall<'a> {
    pub digest: String,
    pub attempt: usize,
    pub request: &'a StructuredRequest,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no fixture for digest {0}")]
    NoFixture(String),
}

pub trait Provider: Send + Sync {
    /// Returns the raw reply text for one attempt.
    fn complete(&self, call: &ProviderCall<'_>) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("{role} call failed: {source}")]
    Provider { role: Role, source: ProviderError },
    #[error("{role} reply violates contract after {attempts} attempts: {message}")]
    Contract {
        role: Role,
        attempts: usize,
        message: String,
        last_raw: String,
    },
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            GatewayError::Provider {
                source: ProviderError::Transport(_),
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredReply {
    pub value: Value,
    pub retries_used: usize,
    pub raw: String,
}

/// Audit entry for one provider attempt.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallRecord {
    pub digest: String,
    pub role: Role,
    pub template: String,
    pub attempt: usize,
    pub outcome: String,
}

struct Limiter {
    cap: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Dispatches structured requests to a provider with bounded repair retries
/// and a cap on concurrent in-flight calls.
pub struct Gateway {
    provider: Arc<dyn Provider>,
    repair_retries: usize,
    limiter: Limiter,
    log: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self::with_limits(provider, DEFAULT_REPAIR_RETRIES, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_limits(provider: Arc<dyn Provider>, repair_retries: usize, max_in_flight: usize) -> Self {
        Self {
            provider,
            repair_retries,
            limiter: Limiter {
                cap: max_in_flight.max(1),
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
            },
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn repair_retries(&self) -> usize {
        self.repair_retries
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.cap
    }

    /// Call log sorted by digest, so it is independent of scheduling.
    pub fn calls(&self) -> Vec<CallRecord> {
        let mut calls = self.log.lock().expect("log lock").clone();
        calls.sort();
        calls
    }

    /// Sends `req` and returns a reply that satisfies its contract.
    pub fn complete_structured(&self, req: &StructuredRequest) -> Result<StructuredReply, GatewayError> {
        self.complete_with(req, 0, |_| Ok(())).map(|(_, reply)| reply)
    }

    /// Like [`Gateway::complete_structured`], then runs `parse` on the reply.
    /// A contract breach triggers up to `repair_retries` re-prompts; a
    /// `parse` failure triggers up to `semantic_repairs` more. Both append
    /// the error to the prompt.
    pub fn complete_with<T>(
        &self,
        req: &StructuredRequest,
        semantic_repairs: usize,
        parse: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<(T, StructuredReply), GatewayError> {
        let mut contract_failures = 0;
        let mut semantic_failures = 0;
        let mut last_error: Option<String> = None;
        let mut attempt = 0;
        loop {
            let mut prompt = req.prompt();
            if let Some(err) = &last_error {
                prompt.push_str(&format!(
                    "\n\nYour previous reply was rejected: {err}\nReply again with JSON that fixes this."
                ));
            }
            let call = ProviderCall {
                digest: req.digest(attempt),
                attempt,
                request: req,
                prompt,
            };
            let raw = {
                let _slot = self.limiter.acquire();
                self.provider.complete(&call)
            };
            let raw = match raw {
                Ok(raw) => raw,
                Err(source) => {
                    self.record(&call, "provider_error");
                    return Err(GatewayError::Provider { role: req.role, source });
                }
            };
            let outcome = parse_reply(&raw)
                .and_then(|value| req.contract.check(&value).map(|_| value))
                .map_err(|e| (e, true))
                .and_then(|value| parse(&value).map(|t| (t, value)).map_err(|e| (e, false)));
            match outcome {
                Ok((parsed, value)) => {
                    self.record(&call, "ok");
                    return Ok((
                        parsed,
                        StructuredReply {
                            value,
                            retries_used: attempt,
                            raw,
                        },
                    ));
                }
                Err((message, is_contract)) => {
                    self.record(&call, if is_contract { "contract_error" } else { "invalid" });
                    if is_contract {
                        contract_failures += 1;
                    } else {
                        semantic_failures += 1;
                    }
                    if contract_failures > self.repair_retries || semantic_failures > semantic_repairs {
                        return Err(GatewayError::Contract {
                            role: req.role,
                            attempts: attempt + 1,
                            message,
                            last_raw: raw,
                        });
                    }
                    last_error = Some(message);
                }
            }
            attempt += 1;
        }
    }

    fn record(&self, call: &ProviderCall<'_>, outcome: &str) {
        self.log.lock().expect("log lock").push(CallRecord {
            digest: call.digest.clone(),
            role: call.request.role,
            template: call.request.template.name.to_string(),
            attempt: call.attempt,
            outcome: outcome.to_string(),
        });
    }
}

/// Parses a reply as JSON, tolerating a surrounding Markdown code fence.
pub fn parse_reply(raw: &str) -> Result<Value, String> {
    let trimmed = raw.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|rest| rest.trim_end().strip_suffix("```"))
        .unwrap_or(trimmed);
    serde_json::from_str(body.trim()).map_err(|e| format!("reply is not valid JSON: {e}"))
}

/// Digest-keyed map of replies, used by tests that script providers inline.
pub type ReplyTable = BTreeMap<String, Value>;

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn req() -> StructuredRequest {
        StructuredRequest::new(
            Role::Schema,
            prompts::SCHEMA_INIT,
            OutputContract::new().required("tables", FieldType::Array),
        )
        .var("query", "compare founding years")
    }

    #[test]
    fn digest_depends_on_variables_and_attempt() {
        let a = req();
        assert_eq!(a.digest(0), req().digest(0));
        assert_ne!(a.digest(0), a.digest(1));
        assert_ne!(a.digest(0), req().var("query", "other").digest(0));
        assert_ne!(a.digest(0), req().member("m1").digest(0));
    }

    #[test]
    fn contract_checks() {
        let c = OutputContract::new()
            .required("x", FieldType::Integer)
            .optional("note", FieldType::String);
        assert!(c.check(&json!({"x": 1})).is_ok());
        assert!(c.check(&json!({"x": 1, "note": null})).is_ok());
        assert_eq!(c.check(&json!({"note": "a"})), Err("missing field x".into()));
        assert!(c.check(&json!({"x": "1"})).is_err());
        assert!(c.check(&json!([1])).is_err());
    }

    #[test]
    fn fenced_replies_parse() {
        assert_eq!(parse_reply("```json\n{\"a\":1}\n```").unwrap(), json!({"a":1}));
        assert_eq!(parse_reply(" {\"a\":1} ").unwrap(), json!({"a":1}));
        assert!(parse_reply("sure! {").is_err());
    }

    #[test]
    fn repair_retry_recovers() {
        let r = req();
        let mut table = ReplyTable::new();
        table.insert(r.digest(0), json!({"links": []}));
        table.insert(r.digest(1), json!({"tables": [], "links": []}));
        let gw = Gateway::new(Arc::new(ReplayProvider::from_table(table)));
        let reply = gw.complete_structured(&r).unwrap();
        assert_eq!(reply.retries_used, 1);
        assert_eq!(reply.value["tables"], json!([]));
        assert_eq!(gw.calls().len(), 2);
    }

    #[test]
    fn repairs_are_bounded() {
        let provider = ScriptedProvider::new(|_| Ok("{\"nope\": true}".to_string()));
        let gw = Gateway::new(Arc::new(provider));
        match gw.complete_structured(&req()) {
            Err(GatewayError::Contract { attempts, last_raw, .. }) => {
                assert_eq!(attempts, DEFAULT_REPAIR_RETRIES + 1);
                assert_eq!(last_raw, "{\"nope\": true}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_repair_budget() {
        let provider = ScriptedProvider::new(|call| Ok(format!("{{\"tables\": [{}]}}", call.attempt)));
        let gw = Gateway::new(Arc::new(provider));
        let parse = |v: &Value| {
            if v["tables"][0] == json!(1) {
                Ok(1)
            } else {
                Err("want 1".to_string())
            }
        };
        let (n, reply) = gw.complete_with(&req(), 1, parse).unwrap();
        assert_eq!((n, reply.retries_used), (1, 1));
        assert!(gw.complete_with(&req(), 0, parse).is_err());
    }

    #[test]
    fn transport_errors_propagate() {
        let provider = ScriptedProvider::new(|_| Err(ProviderError::Transport("down".into())));
        let gw = Gateway::new(Arc::new(provider));
        let err = gw.complete_structured(&req()).unwrap_err();
        assert!(err.is_transport());
    }

    #[test]
    fn in_flight_cap_is_respected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (c, p) = (current.clone(), peak.clone());
        let provider = ScriptedProvider::new(move |_| {
            let now = c.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5));
            c.fetch_sub(1, Ordering::SeqCst);
            Ok("{\"tables\": []}".into())
        });
        let gw = Gateway::with_limits(Arc::new(provider), 2, 3);
        std::thread::scope(|s| {
            for i in 0..12 {
                let gw = &gw;
                s.spawn(move || gw.complete_structured(&req().var("i", i)).unwrap());
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }
}
