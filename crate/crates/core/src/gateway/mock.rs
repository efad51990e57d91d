//! Deterministic scripted backend for tests and offline runs.

use std::collections::VecDeque;
use std::sync::Mutex;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatReply, ChatRequest, FinishReason, Transport, TransportError};

/// A scripted response: the first rule whose pattern matches the prompt
/// answers. Multiple responses play in order, the last one sticking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    /// Regular expression matched against `system_prompt + "\n" + user_prompt`.
    pub pattern: String,
    /// Responses played in order across matching calls; `$1`..`$9` expand to
    /// capture groups from the pattern match.
    pub responses: Vec<String>,
}

struct RuleState {
    regex: Regex,
    responses: Vec<String>,
    hits: usize,
}

/// One observed chat call.
#[derive(Debug, Clone)]
pub struct MockCall {
    pub system_prompt: String,
    pub user_prompt: String,
    pub model_tag: String,
}

/// Scripted transport: pattern-matched chat responses, seeded hash-derived
/// embeddings, and optional fault injection.
pub struct MockTransport {
    rules: Mutex<Vec<RuleState>>,
    default_response: Option<String>,
    embed_dim: usize,
    embed_seed: u64,
    faults: Mutex<VecDeque<u16>>,
    calls: Mutex<Vec<MockCall>>,
    embed_calls: Mutex<Vec<usize>>,
}

impl MockTransport {
    /// A mock emitting `embed_dim`-dimensional hash embeddings derived from
    /// `embed_seed`, with no chat rules yet.
    pub fn new(embed_dim: usize, embed_seed: u64) -> Self {
        MockTransport {
            rules: Mutex::new(Vec::new()),
            default_response: None,
            embed_dim,
            embed_seed,
            faults: Mutex::new(VecDeque::new()),
            calls: Mutex::new(Vec::new()),
            embed_calls: Mutex::new(Vec::new()),
        }
    }

    /// Appends a single-response rule. Panics on an invalid pattern.
    pub fn rule(self, pattern: &str, response: &str) -> Self {
        self.rule_sequence(pattern, &[response])
    }

    /// Appends a rule that plays `responses` in order, repeating the last.
    pub fn rule_sequence(self, pattern: &str, responses: &[&str]) -> Self {
        assert!(!responses.is_empty(), "a rule needs at least one response");
        let regex = Regex::new(pattern).expect("valid mock pattern");
        self.rules.lock().unwrap().push(RuleState {
            regex,
            responses: responses.iter().map(|r| r.to_string()).collect(),
            hits: 0,
        });
        self
    }

    /// Appends pre-built rules (e.g. parsed from a config file).
    pub fn with_rules(self, rules: &[MockRule]) -> Result<Self, regex::Error> {
        {
            let mut state = self.rules.lock().unwrap();
            for rule in rules {
                state.push(RuleState {
                    regex: Regex::new(&rule.pattern)?,
                    responses: if rule.responses.is_empty() {
                        vec![String::new()]
                    } else {
                        rule.responses.clone()
                    },
                    hits: 0,
                });
            }
        }
        Ok(self)
    }

    /// Response used when no rule matches; without it, unmatched prompts
    /// are a protocol error.
    pub fn with_default(mut self, response: &str) -> Self {
        self.default_response = Some(response.to_string());
        self
    }

    /// Queues HTTP-style faults consumed by subsequent chat calls, one per
    /// call, before any rule matching. 401/403 inject auth failures, 1
    /// injects a network failure, anything else an HTTP status.
    pub fn push_faults(&self, statuses: &[u16]) {
        let mut faults = self.faults.lock().unwrap();
        faults.extend(statuses.iter().copied());
    }

    pub fn chat_calls(&self) -> Vec<MockCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn chat_call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    /// Sizes of the embedding batches forwarded to the backend, in order.
    pub fn embed_batch_sizes(&self) -> Vec<usize> {
        self.embed_calls.lock().unwrap().clone()
    }

    fn hash_vector(&self, model_tag: &str, text: &str) -> Vec<f32> {
        let mut hasher = Sha256::new();
        hasher.update(self.embed_seed.to_le_bytes());
        hasher.update(model_tag.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        let bytes = hasher.finalize();
        let seed = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mut rng = crate::rng::seeded(seed);
        let mut values: Vec<f32> = (0..self.embed_dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        values
    }
}

impl Transport for MockTransport {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, TransportError> {
        self.calls.lock().unwrap().push(MockCall {
            system_prompt: req.system_prompt.clone(),
            user_prompt: req.user_prompt.clone(),
            model_tag: req.model_tag.clone(),
        });

        if let Some(status) = self.faults.lock().unwrap().pop_front() {
            return Err(match status {
                401 | 403 => TransportError::Auth(format!("injected auth failure {status}")),
                1 => TransportError::Network("injected network failure".into()),
                _ => TransportError::Http {
                    status,
                    message: "injected fault".into(),
                },
            });
        }

        let haystack = format!("{}\n{}", req.system_prompt, req.user_prompt);
        let mut rules = self.rules.lock().unwrap();
        for rule in rules.iter_mut() {
            if let Some(caps) = rule.regex.captures(&haystack) {
                let idx = rule.hits.min(rule.responses.len() - 1);
                rule.hits += 1;
                let mut text = String::new();
                caps.expand(&rule.responses[idx], &mut text);
                return Ok(ChatReply {
                    text,
                    finish_reason: FinishReason::Stop,
                });
            }
        }

        match &self.default_response {
            Some(text) => Ok(ChatReply {
                text: text.clone(),
                finish_reason: FinishReason::Stop,
            }),
            None => Err(TransportError::Protocol(format!(
                "no scripted response matches prompt starting {:?}",
                haystack.chars().take(80).collect::<String>()
            ))),
        }
    }

    fn embed(&self, model_tag: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
        self.embed_calls.lock().unwrap().push(texts.len());
        Ok(texts
            .iter()
            .map(|t| self.hash_vector(model_tag, t))
            .collect())
    }
}
