//! Blocking JSON-over-HTTP transport shared by the chat client and the
//! fact-check scorer.

use std::thread;
use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1 << attempt.min(16))
    }
}

/// Final failure after retries. `status` is `None` for transport errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpFailure {
    pub status: Option<u16>,
    pub body: String,
    pub attempts: u32,
}

impl std::fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.status {
            Some(code) => write!(f, "HTTP {code} after {} attempt(s): {}", self.attempts, self.body),
            None => write!(f, "transport error after {} attempt(s): {}", self.attempts, self.body),
        }
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || status >= 500
}

pub fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

/// POSTs `body` and returns the response text of the first 2xx reply.
/// Transport errors, 429 and 5xx are retried with exponential backoff;
/// other statuses fail immediately.
pub fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    policy: RetryPolicy,
) -> Result<String, HttpFailure> {
    let mut attempt = 0;
    loop {
        let mut request = agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        let failure = match request.send_string(&body.to_string()) {
            Ok(resp) => {
                return resp.into_string().map_err(|e| HttpFailure {
                    status: None,
                    body: e.to_string(),
                    attempts: attempt + 1,
                })
            }
            Err(ureq::Error::Status(code, resp)) => HttpFailure {
                status: Some(code),
                body: resp.into_string().unwrap_or_default(),
                attempts: attempt + 1,
            },
            Err(ureq::Error::Transport(t)) => HttpFailure {
                status: None,
                body: t.to_string(),
                attempts: attempt + 1,
            },
        };
        let again = failure.status.is_none_or(retryable);
        if !again || attempt >= policy.retries {
            return Err(failure);
        }
        thread::sleep(policy.delay(attempt));
        attempt += 1;
    }
}
