//! Blocking HTTP client for OpenAI-style chat-completion endpoints.

use semrec::prompts::{ChatRequest, ChatTransport};
use semrec::{Error, Result};
use serde_json::Value;

pub struct HttpTransport {
    endpoint: String,
    token: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, token: impl Into<String>) -> Self {
        HttpTransport {
            endpoint: endpoint.into(),
            token: token.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

/// The first choice's message text.
pub fn response_text(body: &Value) -> Result<String> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::External("response has no choices[0].message.content".into()))
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(request)
            .map_err(|e| Error::External(format!("{}: {e}", self.endpoint)))?;
        let body: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::External(format!("{}: {e}", self.endpoint)))?;
        response_text(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_first_choice() {
        let body: Value = serde_json::from_str(
            r#"{"choices":[{"message":{"role":"assistant","content":"likes bold lipstick"}}]}"#,
        )
        .unwrap();
        assert_eq!(response_text(&body).unwrap(), "likes bold lipstick");
        assert!(response_text(&serde_json::json!({"choices": []})).is_err());
    }
}
