//! Minimal JSON-over-HTTP helper shared by the remote clients.

use std::io::Read;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("response is not valid JSON: {0}")]
    BadJson(String),
}

impl HttpError {
    /// Timeouts, connection failures and 5xx statuses.
    pub fn is_transient(&self) -> bool {
        match self {
            HttpError::Status { status, .. } => *status >= 500,
            HttpError::Timeout(_) | HttpError::Transport(_) => true,
            HttpError::BadJson(_) => false,
        }
    }
}

pub fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

fn map_error(err: ureq::Error) -> HttpError {
    match err {
        ureq::Error::Status(status, resp) => {
            let body = resp.into_string().unwrap_or_default();
            HttpError::Status {
                status,
                body: body.chars().take(300).collect(),
            }
        }
        ureq::Error::Transport(t) => {
            let msg = t.to_string();
            if msg.contains("timed out") || msg.contains("Timeout") {
                HttpError::Timeout(msg)
            } else {
                HttpError::Transport(msg)
            }
        }
    }
}

pub fn post_json(agent: &ureq::Agent, url: &str, headers: &[(&str, String)], body: &Value) -> Result<Value, HttpError> {
    let mut req = agent.post(url);
    for (k, v) in headers {
        req = req.set(k, v);
    }
    let resp = req.send_json(body).map_err(map_error)?;
    let text = resp.into_string().map_err(|e| HttpError::Transport(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| HttpError::BadJson(e.to_string()))
}

/// Posts raw bytes and returns the response body as text.
pub fn post_bytes(
    agent: &ureq::Agent,
    url: &str,
    headers: &[(&str, String)],
    body: &[u8],
) -> Result<String, HttpError> {
    let mut req = agent.post(url).set("Content-Type", "application/octet-stream");
    for (k, v) in headers {
        req = req.set(k, v);
    }
    let resp = req.send_bytes(body).map_err(map_error)?;
    resp.into_string().map_err(|e| HttpError::Transport(e.to_string()))
}

pub fn get_bytes(agent: &ureq::Agent, url: &str) -> Result<Vec<u8>, HttpError> {
    let resp = agent.get(url).call().map_err(map_error)?;
    let mut buf = Vec::new();
    resp.into_reader()
        .read_to_end(&mut buf)
        .map_err(|e| HttpError::Transport(e.to_string()))?;
    Ok(buf)
}
