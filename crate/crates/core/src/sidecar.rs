//! Health probe for the NLP service that serves `/coref` and `/embed`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::TransportError;

/// Models the service reports as loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarHealth {
    pub coref_model: String,
    pub embed_model: String,
}

/// `GET {endpoint}/health`.
pub fn health(endpoint: &str, timeout: Duration) -> Result<SidecarHealth, TransportError> {
    let http = reqwest::blocking::Client::builder().timeout(timeout).build()?;
    let resp = http.get(format!("{}/health", endpoint.trim_end_matches('/'))).send()?;
    let status = resp.status();
    if !status.is_success() {
        return Err(TransportError::Status {
            status: status.as_u16(),
            body: resp.text().unwrap_or_default(),
        });
    }
    resp.json().map_err(|e| TransportError::Malformed(e.to_string()))
}
