//! Blocking JSON client shared by the external backends.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// POSTs `body` and decodes the JSON reply. Transport errors, 429 and 5xx
/// map to retryable backend errors; other statuses are permanent.
pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    body: &B,
    bearer: Option<&str>,
    backend: &str,
) -> Result<R> {
    let mut req = agent.post(url).set("content-type", "application/json");
    if let Some(token) = bearer {
        req = req.set("authorization", &format!("Bearer {token}"));
    }
    log::debug!("{backend}: POST {url}");
    match req.send_json(body) {
        Ok(resp) => resp.into_json::<R>().map_err(|e| Error::Backend {
            backend: backend.into(),
            retryable: false,
            message: format!("undecodable response: {e}"),
        }),
        Err(ureq::Error::Status(code, resp)) => {
            let text = resp.into_string().unwrap_or_default();
            Err(Error::Backend {
                backend: backend.into(),
                retryable: code == 429 || code >= 500,
                message: format!("HTTP {code}: {}", text.chars().take(500).collect::<String>()),
            })
        }
        Err(e) => Err(Error::Backend {
            backend: backend.into(),
            retryable: true,
            message: e.to_string(),
        }),
    }
}
