//! Blocking JSON-over-HTTP plumbing shared by the remote collaborators.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn client(timeout: Duration) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| Error::Config(format!("http client: {e}")))
}

pub(crate) fn join(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path.trim_start_matches('/'))
}

fn transport_error(url: &str, err: reqwest::Error) -> Error {
    Error::Remote {
        endpoint: url.to_string(),
        status: err.status().map(|s| s.as_u16()),
        message: err.to_string(),
        retriable: err.is_timeout() || err.is_connect() || err.is_request(),
    }
}

fn read_response<R: DeserializeOwned>(url: &str, response: reqwest::blocking::Response) -> Result<R> {
    let status = response.status();
    if !status.is_success() {
        let body = response.text().unwrap_or_default();
        return Err(Error::Remote {
            endpoint: url.to_string(),
            status: Some(status.as_u16()),
            message: if body.is_empty() {
                status.to_string()
            } else {
                body
            },
            retriable: status.is_server_error() || status.as_u16() == 429,
        });
    }
    response.json::<R>().map_err(|e| Error::Remote {
        endpoint: url.to_string(),
        status: Some(status.as_u16()),
        message: format!("malformed response body: {e}"),
        retriable: false,
    })
}

pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(
    client: &reqwest::blocking::Client,
    url: &str,
    body: &B,
) -> Result<R> {
    let response = client
        .post(url)
        .json(body)
        .send()
        .map_err(|e| transport_error(url, e))?;
    read_response(url, response)
}

pub(crate) fn get_json<R: DeserializeOwned>(client: &reqwest::blocking::Client, url: &str) -> Result<R> {
    let response = client.get(url).send().map_err(|e| transport_error(url, e))?;
    read_response(url, response)
}
