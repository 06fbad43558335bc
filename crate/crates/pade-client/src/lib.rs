//! Thin async client for the trace analysis and intervention service.
//! One method per endpoint; request and response types come from
//! `pade_core::api`.

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use pade_core::api::{
    AnalyzeOptions, AnalyzeReport, ChairReport, DemoReport, DemoRequest, ErrorBody,
    HealthResponse, InterveneOptions, InterveneReport, PadOptions, SimulateRequest,
};
use pade_core::metrics::{BinaryOutcome, CaptionRecord, PopeScores};
use pade_core::pad::PadMap;
use pade_core::synth::RecoveryAggregate;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),

    /// The service rejected the request; `kind` is the machine-readable
    /// error tag from the response body.
    #[error("{kind}: {message} (HTTP {status})")]
    Api {
        status: u16,
        kind: String,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Client bound to one service base URL, e.g. `http://127.0.0.1:8787`.
#[derive(Clone)]
pub struct PadeClient {
    base: String,
    http: reqwest::Client,
}

impl PadeClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let mut base = base_url.into();
        while base.ends_with('/') {
            base.pop();
        }
        Self {
            base,
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(response: reqwest::Response) -> Result<T> {
        let status = response.status();
        if status.is_success() {
            return Ok(response.json().await?);
        }
        Err(Self::api_error(status, response).await)
    }

    async fn api_error(status: reqwest::StatusCode, response: reqwest::Response) -> ClientError {
        let fallback = ClientError::Api {
            status: status.as_u16(),
            kind: "unknown".into(),
            message: format!("HTTP {status}"),
        };
        match response.json::<ErrorBody>().await {
            Ok(body) => ClientError::Api {
                status: status.as_u16(),
                kind: body.error.kind,
                message: body.error.message,
            },
            Err(_) => fallback,
        }
    }

    async fn post_trace<Q: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        query: &Q,
        trace: Vec<u8>,
    ) -> Result<T> {
        let response = self
            .http
            .post(format!("{}{path}", self.base))
            .query(query)
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(trace)
            .send()
            .await?;
        Self::decode(response).await
    }

    async fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let response = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await?;
        Self::decode(response).await
    }

    pub async fn health(&self) -> Result<HealthResponse> {
        let response = self
            .http
            .get(format!("{}/v1/health", self.base))
            .send()
            .await?;
        Self::decode(response).await
    }

    pub async fn analyze(&self, trace: Vec<u8>, opts: &AnalyzeOptions) -> Result<AnalyzeReport> {
        self.post_trace("/v1/analyze", opts, trace).await
    }

    pub async fn pad(&self, trace: Vec<u8>, opts: &PadOptions) -> Result<PadMap> {
        self.post_trace("/v1/pad", opts, trace).await
    }

    pub async fn intervene(
        &self,
        trace: Vec<u8>,
        opts: &InterveneOptions,
    ) -> Result<InterveneReport> {
        self.post_trace("/v1/intervene", opts, trace).await
    }

    pub async fn simulate(&self, req: &SimulateRequest) -> Result<RecoveryAggregate> {
        self.post_json("/v1/simulate", req).await
    }

    pub async fn metrics_chair(&self, records: &[CaptionRecord]) -> Result<ChairReport> {
        self.post_json("/v1/metrics/chair", &records).await
    }

    pub async fn metrics_pope(&self, outcomes: &[BinaryOutcome]) -> Result<PopeScores> {
        self.post_json("/v1/metrics/pope", &outcomes).await
    }

    pub async fn demo(&self, req: &DemoRequest) -> Result<DemoReport> {
        self.post_json("/v1/demo", req).await
    }

    /// Binary trace produced by the demo's unintervened run.
    pub async fn demo_trace(&self, req: &DemoRequest) -> Result<Vec<u8>> {
        let response = self
            .http
            .post(format!("{}/v1/demo/trace", self.base))
            .json(req)
            .send()
            .await?;
        let status = response.status();
        if status.is_success() {
            return Ok(response.bytes().await?.to_vec());
        }
        Err(Self::api_error(status, response).await)
    }
}
