//! Axum service exposing the analysis and intervention operations over
//! HTTP/JSON. Traces travel as binary `PADT` bodies
//! (`application/octet-stream`), options as query parameters, everything
//! else as JSON.
//!
//! Endpoints (all under `/v1`):
//!
//! ```text
//! GET  /v1/health                      liveness + version
//! POST /v1/analyze?step&tau&min_layers trace body -> ratios/sinks/pad/static/attention
//! POST /v1/pad?step&normalize          trace body -> dynamics map
//! POST /v1/intervene?lambda&layer&mad&stc&step&pad_layers
//!                                      trace body -> per-head base/intervened rows
//! POST /v1/simulate                    {config?, seeds, k?} -> recovery aggregate
//! POST /v1/metrics/chair               [{mentioned, ground_truth}] -> rates
//! POST /v1/metrics/pope                [{pred, label}] -> scores
//! POST /v1/demo                        {seed?, steps?, lambda?} -> end-to-end report
//! POST /v1/demo/trace                  {seed?, steps?, lambda?} -> binary trace
//! ```
//!
//! Errors come back as `{"error": {"kind", "message"}}` with status 400
//! for data/validation problems and 500 otherwise.

use axum::body::Bytes;
use axum::extract::Query;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use pade_core::api::{
    analyze_trace, chair_report, demo_trace, intervene_trace, pad_for_trace, pope_report,
    run_demo, run_simulate, AnalyzeOptions, AnalyzeReport, ChairReport, DemoReport, DemoRequest,
    ErrorBody, HealthResponse, InterveneOptions, InterveneReport, PadOptions, SimulateRequest,
};
use pade_core::metrics::{BinaryOutcome, CaptionRecord, PopeScores};
use pade_core::pad::PadMap;
use pade_core::synth::RecoveryAggregate;
use pade_core::traceio::{trace_from_bytes, trace_to_bytes};

/// Core error carried into an HTTP response.
pub struct ApiError(pade_core::Error);

impl From<pade_core::Error> for ApiError {
    fn from(err: pade_core::Error) -> Self {
        Self(err)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = if self.0.is_data_error() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        (status, Json(ErrorBody::from_error(&self.0))).into_response()
    }
}

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

async fn analyze(
    Query(opts): Query<AnalyzeOptions>,
    body: Bytes,
) -> Result<Json<AnalyzeReport>, ApiError> {
    let trace = trace_from_bytes(&body)?;
    Ok(Json(analyze_trace(&trace, &opts)?))
}

async fn pad(Query(opts): Query<PadOptions>, body: Bytes) -> Result<Json<PadMap>, ApiError> {
    let trace = trace_from_bytes(&body)?;
    Ok(Json(pad_for_trace(&trace, &opts)?))
}

async fn intervene(
    Query(opts): Query<InterveneOptions>,
    body: Bytes,
) -> Result<Json<InterveneReport>, ApiError> {
    let trace = trace_from_bytes(&body)?;
    Ok(Json(intervene_trace(&trace, &opts)?))
}

async fn simulate(
    Json(req): Json<SimulateRequest>,
) -> Result<Json<RecoveryAggregate>, ApiError> {
    Ok(Json(run_simulate(&req)?))
}

async fn metrics_chair(
    Json(records): Json<Vec<CaptionRecord>>,
) -> Result<Json<ChairReport>, ApiError> {
    Ok(Json(chair_report(&records)?))
}

async fn metrics_pope(
    Json(outcomes): Json<Vec<BinaryOutcome>>,
) -> Result<Json<PopeScores>, ApiError> {
    Ok(Json(pope_report(&outcomes)?))
}

async fn demo(Json(req): Json<DemoRequest>) -> Result<Json<DemoReport>, ApiError> {
    Ok(Json(run_demo(&req)?))
}

async fn demo_trace_bytes(Json(req): Json<DemoRequest>) -> Result<Response, ApiError> {
    let trace = demo_trace(&req)?;
    Ok((
        [(header::CONTENT_TYPE, "application/octet-stream")],
        trace_to_bytes(&trace),
    )
        .into_response())
}

/// The service router.
pub fn app() -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/analyze", post(analyze))
        .route("/v1/pad", post(pad))
        .route("/v1/intervene", post(intervene))
        .route("/v1/simulate", post(simulate))
        .route("/v1/metrics/chair", post(metrics_chair))
        .route("/v1/metrics/pope", post(metrics_pope))
        .route("/v1/demo", post(demo))
        .route("/v1/demo/trace", post(demo_trace_bytes))
}

/// Serve on an already-bound listener until the task is dropped.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app()).await
}

/// Bind an ephemeral localhost port and serve in a background task;
/// returns the base URL. Used by the CLI when no `--server` is given and
/// by tests.
pub async fn spawn_ephemeral() -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(err) = axum::serve(listener, app()).await {
            tracing::error!("ephemeral server exited: {err}");
        }
    });
    Ok(format!("http://{addr}"))
}
