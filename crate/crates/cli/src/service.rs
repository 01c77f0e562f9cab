//! HTTP service: `POST /v1/crop`, `POST /v1/heatmap`, `GET /v1/health`.
//!
//! Handlers are stateless; each request runs its own search on a blocking
//! worker thread.

use std::net::SocketAddr;
use std::path::PathBuf;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use layoutcrop::heatmaps::{decode_heatmap_image, parse_heatmap_csv};
use layoutcrop::request::{
    run_crop, saliency_png, CropRequest, HeatmapSource, ImageSource, RequestError, RunOptions, MAX_HEATMAP_SIDE,
};
use serde::Deserialize;
use tower_http::services::ServeDir;

/// Largest accepted request body.
pub const UPLOAD_LIMIT: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub allow_paths: bool,
    pub static_dir: Option<PathBuf>,
    pub body_limit: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self { allow_paths: false, static_dir: None, body_limit: UPLOAD_LIMIT }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        let status = match e {
            RequestError::Infeasible(_) => StatusCode::UNPROCESSABLE_ENTITY,
            RequestError::BadRequest(_) | RequestError::Io(_) => StatusCode::BAD_REQUEST,
        };
        Self { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn rejection(r: impl IntoResponse) -> ApiError {
    let resp = r.into_response();
    let status = resp.status();
    let status = if status == StatusCode::PAYLOAD_TOO_LARGE { status } else { StatusCode::BAD_REQUEST };
    ApiError { status, message: status.canonical_reason().unwrap_or("bad request").to_lowercase() }
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = if e.status() == StatusCode::PAYLOAD_TOO_LARGE { e.status() } else { StatusCode::BAD_REQUEST };
    ApiError { status, message: e.body_text() }
}

fn is_multipart(req: &Request) -> bool {
    req.headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

fn heatmap_from_upload(bytes: &[u8]) -> Result<HeatmapSource, ApiError> {
    let heat = match decode_heatmap_image(bytes) {
        Ok(h) => h,
        Err(_) => {
            let text = std::str::from_utf8(bytes).map_err(|_| ApiError::bad("heatmap upload is not an image or csv"))?;
            parse_heatmap_csv(text).map_err(|e| ApiError::bad(e.to_string()))?
        }
    };
    let d = heat.dims();
    Ok(HeatmapSource::Grid { width: d.width, height: d.height, values: heat.values().to_vec() })
}

/// Multipart crop: a `request` JSON field plus optional `heatmap` or
/// `image` file fields.
async fn multipart_request(mut mp: Multipart) -> Result<CropRequest, ApiError> {
    let (mut request, mut heatmap, mut image) = (None, None, None);
    while let Some(field) = mp.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(multipart_error)?;
        match name.as_str() {
            "request" => {
                request = Some(
                    serde_json::from_slice::<CropRequest>(&data).map_err(|e| ApiError::bad(format!("request: {e}")))?,
                )
            }
            "heatmap" => heatmap = Some(heatmap_from_upload(&data)?),
            "image" => image = Some(ImageSource::Base64(BASE64.encode(&data))),
            other => return Err(ApiError::bad(format!("unexpected field {other:?}"))),
        }
    }
    let mut req = request.ok_or_else(|| ApiError::bad("missing request field"))?;
    if heatmap.is_some() {
        req.heatmap = heatmap;
    }
    if image.is_some() {
        req.image = image;
    }
    Ok(req)
}

async fn crop(State(config): State<AppConfig>, req: Request) -> Result<Response, ApiError> {
    let crop_req = if is_multipart(&req) {
        let mp = Multipart::from_request(req, &()).await.map_err(rejection)?;
        multipart_request(mp).await?
    } else {
        let body = Bytes::from_request(req, &()).await.map_err(rejection)?;
        serde_json::from_slice::<CropRequest>(&body).map_err(|e| ApiError::bad(format!("malformed request: {e}")))?
    };
    let opts = RunOptions { allow_paths: config.allow_paths };
    let resp = tokio::task::spawn_blocking(move || run_crop(&crop_req, opts))
        .await
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() })??;
    Ok(Json(resp).into_response())
}

#[derive(Debug, Deserialize)]
struct HeatmapQuery {
    max_side: Option<u32>,
}

/// Image bytes (raw body or an `image` multipart field) in, saliency PNG out.
async fn heatmap(Query(q): Query<HeatmapQuery>, req: Request) -> Result<Response, ApiError> {
    let bytes = if is_multipart(&req) {
        let mut mp = Multipart::from_request(req, &()).await.map_err(rejection)?;
        let mut found = None;
        while let Some(field) = mp.next_field().await.map_err(multipart_error)? {
            if field.name() == Some("image") {
                found = Some(field.bytes().await.map_err(multipart_error)?);
            }
        }
        found.ok_or_else(|| ApiError::bad("missing image field"))?
    } else {
        Bytes::from_request(req, &()).await.map_err(rejection)?
    };
    if bytes.is_empty() {
        return Err(ApiError::bad("empty image"));
    }
    let max_side = q.max_side.unwrap_or(MAX_HEATMAP_SIDE).clamp(1, MAX_HEATMAP_SIDE);
    let png = tokio::task::spawn_blocking(move || saliency_png(&bytes, max_side))
        .await
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() })??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(config: AppConfig) -> Router {
    let limit = config.body_limit;
    let static_dir = config.static_dir.clone();
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/crop", post(crop))
        .route("/v1/heatmap", post(heatmap))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(config);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: SocketAddr, config: AppConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
