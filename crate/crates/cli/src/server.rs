//! HTTP front end over a loaded try-on pipeline.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::Semaphore;
use vton_core::imaging::ImageBuffer;
use vton_core::pipeline::{TryOnOptions, TryOnPipeline, TryOnResult, BUNDLE_VERSION};
use vton_core::{Error, Result};

use crate::config::ServeConfig;

/// Fixed so that identical requests produce identical bytes.
pub const MULTIPART_BOUNDARY: &str = "vton-part-boundary";

/// Largest accepted upload side, in pixels.
pub const MAX_IMAGE_SIDE: usize = 4096;

pub struct AppState {
    pipeline: Option<Arc<TryOnPipeline>>,
    previews: BTreeMap<String, Bytes>,
    permits: Arc<Semaphore>,
}

impl AppState {
    /// Renders every garment preview up front.
    pub fn new(pipeline: Option<TryOnPipeline>, workers: usize) -> Result<Self> {
        let mut previews = BTreeMap::new();
        if let Some(p) = &pipeline {
            for (id, g) in &p.bundle.garments {
                previews.insert(id.clone(), Bytes::from(g.preview()?.encode_png()?));
            }
        }
        Ok(Self { pipeline: pipeline.map(Arc::new), previews, permits: Arc::new(Semaphore::new(workers.max(1))) })
    }
}

fn error(status: StatusCode, msg: &str) -> Response {
    (status, Json(json!({ "error": msg }))).into_response()
}

fn unavailable() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no model bundle loaded")
}

fn png(bytes: Bytes) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

pub fn router(state: AppState, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/garments", get(garments))
        .route("/garments/{id}/preview", get(preview))
        .route("/tryon", post(tryon))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(Arc::new(state))
}

async fn health(State(st): State<Arc<AppState>>) -> Response {
    match &st.pipeline {
        Some(_) => Json(json!({ "status": "ok", "bundle_version": BUNDLE_VERSION })).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "unavailable", "bundle_version": null })))
            .into_response(),
    }
}

async fn garments(State(st): State<Arc<AppState>>) -> Response {
    if st.pipeline.is_none() {
        return unavailable();
    }
    let list: Vec<_> = st
        .previews
        .keys()
        .map(|id| json!({ "id": id, "preview_url": format!("/garments/{id}/preview") }))
        .collect();
    Json(list).into_response()
}

async fn preview(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    if st.pipeline.is_none() {
        return unavailable();
    }
    match st.previews.get(&id) {
        Some(b) => png(b.clone()),
        None => error(StatusCode::NOT_FOUND, "unknown garment"),
    }
}

struct TryOnRequest {
    image: Option<Bytes>,
    garment_id: Option<String>,
    options: TryOnOptions,
}

async fn read_request(mut mp: Multipart) -> std::result::Result<TryOnRequest, Response> {
    let bad = |m: String| error(StatusCode::BAD_REQUEST, &m);
    let mut req = TryOnRequest { image: None, garment_id: None, options: TryOnOptions::default() };
    while let Some(field) = mp.next_field().await.map_err(|e| bad(format!("malformed multipart body: {e}")))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| bad(format!("reading field {name}: {e}")))?;
        match name.as_str() {
            "image" => req.image = Some(data),
            "garment_id" => {
                req.garment_id =
                    Some(String::from_utf8(data.to_vec()).map_err(|_| bad("garment_id is not UTF-8".into()))?.trim().to_string())
            }
            "options" => {
                req.options = serde_json::from_slice(&data).map_err(|e| bad(format!("invalid options: {e}")))?;
                req.options.validate().map_err(|e| bad(e.to_string()))?;
            }
            _ => {}
        }
    }
    Ok(req)
}

async fn tryon(State(st): State<Arc<AppState>>, mp: Multipart) -> Response {
    let Some(pipe) = st.pipeline.clone() else {
        return unavailable();
    };
    let req = match read_request(mp).await {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let Some(garment_id) = req.garment_id else {
        return error(StatusCode::BAD_REQUEST, "missing field garment_id");
    };
    let Some(bytes) = req.image else {
        return error(StatusCode::BAD_REQUEST, "missing field image");
    };
    if !st.previews.contains_key(&garment_id) {
        return error(StatusCode::NOT_FOUND, "unknown garment");
    }
    let Ok(permit) = st.permits.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "server shutting down");
    };
    let opts = req.options;
    let joined = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let img = ImageBuffer::decode(&bytes).map_err(|e| (StatusCode::BAD_REQUEST, format!("undecodable image: {e}")))?;
        if img.height() > MAX_IMAGE_SIDE || img.width() > MAX_IMAGE_SIDE {
            return Err((StatusCode::BAD_REQUEST, format!("image larger than {MAX_IMAGE_SIDE} px per side")));
        }
        let res = pipe.tryon(&img, &garment_id, &opts).map_err(|e| (status_for(&e), message_for(&e)))?;
        encode_result(&res, opts.return_intermediates).map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    })
    .await;
    match joined {
        Ok(Ok(resp)) => resp,
        Ok(Err((status, msg))) => error(status, &msg),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "inference task failed"),
    }
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::NoPerson => StatusCode::UNPROCESSABLE_ENTITY,
        Error::UnknownGarment(_) => StatusCode::NOT_FOUND,
        Error::Validation(_) | Error::Image(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn message_for(e: &Error) -> String {
    match e {
        Error::NoPerson => "no person detected".into(),
        Error::UnknownGarment(_) => "unknown garment".into(),
        other => other.to_string(),
    }
}

fn push_part(body: &mut Vec<u8>, content_type: &str, name: &str, payload: &[u8]) {
    body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}\r\n").as_bytes());
    body.extend_from_slice(format!("Content-Type: {content_type}\r\n").as_bytes());
    body.extend_from_slice(format!("Content-Disposition: attachment; name=\"{name}\"\r\n\r\n").as_bytes());
    body.extend_from_slice(payload);
    body.extend_from_slice(b"\r\n");
}

fn encode_result(res: &TryOnResult, intermediates: bool) -> Result<Response> {
    let out = res.output.encode_png()?;
    if !intermediates {
        return Ok(png(Bytes::from(out)));
    }
    let mut body = Vec::new();
    push_part(&mut body, "image/png", "result", &out);
    let persons: Vec<_> = res
        .persons
        .iter()
        .map(|p| json!({ "detection": p.detection, "crop": p.crop_region.source_box }))
        .collect();
    push_part(&mut body, "application/json", "persons", serde_json::to_string(&persons)?.as_bytes());
    for (i, p) in res.persons.iter().enumerate() {
        push_part(&mut body, "image/png", &format!("person{i}_mask"), &p.mask.to_image().encode_png()?);
        push_part(&mut body, "image/png", &format!("person{i}_cloth"), &p.generated_cloth.encode_png()?);
    }
    body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}--\r\n").as_bytes());
    let ct = format!("multipart/mixed; boundary={MULTIPART_BOUNDARY}");
    Ok(([(header::CONTENT_TYPE, ct)], body).into_response())
}

pub async fn serve(cfg: &ServeConfig, state: AppState) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| Error::Config(format!("bad listen address {}:{}: {e}", cfg.host, cfg.port)))?;
    let io = |e| Error::Io { path: PathBuf::from(addr.to_string()), source: e };
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
    eprintln!("listening on http://{}", listener.local_addr().map_err(io)?);
    axum::serve(listener, router(state, cfg.max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io)
}
