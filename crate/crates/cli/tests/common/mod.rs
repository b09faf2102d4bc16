#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, Response};
use http_body_util::BodyExt;
use tower::ServiceExt;
use vton_cli::server::{router, AppState};
use vton_core::detect::DetectorConfig;
use vton_core::imaging::ImageBuffer;
use vton_core::pipeline::{self, load_bundle, PipelineConfig, TryOnPipeline};
use vton_core::segnet::{SegModel, U2NetSpec};
use vton_core::transnet::{GanModel, GeneratorSpec};

pub const BOUNDARY: &str = "test-boundary-7f3a";

/// Untrained but deterministic models: segmentation plus garments `g1` and `g2`.
pub fn stub_bundle(dir: &Path, detector: &str) {
    let seg = SegModel::new(U2NetSpec::scaled(8, 64), 1).unwrap();
    pipeline::register_segmentation(dir, &seg.checkpoint(0)).unwrap();
    for (i, id) in ["g1", "g2"].iter().enumerate() {
        pipeline::register_garment(dir, id, &stub_garment(i as u64)).unwrap();
    }
    pipeline::set_bundle_detector(dir, detector).unwrap();
}

pub fn stub_garment(seed: u64) -> vton_core::checkpoint::Checkpoint {
    let spec = GeneratorSpec { base_channels: 2, global_downsamples: 2, residual_blocks: 1, ..Default::default() };
    GanModel::new(spec, 16, seed).unwrap().checkpoint(0)
}

pub fn stub_pipeline(dir: &Path, detect: DetectorConfig) -> TryOnPipeline {
    TryOnPipeline::new(Arc::new(load_bundle(dir).unwrap()), detect, PipelineConfig::default()).unwrap()
}

pub fn app(pipe: Option<TryOnPipeline>, workers: usize) -> axum::Router {
    router(AppState::new(pipe, workers).unwrap(), 32 << 20)
}

pub fn person_png(h: usize, w: usize) -> Vec<u8> {
    ImageBuffer::from_fn(h, w, 3, |r, c, ch| ((r * 7 + c * 3 + ch * 11) % 17) as f32 / 16.0).encode_png().unwrap()
}

pub fn multipart(fields: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, data) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"").as_bytes());
        if *name == "image" {
            body.extend_from_slice(b"; filename=\"in.png\"\r\nContent-Type: application/octet-stream");
        }
        body.extend_from_slice(b"\r\n\r\n");
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn tryon_request(fields: &[(&str, &[u8])]) -> Request<Body> {
    Request::post("/tryon")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(fields)))
        .unwrap()
}

pub async fn send(app: &axum::Router, req: Request<Body>) -> (u16, String, Vec<u8>) {
    let resp: Response<Body> = app.clone().oneshot(req).await.unwrap();
    let status = resp.status().as_u16();
    let ct = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ct, body)
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

/// Detector settings whose only box is degenerate, so nothing is found.
pub fn no_person_detect() -> DetectorConfig {
    DetectorConfig { boxes: vec![[0.5, 0.5, 0.5, 0.5]], ..Default::default() }
}
