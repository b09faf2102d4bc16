//! Person localisation: letterboxing, pluggable detector backends,
//! non-maximum suppression, margin crops and paste-back.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::imaging::ImageBuffer;
use crate::tensor::Interp;
use crate::{Error, Result};

pub const PERSON: &str = "person";

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn clamp_to(&self, h: usize, w: usize) -> BBox {
        let (w, h) = (w as f64, h as f64);
        BBox::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(rename = "class", default = "person_label")]
    pub class_label: String,
}

fn person_label() -> String {
    PERSON.to_string()
}

impl Detection {
    pub fn person(bbox: BBox, score: f64) -> Self {
        Self { bbox, score, class_label: person_label() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,
    /// `full-frame`, `fixed` or `command`.
    pub backend: String,
    /// Boxes for the `fixed` backend as fractions of the source image.
    pub boxes: Vec<[f64; 4]>,
    /// Program and arguments for the `command` backend.
    pub command: Vec<String>,
    pub crop_margin: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 640,
            confidence_threshold: 0.25,
            nms_iou_threshold: 0.45,
            max_detections: 10,
            backend: "full-frame".into(),
            boxes: Vec::new(),
            command: Vec::new(),
            crop_margin: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let ratio = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("detect.{name} = {v} outside [0,1]")));
            }
            Ok(())
        };
        ratio("confidence_threshold", self.confidence_threshold)?;
        ratio("nms_iou_threshold", self.nms_iou_threshold)?;
        if self.max_detections == 0 {
            return Err(Error::Config("detect.max_detections must be at least 1".into()));
        }
        if self.input_size < 32 {
            return Err(Error::Config("detect.input_size must be at least 32".into()));
        }
        if !(self.crop_margin >= 0.0 && self.crop_margin.is_finite()) {
            return Err(Error::Config("detect.crop_margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Aspect-preserving fit of a source image into a square model input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub size: usize,
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub source_h: usize,
    pub source_w: usize,
}

/// Pad value of the letterbox border.
pub const LETTERBOX_FILL: f32 = 114.0 / 255.0;

impl Letterbox {
    pub fn new(source_h: usize, source_w: usize, size: usize) -> Self {
        let scale = (size as f64 / source_w as f64).min(size as f64 / source_h as f64);
        let (nw, nh) = Self::scaled_dims(source_h, source_w, scale, size);
        Self {
            size,
            scale,
            pad_x: ((size - nw) / 2) as f64,
            pad_y: ((size - nh) / 2) as f64,
            source_h,
            source_w,
        }
    }

    fn scaled_dims(h: usize, w: usize, scale: f64, size: usize) -> (usize, usize) {
        let nw = ((w as f64 * scale).round() as usize).clamp(1, size);
        let nh = ((h as f64 * scale).round() as usize).clamp(1, size);
        (nw, nh)
    }

    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        let (nw, nh) = Self::scaled_dims(self.source_h, self.source_w, self.scale, self.size);
        let resized = img.resize(nh, nw, Interp::Bilinear);
        let mut out = ImageBuffer::filled(self.size, self.size, &vec![LETTERBOX_FILL; img.channels()]);
        let (px, py) = (self.pad_x as usize, self.pad_y as usize);
        for r in 0..nh {
            for c in 0..nw {
                out.set_pixel(r + py, c + px, resized.pixel(r, c));
            }
        }
        out
    }

    pub fn to_model(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x1 * self.scale + self.pad_x,
            b.y1 * self.scale + self.pad_y,
            b.x2 * self.scale + self.pad_x,
            b.y2 * self.scale + self.pad_y,
        )
    }

    pub fn to_source(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x1 - self.pad_x) / self.scale,
            (b.y1 - self.pad_y) / self.scale,
            (b.x2 - self.pad_x) / self.scale,
            (b.y2 - self.pad_y) / self.scale,
        )
    }
}

/// A person detector. Receives the letterboxed model input and returns
/// boxes in model-input coordinates.
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn infer(&self, input: &ImageBuffer, letterbox: &Letterbox) -> Result<Vec<Detection>>;
}

/// Reports the whole source image as one person with score 1. Suits inputs
/// that are already person-centred crops.
pub struct FullFrameBackend;

impl DetectorBackend for FullFrameBackend {
    fn name(&self) -> &str {
        "full-frame"
    }

    fn infer(&self, _input: &ImageBuffer, lb: &Letterbox) -> Result<Vec<Detection>> {
        let full = BBox::new(0.0, 0.0, lb.source_w as f64, lb.source_h as f64);
        Ok(vec![Detection::person(lb.to_model(&full), 1.0)])
    }
}

/// Returns preset boxes given as fractions of the source image.
pub struct FixedBackend {
    pub boxes: Vec<[f64; 4]>,
    pub score: f64,
}

impl DetectorBackend for FixedBackend {
    fn name(&self) -> &str {
        "fixed"
    }

    fn infer(&self, _input: &ImageBuffer, lb: &Letterbox) -> Result<Vec<Detection>> {
        let (w, h) = (lb.source_w as f64, lb.source_h as f64);
        Ok(self
            .boxes
            .iter()
            .map(|b| Detection::person(lb.to_model(&BBox::new(b[0] * w, b[1] * h, b[2] * w, b[3] * h)), self.score))
            .collect())
    }
}

/// Runs an external program: the model input goes to its stdin as PNG and
/// a JSON array of `{"box": [x1,y1,x2,y2], "score": s, "class": c}` in
/// model coordinates is read from its stdout.
pub struct CommandBackend {
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Deserialize)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    #[serde(rename = "class", default = "person_label")]
    class_label: String,
}

impl DetectorBackend for CommandBackend {
    fn name(&self) -> &str {
        "command"
    }

    fn infer(&self, input: &ImageBuffer, _lb: &Letterbox) -> Result<Vec<Detection>> {
        let png = input.encode_png()?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Config(format!("detector command `{}` unavailable: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&png));
        let out = child
            .wait_with_output()
            .map_err(|e| Error::Config(format!("detector command `{}` failed: {e}", self.program)))?;
        // A detector may exit without reading all input; only its status matters.
        let _ = writer.join();
        if !out.status.success() {
            return Err(Error::Config(format!(
                "detector command `{}` exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let raw: Vec<RawDetection> =
            serde_json::from_slice(&out.stdout).map_err(|e| Error::Parse(format!("detector output: {e}")))?;
        Ok(raw
            .into_iter()
            .map(|d| Detection {
                bbox: BBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]),
                score: d.score,
                class_label: d.class_label,
            })
            .collect())
    }
}

pub fn build_backend(cfg: &DetectorConfig) -> Result<Box<dyn DetectorBackend>> {
    match cfg.backend.as_str() {
        "full-frame" => Ok(Box::new(FullFrameBackend)),
        "fixed" => {
            if cfg.boxes.is_empty() {
                return Err(Error::Config("detect.backend `fixed` needs detect.boxes".into()));
            }
            Ok(Box::new(FixedBackend { boxes: cfg.boxes.clone(), score: 1.0 }))
        }
        "command" => {
            let (program, args) =
                cfg.command.split_first().ok_or_else(|| Error::Config("detect.backend `command` needs detect.command".into()))?;
            Ok(Box::new(CommandBackend { program: program.clone(), args: args.to_vec() }))
        }
        other => Err(Error::Config(format!("detector backend `{other}` is not available"))),
    }
}

/// Greedy suppression in descending score order: a box is kept iff it
/// overlaps no already kept box by more than `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

pub fn detect_persons(img: &ImageBuffer, cfg: &DetectorConfig, backend: &dyn DetectorBackend) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let lb = Letterbox::new(img.height(), img.width(), cfg.input_size);
    let input = lb.apply(img);
    let raw = backend.infer(&input, &lb)?;
    let candidates: Vec<Detection> = raw
        .into_iter()
        .filter(|d| d.class_label == PERSON && d.score >= cfg.confidence_threshold && d.score <= 1.0)
        .map(|d| Detection { bbox: lb.to_source(&d.bbox).clamp_to(img.height(), img.width()), ..d })
        .filter(|d| d.bbox.is_valid())
        .collect();
    let mut kept = nms(&candidates, cfg.nms_iou_threshold);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.y0..self.y1).contains(&r) && (self.x0..self.x1).contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropRegion {
    pub source_box: PixelRect,
    pub crop: ImageBuffer,
    pub source_size: (usize, usize),
}

/// Expands the box by `margin` times its side on each edge, snaps outward
/// to whole pixels and clamps to the image.
pub fn crop_box(bbox: &BBox, margin: f64, h: usize, w: usize) -> PixelRect {
    let (mx, my) = (margin * bbox.width(), margin * bbox.height());
    let snap_lo = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n.saturating_sub(1));
    let snap_hi = |v: f64, n: usize| (v.ceil().max(0.0) as usize).min(n);
    let x0 = snap_lo(bbox.x1 - mx, w);
    let y0 = snap_lo(bbox.y1 - my, h);
    PixelRect { x0, y0, x1: snap_hi(bbox.x2 + mx, w).max(x0 + 1), y1: snap_hi(bbox.y2 + my, h).max(y0 + 1) }
}

pub fn crop_person(img: &ImageBuffer, det: &Detection, margin: f64) -> CropRegion {
    let rect = crop_box(&det.bbox, margin, img.height(), img.width());
    CropRegion {
        source_box: rect,
        crop: img.crop(rect.x0, rect.y0, rect.width(), rect.height()),
        source_size: (img.height(), img.width()),
    }
}

pub fn paste_back(canvas: &ImageBuffer, region: &CropRegion, patch: &ImageBuffer) -> Result<ImageBuffer> {
    let r = region.source_box;
    if patch.height() != r.height() || patch.width() != r.width() || patch.channels() != canvas.channels() {
        return Err(Error::Shape(format!(
            "patch {}x{}x{} does not fit region {}x{}x{}",
            patch.height(),
            patch.width(),
            patch.channels(),
            r.height(),
            r.width(),
            canvas.channels()
        )));
    }
    if r.y1 > canvas.height() || r.x1 > canvas.width() {
        return Err(Error::Shape("region lies outside the canvas".into()));
    }
    let mut out = canvas.clone();
    for row in 0..r.height() {
        for col in 0..r.width() {
            out.set_pixel(r.y0 + row, r.x0 + col, patch.pixel(row, col));
        }
    }
    Ok(out)
}
