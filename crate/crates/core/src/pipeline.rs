//! Detect, segment, translate and composite, for every person in an image.
//! Trained models travel together as a bundle directory:
//!
//! ```text
//! bundle/manifest.json      {version, garments: [{id, checkpoint}], segmentation, detector}
//! bundle/segmentation.ckpt
//! bundle/garments/<id>.ckpt
//! ```
//!
//! The generated cloth is registered onto a crop by resizing it to the crop
//! box; no further alignment is attempted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur_plane;
use crate::checkpoint::Checkpoint;
use crate::detect::{self, build_backend, crop_person, paste_back, CropRegion, Detection, DetectorBackend, DetectorConfig};
use crate::imaging::{BinaryMask, ImageBuffer};
use crate::segnet::{self, binarize, ProbMap, SegModel};
use crate::tensor::Interp;
use crate::transnet::{self, mask_to_s3, GanModel};
use crate::{Error, Result};

pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_MANIFEST: &str = "manifest.json";
pub const SEGMENTATION_FILE: &str = "segmentation.ckpt";
pub const DEFAULT_FEATHER: f64 = 2.0;

/// Inter-stage resizing: bilinear for imagery, nearest for masks.
pub mod geometry {
    use super::*;

    pub fn resize_image(img: &ImageBuffer, h: usize, w: usize) -> ImageBuffer {
        img.resize(h, w, Interp::Bilinear)
    }

    pub fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
        mask.resize(h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoPersonPolicy {
    #[default]
    Error,
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Bundle directory; the `--bundle` flag takes precedence.
    pub bundle: Option<PathBuf>,
    /// Overrides the threshold stored with the segmentation checkpoint.
    pub threshold: Option<f64>,
    pub feather: f64,
    pub no_person: NoPersonPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { bundle: None, threshold: None, feather: DEFAULT_FEATHER, no_person: NoPersonPolicy::Error }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        check_feather(self.feather)
    }
}

fn check_threshold(t: Option<f64>) -> Result<()> {
    match t {
        Some(v) if !(0.0..=1.0).contains(&v) => Err(Error::Validation(format!("threshold {v} outside [0,1]"))),
        _ => Ok(()),
    }
}

fn check_feather(f: f64) -> Result<()> {
    if !(f >= 0.0 && f.is_finite()) {
        return Err(Error::Validation(format!("feather {f} must be a non-negative number")));
    }
    Ok(())
}

/// Per-request overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TryOnOptions {
    pub threshold: Option<f64>,
    pub feather: Option<f64>,
    pub return_intermediates: bool,
}

impl TryOnOptions {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        check_feather(self.feather.unwrap_or(0.0))
    }
}

/// Blend weights: the mask blurred with a Gaussian of support `feather`
/// pixels (sigma = feather / 3). Zero feather keeps the hard mask.
pub fn feather_alpha(mask: &BinaryMask, feather: f64) -> Vec<f32> {
    let hard: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    if feather <= 0.0 {
        return hard.into_iter().map(|v| v as f32).collect();
    }
    gaussian_blur_plane(&hard, mask.height(), mask.width(), feather / 3.0).into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

/// `alpha * cloth + (1 - alpha) * base` per pixel.
pub fn overlay(base: &ImageBuffer, cloth: &ImageBuffer, mask: &BinaryMask, feather: f64) -> Result<ImageBuffer> {
    check_feather(feather)?;
    if !base.same_size(cloth) || base.channels() != cloth.channels() || mask.height() != base.height() || mask.width() != base.width() {
        return Err(Error::Shape(format!(
            "overlay inputs misaligned: base {}x{}x{}, cloth {}x{}x{}, mask {}x{}",
            base.height(),
            base.width(),
            base.channels(),
            cloth.height(),
            cloth.width(),
            cloth.channels(),
            mask.height(),
            mask.width()
        )));
    }
    let alpha = feather_alpha(mask, feather);
    let c = base.channels();
    let data = base
        .data()
        .iter()
        .zip(cloth.data())
        .enumerate()
        .map(|(i, (&b, &f))| {
            let a = alpha[i / c];
            a * f + (1.0 - a) * b
        })
        .collect();
    ImageBuffer::new(base.height(), base.width(), c, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentEntry {
    pub id: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub garments: Vec<GarmentEntry>,
    pub segmentation: String,
    /// Detector backend id.
    pub detector: String,
}

impl Default for BundleManifest {
    fn default() -> Self {
        Self { version: BUNDLE_VERSION, garments: Vec::new(), segmentation: SEGMENTATION_FILE.into(), detector: "full-frame".into() }
    }
}

impl BundleManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: BundleManifest = serde_json::from_str(&text)?;
        if m.version != BUNDLE_VERSION {
            return Err(Error::Validation(format!(
                "{}: bundle version {} is not supported (expected {BUNDLE_VERSION})",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(BUNDLE_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn valid_garment_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn load_or_new_manifest(dir: &Path) -> Result<BundleManifest> {
    if dir.join(BUNDLE_MANIFEST).exists() {
        BundleManifest::load(dir)
    } else {
        Ok(BundleManifest::default())
    }
}

/// Writes the segmentation checkpoint into a bundle, creating it if needed.
pub fn register_segmentation(dir: &Path, ck: &Checkpoint) -> Result<BundleManifest> {
    if ck.kind != segnet::CHECKPOINT_KIND {
        return Err(Error::Validation(format!("expected a segmentation checkpoint, got `{}`", ck.kind)));
    }
    let m = load_or_new_manifest(dir)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ck.save(&dir.join(&m.segmentation))?;
    m.save(dir)?;
    Ok(m)
}

/// Adds or replaces one garment's translation checkpoint.
pub fn register_garment(dir: &Path, id: &str, ck: &Checkpoint) -> Result<BundleManifest> {
    if !valid_garment_id(id) {
        return Err(Error::Validation(format!("invalid garment id `{id}`")));
    }
    if ck.kind != transnet::CHECKPOINT_KIND {
        return Err(Error::Validation(format!("expected a translation checkpoint, got `{}`", ck.kind)));
    }
    let mut m = load_or_new_manifest(dir)?;
    let rel = format!("garments/{id}.ckpt");
    let path = dir.join(&rel);
    std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(dir, e))?;
    ck.save(&path)?;
    m.garments.retain(|g| g.id != id);
    m.garments.push(GarmentEntry { id: id.into(), checkpoint: rel });
    m.garments.sort_by(|a, b| a.id.cmp(&b.id));
    m.save(dir)?;
    Ok(m)
}

pub fn set_bundle_detector(dir: &Path, backend: &str) -> Result<BundleManifest> {
    let mut m = load_or_new_manifest(dir)?;
    m.detector = backend.into();
    m.save(dir)?;
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct Garment {
    pub id: String,
    pub model: GanModel,
}

/// Fixed torso-like mask used to render garment previews.
pub fn preview_mask(size: usize) -> BinaryMask {
    let s = size as f64;
    BinaryMask::from_fn(size, size, |r, c| {
        let (y, x) = ((r as f64 + 0.5) / s, (c as f64 + 0.5) / s);
        let half = 0.22 + 0.08 * ((y - 0.2) / 0.65).clamp(0.0, 1.0);
        (0.2..0.85).contains(&y) && (x - 0.5).abs() < half
    })
}

impl Garment {
    /// The garment generated on [`preview_mask`].
    pub fn preview(&self) -> Result<ImageBuffer> {
        self.model.generate(&preview_mask(self.model.image_size))
    }
}

/// Immutable models loaded from a bundle directory.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub root: PathBuf,
    pub manifest: BundleManifest,
    pub segmentation: SegModel,
    pub garments: BTreeMap<String, Garment>,
}

impl Bundle {
    pub fn garment(&self, id: &str) -> Result<&Garment> {
        self.garments.get(id).ok_or_else(|| Error::UnknownGarment(id.to_string()))
    }

    pub fn garment_ids(&self) -> Vec<String> {
        self.garments.keys().cloned().collect()
    }
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let manifest = BundleManifest::load(dir)?;
    let seg_path = dir.join(&manifest.segmentation);
    if !seg_path.is_file() {
        return Err(Error::checkpoint(&seg_path, "segmentation checkpoint is missing"));
    }
    let segmentation = SegModel::load(&seg_path)?;
    let mut garments = BTreeMap::new();
    for g in &manifest.garments {
        if !valid_garment_id(&g.id) {
            return Err(Error::Validation(format!("invalid garment id `{}` in bundle", g.id)));
        }
        let path = dir.join(&g.checkpoint);
        if !path.is_file() {
            return Err(Error::checkpoint(&path, format!("checkpoint for garment `{}` is missing", g.id)));
        }
        let model = GanModel::load(&path)?;
        if garments.insert(g.id.clone(), Garment { id: g.id.clone(), model }).is_some() {
            return Err(Error::Validation(format!("garment `{}` listed twice", g.id)));
        }
    }
    Ok(Bundle { root: dir.to_path_buf(), manifest, segmentation, garments })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub detect: Duration,
    pub segment: Duration,
    pub translate: Duration,
    pub composite: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub detection: Detection,
    pub crop_region: CropRegion,
    /// Crop-sized mask that was composited.
    pub mask: BinaryMask,
    /// Crop-sized generated cloth.
    pub generated_cloth: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TryOnResult {
    pub output: ImageBuffer,
    pub persons: Vec<PersonRecord>,
    pub timings: StageTimings,
}

/// Runs the pipeline with explicit models. Persons are handled in
/// descending score order; each is segmented on the untouched input and
/// composited onto the running output.
pub fn tryon_with(
    img: &ImageBuffer,
    seg: &SegModel,
    garment: &GanModel,
    detector: &dyn DetectorBackend,
    detect_cfg: &DetectorConfig,
    cfg: &PipelineConfig,
    opts: &TryOnOptions,
) -> Result<TryOnResult> {
    cfg.validate()?;
    opts.validate()?;
    let threshold = opts.threshold.or(cfg.threshold).unwrap_or(seg.threshold);
    let feather = opts.feather.unwrap_or(cfg.feather);
    let input = img.to_rgb();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let dets = detect::detect_persons(&input, detect_cfg, detector)?;
    timings.detect = t.elapsed();
    if dets.is_empty() {
        return match cfg.no_person {
            NoPersonPolicy::Error => Err(Error::NoPerson),
            NoPersonPolicy::PassThrough => Ok(TryOnResult { output: input, persons: Vec::new(), timings }),
        };
    }

    let seg_size = seg.net.spec.input_size;
    let gan_size = garment.image_size;
    let mut output = input.clone();
    let mut persons = Vec::with_capacity(dets.len());
    for det in dets {
        let region = crop_person(&input, &det, detect_cfg.crop_margin);
        let (ch, cw) = (region.crop.height(), region.crop.width());

        let t = Instant::now();
        let small = geometry::resize_image(&region.crop, seg_size, seg_size);
        let (fused, _) = seg.forward_tensor(&small.to_tensor())?;
        let seg_mask = binarize(&ProbMap::from_tensor(&fused, 0), threshold);
        timings.segment += t.elapsed();

        let t = Instant::now();
        let gan_mask = geometry::resize_mask(&seg_mask, gan_size, gan_size);
        let cloth = ImageBuffer::from_tensor(&garment.generate_tensor(&mask_to_s3(&gan_mask))?, 0)?;
        let cloth = geometry::resize_image(&cloth, ch, cw);
        let mask = geometry::resize_mask(&gan_mask, ch, cw);
        timings.translate += t.elapsed();

        let t = Instant::now();
        let base = output.crop(region.source_box.x0, region.source_box.y0, cw, ch);
        let composed = overlay(&base, &cloth, &mask, feather)?;
        output = paste_back(&output, &region, &composed)?;
        timings.composite += t.elapsed();

        persons.push(PersonRecord { detection: det, crop_region: region, mask, generated_cloth: cloth });
    }
    Ok(TryOnResult { output, persons, timings })
}

/// A loaded bundle plus its detector; safe to share across threads.
pub struct TryOnPipeline {
    pub bundle: Arc<Bundle>,
    pub detect: DetectorConfig,
    pub cfg: PipelineConfig,
    detector: Box<dyn DetectorBackend>,
}

impl TryOnPipeline {
    /// The bundle's detector id selects the backend; the remaining detector
    /// settings come from `detect`.
    pub fn new(bundle: Arc<Bundle>, detect: DetectorConfig, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let detect = DetectorConfig { backend: bundle.manifest.detector.clone(), ..detect };
        detect.validate()?;
        let detector = build_backend(&detect)?;
        Ok(Self { bundle, detect, cfg, detector })
    }

    pub fn tryon(&self, img: &ImageBuffer, garment_id: &str, opts: &TryOnOptions) -> Result<TryOnResult> {
        let garment = self.bundle.garment(garment_id)?;
        tryon_with(img, &self.bundle.segmentation, &garment.model, self.detector.as_ref(), &self.detect, &self.cfg, opts)
    }
}
