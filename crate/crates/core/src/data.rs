//! Paired image/mask datasets: polygon annotations, mask rasterization,
//! train/val manifests and a deterministic synthetic scene generator.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{BinaryMask, ImageBuffer};
use crate::{Error, Result};

/// Default label of the garment-target body region.
pub const DEFAULT_LABEL: &str = "upper_body";

/// File name of a dataset manifest inside its root directory.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub label: String,
    /// Vertices as (x, y) in pixels, in document order.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonAnnotation {
    pub image_path: String,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub shapes: Vec<Polygon>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationDoc {
    #[serde(rename = "imagePath")]
    image_path: String,
    #[serde(rename = "imageHeight")]
    image_height: i64,
    #[serde(rename = "imageWidth")]
    image_width: i64,
    shapes: Vec<ShapeDoc>,
}

#[derive(Serialize, Deserialize)]
struct ShapeDoc {
    label: String,
    points: Vec<[f64; 2]>,
    #[serde(default = "polygon_type")]
    shape_type: String,
}

fn polygon_type() -> String {
    "polygon".to_string()
}

/// Parses a labeling-tool annotation document and validates its geometry.
pub fn parse_annotation(text: &str) -> Result<PolygonAnnotation> {
    let doc: AnnotationDoc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if doc.image_height <= 0 || doc.image_width <= 0 {
        return Err(Error::Validation(format!(
            "image size must be positive, got {}x{}",
            doc.image_height, doc.image_width
        )));
    }
    let (h, w) = (doc.image_height as f64, doc.image_width as f64);
    let mut shapes = Vec::with_capacity(doc.shapes.len());
    for (i, s) in doc.shapes.into_iter().enumerate() {
        if s.shape_type != "polygon" {
            return Err(Error::Validation(format!("shape {i} has unsupported type `{}`", s.shape_type)));
        }
        if s.points.len() < 3 {
            return Err(Error::Validation(format!(
                "shape {i} (`{}`) has {} vertices, need at least 3",
                s.label,
                s.points.len()
            )));
        }
        for &[x, y] in &s.points {
            if !(x.is_finite() && y.is_finite()) || x < 0.0 || x > w || y < 0.0 || y > h {
                return Err(Error::Validation(format!(
                    "shape {i} (`{}`) vertex ({x}, {y}) lies outside the {w}x{h} image",
                    s.label
                )));
            }
        }
        shapes.push(Polygon { label: s.label, points: s.points.iter().map(|&[x, y]| (x, y)).collect() });
    }
    Ok(PolygonAnnotation {
        image_path: doc.image_path,
        image_size: (doc.image_height as usize, doc.image_width as usize),
        shapes,
    })
}

impl PolygonAnnotation {
    pub fn to_json(&self) -> String {
        let doc = AnnotationDoc {
            image_path: self.image_path.clone(),
            image_height: self.image_size.0 as i64,
            image_width: self.image_size.1 as i64,
            shapes: self
                .shapes
                .iter()
                .map(|s| ShapeDoc {
                    label: s.label.clone(),
                    points: s.points.iter().map(|&(x, y)| [x, y]).collect(),
                    shape_type: polygon_type(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("annotation serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_annotation(&text)
    }
}

/// Rasterizes the union of all polygons carrying `label`. A pixel is set
/// iff its centre `(c + 0.5, r + 0.5)` lies inside at least one of them
/// (non-zero winding per polygon).
pub fn rasterize_mask(annotation: &PolygonAnnotation, label: &str) -> BinaryMask {
    let (h, w) = annotation.image_size;
    let mut mask = BinaryMask::zeros(h, w);
    let mut crossings: Vec<(f64, i32)> = Vec::new();
    for poly in annotation.shapes.iter().filter(|s| s.label == label) {
        let pts = &poly.points;
        for r in 0..h {
            let y = r as f64 + 0.5;
            crossings.clear();
            for i in 0..pts.len() {
                let (x1, y1) = pts[i];
                let (x2, y2) = pts[(i + 1) % pts.len()];
                if (y1 > y) != (y2 > y) {
                    let x = x1 + (y - y1) * (x2 - x1) / (y2 - y1);
                    crossings.push((x, if y2 > y1 { 1 } else { -1 }));
                }
            }
            if crossings.is_empty() {
                continue;
            }
            crossings.sort_by(|a, b| a.0.total_cmp(&b.0));
            // Winding number of a point = sum of directions of crossings to
            // its right; sweep pixels left to right.
            let mut right_sum: i32 = crossings.iter().map(|c| c.1).sum();
            let mut k = 0;
            for c in 0..w {
                let x = c as f64 + 0.5;
                while k < crossings.len() && crossings[k].0 <= x {
                    right_sum -= crossings[k].1;
                    k += 1;
                }
                if right_sum != 0 {
                    mask.set(r, c, true);
                }
            }
        }
    }
    mask
}

/// Image plus garment-region mask with identical spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub image: ImageBuffer,
    pub mask: BinaryMask,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, image: ImageBuffer, mask: BinaryMask) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Shape(format!(
                "image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        if image.channels() != 3 {
            return Err(Error::Validation("paired samples carry 3-channel images".into()));
        }
        Ok(Self { id: id.into(), image, mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub path: PathBuf,
    pub reason: String,
}

/// Dataset listing with a seeded train/val split. Paths are relative to
/// the directory the manifest lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_fraction: f64,
    pub samples: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedItem>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id.as_str()).collect()
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a manifest file, or `manifest.json` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Reads one entry: image, mask (rasterized from the annotation or read
    /// from a mask image) and the optional try-on target.
    pub fn load_entry(&self, entry: &ManifestEntry, label: &str) -> Result<LoadedSample> {
        let image = ImageBuffer::load(&self.root.join(&entry.image))?.to_rgb();
        let mask = match (&entry.annotation, &entry.mask) {
            (Some(ann), _) => {
                let ann = PolygonAnnotation::load(&self.root.join(ann))?;
                rasterize_mask(&ann, label)
            }
            (None, Some(mask)) => BinaryMask::from_image(&ImageBuffer::load(&self.root.join(mask))?, 0.5),
            (None, None) => return Err(Error::Validation(format!("entry `{}` has no mask source", entry.id))),
        };
        let target = match &entry.target {
            Some(t) => Some(ImageBuffer::load(&self.root.join(t))?.to_rgb()),
            None => None,
        };
        Ok(LoadedSample { sample: PairedSample::new(entry.id.clone(), image, mask)?, target })
    }

    pub fn load_split(&self, split: Split, label: &str) -> Result<Vec<LoadedSample>> {
        self.entries(split).map(|e| self.load_entry(e, label)).collect()
    }

    pub fn load_all(&self, label: &str) -> Result<Vec<LoadedSample>> {
        self.samples.iter().map(|e| self.load_entry(e, label)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub sample: PairedSample,
    pub target: Option<ImageBuffer>,
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Number of training items for `n` samples: `round(fraction * n)`.
pub fn train_count(n: usize, split_fraction: f64) -> usize {
    ((split_fraction * n as f64).round() as usize).min(n)
}

/// Pairs `<id>.png` with `<id>.json` (or `masks/<id>.png`) under `root`,
/// attaches `targets/<id>.png` when present, and splits the ids with a
/// seeded shuffle. Images without a mask source go to `skipped`.
pub fn make_manifest(root: &Path, split_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::Config(format!("split fraction {split_fraction} outside [0,1]")));
    }
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for path in read_dir_sorted(root)? {
        if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else { continue };
        let image = PathBuf::from(format!("{id}.png"));
        let ann = PathBuf::from(format!("{id}.json"));
        let mask = Path::new("masks").join(format!("{id}.png"));
        let target = Path::new("targets").join(format!("{id}.png"));
        let (annotation, mask) = if root.join(&ann).is_file() {
            (Some(ann), None)
        } else if root.join(&mask).is_file() {
            (None, Some(mask))
        } else {
            skipped.push(SkippedItem { path: image, reason: "no annotation or mask".into() });
            continue;
        };
        let target = root.join(&target).is_file().then_some(target);
        entries.push(ManifestEntry { id, image, annotation, mask, target, split: Split::Val });
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_count(entries.len(), split_fraction);
    let train: BTreeSet<usize> = order[..n_train].iter().copied().collect();
    for (i, e) in entries.iter_mut().enumerate() {
        e.split = if train.contains(&i) { Split::Train } else { Split::Val };
    }
    Ok(DatasetManifest { seed, split_fraction, samples: entries, skipped, root: root.to_path_buf() })
}

/// One generated scene: the person image, its annotation and mask, and the
/// try-on target with the garment region re-textured.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub image: ImageBuffer,
    pub mask: BinaryMask,
    pub target: ImageBuffer,
    pub annotation: PolygonAnnotation,
}

impl SynthSample {
    pub fn paired(&self) -> PairedSample {
        PairedSample { id: self.id.clone(), image: self.image.clone(), mask: self.mask.clone() }
    }
}

type Rgb = [f32; 3];

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Rgb {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

const SKIN_TONES: [Rgb; 4] = [[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.70, 0.50, 0.36], [0.45, 0.31, 0.22]];
const CLOTH_DARK: Rgb = [0.10, 0.16, 0.45];
const CLOTH_LIGHT: Rgb = [0.95, 0.90, 0.78];

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Striped garment texture laid out over the region's bounding box, with
/// soft horizontal shading so the cloth reads as wrapped around a body.
pub fn cloth_texture(mask: &BinaryMask, r: usize, c: usize) -> Rgb {
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    for rr in 0..mask.height() {
        for cc in 0..mask.width() {
            if mask.get(rr, cc) {
                top = top.min(rr);
                bottom = bottom.max(rr);
                left = left.min(cc);
                right = right.max(cc);
            }
        }
    }
    if top == usize::MAX {
        return CLOTH_LIGHT;
    }
    let bh = (bottom - top + 1) as f32;
    let bw = (right - left + 1) as f32;
    let v = (r - top.min(r)) as f32 / bh;
    let u = (c as f32 - left as f32 + 0.5) / bw;
    let stripe = ((v * 5.0).floor() as i32) % 2 == 0;
    let base = if stripe { CLOTH_DARK } else { CLOTH_LIGHT };
    let shade = 0.75 + 0.25 * (std::f32::consts::PI * u).sin();
    [base[0] * shade, base[1] * shade, base[2] * shade]
}

fn synth_one(id: String, size: usize, rng: &mut ChaCha8Rng, label: &str) -> SynthSample {
    let s = size as f64;
    let bg_a = random_color(rng, 0.15, 0.85);
    let bg_b = random_color(rng, 0.15, 0.85);
    let freq_x = rng.gen_range(2.0..6.0) / s;
    let freq_y = rng.gen_range(2.0..6.0) / s;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise_seed: u64 = rng.gen();

    let skin = SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())];
    let shirt = random_color(rng, 0.2, 0.9);
    let pants = random_color(rng, 0.05, 0.4);

    let cx = s * rng.gen_range(0.42..0.58);
    let cy = s * rng.gen_range(0.50..0.56);
    let half_w = s * rng.gen_range(0.14..0.19);
    let half_h = s * rng.gen_range(0.17..0.22);
    let vertices = 20;
    let torso: Vec<(f64, f64)> = (0..vertices)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / vertices as f64;
            let jitter = rng.gen_range(0.93..1.07);
            // Squarer than an ellipse: shoulders and hips.
            let (ca, sa) = (a.cos(), a.sin());
            let rx = half_w * jitter * ca.signum() * ca.abs().powf(0.6);
            let ry = half_h * jitter * sa.signum() * sa.abs().powf(0.8);
            ((cx + rx).clamp(0.0, s), (cy + ry).clamp(0.0, s))
        })
        .collect();
    let head_r = s * rng.gen_range(0.065..0.085);
    let head = (cx, cy - half_h - head_r * 0.8);
    let limb_w = s * 0.045;
    let arm_spread = rng.gen_range(0.2..0.6);
    let shoulder_l = (cx - half_w * 0.85, cy - half_h * 0.6);
    let shoulder_r = (cx + half_w * 0.85, cy - half_h * 0.6);
    let hand_l = (shoulder_l.0 - s * 0.12 * arm_spread - s * 0.03, cy + half_h * 0.6);
    let hand_r = (shoulder_r.0 + s * 0.12 * arm_spread + s * 0.03, cy + half_h * 0.6);
    let hip_l = (cx - half_w * 0.45, cy + half_h * 0.8);
    let hip_r = (cx + half_w * 0.45, cy + half_h * 0.8);
    let foot_l = (cx - half_w * 0.6, s * 0.99);
    let foot_r = (cx + half_w * 0.6, s * 0.99);

    let annotation = PolygonAnnotation {
        image_path: format!("{id}.png"),
        image_size: (size, size),
        shapes: vec![Polygon { label: label.to_string(), points: torso }],
    };
    let mask = rasterize_mask(&annotation, label);

    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise: Vec<f32> = (0..size * size).map(|_| noise_rng.gen_range(-0.04..0.04)).collect();
    let image = ImageBuffer::from_fn(size, size, 3, |r, c, ch| {
        let p = (c as f64 + 0.5, r as f64 + 0.5);
        let color = if mask.get(r, c) {
            shirt
        } else if ((p.0 - head.0).powi(2) + (p.1 - head.1).powi(2)).sqrt() < head_r
            || dist_to_segment(p, shoulder_l, hand_l) < limb_w
            || dist_to_segment(p, shoulder_r, hand_r) < limb_w
        {
            skin
        } else if dist_to_segment(p, hip_l, foot_l) < limb_w * 1.2 || dist_to_segment(p, hip_r, foot_r) < limb_w * 1.2 {
            pants
        } else {
            let t = 0.5 + 0.5 * ((p.0 * freq_x + p.1 * freq_y) * std::f64::consts::TAU + phase).sin();
            let base = lerp(bg_a, bg_b, t as f32);
            let n = noise[r * size + c];
            [base[0] + n, base[1] + n, base[2] + n]
        };
        color[ch]
    })
    .quantized();
    let mut target = image.clone();
    for r in 0..size {
        for c in 0..size {
            if mask.get(r, c) {
                let px = cloth_texture(&mask, r, c);
                target.set_pixel(r, c, &px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0));
            }
        }
    }
    SynthSample { id, image, mask, target, annotation }
}

/// Generates `n` deterministic person-like scenes of `size x size` pixels.
/// All images are already quantized to 8-bit levels, so they survive a
/// PNG round trip bit-exactly.
pub fn synth_samples(n: usize, size: usize, seed: u64, label: &str) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    if size < 32 {
        return Err(Error::Config(format!("synthetic image size {size} below the 32 px minimum")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| synth_one(format!("synth_{i:04}"), size, &mut rng, label)).collect())
}

/// Writes a synthetic dataset to `out` (images, annotations, `targets/`)
/// and its manifest.
pub fn synth_dataset(
    out: &Path,
    n: usize,
    size: usize,
    seed: u64,
    split_fraction: f64,
    label: &str,
) -> Result<(DatasetManifest, Vec<SynthSample>)> {
    let samples = synth_samples(n, size, seed, label)?;
    let targets = out.join("targets");
    std::fs::create_dir_all(&targets).map_err(|e| Error::io(&targets, e))?;
    for s in &samples {
        s.image.save_png(&out.join(format!("{}.png", s.id)))?;
        let ann = out.join(format!("{}.json", s.id));
        std::fs::write(&ann, s.annotation.to_json()).map_err(|e| Error::io(&ann, e))?;
        s.target.save_png(&targets.join(format!("{}.png", s.id)))?;
    }
    let manifest = make_manifest(out, split_fraction, seed)?;
    manifest.save()?;
    Ok((manifest, samples))
}
