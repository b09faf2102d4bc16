//! Paired geometric augmentation. Every transform is an inverse map from an
//! output pixel centre to a source location, so the image (bilinear) and
//! the mask (nearest) are warped by the same point mapping.

use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_manifest, DatasetManifest, PairedSample};
use crate::imaging::{BinaryMask, ImageBuffer};
use crate::tensor::Interp;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Perspective,
    PiecewiseAffine,
    Elastic,
    Shear,
    Scale,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::Perspective,
        TransformKind::PiecewiseAffine,
        TransformKind::Elastic,
        TransformKind::Shear,
        TransformKind::Scale,
    ];
}

/// Kind-specific parameters. Displacements are fractions of the image side
/// (x of width, y of height), so one record applies to any resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformParams {
    /// Displacements of the corners top-left, top-right, bottom-right,
    /// bottom-left.
    Perspective { corners: [[f64; 2]; 4] },
    /// Control points on a `rows x cols` grid spanning the image, row-major.
    PiecewiseAffine { rows: usize, cols: usize, displacements: Vec<[f64; 2]> },
    /// Smoothed random field from `field_seed`, scaled so its largest
    /// displacement is `alpha` pixels.
    Elastic { field_seed: u64, alpha: f64, sigma: f64 },
    /// Horizontal shear about the image centre.
    Shear { degrees: f64 },
    /// Per-axis scale about the image centre.
    Scale { sx: f64, sy: f64 },
}

impl TransformParams {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformParams::Perspective { .. } => TransformKind::Perspective,
            TransformParams::PiecewiseAffine { .. } => TransformKind::PiecewiseAffine,
            TransformParams::Elastic { .. } => TransformKind::Elastic,
            TransformParams::Shear { .. } => TransformKind::Shear,
            TransformParams::Scale { .. } => TransformKind::Scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub params: TransformParams,
    pub seed: u64,
}

impl GeometricTransform {
    pub fn new(params: TransformParams) -> Self {
        Self { params, seed: 0 }
    }

    pub fn identity() -> Self {
        Self::new(TransformParams::Scale { sx: 1.0, sy: 1.0 })
    }

    pub fn kind(&self) -> TransformKind {
        self.params.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerspectiveRange {
    pub enabled: bool,
    pub max_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiecewiseAffineRange {
    pub enabled: bool,
    pub grid: usize,
    pub max_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticRange {
    pub enabled: bool,
    pub alpha: [f64; 2],
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShearRange {
    pub enabled: bool,
    pub degrees: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleRange {
    pub enabled: bool,
    pub range: [f64; 2],
    /// Draw one factor for both axes.
    pub isotropic: bool,
}

impl Default for PerspectiveRange {
    fn default() -> Self {
        Self { enabled: true, max_jitter: 0.08 }
    }
}

impl Default for PiecewiseAffineRange {
    fn default() -> Self {
        Self { enabled: true, grid: 4, max_jitter: 0.05 }
    }
}

impl Default for ElasticRange {
    fn default() -> Self {
        Self { enabled: true, alpha: [0.0, 10.0], sigma: 6.0 }
    }
}

impl Default for ShearRange {
    fn default() -> Self {
        Self { enabled: true, degrees: [-12.0, 12.0] }
    }
}

impl Default for ScaleRange {
    fn default() -> Self {
        Self { enabled: true, range: [0.85, 1.15], isotropic: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub perspective: PerspectiveRange,
    pub piecewise_affine: PiecewiseAffineRange,
    pub elastic: ElasticRange,
    pub shear: ShearRange,
    pub scale: ScaleRange,
    /// Augmented copies written per source pair.
    pub copies: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            perspective: PerspectiveRange::default(),
            piecewise_affine: PiecewiseAffineRange::default(),
            elastic: ElasticRange::default(),
            shear: ShearRange::default(),
            scale: ScaleRange::default(),
            copies: 4,
            seed: 0,
        }
    }
}

fn check_interval(name: &str, [lo, hi]: [f64; 2]) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Config(format!("augment.{name}: [{lo}, {hi}] is not an interval")));
    }
    Ok(())
}

impl AugmentConfig {
    /// Config with a single kind enabled.
    pub fn only(kind: TransformKind) -> Self {
        let mut cfg = Self::default();
        cfg.perspective.enabled = kind == TransformKind::Perspective;
        cfg.piecewise_affine.enabled = kind == TransformKind::PiecewiseAffine;
        cfg.elastic.enabled = kind == TransformKind::Elastic;
        cfg.shear.enabled = kind == TransformKind::Shear;
        cfg.scale.enabled = kind == TransformKind::Scale;
        cfg
    }

    pub fn enabled_kinds(&self) -> Vec<TransformKind> {
        let flags = [
            self.perspective.enabled,
            self.piecewise_affine.enabled,
            self.elastic.enabled,
            self.shear.enabled,
            self.scale.enabled,
        ];
        TransformKind::ALL.iter().zip(flags).filter(|(_, on)| *on).map(|(k, _)| *k).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if !(0.0..0.5).contains(&v) {
                return Err(Error::Config(format!("augment.{name} = {v} must lie in [0, 0.5)")));
            }
            Ok(())
        };
        unit("perspective.max_jitter", self.perspective.max_jitter)?;
        unit("piecewise_affine.max_jitter", self.piecewise_affine.max_jitter)?;
        if self.piecewise_affine.grid < 2 {
            return Err(Error::Config("augment.piecewise_affine.grid must be at least 2".into()));
        }
        check_interval("elastic.alpha", self.elastic.alpha)?;
        if self.elastic.alpha[0] < 0.0 || !(self.elastic.sigma > 0.0) {
            return Err(Error::Config("augment.elastic needs alpha >= 0 and sigma > 0".into()));
        }
        check_interval("shear.degrees", self.shear.degrees)?;
        if self.shear.degrees.iter().any(|d| d.abs() >= 80.0) {
            return Err(Error::Config("augment.shear.degrees must stay within (-80, 80)".into()));
        }
        check_interval("scale.range", self.scale.range)?;
        if self.scale.range[0] <= 0.0 {
            return Err(Error::Config("augment.scale.range must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn jitter(rng: &mut ChaCha8Rng, max: f64) -> [f64; 2] {
    [uniform(rng, [-max, max]), uniform(rng, [-max, max])]
}

/// Draws one transform from the enabled kinds, deterministically in `seed`.
pub fn sample_transform(config: &AugmentConfig, seed: u64) -> Result<GeometricTransform> {
    config.validate()?;
    let kinds = config.enabled_kinds();
    if kinds.is_empty() {
        return Err(Error::Config("all augmentation kinds are disabled".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let params = match kind {
        TransformKind::Perspective => {
            let m = config.perspective.max_jitter;
            TransformParams::Perspective { corners: std::array::from_fn(|_| jitter(&mut rng, m)) }
        }
        TransformKind::PiecewiseAffine => {
            let g = config.piecewise_affine.grid;
            let m = config.piecewise_affine.max_jitter;
            TransformParams::PiecewiseAffine {
                rows: g,
                cols: g,
                displacements: (0..g * g).map(|_| jitter(&mut rng, m)).collect(),
            }
        }
        TransformKind::Elastic => TransformParams::Elastic {
            field_seed: rng.gen(),
            alpha: uniform(&mut rng, config.elastic.alpha),
            sigma: config.elastic.sigma,
        },
        TransformKind::Shear => TransformParams::Shear { degrees: uniform(&mut rng, config.shear.degrees) },
        TransformKind::Scale => {
            let sx = uniform(&mut rng, config.scale.range);
            let sy = if config.scale.isotropic { sx } else { uniform(&mut rng, config.scale.range) };
            TransformParams::Scale { sx, sy }
        }
    };
    Ok(GeometricTransform { params, seed })
}

/// Output-to-source point mapping for one image size. Coordinates are
/// continuous with pixel (r, c) covering [c, c+1) x [r, r+1).
enum PointMap {
    Affine([f64; 6]),
    Homography(SMatrix<f64, 3, 3>),
    Mesh { dst: Vec<(f64, f64)>, src: Vec<(f64, f64)>, triangles: Vec<[usize; 3]> },
    Field { dx: Vec<f64>, dy: Vec<f64>, width: usize },
}

fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<SMatrix<f64, 3, 3>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        a.set_row(2 * i, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(2 * i + 1, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[2 * i] = u;
        b[2 * i + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(SMatrix::<f64, 3, 3>::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of an `h x w` field with clamped borders.
pub(crate) fn gaussian_blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * plane[y * w + clamp(x as isize + j as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x]).sum();
        }
    }
    out
}

fn elastic_field(seed: u64, alpha: f64, sigma: f64, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    if alpha == 0.0 {
        return (vec![0.0; h * w], vec![0.0; h * w]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let raw_y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut dx = gaussian_blur_plane(&raw_x, h, w, sigma);
    let mut dy = gaussian_blur_plane(&raw_y, h, w, sigma);
    let peak = dx.iter().zip(&dy).map(|(a, b)| (a * a + b * b).sqrt()).fold(0.0, f64::max);
    if peak > 0.0 {
        let s = alpha / peak;
        dx.iter_mut().chain(dy.iter_mut()).for_each(|v| *v *= s);
    }
    (dx, dy)
}

fn barycentric(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<[f64; 3]> {
    let det = (b.1 - c.1) * (a.0 - c.0) + (c.0 - b.0) * (a.1 - c.1);
    if det.abs() < 1e-12 {
        return None;
    }
    let l1 = ((b.1 - c.1) * (p.0 - c.0) + (c.0 - b.0) * (p.1 - c.1)) / det;
    let l2 = ((c.1 - a.1) * (p.0 - c.0) + (a.0 - c.0) * (p.1 - c.1)) / det;
    let l3 = 1.0 - l1 - l2;
    const TOL: f64 = -1e-9;
    (l1 >= TOL && l2 >= TOL && l3 >= TOL).then_some([l1, l2, l3])
}

impl PointMap {
    fn build(t: &GeometricTransform, h: usize, w: usize) -> PointMap {
        let (wf, hf) = (w as f64, h as f64);
        let (cx, cy) = (wf / 2.0, hf / 2.0);
        match &t.params {
            TransformParams::Scale { sx, sy } => {
                PointMap::Affine([1.0 / sx, 0.0, cx - cx / sx, 0.0, 1.0 / sy, cy - cy / sy])
            }
            TransformParams::Shear { degrees } => {
                let k = degrees.to_radians().tan();
                PointMap::Affine([1.0, -k, k * cy, 0.0, 1.0, 0.0])
            }
            TransformParams::Perspective { corners } => {
                let src = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
                let dst: [(f64, f64); 4] =
                    std::array::from_fn(|i| (src[i].0 + corners[i][0] * wf, src[i].1 + corners[i][1] * hf));
                match homography(&dst, &src) {
                    Some(m) => PointMap::Homography(m),
                    None => PointMap::Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
                }
            }
            TransformParams::PiecewiseAffine { rows, cols, displacements } => {
                let (rows, cols) = (*rows, *cols);
                let mut src = Vec::with_capacity(rows * cols);
                let mut dst = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for j in 0..cols {
                        let p = (wf * j as f64 / (cols - 1) as f64, hf * i as f64 / (rows - 1) as f64);
                        let d = displacements.get(i * cols + j).copied().unwrap_or([0.0, 0.0]);
                        src.push(p);
                        dst.push((p.0 + d[0] * wf, p.1 + d[1] * hf));
                    }
                }
                let mut triangles = Vec::new();
                for i in 0..rows - 1 {
                    for j in 0..cols - 1 {
                        let a = i * cols + j;
                        triangles.push([a, a + 1, a + cols + 1]);
                        triangles.push([a, a + cols + 1, a + cols]);
                    }
                }
                PointMap::Mesh { dst, src, triangles }
            }
            TransformParams::Elastic { field_seed, alpha, sigma } => {
                let (dx, dy) = elastic_field(*field_seed, *alpha, *sigma, h, w);
                PointMap::Field { dx, dy, width: w }
            }
        }
    }

    /// Source location for output pixel (r, c), or `None` if unmapped.
    fn source(&self, r: usize, c: usize, hint: &mut usize) -> Option<(f64, f64)> {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        match self {
            PointMap::Affine(m) => Some((m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])),
            PointMap::Homography(m) => {
                let z = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
                if z.abs() < 1e-12 {
                    return None;
                }
                Some(((m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / z, (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / z))
            }
            PointMap::Mesh { dst, src, triangles } => {
                let n = triangles.len();
                for k in 0..n {
                    let ti = (*hint + k) % n;
                    let [a, b, c] = triangles[ti];
                    if let Some(l) = barycentric((x, y), dst[a], dst[b], dst[c]) {
                        *hint = ti;
                        return Some((
                            l[0] * src[a].0 + l[1] * src[b].0 + l[2] * src[c].0,
                            l[0] * src[a].1 + l[1] * src[b].1 + l[2] * src[c].1,
                        ));
                    }
                }
                None
            }
            PointMap::Field { dx, dy, width } => {
                let i = r * width + c;
                Some((x + dx[i], y + dy[i]))
            }
        }
    }
}

fn sample_bilinear(img: &ImageBuffer, x: f64, y: f64, out: &mut [f32]) -> bool {
    let (h, w) = (img.height(), img.width());
    if !(x >= 0.0 && y >= 0.0 && x <= w as f64 && y <= h as f64) {
        return false;
    }
    let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
    let (fx, fy) = (u - c0 as f64, v - r0 as f64);
    for (ch, o) in out.iter_mut().enumerate() {
        let top = img.get(r0, c0, ch) as f64 * (1.0 - fx) + img.get(r0, c1, ch) as f64 * fx;
        let bot = img.get(r1, c0, ch) as f64 * (1.0 - fx) + img.get(r1, c1, ch) as f64 * fx;
        *o = (top * (1.0 - fy) + bot * fy) as f32;
    }
    true
}

fn sample_nearest(img: &ImageBuffer, x: f64, y: f64, out: &mut [f32]) -> bool {
    let (h, w) = (img.height(), img.width());
    if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
        return false;
    }
    out.copy_from_slice(img.pixel(y as usize, x as usize));
    true
}

/// Warps `img` by `t`. Unmapped and out-of-source pixels become 0.
pub fn apply_transform(t: &GeometricTransform, img: &ImageBuffer, interp: Interp) -> ImageBuffer {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let map = PointMap::build(t, h, w);
    let mut out = ImageBuffer::zeros(h, w, ch);
    let mut px = vec![0f32; ch];
    let mut hint = 0;
    for r in 0..h {
        for c in 0..w {
            let Some((x, y)) = map.source(r, c, &mut hint) else { continue };
            let hit = match interp {
                Interp::Bilinear => sample_bilinear(img, x, y, &mut px),
                Interp::Nearest => sample_nearest(img, x, y, &mut px),
            };
            if hit {
                out.set_pixel(r, c, &px);
            }
        }
    }
    out
}

pub fn apply_to_mask(t: &GeometricTransform, mask: &BinaryMask) -> BinaryMask {
    BinaryMask::from_image(&apply_transform(t, &mask.to_image(), Interp::Nearest), 0.5)
}

pub fn augment_pair(t: &GeometricTransform, sample: &PairedSample) -> PairedSample {
    PairedSample {
        id: sample.id.clone(),
        image: apply_transform(t, &sample.image, Interp::Bilinear),
        mask: apply_to_mask(t, &sample.mask),
    }
}

/// Writes every source pair plus `config.copies` augmented copies (mask
/// and optional target warped with the same transform) into `out`, then
/// builds its manifest with the source split parameters.
pub fn augment_dataset(source: &DatasetManifest, out: &Path, config: &AugmentConfig, label: &str) -> Result<DatasetManifest> {
    config.validate()?;
    if config.enabled_kinds().is_empty() && config.copies > 0 {
        return Err(Error::Config("all augmentation kinds are disabled".into()));
    }
    let masks = out.join("masks");
    let targets = out.join("targets");
    for d in [&masks, &targets] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    for entry in &source.samples {
        let loaded = source.load_entry(entry, label)?;
        let s = &loaded.sample;
        let write = |id: &str, image: &ImageBuffer, mask: &BinaryMask, target: Option<&ImageBuffer>| -> Result<()> {
            image.save_png(&out.join(format!("{id}.png")))?;
            mask.to_image().save_png(&masks.join(format!("{id}.png")))?;
            if let Some(t) = target {
                t.save_png(&targets.join(format!("{id}.png")))?;
            }
            Ok(())
        };
        write(&s.id, &s.image, &s.mask, loaded.target.as_ref())?;
        for k in 0..config.copies {
            let t = sample_transform(config, seeds.gen())?;
            let aug = augment_pair(&t, s);
            let target = loaded.target.as_ref().map(|img| apply_transform(&t, img, Interp::Bilinear));
            write(&format!("{}_aug{k}", s.id), &aug.image.quantized(), &aug.mask, target.map(|t| t.quantized()).as_ref())?;
        }
    }
    let manifest = make_manifest(out, source.split_fraction, source.seed)?;
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_samples, DEFAULT_LABEL};
    use proptest::prelude::*;

    fn checker(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 3, |r, c, ch| ((r * 7 + c * 3 + ch * 5) % 11) as f32 / 10.0)
    }

    fn zero_strength() -> Vec<GeometricTransform> {
        vec![
            GeometricTransform::new(TransformParams::Perspective { corners: [[0.0; 2]; 4] }),
            GeometricTransform::new(TransformParams::PiecewiseAffine { rows: 4, cols: 4, displacements: vec![[0.0; 2]; 16] }),
            GeometricTransform::new(TransformParams::Elastic { field_seed: 9, alpha: 0.0, sigma: 6.0 }),
            GeometricTransform::new(TransformParams::Shear { degrees: 0.0 }),
            GeometricTransform::new(TransformParams::Scale { sx: 1.0, sy: 1.0 }),
        ]
    }

    #[test]
    fn zero_strength_is_identity_for_every_kind() {
        let img = checker(13, 17);
        for t in zero_strength() {
            for interp in [Interp::Bilinear, Interp::Nearest] {
                let out = apply_transform(&t, &img, interp);
                let diff = out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
                assert!(diff <= 1e-6, "{:?} {interp:?}: {diff}", t.kind());
            }
        }
    }

    #[test]
    fn shear_sample_stays_in_range() {
        let mut cfg = AugmentConfig::only(TransformKind::Shear);
        cfg.shear.degrees = [-10.0, 10.0];
        let t = sample_transform(&cfg, 3).unwrap();
        let TransformParams::Shear { degrees } = t.params else { panic!("{t:?}") };
        assert!((-10.0..=10.0).contains(&degrees));
        assert_eq!(t, sample_transform(&cfg, 3).unwrap());
    }

    #[test]
    fn unit_scale_range_gives_identity() {
        let mut cfg = AugmentConfig::only(TransformKind::Scale);
        cfg.scale.range = [1.0, 1.0];
        let t = sample_transform(&cfg, 11).unwrap();
        let img = checker(9, 9);
        assert_eq!(apply_transform(&t, &img, Interp::Bilinear), img);
    }

    #[test]
    fn all_disabled_is_an_error() {
        let mut cfg = AugmentConfig::only(TransformKind::Scale);
        cfg.scale.enabled = false;
        assert!(matches!(sample_transform(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn scale_two_nearest_grows_centered_square() {
        let img = ImageBuffer::from_fn(8, 8, 1, |r, c, _| if (3..5).contains(&r) && (3..5).contains(&c) { 1.0 } else { 0.0 });
        let t = GeometricTransform::new(TransformParams::Scale { sx: 2.0, sy: 2.0 });
        let out = apply_transform(&t, &img, Interp::Nearest);
        // Inverse-map oracle: output centre x -> 4 + (x - 4) / 2.
        let oracle = ImageBuffer::from_fn(8, 8, 1, |r, c, _| {
            let sx = 4.0 + (c as f64 + 0.5 - 4.0) / 2.0;
            let sy = 4.0 + (r as f64 + 0.5 - 4.0) / 2.0;
            img.get(sy as usize, sx as usize, 0)
        });
        assert_eq!(out, oracle);
        let white: Vec<(usize, usize)> =
            (0..8).flat_map(|r| (0..8).map(move |c| (r, c))).filter(|&(r, c)| out.get(r, c, 0) == 1.0).collect();
        assert_eq!(white.len(), 16);
        assert!(white.iter().all(|&(r, c)| (2..6).contains(&r) && (2..6).contains(&c)));
    }

    #[test]
    fn uniform_piecewise_shift_moves_centroid() {
        let s = synth_samples(1, 64, 5, DEFAULT_LABEL).unwrap().remove(0).paired();
        let shift = 4.0 / 64.0;
        let t = GeometricTransform::new(TransformParams::PiecewiseAffine {
            rows: 4,
            cols: 4,
            displacements: vec![[shift, 0.0]; 16],
        });
        let out = augment_pair(&t, &s);
        let (x0, y0) = s.mask.centroid().unwrap();
        let (x1, y1) = out.mask.centroid().unwrap();
        assert!((x1 - x0 - 4.0).abs() <= 0.5, "{x0} -> {x1}");
        assert!((y1 - y0).abs() <= 0.5);
    }

    #[test]
    fn perspective_maps_corners_to_displaced_corners() {
        let corners = [[0.05, 0.02], [-0.03, 0.04], [0.01, -0.06], [0.02, 0.03]];
        let t = GeometricTransform::new(TransformParams::Perspective { corners });
        let PointMap::Homography(m) = PointMap::build(&t, 50, 40) else { panic!() };
        let src = [(0.0, 0.0), (40.0, 0.0), (40.0, 50.0), (0.0, 50.0)];
        for i in 0..4 {
            let (x, y) = (src[i].0 + corners[i][0] * 40.0, src[i].1 + corners[i][1] * 50.0);
            let z = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
            let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / z;
            let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / z;
            assert!((u - src[i].0).abs() < 1e-9 && (v - src[i].1).abs() < 1e-9);
        }
    }

    #[test]
    fn elastic_peak_displacement_is_alpha() {
        let (dx, dy) = elastic_field(4, 7.5, 3.0, 20, 30);
        let peak = dx.iter().zip(&dy).map(|(a, b)| (a * a + b * b).sqrt()).fold(0.0, f64::max);
        assert!((peak - 7.5).abs() < 1e-9);
    }

    #[test]
    fn augment_dataset_writes_copies() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        crate::data::synth_dataset(&src, 3, 32, 1, 0.67, DEFAULT_LABEL).unwrap();
        let manifest = DatasetManifest::load(&src).unwrap();
        let mut cfg = AugmentConfig::default();
        cfg.copies = 2;
        let out = augment_dataset(&manifest, &dir.path().join("aug"), &cfg, DEFAULT_LABEL).unwrap();
        assert_eq!(out.samples.len(), 9);
        assert!(out.skipped.is_empty());
        assert!(out.samples.iter().all(|e| e.mask.is_some() && e.target.is_some()));
        for l in out.load_all(DEFAULT_LABEL).unwrap() {
            assert!(l.sample.mask.data().iter().all(|&v| v <= 1));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sampling_is_deterministic_and_in_range(seed in any::<u64>()) {
            let cfg = AugmentConfig::default();
            let t = sample_transform(&cfg, seed).unwrap();
            prop_assert_eq!(&t, &sample_transform(&cfg, seed).unwrap());
            match &t.params {
                TransformParams::Perspective { corners } => {
                    prop_assert!(corners.iter().flatten().all(|v| v.abs() <= 0.08));
                }
                TransformParams::PiecewiseAffine { displacements, .. } => {
                    prop_assert!(displacements.iter().flatten().all(|v| v.abs() <= 0.05));
                }
                TransformParams::Elastic { alpha, .. } => prop_assert!((0.0..=10.0).contains(alpha)),
                TransformParams::Shear { degrees } => prop_assert!(degrees.abs() <= 12.0),
                TransformParams::Scale { sx, sy } => {
                    prop_assert!((0.85..=1.15).contains(sx) && (0.85..=1.15).contains(sy));
                }
            }
        }

        #[test]
        fn image_and_mask_share_the_mapping(seed in any::<u64>(), kind in 0usize..5) {
            let s = synth_samples(1, 48, seed % 1000, DEFAULT_LABEL).unwrap().remove(0).paired();
            let t = sample_transform(&AugmentConfig::only(TransformKind::ALL[kind]), seed).unwrap();
            let out = augment_pair(&t, &s);
            prop_assert!(out.mask.data().iter().all(|&v| v <= 1));
            let soft = apply_transform(&t, &s.mask.to_image(), Interp::Bilinear);
            let soft = BinaryMask::from_image(&soft, 0.5);
            let agree = soft.data().iter().zip(out.mask.data()).filter(|(a, b)| a == b).count();
            prop_assert!(agree as f64 >= 0.99 * (48 * 48) as f64, "agreement {}", agree);
        }
    }
}
