//! Image-quality and distribution metrics: SSIM, MS-SSIM, FID and KID over
//! pluggable image embeddings.
//!
//! Absolute FID/KID values depend on the embedder. Numbers computed with the
//! built-in embedders are only comparable with each other.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::ImageBuffer;
use crate::tensor::{Interp, Var};
use crate::transnet::{Extractor, ExtractorLayer, ExtractorSpec};
use crate::{Error, Result};

/// Commonly published five-scale weights, normalised to sum to one.
pub fn default_ms_weights() -> Vec<f64> {
    let w = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    pub ms_weights: Vec<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0, ms_weights: default_ms_weights() }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("ssim window must be odd, got {}", self.window)));
        }
        if !(self.sigma > 0.0 && self.data_range > 0.0 && self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config("ssim sigma, data range and stabilizers must be positive".into()));
        }
        if self.ms_weights.is_empty() || self.ms_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("ms-ssim weights must be non-negative and non-empty".into()));
        }
        let sum: f64 = self.ms_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("ms-ssim weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Smallest image side accepted by [`ms_ssim`].
    pub fn ms_min_side(&self) -> usize {
        (1 << (self.ms_weights.len() - 1)) * self.window
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let k: Vec<f64> = (0..self.window).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Row-major single-channel plane.
#[derive(Debug, Clone, PartialEq)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn gray(img: &ImageBuffer) -> Result<Plane> {
        if img.channels() != 1 && img.channels() != 3 {
            return Err(Error::Shape(format!("ssim expects 1 or 3 channels, got {}", img.channels())));
        }
        let g = img.to_gray();
        Ok(Plane { h: g.height(), w: g.width(), v: g.data().iter().map(|&x| x as f64).collect() })
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect() }
    }

    /// Separable correlation over fully covered positions only.
    fn filter_valid(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let ow = self.w + 1 - n;
        let oh = self.h + 1 - n;
        let mut rows = vec![0.0; self.h * ow];
        for r in 0..self.h {
            let src = &self.v[r * self.w..(r + 1) * self.w];
            for c in 0..ow {
                rows[r * ow + c] = k.iter().zip(&src[c..c + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = k.iter().enumerate().map(|(i, a)| a * rows[(r + i) * ow + c]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    /// 2x2 average pooling, dropping an odd trailing row or column.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let at = |dr: usize, dc: usize| self.v[(2 * r + dr) * self.w + 2 * c + dc];
                v.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        Plane { h, w, v }
    }
}

/// Per-position luminance and contrast-structure terms.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimMap {
    pub height: usize,
    pub width: usize,
    pub luminance: Vec<f64>,
    pub contrast_structure: Vec<f64>,
}

impl SsimMap {
    pub fn ssim_values(&self) -> Vec<f64> {
        self.luminance.iter().zip(&self.contrast_structure).map(|(l, cs)| l * cs).collect()
    }
}

/// Window means of the local terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimComponents {
    pub ssim: f64,
    pub luminance: f64,
    pub contrast_structure: f64,
}

fn planes_map(x: &Plane, y: &Plane, cfg: &SsimConfig) -> Result<SsimMap> {
    if x.h < cfg.window || x.w < cfg.window {
        return Err(Error::Shape(format!("image {}x{} smaller than the {} px ssim window", x.h, x.w, cfg.window)));
    }
    let k = cfg.kernel();
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mx = x.filter_valid(&k);
    let my = y.filter_valid(&k);
    let exx = x.mul(x).filter_valid(&k);
    let eyy = y.mul(y).filter_valid(&k);
    let exy = x.mul(y).filter_valid(&k);
    let n = mx.v.len();
    let mut luminance = Vec::with_capacity(n);
    let mut contrast_structure = Vec::with_capacity(n);
    for i in 0..n {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let sxx = exx.v[i] - ux * ux;
        let syy = eyy.v[i] - uy * uy;
        let sxy = exy.v[i] - ux * uy;
        luminance.push((2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1));
        contrast_structure.push((2.0 * sxy + c2) / (sxx + syy + c2));
    }
    Ok(SsimMap { height: mx.h, width: mx.w, luminance, contrast_structure })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn components_of(map: &SsimMap) -> SsimComponents {
    SsimComponents {
        ssim: mean(&map.ssim_values()),
        luminance: mean(&map.luminance),
        contrast_structure: mean(&map.contrast_structure),
    }
}

fn gray_pair(x: &ImageBuffer, y: &ImageBuffer) -> Result<(Plane, Plane)> {
    if !x.same_size(y) || x.channels() != y.channels() {
        return Err(Error::Shape(format!(
            "ssim inputs differ: {}x{}x{} vs {}x{}x{}",
            x.height(),
            x.width(),
            x.channels(),
            y.height(),
            y.width(),
            y.channels()
        )));
    }
    Ok((Plane::gray(x)?, Plane::gray(y)?))
}

/// Local SSIM terms over every fully covered window position.
pub fn ssim_map(x: &ImageBuffer, y: &ImageBuffer, cfg: &SsimConfig) -> Result<SsimMap> {
    cfg.validate()?;
    let (px, py) = gray_pair(x, y)?;
    planes_map(&px, &py, cfg)
}

pub fn ssim_components(x: &ImageBuffer, y: &ImageBuffer, cfg: &SsimConfig) -> Result<SsimComponents> {
    Ok(components_of(&ssim_map(x, y, cfg)?))
}

pub fn ssim(x: &ImageBuffer, y: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_components(x, y, cfg)?.ssim)
}

/// Contrast-structure means at the finer scales, full SSIM at the coarsest,
/// each raised to its weight. Negative terms are clamped to zero first.
pub fn ms_ssim(x: &ImageBuffer, y: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    let (mut px, mut py) = gray_pair(x, y)?;
    let min_side = cfg.ms_min_side();
    if px.h.min(px.w) < min_side {
        return Err(Error::Validation(format!(
            "ms-ssim with {} scales needs sides of at least {min_side} px, got {}x{}",
            cfg.ms_weights.len(),
            px.h,
            px.w
        )));
    }
    let scales = cfg.ms_weights.len();
    let mut value = 1.0;
    for (j, &w) in cfg.ms_weights.iter().enumerate() {
        let c = components_of(&planes_map(&px, &py, cfg)?);
        let term = if j + 1 == scales { c.ssim } else { c.contrast_structure };
        value *= term.max(0.0).powf(w);
        if j + 1 < scales {
            px = px.downsample();
            py = py.downsample();
        }
    }
    Ok(value)
}

/// `n x d` feature matrix tagged with the embedder that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    features: Vec<f64>,
    embedder_id: String,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<Vec<f64>>, embedder_id: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(Error::Validation("embedding set is empty".into()));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Validation("embedding rows differ in length".into()));
        }
        let features: Vec<f64> = rows.into_iter().flatten().collect();
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding contains non-finite values".into()));
        }
        Ok(Self { n, d, features, embedder_id: embedder_id.into() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.features)
    }

    /// Sample mean and covariance (1 / (n - 1)).
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if self.n < 2 {
            return Err(Error::Validation(format!("covariance needs at least 2 samples, got {}", self.n)));
        }
        let m = self.matrix();
        let mu = DVector::from_iterator(self.d, m.column_iter().map(|c| c.mean()));
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        let cov = centered.transpose() * &centered / (self.n as f64 - 1.0);
        Ok((mu, cov))
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn check_pair(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.d != b.d {
        return Err(Error::Shape(format!("embedding dimensions differ: {} vs {}", a.d, b.d)));
    }
    Ok(())
}

/// Frechet distance between Gaussians fitted to the two sets.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    check_pair(a, b)?;
    let (mu_a, cov_a) = a.moments()?;
    let (mu_b, cov_b) = b.moments()?;
    // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), and the latter is symmetric.
    let ra = psd_sqrt(&cov_a);
    let inner = &ra * &cov_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (mu_a - mu_b).norm_squared();
    let value = diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Validation("fid is not finite".into()));
    }
    Ok(value.max(0.0))
}

fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / u.len() as f64 + 1.0).powi(3)
}

fn mmd2_unbiased(a: &EmbeddingSet, ia: &[usize], b: &EmbeddingSet, ib: &[usize]) -> f64 {
    let m = ia.len() as f64;
    let gram_off_diagonal = |s: &EmbeddingSet, idx: &[usize]| {
        let mut total = 0.0;
        for (p, &i) in idx.iter().enumerate() {
            for &j in &idx[p + 1..] {
                total += poly_kernel(s.row(i), s.row(j));
            }
        }
        2.0 * total
    };
    let kxx = gram_off_diagonal(a, ia);
    let kyy = gram_off_diagonal(b, ib);
    let kxy: f64 = ia.iter().flat_map(|&i| ib.iter().map(move |&j| (i, j))).map(|(i, j)| poly_kernel(a.row(i), b.row(j))).sum();
    (kxx + kyy) / (m * (m - 1.0)) - 2.0 * kxy / (m * m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KidConfig {
    /// `None` uses `min(n, 100)`.
    pub subset_size: Option<usize>,
    pub subsets: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self { subset_size: None, subsets: 10, seed: 0 }
    }
}

/// Mean unbiased MMD^2 with the cubic polynomial kernel over random subsets.
/// Small negative values are possible.
pub fn kid(a: &EmbeddingSet, b: &EmbeddingSet, subset_size: usize, subsets: usize, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.n.min(b.n);
    if subset_size < 2 || subset_size > n {
        return Err(Error::Validation(format!("kid subset size {subset_size} outside [2, {n}]")));
    }
    if subsets == 0 {
        return Err(Error::Validation("kid needs at least one subset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..subsets {
        let ia = rand::seq::index::sample(&mut rng, a.n, subset_size).into_vec();
        let ib = rand::seq::index::sample(&mut rng, b.n, subset_size).into_vec();
        total += mmd2_unbiased(a, &ia, b, &ib);
    }
    Ok(total / subsets as f64)
}

pub fn kid_with(a: &EmbeddingSet, b: &EmbeddingSet, cfg: &KidConfig) -> Result<f64> {
    let size = cfg.subset_size.unwrap_or_else(|| a.n.min(b.n).min(100));
    kid(a, b, size, cfg.subsets, cfg.seed)
}

/// Maps an image to a fixed-length feature vector.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_image(&self, img: &ImageBuffer) -> Result<Vec<f64>>;
}

pub const PIXELS_SIDE: usize = 16;

/// RGB values after resizing to 16x16.
#[derive(Debug, Clone, Default)]
pub struct PixelsEmbedder;

impl Embedder for PixelsEmbedder {
    fn id(&self) -> &str {
        "pixels"
    }

    fn dim(&self) -> usize {
        PIXELS_SIDE * PIXELS_SIDE * 3
    }

    fn embed_image(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        let small = img.to_rgb().resize(PIXELS_SIDE, PIXELS_SIDE, Interp::Bilinear);
        Ok(small.data().iter().map(|&v| v as f64).collect())
    }
}

pub const RANDCONV_EMBED_SEED: u64 = 0xE4BED;
pub const RANDCONV_EMBED_DIM: usize = 64;

/// Conv + ReLU stack, globally average-pooled after the last layer.
#[derive(Debug, Clone)]
pub struct ConvEmbedder {
    id: String,
    extractor: Extractor,
    dim: usize,
}

impl ConvEmbedder {
    pub fn random(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let spec = ExtractorSpec {
            layers: vec![
                ExtractorLayer { c_in: 3, c_out: 16, kernel: 3, stride: 2 },
                ExtractorLayer { c_in: 16, c_out: 32, kernel: 3, stride: 2 },
                ExtractorLayer { c_in: 32, c_out: dim, kernel: 3, stride: 2 },
            ],
            weights: vec![0.0, 0.0, 1.0],
        };
        let id = if dim == RANDCONV_EMBED_DIM { "randconv".to_string() } else { format!("randconv:{dim}") };
        Ok(Self { id, extractor: Extractor::random_with_spec(spec, RANDCONV_EMBED_SEED), dim })
    }

    /// Pretrained extractor stored as an extractor checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let extractor = Extractor::load(path)?;
        let dim = match &extractor {
            Extractor::Conv { spec, .. } => spec.layers.last().map_or(0, |l| l.c_out),
            Extractor::Identity => 0,
        };
        Ok(Self { id: format!("checkpoint:{}", path.display()), extractor, dim })
    }
}

impl Embedder for ConvEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        let x = Var::constant(img.to_rgb().to_tensor());
        let feats = self.extractor.features(&x);
        let last = &feats.last().expect("extractor has layers").1;
        let [_, c, h, w] = last.value().dims4();
        let plane = h * w;
        Ok((0..c).map(|ch| last.value().data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64).collect())
    }
}

/// `pixels`, `randconv`, `randconv:<d>` or `checkpoint:<path>`.
pub fn resolve_embedder(id: &str) -> Result<Box<dyn Embedder>> {
    if id == "pixels" {
        return Ok(Box::new(PixelsEmbedder));
    }
    if id == "randconv" {
        return Ok(Box::new(ConvEmbedder::random(RANDCONV_EMBED_DIM)?));
    }
    if let Some(d) = id.strip_prefix("randconv:") {
        let d = d.parse().map_err(|_| Error::Config(format!("bad embedding dimension in `{id}`")))?;
        return Ok(Box::new(ConvEmbedder::random(d)?));
    }
    if let Some(p) = id.strip_prefix("checkpoint:") {
        return Ok(Box::new(ConvEmbedder::load(Path::new(p))?));
    }
    Err(Error::Config(format!("unknown embedder `{id}`")))
}

pub fn embed_with(imgs: &[ImageBuffer], embedder: &dyn Embedder) -> Result<EmbeddingSet> {
    let rows = imgs.iter().map(|i| embedder.embed_image(i)).collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(rows, embedder.id())
}

pub fn embed(imgs: &[ImageBuffer], embedder_id: &str) -> Result<EmbeddingSet> {
    embed_with(imgs, resolve_embedder(embedder_id)?.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ssim: SsimConfig,
    pub embedder: String,
    pub kid: KidConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ssim: SsimConfig::default(), embedder: "randconv".into(), kid: KidConfig::default() }
    }
}

/// Report written by the `eval` command. Metrics that the inputs cannot
/// support (too few pairs, images too small for MS-SSIM) are null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    pub fid: Option<f64>,
    pub kid: Option<f64>,
    /// Same value as `kid`, under the alternative label.
    pub kernel_inspection_distance: Option<f64>,
    pub n_pairs: usize,
    pub embedder_id: String,
}

pub fn evaluate_pairs(real: &[ImageBuffer], fake: &[ImageBuffer], cfg: &EvalConfig) -> Result<EvalReport> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Validation(format!("need matching non-empty sets, got {} real and {} fake", real.len(), fake.len())));
    }
    let mut ssim_sum = 0.0;
    let mut ms_sum = 0.0;
    let ms_ok = real.iter().all(|r| r.height().min(r.width()) >= cfg.ssim.ms_min_side());
    for (r, f) in real.iter().zip(fake) {
        ssim_sum += ssim(r, f, &cfg.ssim)?;
        if ms_ok {
            ms_sum += ms_ssim(r, f, &cfg.ssim)?;
        }
    }
    let n = real.len();
    let embedder = resolve_embedder(&cfg.embedder)?;
    let (fid_v, kid_v) = if n >= 2 {
        let a = embed_with(real, embedder.as_ref())?;
        let b = embed_with(fake, embedder.as_ref())?;
        (Some(fid(&a, &b)?), Some(kid_with(&a, &b, &cfg.kid)?))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        ssim: ssim_sum / n as f64,
        ms_ssim: ms_ok.then(|| ms_sum / n as f64),
        fid: fid_v,
        kid: kid_v,
        kernel_inspection_distance: kid_v,
        n_pairs: n,
        embedder_id: embedder.id().to_string(),
    })
}
