//! Mask-to-cloth translation: coarse-to-fine generator (global stage plus
//! local enhancers) or a U-shaped alternative, multi-scale patch
//! discriminators, the adversarial / feature-matching / perceptual
//! objectives and the alternating training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LoadedSample;
use crate::imaging::{BinaryMask, ImageBuffer};
use crate::nn::{instance_norm, Adam, AdamConfig, Conv2d, Init, ParamStore, Session};
use crate::tensor::ops;
use crate::tensor::{Interp, Tensor, Var};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "transnet";
pub const EXTRACTOR_KIND: &str = "extractor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArch {
    #[default]
    CoarseToFine,
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub arch: GeneratorArch,
    pub base_channels: usize,
    pub global_downsamples: usize,
    pub residual_blocks: usize,
    pub local_residual_blocks: usize,
    /// Local enhancers stacked on the global stage (0 = global only).
    pub enhancers: usize,
    pub output_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            arch: GeneratorArch::CoarseToFine,
            base_channels: 16,
            global_downsamples: 3,
            residual_blocks: 3,
            local_residual_blocks: 3,
            enhancers: 0,
            output_channels: 3,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.global_downsamples == 0 {
            return Err(Error::Config("generator needs base_channels >= 1 and global_downsamples >= 1".into()));
        }
        if self.output_channels != 3 {
            return Err(Error::Config("generator output must have 3 channels".into()));
        }
        if self.arch == GeneratorArch::Unet && self.enhancers > 0 {
            return Err(Error::Config("local enhancers apply to the coarse-to-fine generator only".into()));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.global_downsamples + self.enhancers)
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("generator input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub num_scales: usize,
    /// Feature layers per discriminator; the logit layer comes on top.
    pub layers: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { num_scales: 3, layers: 3, base_channels: 16 }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.layers == 0 || self.base_channels == 0 {
            return Err(Error::Config("discriminator needs at least one scale, layer and channel".into()));
        }
        Ok(())
    }
}

fn conv_in_relu(sess: &Session, conv: &Conv2d, x: &Var) -> Var {
    ops::relu(&instance_norm(&conv.forward(sess, x)))
}

/// Reflect-padded 7x7 convolution.
fn conv7(sess: &Session, conv: &Conv2d, x: &Var) -> Var {
    conv.forward(sess, &sess.reflect_pad(x, 3))
}

fn to_unit_range(x: &Var) -> Var {
    ops::scale(&ops::add_scalar(&ops::tanh(x), 1.0), 0.5)
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new(name: &str, c: usize) -> Self {
        Self { c1: Conv2d::new(format!("{name}.c1"), c, c, 3), c2: Conv2d::new(format!("{name}.c2"), c, c, 3) }
    }

    fn convs(&self) -> [&Conv2d; 2] {
        [&self.c1, &self.c2]
    }

    fn forward(&self, sess: &Session, x: &Var) -> Var {
        let y = ops::relu(&instance_norm(&self.c1.forward(sess, &sess.reflect_pad(x, 1))));
        let y = instance_norm(&self.c2.forward(sess, &sess.reflect_pad(&y, 1)));
        ops::add(x, &y)
    }
}

/// Nearest-neighbour x2 upsampling followed by conv + norm + ReLU.
fn up_block(sess: &Session, conv: &Conv2d, x: &Var) -> Var {
    let [_, _, h, w] = x.value().dims4();
    conv_in_relu(sess, conv, &sess.resize_nearest(x, 2 * h, 2 * w))
}

#[derive(Debug, Clone)]
struct GlobalStage {
    input: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<ResBlock>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Debug, Clone)]
struct Enhancer {
    input: Conv2d,
    down: Conv2d,
    res: Vec<ResBlock>,
    up: Conv2d,
    head: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UnetGen {
    input: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Debug, Clone)]
enum GenLayers {
    CoarseToFine { global: GlobalStage, enhancers: Vec<Enhancer> },
    Unet(UnetGen),
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    layers: GenLayers,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let b = spec.base_channels;
        let layers = match spec.arch {
            GeneratorArch::CoarseToFine => {
                let e = spec.enhancers;
                let ng = b << e;
                let nd = spec.global_downsamples;
                let global = GlobalStage {
                    input: Conv2d::new("gen.global.in", 3, ng, 7),
                    down: (0..nd)
                        .map(|i| Conv2d::new(format!("gen.global.down{}", i + 1), ng << i, ng << (i + 1), 3).stride(2).padding(1))
                        .collect(),
                    res: (0..spec.residual_blocks).map(|j| ResBlock::new(&format!("gen.global.res{}", j + 1), ng << nd)).collect(),
                    up: (0..nd)
                        .map(|i| Conv2d::new(format!("gen.global.up{}", i + 1), ng << (nd - i), ng << (nd - i - 1), 3).padding(1))
                        .collect(),
                    head: Conv2d::new("gen.global.head", ng, 3, 7),
                };
                let enhancers = (1..=e)
                    .map(|n| {
                        let c = b << (e - n);
                        Enhancer {
                            input: Conv2d::new(format!("gen.enh{n}.in"), 3, c, 7),
                            down: Conv2d::new(format!("gen.enh{n}.down"), c, 2 * c, 3).stride(2).padding(1),
                            res: (0..spec.local_residual_blocks)
                                .map(|j| ResBlock::new(&format!("gen.enh{n}.res{}", j + 1), 2 * c))
                                .collect(),
                            up: Conv2d::new(format!("gen.enh{n}.up"), 2 * c, c, 3).padding(1),
                            head: (n == e).then(|| Conv2d::new(format!("gen.enh{n}.head"), c, 3, 7)),
                        }
                    })
                    .collect();
                GenLayers::CoarseToFine { global, enhancers }
            }
            GeneratorArch::Unet => {
                let nd = spec.global_downsamples;
                let ch = |i: usize| (b << i).min(8 * b);
                GenLayers::Unet(UnetGen {
                    input: Conv2d::new("gen.unet.in", 3, b, 3).padding(1),
                    down: (0..nd).map(|i| Conv2d::new(format!("gen.unet.down{}", i + 1), ch(i), ch(i + 1), 3).stride(2).padding(1)).collect(),
                    up: (0..nd)
                        .map(|i| {
                            let level = nd - i;
                            Conv2d::new(format!("gen.unet.up{}", i + 1), ch(level) + ch(level - 1), ch(level - 1), 3).padding(1)
                        })
                        .collect(),
                    head: Conv2d::new("gen.unet.head", b, 3, 3).padding(1),
                })
            }
        };
        Ok(Self { spec, layers })
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut out = Vec::new();
        match &self.layers {
            GenLayers::CoarseToFine { global, enhancers } => {
                out.push(&global.input);
                out.extend(&global.down);
                out.extend(global.res.iter().flat_map(ResBlock::convs));
                out.extend(&global.up);
                out.push(&global.head);
                for e in enhancers {
                    out.push(&e.input);
                    out.push(&e.down);
                    out.extend(e.res.iter().flat_map(ResBlock::convs));
                    out.push(&e.up);
                    out.extend(e.head.as_ref());
                }
            }
            GenLayers::Unet(u) => {
                out.push(&u.input);
                out.extend(&u.down);
                out.extend(&u.up);
                out.push(&u.head);
            }
        }
        out
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for c in self.convs() {
            c.init(store, rng, Init::Normal(0.02));
        }
    }

    fn global_features(&self, sess: &Session, g: &GlobalStage, x: &Var) -> Var {
        let mut h = conv_in_relu(sess, &g.input, &sess.reflect_pad(x, 3));
        for d in &g.down {
            h = conv_in_relu(sess, d, &h);
        }
        for r in &g.res {
            h = r.forward(sess, &h);
        }
        for u in &g.up {
            h = up_block(sess, u, &h);
        }
        sess.record("gen.global", &h);
        h
    }

    /// Output of the global stage alone, at `1 / 2^enhancers` resolution.
    pub fn forward_global(&self, sess: &Session, s3: &Var) -> Result<Var> {
        let GenLayers::CoarseToFine { global, .. } = &self.layers else {
            return Err(Error::Config("the U-shaped generator has no global stage".into()));
        };
        let [_, _, h, w] = s3.value().dims4();
        self.spec.check_size(h, w)?;
        let mut x = s3.clone();
        for _ in 0..self.spec.enhancers {
            x = sess.avg_pool2(&x);
        }
        Ok(to_unit_range(&conv7(sess, &global.head, &self.global_features(sess, global, &x))))
    }

    /// Full-resolution output in [0,1], `[N, 3, H, W]`.
    pub fn forward(&self, sess: &Session, s3: &Var) -> Result<Var> {
        let [_, c, h, w] = s3.value().dims4();
        if c != 3 {
            return Err(Error::Shape(format!("generator expects a 3-channel mask, got {c} channels")));
        }
        self.spec.check_size(h, w)?;
        let out = match &self.layers {
            GenLayers::CoarseToFine { global, enhancers } => {
                if enhancers.is_empty() {
                    return self.forward_global(sess, s3);
                }
                // pyramid[k] is the input downsampled k times.
                let mut pyramid = vec![s3.clone()];
                for _ in 0..enhancers.len() {
                    let next = sess.avg_pool2(pyramid.last().expect("nonempty"));
                    pyramid.push(next);
                }
                let mut feats = self.global_features(sess, global, &pyramid[enhancers.len()]);
                let mut logits = None;
                for (n, e) in enhancers.iter().enumerate() {
                    let input = &pyramid[enhancers.len() - 1 - n];
                    let front = conv_in_relu(sess, &e.down, &conv_in_relu(sess, &e.input, &sess.reflect_pad(input, 3)));
                    let mut h = ops::add(&front, &feats);
                    for r in &e.res {
                        h = r.forward(sess, &h);
                    }
                    feats = up_block(sess, &e.up, &h);
                    sess.record(&format!("gen.enh{}", n + 1), &feats);
                    if let Some(head) = &e.head {
                        logits = Some(conv7(sess, head, &feats));
                    }
                }
                logits.expect("last enhancer has a head")
            }
            GenLayers::Unet(u) => {
                let mut skips = vec![conv_in_relu(sess, &u.input, s3)];
                for d in &u.down {
                    let h = ops::leaky_relu(&instance_norm(&d.forward(sess, skips.last().expect("nonempty"))), 0.2);
                    skips.push(h);
                }
                let mut h = skips.pop().expect("bottleneck");
                for up in &u.up {
                    let skip = skips.pop().expect("skip");
                    let [_, _, sh, sw] = skip.value().dims4();
                    let cat = ops::concat_channels(&[sess.resize_nearest(&h, sh, sw), skip]);
                    h = conv_in_relu(sess, up, &cat);
                }
                u.head.forward(sess, &h)
            }
        };
        Ok(to_unit_range(&out))
    }
}

/// Features of every layer plus the final logit map of one discriminator.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub features: Vec<Var>,
    pub logits: Var,
}

impl FeatureStack {
    /// Layer count including the logit layer.
    pub fn depth(&self) -> usize {
        self.features.len() + 1
    }
}

#[derive(Debug, Clone)]
struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    logit: Conv2d,
}

impl PatchDiscriminator {
    fn new(name: &str, spec: &DiscriminatorSpec) -> Self {
        let b = spec.base_channels;
        let ch = |i: usize| (b << i).min(8 * b);
        let layers = (0..spec.layers)
            .map(|i| {
                let c_in = if i == 0 { 6 } else { ch(i - 1) };
                let stride = if i + 1 == spec.layers && spec.layers > 1 { 1 } else { 2 };
                Conv2d::new(format!("{name}.l{}", i + 1), c_in, ch(i), 4).stride(stride).padding(2)
            })
            .collect();
        let logit = Conv2d::new(format!("{name}.logit"), ch(spec.layers - 1), 1, 4).padding(2);
        Self { layers, logit }
    }

    fn forward(&self, sess: &Session, x: &Var) -> FeatureStack {
        let mut features = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, conv) in self.layers.iter().enumerate() {
            let y = conv.forward(sess, &h);
            let y = if i == 0 { y } else { instance_norm(&y) };
            h = ops::leaky_relu(&y, 0.2);
            features.push(h.clone());
        }
        FeatureStack { logits: self.logit.forward(sess, &h), features }
    }
}

/// Identical patch discriminators applied to an average-pooled pyramid.
#[derive(Debug, Clone)]
pub struct MultiScaleDiscriminator {
    pub spec: DiscriminatorSpec,
    scales: Vec<PatchDiscriminator>,
}

impl MultiScaleDiscriminator {
    pub fn new(spec: DiscriminatorSpec) -> Result<Self> {
        spec.validate()?;
        let scales = (1..=spec.num_scales).map(|k| PatchDiscriminator::new(&format!("disc.d{k}"), &spec)).collect();
        Ok(Self { spec, scales })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for d in &self.scales {
            for c in d.layers.iter().chain(std::iter::once(&d.logit)) {
                c.init(store, rng, Init::Normal(0.02));
            }
        }
    }

    /// One stack per scale; scale k sees the input pooled k-1 times.
    pub fn forward(&self, sess: &Session, s3: &Var, img: &Var) -> Vec<FeatureStack> {
        let mut x = ops::concat_channels(&[s3.clone(), img.clone()]);
        let mut out = Vec::with_capacity(self.scales.len());
        for (k, d) in self.scales.iter().enumerate() {
            if k > 0 {
                x = sess.avg_pool2(&x);
            }
            sess.record(&format!("disc.d{}.input", k + 1), &x);
            out.push(d.forward(sess, &x));
        }
        out
    }
}

/// Level 1 is the image; each further level is a 2x2 average pool (odd
/// sides round up).
pub fn image_pyramid(img: &ImageBuffer, scales: usize) -> Result<Vec<ImageBuffer>> {
    if scales == 0 {
        return Err(Error::Config("image pyramid needs at least one scale".into()));
    }
    let mut levels = vec![img.clone()];
    let sess_store = ParamStore::new();
    let sess = Session::eval(&sess_store);
    let mut t = Var::constant(img.to_tensor());
    for _ in 1..scales {
        t = sess.avg_pool2(&t);
        levels.push(ImageBuffer::from_tensor(t.value(), 0)?);
    }
    Ok(levels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GanFlavor {
    #[default]
    Vanilla,
    LeastSquares,
}

/// Adversarial loss of one logit map against the real/fake label.
pub fn gan_loss(logits: &Var, target_is_real: bool, flavor: GanFlavor) -> Var {
    let t = if target_is_real { 1.0 } else { 0.0 };
    match flavor {
        GanFlavor::Vanilla => ops::bce_with_logits(logits, t),
        GanFlavor::LeastSquares => ops::mse_to(logits, t),
    }
}

/// Sum over scales and feature layers (logits excluded) of the mean
/// absolute difference. Real features are treated as constants.
pub fn fm_loss(real: &[FeatureStack], fake: &[FeatureStack]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("{} real stacks vs {} fake stacks", real.len(), fake.len())));
    }
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        if r.features.len() != f.features.len() {
            return Err(Error::Shape("feature stacks differ in depth".into()));
        }
        for (a, b) in r.features.iter().zip(&f.features) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("feature shapes {:?} vs {:?}", a.shape(), b.shape())));
            }
            terms.push(ops::l1_mean(b, &a.detach()));
        }
    }
    if terms.is_empty() {
        return Ok(Var::constant(Tensor::scalar(0.0)));
    }
    Ok(ops::sum_all(&terms))
}

/// Conv + ReLU layer of a feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub layers: Vec<ExtractorLayer>,
    /// Loss weight of each layer's features.
    pub weights: Vec<f64>,
}

/// Fixed feature extractor for the perceptual loss.
#[derive(Debug, Clone)]
pub enum Extractor {
    /// The image itself as the only feature layer.
    Identity,
    Conv { spec: ExtractorSpec, store: ParamStore },
}

pub const RANDCONV_SEED: u64 = 0x5EED;

impl Extractor {
    /// `identity`, `randconv` or `checkpoint:<path>`; `off` yields `None`.
    pub fn from_id(id: &str) -> Result<Option<Self>> {
        match id {
            "off" | "" => Ok(None),
            "identity" => Ok(Some(Extractor::Identity)),
            "randconv" => Ok(Some(Self::random_conv(RANDCONV_SEED))),
            other => match other.strip_prefix("checkpoint:") {
                Some(path) => Ok(Some(Self::load(Path::new(path))?)),
                None => Err(Error::Config(format!("unknown perceptual extractor `{other}`"))),
            },
        }
    }

    /// Three conv + ReLU layers with fixed random weights.
    pub fn random_conv(seed: u64) -> Self {
        let spec = ExtractorSpec {
            layers: vec![
                ExtractorLayer { c_in: 3, c_out: 8, kernel: 3, stride: 1 },
                ExtractorLayer { c_in: 8, c_out: 16, kernel: 3, stride: 2 },
                ExtractorLayer { c_in: 16, c_out: 32, kernel: 3, stride: 2 },
            ],
            weights: vec![1.0 / 3.0; 3],
        };
        Self::random_with_spec(spec, seed)
    }

    /// Fan-in uniform weights drawn from `seed`.
    pub fn random_with_spec(spec: ExtractorSpec, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in Self::convs(&spec) {
            c.init(&mut store, &mut rng, Init::FanInUniform);
        }
        Extractor::Conv { spec, store }
    }

    fn convs(spec: &ExtractorSpec) -> Vec<Conv2d> {
        spec.layers
            .iter()
            .enumerate()
            .map(|(i, l)| Conv2d::new(format!("ext.l{}", i + 1), l.c_in, l.c_out, l.kernel).stride(l.stride).padding(l.kernel / 2))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, EXTRACTOR_KIND)?;
        let spec: ExtractorSpec = serde_json::from_value(ck.spec)?;
        if spec.weights.len() != spec.layers.len() || spec.layers.is_empty() {
            return Err(Error::checkpoint(path, "extractor needs one weight per layer"));
        }
        for c in Self::convs(&spec) {
            if ck.store.get(&c.weight_name()).map(|t| t.shape().to_vec()) != Some(vec![c.c_out, c.c_in, c.kernel, c.kernel]) {
                return Err(Error::checkpoint(path, format!("missing or misshapen `{}`", c.weight_name())));
            }
            if ck.store.get(&c.bias_name()).is_none() {
                return Err(Error::checkpoint(path, format!("missing `{}`", c.bias_name())));
            }
        }
        Ok(Extractor::Conv { spec, store: ck.store })
    }

    pub fn checkpoint(&self) -> Option<Checkpoint> {
        match self {
            Extractor::Identity => None,
            Extractor::Conv { spec, store } => {
                Some(Checkpoint::new(EXTRACTOR_KIND, serde_json::to_value(spec).expect("spec"), 0, store.clone()))
            }
        }
    }

    /// Weighted features; gradients flow to `x` only.
    pub fn features(&self, x: &Var) -> Vec<(f64, Var)> {
        match self {
            Extractor::Identity => vec![(1.0, x.clone())],
            Extractor::Conv { spec, store } => {
                let sess = Session::with_mode(store, false, false);
                let mut h = x.clone();
                let mut out = Vec::new();
                for (c, &w) in Self::convs(spec).iter().zip(&spec.weights) {
                    h = ops::relu(&c.forward(&sess, &h));
                    out.push((w, h.clone()));
                }
                out
            }
        }
    }
}

/// `sum_l w_l * mean|phi_l(x) - phi_l(y)|`.
pub fn perceptual_loss(extractor: &Extractor, x: &Var, y: &Var) -> Var {
    let terms: Vec<Var> = extractor
        .features(x)
        .into_iter()
        .zip(extractor.features(y))
        .map(|((w, a), (_, b))| ops::scale(&ops::l1_mean(&a, &b), w))
        .collect();
    ops::sum_all(&terms)
}

/// `sum(gan) + lambda_fm * sum(fm) + lambda_perc * perc`.
pub fn generator_objective(gan_terms: &[Var], fm_terms: &[Var], perc: Option<&Var>, lambda_fm: f64, lambda_perc: f64) -> Var {
    let mut parts: Vec<Var> = gan_terms.to_vec();
    parts.extend(fm_terms.iter().map(|f| ops::scale(f, lambda_fm)));
    if let Some(p) = perc {
        parts.push(ops::scale(p, lambda_perc));
    }
    if parts.is_empty() {
        return Var::constant(Tensor::scalar(0.0));
    }
    ops::sum_all(&parts)
}

/// `sum_k [loss(D_k(real), real) + loss(D_k(fake), fake)]`, given the two
/// per-scale term lists.
pub fn discriminator_objective(real_terms: &[Var], fake_terms: &[Var]) -> Var {
    let parts: Vec<Var> = real_terms.iter().chain(fake_terms).cloned().collect();
    if parts.is_empty() {
        return Var::constant(Tensor::scalar(0.0));
    }
    ops::sum_all(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Leading epochs that train the global stage alone (enhancers > 0).
    pub global_epochs: usize,
    pub lambda_fm: f64,
    pub lambda_perc: f64,
    pub g_optimizer: AdamConfig,
    pub d_optimizer: AdamConfig,
    pub flavor: GanFlavor,
    /// `off`, `identity`, `randconv` or `checkpoint:<path>`.
    pub perceptual: String,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        let adam = AdamConfig { lr: 2e-4, beta1: 0.5, ..AdamConfig::default() };
        Self {
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            image_size: 64,
            batch_size: 4,
            epochs: 100,
            global_epochs: 0,
            lambda_fm: 10.0,
            lambda_perc: 10.0,
            g_optimizer: adam,
            d_optimizer: adam,
            flavor: GanFlavor::Vanilla,
            perceptual: "randconv".into(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.g_optimizer.validate()?;
        self.d_optimizer.validate()?;
        if !(self.lambda_fm >= 0.0 && self.lambda_perc >= 0.0) {
            return Err(Error::Config("gan loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("gan.batch_size must be at least 1".into()));
        }
        self.generator.check_size(self.image_size, self.image_size).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Mask replicated to 3 channels, `[1, 3, H, W]`.
pub fn mask_to_s3(mask: &BinaryMask) -> Tensor {
    mask.to_tensor(3)
}

/// The translation target for a try-on pair: the garment pixels of the
/// target image on black.
pub fn cloth_target(target: &ImageBuffer, mask: &BinaryMask) -> ImageBuffer {
    ImageBuffer::from_fn(target.height(), target.width(), 3, |r, c, ch| if mask.get(r, c) { target.get(r, c, ch) } else { 0.0 })
}

/// (mask, cloth) training pairs at `size x size`.
pub fn gan_pairs(samples: &[LoadedSample], size: usize) -> Result<Vec<(BinaryMask, ImageBuffer)>> {
    samples
        .iter()
        .map(|l| {
            let target = l
                .target
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("sample `{}` has no try-on target", l.sample.id)))?;
            let mask = l.sample.mask.resize(size, size);
            let cloth = cloth_target(&target.to_rgb().resize(size, size, Interp::Bilinear), &mask);
            Ok((mask, cloth))
        })
        .collect()
}

/// Frozen generator for inference.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub gen: Generator,
    pub store: ParamStore,
    pub image_size: usize,
}

impl GanModel {
    pub fn new(spec: GeneratorSpec, image_size: usize, seed: u64) -> Result<Self> {
        let gen = Generator::new(spec)?;
        gen.spec.check_size(image_size, image_size)?;
        let mut store = ParamStore::new();
        gen.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { gen, store, image_size })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: GeneratorSpec = serde_json::from_value(ck.spec.clone())?;
        let image_size = ck
            .extra
            .get("image_size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Validation("translation checkpoint lacks image_size".into()))? as usize;
        let mut model = Self::new(spec, image_size, 0)?;
        let expected = model.store.params().count();
        let mut gen_only = ParamStore::new();
        for (k, v) in ck.store.params().filter(|(k, _)| k.starts_with("gen.")) {
            gen_only.insert(k.clone(), v.clone());
        }
        if model.store.load_matching(&gen_only) != expected {
            return Err(Error::Validation("translation checkpoint does not match its generator spec".into()));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, CHECKPOINT_KIND)?)
    }

    /// Generator-only checkpoint; loads back through `from_checkpoint`.
    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(&self.gen.spec).expect("spec"), step, self.store.clone());
        ck.extra = serde_json::json!({ "image_size": self.image_size });
        ck
    }

    pub fn generate_tensor(&self, s3: &Tensor) -> Result<Tensor> {
        let sess = Session::eval(&self.store);
        Ok(self.gen.forward(&sess, &Var::constant(s3.clone()))?.value().clone())
    }

    /// Cloth image for a mask, at the mask's resolution.
    pub fn generate(&self, mask: &BinaryMask) -> Result<ImageBuffer> {
        let s = self.image_size;
        let (h, w) = (mask.height(), mask.width());
        let m = if (h, w) == (s, s) { mask.clone() } else { mask.resize(s, s) };
        let out = ImageBuffer::from_tensor(&self.generate_tensor(&mask_to_s3(&m))?, 0)?;
        Ok(if (h, w) == (s, s) { out } else { out.resize(h, w, Interp::Bilinear) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanHistoryRow {
    pub step: u64,
    pub d_loss: f64,
    pub g_gan: f64,
    pub g_fm: f64,
    pub g_perc: f64,
    /// Mean absolute error of the generated batch against its targets.
    pub l1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GanHistory {
    pub rows: Vec<GanHistoryRow>,
}

impl GanHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,d_loss,g_gan,g_fm,g_perc\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.d_loss, r.g_gan, r.g_fm, r.g_perc));
        }
        s
    }
}

/// Alternating discriminator / generator updates over fixed pairs.
pub struct GanTrainer {
    pub cfg: GanTrainConfig,
    gen: Generator,
    disc: MultiScaleDiscriminator,
    pub store: ParamStore,
    g_adam: Adam,
    d_adam: Adam,
    extractor: Option<Extractor>,
    masks: Vec<Tensor>,
    targets: Vec<Tensor>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    step: u64,
    pub history: GanHistory,
}

impl GanTrainer {
    pub fn new(cfg: GanTrainConfig, pairs: &[(BinaryMask, ImageBuffer)]) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::Validation("translation training needs at least one pair".into()));
        }
        let gen = Generator::new(cfg.generator.clone())?;
        let disc = MultiScaleDiscriminator::new(cfg.discriminator.clone())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        gen.init(&mut store, &mut rng);
        disc.init(&mut store, &mut rng);
        let s = cfg.image_size;
        let mut masks = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for (m, x) in pairs {
            masks.push(mask_to_s3(&m.resize(s, s)));
            targets.push(x.to_rgb().resize(s, s, Interp::Bilinear).to_tensor());
        }
        Ok(Self {
            extractor: Extractor::from_id(&cfg.perceptual)?,
            g_adam: Adam::new(cfg.g_optimizer),
            d_adam: Adam::new(cfg.d_optimizer),
            cfg,
            gen,
            disc,
            store,
            masks,
            targets,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
            history: GanHistory::default(),
        })
    }

    /// Restores weights and the step counter from a training checkpoint.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        let expected = self.store.params().count();
        if self.store.load_matching(&ck.store) != expected {
            return Err(Error::Validation("checkpoint does not match the training networks".into()));
        }
        self.step = ck.step;
        Ok(())
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.masks.len().div_ceil(self.cfg.batch_size)
    }

    fn in_global_stage(&self) -> bool {
        self.cfg.generator.enhancers > 0
            && (self.step as usize) < self.cfg.global_epochs * self.steps_per_epoch()
    }

    fn next_batch(&mut self) -> (Tensor, Tensor) {
        let mut idx = Vec::with_capacity(self.cfg.batch_size);
        while idx.len() < self.cfg.batch_size.min(self.masks.len()) {
            if self.cursor >= self.order.len() {
                self.order = (0..self.masks.len()).collect();
                self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(self.epoch)));
                self.epoch += 1;
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let s: Vec<Tensor> = idx.iter().map(|&i| self.masks[i].clone()).collect();
        let x: Vec<Tensor> = idx.iter().map(|&i| self.targets[i].clone()).collect();
        (Tensor::stack_batch(&s), Tensor::stack_batch(&x))
    }

    fn generate(&self, sess: &Session, s3: &Var, global_only: bool) -> Result<Var> {
        if global_only {
            self.gen.forward_global(sess, s3)
        } else {
            self.gen.forward(sess, s3)
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<GanHistoryRow> {
        let global_only = self.in_global_stage();
        let (s, x) = self.next_batch();
        // The global stage works at reduced resolution, so the discriminator
        // sees pooled targets and conditioning there.
        let (sd, x) = if global_only {
            let sess_store = ParamStore::new();
            let sess = Session::eval(&sess_store);
            let (mut sd, mut x) = (Var::constant(s.clone()), Var::constant(x));
            for _ in 0..self.cfg.generator.enhancers {
                sd = sess.avg_pool2(&sd);
                x = sess.avg_pool2(&x);
            }
            (sd.value().clone(), x.value().clone())
        } else {
            (s.clone(), x)
        };
        let flavor = self.cfg.flavor;
        let sv = Var::constant(s);
        let sdv = Var::constant(sd);
        let xv = Var::constant(x.clone());

        let (d_loss, d_grads) = {
            let g_sess = Session::with_mode(&self.store, true, false);
            let fake = self.generate(&g_sess, &sv, global_only)?.detach();
            let d_sess = Session::train(&self.store);
            let real_stacks = self.disc.forward(&d_sess, &sdv, &xv);
            let fake_stacks = self.disc.forward(&d_sess, &sdv, &fake);
            let real_terms: Vec<Var> = real_stacks.iter().map(|st| gan_loss(&st.logits, true, flavor)).collect();
            let fake_terms: Vec<Var> = fake_stacks.iter().map(|st| gan_loss(&st.logits, false, flavor)).collect();
            let d_obj = discriminator_objective(&real_terms, &fake_terms);
            d_obj.backward();
            (d_obj.item(), d_sess.grads())
        };
        self.check_finite("discriminator", d_loss, &d_grads)?;
        let d_grads = d_grads.into_iter().filter(|(k, _)| k.starts_with("disc.")).collect();
        self.d_adam.step(&mut self.store, &d_grads);

        let (row, g_grads) = {
            let g_sess = Session::train(&self.store);
            let fake = self.generate(&g_sess, &sv, global_only)?;
            let d_sess = Session::with_mode(&self.store, true, false);
            let fake_stacks = self.disc.forward(&d_sess, &sdv, &fake);
            let real_stacks = self.disc.forward(&d_sess, &sdv, &xv);
            let gan_terms: Vec<Var> = fake_stacks.iter().map(|st| gan_loss(&st.logits, true, flavor)).collect();
            let fm = fm_loss(&real_stacks, &fake_stacks)?;
            let perc = self.extractor.as_ref().map(|e| perceptual_loss(e, &fake, &xv));
            let g_obj = generator_objective(&gan_terms, std::slice::from_ref(&fm), perc.as_ref(), self.cfg.lambda_fm, self.cfg.lambda_perc);
            g_obj.backward();
            let row = GanHistoryRow {
                step: self.step + 1,
                d_loss,
                g_gan: gan_terms.iter().map(Var::item).sum(),
                g_fm: fm.item(),
                g_perc: perc.as_ref().map_or(0.0, Var::item),
                l1: fake.value().zip_map(&x, |a, b| (a - b).abs()).mean(),
            };
            self.check_finite("generator", g_obj.item(), &g_sess.grads())?;
            (row, g_sess.grads())
        };
        let g_grads = g_grads.into_iter().filter(|(k, _)| k.starts_with("gen.")).collect();
        self.g_adam.step(&mut self.store, &g_grads);
        self.step += 1;
        self.history.rows.push(row.clone());
        Ok(row)
    }

    fn check_finite(&self, what: &str, loss: f64, grads: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { step: self.step, detail: format!("{what} objective {loss}") });
        }
        Ok(())
    }

    /// Runs `n` steps, checkpointing into `ckpt_dir` at the configured cadence.
    pub fn run(&mut self, n: usize, ckpt_dir: Option<&Path>) -> Result<()> {
        for _ in 0..n {
            self.step()?;
            if let Some(dir) = ckpt_dir {
                let every = self.cfg.checkpoint_every as u64;
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(&dir.join(format!("transnet_step{:06}.ckpt", self.step)))?;
                }
            }
        }
        Ok(())
    }

    /// Runs the configured number of epochs.
    pub fn run_epochs(&mut self, ckpt_dir: Option<&Path>) -> Result<()> {
        let n = self.cfg.epochs * self.steps_per_epoch();
        self.run(n.saturating_sub(self.step as usize), ckpt_dir)
    }

    /// Generator and discriminator weights with the generator spec.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.cfg.generator).expect("spec"),
            self.step,
            self.store.clone(),
        );
        ck.extra = serde_json::json!({
            "image_size": self.cfg.image_size,
            "discriminator": self.cfg.discriminator,
        });
        ck
    }

    pub fn model(&self) -> Result<GanModel> {
        GanModel::from_checkpoint(&self.checkpoint())
    }
}

/// Trains for `cfg.epochs` epochs from scratch.
pub fn train_translation(pairs: &[(BinaryMask, ImageBuffer)], cfg: &GanTrainConfig) -> Result<(GanModel, GanHistory)> {
    let mut t = GanTrainer::new(cfg.clone(), pairs)?;
    t.run_epochs(None)?;
    Ok((t.model()?, t.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn gen_store(gen: &Generator, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        gen.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn small_gen(enhancers: usize) -> Generator {
        Generator::new(GeneratorSpec {
            base_channels: 2,
            global_downsamples: 2,
            residual_blocks: 1,
            local_residual_blocks: 1,
            enhancers,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn enhancer_doubles_resolution_over_global_stage() {
        for e in 0..=2 {
            let gen = small_gen(e);
            let store = gen_store(&gen, 1);
            let sess = Session::eval(&store).traced();
            let out = gen.forward(&sess, &Var::constant(rand_tensor(&[1, 3, 32, 32], 2))).unwrap();
            assert_eq!(out.shape(), &[1, 3, 32, 32]);
            let trace: std::collections::BTreeMap<_, _> = sess.trace().into_iter().collect();
            assert_eq!(trace["gen.global"][2], 32 >> e);
            for n in 1..=e {
                assert_eq!(trace[&format!("gen.enh{n}")][2], 32 >> (e - n));
            }
            let g = gen.forward_global(&Session::eval(&store), &Var::constant(rand_tensor(&[1, 3, 32, 32], 2))).unwrap();
            assert_eq!(g.shape()[2] << e, 32);
        }
    }

    #[test]
    fn global_and_first_enhancer_reach_wide_target() {
        let gen = Generator::new(GeneratorSpec {
            base_channels: 1,
            global_downsamples: 1,
            residual_blocks: 1,
            local_residual_blocks: 1,
            enhancers: 1,
            ..Default::default()
        })
        .unwrap();
        let store = gen_store(&gen, 3);
        let sess = Session::eval(&store).traced();
        let out = gen.forward(&sess, &Var::constant(Tensor::zeros(&[1, 3, 1024, 2048]))).unwrap();
        assert_eq!(out.shape(), &[1, 3, 1024, 2048]);
        let global = sess.trace().into_iter().find(|(k, _)| k == "gen.global").unwrap().1;
        assert_eq!(&global[2..], &[512, 1024]);
    }

    #[test]
    fn incompatible_size_is_rejected() {
        let gen = small_gen(1);
        let store = gen_store(&gen, 1);
        assert!(gen.forward(&Session::eval(&store), &Var::constant(rand_tensor(&[1, 3, 20, 32], 0))).is_err());
    }

    #[test]
    fn conditioning_is_live_and_batch_rows_agree() {
        for arch in [GeneratorArch::CoarseToFine, GeneratorArch::Unet] {
            let gen = Generator::new(GeneratorSpec { arch, ..small_gen(0).spec }).unwrap();
            let store = gen_store(&gen, 4);
            let sess = Session::eval(&store);
            let mask = BinaryMask::from_fn(16, 16, |r, c| (4..12).contains(&r) && (3..10).contains(&c));
            let zeros = gen.forward(&sess, &Var::constant(Tensor::zeros(&[1, 3, 16, 16]))).unwrap();
            let shaped = gen.forward(&sess, &Var::constant(mask_to_s3(&mask))).unwrap();
            let l1 = zeros.value().zip_map(shaped.value(), |a, b| (a - b).abs()).mean();
            assert!(l1 > 0.0, "{arch:?}");
            let two = Tensor::stack_batch(&[mask_to_s3(&mask), mask_to_s3(&mask)]);
            let out = gen.forward(&sess, &Var::constant(two)).unwrap();
            assert_eq!(out.value().batch_item(0), out.value().batch_item(1));
            assert_eq!(out.value().batch_item(0), *shaped.value());
        }
    }

    #[test]
    fn generator_output_in_unit_range_for_extreme_inputs() {
        let gen = small_gen(1);
        let store = gen_store(&gen, 5);
        let x = rand_tensor(&[1, 3, 16, 16], 6).map(|v| (v - 0.5) * 1e4);
        let out = gen.forward(&Session::eval(&store), &Var::constant(x)).unwrap();
        assert!(out.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pyramid_examples() {
        let img = ImageBuffer::filled(512, 512, &[0.25, 0.5, 0.75]);
        let levels = image_pyramid(&img, 3).unwrap();
        assert_eq!(levels.iter().map(|l| l.height()).collect::<Vec<_>>(), vec![512, 256, 128]);
        for l in &levels {
            assert!(l.data().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
        }
        assert_eq!(image_pyramid(&img, 1).unwrap(), vec![img.clone()]);
        assert!(image_pyramid(&img, 0).is_err());
    }

    fn disc(scales: usize, layers: usize) -> (MultiScaleDiscriminator, ParamStore) {
        let d = MultiScaleDiscriminator::new(DiscriminatorSpec { num_scales: scales, layers, base_channels: 4 }).unwrap();
        let mut store = ParamStore::new();
        d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
        (d, store)
    }

    #[test]
    fn discriminator_pyramid_and_stack_shapes() {
        let (d, store) = disc(3, 3);
        let sess = Session::eval(&store).traced();
        let s = Var::constant(rand_tensor(&[1, 3, 256, 256], 8));
        let x = Var::constant(rand_tensor(&[1, 3, 256, 256], 9));
        let stacks = d.forward(&sess, &s, &x);
        assert_eq!(stacks.len(), 3);
        let logit_sides: Vec<usize> = stacks.iter().map(|st| st.logits.shape()[2]).collect();
        assert!(logit_sides.windows(2).all(|w| w[0] > w[1]), "{logit_sides:?}");
        for st in &stacks {
            assert_eq!(st.depth(), 3 + 1);
        }
        let inputs: Vec<usize> = sess.trace().iter().filter(|(k, _)| k.ends_with(".input")).map(|(_, s)| s[2]).collect();
        assert_eq!(inputs, vec![256, 128, 64]);
        let again = d.forward(&Session::eval(&store), &s, &x);
        for (a, b) in stacks.iter().zip(&again) {
            assert_eq!(a.logits.value(), b.logits.value());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn pyramid_sides_are_ceil_halvings(h in 3usize..70, w in 3usize..70) {
            let (d, store) = disc(3, 1);
            let sess = Session::eval(&store).traced();
            d.forward(&sess, &Var::constant(rand_tensor(&[1, 3, h, w], 1)), &Var::constant(rand_tensor(&[1, 3, h, w], 2)));
            let inputs: Vec<Vec<usize>> = sess.trace().into_iter().filter(|(k, _)| k.ends_with(".input")).map(|(_, s)| s).collect();
            for (k, s) in inputs.iter().enumerate() {
                prop_assert_eq!(s[2], h.div_ceil(1 << k));
                prop_assert_eq!(s[3], w.div_ceil(1 << k));
            }
        }

        #[test]
        fn fm_loss_is_non_negative(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            let st = |v: &Vec<f64>| FeatureStack {
                features: vec![Var::constant(Tensor::new(vec![1, 1, 2, 3], v.clone()))],
                logits: Var::constant(Tensor::scalar(0.0)),
            };
            prop_assert!(fm_loss(&[st(&a)], &[st(&b)]).unwrap().item() >= 0.0);
        }

        #[test]
        fn fm_loss_invariant_under_tiling(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
            let st = |v: Vec<f64>, n: usize| FeatureStack {
                features: vec![Var::constant(Tensor::new(vec![1, 1, 1, n], v))],
                logits: Var::constant(Tensor::scalar(0.0)),
            };
            let tile = |v: &Vec<f64>| v.iter().chain(v.iter()).copied().collect::<Vec<_>>();
            let base = fm_loss(&[st(a.clone(), 4)], &[st(b.clone(), 4)]).unwrap().item();
            let tiled = fm_loss(&[st(tile(&a), 8)], &[st(tile(&b), 8)]).unwrap().item();
            prop_assert!((base - tiled).abs() < 1e-12);
        }

        #[test]
        fn perceptual_loss_is_symmetric(seed in 0u64..1000) {
            let e = Extractor::random_conv(RANDCONV_SEED);
            let x = Var::constant(rand_tensor(&[1, 3, 8, 8], seed));
            let y = Var::constant(rand_tensor(&[1, 3, 8, 8], seed + 1));
            let a = perceptual_loss(&e, &x, &y).item();
            let b = perceptual_loss(&e, &y, &x).item();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gan_loss_examples() {
        let zeros = Var::constant(Tensor::zeros(&[1, 1, 3, 3]));
        for real in [true, false] {
            assert!((gan_loss(&zeros, real, GanFlavor::Vanilla).item() - std::f64::consts::LN_2).abs() < 1e-9);
        }
        let big = Var::constant(Tensor::full(&[1, 1, 3, 3], 100.0));
        assert!(gan_loss(&big, true, GanFlavor::Vanilla).item() < 1e-30);
        assert_eq!(gan_loss(&zeros, true, GanFlavor::LeastSquares).item(), 1.0);
        assert_eq!(gan_loss(&zeros, false, GanFlavor::LeastSquares).item(), 0.0);
    }

    #[test]
    fn fm_loss_examples() {
        let st = |v: Vec<f64>| FeatureStack {
            features: vec![Var::constant(Tensor::new(vec![1, 1, 1, 2], v))],
            logits: Var::constant(Tensor::new(vec![1, 1, 1, 1], vec![9.0])),
        };
        assert_eq!(fm_loss(&[st(vec![1.0, 2.0])], &[st(vec![2.0, 4.0])]).unwrap().item(), 1.5);
        assert_eq!(fm_loss(&[st(vec![1.0, 2.0])], &[st(vec![1.0, 2.0])]).unwrap().item(), 0.0);
        assert!(fm_loss(&[st(vec![1.0, 2.0])], &[]).is_err());
    }

    #[test]
    fn perceptual_examples() {
        let zeros = Var::constant(Tensor::zeros(&[1, 3, 4, 4]));
        let ones = Var::constant(Tensor::full(&[1, 3, 4, 4], 1.0));
        assert_eq!(perceptual_loss(&Extractor::Identity, &zeros, &ones).item(), 1.0);
        let e = Extractor::random_conv(RANDCONV_SEED);
        assert_eq!(perceptual_loss(&e, &ones, &ones).item(), 0.0);
        assert!(Extractor::from_id("off").unwrap().is_none());
        assert!(Extractor::from_id("vgg").is_err());
    }

    #[test]
    fn extractor_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.ckpt");
        let e = Extractor::random_conv(3);
        e.checkpoint().unwrap().save(&path).unwrap();
        let back = Extractor::from_id(&format!("checkpoint:{}", path.display())).unwrap().unwrap();
        let x = Var::constant(rand_tensor(&[1, 3, 8, 8], 1));
        let y = Var::constant(rand_tensor(&[1, 3, 8, 8], 2));
        assert_eq!(perceptual_loss(&e, &x, &y).item(), perceptual_loss(&back, &x, &y).item());
    }

    #[test]
    fn objective_examples() {
        let c = |v: f64| Var::constant(Tensor::scalar(v));
        assert_eq!(generator_objective(&[c(1.0)], &[c(2.0)], Some(&c(3.0)), 10.0, 10.0).item(), 51.0);
        assert_eq!(generator_objective(&[c(0.5), c(0.25)], &[c(2.0)], Some(&c(3.0)), 0.0, 0.0).item(), 0.75);
        let fm_part = |l: f64| generator_objective(&[c(1.0)], &[c(2.0)], None, l, 0.0).item() - 1.0;
        assert_eq!(fm_part(20.0), 2.0 * fm_part(10.0));
        assert_eq!(discriminator_objective(&[c(1.0), c(2.0)], &[c(3.0), c(4.0)]).item(), 10.0);
    }

    fn tiny_pairs(n: usize, size: usize) -> Vec<(BinaryMask, ImageBuffer)> {
        crate::data::synth_samples(n, 64, 11, crate::data::DEFAULT_LABEL)
            .unwrap()
            .into_iter()
            .map(|s| {
                let m = s.mask.resize(size, size);
                (m.clone(), cloth_target(&s.target.resize(size, size, Interp::Bilinear), &m))
            })
            .collect()
    }

    fn tiny_cfg() -> GanTrainConfig {
        GanTrainConfig {
            generator: GeneratorSpec { base_channels: 2, global_downsamples: 2, residual_blocks: 1, ..Default::default() },
            discriminator: DiscriminatorSpec { num_scales: 2, layers: 2, base_channels: 2 },
            image_size: 16,
            batch_size: 2,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_keeps_initial_weights() {
        let pairs = tiny_pairs(2, 16);
        let cfg = GanTrainConfig { epochs: 0, ..tiny_cfg() };
        let (model, history) = train_translation(&pairs, &cfg).unwrap();
        assert!(history.rows.is_empty());
        let fresh = GanTrainer::new(cfg, &pairs).unwrap().model().unwrap();
        assert_eq!(model.store, fresh.store);
    }

    #[test]
    fn training_is_deterministic_and_staged() {
        let pairs = tiny_pairs(3, 16);
        let cfg = GanTrainConfig {
            generator: GeneratorSpec { enhancers: 1, ..tiny_cfg().generator },
            global_epochs: 1,
            ..tiny_cfg()
        };
        let (_, a) = train_translation(&pairs, &cfg).unwrap();
        let (_, b) = train_translation(&pairs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 4);
        assert_eq!(a.to_csv().lines().next(), Some("step,d_loss,g_gan,g_fm,g_perc"));
        assert!(a.rows.iter().all(|r| r.g_perc > 0.0 && r.d_loss > 0.0));
    }

    #[test]
    fn checkpoint_restores_generator() {
        let pairs = tiny_pairs(2, 16);
        let mut t = GanTrainer::new(tiny_cfg(), &pairs).unwrap();
        t.run(1, None).unwrap();
        let ck = Checkpoint::from_bytes(&t.checkpoint().to_bytes().unwrap(), Path::new("m")).unwrap();
        let model = GanModel::from_checkpoint(&ck).unwrap();
        let mask = &pairs[0].0;
        assert_eq!(model.generate(mask).unwrap(), t.model().unwrap().generate(mask).unwrap());
        let mut resumed = GanTrainer::new(tiny_cfg(), &pairs).unwrap();
        resumed.resume(&ck).unwrap();
        assert_eq!(resumed.steps_done(), 1);
        assert_eq!(resumed.store, t.store);
    }

    #[test]
    fn missing_targets_are_reported() {
        let s = crate::data::synth_samples(1, 32, 1, crate::data::DEFAULT_LABEL).unwrap().remove(0);
        let l = LoadedSample { sample: s.paired(), target: None };
        assert!(gan_pairs(&[l], 16).is_err());
    }

    /// Central differences on every parameter of a tiny G/D pair.
    #[test]
    fn tiny_gan_gradients_match_finite_differences() {
        let gen = Generator::new(GeneratorSpec { base_channels: 2, global_downsamples: 1, residual_blocks: 1, ..Default::default() }).unwrap();
        let d = MultiScaleDiscriminator::new(DiscriminatorSpec { num_scales: 2, layers: 2, base_channels: 2 }).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        gen.init(&mut store, &mut rng);
        d.init(&mut store, &mut rng);
        for (_, t) in store.params_mut() {
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
        let s = Var::constant(rand_tensor(&[1, 3, 8, 8], 22).map(|v| (v > 0.5) as u8 as f64));
        let x = Var::constant(rand_tensor(&[1, 3, 8, 8], 23));
        let ext = Extractor::random_conv(RANDCONV_SEED);
        let g_obj = |store: &ParamStore, grad: bool| {
            let gs = Session::with_mode(store, true, grad);
            let ds = Session::with_mode(store, true, grad);
            let fake = gen.forward(&gs, &s).unwrap();
            let fs = d.forward(&ds, &s, &fake);
            let rs = d.forward(&ds, &s, &x);
            let gan: Vec<Var> = fs.iter().map(|st| gan_loss(&st.logits, true, GanFlavor::Vanilla)).collect();
            let fm = fm_loss(&rs, &fs).unwrap();
            let perc = perceptual_loss(&ext, &fake, &x);
            let obj = generator_objective(&gan, &[fm], Some(&perc), 10.0, 10.0);
            if grad {
                obj.backward();
            }
            let mut g = gs.grads();
            g.extend(ds.grads());
            (obj.item(), g)
        };
        let d_obj = |store: &ParamStore, grad: bool| {
            let gs = Session::with_mode(store, true, false);
            let ds = Session::with_mode(store, true, grad);
            let fake = gen.forward(&gs, &s).unwrap();
            let real: Vec<Var> = d.forward(&ds, &s, &x).iter().map(|st| gan_loss(&st.logits, true, GanFlavor::Vanilla)).collect();
            let fk: Vec<Var> = d.forward(&ds, &s, &fake).iter().map(|st| gan_loss(&st.logits, false, GanFlavor::Vanilla)).collect();
            let obj = discriminator_objective(&real, &fk);
            if grad {
                obj.backward();
            }
            (obj.item(), ds.grads())
        };
        let mut probe = ChaCha8Rng::seed_from_u64(24);
        let mut checked = 0;
        for (objective, prefix) in [(&g_obj as &dyn Fn(&ParamStore, bool) -> (f64, _), "gen."), (&d_obj, "disc.")] {
            let (_, grads) = objective(&store, true);
            let names: Vec<&String> = grads.keys().filter(|k| k.starts_with(prefix)).collect();
            for _ in 0..60 {
                let name = names[probe.gen_range(0..names.len())];
                let i = probe.gen_range(0..grads[name].len());
                let h = 1e-6;
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= h;
                let numeric = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * h);
                let analytic = grads[name].data()[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
                assert!(rel <= 1e-3, "{name}[{i}]: {analytic} vs {numeric}");
                checked += 1;
            }
        }
        assert!(checked >= 100);
    }
}
