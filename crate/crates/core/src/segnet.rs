//! Nested-U saliency network: residual U-blocks, six-stage encoder,
//! five-stage decoder with side outputs and a fused map, plus the
//! multi-output loss, saliency metrics and the training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LoadedSample;
use crate::imaging::{BinaryMask, ImageBuffer};
use crate::nn::{Adam, AdamConfig, BatchNorm, Conv2d, Init, ParamStore, Session};
use crate::tensor::ops;
use crate::tensor::{Interp, Tensor, Var};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "segnet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsuSpec {
    pub height: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub dilated: bool,
}

impl RsuSpec {
    pub const fn new(height: usize, c_in: usize, c_mid: usize, c_out: usize, dilated: bool) -> Self {
        Self { height, c_in, c_mid, c_out, dilated }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.c_in == 0 || self.c_mid == 0 || self.c_out == 0 {
            return Err(Error::Config(format!("invalid residual U-block {self:?}")));
        }
        Ok(())
    }

    /// Smallest spatial side a non-dilated block accepts.
    pub fn min_side(&self) -> usize {
        if self.dilated {
            1
        } else {
            1 << (self.height - 1)
        }
    }
}

/// Conv 3x3 (padding = dilation) + batch norm + ReLU.
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm,
    label: String,
}

impl ConvUnit {
    fn new(name: &str, c_in: usize, c_out: usize, dilation: usize) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), c_in, c_out, 3).padding(dilation).dilation(dilation),
            bn: BatchNorm::new(format!("{name}.bn"), c_out),
            label: name.to_string(),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng, Init::FanInUniform);
        self.bn.init(store);
    }

    fn forward(&self, sess: &Session, x: &Var) -> Var {
        let y = ops::relu(&self.bn.forward(sess, &self.conv.forward(sess, x)));
        sess.record(&self.label, &y);
        y
    }
}

/// Residual U-block: `H(x) = F1(x) + U(F1(x))`, where `F1` is the input
/// unit (`<name>.in`) and `U` the inner encoder/decoder (`<name>.u.*`).
#[derive(Debug, Clone)]
pub struct Rsu {
    pub name: String,
    pub spec: RsuSpec,
    input: ConvUnit,
    encoder: Vec<ConvUnit>,
    decoder: Vec<ConvUnit>,
}

impl Rsu {
    pub fn new(name: impl Into<String>, spec: RsuSpec) -> Self {
        let name = name.into();
        let RsuSpec { height: l, c_in, c_mid, c_out, dilated } = spec;
        let dil = |level: usize| if dilated { 1 << (level - 1) } else if level == l { 2 } else { 1 };
        let input = ConvUnit::new(&format!("{name}.in"), c_in, c_out, 1);
        let encoder = (1..=l)
            .map(|i| ConvUnit::new(&format!("{name}.u.enc{i}"), if i == 1 { c_out } else { c_mid }, c_mid, dil(i)))
            .collect();
        let decoder = (1..l)
            .map(|i| ConvUnit::new(&format!("{name}.u.dec{i}"), 2 * c_mid, if i == 1 { c_out } else { c_mid }, dil(i)))
            .collect();
        Self { name, spec, input, encoder, decoder }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.input.init(store, rng);
        for u in self.encoder.iter().chain(&self.decoder) {
            u.init(store, rng);
        }
    }

    pub fn forward(&self, sess: &Session, x: &Var) -> Result<Var> {
        let [_, c, h, w] = x.value().dims4();
        if c != self.spec.c_in {
            return Err(Error::Shape(format!("{}: expected {} channels, got {c}", self.name, self.spec.c_in)));
        }
        if h.min(w) < self.spec.min_side() {
            return Err(Error::Config(format!(
                "{}: {h}x{w} input is smaller than the {} px this block needs",
                self.name,
                self.spec.min_side()
            )));
        }
        let l = self.spec.height;
        let hx_in = self.input.forward(sess, x);
        // enc[i] holds level i+1.
        let mut enc: Vec<Var> = Vec::with_capacity(l);
        let mut cur = hx_in.clone();
        for (i, unit) in self.encoder.iter().enumerate() {
            let level = i + 1;
            if !self.spec.dilated && level >= 2 && level < l {
                cur = ops::max_pool2(&cur);
                sess.record(&format!("{}.u.pool{}", self.name, level - 1), &cur);
            }
            cur = unit.forward(sess, &cur);
            enc.push(cur.clone());
        }
        let mut d = enc[l - 1].clone();
        for level in (1..l).rev() {
            let skip = &enc[level - 1];
            let [_, _, sh, sw] = skip.value().dims4();
            let up = sess.resize_bilinear(&d, sh, sw);
            d = self.decoder[level - 1].forward(sess, &ops::concat_channels(&[up, skip.clone()]));
        }
        let out = ops::add(&d, &hx_in);
        sess.record(&self.name, &out);
        Ok(out)
    }
}

/// What to do with inputs whose sides are not multiples of 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SizePolicy {
    #[default]
    Error,
    /// Resize to the nearest multiple of 32 and resize the maps back.
    Resize,
}

pub const SIZE_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct U2NetSpec {
    pub encoder: Vec<RsuSpec>,
    pub decoder: Vec<RsuSpec>,
    /// Channels of each side map (one probability map).
    pub side_channels: usize,
    pub input_size: usize,
    #[serde(default)]
    pub size_policy: SizePolicy,
}

impl U2NetSpec {
    /// Channel widths of the reference architecture.
    pub fn full() -> Self {
        Self::scaled(1, 320)
    }

    /// Quarter-width variant for desk-scale training.
    pub fn small() -> Self {
        Self::scaled(4, 64)
    }

    /// Reference widths divided by `divisor` (at least one channel each).
    pub fn scaled(divisor: usize, input_size: usize) -> Self {
        let c = |v: usize| (v / divisor).max(1);
        let e = [
            RsuSpec::new(7, 3, c(32), c(64), false),
            RsuSpec::new(6, c(64), c(32), c(128), false),
            RsuSpec::new(5, c(128), c(64), c(256), false),
            RsuSpec::new(4, c(256), c(128), c(512), false),
            RsuSpec::new(4, c(512), c(256), c(512), true),
            RsuSpec::new(4, c(512), c(256), c(512), true),
        ];
        let d = [
            RsuSpec::new(7, 2 * c(64), c(16), c(64), false),
            RsuSpec::new(6, 2 * c(128), c(32), c(64), false),
            RsuSpec::new(5, 2 * c(256), c(64), c(128), false),
            RsuSpec::new(4, 2 * c(512), c(128), c(256), false),
            RsuSpec::new(4, 2 * c(512), c(256), c(512), true),
        ];
        Self { encoder: e.to_vec(), decoder: d.to_vec(), side_channels: 1, input_size, size_policy: SizePolicy::Error }
    }

    /// Named preset or a JSON-encoded spec.
    pub fn from_name(name: &str, input_size: usize) -> Result<Self> {
        match name {
            "full" => Ok(Self { input_size, ..Self::full() }),
            "small" => Ok(Self { input_size, ..Self::small() }),
            other => Err(Error::Config(format!("unknown segmentation spec `{other}` (full|small)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.len() != 6 || self.decoder.len() != 5 {
            return Err(Error::Config("segmentation spec needs 6 encoder and 5 decoder stages".into()));
        }
        if !(self.encoder[4].dilated && self.encoder[5].dilated) {
            return Err(Error::Config("encoder stages 5 and 6 must be dilated".into()));
        }
        if self.side_channels != 1 {
            return Err(Error::Config("side outputs are single-channel probability maps".into()));
        }
        if self.input_size == 0 || self.input_size % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!("input size {} is not a multiple of {SIZE_MULTIPLE}", self.input_size)));
        }
        for s in self.encoder.iter().chain(&self.decoder) {
            s.validate()?;
        }
        let e = &self.encoder;
        let d = &self.decoder;
        let chain = e.windows(2).all(|w| w[0].c_out == w[1].c_in)
            && d[4].c_in == e[5].c_out + e[4].c_out
            && d[3].c_in == d[4].c_out + e[3].c_out
            && d[2].c_in == d[3].c_out + e[2].c_out
            && d[1].c_in == d[2].c_out + e[1].c_out
            && d[0].c_in == d[1].c_out + e[0].c_out
            && e[0].c_in == 3;
        if !chain {
            return Err(Error::Config("segmentation stage channel counts do not chain".into()));
        }
        Ok(())
    }
}

/// Probability maps of one forward pass, each `[N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct SaliencyOutput {
    pub fused: Var,
    /// Side maps from decoder stages 1..5 and encoder stage 6, in order.
    pub sides: Vec<Var>,
}

impl SaliencyOutput {
    /// Fused map first, then the six side maps.
    pub fn all_maps(&self) -> Vec<&Var> {
        std::iter::once(&self.fused).chain(self.sides.iter()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct U2Net {
    pub spec: U2NetSpec,
    encoder: Vec<Rsu>,
    decoder: Vec<Rsu>,
    sides: Vec<Conv2d>,
    fuse: Conv2d,
}

impl U2Net {
    pub fn new(spec: U2NetSpec) -> Result<Self> {
        spec.validate()?;
        let encoder = spec.encoder.iter().enumerate().map(|(i, s)| Rsu::new(format!("stage{}", i + 1), *s)).collect();
        let decoder = spec.decoder.iter().enumerate().map(|(i, s)| Rsu::new(format!("stage{}d", i + 1), *s)).collect();
        let side_in = [
            spec.decoder[0].c_out,
            spec.decoder[1].c_out,
            spec.decoder[2].c_out,
            spec.decoder[3].c_out,
            spec.decoder[4].c_out,
            spec.encoder[5].c_out,
        ];
        let sides = side_in.iter().enumerate().map(|(i, &c)| Conv2d::new(format!("side{}", i + 1), c, 1, 3).padding(1)).collect();
        let fuse = Conv2d::new("fuse", 6, 1, 1);
        Ok(Self { spec, encoder, decoder, sides, fuse })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in self.encoder.iter().chain(&self.decoder) {
            b.init(&mut store, &mut rng);
        }
        for s in &self.sides {
            s.init(&mut store, &mut rng, Init::FanInUniform);
        }
        self.fuse.init(&mut store, &mut rng, Init::FanInUniform);
        store
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Shape(format!("segmentation input {h}x{w} is not divisible by {SIZE_MULTIPLE}")));
        }
        Ok(())
    }

    /// Forward pass on an `[N, 3, H, W]` batch. Encoder stages 4 to 6 run
    /// at one resolution (pooling only after stages 1 to 3).
    pub fn forward(&self, sess: &Session, x: &Var) -> Result<SaliencyOutput> {
        let [_, _, h, w] = x.value().dims4();
        self.check_input(h, w)?;
        let e = &self.encoder;
        let hx1 = e[0].forward(sess, x)?;
        let hx2 = e[1].forward(sess, &ops::max_pool2(&hx1))?;
        let hx3 = e[2].forward(sess, &ops::max_pool2(&hx2))?;
        let hx4 = e[3].forward(sess, &ops::max_pool2(&hx3))?;
        let hx5 = e[4].forward(sess, &hx4)?;
        let hx6 = e[5].forward(sess, &hx5)?;

        let d = &self.decoder;
        let up_cat = |deep: &Var, skip: &Var| {
            let [_, _, sh, sw] = skip.value().dims4();
            ops::concat_channels(&[sess.resize_bilinear(deep, sh, sw), skip.clone()])
        };
        let hx5d = d[4].forward(sess, &up_cat(&hx6, &hx5))?;
        let hx4d = d[3].forward(sess, &up_cat(&hx5d, &hx4))?;
        let hx3d = d[2].forward(sess, &up_cat(&hx4d, &hx3))?;
        let hx2d = d[1].forward(sess, &up_cat(&hx3d, &hx2))?;
        let hx1d = d[0].forward(sess, &up_cat(&hx2d, &hx1))?;

        let feats = [&hx1d, &hx2d, &hx3d, &hx4d, &hx5d, &hx6];
        let logits: Vec<Var> = feats
            .iter()
            .zip(&self.sides)
            .map(|(f, conv)| sess.resize_bilinear(&conv.forward(sess, f), h, w))
            .collect();
        let fused_logit = self.fuse.forward(sess, &ops::concat_channels(&logits));
        Ok(SaliencyOutput { fused: ops::sigmoid(&fused_logit), sides: logits.iter().map(ops::sigmoid).collect() })
    }
}

/// Loss value and its seven terms (fused, then sides 1..6).
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub total: Var,
    pub terms: [f64; 7],
}

/// Sum of mean binary cross-entropies of all seven maps against `target`
/// (`[N, 1, H, W]` of zeros and ones).
pub fn seg_loss(out: &SaliencyOutput, target: &Tensor) -> Result<SegLoss> {
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("segmentation target is not binary".into()));
    }
    let maps = out.all_maps();
    let mut terms = [0.0; 7];
    let mut parts = Vec::with_capacity(7);
    for (i, m) in maps.iter().enumerate() {
        if m.shape() != target.shape() {
            return Err(Error::Shape(format!("map {:?} vs target {:?}", m.shape(), target.shape())));
        }
        let l = ops::bce_probs(m, target);
        terms[i] = l.item();
        parts.push(l);
    }
    Ok(SegLoss { total: ops::sum_all(&parts), terms })
}

/// Single-channel probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    /// Batch item `index` of a `[N, 1, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Self {
        let [_, c, h, w] = t.dims4();
        assert_eq!(c, 1, "probability maps are single-channel");
        Self { height: h, width: w, data: t.data()[index * h * w..(index + 1) * h * w].to_vec() }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::new(self.height, self.width, 1, self.data.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
            .expect("valid map")
    }

    pub fn resize(&self, height: usize, width: usize) -> ProbMap {
        let img = self.to_image().resize(height, width, Interp::Bilinear);
        ProbMap { height, width, data: img.data().iter().map(|&v| v as f64).collect() }
    }
}

/// `value >= threshold` is foreground, so ties go to foreground.
pub fn binarize(map: &ProbMap, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn(map.height, map.width, |r, c| map.get(r, c) >= threshold)
}

fn check_same(map: &ProbMap, gt: &BinaryMask) -> Result<()> {
    if map.height != gt.height() || map.width != gt.width() {
        return Err(Error::Shape(format!("map {}x{} vs mask {}x{}", map.height, map.width, gt.height(), gt.width())));
    }
    Ok(())
}

pub fn metric_mae(pred: &ProbMap, gt: &BinaryMask) -> Result<f64> {
    check_same(pred, gt)?;
    let sum: f64 = pred.data.iter().zip(gt.data()).map(|(&p, &g)| (p - g as f64).abs()).sum();
    Ok(sum / pred.data.len() as f64)
}

pub const DEFAULT_BETA_SQ: f64 = 0.3;
pub const FBETA_THRESHOLDS: usize = 256;

/// Maximum F-beta over thresholds `i / 255`, `i = 0..=255`. A threshold
/// with no true positives scores 0.
pub fn metric_max_fbeta(pred: &ProbMap, gt: &BinaryMask, beta_sq: f64) -> Result<f64> {
    check_same(pred, gt)?;
    let positives = gt.count();
    if positives == 0 {
        return Err(Error::Validation("max F-beta needs at least one positive ground-truth pixel".into()));
    }
    let mut best: f64 = 0.0;
    for i in 0..FBETA_THRESHOLDS {
        let t = i as f64 / (FBETA_THRESHOLDS - 1) as f64;
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&p, &g) in pred.data.iter().zip(gt.data()) {
            if p >= t {
                if g == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        best = best.max((1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub optimizer: AdamConfig,
    /// `small` or `full`.
    pub spec: String,
    pub input_size: usize,
    pub hflip: bool,
    pub random_crop: bool,
    /// Side of the random crop window relative to the input.
    pub crop_fraction: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub threshold: f64,
    pub label: String,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            spec: "small".into(),
            input_size: 64,
            hflip: true,
            random_crop: false,
            crop_fraction: 0.9,
            iterations: 200,
            batch_size: 4,
            checkpoint_every: 0,
            seed: 0,
            threshold: 0.5,
            label: crate::data::DEFAULT_LABEL.into(),
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("seg.batch_size must be at least 1".into()));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config("seg.crop_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("seg.threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn net_spec(&self) -> Result<U2NetSpec> {
        U2NetSpec::from_name(&self.spec, self.input_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegHistoryRow {
    pub step: u64,
    pub loss: f64,
    pub terms: [f64; 7],
}

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegHistory {
    pub rows: Vec<SegHistoryRow>,
}

impl SegHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,fused,side1,side2,side3,side4,side5,side6\n");
        for r in &self.rows {
            s.push_str(&r.step.to_string());
            for v in std::iter::once(r.loss).chain(r.terms) {
                s.push(',');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the first and last `window` values.
pub fn smoothed_ends(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if values.is_empty() || window == 0 {
        return None;
    }
    let k = window.min(values.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..k]), mean(&values[values.len() - k..])))
}

/// Inference wrapper: a network plus its weights.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub net: U2Net,
    pub store: ParamStore,
    pub threshold: f64,
}

impl SegModel {
    pub fn new(spec: U2NetSpec, seed: u64) -> Result<Self> {
        let net = U2Net::new(spec)?;
        let store = net.init(seed);
        Ok(Self { net, store, threshold: 0.5 })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: U2NetSpec = serde_json::from_value(ck.spec.clone())?;
        let net = U2Net::new(spec)?;
        let mut store = net.init(0);
        let expected = store.params().count() + store.buffers().count();
        if store.load_matching(&ck.store) != expected {
            return Err(Error::Validation("segmentation checkpoint does not match its spec".into()));
        }
        let threshold = ck.extra.get("threshold").and_then(|v| v.as_f64()).unwrap_or(0.5);
        Ok(Self { net, store, threshold })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, CHECKPOINT_KIND)?)
    }

    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(&self.net.spec).expect("spec"), step, self.store.clone());
        ck.extra = serde_json::json!({ "threshold": self.threshold });
        ck
    }

    /// Saliency maps for a batch tensor, evaluated with running statistics.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let sess = Session::eval(&self.store);
        let out = self.net.forward(&sess, &Var::constant(x.clone()))?;
        Ok((out.fused.value().clone(), out.sides.iter().map(|s| s.value().clone()).collect()))
    }

    /// Fused saliency of one image at the image's own resolution. The
    /// image is resized to the network input size first.
    pub fn predict(&self, img: &ImageBuffer) -> Result<ProbMap> {
        let s = self.net.spec.input_size;
        let rgb = img.to_rgb();
        let (h, w) = (rgb.height(), rgb.width());
        let input = if (h, w) == (s, s) { rgb } else { rgb.resize(s, s, Interp::Bilinear) };
        let (fused, _) = self.forward_tensor(&input.to_tensor())?;
        let map = ProbMap::from_tensor(&fused, 0);
        Ok(if (h, w) == (s, s) { map } else { map.resize(h, w) })
    }

    /// Saliency at the image's native size, honouring the size policy.
    pub fn predict_native(&self, img: &ImageBuffer) -> Result<ProbMap> {
        let (h, w) = (img.height(), img.width());
        let fits = h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 && h > 0 && w > 0;
        if fits {
            let (fused, _) = self.forward_tensor(&img.to_rgb().to_tensor())?;
            return Ok(ProbMap::from_tensor(&fused, 0));
        }
        match self.net.spec.size_policy {
            SizePolicy::Error => {
                Err(Error::Shape(format!("segmentation input {h}x{w} is not divisible by {SIZE_MULTIPLE}")))
            }
            SizePolicy::Resize => {
                let round = |v: usize| (((v + SIZE_MULTIPLE / 2) / SIZE_MULTIPLE) * SIZE_MULTIPLE).max(SIZE_MULTIPLE);
                let resized = img.to_rgb().resize(round(h), round(w), Interp::Bilinear);
                let (fused, _) = self.forward_tensor(&resized.to_tensor())?;
                Ok(ProbMap::from_tensor(&fused, 0).resize(h, w))
            }
        }
    }

    pub fn segment(&self, img: &ImageBuffer) -> Result<BinaryMask> {
        Ok(binarize(&self.predict(img)?, self.threshold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub mae: f64,
    pub max_fbeta: f64,
    pub iou: f64,
}

/// Mean MAE, max F-beta and IoU of the binarized fused map.
pub fn evaluate(model: &SegModel, samples: &[LoadedSample]) -> Result<SegMetrics> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples to evaluate".into()));
    }
    let (mut mae, mut fb, mut iou) = (0.0, 0.0, 0.0);
    for s in samples {
        let map = model.predict(&s.sample.image)?;
        mae += metric_mae(&map, &s.sample.mask)?;
        fb += metric_max_fbeta(&map, &s.sample.mask, DEFAULT_BETA_SQ)?;
        iou += binarize(&map, model.threshold).iou(&s.sample.mask);
    }
    let n = samples.len() as f64;
    Ok(SegMetrics { mae: mae / n, max_fbeta: fb / n, iou: iou / n })
}

/// Resumable training loop over preloaded samples.
pub struct SegTrainer {
    pub cfg: SegTrainConfig,
    pub model: SegModel,
    adam: Adam,
    step: u64,
    images: Vec<Tensor>,
    masks: Vec<Tensor>,
    pub history: SegHistory,
}

impl SegTrainer {
    pub fn new(cfg: SegTrainConfig, samples: &[LoadedSample]) -> Result<Self> {
        cfg.validate()?;
        let model = SegModel { threshold: cfg.threshold, ..SegModel::new(cfg.net_spec()?, cfg.seed)? };
        Self::with_model(cfg, model, samples)
    }

    /// Continues from existing weights (transfer learning or resume).
    pub fn with_model(cfg: SegTrainConfig, model: SegModel, samples: &[LoadedSample]) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Validation("segmentation training needs at least one sample".into()));
        }
        let s = model.net.spec.input_size;
        let mut images = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        for l in samples {
            images.push(l.sample.image.resize(s, s, Interp::Bilinear).to_tensor());
            masks.push(l.sample.mask.resize(s, s).to_tensor(1));
        }
        Ok(Self { adam: Adam::new(cfg.optimizer), cfg, model, step: 0, images, masks, history: SegHistory::default() })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    fn batch(&self) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = self.images.len();
        let bs = self.cfg.batch_size;
        let idx: Vec<usize> = if bs <= n {
            sample_indices(&mut rng, n, bs).into_vec()
        } else {
            (0..bs).map(|_| rng.gen_range(0..n)).collect()
        };
        let s = self.model.net.spec.input_size;
        let mut xs = Vec::with_capacity(bs);
        let mut ys = Vec::with_capacity(bs);
        for i in idx {
            let (mut x, mut y) = (self.images[i].clone(), self.masks[i].clone());
            if self.cfg.random_crop {
                let side = ((s as f64 * self.cfg.crop_fraction).round() as usize).clamp(1, s);
                let x0 = rng.gen_range(0..=s - side);
                let y0 = rng.gen_range(0..=s - side);
                let img = ImageBuffer::from_tensor(&x, 0).expect("image tensor");
                x = img.crop(x0, y0, side, side).resize(s, s, Interp::Bilinear).to_tensor();
                let m = BinaryMask::from_image(&ImageBuffer::from_tensor(&y, 0).expect("mask tensor"), 0.5);
                y = m.crop(x0, y0, side, side).resize(s, s).to_tensor(1);
            }
            if self.cfg.hflip && rng.gen_bool(0.5) {
                x = x.flip_horizontal();
                y = y.flip_horizontal();
            }
            xs.push(x);
            ys.push(y);
        }
        (Tensor::stack_batch(&xs), Tensor::stack_batch(&ys))
    }

    /// One optimization step. Returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let (x, y) = self.batch();
        let (loss, terms, grads, updates) = {
            let sess = Session::train(&self.model.store);
            let out = self.model.net.forward(&sess, &Var::constant(x))?;
            let loss = seg_loss(&out, &y)?;
            loss.total.backward();
            (loss.total.item(), loss.terms, sess.grads(), sess.take_norm_updates())
        };
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { step: self.step, detail: format!("segmentation loss {loss}") });
        }
        self.adam.step(&mut self.model.store, &grads);
        self.model.store.apply_norm_updates(&updates);
        self.step += 1;
        self.history.rows.push(SegHistoryRow { step: self.step, loss, terms });
        Ok(loss)
    }

    /// Runs `n` steps, saving a checkpoint into `ckpt_dir` at the configured
    /// cadence when given.
    pub fn run(&mut self, n: usize, ckpt_dir: Option<&Path>) -> Result<()> {
        for _ in 0..n {
            self.step()?;
            if let Some(dir) = ckpt_dir {
                let every = self.cfg.checkpoint_every as u64;
                if every > 0 && self.step % every == 0 {
                    self.model.checkpoint(self.step).save(&dir.join(format!("segnet_step{:06}.ckpt", self.step)))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint(self.step)
    }
}

/// Trains from scratch for `cfg.iterations` steps.
pub fn train_segmentation(samples: &[LoadedSample], cfg: &SegTrainConfig) -> Result<(SegModel, SegHistory)> {
    let mut t = SegTrainer::new(cfg.clone(), samples)?;
    t.run(cfg.iterations, None)?;
    Ok((t.model, t.history))
}

/// Gradients of `seg_loss` for one training-mode pass, keyed by parameter.
pub fn loss_and_grads(net: &U2Net, store: &ParamStore, x: &Tensor, y: &Tensor) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let sess = Session::train(store);
    let out = net.forward(&sess, &Var::constant(x.clone()))?;
    let loss = seg_loss(&out, y)?;
    loss.total.backward();
    Ok((loss.total.item(), sess.grads()))
}
