//! Parameter storage, layer building blocks and the Adam optimizer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::ops::{self, NormAxes};
use crate::tensor::{ConvOpts, PlaneMap, Tensor, Var};

/// Named weight arrays plus non-trainable buffers (running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every parameter and buffer of `other` whose name and shape
    /// match an entry here. Returns how many arrays were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, t) in &other.params {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                    copied += 1;
                }
            }
        }
        for (name, t) in &other.buffers {
            if let Some(dst) = self.buffers.get_mut(name) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Folds batch statistics from a training forward pass into the
    /// running buffers: `running = (1 - m) * running + m * batch`, with the
    /// unbiased batch variance.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) {
        for u in updates {
            let n = u.count as f64;
            let correction = if u.count > 1 { n / (n - 1.0) } else { 1.0 };
            if let Some(rm) = self.buffers.get_mut(&format!("{}.running_mean", u.layer)) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&u.mean) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{}.running_var", u.layer)) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&u.var) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * b * correction;
                }
            }
        }
    }
}

/// Batch statistics observed by one batch-norm layer.
#[derive(Debug, Clone)]
pub struct NormUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
    pub momentum: f64,
}

/// One forward pass over a [`ParamStore`]: hands out graph leaves for
/// parameters (one per name, so shared weights accumulate), tracks batch
/// statistics in training mode and optionally records intermediate shapes.
pub struct Session<'a> {
    store: &'a ParamStore,
    train: bool,
    grad: bool,
    leaves: RefCell<BTreeMap<String, Var>>,
    norm_updates: RefCell<Vec<NormUpdate>>,
    trace: Option<RefCell<Vec<(String, Vec<usize>)>>>,
    map_cache: RefCell<BTreeMap<(u8, usize, usize, usize, usize), Rc<PlaneMap>>>,
}

impl<'a> Session<'a> {
    /// Training-mode pass with parameter gradients.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::with_mode(store, true, true)
    }

    /// Inference pass: running statistics, no gradients.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::with_mode(store, false, false)
    }

    pub fn with_mode(store: &'a ParamStore, train: bool, grad: bool) -> Self {
        Self {
            store,
            train,
            grad,
            leaves: RefCell::new(BTreeMap::new()),
            norm_updates: RefCell::new(Vec::new()),
            trace: None,
            map_cache: RefCell::new(BTreeMap::new()),
        }
    }

    /// Records the output shape of every named block.
    pub fn traced(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.leaves.borrow().get(name) {
            return v.clone();
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = if self.grad { Var::leaf(value) } else { Var::constant(value) };
        self.leaves.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.store.buffer(name).unwrap_or_else(|| panic!("buffer `{name}` missing from store"))
    }

    /// Gradients of every parameter touched in this pass (after backward).
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.leaves
            .borrow()
            .iter()
            .map(|(name, v)| (name.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect()
    }

    pub fn take_norm_updates(&self) -> Vec<NormUpdate> {
        std::mem::take(&mut *self.norm_updates.borrow_mut())
    }

    pub fn record(&self, label: &str, v: &Var) {
        if let Some(trace) = &self.trace {
            trace.borrow_mut().push((label.to_string(), v.shape().to_vec()));
        }
    }

    pub fn trace(&self) -> Vec<(String, Vec<usize>)> {
        self.trace.as_ref().map(|t| t.borrow().clone()).unwrap_or_default()
    }

    /// Memoized plane maps, keyed by kind and sizes.
    fn plane_map(&self, kind: u8, dims: (usize, usize, usize, usize), build: impl FnOnce() -> PlaneMap) -> Rc<PlaneMap> {
        let key = (kind, dims.0, dims.1, dims.2, dims.3);
        self.map_cache.borrow_mut().entry(key).or_insert_with(|| Rc::new(build())).clone()
    }

    pub fn resize_bilinear(&self, x: &Var, h: usize, w: usize) -> Var {
        let [_, _, ih, iw] = x.value().dims4();
        if (ih, iw) == (h, w) {
            return x.clone();
        }
        let map = self.plane_map(0, (ih, iw, h, w), || {
            PlaneMap::resize(ih, iw, h, w, crate::tensor::Interp::Bilinear)
        });
        ops::plane_map(x, map)
    }

    pub fn resize_nearest(&self, x: &Var, h: usize, w: usize) -> Var {
        let [_, _, ih, iw] = x.value().dims4();
        if (ih, iw) == (h, w) {
            return x.clone();
        }
        let map = self.plane_map(1, (ih, iw, h, w), || {
            PlaneMap::resize(ih, iw, h, w, crate::tensor::Interp::Nearest)
        });
        ops::plane_map(x, map)
    }

    pub fn avg_pool2(&self, x: &Var) -> Var {
        let [_, _, ih, iw] = x.value().dims4();
        let map = self.plane_map(2, (ih, iw, 0, 0), || PlaneMap::avg_pool2(ih, iw));
        ops::plane_map(x, map)
    }

    pub fn reflect_pad(&self, x: &Var, pad: usize) -> Var {
        if pad == 0 {
            return x.clone();
        }
        let [_, _, ih, iw] = x.value().dims4();
        let map = self.plane_map(3, (ih, iw, pad, 0), || PlaneMap::reflect_pad(ih, iw, pad));
        ops::plane_map(x, map)
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    FanInUniform,
    /// Normal(0, std) weights, zero bias.
    Normal(f64),
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Square-kernel convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub opts: ConvOpts,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, opts: ConvOpts::default(), bias: true }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.opts.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.opts.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.opts.dilation = dilation;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, init: Init) {
        let fan_in = (self.c_in * self.kernel * self.kernel) as f64;
        let n = self.c_out * self.c_in * self.kernel * self.kernel;
        let bound = 1.0 / fan_in.sqrt();
        let weights: Vec<f64> = match init {
            Init::FanInUniform => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
            Init::Normal(std) => (0..n).map(|_| std * sample_normal(rng)).collect(),
        };
        store.insert(self.weight_name(), Tensor::new(vec![self.c_out, self.c_in, self.kernel, self.kernel], weights));
        if self.bias {
            let b: Vec<f64> = match init {
                Init::FanInUniform => (0..self.c_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                Init::Normal(_) => vec![0.0; self.c_out],
            };
            store.insert(self.bias_name(), Tensor::new(vec![self.c_out], b));
        }
    }

    pub fn forward(&self, sess: &Session, x: &Var) -> Var {
        let w = sess.param(&self.weight_name());
        let b = self.bias.then(|| sess.param(&self.bias_name()));
        ops::conv2d(x, &w, b.as_ref(), self.opts)
    }
}

/// Batch normalization with learnable affine and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels, eps: 1e-5, momentum: 0.1 }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.weight", self.name), Tensor::full(&[self.channels], 1.0));
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.channels]));
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&[self.channels]));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::full(&[self.channels], 1.0));
    }

    pub fn forward(&self, sess: &Session, x: &Var) -> Var {
        let gamma = sess.param(&format!("{}.weight", self.name));
        let beta = sess.param(&format!("{}.bias", self.name));
        if sess.is_training() {
            let [n, _, h, w] = x.value().dims4();
            let (xn, mean, var) = ops::normalize(x, NormAxes::Batch, self.eps);
            sess.norm_updates.borrow_mut().push(NormUpdate {
                layer: self.name.clone(),
                mean,
                var,
                count: n * h * w,
                momentum: self.momentum,
            });
            ops::channel_affine(&xn, &gamma, &beta)
        } else {
            let rm = sess.buffer(&format!("{}.running_mean", self.name));
            let rv = sess.buffer(&format!("{}.running_var", self.name));
            let g = gamma.value().data();
            let b = beta.value().data();
            let scale: Vec<f64> = (0..self.channels).map(|c| g[c] / (rv.data()[c] + self.eps).sqrt()).collect();
            let shift: Vec<f64> = (0..self.channels).map(|c| b[c] - rm.data()[c] * scale[c]).collect();
            ops::channel_affine(
                x,
                &Var::constant(Tensor::new(vec![self.channels], scale)),
                &Var::constant(Tensor::new(vec![self.channels], shift)),
            )
        }
    }
}

/// Parameter-free instance normalization.
pub fn instance_norm(x: &Var) -> Var {
    ops::normalize(x, NormAxes::Instance, 1e-5).0
}

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with bias correction and L2-style weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            for (((p, &g), m), v) in
                param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let g = g + weight_decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
