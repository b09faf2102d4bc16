//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::spatial::{self, ConvOpts, PlaneMap};
use super::{Tensor, Var};

pub fn add(a: &Var, b: &Var) -> Var {
    let value = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(value, vec![a.clone(), b.clone()], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
}

pub fn sub(a: &Var, b: &Var) -> Var {
    let value = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
    )
}

pub fn mul(a: &Var, b: &Var) -> Var {
    let value = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, p, _| vec![Some(g.zip_map(p[1], |g, y| g * y)), Some(g.zip_map(p[0], |g, x| g * x))]),
    )
}

pub fn scale(a: &Var, k: f64) -> Var {
    Var::from_op(a.value().map(|x| x * k), vec![a.clone()], Box::new(move |g, _, _| vec![Some(g.map(|v| v * k))]))
}

pub fn add_scalar(a: &Var, k: f64) -> Var {
    Var::from_op(a.value().map(|x| x + k), vec![a.clone()], Box::new(|g, _, _| vec![Some(g.clone())]))
}

/// Sum of same-shaped terms.
pub fn sum_all(terms: &[Var]) -> Var {
    assert!(!terms.is_empty(), "sum_all of nothing");
    let mut value = terms[0].value().clone();
    for t in &terms[1..] {
        value.add_assign(t.value());
    }
    let n = terms.len();
    Var::from_op(value, terms.to_vec(), Box::new(move |g, _, _| vec![Some(g.clone()); n]))
}

pub fn relu(a: &Var) -> Var {
    Var::from_op(
        a.value().map(|x| x.max(0.0)),
        vec![a.clone()],
        Box::new(|g, p, _| vec![Some(g.zip_map(p[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
    )
}

pub fn leaky_relu(a: &Var, slope: f64) -> Var {
    Var::from_op(
        a.value().map(|x| if x > 0.0 { x } else { slope * x }),
        vec![a.clone()],
        Box::new(move |g, p, _| vec![Some(g.zip_map(p[0], |g, x| if x > 0.0 { g } else { slope * g }))]),
    )
}

pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Var) -> Var {
    Var::from_op(
        a.value().map(sigmoid_value),
        vec![a.clone()],
        Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s)))]),
    )
}

pub fn tanh(a: &Var) -> Var {
    Var::from_op(
        a.value().map(f64::tanh),
        vec![a.clone()],
        Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, t| g * (1.0 - t * t)))]),
    )
}

pub fn mean(a: &Var) -> Var {
    let n = a.value().len() as f64;
    let shape = a.shape().to_vec();
    Var::from_op(
        Tensor::scalar(a.value().mean()),
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item() / n))]),
    )
}

/// Mean absolute difference, `(1/N) * ||a - b||_1`.
pub fn l1_mean(a: &Var, b: &Var) -> Var {
    let n = a.value().len() as f64;
    let value = a.value().zip_map(b.value(), |x, y| (x - y).abs()).mean();
    Var::from_op(
        Tensor::scalar(value),
        vec![a.clone(), b.clone()],
        Box::new(move |g, p, _| {
            let k = g.item() / n;
            let da = p[0].zip_map(p[1], |x, y| k * sign(x - y));
            let db = da.map(|v| -v);
            vec![Some(da), Some(db)]
        }),
    )
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean squared difference against a constant target value.
pub fn mse_to(a: &Var, target: f64) -> Var {
    let n = a.value().len() as f64;
    let value = a.value().data().iter().map(|x| (x - target).powi(2)).sum::<f64>() / n;
    Var::from_op(
        Tensor::scalar(value),
        vec![a.clone()],
        Box::new(move |g, p, _| {
            let k = 2.0 * g.item() / n;
            vec![Some(p[0].map(|x| k * (x - target)))]
        }),
    )
}

/// Mean binary cross-entropy of raw logits against a constant target,
/// evaluated in the overflow-free form `max(x,0) - x*t + ln(1 + e^-|x|)`.
pub fn bce_with_logits(logits: &Var, target: f64) -> Var {
    let n = logits.value().len() as f64;
    let value = logits
        .value()
        .data()
        .iter()
        .map(|&x| x.max(0.0) - x * target + (-x.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;
    Var::from_op(
        Tensor::scalar(value),
        vec![logits.clone()],
        Box::new(move |g, p, _| {
            let k = g.item() / n;
            vec![Some(p[0].map(|x| k * (sigmoid_value(x) - target)))]
        }),
    )
}

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities against a per-element target.
pub fn bce_probs(probs: &Var, target: &Tensor) -> Var {
    assert_eq!(probs.shape(), target.shape(), "bce target shape mismatch");
    let n = probs.value().len() as f64;
    let value = probs
        .value()
        .zip_map(target, |p, t| {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
        })
        .mean();
    let target = target.clone();
    Var::from_op(
        Tensor::scalar(value),
        vec![probs.clone()],
        Box::new(move |g, p, _| {
            let k = g.item() / n;
            vec![Some(p[0].zip_map(&target, |p, t| {
                if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                    0.0
                } else {
                    k * ((1.0 - t) / (1.0 - p) - t / p)
                }
            }))]
        }),
    )
}

/// 2-D convolution over NCHW input with an `[out, in, k, k]` kernel.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, opts: ConvOpts) -> Var {
    let value = spatial::conv2d_forward(x.value(), weight.value(), bias.map(|b| b.value()), opts);
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (need_x, need_w, has_bias) = (x.requires_grad(), weight.requires_grad(), bias.is_some());
    Var::from_op(
        value,
        parents,
        Box::new(move |g, p, _| {
            let (dx, dw, db) = spatial::conv2d_backward(g, p[0], p[1], opts, need_x, need_w);
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(Some(db));
            }
            out
        }),
    )
}

/// Applies a fixed sparse linear map to every (batch, channel) plane.
pub fn plane_map(x: &Var, map: Rc<PlaneMap>) -> Var {
    let value = map.apply(x.value());
    Var::from_op(value, vec![x.clone()], Box::new(move |g, _, _| vec![Some(map.apply_transpose(g))]))
}

/// 2x2 max pooling, stride 2, ceil rounding.
pub fn max_pool2(x: &Var) -> Var {
    let (value, argmax) = spatial::max_pool2_forward(x.value());
    let in_shape = x.shape().to_vec();
    let in_len = x.value().len();
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0; in_len];
            for (&idx, &gv) in argmax.iter().zip(g.data()) {
                dx[idx] += gv;
            }
            vec![Some(Tensor::new(in_shape.clone(), dx))]
        }),
    )
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let [n, _, h, w] = parts[0].value().dims4();
    let chans: Vec<usize> = parts
        .iter()
        .map(|p| {
            let [pn, pc, ph, pw] = p.value().dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels: mismatched N/H/W");
            pc
        })
        .collect();
    let total: usize = chans.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&chans) {
            data.extend_from_slice(&p.value().data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Var::from_op(
        Tensor::new(vec![n, total, h, w], data),
        parts.to_vec(),
        Box::new(move |g, _, _| {
            let mut grads: Vec<Vec<f64>> = chans.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
            for b in 0..n {
                let mut offset = b * total * plane;
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    gi.extend_from_slice(&g.data()[offset..offset + c * plane]);
                    offset += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Some(Tensor::new(vec![n, c, h, w], d)))
                .collect()
        }),
    )
}

/// Statistics grouping for [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    /// Per channel over batch and space (batch norm).
    Batch,
    /// Per (item, channel) over space (instance norm).
    Instance,
}

/// Standardizes `x` to zero mean and unit variance (biased variance plus
/// `eps`) over the selected axes. Returns the normalized output and the
/// per-channel batch mean and variance (only meaningful for
/// [`NormAxes::Batch`]).
pub fn normalize(x: &Var, axes: NormAxes, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.value().dims4();
    let plane = h * w;
    let groups: Vec<Vec<usize>> = match axes {
        NormAxes::Batch => (0..c).map(|ch| (0..n).map(|b| b * c + ch).collect()).collect(),
        NormAxes::Instance => (0..n * c).map(|p| vec![p]).collect(),
    };
    let data = x.value().data();
    let mut out = vec![0.0; data.len()];
    let mut inv_std = Vec::with_capacity(groups.len());
    let mut means = Vec::with_capacity(groups.len());
    let mut vars = Vec::with_capacity(groups.len());
    for planes in &groups {
        let m = (planes.len() * plane) as f64;
        let mean = planes.iter().map(|&p| data[p * plane..(p + 1) * plane].iter().sum::<f64>()).sum::<f64>() / m;
        let var = planes
            .iter()
            .map(|&p| data[p * plane..(p + 1) * plane].iter().map(|v| (v - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / m;
        let is = 1.0 / (var + eps).sqrt();
        for &p in planes {
            for i in p * plane..(p + 1) * plane {
                out[i] = (data[i] - mean) * is;
            }
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    let value = Tensor::new(vec![n, c, h, w], out);
    let var = Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _, y| {
            let gd = g.data();
            let yd = y.data();
            let mut dx = vec![0.0; gd.len()];
            for (planes, &is) in groups.iter().zip(&inv_std) {
                let m = (planes.len() * plane) as f64;
                let mut sum_g = 0.0;
                let mut sum_gy = 0.0;
                for &p in planes {
                    for i in p * plane..(p + 1) * plane {
                        sum_g += gd[i];
                        sum_gy += gd[i] * yd[i];
                    }
                }
                for &p in planes {
                    for i in p * plane..(p + 1) * plane {
                        dx[i] = is * (gd[i] - sum_g / m - yd[i] * sum_gy / m);
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], dx))]
        }),
    );
    (var, means, vars)
}

/// Per-channel affine `x * scale[c] + shift[c]` with `[C]`-shaped
/// scale and shift.
pub fn channel_affine(x: &Var, scale: &Var, shift: &Var) -> Var {
    let [n, c, h, w] = x.value().dims4();
    assert_eq!(scale.value().len(), c);
    assert_eq!(shift.value().len(), c);
    let plane = h * w;
    let mut out = x.value().data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let (s, t) = (scale.value().data()[ch], shift.value().data()[ch]);
            for v in &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v = *v * s + t;
            }
        }
    }
    Var::from_op(
        Tensor::new(vec![n, c, h, w], out),
        vec![x.clone(), scale.clone(), shift.clone()],
        Box::new(move |g, p, _| {
            let (xd, sd) = (p[0].data(), p[1].data());
            let gd = g.data();
            let mut dx = vec![0.0; gd.len()];
            let mut ds = vec![0.0; c];
            let mut dt = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                        dx[i] = gd[i] * sd[ch];
                        ds[ch] += gd[i] * xd[i];
                        dt[ch] += gd[i];
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![n, c, h, w], dx)),
                Some(Tensor::new(vec![c], ds)),
                Some(Tensor::new(vec![c], dt)),
            ]
        }),
    )
}
