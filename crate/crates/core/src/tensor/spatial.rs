//! Spatial kernels: convolution via tiled im2col, plane-wise sparse linear
//! maps (resizing, pooling, padding) and 2x2 max pooling.

use super::gemm::{gemm, Strides};
use super::Tensor;

/// Interpolation used by resizing maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Half-pixel-centre resize weights along one axis: for each destination
/// index, the contributing source indices and their weights.
pub fn resize_weights_1d(src: usize, dst: usize, interp: Interp) -> Vec<Vec<(usize, f64)>> {
    assert!(src > 0 && dst > 0, "resize of an empty axis");
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| match interp {
            Interp::Nearest => {
                let s = (((i as f64) + 0.5) * scale).floor() as usize;
                vec![(s.min(src - 1), 1.0)]
            }
            Interp::Bilinear => {
                let x = (((i as f64) + 0.5) * scale - 0.5).max(0.0);
                let x0 = (x.floor() as usize).min(src - 1);
                let x1 = (x0 + 1).min(src - 1);
                let frac = if x0 == src - 1 { 0.0 } else { x - x0 as f64 };
                if frac == 0.0 || x0 == x1 {
                    vec![(x0, 1.0)]
                } else {
                    vec![(x0, 1.0 - frac), (x1, frac)]
                }
            }
        })
        .collect()
}

/// A fixed sparse linear map from an `h x w` plane to an `out_h x out_w`
/// plane, applied independently to every (batch, channel) plane.
#[derive(Debug, Clone)]
pub struct PlaneMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl PlaneMap {
    fn from_rows(in_h: usize, in_w: usize, out_h: usize, out_w: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), out_h * out_w);
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_start.push(0);
        for row in rows {
            for (c, w) in row {
                debug_assert!(c < in_h * in_w);
                cols.push(c);
                weights.push(w);
            }
            row_start.push(cols.len());
        }
        Self { in_h, in_w, out_h, out_w, row_start, cols, weights }
    }

    /// Separable resize to `out_h x out_w`.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize, interp: Interp) -> Self {
        let wy = resize_weights_1d(in_h, out_h, interp);
        let wx = resize_weights_1d(in_w, out_w, interp);
        let mut rows = Vec::with_capacity(out_h * out_w);
        for ry in &wy {
            for rx in &wx {
                let mut row = Vec::with_capacity(ry.len() * rx.len());
                for &(sy, fy) in ry {
                    for &(sx, fx) in rx {
                        row.push((sy * in_w + sx, fy * fx));
                    }
                }
                rows.push(row);
            }
        }
        Self::from_rows(in_h, in_w, out_h, out_w, rows)
    }

    /// 2x2 average pooling, stride 2; odd trailing rows/columns form partial
    /// windows averaged over their valid pixels, so the output is
    /// `ceil(h/2) x ceil(w/2)`.
    pub fn avg_pool2(in_h: usize, in_w: usize) -> Self {
        let out_h = in_h.div_ceil(2);
        let out_w = in_w.div_ceil(2);
        let mut rows = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let ys: Vec<usize> = (2 * oy..(2 * oy + 2).min(in_h)).collect();
                let xs: Vec<usize> = (2 * ox..(2 * ox + 2).min(in_w)).collect();
                let w = 1.0 / (ys.len() * xs.len()) as f64;
                rows.push(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y * in_w + x, w))).collect());
            }
        }
        Self::from_rows(in_h, in_w, out_h, out_w, rows)
    }

    /// Reflection padding by `pad` pixels on every side (no edge repeat).
    pub fn reflect_pad(in_h: usize, in_w: usize, pad: usize) -> Self {
        assert!(pad < in_h && pad < in_w, "reflection pad {pad} too large for {in_h}x{in_w}");
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
            i as usize
        };
        let out_h = in_h + 2 * pad;
        let out_w = in_w + 2 * pad;
        let mut rows = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let sy = reflect(oy as isize - pad as isize, in_h);
            for ox in 0..out_w {
                let sx = reflect(ox as isize - pad as isize, in_w);
                rows.push(vec![(sy * in_w + sx, 1.0)]);
            }
        }
        Self::from_rows(in_h, in_w, out_h, out_w, rows)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.dims4();
        assert_eq!((h, w), (self.in_h, self.in_w), "plane map input size mismatch");
        let in_len = h * w;
        let out_len = self.out_h * self.out_w;
        let mut out = vec![0.0; n * c * out_len];
        for (plane_in, plane_out) in x.data().chunks(in_len).zip(out.chunks_mut(out_len)) {
            for (o, dst) in plane_out.iter_mut().enumerate() {
                let (s, e) = (self.row_start[o], self.row_start[o + 1]);
                let mut acc = 0.0;
                for j in s..e {
                    acc += self.weights[j] * plane_in[self.cols[j]];
                }
                *dst = acc;
            }
        }
        Tensor::new(vec![n, c, self.out_h, self.out_w], out)
    }

    pub fn apply_transpose(&self, g: &Tensor) -> Tensor {
        let [n, c, h, w] = g.dims4();
        assert_eq!((h, w), (self.out_h, self.out_w));
        let in_len = self.in_h * self.in_w;
        let out_len = h * w;
        let mut out = vec![0.0; n * c * in_len];
        for (plane_g, plane_out) in g.data().chunks(out_len).zip(out.chunks_mut(in_len)) {
            for (o, &gv) in plane_g.iter().enumerate() {
                let (s, e) = (self.row_start[o], self.row_start[o + 1]);
                for j in s..e {
                    plane_out[self.cols[j]] += self.weights[j] * gv;
                }
            }
        }
        Tensor::new(vec![n, c, self.in_h, self.in_w], out)
    }
}

/// Stride, zero padding and dilation of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl ConvOpts {
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Upper bound on im2col buffer elements per tile.
const TILE_ELEMS: usize = 1 << 20;

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
    opts: ConvOpts,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn tile_len(&self) -> usize {
        (TILE_ELEMS / self.col_rows().max(1)).max(1)
    }

    /// Fills `col` (col_rows x len) for output positions [start, start+len).
    fn im2col(&self, plane: &[f64], start: usize, len: usize, col: &mut [f64]) {
        let ConvOpts { stride, padding, dilation } = self.opts;
        let mut row = 0;
        for ci in 0..self.c_in {
            let src = &plane[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = &mut col[row * len..(row + 1) * len];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let pos = start + t;
                        let oy = pos / self.out_w;
                        let ox = pos % self.out_w;
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        *d = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                            src[iy as usize * self.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], start: usize, len: usize, plane: &mut [f64]) {
        let ConvOpts { stride, padding, dilation } = self.opts;
        let mut row = 0;
        for ci in 0..self.c_in {
            let dst = &mut plane[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = &col[row * len..(row + 1) * len];
                    for (t, &v) in src.iter().enumerate() {
                        let pos = start + t;
                        let oy = pos / self.out_w;
                        let ox = pos % self.out_w;
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                            dst[iy as usize * self.w + ix as usize] += v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, weight: &Tensor, opts: ConvOpts) -> (usize, usize, ConvGeom) {
    let [n, c_in, h, w] = x.dims4();
    let [c_out, wc_in, kh, kw] = weight.dims4();
    assert_eq!(c_in, wc_in, "conv2d: input has {c_in} channels, kernel expects {wc_in}");
    assert_eq!(kh, kw, "conv2d: only square kernels are supported");
    let out_h = opts.output_size(h, kh).expect("conv2d: input smaller than kernel span");
    let out_w = opts.output_size(w, kw).expect("conv2d: input smaller than kernel span");
    (n, c_out, ConvGeom { c_in, h, w, k: kh, out_h, out_w, opts })
}

pub(crate) fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, opts: ConvOpts) -> Tensor {
    let (n, c_out, g) = conv_geom(x, weight, opts);
    let kdim = g.col_rows();
    let out_plane = g.out_h * g.out_w;
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![0.0; n * c_out * out_plane];
    let tile = g.tile_len();
    let mut col = vec![0.0; kdim * tile.min(out_plane)];
    for b in 0..n {
        let plane = &x.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * c_out * out_plane..(b + 1) * c_out * out_plane];
        let mut start = 0;
        while start < out_plane {
            let len = tile.min(out_plane - start);
            let col = &mut col[..kdim * len];
            g.im2col(plane, start, len, col);
            gemm(
                c_out,
                kdim,
                len,
                1.0,
                weight.data(),
                Strides::row_major(kdim),
                col,
                Strides::row_major(len),
                0.0,
                &mut dst[start..],
                Strides::row_major(out_plane),
            );
            start += len;
        }
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(out_plane).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, c_out, g.out_h, g.out_w], out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    grad_out: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    opts: ConvOpts,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, c_out, g) = conv_geom(x, weight, opts);
    let kdim = g.col_rows();
    let out_plane = g.out_h * g.out_w;
    let in_len = g.c_in * g.h * g.w;
    let tile = g.tile_len();
    let mut col = vec![0.0; kdim * tile.min(out_plane)];
    let mut dx = need_input.then(|| vec![0.0; x.len()]);
    let mut dw = need_weight.then(|| vec![0.0; weight.len()]);
    let mut db = vec![0.0; c_out];
    for b in 0..n {
        let plane = &x.data()[b * in_len..(b + 1) * in_len];
        let gout = &grad_out.data()[b * c_out * out_plane..(b + 1) * c_out * out_plane];
        for (co, chunk) in gout.chunks(out_plane).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        let mut start = 0;
        while start < out_plane {
            let len = tile.min(out_plane - start);
            let col = &mut col[..kdim * len];
            if let Some(dw) = dw.as_mut() {
                g.im2col(plane, start, len, col);
                // dW (c_out x kdim) += dY_tile (c_out x len) * col^T (len x kdim)
                gemm(
                    c_out,
                    len,
                    kdim,
                    1.0,
                    &gout[start..],
                    Strides::row_major(out_plane),
                    col,
                    Strides::transposed(len),
                    1.0,
                    dw,
                    Strides::row_major(kdim),
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcol (kdim x len) = W^T (kdim x c_out) * dY_tile (c_out x len)
                gemm(
                    kdim,
                    c_out,
                    len,
                    1.0,
                    weight.data(),
                    Strides::transposed(kdim),
                    &gout[start..],
                    Strides::row_major(out_plane),
                    0.0,
                    col,
                    Strides::row_major(len),
                );
                g.col2im(col, start, len, &mut dx[b * in_len..(b + 1) * in_len]);
            }
            start += len;
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::new(weight.shape().to_vec(), d)),
        Tensor::new(vec![c_out], db),
    )
}

/// 2x2 max pooling with stride 2 and ceil rounding. Returns the pooled
/// tensor and, per output element, the flat input index of its maximum.
pub(crate) fn max_pool2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.dims4();
    let out_h = h.div_ceil(2);
    let out_w = w.div_ceil(2);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = base + 2 * oy * w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let idx = base + y * w + xx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::new(vec![n, c, out_h, out_w], out), argmax)
}
