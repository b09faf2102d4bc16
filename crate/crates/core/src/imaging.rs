//! Image and mask buffers shared by every stage, plus the resizing helpers
//! all inter-stage geometry goes through.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

pub use crate::tensor::Interp;
use crate::tensor::{resize_weights_1d, Tensor};
use crate::{Error, Result};

/// H x W x C intensities in `[0, 1]`, channel-interleaved, C in {1, 3}.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Validation(format!("image must have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// An image with every pixel set to `pixel` (length 1 or 3).
    pub fn filled(height: usize, width: usize, pixel: &[f32]) -> Self {
        let channels = pixel.len();
        assert!(channels == 1 || channels == 3);
        assert!(pixel.iter().all(|v| (0.0..=1.0).contains(v)));
        let data = pixel.iter().copied().cycle().take(height * width * channels).collect();
        Self { height, width, channels, data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, &vec![0.0; channels])
    }

    /// Builds an image from a per-pixel function; values are clamped to [0,1].
    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        assert!(channels == 1 || channels == 3);
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        assert!((0.0..=1.0).contains(&value), "pixel value {value} outside [0,1]");
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, pixel: &[f32]) {
        assert_eq!(pixel.len(), self.channels);
        for (ch, &v) in pixel.iter().enumerate() {
            self.set(row, col, ch, v);
        }
    }

    pub fn same_size(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Luminance (0.299, 0.587, 0.114); single-channel images pass through.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).clamp(0.0, 1.0) as f32)
            .collect();
        ImageBuffer { height: self.height, width: self.width, channels: 1, data }
    }

    /// Replicates a single channel to three; RGB passes through.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer { height: self.height, width: self.width, channels: 3, data }
    }

    /// Copies the rectangle with top-left (x0, y0) and size w x h.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageBuffer {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside image");
        let mut data = Vec::with_capacity(w * h * self.channels);
        for r in y0..y0 + h {
            let start = (r * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        ImageBuffer { height: h, width: w, channels: self.channels, data }
    }

    /// Half-pixel-centre resize; identity when the size is unchanged.
    pub fn resize(&self, height: usize, width: usize, interp: Interp) -> ImageBuffer {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let wy = resize_weights_1d(self.height, height, interp);
        let wx = resize_weights_1d(self.width, width, interp);
        let mut data = Vec::with_capacity(height * width * self.channels);
        for ry in &wy {
            for rx in &wx {
                for ch in 0..self.channels {
                    let mut acc = 0.0f64;
                    for &(sy, fy) in ry {
                        for &(sx, fx) in rx {
                            acc += fy * fx * self.get(sy, sx, ch) as f64;
                        }
                    }
                    data.push(acc.clamp(0.0, 1.0) as f32);
                }
            }
        }
        ImageBuffer { height, width, channels: self.channels, data }
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * plane + i] = v as f64;
            }
        }
        Tensor::new(vec![1, self.channels, self.height, self.width], out)
    }

    /// Reads batch item `index` of an NCHW tensor, clamping to [0,1].
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<ImageBuffer> {
        let [n, c, h, w] = t.dims4();
        if index >= n {
            return Err(Error::Shape(format!("batch index {index} out of {n}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("tensor with {c} channels is not an image")));
        }
        let plane = h * w;
        let base = index * c * plane;
        let mut data = Vec::with_capacity(c * plane);
        for i in 0..plane {
            for ch in 0..c {
                data.push(t.data()[base + ch * plane + i].clamp(0.0, 1.0) as f32);
            }
        }
        Ok(ImageBuffer { height: h, width: w, channels: c, data })
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> ImageBuffer {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        ImageBuffer { data, ..self.clone() }
    }

    pub fn from_dynamic(img: &DynamicImage) -> ImageBuffer {
        let (width, height) = (img.width() as usize, img.height() as usize);
        let gray_like = matches!(
            img,
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
        );
        if gray_like {
            let g = img.to_luma8();
            let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            ImageBuffer { height, width, channels: 1, data }
        } else {
            let rgb = img.to_rgb8();
            let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            ImageBuffer { height, width, channels: 3, data }
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let raw: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer size"))
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer size"))
        }
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
        let img = image::load_from_memory(bytes)?;
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Validation("decoded image is empty".into()));
        }
        Ok(Self::from_dynamic(&img))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load(path: &Path) -> Result<ImageBuffer> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// H x W map with values exactly 0 or 1.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} mask", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Intersection over union; two empty masks count as identical (1.0).
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Mean (x, y) of set pixel centres, or `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    sx += c as f64 + 0.5;
                    sy += r as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn resize(&self, height: usize, width: usize) -> BinaryMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let wy = resize_weights_1d(self.height, height, Interp::Nearest);
        let wx = resize_weights_1d(self.width, width, Interp::Nearest);
        let mut data = Vec::with_capacity(height * width);
        for ry in &wy {
            for rx in &wx {
                data.push(self.data[ry[0].0 * self.width + rx[0].0]);
            }
        }
        BinaryMask { height, width, data }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> BinaryMask {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside mask");
        let mut data = Vec::with_capacity(w * h);
        for r in y0..y0 + h {
            data.extend_from_slice(&self.data[r * self.width + x0..r * self.width + x0 + w]);
        }
        BinaryMask { height: h, width: w, data }
    }

    /// Single-channel image with 0/1 intensities.
    pub fn to_image(&self) -> ImageBuffer {
        let data = self.data.iter().map(|&v| v as f32).collect();
        ImageBuffer { height: self.height, width: self.width, channels: 1, data }
    }

    /// Thresholds the first channel at `threshold` (ties go to 1).
    pub fn from_image(img: &ImageBuffer, threshold: f32) -> BinaryMask {
        let data = img.data().chunks(img.channels()).map(|p| (p[0] >= threshold) as u8).collect();
        BinaryMask { height: img.height(), width: img.width(), data }
    }

    /// `[1, channels, H, W]` tensor with the mask replicated per channel.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let plane: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let mut out = Vec::with_capacity(plane.len() * channels);
        for _ in 0..channels {
            out.extend_from_slice(&plane);
        }
        Tensor::new(vec![1, channels, self.height, self.width], out)
    }
}
