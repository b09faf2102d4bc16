//! Seeded fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vton_core::detect::{BBox, Detection};
use vton_core::tensor::Tensor;
use vton_core::ImageBuffer;

pub fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    ImageBuffer::new(h, w, 3, data).expect("sized buffer")
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// `n` overlapping person boxes with distinct scores.
pub fn random_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (x, y) = (rng.gen_range(0.0..400.0), rng.gen_range(0.0..400.0));
            let (w, h) = (rng.gen_range(20.0..200.0), rng.gen_range(20.0..200.0));
            Detection::person(BBox::new(x, y, x + w, y + h), (i as f64 + 0.5) / n as f64)
        })
        .collect()
}
