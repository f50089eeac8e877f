//! Shared fixtures for the criterion benchmarks under `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sspcm_core::estimator::{init_estimator, ArchConfig, Tensor};
use sspcm_core::geometry::{render_gaussian_heatmaps, Frame, GridDims, Heatmap, Image, Keypoint, Pose};
use sspcm_core::synthdata::DEFAULT_IMAGE_DIMS;
use sspcm_core::EstimatorParams;

pub const KEYPOINTS: usize = 13;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn net(seed: u64) -> EstimatorParams<f32> {
    init_estimator(ArchConfig::new(DEFAULT_IMAGE_DIMS, KEYPOINTS), &mut rng(seed))
}

pub fn image(seed: u64) -> Image {
    let mut r = rng(seed);
    let data = (0..DEFAULT_IMAGE_DIMS.len()).map(|_| r.random::<f32>()).collect();
    Image::from_vec(DEFAULT_IMAGE_DIMS, data, Frame::Canonical)
}

pub fn batch(n: usize) -> Tensor<f32> {
    let images: Vec<Image> = (0..n as u64).map(image).collect();
    Tensor::from_images(&images.iter().collect::<Vec<_>>())
}

/// Gaussian heatmaps around random in-grid keypoints.
pub fn heatmap(seed: u64, dims: GridDims, frame: Frame) -> Heatmap {
    let mut r = rng(seed);
    let kps = (0..KEYPOINTS)
        .map(|_| {
            Keypoint::new(
                r.random_range(0.0..(dims.width - 1) as f64),
                r.random_range(0.0..(dims.height - 1) as f64),
                1.0,
            )
        })
        .collect();
    render_gaussian_heatmaps(&Pose::new(kps, frame), 1.0, dims).expect("valid sigma")
}
