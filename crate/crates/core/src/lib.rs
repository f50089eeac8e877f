//! Semi-supervised keypoint heatmap training with cross-model pseudo-label
//! correction and keypoint-aware cut-occlude augmentation.

pub mod error;
pub mod geometry;
pub mod pcm;
pub mod ssco;
pub mod estimator;
pub mod evalanalysis;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{
    decode_argmax, make_affine, render_gaussian_heatmaps, warp_heatmap, warp_image, warp_points,
    Affine, Frame, GridDims, Heatmap, Image, Keypoint, Pose,
};
pub use estimator::{EstimatorParams, LrSchedule};
pub use evalanalysis::{analyze_pi, evaluate_pck, pck, pcm_noise_oracle, AnalysisReport, NoiseModel};
pub use pcm::{pcm_correct, position_inconsistency, PcmResult, PlCache};
pub use ssco::{ssco_apply, SscoConfig};
pub use synthdata::{generate_dataset, load_dataset, load_oracle, Dataset, GenerateConfig, Sample, Split};
pub use trainer::{
    run_training, run_training_with, AugRange, MaskSteps, Method, NetId, RunOptions, RunReport, TrainConfig,
    TrainedRun,
};
