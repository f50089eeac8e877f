//! Synthetic stick-figure pose dataset: generation and on-disk container.
//!
//! A dataset directory holds:
//!
//! * `meta.json` with the [`DatasetMeta`] fields,
//! * `index.json`, an array of `{"id", "split", "image", "keypoints"}`
//!   records where `keypoints` is `[[x, y, conf], ...]` or `null` for
//!   unlabeled samples,
//! * `oracle.json`, the hidden `{"id": keypoints}` ground truth of the
//!   unlabeled split, read only by analysis tooling,
//! * `images/<id>.pgm`, 8-bit binary PGM files.

mod pgm;
pub mod render;
pub mod skeleton;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use pgm::{read_pgm, write_pgm};
pub use render::render_figure;
pub use skeleton::{sample_pose, Edge, Skeleton};

use crate::error::{Error, Result};
use crate::geometry::{Frame, GridDims, Image, Keypoint, Pose};

pub const FORMAT_VERSION: u32 = 1;
/// Image pixels per heatmap pixel along each axis.
pub const HEATMAP_STRIDE: usize = 4;
pub const DEFAULT_IMAGE_DIMS: GridDims = GridDims::new(64, 48);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub image: Image,
    /// Present iff the split is not `Unlabeled`.
    pub pose: Option<Pose>,
    pub bbox_diag: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub num_keypoints: usize,
    pub skeleton: Skeleton,
    pub image_dims: GridDims,
    pub heatmap_dims: GridDims,
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub index_sha256: String,
    pub images_sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerateConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub seed: u64,
    pub image_dims: GridDims,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_labeled: 100,
            n_unlabeled: 1500,
            n_test: 300,
            seed: 7,
            image_dims: DEFAULT_IMAGE_DIMS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn image_dims(&self) -> GridDims {
        self.meta.image_dims
    }

    pub fn heatmap_dims(&self) -> GridDims {
        self.meta.heatmap_dims
    }

    pub fn num_keypoints(&self) -> usize {
        self.meta.num_keypoints
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: u64,
    split: Split,
    image: String,
    keypoints: Option<Vec<[f64; 3]>>,
}

fn encode_keypoints(pose: &Pose) -> Vec<[f64; 3]> {
    pose.keypoints.iter().map(|k| [k.x, k.y, k.conf]).collect()
}

fn decode_keypoints(raw: &[[f64; 3]]) -> Pose {
    Pose::new(
        raw.iter().map(|&[x, y, c]| Keypoint::new(x, y, c)).collect(),
        Frame::Canonical,
    )
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("dataset records serialize");
    s.push('\n');
    s.into_bytes()
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-sample random stream, a pure function of `(seed, id)`.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn image_name(id: u64) -> String {
    format!("images/{id:06}.pgm")
}

/// Generates the dataset and writes it to `out_dir`.
pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<DatasetMeta> {
    let dims = cfg.image_dims;
    if dims.is_empty() || dims.height % HEATMAP_STRIDE != 0 || dims.width % HEATMAP_STRIDE != 0 {
        return Err(Error::invalid(format!(
            "image dims {}x{} must be positive multiples of {HEATMAP_STRIDE}",
            dims.width, dims.height
        )));
    }
    let skeleton = Skeleton::default();
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let splits = std::iter::repeat_n(Split::Labeled, cfg.n_labeled)
        .chain(std::iter::repeat_n(Split::Unlabeled, cfg.n_unlabeled))
        .chain(std::iter::repeat_n(Split::Test, cfg.n_test));

    let mut index = Vec::new();
    let mut oracle = BTreeMap::new();
    let mut images_hash = Sha256::new();
    for (id, split) in splits.enumerate() {
        let id = id as u64;
        let mut rng = sample_rng(cfg.seed, id);
        let pose = sample_pose(&mut rng, &skeleton, dims);
        let image = render_figure(&pose, &skeleton, dims, &mut rng);
        let name = image_name(id);
        let bytes = write_pgm(&image);
        images_hash.update(&bytes);
        write_file(&out_dir.join(&name), &bytes)?;
        let keypoints = match split {
            Split::Unlabeled => {
                oracle.insert(id.to_string(), encode_keypoints(&pose));
                None
            }
            _ => Some(encode_keypoints(&pose)),
        };
        index.push(IndexEntry {
            id,
            split,
            image: name,
            keypoints,
        });
    }

    let index_bytes = to_json(&index);
    write_file(&out_dir.join("index.json"), &index_bytes)?;
    write_file(&out_dir.join("oracle.json"), &to_json(&oracle))?;

    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        num_keypoints: skeleton.num_keypoints(),
        skeleton,
        image_dims: dims,
        heatmap_dims: GridDims::new(dims.height / HEATMAP_STRIDE, dims.width / HEATMAP_STRIDE),
        seed: cfg.seed,
        n_labeled: cfg.n_labeled,
        n_unlabeled: cfg.n_unlabeled,
        n_test: cfg.n_test,
        index_sha256: hex(&Sha256::digest(&index_bytes)),
        images_sha256: hex(&images_hash.finalize()),
    };
    write_file(&out_dir.join("meta.json"), &to_json(&meta))?;
    Ok(meta)
}

/// Loads and validates a dataset directory. Never touches `oracle.json`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = from_json(&dir.join("meta.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    meta.skeleton.validate()?;
    if meta.num_keypoints != meta.skeleton.num_keypoints() {
        return Err(Error::InvalidDataset(
            "num_keypoints disagrees with the skeleton".into(),
        ));
    }
    let dims = meta.image_dims;
    if meta.heatmap_dims
        != GridDims::new(dims.height / HEATMAP_STRIDE, dims.width / HEATMAP_STRIDE)
    {
        return Err(Error::InvalidDataset(
            "heatmap dims must be the image dims divided by 4".into(),
        ));
    }

    let index_path = dir.join("index.json");
    let index_bytes = read_file(&index_path)?;
    let found = hex(&Sha256::digest(&index_bytes));
    if found != meta.index_sha256 {
        return Err(Error::ChecksumMismatch {
            what: "index.json".into(),
            expected: meta.index_sha256.clone(),
            found,
        });
    }
    let index: Vec<IndexEntry> =
        serde_json::from_slice(&index_bytes).map_err(|source| Error::Json {
            path: index_path.clone(),
            source,
        })?;

    let count = |s: Split| index.iter().filter(|e| e.split == s).count();
    for (what, declared, split) in [
        ("labeled", meta.n_labeled, Split::Labeled),
        ("unlabeled", meta.n_unlabeled, Split::Unlabeled),
        ("test", meta.n_test, Split::Test),
    ] {
        let found = count(split);
        if found != declared {
            return Err(Error::CountMismatch {
                what: what.into(),
                declared,
                found,
            });
        }
    }

    let mut seen = HashSet::new();
    let mut images_hash = Sha256::new();
    let mut samples = Vec::with_capacity(index.len());
    for entry in index {
        if !seen.insert(entry.id) {
            return Err(Error::InvalidDataset(format!("duplicate id {}", entry.id)));
        }
        let path = dir.join(&entry.image);
        if !path.is_file() {
            return Err(Error::MissingImage { id: entry.id, path });
        }
        let bytes = read_file(&path)?;
        images_hash.update(&bytes);
        let image = read_pgm(&bytes, &path)?;
        if image.dims() != dims {
            return Err(Error::InvalidDataset(format!(
                "sample {}: image is {}x{}, expected {}x{}",
                entry.id, image.width, image.height, dims.width, dims.height
            )));
        }
        let pose = match (entry.split, &entry.keypoints) {
            (Split::Unlabeled, None) => None,
            (Split::Unlabeled, Some(_)) => {
                return Err(Error::InvalidDataset(format!(
                    "unlabeled sample {} carries keypoints",
                    entry.id
                )))
            }
            (_, None) => {
                return Err(Error::InvalidDataset(format!(
                    "sample {} is missing keypoints",
                    entry.id
                )))
            }
            (_, Some(raw)) => {
                let pose = decode_keypoints(raw);
                validate_pose(&pose, meta.num_keypoints, dims)
                    .map_err(|m| Error::InvalidDataset(format!("sample {}: {m}", entry.id)))?;
                Some(pose)
            }
        };
        let bbox_diag = pose.as_ref().and_then(|p| p.bbox_diagonal());
        samples.push(Sample {
            id: entry.id,
            split: entry.split,
            image,
            pose,
            bbox_diag,
        });
    }
    let found = hex(&images_hash.finalize());
    if found != meta.images_sha256 {
        return Err(Error::ChecksumMismatch {
            what: "images".into(),
            expected: meta.images_sha256.clone(),
            found,
        });
    }
    Ok(Dataset { meta, samples })
}

fn validate_pose(pose: &Pose, k: usize, dims: GridDims) -> std::result::Result<(), String> {
    if pose.len() != k {
        return Err(format!("expected {k} keypoints, found {}", pose.len()));
    }
    for (i, kp) in pose.keypoints.iter().enumerate() {
        if !(0.0..=1.0).contains(&kp.conf) {
            return Err(format!("keypoint {i} has confidence {}", kp.conf));
        }
        if kp.is_valid() && !dims.contains(kp.x, kp.y) {
            return Err(format!("visible keypoint {i} lies outside the image"));
        }
    }
    Ok(())
}

/// Reads the hidden ground truth of the unlabeled split.
pub fn load_oracle(dir: &Path) -> Result<HashMap<u64, Pose>> {
    let path: PathBuf = dir.join("oracle.json");
    let raw: BTreeMap<String, Vec<[f64; 3]>> = from_json(&path)?;
    raw.into_iter()
        .map(|(id, kps)| {
            let id = id
                .parse::<u64>()
                .map_err(|_| Error::InvalidDataset(format!("oracle id {id:?} is not an integer")))?;
            Ok((id, decode_keypoints(&kps)))
        })
        .collect()
}
