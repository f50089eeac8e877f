//! Cross-model pseudo-label correction: position inconsistency scoring,
//! minimal-inconsistency pair selection and fusion, and the last-epoch
//! pseudo-label cache.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::snapshot::{read_container, write_container, NamedTensor};
use crate::geometry::{decode_argmax, warp_channel, Affine, Frame, GridDims, Heatmap, Keypoint, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    A,
    B,
}

impl Model {
    fn index(self) -> usize {
        match self {
            Model::A => 0,
            Model::B => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceEpoch {
    Last,
    Current,
}

/// A teacher heatmap in the canonical frame together with its decoded peaks.
#[derive(Clone, Debug, PartialEq)]
pub struct PlCandidate {
    pub source_model: Model,
    pub source_epoch: SourceEpoch,
    heatmap: Heatmap,
    decoded: Pose,
}

impl PlCandidate {
    pub fn new(source_model: Model, source_epoch: SourceEpoch, heatmap: Heatmap) -> Self {
        assert_eq!(
            heatmap.frame,
            Frame::Canonical,
            "pseudo-label candidates must be canonical-frame heatmaps"
        );
        let decoded = decode_argmax(&heatmap);
        Self {
            source_model,
            source_epoch,
            heatmap,
            decoded,
        }
    }

    pub fn heatmap(&self) -> &Heatmap {
        &self.heatmap
    }

    pub fn decoded(&self) -> &Pose {
        &self.decoded
    }
}

/// Distance between two argmax locations divided by the heatmap diagonal
/// `sqrt((W-1)^2 + (H-1)^2)`.
///
/// # Panics
/// If either keypoint has zero confidence; callers filter first.
pub fn position_inconsistency(a: &Keypoint, b: &Keypoint, hm_dims: GridDims) -> f64 {
    assert!(
        a.conf > 0.0 && b.conf > 0.0,
        "position inconsistency of a zero-confidence keypoint"
    );
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    (dx * dx + dy * dy).sqrt() / hm_dims.diagonal()
}

/// The candidate set for one sample. Last-epoch entries are absent on the
/// first epoch.
#[derive(Clone, Copy, Debug)]
pub struct PcmCandidates<'a> {
    pub a_last: Option<&'a PlCandidate>,
    pub a_cur: &'a PlCandidate,
    pub b_last: Option<&'a PlCandidate>,
    pub b_cur: &'a PlCandidate,
}

/// Which epochs the selected A and B candidates came from. A pair always
/// holds one candidate per model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairChoice {
    pub a: SourceEpoch,
    pub b: SourceEpoch,
}

/// Pairs in tie-break order: most recent first, then lexicographic.
pub const PAIR_ORDER: [PairChoice; 4] = [
    PairChoice {
        a: SourceEpoch::Current,
        b: SourceEpoch::Current,
    },
    PairChoice {
        a: SourceEpoch::Current,
        b: SourceEpoch::Last,
    },
    PairChoice {
        a: SourceEpoch::Last,
        b: SourceEpoch::Current,
    },
    PairChoice {
        a: SourceEpoch::Last,
        b: SourceEpoch::Last,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct PcmResult {
    /// Fused pseudo-label in the hard frame.
    pub fused: Heatmap,
    pub keypoint_mask: Vec<bool>,
    pub chosen: Vec<Option<PairChoice>>,
    pub pi: Vec<Option<f64>>,
}

impl PcmCandidates<'_> {
    fn get(&self, model: Model, epoch: SourceEpoch) -> Option<&PlCandidate> {
        match (model, epoch) {
            (Model::A, SourceEpoch::Current) => Some(self.a_cur),
            (Model::A, SourceEpoch::Last) => self.a_last,
            (Model::B, SourceEpoch::Current) => Some(self.b_cur),
            (Model::B, SourceEpoch::Last) => self.b_last,
        }
    }

    fn check(&self) {
        let slots = [
            (Model::A, SourceEpoch::Current),
            (Model::A, SourceEpoch::Last),
            (Model::B, SourceEpoch::Current),
            (Model::B, SourceEpoch::Last),
        ];
        let shape = (self.a_cur.heatmap.channels, self.a_cur.heatmap.dims());
        for (model, epoch) in slots {
            if let Some(c) = self.get(model, epoch) {
                assert_eq!(
                    (c.source_model, c.source_epoch),
                    (model, epoch),
                    "candidate placed in the wrong slot"
                );
                assert_eq!(
                    (c.heatmap.channels, c.heatmap.dims()),
                    shape,
                    "candidate heatmaps differ in shape"
                );
            }
        }
    }
}

/// Per keypoint: drop candidates below `tau`, pick the surviving cross-model
/// pair with the smallest position inconsistency and average its two
/// heatmaps after warping them through `hard_t`.
pub fn pcm_correct(
    candidates: &PcmCandidates<'_>,
    hard_t: &Affine,
    hm_dims: GridDims,
    tau: f64,
) -> PcmResult {
    candidates.check();
    assert_eq!(hard_t.source, Frame::Canonical, "hard transform must start in the canonical frame");
    let channels = candidates.a_cur.heatmap.channels;
    let grid = candidates.a_cur.heatmap.dims();
    let mut fused = Heatmap::zeros(channels, hm_dims, hard_t.target);
    let mut keypoint_mask = vec![false; channels];
    let mut chosen = vec![None; channels];
    let mut pi = vec![None; channels];

    let survives = |c: &PlCandidate, k: usize| {
        let conf = c.decoded.keypoints[k].conf;
        conf >= tau && conf > 0.0
    };

    for k in 0..channels {
        let mut best: Option<(PairChoice, f64, &PlCandidate, &PlCandidate)> = None;
        for pair in PAIR_ORDER {
            let (Some(a), Some(b)) = (
                candidates.get(Model::A, pair.a),
                candidates.get(Model::B, pair.b),
            ) else {
                continue;
            };
            if !survives(a, k) || !survives(b, k) {
                continue;
            }
            let d = position_inconsistency(&a.decoded.keypoints[k], &b.decoded.keypoints[k], grid);
            if best.is_none_or(|(_, bd, _, _)| d < bd) {
                best = Some((pair, d, a, b));
            }
        }
        if let Some((pair, d, a, b)) = best {
            let wa = warp_channel(&a.heatmap, k, hard_t, hm_dims);
            let wb = warp_channel(&b.heatmap, k, hard_t, hm_dims);
            for ((o, x), y) in fused.channel_mut(k).iter_mut().zip(&wa).zip(&wb) {
                *o = 0.5 * (x + y);
            }
            keypoint_mask[k] = true;
            chosen[k] = Some(pair);
            pi[k] = Some(d);
        }
    }
    PcmResult {
        fused,
        keypoint_mask,
        chosen,
        pi,
    }
}

/// Double-buffered per-sample teacher heatmaps. Reads see the previous
/// epoch; writes go to a staging buffer that [`PlCache::promote`] publishes.
#[derive(Clone, Debug, Default)]
pub struct PlCache {
    current: HashMap<u64, [Option<Heatmap>; 2]>,
    staging: HashMap<u64, [Option<Heatmap>; 2]>,
}

impl PlCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: u64, model: Model) -> Option<&Heatmap> {
        self.current.get(&id)?[model.index()].as_ref()
    }

    pub fn update(&mut self, id: u64, model: Model, heatmap: Heatmap) {
        assert_eq!(heatmap.frame, Frame::Canonical, "cache holds canonical-frame heatmaps");
        self.staging.entry(id).or_default()[model.index()] = Some(heatmap);
    }

    /// Epoch barrier: staged entries become visible and the stage empties.
    pub fn promote(&mut self) {
        self.current = std::mem::take(&mut self.staging);
    }

    /// Number of visible (id, model) entries.
    pub fn len(&self) -> usize {
        self.current.values().flatten().filter(|e| e.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the visible entries to a snapshot container.
    pub fn spill(&self, path: &Path) -> Result<()> {
        let mut ids: Vec<_> = self.current.keys().copied().collect();
        ids.sort_unstable();
        let mut tensors = Vec::new();
        for id in ids {
            for (model, name) in [(Model::A, "a"), (Model::B, "b")] {
                if let Some(hm) = self.get(id, model) {
                    tensors.push(NamedTensor {
                        name: format!("{id}.{name}"),
                        shape: vec![hm.channels, hm.height, hm.width],
                        data: hm.data.clone(),
                    });
                }
            }
        }
        write_container(path, serde_json::json!({ "kind": "pl_cache" }), &tensors)
    }

    /// Restores a spilled cache; the entries become visible immediately.
    pub fn restore(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_container(path)?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("pl_cache") {
            return Err(Error::Snapshot(format!("{} is not a pseudo-label cache", path.display())));
        }
        let mut cache = PlCache::new();
        for t in tensors {
            let bad = || Error::Snapshot(format!("bad cache entry name {:?}", t.name));
            let (id, model) = t.name.split_once('.').ok_or_else(bad)?;
            let id: u64 = id.parse().map_err(|_| bad())?;
            let model = match model {
                "a" => Model::A,
                "b" => Model::B,
                _ => return Err(bad()),
            };
            let [c, h, w] = t.shape[..] else {
                return Err(Error::Snapshot(format!("cache entry {} is not 3-d", t.name)));
            };
            let hm = Heatmap::from_vec(c, GridDims::new(h, w), t.data, Frame::Canonical);
            cache.current.entry(id).or_default()[model.index()] = Some(hm);
        }
        Ok(cache)
    }
}
