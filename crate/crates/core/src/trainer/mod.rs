//! The per-batch training schedule (supervised step, two cross-teaching
//! steps, corrected-pseudo-label step), the epoch loop and the baselines.

mod steps;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::snapshot::save_params;
use crate::estimator::{init_estimator, AdamState, ArchConfig, EstimatorParams, LrSchedule};
use crate::evalanalysis::evaluate_pck;
use crate::geometry::{make_affine, Affine, Frame, GridDims};
use crate::pcm::PlCache;
use crate::ssco::SscoConfig;
use crate::synthdata::{Dataset, Sample, Split, HEATMAP_STRIDE};

pub use steps::{CrossBatch, Step4Output};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Supervised,
    Dual,
    Sspcm,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Supervised => "supervised",
            Method::Dual => "dual",
            Method::Sspcm => "sspcm",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Method::Supervised),
            "dual" => Ok(Method::Dual),
            "sspcm" => Ok(Method::Sspcm),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected supervised, dual or sspcm)"
            ))),
        }
    }
}

/// Which unsupervised steps apply the teacher-confidence mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSteps {
    All,
    Step4Only,
}

impl FromStr for MaskSteps {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MaskSteps::All),
            "step4" => Ok(MaskSteps::Step4Only),
            other => Err(Error::Config(format!("unknown mask_steps {other:?} (expected all or step4)"))),
        }
    }
}

impl fmt::Display for MaskSteps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskSteps::All => "all",
            MaskSteps::Step4Only => "step4",
        })
    }
}

/// Random similarity transform about the image center: rotation uniform in
/// `[-max_rotation, max_rotation]` degrees, scale uniform in `scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRange {
    pub max_rotation: f64,
    pub scale: (f64, f64),
}

impl AugRange {
    pub const EASY: AugRange = AugRange {
        max_rotation: 30.0,
        scale: (0.75, 1.25),
    };
    pub const HARD: AugRange = AugRange {
        max_rotation: 60.0,
        scale: (0.75, 1.25),
    };

    fn validate(&self, name: &str) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(self.max_rotation >= 0.0 && self.max_rotation.is_finite()) || !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "{name} augmentation needs rotation >= 0 and 0 < scale_min <= scale_max"
            )));
        }
        Ok(())
    }

    /// Image-space transform from the canonical frame into `target`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, dims: GridDims, target: Frame) -> Affine {
        let rot = if self.max_rotation > 0.0 {
            rng.random_range(-self.max_rotation..=self.max_rotation)
        } else {
            0.0
        };
        let (lo, hi) = self.scale;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        make_affine(rot, scale, dims.center(), dims)
            .expect("validated augmentation range")
            .between(Frame::Canonical, target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub beta: f64,
    pub tau: f64,
    /// Gaussian width of target heatmaps, in heatmap pixels.
    pub sigma: f64,
    pub easy_aug: AugRange,
    pub hard_aug: AugRange,
    pub ssco: SscoConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Width multiplier of nets A and B; net C always has width 1.
    pub teacher_width: f64,
    pub mask_steps: MaskSteps,
    pub val_fraction: f64,
    pub snapshot_interval: usize,
    pub pck_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Sspcm,
            beta: 0.3,
            tau: 0.1,
            sigma: 1.0,
            easy_aug: AugRange::EASY,
            hard_aug: AugRange::HARD,
            ssco: SscoConfig::default(),
            epochs: 60,
            batch_size: 16,
            lr: LrSchedule::default(),
            seed: 0,
            teacher_width: 1.0,
            mask_steps: MaskSteps::All,
            val_fraction: 0.2,
            snapshot_interval: 10,
            pck_alpha: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite number >= 0");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.teacher_width > 0.0 && self.teacher_width <= 8.0) {
            return bad("teacher_width must lie in (0, 8]");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.pck_alpha > 0.0) {
            return bad("pck_alpha must be positive");
        }
        self.easy_aug.validate("easy")?;
        self.hard_aug.validate("hard")?;
        self.ssco.validate()?;
        self.lr.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetId {
    A,
    B,
    C,
}

impl NetId {
    pub const ALL: [NetId; 3] = [NetId::A, NetId::B, NetId::C];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NetId::A => "a",
            NetId::B => "b",
            NetId::C => "c",
        }
    }
}

/// Call counts recorded during a run, used to audit which components a
/// method touches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub step1_calls: usize,
    pub cross_calls: usize,
    pub step4_calls: usize,
    pub pcm_calls: usize,
    pub cache_updates: usize,
    pub cache_promotions: usize,
    pub net_c_forwards: usize,
    pub frozen_checks: usize,
    pub teacher_mutations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub l_sup: f64,
    pub l_unsup1: f64,
    pub l_unsup2: f64,
    pub l_unsup3: f64,
    pub pck_a: f64,
    pub pck_b: f64,
    pub pck_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub epoch: usize,
    pub batch: usize,
    pub l_sup: f64,
    pub l_unsup1: f64,
    pub l_unsup2: f64,
    pub l_unsup3: f64,
    /// `l_sup + beta * (l_unsup1 + l_unsup2 + l_unsup3)`.
    pub l_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub rows: Vec<EpochRow>,
    pub batches: Vec<BatchLoss>,
    /// Test PCK per net (A, B, C); NaN for nets the method does not train.
    pub test_pck: [f64; 3],
    /// The net whose accuracy the method reports.
    pub reported_net: NetId,
    pub final_test_pck: f64,
    pub wall_clock_secs: f64,
    pub counters: Counters,
}

pub const METRICS_HEADER: &str = "epoch,lr,l_sup,l_unsup1,l_unsup2,l_unsup3,pck_a,pck_b,pck_c";

impl RunReport {
    /// Per-epoch metrics as CSV with six decimals and LF line endings.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
        }
        s
    }
}

impl EpochRow {
    /// One `metrics.csv` line, newline included.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.epoch,
            self.lr,
            self.l_sup,
            self.l_unsup1,
            self.l_unsup2,
            self.l_unsup3,
            self.pck_a,
            self.pck_b,
            self.pck_c
        )
    }
}

/// Everything a finished run hands back: the report and the final nets.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub report: RunReport,
    pub nets: [Option<EstimatorParams<f32>>; 3],
}

impl TrainedRun {
    pub fn net(&self, id: NetId) -> Option<&EstimatorParams<f32>> {
        self.nets[id.index()].as_ref()
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Exchange the identities of nets A and B, including their random
    /// streams.
    pub swap_roles: bool,
    /// Writes `snapshots/net_<x>_epoch_<NNNN>.bin` under this directory.
    pub snapshot_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRow)>,
}

mod stream {
    pub const INIT: [u64; 3] = [1, 2, 3];
    pub const VAL_SPLIT: u64 = 10;
    pub const LABELED_ORDER: u64 = 11;
    pub const STEP1_AUG: u64 = 12;
    /// Indexed by the student net (A, B).
    pub const CROSS_INTO: [u64; 2] = [13, 14];
    pub const STEP4: u64 = 15;
    pub const UNLABELED_ORDER: u64 = 16;
}

fn stream_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub(crate) struct Net {
    pub params: EstimatorParams<f32>,
    pub adam: AdamState,
}

/// Training state for one run. The step methods are public so they can be
/// exercised in isolation.
pub struct Trainer<'d> {
    pub(crate) cfg: TrainConfig,
    pub(crate) train_labeled: Vec<&'d Sample>,
    pub(crate) val: Vec<&'d Sample>,
    pub(crate) unlabeled: Vec<&'d Sample>,
    pub(crate) test: Vec<&'d Sample>,
    pub(crate) nets: [Option<Net>; 3],
    pub(crate) cache: PlCache,
    pub(crate) counters: Counters,
    pub(crate) image_dims: GridDims,
    pub(crate) hm_dims: GridDims,
    pub(crate) keypoints: usize,
    pub(crate) epoch: usize,
    pub(crate) batch: usize,
    pub(crate) lr: f64,
    labeled_rng: ChaCha8Rng,
    labeled_queue: Vec<usize>,
    pub(crate) step1_rng: ChaCha8Rng,
    pub(crate) cross_rng: [ChaCha8Rng; 2],
    pub(crate) step4_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, data: &'d Dataset, swap_roles: bool) -> Result<Self> {
        cfg.validate()?;
        let image_dims = data.image_dims();
        if image_dims.height % 8 != 0 || image_dims.width % 8 != 0 {
            return Err(Error::Config(format!(
                "image dims {}x{} must be multiples of 8 for the estimator",
                image_dims.width, image_dims.height
            )));
        }
        let keypoints = data.num_keypoints();
        let hm_dims = data.heatmap_dims();
        let ab = |w: f64| ArchConfig::new(image_dims, keypoints).with_width(w);
        if ab(1.0).heatmap_dims() != hm_dims {
            return Err(Error::Config("estimator output grid does not match the dataset heatmaps".into()));
        }

        let mut labeled: Vec<&Sample> = data.split(Split::Labeled).collect();
        labeled.shuffle(&mut stream_rng(cfg.seed, stream::VAL_SPLIT));
        let n_val = (labeled.len() as f64 * cfg.val_fraction).round() as usize;
        let val = labeled.split_off(labeled.len() - n_val);
        if labeled.is_empty() {
            return Err(Error::Config("no labeled samples left for training".into()));
        }
        let unlabeled: Vec<&Sample> = data.split(Split::Unlabeled).collect();
        let test: Vec<&Sample> = data.split(Split::Test).collect();

        // With swapped roles net A is built, and trained, from B's streams.
        let (sa, sb) = if swap_roles { (1, 0) } else { (0, 1) };
        let make = |stream_id: u64, width: f64| {
            let params: EstimatorParams<f32> = init_estimator(ab(width), &mut stream_rng(cfg.seed, stream_id));
            let adam = AdamState::new(&params);
            Net { params, adam }
        };
        let uses = |id: NetId| match cfg.method {
            Method::Supervised => id == NetId::C,
            Method::Dual => id != NetId::C,
            Method::Sspcm => true,
        };
        let nets = [
            uses(NetId::A).then(|| make(stream::INIT[sa], cfg.teacher_width)),
            uses(NetId::B).then(|| make(stream::INIT[sb], cfg.teacher_width)),
            uses(NetId::C).then(|| make(stream::INIT[2], 1.0)),
        ];
        let cross_rng = [
            stream_rng(cfg.seed, stream::CROSS_INTO[sa]),
            stream_rng(cfg.seed, stream::CROSS_INTO[sb]),
        ];
        let mut cfg = cfg.clone();
        cfg.ssco.min_conf = cfg.tau;
        Ok(Self {
            train_labeled: labeled,
            val,
            unlabeled,
            test,
            nets,
            cache: PlCache::new(),
            counters: Counters::default(),
            image_dims,
            hm_dims,
            keypoints,
            epoch: 0,
            batch: 0,
            lr: cfg.lr.lr_at(0),
            labeled_rng: stream_rng(cfg.seed, stream::LABELED_ORDER),
            labeled_queue: Vec::new(),
            step1_rng: stream_rng(cfg.seed, stream::STEP1_AUG),
            cross_rng,
            step4_rng: stream_rng(cfg.seed, stream::STEP4),
            unlabeled_rng: stream_rng(cfg.seed, stream::UNLABELED_ORDER),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn params(&self, id: NetId) -> Option<&EstimatorParams<f32>> {
        self.nets[id.index()].as_ref().map(|n| &n.params)
    }

    pub fn params_mut(&mut self, id: NetId) -> Option<&mut EstimatorParams<f32>> {
        self.nets[id.index()].as_mut().map(|n| &mut n.params)
    }

    pub fn cache(&self) -> &PlCache {
        &self.cache
    }

    pub fn train_labeled(&self) -> &[&'d Sample] {
        &self.train_labeled
    }

    pub fn unlabeled(&self) -> &[&'d Sample] {
        &self.unlabeled
    }

    fn next_labeled_batch(&mut self) -> Vec<&'d Sample> {
        let n = self.cfg.batch_size.min(self.train_labeled.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.labeled_queue.is_empty() {
                let mut order: Vec<usize> = (0..self.train_labeled.len()).collect();
                order.shuffle(&mut self.labeled_rng);
                order.reverse();
                self.labeled_queue = order;
            }
            let i = self.labeled_queue.pop().expect("refilled queue");
            out.push(self.train_labeled[i]);
        }
        out
    }

    fn iterations_per_epoch(&self) -> usize {
        let b = self.cfg.batch_size;
        let n = if self.unlabeled.is_empty() {
            self.train_labeled.len()
        } else {
            self.unlabeled.len()
        };
        n.div_ceil(b)
    }

    fn pck_of(&mut self, id: NetId, samples: &[&Sample]) -> Result<f64> {
        let alpha = self.cfg.pck_alpha;
        match self.nets[id.index()].as_ref() {
            Some(net) if !samples.is_empty() => {
                if id == NetId::C {
                    self.counters.net_c_forwards += 1;
                }
                evaluate_pck(&net.params, samples, alpha)
            }
            _ => Ok(f64::NAN),
        }
    }

    fn snapshot(&self, dir: &Path, epoch: usize) -> Result<()> {
        let snaps = dir.join("snapshots");
        std::fs::create_dir_all(&snaps).map_err(|e| Error::io(&snaps, e))?;
        for id in NetId::ALL {
            if let Some(p) = self.params(id) {
                save_params(&snapshot_path(dir, id, epoch), p)?;
            }
        }
        Ok(())
    }

    /// One epoch over the unlabeled set; returns the epoch's mean losses.
    fn run_epoch(&mut self, batches: &mut Vec<BatchLoss>) -> Result<[f64; 4]> {
        self.lr = self.cfg.lr.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..self.unlabeled.len()).collect();
        order.shuffle(&mut self.unlabeled_rng);
        let iters = self.iterations_per_epoch();
        let b = self.cfg.batch_size;
        let mut sums = [0.0f64; 4];
        for it in 0..iters {
            self.batch = it;
            let labeled = self.next_labeled_batch();
            let unl: Vec<&Sample> = order
                .iter()
                .skip(it * b)
                .take(b)
                .map(|&i| self.unlabeled[i])
                .collect();
            let l_sup = self.train_step1_supervised(&labeled)?;
            let (mut l1, mut l2, mut l3) = (0.0, 0.0, 0.0);
            if self.cfg.method != Method::Supervised && !unl.is_empty() {
                // Both directions read the teachers as they were at the start
                // of the exchange, so A and B play symmetric roles.
                let into_b = self.cross_targets(NetId::A, NetId::B, &unl)?;
                let into_a = self.cross_targets(NetId::B, NetId::A, &unl)?;
                l1 = self.apply_cross(into_b)?;
                l2 = self.apply_cross(into_a)?;
            }
            if self.cfg.method == Method::Sspcm && !unl.is_empty() {
                l3 = self.train_step4_pcm(&unl)?.loss;
            }
            let l_final = l_sup + self.cfg.beta * (l1 + l2 + l3);
            batches.push(BatchLoss {
                epoch: self.epoch + 1,
                batch: it,
                l_sup,
                l_unsup1: l1,
                l_unsup2: l2,
                l_unsup3: l3,
                l_final,
            });
            for (s, v) in sums.iter_mut().zip([l_sup, l1, l2, l3]) {
                *s += v;
            }
        }
        Ok(sums.map(|s| s / iters as f64))
    }
}

pub fn snapshot_path(run_dir: &Path, net: NetId, epoch: usize) -> PathBuf {
    run_dir
        .join("snapshots")
        .join(format!("net_{}_epoch_{epoch:04}.bin", net.name()))
}

/// Trains according to `cfg.method` and evaluates on the test split.
pub fn run_training(cfg: &TrainConfig, data: &Dataset) -> Result<TrainedRun> {
    run_training_with(cfg, data, RunOptions::default())
}

pub fn run_training_with(cfg: &TrainConfig, data: &Dataset, mut opts: RunOptions<'_>) -> Result<TrainedRun> {
    let start = Instant::now();
    let mut t = Trainer::new(cfg, data, opts.swap_roles)?;
    let interval = cfg.snapshot_interval;
    if let Some(dir) = &opts.snapshot_dir {
        t.snapshot(dir, 0)?;
    }
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut batches = Vec::new();
    for epoch in 0..cfg.epochs {
        t.epoch = epoch;
        let [l_sup, l1, l2, l3] = t.run_epoch(&mut batches)?;
        if cfg.method == Method::Sspcm {
            t.cache.promote();
            t.counters.cache_promotions += 1;
        }
        let val = t.val.clone();
        let row = EpochRow {
            epoch: epoch + 1,
            lr: t.lr,
            l_sup,
            l_unsup1: l1,
            l_unsup2: l2,
            l_unsup3: l3,
            pck_a: t.pck_of(NetId::A, &val)?,
            pck_b: t.pck_of(NetId::B, &val)?,
            pck_c: t.pck_of(NetId::C, &val)?,
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&row);
        }
        rows.push(row);
        let done = epoch + 1;
        if let Some(dir) = &opts.snapshot_dir {
            if (interval > 0 && done % interval == 0) || done == cfg.epochs {
                t.snapshot(dir, done)?;
            }
        }
    }
    let test = t.test.clone();
    let test_pck = [
        t.pck_of(NetId::A, &test)?,
        t.pck_of(NetId::B, &test)?,
        t.pck_of(NetId::C, &test)?,
    ];
    let reported_net = if cfg.method == Method::Dual { NetId::A } else { NetId::C };
    let report = RunReport {
        method: cfg.method,
        rows,
        batches,
        test_pck,
        reported_net,
        final_test_pck: test_pck[reported_net.index()],
        wall_clock_secs: start.elapsed().as_secs_f64(),
        counters: t.counters.clone(),
    };
    let nets = t.nets.map(|n| n.map(|n| n.params));
    Ok(TrainedRun { report, nets })
}

/// Heatmap-space version of an image-space augmentation.
pub(crate) fn to_heatmap(t: &Affine) -> Affine {
    t.to_heatmap_frame(HEATMAP_STRIDE)
}

#[cfg(test)]
mod tests;
