//! PCK evaluation, rank statistics relating pseudo-label confidence and
//! position inconsistency to localization error, and a Monte-Carlo oracle
//! for the pair-selection rule.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorParams, Tensor};
use crate::geometry::{decode_argmax, render_gaussian_heatmaps, Affine, Frame, GridDims, Keypoint, Pose};
use crate::pcm::{pcm_correct, position_inconsistency, Model, PcmCandidates, PlCandidate, SourceEpoch};
use crate::synthdata::{Sample, HEATMAP_STRIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct PckResult {
    /// `None` for keypoints that are not visible in the ground truth.
    pub correct: Vec<Option<bool>>,
    /// Mean over visible keypoints; NaN when none is visible.
    pub mean: f64,
}

impl PckResult {
    pub fn visible(&self) -> usize {
        self.correct.iter().flatten().count()
    }

    pub fn hits(&self) -> usize {
        self.correct.iter().flatten().filter(|&&c| c).count()
    }
}

/// A keypoint is correct when it lies within `alpha * bbox_diag` of the
/// ground truth. Predictions with zero confidence never count as correct.
pub fn pck(pred: &Pose, gt: &Pose, alpha: f64, bbox_diag: f64) -> Result<PckResult> {
    if !(bbox_diag > 0.0) {
        return Err(Error::invalid(format!("bbox diagonal must be positive, got {bbox_diag}")));
    }
    assert_eq!(pred.frame, gt.frame, "pck on poses in different frames");
    assert_eq!(pred.len(), gt.len(), "pck on poses with different keypoint counts");
    let thr = alpha * bbox_diag;
    let correct: Vec<Option<bool>> = pred
        .keypoints
        .iter()
        .zip(&gt.keypoints)
        .map(|(p, g)| g.is_valid().then(|| p.is_valid() && p.distance(g) <= thr))
        .collect();
    let visible = correct.iter().flatten().count();
    let hits = correct.iter().flatten().filter(|&&c| c).count();
    let mean = if visible == 0 {
        f64::NAN
    } else {
        hits as f64 / visible as f64
    };
    Ok(PckResult { correct, mean })
}

/// Runs the estimator on canonical images in chunks and returns the decoded
/// canonical-frame heatmaps.
pub fn predict_heatmaps(params: &EstimatorParams<f32>, samples: &[&Sample]) -> Vec<crate::geometry::Heatmap> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let y = params.forward(&Tensor::from_images(&imgs));
        out.extend(y.to_heatmaps(Frame::Canonical));
    }
    out
}

/// Predicted poses in canonical image pixels.
pub fn predict_poses(params: &EstimatorParams<f32>, samples: &[&Sample]) -> Vec<Pose> {
    predict_heatmaps(params, samples)
        .iter()
        .map(|hm| decode_argmax(hm).heatmap_to_image(HEATMAP_STRIDE))
        .collect()
}

/// Micro-averaged PCK of `params` over labeled samples (hits over all
/// visible ground-truth keypoints).
pub fn evaluate_pck(params: &EstimatorParams<f32>, samples: &[&Sample], alpha: f64) -> Result<f64> {
    let preds = predict_poses(params, samples);
    let (mut hits, mut visible) = (0usize, 0usize);
    for (s, p) in samples.iter().zip(&preds) {
        let (Some(gt), Some(diag)) = (&s.pose, s.bbox_diag) else {
            return Err(Error::invalid(format!("sample {} has no ground truth", s.id)));
        };
        let r = pck(p, gt, alpha, diag)?;
        hits += r.hits();
        visible += r.visible();
    }
    Ok(if visible == 0 {
        f64::NAN
    } else {
        hits as f64 / visible as f64
    })
}

/// Ranks starting at 1, ties receiving the mean of the ranks they span.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation as the Pearson correlation of midranks. NaN when
/// either input is constant or shorter than two.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    if x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub sample_id: u64,
    pub keypoint: usize,
    pub confidence: f64,
    pub pi: Option<f64>,
    pub normalized_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub edges: Vec<f64>,
    pub mean_error: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over the observed range of `x`, each reporting the mean
/// of `y` over its members.
pub fn equal_width_bins(x: &[f64], y: &[f64], n_bins: usize) -> Bins {
    assert!(n_bins > 0, "at least one bin");
    if x.is_empty() {
        return Bins {
            edges: Vec::new(),
            mean_error: vec![None; n_bins],
            counts: vec![0; n_bins],
        };
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0; n_bins];
    for (&a, &b) in x.iter().zip(y) {
        let i = if width > 0.0 {
            (((a - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        sums[i] += b;
        counts[i] += 1;
    }
    let mean_error = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Bins {
        edges,
        mean_error,
        counts,
    }
}

pub const MIN_ANALYSIS_ROWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub rows: usize,
    pub rows_with_pi: usize,
    /// Spearman correlation between confidence and negated error.
    pub corr_conf_neg_error: f64,
    pub corr_pi_error: f64,
    pub low_confidence: bool,
    pub conf_bins: Bins,
    pub pi_bins: Bins,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub rows: Vec<AnalysisRow>,
    pub summary: AnalysisSummary,
}

impl AnalysisReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,keypoint,confidence,pi,normalized_error\n");
        for r in &self.rows {
            let pi = r.pi.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{:.6},{},{:.6}\n",
                r.sample_id, r.keypoint, r.confidence, pi, r.normalized_error
            ));
        }
        s
    }
}

/// Summarizes analysis rows: correlations and figure-style bins.
pub fn summarize_rows(rows: &[AnalysisRow]) -> AnalysisSummary {
    let conf: Vec<f64> = rows.iter().map(|r| r.confidence).collect();
    let err: Vec<f64> = rows.iter().map(|r| r.normalized_error).collect();
    let neg_err: Vec<f64> = err.iter().map(|e| -e).collect();
    let (pi, pi_err): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.pi.map(|p| (p, r.normalized_error)))
        .unzip();
    AnalysisSummary {
        rows: rows.len(),
        rows_with_pi: pi.len(),
        corr_conf_neg_error: spearman(&conf, &neg_err),
        corr_pi_error: spearman(&pi, &pi_err),
        low_confidence: rows.len() < MIN_ANALYSIS_ROWS,
        conf_bins: equal_width_bins(&conf, &err, 10),
        pi_bins: equal_width_bins(&pi, &pi_err, 10),
    }
}

/// Scores net A's pseudo-labels against oracle poses. A row is kept when A's
/// confidence passes `tau` and the oracle keypoint is visible; its PI is
/// filled when B's confidence passes `tau` as well.
pub fn analyze_pi(
    net_a: &EstimatorParams<f32>,
    net_b: &EstimatorParams<f32>,
    samples: &[&Sample],
    oracle: &HashMap<u64, Pose>,
    tau: f64,
) -> Result<AnalysisReport> {
    let ha = predict_heatmaps(net_a, samples);
    let hb = predict_heatmaps(net_b, samples);
    let mut rows = Vec::new();
    for ((s, a), b) in samples.iter().zip(&ha).zip(&hb) {
        let gt = oracle
            .get(&s.id)
            .ok_or_else(|| Error::invalid(format!("no oracle pose for sample {}", s.id)))?
            .image_to_heatmap(HEATMAP_STRIDE);
        let dims = a.dims();
        let (pa, pb) = (decode_argmax(a), decode_argmax(b));
        for (k, g) in gt.keypoints.iter().enumerate() {
            let (ka, kb) = (pa.keypoints[k], pb.keypoints[k]);
            if !g.is_valid() || !(ka.conf >= tau && ka.conf > 0.0) {
                continue;
            }
            let pi = (kb.conf >= tau && kb.conf > 0.0).then(|| position_inconsistency(&ka, &kb, dims));
            rows.push(AnalysisRow {
                sample_id: s.id,
                keypoint: k,
                confidence: ka.conf,
                pi,
                normalized_error: ka.distance(g) / dims.diagonal(),
            });
        }
    }
    let summary = summarize_rows(&rows);
    Ok(AnalysisReport { rows, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of inlier candidates, in heatmap pixels.
    pub sigma: f64,
    pub outlier_prob: f64,
    pub grid: GridDims,
    /// Gaussian width used to render candidate heatmaps.
    pub render_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            outlier_prob: 0.1,
            grid: GridDims::new(16, 12),
            render_sigma: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: usize,
    pub fused_mean_error: f64,
    pub single_mean_error: f64,
    pub pair_mean_error: f64,
    /// Standard error of the per-trial difference single - fused.
    pub single_minus_fused_se: f64,
    /// Standard error of the per-trial difference pair - fused.
    pub pair_minus_fused_se: f64,
    /// Mean and standard error of the per-trial difference `0.9 * single - fused`.
    pub margin_diff_mean: f64,
    pub margin_diff_se: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo comparison of the minimal-inconsistency pair against a single
/// random candidate and a random cross-model pair, for one keypoint whose
/// four candidates are noisy copies of the truth with occasional uniform
/// outliers.
pub fn pcm_noise_oracle(model: &NoiseModel, trials: usize, seed: u64) -> Result<OracleReport> {
    if trials == 0 {
        return Err(Error::invalid("oracle needs at least one trial"));
    }
    if !(model.sigma >= 0.0) || !(0.0..=1.0).contains(&model.outlier_prob) {
        return Err(Error::invalid("noise model needs sigma >= 0 and outlier_prob in [0, 1]"));
    }
    let g = model.grid;
    let (wmax, hmax) = ((g.width - 1) as f64, (g.height - 1) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, model.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let ident = Affine::identity(Frame::Canonical, g).between(Frame::Canonical, Frame::Hard);
    let slots = [
        (Model::A, SourceEpoch::Last),
        (Model::A, SourceEpoch::Current),
        (Model::B, SourceEpoch::Last),
        (Model::B, SourceEpoch::Current),
    ];
    let (mut fused_e, mut single_e, mut pair_e) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..trials {
        let gt = Keypoint::new(rng.random_range(0.0..=wmax), rng.random_range(0.0..=hmax), 1.0);
        let cands: Vec<PlCandidate> = slots
            .iter()
            .map(|&(m, e)| {
                let (x, y) = if rng.random::<f64>() < model.outlier_prob {
                    (rng.random_range(0.0..=wmax), rng.random_range(0.0..=hmax))
                } else {
                    (
                        (gt.x + noise.sample(&mut rng)).clamp(0.0, wmax),
                        (gt.y + noise.sample(&mut rng)).clamp(0.0, hmax),
                    )
                };
                let pose = Pose::new(vec![Keypoint::new(x, y, 1.0)], Frame::Canonical);
                Ok(PlCandidate::new(m, e, render_gaussian_heatmaps(&pose, model.render_sigma, g)?))
            })
            .collect::<Result<_>>()?;
        let set = PcmCandidates {
            a_last: Some(&cands[0]),
            a_cur: &cands[1],
            b_last: Some(&cands[2]),
            b_cur: &cands[3],
        };
        let r = pcm_correct(&set, &ident, g, 0.1);
        fused_e.push(decode_argmax(&r.fused).keypoints[0].distance(&gt));

        let single = &cands[rng.random_range(0..4)];
        single_e.push(single.decoded().keypoints[0].distance(&gt));

        let a = &cands[rng.random_range(0..2)];
        let b = &cands[2 + rng.random_range(0..2)];
        let random_pair = PcmCandidates {
            a_last: None,
            a_cur: &PlCandidate::new(Model::A, SourceEpoch::Current, a.heatmap().clone()),
            b_last: None,
            b_cur: &PlCandidate::new(Model::B, SourceEpoch::Current, b.heatmap().clone()),
        };
        let rp = pcm_correct(&random_pair, &ident, g, 0.1);
        pair_e.push(decode_argmax(&rp.fused).keypoints[0].distance(&gt));
    }
    let diff = |x: &[f64]| -> Vec<f64> { x.iter().zip(&fused_e).map(|(a, f)| a - f).collect() };
    let (_, s_se) = mean_se(&diff(&single_e));
    let (_, p_se) = mean_se(&diff(&pair_e));
    let margin: Vec<f64> = single_e.iter().zip(&fused_e).map(|(s, f)| 0.9 * s - f).collect();
    let (m_mean, m_se) = mean_se(&margin);
    Ok(OracleReport {
        trials,
        fused_mean_error: mean_se(&fused_e).0,
        single_mean_error: mean_se(&single_e).0,
        pair_mean_error: mean_se(&pair_e).0,
        single_minus_fused_se: s_se,
        pair_minus_fused_se: p_se,
        margin_diff_mean: m_mean,
        margin_diff_se: m_se,
    })
}
