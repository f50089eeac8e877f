//! Keypoint-aware cut-occlude: square patches cut around a donor's pseudo
//! keypoints are pasted over a recipient's pseudo keypoints.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, Image, Pose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SscoConfig {
    pub n_patches: usize,
    /// Patch side as a fraction of `min(H, W)`.
    pub side_range: (f64, f64),
    pub min_conf: f64,
}

impl Default for SscoConfig {
    fn default() -> Self {
        Self {
            n_patches: 2,
            side_range: (0.15, 0.30),
            min_conf: 0.1,
        }
    }
}

impl SscoConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.side_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "ssco side range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            )));
        }
        if !self.min_conf.is_finite() || self.min_conf < 0.0 {
            return Err(Error::Config("ssco min_conf must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// Destination rectangle of one paste, inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PasteRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PasteRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

fn odd_side(fraction: f64, min_side: usize) -> usize {
    let s = fraction * min_side as f64;
    let largest = if min_side % 2 == 1 { min_side } else { min_side.saturating_sub(1) };
    ((2.0 * ((s - 1.0) / 2.0).round() + 1.0).max(1.0) as usize).min(largest.max(1))
}

fn confident(pose: &Pose, min_conf: f64) -> Vec<(f64, f64)> {
    pose.keypoints
        .iter()
        .filter(|k| k.is_valid() && k.conf >= min_conf)
        .map(|k| (k.x, k.y))
        .collect()
}

/// Pastes `cfg.n_patches` donor patches onto the recipient. Keypoints are in
/// canonical image pixels.
pub fn ssco_apply<R: Rng + ?Sized>(
    recipient: &Image,
    recipient_kps: &Pose,
    donor: &Image,
    donor_kps: &Pose,
    cfg: &SscoConfig,
    rng: &mut R,
) -> Image {
    ssco_apply_traced(recipient, recipient_kps, donor, donor_kps, cfg, rng).0
}

/// As [`ssco_apply`], also returning the rectangles that were written.
pub fn ssco_apply_traced<R: Rng + ?Sized>(
    recipient: &Image,
    recipient_kps: &Pose,
    donor: &Image,
    donor_kps: &Pose,
    cfg: &SscoConfig,
    rng: &mut R,
) -> (Image, Vec<PasteRect>) {
    assert_eq!(recipient.dims(), donor.dims(), "ssco images differ in size");
    assert!(
        recipient_kps.frame == Frame::Canonical && donor_kps.frame == Frame::Canonical,
        "ssco keypoints must be in the canonical frame"
    );
    let mut out = recipient.clone();
    let mut rects = Vec::new();
    let src_pts = confident(donor_kps, cfg.min_conf);
    let dst_pts = confident(recipient_kps, cfg.min_conf);
    if cfg.n_patches == 0 || src_pts.is_empty() || dst_pts.is_empty() {
        return (out, rects);
    }
    let (h, w) = (recipient.height as isize, recipient.width as isize);
    let min_side = recipient.height.min(recipient.width);
    for _ in 0..cfg.n_patches {
        let (sx, sy) = src_pts[rng.random_range(0..src_pts.len())];
        let (dx, dy) = dst_pts[rng.random_range(0..dst_pts.len())];
        let (lo, hi) = cfg.side_range;
        let frac = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let r = (odd_side(frac, min_side) / 2) as isize;
        let (sx, sy) = (sx.round() as isize, sy.round() as isize);
        let (dx, dy) = (dx.round() as isize, dy.round() as isize);
        let mut rect: Option<PasteRect> = None;
        for oy in -r..=r {
            for ox in -r..=r {
                let (px, py) = (sx + ox, sy + oy);
                let (qx, qy) = (dx + ox, dy + oy);
                if px < 0 || py < 0 || px >= w || py >= h || qx < 0 || qy < 0 || qx >= w || qy >= h {
                    continue;
                }
                out.set(qy as usize, qx as usize, donor.get(py as usize, px as usize));
                let (qx, qy) = (qx as usize, qy as usize);
                rect = Some(match rect {
                    None => PasteRect {
                        x0: qx,
                        y0: qy,
                        x1: qx,
                        y1: qy,
                    },
                    Some(rc) => PasteRect {
                        x0: rc.x0.min(qx),
                        y0: rc.y0.min(qy),
                        x1: rc.x1.max(qx),
                        y1: rc.y1.max(qy),
                    },
                });
            }
        }
        rects.extend(rect);
    }
    (out, rects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GridDims, Keypoint};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: GridDims = GridDims::new(64, 48);

    fn noise_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(
            DIMS,
            (0..DIMS.len()).map(|_| rng.random::<f32>()).collect(),
            Frame::Canonical,
        )
    }

    fn pose(points: &[(f64, f64, f64)]) -> Pose {
        Pose::new(
            points.iter().map(|&(x, y, c)| Keypoint::new(x, y, c)).collect(),
            Frame::Canonical,
        )
    }

    #[test]
    fn zero_patches_is_identity() {
        let (r, d) = (noise_image(1), noise_image(2));
        let p = pose(&[(10.0, 10.0, 1.0), (30.0, 40.0, 1.0)]);
        let cfg = SscoConfig {
            n_patches: 0,
            ..SscoConfig::default()
        };
        let out = ssco_apply(&r, &p, &d, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, r);
    }

    #[test]
    fn unconfident_donor_is_identity() {
        let (r, d) = (noise_image(1), noise_image(2));
        let rp = pose(&[(10.0, 10.0, 1.0)]);
        let dp = pose(&[(10.0, 10.0, 0.05), (20.0, 20.0, 0.0)]);
        for n in [1, 2, 5] {
            let cfg = SscoConfig {
                n_patches: n,
                ..SscoConfig::default()
            };
            let out = ssco_apply(&r, &rp, &d, &dp, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(out, r);
        }
    }

    #[test]
    fn patch_is_odd_square_copied_from_donor() {
        let (r, d) = (noise_image(1), noise_image(2));
        let rp = pose(&[(20.0, 30.0, 1.0)]);
        let dp = pose(&[(24.0, 32.0, 1.0)]);
        let cfg = SscoConfig {
            n_patches: 1,
            side_range: (0.25, 0.25),
            min_conf: 0.1,
        };
        let (out, rects) = ssco_apply_traced(&r, &rp, &d, &dp, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        // 0.25 * 48 = 12 rounds to the odd side 11 or 13; the rule picks 13.
        let rc = rects[0];
        assert_eq!((rc.x1 - rc.x0 + 1, rc.y1 - rc.y0 + 1), (13, 13));
        assert_eq!((rc.x0, rc.y0), (14, 24));
        for y in rc.y0..=rc.y1 {
            for x in rc.x0..=rc.x1 {
                assert_eq!(out.get(y, x), d.get(y + 2, x + 4));
            }
        }
    }

    #[test]
    fn odd_side_rounding() {
        assert_eq!(odd_side(0.15, 48), 7);
        assert_eq!(odd_side(0.30, 48), 15);
        assert_eq!(odd_side(0.001, 48), 1);
        assert_eq!(odd_side(1.0, 48), 47);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = SscoConfig {
            side_range: (0.3, 0.2),
            ..SscoConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SscoConfig::default().validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn only_pasted_rectangles_change(
            seed in any::<u64>(),
            n in 0usize..5,
            rkps in prop::collection::vec((-5.0f64..53.0, -5.0f64..69.0, 0.0f64..1.0), 1..6),
            dkps in prop::collection::vec((-5.0f64..53.0, -5.0f64..69.0, 0.0f64..1.0), 1..6),
        ) {
            let (r, d) = (noise_image(seed), noise_image(seed ^ 0xabc));
            let cfg = SscoConfig { n_patches: n, ..SscoConfig::default() };
            let (rp, dp) = (pose(&rkps), pose(&dkps));
            let (out, rects) = ssco_apply_traced(&r, &rp, &d, &dp, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let (again, _) = ssco_apply_traced(&r, &rp, &d, &dp, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&out, &again);
            prop_assert!(rects.len() <= n);
            for y in 0..DIMS.height {
                for x in 0..DIMS.width {
                    let v = out.get(y, x);
                    prop_assert!((0.0..=1.0).contains(&v));
                    if !rects.iter().any(|rc| rc.contains(x, y)) {
                        prop_assert_eq!(v.to_bits(), r.get(y, x).to_bits());
                    }
                }
            }
        }
    }
}
