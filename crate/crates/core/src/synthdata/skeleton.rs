use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, GridDims, Keypoint, Pose};

/// One bone of the figure. The child is placed at `parent + length` along
/// the parent's direction rotated by `angle` (degrees).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub length: (f64, f64),
    pub angle: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    pub root: usize,
    /// Topologically ordered: every parent is placed before its children.
    pub edges: Vec<Edge>,
}

pub const HEAD: usize = 0;
pub const PELVIS: usize = 2;

impl Default for Skeleton {
    fn default() -> Self {
        Self::stick_figure()
    }
}

impl Skeleton {
    /// The 11-keypoint stick figure used by the synthetic dataset.
    pub fn stick_figure() -> Self {
        let names = [
            "head", "neck", "pelvis", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_knee",
            "r_knee", "l_ankle", "r_ankle",
        ];
        let e = |parent, child, length, angle| Edge {
            parent,
            child,
            length,
            angle,
        };
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            root: PELVIS,
            edges: vec![
                e(2, 1, (9.0, 11.0), (-10.0, 10.0)),
                e(1, 0, (3.5, 4.5), (-20.0, 20.0)),
                e(1, 3, (5.5, 7.5), (100.0, 160.0)),
                e(1, 4, (5.5, 7.5), (-160.0, -100.0)),
                e(3, 5, (4.5, 6.5), (-45.0, 45.0)),
                e(4, 6, (4.5, 6.5), (-45.0, 45.0)),
                e(2, 7, (6.5, 9.0), (145.0, 170.0)),
                e(2, 8, (6.5, 9.0), (-170.0, -145.0)),
                e(7, 9, (5.5, 7.5), (-20.0, 20.0)),
                e(8, 10, (5.5, 7.5), (-20.0, 20.0)),
            ],
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.names.len()
    }

    /// Checks that the edges form a tree rooted at `root`, listed parents first.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_keypoints();
        if self.root >= k {
            return Err(Error::InvalidDataset("skeleton root out of range".into()));
        }
        let mut placed = vec![false; k];
        placed[self.root] = true;
        for e in &self.edges {
            if e.parent >= k || e.child >= k {
                return Err(Error::InvalidDataset("skeleton edge index out of range".into()));
            }
            if !placed[e.parent] {
                return Err(Error::InvalidDataset(format!(
                    "edge {}->{} appears before its parent is placed",
                    e.parent, e.child
                )));
            }
            if placed[e.child] {
                return Err(Error::InvalidDataset(format!(
                    "keypoint {} is the child of more than one edge",
                    e.child
                )));
            }
            if e.length.0 > e.length.1 || e.angle.0 > e.angle.1 || e.length.0 < 0.0 {
                return Err(Error::InvalidDataset("skeleton edge has an empty range".into()));
            }
            placed[e.child] = true;
        }
        if placed.iter().any(|p| !p) {
            return Err(Error::InvalidDataset("skeleton does not reach every keypoint".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Samples a random figure in canonical image coordinates. Keypoints that
/// land off the canvas are marked with `conf = 0`.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, skeleton: &Skeleton, canvas: GridDims) -> Pose {
    let (w, h) = (canvas.width as f64, canvas.height as f64);
    let k = skeleton.num_keypoints();
    let mut pos = vec![(0.0, 0.0); k];
    let mut dir = vec![0.0f64; k];
    pos[skeleton.root] = (
        uniform(rng, (0.25 * w, 0.75 * w)),
        uniform(rng, (0.25 * h, 0.75 * h)),
    );
    dir[skeleton.root] = uniform(rng, (-180.0, 180.0));
    for e in &skeleton.edges {
        let len = uniform(rng, e.length);
        let phi = dir[e.parent] + uniform(rng, e.angle);
        let (s, c) = phi.to_radians().sin_cos();
        let (px, py) = pos[e.parent];
        pos[e.child] = (px + len * c, py + len * s);
        dir[e.child] = phi;
    }
    let keypoints = pos
        .into_iter()
        .map(|(x, y)| {
            let conf = if canvas.contains(x, y) { 1.0 } else { 0.0 };
            Keypoint::new(x, y, conf)
        })
        .collect();
    Pose::new(keypoints, Frame::Canonical)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CANVAS: GridDims = GridDims::new(64, 48);

    #[test]
    fn default_skeleton_is_a_tree() {
        let s = Skeleton::default();
        assert_eq!(s.num_keypoints(), 11);
        s.validate().unwrap();
        assert_eq!(s.names[s.root], "pelvis");
    }

    #[test]
    fn rejects_double_parent() {
        let mut s = Skeleton::default();
        s.edges.push(Edge {
            parent: 0,
            child: 5,
            length: (1.0, 2.0),
            angle: (0.0, 0.0),
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn same_seed_same_pose() {
        let s = Skeleton::default();
        let a = sample_pose(&mut ChaCha8Rng::seed_from_u64(3), &s, CANVAS);
        let b = sample_pose(&mut ChaCha8Rng::seed_from_u64(3), &s, CANVAS);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_width_ranges_give_rigid_figure() {
        let mut s = Skeleton::default();
        for e in &mut s.edges {
            e.length = (e.length.0, e.length.0);
            e.angle = (e.angle.0, e.angle.0);
        }
        // Two streams that share root position and orientation draws must
        // produce the same figure; only the first three draws matter.
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = sample_pose(&mut r1, &s, CANVAS);
        let b = sample_pose(&mut r2, &s, CANVAS);
        assert_eq!(a, b);
        let root = a.keypoints[PELVIS];
        let neck = a.keypoints[1];
        assert!((root.distance(&neck) - 9.0).abs() < 1e-12);
        let head = a.keypoints[HEAD];
        assert!((neck.distance(&head) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn most_figures_fit_on_canvas() {
        let s = Skeleton::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let inside = (0..n)
            .filter(|_| {
                sample_pose(&mut rng, &s, CANVAS)
                    .keypoints
                    .iter()
                    .all(|k| k.conf == 1.0)
            })
            .count();
        let frac = inside as f64 / n as f64;
        assert!(frac > 0.8, "only {frac} of poses fully on canvas");
    }
}
