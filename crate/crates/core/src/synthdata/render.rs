use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::skeleton::{Skeleton, HEAD};
use crate::geometry::{Frame, GridDims, Image, Pose};

pub const PIXEL_NOISE: f64 = 0.02;

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Draws the figure as dark anti-aliased strokes plus a filled head disc on
/// a light noisy background. Bones with an invalid endpoint are not drawn.
pub fn render_figure<R: Rng + ?Sized>(
    pose: &Pose,
    skeleton: &Skeleton,
    canvas: GridDims,
    rng: &mut R,
) -> Image {
    assert_eq!(pose.frame, Frame::Canonical, "figures are rendered in the canonical frame");
    let background = rng.random_range(0.8..1.0);
    let ink = rng.random_range(0.0..0.3);
    let stroke = rng.random_range(2.0..3.0);
    let head_radius = rng.random_range(2.0..4.0);

    let bones: Vec<_> = skeleton
        .edges
        .iter()
        .filter_map(|e| {
            let (a, b) = (pose.keypoints[e.parent], pose.keypoints[e.child]);
            (a.is_valid() && b.is_valid()).then_some(((a.x, a.y), (b.x, b.y)))
        })
        .collect();
    let head = pose.keypoints[HEAD];

    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid noise sigma");
    let mut data = Vec::with_capacity(canvas.len());
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            let (px, py) = (x as f64, y as f64);
            let mut cover: f64 = 0.0;
            for &(a, b) in &bones {
                let d = segment_distance(px, py, a, b);
                cover = cover.max((stroke / 2.0 + 0.5 - d).clamp(0.0, 1.0));
            }
            if head.is_valid() {
                let d = ((px - head.x).powi(2) + (py - head.y).powi(2)).sqrt();
                cover = cover.max((head_radius + 0.5 - d).clamp(0.0, 1.0));
            }
            let v = background + (ink - background) * cover + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image::from_vec(canvas, data, Frame::Canonical)
}
