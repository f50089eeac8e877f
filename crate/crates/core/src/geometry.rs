//! Coordinate frames, Gaussian heatmap encoding/decoding and affine warping.
//!
//! Conventions used throughout the crate: `x` grows rightward, `y` grows
//! downward, and pixel centers sit on integer coordinates. A positive
//! rotation angle applies the matrix `[[cos, -sin], [sin, cos]]`, so with
//! `y` pointing down the point `(1, 0)` rotates by 90 degrees onto `(0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate frame a pose, image or heatmap lives in.
///
/// `Canonical`, `Easy` and `Hard` name augmentation views. `Heatmap` is the
/// frame of grids that are not tied to any view (hand-built test maps,
/// analysis inputs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Canonical,
    Easy,
    Hard,
    Heatmap,
}

/// Height and width of a pixel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Diagonal measured between the centers of opposite corner pixels.
    pub fn diagonal(&self) -> f64 {
        let w = self.width.saturating_sub(1) as f64;
        let h = self.height.saturating_sub(1) as f64;
        (w * w + h * h).sqrt()
    }

    /// Whether `(x, y)` falls on the footprint of some pixel of the grid.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= -0.5 && y >= -0.5 && x < self.width as f64 - 0.5 && y < self.height as f64 - 0.5
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }
}

/// A 2D keypoint. `conf == 0` marks an invalid keypoint whose coordinates
/// carry no meaning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

impl Keypoint {
    pub const INVALID: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        conf: 0.0,
    };

    pub const fn new(x: f64, y: f64, conf: f64) -> Self {
        Self { x, y, conf }
    }

    pub fn is_valid(&self) -> bool {
        self.conf > 0.0
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
    pub frame: Frame,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>, frame: Frame) -> Self {
        Self { keypoints, frame }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Diagonal of the tight bounding box around the valid keypoints, or
    /// `None` when fewer than one keypoint is valid.
    pub fn bbox_diagonal(&self) -> Option<f64> {
        let mut it = self.keypoints.iter().filter(|k| k.is_valid());
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for k in it {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        Some(((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt())
    }

    /// Maps coordinates between image pixels and heatmap pixels for a grid
    /// that is `stride` times coarser. Heatmap pixel `u` covers image pixels
    /// `stride*u .. stride*u + stride - 1`.
    pub fn image_to_heatmap(&self, stride: usize) -> Pose {
        let s = stride as f64;
        let off = (s - 1.0) / 2.0;
        self.map_coords(|x, y| ((x - off) / s, (y - off) / s))
    }

    pub fn heatmap_to_image(&self, stride: usize) -> Pose {
        let s = stride as f64;
        let off = (s - 1.0) / 2.0;
        self.map_coords(|x, y| (x * s + off, y * s + off))
    }

    fn map_coords(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Pose {
        let keypoints = self
            .keypoints
            .iter()
            .map(|k| {
                if k.is_valid() {
                    let (x, y) = f(k.x, k.y);
                    Keypoint::new(x, y, k.conf)
                } else {
                    *k
                }
            })
            .collect();
        Pose::new(keypoints, self.frame)
    }
}

/// K-channel score map stored channel-major, row-major within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub frame: Frame,
}

impl Heatmap {
    pub fn zeros(channels: usize, dims: GridDims, frame: Frame) -> Self {
        Self {
            channels,
            height: dims.height,
            width: dims.width,
            data: vec![0.0; channels * dims.len()],
            frame,
        }
    }

    pub fn from_vec(channels: usize, dims: GridDims, data: Vec<f32>, frame: Frame) -> Self {
        assert_eq!(
            data.len(),
            channels * dims.len(),
            "heatmap data length does not match its shape"
        );
        Self {
            channels,
            height: dims.height,
            width: dims.width,
            data,
            frame,
        }
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.height, self.width)
    }

    /// Diagonal length of the grid (`L_HM`).
    pub fn diagonal(&self) -> f64 {
        self.dims().diagonal()
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f32 {
        self.data[(k * self.height + y) * self.width + x]
    }
}

/// Single-channel grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub frame: Frame,
}

impl Image {
    pub fn filled(dims: GridDims, value: f32, frame: Frame) -> Self {
        Self {
            height: dims.height,
            width: dims.width,
            data: vec![value; dims.len()],
            frame,
        }
    }

    pub fn from_vec(dims: GridDims, data: Vec<f32>, frame: Frame) -> Self {
        assert_eq!(data.len(), dims.len(), "image data length does not match");
        Self {
            height: dims.height,
            width: dims.width,
            data,
            frame,
        }
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Invertible 2D affine map from `source` pixel coordinates to `target`
/// pixel coordinates, stored as the 2x3 matrix `[[a, b, tx], [c, d, ty]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    matrix: [[f64; 3]; 2],
    pub source: Frame,
    pub target: Frame,
    pub out_dims: GridDims,
}

/// Builds the similarity transform that rotates by `rotation` degrees and
/// scales by `scale` about `center`. The center stays fixed, so the output
/// frame shares it.
pub fn make_affine(
    rotation: f64,
    scale: f64,
    center: (f64, f64),
    out_dims: GridDims,
) -> Result<Affine> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    if !rotation.is_finite() {
        return Err(Error::invalid("rotation must be finite"));
    }
    let (s, c) = rotation.to_radians().sin_cos();
    let (a, b) = (scale * c, -scale * s);
    let (cc, d) = (scale * s, scale * c);
    let (cx, cy) = center;
    let tx = cx - (a * cx + b * cy);
    let ty = cy - (cc * cx + d * cy);
    Ok(Affine {
        matrix: [[a, b, tx], [cc, d, ty]],
        source: Frame::Heatmap,
        target: Frame::Heatmap,
        out_dims,
    })
}

impl Affine {
    pub fn identity(frame: Frame, dims: GridDims) -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            source: frame,
            target: frame,
            out_dims: dims,
        }
    }

    pub fn from_matrix(matrix: [[f64; 3]; 2], out_dims: GridDims) -> Self {
        Self {
            matrix,
            source: Frame::Heatmap,
            target: Frame::Heatmap,
            out_dims,
        }
    }

    /// Retags the transform with the frames it connects.
    pub fn between(mut self, source: Frame, target: Frame) -> Self {
        self.source = source;
        self.target = target;
        self
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.matrix
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// Rotation angle in degrees, meaningful for similarity transforms.
    pub fn rotation(&self) -> f64 {
        self.matrix[1][0].atan2(self.matrix[0][0]).to_degrees()
    }

    /// Isotropic scale, meaningful for similarity transforms.
    pub fn scale(&self) -> f64 {
        self.determinant().abs().sqrt()
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Affine {
        let [[a, b, tx], [c, d, ty]] = self.matrix;
        let det = a * d - b * c;
        assert!(det != 0.0 && det.is_finite(), "affine transform is singular");
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        let itx = -(ia * tx + ib * ty);
        let ity = -(ic * tx + id * ty);
        Affine {
            matrix: [[ia, ib, itx], [ic, id, ity]],
            source: self.target,
            target: self.source,
            out_dims: self.out_dims,
        }
    }

    /// `self` followed by `next`, i.e. the matrix product `next * self`.
    pub fn then(&self, next: &Affine) -> Affine {
        assert_eq!(
            self.target, next.source,
            "composing affines whose frames do not chain"
        );
        let [[a1, b1, t1], [c1, d1, u1]] = self.matrix;
        let [[a2, b2, t2], [c2, d2, u2]] = next.matrix;
        Affine {
            matrix: [
                [a2 * a1 + b2 * c1, a2 * b1 + b2 * d1, a2 * t1 + b2 * u1 + t2],
                [c2 * a1 + d2 * c1, c2 * b1 + d2 * d1, c2 * t1 + d2 * u1 + u2],
            ],
            source: self.source,
            target: next.target,
            out_dims: next.out_dims,
        }
    }

    /// Conjugates an image-space transform into heatmap space for a grid
    /// `stride` times coarser (see [`Pose::image_to_heatmap`]).
    pub fn to_heatmap_frame(&self, stride: usize) -> Affine {
        let s = stride as f64;
        let off = (s - 1.0) / 2.0;
        let [[a, b, tx], [c, d, ty]] = self.matrix;
        // u_img = s * u_hm + off, so T_hm(u) = (T_img(s u + off) - off) / s.
        let ntx = (a * off + b * off + tx - off) / s;
        let nty = (c * off + d * off + ty - off) / s;
        Affine {
            matrix: [[a, b, ntx], [c, d, nty]],
            source: self.source,
            target: self.target,
            out_dims: GridDims::new(self.out_dims.height / stride, self.out_dims.width / stride),
        }
    }
}

/// Renders one Gaussian channel per keypoint, with amplitude 1 at the
/// keypoint location. Invalid keypoints and keypoints off the grid give
/// all-zero channels.
pub fn render_gaussian_heatmaps(pose: &Pose, sigma: f64, hm_dims: GridDims) -> Result<Heatmap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if hm_dims.is_empty() {
        return Err(Error::invalid("heatmap grid has zero size"));
    }
    let mut hm = Heatmap::zeros(pose.len(), hm_dims, pose.frame);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (k, kp) in pose.keypoints.iter().enumerate() {
        if !kp.is_valid() || !hm_dims.contains(kp.x, kp.y) {
            continue;
        }
        // Separable evaluation: exp(-(dx^2 + dy^2) s) = exp(-dx^2 s) * exp(-dy^2 s)
        // would round differently, so evaluate the full exponent per pixel.
        let ch = hm.channel_mut(k);
        for v in 0..hm_dims.height {
            let dy = v as f64 - kp.y;
            for u in 0..hm_dims.width {
                let dx = u as f64 - kp.x;
                ch[v * hm_dims.width + u] = (-(dx * dx + dy * dy) * inv).exp() as f32;
            }
        }
    }
    Ok(hm)
}

/// Per-channel argmax with first row-major occurrence on ties. The decoded
/// pose keeps the heatmap's frame and is expressed in heatmap pixels.
pub fn decode_argmax(hm: &Heatmap) -> Pose {
    assert!(
        hm.channels > 0 && hm.height * hm.width > 0,
        "decode_argmax on an empty heatmap"
    );
    let keypoints = (0..hm.channels)
        .map(|k| {
            let ch = hm.channel(k);
            let mut best = 0usize;
            let mut best_v = ch[0];
            for (i, &v) in ch.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            let conf = if best_v.is_nan() {
                0.0
            } else {
                (best_v as f64).clamp(0.0, 1.0)
            };
            Keypoint::new((best % hm.width) as f64, (best / hm.width) as f64, conf)
        })
        .collect();
    Pose::new(keypoints, hm.frame)
}

/// Maps every valid keypoint through `t`; invalid keypoints pass through.
pub fn warp_points(pose: &Pose, t: &Affine) -> Pose {
    assert_eq!(pose.frame, t.source, "pose frame does not match the transform");
    let keypoints = pose
        .keypoints
        .iter()
        .map(|k| {
            if k.is_valid() {
                let (x, y) = t.apply(k.x, k.y);
                Keypoint::new(x, y, k.conf)
            } else {
                *k
            }
        })
        .collect();
    Pose::new(keypoints, t.target)
}

/// Inverse-maps each output pixel into the source grid and samples
/// bilinearly, substituting `fill` for neighbours off the grid.
fn warp_planes(
    src: &[f32],
    planes: usize,
    src_dims: GridDims,
    t: &Affine,
    out_dims: GridDims,
    fill: f32,
) -> Vec<f32> {
    let inv = t.inverse();
    let (sw, sh) = (src_dims.width as isize, src_dims.height as isize);
    let src_n = src_dims.len();
    let out_n = out_dims.len();
    let mut out = vec![fill; planes * out_n];
    for v in 0..out_dims.height {
        for u in 0..out_dims.width {
            let (sx, sy) = inv.apply(u as f64, v as f64);
            let x0f = sx.floor();
            let y0f = sy.floor();
            let x0 = x0f as isize;
            let y0 = y0f as isize;
            if x0 < -1 || y0 < -1 || x0 >= sw || y0 >= sh {
                continue;
            }
            let fx = (sx - x0f) as f32;
            let fy = (sy - y0f) as f32;
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            let o = v * out_dims.width + u;
            for p in 0..planes {
                let plane = &src[p * src_n..(p + 1) * src_n];
                let mut acc = 0.0f32;
                for &(x, y, w) in &taps {
                    let s = if x >= 0 && y >= 0 && x < sw && y < sh {
                        plane[(y * sw + x) as usize]
                    } else {
                        fill
                    };
                    acc += s * w;
                }
                out[p * out_n + o] = acc;
            }
        }
    }
    out
}

/// Warps every channel of `hm` through `t` with zero fill.
pub fn warp_heatmap(hm: &Heatmap, t: &Affine, out_dims: GridDims) -> Result<Heatmap> {
    assert_eq!(hm.frame, t.source, "heatmap frame does not match the transform");
    if out_dims.is_empty() {
        return Err(Error::invalid("warp output grid has zero size"));
    }
    let data = warp_planes(&hm.data, hm.channels, hm.dims(), t, out_dims, 0.0);
    Ok(Heatmap::from_vec(hm.channels, out_dims, data, t.target))
}

/// Warps a single heatmap channel, returning the output plane.
pub fn warp_channel(hm: &Heatmap, k: usize, t: &Affine, out_dims: GridDims) -> Vec<f32> {
    assert_eq!(hm.frame, t.source, "heatmap frame does not match the transform");
    warp_planes(hm.channel(k), 1, hm.dims(), t, out_dims, 0.0)
}

pub fn warp_image(img: &Image, t: &Affine, out_dims: GridDims, fill: f32) -> Result<Image> {
    assert_eq!(img.frame, t.source, "image frame does not match the transform");
    if out_dims.is_empty() {
        return Err(Error::invalid("warp output grid has zero size"));
    }
    let data = warp_planes(&img.data, 1, img.dims(), t, out_dims, fill);
    Ok(Image::from_vec(out_dims, data, t.target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const HM: GridDims = GridDims::new(16, 12);

    fn single(x: f64, y: f64, conf: f64) -> Pose {
        Pose::new(vec![Keypoint::new(x, y, conf)], Frame::Heatmap)
    }

    #[test]
    fn gaussian_at_integer_pixel() {
        let hm = render_gaussian_heatmaps(&single(8.0, 6.0, 1.0), 1.0, HM).unwrap();
        assert_eq!(hm.get(0, 6, 8), 1.0);
        assert_abs_diff_eq!(hm.get(0, 6, 9) as f64, (-0.5f64).exp(), epsilon = 1e-7);
        assert_abs_diff_eq!(hm.get(0, 6, 9) as f64, 0.6065, epsilon = 1e-4);
    }

    #[test]
    fn invisible_keypoint_renders_zero_channel() {
        let hm = render_gaussian_heatmaps(&single(8.0, 6.0, 0.0), 1.0, HM).unwrap();
        assert!(hm.data.iter().all(|&v| v == 0.0));
        let hm = render_gaussian_heatmaps(&single(30.0, 6.0, 1.0), 1.0, HM).unwrap();
        assert!(hm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_pixel_keypoint_brute_force() {
        let hm = render_gaussian_heatmaps(&single(3.5, 2.5, 1.0), 2.0, HM).unwrap();
        // Brute-force oracle over the whole grid.
        let mut vals = Vec::new();
        for v in 0..HM.height {
            for u in 0..HM.width {
                let d2 = (u as f64 - 3.5).powi(2) + (v as f64 - 2.5).powi(2);
                vals.push(((u, v), (-d2 / 8.0).exp()));
            }
        }
        let max = vals.iter().map(|x| x.1).fold(f64::MIN, f64::max);
        let arg: Vec<_> = vals.iter().filter(|x| x.1 == max).map(|x| x.0).collect();
        assert_eq!(arg, vec![(3, 2), (4, 2), (3, 3), (4, 3)]);
        let expect = (-(0.25f64 + 0.25) / 8.0).exp();
        assert_abs_diff_eq!(max, expect, epsilon = 1e-15);
        for (u, v) in arg {
            assert_abs_diff_eq!(hm.get(0, v, u) as f64, expect, epsilon = 1e-7);
        }
        let hm_max = hm.data.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(hm_max, hm.get(0, 2, 3));
    }

    #[test]
    fn render_rejects_bad_arguments() {
        assert!(render_gaussian_heatmaps(&single(1.0, 1.0, 1.0), 0.0, HM).is_err());
        assert!(render_gaussian_heatmaps(&single(1.0, 1.0, 1.0), -1.0, HM).is_err());
        assert!(render_gaussian_heatmaps(&single(1.0, 1.0, 1.0), 1.0, GridDims::new(0, 4)).is_err());
    }

    #[test]
    fn decode_examples() {
        let mut hm = Heatmap::zeros(3, HM, Frame::Heatmap);
        hm.channel_mut(0)[7 * 12 + 10] = 0.9;
        hm.channel_mut(2)[2 * 12 + 2] = 0.7;
        hm.channel_mut(2)[5 * 12 + 5] = 0.7;
        let p = decode_argmax(&hm);
        assert_eq!(p.keypoints[0], Keypoint::new(10.0, 7.0, 0.9f32 as f64));
        assert_eq!(p.keypoints[1], Keypoint::new(0.0, 0.0, 0.0));
        assert!(!p.keypoints[1].is_valid());
        assert_eq!((p.keypoints[2].x, p.keypoints[2].y), (2.0, 2.0));
        assert_eq!(decode_argmax(&hm), p);
    }

    #[test]
    fn decode_clamps_confidence() {
        let mut hm = Heatmap::zeros(1, HM, Frame::Heatmap);
        hm.channel_mut(0)[3] = 1.7;
        assert_eq!(decode_argmax(&hm).keypoints[0].conf, 1.0);
    }

    #[test]
    fn affine_examples() {
        let id = make_affine(0.0, 1.0, (5.5, 7.5), HM).unwrap();
        assert_eq!(id.matrix(), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

        let r = make_affine(90.0, 1.0, (0.0, 0.0), HM).unwrap();
        let (x, y) = r.apply(1.0, 0.0);
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y, 1.0, epsilon = 1e-15);

        let a = make_affine(37.0, 1.2, (4.0, 9.0), HM).unwrap();
        let (x, y) = a.then(&a.inverse()).apply(13.2, 7.7);
        assert_abs_diff_eq!(x, 13.2, epsilon = 1e-9);
        assert_abs_diff_eq!(y, 7.7, epsilon = 1e-9);

        assert!(make_affine(0.0, 0.0, (0.0, 0.0), HM).is_err());
        assert!(make_affine(0.0, -2.0, (0.0, 0.0), HM).is_err());
    }

    #[test]
    fn warp_points_examples() {
        let pose = Pose::new(
            vec![Keypoint::new(3.0, 4.0, 1.0), Keypoint::new(9.0, 9.0, 0.0)],
            Frame::Heatmap,
        );
        let id = Affine::identity(Frame::Heatmap, HM);
        assert_eq!(warp_points(&pose, &id), pose);
        let s = make_affine(0.0, 2.0, (0.0, 0.0), HM).unwrap();
        let out = warp_points(&pose, &s);
        assert_eq!((out.keypoints[0].x, out.keypoints[0].y), (6.0, 8.0));
        assert_eq!(out.keypoints[1], pose.keypoints[1]);
    }

    #[test]
    #[should_panic(expected = "frame")]
    fn warp_points_frame_mismatch_panics() {
        let pose = Pose::new(vec![Keypoint::new(1.0, 1.0, 1.0)], Frame::Easy);
        warp_points(&pose, &Affine::identity(Frame::Hard, HM));
    }

    #[test]
    fn identity_warp_is_bitwise() {
        let hm = render_gaussian_heatmaps(&single(3.3, 7.9, 1.0), 1.3, HM).unwrap();
        let out = warp_heatmap(&hm, &Affine::identity(Frame::Heatmap, HM), HM).unwrap();
        assert_eq!(out, hm);

        let img = Image::from_vec(
            HM,
            (0..HM.len()).map(|i| (i % 7) as f32 / 7.0).collect(),
            Frame::Canonical,
        );
        let out = warp_image(&img, &Affine::identity(Frame::Canonical, HM), HM, 0.5).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn zero_heatmap_stays_zero() {
        let hm = Heatmap::zeros(2, HM, Frame::Heatmap);
        let t = make_affine(23.0, 0.8, HM.center(), HM).unwrap();
        let out = warp_heatmap(&hm, &t, HM).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_has_constant_interior() {
        let img = Image::filled(GridDims::new(64, 48), 0.8, Frame::Canonical);
        let dims = img.dims();
        let t = make_affine(17.0, 1.1, dims.center(), dims)
            .unwrap()
            .between(Frame::Canonical, Frame::Easy);
        let out = warp_image(&img, &t, dims, 0.5).unwrap();
        let inv = t.inverse();
        for v in 0..dims.height {
            for u in 0..dims.width {
                let (sx, sy) = inv.apply(u as f64, v as f64);
                if sx >= 0.0 && sy >= 0.0 && sx <= 46.999 && sy <= 62.999 {
                    assert_abs_diff_eq!(out.get(v, u), 0.8, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotated_peak_tracks_point() {
        let hm = render_gaussian_heatmaps(&single(8.0, 6.0, 1.0), 1.0, HM).unwrap();
        let t = make_affine(90.0, 1.0, HM.center(), HM).unwrap();
        let warped = warp_heatmap(&hm, &t, HM).unwrap();
        let a = decode_argmax(&warped).keypoints[0];
        let b = warp_points(&decode_argmax(&hm), &t).keypoints[0];
        assert!(a.distance(&b) <= 1.0, "{a:?} vs {b:?}");

        let img = Image::from_vec(HM, hm.data.clone(), Frame::Heatmap);
        let wi = warp_image(&img, &t, HM, 0.0).unwrap();
        assert_eq!(wi.data, warped.data);
    }

    #[test]
    fn heatmap_frame_conjugation_matches_point_maps() {
        let img_dims = GridDims::new(64, 48);
        let t = make_affine(-41.0, 1.17, img_dims.center(), img_dims)
            .unwrap()
            .between(Frame::Canonical, Frame::Hard);
        let pose = Pose::new(vec![Keypoint::new(20.0, 33.0, 1.0)], Frame::Canonical);
        let via_image = warp_points(&pose, &t).image_to_heatmap(4);
        let via_hm = warp_points(&pose.image_to_heatmap(4), &t.to_heatmap_frame(4));
        assert_abs_diff_eq!(via_image.keypoints[0].x, via_hm.keypoints[0].x, epsilon = 1e-12);
        assert_abs_diff_eq!(via_image.keypoints[0].y, via_hm.keypoints[0].y, epsilon = 1e-12);
        assert_eq!(t.to_heatmap_frame(4).out_dims, GridDims::new(16, 12));
    }

    fn arb_affine() -> impl Strategy<Value = Affine> {
        (-180.0f64..180.0, 0.25f64..4.0, -20.0f64..40.0, -20.0f64..40.0)
            .prop_map(|(r, s, cx, cy)| make_affine(r, s, (cx, cy), HM).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn inverse_composes_to_identity(t in arb_affine()) {
            let m = t.inverse().then(&t).matrix();
            let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
            for r in 0..2 {
                for c in 0..3 {
                    prop_assert!((m[r][c] - id[r][c]).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn composition_matches_sequential_application(
            a in arb_affine(), b in arb_affine(), x in -50.0f64..50.0, y in -50.0f64..50.0
        ) {
            let (x1, y1) = a.apply(x, y);
            let (x2, y2) = b.apply(x1, y1);
            let (x3, y3) = a.then(&b).apply(x, y);
            prop_assert!((x2 - x3).abs() <= 1e-9 * (1.0 + x2.abs()));
            prop_assert!((y2 - y3).abs() <= 1e-9 * (1.0 + y2.abs()));
        }

        #[test]
        fn render_decode_round_trip(x in 0usize..12, y in 0usize..16, sigma in 0.5f64..4.0) {
            let p = single(x as f64, y as f64, 1.0);
            let hm = render_gaussian_heatmaps(&p, sigma, HM).unwrap();
            let d = decode_argmax(&hm).keypoints[0];
            prop_assert_eq!((d.x, d.y, d.conf), (x as f64, y as f64, 1.0));
        }

        #[test]
        fn warp_stays_within_channel_range(
            x in 0.0f64..12.0, y in 0.0f64..16.0, sigma in 0.5f64..3.0,
            rot in -60.0f64..60.0, scale in 0.75f64..1.25
        ) {
            let hm = render_gaussian_heatmaps(&single(x, y, 1.0), sigma, HM).unwrap();
            let t = make_affine(rot, scale, HM.center(), HM).unwrap();
            let out = warp_heatmap(&hm, &t, HM).unwrap();
            let hi = hm.data.iter().cloned().fold(0.0f32, f32::max);
            prop_assert!(out.data.iter().all(|&v| (0.0..=hi + 1e-6).contains(&v)));
        }
    }
}
