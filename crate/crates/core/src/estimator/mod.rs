//! Compact convolutional heatmap regressor with exact reverse-mode
//! gradients, masked MSE loss, Adam and step-decay learning rates.
//!
//! Architecture (all kernels 3x3, padding 1):
//!
//! ```text
//! image (1 x H x W)
//!   conv1  1 -> c1, stride 1, relu          H   x W
//!   conv2 c1 -> c2, stride 2, relu          H/2 x W/2
//!   conv3 c2 -> c2, stride 2, relu   ---+   H/4 x W/4
//!   conv4 c2 -> c2, stride 2, relu      |   H/8 x W/8
//!   2x nearest upsample  +  <-----------+   H/4 x W/4
//!   head  c2 -> K,  stride 1                H/4 x W/4
//! ```
//!
//! with `c1 = 8w` and `c2 = 16w` for width multiplier `w`.

mod adam;
mod layers;
mod loss;
pub mod snapshot;
mod tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, LrSchedule};
pub use layers::conv_out_dim;
pub use loss::{mse_masked_loss, mse_masked_loss_with_grad, KeypointMask};
pub use tensor::{Real, Tensor};

use crate::geometry::GridDims;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input: GridDims,
    pub keypoints: usize,
    pub width: f64,
}

impl ArchConfig {
    pub fn new(input: GridDims, keypoints: usize) -> Self {
        Self {
            input,
            keypoints,
            width: 1.0,
        }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn channels(&self) -> (usize, usize) {
        let c = |base: f64| ((base * self.width).round() as usize).max(1);
        (c(8.0), c(16.0))
    }

    pub fn heatmap_dims(&self) -> GridDims {
        let h = conv_out_dim(conv_out_dim(self.input.height, 2), 2);
        let w = conv_out_dim(conv_out_dim(self.input.width, 2), 2);
        GridDims::new(h, w)
    }

    fn layer_specs(&self) -> [(&'static str, usize, usize, usize); 5] {
        let (c1, c2) = self.channels();
        [
            ("conv1", 1, c1, 1),
            ("conv2", c1, c2, 2),
            ("conv3", c2, c2, 2),
            ("conv4", c2, c2, 2),
            ("head", c2, self.keypoints, 1),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub name: &'static str,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// `cout x cin x 3 x 3`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    fn fan_in(&self) -> usize {
        self.cin * 9
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorParams<T> {
    pub arch: ArchConfig,
    pub layers: Vec<ConvLayer<T>>,
}

/// Gradients, one vector per parameter tensor in [`EstimatorParams::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &EstimatorParams<T>) -> Self {
        Self {
            tensors: params.tensors().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            for v in t {
                *v = *v * factor;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_zero())
    }
}

/// Kaiming-uniform initialisation for the hidden layers, a narrow uniform
/// for the head, zero biases.
pub fn init_estimator<T: Real, R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> EstimatorParams<T> {
    let layers = arch
        .layer_specs()
        .into_iter()
        .map(|(name, cin, cout, stride)| {
            let mut layer = ConvLayer {
                name,
                cin,
                cout,
                stride,
                weight: Vec::new(),
                bias: vec![T::zero(); cout],
            };
            let bound = if name == "head" {
                0.1 * (3.0 / layer.fan_in() as f64).sqrt()
            } else {
                (6.0 / layer.fan_in() as f64).sqrt()
            };
            layer.weight = (0..cout * cin * 9)
                .map(|_| T::real_from_f64(rng.random_range(-bound..bound)))
                .collect();
            layer
        })
        .collect();
    EstimatorParams { arch, layers }
}

/// Everything the backward pass needs from one forward pass. Consumed by
/// [`EstimatorParams::backward`], so a tape cannot be replayed.
pub struct Tape<T> {
    input_shape: [usize; 4],
    cols: Vec<Vec<T>>,
    acts: Vec<Tensor<T>>,
}

impl<T: Real> Tape<T> {
    /// Which hidden units were active (positive after the ReLU), in layer order.
    pub fn active_units(&self) -> Vec<bool> {
        self.acts
            .iter()
            .flat_map(|a| a.data.iter().map(|v| *v > T::zero()))
            .collect()
    }
}

impl<T: Real> EstimatorParams<T> {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (String, &[T])> {
        self.layers.iter().flat_map(|l| {
            [
                (format!("{}.weight", l.name), l.weight.as_slice()),
                (format!("{}.bias", l.name), l.bias.as_slice()),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().map(|(n, _)| n).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the raw parameter bits; used to prove frozen nets stay frozen.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in self.tensors() {
            for v in t {
                for b in v.real_to_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> EstimatorParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::real_from_f64(x.real_to_f64())).collect();
        EstimatorParams {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    name: l.name,
                    cin: l.cin,
                    cout: l.cout,
                    stride: l.stride,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    /// Forward pass without a tape, for frozen teachers and evaluation.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            (x.c, x.h, x.w),
            (1, self.arch.input.height, self.arch.input.width),
            "input does not match the estimator's input dims"
        );
        let mut h = x.clone();
        let mut skip = None;
        for l in &self.layers[..4] {
            let (mut z, _) = layers::conv_forward(&h, &l.weight, &l.bias, l.cout, l.stride, false);
            layers::relu_inplace(&mut z);
            if l.name == "conv3" {
                skip = Some(z.clone());
            }
            h = z;
        }
        let skip = skip.expect("conv3 present");
        let mut u = layers::upsample2(&h);
        assert_eq!((u.h, u.w), (skip.h, skip.w), "upsampled map does not match skip");
        for (a, b) in u.data.iter_mut().zip(&skip.data) {
            *a = *a + *b;
        }
        let head = &self.layers[4];
        layers::conv_forward(&u, &head.weight, &head.bias, head.cout, 1, false).0
    }

    /// Forward pass that records a tape for [`Self::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, Tape<T>) {
        assert_eq!(
            (x.c, x.h, x.w),
            (1, self.arch.input.height, self.arch.input.width),
            "input does not match the estimator's input dims"
        );
        let mut cols = Vec::with_capacity(5);
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(4);
        for l in &self.layers[..4] {
            let input = acts.last().unwrap_or(x);
            let (mut z, c) = layers::conv_forward(input, &l.weight, &l.bias, l.cout, l.stride, true);
            layers::relu_inplace(&mut z);
            cols.push(c);
            acts.push(z);
        }
        let mut u = layers::upsample2(&acts[3]);
        assert_eq!((u.h, u.w), (acts[2].h, acts[2].w), "upsampled map does not match skip");
        for (a, b) in u.data.iter_mut().zip(&acts[2].data) {
            *a = *a + *b;
        }
        let head = &self.layers[4];
        let (y, c) = layers::conv_forward(&u, &head.weight, &head.bias, head.cout, 1, true);
        cols.push(c);
        let tape = Tape {
            input_shape: x.shape(),
            cols,
            acts,
        };
        (y, tape)
    }

    /// Exact gradients of a scalar loss given `dy = dL/d(output)`.
    pub fn backward(&self, tape: Tape<T>, dy: &Tensor<T>) -> Gradients<T> {
        let Tape {
            input_shape,
            cols,
            acts,
        } = tape;
        let mut grads = Gradients::zeros_like(self);
        let [n, _, _, _] = input_shape;
        assert_eq!(dy.n, n, "cotangent batch size does not match the tape");

        let in_shape = |i: usize| -> [usize; 4] {
            if i == 0 {
                input_shape
            } else {
                acts[i - 1].shape()
            }
        };

        // Head: its input is upsample(a4) + a3, shaped like a3.
        let head = &self.layers[4];
        let (gw, rest) = grads.tensors.split_at_mut(9);
        let du = layers::conv_backward(
            dy,
            &cols[4],
            &head.weight,
            acts[2].shape(),
            1,
            &mut gw[8],
            &mut rest[0],
            true,
        )
        .expect("input gradient requested");

        let mut d_skip = du.clone();
        let mut d = layers::upsample2_backward(&du);
        for i in (0..4).rev() {
            if i == 2 {
                for (a, b) in d.data.iter_mut().zip(&d_skip.data) {
                    *a = *a + *b;
                }
                d_skip.data.clear();
            }
            layers::relu_backward(&mut d, &acts[i]);
            let l = &self.layers[i];
            let (w_part, b_part) = grads.tensors[2 * i..2 * i + 2].split_at_mut(1);
            let dx = layers::conv_backward(
                &d,
                &cols[i],
                &l.weight,
                in_shape(i),
                l.stride,
                &mut w_part[0],
                &mut b_part[0],
                i > 0,
            );
            if let Some(dx) = dx {
                d = dx;
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests;
