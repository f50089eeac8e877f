use super::tensor::{Real, Tensor};

/// Per-sample, per-keypoint 0/1 mask selecting which heatmap channels
/// contribute to a loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeypointMask {
    pub samples: usize,
    pub keypoints: usize,
    pub data: Vec<bool>,
}

impl KeypointMask {
    pub fn all(samples: usize, keypoints: usize) -> Self {
        Self {
            samples,
            keypoints,
            data: vec![true; samples * keypoints],
        }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Self {
        let samples = rows.len();
        let keypoints = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == keypoints), "ragged keypoint mask");
        Self {
            samples,
            keypoints,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn get(&self, sample: usize, keypoint: usize) -> bool {
        self.data[sample * self.keypoints + keypoint]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

fn check_shapes<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &KeypointMask) {
    assert_eq!(pred.shape(), target.shape(), "prediction and target shapes differ");
    assert_eq!(
        (mask.samples, mask.keypoints),
        (pred.n, pred.c),
        "mask shape does not match the heatmaps"
    );
}

/// Mean of `(pred - target)^2` over the pixels of unmasked channels;
/// zero when every channel is masked out. Accumulates in `f64`.
pub fn mse_masked_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &KeypointMask) -> f64 {
    mse_masked_loss_with_grad(pred, target, mask).0
}

/// The loss together with its gradient with respect to `pred`.
pub fn mse_masked_loss_with_grad<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &KeypointMask,
) -> (f64, Tensor<T>) {
    check_shapes(pred, target, mask);
    let hw = pred.h * pred.w;
    let mut grad = Tensor::zeros(pred.n, pred.c, pred.h, pred.w);
    let count = mask.count() * hw;
    if count == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / count as f64;
    let mut sum = 0.0f64;
    for n in 0..pred.n {
        for k in 0..pred.c {
            if !mask.get(n, k) {
                continue;
            }
            let off = (n * pred.c + k) * hw;
            for i in off..off + hw {
                let r = pred.data[i].real_to_f64() - target.data[i].real_to_f64();
                sum += r * r;
                grad.data[i] = T::real_from_f64(2.0 * r * norm);
            }
        }
    }
    (sum * norm, grad)
}
