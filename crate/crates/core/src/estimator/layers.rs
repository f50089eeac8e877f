//! Layer kernels: 3x3 convolution (padding 1) via im2col + GEMM, ReLU and
//! 2x nearest-neighbour upsampling, each with its exact backward pass.

use super::tensor::{Real, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

pub fn conv_out_dim(input: usize, stride: usize) -> usize {
    (input + 2 - KERNEL) / stride + 1
}

/// Output columns `ox` whose input column `ox * stride + kx - 1` lies inside
/// a row of width `w`.
fn valid_cols(kx: usize, w: usize, wo: usize, stride: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = ((w + 1 - kx - 1) / stride + 1).min(wo);
    (lo.min(hi), hi)
}

/// Unfolds one `cin x h x w` item into a `(cin * 9) x (ho * wo)` matrix,
/// appended to `cols`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, stride: usize, cols: &mut Vec<T>) {
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let (lo, hi) = valid_cols(kx, w, wo, stride);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        cols.extend(std::iter::repeat_n(T::zero(), wo));
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let first = lo * stride + kx - 1;
                    cols.extend(std::iter::repeat_n(T::zero(), lo));
                    if stride == 1 {
                        cols.extend_from_slice(&src[first..first + hi - lo]);
                    } else {
                        cols.extend((0..hi - lo).map(|j| src[first + j * stride]));
                    }
                    cols.extend(std::iter::repeat_n(T::zero(), wo - hi));
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, stride: usize, dx: &mut [T]) {
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let (lo, hi) = valid_cols(kx, w, wo, stride);
                let row = &cols[((ci * TAPS) + ky * KERNEL + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let first = lo * stride + kx - 1;
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        for (d, s) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    } else {
                        for (j, s) in src.iter().enumerate() {
                            let d = &mut dst[first + j * stride];
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns the output and, when `keep_cols`, the
/// unfolded input of every batch item for the backward pass.
pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    stride: usize,
    keep_cols: bool,
) -> (Tensor<T>, Vec<T>) {
    let (cin, h, w) = (x.c, x.h, x.w);
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let (k, p) = (cin * TAPS, ho * wo);
    assert_eq!(weight.len(), cout * k, "conv weight shape mismatch");
    assert_eq!(bias.len(), cout, "conv bias shape mismatch");
    let mut data = Vec::with_capacity(x.n * cout * p);
    for _ in 0..x.n {
        for &b in bias {
            data.extend(std::iter::repeat_n(b, p));
        }
    }
    let mut out = Tensor::from_vec(x.n, cout, ho, wo, data);
    let mut all_cols = Vec::with_capacity(if keep_cols { x.n * k * p } else { 0 });
    let mut scratch = Vec::with_capacity(if keep_cols { 0 } else { k * p });
    for i in 0..x.n {
        let cols: &[T] = if keep_cols {
            im2col(x.item(i), cin, h, w, stride, &mut all_cols);
            &all_cols[i * k * p..]
        } else {
            scratch.clear();
            im2col(x.item(i), cin, h, w, stride, &mut scratch);
            &scratch
        };
        T::gemm(
            cout,
            k,
            p,
            T::one(),
            weight,
            k as isize,
            1,
            cols,
            p as isize,
            1,
            T::one(),
            out.item_mut(i),
            p as isize,
            1,
        );
    }
    (out, all_cols)
}

/// Convolution backward: accumulates weight and bias gradients and returns
/// the input gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    dy: &Tensor<T>,
    cols: &[T],
    weight: &[T],
    in_shape: [usize; 4],
    stride: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, cin, h, w] = in_shape;
    let cout = dy.c;
    let (k, p) = (cin * TAPS, dy.h * dy.w);
    let mut dx = need_dx.then(|| Tensor::zeros(n, cin, h, w));
    let mut dcols = vec![T::zero(); if need_dx { k * p } else { 0 }];
    for i in 0..n {
        let g = dy.item(i);
        let c = &cols[i * k * p..(i + 1) * k * p];
        for (co, chunk) in g.chunks_exact(p).enumerate() {
            dbias[co] = dbias[co] + chunk.iter().copied().sum::<T>();
        }
        // dW += dY * cols^T
        T::gemm(
            cout, p, k, T::one(), g, p as isize, 1, c, 1, p as isize, T::one(), dweight, k as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * dY
            T::gemm(
                k, cout, p, T::one(), weight, 1, k as isize, g, p as isize, 1, T::zero(), &mut dcols,
                p as isize, 1,
            );
            col2im(&dcols, cin, h, w, stride, dx.item_mut(i));
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the positivity of the ReLU output `y`.
pub fn relu_backward<T: Real>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    for (g, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for (src, dst) in x.data.chunks_exact(x.h * x.w).zip(out.data.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks_exact(dy.h * dy.w).zip(dx.data.chunks_exact_mut(h * w)) {
        for y in 0..dy.h {
            for x in 0..dy.w {
                let d = &mut dst[(y / 2) * w + x / 2];
                *d = *d + src[y * dy.w + x];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(
            shape[0],
            shape[1],
            shape[2],
            shape[3],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Direct nested-loop convolution, independent of im2col/GEMM.
    fn naive_conv(x: &Tensor<f64>, wt: &[f64], b: &[f64], cout: usize, s: usize) -> Tensor<f64> {
        let (ho, wo) = (conv_out_dim(x.h, s), conv_out_dim(x.w, s));
        let mut out = Tensor::zeros(x.n, cout, ho, wo);
        for n in 0..x.n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..x.c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * s + ky) as isize - 1;
                                    let ix = (ox * s + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((n * x.c + ci) * x.h + iy as usize) * x.w
                                        + ix as usize];
                                    acc += wt[((co * x.c + ci) * 3 + ky) * 3 + kx] * xv;
                                }
                            }
                        }
                        out.data[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(s, h, w) in &[(1, 7, 5), (2, 8, 6), (2, 7, 9)] {
            let x = random_tensor(&mut rng, [2, 3, h, w]);
            let wt: Vec<f64> = (0..4 * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (y, _) = conv_forward(&x, &wt, &b, 4, s, false);
            let r = naive_conv(&x, &wt, &b, 4, s);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <dy, conv(x)> is bilinear, so its derivatives are exactly what
        // the backward pass computes; compare against finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &s in &[1usize, 2] {
            let x = random_tensor(&mut rng, [2, 2, 6, 5]);
            let wt: Vec<f64> = (0..3 * 18).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (y, cols) = conv_forward(&x, &wt, &b, 3, s, true);
            let dy = random_tensor(&mut rng, y.shape());
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; 3];
            let dx = conv_backward(&dy, &cols, &wt, x.shape(), s, &mut dw, &mut db, true).unwrap();
            let f = |x: &Tensor<f64>, wt: &[f64], b: &[f64]| -> f64 {
                let (y, _) = conv_forward(x, wt, b, 3, s, false);
                y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
            };
            let eps = 1e-6;
            for i in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (f(&xp, &wt, &b) - f(&xm, &wt, &b)) / (2.0 * eps);
                assert!((fd - dx.data[i]).abs() < 1e-7, "dx[{i}]");
            }
            for i in 0..wt.len() {
                let mut wp = wt.clone();
                wp[i] += eps;
                let mut wm = wt.clone();
                wm[i] -= eps;
                let fd = (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * eps);
                assert!((fd - dw[i]).abs() < 1e-7, "dw[{i}]");
            }
            for i in 0..3 {
                let expect: f64 = (0..2).map(|n| dy.item(n)[i * y.h * y.w..(i + 1) * y.h * y.w].iter().sum::<f64>()).sum();
                assert!((expect - db[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, [2, 3, 4, 3]);
        let dy = random_tensor(&mut rng, [2, 3, 8, 6]);
        let y = upsample2(&x);
        let dx = upsample2_backward(&dy);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(y.data[0], x.data[0]);
        assert_eq!(y.data[7], x.data[0]);
        assert_eq!(y.data[12], x.data[3]);
    }

    #[test]
    fn relu_masks_gradient() {
        let mut x = Tensor::from_vec(1, 1, 1, 4, vec![-1.0f64, 0.0, 2.0, 3.0]);
        relu_inplace(&mut x);
        assert_eq!(x.data, vec![0.0, 0.0, 2.0, 3.0]);
        let mut g = Tensor::from_vec(1, 1, 1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        relu_backward(&mut g, &x);
        assert_eq!(g.data, vec![0.0, 0.0, 1.0, 1.0]);
    }
}
