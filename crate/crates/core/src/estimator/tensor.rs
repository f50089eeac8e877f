use std::fmt::Debug;

use num_traits::Float;

use crate::geometry::{Frame, GridDims, Heatmap, Image};

/// Scalar type the estimator runs in. Training uses `f32`; gradient checks
/// instantiate the same code with `f64`.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: &'static str;

    fn real_from_f64(v: f64) -> Self;

    fn real_to_f64(self) -> f64;

    /// `C <- alpha * A B + beta * C` for row/column strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;

            #[inline]
            fn real_from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn real_to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: every operand extent was bounds-checked above and
                // `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data does not match its shape");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[T] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.n,
            self.c,
            self.h,
            self.w,
            self.data.iter().map(|v| U::real_from_f64(v.real_to_f64())).collect(),
        )
    }

    pub fn from_images(images: &[&Image]) -> Self {
        assert!(!images.is_empty(), "empty image batch");
        let (h, w) = (images[0].height, images[0].width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            assert_eq!((img.height, img.width), (h, w), "image batch with mixed sizes");
            data.extend(img.data.iter().map(|&v| T::real_from_f64(v as f64)));
        }
        Self::from_vec(images.len(), 1, h, w, data)
    }

    pub fn from_heatmaps(maps: &[&Heatmap]) -> Self {
        assert!(!maps.is_empty(), "empty heatmap batch");
        let (c, h, w) = (maps[0].channels, maps[0].height, maps[0].width);
        let mut data = Vec::with_capacity(maps.len() * c * h * w);
        for m in maps {
            assert_eq!((m.channels, m.height, m.width), (c, h, w), "heatmap batch with mixed shapes");
            data.extend(m.data.iter().map(|&v| T::real_from_f64(v as f64)));
        }
        Self::from_vec(maps.len(), c, h, w, data)
    }

    pub fn to_heatmaps(&self, frame: Frame) -> Vec<Heatmap> {
        (0..self.n)
            .map(|i| {
                Heatmap::from_vec(
                    self.c,
                    GridDims::new(self.h, self.w),
                    self.item(i).iter().map(|v| v.real_to_f64() as f32).collect(),
                    frame,
                )
            })
            .collect()
    }
}
