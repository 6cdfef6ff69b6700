//! Dense NCHW tensors and the handful of kernels the networks need.
//!
//! Everything is generic over [`Scalar`] so the same code paths run in `f32`
//! for training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;

use num_traits::Float;

pub trait Scalar: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
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

    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path) => {
        impl Scalar for $ty {
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
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(k == 0 || !a.is_empty() && !b.is_empty());
                // SAFETY: callers pass slices covering the strided extents.
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

            fn from_f32(v: f32) -> Self {
                v as $ty
            }

            fn as_f32(self) -> f32 {
                self as f32
            }

            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Batch of multi-channel images, layout `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Joins two tensors along the channel axis.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Self {
        assert_eq!(a.batch(), b.batch());
        assert_eq!((a.height(), a.width()), (b.height(), b.width()));
        let shape = [a.batch(), a.channels() + b.channels(), a.height(), a.width()];
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..a.batch() {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Tensor { shape, data }
    }

    /// Gathers the listed samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }
}

/// Geometry of a stride-1, same-padded, dilated square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unrolls one sample `[c, h, w]` into `[c*k*k, h*w]` columns (zero padded).
pub fn im2col<T: Scalar>(input: &[T], h: usize, w: usize, g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let pad = g.pad() as isize;
    let d = g.dilation as isize;
    let plane = h * w;
    debug_assert_eq!(cols.len(), g.patch_len() * plane);
    for c in 0..g.in_channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize * d - pad;
                let dx = kx as isize * d - pad;
                // valid x range: 0 <= x + dx < w
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, g: &ConvGeometry, out: &mut [T]) {
    let k = g.kernel;
    let pad = g.pad() as isize;
    let d = g.dilation as isize;
    let plane = h * w;
    for c in 0..g.in_channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize * d - pad;
                let dx = kx as isize * d - pad;
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let sx0 = (x0 as isize + dx) as usize;
                    for (o, &v) in drow[sx0..sx0 + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

/// Forward convolution. `kernel` is `[out, in, k, k]`, `bias` is `[out]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, kernel: &[T], bias: &[T], g: &ConvGeometry) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    assert_eq!(c, g.in_channels, "conv input channels");
    let plane = h * w;
    let kk = g.patch_len();
    let mut out = Tensor::zeros([n, g.out_channels, h, w]);
    let mut cols = vec![T::zero(); kk * plane];
    for i in 0..n {
        im2col(input.sample(i), h, w, g, &mut cols);
        let dst = out.sample_mut(i);
        for (o, &b) in bias.iter().enumerate() {
            dst[o * plane..(o + 1) * plane].fill(b);
        }
        T::gemm(
            g.out_channels,
            kk,
            plane,
            T::one(),
            kernel,
            kk as isize,
            1,
            &cols,
            plane as isize,
            1,
            T::one(),
            dst,
            plane as isize,
            1,
        );
    }
    out
}

/// Backward convolution. Accumulates into `grad_kernel`/`grad_bias` when
/// given and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel: &[T],
    g: &ConvGeometry,
    mut param_grads: Option<(&mut [T], &mut [T])>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let [n, _, h, w] = input.shape();
    let plane = h * w;
    let kk = g.patch_len();
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![T::zero(); kk * plane];
    for i in 0..n {
        let go = grad_out.sample(i);
        if let Some((gk, gb)) = param_grads.as_mut() {
            im2col(input.sample(i), h, w, g, &mut cols);
            // dK[o, p] += sum_s dOut[o, s] * cols[p, s]
            T::gemm(
                g.out_channels,
                plane,
                kk,
                T::one(),
                go,
                plane as isize,
                1,
                &cols,
                1,
                plane as isize,
                T::one(),
                gk,
                kk as isize,
                1,
            );
            for (o, b) in gb.iter_mut().enumerate() {
                *b = *b + go[o * plane..(o + 1) * plane].iter().copied().sum();
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            // dCols[p, s] = sum_o K[o, p] * dOut[o, s]
            T::gemm(
                kk,
                g.out_channels,
                plane,
                T::one(),
                kernel,
                1,
                kk as isize,
                go,
                plane as isize,
                1,
                T::zero(),
                &mut cols,
                plane as isize,
                1,
            );
            col2im(&cols, h, w, g, gi.sample_mut(i));
        }
    }
    grad_in
}

/// 2x2 stride-2 max pooling (floor). Returns output and argmax offsets.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = nc * oh * ow + y * ow + x;
                dst[o] = src[best];
                arg[o] = (best - base) as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(input_shape: [usize; 4], grad_out: &Tensor<T>, arg: &[u32]) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let mut grad = Tensor::zeros(input_shape);
    let plane_out = grad_out.plane();
    let g = grad.data_mut();
    for nc in 0..n * c {
        for o in 0..plane_out {
            let idx = nc * plane_out + o;
            let dst = nc * h * w + arg[idx] as usize;
            g[dst] = g[dst] + grad_out.data()[idx];
        }
    }
    grad
}
