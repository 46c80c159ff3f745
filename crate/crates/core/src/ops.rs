//! Forward and backward kernels for the layer primitives.
//!
//! Everything here works on raw row-major slices of a single sample; the tape
//! in [`crate::autodiff`] loops over the batch and owns shape validation.
//! Convolutions go through im2col and a dense matrix product.

/// Per-side zero padding of a 2-D feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }

    /// "Same" padding for stride 1; the extra row/column for even kernels goes
    /// to the bottom/right.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            top: (kh - 1) / 2,
            left: (kw - 1) / 2,
            bottom: kh / 2,
            right: kw / 2,
        }
    }
}

/// Geometry of a sliding-window pass over a `channels x height x width` map.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Pad2d,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// `None` when the padded input is smaller than the kernel.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Pad2d,
    ) -> Option<Self> {
        let ph = height + pad.top + pad.bottom;
        let pw = width + pad.left + pad.right;
        if kh == 0 || kw == 0 || stride == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate hit by kernel tap `(ki, kj)` at output `(oi, oj)`.
    #[inline]
    fn source(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oi * self.stride + ki).checked_sub(self.pad.top)?;
        let x = (oj * self.stride + kj).checked_sub(self.pad.left)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Output columns `[lo, hi)` whose tap `kj` lands inside the input row.
#[inline]
fn valid_cols(g: &Window, kj: usize) -> (usize, usize) {
    let s = g.stride;
    // oj * s + kj >= left  and  oj * s + kj < left + width
    let lo = g.pad.left.saturating_sub(kj).div_ceil(s);
    let hi = (g.pad.left + g.width).saturating_sub(kj).div_ceil(s).min(g.out_w);
    (lo.min(hi), hi)
}

/// Unfolds `input` (`channels x height x width`) into `cols`
/// (`patch_len x out_len`), zero-filling padded taps.
pub fn im2col(input: &[f64], g: &Window, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    let plane = g.height * g.width;
    let n_out = g.out_len();
    for c in 0..g.channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.out_h {
                    let out_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    let y = (oi * g.stride + ki).wrapping_sub(g.pad.top);
                    if y >= g.height {
                        out_row.fill(0.0);
                        continue;
                    }
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let src_row = &src[y * g.width..(y + 1) * g.width];
                    let x0 = lo * g.stride + kj - g.pad.left;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src_row[x0..x0 + (hi - lo)]);
                    } else {
                        for (k, o) in out_row[lo..hi].iter_mut().enumerate() {
                            *o = src_row[x0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `out`.
pub fn col2im(cols: &[f64], g: &Window, out: &mut [f64]) {
    let plane = g.height * g.width;
    let n_out = g.out_len();
    for c in 0..g.channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki).wrapping_sub(g.pad.top);
                    if y >= g.height {
                        continue;
                    }
                    let in_row = &src[oi * g.out_w + lo..oi * g.out_w + hi];
                    let dst_row = &mut dst[y * g.width..(y + 1) * g.width];
                    let x0 = lo * g.stride + kj - g.pad.left;
                    if g.stride == 1 {
                        for (d, v) in dst_row[x0..x0 + (hi - lo)].iter_mut().zip(in_row) {
                            *d += v;
                        }
                    } else {
                        for (k, v) in in_row.iter().enumerate() {
                            dst_row[x0 + k * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Dense matrix view: `rows x cols` with explicit strides, so transposes are free.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches: the
    // views are fully contained in their slices and `c` is exactly m x n.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Convolution of one sample. `weight` is `out_ch x patch_len`.
pub fn conv_forward(input: &[f64], weight: &[f64], bias: &[f64], g: &Window, out: &mut [f64], cols: &mut Vec<f64>) {
    let k = g.patch_len();
    let p = g.out_len();
    cols.resize(k * p, 0.0);
    im2col(input, g, cols);
    gemm(Mat::new(weight, bias.len(), k), Mat::new(cols, k, p), 0.0, out);
    for (row, b) in out.chunks_exact_mut(p).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

/// Backward of [`conv_forward`] for one sample, accumulating into the
/// gradient buffers. `grad_input` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    weight: &[f64],
    upstream: &[f64],
    g: &Window,
    grad_input: Option<&mut [f64]>,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    cols: &mut Vec<f64>,
) {
    let k = g.patch_len();
    let p = g.out_len();
    let out_ch = grad_bias.len();
    cols.resize(k * p, 0.0);
    im2col(input, g, cols);
    let up = Mat::new(upstream, out_ch, p);
    gemm(up, Mat::new(cols, k, p).t(), 1.0, grad_weight);
    for (gb, row) in grad_bias.iter_mut().zip(upstream.chunks_exact(p)) {
        *gb += row.iter().sum::<f64>();
    }
    if let Some(gi) = grad_input {
        gemm(Mat::new(weight, out_ch, k).t(), up, 0.0, cols);
        col2im(cols, g, gi);
    }
}

/// Transposed convolution of one sample. `g` describes the *adjoint*
/// convolution: `g.channels`/`height`/`width` are the output map and
/// `g.out_h x g.out_w` is the input plane. `weight` is `in_ch x patch_len`.
pub fn conv_transpose_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    in_ch: usize,
    g: &Window,
    out: &mut [f64],
    cols: &mut Vec<f64>,
) {
    let k = g.patch_len();
    let p = g.out_len();
    cols.resize(k * p, 0.0);
    gemm(Mat::new(weight, in_ch, k).t(), Mat::new(input, in_ch, p), 0.0, cols);
    out.iter_mut().for_each(|v| *v = 0.0);
    col2im(cols, g, out);
    let plane = g.height * g.width;
    for (ch, b) in out.chunks_exact_mut(plane).zip(bias) {
        ch.iter_mut().for_each(|v| *v += b);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward(
    input: &[f64],
    weight: &[f64],
    upstream: &[f64],
    in_ch: usize,
    g: &Window,
    grad_input: Option<&mut [f64]>,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    cols: &mut Vec<f64>,
) {
    let k = g.patch_len();
    let p = g.out_len();
    cols.resize(k * p, 0.0);
    im2col(upstream, g, cols);
    let dcols = Mat::new(cols, k, p);
    let x = Mat::new(input, in_ch, p);
    gemm(x, dcols.t(), 1.0, grad_weight);
    if let Some(gi) = grad_input {
        gemm(Mat::new(weight, in_ch, k), dcols, 1.0, gi);
    }
    let plane = g.height * g.width;
    for (gb, ch) in grad_bias.iter_mut().zip(upstream.chunks_exact(plane)) {
        *gb += ch.iter().sum::<f64>();
    }
}

/// Max pooling of one sample; records the flat input index of each winner.
/// Ties go to the first element in row-major scan order.
pub fn maxpool_forward(input: &[f64], g: &Window, out: &mut [f64], argmax: &mut [u32]) {
    let plane = g.height * g.width;
    let n_out = g.out_len();
    for c in 0..g.channels {
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        if let Some((y, x)) = g.source(oi, oj, ki, kj) {
                            let idx = c * plane + y * g.width + x;
                            if at == usize::MAX || input[idx] > best {
                                best = input[idx];
                                at = idx;
                            }
                        }
                    }
                }
                let o = c * n_out + oi * g.out_w + oj;
                out[o] = best;
                argmax[o] = at as u32;
            }
        }
    }
}

pub fn upsample_forward(input: &[f64], channels: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    let (oh, ow) = (h * f, w * f);
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / f) * w + x / f];
            }
        }
    }
}

pub fn upsample_backward(upstream: &[f64], channels: usize, h: usize, w: usize, f: usize, grad: &mut [f64]) {
    let (oh, ow) = (h * f, w * f);
    for c in 0..channels {
        let src = &upstream[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut grad[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / f) * w + x / f] += src[y * ow + x];
            }
        }
    }
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_preserves_size() {
        for k in 1..=4 {
            let g = Window::new(1, 7, 9, k, k, 1, Pad2d::same(k, k)).unwrap();
            assert_eq!((g.out_h, g.out_w), (7, 9), "kernel {k}");
        }
    }

    #[test]
    fn window_rejects_oversized_kernel() {
        assert!(Window::new(1, 2, 2, 3, 3, 1, Pad2d::default()).is_none());
        assert!(Window::new(1, 2, 2, 3, 3, 1, Pad2d::uniform(1)).is_some());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window::new(
            2,
            5,
            4,
            3,
            2,
            2,
            Pad2d {
                top: 1,
                left: 0,
                bottom: 1,
                right: 1,
            },
        )
        .unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gemm_handles_transposed_views() {
        // a = [[1,2],[3,4]], b = a^T
        let a = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        gemm(Mat::new(&a, 2, 2), Mat::new(&a, 2, 2).t(), 0.0, &mut c);
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0).is_finite());
    }
}
