//! Slice-level kernels. Shapes are the caller's responsibility; every entry
//! point asserts lengths in debug builds.

use crate::scalar::Scalar;

/// Register tile of the GEMM micro-kernel.
const MR: usize = 4;
const NR: usize = 8;

const PACK_MIN: usize = 64 * 1024;

/// `c += A · b` over the rectangle `rows × cols` of `c` (row stride `n`),
/// where `A[i][p] = a[i·rs + p·cs]`. Every element is accumulated over
/// `p = 0..k` in ascending order, starting from its current value.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(
    k: usize,
    n: usize,
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    c: &mut [T],
    rows: usize,
) {
    let full_rows = rows - rows % MR;
    let full_cols = n - n % NR;
    // packing only pays off once b no longer sits in cache
    let pack = k * n > PACK_MIN;
    let mut panel = vec![T::zero(); if pack { k * NR } else { 0 }];
    for j0 in (0..full_cols).step_by(NR) {
        let (src, ld, off) = if pack {
            for (p, dst) in panel.chunks_exact_mut(NR).enumerate() {
                dst.copy_from_slice(&b[p * n + j0..p * n + j0 + NR]);
            }
            (&panel[..], NR, 0)
        } else {
            (b, n, j0)
        };
        for i0 in (0..full_rows).step_by(MR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (ii, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + NR]);
            }
            for p in 0..k {
                let b_tile = &src[p * ld + off..p * ld + off + NR];
                for (ii, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + ii) * rs + p * cs];
                    for (cv, &bv) in row.iter_mut().zip(b_tile) {
                        *cv += av * bv;
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + NR].copy_from_slice(row);
            }
        }
    }
    // ragged edges, same summation order
    let edge = |i: usize, j: usize, c: &mut [T]| {
        let mut sum = c[i * n + j];
        for p in 0..k {
            sum += a[i * rs + p * cs] * b[p * n + j];
        }
        c[i * n + j] = sum;
    };
    for i in 0..full_rows {
        for j in full_cols..n {
            edge(i, j, c);
        }
    }
    for i in full_rows..rows {
        for j in 0..n {
            edge(i, j, c);
        }
    }
}

/// `c = a · b` (or `c += a · b`) for row-major `a: m×k`, `b: k×n`.
///
/// Each output element is accumulated over `p = 0..k` in ascending order.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(T::zero());
    }
    gemm_acc(k, n, a, k, 1, b, c, m);
}

/// `c += aᵀ · b` for row-major `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_at_b<T: Scalar>(k: usize, m: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_acc(k, n, a, 1, m, b, c, m);
}

/// Transpose of a row-major `rows×cols` matrix into `out` (`cols×rows`).
pub(crate) fn transpose_into<T: Scalar>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Valid-mode convolution geometry for square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix: `C_i·k·k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the unfolded patch matrix: `H'·W'`.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds one `C_i×H×W` input into `cols` of shape `(C_i·k·k) × (H'·W')`.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(cols.len(), g.patch_len() * g.positions());
    let (oh, ow, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let positions = oh * ow;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst = &mut cols[r * positions..(r + 1) * positions];
                for oy in 0..oh {
                    let src_row = &plane[(oy * s + ky) * g.width..];
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src_row[ox * s + kx];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    debug_assert_eq!(input_grad.len(), g.input_len());
    let (oh, ow, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let positions = oh * ow;
    input_grad.fill(T::zero());
    for c in 0..g.in_channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let src = &cols[r * positions..(r + 1) * positions];
                for oy in 0..oh {
                    let dst_row = &mut plane[(oy * s + ky) * g.width..];
                    for ox in 0..ow {
                        dst_row[ox * s + kx] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Scratch buffers reused across samples of a batch.
#[derive(Default)]
pub(crate) struct ConvScratch<T> {
    cols: Vec<T>,
    cols_t: Vec<T>,
}

impl<T: Scalar> ConvScratch<T> {
    fn cols(&mut self, len: usize) -> &mut [T] {
        self.cols.resize(len, T::zero());
        &mut self.cols[..len]
    }
}

/// Forward convolution of one sample; `out` is `C_o × H'·W'`.
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernels: &[T],
    bias: &[T],
    scratch: &mut ConvScratch<T>,
    out: &mut [T],
) {
    let (r, p) = (g.patch_len(), g.positions());
    debug_assert_eq!(kernels.len(), g.out_channels * r);
    debug_assert_eq!(out.len(), g.out_channels * p);
    let cols = scratch.cols(r * p);
    im2col(g, input, cols);
    gemm(g.out_channels, r, p, kernels, cols, out, false);
    for (o, &b) in bias.iter().enumerate() {
        out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
    }
}

/// Backward convolution of one sample. Kernel and bias gradients are
/// accumulated; the input gradient (if requested) is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernels: &[T],
    grad_out: &[T],
    scratch: &mut ConvScratch<T>,
    grad_kernels: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut [T]>,
) {
    let (r, p, co) = (g.patch_len(), g.positions(), g.out_channels);
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        for &v in &grad_out[o * p..(o + 1) * p] {
            *gb += v;
        }
    }
    {
        let ConvScratch { cols, cols_t } = scratch;
        cols.resize(r * p, T::zero());
        cols_t.resize(r * p, T::zero());
        im2col(g, input, cols);
        transpose_into(cols, r, p, cols_t);
        gemm(co, p, r, grad_out, cols_t, grad_kernels, true);
    }
    if let Some(grad_input) = grad_input {
        let cols = scratch.cols(r * p);
        cols.fill(T::zero());
        gemm_at_b(co, r, p, kernels, grad_out, cols);
        col2im(g, cols, grad_input);
    }
}

/// 2×2 non-overlapping max pooling over one `C×H×W` sample. `argmax`
/// receives the within-sample flat index of each selected input element.
pub(crate) fn maxpool_forward<T: Scalar>(
    channels: usize,
    height: usize,
    width: usize,
    input: &[T],
    out: &mut [T],
    argmax: &mut [usize],
) {
    let (oh, ow) = (height / 2, width / 2);
    debug_assert_eq!(out.len(), channels * oh * ow);
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * width + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * width + 2 * ox + dx;
                    // strict comparison keeps the first maximum in scan order
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

pub(crate) fn maxpool_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], grad_input: &mut [T]) {
    grad_input.fill(T::zero());
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        grad_input[idx] += g;
    }
}
