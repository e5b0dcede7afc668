use super::kernels::{self, ConvGeometry, ConvScratch};
use super::{debug_check_finite, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Matrix product of `a: M×K` and `b: K×N`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim(format!(
            "matmul needs two matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    kernels::gemm(m, k, n, a.data(), b.data(), out.data_mut(), false);
    debug_check_finite(out.data(), "matmul");
    Ok(out)
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
) -> Result<ConvGeometry> {
    let &[c_i, h, w] = input.shape() else {
        return Err(Error::dim(format!("conv2d input must be C×H×W, got {:?}", input.shape())));
    };
    let &[c_o, kc, kh, kw] = kernels.shape() else {
        return Err(Error::dim(format!(
            "conv2d kernels must be C_o×C_i×k×k, got {:?}",
            kernels.shape()
        )));
    };
    if kc != c_i {
        return Err(Error::dim(format!("kernels expect {kc} input channels, input has {c_i}")));
    }
    if kh != kw {
        return Err(Error::dim("only square kernels are supported"));
    }
    if stride == 0 {
        return Err(Error::dim("stride must be positive"));
    }
    if kh > h || kh > w {
        return Err(Error::dim(format!("kernel {kh}×{kh} larger than input {h}×{w}")));
    }
    Ok(ConvGeometry {
        in_channels: c_i,
        out_channels: c_o,
        height: h,
        width: w,
        kernel: kh,
        stride,
    })
}

/// Valid cross-correlation of one `C_i×H×W` input with `C_o×C_i×k×k`
/// kernels, plus a per-output-channel bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernels, stride)?;
    if bias.shape() != [g.out_channels] {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            g.out_channels
        )));
    }
    let mut out = Tensor::zeros(&[g.out_channels, g.out_height(), g.out_width()]);
    let mut scratch = ConvScratch::default();
    kernels::conv_forward(
        &g,
        input.data(),
        kernels.data(),
        bias.data(),
        &mut scratch,
        out.data_mut(),
    );
    debug_check_finite(out.data(), "conv2d");
    Ok(out)
}

/// Gradients of a single-sample convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, kernels, stride)?;
    if grad_out.shape() != [g.out_channels, g.out_height(), g.out_width()] {
        return Err(Error::dim(format!(
            "upstream gradient shape {:?} does not match conv output",
            grad_out.shape()
        )));
    }
    let mut grads = ConvGrads {
        input: Tensor::zeros(input.shape()),
        kernels: Tensor::zeros(kernels.shape()),
        bias: Tensor::zeros(&[g.out_channels]),
    };
    let mut scratch = ConvScratch::default();
    kernels::conv_backward(
        &g,
        input.data(),
        kernels.data(),
        grad_out.data(),
        &mut scratch,
        grads.kernels.data_mut(),
        grads.bias.data_mut(),
        Some(grads.input.data_mut()),
    );
    Ok(grads)
}

/// Which input element won each pooling window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    flat: Vec<usize>,
}

impl PoolIndices {
    /// Flat index into the pooled input for output element `i`.
    pub fn flat(&self, i: usize) -> usize {
        self.flat[i]
    }

    /// `(row, col)` offset of the winner inside its 2×2 window.
    pub fn window_offset(&self, i: usize) -> (usize, usize) {
        let w = self.input_shape[2];
        let within = self.flat[i] % (self.input_shape[1] * w);
        ((within / w) % 2, (within % w) % 2)
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Non-overlapping 2×2 max pooling; ties resolve to the first element in
/// row-major scan order.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::dim(format!("maxpool input must be C×H×W, got {:?}", input.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("maxpool2x2 needs even extents, got {h}×{w}")));
    }
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    let mut flat = vec![0; out.len()];
    kernels::maxpool_forward(c, h, w, input.data(), out.data_mut(), &mut flat);
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            flat,
        },
    ))
}

pub fn maxpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    indices: &PoolIndices,
) -> Result<Tensor<T>> {
    if grad_out.len() != indices.len() {
        return Err(Error::dim("upstream gradient does not match pooling record"));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    kernels::maxpool_backward(grad_out.data(), &indices.flat, grad.data_mut());
    Ok(grad)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes `grad` through where `input > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(grad: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.shape() != input.shape() {
        return Err(Error::dim(format!(
            "relu_backward shapes differ: {:?} vs {:?}",
            grad.shape(),
            input.shape()
        )));
    }
    let data = grad
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(grad.shape().to_vec(), data)
}
