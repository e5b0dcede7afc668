use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{LayerSpec, ModelArch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, ConvGeometry, ConvScratch};
use crate::tensor::Tensor;

/// Weights (conv kernels or FC matrix) and bias of one learnable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Parameters bound to an architecture. `params[i]` is `Some` exactly for
/// the learnable layers of `arch.layers()[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    arch: ModelArch,
    params: Vec<Option<Params<T>>>,
    /// Initialization seed; unknown for models read from disk.
    seed: Option<u64>,
}

/// Per-parameter gradients, laid out like [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<Params<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            layers: model
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Params {
                        weights: Tensor::zeros(p.weights.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    /// All gradient values in the canonical parameter order.
    pub fn flat(&self) -> Vec<T> {
        flatten(&self.layers)
    }
}

fn flatten<T: Scalar>(layers: &[Option<Params<T>>]) -> Vec<T> {
    let mut out = Vec::new();
    for p in layers.iter().flatten() {
        out.extend_from_slice(p.weights.data());
        out.extend_from_slice(p.bias.data());
    }
    out
}

/// Activations retained by a training-mode forward pass.
///
/// Owned by the caller; [`Model::backward`] consumes the retained state.
#[derive(Debug, Default)]
pub struct TrainingContext<T> {
    /// Input of each layer.
    inputs: Vec<Tensor<T>>,
    /// Winner indices of each pooling layer, offset per sample.
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> TrainingContext<T> {
    pub fn new() -> Self {
        Self {
            inputs: Vec::new(),
            pool_argmax: Vec::new(),
        }
    }

    pub fn is_ready(&self) -> bool {
        !self.inputs.is_empty()
    }
}

impl<T: Scalar> Model<T> {
    /// Xavier-uniform weights, zero biases, fully determined by `seed`.
    pub fn init(arch: ModelArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers()
            .iter()
            .map(|layer| {
                let (w_shape, b_shape) = layer.param_shapes()?;
                let (fan_in, fan_out) = layer.fans()?;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Tensor::from_fn(&w_shape, |_| T::lit(rng.gen_range(-bound..bound)));
                Some(Params {
                    weights,
                    bias: Tensor::zeros(&b_shape),
                })
            })
            .collect();
        Self {
            arch,
            params,
            seed: Some(seed),
        }
    }

    /// Builds a model from parameters in canonical order (layer order,
    /// weights before bias, row-major).
    pub fn from_flat(arch: ModelArch, values: &[T], seed: Option<u64>) -> Result<Self> {
        if values.len() != arch.parameter_count() {
            return Err(Error::param(format!(
                "{arch} has {} parameters, got {}",
                arch.parameter_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.to_vec(), values[offset..offset + n].to_vec());
            offset += n;
            t
        };
        let params = arch
            .layers()
            .iter()
            .map(|layer| match layer.param_shapes() {
                Some((w, b)) => Ok(Some(Params {
                    weights: take(&w)?,
                    bias: take(&b)?,
                })),
                None => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { arch, params, seed })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn params(&self) -> &[Option<Params<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Params<T>>] {
        &mut self.params
    }

    pub fn flat_params(&self) -> Vec<T> {
        flatten(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let want = self.arch.input_shape();
        if batch.rank() != 4 || batch.shape()[1..] != want {
            return Err(Error::dim(format!(
                "model {} expects N×{}×{}×{} input, got {:?}",
                self.arch,
                want[0],
                want[1],
                want[2],
                batch.shape()
            )));
        }
        Ok(batch.shape()[0])
    }

    /// Inference-mode forward pass: logits `N × class_count`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut scratch = ConvScratch::default();
        for (layer, params) in self.arch.layers().iter().zip(&self.params) {
            x = layer_forward(layer, params.as_ref(), &x, n, &mut scratch, None);
        }
        Ok(x)
    }

    /// Training-mode forward pass retaining activations in `ctx`.
    pub fn forward_train(&self, batch: &Tensor<T>, ctx: &mut TrainingContext<T>) -> Result<Tensor<T>> {
        let n = self.check_batch(batch)?;
        ctx.inputs.clear();
        ctx.pool_argmax.clear();
        let mut x = batch.clone();
        let mut scratch = ConvScratch::default();
        for (layer, params) in self.arch.layers().iter().zip(&self.params) {
            let mut argmax = None;
            let y = layer_forward(layer, params.as_ref(), &x, n, &mut scratch, Some(&mut argmax));
            ctx.inputs.push(x);
            ctx.pool_argmax.push(argmax);
            x = y;
        }
        Ok(x)
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the logits of the
    /// last [`Model::forward_train`] call. Consumes the retained activations.
    pub fn backward(
        &self,
        ctx: &mut TrainingContext<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        if !ctx.is_ready() {
            return Err(Error::State(
                "backward called without retained activations".into(),
            ));
        }
        let n = ctx.inputs[0].shape()[0];
        if grad_logits.shape() != [n, self.arch.class_count()] {
            return Err(Error::dim(format!(
                "logit gradient shape {:?}, expected [{n}, {}]",
                grad_logits.shape(),
                self.arch.class_count()
            )));
        }
        let inputs = std::mem::take(&mut ctx.inputs);
        let argmaxes = std::mem::take(&mut ctx.pool_argmax);
        let mut grads = Gradients::zeros_like(self);
        let mut grad = grad_logits.clone();
        let mut scratch = ConvScratch::default();
        let layers = self.arch.layers();
        for i in (0..layers.len()).rev() {
            let need_input_grad = i > 0;
            grad = layer_backward(
                &layers[i],
                self.params[i].as_ref(),
                &inputs[i],
                argmaxes[i].as_deref(),
                &grad,
                n,
                &mut scratch,
                grads.layers[i].as_mut(),
                need_input_grad,
            );
        }
        Ok(grads)
    }
}

fn layer_forward<T: Scalar>(
    layer: &LayerSpec,
    params: Option<&Params<T>>,
    x: &Tensor<T>,
    n: usize,
    scratch: &mut ConvScratch<T>,
    argmax_out: Option<&mut Option<Vec<usize>>>,
) -> Tensor<T> {
    match *layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            input_extent,
            output_extent,
        } => {
            let p = params.expect("conv params");
            let g = ConvGeometry {
                in_channels,
                out_channels,
                height: input_extent,
                width: input_extent,
                kernel,
                stride,
            };
            let mut y = Tensor::zeros(&[n, out_channels, output_extent, output_extent]);
            for s in 0..n {
                kernels::conv_forward(
                    &g,
                    x.row(s),
                    p.weights.data(),
                    p.bias.data(),
                    scratch,
                    y.row_mut(s),
                );
            }
            y
        }
        LayerSpec::MaxPool {
            channels,
            input_extent,
            output_extent,
        } => {
            let mut y = Tensor::zeros(&[n, channels, output_extent, output_extent]);
            let per = y.row_len();
            let mut argmax = vec![0usize; n * per];
            for s in 0..n {
                kernels::maxpool_forward(
                    channels,
                    input_extent,
                    input_extent,
                    x.row(s),
                    y.row_mut(s),
                    &mut argmax[s * per..(s + 1) * per],
                );
            }
            if let Some(slot) = argmax_out {
                *slot = Some(argmax);
            }
            y
        }
        LayerSpec::Relu => x.map(|v| v.max(T::zero())),
        LayerSpec::FullyConnected {
            in_neurons,
            out_neurons,
        } => {
            let p = params.expect("fc params");
            let mut w_t = vec![T::zero(); in_neurons * out_neurons];
            kernels::transpose_into(p.weights.data(), out_neurons, in_neurons, &mut w_t);
            let mut y = Tensor::zeros(&[n, out_neurons]);
            kernels::gemm(n, in_neurons, out_neurons, x.data(), &w_t, y.data_mut(), false);
            for s in 0..n {
                for (v, &b) in y.row_mut(s).iter_mut().zip(p.bias.data()) {
                    *v += b;
                }
            }
            y
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_backward<T: Scalar>(
    layer: &LayerSpec,
    params: Option<&Params<T>>,
    x: &Tensor<T>,
    argmax: Option<&[usize]>,
    grad_out: &Tensor<T>,
    n: usize,
    scratch: &mut ConvScratch<T>,
    grads: Option<&mut Params<T>>,
    need_input_grad: bool,
) -> Tensor<T> {
    match *layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            input_extent,
            ..
        } => {
            let p = params.expect("conv params");
            let gp = grads.expect("conv grads");
            let g = ConvGeometry {
                in_channels,
                out_channels,
                height: input_extent,
                width: input_extent,
                kernel,
                stride,
            };
            let mut dx = if need_input_grad {
                Tensor::zeros(x.shape())
            } else {
                Tensor::zeros(&[1])
            };
            for s in 0..n {
                kernels::conv_backward(
                    &g,
                    x.row(s),
                    p.weights.data(),
                    grad_out.row(s),
                    scratch,
                    gp.weights.data_mut(),
                    gp.bias.data_mut(),
                    need_input_grad.then(|| dx.row_mut(s)),
                );
            }
            dx
        }
        LayerSpec::MaxPool { .. } => {
            let argmax = argmax.expect("pool record");
            let mut dx = Tensor::zeros(x.shape());
            let per = grad_out.row_len();
            for s in 0..n {
                kernels::maxpool_backward(
                    grad_out.row(s),
                    &argmax[s * per..(s + 1) * per],
                    dx.row_mut(s),
                );
            }
            dx
        }
        LayerSpec::Relu => {
            let data = grad_out
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("relu shape")
        }
        LayerSpec::FullyConnected {
            in_neurons,
            out_neurons,
        } => {
            let p = params.expect("fc params");
            let gp = grads.expect("fc grads");
            // dW = dYᵀ·X, db = Σ_n dY, dX = dY·W
            kernels::gemm_at_b(
                n,
                out_neurons,
                in_neurons,
                grad_out.data(),
                x.data(),
                gp.weights.data_mut(),
            );
            for s in 0..n {
                for (b, &g) in gp.bias.data_mut().iter_mut().zip(grad_out.row(s)) {
                    *b += g;
                }
            }
            if !need_input_grad {
                return Tensor::zeros(&[1]);
            }
            let mut dx = vec![T::zero(); n * in_neurons];
            kernels::gemm(
                n,
                out_neurons,
                in_neurons,
                grad_out.data(),
                p.weights.data(),
                &mut dx,
                false,
            );
            Tensor::new(x.shape().to_vec(), dx).expect("fc input shape")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Block;

    fn toy_arch() -> ModelArch {
        ModelArch::from_blocks(
            1,
            8,
            &[
                Block::Conv { out_channels: 2, kernel: 3, stride: 1 },
                Block::Pool,
                Block::Relu,
                Block::Fc { out_neurons: 4 },
            ],
        )
        .unwrap()
    }

    fn random_batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, shape[0], shape[1], shape[2]], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = Model::<f64>::init(ModelArch::mnist_teacher(), 42);
        let b = Model::<f64>::init(ModelArch::mnist_teacher(), 42);
        assert!(a
            .flat_params()
            .iter()
            .zip(b.flat_params())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        for p in a.params().iter().flatten() {
            assert!(p.bias.data().iter().all(|&v| v == 0.0));
        }
        let c = Model::<f64>::init(ModelArch::mnist_teacher(), 43);
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn xavier_bound_moments() {
        let m = Model::<f64>::init(ModelArch::mnist_teacher(), 1);
        let w = &m.params()[6].as_ref().unwrap().weights;
        assert_eq!(w.shape(), &[500, 800]);
        let bound = (6.0f64 / 1300.0).sqrt();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = bound / 3f64.sqrt();
        assert!((var.sqrt() - want).abs() / want < 0.05);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let arch = ModelArch::mnist_teacher();
        let m = Model::from_flat(arch.clone(), &vec![0.0f64; arch.parameter_count()], None).unwrap();
        let logits = m.forward(&random_batch(2, arch.input_shape(), 0)).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mnist_shape_propagation() {
        let m = Model::<f64>::init(ModelArch::mnist_teacher(), 0);
        let y = m.forward(&random_batch(1, [1, 28, 28], 1)).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
        assert!(m.forward(&random_batch(1, [1, 27, 28], 1)).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let m = Model::<f64>::init(toy_arch(), 0);
        let mut ctx = TrainingContext::new();
        let g = Tensor::zeros(&[1, 4]);
        assert!(matches!(m.backward(&mut ctx, &g), Err(Error::State(_))));
        m.forward_train(&random_batch(1, [1, 8, 8], 2), &mut ctx).unwrap();
        assert!(m.backward(&mut ctx, &g).is_ok());
        assert!(matches!(m.backward(&mut ctx, &g), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Model::<f64>::init(toy_arch(), 3);
        let mut ctx = TrainingContext::new();
        m.forward_train(&random_batch(3, [1, 8, 8], 4), &mut ctx).unwrap();
        let grads = m.backward(&mut ctx, &Tensor::zeros(&[3, 4])).unwrap();
        assert!(grads.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_fc_gradient_is_outer_product() {
        let arch = ModelArch::from_blocks(1, 1, &[Block::Fc { out_neurons: 3 }]).unwrap();
        let m = Model::<f64>::init(arch, 0);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let mut ctx = TrainingContext::new();
        m.forward_train(&x, &mut ctx).unwrap();
        let up = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = m.backward(&mut ctx, &up).unwrap();
        let p = g.layers[0].as_ref().unwrap();
        assert_eq!(p.weights.data(), &[2.5, -5.0, 1.25]);
        assert_eq!(p.bias.data(), up.data());
    }

    #[test]
    fn batch_rows_are_equivariant() {
        let m = Model::<f64>::init(toy_arch(), 5);
        let batch = random_batch(4, [1, 8, 8], 6);
        let logits = m.forward(&batch).unwrap();
        let perm = [2, 0, 3, 1];
        let mut permuted = Tensor::zeros(batch.shape());
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(dst).copy_from_slice(batch.row(src));
        }
        let pl = m.forward(&permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(pl.row(dst), logits.row(src));
        }
    }

    #[test]
    fn toy_arch_gradients_match_finite_differences() {
        let arch = toy_arch();
        let m = Model::<f64>::init(arch.clone(), 7);
        let batch = random_batch(2, arch.input_shape(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::from_fn(&[2, 4], |_| rng.gen_range(-1.0..1.0));
        // loss = Σ w ⊙ logits
        let loss = |model: &Model<f64>| -> f64 {
            let z = model.forward(&batch).unwrap();
            z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let mut ctx = TrainingContext::new();
        m.forward_train(&batch, &mut ctx).unwrap();
        let analytic = m.backward(&mut ctx, &w).unwrap().flat();
        let base = m.flat_params();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = loss(&Model::from_flat(arch.clone(), &plus, None).unwrap());
            let fm = loss(&Model::from_flat(arch.clone(), &minus, None).unwrap());
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let scale = a.abs().max(fd.abs());
            assert!(
                (a - fd).abs() <= 1e-4 * scale || (a - fd).abs() < 1e-9,
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn f32_model_runs() {
        let m = Model::<f32>::init(toy_arch(), 1);
        let batch: Tensor<f32> = random_batch(2, [1, 8, 8], 3).cast();
        let y = m.forward(&batch).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.is_finite());
    }
}
