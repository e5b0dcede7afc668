//! Mini-batch SGD with momentum and task-restricted evaluation.

use std::fmt;
use std::io::Write;

use crate::data::{batches, Dataset, Samples, Source, TransferSet};
use crate::distill::SoftTargetCache;
use crate::error::{Error, Result};
use crate::loss::{self, SoftTermScaling, SoftmaxOutput};
use crate::nn::{Gradients, Model, ModelArch, Params, TrainingContext};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// In `[0, 1)`.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Soft-term weight; ignored when training a teacher.
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    /// Learning rate multiplier applied after every epoch, in `(0, 1]`.
    pub lr_decay: f64,
    pub soft_scaling: SoftTermScaling,
}

impl TrainConfig {
    /// SGD 0.01 / momentum 0.9 / decay 0.95, batch 64, 20 epochs, τ = 3, λ = 0.9.
    pub fn mnist() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 20,
            lambda: 0.9,
            tau: 3.0,
            seed: 0,
            lr_decay: 0.95,
            soft_scaling: SoftTermScaling::Literal,
        }
    }

    /// Same as [`TrainConfig::mnist`] with 40 epochs.
    pub fn cifar10() -> Self {
        Self {
            epochs: 40,
            ..Self::mnist()
        }
    }

    pub fn for_source(source: Source) -> Self {
        match source {
            Source::Mnist => Self::mnist(),
            Source::Cifar10 => Self::cifar10(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning rate must be positive"),
            ((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (self.batch_size >= 1, "batch size must be positive"),
            (self.epochs >= 1, "epochs must be positive"),
            ((0.0..=1.0).contains(&self.lambda), "λ must lie in [0, 1]"),
            (self.tau > 0.0 && self.tau.is_finite(), "τ must be positive"),
            (self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr decay must lie in (0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::param(*msg)),
            None => Ok(()),
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mnist()
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Gradients<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Model<T>, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Gradients::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>) {
        let lr = T::lit(self.learning_rate);
        let mu = T::lit(self.momentum);
        let update = |p: &mut Tensor<T>, v: &mut Tensor<T>, g: &Tensor<T>| {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        };
        for ((p, v), g) in model
            .params_mut()
            .iter_mut()
            .zip(&mut self.velocity.layers)
            .zip(&grads.layers)
        {
            if let (Some(p), Some(v), Some(g)) = (p, v, g) {
                let Params { weights, bias } = p;
                update(weights, &mut v.weights, &g.weights);
                update(bias, &mut v.bias, &g.bias);
            }
        }
    }
}

/// One line of training progress: `epoch=<i> loss=<f> test_acc=<f>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    pub test_acc: Option<f64>,
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} loss={:.6} test_acc=", self.epoch, self.loss)?;
        match self.test_acc {
            Some(a) => write!(f, "{a:.6}"),
            None => write!(f, "nan"),
        }
    }
}

/// Hook invoked after every epoch.
pub trait EpochObserver<T> {
    fn on_epoch(&mut self, epoch: usize, loss: f64, model: &Model<T>) -> Result<()>;
}

impl<T> EpochObserver<T> for () {
    fn on_epoch(&mut self, _: usize, _: f64, _: &Model<T>) -> Result<()> {
        Ok(())
    }
}

/// Evaluates on a held-out split after each epoch, keeps the history and
/// optionally writes each [`EpochReport`] line to `out`.
pub struct Progress<'a, T> {
    test: Option<(&'a Dataset<T>, Vec<usize>)>,
    out: Option<Box<dyn Write + 'a>>,
    pub history: Vec<EpochReport>,
}

impl<'a, T: Scalar> Progress<'a, T> {
    pub fn new() -> Self {
        Self {
            test: None,
            out: None,
            history: Vec::new(),
        }
    }

    pub fn evaluate_on(mut self, test: &'a Dataset<T>, classes: &[usize]) -> Self {
        self.test = Some((test, classes.to_vec()));
        self
    }

    pub fn print_to(mut self, out: impl Write + 'a) -> Self {
        self.out = Some(Box::new(out));
        self
    }
}

impl<T: Scalar> Default for Progress<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> EpochObserver<T> for Progress<'_, T> {
    fn on_epoch(&mut self, epoch: usize, loss: f64, model: &Model<T>) -> Result<()> {
        let test_acc = match &self.test {
            Some((test, classes)) => Some(evaluate(model, test, classes)?.accuracy),
            None => None,
        };
        let report = EpochReport {
            epoch,
            loss,
            test_acc,
        };
        if let Some(out) = self.out.as_mut() {
            writeln!(out, "{report}").map_err(|e| Error::io("<progress>", e))?;
        }
        self.history.push(report);
        Ok(())
    }
}

/// The shared SGD loop. `batch_loss` maps (sample indices, logits) to the
/// mean loss and its logit gradient.
fn fit<T: Scalar, S: Samples + ?Sized>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    set: &S,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver<T>,
    mut batch_loss: impl FnMut(&[usize], &Tensor<T>) -> Result<(f64, Tensor<T>)>,
) -> Result<()> {
    let mut sgd = Sgd::new(model, cfg.learning_rate, cfg.momentum);
    let mut ctx = TrainingContext::new();
    for epoch in 0..cfg.epochs {
        sgd.learning_rate = cfg.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, idx) in batches(set, cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let x = data.gather(idx);
            let logits = model.forward_train(&x, &mut ctx)?;
            let (loss, grad) = if logits.is_finite() {
                batch_loss(idx, &logits)?
            } else {
                (f64::NAN, logits)
            };
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    batch: b,
                    loss,
                });
            }
            let grads = model.backward(&mut ctx, &grad)?;
            sgd.step(model, &grads);
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        observer.on_epoch(epoch + 1, loss_sum / seen as f64, model)?;
    }
    Ok(())
}

fn check_arch<T: Scalar>(arch: &ModelArch, data: &Dataset<T>) -> Result<()> {
    if arch.input_shape() != data.source().image_shape() {
        return Err(Error::dim(format!(
            "architecture {arch} does not take {} images",
            data.source()
        )));
    }
    Ok(())
}

/// Trains with hard-label cross entropy on every sample of `train`.
pub fn train_teacher<T: Scalar>(arch: ModelArch, train: &Dataset<T>, cfg: &TrainConfig) -> Result<Model<T>> {
    train_teacher_with(arch, train, cfg, &mut ())
}

pub fn train_teacher_with<T: Scalar>(
    arch: ModelArch,
    train: &Dataset<T>,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver<T>,
) -> Result<Model<T>> {
    cfg.validate()?;
    check_arch(&arch, train)?;
    if train.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let classes = arch.class_count();
    let mut model = Model::init(arch, cfg.seed);
    fit(&mut model, train, train, cfg, observer, |idx, logits| {
        let y = loss::one_hot(&train.gather_labels(idx), classes)?;
        loss::hard_label_loss(&y, logits)
    })?;
    Ok(model)
}

/// Minimizes the task-specified distillation loss over the transfer set.
pub fn train_student<T: Scalar>(
    student_arch: ModelArch,
    transfer: &TransferSet<'_, T>,
    cache: &SoftTargetCache<T>,
    cfg: &TrainConfig,
) -> Result<Model<T>> {
    train_student_with(student_arch, transfer, cache, cfg, &mut ())
}

pub fn train_student_with<T: Scalar>(
    student_arch: ModelArch,
    transfer: &TransferSet<'_, T>,
    cache: &SoftTargetCache<T>,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver<T>,
) -> Result<Model<T>> {
    cfg.validate()?;
    let data = transfer.base();
    check_arch(&student_arch, data)?;
    if transfer.is_empty() {
        return Err(Error::param("empty transfer set"));
    }
    if cache.tau() != cfg.tau {
        return Err(Error::param(format!(
            "soft targets were captured at τ = {}, training requested τ = {}",
            cache.tau(),
            cfg.tau
        )));
    }
    let classes = student_arch.class_count();
    if cache.class_count() != classes {
        return Err(Error::dim(format!(
            "cache rows have {} classes, student predicts {classes}",
            cache.class_count()
        )));
    }
    if let Some(&missing) = transfer.indices().iter().find(|&&i| !cache.contains(i)) {
        return Err(Error::CacheMiss(missing));
    }
    let mut model = Model::init(student_arch, cfg.seed);
    let task = transfer.classes().to_vec();
    fit(&mut model, data, transfer, cfg, observer, |idx, logits| {
        let y = loss::one_hot(&data.gather_labels(idx), classes)?;
        let soft = SoftmaxOutput {
            probabilities: cache.rows(idx)?,
            temperature: cache.tau(),
        };
        let (breakdown, grad) =
            loss::task_kd_loss_scaled(&y, logits, &soft, cfg.tau, cfg.lambda, &task, cfg.soft_scaling)?;
        Ok((breakdown.total, grad))
    })?;
    Ok(model)
}

/// Accuracy over the test samples of a task subset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub sample_count: usize,
    /// Indexed by class id.
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// Argmax over the task classes only.
    #[default]
    Masked,
    /// Argmax over every class; out-of-task predictions count as errors.
    Unmasked,
}

const EVAL_CHUNK: usize = 256;

pub fn evaluate<T: Scalar>(model: &Model<T>, test: &Dataset<T>, classes: &[usize]) -> Result<EvalResult> {
    evaluate_with(model, test, classes, EvalMode::Masked)
}

/// Index of the largest logit among `allowed`; ties go to the lowest id.
pub fn masked_argmax<T: Scalar>(logits: &[T], allowed: &[usize]) -> usize {
    let mut best = usize::MAX;
    for &c in allowed {
        if best == usize::MAX || logits[c] > logits[best] || (logits[c] == logits[best] && c < best) {
            best = c;
        }
    }
    best
}

pub fn evaluate_with<T: Scalar>(
    model: &Model<T>,
    test: &Dataset<T>,
    classes: &[usize],
    mode: EvalMode,
) -> Result<EvalResult> {
    let n_classes = model.arch().class_count();
    if classes.is_empty() || classes.iter().any(|&c| c >= n_classes) {
        return Err(Error::param(format!("invalid task classes {classes:?}")));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let indices = test.indices_in(&sorted);
    if indices.is_empty() {
        return Err(Error::param(format!("no test samples in classes {sorted:?}")));
    }
    let all: Vec<usize> = (0..n_classes).collect();
    let allowed = match mode {
        EvalMode::Masked => &sorted,
        EvalMode::Unmasked => &all,
    };
    let mut correct = vec![0; n_classes];
    let mut total = vec![0; n_classes];
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = model.forward(&test.gather(chunk))?;
        for (row, &i) in logits.rows().zip(chunk) {
            let label = test.label(i);
            total[label] += 1;
            if masked_argmax(row, allowed) == label {
                correct[label] += 1;
            }
        }
    }
    let hits: usize = correct.iter().sum();
    Ok(EvalResult {
        accuracy: hits as f64 / indices.len() as f64,
        sample_count: indices.len(),
        correct,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Source, Split};
    use crate::nn::Block;

    #[test]
    fn momentum_step_matches_closed_form() {
        // f(p) = ½·a·p² per parameter, gradient a·p
        let arch = ModelArch::from_blocks(1, 1, &[Block::Fc { out_neurons: 1 }]).unwrap();
        let mut model = Model::<f64>::from_flat(arch, &[2.0, -1.0], None).unwrap();
        let (a, lr, mu) = (3.0, 0.1, 0.9);
        let mut sgd = Sgd::new(&model, lr, mu);
        let grad_of = |m: &Model<f64>| {
            let mut g = Gradients::zeros_like(m);
            let p = m.flat_params();
            let gl = g.layers[0].as_mut().unwrap();
            gl.weights.data_mut()[0] = a * p[0];
            gl.bias.data_mut()[0] = a * p[1];
            g
        };
        let (mut p, mut v) = ([2.0f64, -1.0], [0.0f64, 0.0]);
        for _ in 0..3 {
            let g = grad_of(&model);
            sgd.step(&mut model, &g);
            for k in 0..2 {
                v[k] = mu * v[k] + a * p[k];
                p[k] -= lr * v[k];
            }
            assert_eq!(model.flat_params(), p.to_vec());
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::mnist().validate().is_ok());
        assert_eq!(TrainConfig::cifar10().epochs, 40);
        let bad = TrainConfig { momentum: 1.0, ..TrainConfig::mnist() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr_decay: 0.0, ..TrainConfig::mnist() };
        assert!(bad.validate().is_err());
        let c = TrainConfig::mnist();
        assert!((c.learning_rate_at(2) - 0.01 * 0.95 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn report_line_format() {
        let r = EpochReport { epoch: 3, loss: 0.25, test_acc: Some(0.5) };
        assert_eq!(r.to_string(), "epoch=3 loss=0.250000 test_acc=0.500000");
        let r = EpochReport { test_acc: None, ..r };
        assert!(r.to_string().ends_with("test_acc=nan"));
    }

    #[test]
    fn masked_argmax_rules() {
        assert_eq!(masked_argmax(&[0.0, 5.0, 1.0, 2.0], &[0, 2, 3]), 3);
        assert_eq!(masked_argmax(&[1.0, 1.0, 1.0], &[2, 1]), 1);
    }

    fn labelled(labels: Vec<u8>) -> Dataset<f64> {
        let n = labels.len();
        Dataset::from_bytes(&vec![0; n * 784], labels, Split::Test, Source::Mnist).unwrap()
    }

    #[test]
    fn zero_model_predicts_lowest_class() {
        let arch = ModelArch::mnist_teacher();
        let model = Model::from_flat(arch.clone(), &vec![0.0; arch.parameter_count()], None).unwrap();
        let test = labelled(vec![0, 1, 1, 1, 2, 5, 0]);
        let r = evaluate(&model, &test, &[0, 1]).unwrap();
        assert_eq!(r.sample_count, 5);
        assert!((r.accuracy - 2.0 / 5.0).abs() < 1e-15);
        assert_eq!(r.total.iter().sum::<usize>(), 5);
        assert_eq!(r.correct[0], 2);
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(
            evaluate(&model, &test, &all).unwrap(),
            evaluate_with(&model, &test, &all, EvalMode::Unmasked).unwrap()
        );
        assert!(matches!(evaluate(&model, &test, &[7, 8]), Err(Error::Parameter(_))));
    }
}
