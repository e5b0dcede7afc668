//! Temperature softmax, cross entropy, and the distillation losses.
//!
//! For a batch of `N` samples with one-hot labels `Y`, student logits `Z`
//! and teacher soft targets `P_T^τ`:
//!
//! ```text
//! P^τ_i      = exp(z_i/τ) / Σ_j exp(z_j/τ)
//! H(P, Q)    = −Σ_i p_i ln q_i
//! L_KD       = 1/N Σ_n [ (1−λ)·H(Y, P_S) + λ·H(P_T^τ, P_S^τ) ]
//! ```
//!
//! with `P_S = softmax(Z, 1)` and `P_S^τ = softmax(Z, τ)`. The task-specified
//! loss has the same arithmetic; the task restriction lives in which samples
//! are supplied. Probabilities are clamped below at [`PROB_FLOOR`] inside the
//! logarithm, and gradients treat clamped terms as constants.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise probabilities produced at a given temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxOutput<T> {
    pub probabilities: Tensor<T>,
    pub temperature: f64,
}

/// Parts of a distillation loss. `total == (1−λ)·hard_term + λ·soft_term`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean cross entropy against the labels.
    pub hard_term: f64,
    /// Mean cross entropy against the soft targets (times τ² when rescaled).
    pub soft_term: f64,
    pub lambda: f64,
    pub sample_count: usize,
}

/// How the soft term is weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SoftTermScaling {
    /// `λ·H(P_T^τ, P_S^τ)` as written.
    #[default]
    Literal,
    /// Multiplies the soft term (and so its gradient) by τ², which keeps
    /// gradient magnitudes comparable across temperatures.
    TauSquared,
}

fn as_rows<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [c] => Ok((1, c)),
        [n, c] => Ok((n, c)),
        _ => Err(Error::dim(format!("expected a row or a matrix of rows, got {:?}", t.shape()))),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn softmax_row<T: Scalar>(z: &[T], inv_tau: T, out: &mut [T]) {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) * inv_tau).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Row-wise `exp(z_i/τ) / Σ_j exp(z_j/τ)` with max subtraction.
pub fn softmax_tau<T: Scalar>(logits: &Tensor<T>, tau: f64) -> Result<SoftmaxOutput<T>> {
    check_tau(tau)?;
    let (n, c) = as_rows(logits)?;
    if !logits.is_finite() {
        return Err(Error::param("logits must be finite"));
    }
    let inv_tau = T::lit(1.0 / tau);
    let mut probabilities = Tensor::zeros(&[n, c]);
    for (z, out) in logits.data().chunks(c).zip(probabilities.data_mut().chunks_mut(c)) {
        if tau == 1.0 {
            softmax_row(z, T::one(), out);
        } else {
            softmax_row(z, inv_tau, out);
        }
    }
    Ok(SoftmaxOutput {
        probabilities,
        temperature: tau,
    })
}

fn row_cross_entropy<T: Scalar>(p: &[T], q: &[T]) -> T {
    let floor = T::lit(PROB_FLOOR);
    -p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == T::zero() { T::zero() } else { pi * qi.max(floor).ln() })
        .fold(T::zero(), |a, b| a + b)
}

/// `−Σ_i p_i ln q_i` (natural log), averaged over rows.
pub fn cross_entropy<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    let (n, c) = as_rows(p)?;
    if as_rows(q)? != (n, c) {
        return Err(Error::dim(format!(
            "cross entropy shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    if p.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::param("cross entropy target has a negative entry"));
    }
    let total = p
        .data()
        .chunks(c)
        .zip(q.data().chunks(c))
        .map(|(pr, qr)| row_cross_entropy(pr, qr))
        .fold(T::zero(), |a, b| a + b);
    Ok(total / T::lit(n as f64))
}

/// Adds `scale · ∂H(target, softmax(z/τ))/∂z` for one row into `grad`.
/// `probs` is `softmax(z/τ)`; `scale` already includes `1/τ`.
fn accumulate_ce_grad<T: Scalar>(target: &[T], probs: &[T], scale: T, grad: &mut [T]) {
    let floor = T::lit(PROB_FLOOR);
    let live_mass = target
        .iter()
        .zip(probs)
        .filter(|(_, &q)| q >= floor)
        .fold(T::zero(), |a, (&t, _)| a + t);
    for ((g, &t), &q) in grad.iter_mut().zip(target).zip(probs) {
        let own = if q >= floor { t } else { T::zero() };
        *g += scale * (q * live_mass - own);
    }
}

/// One-hot rows for class ids.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::param("no labels"));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::param(format!("label {l} outside {classes} classes")));
        }
        t.row_mut(i)[l] = T::one();
    }
    Ok(t)
}

/// Mean `H(Y, softmax(Z))` and its gradient w.r.t. `Z`.
pub fn hard_label_loss<T: Scalar>(labels: &Tensor<T>, logits: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (n, c) = as_rows(logits)?;
    if as_rows(labels)? != (n, c) {
        return Err(Error::dim("labels and logits differ in shape"));
    }
    let probs = softmax_tau(logits, 1.0)?.probabilities;
    let loss = cross_entropy(labels, &probs)?;
    let mut grad = Tensor::zeros(&[n, c]);
    let inv_n = T::lit(1.0 / n as f64);
    for i in 0..n {
        accumulate_ce_grad(labels.row(i), probs.row(i), inv_n, grad.row_mut(i));
    }
    Ok((loss.as_f64(), grad))
}

/// Distillation loss and its exact gradient w.r.t. the student logits.
pub fn kd_loss<T: Scalar>(
    labels: &Tensor<T>,
    student_logits: &Tensor<T>,
    soft_targets: &SoftmaxOutput<T>,
    tau: f64,
    lambda: f64,
) -> Result<(LossBreakdown, Tensor<T>)> {
    kd_loss_scaled(
        labels,
        student_logits,
        soft_targets,
        tau,
        lambda,
        SoftTermScaling::Literal,
    )
}

pub fn kd_loss_scaled<T: Scalar>(
    labels: &Tensor<T>,
    student_logits: &Tensor<T>,
    soft_targets: &SoftmaxOutput<T>,
    tau: f64,
    lambda: f64,
    scaling: SoftTermScaling,
) -> Result<(LossBreakdown, Tensor<T>)> {
    check_tau(tau)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("λ must lie in [0, 1], got {lambda}")));
    }
    if soft_targets.temperature != tau {
        return Err(Error::param(format!(
            "soft targets were captured at τ = {}, loss requested at τ = {tau}",
            soft_targets.temperature
        )));
    }
    let (n, c) = as_rows(student_logits)?;
    if as_rows(labels)? != (n, c) || as_rows(&soft_targets.probabilities)? != (n, c) {
        return Err(Error::dim(format!(
            "batch shapes disagree: labels {:?}, logits {:?}, soft targets {:?}",
            labels.shape(),
            student_logits.shape(),
            soft_targets.probabilities.shape()
        )));
    }
    let p_s = softmax_tau(student_logits, 1.0)?.probabilities;
    let p_s_tau = softmax_tau(student_logits, tau)?.probabilities;
    let soft_weight = match scaling {
        SoftTermScaling::Literal => 1.0,
        SoftTermScaling::TauSquared => tau * tau,
    };

    let hard_term = cross_entropy(labels, &p_s)?.as_f64();
    let soft_term = soft_weight * cross_entropy(&soft_targets.probabilities, &p_s_tau)?.as_f64();
    let total = (1.0 - lambda) * hard_term + lambda * soft_term;

    let mut grad = Tensor::zeros(&[n, c]);
    let hard_scale = T::lit((1.0 - lambda) / n as f64);
    let soft_scale = T::lit(lambda * soft_weight / (tau * n as f64));
    for i in 0..n {
        let g = grad.row_mut(i);
        accumulate_ce_grad(labels.row(i), p_s.row(i), hard_scale, g);
        accumulate_ce_grad(soft_targets.probabilities.row(i), p_s_tau.row(i), soft_scale, g);
    }
    Ok((
        LossBreakdown {
            total,
            hard_term,
            soft_term,
            lambda,
            sample_count: n,
        },
        grad,
    ))
}

/// [`kd_loss`] restricted to samples whose label lies in `task_classes`.
pub fn task_kd_loss<T: Scalar>(
    labels: &Tensor<T>,
    student_logits: &Tensor<T>,
    soft_targets: &SoftmaxOutput<T>,
    tau: f64,
    lambda: f64,
    task_classes: &[usize],
) -> Result<(LossBreakdown, Tensor<T>)> {
    task_kd_loss_scaled(
        labels,
        student_logits,
        soft_targets,
        tau,
        lambda,
        task_classes,
        SoftTermScaling::Literal,
    )
}

pub fn task_kd_loss_scaled<T: Scalar>(
    labels: &Tensor<T>,
    student_logits: &Tensor<T>,
    soft_targets: &SoftmaxOutput<T>,
    tau: f64,
    lambda: f64,
    task_classes: &[usize],
    scaling: SoftTermScaling,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let (_, c) = as_rows(labels)?;
    for (sample, row) in labels.data().chunks(c).enumerate() {
        // the label is the class carrying the largest mass (first on ties)
        let label = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        if !task_classes.contains(&label) {
            return Err(Error::TaskSubsetViolation {
                sample,
                label,
                classes: task_classes.to_vec(),
            });
        }
    }
    kd_loss_scaled(labels, student_logits, soft_targets, tau, lambda, scaling)
}

/// Shannon entropy (nats) of each row.
pub fn row_entropies<T: Scalar>(p: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, c) = as_rows(p)?;
    Ok(p.data()
        .chunks(c)
        .map(|r| row_cross_entropy(r, r).as_f64())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_tau(&row(&[0.0; 4]), 7.0).unwrap().probabilities;
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax_tau(&row(&[2f64.ln(), 0.0]), 1.0).unwrap().probabilities;
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        let p = softmax_tau(&row(&[6.0, 0.0]), 3.0).unwrap().probabilities;
        let e2 = 2f64.exp();
        assert!((p.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.880797).abs() < 1e-6);
        assert!(matches!(softmax_tau(&row(&[1.0]), 0.0), Err(Error::Parameter(_))));
        assert!(softmax_tau(&row(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = 2f64.ln();
        let h = cross_entropy(&row(&[0.0, 1.0]), &row(&[0.5, 0.5])).unwrap();
        assert!((h - ln2).abs() < 1e-15);
        let h = cross_entropy(&row(&[0.5, 0.5]), &row(&[0.5, 0.5])).unwrap();
        assert!((h - ln2).abs() < 1e-15);
        assert!(cross_entropy(&row(&[0.5, 0.5]), &row(&[1.0])).is_err());
    }

    #[test]
    fn kd_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-3.0..3.0));
        let t = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-3.0..3.0));
        let y = one_hot(&[0, 4, 2], 5).unwrap();
        let soft = softmax_tau(&t, 3.0).unwrap();
        let (l0, g0) = kd_loss(&y, &z, &soft, 3.0, 0.0).unwrap();
        let (hard, hard_grad) = hard_label_loss(&y, &z).unwrap();
        assert_eq!(l0.total, hard);
        assert!(l0.soft_term > 0.0);
        assert_eq!(g0, hard_grad);
        let (l1, _) = kd_loss(&y, &z, &soft, 3.0, 1.0).unwrap();
        let want = cross_entropy(&soft.probabilities, &softmax_tau(&z, 3.0).unwrap().probabilities).unwrap();
        assert_eq!(l1.total, want);
    }

    #[test]
    fn tau_mismatch_is_rejected() {
        let z = row(&[1.0, 2.0]);
        let soft = softmax_tau(&z, 2.0).unwrap();
        let y = one_hot(&[1], 2).unwrap();
        assert!(matches!(kd_loss(&y, &z, &soft, 3.0, 0.9), Err(Error::Parameter(_))));
        assert!(kd_loss(&y, &z, &soft, 2.0, 1.5).is_err());
    }

    #[test]
    fn task_subset_violation() {
        let z = Tensor::<f64>::zeros(&[2, 10]);
        let soft = softmax_tau(&z, 3.0).unwrap();
        let y = one_hot(&[0, 5], 10).unwrap();
        let err = task_kd_loss(&y, &z, &soft, 3.0, 0.9, &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::TaskSubsetViolation { sample: 1, label: 5, .. }));
        let all: Vec<usize> = (0..10).collect();
        let (a, ga) = task_kd_loss(&y, &z, &soft, 3.0, 0.9, &all).unwrap();
        let (b, gb) = kd_loss(&y, &z, &soft, 3.0, 0.9).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn tau_squared_scaling_rescales_soft_term_only() {
        let z = row(&[0.3, -1.0, 2.0]);
        let soft = softmax_tau(&row(&[1.0, 0.0, 0.5]), 4.0).unwrap();
        let y = one_hot(&[2], 3).unwrap();
        let (lit, _) = kd_loss(&y, &z, &soft, 4.0, 0.5).unwrap();
        let (sq, _) =
            kd_loss_scaled(&y, &z, &soft, 4.0, 0.5, SoftTermScaling::TauSquared).unwrap();
        assert_eq!(lit.hard_term, sq.hard_term);
        assert!((sq.soft_term - 16.0 * lit.soft_term).abs() < 1e-12);
        assert!((sq.total - (0.5 * sq.hard_term + 0.5 * sq.soft_term)).abs() < 1e-12);
    }

    fn fd_check(scaling: SoftTermScaling, seed: u64, tau: f64, lambda: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-2.0..2.0));
        let soft = softmax_tau(&Tensor::from_fn(&[3, 4], |_| rng.gen_range(-2.0..2.0)), tau).unwrap();
        let y = one_hot(&[1, 3, 0], 4).unwrap();
        let (_, g) = kd_loss_scaled(&y, &z, &soft, tau, lambda, scaling).unwrap();
        let h = 1e-5;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let fp = kd_loss_scaled(&y, &zp, &soft, tau, lambda, scaling).unwrap().0.total;
            let fm = kd_loss_scaled(&y, &zm, &soft, tau, lambda, scaling).unwrap().0.total;
            let fd = (fp - fm) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-6), "{a} vs {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, &lambda) in [0.0, 0.5, 0.9, 1.0].iter().enumerate() {
            for &tau in &[1.0, 3.0, 10.0] {
                fd_check(SoftTermScaling::Literal, k as u64, tau, lambda);
                fd_check(SoftTermScaling::TauSquared, 100 + k as u64, tau, lambda);
            }
        }
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 2..12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn rows_are_stochastic(z in logits_strategy(), tau in 1.0f64..10.0) {
            let p = softmax_tau(&row(&z), tau).unwrap().probabilities;
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn shift_invariance(z in logits_strategy(), shift in -20.0f64..20.0, tau in 0.5f64..10.0) {
            let p = softmax_tau(&row(&z), tau).unwrap().probabilities;
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let q = softmax_tau(&row(&shifted), tau).unwrap().probabilities;
            prop_assert!(p.max_abs_diff(&q).unwrap() <= 1e-12);
        }

        #[test]
        fn argmax_is_temperature_invariant(z in logits_strategy(), tau in 0.05f64..100.0) {
            let p = softmax_tau(&row(&z), tau).unwrap().probabilities;
            let am = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            prop_assert_eq!(am(p.data()), am(&z));
        }
    }
}
