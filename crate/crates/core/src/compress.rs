//! Uniform-width student architectures and complexity estimates.

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelArch};

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionPlan {
    pub rate: f64,
    pub teacher_arch: ModelArch,
    pub student_arch: ModelArch,
}

/// `cp_conv` sums `C_i·C_o·k²` over conv layers, `cp_fc` sums `N_i·N_o`
/// over FC layers. `mac_count` also multiplies each conv term by its output
/// map area.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ComplexityReport {
    pub cp_conv: u64,
    pub cp_fc: u64,
    pub total: u64,
    pub mac_count: u64,
}

/// `max(1, round(rate·w))`, halves rounded away from zero.
pub fn scaled_width(width: usize, rate: f64) -> usize {
    ((rate * width as f64).round() as usize).max(1)
}

/// Scales every learnable layer except the last FC layer by `rate`.
pub fn make_student_arch(teacher: &ModelArch, rate: f64) -> Result<CompressionPlan> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::param(format!("compression rate {rate} outside (0, 1]")));
    }
    let mut widths = teacher.widths();
    let last = widths.len() - 1;
    for w in &mut widths[..last] {
        *w = scaled_width(*w, rate);
    }
    Ok(CompressionPlan {
        rate,
        teacher_arch: teacher.clone(),
        student_arch: teacher.with_widths(&widths)?,
    })
}

pub fn complexity(arch: &ModelArch) -> ComplexityReport {
    let (mut cp_conv, mut cp_fc, mut macs) = (0u64, 0u64, 0u64);
    for layer in arch.layers() {
        match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                output_extent,
                ..
            } => {
                let term = (in_channels * out_channels * kernel * kernel) as u64;
                cp_conv += term;
                macs += term * (output_extent * output_extent) as u64;
            }
            LayerSpec::FullyConnected {
                in_neurons,
                out_neurons,
            } => {
                let term = (in_neurons * out_neurons) as u64;
                cp_fc += term;
                macs += term;
            }
            _ => {}
        }
    }
    ComplexityReport {
        cp_conv,
        cp_fc,
        total: cp_conv + cp_fc,
        mac_count: macs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchFamily, Block};
    use proptest::prelude::*;

    #[test]
    fn mnist_plans() {
        let t = ModelArch::mnist_teacher();
        let half = make_student_arch(&t, 0.5).unwrap().student_arch;
        assert_eq!(half.widths(), [10, 25, 250, 10]);
        assert_eq!(half.to_string(), "mnist:10-25-250-10:k5");
        let tenth = make_student_arch(&t, 0.1).unwrap().student_arch;
        assert_eq!(tenth.widths(), [2, 5, 50, 10]);
        assert_eq!(make_student_arch(&t, 1.0).unwrap().student_arch, t);
        assert!(make_student_arch(&t, 0.0).is_err());
        assert!(make_student_arch(&t, 1.5).is_err());
        assert!(make_student_arch(&t, f64::NAN).is_err());
    }

    #[test]
    fn preset_complexity() {
        let m = complexity(&ModelArch::mnist_teacher());
        assert_eq!((m.cp_conv, m.cp_fc, m.total), (25_500, 405_000, 430_500));
        // conv1 24×24 output, conv2 8×8
        assert_eq!(m.mac_count, 500 * 576 + 25_000 * 64 + 405_000);
        let c = complexity(&ModelArch::cifar10_teacher());
        assert_eq!((c.cp_conv, c.cp_fc), (3 * 32 * 25 + 32 * 32 * 25 + 32 * 64 * 25, 640));
    }

    #[test]
    fn single_fc_layer() {
        let a = ModelArch::from_blocks(3, 1, &[Block::Fc { out_neurons: 2 }]).unwrap();
        let r = complexity(&a);
        assert_eq!((r.cp_conv, r.cp_fc, r.total), (0, 6, 6));
    }

    fn presets() -> impl Strategy<Value = ModelArch> {
        prop_oneof![
            Just(ModelArch::mnist_teacher()),
            Just(ModelArch::cifar10_teacher()),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn total_is_monotone_in_rate(t in presets(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = complexity(&make_student_arch(&t, lo).unwrap().student_arch);
            let big = complexity(&make_student_arch(&t, hi).unwrap().student_arch);
            prop_assert!(small.total <= big.total);
            prop_assert!(small.total > 0);
        }

        #[test]
        fn fc_inputs_follow_the_conv_stack(t in presets(), rate in 0.01f64..=1.0) {
            let s = make_student_arch(&t, rate).unwrap().student_arch;
            prop_assert_eq!(s.class_count(), t.class_count());
            prop_assert_eq!(s.family(), t.family());
            let mut flat = 0;
            for l in s.layers() {
                match *l {
                    LayerSpec::Conv { out_channels, output_extent, .. } => {
                        flat = out_channels * output_extent * output_extent;
                    }
                    LayerSpec::MaxPool { channels, output_extent, .. } => {
                        flat = channels * output_extent * output_extent;
                    }
                    LayerSpec::FullyConnected { in_neurons, out_neurons } => {
                        prop_assert_eq!(in_neurons, flat);
                        flat = out_neurons;
                    }
                    LayerSpec::Relu => {}
                }
            }
            let reparsed: ModelArch = s.to_string().parse().unwrap();
            prop_assert_eq!(reparsed, s.clone());
            prop_assert!(matches!(s.family(), ArchFamily::Mnist | ArchFamily::Cifar10));
        }
    }
}
