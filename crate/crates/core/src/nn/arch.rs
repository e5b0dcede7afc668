//! Layer descriptors and the two reference architectures.
//!
//! Canonical arch strings:
//!
//! * `mnist:20-50-500-10:k5` and `cifar10:32-32-64-10:k5` for the presets
//!   (the numbers are the output widths of the learnable layers),
//! * `custom:<C>x<E>:<block>,<block>,...` for anything else, where a block is
//!   `conv<C_o>k<k>s<stride>`, `pool`, `relu` or `fc<N_o>`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One layer with every extent resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        /// Side of the square kernel; the kernel area `K_s` is `kernel²`.
        kernel: usize,
        stride: usize,
        input_extent: usize,
        output_extent: usize,
    },
    MaxPool {
        channels: usize,
        input_extent: usize,
        output_extent: usize,
    },
    Relu,
    /// Flattens its input.
    FullyConnected { in_neurons: usize, out_neurons: usize },
}

impl LayerSpec {
    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }

    /// Shapes of (weights, bias) for learnable layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerSpec::FullyConnected {
                in_neurons,
                out_neurons,
            } => Some((vec![out_neurons, in_neurons], vec![out_neurons])),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used by Xavier initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            LayerSpec::FullyConnected {
                in_neurons,
                out_neurons,
            } => Some((in_neurons, out_neurons)),
            _ => None,
        }
    }
}

/// Shape-free layer description used to build and rescale architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Pool,
    Relu,
    Fc { out_neurons: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchFamily {
    Mnist,
    Cifar10,
    Custom,
}

impl ArchFamily {
    fn tag(self) -> &'static str {
        match self {
            ArchFamily::Mnist => "mnist",
            ArchFamily::Cifar10 => "cifar10",
            ArchFamily::Custom => "custom",
        }
    }

    fn input(self) -> Option<(usize, usize)> {
        match self {
            ArchFamily::Mnist => Some((1, 28)),
            ArchFamily::Cifar10 => Some((3, 32)),
            ArchFamily::Custom => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelArch {
    family: ArchFamily,
    input_channels: usize,
    input_extent: usize,
    layers: Vec<LayerSpec>,
    class_count: usize,
}

impl ModelArch {
    /// LeNet-style 20-50-500-10 with 5×5 kernels.
    pub fn mnist_teacher() -> Self {
        Self::preset(ArchFamily::Mnist, &[20, 50, 500, 10], 5).expect("valid preset")
    }

    /// 32-32-64-10 with 5×5 kernels and pooling after the first two convs.
    pub fn cifar10_teacher() -> Self {
        Self::preset(ArchFamily::Cifar10, &[32, 32, 64, 10], 5).expect("valid preset")
    }

    /// Builds a preset family from its learnable-layer widths.
    pub fn preset(family: ArchFamily, widths: &[usize], kernel: usize) -> Result<Self> {
        let conv = |c| Block::Conv {
            out_channels: c,
            kernel,
            stride: 1,
        };
        let blocks = match (family, widths) {
            (ArchFamily::Mnist, &[c1, c2, hidden, classes]) => vec![
                conv(c1),
                Block::Pool,
                Block::Relu,
                conv(c2),
                Block::Pool,
                Block::Relu,
                Block::Fc { out_neurons: hidden },
                Block::Relu,
                Block::Fc {
                    out_neurons: classes,
                },
            ],
            (ArchFamily::Cifar10, &[c1, c2, c3, classes]) => vec![
                conv(c1),
                Block::Pool,
                Block::Relu,
                conv(c2),
                Block::Pool,
                Block::Relu,
                conv(c3),
                Block::Relu,
                Block::Fc {
                    out_neurons: classes,
                },
            ],
            (ArchFamily::Custom, _) => {
                return Err(Error::param("custom architectures are built from blocks"))
            }
            _ => {
                return Err(Error::param(format!(
                    "{} preset expects 4 widths, got {widths:?}",
                    family.tag()
                )))
            }
        };
        let (c, e) = family.input().expect("preset input");
        Self::build(family, c, e, &blocks)
    }

    /// Builds an arbitrary architecture by propagating extents through `blocks`.
    pub fn from_blocks(input_channels: usize, input_extent: usize, blocks: &[Block]) -> Result<Self> {
        Self::build(ArchFamily::Custom, input_channels, input_extent, blocks)
    }

    fn build(
        family: ArchFamily,
        input_channels: usize,
        input_extent: usize,
        blocks: &[Block],
    ) -> Result<Self> {
        if input_channels == 0 || input_extent == 0 {
            return Err(Error::param("input channels and extent must be positive"));
        }
        // (channels, extent) of a spatial map, or the width of a flat vector
        enum Shape {
            Map(usize, usize),
            Flat(usize),
        }
        let mut shape = Shape::Map(input_channels, input_extent);
        let mut layers = Vec::with_capacity(blocks.len());
        for (i, block) in blocks.iter().enumerate() {
            let layer = match (*block, &shape) {
                (
                    Block::Conv {
                        out_channels,
                        kernel,
                        stride,
                    },
                    &Shape::Map(c, e),
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::param(format!("layer {i}: counts must be ≥ 1")));
                    }
                    if kernel > e {
                        return Err(Error::param(format!(
                            "layer {i}: kernel {kernel} exceeds map extent {e}"
                        )));
                    }
                    let out = (e - kernel) / stride + 1;
                    shape = Shape::Map(out_channels, out);
                    LayerSpec::Conv {
                        in_channels: c,
                        out_channels,
                        kernel,
                        stride,
                        input_extent: e,
                        output_extent: out,
                    }
                }
                (Block::Conv { .. }, Shape::Flat(_)) => {
                    return Err(Error::param(format!("layer {i}: conv after a flattening layer")))
                }
                (Block::Pool, &Shape::Map(c, e)) => {
                    if e % 2 != 0 {
                        return Err(Error::param(format!(
                            "layer {i}: 2×2 pooling needs an even extent, got {e}"
                        )));
                    }
                    shape = Shape::Map(c, e / 2);
                    LayerSpec::MaxPool {
                        channels: c,
                        input_extent: e,
                        output_extent: e / 2,
                    }
                }
                (Block::Pool, Shape::Flat(_)) => {
                    return Err(Error::param(format!("layer {i}: pooling a flat vector")))
                }
                (Block::Relu, _) => LayerSpec::Relu,
                (Block::Fc { out_neurons }, s) => {
                    if out_neurons == 0 {
                        return Err(Error::param(format!("layer {i}: counts must be ≥ 1")));
                    }
                    let in_neurons = match *s {
                        Shape::Map(c, e) => c * e * e,
                        Shape::Flat(n) => n,
                    };
                    shape = Shape::Flat(out_neurons);
                    LayerSpec::FullyConnected {
                        in_neurons,
                        out_neurons,
                    }
                }
            };
            layers.push(layer);
        }
        let class_count = match layers.iter().rev().find(|l| l.is_learnable()) {
            Some(&LayerSpec::FullyConnected { out_neurons, .. }) => out_neurons,
            _ => {
                return Err(Error::param(
                    "the last learnable layer must be fully connected",
                ))
            }
        };
        if !matches!(shape, Shape::Flat(_)) {
            return Err(Error::param("architecture must end in a flat logit vector"));
        }
        Ok(Self {
            family,
            input_channels,
            input_extent,
            layers,
            class_count,
        })
    }

    pub fn family(&self) -> ArchFamily {
        self.family
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-sample input shape `[C, E, E]`.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_extent, self.input_extent]
    }

    /// The kernel side shared by every conv layer (presets only use one).
    pub fn kernel(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::Conv { kernel, .. } => Some(*kernel),
            _ => None,
        })
    }

    /// Output widths of the learnable layers, e.g. `[20, 50, 500, 10]`.
    pub fn widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Conv { out_channels, .. } => Some(out_channels),
                LayerSpec::FullyConnected { out_neurons, .. } => Some(out_neurons),
                _ => None,
            })
            .collect()
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => Block::Conv {
                    out_channels,
                    kernel,
                    stride,
                },
                LayerSpec::MaxPool { .. } => Block::Pool,
                LayerSpec::Relu => Block::Relu,
                LayerSpec::FullyConnected { out_neurons, .. } => Block::Fc { out_neurons },
            })
            .collect()
    }

    /// Same layer sequence with learnable-layer widths replaced in order.
    pub fn with_widths(&self, widths: &[usize]) -> Result<Self> {
        let mut it = widths.iter().copied();
        let blocks: Vec<Block> = self
            .blocks()
            .into_iter()
            .map(|b| match b {
                Block::Conv { kernel, stride, .. } => Block::Conv {
                    out_channels: it.next().unwrap_or(0),
                    kernel,
                    stride,
                },
                Block::Fc { .. } => Block::Fc {
                    out_neurons: it.next().unwrap_or(0),
                },
                other => other,
            })
            .collect();
        if it.next().is_some() || widths.len() != self.widths().len() {
            return Err(Error::param(format!(
                "expected {} widths, got {}",
                self.widths().len(),
                widths.len()
            )));
        }
        Self::build(self.family, self.input_channels, self.input_extent, &blocks)
    }

    /// Number of scalar parameters (weights and biases).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(LayerSpec::param_shapes)
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for ModelArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            ArchFamily::Mnist | ArchFamily::Cifar10 => {
                let widths: Vec<String> = self.widths().iter().map(usize::to_string).collect();
                write!(
                    f,
                    "{}:{}:k{}",
                    self.family.tag(),
                    widths.join("-"),
                    self.kernel().unwrap_or(0)
                )
            }
            ArchFamily::Custom => {
                let blocks: Vec<String> = self
                    .blocks()
                    .iter()
                    .map(|b| match *b {
                        Block::Conv {
                            out_channels,
                            kernel,
                            stride,
                        } => format!("conv{out_channels}k{kernel}s{stride}"),
                        Block::Pool => "pool".to_string(),
                        Block::Relu => "relu".to_string(),
                        Block::Fc { out_neurons } => format!("fc{out_neurons}"),
                    })
                    .collect();
                write!(
                    f,
                    "custom:{}x{}:{}",
                    self.input_channels,
                    self.input_extent,
                    blocks.join(",")
                )
            }
        }
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::param(format!("bad {what} {s:?} in arch string")))
}

fn parse_block(s: &str) -> Result<Block> {
    match s {
        "pool" => Ok(Block::Pool),
        "relu" => Ok(Block::Relu),
        _ if s.starts_with("fc") => Ok(Block::Fc {
            out_neurons: parse_usize(&s[2..], "width")?,
        }),
        _ if s.starts_with("conv") => {
            let rest = &s[4..];
            let (c, rest) = rest
                .split_once('k')
                .ok_or_else(|| Error::param(format!("bad conv block {s:?}")))?;
            let (k, st) = rest
                .split_once('s')
                .ok_or_else(|| Error::param(format!("bad conv block {s:?}")))?;
            Ok(Block::Conv {
                out_channels: parse_usize(c, "channels")?,
                kernel: parse_usize(k, "kernel")?,
                stride: parse_usize(st, "stride")?,
            })
        }
        _ => Err(Error::param(format!("unknown block {s:?}"))),
    }
}

impl FromStr for ModelArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.splitn(3, ':');
        let (Some(tag), Some(mid), Some(tail)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::param(format!("malformed arch string {s:?}")));
        };
        match tag {
            "mnist" | "cifar10" => {
                let family = if tag == "mnist" {
                    ArchFamily::Mnist
                } else {
                    ArchFamily::Cifar10
                };
                let widths = mid
                    .split('-')
                    .map(|w| parse_usize(w, "width"))
                    .collect::<Result<Vec<_>>>()?;
                let kernel = tail
                    .strip_prefix('k')
                    .ok_or_else(|| Error::param(format!("missing kernel in {s:?}")))?;
                Self::preset(family, &widths, parse_usize(kernel, "kernel")?)
            }
            "custom" => {
                let (c, e) = mid
                    .split_once('x')
                    .ok_or_else(|| Error::param(format!("bad input shape in {s:?}")))?;
                let blocks = tail
                    .split(',')
                    .map(parse_block)
                    .collect::<Result<Vec<_>>>()?;
                Self::from_blocks(parse_usize(c, "channels")?, parse_usize(e, "extent")?, &blocks)
            }
            _ => Err(Error::param(format!("unknown arch family {tag:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_preset_expands_as_documented() {
        let arch = ModelArch::mnist_teacher();
        let l = arch.layers();
        assert_eq!(l.len(), 9);
        assert!(matches!(
            l[0],
            LayerSpec::Conv { in_channels: 1, out_channels: 20, kernel: 5, input_extent: 28, output_extent: 24, .. }
        ));
        assert!(matches!(l[1], LayerSpec::MaxPool { output_extent: 12, .. }));
        assert!(matches!(
            l[3],
            LayerSpec::Conv { in_channels: 20, out_channels: 50, output_extent: 8, .. }
        ));
        assert_eq!(
            l[6],
            LayerSpec::FullyConnected { in_neurons: 50 * 4 * 4, out_neurons: 500 }
        );
        assert_eq!(l[8], LayerSpec::FullyConnected { in_neurons: 500, out_neurons: 10 });
        assert_eq!(arch.class_count(), 10);
        assert_eq!(arch.to_string(), "mnist:20-50-500-10:k5");
    }

    #[test]
    fn cifar_preset_expands_as_documented() {
        let arch = ModelArch::cifar10_teacher();
        let l = arch.layers();
        assert!(matches!(l[6], LayerSpec::Conv { in_channels: 32, out_channels: 64, input_extent: 5, output_extent: 1, .. }));
        assert_eq!(l[8], LayerSpec::FullyConnected { in_neurons: 64, out_neurons: 10 });
        assert_eq!(arch.to_string(), "cifar10:32-32-64-10:k5");
    }

    #[test]
    fn arch_strings_round_trip() {
        for s in [
            "mnist:20-50-500-10:k5",
            "mnist:2-5-50-10:k5",
            "cifar10:3-3-6-10:k5",
            "custom:1x8:conv2k3s1,pool,relu,fc4",
        ] {
            let arch: ModelArch = s.parse().unwrap();
            assert_eq!(arch.to_string(), s);
        }
        assert!("mnist:20-50-10:k5".parse::<ModelArch>().is_err());
        assert!("resnet:1-2:k3".parse::<ModelArch>().is_err());
        assert!("custom:1x7:conv2k3s1,pool,fc4".parse::<ModelArch>().is_err());
    }

    #[test]
    fn rejects_non_fc_head() {
        let blocks = [Block::Conv { out_channels: 2, kernel: 3, stride: 1 }];
        assert!(ModelArch::from_blocks(1, 8, &blocks).is_err());
    }

    #[test]
    fn parameter_count_of_mnist_teacher() {
        let want = 20 * 25 + 20 + 50 * 20 * 25 + 50 + 800 * 500 + 500 + 500 * 10 + 10;
        assert_eq!(ModelArch::mnist_teacher().parameter_count(), want);
    }
}
