//! Dataset ingestion and the nested task subsets `D(θ₂) ⊆ D(θ₃) ⊆ … ⊆ D`.

mod batch;
pub mod cifar;
pub mod mnist;
pub mod synthetic;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

pub use batch::batches;
pub(crate) use batch::mix_seed;
pub use cifar::{load_cifar10, load_cifar10_with};
pub use mnist::load_mnist;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Mnist,
    Cifar10,
}

impl Source {
    /// Per-sample `[C, H, W]`.
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            Source::Mnist => [1, 28, 28],
            Source::Cifar10 => [3, 32, 32],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Mnist => "mnist",
            Source::Cifar10 => "cifar10",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Source::Mnist),
            "cifar10" => Ok(Source::Cifar10),
            _ => Err(Error::param(format!("unknown dataset {s:?} (expected mnist or cifar10)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images normalized to `[0, 1]` with class ids in `0..10`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<u8>,
    split: Split,
    source: Source,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<u8>, split: Split, source: Source) -> Result<Self> {
        if images.rank() != 4 || images.shape()[1..] != source.image_shape() {
            return Err(Error::dim(format!(
                "{source} images must be N×{:?}, got {:?}",
                source.image_shape(),
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::param(format!("label {bad} outside 0..{CLASS_COUNT}")));
        }
        Ok(Self {
            images,
            labels,
            split,
            source,
        })
    }

    /// Builds a dataset from raw bytes, dividing pixels by 255.
    pub fn from_bytes(
        pixels: &[u8],
        labels: Vec<u8>,
        split: Split,
        source: Source,
    ) -> Result<Self> {
        let [c, h, w] = source.image_shape();
        let images = Tensor::new(
            vec![labels.len(), c, h, w],
            pixels.iter().map(|&p| T::lit(p as f64 / 255.0)).collect(),
        )?;
        Self::new(images, labels, split, source)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn source(&self) -> Source {
        self.source
    }

    /// Stacks the selected images into an `n×C×H×W` batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let [c, h, w] = self.source.image_shape();
        let mut batch = Tensor::zeros(&[indices.len(), c, h, w]);
        for (dst, &src) in indices.iter().enumerate() {
            batch.row_mut(dst).copy_from_slice(self.images.row(src));
        }
        batch
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    pub fn class_histogram(&self) -> [usize; CLASS_COUNT] {
        let mut h = [0; CLASS_COUNT];
        self.labels.iter().for_each(|&l| h[l as usize] += 1);
        h
    }

    /// Ascending indices of samples whose label is in `classes`.
    pub fn indices_in(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.label(i)))
            .collect()
    }
}

/// The samples of a base dataset whose label lies in `θ = {0, …, m−1}`.
#[derive(Clone, Debug)]
pub struct TransferSet<'a, T> {
    base: &'a Dataset<T>,
    classes: Vec<usize>,
    indices: Vec<usize>,
}

impl<'a, T: Scalar> TransferSet<'a, T> {
    pub fn base(&self) -> &'a Dataset<T> {
        self.base
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn subset_size(&self) -> usize {
        self.classes.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Loads the `(train, test)` splits of `source` from its standard files in `dir`.
pub fn load<T: Scalar>(source: Source, dir: impl AsRef<std::path::Path>) -> Result<(Dataset<T>, Dataset<T>)> {
    match source {
        Source::Mnist => load_mnist(dir),
        Source::Cifar10 => load_cifar10(dir),
    }
}

/// `D(θ_m)`: samples labelled `0..m`, in ascending original order.
pub fn make_transfer_set<T: Scalar>(base: &Dataset<T>, m: usize) -> Result<TransferSet<'_, T>> {
    let classes = task_classes(m)?;
    let indices = base.indices_in(&classes);
    Ok(TransferSet {
        base,
        classes,
        indices,
    })
}

/// `θ_m = {0, …, m−1}` for `2 ≤ m ≤ 10`.
pub fn task_classes(m: usize) -> Result<Vec<usize>> {
    if !(2..=CLASS_COUNT).contains(&m) {
        return Err(Error::param(format!("subset size must be in 2..=10, got {m}")));
    }
    Ok((0..m).collect())
}

/// Anything that can be iterated in batches.
pub trait Samples {
    fn sample_indices(&self) -> Cow<'_, [usize]>;
}

impl<T: Scalar> Samples for Dataset<T> {
    fn sample_indices(&self) -> Cow<'_, [usize]> {
        Cow::Owned((0..self.len()).collect())
    }
}

impl<T: Scalar> Samples for TransferSet<'_, T> {
    fn sample_indices(&self) -> Cow<'_, [usize]> {
        Cow::Borrowed(&self.indices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset<f64> {
        let labels = vec![3, 0, 1, 9, 1, 2, 0, 5];
        let pixels = vec![0u8; labels.len() * 784];
        Dataset::from_bytes(&pixels, labels, Split::Train, Source::Mnist).unwrap()
    }

    #[test]
    fn transfer_sets_nest() {
        let d = tiny();
        let two = make_transfer_set(&d, 2).unwrap();
        assert_eq!(two.indices(), &[1, 2, 4, 6]);
        assert_eq!(two.classes(), &[0, 1]);
        let full = make_transfer_set(&d, 10).unwrap();
        assert_eq!(full.indices(), &(0..8).collect::<Vec<_>>()[..]);
        for m in 2..10 {
            let a = make_transfer_set(&d, m).unwrap();
            let b = make_transfer_set(&d, m + 1).unwrap();
            assert!(a.indices().iter().all(|i| b.indices().contains(i)));
        }
        assert!(matches!(make_transfer_set(&d, 1), Err(Error::Parameter(_))));
        assert!(make_transfer_set(&d, 11).is_err());
    }

    #[test]
    fn dataset_validation() {
        let px = vec![0u8; 2 * 784];
        assert!(Dataset::<f64>::from_bytes(&px, vec![0], Split::Train, Source::Mnist).is_err());
        assert!(Dataset::<f64>::from_bytes(&px, vec![0, 10], Split::Train, Source::Mnist).is_err());
        assert!(Dataset::<f64>::from_bytes(&px, vec![0, 1], Split::Train, Source::Cifar10).is_err());
    }

    #[test]
    fn gather_copies_rows() {
        let mut px = vec![0u8; 3 * 784];
        px[784] = 255;
        let d = Dataset::<f64>::from_bytes(&px, vec![0, 1, 2], Split::Test, Source::Mnist).unwrap();
        let b = d.gather(&[1, 0]);
        assert_eq!(b.shape(), &[2, 1, 28, 28]);
        assert_eq!(b.row(0)[0], 1.0);
        assert_eq!(b.row(1)[0], 0.0);
        assert_eq!(d.gather_labels(&[2, 1]), vec![2, 1]);
    }
}
