//! Deterministic stand-in data in the real datasets' shapes and file formats,
//! for smoke tests and examples when the real files are not at hand.
//!
//! Each class is a fixed arrangement of Gaussian blobs (per channel); a sample
//! is its class prototype shifted by up to one pixel, plus pixel noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::mix_seed;
use super::{cifar, mnist, Dataset, Source, Split, CLASS_COUNT};
use crate::error::Result;
use crate::scalar::Scalar;

const BLOBS_PER_CLASS: usize = 4;

fn prototypes(source: Source, seed: u64) -> Vec<Vec<f64>> {
    let [c, h, w] = source.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xb10b));
    (0..CLASS_COUNT)
        .map(|_| {
            let mut img = vec![0.0; c * h * w];
            for _ in 0..BLOBS_PER_CLASS {
                let cy = rng.gen_range(4.0..(h as f64 - 4.0));
                let cx = rng.gen_range(4.0..(w as f64 - 4.0));
                let sigma = rng.gen_range(1.5..3.5);
                let amp: Vec<f64> = (0..c).map(|_| rng.gen_range(0.4..1.0)).collect();
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ch * h + y) * w + x] += amp[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Raw `(pixels, labels)` for `n` samples with balanced, shuffled labels.
pub fn generate(source: Source, n: usize, seed: u64, split: Split, noise: f64) -> (Vec<u8>, Vec<u8>) {
    let protos = prototypes(source, seed);
    let [c, h, w] = source.image_shape();
    let salt = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt));
    let mut labels: Vec<u8> = (0..n).map(|i| (i % CLASS_COUNT) as u8).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * c * h * w);
    for &label in &labels {
        let proto = &protos[label as usize];
        let dy: isize = rng.gen_range(-1..=1);
        let dx: isize = rng.gen_range(-1..=1);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                    let v = proto[(ch * h + sy) * w + sx] + noise * rng.gen_range(-1.0..1.0);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    (pixels, labels)
}

/// In-memory `(train, test)` datasets.
pub fn datasets<T: Scalar>(
    source: Source,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let (tp, tl) = generate(source, train, seed, Split::Train, 0.25);
    let (vp, vl) = generate(source, test, seed, Split::Test, 0.25);
    Ok((
        Dataset::from_bytes(&tp, tl, Split::Train, source)?,
        Dataset::from_bytes(&vp, vl, Split::Test, source)?,
    ))
}

/// Writes a fixture directory in the real on-disk format. For CIFAR-10 the
/// train count must be a multiple of five; load it with
/// [`cifar::load_cifar10_with`]`(dir, None)`.
pub fn write_fixture(
    dir: impl AsRef<Path>,
    source: Source,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<()> {
    let (tp, tl) = generate(source, train, seed, Split::Train, 0.25);
    let (vp, vl) = generate(source, test, seed, Split::Test, 0.25);
    match source {
        Source::Mnist => mnist::write_mnist_dir(dir, (&tp, &tl), (&vp, &vl)),
        Source::Cifar10 => {
            let records = |p: &[u8], l: &[u8]| -> Vec<Vec<u8>> {
                l.iter()
                    .zip(p.chunks(cifar::RECORD_LEN - 1))
                    .map(|(&label, px)| std::iter::once(label).chain(px.iter().copied()).collect())
                    .collect()
            };
            cifar::write_cifar_dir(dir, &records(&tp, &tl), &records(&vp, &vl))
        }
    }
}
