//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (1024 red, then green, then blue, each row-major 32×32).
//!
//! Train data is `data_batch_1.bin` … `data_batch_5.bin`, test data is
//! `test_batch.bin`, either directly in the directory or in the
//! `cifar-10-batches-bin/` subdirectory of the official archive.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Source, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const RECORDS_PER_FILE: usize = 10_000;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.join(TEST_FILE).is_file() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Splits one batch file into `(pixels, labels)`. With `records = Some(n)`
/// the file must hold exactly `n` records.
pub fn parse_batch(bytes: &[u8], path: &Path, records: Option<usize>) -> Result<(Vec<u8>, Vec<u8>)> {
    let ok = match records {
        Some(n) => bytes.len() == n * RECORD_LEN,
        None => !bytes.is_empty() && bytes.len() % RECORD_LEN == 0,
    };
    if !ok {
        return Err(Error::format(
            path,
            format!(
                "file is {} bytes; expected {} records of {RECORD_LEN} bytes",
                bytes.len(),
                records.map_or("a whole number of".to_string(), |n| n.to_string())
            ),
        ));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * (RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD_LEN) {
        if rec[0] > 9 {
            return Err(Error::format(path, format!("label {} outside 0..=9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Inverse of [`parse_batch`] for one record, from normalized pixels.
pub fn encode_record<T: Scalar>(dataset: &Dataset<T>, i: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_LEN);
    out.push(dataset.labels()[i]);
    out.extend(
        dataset
            .images()
            .row(i)
            .iter()
            .map(|v| (v.as_f64() * 255.0).round() as u8),
    );
    out
}

fn load_files<T: Scalar>(
    dir: &Path,
    names: &[&str],
    split: Split,
    records: Option<usize>,
) -> Result<Dataset<T>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = parse_batch(&bytes, &path, records)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::from_bytes(&pixels, labels, split, Source::Cifar10)
}

/// Loads `(train, test)` from the standard 10000-record batch files.
pub fn load_cifar10<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<T>, Dataset<T>)> {
    load_cifar10_with(dir, Some(RECORDS_PER_FILE))
}

/// Like [`load_cifar10`] with a configurable (or unchecked) record count per
/// file, for reduced fixtures.
pub fn load_cifar10_with<T: Scalar>(
    dir: impl AsRef<Path>,
    records_per_file: Option<usize>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let dir = batch_dir(dir.as_ref());
    Ok((
        load_files(&dir, &TRAIN_FILES, Split::Train, records_per_file)?,
        load_files(&dir, &[TEST_FILE], Split::Test, records_per_file)?,
    ))
}

/// Writes raw records as `data_batch_1..5.bin` (train split evenly) and
/// `test_batch.bin`.
pub fn write_cifar_dir(dir: impl AsRef<Path>, train: &[Vec<u8>], test: &[Vec<u8>]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if train.len() % TRAIN_FILES.len() != 0 {
        return Err(Error::param("train records must split evenly over five files"));
    }
    let per = train.len() / TRAIN_FILES.len();
    for (k, name) in TRAIN_FILES.iter().enumerate() {
        let path = dir.join(name);
        fs::write(&path, train[k * per..(k + 1) * per].concat()).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(TEST_FILE);
    fs::write(&path, test.concat()).map_err(|e| Error::io(&path, e))
}
