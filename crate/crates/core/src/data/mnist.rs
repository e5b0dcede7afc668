//! MNIST in IDX format.
//!
//! Expects `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//! `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte` in one directory,
//! optionally gzip-compressed with a `.gz` suffix.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{Dataset, Source, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const SIDE: usize = 28;

fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Returns `(count, pixels)` from an IDX3 image file.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(path, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(Error::format(path, format!("expected 28×28 images, header says {rows}×{cols}")));
    }
    let body = &bytes[16..];
    let want = count * rows * cols;
    if body.len() != want {
        return Err(Error::format(
            path,
            format!("{count} images need {want} pixel bytes, file has {}", body.len()),
        ));
    }
    Ok((count, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(path, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(
            path,
            format!("{count} labels declared, file has {}", body.len()),
        ));
    }
    if let Some(bad) = body.iter().find(|&&l| l > 9) {
        return Err(Error::format(path, format!("label {bad} outside 0..=9")));
    }
    Ok(body.to_vec())
}

fn load_split<T: Scalar>(dir: &Path, prefix: &str, split: Split) -> Result<Dataset<T>> {
    let img_path = locate(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lbl_path = locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (count, pixels) = parse_images(&read_maybe_gz(&img_path)?, &img_path)?;
    let labels = parse_labels(&read_maybe_gz(&lbl_path)?, &lbl_path)?;
    if labels.len() != count {
        return Err(Error::format(
            &lbl_path,
            format!("{} labels for {count} images in {}", labels.len(), img_path.display()),
        ));
    }
    Dataset::from_bytes(&pixels, labels, split, Source::Mnist)
}

/// Loads `(train, test)`.
pub fn load_mnist<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<T>, Dataset<T>)> {
    let dir = dir.as_ref();
    Ok((
        load_split(dir, "train", Split::Train)?,
        load_split(dir, "t10k", Split::Test)?,
    ))
}

pub fn encode_images(pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (SIDE * SIDE);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, SIDE as u32, SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes the four IDX files for `(train, test)` raw splits into `dir`.
pub fn write_mnist_dir(
    dir: impl AsRef<Path>,
    train: (&[u8], &[u8]),
    test: (&[u8], &[u8]),
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (prefix, (pixels, labels)) in [("train", train), ("t10k", test)] {
        let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
        fs::write(&ip, encode_images(pixels)).map_err(|e| Error::io(&ip, e))?;
        let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        fs::write(&lp, encode_labels(labels)).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn fixture(n: usize) -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..n * 784).map(|i| (i * 7 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        (pixels, labels)
    }

    #[test]
    fn loads_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let (tp, tl) = fixture(12);
        let (vp, vl) = fixture(5);
        write_mnist_dir(dir.path(), (&tp, &tl), (&vp, &vl)).unwrap();
        let (train, test) = load_mnist::<f64>(dir.path()).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 5);
        assert_eq!(train.labels(), &tl[..]);
        let px = train.images().data();
        assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(px.contains(&1.0));
        assert_eq!(px[1], 7.0 / 255.0);
    }

    #[test]
    fn reads_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let (tp, tl) = fixture(3);
        write_mnist_dir(dir.path(), (&tp, &tl), (&tp, &tl)).unwrap();
        let p = dir.path().join("train-images-idx3-ubyte");
        let raw = fs::read(&p).unwrap();
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&raw).unwrap();
        fs::write(dir.path().join("train-images-idx3-ubyte.gz"), enc.finish().unwrap()).unwrap();
        fs::remove_file(&p).unwrap();
        let (train, _) = load_mnist::<f32>(dir.path()).unwrap();
        assert_eq!(train.len(), 3);
    }

    #[test]
    fn format_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (tp, tl) = fixture(4);
        write_mnist_dir(dir.path(), (&tp, &tl), (&tp, &tl)).unwrap();
        let p = dir.path().join("t10k-images-idx3-ubyte");
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] = 0x01;
        fs::write(&p, &bytes).unwrap();
        match load_mnist::<f64>(dir.path()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, p),
            other => panic!("expected format error, got {other:?}"),
        }

        bytes[3] = 0x03;
        bytes.truncate(bytes.len() - 1);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_mnist::<f64>(dir.path()), Err(Error::Format { .. })));

        // label count disagrees with image count
        write_mnist_dir(dir.path(), (&tp, &tl), (&tp, &tl[..3])).unwrap();
        assert!(matches!(load_mnist::<f64>(dir.path()), Err(Error::Format { .. })));
    }
}
