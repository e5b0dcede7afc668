//! Model file format (little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `TSKD` |
//! | 4 | format version, u32 = 1 |
//! | 4 + L | arch string: u32 byte length, then UTF-8 |
//! | 8 | parameter count, u64 |
//! | 8·count | parameters as f64, layer order, weights before bias, row-major |

use std::fs;
use std::path::Path;

use super::arch::ModelArch;
use super::model::Model;
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 4] = b"TSKD";
pub const MODEL_VERSION: u32 = 1;

impl<T: Scalar> Model<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.arch().to_string();
        let params = self.flat_params();
        let mut out = Vec::with_capacity(20 + arch.len() + 8 * params.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(arch.as_bytes());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.as_f64().to_le_bytes());
        }
        out
    }

    /// Parses a serialized model; `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::format(origin, "bad magic, not a model file"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::format(origin, format!("unsupported model version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(origin, "arch descriptor is not UTF-8"))?;
        let arch: ModelArch = text
            .parse()
            .map_err(|e| Error::format(origin, format!("bad arch descriptor {text:?}: {e}")))?;
        let count = r.u64()? as usize;
        if count != arch.parameter_count() {
            return Err(Error::format(
                origin,
                format!("{arch} has {} parameters, file declares {count}", arch.parameter_count()),
            ));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(T::lit(r.f64()?));
        }
        r.finish()?;
        Model::from_flat(arch, &values, None).map_err(|e| Error::format(origin, e.to_string()))
    }

    /// 64-bit FNV-1a hash of the serialized model, i.e. of its file bytes.
    pub fn fingerprint(&self) -> u64 {
        crate::io_util::fnv1a64(&self.to_bytes())
    }
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model.to_bytes())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes, path)
}

/// Fingerprint of a model file on disk, as recorded in soft-target caches.
pub fn file_fingerprint(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::io_util::fnv1a64(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f64>::init(ModelArch::mnist_teacher(), 3);
        let p1 = dir.path().join("a.tskd");
        let p2 = dir.path().join("b.tskd");
        save_model(&m, &p1).unwrap();
        let loaded: Model<f64> = load_model(&p1).unwrap();
        assert_eq!(loaded.params(), m.params());
        save_model(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn file_size_is_header_plus_parameters() {
        let m = Model::<f64>::init(ModelArch::mnist_teacher(), 0);
        let arch = "mnist:20-50-500-10:k5";
        // 431080 = 520 + 25050 + 400500 + 5010 parameters
        assert_eq!(m.parameter_count(), 431_080);
        assert_eq!(m.to_bytes().len(), 4 + 4 + 4 + arch.len() + 8 + 8 * 431_080);
    }

    #[test]
    fn corrupt_or_truncated_files_are_rejected() {
        let m = Model::<f64>::init(ModelArch::cifar10_teacher(), 0);
        let bytes = m.to_bytes();
        let origin = Path::new("mem");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::<f64>::from_bytes(&bad, origin), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Model::<f64>::from_bytes(&bad, origin), Err(Error::Format { .. })));

        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(Model::<f64>::from_bytes(short, origin), Err(Error::Format { .. })));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Model::<f64>::from_bytes(&long, origin), Err(Error::Format { .. })));
    }

    #[test]
    fn f32_models_round_trip_exactly() {
        let m = Model::<f32>::init(ModelArch::cifar10_teacher(), 8);
        let back = Model::<f32>::from_bytes(&m.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.params(), m.params());
    }
}
