//! Soft-target capture, the soft-target cache file and the end-to-end
//! teacher → soft targets → student pipeline.
//!
//! Cache file format (little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `TSKC` |
//! | 4 | format version, u32 = 1 |
//! | 8 | τ, f64 |
//! | 4 | class count `C`, u32 |
//! | 8 | entry count, u64 |
//! | 8 | teacher fingerprint, u64 |
//! | entries·(8 + 8·C) | sample index u64, then `C` probabilities as f64 |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::compress::{make_student_arch, CompressionPlan};
use crate::data::{make_transfer_set, Dataset, TransferSet};
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader};
use crate::loss::softmax_tau;
use crate::nn::{file_fingerprint, load_model, Model, ModelArch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{evaluate, train_student, train_teacher, EvalResult, TrainConfig};

pub const CACHE_MAGIC: &[u8; 4] = b"TSKC";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_HEADER_LEN: usize = 4 + 4 + 8 + 4 + 8 + 8;

const CAPTURE_CHUNK: usize = 256;

/// Teacher probabilities `P_T^τ` keyed by dataset sample index.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargetCache<T> {
    tau: f64,
    class_count: usize,
    entries: BTreeMap<usize, Vec<T>>,
    teacher_fingerprint: u64,
}

impl<T: Scalar> SoftTargetCache<T> {
    pub fn new(tau: f64, class_count: usize, teacher_fingerprint: u64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::param(format!("τ must be positive, got {tau}")));
        }
        if class_count == 0 {
            return Err(Error::param("class count must be positive"));
        }
        Ok(Self {
            tau,
            class_count,
            entries: BTreeMap::new(),
            teacher_fingerprint,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn teacher_fingerprint(&self) -> u64 {
        self.teacher_fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.entries.contains_key(&index)
    }

    /// Rejects rows of the wrong width or that are not probability vectors.
    pub fn insert(&mut self, index: usize, row: Vec<T>) -> Result<()> {
        if row.len() != self.class_count {
            return Err(Error::dim(format!(
                "row has {} entries, cache holds {} classes",
                row.len(),
                self.class_count
            )));
        }
        if !is_distribution(&row) {
            return Err(Error::param(format!("row for sample {index} is not a distribution")));
        }
        self.entries.insert(index, row);
        Ok(())
    }

    pub fn get(&self, index: usize) -> Result<&[T]> {
        self.entries
            .get(&index)
            .map(Vec::as_slice)
            .ok_or(Error::CacheMiss(index))
    }

    /// Stacks the rows of `indices` into an `[N, C]` tensor.
    pub fn rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.class_count);
        for &i in indices {
            data.extend_from_slice(self.get(i)?);
        }
        Tensor::new(vec![indices.len(), self.class_count], data)
    }

    /// Entries in ascending index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.entries.iter().map(|(&i, r)| (i, r.as_slice()))
    }

    /// Fails with a stale-cache error unless the cache was captured from the
    /// teacher with this fingerprint.
    pub fn ensure_teacher(&self, fingerprint: u64) -> Result<()> {
        if fingerprint != self.teacher_fingerprint {
            return Err(Error::StaleCache {
                cached: self.teacher_fingerprint,
                actual: fingerprint,
            });
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        CACHE_HEADER_LEN + self.entries.len() * (8 + 8 * self.class_count)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&(self.class_count as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.teacher_fingerprint.to_le_bytes());
        for (&i, row) in &self.entries {
            out.extend_from_slice(&(i as u64).to_le_bytes());
            for &p in row {
                out.extend_from_slice(&p.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::format(origin, "bad magic, not a soft-target cache"));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::format(origin, format!("unsupported cache version {version}")));
        }
        let tau = r.f64()?;
        let class_count = r.u32()? as usize;
        let count = r.u64()?;
        let fingerprint = r.u64()?;
        let mut cache = Self::new(tau, class_count, fingerprint)
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let record = 8 + 8 * class_count as u64;
        if count.checked_mul(record) != Some((bytes.len() - CACHE_HEADER_LEN) as u64) {
            return Err(Error::format(
                origin,
                format!("{count} entries declared, body is {} bytes", bytes.len() - CACHE_HEADER_LEN),
            ));
        }
        let mut prev = None;
        for _ in 0..count {
            let index = r.u64()? as usize;
            if prev.is_some_and(|p| index <= p) {
                return Err(Error::format(origin, "entries out of order or duplicated"));
            }
            prev = Some(index);
            let row = (0..class_count)
                .map(|_| r.f64().map(T::lit))
                .collect::<Result<Vec<_>>>()?;
            cache
                .insert(index, row)
                .map_err(|e| Error::format(origin, e.to_string()))?;
        }
        r.finish()?;
        Ok(cache)
    }
}

fn is_distribution<T: Scalar>(row: &[T]) -> bool {
    let tol = 1e-9f64.max(64.0 * T::epsilon().as_f64() * row.len() as f64);
    let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
    row.iter().all(|&p| p.is_finite() && p >= T::zero()) && (sum - 1.0).abs() <= tol
}

pub fn save_cache<T: Scalar>(cache: &SoftTargetCache<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &cache.to_bytes())
}

pub fn load_cache<T: Scalar>(path: impl AsRef<Path>) -> Result<SoftTargetCache<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SoftTargetCache::from_bytes(&bytes, path)
}

/// Runs the teacher in inference mode over every transfer-set sample.
pub fn capture_soft_targets<T: Scalar>(
    teacher: &Model<T>,
    transfer: &TransferSet<'_, T>,
    tau: f64,
) -> Result<SoftTargetCache<T>> {
    capture_with_fingerprint(teacher, transfer, tau, teacher.fingerprint())
}

fn capture_with_fingerprint<T: Scalar>(
    teacher: &Model<T>,
    transfer: &TransferSet<'_, T>,
    tau: f64,
    fingerprint: u64,
) -> Result<SoftTargetCache<T>> {
    let mut cache = SoftTargetCache::new(tau, teacher.arch().class_count(), fingerprint)?;
    let data = transfer.base();
    for chunk in transfer.indices().chunks(CAPTURE_CHUNK) {
        let logits = teacher.forward(&data.gather(chunk))?;
        let soft = softmax_tau(&logits, tau)?;
        for (row, &i) in soft.probabilities.rows().zip(chunk) {
            cache.insert(i, row.to_vec())?;
        }
    }
    Ok(cache)
}

/// Where the teacher comes from.
pub enum TeacherSource<'a, T> {
    /// A saved model file.
    File(PathBuf),
    /// An already trained model.
    Model(&'a Model<T>),
    /// Train one on the full training set first.
    Train { arch: ModelArch, cfg: TrainConfig },
}

pub struct Distilled<T> {
    pub teacher: Model<T>,
    pub teacher_fingerprint: u64,
    pub plan: CompressionPlan,
    pub student: Model<T>,
    pub eval: EvalResult,
}

/// Student construction, training and masked evaluation for one
/// (rate, subset) cell with soft targets already captured.
pub fn distill_cell<T: Scalar>(
    teacher_arch: &ModelArch,
    transfer: &TransferSet<'_, T>,
    cache: &SoftTargetCache<T>,
    test: &Dataset<T>,
    rate: f64,
    cfg: &TrainConfig,
) -> Result<(CompressionPlan, Model<T>, EvalResult)> {
    let plan = make_student_arch(teacher_arch, rate)?;
    let student = train_student(plan.student_arch.clone(), transfer, cache, cfg)?;
    let eval = evaluate(&student, test, transfer.classes())?;
    Ok((plan, student, eval))
}

/// Teacher, soft targets over the `m`-class transfer set, student at `rate`
/// and its task accuracy on `test`.
pub fn run_distillation<T: Scalar>(
    source: TeacherSource<'_, T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    m: usize,
    rate: f64,
    cfg: &TrainConfig,
) -> Result<Distilled<T>> {
    cfg.validate()?;
    let (teacher, fingerprint) = match source {
        TeacherSource::File(path) => {
            let model = load_model::<T>(&path)?;
            (model, file_fingerprint(&path)?)
        }
        TeacherSource::Model(model) => (model.clone(), model.fingerprint()),
        TeacherSource::Train { arch, cfg } => {
            let model = train_teacher(arch, train, &cfg)?;
            let fp = model.fingerprint();
            (model, fp)
        }
    };
    let transfer = make_transfer_set(train, m)?;
    let cache = capture_with_fingerprint(&teacher, &transfer, cfg.tau, fingerprint)?;
    let (plan, student, eval) = distill_cell(teacher.arch(), &transfer, &cache, test, rate, cfg)?;
    Ok(Distilled {
        teacher,
        teacher_fingerprint: fingerprint,
        plan,
        student,
        eval,
    })
}
