//! The (compression rate × subset size) experiment grid.
//!
//! Output directory layout:
//!
//! * `teacher.tskd`: the shared teacher, reused when present
//! * `cache_m<m>.tskc`: soft targets per subset size, reused when present
//! * `cells.csv`: one line appended per finished cell, read back on resume
//! * `results.csv`: the final table, rewritten in canonical order

mod analysis;
mod results;

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::Instant;

pub use analysis::{
    normalized_curves, rate_at_threshold, report_csv, size_at_threshold, write_report, Curve,
    ThresholdEstimate, ThresholdFlag, REPORT_HEADER,
};
pub use results::{read_results, write_results, CellRecord, GridResult, ERROR_MARKER, RESULTS_HEADER};

use crate::compress::{complexity, make_student_arch, ComplexityReport};
use crate::data::{make_transfer_set, mix_seed, Dataset, Source, TransferSet, CLASS_COUNT};
use crate::distill::{capture_soft_targets, distill_cell, load_cache, save_cache, SoftTargetCache};
use crate::error::{Error, Result};
use crate::nn::{file_fingerprint, load_model, save_model, Model, ModelArch};
use crate::scalar::Scalar;
use crate::train::{train_teacher_with, Progress, TrainConfig};

pub const TEACHER_FILE: &str = "teacher.tskd";
pub const JOURNAL_FILE: &str = "cells.csv";
pub const RESULTS_FILE: &str = "results.csv";

pub fn cache_file(subset_size: usize) -> String {
    format!("cache_m{subset_size}.tskc")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub dataset: Source,
    /// Ascending, in `(0, 1]`, containing 1.0.
    pub rates: Vec<f64>,
    /// Ascending, in `2..=10`; 10 is the full dataset.
    pub subset_sizes: Vec<usize>,
    /// Student training; its seed is the grid seed.
    pub cfg: TrainConfig,
    pub teacher_cfg: TrainConfig,
    pub teacher_arch: ModelArch,
    pub output_dir: PathBuf,
    /// Worker threads.
    pub jobs: usize,
    /// Students trained per cell; the reported accuracy is their mean.
    pub repeats: usize,
}

impl GridSpec {
    /// Rates 0.1..=1.0, subsets 2..=10 and the dataset's default schedule.
    pub fn new(dataset: Source, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset,
            rates: Self::default_rates(),
            subset_sizes: (2..=CLASS_COUNT).collect(),
            cfg: TrainConfig::for_source(dataset),
            teacher_cfg: TrainConfig::for_source(dataset),
            teacher_arch: match dataset {
                Source::Mnist => ModelArch::mnist_teacher(),
                Source::Cifar10 => ModelArch::cifar10_teacher(),
            },
            output_dir: output_dir.into(),
            jobs: 1,
            repeats: 1,
        }
    }

    pub fn default_rates() -> Vec<f64> {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    }

    /// Sets the grid seed and the teacher seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.cfg.seed = seed;
        self.teacher_cfg.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ascending = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.rates.is_empty() || !ascending(&self.rates) {
            return Err(Error::param("rates must be a non-empty ascending list"));
        }
        if self.rates.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::param("rates must lie in (0, 1]"));
        }
        if self.rates.last() != Some(&1.0) {
            return Err(Error::param("rates must include the 1.0 baseline"));
        }
        if self.subset_sizes.is_empty() || !self.subset_sizes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::param("subset sizes must be a non-empty ascending list"));
        }
        if self.subset_sizes.iter().any(|m| !(2..=CLASS_COUNT).contains(m)) {
            return Err(Error::param("subset sizes must lie in 2..=10"));
        }
        if self.jobs == 0 || self.repeats == 0 {
            return Err(Error::param("jobs and repeats must be positive"));
        }
        self.cfg.validate()?;
        self.teacher_cfg.validate()
    }

    /// Independent of the other cells, so cells can run in any order.
    pub fn cell_seed(&self, rate: f64, subset_size: usize) -> u64 {
        mix_seed(mix_seed(self.cfg.seed, rate.to_bits()), subset_size as u64)
    }

    pub fn cells(&self) -> Vec<(f64, usize)> {
        self.subset_sizes
            .iter()
            .flat_map(|&m| self.rates.iter().map(move |&r| (r, m)))
            .collect()
    }
}

pub fn run_grid<T: Scalar>(spec: &GridSpec, train: &Dataset<T>, test: &Dataset<T>) -> Result<GridResult> {
    run_grid_logged(spec, train, test, &mut std::io::sink())
}

/// Runs every cell not already journaled in the output directory and writes
/// `results.csv`. Progress lines go to `log`.
pub fn run_grid_logged<T: Scalar>(
    spec: &GridSpec,
    train: &Dataset<T>,
    test: &Dataset<T>,
    log: &mut dyn Write,
) -> Result<GridResult> {
    spec.validate()?;
    for d in [train, test] {
        if d.source() != spec.dataset {
            return Err(Error::param(format!("grid is for {}, got {} data", spec.dataset, d.source())));
        }
    }
    let dir = &spec.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let (teacher, fingerprint) = obtain_teacher(spec, train, test, log)?;
    let mut inputs = Vec::with_capacity(spec.subset_sizes.len());
    for &m in &spec.subset_sizes {
        let transfer = make_transfer_set(train, m)?;
        let cache = obtain_cache(spec, &teacher, fingerprint, &transfer, log)?;
        inputs.push((m, transfer, cache));
    }

    let journal_path = dir.join(JOURNAL_FILE);
    let mut done = resume_journal(spec, &journal_path)?;
    let pending: Vec<(f64, usize)> = spec
        .cells()
        .into_iter()
        .filter(|&(r, m)| !done.contains_key(&(r.to_bits(), m)))
        .collect();
    emit(log, &format!("grid: {} cells done, {} to run", done.len(), pending.len()))?;

    let mut journal = OpenOptions::new()
        .append(true)
        .open(&journal_path)
        .map_err(|e| Error::io(&journal_path, e))?;
    let queue = Mutex::new(pending.iter().copied());
    let (tx, rx) = mpsc::channel::<(CellRecord, Option<String>)>();
    let workers = spec.jobs.min(pending.len());
    let teacher_arch = teacher.arch();
    thread::scope(|s| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (queue, inputs) = (&queue, &inputs);
            s.spawn(move || loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((rate, m)) = next else { break };
                let (_, transfer, cache) = inputs.iter().find(|(k, _, _)| *k == m).expect("inputs per m");
                let outcome = run_cell(spec, teacher_arch, transfer, cache, test, rate, m);
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut first_err = None;
        for (record, failure) in rx {
            let line = match (&failure, record.task_accuracy) {
                (Some(msg), _) => format!("cell rate={} m={} failed: {msg}", record.rate, record.subset_size),
                (None, acc) => format!(
                    "cell rate={} m={} task_acc={:.6} time={:.1}s",
                    record.rate,
                    record.subset_size,
                    acc.unwrap_or(f64::NAN),
                    record.wall_time_s
                ),
            };
            let written = journal
                .write_all(results::journal_line(&record).as_bytes())
                .and_then(|_| journal.flush())
                .map_err(|e| Error::io(&journal_path, e))
                .and_then(|_| emit(log, &line));
            if let Err(e) = written {
                first_err.get_or_insert(e);
            }
            done.insert((record.rate.to_bits(), record.subset_size), record);
        }
        first_err.map_or(Ok(()), Err)
    })?;

    let result = GridResult::from_cells(spec.dataset, done.into_values().collect());
    write_results(dir.join(RESULTS_FILE), &result)?;
    Ok(result)
}

fn emit(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::io("<log>", e))
}

fn obtain_teacher<T: Scalar>(
    spec: &GridSpec,
    train: &Dataset<T>,
    test: &Dataset<T>,
    log: &mut dyn Write,
) -> Result<(Model<T>, u64)> {
    let path = spec.output_dir.join(TEACHER_FILE);
    if path.exists() {
        let model = load_model::<T>(&path)?;
        if model.arch() != &spec.teacher_arch {
            return Err(Error::format(
                &path,
                format!("teacher is {}, grid expects {}", model.arch(), spec.teacher_arch),
            ));
        }
        emit(log, &format!("teacher: reusing {}", path.display()))?;
        return Ok((model, file_fingerprint(&path)?));
    }
    emit(log, &format!("teacher: training {}", spec.teacher_arch))?;
    let all: Vec<usize> = (0..spec.teacher_arch.class_count()).collect();
    let mut progress = Progress::new().evaluate_on(test, &all).print_to(&mut *log);
    let model = train_teacher_with(spec.teacher_arch.clone(), train, &spec.teacher_cfg, &mut progress)?;
    drop(progress);
    save_model(&model, &path)?;
    Ok((model, file_fingerprint(&path)?))
}

fn obtain_cache<T: Scalar>(
    spec: &GridSpec,
    teacher: &Model<T>,
    fingerprint: u64,
    transfer: &TransferSet<'_, T>,
    log: &mut dyn Write,
) -> Result<SoftTargetCache<T>> {
    let path = spec.output_dir.join(cache_file(transfer.subset_size()));
    if path.exists() {
        let cache = load_cache::<T>(&path)?;
        cache.ensure_teacher(fingerprint)?;
        if cache.tau() != spec.cfg.tau || cache.len() != transfer.len() {
            return Err(Error::format(
                &path,
                format!("cache holds {} rows at τ = {}, grid needs {} at τ = {}",
                    cache.len(), cache.tau(), transfer.len(), spec.cfg.tau),
            ));
        }
        return Ok(cache);
    }
    emit(log, &format!("capture: m={} ({} samples)", transfer.subset_size(), transfer.len()))?;
    let cache = capture_soft_targets(teacher, transfer, spec.cfg.tau)?;
    debug_assert_eq!(cache.teacher_fingerprint(), fingerprint);
    save_cache(&cache, &path)?;
    Ok(cache)
}

/// Loads the journaled cells of this grid that succeeded. The journal is
/// rewritten without torn, failed or foreign-seed lines; rows of other grids
/// over the same directory are kept.
fn resume_journal(spec: &GridSpec, path: &Path) -> Result<HashMap<(u64, usize), CellRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let wanted = spec.cells();
    let mut kept: Vec<CellRecord> = results::parse_journal(&text)
        .into_iter()
        .filter(|c| {
            c.dataset == spec.dataset && !c.is_failed() && c.seed == spec.cell_seed(c.rate, c.subset_size)
        })
        .collect();
    kept.sort_by(|a, b| a.subset_size.cmp(&b.subset_size).then(a.rate.total_cmp(&b.rate)));
    kept.dedup_by(|a, b| a.rate == b.rate && a.subset_size == b.subset_size);
    let done = kept
        .iter()
        .filter(|c| wanted.iter().any(|&(r, m)| r == c.rate && m == c.subset_size))
        .map(|c| ((c.rate.to_bits(), c.subset_size), c.clone()))
        .collect();
    let body: String = std::iter::once(results::journal_header())
        .chain(kept.iter().map(results::journal_line))
        .collect();
    crate::io_util::write_atomic(path, body.as_bytes())?;
    Ok(done)
}

fn run_cell<T: Scalar>(
    spec: &GridSpec,
    teacher_arch: &ModelArch,
    transfer: &TransferSet<'_, T>,
    cache: &SoftTargetCache<T>,
    test: &Dataset<T>,
    rate: f64,
    m: usize,
) -> (CellRecord, Option<String>) {
    let start = Instant::now();
    let seed = spec.cell_seed(rate, m);
    let report = make_student_arch(teacher_arch, rate).map(|p| complexity(&p.student_arch));
    let accuracy = (0..spec.repeats)
        .map(|k| {
            let cfg = TrainConfig {
                seed: if k == 0 { seed } else { mix_seed(seed, k as u64) },
                ..spec.cfg
            };
            distill_cell(teacher_arch, transfer, cache, test, rate, &cfg).map(|(_, _, e)| e.accuracy)
        })
        .sum::<Result<f64>>()
        .map(|s| s / spec.repeats as f64);
    let failure = accuracy.as_ref().err().map(ToString::to_string);
    let cx = report.unwrap_or(ComplexityReport { cp_conv: 0, cp_fc: 0, total: 0, mac_count: 0 });
    let record = CellRecord {
        dataset: spec.dataset,
        rate,
        subset_size: m,
        task_accuracy: accuracy.ok(),
        baseline_accuracy: None,
        normalized_accuracy: None,
        cp_conv: cx.cp_conv,
        cp_fc: cx.cp_fc,
        mac_count: cx.mac_count,
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    (record, failure)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let spec = GridSpec::new(Source::Mnist, "out");
        assert!(spec.validate().is_ok());
        assert_eq!(spec.cells().len(), 90);
        assert_eq!(spec.rates.len(), 10);
        let no_baseline = GridSpec { rates: vec![0.1, 0.5], ..spec.clone() };
        assert!(no_baseline.validate().is_err());
        let bad_m = GridSpec { subset_sizes: vec![1, 2], ..spec.clone() };
        assert!(bad_m.validate().is_err());
        let unsorted = GridSpec { rates: vec![0.5, 0.1, 1.0], ..spec.clone() };
        assert!(unsorted.validate().is_err());
        assert_eq!(GridSpec::new(Source::Cifar10, "o").cfg.epochs, 40);
    }

    #[test]
    fn cell_seeds_differ() {
        let spec = GridSpec::new(Source::Mnist, "out").with_seed(5);
        let seeds: std::collections::HashSet<u64> =
            spec.cells().iter().map(|&(r, m)| spec.cell_seed(r, m)).collect();
        assert_eq!(seeds.len(), 90);
        assert_eq!(spec.cell_seed(0.3, 4), spec.clone().cell_seed(0.3, 4));
    }
}
