//! Grid cell records and their CSV forms.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::Source;
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub const RESULTS_HEADER: [&str; 11] = [
    "dataset",
    "rate",
    "subset_size",
    "task_accuracy",
    "baseline_accuracy",
    "normalized_accuracy",
    "cp_conv",
    "cp_fc",
    "mac_count",
    "seed",
    "wall_time_s",
];

pub(crate) const JOURNAL_HEADER: [&str; 9] = [
    "dataset",
    "rate",
    "subset_size",
    "task_accuracy",
    "cp_conv",
    "cp_fc",
    "mac_count",
    "seed",
    "wall_time_s",
];

/// Written in place of an accuracy for a failed cell.
pub const ERROR_MARKER: &str = "error";

#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub dataset: Source,
    pub rate: f64,
    pub subset_size: usize,
    /// `None` when the cell failed.
    pub task_accuracy: Option<f64>,
    /// Task accuracy of the rate-1.0 cell with the same subset size.
    pub baseline_accuracy: Option<f64>,
    pub normalized_accuracy: Option<f64>,
    pub cp_conv: u64,
    pub cp_fc: u64,
    pub mac_count: u64,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl CellRecord {
    pub fn is_failed(&self) -> bool {
        self.task_accuracy.is_none()
    }
}

/// All cells of one grid, ordered by subset size, then rate.
#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub dataset: Source,
    pub cells: Vec<CellRecord>,
}

impl GridResult {
    /// Sorts the cells and fills in baseline and normalized accuracies.
    pub fn from_cells(dataset: Source, mut cells: Vec<CellRecord>) -> Self {
        cells.sort_by(|a, b| a.subset_size.cmp(&b.subset_size).then(a.rate.total_cmp(&b.rate)));
        let baselines: Vec<(usize, Option<f64>)> = cells
            .iter()
            .filter(|c| c.rate == 1.0)
            .map(|c| (c.subset_size, c.task_accuracy))
            .collect();
        for c in &mut cells {
            c.baseline_accuracy = baselines
                .iter()
                .find(|(m, _)| *m == c.subset_size)
                .and_then(|(_, b)| *b);
            c.normalized_accuracy = match (c.task_accuracy, c.baseline_accuracy) {
                (Some(t), Some(b)) if b > 0.0 => Some(t / b),
                _ => None,
            };
        }
        Self { dataset, cells }
    }

    pub fn cell(&self, rate: f64, subset_size: usize) -> Option<&CellRecord> {
        self.cells
            .iter()
            .find(|c| c.rate == rate && c.subset_size == subset_size)
    }

    /// Baseline minus task accuracy, in percentage points.
    pub fn drop_points(&self, rate: f64, subset_size: usize) -> Option<f64> {
        let c = self.cell(rate, subset_size)?;
        Some((c.baseline_accuracy? - c.task_accuracy?) * 100.0)
    }

    pub fn subset_sizes(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.cells.iter().map(|c| c.subset_size).collect();
        m.dedup();
        m
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let origin = Path::new("<results>");
        w.write_record(RESULTS_HEADER).map_err(|e| csv_err(origin, e))?;
        for c in &self.cells {
            w.write_record([
                c.dataset.to_string(),
                c.rate.to_string(),
                c.subset_size.to_string(),
                opt(c.task_accuracy),
                opt(c.baseline_accuracy),
                opt(c.normalized_accuracy),
                c.cp_conv.to_string(),
                c.cp_fc.to_string(),
                c.mac_count.to_string(),
                c.seed.to_string(),
                c.wall_time_s.to_string(),
            ])
            .map_err(|e| csv_err(origin, e))?;
        }
        w.into_inner().map_err(|e| Error::io(origin, e.into_error()))
    }

    pub fn from_csv(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers().map_err(|e| csv_err(origin, e))?;
        if header.iter().ne(RESULTS_HEADER) {
            return Err(Error::format(origin, format!("unexpected header {header:?}")));
        }
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(origin, e))?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            cells.push(CellRecord {
                dataset: field(f(0), "dataset", origin)?,
                rate: field(f(1), "rate", origin)?,
                subset_size: field(f(2), "subset_size", origin)?,
                task_accuracy: opt_field(f(3), "task_accuracy", origin)?,
                baseline_accuracy: opt_field(f(4), "baseline_accuracy", origin)?,
                normalized_accuracy: opt_field(f(5), "normalized_accuracy", origin)?,
                cp_conv: field(f(6), "cp_conv", origin)?,
                cp_fc: field(f(7), "cp_fc", origin)?,
                mac_count: field(f(8), "mac_count", origin)?,
                seed: field(f(9), "seed", origin)?,
                wall_time_s: field(f(10), "wall_time_s", origin)?,
            });
        }
        let dataset = match cells.first() {
            Some(c) => c.dataset,
            None => return Err(Error::format(origin, "no result rows")),
        };
        if cells.iter().any(|c| c.dataset != dataset) {
            return Err(Error::format(origin, "rows from more than one dataset"));
        }
        Ok(Self { dataset, cells })
    }
}

pub fn write_results(path: impl AsRef<Path>, result: &GridResult) -> Result<()> {
    write_atomic(path.as_ref(), &result.to_csv()?)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<GridResult> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GridResult::from_csv(&bytes, path)
}

pub(crate) fn journal_header() -> String {
    JOURNAL_HEADER.join(",") + "\n"
}

pub(crate) fn journal_line(c: &CellRecord) -> String {
    let fields = [
        c.dataset.to_string(),
        c.rate.to_string(),
        c.subset_size.to_string(),
        opt(c.task_accuracy),
        c.cp_conv.to_string(),
        c.cp_fc.to_string(),
        c.mac_count.to_string(),
        c.seed.to_string(),
        c.wall_time_s.to_string(),
    ];
    fields.join(",") + "\n"
}

/// Complete journal rows; a torn final line or malformed row is skipped.
pub(crate) fn parse_journal(text: &str) -> Vec<CellRecord> {
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => return Vec::new(),
    };
    let origin = Path::new("<journal>");
    complete
        .lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != JOURNAL_HEADER.len() {
                return None;
            }
            Some(CellRecord {
                dataset: field(f[0], "", origin).ok()?,
                rate: field(f[1], "", origin).ok()?,
                subset_size: field(f[2], "", origin).ok()?,
                task_accuracy: opt_field(f[3], "", origin).ok()?,
                baseline_accuracy: None,
                normalized_accuracy: None,
                cp_conv: field(f[4], "", origin).ok()?,
                cp_fc: field(f[5], "", origin).ok()?,
                mac_count: field(f[6], "", origin).ok()?,
                seed: field(f[7], "", origin).ok()?,
                wall_time_s: field(f[8], "", origin).ok()?,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| ERROR_MARKER.to_string(), |x| x.to_string())
}

fn field<V: FromStr>(s: &str, name: &str, origin: &Path) -> Result<V>
where
    V::Err: Display,
{
    s.parse()
        .map_err(|e| Error::format(origin, format!("bad {name} {s:?}: {e}")))
}

fn opt_field(s: &str, name: &str, origin: &Path) -> Result<Option<f64>> {
    if s == ERROR_MARKER {
        Ok(None)
    } else {
        field(s, name, origin).map(Some)
    }
}

pub(crate) fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}
