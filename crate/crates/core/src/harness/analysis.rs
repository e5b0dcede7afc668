//! Normalized accuracy curves and minimal-size estimates.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::results::{csv_err, GridResult};
use crate::data::Source;
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub const REPORT_HEADER: [&str; 5] = ["dataset", "subset_size", "threshold", "rate_star", "flag"];

/// `(rate, task accuracy / baseline accuracy)` for one subset size, by rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub subset_size: usize,
    pub points: Vec<(f64, f64)>,
}

/// Divides every cell by the rate-1.0 accuracy of its subset size. Failed
/// cells are left out.
pub fn normalized_curves(result: &GridResult) -> Result<Vec<Curve>> {
    result
        .subset_sizes()
        .into_iter()
        .map(|m| {
            let baseline = result
                .cell(1.0, m)
                .and_then(|c| c.task_accuracy)
                .filter(|&b| b > 0.0)
                .ok_or_else(|| Error::Analysis(format!("no usable rate-1.0 baseline for m = {m}")))?;
            let mut points: Vec<(f64, f64)> = result
                .cells
                .iter()
                .filter(|c| c.subset_size == m)
                .filter_map(|c| Some((c.rate, c.task_accuracy? / baseline)))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Ok(Curve {
                subset_size: m,
                points,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdFlag {
    /// Interpolated inside the sampled range.
    Ok,
    /// Already met at the smallest sampled rate.
    Unsaturated,
    /// Never met; reported as rate 1.0.
    Unreachable,
}

impl fmt::Display for ThresholdFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdFlag::Ok => "ok",
            ThresholdFlag::Unsaturated => "unsaturated",
            ThresholdFlag::Unreachable => "unreachable",
        })
    }
}

impl FromStr for ThresholdFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(ThresholdFlag::Ok),
            "unsaturated" => Ok(ThresholdFlag::Unsaturated),
            "unreachable" => Ok(ThresholdFlag::Unreachable),
            _ => Err(Error::param(format!("unknown flag {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdEstimate {
    pub subset_size: usize,
    pub threshold: f64,
    pub rate_star: f64,
    pub flag: ThresholdFlag,
}

/// Smallest rate whose normalized accuracy reaches `threshold`, linearly
/// interpolated on the segment where the curve first reaches it.
pub fn rate_at_threshold(points: &[(f64, f64)], threshold: f64) -> Result<(f64, ThresholdFlag)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Analysis(format!("threshold {threshold} outside (0, 1]")));
    }
    if points.len() < 2 {
        return Err(Error::Analysis(format!(
            "need at least two sampled rates, got {}",
            points.len()
        )));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    match pts.iter().position(|&(_, a)| a >= threshold) {
        Some(0) => Ok((pts[0].0, ThresholdFlag::Unsaturated)),
        Some(j) => {
            let (r0, a0) = pts[j - 1];
            let (r1, a1) = pts[j];
            let r = r0 + (threshold - a0) * (r1 - r0) / (a1 - a0);
            Ok((r.clamp(r0, r1), ThresholdFlag::Ok))
        }
        None => Ok((1.0, ThresholdFlag::Unreachable)),
    }
}

pub fn size_at_threshold(curves: &[Curve], threshold: f64) -> Result<Vec<ThresholdEstimate>> {
    curves
        .iter()
        .map(|c| {
            let (rate_star, flag) = rate_at_threshold(&c.points, threshold)
                .map_err(|e| Error::Analysis(format!("m = {}: {e}", c.subset_size)))?;
            Ok(ThresholdEstimate {
                subset_size: c.subset_size,
                threshold,
                rate_star,
                flag,
            })
        })
        .collect()
}

pub fn report_csv(dataset: Source, estimates: &[ThresholdEstimate]) -> Result<Vec<u8>> {
    let origin = Path::new("<report>");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(|e| csv_err(origin, e))?;
    for e in estimates {
        w.write_record([
            dataset.to_string(),
            e.subset_size.to_string(),
            e.threshold.to_string(),
            e.rate_star.to_string(),
            e.flag.to_string(),
        ])
        .map_err(|e| csv_err(origin, e))?;
    }
    w.into_inner().map_err(|e| Error::io(origin, e.into_error()))
}

pub fn write_report(path: impl AsRef<Path>, dataset: Source, estimates: &[ThresholdEstimate]) -> Result<()> {
    write_atomic(path.as_ref(), &report_csv(dataset, estimates)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::results::CellRecord;
    use proptest::prelude::*;

    #[test]
    fn two_point_interpolation() {
        let (r, flag) = rate_at_threshold(&[(0.5, 0.99), (1.0, 1.0)], 0.998).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
        assert_eq!(flag, ThresholdFlag::Ok);
    }

    #[test]
    fn saturation_flags() {
        let flat = [(0.1, 1.0), (0.5, 1.0), (1.0, 1.0)];
        assert_eq!(rate_at_threshold(&flat, 0.998).unwrap(), (0.1, ThresholdFlag::Unsaturated));
        let low = [(0.1, 0.5), (1.0, 0.9)];
        assert_eq!(rate_at_threshold(&low, 0.95).unwrap(), (1.0, ThresholdFlag::Unreachable));
        assert!(matches!(rate_at_threshold(&[(1.0, 1.0)], 0.9), Err(Error::Analysis(_))));
        assert!(rate_at_threshold(&flat, 0.0).is_err());
        assert!(rate_at_threshold(&flat, 1.5).is_err());
    }

    fn cell(rate: f64, m: usize, acc: Option<f64>) -> CellRecord {
        CellRecord {
            dataset: Source::Mnist,
            rate,
            subset_size: m,
            task_accuracy: acc,
            baseline_accuracy: None,
            normalized_accuracy: None,
            cp_conv: 1,
            cp_fc: 1,
            mac_count: 1,
            seed: 0,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn curves_need_baselines() {
        let g = GridResult::from_cells(
            Source::Mnist,
            vec![cell(0.5, 2, Some(0.9)), cell(1.0, 2, Some(0.96)), cell(0.5, 3, Some(0.9))],
        );
        assert!(matches!(normalized_curves(&g), Err(Error::Analysis(_))));
        let g = GridResult::from_cells(
            Source::Mnist,
            vec![
                cell(1.0, 3, Some(0.8)),
                cell(0.5, 2, Some(0.9)),
                cell(1.0, 2, Some(0.96)),
                cell(0.5, 3, None),
            ],
        );
        let curves = normalized_curves(&g).unwrap();
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0].points, [(0.5, 0.9 / 0.96), (1.0, 1.0)]);
        assert_eq!(curves[1].points, [(1.0, 1.0)]);
    }

    #[test]
    fn report_layout() {
        let e = ThresholdEstimate { subset_size: 2, threshold: 0.998, rate_star: 0.25, flag: ThresholdFlag::Unsaturated };
        let text = String::from_utf8(report_csv(Source::Mnist, &[e]).unwrap()).unwrap();
        assert_eq!(text, "dataset,subset_size,threshold,rate_star,flag\nmnist,2,0.998,0.25,unsaturated\n");
        assert_eq!("unreachable".parse::<ThresholdFlag>().unwrap(), ThresholdFlag::Unreachable);
    }

    fn curve_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec(0.5f64..1.05, 2..10).prop_map(|accs| {
            let n = accs.len();
            accs.into_iter()
                .enumerate()
                .map(|(i, a)| ((i + 1) as f64 / n as f64, a))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn estimate_is_monotone_in_threshold(pts in curve_points(), t1 in 0.5f64..=1.0, t2 in 0.5f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (r_lo, _) = rate_at_threshold(&pts, lo).unwrap();
            let (r_hi, _) = rate_at_threshold(&pts, hi).unwrap();
            prop_assert!(r_lo <= r_hi);
            prop_assert!(r_lo >= pts[0].0 && r_hi <= 1.0);
        }
    }
}
