//! Index-error metrics and reports.
//!
//! The error raster holds `|n_hat - n*| / N * 100`. The `>n` thresholds and
//! MAE/RMS are taken on the raw index difference; MAE/RMS are also given
//! in percent units.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::io::{blue_to_red, write_pfm, write_ppm};
use crate::raster::Raster;

/// Raw index thresholds of the `>n` columns.
pub const THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

/// Per-cell errors; ignored cells hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub rows: usize,
    pub cols: usize,
    pub num_spheres: usize,
    /// `|n_hat - n*|`
    pub raw: Vec<f32>,
    pub ignored: Vec<bool>,
}

impl ErrorMap {
    /// Percent errors, NaN where ignored.
    pub fn percent(&self) -> Raster {
        let n = self.num_spheres as f32;
        let data = self
            .raw
            .iter()
            .zip(&self.ignored)
            .map(|(&e, &ig)| if ig { f32::NAN } else { e / n * 100.0 })
            .collect();
        Raster { rows: self.rows, cols: self.cols, data }
    }
}

/// Cells to leave out: missing predictions or ground truth no camera sees.
pub fn ignore_mask(pred_valid: Option<&[bool]>, coverage: Option<&[u32]>, cells: usize) -> Vec<bool> {
    (0..cells)
        .map(|i| pred_valid.is_some_and(|v| !v[i]) || coverage.is_some_and(|c| c[i] == 0))
        .collect()
}

pub fn index_error(pred: &[f32], gt: &[f32], ignored: &[bool], rows: usize, cols: usize, num_spheres: usize) -> Result<ErrorMap> {
    let n = rows * cols;
    if pred.len() != n || gt.len() != n || ignored.len() != n {
        return Err(shape_err!(
            "prediction {}, ground truth {}, mask {} for a {rows}x{cols} grid",
            pred.len(),
            gt.len(),
            ignored.len()
        ));
    }
    if num_spheres == 0 {
        return Err(Error::InvalidInput("zero spheres".into()));
    }
    let mut raw = Vec::with_capacity(n);
    let mut ign = Vec::with_capacity(n);
    for i in 0..n {
        let bad = ignored[i] || !pred[i].is_finite() || !gt[i].is_finite();
        ign.push(bad);
        raw.push(if bad { f32::NAN } else { (pred[i] - gt[i]).abs() });
    }
    Ok(ErrorMap { rows, cols, num_spheres, raw, ignored: ign })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// percent of evaluated cells with raw error above 1
    pub gt1: f64,
    pub gt3: f64,
    pub gt5: f64,
    /// raw index units
    pub mae: f64,
    pub rms: f64,
    /// percent units
    pub mae_percent: f64,
    pub rms_percent: f64,
    pub evaluated_pixels: usize,
    pub ignored_pixels: usize,
}

pub fn summarize(err: &ErrorMap) -> Result<MetricReport> {
    let (mut count, mut above) = (0usize, [0usize; 3]);
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for (&e, &ig) in err.raw.iter().zip(&err.ignored) {
        if ig {
            continue;
        }
        let e = e as f64;
        count += 1;
        s1 += e;
        s2 += e * e;
        for (a, t) in above.iter_mut().zip(THRESHOLDS) {
            if e > t {
                *a += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no evaluated pixels".into()));
    }
    let c = count as f64;
    let pct = |a: usize| 100.0 * a as f64 / c;
    let (mae, rms) = (s1 / c, (s2 / c).sqrt());
    let scale = 100.0 / err.num_spheres as f64;
    Ok(MetricReport {
        gt1: pct(above[0]),
        gt3: pct(above[1]),
        gt5: pct(above[2]),
        mae,
        rms: rms.max(mae),
        mae_percent: mae * scale,
        rms_percent: rms.max(mae) * scale,
        evaluated_pixels: count,
        ignored_pixels: err.raw.len() - count,
    })
}

/// Unweighted mean over frames; pixel counts are summed.
pub fn average(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to average".into()));
    }
    let k = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Ok(MetricReport {
        gt1: mean(|r| r.gt1),
        gt3: mean(|r| r.gt3),
        gt5: mean(|r| r.gt5),
        mae: mean(|r| r.mae),
        rms: mean(|r| r.rms),
        mae_percent: mean(|r| r.mae_percent),
        rms_percent: mean(|r| r.rms_percent),
        evaluated_pixels: reports.iter().map(|r| r.evaluated_pixels).sum(),
        ignored_pixels: reports.iter().map(|r| r.ignored_pixels).sum(),
    })
}

/// Aligned plain-text table, one row per labelled report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<w$} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
        "frame", ">1 (%)", ">3 (%)", ">5 (%)", "MAE (idx)", "RMS (idx)", "MAE (%)", "RMS (%)", "evaluated", "ignored"
    );
    for (label, r) in rows {
        let _ = writeln!(
            s,
            "{:<w$} {:>8.2} {:>8.2} {:>8.2} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9} {:>8}",
            label, r.gt1, r.gt3, r.gt5, r.mae, r.rms, r.mae_percent, r.rms_percent, r.evaluated_pixels, r.ignored_pixels
        );
    }
    s
}

/// Writes `<stem>.pfm` (percent errors, NaN where ignored) and
/// `<stem>.ppm` (blue-to-red over `0..=max_percent`, black where ignored).
pub fn write_error_map(dir: &Path, stem: &str, err: &ErrorMap, max_percent: f32) -> Result<()> {
    let pct = err.percent();
    write_pfm(&dir.join(format!("{stem}.pfm")), &pct)?;
    let rgb: Vec<[u8; 3]> = pct
        .data
        .iter()
        .map(|&p| if p.is_nan() { [0, 0, 0] } else { blue_to_red(p / max_percent) })
        .collect();
    write_ppm(&dir.join(format!("{stem}.ppm")), err.rows, err.cols, &rgb)
}
