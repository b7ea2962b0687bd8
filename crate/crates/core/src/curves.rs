//! Per-class curve files from a metrics CSV.
//!
//! Each file is whitespace separated with a `#` header:
//! `epoch val_iou pseudo_acc`, one row per epoch, `NA` where undefined.
//! Values keep the CSV's text form exactly.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{format_float, parse_history_csv};

pub const CURVE_HEADER: &str = "# epoch val_iou pseudo_acc";

/// One curve row: epoch, validation IoU, pseudo-label accuracy.
pub type CurvePoint = (u32, Option<f64>, Option<f64>);

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_float)
}

/// Curve text for each requested class, in request order.
pub fn curves_from_csv(csv: &str, classes: &[usize]) -> Result<Vec<(usize, String)>> {
    let (n, history) = parse_history_csv(csv)?;
    classes
        .iter()
        .map(|&c| {
            if c >= n {
                return Err(Error::invalid(format!("class {c} not in history with {n} classes")));
            }
            let mut text = String::from(CURVE_HEADER);
            text.push('\n');
            for r in &history {
                text.push_str(&format!("{} {} {}\n", r.epoch, cell(r.iou[c]), cell(r.pacc[c])));
            }
            Ok((c, text))
        })
        .collect()
}

/// Writes `class_<c>.txt` into `out_dir` for each class; an empty class
/// list means every class.
pub fn export_curves(csv_path: &Path, classes: &[usize], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let csv = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let all: Vec<usize>;
    let classes = if classes.is_empty() {
        all = (0..parse_history_csv(&csv)?.0).collect();
        &all
    } else {
        classes
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    curves_from_csv(&csv, classes)?
        .into_iter()
        .map(|(c, text)| {
            let path = out_dir.join(format!("class_{c}.txt"));
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

pub fn parse_curve(text: &str) -> Result<Vec<CurvePoint>> {
    let bad = |row: usize, message: String| Error::Malformed {
        what: "curve file",
        row,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(bad(1, "missing header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row = i + 2;
            let f: Vec<&str> = line.split_whitespace().collect();
            let [e, iou, acc] = f[..] else {
                return Err(bad(row, format!("expected 3 fields, found {}", f.len())));
            };
            let opt = |s: &str| -> Result<Option<f64>> {
                if s == "NA" {
                    return Ok(None);
                }
                s.parse().map(Some).map_err(|_| bad(row, format!("`{s}` is not a number")))
            };
            let epoch = e.parse().map_err(|_| bad(row, format!("`{e}` is not an epoch")))?;
            Ok((epoch, opt(iou)?, opt(acc)?))
        })
        .collect()
}
