//! Confusion matrices, IoU, pseudo-label accuracy, stability statistics and
//! the per-epoch metrics CSV.

use std::fmt::Write as _;

use crate::data::{DatasetSplits, Scene};
use crate::error::{Error, Result};
use crate::kernels::argmax_channels;
use crate::model::SegModel;
use crate::tensor::{LabelMap, PixelMask, Tensor};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::invalid(format!(
                "prediction dims {:?} differ from truth dims {:?}",
                pred.dims(),
                truth.dims()
            )));
        }
        let [_, h, w] = truth.dims();
        let c = self.classes;
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            if let Some(&label) = [t, p].iter().find(|&&l| l as usize >= c) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: c,
                    batch: i / (h * w),
                    y: i / w % h,
                    x: i % w,
                });
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("cannot merge confusion matrices of different size"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouScores {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the present classes.
    pub miou: f64,
}

pub fn iou_scores(cm: &ConfusionMatrix) -> Result<IouScores> {
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|t| cm.get(t, k)).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("IoU is undefined: no class occurs"));
    }
    Ok(IouScores {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Running per-class tally of masked-in pseudo-labels against truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoTally {
    correct: Vec<u64>,
    total: Vec<u64>,
}

impl PseudoTally {
    pub fn new(classes: usize) -> Self {
        PseudoTally {
            correct: vec![0; classes],
            total: vec![0; classes],
        }
    }

    pub fn accumulate(&mut self, pseudo: &LabelMap, mask: &PixelMask, truth: &LabelMap) -> Result<()> {
        if pseudo.dims() != truth.dims() || mask.dims() != truth.dims() {
            return Err(Error::invalid("pseudo-labels, mask and truth are not aligned"));
        }
        let c = self.total.len();
        for ((&p, &m), &t) in pseudo.data().iter().zip(mask.data()).zip(truth.data()) {
            if !m {
                continue;
            }
            let t = t as usize;
            if t >= c {
                return Err(Error::invalid(format!("truth label {t} out of range for {c} classes")));
            }
            self.total[t] += 1;
            self.correct[t] += u64::from(p as usize == t);
        }
        Ok(())
    }

    /// `None` where no masked-in pixel has that true class.
    pub fn accuracy(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect()
    }
}

pub fn pseudo_accuracy(
    pseudo: &LabelMap,
    mask: &PixelMask,
    truth: &LabelMap,
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    let mut tally = PseudoTally::new(classes);
    tally.accumulate(pseudo, mask, truth)?;
    Ok(tally.accuracy())
}

/// Scenes are evaluated in chunks of this many images.
const EVAL_CHUNK: usize = 25;

fn stack_images(scenes: &[Scene]) -> Result<(Tensor, LabelMap)> {
    let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let labels: Vec<&LabelMap> = scenes.iter().map(|s| &s.labels).collect();
    Ok((Tensor::stack(&images)?, LabelMap::concat(&labels)?))
}

/// Confusion matrix of `model` over whole scenes.
pub fn evaluate(model: &SegModel, scenes: &[Scene]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.arch().num_classes);
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let (x, truth) = stack_images(chunk)?;
        let (pred, _) = argmax_channels(&model.predict(&x)?)?;
        cm.accumulate(&pred, &truth)?;
    }
    Ok(cm)
}

/// Per-class accuracy of the model's own thresholded pseudo-labels on the
/// first `count` unlabeled images, scored against their hidden truth.
pub fn pseudo_label_accuracy(
    model: &SegModel,
    splits: &DatasetSplits,
    count: usize,
    tau: f64,
) -> Result<Vec<Option<f64>>> {
    let pool = &splits.unlabeled;
    let n = count.min(pool.len());
    let mut tally = PseudoTally::new(model.arch().num_classes);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let images: Vec<&Tensor> = pool.images()[start..end].iter().collect();
        let truth: Vec<&LabelMap> = pool.hidden_truth()[start..end].iter().collect();
        let (pseudo, conf) = argmax_channels(&model.predict_probs(&Tensor::stack(&images)?)?)?;
        let [b, h, w] = pseudo.dims();
        let mask = PixelMask::new(b, h, w, conf.iter().map(|&c| c >= tau).collect())?;
        tally.accumulate(&pseudo, &mask, &LabelMap::concat(&truth)?)?;
    }
    Ok(tally.accuracy())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneralizationDelta {
    pub seen: f64,
    pub shifted: f64,
    /// `seen - shifted`.
    pub delta: f64,
}

pub fn generalization_delta(model: &SegModel, test: &[Scene], shifted: &[Scene]) -> Result<GeneralizationDelta> {
    if test.is_empty() || shifted.is_empty() {
        return Err(Error::invalid("generalization needs non-empty test and shifted splits"));
    }
    let seen = iou_scores(&evaluate(model, test)?)?.miou;
    let shifted = iou_scores(&evaluate(model, shifted)?)?.miou;
    Ok(GeneralizationDelta {
        seen,
        shifted,
        delta: seen - shifted,
    })
}

/// Spread of one series over its tail window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stability {
    /// Population standard deviation.
    pub std: f64,
    /// Largest decrease between consecutive entries.
    pub max_drop: f64,
}

/// Number of trailing entries covered by `tail_frac` of `n`, at least 2.
pub fn tail_len(n: usize, tail_frac: f64) -> usize {
    ((n as f64 * tail_frac).ceil() as usize).clamp(2.min(n), n)
}

pub fn series_stability(series: &[f64], tail_frac: f64) -> Result<Stability> {
    if series.len() < 2 || !(tail_frac > 0.0 && tail_frac <= 1.0) {
        return Err(Error::invalid(format!(
            "stability needs at least 2 values and tail_frac in (0, 1], got {} and {tail_frac}",
            series.len()
        )));
    }
    let tail = &series[series.len() - tail_len(series.len(), tail_frac)..];
    // Shifted by the first value so a constant series gives exactly zero.
    let shifted: Vec<f64> = tail.iter().map(|v| v - tail[0]).collect();
    let mean = shifted.iter().sum::<f64>() / tail.len() as f64;
    let var = shifted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail.len() as f64;
    let max_drop = tail.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    Ok(Stability {
        std: var.sqrt(),
        max_drop,
    })
}

/// Per-class stability of validation IoU over the last `tail_frac` of
/// epochs. Epochs where a class is absent are skipped; classes with fewer
/// than two values report `None`.
pub fn stability_stats(history: &[MetricsRecord], tail_frac: f64) -> Result<Vec<Option<Stability>>> {
    if history.len() < 2 {
        return Err(Error::invalid("stability needs at least 2 epochs"));
    }
    let tail = &history[history.len() - tail_len(history.len(), tail_frac)..];
    let classes = history[0].iou.len();
    (0..classes)
        .map(|c| {
            let series: Vec<f64> = tail.iter().filter_map(|r| r.iou.get(c).copied().flatten()).collect();
            if series.len() < 2 {
                Ok(None)
            } else {
                series_stability(&series, 1.0).map(Some)
            }
        })
        .collect()
}

/// One row of the per-epoch history.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u32,
    pub l_s: f64,
    pub l_u_std: f64,
    pub l_u_prev: f64,
    pub lambda: f64,
    pub miou_val: f64,
    pub iou: Vec<Option<f64>>,
    pub pacc: Vec<Option<f64>>,
    /// Mean masked-in pixel fraction of the standard unsupervised term.
    pub mask_std: f64,
    /// Same for the previous-guidance term; 0 when it did not run.
    pub mask_prev: f64,
}

const NA: &str = "NA";

/// Nine significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn format_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), format_float)
}

pub fn csv_header(classes: usize) -> String {
    let mut h = String::from("epoch,l_s,l_u_std,l_u_prev,lambda,miou_val");
    for c in 0..classes {
        write!(h, ",iou_c{c}").unwrap();
    }
    for c in 0..classes {
        write!(h, ",pacc_c{c}").unwrap();
    }
    h.push_str(",mask_std,mask_prev");
    h
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let mut row = self.epoch.to_string();
        for v in [self.l_s, self.l_u_std, self.l_u_prev, self.lambda, self.miou_val] {
            row.push(',');
            row.push_str(&format_float(v));
        }
        for v in self.iou.iter().chain(&self.pacc) {
            row.push(',');
            row.push_str(&format_opt(*v));
        }
        for v in [self.mask_std, self.mask_prev] {
            row.push(',');
            row.push_str(&format_float(v));
        }
        row
    }
}

pub fn history_to_csv(history: &[MetricsRecord], classes: usize) -> String {
    let mut out = csv_header(classes);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parses the metrics CSV. Rows are numbered from 1 for the header.
pub fn parse_history_csv(text: &str) -> Result<(usize, Vec<MetricsRecord>)> {
    let bad = |row: usize, message: String| Error::Malformed {
        what: "metrics CSV",
        row,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let classes = header.split(',').filter(|c| c.starts_with("iou_c")).count();
    if header != csv_header(classes) {
        return Err(bad(1, format!("unexpected header `{header}`")));
    }
    let width = 6 + 2 * classes + 2;
    let mut history: Vec<MetricsRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(bad(row, format!("expected {width} fields, found {}", cells.len())));
        }
        let num = |k: usize| -> Result<f64> {
            cells[k]
                .parse::<f64>()
                .map_err(|_| bad(row, format!("field {k} `{}` is not a number", cells[k])))
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            if cells[k] == NA {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let epoch: u32 = cells[0]
            .parse()
            .map_err(|_| bad(row, format!("epoch `{}` is not an integer", cells[0])))?;
        if history.last().is_some_and(|r| r.epoch >= epoch) {
            return Err(bad(row, format!("epoch {epoch} does not increase")));
        }
        history.push(MetricsRecord {
            epoch,
            l_s: num(1)?,
            l_u_std: num(2)?,
            l_u_prev: num(3)?,
            lambda: num(4)?,
            miou_val: num(5)?,
            iou: (6..6 + classes).map(opt).collect::<Result<_>>()?,
            pacc: (6 + classes..6 + 2 * classes).map(opt).collect::<Result<_>>()?,
            mask_std: num(6 + 2 * classes)?,
            mask_prev: num(7 + 2 * classes)?,
        });
    }
    Ok((classes, history))
}
