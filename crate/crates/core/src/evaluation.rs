//! Per-class IoU accumulation and the seen/unseen/harmonic summary metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbones::ClassRegistry;
use crate::decoder::SegmentationLogits;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::{GroundTruthMask, IGNORE_INDEX};

/// Per-pixel class indices, row-major `(side, side)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionMap {
    pub side: usize,
    pub labels: Vec<usize>,
}

/// Per-pixel argmax over class logits; ties go to the lowest index. The
/// logistic map is monotone, so this is also the argmax of probabilities.
pub fn predict<T: Scalar>(logits: &SegmentationLogits<T>) -> PredictionMap {
    let (side, n) = (logits.side(), logits.n_classes());
    let data = logits.grid.data();
    let labels = data
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for c in 1..n {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    PredictionMap { side, labels }
}

/// Intersection and union pixel counts per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(n_classes: usize) -> Self {
        ConfusionAccumulator { intersection: vec![0; n_classes], union: vec![0; n_classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.intersection.len()
    }

    /// Adds one image; ignored ground-truth pixels are skipped.
    pub fn accumulate(&mut self, pred: &PredictionMap, gt: &GroundTruthMask) -> Result<()> {
        if pred.side != gt.side() {
            return Err(Error::shape("accumulate", format!("prediction {}px vs mask {}px", pred.side, gt.side())));
        }
        let n = self.n_classes();
        gt.validate(n)?;
        for (&p, &g) in pred.labels.iter().zip(gt.labels()) {
            if g == IGNORE_INDEX {
                continue;
            }
            if p >= n {
                return Err(Error::Data(format!("predicted class {p} outside {n} classes")));
            }
            let g = g as usize;
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::shape("merge", format!("{} vs {} classes", self.n_classes(), other.n_classes())));
        }
        for c in 0..self.n_classes() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        Ok(())
    }

    /// IoU per class in `[0, 1]`; `None` for classes with an empty union.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { None } else { Some(i as f64 / u as f64) })
            .collect()
    }
}

/// Summary percentages, unrounded; rounding happens when emitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub seen_flags: Vec<bool>,
    pub per_class_iou: Vec<Option<f64>>,
    pub s_miou: Option<f64>,
    pub u_miou: Option<f64>,
    /// Absent when either split has no measurable class.
    pub h_miou: Option<f64>,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Rounds half-to-even at two decimals.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round_ties_even() / 100.0
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Seen, unseen and harmonic mIoU (as percentages) from per-class IoUs.
pub fn split_miou(per_class_iou: &[Option<f64>], registry: &ClassRegistry) -> Result<MetricsReport> {
    if per_class_iou.len() != registry.len() {
        return Err(Error::shape("split_miou", format!("{} IoUs for {} classes", per_class_iou.len(), registry.len())));
    }
    let pick = |seen: bool| {
        mean(per_class_iou.iter().zip(registry.seen_flags()).filter(|(_, &s)| s == seen).filter_map(|(v, _)| *v))
            .map(|m| m * 100.0)
    };
    let (s, u) = (pick(true), pick(false));
    let h = match (s, u) {
        (Some(s), Some(u)) => Some(harmonic_mean(s, u)),
        _ => None,
    };
    Ok(MetricsReport {
        class_names: registry.names().to_vec(),
        seen_flags: registry.seen_flags().to_vec(),
        per_class_iou: per_class_iou.to_vec(),
        s_miou: s,
        u_miou: u,
        h_miou: h,
    })
}

/// Summary from already-computed percentages.
pub fn summary(s_miou: f64, u_miou: f64) -> MetricsReport {
    MetricsReport {
        class_names: vec![],
        seen_flags: vec![],
        per_class_iou: vec![],
        s_miou: Some(s_miou),
        u_miou: Some(u_miou),
        h_miou: Some(harmonic_mean(s_miou, u_miou)),
    }
}

/// Cross-dataset average: every metric is averaged on its own, so the
/// averaged h is the mean of per-dataset h values.
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to average".into()));
    }
    if reports.len() == 1 {
        return Ok(reports[0].clone());
    }
    let avg = |f: fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
        vals.and_then(|v| mean(v.into_iter()))
    };
    Ok(MetricsReport {
        class_names: vec![],
        seen_flags: vec![],
        per_class_iou: vec![],
        s_miou: avg(|r| r.s_miou),
        u_miou: avg(|r| r.u_miou),
        h_miou: avg(|r| r.h_miou),
    })
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", round2(v)),
        None => "n/a".into(),
    }
}

impl MetricsReport {
    /// `key = value` lines, one metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "s_miou = {}", fmt_pct(self.s_miou)).unwrap();
        writeln!(out, "u_miou = {}", fmt_pct(self.u_miou)).unwrap();
        writeln!(out, "h_miou = {}", fmt_pct(self.h_miou)).unwrap();
        if self.h_miou.is_none() {
            writeln!(out, "h_miou_defined = false").unwrap();
        }
        for (name, iou) in self.class_names.iter().zip(&self.per_class_iou) {
            writeln!(out, "iou.{name} = {}", fmt_pct(iou.map(|v| v * 100.0))).unwrap();
        }
        out
    }

    /// CSV with header `class,iou,seen_flag`, per-class rows (IoU as a
    /// fraction), then summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,seen_flag\n");
        for ((name, iou), seen) in self.class_names.iter().zip(&self.per_class_iou).zip(&self.seen_flags) {
            let v = iou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            writeln!(out, "{name},{v},{}", *seen as u8).unwrap();
        }
        writeln!(out, "s_miou,{},", fmt_pct(self.s_miou)).unwrap();
        writeln!(out, "u_miou,{},", fmt_pct(self.u_miou)).unwrap();
        writeln!(out, "h_miou,{},", fmt_pct(self.h_miou)).unwrap();
        out
    }

    /// Parses the summary lines of [`to_text`](Self::to_text).
    pub fn from_text(text: &str) -> Result<MetricsReport> {
        let mut r = MetricsReport {
            class_names: vec![],
            seen_flags: vec![],
            per_class_iou: vec![],
            s_miou: None,
            u_miou: None,
            h_miou: None,
        };
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let slot = match k.trim() {
                "s_miou" => &mut r.s_miou,
                "u_miou" => &mut r.u_miou,
                "h_miou" => &mut r.h_miou,
                _ => continue,
            };
            let v = v.trim();
            *slot = if v == "n/a" {
                None
            } else {
                Some(v.parse::<f64>().map_err(|_| Error::Data(format!("bad metric value `{v}`")))?)
            };
        }
        Ok(r)
    }
}
