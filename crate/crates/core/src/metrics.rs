//! Lesion detection, segmentation and classification measures, and the
//! protocol comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Image, LesionClass, CYST, METASTASIS};
use crate::error::{Error, Result};
use crate::schedule::Protocol;

/// `2|P ∩ G| / (|P| + |G|)` over non-zero pixels; 1 when both are empty.
pub fn binary_dice(pred: &Image<u8>, gt: &Image<u8>) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "dice of {}x{} and {}x{} masks",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut inter, mut total) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += u64::from(p != 0 && g != 0);
        total += u64::from(p != 0) + u64::from(g != 0);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Most frequent lesion label among the pixels of `labels`; ties go to the
/// smaller label, `None` without lesion pixels.
pub fn majority_lesion_class(labels: &Image<u8>) -> Option<LesionClass> {
    let mut counts = [0usize; 3];
    for &l in &labels.data {
        if (CYST..=METASTASIS).contains(&l) {
            counts[(l - CYST) as usize] += 1;
        }
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|&(_, n)| *n)
        .expect("three classes");
    (n > 0).then(|| LesionClass::from_label(best as u8 + CYST).expect("lesion label"))
}

/// Evaluation record of one test image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub has_overlap: bool,
    /// Lesion-versus-rest Dice.
    pub dice: f64,
    /// `None` for healthy images.
    pub gt_class: Option<LesionClass>,
    pub pred_class: Option<LesionClass>,
}

fn lesion_mask(labels: &Image<u8>) -> Image<u8> {
    Image {
        height: labels.height,
        width: labels.width,
        data: labels.data.iter().map(|&l| u8::from(l >= CYST)).collect(),
    }
}

/// Compares a predicted five-class label map with the ground truth.
pub fn evaluate_image(pred: &Image<u8>, gt: &Image<u8>, gt_class: Option<LesionClass>) -> Result<ImageEval> {
    let (p, g) = (lesion_mask(pred), lesion_mask(gt));
    let dice = binary_dice(&p, &g)?;
    let has_overlap = p.data.iter().zip(&g.data).any(|(&a, &b)| a != 0 && b != 0);
    Ok(ImageEval {
        has_overlap,
        dice,
        gt_class,
        pred_class: majority_lesion_class(pred),
    })
}

fn lesion_bearing(evals: &[ImageEval]) -> impl Iterator<Item = &ImageEval> {
    evals.iter().filter(|e| e.gt_class.is_some())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Fraction of lesion-bearing images whose prediction overlaps the ground truth.
pub fn success_rate(evals: &[ImageEval]) -> f64 {
    mean(lesion_bearing(evals).map(|e| f64::from(u8::from(e.has_overlap))))
}

/// Mean Dice over lesion-bearing images with an overlap; NaN when there are none.
pub fn dice1(evals: &[ImageEval]) -> f64 {
    let v = mean(lesion_bearing(evals).filter(|e| e.has_overlap).map(|e| e.dice));
    if v.is_nan() {
        warn!("no image overlaps its ground truth; dice1 is undefined");
    }
    v
}

/// Mean Dice over all lesion-bearing images, misses counting 0.
pub fn dice2(evals: &[ImageEval]) -> f64 {
    mean(lesion_bearing(evals).map(|e| if e.has_overlap { e.dice } else { 0.0 }))
}

/// Fraction of lesion-bearing images whose majority predicted class is right;
/// images without predicted lesion pixels count as wrong.
pub fn majority_class_accuracy(evals: &[ImageEval]) -> f64 {
    mean(lesion_bearing(evals).map(|e| f64::from(u8::from(e.pred_class.is_some() && e.pred_class == e.gt_class))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub success: f64,
    pub dice1: f64,
    pub dice2: f64,
    pub accuracy: f64,
}

impl Scores {
    pub fn from_evals(evals: &[ImageEval]) -> Self {
        Self {
            success: success_rate(evals),
            dice1: dice1(evals),
            dice2: dice2(evals),
            accuracy: majority_class_accuracy(evals),
        }
    }
}

/// Scores of one `(protocol, fold, seed)` cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub protocol: Protocol,
    pub fold: usize,
    pub seed: u64,
    pub scores: Scores,
}

/// Median ignoring NaN; NaN when nothing remains.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_scores(cells: &[&CellResult]) -> Scores {
    let pick = |f: fn(&Scores) -> f64| median(&cells.iter().map(|c| f(&c.scores)).collect::<Vec<_>>());
    Scores {
        success: pick(|s| s.success),
        dice1: pick(|s| s.dice1),
        dice2: pick(|s| s.dice2),
        accuracy: pick(|s| s.accuracy),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub protocol: Protocol,
    /// `None` for the row aggregated over every fold.
    pub fold: Option<usize>,
    pub cells: usize,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Medians over all cells of each protocol, in table order.
    pub summary: Vec<ReportRow>,
    /// Medians over seeds for each protocol and fold.
    pub per_fold: Vec<ReportRow>,
    /// Cells where dice2 exceeds dice1.
    pub violations: Vec<CellResult>,
}

/// Aggregates cells into one summary row per protocol present (fixed table
/// order) plus per-fold rows.
pub fn build_report(cells: &[CellResult]) -> MetricsReport {
    let mut summary = Vec::new();
    let mut per_fold = Vec::new();
    for protocol in Protocol::REPORT_ORDER {
        let mine: Vec<&CellResult> = cells.iter().filter(|c| c.protocol == protocol).collect();
        if mine.is_empty() {
            continue;
        }
        summary.push(ReportRow {
            protocol,
            fold: None,
            cells: mine.len(),
            scores: median_scores(&mine),
        });
        let mut folds: BTreeMap<usize, Vec<&CellResult>> = BTreeMap::new();
        for c in &mine {
            folds.entry(c.fold).or_default().push(c);
        }
        for (fold, fc) in folds {
            per_fold.push(ReportRow {
                protocol,
                fold: Some(fold),
                cells: fc.len(),
                scores: median_scores(&fc),
            });
        }
    }
    let violations: Vec<CellResult> = cells
        .iter()
        .filter(|c| c.scores.dice2 > c.scores.dice1 + 1e-12)
        .copied()
        .collect();
    for v in &violations {
        warn!(
            "dice2 {} exceeds dice1 {} for {} fold {} seed {}",
            v.scores.dice2, v.scores.dice1, v.protocol, v.fold, v.seed
        );
    }
    MetricsReport {
        summary,
        per_fold,
        violations,
    }
}

fn fmt_score(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "protocol,fold,success,dice1,dice2,acc";

    pub fn row(&self, protocol: Protocol) -> Option<&ReportRow> {
        self.summary.iter().find(|r| r.protocol == protocol)
    }

    /// Summary rows (`fold = all`) followed by per-fold rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in self.summary.iter().chain(&self.per_fold) {
            let fold = r.fold.map_or_else(|| "all".to_string(), |f| f.to_string());
            let s = r.scores;
            let _ = writeln!(
                out,
                "{},{fold},{},{},{},{}",
                r.protocol.name(),
                fmt_score(s.success),
                fmt_score(s.dice1),
                fmt_score(s.dice2),
                fmt_score(s.accuracy)
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8} {:>8} {:>6}", "protocol", "Dice1", "Dice2", "Success", "Accuracy", "cells");
        let num = |v: f64| if v.is_nan() { "-".to_string() } else { format!("{v:.3}") };
        for r in &self.summary {
            let s = r.scores;
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>8} {:>8} {:>8} {:>6}",
                r.protocol.display_name(),
                num(s.dice1),
                num(s.dice2),
                num(s.success),
                num(s.accuracy),
                r.cells
            );
        }
        if self.violations.is_empty() {
            out.push_str("audit: dice2 <= dice1 in every cell\n");
        } else {
            let _ = writeln!(out, "audit: {} cell(s) with dice2 > dice1", self.violations.len());
        }
        out
    }
}
