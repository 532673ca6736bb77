//! Confusion matrix, per-class precision/recall/F1, macro averages and
//! decision rules for turning probabilities into class indices.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Head;
use crate::tensor::{Element, Tensor};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Input(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Input(format!("class pair ({t}, {p}) out of range for {k} classes")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores with zero denominators reported as 0.
pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassScores> = (0..cm.classes())
        .map(|c| {
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            ClassScores {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: cm.row_sum(c),
            }
        })
        .collect();
    let k = per_class.len() as f64;
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    Ok(MetricsReport {
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        accuracy: ratio(cm.trace(), total),
        total,
        per_class,
    })
}

/// Class 1 iff `p >= threshold`, for `[N, 1]` sigmoid outputs.
pub fn classify_threshold<T: Element>(y_hat: &Tensor<T>, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("threshold", format!("{threshold} not in (0, 1)")));
    }
    let (_, k) = y_hat.dims2()?;
    if k != 1 {
        return Err(Error::dim("classify_threshold", format!("expected [N,1], got {k} columns")));
    }
    Ok(y_hat
        .data()
        .iter()
        .map(|p| usize::from(p.as_f64() >= threshold))
        .collect())
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_rows<T: Element>(y_hat: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = y_hat.dims2()?;
    Ok(y_hat
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect())
}

/// Predicted class plus the probability assigned to that class, per row.
pub fn decide<T: Element>(y_hat: &Tensor<T>, head: Head, threshold: f64) -> Result<Vec<(usize, f64)>> {
    match head {
        Head::Sigmoid => Ok(classify_threshold(y_hat, threshold)?
            .into_iter()
            .zip(y_hat.data())
            .map(|(c, p)| {
                let p = p.as_f64();
                (c, if c == 1 { p } else { 1.0 - p })
            })
            .collect()),
        Head::Softmax => {
            let (_, k) = y_hat.dims2()?;
            Ok(argmax_rows(y_hat)?
                .into_iter()
                .zip(y_hat.data().chunks(k))
                .map(|(c, row)| (c, row[c].as_f64()))
                .collect())
        }
    }
}

impl MetricsReport {
    /// `class,precision,recall,f1,support` rows, then macro and accuracy rows.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for (name, s) in class_names.iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{}",
                s.precision, s.recall, s.f1, s.support
            );
        }
        let _ = writeln!(
            out,
            "macro avg,{:.6},{:.6},{:.6},{}",
            self.macro_precision, self.macro_recall, self.macro_f1, self.total
        );
        let _ = writeln!(out, "accuracy,,,{:.6},{}", self.accuracy, self.total);
        out
    }

    /// Aligned table followed by the confusion matrix.
    pub fn to_text(&self, class_names: &[String], cm: &ConfusionMatrix) -> String {
        let width = class_names
            .iter()
            .map(String::len)
            .chain([9, 4])
            .max()
            .unwrap_or(9);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "", "precision", "recall", "f1-score", "support"
        );
        for (name, s) in class_names.iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "{name:>width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                s.precision, s.recall, s.f1, s.support
            );
        }
        let _ = writeln!(
            out,
            "{:>width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            "macro avg", self.macro_precision, self.macro_recall, self.macro_f1, self.total
        );
        let _ = writeln!(
            out,
            "{:>width$}  {:>9}  {:>9}  {:>9.4}  {:>7}",
            "accuracy", "", "", self.accuracy, self.total
        );
        let _ = writeln!(out, "\nconfusion matrix (rows = true, columns = predicted)");
        let _ = write!(out, "{:>width$}", "");
        for name in class_names {
            let _ = write!(out, "  {name:>width$}");
        }
        out.push('\n');
        for (name, row) in class_names.iter().zip(&cm.counts) {
            let _ = write!(out, "{name:>width$}");
            for v in row {
                let _ = write!(out, "  {v:>width$}");
            }
            out.push('\n');
        }
        out
    }
}
