//! Confusion matrices and accuracy / precision / recall / F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    /// From explicit counts; every row must have one entry per class.
    pub fn from_counts(counts: Vec<Vec<u64>>, class_names: Vec<String>) -> Result<Self> {
        let k = counts.len();
        if class_names.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::contract(format!(
                "confusion matrix must be {k}x{k} with {k} class names"
            )));
        }
        Ok(Self { counts, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Header `true\pred,<names...>`, then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for n in &self.class_names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let class_names: Vec<String> = reader
            .headers()
            .map_err(|e| Error::format(0, e.to_string()))?
            .iter()
            .skip(1)
            .map(str::to_string)
            .collect();
        let mut counts = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(i as u64 + 2, e.to_string()))?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::format(i as u64 + 2, format!("bad count: {e}")))?;
            counts.push(row);
        }
        Self::from_counts(counts, class_names)
    }
}

/// Count `(true, predicted)` pairs.
pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    let names = (0..k).map(|c| c.to_string()).collect();
    confusion_named(truth, predicted, names)
}

pub fn confusion_named(truth: &[usize], predicted: &[usize], class_names: Vec<String>) -> Result<ConfusionMatrix> {
    let k = class_names.len();
    if truth.len() != predicted.len() {
        return Err(Error::contract(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::contract(format!("label pair ({t}, {p}) outside {k} classes")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts, class_names })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over classes.
    #[default]
    Macro,
    /// Mean weighted by true-class support.
    Weighted,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "weighted" => Ok(Averaging::Weighted),
            _ => Err(Error::Config(format!("unknown averaging {s:?}; expected macro or weighted"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub averaging: Averaging,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub false_negatives: Vec<u64>,
    /// Classes whose precision or recall had a zero denominator and was set to 0.
    pub zero_division: Vec<String>,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class one-vs-rest counts and the averaged scores. Precision or recall
/// with a zero denominator is reported as 0 and listed in `zero_division`.
pub fn metrics(cm: &ConfusionMatrix, averaging: Averaging) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("confusion matrix is empty"));
    }
    let k = cm.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let mut zero_division = Vec::new();
    for c in 0..k {
        let tp = cm.counts[c][c];
        let support: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        if precision.is_none() || recall.is_none() {
            zero_division.push(cm.class_names[c].clone());
        }
        let (precision, recall) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            name: cm.class_names[c].clone(),
            tp,
            fp,
            fn_,
            tn: total - tp - fp - fn_,
            support,
            precision,
            recall,
            f1,
        });
    }
    // Class-order sums divided once, so results are reproducible exactly.
    let avg = |f: fn(&ClassMetrics) -> f64| match averaging {
        Averaging::Macro => per_class.iter().map(f).sum::<f64>() / k as f64,
        Averaging::Weighted => per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64,
    };
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        averaging,
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
        false_negatives: per_class_fn(cm),
        per_class,
        zero_division,
        total,
    })
}

/// Row sum minus the diagonal entry, per class.
pub fn per_class_fn(cm: &ConfusionMatrix) -> Vec<u64> {
    cm.counts
        .iter()
        .enumerate()
        .map(|(c, row)| row.iter().sum::<u64>() - row[c])
        .collect()
}

/// One results-table row: model, parameter count, alpha, temperature and
/// the four scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(rename = "Model")]
    pub model: String,
    #[serde(rename = "Parameters")]
    pub parameters: usize,
    #[serde(rename = "Alpha")]
    pub alpha: f64,
    #[serde(rename = "Temperature")]
    pub temperature: f64,
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

pub const RESULT_COLUMNS: [&str; 8] = [
    "Model",
    "Parameters",
    "Alpha",
    "Temperature",
    "Accuracy",
    "Precision",
    "Recall",
    "F1",
];

impl ResultRow {
    pub fn new(model: impl Into<String>, parameters: usize, alpha: f64, temperature: f64, report: &MetricsReport) -> Self {
        Self {
            model: model.into(),
            parameters,
            alpha,
            temperature,
            accuracy: report.accuracy,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
        }
    }
}

/// Rows as CSV with the header in [`RESULT_COLUMNS`] order.
pub fn write_result_rows(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(RESULT_COLUMNS).map_err(|e| Error::Data(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parse result rows; the header must match [`RESULT_COLUMNS`]. Errors carry
/// the 1-based line number.
pub fn read_result_rows(text: &str) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::format(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != RESULT_COLUMNS {
        return Err(Error::format(1, format!("expected header {}", RESULT_COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: ResultRow = rec.deserialize(None).map_err(|e| Error::format(line, e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}
