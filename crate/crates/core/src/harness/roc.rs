//! ROC curves over an ingress × egress score matrix.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RocError {
    #[error("score matrix is empty")]
    Empty,
    #[error("row {row} has {len} scores, expected {expected}")]
    Ragged {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("truth has {truth} entries for {rows} rows")]
    TruthLength { truth: usize, rows: usize },
    #[error("truth for row {row} points at column {col}, matrix has {cols}")]
    TruthOutOfRange { row: usize, col: usize, cols: usize },
    #[error("score at ({row}, {col}) is NaN")]
    NaN { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Pairs scoring at or above this value are flagged as correlated.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Sweeps every distinct score as a threshold, highest first. `truth[i]` is
/// the egress column of ingress row `i`; every other cell is an irrelevant
/// pair. The curve starts at (0, 0) with an infinite threshold. With a single
/// column there are no irrelevant pairs and FPR stays 0.
pub fn roc(scores: &[Vec<f64>], truth: &[usize]) -> Result<RocCurve, RocError> {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(RocError::Empty);
    }
    if truth.len() != rows {
        return Err(RocError::TruthLength {
            truth: truth.len(),
            rows,
        });
    }
    let mut cells = Vec::with_capacity(rows * cols);
    for (row, r) in scores.iter().enumerate() {
        if r.len() != cols {
            return Err(RocError::Ragged {
                row,
                len: r.len(),
                expected: cols,
            });
        }
        if truth[row] >= cols {
            return Err(RocError::TruthOutOfRange {
                row,
                col: truth[row],
                cols,
            });
        }
        for (col, &s) in r.iter().enumerate() {
            if s.is_nan() {
                return Err(RocError::NaN { row, col });
            }
            cells.push((s, truth[row] == col));
        }
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = rows as f64;
    let negatives = (rows * cols - rows) as f64;
    let rate = |k: usize, total: f64| if total == 0.0 { 0.0 } else { k as f64 / total };

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < cells.len() {
        let threshold = cells[i].0;
        while i < cells.len() && cells[i].0 == threshold {
            if cells[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: rate(fp, negatives),
            tpr: rate(tp, positives),
        });
    }
    Ok(RocCurve { points })
}

impl RocCurve {
    /// Highest TPR reached at an FPR not above `fpr_target`, reading the
    /// curve as a step function.
    pub fn tpr_at_fpr(&self, fpr_target: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr <= fpr_target)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }

    /// Area under the curve by the trapezoid rule.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    /// Writes `threshold,fpr,tpr` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            writer.write_record([
                p.threshold.to_string(),
                p.fpr.to_string(),
                p.tpr.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn tpr_at_fpr(curve: &RocCurve, fpr_target: f64) -> f64 {
    curve.tpr_at_fpr(fpr_target)
}
