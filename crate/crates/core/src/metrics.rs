//! Keypoint-transfer evaluation: PCK, and transfer precision/recall with APK.
//!
//! Conventions: a prediction is correct when its error is at most
//! `alpha · max(h, w)` (inclusive), and threshold `t` keeps predictions with
//! confidence strictly greater than `t`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    pub pred: [f64; 2],
    pub confidence: f64,
    /// `None` when the keypoint has no ground truth in the target.
    pub gt: Option<[f64; 2]>,
    pub height: usize,
    pub width: usize,
}

impl EvalRecord {
    pub fn radius(&self, alpha: f64) -> f64 {
        alpha * self.height.max(self.width) as f64
    }

    pub fn error(&self) -> Option<f64> {
        self.gt.map(|g| (self.pred[0] - g[0]).hypot(self.pred[1] - g[1]))
    }

    pub fn is_correct(&self, alpha: f64) -> bool {
        self.error().is_some_and(|e| e <= self.radius(alpha))
    }
}

/// Fraction of records with ground truth whose prediction is within the
/// PCK radius.
pub fn pck(records: &[EvalRecord], alpha: f64) -> Result<f64> {
    let counted: Vec<&EvalRecord> = records.iter().filter(|r| r.gt.is_some()).collect();
    if counted.is_empty() {
        return Err(CsmError::Undefined("PCK over zero records with ground truth".into()));
    }
    let correct = counted.iter().filter(|r| r.is_correct(alpha)).count();
    Ok(correct as f64 / counted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// Ordered by increasing threshold; the first point (threshold −∞)
    /// keeps every prediction.
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Trapezoidal area under precision as a function of recall, walking the
/// curve from the highest threshold down.
pub fn trapezoid_ap(points: &[PrPoint]) -> f64 {
    let mut pts: Vec<&PrPoint> = points.iter().collect();
    pts.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
    pts.windows(2)
        .map(|w| (w[1].recall - w[0].recall) * (w[0].precision + w[1].precision) / 2.0)
        .sum()
}

/// Transfer precision/recall curve over every distinct confidence threshold
/// and its average precision.
pub fn apk(records: &[EvalRecord], alpha: f64, n_pair: usize) -> Result<PrCurve> {
    if n_pair == 0 {
        return Err(CsmError::Undefined("APK with zero ground-truth correspondences".into()));
    }
    if let Some(r) = records.iter().find(|r| !r.confidence.is_finite()) {
        return Err(CsmError::InvalidArgument(format!("record {} has non-finite confidence", r.id)));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let total_tp = sorted.iter().filter(|r| r.is_correct(alpha)).count();
    let mut points = Vec::with_capacity(sorted.len() + 1);
    let (mut tp, mut kept) = (total_tp, sorted.len());
    let push = |points: &mut Vec<PrPoint>, t: f64, tp: usize, kept: usize| {
        points.push(PrPoint {
            threshold: t,
            precision: if kept == 0 { 1.0 } else { tp as f64 / kept as f64 },
            recall: tp as f64 / n_pair as f64,
        });
    };
    push(&mut points, f64::NEG_INFINITY, tp, kept);
    // Raising the threshold to a confidence drops every record at it.
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == c {
            kept -= 1;
            if sorted[i].is_correct(alpha) {
                tp -= 1;
            }
            i += 1;
        }
        push(&mut points, c, tp, kept);
    }
    let ap = trapezoid_ap(&points);
    Ok(PrCurve { points, ap })
}

#[derive(Debug, Serialize, Deserialize)]
struct PrRow {
    threshold: f64,
    precision: f64,
    recall: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub pck: f64,
}

/// Writes the curve as CSV (`threshold,precision,recall`).
pub fn write_pr_curve(curve: &PrCurve, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    w.write_record(["threshold", "precision", "recall"]).map_err(|e| csv_io(path, e))?;
    for p in &curve.points {
        w.serialize(PrRow {
            threshold: p.threshold,
            precision: p.precision,
            recall: p.recall,
        })
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| CsmError::io(path, e))
}

/// Reads a curve written by [`write_pr_curve`] and recomputes its AP.
pub fn read_pr_curve(path: &Path) -> Result<PrCurve> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let points = r
        .deserialize::<PrRow>()
        .map(|row| {
            row.map(|p| PrPoint {
                threshold: p.threshold,
                precision: p.precision,
                recall: p.recall,
            })
            .map_err(|e| csv_io(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrCurve {
        ap: trapezoid_ap(&points),
        points,
    })
}

pub fn write_summary(summary: &EvalSummary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, text).map_err(|e| CsmError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> CsmError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(err) => CsmError::io(path, err),
            _ => unreachable!(),
        }
    } else {
        CsmError::Csv(e)
    }
}
