//! Gesture metrics and latency statistics over replay traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendClass;
use crate::trace::TraceRecord;
use crate::types::{GestureClass, Hand, PipelineEvent, Session};

/// Confusion-matrix order.
pub const LABELS: [GestureClass; 4] = [
    GestureClass::Touch,
    GestureClass::Hold,
    GestureClass::Point,
    GestureClass::OutOfView,
];

fn label_index(c: GestureClass) -> usize {
    LABELS.iter().position(|l| *l == c).expect("all classes listed")
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("predictions ({pred}) and ground truth ({gt}) differ in length")]
    LengthMismatch { pred: usize, gt: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// `None` when the class occurs in neither labels nor predictions.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    /// Row = actual, column = predicted.
    pub counts: Vec<Vec<u64>>,
    pub row_percent: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureMetrics {
    pub classes: BTreeMap<String, ClassMetrics>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub confusion: Confusion,
}

pub fn evaluate(pred: &[GestureClass], gt: &[GestureClass]) -> Result<GestureMetrics, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut counts = vec![vec![0u64; LABELS.len()]; LABELS.len()];
    for (p, g) in pred.iter().zip(gt) {
        counts[label_index(*g)][label_index(*p)] += 1;
    }
    let total = pred.len() as u64;
    let correct: u64 = (0..LABELS.len()).map(|i| counts[i][i]).sum();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };

    let mut classes = BTreeMap::new();
    let mut f1s = Vec::new();
    for (i, label) in LABELS.iter().enumerate() {
        let tp = counts[i][i];
        let support: u64 = counts[i].iter().sum();
        let predicted: u64 = counts.iter().map(|row| row[i]).sum();
        let m = if support == 0 && predicted == 0 {
            ClassMetrics {
                precision: None,
                recall: None,
                f1: None,
                support,
            }
        } else {
            let p = ratio(tp, predicted);
            let r = ratio(tp, support);
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            f1s.push(f1);
            ClassMetrics {
                precision: Some(p),
                recall: Some(r),
                f1: Some(f1),
                support,
            }
        };
        classes.insert(label.as_str().to_string(), m);
    }
    let row_percent = counts
        .iter()
        .map(|row| {
            let n: u64 = row.iter().sum();
            row.iter().map(|c| 100.0 * ratio(*c, n)).collect()
        })
        .collect();
    Ok(GestureMetrics {
        classes,
        accuracy: (total > 0).then(|| ratio(correct, total)),
        macro_f1: (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64),
        confusion: Confusion {
            labels: LABELS.iter().map(|l| l.as_str().to_string()).collect(),
            counts,
            row_percent,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub sd_s: f64,
    pub count: u64,
}

impl LatencyStats {
    pub fn from_ms(values: &[u64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let xs: Vec<f64> = values.iter().map(|v| *v as f64 / 1000.0).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self {
            mean_s: mean,
            sd_s: sd,
            count: values.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: BTreeMap<String, ClassMetrics>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub confusion: Confusion,
    /// Event to spoken start, per description kind.
    pub latency: BTreeMap<String, LatencyStats>,
    /// Backend service time, per backend class.
    pub model_latency: BTreeMap<String, LatencyStats>,
    pub throughput_fps: Option<f64>,
    pub frames: u64,
}

/// Per-frame stable states rebuilt from `HandStateChanged` events, paired
/// with ground truth. Frames or hands without labels are skipped.
pub fn stable_pairs(session: &Session, trace: &[TraceRecord]) -> (Vec<GestureClass>, Vec<GestureClass>) {
    let mut changes: BTreeMap<u64, Vec<(Hand, GestureClass)>> = BTreeMap::new();
    for ev in trace.iter().filter_map(TraceRecord::as_event) {
        if let PipelineEvent::HandStateChanged { hand, to, frame_id, .. } = ev {
            changes.entry(*frame_id).or_default().push((*hand, *to));
        }
    }
    let mut state = [GestureClass::OutOfView; 2];
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for f in &session.frames {
        if let Some(cs) = changes.get(&f.frame_id) {
            for (h, to) in cs {
                state[h.index()] = *to;
            }
        }
        if let Some(labels) = &f.gt {
            for h in Hand::ALL {
                if let Some(g) = labels.hand(h) {
                    pred.push(state[h.index()]);
                    gt.push(g);
                }
            }
        }
    }
    (pred, gt)
}

pub fn build_report(session: &Session, trace: &[TraceRecord], throughput_fps: Option<f64>) -> EvalReport {
    let (pred, gt) = stable_pairs(session, trace);
    let metrics = evaluate(&pred, &gt).expect("pairs have equal length");
    let mut by_kind: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for d in trace.iter().filter_map(TraceRecord::as_description) {
        if let Some(ms) = d.latency_ms() {
            by_kind.entry(d.kind.as_str().to_string()).or_default().push(ms);
        }
    }
    let mut by_backend: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for g in trace.iter().filter_map(TraceRecord::as_generation) {
        by_backend
            .entry(g.backend.as_str().to_string())
            .or_default()
            .push(g.latency_ms);
    }
    let stats = |m: BTreeMap<String, Vec<u64>>| {
        m.into_iter()
            .filter_map(|(k, v)| LatencyStats::from_ms(&v).map(|s| (k, s)))
            .collect()
    };
    EvalReport {
        classes: metrics.classes,
        accuracy: metrics.accuracy,
        macro_f1: metrics.macro_f1,
        confusion: metrics.confusion,
        latency: stats(by_kind),
        model_latency: stats(by_backend),
        throughput_fps,
        frames: session.frames.len() as u64,
    }
}

pub fn backend_stats(report: &EvalReport, class: BackendClass) -> Option<LatencyStats> {
    report.model_latency.get(class.as_str()).copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use GestureClass::*;

    #[test]
    fn four_frame_example() {
        let m = evaluate(&[Hold, Touch, Touch, Point], &[Hold, Hold, Touch, Point]).unwrap();
        assert_eq!(m.accuracy, Some(0.75));
        let hold = &m.classes["hold"];
        assert_eq!((hold.precision, hold.recall), (Some(1.0), Some(0.5)));
        assert!((hold.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let touch = &m.classes["touch"];
        assert_eq!((touch.precision, touch.recall), (Some(0.5), Some(1.0)));
        assert_eq!(m.classes["point"].f1, Some(1.0));
        assert_eq!(m.classes["out"].f1, None);
        assert!((m.macro_f1.unwrap() - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(m.confusion.row_percent[1], vec![50.0, 50.0, 0.0, 0.0]);
    }

    #[test]
    fn perfect_and_empty() {
        let xs = [Touch, Hold, Point, OutOfView, Hold];
        let m = evaluate(&xs, &xs).unwrap();
        assert!(m.classes.values().all(|c| c.f1 == Some(1.0)));
        for (i, row) in m.confusion.row_percent.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 100.0 } else { 0.0 });
            }
        }
        let e = evaluate(&[], &[]).unwrap();
        assert_eq!((e.accuracy, e.macro_f1), (None, None));
        assert_eq!(
            evaluate(&[Hold], &[]),
            Err(EvalError::LengthMismatch { pred: 1, gt: 0 })
        );
    }

    #[test]
    fn latency_stats() {
        let s = LatencyStats::from_ms(&[1000, 2000, 3000]).unwrap();
        assert_eq!((s.mean_s, s.sd_s, s.count), (2.0, 1.0, 3));
        assert_eq!(LatencyStats::from_ms(&[500]).unwrap().sd_s, 0.0);
        assert!(LatencyStats::from_ms(&[]).is_none());
    }
}
