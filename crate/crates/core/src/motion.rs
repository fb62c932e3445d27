//! Fingertip trajectory classifier over {static, up, down}.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gesture::DataError;
use crate::mlp::{self, GradCheck, Mlp, ModelError, TrainParams, TrainReport};
use crate::types::Landmark;

pub const WINDOW: usize = 16;
pub const FEATURE_DIM: usize = 2 * WINDOW;
pub const HIDDEN: usize = 20;
/// Lower bound on the scale divisor. Keeps sub-threshold jitter small instead
/// of stretching it to full range.
pub const SCALE_FLOOR: f64 = 0.05;

const BUILTIN_MODEL: &str = include_str!("../assets/motion_model.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    Static,
    Up,
    Down,
}

impl MotionClass {
    pub const ALL: [MotionClass; 3] = [MotionClass::Static, MotionClass::Up, MotionClass::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotionClass::Static => "static",
            MotionClass::Up => "up",
            MotionClass::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("trajectory window has {have} of {WINDOW} positions")]
    InsufficientHistory { have: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The last 16 fingertip positions, oldest first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryWindow {
    points: VecDeque<Landmark>,
}

impl TrajectoryWindow {
    pub fn new() -> Self {
        Self {
            points: VecDeque::with_capacity(WINDOW),
        }
    }

    pub fn push(&mut self, p: Landmark) {
        if self.points.len() == WINDOW {
            self.points.pop_front();
        }
        self.points.push_back(p);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.points.len() == WINDOW
    }

    pub fn clear(&mut self) {
        self.points.clear();
    }

    pub fn points(&self) -> impl Iterator<Item = &Landmark> {
        self.points.iter()
    }
}

pub fn push_position(mut window: TrajectoryWindow, fingertip: Landmark) -> TrajectoryWindow {
    window.push(fingertip);
    window
}

/// Subtracts the first position, divides by `max(max_abs, SCALE_FLOOR)`.
pub fn preprocess<'a>(points: impl IntoIterator<Item = &'a Landmark>) -> Vec<f64> {
    let pts: Vec<&Landmark> = points.into_iter().collect();
    let Some(first) = pts.first().copied().copied() else {
        return Vec::new();
    };
    let mut out: Vec<f64> = pts.iter().flat_map(|p| [p.x - first.x, p.y - first.y]).collect();
    let max_abs = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        let scale = max_abs.max(SCALE_FLOOR);
        out.iter_mut().for_each(|v| *v /= scale);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub features: Vec<f64>,
    pub label: MotionClass,
}

impl MotionSample {
    pub fn from_points(points: &[Landmark], label: MotionClass) -> Self {
        Self {
            features: preprocess(points),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionClassifier {
    mlp: Mlp,
}

impl MotionClassifier {
    pub fn new(mlp: Mlp) -> Result<Self, ModelError> {
        if mlp.input_dim() != FEATURE_DIM || mlp.output_dim() != 3 {
            return Err(ModelError::Shape(format!(
                "motion model must map {FEATURE_DIM} -> 3, got {:?}",
                mlp.dims()
            )));
        }
        Ok(Self { mlp })
    }

    pub fn zeros() -> Self {
        Self {
            mlp: Mlp::zeros(&[FEATURE_DIM, HIDDEN, 3]),
        }
    }

    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_MODEL).expect("embedded motion model is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Self::new(Mlp::from_json(text)?)
    }

    pub fn to_json(&self) -> String {
        self.mlp.to_json()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn classify(&self, window: &TrajectoryWindow) -> Result<MotionClass, MotionError> {
        if !window.is_full() {
            return Err(MotionError::InsufficientHistory { have: window.len() });
        }
        Ok(self.classify_features(&preprocess(window.points()))?)
    }

    pub fn classify_features(&self, features: &[f64]) -> Result<MotionClass, ModelError> {
        let probs = self.mlp.predict(features)?;
        Ok(MotionClass::ALL[mlp::argmax(&probs)])
    }

    pub fn gradient_check(&self, sample: &MotionSample) -> GradCheck {
        self.mlp.gradient_check(&sample.features, sample.label.index(), 1e-4)
    }
}

pub fn classify_motion(model: &MotionClassifier, window: &TrajectoryWindow) -> Result<MotionClass, MotionError> {
    model.classify(window)
}

pub fn train(data: &[MotionSample], hp: &TrainParams) -> Result<(MotionClassifier, TrainReport), ModelError> {
    let mut set = Vec::with_capacity(data.len());
    for s in data {
        if s.features.len() != FEATURE_DIM {
            return Err(ModelError::Shape(format!(
                "sample has {} features, expected {FEATURE_DIM}",
                s.features.len()
            )));
        }
        set.push((s.features.clone(), s.label.index()));
    }
    mlp::check_label_coverage(set.iter().map(|(_, y)| *y), 3)?;
    let mut model = Mlp::random(&[FEATURE_DIM, HIDDEN, 3], hp.seed);
    let report = model.fit(&set, hp);
    if model.parameters().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    Ok((MotionClassifier { mlp: model }, report))
}

#[derive(Deserialize)]
struct MotionRecord {
    #[serde(default)]
    features: Option<Vec<f64>>,
    #[serde(default)]
    points: Option<Vec<Landmark>>,
    label: String,
}

/// Reads `{"features": [...32], "label": ...}` or
/// `{"points": [[x, y]...16], "label": "static|up|down"}` lines.
pub fn parse_training_data(bytes: &[u8]) -> Result<Vec<MotionSample>, DataError> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: MotionRecord = serde_json::from_str(raw).map_err(|source| DataError::Malformed { line, source })?;
        let invalid = |message: String| DataError::Invalid { line, message };
        let label = MotionClass::parse(&rec.label)
            .ok_or_else(|| invalid(format!("label {:?} is not static, up or down", rec.label)))?;
        let features = match (rec.features, rec.points) {
            (Some(f), None) => f,
            (None, Some(p)) if p.len() == WINDOW => preprocess(&p),
            (None, Some(p)) => return Err(invalid(format!("expected {WINDOW} points, got {}", p.len()))),
            _ => return Err(invalid("need exactly one of features or points".into())),
        };
        if features.len() != FEATURE_DIM || features.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("expected {FEATURE_DIM} finite features")));
        }
        out.push(MotionSample { features, label });
    }
    Ok(out)
}

pub fn write_training_data(samples: &[MotionSample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        let rec = serde_json::json!({"features": s.features, "label": s.label.as_str()});
        out.extend_from_slice(rec.to_string().as_bytes());
        out.push(b'\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_semantics() {
        let mut w = TrajectoryWindow::new();
        w = push_position(w, Landmark::new(0.1, 0.1));
        assert_eq!(w.len(), 1);
        for i in 2..=20 {
            w = push_position(w, Landmark::new(i as f64 / 100.0, 0.5));
        }
        assert_eq!(w.len(), 16);
        let xs: Vec<f64> = w.points().map(|p| p.x).collect();
        let expect: Vec<f64> = (5..=20).map(|i| i as f64 / 100.0).collect();
        assert_eq!(xs, expect);
    }

    #[test]
    fn short_window_is_an_error() {
        let mut w = TrajectoryWindow::new();
        for _ in 0..15 {
            w.push(Landmark::new(0.5, 0.5));
        }
        let err = MotionClassifier::zeros().classify(&w).unwrap_err();
        assert!(matches!(err, MotionError::InsufficientHistory { have: 15 }));
    }

    #[test]
    fn static_window_preprocesses_to_zero() {
        let pts = vec![Landmark::new(0.3, 0.7); WINDOW];
        assert!(preprocess(&pts).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn translation_invariant_features() {
        let a: Vec<Landmark> = (0..16).map(|i| Landmark::new(0.2, 0.8 - 0.02 * i as f64)).collect();
        let b: Vec<Landmark> = a.iter().map(|p| Landmark::new(p.x + 0.1, p.y - 0.05)).collect();
        for (x, y) in preprocess(&a).iter().zip(preprocess(&b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_ties_to_static() {
        let mut w = TrajectoryWindow::new();
        for i in 0..16 {
            w.push(Landmark::new(0.5, 0.5 + 0.01 * i as f64));
        }
        assert_eq!(MotionClassifier::zeros().classify(&w).unwrap(), MotionClass::Static);
    }
}
