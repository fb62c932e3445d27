//! Per-hand keypoint gesture classifier over {touch, hold, point}.
//!
//! `OutOfView` never reaches the network: an absent hand is classified by rule.

use serde::Deserialize;
use thiserror::Error;

use crate::mlp::{self, GradCheck, Mlp, ModelError, TrainParams, TrainReport};
use crate::types::{GestureClass, HandFrame, Landmark, LANDMARK_COUNT, WRIST};

pub const FEATURE_DIM: usize = 2 * LANDMARK_COUNT;
pub const HIDDEN: usize = 20;

const BUILTIN_MODEL: &str = include_str!("../assets/gesture_model.json");

/// Wrist-relative, max-abs scaled, flattened `x0, y0, ..., x20, y20`.
pub fn preprocess(hand: &HandFrame) -> [f64; FEATURE_DIM] {
    preprocess_points(&hand.landmarks)
}

pub fn preprocess_points(points: &[Landmark; LANDMARK_COUNT]) -> [f64; FEATURE_DIM] {
    let origin = points[WRIST];
    let mut out = [0.0; FEATURE_DIM];
    for (i, p) in points.iter().enumerate() {
        out[2 * i] = p.x - origin.x;
        out[2 * i + 1] = p.y - origin.y;
    }
    let scale = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale > 0.0 {
        out.iter_mut().for_each(|v| *v /= scale);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: GestureClass,
}

impl LabeledSample {
    pub fn from_hand(hand: &HandFrame, label: GestureClass) -> Self {
        Self {
            features: preprocess(hand).to_vec(),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GestureClassifier {
    mlp: Mlp,
}

impl GestureClassifier {
    pub fn new(mlp: Mlp) -> Result<Self, ModelError> {
        if mlp.input_dim() != FEATURE_DIM || mlp.output_dim() != GestureClass::LEARNED.len() {
            return Err(ModelError::Shape(format!(
                "gesture model must map {FEATURE_DIM} -> 3, got {:?}",
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

    /// The model shipped with the library, trained on synthetic poses.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_MODEL).expect("embedded gesture model is valid")
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

    /// Returns the class and its probability. Absent hands are `OutOfView`
    /// with confidence 1.
    pub fn classify(&self, hand: Option<&HandFrame>) -> Result<(GestureClass, f64), ModelError> {
        match hand {
            None => Ok((GestureClass::OutOfView, 1.0)),
            Some(h) => self.classify_features(&preprocess(h)),
        }
    }

    pub fn classify_features(&self, features: &[f64]) -> Result<(GestureClass, f64), ModelError> {
        let probs = self.mlp.predict(features)?;
        let best = mlp::argmax(&probs);
        Ok((GestureClass::LEARNED[best], probs[best]))
    }

    pub fn probabilities(&self, hand: &HandFrame) -> Result<Vec<f64>, ModelError> {
        self.mlp.predict(&preprocess(hand))
    }

    pub fn gradient_check(&self, sample: &LabeledSample) -> Result<GradCheck, ModelError> {
        let label = learned_index(sample.label)?;
        Ok(self.mlp.gradient_check(&sample.features, label, 1e-4))
    }
}

fn learned_index(label: GestureClass) -> Result<usize, ModelError> {
    GestureClass::LEARNED
        .iter()
        .position(|c| *c == label)
        .ok_or_else(|| ModelError::Shape("out-of-view is not a learned label".into()))
}

/// Mini-batch SGD from a seeded initialization.
pub fn train(data: &[LabeledSample], hp: &TrainParams) -> Result<(GestureClassifier, TrainReport), ModelError> {
    let mut set = Vec::with_capacity(data.len());
    for s in data {
        if s.features.len() != FEATURE_DIM {
            return Err(ModelError::Shape(format!(
                "sample has {} features, expected {FEATURE_DIM}",
                s.features.len()
            )));
        }
        set.push((s.features.clone(), learned_index(s.label)?));
    }
    mlp::check_label_coverage(set.iter().map(|(_, y)| *y), 3)?;
    let mut model = Mlp::random(&[FEATURE_DIM, HIDDEN, 3], hp.seed);
    let report = model.fit(&set, hp);
    if model.parameters().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    Ok((GestureClassifier { mlp: model }, report))
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(model: &GestureClassifier, data: &[LabeledSample]) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data {
        if model.classify_features(&s.features)?.0 == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

#[derive(Deserialize)]
struct SampleRecord {
    #[serde(default)]
    features: Option<Vec<f64>>,
    #[serde(default)]
    landmarks: Option<Vec<Landmark>>,
    label: String,
}

/// Reads `{"features": [...42], "label": ...}` or
/// `{"landmarks": [[x, y]...21], "label": ...}` lines.
pub fn parse_training_data(bytes: &[u8]) -> Result<Vec<LabeledSample>, DataError> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(raw).map_err(|source| DataError::Malformed { line, source })?;
        let invalid = |message: String| DataError::Invalid { line, message };
        let label = GestureClass::parse(&rec.label)
            .filter(|c| *c != GestureClass::OutOfView)
            .ok_or_else(|| invalid(format!("label {:?} is not touch, hold or point", rec.label)))?;
        let features = match (rec.features, rec.landmarks) {
            (Some(f), None) => {
                if f.len() != FEATURE_DIM {
                    return Err(invalid(format!("expected {FEATURE_DIM} features, got {}", f.len())));
                }
                f
            }
            (None, Some(l)) => {
                let n = l.len();
                let pts: [Landmark; LANDMARK_COUNT] = l
                    .try_into()
                    .map_err(|_| invalid(format!("landmark count != 21 (got {n})")))?;
                preprocess_points(&pts).to_vec()
            }
            _ => return Err(invalid("need exactly one of features or landmarks".into())),
        };
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature".into()));
        }
        out.push(LabeledSample { features, label });
    }
    Ok(out)
}

pub fn write_training_data(samples: &[LabeledSample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        let rec = serde_json::json!({"features": s.features, "label": s.label.as_str()});
        out.extend_from_slice(rec.to_string().as_bytes());
        out.push(b'\n');
    }
    out
}
