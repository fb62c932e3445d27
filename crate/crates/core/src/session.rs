//! Line-delimited JSON session format.
//!
//! One frame record per line:
//!
//! ```text
//! {"frame_id": 3, "t_ms": 500, "left": {"landmarks": [[x, y], ...21]}, "right": null,
//!  "image": "frames/0003.png", "events": [{"type": "query", "text": "..."}],
//!  "gt": {"left": "hold", "right": "out"}, "contact": {...}, "embedding": [...]}
//! ```
//!
//! Only `frame_id` and `t_ms` are required. Blank lines are ignored.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    ContactInfo, Frame, GroundTruth, Hand, HandFrame, InjectedEvent, Landmark, Session, LANDMARK_COUNT,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SessionError {
    pub fn line(&self) -> Option<usize> {
        match self {
            SessionError::Malformed { line, .. } | SessionError::Invalid { line, .. } => Some(*line),
            SessionError::Io(_) => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HandRecord {
    landmarks: Vec<Landmark>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u64,
    t_ms: u64,
    #[serde(default)]
    left: Option<HandRecord>,
    #[serde(default)]
    right: Option<HandRecord>,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    events: Vec<InjectedEvent>,
    #[serde(default)]
    gt: Option<GroundTruth>,
    #[serde(default)]
    contact: Option<ContactInfo>,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
}

/// Incremental validator for session lines. Used both for whole files and
/// for streams arriving over standard input.
#[derive(Debug, Default)]
pub struct FrameParser {
    line: usize,
    last: Option<(u64, u64)>,
}

impl FrameParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses one line. Returns `Ok(None)` for blank lines.
    pub fn parse_line(&mut self, text: &str) -> Result<Option<Frame>, SessionError> {
        self.line += 1;
        let line = self.line;
        if text.trim().is_empty() {
            return Ok(None);
        }
        let record: FrameRecord =
            serde_json::from_str(text).map_err(|source| SessionError::Malformed { line, source })?;
        let invalid = |message: String| SessionError::Invalid { line, message };

        if let Some((last_id, last_t)) = self.last {
            if record.frame_id <= last_id {
                return Err(invalid(format!(
                    "frame_id {} does not increase (previous {last_id})",
                    record.frame_id
                )));
            }
            if record.t_ms <= last_t {
                return Err(invalid(format!(
                    "non-monotonic t_ms {} (previous {last_t})",
                    record.t_ms
                )));
            }
        }

        let left = record
            .left
            .map(|h| hand_from_record(Hand::Left, h))
            .transpose()
            .map_err(invalid)?;
        let right = record
            .right
            .map(|h| hand_from_record(Hand::Right, h))
            .transpose()
            .map_err(invalid)?;

        if let Some(contact) = &record.contact {
            for hand in Hand::ALL {
                if let Some(c) = contact.hand(hand) {
                    if c.object_box.is_some() && !c.in_contact {
                        return Err(invalid(format!(
                            "{} contact has an object box but in_contact is false",
                            hand.as_str()
                        )));
                    }
                }
            }
        }
        if let Some(e) = &record.embedding {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(invalid("embedding contains non-finite values".into()));
            }
        }
        for ev in &record.events {
            let InjectedEvent::Query { text } = ev;
            if text.trim().is_empty() {
                return Err(invalid("query event with empty text".into()));
            }
        }

        self.last = Some((record.frame_id, record.t_ms));
        Ok(Some(Frame {
            frame_id: record.frame_id,
            t_ms: record.t_ms,
            left,
            right,
            image: record.image,
            injected: record.events,
            gt: record.gt,
            contact: record.contact,
            embedding: record.embedding,
        }))
    }
}

fn hand_from_record(side: Hand, record: HandRecord) -> Result<HandFrame, String> {
    let landmarks: [Landmark; LANDMARK_COUNT] = record
        .landmarks
        .try_into()
        .map_err(|v: Vec<Landmark>| format!("{} hand: landmark count != 21 (got {})", side.as_str(), v.len()))?;
    if let Some((i, l)) = landmarks.iter().enumerate().find(|(_, l)| !l.in_unit_square()) {
        return Err(format!(
            "{} hand: landmark {i} ({}, {}) outside [0, 1]",
            side.as_str(),
            l.x,
            l.y
        ));
    }
    Ok(HandFrame::new(side, landmarks))
}

/// Parses a whole session, preserving record order.
pub fn parse_session(bytes: &[u8]) -> Result<Session, SessionError> {
    read_session(bytes)
}

pub fn read_session(reader: impl BufRead) -> Result<Session, SessionError> {
    let mut parser = FrameParser::new();
    let mut frames = Vec::new();
    for line in reader.lines() {
        if let Some(frame) = parser.parse_line(&line?)? {
            frames.push(frame);
        }
    }
    Ok(Session { frames })
}

/// Serializes one frame as a single JSON line (without the newline).
pub fn frame_to_json(frame: &Frame) -> String {
    let to_record = |h: &HandFrame| HandRecord {
        landmarks: h.landmarks.to_vec(),
    };
    let record = FrameRecord {
        frame_id: frame.frame_id,
        t_ms: frame.t_ms,
        left: frame.left.as_ref().map(to_record),
        right: frame.right.as_ref().map(to_record),
        image: frame.image.clone(),
        events: frame.injected.clone(),
        gt: frame.gt,
        contact: frame.contact.clone(),
        embedding: frame.embedding.clone(),
    };
    serde_json::to_string(&record).expect("frame records always serialize")
}

pub fn serialize_session(session: &Session) -> Vec<u8> {
    let mut out = Vec::new();
    for frame in &session.frames {
        out.extend_from_slice(frame_to_json(frame).as_bytes());
        out.push(b'\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn landmarks_json(n: usize) -> String {
        let pts: Vec<String> = (0..n).map(|i| format!("[{}, 0.5]", 0.2 + 0.01 * i as f64)).collect();
        format!("[{}]", pts.join(","))
    }

    #[test]
    fn empty_input_is_empty_session() {
        assert_eq!(parse_session(b"").unwrap().frames.len(), 0);
        assert_eq!(parse_session(b"\n  \n").unwrap().frames.len(), 0);
    }

    #[test]
    fn minimal_left_hand_record() {
        let line = format!(
            r#"{{"frame_id": 1, "t_ms": 0, "left": {{"landmarks": {}}}, "right": null}}"#,
            landmarks_json(21)
        );
        let s = parse_session(line.as_bytes()).unwrap();
        assert_eq!(s.frames.len(), 1);
        assert!(s.frames[0].left.is_some());
        assert!(s.frames[0].right.is_none());
        assert_eq!(s.frames[0].left.as_ref().unwrap().side, Hand::Left);
    }

    #[test]
    fn twenty_landmarks_rejected() {
        let line = format!(
            r#"{{"frame_id": 1, "t_ms": 0, "left": {{"landmarks": {}}}}}"#,
            landmarks_json(20)
        );
        let err = parse_session(line.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("landmark count != 21"), "{err}");
        assert_eq!(err.line(), Some(1));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let input = b"{\"frame_id\": 1, \"t_ms\": 0}\n{not json\n";
        let err = parse_session(input).unwrap_err();
        assert_eq!(err.line(), Some(2));
        assert!(matches!(err, SessionError::Malformed { .. }));
    }

    #[test]
    fn non_monotonic_time_rejected() {
        let input = b"{\"frame_id\": 1, \"t_ms\": 100}\n{\"frame_id\": 2, \"t_ms\": 100}\n";
        let err = parse_session(input).unwrap_err();
        assert_eq!(err.line(), Some(2));
        assert!(err.to_string().contains("non-monotonic t_ms"));
    }

    #[test]
    fn box_without_contact_rejected() {
        let input = br#"{"frame_id": 1, "t_ms": 0, "contact": {"left": {"in_contact": false, "box": [0,0,1,1]}}}"#;
        assert!(parse_session(input).is_err());
    }

    #[test]
    fn out_of_range_landmark_rejected() {
        let mut pts: Vec<String> = (0..21).map(|_| "[0.5, 0.5]".to_string()).collect();
        pts[3] = "[1.2, 0.5]".into();
        let line = format!(
            r#"{{"frame_id": 1, "t_ms": 0, "right": {{"landmarks": [{}]}}}}"#,
            pts.join(",")
        );
        let err = parse_session(line.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("outside [0, 1]"));
    }
}
