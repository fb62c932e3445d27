//! Event trace and transcript records.
//!
//! A trace line is `{"t_ms": ..., "type": "...", ...payload}` where the type is
//! one of the pipeline event names, `description` (emitted when narration of a
//! description ends) or `generation` (emitted when a backend call completes).
//! Field order is fixed by declaration order, so output is deterministic.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendClass;
use crate::types::{Description, DescriptionKind, PipelineEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationOutcome {
    /// The result reached the orchestrator and was accepted.
    Delivered,
    /// The result arrived for a superseded keyframe and was discarded.
    Dropped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub backend: BackendClass,
    pub kind: Option<DescriptionKind>,
    pub keyframe: Option<u64>,
    pub latency_ms: u64,
    pub outcome: GenerationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceExtra {
    Description(Description),
    Generation(GenerationRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceBody {
    Event(PipelineEvent),
    Extra(TraceExtra),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_ms: u64,
    #[serde(flatten)]
    pub body: TraceBody,
}

impl TraceRecord {
    pub fn event(t_ms: u64, event: PipelineEvent) -> Self {
        Self {
            t_ms,
            body: TraceBody::Event(event),
        }
    }

    pub fn description(t_ms: u64, d: Description) -> Self {
        Self {
            t_ms,
            body: TraceBody::Extra(TraceExtra::Description(d)),
        }
    }

    pub fn generation(t_ms: u64, g: GenerationRecord) -> Self {
        Self {
            t_ms,
            body: TraceBody::Extra(TraceExtra::Generation(g)),
        }
    }

    pub fn as_event(&self) -> Option<&PipelineEvent> {
        match &self.body {
            TraceBody::Event(e) => Some(e),
            _ => None,
        }
    }

    pub fn as_description(&self) -> Option<&Description> {
        match &self.body {
            TraceBody::Extra(TraceExtra::Description(d)) => Some(d),
            _ => None,
        }
    }

    pub fn as_generation(&self) -> Option<&GenerationRecord> {
        match &self.body {
            TraceBody::Extra(TraceExtra::Generation(g)) => Some(g),
            _ => None,
        }
    }
}

/// One spoken line of the transcript. `t_ms` is the speech onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub t_ms: u64,
    pub kind: DescriptionKind,
    pub text: String,
    pub keyframe: Option<u64>,
    pub latency_ms: u64,
    pub interrupted: bool,
}

impl TranscriptRecord {
    /// Returns `None` for descriptions that never started speaking.
    pub fn from_description(d: &Description) -> Option<Self> {
        let start = d.spoken_start_t_ms?;
        Some(Self {
            t_ms: start,
            kind: d.kind,
            text: d.text.clone(),
            keyframe: d.keyframe_id,
            latency_ms: start.saturating_sub(d.event_t_ms),
            interrupted: d.interrupted,
        })
    }
}

#[derive(Debug, Error)]
#[error("line {line}: {source}")]
pub struct JsonlError {
    pub line: usize,
    #[source]
    pub source: serde_json::Error,
}

pub fn write_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("trace records always serialize");
        out.push(b'\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>, JsonlError> {
    let text = String::from_utf8_lossy(bytes);
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| JsonlError { line: i + 1, source }))
        .collect()
}

pub fn serialize_events(records: &[TraceRecord]) -> Vec<u8> {
    write_jsonl(records)
}

pub fn parse_events(bytes: &[u8]) -> Result<Vec<TraceRecord>, JsonlError> {
    read_jsonl(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GestureClass, Hand};

    #[test]
    fn empty_list_serializes_to_nothing() {
        assert!(serialize_events(&[]).is_empty());
    }

    #[test]
    fn hand_state_line_carries_schema_fields() {
        let rec = TraceRecord::event(
            500,
            PipelineEvent::HandStateChanged {
                hand: Hand::Right,
                from: GestureClass::OutOfView,
                to: GestureClass::Point,
                frame_id: 3,
            },
        );
        let out = String::from_utf8(serialize_events(&[rec])).unwrap();
        assert_eq!(
            out,
            "{\"t_ms\":500,\"type\":\"hand_state_changed\",\"hand\":\"right\",\"from\":\"out\",\"to\":\"point\",\"frame_id\":3}\n"
        );
    }

    #[test]
    fn description_record_parses_back() {
        let mut d = Description::new(DescriptionKind::Brief, "a mug", Some(4), 100, 900);
        d.spoken_start_t_ms = Some(900);
        d.spoken_end_t_ms = Some(1400);
        let recs = vec![TraceRecord::description(1400, d)];
        let back = parse_events(&serialize_events(&recs)).unwrap();
        assert_eq!(back, recs);
        assert!(back[0].as_description().is_some());
    }
}
