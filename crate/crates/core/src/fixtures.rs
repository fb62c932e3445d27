//! Scripted sessions that exercise the orchestrator's interaction rules.
//!
//! Some builders replay candidate sessions and pick the first one whose
//! simulated timing produces the situation they are after. The builders
//! are deterministic, so the checked-in session files can be regenerated.

use crate::backends::BackendProfile;
use crate::orchestrator::STILL_PROCESSING;
use crate::pipeline::{replay, Components, PipelineConfig};
use crate::synth::{unit_vector, wrist_for_tips, HandSpec, Script};
use crate::trace::{GenerationOutcome, TraceRecord};
use crate::types::{DescriptionKind, GestureClass, Hand, PipelineEvent, Session};

pub const NAMES: [&str; 4] = ["grasp-bottle", "query-interrupt", "swipe-before-ready", "stale"];

pub const QUESTION: &str = "How many calories does it have?";

const EMBED_DIM: usize = 16;
const LATENCY_SEED: u64 = 7;
const RIGHT_WRIST: (f64, f64) = (0.62, 0.8);
const LEFT_WRIST: (f64, f64) = (0.38, 0.8);

pub fn components() -> Components {
    Components::mock(BackendProfile::default(), LATENCY_SEED, false)
}

fn run(session: &Session) -> Vec<TraceRecord> {
    replay(session, &PipelineConfig::default(), components())
        .expect("scripted sessions are valid")
        .trace
}

pub fn build(name: &str) -> Option<Session> {
    Some(match name {
        "grasp-bottle" => grasp_bottle(),
        "query-interrupt" => query_interrupt(),
        "swipe-before-ready" => swipe_before_ready(),
        "stale" => stale(),
        _ => return None,
    })
}

/// Point at a jar, pick it up, turn it around, put it down.
pub fn grasp_bottle() -> Session {
    let a = unit_vector(EMBED_DIM, 0);
    let b = unit_vector(EMBED_DIM, 1);
    let mut s = Script::new();
    s.push(5, None, None, None);
    s.push(10, None, Some(&HandSpec::new(GestureClass::Point, RIGHT_WRIST)), None);
    let front = HandSpec::new(GestureClass::Hold, RIGHT_WRIST).tagged("spice-red");
    s.push(60, None, Some(&front), Some(&a));
    let back = HandSpec::new(GestureClass::Hold, RIGHT_WRIST).tagged("spice-red-back");
    s.push(45, None, Some(&back), Some(&b));
    s.push(15, None, None, None);
    s.build()
}

fn holding_jar(frames: usize) -> Script {
    let a = unit_vector(EMBED_DIM, 0);
    let mut s = Script::new();
    s.push(4, None, None, None);
    let hold = HandSpec::new(GestureClass::Hold, RIGHT_WRIST).tagged("spice-red");
    s.push(frames, None, Some(&hold), Some(&a));
    s
}

/// A question asked 500 ms into the detailed description, followed by a
/// pointing gesture while the answer is pending.
pub fn query_interrupt() -> Session {
    let base = holding_jar(200).build();
    let trace = run(&base);
    let start = trace
        .iter()
        .filter_map(TraceRecord::as_description)
        .find(|d| d.kind == DescriptionKind::Detailed)
        .and_then(|d| d.spoken_start_t_ms)
        .expect("the detailed description is spoken");
    let at = base
        .frames
        .iter()
        .position(|f| f.t_ms >= start + 500)
        .expect("session outlasts the description");

    let a = unit_vector(EMBED_DIM, 0);
    let hold = HandSpec::new(GestureClass::Hold, RIGHT_WRIST).tagged("spice-red");
    let point = HandSpec::new(GestureClass::Point, LEFT_WRIST);
    let mut s = Script::new();
    s.push(4, None, None, None);
    s.push(at + 2 - 4, None, Some(&hold), Some(&a));
    s.push(20, Some(&point), Some(&hold), Some(&a));
    s.push(200 - (at + 2 - 4) - 20, None, Some(&hold), Some(&a));
    s.query_at(at, QUESTION);
    s.build()
}

fn swipe_candidate(lead: usize) -> Session {
    let hold = HandSpec::new(GestureClass::Hold, RIGHT_WRIST).tagged("spice-red");
    let palm = 0.08;
    let bottom = (RIGHT_WRIST.0 - 0.02, RIGHT_WRIST.1 - 0.02);
    let mut s = Script::new();
    s.push(lead, None, None, None);
    s.push_with(
        90,
        |k| {
            let rise = 0.006 * k.min(25) as f64;
            let w = wrist_for_tips(GestureClass::Touch, Hand::Left, palm, (bottom.0, bottom.1 - rise));
            Some(HandSpec::new(GestureClass::Touch, w).palm(palm))
        },
        Some(&hold),
    );
    s.build()
}

fn spoke(trace: &[TraceRecord], text: &str) -> bool {
    trace
        .iter()
        .filter_map(TraceRecord::as_description)
        .any(|d| d.text == text)
}

/// Swipe up along a held jar before its text has been read.
pub fn swipe_before_ready() -> Session {
    (0..120)
        .map(swipe_candidate)
        .find(|s| spoke(&run(s), STILL_PROCESSING))
        .expect("some lead time catches the text read in flight")
}

fn stale_candidate(switch: usize) -> Session {
    let a = unit_vector(EMBED_DIM, 0);
    let b = unit_vector(EMBED_DIM, 2);
    let hold = HandSpec::new(GestureClass::Hold, RIGHT_WRIST).tagged("spice-red");
    let touch = HandSpec::new(GestureClass::Touch, RIGHT_WRIST).tagged("mug");
    let mut s = Script::new();
    s.push(4, None, None, None);
    s.push(switch, None, Some(&hold), Some(&a));
    s.push(60, None, Some(&touch), Some(&b));
    s.build()
}

/// Keyframe id of the first keyframe in a trace.
fn first_keyframe(trace: &[TraceRecord]) -> Option<u64> {
    trace.iter().filter_map(TraceRecord::as_event).find_map(|e| match e {
        PipelineEvent::Keyframe { frame_id, .. } => Some(*frame_id),
        _ => None,
    })
}

fn brief_dropped(trace: &[TraceRecord]) -> bool {
    let Some(k1) = first_keyframe(trace) else {
        return false;
    };
    trace.iter().filter_map(TraceRecord::as_generation).any(|g| {
        g.kind == Some(DescriptionKind::Brief) && g.keyframe == Some(k1) && g.outcome == GenerationOutcome::Dropped
    })
}

/// The grip changes while the first grasp's brief description is running.
pub fn stale() -> Session {
    (4..60)
        .map(stale_candidate)
        .find(|s| brief_dropped(&run(s)))
        .expect("some switch time lands while the brief is in flight")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_are_deterministic() {
        for name in NAMES {
            assert_eq!(build(name), build(name), "{name}");
        }
        assert!(build("nope").is_none());
    }
}
