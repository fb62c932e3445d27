//! Temporal smoothing of raw per-frame gesture predictions.
//!
//! The cascade, evaluated after every prediction:
//!
//! 1. the most recent `t` predictions are one class: that class;
//! 2. the previous stable state occurs in the last `n`: keep it;
//! 3. otherwise the mode of the last `n`, ties to the most recently seen.
//!
//! Each window starts filled with `x` out-of-view predictions, as if the hand
//! had been absent before the stream began. That makes a hand entering the
//! view stabilize after `t` agreeing frames rather than on the first one.

use std::collections::VecDeque;

use thiserror::Error;

use crate::types::{GestureClass, Hand, KeyframeKind, PipelineEvent, StableState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothingParams {
    pub x: usize,
    pub n: usize,
    pub t: usize,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self { x: 12, n: 6, t: 4 }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<(), StabilizerError> {
        if self.x == 0 || self.n == 0 || self.t == 0 || self.t > self.x || self.n > self.x {
            return Err(StabilizerError::InvalidParams(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StabilizerError {
    #[error("invalid smoothing parameters {0:?}: need 1 <= t <= x and 1 <= n <= x")]
    InvalidParams(SmoothingParams),
    #[error("{hand:?} frame_id {got} does not follow {last}")]
    Ordering { hand: Hand, last: u64, got: u64 },
}

/// Reference evaluation of the cascade over an explicit window (oldest first).
pub fn stable_of(window: &[GestureClass], prev: Option<GestureClass>, p: &SmoothingParams) -> GestureClass {
    assert!(!window.is_empty(), "stable_of needs at least one prediction");
    let len = window.len();
    if len >= p.t {
        let tail = &window[len - p.t..];
        if tail.iter().all(|c| *c == tail[0]) {
            return tail[0];
        }
    }
    let recent = &window[len.saturating_sub(p.n)..];
    if let Some(prev) = prev {
        if recent.contains(&prev) {
            return prev;
        }
    }
    let mut counts = [0usize; 4];
    let mut last_seen = [0usize; 4];
    for (i, c) in recent.iter().enumerate() {
        counts[c.index()] += 1;
        last_seen[c.index()] = i + 1;
    }
    let best = (0..4).max_by_key(|&k| (counts[k], last_seen[k])).expect("four classes");
    GestureClass::from_index(best).expect("valid index")
}

/// One hand's incremental smoother.
#[derive(Debug, Clone)]
pub struct HandStabilizer {
    params: SmoothingParams,
    window: VecDeque<GestureClass>,
    counts: [usize; 4],
    last_seen: [u64; 4],
    seq: u64,
    run_class: GestureClass,
    run_len: usize,
    state: StableState,
    last_frame: Option<u64>,
}

impl HandStabilizer {
    pub fn new(params: SmoothingParams) -> Result<Self, StabilizerError> {
        params.validate()?;
        let pad = GestureClass::OutOfView;
        let mut counts = [0; 4];
        counts[pad.index()] = params.n;
        let mut last_seen = [0; 4];
        last_seen[pad.index()] = params.x as u64;
        Ok(Self {
            params,
            window: std::iter::repeat_n(pad, params.x).collect(),
            counts,
            last_seen,
            seq: params.x as u64,
            run_class: pad,
            run_len: params.x,
            state: StableState::default(),
            last_frame: None,
        })
    }

    pub fn params(&self) -> SmoothingParams {
        self.params
    }

    pub fn state(&self) -> StableState {
        self.state
    }

    pub fn gesture(&self) -> GestureClass {
        self.state.gesture
    }

    /// The stored window, oldest first, including start-of-stream padding.
    pub fn window(&self) -> Vec<GestureClass> {
        self.window.iter().copied().collect()
    }

    /// Adds one prediction. Returns `(from, to)` when the stable state changed.
    pub fn push(
        &mut self,
        pred: GestureClass,
        frame_id: u64,
    ) -> Result<Option<(GestureClass, GestureClass)>, StabilizerError> {
        if let Some(last) = self.last_frame {
            if frame_id <= last {
                return Err(StabilizerError::Ordering {
                    hand: Hand::Left,
                    last,
                    got: frame_id,
                });
            }
        }
        self.last_frame = Some(frame_id);
        let p = self.params;

        // The element leaving the last-n tally sits n places from the back.
        let leaving = self.window[self.window.len() - p.n];
        self.counts[leaving.index()] -= 1;
        if self.window.len() == p.x {
            self.window.pop_front();
        }
        self.window.push_back(pred);
        self.counts[pred.index()] += 1;
        self.seq += 1;
        self.last_seen[pred.index()] = self.seq;
        if pred == self.run_class {
            self.run_len += 1;
        } else {
            self.run_class = pred;
            self.run_len = 1;
        }

        let prev = self.state.gesture;
        let next = if self.run_len >= p.t {
            self.run_class
        } else if self.counts[prev.index()] > 0 {
            prev
        } else {
            let best = (0..4)
                .max_by_key(|&k| (self.counts[k], self.last_seen[k] * u64::from(self.counts[k] > 0)))
                .expect("four classes");
            GestureClass::from_index(best).expect("valid index")
        };
        if next == prev {
            return Ok(None);
        }
        self.state = StableState {
            gesture: next,
            since_frame: frame_id,
            previous: Some(prev),
        };
        Ok(Some((prev, next)))
    }
}

/// Both hands' smoothers plus event emission.
#[derive(Debug, Clone)]
pub struct Stabilizer {
    hands: [HandStabilizer; 2],
}

impl Stabilizer {
    pub fn new(params: SmoothingParams) -> Result<Self, StabilizerError> {
        let h = HandStabilizer::new(params)?;
        Ok(Self { hands: [h.clone(), h] })
    }

    pub fn hand(&self, hand: Hand) -> &HandStabilizer {
        &self.hands[hand.index()]
    }

    pub fn state(&self, hand: Hand) -> StableState {
        self.hands[hand.index()].state()
    }

    /// Emits `HandStateChanged` on a change and additionally
    /// `Keyframe{NewGrasp}` when the new state is hold or touch.
    pub fn push_prediction(
        &mut self,
        hand: Hand,
        pred: GestureClass,
        frame_id: u64,
    ) -> Result<Vec<PipelineEvent>, StabilizerError> {
        let change = self.hands[hand.index()].push(pred, frame_id).map_err(|e| match e {
            StabilizerError::Ordering { last, got, .. } => StabilizerError::Ordering { hand, last, got },
            other => other,
        })?;
        let mut events = Vec::new();
        if let Some((from, to)) = change {
            events.push(PipelineEvent::HandStateChanged {
                hand,
                from,
                to,
                frame_id,
            });
            if to.is_grasp() {
                events.push(PipelineEvent::Keyframe {
                    kind: KeyframeKind::NewGrasp,
                    frame_id,
                    hands_in_contact: vec![hand],
                });
            }
        }
        Ok(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use GestureClass::*;

    #[test]
    fn cascade_examples() {
        let p = SmoothingParams::default();
        assert_eq!(stable_of(&[Hold; 12], Some(Point), &p), Hold);
        assert_eq!(
            stable_of(&[Point, Point, Hold, Hold, Hold, Touch], Some(Hold), &p),
            Hold
        );
        assert_eq!(
            stable_of(&[Hold, Hold, Touch, Touch, Point, Point, Touch, Point], Some(Hold), &p),
            Point
        );
        assert_eq!(stable_of(&[Touch, Touch, Point, Point, Touch, Point], None, &p), Point);
    }

    #[test]
    fn first_hold_run_stabilizes_on_fourth_frame() {
        let mut s = Stabilizer::new(SmoothingParams::default()).unwrap();
        for f in 1..=3 {
            assert!(s.push_prediction(Hand::Right, Hold, f).unwrap().is_empty());
        }
        let ev = s.push_prediction(Hand::Right, Hold, 4).unwrap();
        assert_eq!(
            ev,
            vec![
                PipelineEvent::HandStateChanged {
                    hand: Hand::Right,
                    from: OutOfView,
                    to: Hold,
                    frame_id: 4
                },
                PipelineEvent::Keyframe {
                    kind: KeyframeKind::NewGrasp,
                    frame_id: 4,
                    hands_in_contact: vec![Hand::Right]
                },
            ]
        );
    }

    #[test]
    fn spurious_point_is_absorbed_and_point_run_is_not_a_keyframe() {
        let mut s = Stabilizer::new(SmoothingParams::default()).unwrap();
        let mut f = 0;
        let mut push = |s: &mut Stabilizer, c| {
            f += 1;
            s.push_prediction(Hand::Left, c, f).unwrap()
        };
        for _ in 0..10 {
            push(&mut s, Hold);
        }
        assert!(push(&mut s, Point).is_empty());
        assert!(push(&mut s, Hold).is_empty());
        let mut events = Vec::new();
        for _ in 0..4 {
            events.extend(push(&mut s, Point));
        }
        assert_eq!(events.len(), 1);
        assert!(matches!(
            events[0],
            PipelineEvent::HandStateChanged {
                from: Hold,
                to: Point,
                ..
            }
        ));
    }

    #[test]
    fn ordering_error() {
        let mut s = Stabilizer::new(SmoothingParams::default()).unwrap();
        s.push_prediction(Hand::Left, Hold, 5).unwrap();
        let err = s.push_prediction(Hand::Left, Hold, 5).unwrap_err();
        assert_eq!(
            err,
            StabilizerError::Ordering {
                hand: Hand::Left,
                last: 5,
                got: 5
            }
        );
        s.push_prediction(Hand::Right, Hold, 1).unwrap();
    }

    #[test]
    fn invalid_params() {
        assert!(HandStabilizer::new(SmoothingParams { x: 4, n: 6, t: 4 }).is_err());
        assert!(HandStabilizer::new(SmoothingParams { x: 4, n: 2, t: 0 }).is_err());
    }
}
