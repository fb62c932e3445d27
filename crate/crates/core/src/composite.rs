//! Two-hand configurations and the discrete composite gestures built on them.

use crate::motion::MotionClass;
use crate::types::{
    BBox, CompositeDetail, CompositeKind, ContactInfo, GestureClass, Hand, HandFrame, Landmark, PipelineEvent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BimanualConfig {
    None,
    HoldPoint { hold: Hand, point: Hand },
    SwipeContext { hold: Hand, touch: Hand },
    SameObject,
    DifferentObjects,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeParams {
    /// Margin added around the holding hand's box for the swipe test.
    pub margin: f64,
    /// Fingertip travel that re-triggers a color reading.
    pub move_threshold: f64,
    /// IoU at or above which two contact boxes are one object.
    pub same_iou: f64,
}

impl Default for CompositeParams {
    fn default() -> Self {
        Self {
            margin: 0.05,
            move_threshold: 0.02,
            same_iou: 0.3,
        }
    }
}

pub fn hand_bbox(hand: &HandFrame) -> BBox {
    let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &hand.landmarks {
        b.x0 = b.x0.min(p.x);
        b.y0 = b.y0.min(p.y);
        b.x1 = b.x1.max(p.x);
        b.y1 = b.y1.max(p.y);
    }
    b
}

fn pair_with(states: [GestureClass; 2], a: GestureClass, b: GestureClass) -> Option<(Hand, Hand)> {
    let [l, r] = states;
    if l == a && r == b {
        Some((Hand::Left, Hand::Right))
    } else if r == a && l == b {
        Some((Hand::Right, Hand::Left))
    } else {
        None
    }
}

/// `states` and `frames` are indexed by [`Hand::index`].
pub fn detect_config(
    states: [GestureClass; 2],
    frames: [Option<&HandFrame>; 2],
    contact: Option<&ContactInfo>,
    p: &CompositeParams,
) -> BimanualConfig {
    if let Some((hold, point)) = pair_with(states, GestureClass::Hold, GestureClass::Point) {
        return BimanualConfig::HoldPoint { hold, point };
    }
    if let Some((hold, touch)) = pair_with(states, GestureClass::Hold, GestureClass::Touch) {
        if let (Some(h), Some(t)) = (frames[hold.index()], frames[touch.index()]) {
            let zone = hand_bbox(h).inflate(p.margin);
            if zone.contains(t.index_tip()) && zone.contains(t.thumb_tip()) {
                return BimanualConfig::SwipeContext { hold, touch };
            }
        }
    }
    if states.iter().all(|s| s.is_grasp()) {
        if let Some(c) = contact {
            if let (Some(l), Some(r)) = (c.hand(Hand::Left), c.hand(Hand::Right)) {
                if let (Some(lb), Some(rb)) = (l.object_box, r.object_box) {
                    let same_tag = matches!((&l.object_tag, &r.object_tag), (Some(a), Some(b)) if a == b);
                    return if same_tag || lb.iou(&rb) >= p.same_iou {
                        BimanualConfig::SameObject
                    } else {
                        BimanualConfig::DifferentObjects
                    };
                }
            }
        }
    }
    BimanualConfig::None
}

/// Edge-trigger and re-emission state across frames.
#[derive(Debug, Clone)]
pub struct CompositeTracker {
    params: CompositeParams,
    config: BimanualConfig,
    last_tip: Option<Landmark>,
    swipe_fired: bool,
}

impl CompositeTracker {
    pub fn new(params: CompositeParams) -> Self {
        Self {
            params,
            config: BimanualConfig::None,
            last_tip: None,
            swipe_fired: false,
        }
    }

    pub fn config(&self) -> BimanualConfig {
        self.config
    }

    /// `fingertip` is the pointing hand's index tip in a hold-point
    /// configuration; `motion` the latest swipe classification.
    pub fn step(
        &mut self,
        config: BimanualConfig,
        frame_id: u64,
        fingertip: Option<Landmark>,
        motion: Option<MotionClass>,
    ) -> Vec<PipelineEvent> {
        let entered = config != self.config;
        if entered {
            self.last_tip = None;
            self.swipe_fired = false;
        }
        self.config = config;
        let event = |kind, detail| PipelineEvent::CompositeGesture { kind, frame_id, detail };
        match config {
            BimanualConfig::None => Vec::new(),
            BimanualConfig::HoldPoint { hold, point } => {
                let Some(tip) = fingertip else {
                    return Vec::new();
                };
                let moved = self
                    .last_tip
                    .is_none_or(|last| last.distance(&tip) >= self.params.move_threshold);
                if !moved {
                    return Vec::new();
                }
                let entry = self.last_tip.is_none();
                self.last_tip = Some(tip);
                vec![event(
                    CompositeKind::HoldPoint,
                    CompositeDetail {
                        primary: Some(hold),
                        secondary: Some(point),
                        fingertip: Some(tip),
                        color: None,
                        entry,
                    },
                )]
            }
            BimanualConfig::SwipeContext { hold, touch } => {
                if self.swipe_fired || motion != Some(MotionClass::Up) {
                    return Vec::new();
                }
                self.swipe_fired = true;
                vec![event(
                    CompositeKind::HoldSwipeUp,
                    CompositeDetail {
                        primary: Some(hold),
                        secondary: Some(touch),
                        entry: true,
                        ..Default::default()
                    },
                )]
            }
            BimanualConfig::SameObject | BimanualConfig::DifferentObjects => {
                if !entered {
                    return Vec::new();
                }
                let kind = if config == BimanualConfig::SameObject {
                    CompositeKind::BimanualSameObject
                } else {
                    CompositeKind::BimanualDifferentObjects
                };
                vec![event(
                    kind,
                    CompositeDetail {
                        primary: Some(Hand::Left),
                        secondary: Some(Hand::Right),
                        entry: true,
                        ..Default::default()
                    },
                )]
            }
        }
    }
}
