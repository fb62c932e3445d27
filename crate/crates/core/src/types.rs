//! Shared domain model for frames, gestures, pipeline events and descriptions.
//!
//! Everything here is a plain value type. Coordinates are normalized image
//! coordinates in `[0, 1]` with the origin at the top-left corner, so "up"
//! means decreasing `y`.

use serde::{Deserialize, Serialize};

/// Number of keypoints in a hand skeleton.
pub const LANDMARK_COUNT: usize = 21;
/// Keypoint index of the wrist.
pub const WRIST: usize = 0;
/// Keypoint index of the thumb tip.
pub const THUMB_TIP: usize = 4;
/// Keypoint index of the index fingertip.
pub const INDEX_TIP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub const ALL: [Hand; 2] = [Hand::Left, Hand::Right];

    pub fn index(self) -> usize {
        match self {
            Hand::Left => 0,
            Hand::Right => 1,
        }
    }

    pub fn other(self) -> Hand {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }
}

/// A 2D keypoint. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
}

impl Landmark {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Landmark) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

impl From<[f64; 2]> for Landmark {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Landmark> for [f64; 2] {
    fn from(l: Landmark) -> Self {
        [l.x, l.y]
    }
}

/// The 21 keypoints of one detected hand.
#[derive(Debug, Clone, PartialEq)]
pub struct HandFrame {
    pub side: Hand,
    pub landmarks: [Landmark; LANDMARK_COUNT],
}

impl HandFrame {
    pub fn new(side: Hand, landmarks: [Landmark; LANDMARK_COUNT]) -> Self {
        Self { side, landmarks }
    }

    pub fn wrist(&self) -> Landmark {
        self.landmarks[WRIST]
    }

    pub fn index_tip(&self) -> Landmark {
        self.landmarks[INDEX_TIP]
    }

    pub fn thumb_tip(&self) -> Landmark {
        self.landmarks[THUMB_TIP]
    }
}

/// Per-hand gesture class. `OutOfView` is rule-based: it is assigned exactly
/// when no landmarks were extracted for the hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GestureClass {
    #[serde(rename = "touch")]
    Touch,
    #[serde(rename = "hold")]
    Hold,
    #[serde(rename = "point")]
    Point,
    #[serde(rename = "out")]
    OutOfView,
}

impl GestureClass {
    /// All classes in their canonical order (also the report order).
    pub const ALL: [GestureClass; 4] = [
        GestureClass::Touch,
        GestureClass::Hold,
        GestureClass::Point,
        GestureClass::OutOfView,
    ];
    /// The learned classes, in the classifier's output order.
    pub const LEARNED: [GestureClass; 3] = [GestureClass::Touch, GestureClass::Hold, GestureClass::Point];

    pub fn index(self) -> usize {
        match self {
            GestureClass::Touch => 0,
            GestureClass::Hold => 1,
            GestureClass::Point => 2,
            GestureClass::OutOfView => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GestureClass::Touch => "touch",
            GestureClass::Hold => "hold",
            GestureClass::Point => "point",
            GestureClass::OutOfView => "out",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "touch" => Some(GestureClass::Touch),
            "hold" => Some(GestureClass::Hold),
            "point" => Some(GestureClass::Point),
            "out" => Some(GestureClass::OutOfView),
            _ => None,
        }
    }

    /// Hold and Touch are the grasp states that produce keyframes.
    pub fn is_grasp(self) -> bool {
        matches!(self, GestureClass::Hold | GestureClass::Touch)
    }

    /// Progressive form used in narration, e.g. "holding".
    pub fn gerund(self) -> Option<&'static str> {
        match self {
            GestureClass::Touch => Some("touching"),
            GestureClass::Hold => Some("holding"),
            GestureClass::Point => Some("pointing"),
            GestureClass::OutOfView => None,
        }
    }
}

/// Smoothed per-hand state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StableState {
    pub gesture: GestureClass,
    pub since_frame: u64,
    pub previous: Option<GestureClass>,
}

impl Default for StableState {
    fn default() -> Self {
        Self {
            gesture: GestureClass::OutOfView,
            since_frame: 0,
            previous: None,
        }
    }
}

/// Axis-aligned box in normalized frame coordinates. Serialized as
/// `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed containment test.
    pub fn contains(&self, p: Landmark) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    /// Grows every side by `margin`.
    pub fn inflate(&self, margin: f64) -> BBox {
        BBox::new(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)
    }

    /// Grows the box by `fraction` of its size, split evenly between sides.
    pub fn scale_about_center(&self, fraction: f64) -> BBox {
        let dx = self.width() * fraction / 2.0;
        let dy = self.height() * fraction / 2.0;
        BBox::new(self.x0 - dx, self.y0 - dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn clamp_unit(&self) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, 1.0),
            self.y0.clamp(0.0, 1.0),
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
        )
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when both boxes are degenerate.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Contact details of one hand as reported by a contact detector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HandContact {
    pub in_contact: bool,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub object_box: Option<BBox>,
    #[serde(rename = "tag", default, skip_serializing_if = "Option::is_none")]
    pub object_tag: Option<String>,
}

/// Per-hand contact information for one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactInfo {
    #[serde(default)]
    pub left: Option<HandContact>,
    #[serde(default)]
    pub right: Option<HandContact>,
}

impl ContactInfo {
    pub fn hand(&self, hand: Hand) -> Option<&HandContact> {
        match hand {
            Hand::Left => self.left.as_ref(),
            Hand::Right => self.right.as_ref(),
        }
    }

    pub fn set(&mut self, hand: Hand, contact: Option<HandContact>) {
        match hand {
            Hand::Left => self.left = contact,
            Hand::Right => self.right = contact,
        }
    }

    pub fn in_contact(&self, hand: Hand) -> bool {
        self.hand(hand).is_some_and(|c| c.in_contact)
    }
}

/// Events injected into the stream from outside the vision path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InjectedEvent {
    Query { text: String },
}

/// Per-frame, per-hand ground-truth gesture labels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default)]
    pub left: Option<GestureClass>,
    #[serde(default)]
    pub right: Option<GestureClass>,
}

impl GroundTruth {
    pub fn hand(&self, hand: Hand) -> Option<GestureClass> {
        match hand {
            Hand::Left => self.left,
            Hand::Right => self.right,
        }
    }
}

/// One timestamped sample of the stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub frame_id: u64,
    pub t_ms: u64,
    pub left: Option<HandFrame>,
    pub right: Option<HandFrame>,
    /// Image path, relative to the session's image root.
    pub image: Option<String>,
    pub injected: Vec<InjectedEvent>,
    pub gt: Option<GroundTruth>,
    pub contact: Option<ContactInfo>,
    pub embedding: Option<Vec<f64>>,
}

impl Frame {
    pub fn hand(&self, hand: Hand) -> Option<&HandFrame> {
        match hand {
            Hand::Left => self.left.as_ref(),
            Hand::Right => self.right.as_ref(),
        }
    }
}

/// An ordered stream of frames.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Session {
    pub frames: Vec<Frame>,
}

impl Session {
    pub fn has_ground_truth(&self) -> bool {
        self.frames.iter().any(|f| f.gt.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeKind {
    NewGrasp,
    ObjectChanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeKind {
    HoldPoint,
    HoldSwipeUp,
    #[serde(rename = "bimanual_same_object")]
    BimanualSameObject,
    #[serde(rename = "bimanual_different_objects")]
    BimanualDifferentObjects,
}

/// Payload of a composite gesture. `primary` is the holding hand where one
/// exists; `entry` marks the first emission after the configuration was
/// entered.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompositeDetail {
    pub primary: Option<Hand>,
    pub secondary: Option<Hand>,
    pub fingertip: Option<Landmark>,
    pub color: Option<String>,
    pub entry: bool,
}

/// Typed events produced by the gesture and keyframe layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PipelineEvent {
    HandStateChanged {
        hand: Hand,
        from: GestureClass,
        to: GestureClass,
        frame_id: u64,
    },
    Keyframe {
        kind: KeyframeKind,
        frame_id: u64,
        hands_in_contact: Vec<Hand>,
    },
    CompositeGesture {
        kind: CompositeKind,
        frame_id: u64,
        detail: CompositeDetail,
    },
    QueryIssued {
        text: String,
        frame_id: u64,
    },
}

impl PipelineEvent {
    pub fn frame_id(&self) -> u64 {
        match self {
            PipelineEvent::HandStateChanged { frame_id, .. }
            | PipelineEvent::Keyframe { frame_id, .. }
            | PipelineEvent::CompositeGesture { frame_id, .. }
            | PipelineEvent::QueryIssued { frame_id, .. } => *frame_id,
        }
    }

    /// Everything except a voice query originates from hand gestures.
    pub fn is_gesture_derived(&self) -> bool {
        !matches!(self, PipelineEvent::QueryIssued { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionKind {
    HandState,
    Brief,
    Detailed,
    Texts,
    Comparative,
    ColorLabel,
    QueryAnswer,
    Status,
}

impl DescriptionKind {
    pub const ALL: [DescriptionKind; 8] = [
        DescriptionKind::HandState,
        DescriptionKind::Brief,
        DescriptionKind::Detailed,
        DescriptionKind::Texts,
        DescriptionKind::Comparative,
        DescriptionKind::ColorLabel,
        DescriptionKind::QueryAnswer,
        DescriptionKind::Status,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DescriptionKind::HandState => "hand_state",
            DescriptionKind::Brief => "brief",
            DescriptionKind::Detailed => "detailed",
            DescriptionKind::Texts => "texts",
            DescriptionKind::Comparative => "comparative",
            DescriptionKind::ColorLabel => "color_label",
            DescriptionKind::QueryAnswer => "query_answer",
            DescriptionKind::Status => "status",
        }
    }

    /// Queue rank, lower is more urgent. Status messages take the rank of
    /// whatever they stand in for, so this is only the default.
    pub fn priority(self) -> u8 {
        match self {
            DescriptionKind::QueryAnswer => 0,
            DescriptionKind::ColorLabel | DescriptionKind::Texts => 1,
            DescriptionKind::HandState => 2,
            DescriptionKind::Brief => 3,
            DescriptionKind::Detailed => 4,
            DescriptionKind::Comparative => 5,
            DescriptionKind::Status => 1,
        }
    }
}

/// A generated utterance and its narration timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub kind: DescriptionKind,
    pub text: String,
    pub keyframe_id: Option<u64>,
    pub priority: u8,
    pub created_t_ms: u64,
    /// Time of the gesture or query this description answers.
    pub event_t_ms: u64,
    pub spoken_start_t_ms: Option<u64>,
    pub spoken_end_t_ms: Option<u64>,
    pub interrupted: bool,
}

impl Description {
    pub fn new(
        kind: DescriptionKind,
        text: impl Into<String>,
        keyframe_id: Option<u64>,
        event_t_ms: u64,
        created_t_ms: u64,
    ) -> Self {
        Self {
            kind,
            text: text.into(),
            keyframe_id,
            priority: kind.priority(),
            created_t_ms,
            event_t_ms,
            spoken_start_t_ms: None,
            spoken_end_t_ms: None,
            interrupted: false,
        }
    }

    pub fn with_priority(mut self, priority: u8) -> Self {
        self.priority = priority;
        self
    }

    /// Gesture/query to speech-onset latency, once speaking has started.
    pub fn latency_ms(&self) -> Option<u64> {
        self.spoken_start_t_ms.map(|s| s.saturating_sub(self.event_t_ms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_iou_and_containment() {
        let a = BBox::new(0.0, 0.0, 0.5, 0.5);
        let b = BBox::new(0.25, 0.25, 0.75, 0.75);
        assert!((a.iou(&b) - 0.0625 / 0.4375).abs() < 1e-12);
        assert_eq!(a.iou(&BBox::new(0.6, 0.6, 0.9, 0.9)), 0.0);
        assert!(a.contains(Landmark::new(0.5, 0.5)));
        assert!(!a.contains(Landmark::new(0.51, 0.5)));
        assert!(a.inflate(0.05).contains(Landmark::new(0.55, -0.05)));
    }

    #[test]
    fn gesture_wire_names() {
        for g in GestureClass::ALL {
            assert_eq!(GestureClass::parse(g.as_str()), Some(g));
            let json = serde_json::to_string(&g).unwrap();
            assert_eq!(json, format!("\"{}\"", g.as_str()));
        }
    }

    #[test]
    fn priority_order_is_total_over_spoken_kinds() {
        use DescriptionKind::*;
        let order = [QueryAnswer, ColorLabel, HandState, Brief, Detailed, Comparative];
        for w in order.windows(2) {
            assert!(w[0].priority() < w[1].priority(), "{:?} vs {:?}", w[0], w[1]);
        }
        assert_eq!(ColorLabel.priority(), Texts.priority());
    }
}
