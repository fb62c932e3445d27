//! Parametric hand poses, fingertip trajectories and labelled sessions.
//!
//! Poses come from a 2D skeleton: a palm of length `L`, four fingers fanned
//! from the knuckle line and a thumb from the base of the palm. Finger curl
//! bends each joint out of the image plane, so a curled segment is drawn
//! foreshortened and eventually folds back toward the wrist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::composite::hand_bbox;
use crate::gesture::LabeledSample;
use crate::motion::MotionClass;
use crate::motion::{MotionSample, WINDOW};
use crate::types::{
    BBox, ContactInfo, Frame, GestureClass, GroundTruth, Hand, HandContact, HandFrame, InjectedEvent, Landmark,
    Session, LANDMARK_COUNT,
};

/// Lateral knuckle offsets (toward the little finger) and palm-axis
/// positions, as fractions of palm length.
const KNUCKLES: [(f64, f64); 4] = [(-0.30, 0.95), (-0.10, 1.0), (0.10, 0.95), (0.28, 0.85)];
const SEGMENTS: [[f64; 3]; 4] = [
    [0.42, 0.25, 0.20],
    [0.46, 0.28, 0.22],
    [0.42, 0.26, 0.20],
    [0.33, 0.20, 0.18],
];
const FAN_DEG: [f64; 4] = [-8.0, -2.0, 4.0, 10.0];
const THUMB_SEGMENTS: [f64; 3] = [0.30, 0.25, 0.20];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub wrist: (f64, f64),
    pub palm: f64,
    /// Radians, positive clockwise in image coordinates.
    pub rotation: f64,
    /// Thumb, index, middle, ring, little; 0 = straight, 1 = fully curled.
    pub curls: [f64; 5],
}

/// Curl ranges per class: thumb, then index, middle, ring, little.
fn curl_ranges(class: GestureClass) -> [(f64, f64); 5] {
    match class {
        GestureClass::Hold => [(0.5, 0.8), (0.7, 1.0), (0.7, 1.0), (0.7, 1.0), (0.7, 1.0)],
        GestureClass::Point => [(0.5, 0.8), (0.0, 0.15), (0.75, 1.0), (0.75, 1.0), (0.75, 1.0)],
        _ => [(0.1, 0.4), (0.0, 0.3), (0.0, 0.3), (0.35, 0.6), (0.35, 0.6)],
    }
}

/// Unit direction `deg` degrees from `axis` toward `lateral`.
fn direction(axis: (f64, f64), lateral: (f64, f64), deg: f64) -> (f64, f64) {
    let a = deg.to_radians();
    (
        a.cos() * axis.0 + a.sin() * lateral.0,
        a.cos() * axis.1 + a.sin() * lateral.1,
    )
}

pub fn pose_landmarks(side: Hand, p: &PoseParams) -> [Landmark; LANDMARK_COUNT] {
    let (s, c) = p.rotation.sin_cos();
    let up = (s, -c);
    let mirror = if side == Hand::Right { 1.0 } else { -1.0 };
    let lat = (mirror * c, mirror * s);
    let l = p.palm;
    let at = |along: f64, across: f64| {
        (
            p.wrist.0 + l * (along * up.0 + across * lat.0),
            p.wrist.1 + l * (along * up.1 + across * lat.1),
        )
    };
    let mut pts = [(0.0, 0.0); LANDMARK_COUNT];
    pts[0] = p.wrist;

    let tc = p.curls[0];
    pts[1] = at(0.2, -0.25);
    let mut cur = pts[1];
    for (k, len) in THUMB_SEGMENTS.iter().enumerate() {
        let dir = direction(up, lat, -50.0 + tc * 75.0);
        let shrink = 1.0 - 0.35 * tc * (k + 1) as f64 / 3.0;
        cur = (cur.0 + l * len * shrink * dir.0, cur.1 + l * len * shrink * dir.1);
        pts[2 + k] = cur;
    }

    for f in 0..4 {
        let base = 5 + 4 * f;
        let (across, along) = KNUCKLES[f];
        pts[base] = at(along, across);
        let dir = direction(up, lat, FAN_DEG[f]);
        let cf = p.curls[1 + f];
        let bends = [cf * 90.0, cf * 100.0, cf * 60.0];
        let mut phi = 0.0f64;
        let mut cur = pts[base];
        for k in 0..3 {
            phi += bends[k];
            let proj = phi.to_radians().cos();
            let len = l * SEGMENTS[f][k] * proj;
            cur = (cur.0 + len * dir.0, cur.1 + len * dir.1);
            pts[base + 1 + k] = cur;
        }
    }
    pts.map(|(x, y)| Landmark::new(x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)))
}

/// Mid-range curls, upright, palm 0.11.
pub fn canonical_params(class: GestureClass, wrist: (f64, f64)) -> PoseParams {
    let r = curl_ranges(class);
    PoseParams {
        wrist,
        palm: 0.11,
        rotation: 0.0,
        curls: r.map(|(a, b)| (a + b) / 2.0),
    }
}

/// The reference pose of a class: a fist around a cylinder for hold, an
/// extended index for point, two straight fingers for touch.
pub fn canonical_pose(class: GestureClass, side: Hand) -> HandFrame {
    let wrist = if side == Hand::Right { (0.62, 0.8) } else { (0.38, 0.8) };
    HandFrame::new(side, pose_landmarks(side, &canonical_params(class, wrist)))
}

pub fn random_params(class: GestureClass, side: Hand, rng: &mut impl Rng) -> PoseParams {
    let x_range = match side {
        Hand::Left => (0.2, 0.45),
        Hand::Right => (0.55, 0.8),
    };
    PoseParams {
        wrist: (rng.random_range(x_range.0..x_range.1), rng.random_range(0.6..0.85)),
        palm: rng.random_range(0.08..0.14),
        rotation: rng.random_range(-20.0f64..20.0).to_radians(),
        curls: curl_ranges(class).map(|(a, b)| rng.random_range(a..=b)),
    }
}

pub fn jitter(points: &[Landmark; LANDMARK_COUNT], sigma: f64, rng: &mut impl Rng) -> [Landmark; LANDMARK_COUNT] {
    if sigma <= 0.0 {
        return *points;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    points.map(|p| {
        Landmark::new(
            (p.x + n.sample(rng)).clamp(0.0, 1.0),
            (p.y + n.sample(rng)).clamp(0.0, 1.0),
        )
    })
}

pub fn random_pose(class: GestureClass, side: Hand, sigma: f64, rng: &mut impl Rng) -> HandFrame {
    let p = random_params(class, side, rng);
    HandFrame::new(side, jitter(&pose_landmarks(side, &p), sigma, rng))
}

/// `per_class` samples of each learned class, both hands mixed, shuffled.
pub fn gesture_samples(per_class: usize, sigma: f64, seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_class);
    for class in GestureClass::LEARNED {
        for i in 0..per_class {
            let side = if i % 2 == 0 { Hand::Right } else { Hand::Left };
            out.push(LabeledSample::from_hand(
                &random_pose(class, side, sigma, &mut rng),
                class,
            ));
        }
    }
    shuffle(&mut out, &mut rng);
    out
}

fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// A 16-point fingertip path with net vertical travel drawn per class.
pub fn trajectory(class: MotionClass, sigma: f64, rng: &mut impl Rng) -> Vec<Landmark> {
    let dy = match class {
        MotionClass::Static => rng.random_range(-0.025..0.025),
        MotionClass::Up => rng.random_range(-0.3..-0.04),
        MotionClass::Down => rng.random_range(0.04..0.3),
    };
    let dx = rng.random_range(-0.02..0.02);
    let start = (rng.random_range(0.3..0.7), rng.random_range(0.35..0.65));
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    (0..WINDOW)
        .map(|i| {
            let f = i as f64 / (WINDOW - 1) as f64;
            let (mut x, mut y) = (start.0 + f * dx, start.1 + f * dy);
            if let Some(n) = &noise {
                x += n.sample(rng);
                y += n.sample(rng);
            }
            Landmark::new(x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
        })
        .collect()
}

pub fn motion_samples(per_class: usize, sigma: f64, seed: u64) -> Vec<MotionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_class);
    for class in MotionClass::ALL {
        for _ in 0..per_class {
            out.push(MotionSample::from_points(&trajectory(class, sigma, &mut rng), class));
        }
    }
    shuffle(&mut out, &mut rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_frames: usize,
    /// Landmark jitter SD.
    pub noise: f64,
    /// Probability that a visible hand is dropped from a frame.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_frames: 600,
            noise: 0.01,
            dropout: 0.0,
            seed: 7,
        }
    }
}

pub const FRAME_RATE: u64 = 6;

pub fn frame_time(i: u64) -> u64 {
    i * 1000 / FRAME_RATE
}

const TAGS: [&str; 3] = ["spice-red", "water-bottle", "mug"];

struct Segment {
    class: GestureClass,
    left: usize,
    params: Option<PoseParams>,
    tag: &'static str,
}

/// Each hand runs through segments of 10 to 40 frames of one class
/// (including out of view). Grasp frames carry contact annotations.
pub fn synth_session(spec: &SynthSpec) -> Session {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise > 0.0).then_some(spec.noise);
    let classes = [
        GestureClass::Touch,
        GestureClass::Hold,
        GestureClass::Point,
        GestureClass::OutOfView,
    ];
    let mut segs: [Option<Segment>; 2] = [None, None];
    let mut frames = Vec::with_capacity(spec.n_frames);
    for i in 0..spec.n_frames {
        let mut frame = Frame {
            frame_id: i as u64,
            t_ms: frame_time(i as u64),
            ..Default::default()
        };
        let mut gt = GroundTruth::default();
        let mut contact = ContactInfo::default();
        for hand in Hand::ALL {
            let slot = &mut segs[hand.index()];
            if slot.as_ref().is_none_or(|s| s.left == 0) {
                let class = classes[rng.random_range(0..classes.len())];
                let params = (class != GestureClass::OutOfView).then(|| random_params(class, hand, &mut rng));
                *slot = Some(Segment {
                    class,
                    left: rng.random_range(10..=40),
                    params,
                    tag: TAGS[rng.random_range(0..TAGS.len())],
                });
            }
            let seg = slot.as_mut().expect("segment set above");
            seg.left -= 1;
            let dropped = spec.dropout > 0.0 && rng.random_bool(spec.dropout.min(1.0));
            let visible = match (&seg.params, dropped) {
                (Some(p), false) => {
                    let pts = pose_landmarks(hand, p);
                    let pts = match noise {
                        Some(s) => jitter(&pts, s, &mut rng),
                        None => pts,
                    };
                    Some(HandFrame::new(hand, pts))
                }
                _ => None,
            };
            let label = if visible.is_some() {
                seg.class
            } else {
                GestureClass::OutOfView
            };
            if let (Some(h), true) = (&visible, label.is_grasp()) {
                contact.set(
                    hand,
                    Some(HandContact {
                        in_contact: true,
                        object_box: Some(hand_bbox(h).scale_about_center(0.4).clamp_unit()),
                        object_tag: Some(seg.tag.to_string()),
                    }),
                );
            }
            match hand {
                Hand::Left => {
                    frame.left = visible;
                    gt.left = Some(label);
                }
                Hand::Right => {
                    frame.right = visible;
                    gt.right = Some(label);
                }
            }
        }
        frame.gt = Some(gt);
        if contact.left.is_some() || contact.right.is_some() {
            frame.contact = Some(contact);
        }
        frames.push(frame);
    }
    Session { frames }
}

/// Builds scripted sessions frame by frame from canonical poses.
#[derive(Debug, Clone, Default)]
pub struct Script {
    frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandSpec {
    pub class: GestureClass,
    pub wrist: (f64, f64),
    pub palm: f64,
    pub tag: Option<String>,
}

impl HandSpec {
    pub fn new(class: GestureClass, wrist: (f64, f64)) -> Self {
        Self {
            class,
            wrist,
            palm: 0.11,
            tag: None,
        }
    }

    pub fn tagged(mut self, tag: &str) -> Self {
        self.tag = Some(tag.to_string());
        self
    }

    pub fn palm(mut self, palm: f64) -> Self {
        self.palm = palm;
        self
    }

    fn frame(&self, side: Hand) -> HandFrame {
        let mut p = canonical_params(self.class, self.wrist);
        p.palm = self.palm;
        HandFrame::new(side, pose_landmarks(side, &p))
    }
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Appends `n` frames with the given hands and embedding annotation.
    pub fn push(&mut self, n: usize, left: Option<&HandSpec>, right: Option<&HandSpec>, embedding: Option<&[f64]>) {
        for _ in 0..n {
            let i = self.frames.len() as u64;
            let mut frame = Frame {
                frame_id: i,
                t_ms: frame_time(i),
                embedding: embedding.map(<[f64]>::to_vec),
                ..Default::default()
            };
            let mut gt = GroundTruth::default();
            let mut contact = ContactInfo::default();
            for (hand, spec) in [(Hand::Left, left), (Hand::Right, right)] {
                let hf = spec.map(|s| s.frame(hand));
                let label = spec.map_or(GestureClass::OutOfView, |s| s.class);
                if let (Some(s), Some(h)) = (spec, &hf) {
                    if let Some(tag) = &s.tag {
                        contact.set(
                            hand,
                            Some(HandContact {
                                in_contact: true,
                                object_box: Some(hand_bbox(h).scale_about_center(0.4).clamp_unit()),
                                object_tag: Some(tag.clone()),
                            }),
                        );
                    }
                }
                match hand {
                    Hand::Left => {
                        frame.left = hf;
                        gt.left = Some(label);
                    }
                    Hand::Right => {
                        frame.right = hf;
                        gt.right = Some(label);
                    }
                }
            }
            frame.gt = Some(gt);
            if contact.left.is_some() || contact.right.is_some() {
                frame.contact = Some(contact);
            }
            self.frames.push(frame);
        }
    }

    /// Like [`Script::push`], but `left` is produced per frame.
    pub fn push_with(&mut self, n: usize, mut left: impl FnMut(usize) -> Option<HandSpec>, right: Option<&HandSpec>) {
        for k in 0..n {
            let l = left(k);
            self.push(1, l.as_ref(), right, None);
        }
    }

    pub fn query_at(&mut self, frame: usize, text: &str) {
        self.frames[frame]
            .injected
            .push(InjectedEvent::Query { text: text.to_string() });
    }

    pub fn frames_mut(&mut self) -> &mut [Frame] {
        &mut self.frames
    }

    pub fn build(self) -> Session {
        Session { frames: self.frames }
    }
}

pub fn unit_vector(dim: usize, axis: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[axis % dim] = 1.0;
    v
}

/// Wrist position that puts a hand's thumb and index tips, averaged, at
/// `target`.
pub fn wrist_for_tips(class: GestureClass, side: Hand, palm: f64, target: (f64, f64)) -> (f64, f64) {
    let mut p = canonical_params(class, (0.5, 0.5));
    p.palm = palm;
    let pts = pose_landmarks(side, &p);
    let mid = ((pts[4].x + pts[8].x) / 2.0, (pts[4].y + pts[8].y) / 2.0);
    (0.5 + target.0 - mid.0, 0.5 + target.1 - mid.1)
}

pub fn object_box(h: &HandFrame) -> BBox {
    hand_bbox(h).scale_about_center(0.4).clamp_unit()
}
