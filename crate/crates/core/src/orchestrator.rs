//! Description orchestration: templates, the narration channel, and the rules
//! that decide what is generated, spoken, interrupted or dropped.
//!
//! The orchestrator owns no threads and never blocks. Callers feed it pipeline
//! events, generation results and the clock; it answers with [`Action`]s.
//! Narration is simulated: a description of `L` characters takes
//! `ceil(L * 1000 / rate)` ms.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::backends::{BackendError, DescriptionRequest, ImageRef};
use crate::composite::hand_bbox;
use crate::trace::GenerationOutcome;
use crate::types::{
    BBox, CompositeKind, ContactInfo, Description, DescriptionKind, Frame, GestureClass, Hand, KeyframeKind,
    PipelineEvent,
};

pub const FLIP_TEXT: &str = "You flipped or changed the object.";
pub const STILL_PROCESSING: &str = "Still processing the text, please try again later.";
pub const QUERY_FAILED: &str = "I could not answer that.";
pub const TEXTS_FAILED: &str = "I could not read the text.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NarrationParams {
    /// Characters per second.
    pub rate_cps: f64,
    /// Window for merging hand-state messages of the two hands.
    pub merge_ms: u64,
}

impl Default for NarrationParams {
    fn default() -> Self {
        Self {
            rate_cps: 15.0,
            merge_ms: 1000,
        }
    }
}

pub fn speech_duration_ms(text: &str, rate_cps: f64) -> u64 {
    (text.chars().count() as f64 * 1000.0 / rate_cps).ceil() as u64
}

#[derive(Debug, Error, PartialEq)]
pub enum OrchestratorError {
    #[error("no prompt template for {0:?}")]
    UnknownKind(DescriptionKind),
}

fn which_of(hands: &[Hand]) -> &'static str {
    match hands {
        [h] => h.as_str(),
        _ => "both",
    }
}

/// Hand-state feedback. `presence` adds the "I see your ..." opener.
pub fn hand_state_text(which_hand: &str, gesture: Option<GestureClass>, presence: bool) -> String {
    let plural = which_hand == "both";
    let subject = if plural {
        format!("your {which_hand} hands")
    } else {
        format!("your {which_hand} hand")
    };
    let verb = if plural { "are" } else { "is" };
    match (presence, gesture.and_then(GestureClass::gerund)) {
        (true, Some(g)) => format!("I see {subject} {verb} {g}."),
        (true, None) => format!("I see {subject}."),
        (false, Some(g)) => format!("Y{} {verb} {g}.", &subject[1..]),
        (false, None) => format!("Y{}.", &subject[1..]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageSelection {
    ObjectCrop,
    BothCrops,
    FullFrame,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptContext<'a> {
    pub which_hand: &'a str,
    pub gesture: Option<GestureClass>,
    pub object_name: Option<&'a str>,
    /// For comparative prompts: both hands on one object.
    pub same_object: bool,
}

impl<'a> PromptContext<'a> {
    pub fn new(which_hand: &'a str, gesture: Option<GestureClass>) -> Self {
        Self {
            which_hand,
            gesture,
            object_name: None,
            same_object: false,
        }
    }
}

pub fn build_prompt(
    kind: DescriptionKind,
    ctx: &PromptContext<'_>,
) -> Result<(String, ImageSelection), OrchestratorError> {
    let both = ctx.which_hand == "both";
    let my_hand = if both {
        "both my hands".to_string()
    } else {
        format!("my {} hand", ctx.which_hand)
    };
    let gesture = ctx.gesture.and_then(GestureClass::gerund).unwrap_or("holding");
    Ok(match kind {
        DescriptionKind::Brief => {
            let text = if both {
                "What are both my hands touching?".to_string()
            } else {
                format!("What is my {} hand touching?", ctx.which_hand)
            };
            (text, ImageSelection::ObjectCrop)
        }
        DescriptionKind::Detailed => (
            format!("Can you describe the object I am {gesture} with {my_hand} in detail?"),
            ImageSelection::ObjectCrop,
        ),
        DescriptionKind::Texts => {
            let your = if both {
                "both your hands are".to_string()
            } else {
                format!("your {} hand is", ctx.which_hand)
            };
            let object = ctx.object_name.unwrap_or("object");
            (
                format!(
                    "I am holding the object with {my_hand}. Please describe the text line by line. \
                     If there is no text, can you just return 'no text on the {object} {your} {gesture}.'"
                ),
                ImageSelection::ObjectCrop,
            )
        }
        DescriptionKind::Comparative if ctx.same_object => (
            "Can you describe the spatial and visual relationship between the points I am touching, \
             and highlight any visual similarities or differences between them?"
                .to_string(),
            ImageSelection::FullFrame,
        ),
        DescriptionKind::Comparative => (
            "Can you describe the object I am holding with my left hand and the one with my right hand? \
             What are the differences or similarities between them?"
                .to_string(),
            ImageSelection::BothCrops,
        ),
        DescriptionKind::QueryAnswer => (String::new(), ImageSelection::FullFrame),
        other => return Err(OrchestratorError::UnknownKind(other)),
    })
}

/// Work the orchestrator wants done off-loop.
#[derive(Debug, Clone, PartialEq)]
pub enum JobSpec {
    /// Hand-object contact detection on a keyframe.
    Contact(Box<Frame>),
    Describe(DescriptionRequest),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobRequest {
    pub ticket: u64,
    pub spec: JobSpec,
    pub keyframe_id: Option<u64>,
    pub issued_t_ms: u64,
}

impl JobRequest {
    pub fn kind(&self) -> Option<DescriptionKind> {
        match &self.spec {
            JobSpec::Contact(_) => None,
            JobSpec::Describe(r) => Some(r.kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutput {
    Contact(ContactInfo),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Narration started.
    Speak(Description),
    /// Narration ran to completion.
    Finished(Description),
    /// Narration was cut short.
    Interrupt(Description),
    IssueGeneration(JobRequest),
    DropPending {
        ticket: u64,
    },
    Ignore {
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BriefState {
    Pending,
    Queued,
    Started,
    Gone,
}

#[derive(Debug, Clone, PartialEq)]
enum TextsState {
    Awaiting,
    Ready(String),
    Failed,
}

#[derive(Debug, Clone)]
struct KeyframeCtx {
    id: u64,
    hands: Vec<Hand>,
    event_t: u64,
    frame: Box<Frame>,
    brief: BriefState,
    texts: TextsState,
    held_detailed: Option<Description>,
    tag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PendingKind {
    Contact,
    Describe(DescriptionKind),
    Query,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    kind: PendingKind,
    keyframe: Option<u64>,
    event_t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HandStateMeta {
    hand: Hand,
    gesture: GestureClass,
    presence: bool,
}

#[derive(Debug, Clone)]
struct Item {
    desc: Description,
    seq: u64,
    meta: Option<HandStateMeta>,
}

#[derive(Debug, Clone)]
struct Speaking {
    item: Item,
    end_t: u64,
}

#[derive(Debug, Clone, Copy)]
struct QueryLock {
    ticket: u64,
    answer_seq: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Orchestrator {
    params: NarrationParams,
    queue: BTreeMap<(u8, u64, u64), Item>,
    speaking: Option<Speaking>,
    seq: u64,
    next_ticket: u64,
    pending: HashMap<u64, Pending>,
    keyframe: Option<KeyframeCtx>,
    latest_keyframe_id: Option<u64>,
    stable: [GestureClass; 2],
    lock: Option<QueryLock>,
    last_color: Option<String>,
    frame: Option<Box<Frame>>,
    contact: Option<ContactInfo>,
}

impl Orchestrator {
    pub fn new(params: NarrationParams) -> Self {
        Self {
            params,
            queue: BTreeMap::new(),
            speaking: None,
            seq: 0,
            next_ticket: 1,
            pending: HashMap::new(),
            keyframe: None,
            latest_keyframe_id: None,
            stable: [GestureClass::OutOfView; 2],
            lock: None,
            last_color: None,
            frame: None,
            contact: None,
        }
    }

    pub fn params(&self) -> NarrationParams {
        self.params
    }

    pub fn is_query_locked(&self) -> bool {
        self.lock.is_some()
    }

    pub fn is_idle(&self) -> bool {
        self.speaking.is_none() && self.queue.is_empty() && self.pending.is_empty()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn speaking(&self) -> Option<&Description> {
        self.speaking.as_ref().map(|s| &s.item.desc)
    }

    pub fn queued(&self) -> impl Iterator<Item = &Description> {
        self.queue.values().map(|i| &i.desc)
    }

    /// End time of the current narration.
    pub fn next_deadline(&self) -> Option<u64> {
        self.speaking.as_ref().map(|s| s.end_t)
    }

    /// Latest frame, for image selection. `contact` is the detector output
    /// for this frame when one was computed.
    pub fn observe_frame(&mut self, frame: &Frame, contact: Option<ContactInfo>) {
        self.frame = Some(Box::new(frame.clone()));
        self.contact = contact.or_else(|| frame.contact.clone());
    }

    fn ticket(&mut self) -> u64 {
        let t = self.next_ticket;
        self.next_ticket += 1;
        t
    }

    fn enqueue(&mut self, desc: Description, meta: Option<HandStateMeta>) -> Option<u64> {
        if desc.text.trim().is_empty() {
            return None;
        }
        self.seq += 1;
        let seq = self.seq;
        self.queue
            .insert((desc.priority, desc.created_t_ms, seq), Item { desc, seq, meta });
        Some(seq)
    }

    fn interrupt(&mut self, now: u64, out: &mut Vec<Action>) {
        if let Some(s) = self.speaking.take() {
            let mut d = s.item.desc;
            d.spoken_end_t_ms = Some(now.max(d.spoken_start_t_ms.unwrap_or(now)));
            d.interrupted = true;
            self.release_lock_for(s.item.seq);
            out.push(Action::Interrupt(d));
        }
    }

    fn release_lock_for(&mut self, seq: u64) {
        if self.lock.is_some_and(|l| l.answer_seq == Some(seq)) {
            self.lock = None;
        }
    }

    fn purge_queue(&mut self, mut drop: impl FnMut(&Item) -> bool) {
        self.queue.retain(|_, item| !drop(item));
    }

    /// Everything tied to a keyframe older than `k` is discarded.
    fn supersede(&mut self, k: u64, now: u64, out: &mut Vec<Action>) {
        self.latest_keyframe_id = Some(k);
        let stale: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| p.keyframe.is_some_and(|pk| pk < k))
            .map(|(t, _)| *t)
            .collect();
        let mut stale = stale;
        stale.sort_unstable();
        for t in stale {
            self.pending.remove(&t);
            out.push(Action::DropPending { ticket: t });
        }
        self.purge_queue(|i| i.desc.keyframe_id.is_some_and(|dk| dk < k));
        if self
            .speaking
            .as_ref()
            .is_some_and(|s| s.item.desc.keyframe_id.is_some_and(|dk| dk < k))
        {
            self.interrupt(now, out);
        }
        if self.keyframe.as_ref().is_some_and(|c| c.id < k) {
            self.keyframe = None;
        }
    }

    pub fn on_event(&mut self, event: &PipelineEvent, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        if let PipelineEvent::HandStateChanged { hand, to, .. } = event {
            self.stable[hand.index()] = *to;
        }
        if self.lock.is_some() && event.is_gesture_derived() {
            if let PipelineEvent::Keyframe { frame_id, .. } = event {
                self.supersede(*frame_id, now, &mut out);
            }
            out.push(Action::Ignore {
                reason: "query in progress".into(),
            });
            return out;
        }
        match event {
            PipelineEvent::HandStateChanged {
                hand,
                from,
                to,
                frame_id,
            } => self.on_hand_state(*hand, *from, *to, *frame_id, now),
            PipelineEvent::Keyframe {
                kind,
                frame_id,
                hands_in_contact,
            } => self.on_keyframe(*kind, *frame_id, hands_in_contact, now, &mut out),
            PipelineEvent::CompositeGesture { kind, detail, .. } => match kind {
                CompositeKind::HoldPoint => {
                    if detail.entry {
                        self.last_color = None;
                    }
                    match &detail.color {
                        None => out.push(Action::Ignore {
                            reason: "no color sample".into(),
                        }),
                        Some(c) if self.last_color.as_ref() == Some(c) => out.push(Action::Ignore {
                            reason: format!("color {c} unchanged"),
                        }),
                        Some(c) => {
                            self.last_color = Some(c.clone());
                            self.interrupt(now, &mut out);
                            self.purge_queue(|i| i.desc.kind == DescriptionKind::ColorLabel);
                            let d = Description::new(DescriptionKind::ColorLabel, c.clone(), None, now, now);
                            self.enqueue(d, None);
                        }
                    }
                }
                CompositeKind::HoldSwipeUp => {
                    self.interrupt(now, &mut out);
                    self.purge_queue(|i| {
                        i.desc.kind == DescriptionKind::Texts
                            || (i.desc.kind == DescriptionKind::Status && i.desc.priority == 1)
                    });
                    let state = self.keyframe.as_ref().map(|c| (c.id, c.texts.clone()));
                    let status = |text: &str| {
                        Description::new(DescriptionKind::Status, text, None, now, now)
                            .with_priority(DescriptionKind::Texts.priority())
                    };
                    match state {
                        Some((k, TextsState::Ready(text))) => {
                            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                                let d = Description::new(DescriptionKind::Texts, line, Some(k), now, now);
                                self.enqueue(d, None);
                            }
                        }
                        Some((_, TextsState::Awaiting)) => {
                            self.enqueue(status(STILL_PROCESSING), None);
                        }
                        Some((_, TextsState::Failed)) | None => {
                            self.enqueue(status(TEXTS_FAILED), None);
                        }
                    }
                }
                CompositeKind::BimanualSameObject | CompositeKind::BimanualDifferentObjects => {
                    let same = *kind == CompositeKind::BimanualSameObject;
                    self.issue_comparative(same, now, &mut out);
                }
            },
            PipelineEvent::QueryIssued { text, frame_id } => {
                self.interrupt(now, &mut out);
                if let Some(old) = self.lock.take() {
                    if self.pending.remove(&old.ticket).is_some() {
                        out.push(Action::DropPending { ticket: old.ticket });
                    }
                    self.purge_queue(|i| Some(i.seq) == old.answer_seq);
                }
                let tag = self.object_tag();
                let path = self.frame.as_ref().and_then(|f| f.image.clone());
                let image = ImageRef::full_frame(*frame_id, path, tag);
                match crate::backends::query_request(image, text, None, now) {
                    Ok(req) => {
                        let ticket = self.ticket();
                        self.pending.insert(
                            ticket,
                            Pending {
                                kind: PendingKind::Query,
                                keyframe: None,
                                event_t: now,
                            },
                        );
                        self.lock = Some(QueryLock {
                            ticket,
                            answer_seq: None,
                        });
                        out.push(Action::IssueGeneration(JobRequest {
                            ticket,
                            spec: JobSpec::Describe(req),
                            keyframe_id: None,
                            issued_t_ms: now,
                        }));
                    }
                    Err(e) => out.push(Action::Ignore { reason: e.to_string() }),
                }
            }
        }
        out
    }

    fn object_tag(&self) -> Option<String> {
        if let Some(c) = &self.keyframe {
            if c.tag.is_some() {
                return c.tag.clone();
            }
        }
        let contact = self.contact.as_ref()?;
        Hand::ALL
            .iter()
            .filter_map(|h| contact.hand(*h))
            .find_map(|c| c.object_tag.clone())
    }

    fn on_hand_state(&mut self, hand: Hand, from: GestureClass, to: GestureClass, frame_id: u64, now: u64) {
        if to == GestureClass::OutOfView {
            return;
        }
        let presence = from == GestureClass::OutOfView;
        let keyframe = to.is_grasp().then_some(frame_id);
        let merge_ms = self.params.merge_ms;
        let partner = self
            .queue
            .iter()
            .find(|(_, i)| {
                i.meta
                    .is_some_and(|m| m.hand != hand && m.gesture == to && m.presence == presence)
                    && now.saturating_sub(i.desc.created_t_ms) <= merge_ms
            })
            .map(|(k, _)| *k);
        if let Some(key) = partner {
            let mut item = self.queue.remove(&key).expect("key just found");
            item.desc.text = hand_state_text("both", Some(to), presence);
            item.desc.keyframe_id = match (item.desc.keyframe_id, keyframe) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
            self.queue.insert(key, item);
            return;
        }
        let d = Description::new(
            DescriptionKind::HandState,
            hand_state_text(hand.as_str(), Some(to), presence),
            keyframe,
            now,
            now,
        );
        self.enqueue(
            d,
            Some(HandStateMeta {
                hand,
                gesture: to,
                presence,
            }),
        );
    }

    fn on_keyframe(&mut self, kind: KeyframeKind, k: u64, hands: &[Hand], now: u64, out: &mut Vec<Action>) {
        self.supersede(k, now, out);
        let frame = self.frame.clone().unwrap_or_else(|| {
            Box::new(Frame {
                frame_id: k,
                t_ms: now,
                ..Default::default()
            })
        });
        if kind == KeyframeKind::ObjectChanged {
            let d = Description::new(DescriptionKind::HandState, FLIP_TEXT, Some(k), now, now);
            self.enqueue(d, None);
        }
        self.keyframe = Some(KeyframeCtx {
            id: k,
            hands: hands.to_vec(),
            event_t: now,
            frame: frame.clone(),
            brief: BriefState::Pending,
            texts: TextsState::Awaiting,
            held_detailed: None,
            tag: None,
        });
        let ticket = self.ticket();
        self.pending.insert(
            ticket,
            Pending {
                kind: PendingKind::Contact,
                keyframe: Some(k),
                event_t: now,
            },
        );
        out.push(Action::IssueGeneration(JobRequest {
            ticket,
            spec: JobSpec::Contact(frame),
            keyframe_id: Some(k),
            issued_t_ms: now,
        }));
    }

    fn issue_comparative(&mut self, same: bool, now: u64, out: &mut Vec<Action>) {
        let Some(frame) = self.frame.clone() else {
            out.push(Action::Ignore {
                reason: "no frame for comparison".into(),
            });
            return;
        };
        let contact = self.contact.clone().unwrap_or_default();
        let ctx = PromptContext {
            same_object: same,
            ..PromptContext::new("both", None)
        };
        let (prompt, selection) = build_prompt(DescriptionKind::Comparative, &ctx).expect("comparative has a template");
        let images = match selection {
            ImageSelection::FullFrame => {
                let tag = Hand::ALL
                    .iter()
                    .filter_map(|h| contact.hand(*h))
                    .find_map(|c| c.object_tag.clone());
                vec![ImageRef::full_frame(frame.frame_id, frame.image.clone(), tag)]
            }
            _ => Hand::ALL
                .iter()
                .map(|h| {
                    let c = contact.hand(*h);
                    ImageRef {
                        frame_id: frame.frame_id,
                        path: frame.image.clone(),
                        region: c.and_then(|c| c.object_box),
                        tag: c.and_then(|c| c.object_tag.clone()),
                    }
                })
                .collect(),
        };
        let keyframe = self.latest_keyframe_id;
        let req = DescriptionRequest {
            kind: DescriptionKind::Comparative,
            prompt,
            images,
            keyframe_id: keyframe,
            issued_t_ms: now,
            which_hand: "both".into(),
            gesture: None,
        };
        let ticket = self.ticket();
        self.pending.insert(
            ticket,
            Pending {
                kind: PendingKind::Describe(DescriptionKind::Comparative),
                keyframe,
                event_t: now,
            },
        );
        out.push(Action::IssueGeneration(JobRequest {
            ticket,
            spec: JobSpec::Describe(req),
            keyframe_id: keyframe,
            issued_t_ms: now,
        }));
    }

    fn on_contact(&mut self, info: ContactInfo, now: u64, out: &mut Vec<Action>) {
        let Some(ctx) = self.keyframe.as_mut() else {
            return;
        };
        let targets: Vec<Hand> = ctx.hands.iter().copied().filter(|h| info.in_contact(*h)).collect();
        if targets.is_empty() {
            log::debug!("keyframe {}: detector reports no contact", ctx.id);
            ctx.brief = BriefState::Gone;
            ctx.texts = TextsState::Failed;
            return;
        }
        let which = which_of(&targets);
        let stable = self.stable;
        let gesture = if targets.iter().any(|h| stable[h.index()] == GestureClass::Hold) {
            GestureClass::Hold
        } else {
            GestureClass::Touch
        };
        let mut region: Option<BBox> = None;
        let mut tags: Vec<String> = Vec::new();
        for h in &targets {
            let c = info.hand(*h).expect("in contact");
            let b = c.object_box.or_else(|| {
                ctx.frame
                    .hand(*h)
                    .map(|f| hand_bbox(f).scale_about_center(0.4).clamp_unit())
            });
            region = match (region, b) {
                (Some(a), Some(b)) => Some(a.union(&b)),
                (a, b) => a.or(b),
            };
            if let Some(t) = &c.object_tag {
                if !tags.contains(t) {
                    tags.push(t.clone());
                }
            }
        }
        tags.sort();
        ctx.tag = (!tags.is_empty()).then(|| tags.join("+"));
        let image = ImageRef {
            frame_id: ctx.frame.frame_id,
            path: ctx.frame.image.clone(),
            region,
            tag: ctx.tag.clone(),
        };
        let k = ctx.id;
        let event_t = ctx.event_t;
        for kind in [
            DescriptionKind::Brief,
            DescriptionKind::Detailed,
            DescriptionKind::Texts,
        ] {
            let pctx = PromptContext::new(which, Some(gesture));
            let (prompt, _) = build_prompt(kind, &pctx).expect("template exists");
            let req = DescriptionRequest {
                kind,
                prompt,
                images: vec![image.clone()],
                keyframe_id: Some(k),
                issued_t_ms: now,
                which_hand: which.to_string(),
                gesture: Some(gesture),
            };
            let ticket = self.ticket();
            self.pending.insert(
                ticket,
                Pending {
                    kind: PendingKind::Describe(kind),
                    keyframe: Some(k),
                    event_t,
                },
            );
            out.push(Action::IssueGeneration(JobRequest {
                ticket,
                spec: JobSpec::Describe(req),
                keyframe_id: Some(k),
                issued_t_ms: now,
            }));
        }
    }

    fn release_detailed(&mut self) {
        if let Some(ctx) = self.keyframe.as_mut() {
            if let Some(d) = ctx.held_detailed.take() {
                self.enqueue(d, None);
            }
        }
    }

    /// Applies a finished job. Results for superseded keyframes or unknown
    /// tickets are dropped.
    pub fn on_result(
        &mut self,
        ticket: u64,
        result: Result<JobOutput, BackendError>,
        now: u64,
    ) -> (GenerationOutcome, Vec<Action>) {
        let mut out = Vec::new();
        let Some(p) = self.pending.remove(&ticket) else {
            return (GenerationOutcome::Dropped, out);
        };
        let current = self.keyframe.as_ref().map(|c| c.id);
        if p.keyframe.is_some() && p.keyframe < self.latest_keyframe_id {
            return (GenerationOutcome::Dropped, out);
        }
        let failed = result.is_err();
        match (p.kind, result) {
            (PendingKind::Query, result) => {
                if self.lock.is_none_or(|l| l.ticket != ticket) {
                    return (GenerationOutcome::Dropped, out);
                }
                let d = match &result {
                    Ok(JobOutput::Text(t)) if !t.trim().is_empty() => {
                        Description::new(DescriptionKind::QueryAnswer, t.clone(), None, p.event_t, now)
                    }
                    _ => Description::new(DescriptionKind::Status, QUERY_FAILED, None, p.event_t, now)
                        .with_priority(DescriptionKind::QueryAnswer.priority()),
                };
                let seq = self.enqueue(d, None);
                if let Some(l) = self.lock.as_mut() {
                    l.answer_seq = seq;
                }
                let outcome = if result.is_ok() {
                    GenerationOutcome::Delivered
                } else {
                    GenerationOutcome::Failed
                };
                return (outcome, out);
            }
            (PendingKind::Contact, Ok(JobOutput::Contact(info))) => {
                if current == p.keyframe {
                    self.on_contact(info, now, &mut out);
                }
            }
            (PendingKind::Contact, _) => {
                if let Some(ctx) = self.keyframe.as_mut().filter(|c| Some(c.id) == p.keyframe) {
                    ctx.brief = BriefState::Gone;
                    ctx.texts = TextsState::Failed;
                }
            }
            (PendingKind::Describe(kind), result) => {
                let text = match result {
                    Ok(JobOutput::Text(t)) => Some(t),
                    _ => None,
                };
                let k = p.keyframe;
                let for_current = k.is_some() && k == current;
                match kind {
                    DescriptionKind::Brief if for_current => {
                        let queued =
                            text.and_then(|t| self.enqueue(Description::new(kind, t, k, p.event_t, now), None));
                        let ctx = self.keyframe.as_mut().expect("current keyframe");
                        if queued.is_some() {
                            ctx.brief = BriefState::Queued;
                        } else {
                            ctx.brief = BriefState::Gone;
                            self.release_detailed();
                        }
                    }
                    DescriptionKind::Detailed if for_current => {
                        if let Some(t) = text {
                            let d = Description::new(kind, t, k, p.event_t, now);
                            let ctx = self.keyframe.as_mut().expect("current keyframe");
                            if matches!(ctx.brief, BriefState::Started | BriefState::Gone) {
                                self.enqueue(d, None);
                            } else {
                                ctx.held_detailed = Some(d);
                            }
                        }
                    }
                    DescriptionKind::Texts if for_current => {
                        let ctx = self.keyframe.as_mut().expect("current keyframe");
                        ctx.texts = match text {
                            Some(t) => TextsState::Ready(t),
                            None => TextsState::Failed,
                        };
                    }
                    DescriptionKind::Comparative => {
                        if let Some(t) = text {
                            self.enqueue(Description::new(kind, t, k, p.event_t, now), None);
                        }
                    }
                    _ => return (GenerationOutcome::Dropped, out),
                }
            }
        }
        let outcome = if failed {
            GenerationOutcome::Failed
        } else {
            GenerationOutcome::Delivered
        };
        (outcome, out)
    }

    /// Starts the best eligible queued description if nothing is speaking.
    pub fn pump(&mut self, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        if self.speaking.is_some() {
            return out;
        }
        let locked = self.lock.is_some();
        let key = self.queue.keys().find(|(prio, _, _)| !locked || *prio == 0).copied();
        let Some(key) = key else {
            return out;
        };
        let mut item = self.queue.remove(&key).expect("key just found");
        item.desc.spoken_start_t_ms = Some(now);
        let end_t = now + speech_duration_ms(&item.desc.text, self.params.rate_cps);
        if item.desc.kind == DescriptionKind::Brief {
            if let Some(ctx) = self.keyframe.as_mut().filter(|c| Some(c.id) == item.desc.keyframe_id) {
                ctx.brief = BriefState::Started;
            }
            self.release_detailed();
        }
        out.push(Action::Speak(item.desc.clone()));
        self.speaking = Some(Speaking { item, end_t });
        out
    }

    /// Completes the current narration if it ends at or before `now`.
    pub fn complete_due(&mut self, now: u64) -> Option<Action> {
        let due = self.speaking.as_ref().is_some_and(|s| s.end_t <= now);
        if !due {
            return None;
        }
        let s = self.speaking.take().expect("checked above");
        let mut d = s.item.desc;
        d.spoken_end_t_ms = Some(s.end_t);
        self.release_lock_for(s.item.seq);
        Some(Action::Finished(d))
    }

    /// Advances narration to `now`, starting queued items as others finish.
    pub fn tick(&mut self, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        while let Some(end) = self.next_deadline().filter(|e| *e <= now) {
            out.extend(self.complete_due(end));
            out.extend(self.pump(end));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_state_templates() {
        assert_eq!(
            hand_state_text("right", Some(GestureClass::Point), true),
            "I see your right hand is pointing."
        );
        assert_eq!(
            hand_state_text("both", Some(GestureClass::Hold), true),
            "I see your both hands are holding."
        );
        assert_eq!(
            hand_state_text("left", Some(GestureClass::Touch), false),
            "Your left hand is touching."
        );
        assert_eq!(hand_state_text("left", None, true), "I see your left hand.");
    }

    #[test]
    fn prompt_templates() {
        let (p, sel) = build_prompt(DescriptionKind::Brief, &PromptContext::new("left", None)).unwrap();
        assert_eq!(p, "What is my left hand touching?");
        assert_eq!(sel, ImageSelection::ObjectCrop);
        let (p, _) = build_prompt(
            DescriptionKind::Detailed,
            &PromptContext::new("right", Some(GestureClass::Hold)),
        )
        .unwrap();
        assert_eq!(
            p,
            "Can you describe the object I am holding with my right hand in detail?"
        );
        let (p, sel) = build_prompt(DescriptionKind::Comparative, &PromptContext::new("both", None)).unwrap();
        assert!(p.contains("What are the differences or similarities between them?"));
        assert_eq!(sel, ImageSelection::BothCrops);
        let same = PromptContext {
            same_object: true,
            ..PromptContext::new("both", None)
        };
        let (p, sel) = build_prompt(DescriptionKind::Comparative, &same).unwrap();
        assert!(p.contains("highlight any visual similarities or differences between them"));
        assert_eq!(sel, ImageSelection::FullFrame);
        let (p, _) = build_prompt(
            DescriptionKind::Texts,
            &PromptContext::new("left", Some(GestureClass::Hold)),
        )
        .unwrap();
        assert!(p.starts_with("I am holding the object with my left hand. Please describe the text line by line."));
        assert!(p.ends_with("'no text on the object your left hand is holding.'"));
        assert_eq!(
            build_prompt(DescriptionKind::HandState, &PromptContext::new("left", None)),
            Err(OrchestratorError::UnknownKind(DescriptionKind::HandState))
        );
    }

    #[test]
    fn duration_arithmetic() {
        assert_eq!(speech_duration_ms(&"x".repeat(30), 15.0), 2000);
        assert_eq!(speech_duration_ms("abcdefg", 15.0), 467);
    }

    #[test]
    fn narration_interrupt_and_empty_tick() {
        let mut o = Orchestrator::new(NarrationParams::default());
        assert!(o.tick(10_000).is_empty());
        let ev = PipelineEvent::HandStateChanged {
            hand: Hand::Right,
            from: GestureClass::OutOfView,
            to: GestureClass::Point,
            frame_id: 1,
        };
        o.on_event(&ev, 0);
        let started = o.pump(0);
        assert!(matches!(&started[0], Action::Speak(d) if d.text == "I see your right hand is pointing."));
        let q = PipelineEvent::QueryIssued {
            text: "What is this?".into(),
            frame_id: 2,
        };
        let acts = o.on_event(&q, 500);
        let Action::Interrupt(d) = &acts[0] else {
            panic!("{acts:?}")
        };
        assert_eq!(d.spoken_end_t_ms, Some(500));
        assert!(d.interrupted);
        assert!(o.is_query_locked());
    }

    #[test]
    fn merges_both_hands_in_one_frame() {
        let mut o = Orchestrator::new(NarrationParams::default());
        for hand in Hand::ALL {
            let ev = PipelineEvent::HandStateChanged {
                hand,
                from: GestureClass::OutOfView,
                to: GestureClass::Hold,
                frame_id: 4,
            };
            o.on_event(&ev, 100);
        }
        let acts = o.pump(100);
        assert!(matches!(&acts[0], Action::Speak(d) if d.text == "I see your both hands are holding."));
        assert_eq!(o.queued().count(), 0);
    }
}
