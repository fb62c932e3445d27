//! Frame-by-frame pipeline: classification, smoothing, keyframes, composite
//! gestures and narration, in virtual or wall-clock time.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{DynamicImage, RgbImage};
use thiserror::Error;

use crate::backends::{BackendProfile, ContactDetector, HeuristicDetector};
use crate::color::{sample_region, ColorTable, SampleParams};
use crate::composite::{detect_config, hand_bbox, BimanualConfig, CompositeParams, CompositeTracker};
use crate::eval::{build_report, EvalReport};
use crate::executor::{
    Backends, Executor, JobDone, ThreadedExecutor, VirtualExecutor, DEFAULT_CONCURRENCY, DEFAULT_TIMEOUT_MS,
};
use crate::gesture::GestureClassifier;
use crate::mlp::ModelError;
use crate::motion::{MotionClassifier, TrajectoryWindow};
use crate::object_change::{builtin_embed, Embedding, FlipParams, GraspSampler, InvalidFlipParams};
use crate::orchestrator::{Action, NarrationParams, Orchestrator};
use crate::stabilizer::{SmoothingParams, Stabilizer, StabilizerError};
use crate::trace::{serialize_events, write_jsonl, GenerationOutcome, GenerationRecord, TraceRecord, TranscriptRecord};
use crate::types::{BBox, Description, Frame, Hand, InjectedEvent, KeyframeKind, PipelineEvent, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Frame timestamps drive a simulated clock; backends never block.
    Virtual,
    /// Real elapsed time. `pace` sleeps so frames arrive at their timestamps.
    WallClock { pace: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub smoothing: SmoothingParams,
    pub flip: FlipParams,
    pub composite: CompositeParams,
    pub narration: NarrationParams,
    pub sample: SampleParams,
    pub concurrency: usize,
    pub timeout_ms: u64,
    /// Directory frame image paths are relative to.
    pub image_root: Option<PathBuf>,
    pub clock: ClockMode,
    /// Wall-clock mode: how long to wait for outstanding jobs at the end.
    pub drain_timeout_ms: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            smoothing: SmoothingParams::default(),
            flip: FlipParams::default(),
            composite: CompositeParams::default(),
            narration: NarrationParams::default(),
            sample: SampleParams::default(),
            concurrency: DEFAULT_CONCURRENCY,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            image_root: None,
            clock: ClockMode::Virtual,
            drain_timeout_ms: 60_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Stabilizer(#[from] StabilizerError),
    #[error(transparent)]
    Flip(#[from] InvalidFlipParams),
    #[error("gesture model: {0}")]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct Components {
    pub gesture: GestureClassifier,
    pub motion: MotionClassifier,
    pub colors: ColorTable,
    pub backends: Backends,
}

impl Components {
    /// Built-in models and color table with mock backends.
    pub fn mock(profile: BackendProfile, seed: u64, sleep: bool) -> Self {
        Self {
            gesture: GestureClassifier::builtin(),
            motion: MotionClassifier::builtin(),
            colors: ColorTable::builtin(),
            backends: Backends::mock(profile, seed, sleep),
        }
    }
}

enum Exec {
    Virtual(VirtualExecutor),
    Threaded(ThreadedExecutor),
}

impl Exec {
    fn get(&mut self) -> &mut dyn Executor {
        match self {
            Exec::Virtual(e) => e,
            Exec::Threaded(e) => e,
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    gesture: GestureClassifier,
    motion: MotionClassifier,
    colors: ColorTable,
    stabilizer: Stabilizer,
    samplers: [GraspSampler; 2],
    tracker: CompositeTracker,
    window: TrajectoryWindow,
    heuristic: HeuristicDetector,
    orch: Orchestrator,
    exec: Exec,
    trace: Vec<TraceRecord>,
    spoken: Vec<Description>,
    unseen_spoken: usize,
    started: Instant,
    first_t: Option<u64>,
    now: u64,
    frames: u64,
    image_cache: Option<(u64, Option<Arc<DynamicImage>>)>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, components: Components) -> Result<Self, PipelineError> {
        cfg.flip.validate()?;
        if !(cfg.narration.rate_cps.is_finite() && cfg.narration.rate_cps > 0.0) {
            return Err(PipelineError::Config(format!(
                "speech rate must be positive, got {}",
                cfg.narration.rate_cps
            )));
        }
        let exec = match cfg.clock {
            ClockMode::Virtual => Exec::Virtual(VirtualExecutor::new(
                components.backends,
                cfg.concurrency,
                cfg.timeout_ms,
            )),
            ClockMode::WallClock { .. } => Exec::Threaded(ThreadedExecutor::new(
                components.backends,
                cfg.concurrency,
                cfg.timeout_ms,
            )),
        };
        Ok(Self {
            stabilizer: Stabilizer::new(cfg.smoothing)?,
            samplers: [GraspSampler::new(&cfg.flip), GraspSampler::new(&cfg.flip)],
            tracker: CompositeTracker::new(cfg.composite),
            window: TrajectoryWindow::new(),
            heuristic: HeuristicDetector::default(),
            orch: Orchestrator::new(cfg.narration),
            gesture: components.gesture,
            motion: components.motion,
            colors: components.colors,
            exec,
            trace: Vec::new(),
            spoken: Vec::new(),
            unseen_spoken: 0,
            started: Instant::now(),
            first_t: None,
            now: 0,
            frames: 0,
            image_cache: None,
            cfg,
        })
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames
    }

    /// Descriptions whose narration ended since the last call.
    pub fn take_spoken(&mut self) -> &[Description] {
        let from = self.unseen_spoken;
        self.unseen_spoken = self.spoken.len();
        &self.spoken[from..]
    }

    fn clock_for(&mut self, frame: &Frame) -> u64 {
        let t = match self.cfg.clock {
            ClockMode::Virtual => frame.t_ms,
            ClockMode::WallClock { pace } => {
                let first = *self.first_t.get_or_insert(frame.t_ms);
                if pace {
                    let due = Duration::from_millis(frame.t_ms - first);
                    if let Some(wait) = due.checked_sub(self.started.elapsed()) {
                        std::thread::sleep(wait);
                    }
                }
                self.started.elapsed().as_millis() as u64
            }
        };
        self.now = self.now.max(t);
        self.now
    }

    pub fn push_frame(&mut self, frame: &Frame) -> Result<(), PipelineError> {
        let now = self.clock_for(frame);
        self.advance_to(now);
        self.frames += 1;
        let fid = frame.frame_id;

        let mut events = Vec::new();
        let mut new_grasp = [false; 2];
        for hand in Hand::ALL {
            let (pred, _) = self.gesture.classify(frame.hand(hand))?;
            for e in self.stabilizer.push_prediction(hand, pred, fid)? {
                if matches!(e, PipelineEvent::Keyframe { .. }) {
                    new_grasp[hand.index()] = true;
                } else {
                    events.push(e);
                }
            }
        }
        let grasping: Vec<Hand> = Hand::ALL.into_iter().filter(|h| new_grasp[h.index()]).collect();

        let mut flipped = Vec::new();
        for hand in Hand::ALL {
            let in_grasp = self.stabilizer.state(hand).gesture.is_grasp();
            if !self.samplers[hand.index()].step(in_grasp, new_grasp[hand.index()]) {
                continue;
            }
            let Some(e) = self.embedding_for(frame, hand) else {
                continue;
            };
            match self.samplers[hand.index()].observe(e) {
                Ok(true) if grasping.is_empty() => flipped.push(hand),
                Ok(_) => {}
                Err(err) => log::warn!("frame {fid}: {err}"),
            }
        }
        if !grasping.is_empty() {
            events.push(PipelineEvent::Keyframe {
                kind: KeyframeKind::NewGrasp,
                frame_id: fid,
                hands_in_contact: grasping,
            });
        } else if !flipped.is_empty() {
            events.push(PipelineEvent::Keyframe {
                kind: KeyframeKind::ObjectChanged,
                frame_id: fid,
                hands_in_contact: flipped,
            });
        }

        let contact = frame.contact.clone().or_else(|| self.heuristic.detect(frame).ok());
        let states = Hand::ALL.map(|h| self.stabilizer.state(h).gesture);
        let frames = [frame.left.as_ref(), frame.right.as_ref()];
        let config = detect_config(states, frames, contact.as_ref(), &self.cfg.composite);
        let mut motion = None;
        let mut fingertip = None;
        match config {
            BimanualConfig::SwipeContext { touch, .. } => {
                if let Some(h) = frame.hand(touch) {
                    self.window.push(h.index_tip());
                }
                if self.window.is_full() {
                    motion = self.motion.classify(&self.window).ok();
                }
            }
            BimanualConfig::HoldPoint { point, .. } => {
                self.window.clear();
                fingertip = frame.hand(point).map(|h| h.index_tip());
            }
            _ => self.window.clear(),
        }
        for mut e in self.tracker.step(config, fid, fingertip, motion) {
            if let PipelineEvent::CompositeGesture { detail, .. } = &mut e {
                if let (Some(tip), Some(pointing)) = (detail.fingertip, detail.secondary) {
                    detail.color = self.color_at(frame, tip.x, tip.y, pointing);
                }
            }
            events.push(e);
        }
        for inj in &frame.injected {
            let InjectedEvent::Query { text } = inj;
            events.push(PipelineEvent::QueryIssued {
                text: text.clone(),
                frame_id: fid,
            });
        }

        self.orch.observe_frame(frame, contact);
        for e in events {
            let actions = self.orch.on_event(&e, now);
            self.trace.push(TraceRecord::event(now, e));
            self.apply(actions, now);
        }
        let actions = self.orch.pump(now);
        self.apply(actions, now);
        Ok(())
    }

    fn image(&mut self, frame: &Frame) -> Option<Arc<DynamicImage>> {
        if let Some((id, img)) = &self.image_cache {
            if *id == frame.frame_id {
                return img.clone();
            }
        }
        let img = frame.image.as_ref().and_then(|rel| {
            let path = match &self.cfg.image_root {
                Some(root) => root.join(rel),
                None => PathBuf::from(rel),
            };
            match image::open(&path) {
                Ok(i) => Some(Arc::new(i)),
                Err(e) => {
                    log::warn!("frame {}: cannot load {}: {e}", frame.frame_id, path.display());
                    None
                }
            }
        });
        self.image_cache = Some((frame.frame_id, img.clone()));
        img
    }

    fn embedding_for(&mut self, frame: &Frame, hand: Hand) -> Option<Embedding> {
        if let Some(v) = &frame.embedding {
            return Embedding::new(v.clone(), frame.frame_id)
                .map_err(|e| log::warn!("frame {}: {e}", frame.frame_id))
                .ok();
        }
        let img = self.image(frame)?;
        let region = frame
            .contact
            .as_ref()
            .and_then(|c| c.hand(hand))
            .and_then(|c| c.object_box)
            .or_else(|| {
                frame
                    .hand(hand)
                    .map(|h| hand_bbox(h).scale_about_center(0.4).clamp_unit())
            })?;
        let crop = crop(&img, &region);
        builtin_embed(&crop, frame.frame_id)
            .map_err(|e| log::debug!("frame {}: {e}", frame.frame_id))
            .ok()
    }

    fn color_at(&mut self, frame: &Frame, x: f64, y: f64, pointing: Hand) -> Option<String> {
        let img = self.image(frame)?;
        let rgb: RgbImage = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let px = (x * f64::from(w), y * f64::from(h));
        match sample_region(&rgb, px, pointing, &self.cfg.sample) {
            Ok(c) => Some(self.colors.nearest(c).to_string()),
            Err(e) => {
                log::debug!("frame {}: {e}", frame.frame_id);
                None
            }
        }
    }

    fn apply(&mut self, actions: Vec<Action>, now: u64) {
        for a in actions {
            match a {
                Action::Speak(d) => log::debug!("t={now} speak {:?}: {}", d.kind, d.text),
                Action::Finished(d) | Action::Interrupt(d) => {
                    let end = d.spoken_end_t_ms.unwrap_or(now);
                    self.trace.push(TraceRecord::description(end, d.clone()));
                    self.spoken.push(d);
                }
                Action::IssueGeneration(job) => self.exec.get().submit(job, now),
                Action::DropPending { ticket } => self.exec.get().cancel(ticket),
                Action::Ignore { reason } => log::debug!("t={now} ignored: {reason}"),
            }
        }
    }

    fn on_done(&mut self, done: JobDone) {
        let t = done.ready_t_ms;
        let (outcome, actions) = if done.cancelled {
            (GenerationOutcome::Dropped, Vec::new())
        } else {
            self.orch.on_result(done.ticket, done.result, t)
        };
        self.trace.push(TraceRecord::generation(
            t,
            GenerationRecord {
                backend: done.backend,
                kind: done.kind,
                keyframe: done.keyframe,
                latency_ms: done.latency_ms,
                outcome,
            },
        ));
        self.apply(actions, t);
        let actions = self.orch.pump(t);
        self.apply(actions, t);
    }

    /// Processes narration ends and job completions up to `t` in time
    /// order; narration goes first on ties.
    pub fn advance_to(&mut self, t: u64) {
        loop {
            let speech = self.orch.next_deadline().filter(|d| *d <= t);
            let job = self.exec.get().next_ready(t);
            match (speech, job) {
                (Some(s), Some(j)) if j < s => self.complete_job(j),
                (Some(s), _) => {
                    let finished: Vec<Action> = self.orch.complete_due(s).into_iter().collect();
                    self.apply(finished, s);
                    let started = self.orch.pump(s);
                    self.apply(started, s);
                }
                (None, Some(j)) => self.complete_job(j),
                (None, None) => break,
            }
        }
        self.now = self.now.max(t);
    }

    fn complete_job(&mut self, t: u64) {
        if let Some(done) = self.exec.get().pop_ready(t) {
            self.on_done(done);
        }
    }

    /// Runs outstanding work to completion and returns the trace and all
    /// spoken descriptions.
    pub fn finish(mut self) -> (Vec<TraceRecord>, Vec<Description>) {
        match &self.exec {
            Exec::Virtual(_) => loop {
                let Exec::Virtual(v) = &self.exec else { unreachable!() };
                let next = [self.orch.next_deadline(), v.next_completion()]
                    .into_iter()
                    .flatten()
                    .min();
                match next {
                    Some(t) => self.advance_to(t.max(self.now)),
                    None => break,
                }
            },
            Exec::Threaded(_) => {
                let deadline = Instant::now() + Duration::from_millis(self.cfg.drain_timeout_ms);
                loop {
                    let now = (self.started.elapsed().as_millis() as u64).max(self.now);
                    self.advance_to(now);
                    let Exec::Threaded(th) = &mut self.exec else {
                        unreachable!()
                    };
                    if th.in_flight() == 0 || Instant::now() >= deadline {
                        if th.in_flight() > 0 {
                            log::warn!("{} jobs still running at drain timeout", th.in_flight());
                        }
                        break;
                    }
                    th.wait(Duration::from_millis(5), now);
                }
                // remaining narration is fast-forwarded
                while let Some(d) = self.orch.next_deadline() {
                    self.advance_to(d.max(self.now));
                }
            }
        }
        (self.trace, self.spoken)
    }
}

fn crop(img: &DynamicImage, b: &BBox) -> DynamicImage {
    let (w, h) = (img.width(), img.height());
    let x0 = ((b.x0 * f64::from(w)).floor() as u32).min(w.saturating_sub(1));
    let y0 = ((b.y0 * f64::from(h)).floor() as u32).min(h.saturating_sub(1));
    let x1 = ((b.x1 * f64::from(w)).ceil() as u32).clamp(x0 + 1, w.max(1));
    let y1 = ((b.y1 * f64::from(h)).ceil() as u32).clamp(y0 + 1, h.max(1));
    img.crop_imm(x0, y0, x1 - x0, y1 - y0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    pub trace: Vec<TraceRecord>,
    pub transcript: Vec<TranscriptRecord>,
    pub report: EvalReport,
}

impl ReplayOutput {
    pub fn trace_bytes(&self) -> Vec<u8> {
        serialize_events(&self.trace)
    }

    pub fn transcript_bytes(&self) -> Vec<u8> {
        write_jsonl(&self.transcript)
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes") + "\n"
    }
}

pub fn transcript_of(spoken: &[Description]) -> Vec<TranscriptRecord> {
    spoken.iter().filter_map(TranscriptRecord::from_description).collect()
}

pub fn replay(session: &Session, cfg: &PipelineConfig, components: Components) -> Result<ReplayOutput, PipelineError> {
    let started = Instant::now();
    let mut p = Pipeline::new(cfg.clone(), components)?;
    for f in &session.frames {
        p.push_frame(f)?;
    }
    let secs = started.elapsed().as_secs_f64();
    let fps = (!session.frames.is_empty() && secs > 0.0).then(|| session.frames.len() as f64 / secs);
    let (trace, spoken) = p.finish();
    let report = build_report(session, &trace, fps);
    Ok(ReplayOutput {
        trace,
        transcript: transcript_of(&spoken),
        report,
    })
}

/// Counts of trace event types, for quick assertions.
pub fn event_counts(trace: &[TraceRecord]) -> HashMap<&'static str, usize> {
    let mut m = HashMap::new();
    for ev in trace.iter().filter_map(TraceRecord::as_event) {
        let name = match ev {
            PipelineEvent::HandStateChanged { .. } => "hand_state_changed",
            PipelineEvent::Keyframe {
                kind: KeyframeKind::NewGrasp,
                ..
            } => "keyframe_new_grasp",
            PipelineEvent::Keyframe {
                kind: KeyframeKind::ObjectChanged,
                ..
            } => "keyframe_object_changed",
            PipelineEvent::CompositeGesture { .. } => "composite_gesture",
            PipelineEvent::QueryIssued { .. } => "query_issued",
        };
        *m.entry(name).or_insert(0) += 1;
    }
    m
}
