//! Caption and contact-detection providers.
//!
//! Calls are blocking; the executor runs them off the pipeline loop. The mock
//! captioner draws its simulated latency from a gamma distribution per backend
//! class, seeded from a hash of the request so identical requests always get
//! identical delays.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::composite::hand_bbox;
use crate::session::frame_to_json;
use crate::types::{BBox, ContactInfo, DescriptionKind, Frame, GestureClass, Hand, HandContact};

const BUILTIN_ANSWERS: &str = include_str!("../assets/mock_answers.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendClass {
    FastCaptioner,
    RichCaptioner,
    ContactDetector,
}

impl BackendClass {
    pub const ALL: [BackendClass; 3] = [
        BackendClass::FastCaptioner,
        BackendClass::RichCaptioner,
        BackendClass::ContactDetector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendClass::FastCaptioner => "fast_captioner",
            BackendClass::RichCaptioner => "rich_captioner",
            BackendClass::ContactDetector => "contact_detector",
        }
    }

    /// Brief captions use the fast model; everything else generated goes to
    /// the rich one.
    pub fn for_kind(kind: DescriptionKind) -> Self {
        match kind {
            DescriptionKind::Brief => BackendClass::FastCaptioner,
            _ => BackendClass::RichCaptioner,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySpec {
    pub mean_s: f64,
    pub sd_s: f64,
}

impl LatencySpec {
    pub const fn new(mean_s: f64, sd_s: f64) -> Self {
        Self { mean_s, sd_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub fast_captioner: LatencySpec,
    pub rich_captioner: LatencySpec,
    pub contact_detector: LatencySpec,
}

impl Default for BackendProfile {
    fn default() -> Self {
        Self {
            fast_captioner: LatencySpec::new(0.48, 0.62),
            rich_captioner: LatencySpec::new(3.07, 3.08),
            contact_detector: LatencySpec::new(0.87, 0.86),
        }
    }
}

impl BackendProfile {
    pub fn get(&self, class: BackendClass) -> LatencySpec {
        match class {
            BackendClass::FastCaptioner => self.fast_captioner,
            BackendClass::RichCaptioner => self.rich_captioner,
            BackendClass::ContactDetector => self.contact_detector,
        }
    }

    /// All means non-negative and finite, all SDs non-negative.
    pub fn validate(&self) -> Result<(), BackendError> {
        for c in BackendClass::ALL {
            let s = self.get(c);
            if !(s.mean_s.is_finite() && s.mean_s >= 0.0 && s.sd_s.is_finite() && s.sd_s >= 0.0) {
                return Err(BackendError::Precondition(format!(
                    "{} latency {s:?} must be finite and non-negative",
                    c.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic simulated latencies.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySampler {
    pub profile: BackendProfile,
    pub seed: u64,
}

impl LatencySampler {
    pub fn new(profile: BackendProfile, seed: u64) -> Self {
        Self { profile, seed }
    }

    /// Milliseconds, drawn from a gamma with the class's mean and SD.
    pub fn sample_ms(&self, class: BackendClass, key: &[u8]) -> u64 {
        let spec = self.profile.get(class);
        let seconds = if spec.mean_s <= 0.0 {
            0.0
        } else if spec.sd_s <= 0.0 {
            spec.mean_s
        } else {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(class.as_str().as_bytes());
            h.update(key);
            let digest = h.finalize();
            let mut seed = [0u8; 8];
            seed.copy_from_slice(&digest[..8]);
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed));
            let shape = (spec.mean_s / spec.sd_s).powi(2);
            let scale = spec.sd_s * spec.sd_s / spec.mean_s;
            Gamma::new(shape, scale)
                .expect("positive gamma parameters")
                .sample(&mut rng)
        };
        (seconds * 1000.0).round() as u64
    }
}

/// An image handed to a backend: a frame image, optionally cropped to a
/// normalized region. `tag` identifies the depicted object for the mock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub frame_id: u64,
    pub path: Option<String>,
    pub region: Option<BBox>,
    pub tag: Option<String>,
}

impl ImageRef {
    pub fn full_frame(frame_id: u64, path: Option<String>, tag: Option<String>) -> Self {
        Self {
            frame_id,
            path,
            region: None,
            tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRequest {
    pub kind: DescriptionKind,
    pub prompt: String,
    pub images: Vec<ImageRef>,
    pub keyframe_id: Option<u64>,
    pub issued_t_ms: u64,
    /// "left", "right" or "both".
    pub which_hand: String,
    pub gesture: Option<GestureClass>,
}

impl DescriptionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::Precondition("prompt is empty".into()));
        }
        let need = match self.kind {
            DescriptionKind::Brief | DescriptionKind::Detailed | DescriptionKind::Texts => Some(1..=1),
            DescriptionKind::Comparative => Some(1..=2),
            DescriptionKind::QueryAnswer => Some(0..=1),
            _ => None,
        };
        match need {
            None => Err(BackendError::Precondition(format!(
                "{} is not a generated kind",
                self.kind.as_str()
            ))),
            Some(r) if !r.contains(&self.images.len()) => Err(BackendError::Precondition(format!(
                "{} request carries {} images",
                self.kind.as_str(),
                self.images.len()
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Stable bytes identifying the request, used to seed simulated delays.
    pub fn key(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("requests always serialize")
    }

    /// Tag used for canned answers: single tag, or both tags joined by `+`
    /// in sorted order.
    pub fn answer_tag(&self) -> Option<String> {
        let mut tags: Vec<&str> = self.images.iter().filter_map(|i| i.tag.as_deref()).collect();
        tags.sort_unstable();
        tags.dedup();
        (!tags.is_empty()).then(|| tags.join("+"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Simulated service time. `None` means the call took real time.
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("timed out after {0} ms")]
    Timeout(u64),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Response(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("job cancelled")]
    Cancelled,
}

pub trait Captioner: Send + Sync {
    fn describe(&self, req: &DescriptionRequest) -> Result<Completion, BackendError>;
}

pub trait ContactDetector: Send + Sync {
    fn detect(&self, frame: &Frame) -> Result<ContactInfo, BackendError>;
}

pub fn describe(backend: &dyn Captioner, req: &DescriptionRequest) -> Result<Completion, BackendError> {
    req.validate()?;
    backend.describe(req)
}

pub fn query_request(
    image: ImageRef,
    question: &str,
    keyframe_id: Option<u64>,
    issued_t_ms: u64,
) -> Result<DescriptionRequest, BackendError> {
    if question.trim().is_empty() {
        return Err(BackendError::Precondition("question is empty".into()));
    }
    Ok(DescriptionRequest {
        kind: DescriptionKind::QueryAnswer,
        prompt: question.to_string(),
        images: vec![image],
        keyframe_id,
        issued_t_ms,
        which_hand: String::new(),
        gesture: None,
    })
}

pub fn answer_query(
    backend: &dyn Captioner,
    image: ImageRef,
    question: &str,
    issued_t_ms: u64,
) -> Result<Completion, BackendError> {
    describe(backend, &query_request(image, question, None, issued_t_ms)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockAnswer {
    pub kind: DescriptionKind,
    pub tag: String,
    #[serde(default)]
    pub question: Option<String>,
    pub text: String,
}

/// Canned text keyed by (kind, image tag). Placeholders: `{which_hand}`,
/// `{gesture}`, and `{subject}` ("left hand is", "both hands are").
#[derive(Debug, Clone)]
pub struct MockBackend {
    answers: BTreeMap<(DescriptionKind, String), Vec<MockAnswer>>,
    sampler: LatencySampler,
    sleep: bool,
}

fn normalize_question(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl MockBackend {
    pub fn new(answers: Vec<MockAnswer>, sampler: LatencySampler) -> Self {
        let mut map: BTreeMap<_, Vec<MockAnswer>> = BTreeMap::new();
        for a in answers {
            map.entry((a.kind, a.tag.clone())).or_default().push(a);
        }
        Self {
            answers: map,
            sampler,
            sleep: false,
        }
    }

    pub fn builtin(sampler: LatencySampler) -> Self {
        Self::new(
            serde_json::from_str(BUILTIN_ANSWERS).expect("embedded mock answers are valid"),
            sampler,
        )
    }

    pub fn from_json(text: &str, sampler: LatencySampler) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?, sampler))
    }

    /// Sleep for the simulated latency inside `describe`; for wall-clock runs.
    pub fn with_sleep(mut self, sleep: bool) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn sampler(&self) -> &LatencySampler {
        &self.sampler
    }

    fn lookup(&self, req: &DescriptionRequest) -> Option<&str> {
        let tag = req.answer_tag()?;
        let entries = self.answers.get(&(req.kind, tag))?;
        if req.kind == DescriptionKind::QueryAnswer {
            let q = normalize_question(&req.prompt);
            entries
                .iter()
                .find(|a| a.question.as_deref().map(normalize_question).as_deref() == Some(q.as_str()))
                .map(|a| a.text.as_str())
        } else {
            entries.first().map(|a| a.text.as_str())
        }
    }

    fn fallback(kind: DescriptionKind) -> &'static str {
        match kind {
            DescriptionKind::Brief => "Your {subject} {gesture} an object.",
            DescriptionKind::Detailed => "It is an object with no distinctive visual features.",
            DescriptionKind::Texts => "",
            DescriptionKind::Comparative => "They both look like an object with no clear differences.",
            _ => "It looks like an object, but I cannot tell more from this view.",
        }
    }

    pub fn text_for(&self, req: &DescriptionRequest) -> String {
        let template = self.lookup(req).unwrap_or_else(|| Self::fallback(req.kind));
        let gesture = req.gesture.and_then(GestureClass::gerund).unwrap_or("holding");
        let subject = if req.which_hand == "both" {
            "both hands are".to_string()
        } else {
            format!("{} hand is", req.which_hand)
        };
        let mut text = template
            .replace("{subject}", &subject)
            .replace("{which_hand}", &req.which_hand)
            .replace("{gesture}", gesture);
        if req.kind == DescriptionKind::Texts && text.trim().is_empty() {
            text = format!("No text on the object your {subject} {gesture}.");
        }
        text
    }
}

impl Captioner for MockBackend {
    fn describe(&self, req: &DescriptionRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let latency = self.sampler.sample_ms(BackendClass::for_kind(req.kind), &req.key());
        if self.sleep {
            std::thread::sleep(Duration::from_millis(latency));
        }
        Ok(Completion {
            text: self.text_for(req),
            latency_ms: Some(latency),
        })
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_tokens: u32,
    pub timeout: Duration,
    /// Directory that relative image paths are resolved against.
    pub image_root: PathBuf,
    pub retries: u32,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            max_tokens: 300,
            timeout: Duration::from_secs(30),
            image_root: PathBuf::from("."),
            retries: 1,
        }
    }
}

/// Chat-completions style client: one user message with the prompt and the
/// request images as base64 PNG data URLs.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = agent(config.timeout);
        Self { config, agent }
    }

    fn encode_image(&self, image: &ImageRef) -> Result<Option<String>, BackendError> {
        let Some(path) = &image.path else {
            return Ok(None);
        };
        let full = self.config.image_root.join(path);
        let mut img = image::open(&full).map_err(|e| BackendError::Image(format!("{}: {e}", full.display())))?;
        if let Some(r) = image.region {
            let r = r.clamp_unit();
            let (w, h) = (img.width() as f64, img.height() as f64);
            let x0 = (r.x0 * w).floor() as u32;
            let y0 = (r.y0 * h).floor() as u32;
            let cw = ((r.x1 * w).ceil() as u32).saturating_sub(x0).max(1);
            let ch = ((r.y1 * h).ceil() as u32).saturating_sub(y0).max(1);
            img = img.crop_imm(x0, y0, cw, ch);
        }
        let mut png = Vec::new();
        img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| BackendError::Image(e.to_string()))?;
        Ok(Some(format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(png)
        )))
    }

    pub fn request_body(&self, req: &DescriptionRequest) -> Result<serde_json::Value, BackendError> {
        let mut content = vec![serde_json::json!({"type": "text", "text": req.prompt})];
        for image in &req.images {
            if let Some(url) = self.encode_image(image)? {
                content.push(serde_json::json!({"type": "image_url", "image_url": {"url": url}}));
            }
        }
        Ok(serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": self.config.max_tokens,
        }))
    }
}

fn post_json(
    agent: &ureq::Agent,
    url: &str,
    key: Option<&str>,
    body: &str,
    retries: u32,
    timeout: Duration,
) -> Result<String, BackendError> {
    let mut attempt = 0;
    loop {
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(k) = key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let started = Instant::now();
        let result = req.send(body);
        let outcome = match result {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| BackendError::Transport(e.to_string()));
                match text {
                    Ok(t) if (200..300).contains(&status) => return Ok(t),
                    Ok(t) => Err(BackendError::Status { status, body: t }),
                    Err(e) => Err(e),
                }
            }
            Err(ureq::Error::Timeout(_)) => Err(BackendError::Timeout(timeout.as_millis() as u64)),
            Err(e) if started.elapsed() >= timeout => {
                log::debug!("request failed after the deadline: {e}");
                Err(BackendError::Timeout(timeout.as_millis() as u64))
            }
            Err(e) => Err(BackendError::Transport(e.to_string())),
        };
        if attempt >= retries {
            return outcome;
        }
        attempt += 1;
        log::warn!("retrying {url}: {}", outcome.expect_err("only errors reach here"));
    }
}

impl Captioner for HttpBackend {
    fn describe(&self, req: &DescriptionRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let body = self.request_body(req)?.to_string();
        let text = post_json(
            &self.agent,
            &self.config.url,
            self.config.api_key.as_deref(),
            &body,
            self.config.retries,
            self.config.timeout,
        )?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Response(e.to_string()))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| BackendError::Response("missing choices[0].message.content".into()))?;
        Ok(Completion {
            text: content.trim().to_string(),
            latency_ms: None,
        })
    }
}

/// Reports every visible hand as in contact, with the hand's box grown by
/// `inflate` (a fraction of its size) as the object box.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicDetector {
    pub inflate: f64,
}

impl Default for HeuristicDetector {
    fn default() -> Self {
        Self { inflate: 0.4 }
    }
}

impl ContactDetector for HeuristicDetector {
    fn detect(&self, frame: &Frame) -> Result<ContactInfo, BackendError> {
        let mut info = ContactInfo::default();
        for hand in Hand::ALL {
            if let Some(h) = frame.hand(hand) {
                info.set(
                    hand,
                    Some(HandContact {
                        in_contact: true,
                        object_box: Some(hand_bbox(h).scale_about_center(self.inflate).clamp_unit()),
                        object_tag: None,
                    }),
                );
            }
        }
        Ok(info)
    }
}

/// Reads the frame's `contact` annotation; frames without one fall back to
/// the heuristic.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnnotationDetector {
    pub fallback: HeuristicDetector,
}

impl ContactDetector for AnnotationDetector {
    fn detect(&self, frame: &Frame) -> Result<ContactInfo, BackendError> {
        match &frame.contact {
            Some(c) => Ok(c.clone()),
            None => self.fallback.detect(frame),
        }
    }
}

/// POSTs `{"frame": <frame record>}` and expects a contact record back.
pub struct HttpContactDetector {
    url: String,
    timeout: Duration,
    agent: ureq::Agent,
}

impl HttpContactDetector {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            timeout,
            agent: agent(timeout),
        }
    }
}

impl ContactDetector for HttpContactDetector {
    fn detect(&self, frame: &Frame) -> Result<ContactInfo, BackendError> {
        let body = format!("{{\"frame\":{}}}", frame_to_json(frame));
        let text = post_json(&self.agent, &self.url, None, &body, 1, self.timeout)?;
        serde_json::from_str(&text).map_err(|e| BackendError::Response(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brief(tag: Option<&str>) -> DescriptionRequest {
        DescriptionRequest {
            kind: DescriptionKind::Brief,
            prompt: "What is my left hand touching?".into(),
            images: vec![ImageRef {
                frame_id: 3,
                path: None,
                region: None,
                tag: tag.map(String::from),
            }],
            keyframe_id: Some(3),
            issued_t_ms: 500,
            which_hand: "left".into(),
            gesture: Some(GestureClass::Hold),
        }
    }

    #[test]
    fn mock_canned_and_fallback() {
        let m = MockBackend::builtin(LatencySampler::new(BackendProfile::default(), 7));
        let c = m.describe(&brief(Some("spice-red"))).unwrap();
        assert_eq!(c.text, "Your left hand is holding a bottle of seasoning.");
        let again = m.describe(&brief(Some("spice-red"))).unwrap();
        assert_eq!(c, again);
        assert!(m.describe(&brief(Some("unknown"))).unwrap().text.contains("an object"));
        assert!(m.describe(&brief(None)).unwrap().text.contains("an object"));
    }

    #[test]
    fn mock_query() {
        let m = MockBackend::builtin(LatencySampler::new(BackendProfile::default(), 7));
        let img = ImageRef::full_frame(1, None, Some("spice-red".into()));
        let c = answer_query(&m, img.clone(), "How many calories does it have?", 0).unwrap();
        assert_eq!(c.text, "It has 0 calories per serving.");
        assert!(matches!(
            answer_query(&m, img, "  ", 0),
            Err(BackendError::Precondition(_))
        ));
    }

    #[test]
    fn request_preconditions() {
        let mut r = brief(Some("x"));
        r.images.clear();
        assert!(r.validate().is_err());
        r = brief(Some("x"));
        r.prompt = " ".into();
        assert!(r.validate().is_err());
    }

    #[test]
    fn zero_sd_is_constant_and_seed_changes_draws() {
        let p = BackendProfile {
            fast_captioner: LatencySpec::new(0.25, 0.0),
            ..Default::default()
        };
        let s = LatencySampler::new(p, 1);
        assert_eq!(s.sample_ms(BackendClass::FastCaptioner, b"a"), 250);
        let a = LatencySampler::new(BackendProfile::default(), 1);
        let b = LatencySampler::new(BackendProfile::default(), 2);
        let da: Vec<u64> = (0..20u8)
            .map(|i| a.sample_ms(BackendClass::RichCaptioner, &[i]))
            .collect();
        let db: Vec<u64> = (0..20u8)
            .map(|i| b.sample_ms(BackendClass::RichCaptioner, &[i]))
            .collect();
        assert_ne!(da, db);
    }

    #[test]
    fn heuristic_boxes_cover_the_hand() {
        let lm = std::array::from_fn(|i| crate::types::Landmark::new(0.4 + 0.005 * i as f64, 0.5));
        let frame = Frame {
            right: Some(crate::types::HandFrame::new(Hand::Right, lm)),
            ..Default::default()
        };
        let c = HeuristicDetector::default().detect(&frame).unwrap();
        assert!(c.left.is_none());
        let b = c.right.unwrap().object_box.unwrap();
        assert!(b.x0 < 0.4 && b.x1 > 0.5);
    }
}
