//! Runs generation and contact jobs off the orchestrator loop.
//!
//! [`VirtualExecutor`] simulates service time on a virtual clock and is fully
//! deterministic. [`ThreadedExecutor`] runs jobs on a worker pool against the
//! wall clock. Both bound concurrency and queue excess jobs FIFO.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

use crate::backends::{
    describe, AnnotationDetector, BackendClass, BackendError, BackendProfile, Captioner, ContactDetector,
    LatencySampler, MockBackend,
};
use crate::orchestrator::{JobOutput, JobRequest, JobSpec};
use crate::types::DescriptionKind;

pub const DEFAULT_CONCURRENCY: usize = 4;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// The services jobs are dispatched to.
#[derive(Clone)]
pub struct Backends {
    pub fast: Arc<dyn Captioner>,
    pub rich: Arc<dyn Captioner>,
    pub contact: Arc<dyn ContactDetector>,
    /// Simulated contact-detector service time. `None` measures real time.
    pub contact_latency: Option<LatencySampler>,
    /// Sleep for simulated contact latency (wall-clock runs).
    pub sleep_contact: bool,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("contact_latency", &self.contact_latency)
            .field("sleep_contact", &self.sleep_contact)
            .finish_non_exhaustive()
    }
}

impl Backends {
    /// Canned answers and annotation-based contact, with simulated latencies
    /// drawn from `profile`. `sleep` makes calls take that long in real time.
    pub fn mock(profile: BackendProfile, seed: u64, sleep: bool) -> Self {
        let sampler = LatencySampler::new(profile, seed);
        let mock: Arc<dyn Captioner> = Arc::new(MockBackend::builtin(sampler.clone()).with_sleep(sleep));
        Self {
            fast: mock.clone(),
            rich: mock,
            contact: Arc::new(AnnotationDetector::default()),
            contact_latency: Some(sampler),
            sleep_contact: sleep,
        }
    }

    pub fn captioner(&self, kind: DescriptionKind) -> &dyn Captioner {
        match BackendClass::for_kind(kind) {
            BackendClass::FastCaptioner => self.fast.as_ref(),
            _ => self.rich.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobDone {
    pub ticket: u64,
    pub backend: BackendClass,
    pub kind: Option<DescriptionKind>,
    pub keyframe: Option<u64>,
    pub latency_ms: u64,
    pub ready_t_ms: u64,
    pub result: Result<JobOutput, BackendError>,
    /// Cancelled while running; the result must not be applied.
    pub cancelled: bool,
}

fn backend_of(job: &JobRequest) -> BackendClass {
    match &job.spec {
        JobSpec::Contact(_) => BackendClass::ContactDetector,
        JobSpec::Describe(r) => BackendClass::for_kind(r.kind),
    }
}

/// Executes one job and reports its service time, capped at `timeout_ms`.
pub fn run_job(backends: &Backends, job: &JobRequest, timeout_ms: u64) -> (Result<JobOutput, BackendError>, u64) {
    let started = Instant::now();
    let measured = |s: Instant| s.elapsed().as_millis() as u64;
    let (result, latency) = match &job.spec {
        JobSpec::Contact(frame) => {
            let simulated = backends.contact_latency.as_ref().map(|s| {
                let key = format!("contact:{}:{}", frame.frame_id, frame.t_ms);
                s.sample_ms(BackendClass::ContactDetector, key.as_bytes())
            });
            if let (Some(ms), true) = (simulated, backends.sleep_contact) {
                std::thread::sleep(Duration::from_millis(ms.min(timeout_ms)));
            }
            let r = backends.contact.detect(frame).map(JobOutput::Contact);
            (r, simulated.unwrap_or_else(|| measured(started)))
        }
        JobSpec::Describe(req) => match describe(backends.captioner(req.kind), req) {
            Ok(c) => (
                Ok(JobOutput::Text(c.text)),
                c.latency_ms.unwrap_or_else(|| measured(started)),
            ),
            Err(e) => (Err(e), measured(started)),
        },
    };
    if latency > timeout_ms {
        return (Err(BackendError::Timeout(timeout_ms)), timeout_ms);
    }
    (result, latency)
}

pub trait Executor {
    fn submit(&mut self, job: JobRequest, now: u64);
    fn cancel(&mut self, ticket: u64);
    /// Time of the earliest result available at or before `now`.
    fn next_ready(&mut self, now: u64) -> Option<u64>;
    /// Removes and returns that result.
    fn pop_ready(&mut self, now: u64) -> Option<JobDone>;
    fn in_flight(&self) -> usize;
}

/// Deterministic executor on a simulated clock. A job's backend call runs
/// when the job starts; its result becomes visible `latency` ms later.
pub struct VirtualExecutor {
    backends: Backends,
    limit: usize,
    timeout_ms: u64,
    running: usize,
    waiting: VecDeque<JobRequest>,
    scheduled: BTreeMap<(u64, u64), JobDone>,
    running_tickets: HashSet<u64>,
    cancelled: HashSet<u64>,
    seq: u64,
}

impl VirtualExecutor {
    pub fn new(backends: Backends, limit: usize, timeout_ms: u64) -> Self {
        Self {
            backends,
            limit: limit.max(1),
            timeout_ms,
            running: 0,
            waiting: VecDeque::new(),
            scheduled: BTreeMap::new(),
            running_tickets: HashSet::new(),
            cancelled: HashSet::new(),
            seq: 0,
        }
    }

    fn start(&mut self, job: JobRequest, now: u64) {
        let (result, latency_ms) = run_job(&self.backends, &job, self.timeout_ms);
        self.running += 1;
        self.running_tickets.insert(job.ticket);
        self.seq += 1;
        let ready = now + latency_ms;
        self.scheduled.insert(
            (ready, self.seq),
            JobDone {
                ticket: job.ticket,
                backend: backend_of(&job),
                kind: job.kind(),
                keyframe: job.keyframe_id,
                latency_ms,
                ready_t_ms: ready,
                result,
                cancelled: false,
            },
        );
    }
}

impl Executor for VirtualExecutor {
    fn submit(&mut self, job: JobRequest, now: u64) {
        if self.running < self.limit {
            self.start(job, now);
        } else {
            self.waiting.push_back(job);
        }
    }

    fn cancel(&mut self, ticket: u64) {
        let before = self.waiting.len();
        self.waiting.retain(|j| j.ticket != ticket);
        if self.waiting.len() == before && self.running_tickets.contains(&ticket) {
            self.cancelled.insert(ticket);
        }
    }

    fn next_ready(&mut self, now: u64) -> Option<u64> {
        self.scheduled.keys().next().map(|(t, _)| *t).filter(|t| *t <= now)
    }

    fn pop_ready(&mut self, now: u64) -> Option<JobDone> {
        let key = *self.scheduled.keys().next().filter(|(t, _)| *t <= now)?;
        let mut done = self.scheduled.remove(&key).expect("key just found");
        self.running -= 1;
        self.running_tickets.remove(&done.ticket);
        done.cancelled = self.cancelled.remove(&done.ticket);
        if let Some(next) = self.waiting.pop_front() {
            self.start(next, done.ready_t_ms);
        }
        Some(done)
    }

    fn in_flight(&self) -> usize {
        self.running + self.waiting.len()
    }
}

impl VirtualExecutor {
    /// Earliest scheduled completion regardless of the clock.
    pub fn next_completion(&self) -> Option<u64> {
        self.scheduled.keys().next().map(|(t, _)| *t)
    }
}

struct WorkerResult {
    ticket: u64,
    backend: BackendClass,
    kind: Option<DescriptionKind>,
    keyframe: Option<u64>,
    latency_ms: u64,
    result: Result<JobOutput, BackendError>,
}

/// Worker-pool executor. Results are stamped with the loop time at which
/// they are first observed.
pub struct ThreadedExecutor {
    jobs: Option<Sender<JobRequest>>,
    results: Receiver<WorkerResult>,
    cancelled: Arc<Mutex<HashSet<u64>>>,
    buffered: VecDeque<JobDone>,
    in_flight: usize,
    workers: Vec<JoinHandle<()>>,
}

impl ThreadedExecutor {
    pub fn new(backends: Backends, workers: usize, timeout_ms: u64) -> Self {
        let (job_tx, job_rx) = crossbeam_channel::unbounded::<JobRequest>();
        let (res_tx, res_rx) = crossbeam_channel::unbounded();
        let cancelled = Arc::new(Mutex::new(HashSet::new()));
        let handles = (0..workers.max(1))
            .map(|_| {
                let rx = job_rx.clone();
                let tx = res_tx.clone();
                let backends = backends.clone();
                let cancelled = Arc::clone(&cancelled);
                std::thread::spawn(move || {
                    for job in rx {
                        let skip = cancelled.lock().map(|c| c.contains(&job.ticket)).unwrap_or(false);
                        let (result, latency_ms) = if skip {
                            (Err(BackendError::Cancelled), 0)
                        } else {
                            run_job(&backends, &job, timeout_ms)
                        };
                        let msg = WorkerResult {
                            ticket: job.ticket,
                            backend: backend_of(&job),
                            kind: job.kind(),
                            keyframe: job.keyframe_id,
                            latency_ms,
                            result,
                        };
                        if tx.send(msg).is_err() {
                            break;
                        }
                    }
                })
            })
            .collect();
        Self {
            jobs: Some(job_tx),
            results: res_rx,
            cancelled,
            buffered: VecDeque::new(),
            in_flight: 0,
            workers: handles,
        }
    }

    /// Blocks up to `timeout` for the next result.
    pub fn wait(&mut self, timeout: Duration, now: u64) -> bool {
        if !self.buffered.is_empty() {
            return true;
        }
        match self.results.recv_timeout(timeout) {
            Ok(r) => {
                self.accept(r, now);
                true
            }
            Err(_) => false,
        }
    }

    fn accept(&mut self, r: WorkerResult, now: u64) {
        let cancelled = self.cancelled.lock().map(|mut c| c.remove(&r.ticket)).unwrap_or(false);
        self.buffered.push_back(JobDone {
            ticket: r.ticket,
            backend: r.backend,
            kind: r.kind,
            keyframe: r.keyframe,
            latency_ms: r.latency_ms,
            ready_t_ms: now,
            result: r.result,
            cancelled,
        });
    }
}

impl Executor for ThreadedExecutor {
    fn submit(&mut self, job: JobRequest, _now: u64) {
        if let Some(tx) = &self.jobs {
            if tx.send(job).is_ok() {
                self.in_flight += 1;
            }
        }
    }

    fn cancel(&mut self, ticket: u64) {
        if let Ok(mut c) = self.cancelled.lock() {
            c.insert(ticket);
        }
    }

    fn next_ready(&mut self, now: u64) -> Option<u64> {
        while let Ok(r) = self.results.try_recv() {
            self.accept(r, now);
        }
        self.buffered.front().map(|d| d.ready_t_ms)
    }

    fn pop_ready(&mut self, now: u64) -> Option<JobDone> {
        self.next_ready(now)?;
        let done = self.buffered.pop_front()?;
        self.in_flight -= 1;
        Some(done)
    }

    fn in_flight(&self) -> usize {
        self.in_flight
    }
}

impl Drop for ThreadedExecutor {
    fn drop(&mut self) {
        self.jobs.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Completion, DescriptionRequest, HeuristicDetector, ImageRef, LatencySpec};

    struct Fixed(u64);

    impl Captioner for Fixed {
        fn describe(&self, req: &DescriptionRequest) -> Result<Completion, BackendError> {
            Ok(Completion {
                text: req.prompt.clone(),
                latency_ms: Some(self.0),
            })
        }
    }

    fn backends(ms: u64) -> Backends {
        let f: Arc<dyn Captioner> = Arc::new(Fixed(ms));
        Backends {
            fast: f.clone(),
            rich: f,
            contact: Arc::new(HeuristicDetector::default()),
            contact_latency: None,
            sleep_contact: false,
        }
    }

    fn job(ticket: u64) -> JobRequest {
        JobRequest {
            ticket,
            spec: JobSpec::Describe(DescriptionRequest {
                kind: DescriptionKind::Brief,
                prompt: format!("p{ticket}"),
                images: vec![ImageRef::full_frame(0, None, None)],
                keyframe_id: Some(0),
                issued_t_ms: 0,
                which_hand: "left".into(),
                gesture: None,
            }),
            keyframe_id: Some(0),
            issued_t_ms: 0,
        }
    }

    #[test]
    fn concurrency_limit_queues_fifo() {
        let mut ex = VirtualExecutor::new(backends(100), 2, DEFAULT_TIMEOUT_MS);
        for t in 1..=5 {
            ex.submit(job(t), 0);
        }
        assert_eq!(ex.in_flight(), 5);
        let mut order = Vec::new();
        while let Some(t) = ex.next_completion() {
            let d = ex.pop_ready(t).unwrap();
            order.push((d.ticket, d.ready_t_ms));
        }
        assert_eq!(order, [(1, 100), (2, 100), (3, 200), (4, 200), (5, 300)]);
    }

    #[test]
    fn timeout_and_cancel() {
        let mut ex = VirtualExecutor::new(backends(40_000), 1, DEFAULT_TIMEOUT_MS);
        ex.submit(job(1), 0);
        ex.submit(job(2), 0);
        ex.cancel(2);
        ex.cancel(1);
        assert_eq!(ex.next_ready(29_999), None);
        let d = ex.pop_ready(30_000).unwrap();
        assert_eq!(d.result, Err(BackendError::Timeout(30_000)));
        assert!(d.cancelled);
        assert!(ex.pop_ready(u64::MAX).is_none());
    }

    #[test]
    fn threaded_delivers_all() {
        let sampler = LatencySampler::new(
            BackendProfile {
                fast_captioner: LatencySpec {
                    mean_s: 0.01,
                    sd_s: 0.0,
                },
                ..Default::default()
            },
            1,
        );
        let mock: Arc<dyn Captioner> = Arc::new(MockBackend::builtin(sampler).with_sleep(true));
        let mut b = backends(0);
        b.fast = mock;
        let mut ex = ThreadedExecutor::new(b, 4, DEFAULT_TIMEOUT_MS);
        for t in 1..=6 {
            ex.submit(job(t), 0);
        }
        let mut got = Vec::new();
        let deadline = Instant::now() + Duration::from_secs(10);
        while got.len() < 6 && Instant::now() < deadline {
            ex.wait(Duration::from_millis(50), 1);
            while let Some(d) = ex.pop_ready(1) {
                assert_eq!(d.latency_ms, 10);
                got.push(d.ticket);
            }
        }
        got.sort_unstable();
        assert_eq!(got, [1, 2, 3, 4, 5, 6]);
        assert_eq!(ex.in_flight(), 0);
    }
}
