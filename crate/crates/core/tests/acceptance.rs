//! One line per acceptance criterion. Exits non-zero when a criterion fails,
//! unless it is listed in `UNATTAINABLE`.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsribe_core::backends::{BackendClass, BackendProfile};
use tsribe_core::color::{squared_distance, ColorTable};
use tsribe_core::eval::{evaluate, LABELS};
use tsribe_core::fixtures::{self, NAMES};
use tsribe_core::gesture;
use tsribe_core::mlp::TrainParams;
use tsribe_core::motion::{self, MotionClass, MotionSample};
use tsribe_core::object_change::{observe_crop, CropHistory, Embedding};
use tsribe_core::orchestrator::STILL_PROCESSING;
use tsribe_core::session::parse_session;
use tsribe_core::stabilizer::{HandStabilizer, SmoothingParams, Stabilizer};
use tsribe_core::synth::{gesture_samples, motion_samples, synth_session, trajectory, SynthSpec};
use tsribe_core::trace::TraceRecord;
use tsribe_core::{
    replay, ClockMode, Components, Description, DescriptionKind, GestureClass, Hand, PipelineConfig, PipelineEvent,
    Session,
};

/// Criteria that cannot hold as stated; reported, but they do not fail the run.
const UNATTAINABLE: &[&str] = &["color-labels"];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn load_fixture(name: &str) -> Session {
    parse_session(&fs::read(fixture_dir().join(format!("{name}.session.jsonl"))).unwrap()).unwrap()
}

fn virtual_replay(session: &Session) -> tsribe_core::ReplayOutput {
    replay(session, &PipelineConfig::default(), fixtures::components()).unwrap()
}

fn spoken(trace: &[TraceRecord]) -> Vec<&Description> {
    trace.iter().filter_map(TraceRecord::as_description).collect()
}

// Smoothing cascade recomputed from the padded prediction history.
fn oracle_states(preds: &[GestureClass], p: &SmoothingParams) -> Vec<GestureClass> {
    let mut hist = vec![GestureClass::OutOfView; p.x];
    let mut prev = GestureClass::OutOfView;
    let mut out = Vec::with_capacity(preds.len());
    for &c in preds {
        hist.push(c);
        let w = &hist[hist.len() - p.x..];
        let tail = &w[p.x - p.t..];
        let last_n = &w[p.x - p.n..];
        let next = if tail.iter().all(|v| *v == tail[0]) {
            tail[0]
        } else if last_n.contains(&prev) {
            prev
        } else {
            let mut best = last_n[last_n.len() - 1];
            let count = |k: GestureClass| last_n.iter().filter(|v| **v == k).count();
            let last_pos = |k: GestureClass| last_n.iter().rposition(|v| *v == k);
            for k in LABELS {
                if count(k) > count(best) || (count(k) == count(best) && count(k) > 0 && last_pos(k) > last_pos(best)) {
                    best = k;
                }
            }
            best
        };
        prev = next;
        out.push(next);
    }
    out
}

fn incremental_states(preds: &[GestureClass], p: &SmoothingParams) -> Vec<GestureClass> {
    let mut s = HandStabilizer::new(*p).unwrap();
    preds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            s.push(*c, i as u64).unwrap();
            s.gesture()
        })
        .collect()
}

fn smoothing() -> Outcome {
    let started = Instant::now();
    let p = SmoothingParams { x: 12, n: 6, t: 4 };
    let mut mismatches = 0;
    for code in 0..4u32.pow(8) {
        let seq: Vec<GestureClass> = (0..8).map(|i| LABELS[((code >> (2 * i)) & 3) as usize]).collect();
        mismatches += usize::from(oracle_states(&seq, &p) != incremental_states(&seq, &p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let seq: Vec<GestureClass> = (0..200).map(|_| LABELS[rng.random_range(0..4)]).collect();
        mismatches += usize::from(oracle_states(&seq, &p) != incremental_states(&seq, &p));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        mismatches == 0 && secs < 60.0,
        format!("65536 + 10000 sequences, {mismatches} mismatches, {secs:.1} s"),
    )
}

fn emb(v: Vec<f64>) -> Embedding {
    Embedding::new(v, 0).unwrap()
}

fn object_change() -> Outcome {
    let x = vec![1.0, 0.0, 0.0];
    let y = vec![0.0, 1.0, 0.0];
    let (_, c0) = observe_crop(CropHistory::new(4, 0.85), emb(x.clone())).unwrap();
    let mut same = CropHistory::new(4, 0.85);
    let mut flip = CropHistory::new(4, 0.85);
    for _ in 0..4 {
        same.observe(emb(x.clone())).unwrap();
        flip.observe(emb(x.clone())).unwrap();
    }
    let (_, c1) = observe_crop(same, emb(x.clone())).unwrap();
    let (_, c2) = observe_crop(flip, emb(y)).unwrap();
    let examples = !c0 && !c1 && c2;

    // A change flagged at threshold u is still flagged at any larger u.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..30);
        let seq: Vec<Vec<f64>> = (0..len)
            .map(|_| {
                let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                v[0] += 0.01;
                v
            })
            .collect();
        let (u1, u2) = {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            (a.min(b), a.max(b))
        };
        let (mut lo, mut hi) = (CropHistory::new(4, u1), CropHistory::new(4, u2));
        for v in &seq {
            let a = lo.observe(emb(v.clone())).unwrap();
            let b = hi.observe(emb(v.clone())).unwrap();
            violations += usize::from(a && !b);
        }
    }
    ensure(
        examples && violations == 0,
        format!(
            "examples {}, monotonicity violations {violations}/1000 sequences",
            if examples { "hold" } else { "FAIL" }
        ),
    )
}

fn classifier() -> Outcome {
    let started = Instant::now();
    let train = gesture_samples(300, 0.01, 7);
    let held_out = gesture_samples(100, 0.01, 8);
    let (model, _) = gesture::train(&train, &TrainParams::default()).unwrap();
    let acc = gesture::accuracy(&model, &held_out).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for s in held_out.iter().take(100) {
        let g = model.gradient_check(s).unwrap();
        worst = worst.max(g.max_relative_error);
        checked += g.checked;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        acc >= 0.95 && worst < 1e-3 && secs < 120.0,
        format!("held-out accuracy {acc:.3}, gradient max rel err {worst:.2e} over 100 pairs ({checked} parameter probes), {secs:.1} s"),
    )
}

fn reversed(s: &[tsribe_core::types::Landmark]) -> Vec<tsribe_core::types::Landmark> {
    s.iter().rev().copied().collect()
}

fn motion_classifier() -> Outcome {
    let (model, _) = motion::train(&motion_samples(300, 0.003, 7), &TrainParams::default()).unwrap();
    let class = |pts: &[tsribe_core::types::Landmark]| {
        model
            .classify_features(&MotionSample::from_points(pts, MotionClass::Static).features)
            .unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut agree = 0;
    for i in 0..200 {
        let dir = if i % 2 == 0 { MotionClass::Up } else { MotionClass::Down };
        let opposite = if dir == MotionClass::Up {
            MotionClass::Down
        } else {
            MotionClass::Up
        };
        let t = trajectory(dir, 0.003, &mut rng);
        agree += usize::from(class(&t) == dir && class(&reversed(&t)) == opposite);
    }
    let statics = (0..200)
        .filter(|_| class(&trajectory(MotionClass::Static, 0.003, &mut rng)) == MotionClass::Static)
        .count();
    ensure(
        agree >= 190 && statics >= 190,
        format!("reversal agreement {agree}/200, static {statics}/200"),
    )
}

fn color_labels() -> Outcome {
    let table = ColorTable::builtin();
    let entries = table.entries();
    let own = entries.iter().filter(|e| table.nearest(e.rgb()) == e.name).count();
    let aliases: Vec<String> = entries
        .iter()
        .filter(|e| table.nearest(e.rgb()) != e.name)
        .map(|e| format!("{}->{}", e.name, table.nearest(e.rgb())))
        .collect();
    let q = [250.0, 128.0, 115.0];
    let brute = entries
        .iter()
        .min_by(|a, b| {
            squared_distance(q, a.rgb())
                .total_cmp(&squared_distance(q, b.rgb()))
                .then_with(|| a.name.cmp(&b.name))
        })
        .unwrap();
    let salmon = table.nearest(q) == brute.name && brute.name == "salmon";
    let detail = format!(
        "{own}/{} names map to themselves; salmon oracle {}; aliases sharing RGB: {}",
        entries.len(),
        if salmon { "ok" } else { "FAIL" },
        aliases.join(" ")
    );
    ensure(entries.len() == 147 && own == 147 && salmon, detail)
}

fn orchestrator() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for name in NAMES {
        let session = load_fixture(name);
        let out = virtual_replay(&session);
        let golden = fs::read(fixture_dir().join(format!("{name}.trace.jsonl"))).unwrap();
        let transcript = fs::read(fixture_dir().join(format!("{name}.transcript.jsonl"))).unwrap();
        if out.trace_bytes() != golden || out.transcript_bytes() != transcript {
            ok = false;
            notes.push(format!("{name} differs from golden"));
        }
        // (c) per keyframe, HandState before Brief before Detailed
        let rank = |k: DescriptionKind| match k {
            DescriptionKind::HandState => Some(0),
            DescriptionKind::Brief => Some(1),
            DescriptionKind::Detailed => Some(2),
            _ => None,
        };
        let mut last: BTreeMap<u64, (u64, i32)> = BTreeMap::new();
        for d in spoken(&out.trace) {
            let (Some(k), Some(r), Some(start)) = (d.keyframe_id, rank(d.kind), d.spoken_start_t_ms) else {
                continue;
            };
            if let Some((t, pr)) = last.get(&k) {
                if *pr > r || *t > start {
                    ok = false;
                    notes.push(format!("{name}: keyframe {k} order violated"));
                }
            }
            last.insert(k, (start, r));
        }
        match name {
            "query-interrupt" => {
                let q = out
                    .trace
                    .iter()
                    .find(|r| matches!(r.as_event(), Some(PipelineEvent::QueryIssued { .. })))
                    .map(|r| r.t_ms)
                    .unwrap();
                let end = spoken(&out.trace)
                    .iter()
                    .find(|d| d.kind == DescriptionKind::QueryAnswer)
                    .and_then(|d| d.spoken_end_t_ms)
                    .unwrap();
                let leaks = spoken(&out.trace)
                    .iter()
                    .filter(|d| d.kind != DescriptionKind::QueryAnswer)
                    .filter(|d| d.spoken_start_t_ms.is_some_and(|s| s >= q && s < end))
                    .count();
                ok &= leaks == 0;
                notes.push(format!("(a) {leaks} gesture speaks in [{q}, {end})"));
            }
            "swipe-before-ready" => {
                let hit = spoken(&out.trace).iter().any(|d| d.text == STILL_PROCESSING);
                ok &= hit;
                notes.push(format!(
                    "(b) still-processing {}",
                    if hit { "spoken" } else { "missing" }
                ));
            }
            "stale" => {
                let keyframes: Vec<(u64, u64)> = out
                    .trace
                    .iter()
                    .filter_map(|r| match r.as_event() {
                        Some(PipelineEvent::Keyframe { frame_id, .. }) => Some((*frame_id, r.t_ms)),
                        _ => None,
                    })
                    .collect();
                let (k1, _) = keyframes[0];
                let (_, k2_t) = keyframes[1];
                let late = spoken(&out.trace)
                    .iter()
                    .filter(|d| d.keyframe_id == Some(k1) && d.spoken_start_t_ms.is_some_and(|s| s >= k2_t))
                    .count();
                ok &= late == 0;
                notes.push(format!("(d) {late} k1 descriptions after k2"));
            }
            _ => {}
        }
    }
    notes.insert(0, "(c) order checked on all fixtures".into());
    ensure(ok, format!("goldens match; {}", notes.join(", ")))
}

fn latency() -> Outcome {
    let profile = BackendProfile::default();
    let session = synth_session(&SynthSpec {
        n_frames: 40_000,
        ..Default::default()
    });
    let out = replay(
        &session,
        &PipelineConfig::default(),
        Components::mock(profile.clone(), 7, false),
    )
    .unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for class in BackendClass::ALL {
        let target = profile.get(class).mean_s;
        let Some(s) = out.report.model_latency.get(class.as_str()) else {
            ok = false;
            notes.push(format!("{} missing", class.as_str()));
            continue;
        };
        let rel = (s.mean_s - target).abs() / target;
        ok &= s.count >= 500 && rel <= 0.10;
        notes.push(format!(
            "{} {:.3}s vs {target}s over {}",
            class.as_str(),
            s.mean_s,
            s.count
        ));
    }
    let mut brief: BTreeMap<u64, u64> = BTreeMap::new();
    let mut bad = 0;
    let mut pairs = 0;
    for d in spoken(&out.trace) {
        let (Some(k), Some(start)) = (d.keyframe_id, d.spoken_start_t_ms) else {
            continue;
        };
        match d.kind {
            DescriptionKind::Brief => {
                brief.entry(k).or_insert(start);
            }
            DescriptionKind::Detailed => {
                if let Some(b) = brief.get(&k) {
                    pairs += 1;
                    bad += usize::from(*b >= start);
                }
            }
            _ => {}
        }
    }
    ok &= bad == 0;
    notes.push(format!("brief before detailed in {}/{pairs} keyframes", pairs - bad));
    ensure(ok, notes.join(", "))
}

fn brute_metrics(pred: &[GestureClass], gt: &[GestureClass]) -> (Vec<Vec<u64>>, Vec<Option<f64>>) {
    let mut m = vec![vec![0u64; 4]; 4];
    for (i, a) in LABELS.iter().enumerate() {
        for (j, b) in LABELS.iter().enumerate() {
            m[i][j] = gt.iter().zip(pred).filter(|(g, p)| *g == a && *p == b).count() as u64;
        }
    }
    let f1 = LABELS
        .iter()
        .map(|c| {
            let tp = gt.iter().zip(pred).filter(|(g, p)| *g == c && *p == c).count() as f64;
            let fp = gt.iter().zip(pred).filter(|(g, p)| *g != c && *p == c).count() as f64;
            let fn_ = gt.iter().zip(pred).filter(|(g, p)| *g == c && *p != c).count() as f64;
            if tp + fp + fn_ == 0.0 {
                None
            } else {
                Some(2.0 * tp / (2.0 * tp + fp + fn_))
            }
        })
        .collect();
    (m, f1)
}

fn metrics() -> Outcome {
    use GestureClass::*;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = 50;
        let gt: Vec<GestureClass> = (0..n).map(|_| LABELS[rng.random_range(0..4)]).collect();
        let pred: Vec<GestureClass> = (0..n).map(|_| LABELS[rng.random_range(0..4)]).collect();
        let m = evaluate(&pred, &gt).unwrap();
        let (conf, f1) = brute_metrics(&pred, &gt);
        let same_f1 = LABELS
            .iter()
            .zip(&f1)
            .all(|(c, f)| match (m.classes[c.as_str()].f1, f) {
                (None, None) => true,
                (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                _ => false,
            });
        mismatches += usize::from(m.confusion.counts != conf || !same_f1);
    }
    let m = evaluate(&[Hold, Touch, Touch, Point], &[Hold, Hold, Touch, Point]).unwrap();
    let f1 = |c: GestureClass| m.classes[c.as_str()].f1.unwrap();
    let example = m.accuracy == Some(0.75)
        && (f1(Hold) - 2.0 / 3.0).abs() < 1e-12
        && (f1(Touch) - 2.0 / 3.0).abs() < 1e-12
        && f1(Point) == 1.0;
    ensure(
        mismatches == 0 && example,
        format!(
            "{mismatches}/1000 random traces differ from brute force; 4-frame example accuracy {:?}, F1 hold {:.3} touch {:.3} point {:.3}",
            m.accuracy,
            f1(Hold),
            f1(Touch),
            f1(Point)
        ),
    )
}

fn push_cost_ns(len: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds: Vec<GestureClass> = (0..len).map(|_| LABELS[rng.random_range(0..4)]).collect();
    let mut s = Stabilizer::new(SmoothingParams::default()).unwrap();
    let measured = 20_000.min(len);
    let mut events = 0;
    for (i, p) in preds[..len - measured].iter().enumerate() {
        events += s.push_prediction(Hand::Right, *p, i as u64).unwrap().len();
    }
    let started = Instant::now();
    for (i, p) in preds[len - measured..].iter().enumerate() {
        events += s
            .push_prediction(Hand::Right, *p, (len - measured + i) as u64)
            .unwrap()
            .len();
    }
    let ns = started.elapsed().as_nanos() as f64 / measured as f64;
    std::hint::black_box(events);
    ns
}

fn performance() -> Outcome {
    let session = synth_session(&SynthSpec {
        n_frames: 10_000,
        ..Default::default()
    });
    let cfg = PipelineConfig {
        clock: ClockMode::WallClock { pace: false },
        drain_timeout_ms: 5_000,
        ..Default::default()
    };
    let out = replay(&session, &cfg, Components::mock(BackendProfile::default(), 7, true)).unwrap();
    let fps = out.report.throughput_fps.unwrap_or(0.0);
    let best = |len| (0..5).map(|_| push_cost_ns(len)).fold(f64::INFINITY, f64::min);
    let short = best(20_000);
    let long = best(2_000_000);
    let ratio = long / short;
    ensure(
        fps >= 30.0 && ratio < 2.0,
        format!("{fps:.0} frames/s wall-clock; push_prediction {short:.0} ns at 2e4 frames, {long:.0} ns at 2e6 (x{ratio:.2})"),
    )
}

fn determinism() -> Outcome {
    let mut sessions: Vec<(String, Session)> = NAMES.iter().map(|n| (n.to_string(), load_fixture(n))).collect();
    sessions.push(("synthetic".into(), synth_session(&SynthSpec::default())));
    let mut differing = Vec::new();
    for (name, s) in &sessions {
        let a = virtual_replay(s);
        let b = virtual_replay(s);
        if a.trace_bytes() != b.trace_bytes() || a.transcript_bytes() != b.transcript_bytes() {
            differing.push(name.clone());
        }
    }
    ensure(
        differing.is_empty(),
        format!("{} sessions replayed twice, differing: {:?}", sessions.len(), differing),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("smoothing-oracle", smoothing),
        ("object-change", object_change),
        ("gesture-classifier", classifier),
        ("motion-classifier", motion_classifier),
        ("color-labels", color_labels),
        ("orchestrator-fixtures", orchestrator),
        ("latency-schema", latency),
        ("metrics", metrics),
        ("performance", performance),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let started = Instant::now();
        let res = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = started.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {name}: {d} [{took:.1}s]"),
            Err(d) => {
                let known = if UNATTAINABLE.contains(&name) {
                    " (known unattainable)"
                } else {
                    ""
                };
                println!("FAIL {name}{known}: {d} [{took:.1}s]");
                failed.push(name);
            }
        }
    }
    let blocking: Vec<_> = failed.iter().filter(|n| !UNATTAINABLE.contains(n)).collect();
    println!("acceptance: {}/10 pass", 10 - failed.len());
    if !blocking.is_empty() {
        std::process::exit(1);
    }
}
