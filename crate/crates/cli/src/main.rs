use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tsribe_core::backends::{
    AnnotationDetector, BackendProfile, Captioner, ContactDetector, HeuristicDetector, HttpBackend, HttpConfig,
    HttpContactDetector, LatencySampler, MockBackend,
};
use tsribe_core::color::ColorTable;
use tsribe_core::eval::build_report;
use tsribe_core::executor::Backends;
use tsribe_core::gesture::{self, GestureClassifier};
use tsribe_core::mlp::TrainParams;
use tsribe_core::motion::{self, MotionClassifier};
use tsribe_core::object_change::FlipParams;
use tsribe_core::orchestrator::NarrationParams;
use tsribe_core::pipeline::{transcript_of, ClockMode, Components, Pipeline, PipelineConfig};
use tsribe_core::session::{read_session, serialize_session, FrameParser};
use tsribe_core::stabilizer::SmoothingParams;
use tsribe_core::synth::{gesture_samples, motion_samples, synth_session, SynthSpec};
use tsribe_core::trace::{parse_events, serialize_events, write_jsonl, TranscriptRecord};
use tsribe_core::{replay, Session};

#[derive(Parser)]
#[command(name = "tsribe", version, about = "Gesture-driven description pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a session through the pipeline.
    Replay(ReplayArgs),
    /// Compute metrics from a trace and a labelled session.
    Eval(EvalArgs),
    /// Train the hand gesture classifier.
    TrainGesture(TrainArgs),
    /// Train the fingertip motion classifier.
    TrainMotion(TrainArgs),
    /// Generate a labelled session or classifier training data.
    Synth(SynthArgs),
    /// Process a session stream from standard input in real time.
    Live(LiveArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    #[arg(long)]
    backend_url: Option<String>,
    #[arg(long, default_value = "gpt-4o")]
    backend_model: String,
    /// Environment variable holding the API key.
    #[arg(long)]
    backend_key_env: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    timeout_s: f64,
    /// annot, heuristic or http:<url>
    #[arg(long, default_value = "annot")]
    contact: String,
    /// Seed for simulated latencies.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Canned answers for the mock backend.
    #[arg(long)]
    mock_answers: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    smooth_x: usize,
    #[arg(long, default_value_t = 6)]
    smooth_n: usize,
    #[arg(long, default_value_t = 4)]
    smooth_t: usize,
    #[arg(long, default_value_t = 4)]
    flip_s: usize,
    #[arg(long, default_value_t = 0.85)]
    flip_u: f64,
    #[arg(long, default_value_t = 6)]
    flip_cadence: u64,
    /// Speech rate in characters per second.
    #[arg(long, default_value_t = 15.0)]
    rate: f64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Color table CSV with a name,r,g,b header.
    #[arg(long)]
    colors: Option<PathBuf>,
    #[arg(long)]
    gesture_model: Option<PathBuf>,
    #[arg(long)]
    motion_model: Option<PathBuf>,
    /// Directory frame image paths are relative to (default: the session's directory).
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Run against the wall clock instead of virtual time.
    #[arg(long)]
    wall_clock: bool,
    /// With --wall-clock, feed frames at their timestamps.
    #[arg(long)]
    pace: bool,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training data; synthetic samples are generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Synthetic samples per class.
    #[arg(long, default_value_t = 300)]
    per_class: usize,
    /// Synthetic landmark noise SD.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    Session,
    Gesture,
    Motion,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "session")]
    kind: SynthKind,
    #[arg(long, default_value_t = 600)]
    frames: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Samples per class for training data.
    #[arg(long, default_value_t = 300)]
    per_class: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LiveArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Replay(a) => cmd_replay(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TrainGesture(a) => cmd_train_gesture(a),
        Command::TrainMotion(a) => cmd_train_motion(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Live(a) => cmd_live(a),
    }
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(bytes).context("writing to stdout"),
    }
}

fn load_session(path: &Path) -> Result<Session> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_session(io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn build(args: &PipelineArgs, clock: ClockMode, image_root: Option<PathBuf>) -> Result<(PipelineConfig, Components)> {
    let smoothing = SmoothingParams {
        x: args.smooth_x,
        n: args.smooth_n,
        t: args.smooth_t,
    };
    smoothing.validate()?;
    let flip = FlipParams {
        s: args.flip_s,
        u: args.flip_u,
        cadence: args.flip_cadence,
    };
    flip.validate()?;
    if !(args.timeout_s.is_finite() && args.timeout_s > 0.0) {
        bail!("--timeout-s must be positive");
    }
    let timeout = Duration::from_secs_f64(args.timeout_s);
    let image_root = args.image_root.clone().or(image_root);
    let cfg = PipelineConfig {
        smoothing,
        flip,
        narration: NarrationParams {
            rate_cps: args.rate,
            ..Default::default()
        },
        concurrency: args.concurrency,
        timeout_ms: timeout.as_millis() as u64,
        image_root: image_root.clone(),
        clock,
        ..Default::default()
    };
    let wall = clock != ClockMode::Virtual;
    let sampler = LatencySampler::new(BackendProfile::default(), args.seed);

    let captioner: Arc<dyn Captioner> = match args.backend {
        BackendKind::Mock => {
            let mock = match &args.mock_answers {
                Some(p) => MockBackend::from_json(&fs::read_to_string(p)?, sampler.clone())
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => MockBackend::builtin(sampler.clone()),
            };
            Arc::new(mock.with_sleep(wall))
        }
        BackendKind::Http => {
            let url = args.backend_url.clone().context("--backend http needs --backend-url")?;
            let mut hc = HttpConfig::new(url, args.backend_model.clone());
            hc.timeout = timeout;
            if let Some(root) = &image_root {
                hc.image_root = root.clone();
            }
            if let Some(var) = &args.backend_key_env {
                hc.api_key = Some(std::env::var(var).with_context(|| format!("reading ${var}"))?);
            }
            Arc::new(HttpBackend::new(hc))
        }
    };
    let (contact, contact_latency): (Arc<dyn ContactDetector>, _) = match args.contact.as_str() {
        "annot" => (Arc::new(AnnotationDetector::default()), Some(sampler)),
        "heuristic" => (Arc::new(HeuristicDetector::default()), Some(sampler)),
        other => match other.strip_prefix("http:") {
            Some(url) => (Arc::new(HttpContactDetector::new(url, timeout)), None),
            None => bail!("--contact must be annot, heuristic or http:<url>, got {other:?}"),
        },
    };
    let gesture = match &args.gesture_model {
        Some(p) => {
            GestureClassifier::from_json(&fs::read_to_string(p)?).with_context(|| format!("loading {}", p.display()))?
        }
        None => GestureClassifier::builtin(),
    };
    let motion = match &args.motion_model {
        Some(p) => {
            MotionClassifier::from_json(&fs::read_to_string(p)?).with_context(|| format!("loading {}", p.display()))?
        }
        None => MotionClassifier::builtin(),
    };
    let colors = match &args.colors {
        Some(p) => ColorTable::from_csv(fs::File::open(p)?).with_context(|| format!("loading {}", p.display()))?,
        None => ColorTable::builtin(),
    };
    let backends = Backends {
        fast: captioner.clone(),
        rich: captioner,
        contact,
        contact_latency,
        sleep_contact: wall,
    };
    Ok((
        cfg,
        Components {
            gesture,
            motion,
            colors,
            backends,
        },
    ))
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let session = load_session(&a.session)?;
    let clock = if a.wall_clock {
        ClockMode::WallClock { pace: a.pace }
    } else {
        ClockMode::Virtual
    };
    let root = a.session.parent().map(Path::to_path_buf);
    let (cfg, components) = build(&a.pipeline, clock, root)?;
    let out = replay(&session, &cfg, components)?;
    write_out(a.out.as_deref(), &out.trace_bytes())?;
    if let Some(p) = &a.transcript {
        write_out(Some(p), &out.transcript_bytes())?;
    }
    if let Some(p) = &a.report {
        write_out(Some(p), out.report_json().as_bytes())?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let session = load_session(&a.session)?;
    let bytes = fs::read(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let trace = parse_events(&bytes)?;
    let report = build_report(&session, &trace, None);
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_out(a.report.as_deref(), json.as_bytes())
}

fn train_params(a: &TrainArgs) -> TrainParams {
    TrainParams {
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
        ..Default::default()
    }
}

fn cmd_train_gesture(a: TrainArgs) -> Result<()> {
    let data = match &a.data {
        Some(p) => gesture::parse_training_data(&fs::read(p)?)?,
        None => gesture_samples(a.per_class, a.noise.unwrap_or(0.01), a.seed),
    };
    let (model, report) = gesture::train(&data, &train_params(&a))?;
    let acc = gesture::accuracy(&model, &data)?;
    eprintln!(
        "trained on {} samples: final loss {:.4}, training accuracy {:.3}",
        data.len(),
        report.final_loss().unwrap_or(f64::NAN),
        acc
    );
    fs::write(&a.out, model.to_json() + "\n").with_context(|| format!("writing {}", a.out.display()))
}

fn cmd_train_motion(a: TrainArgs) -> Result<()> {
    let data = match &a.data {
        Some(p) => motion::parse_training_data(&fs::read(p)?)?,
        None => motion_samples(a.per_class, a.noise.unwrap_or(0.003), a.seed),
    };
    let (model, report) = motion::train(&data, &train_params(&a))?;
    let correct = data
        .iter()
        .filter(|s| model.classify_features(&s.features).ok() == Some(s.label))
        .count();
    eprintln!(
        "trained on {} samples: final loss {:.4}, training accuracy {:.3}",
        data.len(),
        report.final_loss().unwrap_or(f64::NAN),
        correct as f64 / data.len().max(1) as f64
    );
    fs::write(&a.out, model.to_json() + "\n").with_context(|| format!("writing {}", a.out.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.dropout) {
        bail!("--dropout must be within [0, 1]");
    }
    let bytes = match a.kind {
        SynthKind::Session => serialize_session(&synth_session(&SynthSpec {
            n_frames: a.frames,
            noise: a.noise,
            dropout: a.dropout,
            seed: a.seed,
        })),
        SynthKind::Gesture => gesture::write_training_data(&gesture_samples(a.per_class, a.noise, a.seed)),
        SynthKind::Motion => motion::write_training_data(&motion_samples(a.per_class, a.noise, a.seed)),
    };
    write_out(a.out.as_deref(), &bytes)
}

fn cmd_live(a: LiveArgs) -> Result<()> {
    let (cfg, components) = build(&a.pipeline, ClockMode::WallClock { pace: false }, None)?;
    let mut pipeline = Pipeline::new(cfg, components)?;
    let mut parser = FrameParser::new();
    let stdout = io::stdout();
    for line in io::stdin().lock().lines() {
        let line = line.context("reading standard input")?;
        let Some(frame) = parser.parse_line(&line)? else {
            continue;
        };
        pipeline.push_frame(&frame)?;
        let mut out = stdout.lock();
        for d in pipeline.take_spoken() {
            if let Some(r) = TranscriptRecord::from_description(d) {
                writeln!(out, "{}", serde_json::to_string(&r)?)?;
            }
        }
        out.flush()?;
    }
    let (trace, spoken) = pipeline.finish();
    if let Some(p) = &a.out {
        write_out(Some(p), &serialize_events(&trace))?;
    }
    if let Some(p) = &a.transcript {
        write_out(Some(p), &write_jsonl(&transcript_of(&spoken)))?;
    }
    Ok(())
}
