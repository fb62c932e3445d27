use std::fs;
use std::path::PathBuf;

use tsribe_core::fixtures::{self, NAMES};
use tsribe_core::session::{parse_session, serialize_session};
use tsribe_core::{replay, PipelineConfig};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn check(path: PathBuf, actual: &[u8], update: bool) {
    if update {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDENS=1", path.display()));
    assert!(expected == actual, "{} differs from the golden", path.display());
}

#[test]
fn fixtures_match_goldens() {
    let update = std::env::var_os("UPDATE_GOLDENS").is_some();
    for name in NAMES {
        let built = serialize_session(&fixtures::build(name).unwrap());
        check(dir().join(format!("{name}.session.jsonl")), &built, update);
        let session = parse_session(&fs::read(dir().join(format!("{name}.session.jsonl"))).unwrap()).unwrap();
        let out = replay(&session, &PipelineConfig::default(), fixtures::components()).unwrap();
        check(dir().join(format!("{name}.trace.jsonl")), &out.trace_bytes(), update);
        check(
            dir().join(format!("{name}.transcript.jsonl")),
            &out.transcript_bytes(),
            update,
        );
    }
}
