//! Files written by the Python exporter (tools/embed_export) must load here.

use std::path::PathBuf;

use drgrade::io::{Container, EntryData, PromptFile};
use drgrade::grade::prompt_text;
use drgrade::Grade;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn container_from_exporter() {
    let c = Container::read(&fixture("py_export.gfe")).unwrap();
    assert_eq!(c.meta, r#"{"checkpoint":"fixture"}"#);
    assert_eq!(c.len(), 2);
    match c.get("img_a").unwrap() {
        EntryData::Global(v) => {
            assert_eq!(v.len(), 8);
            assert_eq!(v[0], -0.5);
            assert_eq!(v[7], 0.5);
        }
        other => panic!("expected global entry, got {:?}", other.kind()),
    }
    let fm = c.get("img_b").unwrap();
    assert_eq!(fm.shape(), vec![2, 3, 4]);
    assert_eq!(fm.values()[0], -11.0 / 4.0);
    // re-encoding reproduces the exporter's bytes exactly
    assert_eq!(c.to_bytes(), std::fs::read(fixture("py_export.gfe")).unwrap());
}

#[test]
fn prompts_from_exporter() {
    let p = PromptFile::read(&fixture("py_export.gfp")).unwrap();
    let expected: Vec<String> = Grade::ALL.iter().map(|&g| prompt_text(g)).collect();
    assert_eq!(p.texts(), expected.as_slice());
    assert_eq!(p.dim(), 6);
    assert_eq!(p.rows()[2][2], 1.25);
    assert_eq!(p.to_bytes(), std::fs::read(fixture("py_export.gfp")).unwrap());
}
