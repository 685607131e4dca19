//! Regenerate the toy replay fixtures from the hand-written replies in
//! `tests/fixtures/toy/script.json`.
//!
//! Every configuration exercised by the tests is run once against a scripted
//! transport; the backend cache it writes is the fixture set.
//!
//! ```text
//! cargo run -p gno-core --example build_fixtures
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gno_core::backend::{Backend, BackendKind, BackendProfile, ChatRequest, RequestLabel, Transport, TransportError};
use gno_core::pipeline::{Pipeline, RunManifest};
use gno_core::schema::{Strategy, Task};

/// doc id → target → stage key → reply. Stage keys are `stage` or
/// `strategy/stage`, the latter taking precedence.
type Script = BTreeMap<String, BTreeMap<String, BTreeMap<String, String>>>;

struct Scripted {
    script: Script,
    strategy: Strategy,
}

impl Transport for Scripted {
    fn send(&self, _: &ChatRequest, label: &RequestLabel) -> Result<String, TransportError> {
        let stages = self
            .script
            .get(&label.doc_id)
            .and_then(|d| d.get(&label.target))
            .ok_or_else(|| TransportError::Permanent(format!("no script for {}::{}", label.doc_id, label.target)))?;
        stages
            .get(&format!("{}/{}", self.strategy, label.stage))
            .or_else(|| stages.get(&label.stage.to_string()))
            .cloned()
            .ok_or_else(|| {
                TransportError::Permanent(format!(
                    "no scripted {} reply for {}::{}",
                    label.stage, label.doc_id, label.target
                ))
            })
    }
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy");
    let replay = root.join("replay");
    if replay.exists() {
        fs::remove_dir_all(&replay).expect("clear old fixtures");
    }
    fs::create_dir_all(&replay).expect("create fixture dir");
    let raw = fs::read_to_string(root.join("script.json")).expect("read script");
    let script: Script = serde_json::from_str(&raw).expect("parse script");

    let runs = [
        (Task::Ner, Strategy::GnO, true),
        (Task::Ner, Strategy::OneStep, false),
        (Task::Ner, Strategy::AEiO, false),
        (Task::Re, Strategy::GnO, false),
        (Task::Re, Strategy::OneStep, false),
    ];
    for (task, strategy, cr_pass) in runs {
        let profile = BackendProfile {
            kind: BackendKind::Http,
            ..BackendProfile::default()
        };
        let backend = Backend::with_transport(
            profile.clone(),
            Box::new(Scripted {
                script: script.clone(),
                strategy,
            }),
            Some(replay.clone()),
        );
        let mut manifest = RunManifest::new(
            task,
            root.join("corpus.jsonl"),
            root.join("schema.json"),
            profile,
            PathBuf::from("unused"),
        );
        manifest.strategy.strategy = strategy;
        manifest.strategy.cr_pass = cr_pass;
        let pipeline = Pipeline::new(manifest, &backend).expect("pipeline");
        let out = pipeline.run().expect("run");
        assert_eq!(out.failed_targets, 0, "{task:?}/{strategy}: scripted run had failures");
        let c = backend.counters();
        println!(
            "{task:?} {strategy}{}: {} conversations, {} requests",
            if cr_pass { " +cr" } else { "" },
            c.conversations,
            c.requests
        );
    }
    let n = fs::read_dir(&replay).expect("list fixtures").count();
    println!("{n} fixtures in {}", replay.display());
}
