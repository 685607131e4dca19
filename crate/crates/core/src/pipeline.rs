//! Orchestration: documents × targets → conversations → parsed, grounded
//! mentions.
//!
//! Documents are processed in parallel; the targets of one document and the
//! stages of one conversation run sequentially. Results are collected in
//! corpus order, so outputs are identical whatever the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{transcript_id, write_transcripts, Backend, BackendProfile, Transcript};
use crate::error::{Error, Result};
use crate::evaluation::Predictions;
use crate::grounding::{DocumentIndex, GroundingConfig};
use crate::labels::{detect_conflicts, ConflictGroup};
use crate::prompting::{
    build_cr_plan, build_ner_plan, build_re_plan, NerTarget, TemplateSet, ALL_TYPES, CR_TARGET,
};
use crate::schema::{
    load_corpus, span_overlap, Corpus, Document, EntityMention, RelationMention, Strategy, StrategyConfig, Task,
    TaskSchema,
};
use crate::structparse::{extract_entity_surfaces, extract_relation_rows, extract_typed_entities, parse_reply};

pub const DEFAULT_FAILURE_BUDGET: f64 = 0.5;

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: Task,
    pub corpus: PathBuf,
    pub schema: PathBuf,
    pub strategy: StrategyConfig,
    pub backend: BackendProfile,
    pub grounding: GroundingConfig,
    /// Directory overlaying the built-in templates.
    pub templates: Option<PathBuf>,
    pub outdir: PathBuf,
    pub jobs: usize,
    /// Fraction of failed targets above which the run is an error.
    pub failure_budget: f64,
}

impl RunManifest {
    pub fn new(task: Task, corpus: PathBuf, schema: PathBuf, backend: BackendProfile, outdir: PathBuf) -> Self {
        RunManifest {
            task,
            corpus,
            schema,
            strategy: StrategyConfig::default(),
            backend,
            grounding: GroundingConfig::default(),
            templates: None,
            outdir,
            jobs: 1,
            failure_budget: DEFAULT_FAILURE_BUDGET,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
    #[serde(default)]
    pub surface: String,
    /// Transcript that produced the mention.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source: String,
}

impl EntityRecord {
    fn from_mention(m: &EntityMention, source: &str) -> Self {
        EntityRecord {
            start: m.start,
            end: m.end,
            etype: m.etype.clone(),
            surface: m.surface.clone(),
            source: source.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
    #[serde(default)]
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    #[serde(rename = "type")]
    pub rtype: String,
    pub args: Vec<ArgRecord>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub target: String,
    pub reason: String,
}

/// One document's predictions; one line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<EntityRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<RelationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<Failure>,
}

impl ExtractionResult {
    pub fn new(doc_id: impl Into<String>) -> Self {
        ExtractionResult {
            doc_id: doc_id.into(),
            entities: Vec::new(),
            relations: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn entity_mentions(&self) -> Vec<EntityMention> {
        self.entities
            .iter()
            .map(|e| EntityMention {
                doc_id: self.doc_id.clone(),
                start: e.start,
                end: e.end,
                etype: e.etype.clone(),
                surface: e.surface.clone(),
            })
            .collect()
    }

    pub fn relation_mentions(&self) -> Vec<RelationMention> {
        self.relations
            .iter()
            .map(|r| RelationMention {
                doc_id: self.doc_id.clone(),
                rtype: r.rtype.clone(),
                constituents: r
                    .args
                    .iter()
                    .map(|a| EntityMention {
                        doc_id: self.doc_id.clone(),
                        start: a.start,
                        end: a.end,
                        etype: a.etype.clone(),
                        surface: a.surface.clone(),
                    })
                    .collect(),
            })
            .collect()
    }
}

pub fn write_results(path: &Path, results: &[ExtractionResult]) -> Result<()> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ExtractionResult>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Check every predicted span against its document and key the mentions by
/// document. Surfaces are taken from the text, so files that omit them (or
/// carry stale ones) score the same.
pub fn predictions_from_results(results: &[ExtractionResult], corpus: &Corpus) -> Result<Predictions> {
    let mut pred = Predictions::default();
    let mut seen = BTreeSet::new();
    for r in results {
        let ad = corpus.get(&r.doc_id).ok_or_else(|| Error::InvalidDocument {
            doc_id: r.doc_id.clone(),
            message: "not in the gold corpus".into(),
        })?;
        if !seen.insert(r.doc_id.as_str()) {
            return Err(Error::InvalidDocument {
                doc_id: r.doc_id.clone(),
                message: "appears twice in predictions".into(),
            });
        }
        let doc = &ad.document;
        let entities = r
            .entities
            .iter()
            .map(|e| doc.mention(e.start, e.end, &e.etype))
            .collect::<Result<Vec<_>>>()?;
        let relations = r
            .relations
            .iter()
            .map(|rel| {
                Ok(RelationMention {
                    doc_id: doc.id.clone(),
                    rtype: rel.rtype.clone(),
                    constituents: rel
                        .args
                        .iter()
                        .map(|a| doc.mention(a.start, a.end, &a.etype))
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        pred.entities.insert(r.doc_id.clone(), entities);
        pred.relations.insert(r.doc_id.clone(), relations);
    }
    Ok(pred)
}

/// Results and transcripts of one pass, plus the target failure tally used
/// for the failure budget.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub results: Vec<ExtractionResult>,
    pub transcripts: Vec<Transcript>,
    pub targets: usize,
    pub failed_targets: usize,
}

impl RunOutput {
    pub fn failure_rate(&self) -> f64 {
        if self.targets == 0 {
            0.0
        } else {
            self.failed_targets as f64 / self.targets as f64
        }
    }
}

struct DocOutput {
    result: ExtractionResult,
    transcripts: Vec<Transcript>,
    targets: usize,
    failed: usize,
}

fn merge(docs: Vec<DocOutput>) -> RunOutput {
    let mut out = RunOutput::default();
    for d in docs {
        out.results.push(d.result);
        out.transcripts.extend(d.transcripts);
        out.targets += d.targets;
        out.failed_targets += d.failed;
    }
    out
}

/// Accumulates entity mentions of one document, first source wins.
#[derive(Default)]
struct MentionSet {
    mentions: BTreeMap<EntityMention, String>,
}

impl MentionSet {
    fn add(&mut self, m: EntityMention, source: &str) {
        self.mentions.entry(m).or_insert_with(|| source.to_string());
    }

    fn into_records(self) -> Vec<EntityRecord> {
        self.mentions
            .iter()
            .map(|(m, src)| EntityRecord::from_mention(m, src))
            .collect()
    }
}

pub struct Pipeline<'a> {
    manifest: RunManifest,
    schema: TaskSchema,
    corpus: Corpus,
    templates: TemplateSet,
    backend: &'a Backend,
    pool: rayon::ThreadPool,
}

impl<'a> Pipeline<'a> {
    pub fn new(manifest: RunManifest, backend: &'a Backend) -> Result<Self> {
        let schema = TaskSchema::load(&manifest.schema)?;
        let corpus = load_corpus(&manifest.corpus)?;
        Self::from_parts(manifest, schema, corpus, backend)
    }

    pub fn from_parts(manifest: RunManifest, schema: TaskSchema, corpus: Corpus, backend: &'a Backend) -> Result<Self> {
        manifest.strategy.validate(manifest.task, &schema)?;
        manifest.grounding.validate()?;
        if !(0.0..=1.0).contains(&manifest.failure_budget) {
            return Err(Error::Config("failure_budget must lie in [0, 1]".into()));
        }
        match manifest.task {
            Task::Ner if schema.entity_types.is_empty() => {
                return Err(Error::InvalidSchema("NER needs at least one entity type".into()))
            }
            Task::Re if schema.relation_types.is_empty() => {
                return Err(Error::InvalidSchema("RE needs at least one relation type".into()))
            }
            _ => {}
        }
        let templates = match &manifest.templates {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::default(),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(manifest.jobs.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Pipeline {
            manifest,
            schema,
            corpus,
            templates,
            backend,
            pool,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn per_doc<F>(&self, f: F) -> Result<RunOutput>
    where
        F: Fn(&Document) -> Result<DocOutput> + Sync,
    {
        let docs: Vec<&Document> = self.corpus.documents().collect();
        let outputs = self
            .pool
            .install(|| docs.par_iter().map(|d| f(d)).collect::<Result<Vec<_>>>())?;
        Ok(merge(outputs))
    }

    pub fn run_ner(&self) -> Result<RunOutput> {
        self.per_doc(|doc| self.ner_doc(doc))
    }

    fn ner_doc(&self, doc: &Document) -> Result<DocOutput> {
        let cfg = &self.manifest.strategy;
        let index = DocumentIndex::new(&doc.text);
        let mut out = DocOutput {
            result: ExtractionResult::new(&doc.id),
            transcripts: Vec::new(),
            targets: 0,
            failed: 0,
        };
        let mut mentions = MentionSet::default();
        let targets: Vec<NerTarget> = if cfg.strategy == Strategy::AEiO {
            vec![NerTarget::All]
        } else {
            self.schema
                .entity_types
                .iter()
                .map(|et| NerTarget::Type(&et.canonical))
                .collect()
        };
        for target in targets {
            let plan = build_ner_plan(
                cfg,
                &self.schema,
                target,
                doc,
                &self.templates,
                self.manifest.backend.system_enabled,
            )?;
            let transcript = self.backend.run_plan(&plan, cfg.sampling);
            out.targets += 1;
            let label = plan.target.clone();
            match self.ner_reply(&transcript, target, doc, &index, &mut mentions, &mut out.result.failures) {
                Ok(()) => {}
                Err(reason) => {
                    log::warn!("{}: {reason}", transcript.id);
                    out.failed += 1;
                    out.result.failures.push(Failure { target: label, reason });
                }
            }
            out.transcripts.push(transcript);
        }
        out.result.entities = mentions.into_records();
        Ok(out)
    }

    /// Parse and ground one NER reply. `Err` marks the whole target failed;
    /// individual ungroundable strings are pushed to `failures`.
    fn ner_reply(
        &self,
        transcript: &Transcript,
        target: NerTarget<'_>,
        doc: &Document,
        index: &DocumentIndex<'_>,
        mentions: &mut MentionSet,
        failures: &mut Vec<Failure>,
    ) -> std::result::Result<(), String> {
        if let Some(reason) = transcript.failure() {
            return Err(reason);
        }
        let reply = transcript.final_reply().unwrap_or_default();
        let outcome = parse_reply(reply);
        if outcome.is_empty() {
            return Err("reply contains no table or list".into());
        }
        let typed: Vec<(String, String)> = match target {
            NerTarget::Type(t) => extract_entity_surfaces(&outcome, "entity")
                .into_iter()
                .map(|s| (s, t.to_string()))
                .collect(),
            NerTarget::All => {
                let mut typed = Vec::new();
                for (surface, label) in extract_typed_entities(&outcome) {
                    match self.schema.resolve_label(&label) {
                        Some(canonical) => typed.push((surface, canonical.to_string())),
                        None => failures.push(Failure {
                            target: ALL_TYPES.into(),
                            reason: format!("unknown type label {label:?} for {surface:?}"),
                        }),
                    }
                }
                typed
            }
        };
        for (surface, etype) in typed {
            let grounding = index.ground(&surface, &self.manifest.grounding);
            if grounding.spans.is_empty() {
                failures.push(Failure {
                    target: etype,
                    reason: format!("ungroundable surface {surface:?}"),
                });
                continue;
            }
            for span in grounding.spans {
                let m = doc
                    .mention(span.start, span.end, &etype)
                    .map_err(|e| e.to_string())?;
                mentions.add(m, &transcript.id);
            }
        }
        Ok(())
    }

    pub fn run_re(&self) -> Result<RunOutput> {
        self.per_doc(|doc| self.re_doc(doc))
    }

    fn re_doc(&self, doc: &Document) -> Result<DocOutput> {
        let cfg = &self.manifest.strategy;
        let index = DocumentIndex::new(&doc.text);
        let mut out = DocOutput {
            result: ExtractionResult::new(&doc.id),
            transcripts: Vec::new(),
            targets: 0,
            failed: 0,
        };
        for rtype in &self.schema.relation_types {
            let plan = build_re_plan(
                cfg,
                &self.schema,
                rtype,
                doc,
                &self.templates,
                self.manifest.backend.system_enabled,
            )?;
            let transcript = self.backend.run_plan(&plan, cfg.sampling);
            out.targets += 1;
            if let Some(reason) = transcript.failure() {
                out.failed += 1;
                out.result.failures.push(Failure {
                    target: rtype.name.clone(),
                    reason,
                });
                out.transcripts.push(transcript);
                continue;
            }
            let outcome = parse_reply(transcript.final_reply().unwrap_or_default());
            if outcome.tables.is_empty() {
                out.failed += 1;
                out.result.failures.push(Failure {
                    target: rtype.name.clone(),
                    reason: "reply contains no table".into(),
                });
                out.transcripts.push(transcript);
                continue;
            }
            'rows: for row in extract_relation_rows(&outcome, rtype.arity()) {
                let mut args = Vec::with_capacity(row.len());
                for (surface, role) in row.iter().zip(&rtype.roles) {
                    let Some(best) = index.ground(surface, &self.manifest.grounding).best() else {
                        out.result.failures.push(Failure {
                            target: rtype.name.clone(),
                            reason: format!("ungroundable constituent {surface:?} in ({})", row.join(", ")),
                        });
                        continue 'rows;
                    };
                    let m = doc.mention(best.start, best.end, role)?;
                    args.push(ArgRecord {
                        start: m.start,
                        end: m.end,
                        etype: m.etype,
                        surface: m.surface,
                    });
                }
                let record = RelationRecord {
                    rtype: rtype.name.clone(),
                    args,
                    source: transcript.id.clone(),
                };
                if !out
                    .result
                    .relations
                    .iter()
                    .any(|r| r.rtype == record.rtype && r.args == record.args)
                {
                    out.result.relations.push(record);
                }
            }
            out.transcripts.push(transcript);
        }
        out.result.relations.sort_by(|a, b| {
            let key = |r: &RelationRecord| (r.rtype.clone(), r.args.iter().map(|a| (a.start, a.end)).collect::<Vec<_>>());
            key(a).cmp(&key(b))
        });
        Ok(out)
    }

    /// Second pass over NER results: documents with type conflicts get one
    /// resolution conversation built from their per-type answers. Only
    /// members of conflict groups can be removed; nothing is added.
    pub fn run_cr(&self, prior: &[ExtractionResult], transcripts: &[Transcript]) -> Result<RunOutput> {
        let by_id: BTreeMap<&str, &Transcript> = transcripts.iter().map(|t| (t.id.as_str(), t)).collect();
        let docs: BTreeMap<&str, &Document> = self.corpus.documents().map(|d| (d.id.as_str(), d)).collect();
        let outputs = self.pool.install(|| {
            prior
                .par_iter()
                .map(|r| {
                    let doc = docs.get(r.doc_id.as_str()).ok_or_else(|| Error::InvalidDocument {
                        doc_id: r.doc_id.clone(),
                        message: "not in the corpus".into(),
                    })?;
                    self.cr_doc(r, doc, &by_id)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(merge(outputs))
    }

    fn cr_doc(&self, prior: &ExtractionResult, doc: &Document, by_id: &BTreeMap<&str, &Transcript>) -> Result<DocOutput> {
        let mut out = DocOutput {
            result: prior.clone(),
            transcripts: Vec::new(),
            targets: 0,
            failed: 0,
        };
        let groups = detect_conflicts(&prior.entity_mentions());
        if groups.is_empty() {
            return Ok(out);
        }
        out.targets = 1;
        let fail = |out: &mut DocOutput, reason: String| {
            log::warn!("{}: {reason}", transcript_id(&doc.id, CR_TARGET));
            out.failed += 1;
            out.result.failures.push(Failure {
                target: CR_TARGET.into(),
                reason,
            });
        };

        let conflicting: BTreeSet<&str> = groups.iter().flat_map(|g| g.types()).collect();
        let mut answers = Vec::new();
        for et in &self.schema.entity_types {
            if !conflicting.contains(et.canonical.as_str()) {
                continue;
            }
            let reply = by_id
                .get(transcript_id(&doc.id, &et.canonical).as_str())
                .and_then(|t| t.final_reply());
            match reply {
                Some(r) => answers.push((et.canonical.clone(), r.to_string())),
                None => {
                    fail(&mut out, format!("no completed {} transcript to resolve from", et.canonical));
                    return Ok(out);
                }
            }
        }
        let plan = build_cr_plan(
            &answers,
            &self.schema,
            doc,
            &self.templates,
            self.manifest.backend.system_enabled,
        )?;
        let transcript = self.backend.run_plan(&plan, self.manifest.strategy.sampling);
        if let Some(reason) = transcript.failure() {
            fail(&mut out, reason);
            out.transcripts.push(transcript);
            return Ok(out);
        }
        let outcome = parse_reply(transcript.final_reply().unwrap_or_default());
        let verdicts: Vec<((usize, usize), String)> = {
            let index = DocumentIndex::new(&doc.text);
            let mut v = Vec::new();
            for (surface, label) in extract_typed_entities(&outcome) {
                let Some(canonical) = self.schema.resolve_label(&label) else {
                    continue;
                };
                for span in index.ground(&surface, &self.manifest.grounding).spans {
                    v.push(((span.start, span.end), canonical.to_string()));
                }
            }
            v
        };
        if verdicts.is_empty() {
            fail(&mut out, "conflict-resolution reply has no usable verdicts".into());
            out.transcripts.push(transcript);
            return Ok(out);
        }
        let mut removed: BTreeSet<(usize, usize, String)> = BTreeSet::new();
        for group in &groups {
            match apply_verdicts(group, &verdicts) {
                Some(drop) => removed.extend(drop),
                None => out.result.failures.push(Failure {
                    target: CR_TARGET.into(),
                    reason: format!(
                        "no verdict decides the conflict over {}..{}; kept all members",
                        group.extent().0,
                        group.extent().1
                    ),
                }),
            }
        }
        out.result
            .entities
            .retain(|e| !removed.contains(&(e.start, e.end, e.etype.clone())));
        out.transcripts.push(transcript);
        Ok(out)
    }

    /// Run the configured task and enforce the failure budget. Outputs are
    /// returned even when the budget is exceeded, through the error path of
    /// [`write_run`].
    pub fn run(&self) -> Result<RunOutput> {
        match self.manifest.task {
            Task::Ner => {
                let mut ner = self.run_ner()?;
                if self.manifest.strategy.cr_pass {
                    let cr = self.run_cr(&ner.results, &ner.transcripts)?;
                    ner.results = cr.results;
                    ner.transcripts.extend(cr.transcripts);
                }
                Ok(ner)
            }
            Task::Re => self.run_re(),
        }
    }
}

/// Members to drop from `group`, or `None` when no verdict overlapping the
/// group names one of its member types. A member survives when some verdict
/// overlapping it carries its type.
fn apply_verdicts(group: &ConflictGroup, verdicts: &[((usize, usize), String)]) -> Option<Vec<(usize, usize, String)>> {
    let member_types = group.types();
    let relevant: Vec<&((usize, usize), String)> = verdicts
        .iter()
        .filter(|(span, t)| member_types.contains(t.as_str()) && group.members.iter().any(|m| span_overlap(*span, m.span()) > 0))
        .collect();
    if relevant.is_empty() {
        return None;
    }
    let drop: Vec<(usize, usize, String)> = group
        .members
        .iter()
        .filter(|m| {
            !relevant
                .iter()
                .any(|(span, t)| *t == m.etype && span_overlap(*span, m.span()) > 0)
        })
        .map(|m| (m.start, m.end, m.etype.clone()))
        .collect();
    if drop.len() == group.members.len() {
        return None;
    }
    Some(drop)
}

#[derive(Serialize)]
struct FailureLine<'a> {
    doc_id: &'a str,
    target: &'a str,
    reason: &'a str,
}

/// Write the run directory: transcripts, predictions, failures and the
/// manifest snapshot. Fails with [`Error::FailureBudget`] after writing when
/// too many targets failed.
pub fn write_run(manifest: &RunManifest, output: &RunOutput) -> Result<()> {
    let dir = &manifest.outdir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_transcripts(&dir.join("transcripts.jsonl"), &output.transcripts)?;
    write_results(&dir.join("predictions.jsonl"), &output.results)?;
    let mut failures = String::new();
    for r in &output.results {
        for f in &r.failures {
            failures.push_str(&serde_json::to_string(&FailureLine {
                doc_id: &r.doc_id,
                target: &f.target,
                reason: &f.reason,
            })?);
            failures.push('\n');
        }
    }
    let path = dir.join("failures.jsonl");
    fs::write(&path, failures).map_err(|e| Error::io(path, e))?;
    let mut snapshot = serde_json::to_string_pretty(manifest)?;
    snapshot.push('\n');
    let path = dir.join("manifest.json");
    fs::write(&path, snapshot).map_err(|e| Error::io(path, e))?;
    if output.failure_rate() > manifest.failure_budget {
        return Err(Error::FailureBudget {
            failed: output.failed_targets,
            total: output.targets,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatRequest, RequestLabel, Transport, TransportError};
    use crate::prompting::StageName;
    use crate::schema::{EntityType, RelationType};
    use std::sync::Mutex;

    /// Answers by (target, stage); records every label it sees.
    struct Scripted {
        replies: BTreeMap<(String, StageName), String>,
        seen: Mutex<Vec<RequestLabel>>,
    }

    impl Scripted {
        fn new(replies: &[(&str, StageName, &str)]) -> Self {
            Scripted {
                replies: replies
                    .iter()
                    .map(|(t, s, r)| ((t.to_string(), *s), r.to_string()))
                    .collect(),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl Transport for Scripted {
        fn send(&self, _: &ChatRequest, label: &RequestLabel) -> std::result::Result<String, TransportError> {
            self.seen.lock().unwrap().push(label.clone());
            self.replies
                .get(&(label.target.clone(), label.stage))
                .cloned()
                .ok_or_else(|| TransportError::Permanent(format!("no script for {label:?}")))
        }
    }

    fn schema() -> TaskSchema {
        TaskSchema::new(
            vec![
                EntityType::new("PER", "person"),
                EntityType::new("LOC", "location"),
                EntityType::new("ORG", "organization"),
            ],
            vec![RelationType {
                name: "work-for".into(),
                roles: vec!["PER".into(), "ORG".into()],
                prompt_text: "Identify who works for which {tail_type}.".into(),
            }],
        )
        .unwrap()
    }

    fn corpus(texts: &[&str]) -> Corpus {
        let lines: String = texts
            .iter()
            .enumerate()
            .map(|(i, t)| serde_json::json!({"id": format!("d{i}"), "text": t}).to_string() + "\n")
            .collect();
        crate::schema::parse_corpus(lines.as_bytes(), Path::new("mem")).unwrap()
    }

    fn backend(t: Scripted) -> Backend {
        Backend::with_transport(BackendProfile::default(), Box::new(t), None)
    }

    fn manifest(task: Task, strategy: Strategy) -> RunManifest {
        let mut m = RunManifest::new(task, "c".into(), "s".into(), BackendProfile::default(), "o".into());
        m.strategy.strategy = strategy;
        m.jobs = 2;
        m
    }

    const NONE_TABLE: &str = "| Entity |\n|---|\n| None |";

    #[test]
    fn gno_ner_counts_and_mentions() {
        let s = Scripted::new(&[
            ("PER", StageName::Identify, "John Smith is a person."),
            ("PER", StageName::Cleanup, "John Smith"),
            ("PER", StageName::Organize, "| Entity |\n|---|\n| John Smith |\n| John Smith |"),
            ("LOC", StageName::Identify, "Boston"),
            ("LOC", StageName::Cleanup, "Boston"),
            ("LOC", StageName::Organize, "| Entity |\n|---|\n| Boston |\n| Mars |"),
            ("ORG", StageName::Identify, "none"),
            ("ORG", StageName::Cleanup, "none"),
            ("ORG", StageName::Organize, NONE_TABLE),
        ]);
        let b = backend(s);
        let p = Pipeline::from_parts(
            manifest(Task::Ner, Strategy::GnO),
            schema(),
            corpus(&["John Smith flew to Boston.", "Boston again."]),
            &b,
        )
        .unwrap();
        let out = p.run_ner().unwrap();
        assert_eq!(b.counters().conversations, 6);
        assert_eq!(b.counters().requests, 18);
        assert_eq!(out.transcripts.len(), 6);
        assert_eq!(out.failed_targets, 0);
        let d0 = &out.results[0];
        let spans: Vec<(usize, usize, &str)> = d0.entities.iter().map(|e| (e.start, e.end, e.etype.as_str())).collect();
        assert_eq!(spans, vec![(0, 10, "PER"), (19, 25, "LOC")]);
        assert_eq!(d0.entities[0].source, "d0::PER");
        assert!(d0.failures.iter().any(|f| f.reason.contains("Mars")));
        let d1 = &out.results[1];
        assert_eq!(d1.entities.len(), 1);
        assert_eq!(d1.entities[0].surface, "Boston");
    }

    #[test]
    fn unparsable_reply_fails_only_its_target() {
        let s = Scripted::new(&[
            ("PER", StageName::Identify, "x"),
            ("PER", StageName::Cleanup, "x"),
            ("PER", StageName::Organize, "I could not find anything worth mentioning."),
            ("LOC", StageName::Identify, "x"),
            ("LOC", StageName::Cleanup, "x"),
            ("LOC", StageName::Organize, "| Entity |\n|---|\n| Paris |"),
            ("ORG", StageName::Identify, "x"),
            ("ORG", StageName::Cleanup, "x"),
            ("ORG", StageName::Organize, NONE_TABLE),
        ]);
        let b = backend(s);
        let p = Pipeline::from_parts(manifest(Task::Ner, Strategy::GnO), schema(), corpus(&["Paris."]), &b).unwrap();
        let out = p.run_ner().unwrap();
        assert_eq!(out.failed_targets, 1);
        assert_eq!(out.results[0].failures[0].target, "PER");
        assert_eq!(out.results[0].entities.len(), 1);
    }

    #[test]
    fn aeio_is_one_conversation_per_doc() {
        let s = Scripted::new(&[
            ("ALL", StageName::Identify, "x"),
            ("ALL", StageName::Cleanup, "x"),
            (
                "ALL",
                StageName::Organize,
                "| Entity | Type |\n|---|---|\n| Paris | location |\n| Acme | company |",
            ),
        ]);
        let b = backend(s);
        let p = Pipeline::from_parts(
            manifest(Task::Ner, Strategy::AEiO),
            schema(),
            corpus(&["Paris hosts Acme.", "Paris."]),
            &b,
        )
        .unwrap();
        let out = p.run_ner().unwrap();
        assert_eq!(b.counters().conversations, 2);
        assert_eq!(out.results[0].entities.len(), 1);
        assert_eq!(out.results[0].entities[0].etype, "LOC");
        assert!(out.results[0].failures.iter().any(|f| f.reason.contains("company")));
    }

    #[test]
    fn re_rows_are_grounded_and_filtered() {
        let s = Scripted::new(&[
            ("work-for", StageName::Identify, "John works for Acme Corp."),
            (
                "work-for",
                StageName::Organize,
                "| person | organization | Relation Present |\n|---|---|---|\n| John | Acme Corp | yes |\n| Mary | Acme Corp | no |\n| John | Globex | yes |",
            ),
        ]);
        let b = backend(s);
        let p = Pipeline::from_parts(
            manifest(Task::Re, Strategy::GnO),
            schema(),
            corpus(&["John and Mary joined Acme Corp."]),
            &b,
        )
        .unwrap();
        let out = p.run_re().unwrap();
        let rels = &out.results[0].relations;
        assert_eq!(rels.len(), 1);
        assert_eq!(rels[0].args[0].surface, "John");
        assert_eq!(rels[0].args[1].surface, "Acme Corp");
        assert_eq!(rels[0].args[1].etype, "ORG");
        assert!(out.results[0].failures.iter().any(|f| f.reason.contains("Globex")));
        assert_eq!(b.counters().requests, 2);
    }

    fn conflict_run(cr_reply: &str) -> (RunOutput, RunOutput, usize) {
        let s = Scripted::new(&[
            ("PER", StageName::Identify, "x"),
            ("PER", StageName::Cleanup, "x"),
            ("PER", StageName::Organize, "| Entity |\n|---|\n| Washington |"),
            ("LOC", StageName::Identify, "x"),
            ("LOC", StageName::Cleanup, "x"),
            ("LOC", StageName::Organize, "| Entity |\n|---|\n| Washington |\n| Ohio |"),
            ("ORG", StageName::Identify, "x"),
            ("ORG", StageName::Cleanup, "x"),
            ("ORG", StageName::Organize, NONE_TABLE),
            ("CR", StageName::CrIdentify, "Washington is a place here."),
            ("CR", StageName::CrOrganize, cr_reply),
        ]);
        let b = backend(s);
        let p = Pipeline::from_parts(
            manifest(Task::Ner, Strategy::GnO),
            schema(),
            corpus(&["He moved from Washington to Ohio.", "Ohio."]),
            &b,
        )
        .unwrap();
        let ner = p.run_ner().unwrap();
        let before = b.counters().conversations;
        let cr = p.run_cr(&ner.results, &ner.transcripts).unwrap();
        (ner, cr, b.counters().conversations - before)
    }

    #[test]
    fn cr_removes_losing_member() {
        let (ner, cr, extra) = conflict_run("| Entity | Type |\n|---|---|\n| Washington | location |");
        assert_eq!(extra, 1, "only the conflicted document gets a CR conversation");
        assert_eq!(ner.results[0].entities.len(), 3);
        let kept: Vec<(&str, &str)> = cr.results[0]
            .entities
            .iter()
            .map(|e| (e.surface.as_str(), e.etype.as_str()))
            .collect();
        assert_eq!(kept, vec![("Washington", "LOC"), ("Ohio", "LOC")]);
        assert_eq!(cr.results[1], ner.results[1]);
    }

    #[test]
    fn cr_unparsable_keeps_originals() {
        let (ner, cr, _) = conflict_run("I am not sure.");
        assert_eq!(cr.results[0].entities, ner.results[0].entities);
        assert!(cr.results[0].failures.iter().any(|f| f.target == "CR"));
        assert_eq!(cr.failed_targets, 1);
    }

    #[test]
    fn cr_verdict_outside_group_types_is_ignored() {
        let (ner, cr, _) = conflict_run("| Entity | Type |\n|---|---|\n| Washington | organization |");
        assert_eq!(cr.results[0].entities, ner.results[0].entities);
    }

    #[test]
    fn predictions_use_document_text() {
        let c = corpus(&["John Smith flew."]);
        let mut r = ExtractionResult::new("d0");
        r.entities.push(EntityRecord {
            start: 0,
            end: 4,
            etype: "PER".into(),
            surface: String::new(),
            source: String::new(),
        });
        let p = predictions_from_results(&[r.clone()], &c).unwrap();
        assert_eq!(p.entities["d0"][0].surface, "John");
        r.entities[0].end = 99;
        assert!(predictions_from_results(&[r.clone()], &c).is_err());
        r.doc_id = "zz".into();
        assert!(predictions_from_results(&[r], &c).is_err());
    }

    #[test]
    fn failure_budget_is_enforced_after_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(Task::Ner, Strategy::GnO);
        m.outdir = dir.path().join("out");
        let output = RunOutput {
            results: vec![ExtractionResult::new("d0")],
            transcripts: Vec::new(),
            targets: 4,
            failed_targets: 3,
        };
        assert!(matches!(write_run(&m, &output), Err(Error::FailureBudget { failed: 3, total: 4 })));
        for f in ["transcripts.jsonl", "predictions.jsonl", "failures.jsonl", "manifest.json"] {
            assert!(m.outdir.join(f).exists(), "{f}");
        }
        let ok = RunOutput {
            failed_targets: 2,
            ..output
        };
        write_run(&m, &ok).unwrap();
        assert_eq!(RunManifest::load(&m.outdir.join("manifest.json")).unwrap(), m);
    }
}
