//! Domain types shared by every stage, plus the corpus and schema file formats.
//!
//! All spans are character offsets (Unicode scalar values) into
//! [`Document::text`], end-exclusive.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte offset of every char boundary in `text`, including the end.
pub fn char_offsets(text: &str) -> Vec<usize> {
    let mut offsets: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    offsets.push(text.len());
    offsets
}

/// Slice `text` by char positions; `None` when out of range or empty-inverted.
pub fn slice_chars(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut iter = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let begin = iter.nth(start)?;
    let finish = if end == start {
        begin
    } else {
        iter.nth(end - start - 1)?
    };
    Some(&text[begin..finish])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let doc = Document {
            id: id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidDocument {
                doc_id: String::new(),
                message: "empty id".into(),
            });
        }
        if self.text.is_empty() {
            return Err(self.invalid("empty text"));
        }
        Ok(())
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn slice(&self, start: usize, end: usize) -> Option<&str> {
        slice_chars(&self.text, start, end)
    }

    /// Build a grounded mention over `[start, end)`, checking bounds.
    pub fn mention(&self, start: usize, end: usize, etype: &str) -> Result<EntityMention> {
        if start >= end {
            return Err(self.invalid(format!("empty or inverted span ({start}, {end})")));
        }
        let surface = self.slice(start, end).ok_or_else(|| {
            self.invalid(format!(
                "span ({start}, {end}) exceeds text length {}",
                self.char_len()
            ))
        })?;
        Ok(EntityMention {
            doc_id: self.id.clone(),
            start,
            end,
            etype: etype.to_string(),
            surface: surface.to_string(),
        })
    }

    fn invalid(&self, message: impl Into<String>) -> Error {
        Error::InvalidDocument {
            doc_id: self.id.clone(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityType {
    pub canonical: String,
    pub rephrased: String,
}

impl EntityType {
    pub fn new(canonical: impl Into<String>, rephrased: impl Into<String>) -> Self {
        EntityType {
            canonical: canonical.into(),
            rephrased: rephrased.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub name: String,
    /// Canonical entity type of each role, in argument order.
    pub roles: Vec<String>,
    /// Identification instruction used in the first RE turn.
    pub prompt_text: String,
}

impl RelationType {
    pub fn arity(&self) -> usize {
        self.roles.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskSchema {
    pub entity_types: Vec<EntityType>,
    #[serde(default)]
    pub relation_types: Vec<RelationType>,
}

#[derive(Deserialize)]
struct SchemaFile {
    entity_types: Vec<EntityType>,
    #[serde(default)]
    relation_types: Vec<RelationTypeFile>,
}

#[derive(Deserialize)]
struct RelationTypeFile {
    name: String,
    roles: Vec<String>,
    #[serde(default)]
    prompt_file: Option<PathBuf>,
    #[serde(default)]
    prompt_text: Option<String>,
}

impl TaskSchema {
    pub fn new(entity_types: Vec<EntityType>, relation_types: Vec<RelationType>) -> Result<Self> {
        let schema = TaskSchema {
            entity_types,
            relation_types,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Load a schema file; relative `prompt_file` paths resolve against the
    /// schema file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&raw, base)
    }

    pub fn from_json(raw: &str, base_dir: &Path) -> Result<Self> {
        let file: SchemaFile = serde_json::from_str(raw)?;
        let mut relation_types = Vec::with_capacity(file.relation_types.len());
        for rel in file.relation_types {
            let prompt_text = match (rel.prompt_text, rel.prompt_file) {
                (Some(text), _) => text,
                (None, Some(file)) => {
                    let full = base_dir.join(&file);
                    fs::read_to_string(&full).map_err(|e| Error::io(&full, e))?
                }
                (None, None) => {
                    return Err(Error::InvalidSchema(format!(
                        "relation {:?} has neither prompt_file nor prompt_text",
                        rel.name
                    )))
                }
            };
            relation_types.push(RelationType {
                name: rel.name,
                roles: rel.roles,
                prompt_text: prompt_text.trim().to_string(),
            });
        }
        TaskSchema::new(file.entity_types, relation_types)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for et in &self.entity_types {
            if et.canonical.is_empty() || et.rephrased.is_empty() {
                return Err(Error::InvalidSchema("empty entity type name".into()));
            }
            if !seen.insert(et.canonical.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate entity type {:?}",
                    et.canonical
                )));
            }
        }
        let mut rels = HashSet::new();
        for rel in &self.relation_types {
            if !rels.insert(rel.name.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate relation type {:?}",
                    rel.name
                )));
            }
            if rel.arity() < 2 {
                return Err(Error::InvalidSchema(format!(
                    "relation {:?} needs at least two roles",
                    rel.name
                )));
            }
            if rel.prompt_text.trim().is_empty() {
                return Err(Error::InvalidSchema(format!(
                    "relation {:?} has an empty prompt",
                    rel.name
                )));
            }
            for role in &rel.roles {
                if !seen.contains(role.as_str()) {
                    return Err(Error::InvalidSchema(format!(
                        "relation {:?} references unknown entity type {role:?}",
                        rel.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entity_type(&self, canonical: &str) -> Result<&EntityType> {
        self.entity_types
            .iter()
            .find(|et| et.canonical == canonical)
            .ok_or_else(|| Error::UnknownEntityType(canonical.to_string()))
    }

    /// Display name used in prompts for a canonical type.
    pub fn rephrase(&self, canonical: &str) -> Result<&str> {
        self.entity_type(canonical).map(|et| et.rephrased.as_str())
    }

    pub fn relation_type(&self, name: &str) -> Result<&RelationType> {
        self.relation_types
            .iter()
            .find(|rt| rt.name == name)
            .ok_or_else(|| Error::UnknownRelationType(name.to_string()))
    }

    /// Map a model-emitted type label back to a canonical name. Accepts the
    /// canonical or rephrased form, case-insensitively.
    pub fn resolve_label(&self, label: &str) -> Option<&str> {
        let needle = label.trim().to_lowercase();
        self.entity_types
            .iter()
            .find(|et| et.canonical.to_lowercase() == needle || et.rephrased.to_lowercase() == needle)
            .map(|et| et.canonical.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
    pub surface: String,
}

impl EntityMention {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    /// Number of shared characters with `other`.
    pub fn overlap(&self, other: &EntityMention) -> usize {
        span_overlap(self.span(), other.span())
    }
}

pub fn span_overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationMention {
    pub doc_id: String,
    #[serde(rename = "type")]
    pub rtype: String,
    #[serde(rename = "args")]
    pub constituents: Vec<EntityMention>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "gno")]
    GnO,
    #[serde(rename = "onestep")]
    OneStep,
    #[serde(rename = "aeio")]
    AEiO,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gno" | "g&o" => Ok(Strategy::GnO),
            "onestep" | "one-step" => Ok(Strategy::OneStep),
            "aeio" => Ok(Strategy::AEiO),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::GnO => "gno",
            Strategy::OneStep => "onestep",
            Strategy::AEiO => "aeio",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Re,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ner" => Ok(Task::Ner),
            "re" => Ok(Task::Re),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub cot: bool,
    pub cleanup: bool,
    pub cr_pass: bool,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            strategy: Strategy::GnO,
            cot: true,
            cleanup: true,
            cr_pass: false,
            sampling: Sampling::default(),
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self, task: Task, schema: &TaskSchema) -> Result<()> {
        if self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.sampling.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if task == Task::Re && self.strategy == Strategy::AEiO {
            return Err(Error::Config("AEiO is only defined for NER".into()));
        }
        if task == Task::Ner && self.cr_pass && schema.entity_types.len() < 2 {
            return Err(Error::Config(
                "conflict resolution needs at least two entity types".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReMatching {
    #[default]
    Strict,
    Lenient,
}

impl FromStr for ReMatching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(ReMatching::Strict),
            "lenient" => Ok(ReMatching::Lenient),
            other => Err(Error::Config(format!("unknown RE policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetPolicy {
    pub re_matching: ReMatching,
}

/// A document with its gold annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedDocument {
    pub document: Document,
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationMention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub docs: Vec<AnnotatedDocument>,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    #[serde(default)]
    entities: Vec<GoldEntityLine>,
    #[serde(default)]
    relations: Vec<GoldRelationLine>,
}

#[derive(Serialize, Deserialize)]
struct GoldEntityLine {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    etype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    surface: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct GoldRelationLine {
    #[serde(rename = "type")]
    rtype: String,
    args: Vec<usize>,
}

/// Read a corpus JSONL file.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), path)
}

/// Parse corpus JSONL from any reader; `origin` only labels error messages.
pub fn parse_corpus(reader: impl BufRead, origin: &Path) -> Result<Corpus> {
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let doc = Document {
            id: record.id,
            text: record.text,
            meta: record.meta,
        };
        doc.validate()?;
        if !ids.insert(doc.id.clone()) {
            return Err(doc.invalid("duplicate document id"));
        }
        let mut entities = Vec::with_capacity(record.entities.len());
        for ent in &record.entities {
            let mention = doc.mention(ent.start, ent.end, &ent.etype)?;
            if let Some(surface) = &ent.surface {
                if surface != &mention.surface {
                    return Err(doc.invalid(format!(
                        "surface {surface:?} does not match text ({}, {}) = {:?}",
                        ent.start, ent.end, mention.surface
                    )));
                }
            }
            entities.push(mention);
        }
        let mut relations = Vec::with_capacity(record.relations.len());
        for rel in &record.relations {
            let mut constituents = Vec::with_capacity(rel.args.len());
            for &arg in &rel.args {
                let ent = entities.get(arg).ok_or_else(|| {
                    doc.invalid(format!(
                        "relation {:?} references mention {arg} of {}",
                        rel.rtype,
                        entities.len()
                    ))
                })?;
                constituents.push(ent.clone());
            }
            if constituents.len() < 2 {
                return Err(doc.invalid(format!("relation {:?} has fewer than two args", rel.rtype)));
            }
            relations.push(RelationMention {
                doc_id: doc.id.clone(),
                rtype: rel.rtype.clone(),
                constituents,
            });
        }
        docs.push(AnnotatedDocument {
            document: doc,
            entities,
            relations,
        });
    }
    Ok(Corpus { docs })
}

impl Corpus {
    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter().map(|d| &d.document)
    }

    pub fn get(&self, doc_id: &str) -> Option<&AnnotatedDocument> {
        self.docs.iter().find(|d| d.document.id == doc_id)
    }

    /// Serialize back to corpus JSONL. Relation constituents missing from the
    /// entity pool are appended to it.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ad in &self.docs {
            let mut pool: Vec<&EntityMention> = ad.entities.iter().collect();
            let mut relations = Vec::with_capacity(ad.relations.len());
            for rel in &ad.relations {
                let args = rel
                    .constituents
                    .iter()
                    .map(|c| match pool.iter().position(|p| *p == c) {
                        Some(i) => i,
                        None => {
                            pool.push(c);
                            pool.len() - 1
                        }
                    })
                    .collect();
                relations.push(GoldRelationLine {
                    rtype: rel.rtype.clone(),
                    args,
                });
            }
            let line = CorpusLine {
                id: ad.document.id.clone(),
                text: ad.document.text.clone(),
                meta: ad.document.meta.clone(),
                entities: pool
                    .iter()
                    .map(|m| GoldEntityLine {
                        start: m.start,
                        end: m.end,
                        etype: m.etype.clone(),
                        surface: None,
                    })
                    .collect(),
                relations,
            };
            out.push_str(&serde_json::to_string(&line).expect("corpus line serializes"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Corpus> {
        parse_corpus(s.as_bytes(), Path::new("mem.jsonl"))
    }

    #[test]
    fn loads_single_doc_with_surface_from_slice() {
        let corpus = parse(
            r#"{"id":"d1","text":"John lives in Paris","entities":[{"start":0,"end":4,"type":"PER"}]}"#,
        )
        .unwrap();
        assert_eq!(corpus.docs.len(), 1);
        let gold = &corpus.docs[0].entities;
        assert_eq!(gold.len(), 1);
        assert_eq!(gold[0].surface, "John");
        assert_eq!(gold[0].doc_id, "d1");
    }

    #[test]
    fn out_of_range_span_names_the_document() {
        let err = parse(r#"{"id":"d1","text":"John","entities":[{"start":0,"end":9,"type":"PER"}]}"#)
            .unwrap_err();
        assert!(err.to_string().contains("d1"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse("").unwrap().docs.is_empty());
    }

    #[test]
    fn parse_error_carries_line_number() {
        let err = parse("{\"id\":\"a\",\"text\":\"x\"}\n{nope").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mismatched_surface_is_rejected() {
        let err = parse(
            r#"{"id":"d1","text":"John lives","entities":[{"start":0,"end":4,"type":"PER","surface":"Jon"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidDocument { .. }));
    }

    #[test]
    fn char_offsets_handle_multibyte_text() {
        let corpus = parse(
            r#"{"id":"d","text":"Zoë met José","entities":[{"start":8,"end":12,"type":"PER"}]}"#,
        )
        .unwrap();
        assert_eq!(corpus.docs[0].entities[0].surface, "José");
    }

    #[test]
    fn relations_index_into_mention_pool() {
        let corpus = parse(
            r#"{"id":"d","text":"Acme Corp is in Boston","entities":[{"start":0,"end":9,"type":"ORG"},{"start":16,"end":22,"type":"LOC"}],"relations":[{"type":"organization-based-in","args":[0,1]}]}"#,
        )
        .unwrap();
        let rel = &corpus.docs[0].relations[0];
        assert_eq!(rel.constituents[1].surface, "Boston");
        let err = parse(
            r#"{"id":"d","text":"Acme","entities":[{"start":0,"end":4,"type":"ORG"}],"relations":[{"type":"r","args":[0,3]}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("mention 3"));
    }

    #[test]
    fn round_trip_serialization() {
        let src = concat!(
            r#"{"id":"d1","text":"Acme Corp is in Boston","entities":[{"start":0,"end":9,"type":"ORG"},{"start":16,"end":22,"type":"LOC"}],"relations":[{"type":"obi","args":[0,1]}]}"#,
            "\n",
            r#"{"id":"d2","text":"Nothing here"}"#,
            "\n"
        );
        let corpus = parse(src).unwrap();
        let again = parse(&corpus.to_jsonl()).unwrap();
        assert_eq!(corpus, again);
    }

    fn schema() -> TaskSchema {
        TaskSchema::new(
            vec![
                EntityType::new("PER", "person"),
                EntityType::new("CN", "Material Name"),
                EntityType::new("LOC", "LOC"),
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn rephrase_lookup() {
        let s = schema();
        assert_eq!(s.rephrase("PER").unwrap(), "person");
        assert_eq!(s.rephrase("CN").unwrap(), "Material Name");
        assert_eq!(s.rephrase("LOC").unwrap(), "LOC");
        assert!(matches!(s.rephrase("ORG"), Err(Error::UnknownEntityType(_))));
    }

    #[test]
    fn resolve_label_accepts_both_spellings() {
        let s = schema();
        assert_eq!(s.resolve_label(" Person "), Some("PER"));
        assert_eq!(s.resolve_label("per"), Some("PER"));
        assert_eq!(s.resolve_label("material name"), Some("CN"));
        assert_eq!(s.resolve_label("animal"), None);
    }

    #[test]
    fn duplicate_canonical_names_rejected() {
        let err = TaskSchema::new(
            vec![EntityType::new("PER", "person"), EntityType::new("PER", "human")],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidSchema(_)));
    }

    #[test]
    fn schema_file_reads_prompt_files_relative_to_schema() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("obi.txt"), "Find org-based-in pairs.\n").unwrap();
        let raw = r#"{"entity_types":[{"canonical":"ORG","rephrased":"organization"},{"canonical":"LOC","rephrased":"location"}],
                      "relation_types":[{"name":"organization-based-in","roles":["ORG","LOC"],"prompt_file":"obi.txt"}]}"#;
        let path = dir.path().join("schema.json");
        fs::write(&path, raw).unwrap();
        let schema = TaskSchema::load(&path).unwrap();
        let rel = schema.relation_type("organization-based-in").unwrap();
        assert_eq!(rel.prompt_text, "Find org-based-in pairs.");
        assert_eq!(rel.arity(), 2);
    }

    #[test]
    fn slice_chars_bounds() {
        assert_eq!(slice_chars("abc", 0, 3), Some("abc"));
        assert_eq!(slice_chars("abc", 1, 1), Some(""));
        assert_eq!(slice_chars("abc", 3, 3), Some(""));
        assert_eq!(slice_chars("abc", 2, 4), None);
        assert_eq!(slice_chars("héllo", 1, 3), Some("él"));
    }

    #[test]
    fn strategy_config_rejects_aeio_for_re() {
        let cfg = StrategyConfig {
            strategy: Strategy::AEiO,
            ..StrategyConfig::default()
        };
        assert!(cfg.validate(Task::Re, &schema()).is_err());
        assert!(cfg.validate(Task::Ner, &schema()).is_ok());
    }
}
