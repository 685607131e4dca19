//! Conversation plans for each strategy, rendered from slot templates.
//!
//! Wording lives in template files (see `templates/` in this crate); this
//! module only decides which templates run, in which order, with which slot
//! values.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Document, RelationType, Strategy, StrategyConfig, TaskSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Identify,
    Cleanup,
    Organize,
    CrIdentify,
    CrOrganize,
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageName::Identify => "identify",
            StageName::Cleanup => "cleanup",
            StageName::Organize => "organize",
            StageName::CrIdentify => "cr_identify",
            StageName::CrOrganize => "cr_organize",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: StageName,
    pub message: Message,
}

/// Target label for AEiO plans.
pub const ALL_TYPES: &str = "ALL";
/// Target label for conflict-resolution plans.
pub const CR_TARGET: &str = "CR";
/// Header of the RE presence column.
pub const PRESENCE_COLUMN: &str = "Relation Present";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationPlan {
    pub doc_id: String,
    /// Canonical entity type, [`ALL_TYPES`], a relation name or [`CR_TARGET`].
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<Message>,
    pub stages: Vec<Stage>,
}

impl ConversationPlan {
    pub fn stage_names(&self) -> Vec<StageName> {
        self.stages.iter().map(|s| s.name).collect()
    }

    pub fn stage(&self, name: StageName) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name == name)
    }
}

const DEFAULT_TEMPLATES: &[(&str, &str)] = &[
    ("system", include_str!("../templates/system.txt")),
    ("cot", include_str!("../templates/cot.txt")),
    ("gno/identify", include_str!("../templates/gno/identify.txt")),
    ("gno/cleanup", include_str!("../templates/gno/cleanup.txt")),
    ("gno/organize", include_str!("../templates/gno/organize.txt")),
    ("onestep/identify", include_str!("../templates/onestep/identify.txt")),
    ("onestep/cleanup", include_str!("../templates/onestep/cleanup.txt")),
    ("aeio/identify", include_str!("../templates/aeio/identify.txt")),
    ("aeio/cleanup", include_str!("../templates/aeio/cleanup.txt")),
    ("aeio/organize", include_str!("../templates/aeio/organize.txt")),
    ("cr/identify", include_str!("../templates/cr/identify.txt")),
    ("cr/organize", include_str!("../templates/cr/organize.txt")),
    ("re-gno/identify", include_str!("../templates/re-gno/identify.txt")),
    ("re-gno/organize", include_str!("../templates/re-gno/organize.txt")),
    ("re-onestep/identify", include_str!("../templates/re-onestep/identify.txt")),
    ("re-prompt/base", include_str!("../templates/re-prompt/base.txt")),
    ("re-prompt/meta", include_str!("../templates/re-prompt/meta.txt")),
];

/// Named templates with `{slot}` placeholders. `{{` and `}}` render as
/// literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: DEFAULT_TEMPLATES
                .iter()
                .map(|(k, v)| (k.to_string(), v.trim_end().to_string()))
                .collect(),
        }
    }
}

impl TemplateSet {
    /// Defaults overlaid with every `{name}.txt` found under `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "template directory {} does not exist",
                dir.display()
            )));
        }
        let mut set = TemplateSet::default();
        for (name, _) in DEFAULT_TEMPLATES {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.templates.insert(name.to_string(), body.trim_end().to_string());
            }
        }
        Ok(set)
    }

    pub fn set(&mut self, name: &str, body: impl Into<String>) {
        self.templates.insert(name.to_string(), body.into());
    }

    pub fn get(&self, name: &str) -> Result<&str> {
        self.templates
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Template {
                template: name.to_string(),
                message: "no such template".into(),
            })
    }

    pub fn cot_suffix(&self) -> &str {
        self.templates.get("cot").map(String::as_str).unwrap_or("")
    }

    /// Render a named template; the result is trimmed.
    pub fn render(&self, name: &str, slots: &Slots) -> Result<String> {
        render_str(self.get(name)?, slots).map_err(|message| Error::Template {
            template: name.to_string(),
            message,
        })
    }
}

pub type Slots = BTreeMap<&'static str, String>;

fn is_slot_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Substitute `{name}` placeholders. Values are inserted verbatim and never
/// rescanned. A brace that does not open a well-formed placeholder is kept.
pub fn render_str(template: &str, slots: &Slots) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
            continue;
        }
        if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
            continue;
        }
        if let Some(inner) = tail.strip_prefix('{') {
            let name_len = inner.chars().take_while(|&c| is_slot_char(c)).count();
            if name_len > 0 && inner[name_len..].starts_with('}') {
                let name = &inner[..name_len];
                let value = slots
                    .get(name)
                    .ok_or_else(|| format!("slot {{{name}}} has no value at this stage"))?;
                out.push_str(value);
                rest = &tail[name_len + 2..];
                continue;
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    Ok(out.trim().to_string())
}

/// "a", "a and b", "a, b and c".
pub fn join_names<S: AsRef<str>>(names: &[S]) -> String {
    match names {
        [] => String::new(),
        [one] => one.as_ref().to_string(),
        _ => {
            let (last, init) = names.split_last().expect("len >= 2");
            let head: Vec<&str> = init.iter().map(AsRef::as_ref).collect();
            format!("{} and {}", head.join(", "), last.as_ref())
        }
    }
}

/// What a NER conversation asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NerTarget<'a> {
    Type(&'a str),
    All,
}

fn system_message(templates: &TemplateSet, enabled: bool) -> Result<Option<Message>> {
    if !enabled {
        return Ok(None);
    }
    Ok(Some(Message::system(templates.render("system", &Slots::new())?)))
}

fn cot_value(cfg: &StrategyConfig, templates: &TemplateSet) -> String {
    if cfg.cot {
        templates.cot_suffix().to_string()
    } else {
        String::new()
    }
}

fn stage(
    templates: &TemplateSet,
    name: StageName,
    template: &str,
    slots: &Slots,
) -> Result<Stage> {
    let content = templates.render(template, slots)?;
    if content.is_empty() {
        return Err(Error::Template {
            template: template.to_string(),
            message: "rendered to an empty message".into(),
        });
    }
    Ok(Stage {
        name,
        message: Message::user(content),
    })
}

pub fn build_ner_plan(
    cfg: &StrategyConfig,
    schema: &TaskSchema,
    target: NerTarget<'_>,
    doc: &Document,
    templates: &TemplateSet,
    system_enabled: bool,
) -> Result<ConversationPlan> {
    let mut slots = Slots::new();
    slots.insert("text", doc.text.clone());
    slots.insert("cot_suffix", cot_value(cfg, templates));
    let rephrased: Vec<&str> = schema.entity_types.iter().map(|e| e.rephrased.as_str()).collect();
    slots.insert("entity_types_list", join_names(&rephrased));

    let (target_label, prefix) = match (cfg.strategy, target) {
        (Strategy::AEiO, NerTarget::All) => (ALL_TYPES.to_string(), "aeio"),
        (Strategy::AEiO, NerTarget::Type(_)) => {
            return Err(Error::Precondition("AEiO plans cover all entity types at once".into()))
        }
        (_, NerTarget::All) => {
            return Err(Error::Precondition(format!(
                "{} plans target one entity type at a time",
                cfg.strategy
            )))
        }
        (Strategy::GnO, NerTarget::Type(t)) => (t.to_string(), "gno"),
        (Strategy::OneStep, NerTarget::Type(t)) => (t.to_string(), "onestep"),
    };
    if let NerTarget::Type(t) = target {
        slots.insert("entity_type", schema.rephrase(t)?.to_string());
    }

    let mut stages = vec![stage(templates, StageName::Identify, &format!("{prefix}/identify"), &slots)?];
    slots.insert("cot_suffix", String::new());
    if cfg.cleanup {
        stages.push(stage(templates, StageName::Cleanup, &format!("{prefix}/cleanup"), &slots)?);
    }
    if cfg.strategy != Strategy::OneStep {
        stages.push(stage(templates, StageName::Organize, &format!("{prefix}/organize"), &slots)?);
    }
    Ok(ConversationPlan {
        doc_id: doc.id.clone(),
        target: target_label,
        system: system_message(templates, system_enabled)?,
        stages,
    })
}

/// Column labels for a relation table: one per role, then the presence column.
/// Repeated role types are numbered.
pub fn relation_columns(schema: &TaskSchema, rtype: &RelationType) -> Result<Vec<String>> {
    let names: Vec<&str> = rtype
        .roles
        .iter()
        .map(|r| schema.rephrase(r))
        .collect::<Result<_>>()?;
    let mut cols = Vec::with_capacity(names.len() + 1);
    for (i, n) in names.iter().enumerate() {
        if names.iter().filter(|m| *m == n).count() > 1 {
            let nth = names[..=i].iter().filter(|m| *m == n).count();
            cols.push(format!("{n} {nth}"));
        } else {
            cols.push(n.to_string());
        }
    }
    cols.push(PRESENCE_COLUMN.to_string());
    Ok(cols)
}

fn relation_slots(schema: &TaskSchema, rtype: &RelationType) -> Result<Slots> {
    let roles: Vec<&str> = rtype
        .roles
        .iter()
        .map(|r| schema.rephrase(r))
        .collect::<Result<_>>()?;
    let mut slots = Slots::new();
    slots.insert("relation_type", rtype.name.clone());
    slots.insert("head_type", roles.first().copied().unwrap_or_default().to_string());
    slots.insert("tail_type", roles.last().copied().unwrap_or_default().to_string());
    slots.insert("role_types", join_names(&roles));
    Ok(slots)
}

pub fn build_re_plan(
    cfg: &StrategyConfig,
    schema: &TaskSchema,
    rtype: &RelationType,
    doc: &Document,
    templates: &TemplateSet,
    system_enabled: bool,
) -> Result<ConversationPlan> {
    let mut slots = relation_slots(schema, rtype)?;
    let prompt = render_str(&rtype.prompt_text, &slots).map_err(|message| Error::Template {
        template: format!("relation prompt {}", rtype.name),
        message,
    })?;
    slots.insert("relation_prompt", prompt);
    let cols = relation_columns(schema, rtype)?;
    let quoted: Vec<String> = cols.iter().map(|c| format!("\"{c}\"")).collect();
    slots.insert("columns", join_names(&quoted));
    slots.insert(
        "table_header",
        format!(
            "| {} |\n|{}",
            cols.join(" | "),
            " --- |".repeat(cols.len())
        ),
    );
    slots.insert("text", doc.text.clone());
    slots.insert("cot_suffix", cot_value(cfg, templates));

    let stages = match cfg.strategy {
        Strategy::GnO => {
            let identify = stage(templates, StageName::Identify, "re-gno/identify", &slots)?;
            slots.insert("cot_suffix", String::new());
            vec![identify, stage(templates, StageName::Organize, "re-gno/organize", &slots)?]
        }
        Strategy::OneStep => vec![stage(templates, StageName::Identify, "re-onestep/identify", &slots)?],
        Strategy::AEiO => return Err(Error::Precondition("AEiO is only defined for NER".into())),
    };
    Ok(ConversationPlan {
        doc_id: doc.id.clone(),
        target: rtype.name.clone(),
        system: system_message(templates, system_enabled)?,
        stages,
    })
}

/// Conflict-resolution plan over earlier per-type answers, given as
/// `(canonical type, final assistant reply)`.
pub fn build_cr_plan(
    conflict_outputs: &[(String, String)],
    schema: &TaskSchema,
    doc: &Document,
    templates: &TemplateSet,
    system_enabled: bool,
) -> Result<ConversationPlan> {
    let mut types: Vec<&str> = Vec::new();
    for (t, _) in conflict_outputs {
        if !types.contains(&t.as_str()) {
            types.push(t);
        }
    }
    if conflict_outputs.len() < 2 || types.len() < 2 {
        return Err(Error::Precondition(
            "conflict resolution needs answers for at least two distinct types".into(),
        ));
    }
    let mut prior = String::new();
    for (i, (t, text)) in conflict_outputs.iter().enumerate() {
        if i > 0 {
            prior.push_str("\n\n");
        }
        prior.push_str(&format!(
            "NER Response {} ({}):\n{}",
            i + 1,
            schema.rephrase(t)?,
            text.trim()
        ));
    }
    let rephrased: Vec<&str> = types.iter().map(|t| schema.rephrase(t)).collect::<Result<_>>()?;
    let mut slots = Slots::new();
    slots.insert("text", doc.text.clone());
    slots.insert("prior_outputs", prior);
    slots.insert("entity_types_list", join_names(&rephrased));
    Ok(ConversationPlan {
        doc_id: doc.id.clone(),
        target: CR_TARGET.to_string(),
        system: system_message(templates, system_enabled)?,
        stages: vec![
            stage(templates, StageName::CrIdentify, "cr/identify", &slots)?,
            stage(templates, StageName::CrOrganize, "cr/organize", &slots)?,
        ],
    })
}

/// The slot-filled starting prompt for a relation type.
pub fn base_re_prompt(schema: &TaskSchema, rtype: &RelationType, templates: &TemplateSet) -> Result<String> {
    templates.render("re-prompt/base", &relation_slots(schema, rtype)?)
}

/// A single meta-prompt asking a stronger model to rewrite `base_prompt`,
/// given `(paragraph, tuples)` training examples.
pub fn build_re_prompt_request(
    base_prompt: &str,
    schema: &TaskSchema,
    rtype: &RelationType,
    examples: &[(String, Vec<Vec<String>>)],
    templates: &TemplateSet,
) -> Result<Message> {
    if examples.is_empty() {
        return Err(Error::Precondition("prompt generation needs at least one example".into()));
    }
    let mut rendered = String::new();
    for (i, (paragraph, tuples)) in examples.iter().enumerate() {
        if i > 0 {
            rendered.push_str("\n\n");
        }
        rendered.push_str(&format!("Example {}:\nParagraph: {}\nTuples:", i + 1, paragraph.trim()));
        if tuples.is_empty() {
            rendered.push_str(" none");
        }
        for t in tuples {
            rendered.push_str(&format!("\n- ({})", t.join(", ")));
        }
    }
    let mut slots = relation_slots(schema, rtype)?;
    slots.insert("base_prompt", base_prompt.trim().to_string());
    slots.insert("examples", rendered);
    Ok(Message::user(templates.render("re-prompt/meta", &slots)?))
}
