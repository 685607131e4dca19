//! Span-level scoring of predictions against gold.
//!
//! Partial mode credits a prediction that overlaps a gold span of the same
//! type by at least one character; full mode needs identical offsets and
//! type. Matching is one-to-one, so `tp + fp = |pred|` and `tp + fn = |gold|`
//! always hold. Relation tuples need every constituent to match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::DocumentIndex;
use crate::matching::assign;
use crate::schema::{span_overlap, Corpus, EntityMention, ReMatching, RelationMention, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Partial,
    Full,
}

impl MatchMode {
    pub const ALL: [MatchMode; 2] = [MatchMode::Partial, MatchMode::Full];

    fn spans_match(self, a: (usize, usize), b: (usize, usize)) -> bool {
        match self {
            MatchMode::Full => a == b,
            MatchMode::Partial => span_overlap(a, b) >= 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        MatchCounts { tp, fp, fn_ }
    }

    pub fn scores(&self) -> Scores {
        let (precision, recall, f1) = micro_f1(*self);
        Scores {
            precision,
            recall,
            f1,
        }
    }
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

impl std::iter::Sum for MatchCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut total = MatchCounts::default();
        for c in iter {
            total += c;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn safe_div(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(precision, recall, f1)`; any zero denominator yields zero.
pub fn micro_f1(c: MatchCounts) -> (f64, f64, f64) {
    let p = safe_div(c.tp, c.tp + c.fp);
    let r = safe_div(c.tp, c.tp + c.fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Unweighted mean of per-dataset F1 values.
pub fn macro_average(f1s: &[f64]) -> Result<f64> {
    if f1s.is_empty() {
        return Err(Error::Precondition("macro average of zero datasets".into()));
    }
    Ok(f1s.iter().sum::<f64>() / f1s.len() as f64)
}

fn common_doc<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut first: Option<&str> = None;
    for id in ids {
        match first {
            None => first = Some(id),
            Some(f) if f != id => return Err(Error::CrossDocument(f.to_string(), id.to_string())),
            _ => {}
        }
    }
    Ok(())
}

fn start_gap(a: usize, b: usize) -> usize {
    a.abs_diff(b)
}

/// Count matches between predicted and gold mentions of one document.
pub fn match_ner(pred: &[EntityMention], gold: &[EntityMention], mode: MatchMode) -> Result<MatchCounts> {
    common_doc(pred.iter().chain(gold).map(|m| m.doc_id.as_str()))?;
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gold.iter().enumerate() {
            if p.etype == g.etype && mode.spans_match(p.span(), g.span()) {
                edges.push((pi, gi, p.overlap(g)));
            }
        }
    }
    edges.sort_by(|a, b| {
        b.2.cmp(&a.2)
            .then_with(|| {
                start_gap(pred[a.0].start, gold[a.1].start)
                    .cmp(&start_gap(pred[b.0].start, gold[b.1].start))
            })
            .then_with(|| pred[a.0].start.cmp(&pred[b.0].start))
    });
    let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.0, e.1)).collect();
    let tp = assign(pred.len(), gold.len(), &pairs).iter().flatten().count();
    Ok(MatchCounts::new(tp, pred.len() - tp, gold.len() - tp))
}

/// Count matches between predicted and gold relation tuples of one document.
///
/// `doc_text` is only consulted under [`ReMatching::Lenient`], where every
/// verbatim occurrence of a predicted constituent's surface may stand in for
/// the grounded span.
pub fn match_re(
    pred: &[RelationMention],
    gold: &[RelationMention],
    mode: MatchMode,
    policy: ReMatching,
    doc_text: &str,
) -> Result<MatchCounts> {
    common_doc(
        pred.iter()
            .chain(gold)
            .flat_map(|r| std::iter::once(r.doc_id.as_str()).chain(r.constituents.iter().map(|c| c.doc_id.as_str()))),
    )?;
    let index = (policy == ReMatching::Lenient).then(|| DocumentIndex::new(doc_text));
    let alternatives: Vec<Vec<Vec<(usize, usize)>>> = pred
        .iter()
        .map(|r| {
            r.constituents
                .iter()
                .map(|c| {
                    let mut spans = vec![c.span()];
                    if let Some(idx) = &index {
                        for occ in idx.occurrences(&c.surface) {
                            if !spans.contains(&occ) {
                                spans.push(occ);
                            }
                        }
                    }
                    spans
                })
                .collect()
        })
        .collect();

    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gold.iter().enumerate() {
            if p.rtype != g.rtype {
                continue;
            }
            if p.constituents.len() != g.constituents.len() {
                return Err(Error::ArityMismatch {
                    rtype: p.rtype.clone(),
                    left: p.constituents.len(),
                    right: g.constituents.len(),
                });
            }
            let mut total = 0;
            let mut ok = true;
            for (role, gc) in g.constituents.iter().enumerate() {
                let best = alternatives[pi][role]
                    .iter()
                    .filter(|&&s| mode.spans_match(s, gc.span()))
                    .map(|&s| span_overlap(s, gc.span()))
                    .max();
                match best {
                    Some(o) => total += o,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                edges.push((pi, gi, total));
            }
        }
    }
    edges.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.0, e.1)).collect();
    let tp = assign(pred.len(), gold.len(), &pairs).iter().flatten().count();
    Ok(MatchCounts::new(tp, pred.len() - tp, gold.len() - tp))
}

/// Predictions keyed by document id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub entities: BTreeMap<String, Vec<EntityMention>>,
    pub relations: BTreeMap<String, Vec<RelationMention>>,
}

impl Predictions {
    pub fn has_relations(&self) -> bool {
        self.relations.values().any(|v| !v.is_empty())
    }

    pub fn has_entities(&self) -> bool {
        self.entities.values().any(|v| !v.is_empty())
    }

    fn doc_ids(&self) -> BTreeSet<&str> {
        self.entities
            .keys()
            .chain(self.relations.keys())
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    #[serde(flatten)]
    pub counts: MatchCounts,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub per_type: BTreeMap<String, TypeReport>,
    pub pooled: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ModeReport {
    fn from_counts(per_type: BTreeMap<String, MatchCounts>) -> Self {
        let pooled: MatchCounts = per_type.values().copied().sum();
        let s = pooled.scores();
        ModeReport {
            per_type: per_type
                .into_iter()
                .map(|(k, counts)| {
                    (
                        k,
                        TypeReport {
                            counts,
                            scores: counts.scores(),
                        },
                    )
                })
                .collect(),
            pooled,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroBlock {
    pub datasets: Vec<(String, f64)>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re_policy: Option<ReMatching>,
    pub partial: ModeReport,
    pub full: ModeReport,
    #[serde(default, rename = "macro", skip_serializing_if = "Option::is_none")]
    pub macro_block: Option<MacroBlock>,
}

impl EvalReport {
    pub fn mode(&self, mode: MatchMode) -> &ModeReport {
        match mode {
            MatchMode::Partial => &self.partial,
            MatchMode::Full => &self.full,
        }
    }

    /// Markdown summary: pooled rows for both modes, then per-type rows.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| Mode | Type | P | R | F1 | TP | FP | FN |");
        let _ = writeln!(out, "| --- | --- | --- | --- | --- | --- | --- | --- |");
        for mode in MatchMode::ALL {
            let r = self.mode(mode);
            let name = if mode == MatchMode::Partial { "partial" } else { "full" };
            let _ = writeln!(
                out,
                "| {name} | **all** | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
                r.precision, r.recall, r.f1, r.pooled.tp, r.pooled.fp, r.pooled.fn_
            );
            for (t, tr) in &r.per_type {
                let _ = writeln!(
                    out,
                    "| {name} | {t} | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
                    tr.scores.precision,
                    tr.scores.recall,
                    tr.scores.f1,
                    tr.counts.tp,
                    tr.counts.fp,
                    tr.counts.fn_
                );
            }
        }
        if let Some(m) = &self.macro_block {
            let _ = writeln!(out);
            let _ = writeln!(out, "| Dataset | F1 |");
            let _ = writeln!(out, "| --- | --- |");
            for (name, f1) in &m.datasets {
                let _ = writeln!(out, "| {name} | {f1:.4} |");
            }
            let _ = writeln!(out, "| **macro average** | {:.4} |", m.mean);
        }
        out
    }
}

fn check_known_docs(gold: &Corpus, pred: &Predictions) -> Result<()> {
    for id in pred.doc_ids() {
        if gold.get(id).is_none() {
            return Err(Error::InvalidDocument {
                doc_id: id.to_string(),
                message: "prediction for a document absent from the gold corpus".into(),
            });
        }
    }
    Ok(())
}

/// Score NER predictions under both modes in one pass.
pub fn evaluate_ner(gold: &Corpus, pred: &Predictions) -> Result<EvalReport> {
    check_known_docs(gold, pred)?;
    let mut per_mode: BTreeMap<MatchMode, BTreeMap<String, MatchCounts>> = BTreeMap::new();
    let empty = Vec::new();
    for ad in &gold.docs {
        let p = pred.entities.get(&ad.document.id).unwrap_or(&empty);
        let types: BTreeSet<&str> = p
            .iter()
            .chain(&ad.entities)
            .map(|m| m.etype.as_str())
            .collect();
        for t in types {
            let pt: Vec<EntityMention> = p.iter().filter(|m| m.etype == t).cloned().collect();
            let gt: Vec<EntityMention> = ad.entities.iter().filter(|m| m.etype == t).cloned().collect();
            for mode in MatchMode::ALL {
                let c = match_ner(&pt, &gt, mode)?;
                *per_mode.entry(mode).or_default().entry(t.to_string()).or_default() += c;
            }
        }
    }
    Ok(EvalReport {
        task: Task::Ner,
        re_policy: None,
        partial: ModeReport::from_counts(per_mode.remove(&MatchMode::Partial).unwrap_or_default()),
        full: ModeReport::from_counts(per_mode.remove(&MatchMode::Full).unwrap_or_default()),
        macro_block: None,
    })
}

/// Score relation predictions under both modes with the given policy.
pub fn evaluate_re(gold: &Corpus, pred: &Predictions, policy: ReMatching) -> Result<EvalReport> {
    check_known_docs(gold, pred)?;
    let mut per_mode: BTreeMap<MatchMode, BTreeMap<String, MatchCounts>> = BTreeMap::new();
    let empty = Vec::new();
    for ad in &gold.docs {
        let p = pred.relations.get(&ad.document.id).unwrap_or(&empty);
        let types: BTreeSet<&str> = p
            .iter()
            .chain(&ad.relations)
            .map(|r| r.rtype.as_str())
            .collect();
        for t in types {
            let pt: Vec<RelationMention> = p.iter().filter(|r| r.rtype == t).cloned().collect();
            let gt: Vec<RelationMention> = ad.relations.iter().filter(|r| r.rtype == t).cloned().collect();
            for mode in MatchMode::ALL {
                let c = match_re(&pt, &gt, mode, policy, &ad.document.text)?;
                *per_mode.entry(mode).or_default().entry(t.to_string()).or_default() += c;
            }
        }
    }
    Ok(EvalReport {
        task: Task::Re,
        re_policy: Some(policy),
        partial: ModeReport::from_counts(per_mode.remove(&MatchMode::Partial).unwrap_or_default()),
        full: ModeReport::from_counts(per_mode.remove(&MatchMode::Full).unwrap_or_default()),
        macro_block: None,
    })
}
