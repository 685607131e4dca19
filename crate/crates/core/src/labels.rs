//! Entity-type conflicts, random tie-breaking and BIO2 / CoNLL export.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grounding::Token;
use crate::schema::{span_overlap, EntityMention};

/// Mentions connected by character overlap that carry ≥ 2 distinct types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictGroup {
    pub doc_id: String,
    /// Sorted by `(start, end, etype)`.
    pub members: Vec<EntityMention>,
}

impl ConflictGroup {
    pub fn types(&self) -> BTreeSet<&str> {
        self.members.iter().map(|m| m.etype.as_str()).collect()
    }

    /// Smallest span covering every member.
    pub fn extent(&self) -> (usize, usize) {
        let start = self.members.iter().map(|m| m.start).min().unwrap_or(0);
        let end = self.members.iter().map(|m| m.end).max().unwrap_or(0);
        (start, end)
    }
}

/// Connected components of the overlap graph that mix entity types.
/// Same-type overlaps join components but never form a conflict alone.
pub fn detect_conflicts(mentions: &[EntityMention]) -> Vec<ConflictGroup> {
    let mut sorted: Vec<&EntityMention> = mentions.iter().collect();
    sorted.sort();
    sorted.dedup();

    // Sweep by start: a mention joins the running component while it starts
    // before the component's current end.
    let mut components: Vec<Vec<&EntityMention>> = Vec::new();
    let mut current_end = 0;
    for m in sorted {
        match components.last_mut() {
            Some(comp) if m.start < current_end && m.doc_id == comp[0].doc_id => {
                current_end = current_end.max(m.end);
                comp.push(m);
            }
            _ => {
                current_end = m.end;
                components.push(vec![m]);
            }
        }
    }
    components
        .into_iter()
        .filter(|c| c.len() >= 2 && c.iter().map(|m| &m.etype).collect::<BTreeSet<_>>().len() >= 2)
        .map(|c| ConflictGroup {
            doc_id: c[0].doc_id.clone(),
            members: c.into_iter().cloned().collect(),
        })
        .collect()
}

fn group_seed(seed: u64, group: &ConflictGroup) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(group.doc_id.as_bytes());
    for m in &group.members {
        h.update([0]);
        h.update((m.start as u64).to_le_bytes());
        h.update((m.end as u64).to_le_bytes());
        h.update(m.etype.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Pick one member uniformly at random, deterministically in
/// `(seed, doc_id, member set)`.
pub fn resolve_random(group: &ConflictGroup, seed: u64) -> EntityMention {
    let mut members = group.members.clone();
    members.sort();
    let canonical = ConflictGroup {
        doc_id: group.doc_id.clone(),
        members,
    };
    if canonical.members.len() == 1 {
        return canonical.members[0].clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(group_seed(seed, &canonical));
    let idx = rng.random_range(0..canonical.members.len());
    canonical.members[idx].clone()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionStats {
    pub groups: usize,
    pub removed: usize,
}

/// Replace every conflict group by its random survivor until none remain.
pub fn resolve_all(mentions: &[EntityMention], seed: u64) -> (Vec<EntityMention>, ResolutionStats) {
    let mut current: Vec<EntityMention> = mentions.to_vec();
    current.sort();
    current.dedup();
    let mut stats = ResolutionStats::default();
    loop {
        let groups = detect_conflicts(&current);
        if groups.is_empty() {
            return (current, stats);
        }
        for group in &groups {
            let survivor = resolve_random(group, seed);
            stats.groups += 1;
            stats.removed += group.members.len() - 1;
            current.retain(|m| *m == survivor || !group.members.contains(m));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bio2Sequence {
    pub tokens: Vec<Token>,
    pub tags: Vec<String>,
}

/// Position of the first BIO2 grammar violation, if any.
pub fn bio2_violation(tags: &[String]) -> Option<usize> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        if tag == "O" {
            prev = None;
        } else if let Some(t) = tag.strip_prefix("B-") {
            if t.is_empty() {
                return Some(i);
            }
            prev = Some(t);
        } else if let Some(t) = tag.strip_prefix("I-") {
            if prev != Some(t) {
                return Some(i);
            }
        } else {
            return Some(i);
        }
    }
    None
}

/// Tag tokens from mentions. A token belongs to a mention when it overlaps it
/// by at least one character. Longer mentions claim tokens first; a mention
/// whose tokens are already claimed is skipped.
pub fn to_bio2(tokens: &[Token], mentions: &[EntityMention]) -> Bio2Sequence {
    let mut tags = vec!["O".to_string(); tokens.len()];
    let mut claimed = vec![false; tokens.len()];
    let mut order: Vec<&EntityMention> = mentions.iter().collect();
    order.sort_by(|a, b| b.len().cmp(&a.len()).then(a.start.cmp(&b.start)).then(a.etype.cmp(&b.etype)));
    for m in order {
        let covered: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| span_overlap((t.start, t.end), m.span()) >= 1)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
            continue;
        };
        if claimed[first..=last].iter().any(|&c| c) {
            continue;
        }
        for i in first..=last {
            claimed[i] = true;
            tags[i] = if i == first {
                format!("B-{}", m.etype)
            } else {
                format!("I-{}", m.etype)
            };
        }
    }
    Bio2Sequence {
        tokens: tokens.to_vec(),
        tags,
    }
}

/// Serialized CoNLL text: `token<TAB>tag` lines with a blank line after each
/// sequence. Empty sequences are omitted.
pub fn to_conll_string(sequences: &[Bio2Sequence]) -> String {
    let mut out = String::new();
    for seq in sequences.iter().filter(|s| !s.tokens.is_empty()) {
        for (tok, tag) in seq.tokens.iter().zip(&seq.tags) {
            out.push_str(&tok.text);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn export_conll(sequences: &[Bio2Sequence], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_conll_string(sequences).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Parse CoNLL text back into `(tokens, tags)` pairs.
pub fn parse_conll(raw: &str, origin: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let mut out = Vec::new();
    let mut toks = Vec::new();
    let mut tags = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.is_empty() {
            if !toks.is_empty() {
                out.push((std::mem::take(&mut toks), std::mem::take(&mut tags)));
            }
            continue;
        }
        let (tok, tag) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: "expected token<TAB>tag".into(),
        })?;
        toks.push(tok.to_string());
        tags.push(tag.to_string());
    }
    if !toks.is_empty() {
        out.push((toks, tags));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::tokenize;

    fn m(start: usize, end: usize, t: &str) -> EntityMention {
        EntityMention {
            doc_id: "d".into(),
            start,
            end,
            etype: t.into(),
            surface: String::new(),
        }
    }

    #[test]
    fn identical_span_two_types() {
        let groups = detect_conflicts(&[m(0, 5, "PER"), m(0, 5, "LOC")]);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members.len(), 2);
    }

    #[test]
    fn chained_overlap_is_one_group() {
        let groups = detect_conflicts(&[m(0, 5, "PER"), m(3, 8, "LOC"), m(6, 9, "ORG")]);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members.len(), 3);
        assert_eq!(groups[0].extent(), (0, 9));
    }

    #[test]
    fn disjoint_and_same_type_are_not_conflicts() {
        assert!(detect_conflicts(&[m(0, 5, "PER"), m(6, 9, "LOC")]).is_empty());
        assert!(detect_conflicts(&[m(0, 5, "PER"), m(2, 9, "PER")]).is_empty());
        // Touching spans share no character.
        assert!(detect_conflicts(&[m(0, 5, "PER"), m(5, 9, "LOC")]).is_empty());
    }

    #[test]
    fn resolve_random_is_deterministic() {
        let g = &detect_conflicts(&[m(0, 5, "PER"), m(0, 5, "LOC"), m(2, 4, "ORG")])[0];
        let a = resolve_random(g, 7);
        assert_eq!(a, resolve_random(g, 7));
        let mut shuffled = g.clone();
        shuffled.members.reverse();
        assert_eq!(a, resolve_random(&shuffled, 7));
        assert!(g.members.contains(&a));
    }

    #[test]
    fn resolve_random_singleton() {
        let g = ConflictGroup {
            doc_id: "d".into(),
            members: vec![m(0, 5, "PER")],
        };
        assert_eq!(resolve_random(&g, 1), m(0, 5, "PER"));
    }

    #[test]
    fn resolve_random_is_roughly_uniform() {
        let g = &detect_conflicts(&[m(0, 5, "PER"), m(0, 5, "LOC"), m(1, 3, "ORG")])[0];
        let mut counts = [0usize; 3];
        let n = 10_000;
        for seed in 0..n as u64 {
            let s = resolve_random(g, seed);
            counts[g.members.iter().position(|x| *x == s).unwrap()] += 1;
        }
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 2 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn resolve_all_leaves_no_conflicts() {
        let ms = vec![m(0, 5, "PER"), m(3, 8, "LOC"), m(6, 9, "ORG"), m(20, 25, "PER")];
        let (out, stats) = resolve_all(&ms, 3);
        assert!(detect_conflicts(&out).is_empty());
        assert_eq!(stats, ResolutionStats { groups: 1, removed: 2 });
        assert!(out.contains(&m(20, 25, "PER")));
    }

    fn tags(seq: &Bio2Sequence) -> Vec<&str> {
        seq.tags.iter().map(String::as_str).collect()
    }

    #[test]
    fn bio2_basic() {
        let toks = tokenize("John Smith lives in Paris");
        let seq = to_bio2(&toks, &[m(0, 10, "PER"), m(20, 25, "LOC")]);
        assert_eq!(tags(&seq), vec!["B-PER", "I-PER", "O", "O", "B-LOC"]);
        assert_eq!(bio2_violation(&seq.tags), None);
    }

    #[test]
    fn bio2_no_mentions() {
        let toks = tokenize("nothing to see");
        assert_eq!(tags(&to_bio2(&toks, &[])), vec!["O", "O", "O"]);
    }

    #[test]
    fn bio2_adjacent_mentions_restart() {
        let toks = tokenize("John lives in Paris France");
        let seq = to_bio2(&toks, &[m(14, 19, "LOC"), m(20, 26, "LOC")]);
        assert_eq!(tags(&seq), vec!["O", "O", "O", "B-LOC", "B-LOC"]);
    }

    #[test]
    fn bio2_partial_token_rounds_outward() {
        let toks = tokenize("the Parisian cafe");
        let seq = to_bio2(&toks, &[m(4, 9, "LOC")]);
        assert_eq!(tags(&seq), vec!["O", "B-LOC", "O"]);
    }

    #[test]
    fn bio2_longest_first() {
        let toks = tokenize("New York City hall");
        let seq = to_bio2(&toks, &[m(0, 8, "LOC"), m(0, 13, "LOC")]);
        assert_eq!(tags(&seq), vec!["B-LOC", "I-LOC", "I-LOC", "O"]);
    }

    #[test]
    fn grammar_checker() {
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(bio2_violation(&v(&["O", "I-PER"])), Some(1));
        assert_eq!(bio2_violation(&v(&["B-LOC", "I-PER"])), Some(1));
        assert_eq!(bio2_violation(&v(&["B-PER", "I-PER", "I-PER"])), None);
        assert_eq!(bio2_violation(&v(&["X"])), Some(0));
    }

    #[test]
    fn conll_format_and_round_trip() {
        let toks = tokenize("John Smith lives in Paris");
        let seq = to_bio2(&toks, &[m(0, 10, "PER"), m(20, 25, "LOC")]);
        let text = to_conll_string(std::slice::from_ref(&seq));
        assert_eq!(text, "John\tB-PER\nSmith\tI-PER\nlives\tO\nin\tO\nParis\tB-LOC\n\n");
        assert_eq!(to_conll_string(&[]), "");
        let back = parse_conll(&text, Path::new("x.conll")).unwrap();
        let words: Vec<String> = seq.tokens.iter().map(|t| t.text.clone()).collect();
        assert_eq!(back, vec![(words, seq.tags.clone())]);
    }

    #[test]
    fn export_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.conll");
        export_conll(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }
}
