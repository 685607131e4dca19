//! Property tests over the pure building blocks.

use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;

use gno_core::evaluation::{match_ner, MatchMode};
use gno_core::grounding::{matched_chars, ratio, tokenize, DocumentIndex, GroundingConfig, MatchPath};
use gno_core::labels::{bio2_violation, detect_conflicts, parse_conll, resolve_all, to_bio2, to_conll_string};
use gno_core::prompting::{render_str, Slots};
use gno_core::schema::EntityMention;
use gno_core::structparse::{parse_reply, Table};

fn mention(start: usize, len: usize, etype: &str) -> EntityMention {
    EntityMention {
        doc_id: "d".into(),
        start,
        end: start + len,
        etype: etype.into(),
        surface: String::new(),
    }
}

fn mentions(text_len: usize, max: usize) -> impl Strategy<Value = Vec<EntityMention>> {
    prop::collection::vec(
        (0..text_len, 1usize..6, prop::sample::select(vec!["PER", "LOC", "ORG"])),
        0..=max,
    )
    .prop_map(move |v| {
        v.into_iter()
            .map(|(s, l, t)| mention(s.min(text_len - 1), l.min(text_len - s.min(text_len - 1)), t))
            .collect()
    })
}

fn lcs(a: &[char], b: &[char]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..a.len() {
        for j in 0..b.len() {
            dp[i + 1][j + 1] = if a[i] == b[j] { dp[i][j] + 1 } else { dp[i][j + 1].max(dp[i + 1][j]) };
        }
    }
    dp[a.len()][b.len()]
}

fn longest_common_substring(a: &[char], b: &[char]) -> usize {
    let mut best = 0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut k = 0;
            while i + k < a.len() && j + k < b.len() && a[i + k] == b[j + k] {
                k += 1;
            }
            best = best.max(k);
        }
    }
    best
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["alpha", "Beta", "gamma", "Delta", "co.", "x"]), 1..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

// Cells the canonical renderer can reproduce: no surrounding whitespace,
// no newlines, no backslashes, and not a separator run.
fn cell() -> impl Strategy<Value = String> {
    "[A-Za-z0-9][A-Za-z0-9 .,|()&'-]{0,10}[A-Za-z0-9]".prop_map(|s| s.trim().to_string())
}

#[test]
fn ratio_matches_python_difflib() {
    let cases = [
        ("abxcd", "cdxab", 0.4),
        ("renal failures", "renal failure", 0.962962962962963),
        ("sao paulo", "são paulo", 0.8888888888888888),
        ("white house", "the white house", 0.8461538461538461),
        ("abc", "xyz", 0.0),
        ("tide", "diet", 0.25),
        ("diet", "tide", 0.5),
    ];
    for (a, b, want) in cases {
        assert!((ratio(a, b) - want).abs() < 1e-12, "{a:?} {b:?} {}", ratio(a, b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ratio_is_bounded_by_substring_and_subsequence(a in "[abc ]{0,14}", b in "[abc ]{0,14}") {
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let m = matched_chars(&ca, &cb);
        prop_assert!(m >= longest_common_substring(&ca, &cb));
        prop_assert!(m <= lcs(&ca, &cb));
        let r = ratio(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        if !a.is_empty() {
            prop_assert_eq!(ratio(&a, &a), 1.0);
        }
    }

    #[test]
    fn match_counts_partition_both_sides(
        pred in mentions(40, 8),
        gold in mentions(40, 8),
    ) {
        for mode in [MatchMode::Partial, MatchMode::Full] {
            let c = match_ner(&pred, &gold, mode).unwrap();
            prop_assert_eq!(c.tp + c.fp, pred.len());
            prop_assert_eq!(c.tp + c.fn_, gold.len());
            // A maximum matching has the same size in either direction.
            prop_assert_eq!(match_ner(&gold, &pred, mode).unwrap().tp, c.tp);
        }
        let full = match_ner(&pred, &gold, MatchMode::Full).unwrap().tp;
        prop_assert!(match_ner(&pred, &gold, MatchMode::Partial).unwrap().tp >= full);
    }

    #[test]
    fn exact_surfaces_ground_to_themselves(ws in words(), from in 0usize..12, len in 1usize..4) {
        let text = ws.join(" ");
        let from = from % ws.len();
        let surface = ws[from..(from + len).min(ws.len())].join(" ");
        let idx = DocumentIndex::new(&text);
        let g = idx.ground(&surface, &GroundingConfig::default());
        prop_assert_eq!(g.path, MatchPath::Exact);
        prop_assert!(!g.spans.is_empty());
        for s in &g.spans {
            prop_assert_eq!(idx.slice(s.start, s.end), surface.as_str());
        }
        for pair in g.spans.windows(2) {
            prop_assert!(pair[0].end <= pair[1].start);
        }
    }

    #[test]
    fn tokens_tile_the_non_space_text(text in "[a-zA-Z.,'é ]{0,40}") {
        let chars: Vec<char> = text.chars().collect();
        let tokens = tokenize(&text);
        let mut last = 0;
        for t in &tokens {
            prop_assert!(t.start >= last && t.start < t.end);
            prop_assert!(chars[last..t.start].iter().all(|c| c.is_whitespace()));
            prop_assert_eq!(chars[t.start..t.end].iter().collect::<String>(), t.text.clone());
            last = t.end;
        }
        prop_assert!(chars[last..].iter().all(|c| c.is_whitespace()));
    }

    #[test]
    fn resolution_leaves_no_conflicts(ms in mentions(30, 10), seed: u64) {
        let (resolved, stats) = resolve_all(&ms, seed);
        prop_assert!(detect_conflicts(&resolved).is_empty());
        prop_assert!(resolved.iter().all(|m| ms.contains(m)));
        let distinct = ms.iter().collect::<BTreeSet<_>>().len();
        prop_assert_eq!(resolved.len() + stats.removed, distinct);
        let mut reversed = ms.clone();
        reversed.reverse();
        prop_assert_eq!(resolve_all(&reversed, seed).0, resolved);
    }

    #[test]
    fn bio2_output_is_well_formed(ws in words(), ms in mentions(60, 8), seed: u64) {
        let text = ws.join(" ");
        let n = text.chars().count();
        let ms: Vec<EntityMention> = ms.into_iter().filter(|m| m.end <= n).collect();
        let (resolved, _) = resolve_all(&ms, seed);
        let tokens = tokenize(&text);
        let seq = to_bio2(&tokens, &resolved);
        prop_assert_eq!(seq.tags.len(), tokens.len());
        prop_assert_eq!(bio2_violation(&seq.tags), None);
        let parsed = parse_conll(&to_conll_string(std::slice::from_ref(&seq)), Path::new("x")).unwrap();
        if !tokens.is_empty() {
            prop_assert_eq!(parsed.len(), 1);
            prop_assert_eq!(&parsed[0].1, &seq.tags);
        }
    }

    #[test]
    fn parser_is_total(text in "(\\PC|\n|\\|){0,200}") {
        let outcome = parse_reply(&text);
        for t in &outcome.tables {
            prop_assert!(t.rows.iter().all(|r| r.len() == t.width()));
        }
    }

    #[test]
    fn canonical_tables_round_trip(
        header in prop::collection::vec(cell(), 1..4),
        rows in prop::collection::vec(prop::collection::vec(cell(), 4), 0..5),
    ) {
        let w = header.len();
        let table = Table {
            header,
            rows: rows.into_iter().map(|r| r[..w].to_vec()).collect(),
        };
        let outcome = parse_reply(&format!("Here you go:\n\n{}\nDone.", table.to_markdown()));
        prop_assert_eq!(outcome.tables, vec![table]);
    }

    #[test]
    fn slot_values_are_never_rescanned(value in "[a-z{}]{0,12}") {
        let mut slots = Slots::new();
        slots.insert("type", value.clone());
        slots.insert("text", "T".into());
        let out = render_str("identify {type} in {text}", &slots).unwrap();
        prop_assert_eq!(out, format!("identify {value} in T"));
    }
}
