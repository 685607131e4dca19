//! Map model-emitted strings back to character spans of the source text.
//!
//! Grounding runs in two passes. The first looks for verbatim occurrences
//! (case-sensitive, then case-insensitive). Only when that finds nothing does
//! the second pass score every token-aligned window of comparable length with
//! the Ratcliff/Obershelp ratio and keep the best non-overlapping windows
//! above the cutoff.

use serde::{Deserialize, Serialize};

use crate::schema::{char_offsets, Document};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    /// Minimum similarity for a fuzzy window to be accepted.
    pub cutoff: f64,
    /// Window token counts range over `q * (1 ± slack)` for a `q`-token query.
    pub window_slack: f64,
    /// Case-fold and collapse whitespace before scoring.
    pub normalize: bool,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            cutoff: 0.6,
            window_slack: 0.5,
            normalize: true,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..=1.0).contains(&self.cutoff) {
            return Err(crate::Error::Config(format!(
                "grounding cutoff {} outside [0, 1]",
                self.cutoff
            )));
        }
        if self.window_slack.is_nan() || self.window_slack < 0.0 {
            return Err(crate::Error::Config("window_slack must be >= 0".into()));
        }
        Ok(())
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Whitespace split, then leading and trailing punctuation characters become
/// single-character tokens. Offsets are char positions.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let chunk_start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let chunk_end = i;

        let mut lo = chunk_start;
        while lo < chunk_end && is_punct(chars[lo]) {
            lo += 1;
        }
        let mut hi = chunk_end;
        while hi > lo && is_punct(chars[hi - 1]) {
            hi -= 1;
        }
        let mut push = |s: usize, e: usize| {
            tokens.push(Token {
                text: chars[s..e].iter().collect(),
                start: s,
                end: e,
            })
        };
        for p in chunk_start..lo {
            push(p, p + 1);
        }
        if lo < hi {
            push(lo, hi);
        }
        for p in hi.max(lo)..chunk_end {
            push(p, p + 1);
        }
    }
    tokens
}

/// Lowercase and collapse runs of whitespace into one space, trimming ends.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Longest common block of `a[alo..ahi]` and `b[blo..bhi]`; ties go to the
/// smallest start in `a`, then in `b`.
fn longest_match(
    a: &[char],
    b: &[char],
    (alo, ahi): (usize, usize),
    (blo, bhi): (usize, usize),
    row: &mut Vec<usize>,
) -> (usize, usize, usize) {
    let width = bhi - blo;
    row.clear();
    row.resize(width + 1, 0);
    let (mut best_i, mut best_j, mut best) = (alo, blo, 0);
    for (i, &ca) in a.iter().enumerate().take(ahi).skip(alo) {
        // Walk right-to-left so row[j] still holds the previous row's value.
        for jj in (0..width).rev() {
            if ca == b[blo + jj] {
                let k = row[jj] + 1;
                row[jj + 1] = k;
                let start_i = i + 1 - k;
                let start_j = blo + jj + 1 - k;
                if k > best || (k == best && start_i == best_i && start_j < best_j) {
                    best_i = start_i;
                    best_j = start_j;
                    best = k;
                }
            } else {
                row[jj + 1] = 0;
            }
        }
    }
    (best_i, best_j, best)
}

/// Total characters matched by recursively taking the longest common block
/// and recursing on the pieces to its left and right.
pub fn matched_chars(a: &[char], b: &[char]) -> usize {
    let mut row = Vec::new();
    let mut stack = vec![((0, a.len()), (0, b.len()))];
    let mut total = 0;
    while let Some(((alo, ahi), (blo, bhi))) = stack.pop() {
        if alo >= ahi || blo >= bhi {
            continue;
        }
        let (i, j, k) = longest_match(a, b, (alo, ahi), (blo, bhi), &mut row);
        if k == 0 {
            continue;
        }
        total += k;
        stack.push(((alo, i), (blo, j)));
        stack.push(((i + k, ahi), (j + k, bhi)));
    }
    total
}

fn ratio_chars(a: &[char], b: &[char]) -> f64 {
    let len = a.len() + b.len();
    if len == 0 {
        return 1.0;
    }
    2.0 * matched_chars(a, b) as f64 / len as f64
}

/// Ratcliff/Obershelp similarity `2·M / (|a| + |b|)` on raw strings.
pub fn ratio(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    ratio_chars(&a, &b)
}

/// Similarity after normalization (case fold, whitespace collapse).
pub fn similarity(a: &str, b: &str) -> f64 {
    ratio(&normalize(a), &normalize(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundedSpan {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPath {
    Exact,
    CaseInsensitive,
    Fuzzy,
    NoMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounding {
    /// Selected spans, ordered by start offset.
    pub spans: Vec<GroundedSpan>,
    pub path: MatchPath,
    /// Number of fuzzy windows scored; zero unless the fuzzy pass ran.
    pub windows_scored: usize,
}

impl Grounding {
    fn empty(path: MatchPath) -> Self {
        Grounding {
            spans: Vec::new(),
            path,
            windows_scored: 0,
        }
    }

    /// Highest-scoring span, earliest on ties.
    pub fn best(&self) -> Option<GroundedSpan> {
        self.spans
            .iter()
            .copied()
            .reduce(|best, s| if s.score > best.score { s } else { best })
    }
}

/// Per-document lookup structure: chars, byte offsets and tokens.
#[derive(Debug, Clone)]
pub struct DocumentIndex<'a> {
    text: &'a str,
    chars: Vec<char>,
    offsets: Vec<usize>,
    tokens: Vec<Token>,
}

impl<'a> DocumentIndex<'a> {
    pub fn new(text: &'a str) -> Self {
        DocumentIndex {
            text,
            chars: text.chars().collect(),
            offsets: char_offsets(text),
            tokens: tokenize(text),
        }
    }

    pub fn with_tokens(text: &'a str, tokens: Vec<Token>) -> Self {
        DocumentIndex {
            text,
            chars: text.chars().collect(),
            offsets: char_offsets(text),
            tokens,
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn char_len(&self) -> usize {
        self.chars.len()
    }

    /// Text between char positions; panics when out of range.
    pub fn slice(&self, start: usize, end: usize) -> &'a str {
        &self.text[self.offsets[start]..self.offsets[end]]
    }

    fn char_pos(&self, byte: usize) -> usize {
        self.offsets
            .binary_search(&byte)
            .expect("match_indices yields char boundaries")
    }

    /// Non-overlapping verbatim occurrences, left to right.
    pub fn occurrences(&self, needle: &str) -> Vec<(usize, usize)> {
        if needle.is_empty() {
            return Vec::new();
        }
        let len = needle.chars().count();
        self.text
            .match_indices(needle)
            .map(|(b, _)| {
                let s = self.char_pos(b);
                (s, s + len)
            })
            .collect()
    }

    /// Non-overlapping per-char case-insensitive occurrences, left to right.
    pub fn occurrences_ignore_case(&self, needle: &str) -> Vec<(usize, usize)> {
        let pattern: Vec<char> = needle.chars().collect();
        let m = pattern.len();
        let mut found = Vec::new();
        if m == 0 || m > self.chars.len() {
            return found;
        }
        let eq = |x: char, y: char| x == y || x.to_lowercase().eq(y.to_lowercase());
        let mut i = 0;
        while i + m <= self.chars.len() {
            if self.chars[i..i + m].iter().zip(&pattern).all(|(&x, &y)| eq(x, y)) {
                found.push((i, i + m));
                i += m;
            } else {
                i += 1;
            }
        }
        found
    }

    pub fn ground(&self, surface: &str, cfg: &GroundingConfig) -> Grounding {
        let surface = surface.trim();
        if surface.is_empty() {
            return Grounding::empty(MatchPath::NoMatch);
        }
        let exact = self.occurrences(surface);
        if !exact.is_empty() {
            return Grounding {
                spans: exact
                    .into_iter()
                    .map(|(start, end)| GroundedSpan {
                        start,
                        end,
                        score: 1.0,
                    })
                    .collect(),
                path: MatchPath::Exact,
                windows_scored: 0,
            };
        }
        let folded = self.occurrences_ignore_case(surface);
        if !folded.is_empty() {
            return Grounding {
                spans: folded
                    .into_iter()
                    .map(|(start, end)| GroundedSpan {
                        start,
                        end,
                        score: 1.0,
                    })
                    .collect(),
                path: MatchPath::CaseInsensitive,
                windows_scored: 0,
            };
        }
        self.ground_fuzzy(surface, cfg)
    }

    fn ground_fuzzy(&self, surface: &str, cfg: &GroundingConfig) -> Grounding {
        let prep = |s: &str| -> Vec<char> {
            if cfg.normalize {
                normalize(s).chars().collect()
            } else {
                s.chars().collect()
            }
        };
        let query = prep(surface);
        let q = tokenize(surface).len().max(1) as f64;
        let lo = ((q * (1.0 - cfg.window_slack)) + 1e-9).floor().max(1.0) as usize;
        let hi = ((q * (1.0 + cfg.window_slack)) - 1e-9).ceil().max(lo as f64) as usize;

        let ntok = self.tokens.len();
        let mut candidates = Vec::new();
        let mut scored = 0;
        for i in 0..ntok {
            for w in lo..=hi {
                if i + w > ntok {
                    break;
                }
                let start = self.tokens[i].start;
                let end = self.tokens[i + w - 1].end;
                let window = prep(self.slice(start, end));
                scored += 1;
                let score = ratio_chars(&query, &window);
                if score >= cfg.cutoff {
                    candidates.push(GroundedSpan { start, end, score });
                }
            }
        }
        candidates.sort_by(|x, y| {
            y.score
                .total_cmp(&x.score)
                .then(x.start.cmp(&y.start))
                .then((x.end - x.start).cmp(&(y.end - y.start)))
        });
        let mut chosen: Vec<GroundedSpan> = Vec::new();
        for cand in candidates {
            if chosen
                .iter()
                .all(|c| cand.end <= c.start || c.end <= cand.start)
            {
                chosen.push(cand);
            }
        }
        chosen.sort_by_key(|s| s.start);
        Grounding {
            path: if chosen.is_empty() {
                MatchPath::NoMatch
            } else {
                MatchPath::Fuzzy
            },
            spans: chosen,
            windows_scored: scored,
        }
    }
}

/// Free-function form: ground `surface` against `doc` using precomputed tokens.
pub fn ground(
    surface: &str,
    doc: &Document,
    tokens: &[Token],
    cfg: &GroundingConfig,
) -> Vec<(usize, usize)> {
    DocumentIndex::with_tokens(&doc.text, tokens.to_vec())
        .ground(surface, cfg)
        .spans
        .into_iter()
        .map(|s| (s.start, s.end))
        .collect()
}
