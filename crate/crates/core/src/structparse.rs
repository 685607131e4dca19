//! Structured rows out of free-text replies.
//!
//! [`parse_reply`] is total: any input yields a [`ParseOutcome`], possibly
//! empty. Table recognition is tolerant of the usual model slips (missing
//! outer pipes, ragged rows, missing separator rows), and each such fix is
//! counted in [`ParseOutcome::repairs`].

use serde::{Deserialize, Serialize};

/// Cells are trimmed and unescaped but otherwise verbatim; the extractors
/// strip emphasis and quotes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn width(&self) -> usize {
        self.header.len()
    }

    /// Canonical Markdown: outer pipes, one space padding, `---` separators.
    /// Pipes inside cells are escaped.
    pub fn to_markdown(&self) -> String {
        fn line(cells: &[String]) -> String {
            let mut s = String::from("|");
            for c in cells {
                s.push(' ');
                s.push_str(&c.replace('|', "\\|"));
                s.push_str(" |");
            }
            s
        }
        let mut out = line(&self.header);
        out.push('\n');
        out.push('|');
        for _ in &self.header {
            out.push_str(" --- |");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    fn column(&self, idx: usize) -> impl Iterator<Item = &str> {
        self.rows.iter().filter_map(move |r| r.get(idx).map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub tables: Vec<Table>,
    /// Bulleted or numbered list items found outside tables, marker removed.
    pub list_items: Vec<String>,
    pub repairs: usize,
}

impl ParseOutcome {
    pub fn is_empty(&self) -> bool {
        self.tables.is_empty() && self.list_items.is_empty()
    }
}

/// Cells that mean "nothing here".
pub const NULL_CELLS: &[&str] = &[
    "none",
    "n/a",
    "-",
    "",
    "null",
    "no entities",
    "no entities found",
];

/// Presence-column values that confirm a relation.
pub const AFFIRMATIVE: &[&str] = &["yes", "true", "y", "✓", "present", "1"];

pub fn is_null_cell(cell: &str) -> bool {
    let c = cell.trim();
    let c = c.trim_end_matches('.').trim();
    NULL_CELLS.iter().any(|n| c.eq_ignore_ascii_case(n))
}

struct RowLine {
    cells: Vec<String>,
    outer_pipes: bool,
}

/// Split on pipes that are neither escaped nor inside a backtick span.
/// Returns `None` when the line has no delimiter pipe at all.
fn split_row(line: &str) -> Option<RowLine> {
    let trimmed = line.trim();
    let mut pieces = Vec::new();
    let mut cur = String::new();
    let mut in_code = false;
    let mut delimiters = 0;
    let mut chars = trimmed.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                cur.push('|');
                chars.next();
            }
            '`' => {
                in_code = !in_code;
                cur.push(c);
            }
            '|' if !in_code => {
                delimiters += 1;
                pieces.push(std::mem::take(&mut cur));
            }
            _ => cur.push(c),
        }
    }
    pieces.push(cur);
    if delimiters == 0 {
        return None;
    }
    let leading = pieces.first().is_some_and(|p| p.trim().is_empty()) && trimmed.starts_with('|');
    let trailing = pieces.len() > 1
        && pieces.last().is_some_and(|p| p.trim().is_empty())
        && trimmed.ends_with('|')
        && !trimmed.ends_with("\\|");
    if trailing {
        pieces.pop();
    }
    if leading {
        pieces.remove(0);
    }
    let cells = pieces.iter().map(|p| p.trim().to_string()).collect();
    Some(RowLine {
        cells,
        outer_pipes: leading && trailing,
    })
}

fn is_separator(cells: &[String]) -> bool {
    !cells.is_empty()
        && cells.iter().all(|c| {
            let c = c.trim();
            let inner = c.strip_prefix(':').unwrap_or(c);
            let inner = inner.strip_suffix(':').unwrap_or(inner);
            !inner.is_empty() && inner.chars().all(|ch| ch == '-')
        })
}

const WRAPPERS: &[(&str, &str)] = &[
    ("**", "**"),
    ("__", "__"),
    ("`", "`"),
    ("*", "*"),
    ("_", "_"),
    ("\"", "\""),
    ("'", "'"),
    ("“", "”"),
    ("‘", "’"),
];

/// Strip surrounding emphasis, code and quote markers, repeatedly.
pub fn clean_cell(cell: &str) -> String {
    let mut s = cell.trim();
    loop {
        let before = s;
        for (open, close) in WRAPPERS {
            if s.len() > open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
                s = s[open.len()..s.len() - close.len()].trim();
                break;
            }
        }
        if s == before {
            return s.to_string();
        }
    }
}

fn list_marker(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for bullet in ['-', '*', '•', '+'] {
        if let Some(rest) = t.strip_prefix(bullet) {
            if rest.starts_with(char::is_whitespace) {
                return Some(rest.trim());
            }
        }
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        for delim in ['.', ')'] {
            if let Some(r) = rest.strip_prefix(delim) {
                if r.starts_with(char::is_whitespace) {
                    return Some(r.trim());
                }
            }
        }
    }
    None
}

fn finish_block(block: &mut Vec<RowLine>, out: &mut ParseOutcome) {
    let lines = std::mem::take(block);
    if lines.is_empty() {
        return;
    }
    let sep = lines.iter().position(|l| is_separator(&l.cells));
    let (header_idx, body_start) = match sep {
        Some(0) => {
            if lines.len() < 2 {
                return;
            }
            out.repairs += 1;
            (1, 2)
        }
        Some(s) => {
            out.repairs += s - 1;
            (s - 1, s + 1)
        }
        None => {
            if lines.len() < 2 {
                return;
            }
            out.repairs += 1;
            (0, 1)
        }
    };
    let header_line = &lines[header_idx];
    if !header_line.outer_pipes {
        out.repairs += 1;
    }
    let header: Vec<String> = header_line.cells.clone();
    let width = header.len();
    let mut rows = Vec::new();
    for line in lines.iter().skip(body_start) {
        if is_separator(&line.cells) {
            out.repairs += 1;
            continue;
        }
        if !line.outer_pipes {
            out.repairs += 1;
        }
        let mut cells = line.cells.clone();
        if cells.len() != width {
            out.repairs += 1;
            cells.resize(width, String::new());
        }
        rows.push(cells);
    }
    out.tables.push(Table { header, rows });
}

/// Find every pipe table and, outside tables, every list item in `text`.
pub fn parse_reply(text: &str) -> ParseOutcome {
    let mut out = ParseOutcome::default();
    let mut block: Vec<RowLine> = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.starts_with("```") || line.is_empty() {
            finish_block(&mut block, &mut out);
            continue;
        }
        if let Some(row) = split_row(line) {
            block.push(row);
            continue;
        }
        finish_block(&mut block, &mut out);
        if let Some(item) = list_marker(line) {
            if !item.is_empty() {
                out.list_items.push(item.to_string());
            }
        }
    }
    finish_block(&mut block, &mut out);
    out
}

/// Reduce a list item to the entity it names: drop any residual marker and a
/// trailing description after `": "` or `" - "`.
fn list_item_surface(item: &str) -> String {
    let mut s = list_marker(item).unwrap_or(item).trim();
    if let Some(rest) = s.strip_prefix("**") {
        if let Some(end) = rest.find("**") {
            return clean_cell(&rest[..end]);
        }
    }
    for sep in [": ", " - ", " – ", " — "] {
        if let Some(pos) = s.find(sep) {
            s = &s[..pos];
        }
    }
    clean_cell(s)
}

fn push_unique(out: &mut Vec<String>, cell: &str) {
    let cell = clean_cell(cell);
    if is_null_cell(&cell) || out.contains(&cell) {
        return;
    }
    out.push(cell);
}

fn header_column(table: &Table, needle: &str) -> Option<usize> {
    let needle = needle.to_lowercase();
    table
        .header
        .iter()
        .position(|h| h.to_lowercase().contains(&needle))
}

/// Entity strings from a single-column entity table, with list fallback.
pub fn extract_entity_surfaces(outcome: &ParseOutcome, expected_header: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut matched = false;
    for table in &outcome.tables {
        if let Some(col) = header_column(table, expected_header) {
            matched = true;
            for cell in table.column(col) {
                push_unique(&mut out, cell);
            }
        }
    }
    if matched {
        return out;
    }
    if let Some(last) = outcome.tables.last() {
        for cell in last.column(0) {
            push_unique(&mut out, cell);
        }
        return out;
    }
    for item in &outcome.list_items {
        push_unique(&mut out, &list_item_surface(item));
    }
    out
}

/// `(entity, type label)` pairs from a two-column table such as the AEiO or
/// conflict-resolution output. Tables with an entity and a type column are
/// preferred; otherwise the last table of width ≥ 2 is read positionally.
pub fn extract_typed_entities(outcome: &ParseOutcome) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut push = |surface: &str, label: &str| {
        let surface = clean_cell(surface);
        let label = clean_cell(label);
        if is_null_cell(&surface) || is_null_cell(&label) {
            return;
        }
        let pair = (surface, label);
        if !out.contains(&pair) {
            out.push(pair);
        }
    };
    let mut matched = false;
    for table in &outcome.tables {
        let Some(ecol) = header_column(table, "entity") else {
            continue;
        };
        let tcol = table
            .header
            .iter()
            .enumerate()
            .position(|(i, h)| i != ecol && h.to_lowercase().contains("type"));
        let Some(tcol) = tcol else { continue };
        matched = true;
        for row in &table.rows {
            push(&row[ecol], &row[tcol]);
        }
    }
    if !matched {
        if let Some(table) = outcome.tables.iter().rev().find(|t| t.width() >= 2) {
            for row in &table.rows {
                push(&row[0], &row[1]);
            }
        }
    }
    out
}

fn is_affirmative(cell: &str, tokens: &[&str]) -> bool {
    let stripped: String = cell
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .trim()
        .to_lowercase();
    tokens.iter().any(|t| *t == stripped)
}

/// Relation constituents from presence-column tables, using [`AFFIRMATIVE`].
pub fn extract_relation_rows(outcome: &ParseOutcome, arity: usize) -> Vec<Vec<String>> {
    extract_relation_rows_with(outcome, arity, AFFIRMATIVE)
}

/// Rows from tables with at least `arity + 1` columns whose final (presence)
/// cell is affirmative, projected to their first `arity` cells. Rows with a
/// null constituent are dropped.
pub fn extract_relation_rows_with(
    outcome: &ParseOutcome,
    arity: usize,
    affirmative: &[&str],
) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if arity < 2 {
        return out;
    }
    for table in outcome.tables.iter().filter(|t| t.width() > arity) {
        for row in &table.rows {
            let presence = &row[row.len() - 1];
            if !is_affirmative(presence, affirmative) {
                continue;
            }
            let cells: Vec<String> = row[..arity].iter().map(|c| clean_cell(c)).collect();
            if cells.iter().any(|c| is_null_cell(c)) {
                continue;
            }
            if !out.contains(&cells) {
                out.push(cells);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(header: &[&str], rows: &[&[&str]]) -> Table {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    #[test]
    fn minimal_table() {
        let out = parse_reply("| Entity |\n|---|\n| Paris |");
        assert_eq!(out.tables, vec![table(&["Entity"], &[&["Paris"]])]);
        assert_eq!(out.repairs, 0);
        assert!(out.list_items.is_empty());
    }

    #[test]
    fn missing_outer_pipes_and_bold() {
        let out = parse_reply("Entity | Type\n--- | ---\n**Paris** | `LOC`\nLondon | LOC");
        assert_eq!(
            out.tables,
            vec![table(&["Entity", "Type"], &[&["**Paris**", "`LOC`"], &["London", "LOC"]])]
        );
        assert!(out.repairs > 0);
        assert_eq!(
            extract_typed_entities(&out),
            vec![("Paris".to_string(), "LOC".to_string()), ("London".to_string(), "LOC".to_string())]
        );
    }

    #[test]
    fn prose_only_is_empty() {
        let out = parse_reply("There are no such entities.");
        assert!(out.tables.is_empty());
        assert!(out.list_items.is_empty());
        assert_eq!(out.repairs, 0);
    }

    #[test]
    fn ragged_rows_are_padded_and_truncated() {
        let out = parse_reply("| A | B |\n|---|---|\n| 1 |\n| 2 | 3 | 4 |");
        assert_eq!(out.tables[0].rows, vec![vec!["1", ""], vec!["2", "3"]]);
        assert_eq!(out.repairs, 2);
    }

    #[test]
    fn missing_separator_row_is_tolerated() {
        let out = parse_reply("| Entity |\n| Paris |\n| Rome |");
        assert_eq!(out.tables[0].header, vec!["Entity"]);
        assert_eq!(out.tables[0].rows.len(), 2);
        assert_eq!(out.repairs, 1);
    }

    #[test]
    fn backticks_shield_pipes() {
        let out = parse_reply("| Material | Value |\n|---|---|\n| `poly(A|B)` | 3 |");
        assert_eq!(out.tables[0].rows[0], vec!["`poly(A|B)`", "3"]);
        assert_eq!(extract_entity_surfaces(&out, "material"), vec!["poly(A|B)"]);
    }

    #[test]
    fn escaped_pipe_is_literal() {
        let out = parse_reply("| A | B |\n|---|---|\n| x\\|y | z |");
        assert_eq!(out.tables[0].rows[0], vec!["x|y", "z"]);
    }

    #[test]
    fn lists_outside_tables() {
        let out = parse_reply("Entities:\n1. Paris\n2) London\n- Rome\n* Oslo\n• Bern\nnot a list");
        assert_eq!(out.list_items, vec!["Paris", "London", "Rome", "Oslo", "Bern"]);
    }

    #[test]
    fn multiple_tables_separated_by_prose() {
        let text = "| Entity |\n|---|\n| A |\n\nSome words.\n\n| Entity |\n|---|\n| B |\n";
        let out = parse_reply(text);
        assert_eq!(out.tables.len(), 2);
    }

    #[test]
    fn fenced_table() {
        let out = parse_reply("```markdown\n| Entity |\n|---|\n| Paris |\n```");
        assert_eq!(out.tables[0].rows, vec![vec!["Paris"]]);
    }

    #[test]
    fn surfaces_filter_nulls() {
        let outcome = ParseOutcome {
            tables: vec![table(&["Entity"], &[&["Paris"], &["None"]])],
            ..Default::default()
        };
        assert_eq!(extract_entity_surfaces(&outcome, "Entity"), vec!["Paris"]);
    }

    #[test]
    fn surfaces_fall_back_to_list() {
        let outcome = ParseOutcome {
            list_items: vec!["1. Paris".into(), "2. London".into()],
            ..Default::default()
        };
        assert_eq!(extract_entity_surfaces(&outcome, "Entity"), vec!["Paris", "London"]);
    }

    #[test]
    fn surfaces_prefer_matching_header() {
        let outcome = ParseOutcome {
            tables: vec![
                table(&["Reasoning"], &[&["it is a city"]]),
                table(&["Entity"], &[&["Paris"]]),
            ],
            ..Default::default()
        };
        assert_eq!(extract_entity_surfaces(&outcome, "entity"), vec!["Paris"]);
    }

    #[test]
    fn surfaces_use_last_table_first_column_without_header_match() {
        let outcome = ParseOutcome {
            tables: vec![
                table(&["Name"], &[&["Rome"]]),
                table(&["Name", "Why"], &[&["Paris", "city"], &["Paris", "again"]]),
            ],
            ..Default::default()
        };
        assert_eq!(extract_entity_surfaces(&outcome, "Entity"), vec!["Paris"]);
    }

    #[test]
    fn list_items_lose_descriptions() {
        let outcome = parse_reply("- **John Smith**: a person\n- Mary - the mayor\n- state-of-the-art");
        assert_eq!(
            extract_entity_surfaces(&outcome, "Entity"),
            vec!["John Smith", "Mary", "state-of-the-art"]
        );
    }

    #[test]
    fn relation_rows_presence_filter() {
        let outcome = ParseOutcome {
            tables: vec![table(
                &["Organization", "Location", "Relation Present"],
                &[
                    &["Acme Corp", "Boston", "Yes"],
                    &["Acme Corp", "Chicago", "No"],
                    &["Acme Corp", "N/A", "Yes"],
                    &["Beta Inc", "Denver", "yes."],
                ],
            )],
            ..Default::default()
        };
        assert_eq!(
            extract_relation_rows(&outcome, 2),
            vec![vec!["Acme Corp", "Boston"], vec!["Beta Inc", "Denver"]]
        );
    }

    #[test]
    fn relation_rows_need_presence_column() {
        let outcome = ParseOutcome {
            tables: vec![table(&["Org", "Loc"], &[&["Acme", "Boston"]])],
            ..Default::default()
        };
        assert!(extract_relation_rows(&outcome, 2).is_empty());
        assert!(extract_relation_rows(&outcome, 1).is_empty());
    }

    #[test]
    fn custom_affirmative_tokens() {
        let outcome = ParseOutcome {
            tables: vec![table(&["A", "B", "P"], &[&["x", "y", "oui"]])],
            ..Default::default()
        };
        assert!(extract_relation_rows(&outcome, 2).is_empty());
        assert_eq!(extract_relation_rows_with(&outcome, 2, &["oui"]).len(), 1);
    }

    #[test]
    fn typed_entities_from_header_or_position() {
        let out = parse_reply("| Entity | Entity Type |\n|---|---|\n| Paris | location |\n| None | person |");
        assert_eq!(extract_typed_entities(&out), vec![("Paris".into(), "location".into())]);
        let out = parse_reply("| Span | Label |\n|---|---|\n| Washington | LOC |");
        assert_eq!(extract_typed_entities(&out), vec![("Washington".into(), "LOC".into())]);
    }

    #[test]
    fn canonical_markdown_reparses_cleanly() {
        let t = table(&["Entity", "Type"], &[&["a|b", "x"], &["", "y"]]);
        let out = parse_reply(&t.to_markdown());
        assert_eq!(out.tables, vec![t]);
        assert_eq!(out.repairs, 0);
    }

    #[test]
    fn null_cells() {
        for c in ["None", "n/a", "-", "", "NULL", "No entities", "No entities found.", "none."] {
            assert!(is_null_cell(c), "{c}");
        }
        assert!(!is_null_cell("Nonetheless"));
    }
}
