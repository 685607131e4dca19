//! Generate-and-organize (G&O) information extraction.
//!
//! The crate drives staged LLM conversations for zero-shot named entity
//! recognition and end-to-end relation extraction, parses the structured
//! replies, grounds the extracted strings back to character spans, resolves
//! entity-type conflicts, exports BIO2 pseudo-labels and scores predictions
//! with partial and full span matching.
//!
//! Module map:
//!
//! - [`schema`]: documents, mentions, task schemas and the corpus JSONL format.
//! - [`prompting`]: conversation plans rendered from editable templates.
//! - [`backend`]: chat-completion execution with caching, retries and replay.
//! - [`pipeline`]: per-document orchestration, grounding and the CR pass.
//! - [`structparse`]: Markdown table / list extraction from free text.
//! - [`grounding`]: tokenization and Ratcliff/Obershelp fuzzy alignment.
//! - [`labels`]: conflict detection, random tie-break and BIO2/CoNLL export.
//! - [`evaluation`]: partial/full matching, micro and macro scores.
//! - [`cli`]: the `gno` command line.

pub mod backend;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod grounding;
pub mod labels;
pub mod pipeline;
pub mod prompting;
pub mod schema;
pub mod structparse;

mod matching;

pub use error::{Error, Result};
