//! Corpus ingestion, filtering and deduplication, ratio-controlled mixing
//! and byte-level tokenization.

mod dedup;
mod document;
mod filter;
mod mix;
pub mod tokenizer;

pub use dedup::{
    content_hash, exact_dedup, jaccard, ngram_dedup, normalize, shingles, ExactDedup, NearDedup,
    DEFAULT_SHINGLE, DEFAULT_THRESHOLD,
};
pub use document::{
    ingest, ingest_all, Document, DocumentReader, InputFormat, JsonlReader, TxtDirReader,
};
pub use filter::{charset_ratio, filter_chain, reduction_pct, FilterChain, FilterReport, Rule};
pub use mix::{apportion, mix_sampler, realized_shares, MixItem, MixSpec, MixUnit, OnExhausted};
pub use tokenizer::{detokenize, tokenize};
