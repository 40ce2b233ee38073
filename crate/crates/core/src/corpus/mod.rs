//! Tokenization, the pretraining chunker and the synthetic task suite.

pub mod chunk;
pub mod tasks;
pub mod tokenizer;

pub use chunk::{chunk_split, ChunkTriple};
pub use tasks::{
    format_example, make_task_suite, suite_from_manifest, suite_manifest, Example, Formatted, PromptMode, Split,
    SyntheticTask, Transform,
};

/// Bundled public-domain prose for self-contained pretraining runs.
pub const SAMPLE_TEXT: &str = include_str!("../../data/sample.txt");

/// Fixed-length token windows over `text`, stepping by `stride`.
pub fn windows(text: &str, len: usize, stride: usize) -> Vec<Vec<u32>> {
    let toks = tokenizer::encode(text);
    if toks.len() < len || len == 0 {
        return if toks.is_empty() { Vec::new() } else { vec![toks] };
    }
    (0..=toks.len() - len)
        .step_by(stride.max(1))
        .map(|s| toks[s..s + len].to_vec())
        .collect()
}
