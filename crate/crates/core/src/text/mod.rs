//! Instruction text machinery: sentence splitting, tokenization, tagging,
//! masking with guiding-signal protection, and instruction-quality metrics.

pub mod mask;
pub mod nlg;
pub mod tagger;
pub mod tokenize;
pub mod vocab;

use thiserror::Error;

pub use mask::{
    mask_instruction, mask_template, mask_tokens, InstructionTemplate, MaskMode, MaskPolicy, PhraseTable, Signal,
    TemplateToken, MASK,
};
pub use nlg::{bleu, corpus_bleu, infill_count, match_rate, nlg_report, rouge_l, NlgReport};
pub use tagger::{pos_tag, tag_instruction, LexiconTagger, Tagger};
pub use tokenize::{split_and_tokenize, Instruction, Sentence, Style, Token};
pub use vocab::Vocab;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("instruction text is empty")]
    Empty,
    #[error("{tags} tags supplied for {tokens} tokens")]
    TagCount { tokens: usize, tags: usize },
    #[error("phrase table: {0}")]
    Config(String),
}

/// Ordered guiding signals of a token list under the default phrase table.
pub fn guiding_signals<S: AsRef<str>>(tokens: &[S]) -> Vec<Signal> {
    PhraseTable::default().guiding_signals(tokens)
}
