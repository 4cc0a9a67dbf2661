use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::tokenize::{Instruction, Token};
use super::TextError;

pub const MASK: &str = "[MASK]";

/// Tags whose tokens are masked out (and counted as infilled tokens).
pub const DEFAULT_MASKABLE_TAGS: [&str; 16] = [
    "JJ", "JJR", "JJS", "NN", "NNS", "NNP", "NNPS", "PDT", "POS", "RB", "RBR", "RBS", "PRP$", "PRP", "MD", "CD",
];

const DEFAULT_PHRASES: &str = include_str!("../../data/phrases.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Signal {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskMode {
    /// Object-related tokens of human instructions.
    ObjectMask,
    /// Street names of machine-generated instructions.
    StreetnameMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidingPhrase {
    pub phrase: String,
    pub signal: Signal,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProtectedPhrases {
    pub phrases: Vec<String>,
}

/// The phrase table: guiding-signal phrases plus extra protected phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseTable {
    pub guiding: Vec<GuidingPhrase>,
    #[serde(default)]
    pub protected: ProtectedPhrases,
}

impl Default for PhraseTable {
    fn default() -> Self {
        PhraseTable::from_toml(DEFAULT_PHRASES).expect("bundled phrase table parses")
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Pattern {
    words: Vec<String>,
    signal: Option<Signal>,
}

impl PhraseTable {
    pub fn from_toml(text: &str) -> Result<Self, TextError> {
        toml::from_str(text).map_err(|e| TextError::Config(e.to_string()))
    }

    /// All patterns, longest first so longer phrases win at a position.
    fn patterns(&self) -> Vec<Pattern> {
        let split = |p: &str| p.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>();
        let mut out: Vec<Pattern> = self
            .guiding
            .iter()
            .map(|g| Pattern { words: split(&g.phrase), signal: Some(g.signal) })
            .chain(self.protected.phrases.iter().map(|p| Pattern { words: split(p), signal: None }))
            .filter(|p| !p.words.is_empty())
            .collect();
        out.sort_by(|a, b| b.words.len().cmp(&a.words.len()));
        out
    }

    /// Non-overlapping phrase matches scanning left to right: (start, end, signal).
    fn matches(&self, words: &[String]) -> Vec<(usize, usize, Option<Signal>)> {
        let patterns = self.patterns();
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let hit = patterns.iter().find(|p| words[i..].starts_with(&p.words));
            match hit {
                Some(p) => {
                    out.push((i, i + p.words.len(), p.signal));
                    i += p.words.len();
                }
                None => i += 1,
            }
        }
        out
    }

    /// Ordered left/right guidance found in a token list.
    pub fn guiding_signals<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Signal> {
        let words: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();
        self.matches(&words).into_iter().filter_map(|(_, _, s)| s).collect()
    }

    /// Token spans `[start, end)` that masking must leave intact.
    pub fn protected_spans<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<(usize, usize)> {
        let words: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();
        self.matches(&words).into_iter().map(|(s, e, _)| (s, e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub maskable_tags: BTreeSet<String>,
    pub phrases: PhraseTable,
    pub mode: MaskMode,
}

impl MaskPolicy {
    pub fn new(mode: MaskMode) -> Self {
        MaskPolicy {
            maskable_tags: DEFAULT_MASKABLE_TAGS.iter().map(|s| s.to_string()).collect(),
            phrases: PhraseTable::default(),
            mode,
        }
    }

    pub fn is_maskable(&self, tok: &Token) -> bool {
        tok.text != MASK && tok.tag.as_ref().is_some_and(|t| self.maskable_tags.contains(t))
    }
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::new(MaskMode::ObjectMask)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateToken {
    Word(Token),
    Mask,
}

impl TemplateToken {
    pub fn text(&self) -> &str {
        match self {
            TemplateToken::Word(t) => &t.text,
            TemplateToken::Mask => MASK,
        }
    }

    pub fn is_mask(&self) -> bool {
        matches!(self, TemplateToken::Mask)
    }
}

/// Masked instruction skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub tokens: Vec<TemplateToken>,
    /// Protected `[start, end)` spans, indexed over the origin's tokens.
    pub protected_spans: Vec<(usize, usize)>,
    /// Per origin token: whether it survived masking.
    pub kept: Vec<bool>,
    pub origin_raw: String,
}

impl InstructionTemplate {
    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(TemplateToken::text).collect()
    }

    /// Lowercased rendering joined by spaces.
    pub fn render(&self) -> String {
        self.tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Word(w) => w.norm(),
                TemplateToken::Mask => MASK.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Template tokens grouped into sentences at full stops.
    pub fn sentences(&self) -> Vec<Vec<&TemplateToken>> {
        super::tokenize::group_sentences(self.tokens.iter().collect(), |t| {
            super::tokenize::is_sentence_end(t.text())
        })
    }

    /// Re-reads the template as a tagged token stream ([MASK] untagged).
    pub fn as_tokens(&self) -> Vec<Token> {
        self.tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Word(w) => w.clone(),
                TemplateToken::Mask => Token::new(MASK),
            })
            .collect()
    }
}

/// Masks a tagged token stream. Existing [MASK] tokens are kept and runs of
/// masks collapse into one.
pub fn mask_tokens(tokens: &[Token], policy: &MaskPolicy, origin_raw: &str) -> InstructionTemplate {
    let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
    let spans = policy.phrases.protected_spans(&texts);
    let mut protected = vec![false; tokens.len()];
    for &(s, e) in &spans {
        protected[s..e].iter_mut().for_each(|p| *p = true);
    }
    let mut out: Vec<TemplateToken> = Vec::with_capacity(tokens.len());
    let mut kept = Vec::with_capacity(tokens.len());
    for (tok, &prot) in tokens.iter().zip(&protected) {
        let masked = tok.text == MASK || (!prot && policy.is_maskable(tok));
        kept.push(!masked);
        if masked {
            if !out.last().is_some_and(TemplateToken::is_mask) {
                out.push(TemplateToken::Mask);
            }
        } else {
            out.push(TemplateToken::Word(tok.clone()));
        }
    }
    InstructionTemplate { tokens: out, protected_spans: spans, kept, origin_raw: origin_raw.to_string() }
}

/// Replaces tag-selected tokens by [MASK], protecting guiding phrases.
/// The instruction must already be tagged.
pub fn mask_instruction(instr: &Instruction, policy: &MaskPolicy) -> InstructionTemplate {
    let tokens: Vec<Token> = instr.tokens().cloned().collect();
    mask_tokens(&tokens, policy, &instr.raw)
}

/// Masks a template again; a no-op on templates produced by the same policy.
pub fn mask_template(t: &InstructionTemplate, policy: &MaskPolicy) -> InstructionTemplate {
    let mut out = mask_tokens(&t.as_tokens(), policy, &t.origin_raw);
    out.kept = t.kept.clone();
    out.protected_spans = t.protected_spans.clone();
    out
}
