use serde::{Deserialize, Serialize};

use super::TextError;

/// Part-of-speech tag (Penn Treebank label).
pub type PosTag = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Style {
    Human,
    Machine,
    StyleTransferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// `None` means untagged; untagged tokens are never masked.
    pub tag: Option<PosTag>,
}

impl Token {
    pub fn new(text: impl Into<String>) -> Self {
        Token { text: text.into(), tag: None }
    }

    pub fn tagged(text: impl Into<String>, tag: &str) -> Self {
        Token { text: text.into(), tag: Some(tag.to_string()) }
    }

    pub fn norm(&self) -> String {
        self.text.to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub raw: String,
    pub sentences: Vec<Sentence>,
    pub style: Style,
}

impl Instruction {
    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.sentences.iter().flat_map(|s| s.tokens.iter())
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    /// Tokens joined by single spaces.
    pub fn normalized_text(&self) -> String {
        self.tokens().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn lower_tokens(&self) -> Vec<String> {
        self.tokens().map(Token::norm).collect()
    }

    /// Attaches gold tags, one per token in reading order.
    pub fn with_tags(mut self, tags: &[String]) -> Result<Self, TextError> {
        if tags.len() != self.token_count() {
            return Err(TextError::TagCount { tokens: self.token_count(), tags: tags.len() });
        }
        let mut it = tags.iter();
        for tok in self.sentences.iter_mut().flat_map(|s| s.tokens.iter_mut()) {
            let t = it.next().expect("length checked");
            tok.tag = if t.is_empty() || t == "UNTAGGED" { None } else { Some(t.clone()) };
        }
        Ok(self)
    }

    pub fn tags(&self) -> Vec<String> {
        self.tokens().map(|t| t.tag.clone().unwrap_or_else(|| "UNTAGGED".into())).collect()
    }

    pub fn is_tagged(&self) -> bool {
        self.tokens().all(|t| t.tag.is_some() || is_punct(&t.text))
    }
}

pub(crate) fn is_sentence_end(tok: &str) -> bool {
    matches!(tok, "." | "!" | "?")
}

fn is_punct(tok: &str) -> bool {
    tok.chars().all(|c| c.is_ascii_punctuation())
}

const SPLIT_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];
const CLITICS: &[&str] = &["n't", "'ll", "'re", "'ve", "'s", "'d", "'m"];

fn split_word(word: &str, out: &mut Vec<String>) {
    let mut cur = String::new();
    for ch in word.chars() {
        if SPLIT_PUNCT.contains(&ch) {
            if !cur.is_empty() {
                push_with_clitic(std::mem::take(&mut cur), out);
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        push_with_clitic(cur, out);
    }
}

fn push_with_clitic(word: String, out: &mut Vec<String>) {
    let lower = word.to_lowercase();
    for c in CLITICS {
        if lower.len() > c.len() && lower.ends_with(c) {
            let cut = word.len() - c.len();
            out.push(word[..cut].to_string());
            out.push(word[cut..].to_string());
            return;
        }
    }
    out.push(word);
}

/// Splits raw text into sentences at '.', '!' and '?' and tokenizes on
/// whitespace and punctuation. Case is preserved. A final sentence without
/// a terminator gets a '.' appended.
pub fn split_and_tokenize(raw: &str, style: Style) -> Result<Instruction, TextError> {
    if raw.trim().is_empty() {
        return Err(TextError::Empty);
    }
    let mut words = Vec::new();
    for w in raw.split_whitespace() {
        split_word(w, &mut words);
    }
    let mut sentences = Vec::new();
    let mut cur: Vec<Token> = Vec::new();
    for w in words {
        let end = is_sentence_end(&w);
        if end && cur.is_empty() {
            // stray terminator ("...", "?!") attaches to the previous sentence
            if let Some(last) = sentences.last_mut() {
                let s: &mut Sentence = last;
                s.tokens.push(Token::new(w));
            }
            continue;
        }
        cur.push(Token::new(w));
        if end {
            sentences.push(Sentence { tokens: std::mem::take(&mut cur) });
        }
    }
    if !cur.is_empty() {
        cur.push(Token::new("."));
        sentences.push(Sentence { tokens: cur });
    }
    if sentences.is_empty() {
        return Err(TextError::Empty);
    }
    Ok(Instruction { raw: raw.to_string(), sentences, style })
}

/// Groups a flat token list into sentences ending at terminators.
pub(crate) fn group_sentences<T, F: Fn(&T) -> bool>(items: Vec<T>, is_end: F) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for it in items {
        let end = is_end(&it);
        cur.push(it);
        if end {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lower(s: &Sentence) -> Vec<String> {
        s.tokens.iter().map(Token::norm).collect()
    }

    #[test]
    fn two_short_sentences() {
        let i = split_and_tokenize("Turn left. Stop.", Style::Human).unwrap();
        assert_eq!(i.sentences.len(), 2);
        assert_eq!(lower(&i.sentences[0]), ["turn", "left", "."]);
        assert_eq!(lower(&i.sentences[1]), ["stop", "."]);
        // case is kept in storage
        assert_eq!(i.sentences[0].tokens[0].text, "Turn");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(split_and_tokenize("", Style::Human), Err(TextError::Empty)));
        assert!(matches!(split_and_tokenize("  \n\t", Style::Human), Err(TextError::Empty)));
    }

    #[test]
    fn machine_instruction_has_two_sentences() {
        let raw = "Head northwest on E 23rd St toward 2nd Ave. Turn left at the 2nd cross street onto 3rd Ave.";
        let i = split_and_tokenize(raw, Style::Machine).unwrap();
        assert_eq!(i.sentences.len(), 2);
        assert_eq!(i.sentences[0].tokens.len(), 10);
    }

    #[test]
    fn terminator_is_appended_and_clitics_split() {
        let i = split_and_tokenize("You'll see the building's awning, then stop", Style::Human).unwrap();
        assert_eq!(
            i.normalized_text(),
            "You 'll see the building 's awning , then stop ."
        );
        for s in &i.sentences {
            assert!(is_sentence_end(&s.tokens.last().unwrap().text));
            assert!(s.tokens.iter().all(|t| !t.text.is_empty()));
        }
    }

    #[test]
    fn stray_terminators_attach() {
        let i = split_and_tokenize("Stop here!? Then go.", Style::Human).unwrap();
        assert_eq!(i.sentences.len(), 2);
        assert_eq!(lower(&i.sentences[0]), ["stop", "here", "!", "?"]);
    }

    #[test]
    fn gold_tags_attach_in_order() {
        let i = split_and_tokenize("Turn left.", Style::Human).unwrap();
        let i = i.with_tags(&["VB".into(), "NN".into(), ".".into()]).unwrap();
        assert_eq!(i.tags(), ["VB", "NN", "."]);
        assert!(split_and_tokenize("Turn left.", Style::Human).unwrap().with_tags(&["VB".into()]).is_err());
    }
}
