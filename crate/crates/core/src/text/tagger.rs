use std::collections::HashMap;

use super::tokenize::{Instruction, Sentence, Token};

/// Injectable part-of-speech tagger.
pub trait Tagger: Send + Sync {
    /// Returns one tag (or `None` for unknown) per token.
    fn tag_tokens(&self, tokens: &[&str]) -> Vec<Option<String>>;
}

/// Fills missing tags in a sentence. Tokens that already carry a tag (gold
/// tags shipped with a dataset) are left untouched.
pub fn pos_tag(sentence: &Sentence, tagger: &dyn Tagger) -> Sentence {
    if sentence.tokens.iter().all(|t| t.tag.is_some()) {
        return sentence.clone();
    }
    let texts = sentence.texts();
    let tags = tagger.tag_tokens(&texts);
    let tokens = sentence
        .tokens
        .iter()
        .zip(tags)
        .map(|(t, tag)| Token { text: t.text.clone(), tag: t.tag.clone().or(tag) })
        .collect();
    Sentence { tokens }
}

pub fn tag_instruction(instr: &Instruction, tagger: &dyn Tagger) -> Instruction {
    Instruction {
        raw: instr.raw.clone(),
        sentences: instr.sentences.iter().map(|s| pos_tag(s, tagger)).collect(),
        style: instr.style,
    }
}

const LEXICON: &[(&str, &[&str])] = &[
    ("DT", &["the", "a", "an", "this", "that", "these", "those", "each", "every", "another", "no", "some", "any"]),
    ("PDT", &["all", "both", "half"]),
    ("IN", &[
        "at", "on", "in", "to", "toward", "towards", "onto", "into", "past", "through", "until", "till", "from",
        "of", "with", "by", "along", "across", "under", "over", "near", "behind", "between", "after", "before",
        "beside", "around", "as", "so", "if", "like", "against", "beyond", "via", "up", "down", "off", "out",
    ]),
    ("CC", &["and", "or", "but", "nor", "then"]),
    ("PRP", &["you", "it", "they", "we", "i", "he", "she", "yourself", "them", "us", "me", "him", "her"]),
    ("PRP$", &["your", "its", "their", "my", "our", "his"]),
    ("MD", &["will", "would", "can", "could", "should", "may", "might", "must", "shall", "'ll", "'d"]),
    ("VB", &[
        "turn", "go", "head", "take", "make", "stop", "continue", "walk", "travel", "pass", "keep", "follow",
        "orient", "face", "see", "reach", "move", "proceed", "bear", "veer", "be", "get", "look", "enter",
        "drive", "come", "find", "leave", "start", "do", "hang",
    ]),
    ("VBZ", &["is", "has", "'s"]),
    ("VBP", &["are", "'re", "have", "'ve", "'m"]),
    ("VBG", &["facing", "going", "heading", "moving", "walking", "traveling", "passing", "following"]),
    ("VBD", &["was", "were", "went", "saw"]),
    ("VBN", &["left", "parked", "painted", "stripped", "striped"]),
    ("WRB", &["when", "where", "once"]),
    ("WDT", &["which", "whichever"]),
    ("EX", &["there"]),
    ("RB", &[
        "straight", "again", "slightly", "ahead", "just", "twice", "here", "forward", "back", "north", "south",
        "east", "west", "northwest", "northeast", "southwest", "southeast", "not", "n't", "also", "immediately",
        "soon", "still", "only", "almost", "very", "away", "directly",
    ]),
    ("JJ", &[
        "red", "black", "white", "green", "blue", "yellow", "orange", "brown", "gray", "grey", "big", "small",
        "large", "tall", "first", "second", "third", "next", "same", "last", "other", "few", "open", "narrow",
        "wide", "short", "long", "cross", "old", "new", "brick", "glass", "many",
    ]),
    ("JJR", &["bigger", "larger", "taller", "further", "farther"]),
    ("JJS", &["biggest", "largest", "tallest", "nearest"]),
    ("NN", &[
        "street", "light", "corner", "intersection", "block", "building", "awning", "tree", "car", "road",
        "traffic", "lane", "flow", "side", "end", "scaffolding", "store", "sign", "avenue", "right", "way",
        "crosswalk", "bus", "bike", "truck", "van", "taxi", "fence", "door", "entrance", "restaurant", "shop",
        "park", "church", "school", "hydrant", "pole", "lamp", "bench", "parking", "garage", "bridge", "wall",
        "direction", "stoplight", "construction", "hotel", "bank", "deli", "cafe", "sidewalk", "tunnel",
        "plaza", "square", "flag", "window", "mural", "gate", "hospital", "trash", "can", "mailbox",
    ]),
    ("NNS", &["lights", "trees", "cars", "buildings", "awnings", "streets", "lanes", "signs", "stores", "blocks"]),
    ("NNP", &["st", "ave", "blvd", "rd", "dr", "pl", "manhattan", "broadway", "e", "w", "n", "s"]),
];

/// Deterministic lexicon tagger with suffix rules for words not in the
/// lexicon. Closed-class lookup first; then numerals, ordinals, capitalised
/// words in non-initial position (proper nouns) and common suffixes.
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    lexicon: HashMap<String, String>,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        let mut lexicon = HashMap::new();
        for (tag, words) in LEXICON {
            for w in *words {
                lexicon.insert((*w).to_string(), (*tag).to_string());
            }
        }
        LexiconTagger { lexicon }
    }
}

impl LexiconTagger {
    pub fn with_entries<I: IntoIterator<Item = (String, String)>>(mut self, entries: I) -> Self {
        self.lexicon.extend(entries);
        self
    }

    fn tag_one(&self, word: &str, sentence_initial: bool) -> Option<String> {
        if word.chars().all(|c| c.is_ascii_punctuation()) {
            return Some(word.to_string());
        }
        let lower = word.to_lowercase();
        let capitalised = word.chars().next().is_some_and(char::is_uppercase);
        if capitalised && !sentence_initial && !self.lexicon.contains_key(&lower) {
            return Some("NNP".into());
        }
        if let Some(t) = self.lexicon.get(&lower) {
            // capitalised lexicon nouns inside a sentence are names ("Park Ave")
            if capitalised && !sentence_initial && t == "NN" {
                return Some("NNP".into());
            }
            return Some(t.clone());
        }
        if lower.chars().all(|c| c.is_ascii_digit()) {
            return Some("CD".into());
        }
        let is_ordinal = lower.len() > 2
            && lower[..lower.len() - 2].chars().all(|c| c.is_ascii_digit())
            && ["st", "nd", "rd", "th"].iter().any(|s| lower.ends_with(s));
        if is_ordinal {
            return Some("JJ".into());
        }
        let suffix = |s: &str| lower.len() > s.len() + 2 && lower.ends_with(s);
        if suffix("ly") {
            Some("RB".into())
        } else if suffix("ing") {
            Some("VBG".into())
        } else if suffix("ed") {
            Some("VBD".into())
        } else if suffix("est") {
            Some("JJS".into())
        } else if suffix("tion") || suffix("ment") || suffix("ness") {
            Some("NN".into())
        } else if suffix("s") && self.lexicon.get(&lower[..lower.len() - 1]).is_some_and(|t| t == "NN") {
            Some("NNS".into())
        } else {
            None
        }
    }
}

impl Tagger for LexiconTagger {
    fn tag_tokens(&self, tokens: &[&str]) -> Vec<Option<String>> {
        tokens.iter().enumerate().map(|(i, w)| self.tag_one(w, i == 0)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize::{split_and_tokenize, Style};

    fn tags(words: &[&str]) -> Vec<Option<String>> {
        LexiconTagger::default().tag_tokens(words)
    }

    #[test]
    fn lexicon_fixture() {
        assert_eq!(tags(&["the", "street"]), [Some("DT".into()), Some("NN".into())]);
        assert_eq!(tags(&["the", "2nd"])[1].as_deref(), Some("JJ"));
        assert_eq!(tags(&["about", "23"])[1].as_deref(), Some("CD"));
        assert_eq!(tags(&["on", "Lexington", "Ave"])[1..], [Some("NNP".into()), Some("NNP".into())]);
        assert_eq!(tags(&["Turn", "quickly"]), [Some("VB".into()), Some("RB".into())]);
        assert_eq!(tags(&["zzyzx"]), [None]);
        assert_eq!(tags(&["."]), [Some(".".into())]);
    }

    #[test]
    fn gold_tags_bypass_tagger() {
        let s = split_and_tokenize("the street .", Style::Human).unwrap();
        let s = s.with_tags(&["DT".into(), "JJ".into(), ".".into()]).unwrap();
        let tagged = tag_instruction(&s, &LexiconTagger::default());
        assert_eq!(tagged.tags(), ["DT", "JJ", "."]);
    }

    #[test]
    fn partially_tagged_sentences_keep_existing_tags() {
        let mut s = split_and_tokenize("the street .", Style::Human).unwrap().sentences.remove(0);
        s.tokens[1].tag = Some("VB".into());
        let out = pos_tag(&s, &LexiconTagger::default());
        assert_eq!(out.tokens[0].tag.as_deref(), Some("DT"));
        assert_eq!(out.tokens[1].tag.as_deref(), Some("VB"));
    }
}
