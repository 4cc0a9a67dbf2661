//! Instruction-quality metrics: corpus BLEU-4, ROUGE-L, guiding-signal match
//! rate and the number of distinct infilled tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::mask::{MaskPolicy, PhraseTable};
use super::tokenize::Instruction;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-4 (uniform weights, brevity penalty, no smoothing) over
/// (hypothesis, reference) token lists with one reference each.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let h = ngrams(hyp, n);
            let r = ngrams(reference, n);
            total[n - 1] += h.values().sum::<usize>();
            matched[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 || matched.iter().any(|&m| m == 0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    bp * log_p.exp()
}

pub fn bleu<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    corpus_bleu(&[(hyp.iter().map(AsRef::as_ref).collect::<Vec<_>>(), reference.iter().map(AsRef::as_ref).collect())])
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Whether both instructions carry the same guiding signals in the same order.
pub fn match_rate(generated: &Instruction, reference: &Instruction, phrases: &PhraseTable) -> bool {
    phrases.guiding_signals(&generated.lower_tokens()) == phrases.guiding_signals(&reference.lower_tokens())
}

/// Number of distinct (lowercased) tokens whose tag is maskable. The
/// instruction must be tagged.
pub fn infill_count(generated: &Instruction, policy: &MaskPolicy) -> usize {
    generated.tokens().filter(|t| policy.is_maskable(t)).map(|t| t.norm()).collect::<BTreeSet<_>>().len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlgReport {
    pub n: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Fraction of pairs whose guiding signals match.
    pub match_rate: f64,
    /// Mean number of distinct infilled tokens per generated instruction.
    pub infill: f64,
}

/// Corpus report over tagged (generated, reference) pairs.
pub fn nlg_report(pairs: &[(Instruction, Instruction)], policy: &MaskPolicy) -> NlgReport {
    let n = pairs.len();
    let lowered: Vec<(Vec<String>, Vec<String>)> =
        pairs.iter().map(|(g, r)| (g.lower_tokens(), r.lower_tokens())).collect();
    let mean = |f: &dyn Fn(usize) -> f64| if n == 0 { 0.0 } else { (0..n).map(f).sum::<f64>() / n as f64 };
    NlgReport {
        n,
        bleu4: corpus_bleu(&lowered),
        rouge_l: mean(&|i| rouge_l(&lowered[i].0, &lowered[i].1)),
        match_rate: mean(&|i| f64::from(u8::from(match_rate(&pairs[i].0, &pairs[i].1, &policy.phrases)))),
        infill: mean(&|i| infill_count(&pairs[i].0, policy) as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tagger::{tag_instruction, LexiconTagger};
    use crate::text::tokenize::{split_and_tokenize, Style, Token};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = toks("turn left at the red light and stop .");
        assert!((bleu(&a, &a) - 1.0).abs() < 1e-12);
        assert!((rouge_l(&a, &a) - 1.0).abs() < 1e-12);
        let b = toks("x y z w v u");
        assert_eq!(bleu(&b, &a), 0.0);
        assert_eq!(rouge_l(&b, &a), 0.0);
        let empty: Vec<String> = vec![];
        assert_eq!(bleu(&empty, &a), 0.0);
        assert_eq!(rouge_l(&empty, &a), 0.0);
    }

    #[test]
    fn three_sentence_corpus_by_hand() {
        // hyp1 = a b c d e      ref1 = a b c d f
        // hyp2 = a b c d        ref2 = a b c d
        // hyp3 = x a b c d      ref3 = a b c d y z
        //
        // unigrams: 4/5 + 4/4 + 4/5 = 12/14
        // bigrams:  3/4 + 3/3 + 3/4 = 9/11
        // trigrams: 2/3 + 2/2 + 2/3 = 6/8
        // 4-grams:  1/2 + 1/1 + 1/2 = 3/5
        // hyp length 14, ref length 15 -> BP = exp(1 - 15/14)
        let pairs = vec![
            (toks("a b c d e"), toks("a b c d f")),
            (toks("a b c d"), toks("a b c d")),
            (toks("x a b c d"), toks("a b c d y z")),
        ];
        let precisions: [f64; 4] = [12.0 / 14.0, 9.0 / 11.0, 6.0 / 8.0, 3.0 / 5.0];
        let geo = (precisions.iter().product::<f64>()).powf(0.25);
        let expected = (1.0f64 - 15.0 / 14.0).exp() * geo;
        assert!((corpus_bleu(&pairs) - expected).abs() < 1e-12);
        // ROUGE-L on pair 3: LCS 4, P = 4/5, R = 4/6
        let (p, r) = (0.8, 4.0 / 6.0);
        assert!((rouge_l(&pairs[2].0, &pairs[2].1) - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    fn instr(s: &str) -> Instruction {
        tag_instruction(&split_and_tokenize(s, Style::Human).unwrap(), &LexiconTagger::default())
    }

    #[test]
    fn match_rate_cases() {
        let t = PhraseTable::default();
        let a = instr("Turn left at the light. Then turn right.");
        assert!(match_rate(&a, &a, &t));
        assert!(match_rate(&a, &instr("turn left by the bank and turn right at the end ."), &t));
        assert!(!match_rate(&instr("turn left ."), &instr("turn right ."), &t));
        assert!(!match_rate(&a, &instr("turn left ."), &t));
    }

    #[test]
    fn infill_counts() {
        let p = MaskPolicy::default();
        assert_eq!(infill_count(&instr("turn and go ."), &p), 0);
        let mut i = split_and_tokenize("light light awning", Style::Human).unwrap();
        for (tok, tag) in i.sentences[0].tokens.iter_mut().zip(["NN", "NN", "NN", "."]) {
            *tok = Token::tagged(tok.text.clone(), tag);
        }
        assert_eq!(infill_count(&i, &p), 2);
    }

    #[test]
    fn infill_hand_counts_on_fixtures() {
        let p = MaskPolicy::default();
        let cases = [
            ("Turn left at the red light.", 2),                        // red, light
            ("Go straight past the bank and the bank.", 2),            // straight, bank
            ("Stop at the big red awning on your right.", 5),          // big red awning your right
            ("You will see a tree.", 3),                               // you will tree
            ("Head north on E 23rd St toward 2nd Ave.", 6),            // north e 23rd st 2nd ave
        ];
        for (s, n) in cases {
            assert_eq!(infill_count(&instr(s), &p), n, "{s}");
        }
    }

    #[test]
    fn report_aggregates() {
        let p = MaskPolicy::default();
        let a = instr("turn left at the red light .");
        let b = instr("turn right at the red light .");
        let rep = nlg_report(&[(a.clone(), a.clone()), (b, a)], &p);
        assert_eq!(rep.n, 2);
        assert_eq!(rep.match_rate, 0.5);
        // red, light | right, red, light
        assert_eq!(rep.infill, 2.5);
    }
}
