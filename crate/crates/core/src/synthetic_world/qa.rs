use super::render::{PosTag, SampleRecord};
use super::vocab::{Vocabulary, ANS, CLS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionKind {
    /// "what color is the <shape>" → color word.
    Color,
    /// "what does the <color> <shape> do" → verb.
    Action,
}

/// A templated question about one clip, answered by a single token.
#[derive(Clone, Debug, PartialEq)]
pub struct QaItem {
    pub sample: usize,
    /// `[CLS] question… [ANS] [SEP]`.
    pub question: Vec<u32>,
    pub answer: u32,
    pub kind: QuestionKind,
}

/// Derives questions from each caption's tagged noun phrases. Color
/// questions are only asked about shapes mentioned once.
pub fn build_qa(samples: &[SampleRecord], vocab: &Vocabulary) -> Vec<QaItem> {
    let mut out = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let toks = &s.caption.tokens;
        let tags = &s.caption.tags;
        let nouns: Vec<usize> = (0..toks.len()).filter(|&i| tags[i] == PosTag::Noun).collect();
        for &i in &nouns {
            if i < 2 {
                continue;
            }
            let (color, shape) = (toks[i - 1], toks[i]);
            let unique = nouns.iter().filter(|&&j| toks[j] == shape).count() == 1;
            if unique {
                let mut q = vec![vocab.known(CLS)];
                q.extend(["what", "color", "is", "the"].map(|w| vocab.known(w)));
                q.extend([shape, vocab.known(ANS), vocab.known(SEP)]);
                out.push(QaItem {
                    sample: si,
                    question: q,
                    answer: color,
                    kind: QuestionKind::Color,
                });
            }
            if i + 1 < toks.len() && tags[i + 1] == PosTag::Verb {
                let mut q = vec![vocab.known(CLS)];
                q.extend(["what", "does", "the"].map(|w| vocab.known(w)));
                q.extend([color, shape, vocab.known("do"), vocab.known(ANS), vocab.known(SEP)]);
                out.push(QaItem {
                    sample: si,
                    question: q,
                    answer: toks[i + 1],
                    kind: QuestionKind::Action,
                });
            }
        }
    }
    out
}
