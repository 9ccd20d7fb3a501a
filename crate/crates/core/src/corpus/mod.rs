//! Sentences, gold structures, label alphabets and their file formats.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod bioes;
mod conll;
pub mod synth;

pub use bioes::{bioes_to_spans, iob2_to_bioes, spans_to_bioes, BioesRole, BioesScheme};
pub use conll::{read_conll_ner, read_conllu, write_conll_ner, write_conllu};

/// What a label alphabet enumerates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphabetRole {
    /// Token tags (BIOES or arbitrary chain labels).
    Tags,
    /// Entity types of a span model.
    EntityTypes,
    /// Dependency relations.
    Relations,
}

/// Bijection between label strings and dense ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "AlphabetRepr", into = "AlphabetRepr")]
pub struct LabelAlphabet {
    role: AlphabetRole,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct AlphabetRepr {
    role: AlphabetRole,
    labels: Vec<String>,
}

impl From<AlphabetRepr> for LabelAlphabet {
    fn from(r: AlphabetRepr) -> Self {
        let mut a = LabelAlphabet::new(r.role);
        for l in r.labels {
            a.intern(&l);
        }
        a
    }
}

impl From<LabelAlphabet> for AlphabetRepr {
    fn from(a: LabelAlphabet) -> Self {
        AlphabetRepr {
            role: a.role,
            labels: a.labels,
        }
    }
}

impl PartialEq for LabelAlphabet {
    fn eq(&self, other: &Self) -> bool {
        self.role == other.role && self.labels == other.labels
    }
}

impl LabelAlphabet {
    pub fn new(role: AlphabetRole) -> Self {
        LabelAlphabet {
            role,
            labels: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_labels<S: AsRef<str>>(role: AlphabetRole, labels: &[S]) -> Self {
        let mut a = LabelAlphabet::new(role);
        for l in labels {
            a.intern(l.as_ref());
        }
        a
    }

    /// Returns the id of `label`, adding it if unseen.
    pub fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn role(&self) -> AlphabetRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One label id per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSequence(pub Vec<usize>);

/// Head-selection output. `heads[k]` is the head of token `k + 1`; 0 is the
/// synthetic root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAssignment {
    pub heads: Vec<usize>,
    pub rels: Vec<usize>,
}

/// A labeled entity span over 1-based inclusive token positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl Span {
    pub fn new(start: usize, end: usize, label: usize) -> Self {
        Span { start, end, label }
    }
}

/// A flat (non-overlapping) set of entity spans, kept sorted by start.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanSet {
    spans: Vec<Span>,
}

impl SpanSet {
    /// Validates positions against `n` tokens and rejects overlaps.
    pub fn new(mut spans: Vec<Span>, n: usize) -> Result<Self> {
        spans.sort();
        for s in &spans {
            if s.start < 1 || s.start > s.end || s.end > n {
                return Err(Error::Invariant(format!(
                    "span ({}, {}) out of bounds for {} tokens",
                    s.start, s.end, n
                )));
            }
        }
        for w in spans.windows(2) {
            if w[1].start <= w[0].end {
                return Err(Error::Invariant(format!(
                    "spans ({}, {}) and ({}, {}) overlap",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        Ok(SpanSet { spans })
    }

    pub fn empty() -> Self {
        SpanSet::default()
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Gold (or pseudo-gold) structure attached to a sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gold {
    Tags(TagSequence),
    Heads(HeadAssignment),
    Spans(SpanSet),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Labeled,
    PseudoLabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
    pub gold: Option<Gold>,
    pub provenance: Provenance,
}

impl SentenceRecord {
    /// Builds a record, checking the gold structure against the token count.
    pub fn new(tokens: Vec<String>, gold: Option<Gold>, provenance: Provenance) -> Result<Self> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Invariant("sentence without tokens".into()));
        }
        match &gold {
            Some(Gold::Tags(t)) if t.0.len() != n => {
                return Err(Error::Invariant(format!(
                    "{} tags for {} tokens",
                    t.0.len(),
                    n
                )))
            }
            Some(Gold::Heads(h)) => {
                if h.heads.len() != n || h.rels.len() != n {
                    return Err(Error::Invariant("head assignment length mismatch".into()));
                }
                for (k, &head) in h.heads.iter().enumerate() {
                    if head > n || head == k + 1 {
                        return Err(Error::Invariant(format!(
                            "token {} has invalid head {}",
                            k + 1,
                            head
                        )));
                    }
                }
            }
            Some(Gold::Spans(s)) => {
                if s.spans().iter().any(|sp| sp.end > n) {
                    return Err(Error::Invariant("span beyond sentence end".into()));
                }
            }
            _ => {}
        }
        Ok(SentenceRecord {
            tokens,
            gold,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tags(&self) -> Option<&TagSequence> {
        match &self.gold {
            Some(Gold::Tags(t)) => Some(t),
            _ => None,
        }
    }

    pub fn heads(&self) -> Option<&HeadAssignment> {
        match &self.gold {
            Some(Gold::Heads(h)) => Some(h),
            _ => None,
        }
    }
}

/// Sentences together with the alphabet their gold ids refer to (tags for
/// NER corpora, relations for dependency corpora).
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<SentenceRecord>,
    pub labels: LabelAlphabet,
}

impl Corpus {
    /// Re-expresses gold ids in `target`'s id space. Labels unknown to
    /// `target` are appended to the returned copy of it.
    pub fn remap(&self, target: &LabelAlphabet) -> Corpus {
        let mut alphabet = target.clone();
        let map: Vec<usize> = self
            .labels
            .labels()
            .iter()
            .map(|l| alphabet.intern(l))
            .collect();
        let records = self
            .records
            .iter()
            .map(|r| {
                let gold = r.gold.as_ref().map(|g| match g {
                    Gold::Tags(t) => Gold::Tags(TagSequence(t.0.iter().map(|&i| map[i]).collect())),
                    Gold::Heads(h) => Gold::Heads(HeadAssignment {
                        heads: h.heads.clone(),
                        rels: h.rels.iter().map(|&i| map[i]).collect(),
                    }),
                    Gold::Spans(s) => Gold::Spans(SpanSet {
                        spans: s
                            .spans()
                            .iter()
                            .map(|sp| Span::new(sp.start, sp.end, map[sp.label]))
                            .collect(),
                    }),
                });
                SentenceRecord {
                    tokens: r.tokens.clone(),
                    gold,
                    provenance: r.provenance,
                }
            })
            .collect();
        Corpus {
            records,
            labels: alphabet,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_roundtrips_through_json() {
        let a = LabelAlphabet::from_labels(AlphabetRole::Tags, &["O", "B-PER", "E-PER"]);
        let s = serde_json::to_string(&a).unwrap();
        let b: LabelAlphabet = serde_json::from_str(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.id("E-PER"), Some(2));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let r = SpanSet::new(vec![Span::new(1, 2, 0), Span::new(2, 3, 0)], 3);
        assert!(matches!(r, Err(Error::Invariant(_))));
        assert!(SpanSet::new(vec![Span::new(0, 1, 0)], 3).is_err());
        assert!(SpanSet::new(vec![Span::new(2, 4, 0)], 3).is_err());
    }

    #[test]
    fn record_checks_heads() {
        let toks = vec!["a".to_string(), "b".to_string()];
        let ok = HeadAssignment {
            heads: vec![2, 0],
            rels: vec![0, 1],
        };
        assert!(SentenceRecord::new(toks.clone(), Some(Gold::Heads(ok)), Provenance::Labeled).is_ok());
        let self_loop = HeadAssignment {
            heads: vec![1, 0],
            rels: vec![0, 1],
        };
        assert!(SentenceRecord::new(toks.clone(), Some(Gold::Heads(self_loop)), Provenance::Labeled).is_err());
        assert!(SentenceRecord::new(vec![], None, Provenance::Labeled).is_err());
    }

    #[test]
    fn remap_extends_unknown_labels() {
        let src = Corpus {
            records: vec![SentenceRecord::new(
                vec!["x".into(), "y".into()],
                Some(Gold::Tags(TagSequence(vec![0, 1]))),
                Provenance::Labeled,
            )
            .unwrap()],
            labels: LabelAlphabet::from_labels(AlphabetRole::Tags, &["S-LOC", "O"]),
        };
        let target = LabelAlphabet::from_labels(AlphabetRole::Tags, &["O"]);
        let out = src.remap(&target);
        assert_eq!(out.labels.labels(), &["O".to_string(), "S-LOC".to_string()]);
        assert_eq!(out.records[0].tags().unwrap().0, vec![1, 0]);
    }
}
