//! BIOES encoding of flat entity span sets.

use std::collections::HashMap;

use super::{AlphabetRole, LabelAlphabet, Span, SpanSet, TagSequence};
use crate::error::{Error, Result};

/// Position role of a BIOES tag. Entity-bearing roles carry an entity type id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BioesRole {
    Outside,
    Begin(usize),
    Inside(usize),
    End(usize),
    Single(usize),
}

/// Correspondence between a tag alphabet and entity types.
#[derive(Clone, Debug)]
pub struct BioesScheme {
    types: LabelAlphabet,
    roles: Vec<BioesRole>,
    ids: HashMap<BioesRole, usize>,
}

impl BioesScheme {
    /// Parses every tag of `tags` as `O` or `{B,I,E,S}-TYPE`.
    pub fn from_tags(tags: &LabelAlphabet) -> Result<Self> {
        let mut types = LabelAlphabet::new(AlphabetRole::EntityTypes);
        let mut roles = Vec::with_capacity(tags.len());
        let mut ids = HashMap::new();
        for (id, tag) in tags.labels().iter().enumerate() {
            let role = if tag == "O" {
                BioesRole::Outside
            } else {
                let (prefix, ty) = tag.split_once('-').ok_or_else(|| {
                    Error::Usage(format!("tag {tag:?} is not in BIOES form"))
                })?;
                let t = types.intern(ty);
                match prefix {
                    "B" => BioesRole::Begin(t),
                    "I" => BioesRole::Inside(t),
                    "E" => BioesRole::End(t),
                    "S" => BioesRole::Single(t),
                    _ => return Err(Error::Usage(format!("tag {tag:?} is not in BIOES form"))),
                }
            };
            roles.push(role);
            ids.insert(role, id);
        }
        Ok(BioesScheme { types, roles, ids })
    }

    /// The canonical tag alphabet for `types`: `O`, then `B I E S` per type.
    pub fn canonical_tags(types: &LabelAlphabet) -> LabelAlphabet {
        let mut tags = LabelAlphabet::new(AlphabetRole::Tags);
        tags.intern("O");
        for t in types.labels() {
            for p in ["B", "I", "E", "S"] {
                tags.intern(&format!("{p}-{t}"));
            }
        }
        tags
    }

    /// Adds any missing `O`/`B`/`I`/`E`/`S` tag for every type present in `tags`.
    pub fn complete(tags: &LabelAlphabet) -> Result<LabelAlphabet> {
        let scheme = BioesScheme::from_tags(tags)?;
        let mut out = tags.clone();
        out.intern("O");
        for t in scheme.types.labels() {
            for p in ["B", "I", "E", "S"] {
                out.intern(&format!("{p}-{t}"));
            }
        }
        Ok(out)
    }

    pub fn types(&self) -> &LabelAlphabet {
        &self.types
    }

    pub fn role(&self, tag: usize) -> Option<BioesRole> {
        self.roles.get(tag).copied()
    }

    pub fn tag(&self, role: BioesRole) -> Option<usize> {
        self.ids.get(&role).copied()
    }

    pub fn num_tags(&self) -> usize {
        self.roles.len()
    }
}

/// Encodes a span set over `n` tokens as BIOES tags.
pub fn spans_to_bioes(spans: &SpanSet, n: usize, scheme: &BioesScheme) -> Result<TagSequence> {
    // Re-validate: a SpanSet may have been built for a longer sentence.
    let spans = SpanSet::new(spans.spans().to_vec(), n)?;
    let missing = |role| {
        scheme
            .tag(role)
            .ok_or_else(|| Error::Usage(format!("tag alphabet lacks {role:?}")))
    };
    let o = missing(BioesRole::Outside)?;
    let mut tags = vec![o; n];
    for s in spans.spans() {
        if s.start == s.end {
            tags[s.start - 1] = missing(BioesRole::Single(s.label))?;
        } else {
            tags[s.start - 1] = missing(BioesRole::Begin(s.label))?;
            for t in tags.iter_mut().take(s.end - 1).skip(s.start) {
                *t = missing(BioesRole::Inside(s.label))?;
            }
            tags[s.end - 1] = missing(BioesRole::End(s.label))?;
        }
    }
    Ok(TagSequence(tags))
}

/// Decodes BIOES tags into spans. Only complete `B I* E` and `S` segments of
/// one type become spans; every other fragment is dropped.
pub fn bioes_to_spans(tags: &TagSequence, scheme: &BioesScheme) -> SpanSet {
    let mut spans = Vec::new();
    // (start, type) of an open B segment.
    let mut open: Option<(usize, usize)> = None;
    for (k, &tag) in tags.0.iter().enumerate() {
        let pos = k + 1;
        match scheme.role(tag).unwrap_or(BioesRole::Outside) {
            BioesRole::Outside => open = None,
            BioesRole::Single(t) => {
                open = None;
                spans.push(Span::new(pos, pos, t));
            }
            BioesRole::Begin(t) => open = Some((pos, t)),
            BioesRole::Inside(t) => {
                if !matches!(open, Some((_, ot)) if ot == t) {
                    open = None;
                }
            }
            BioesRole::End(t) => {
                if let Some((start, ot)) = open {
                    if ot == t {
                        spans.push(Span::new(start, pos, t));
                    }
                }
                open = None;
            }
        }
    }
    SpanSet { spans }
}

/// Rewrites one sentence of IOB2 tag strings as BIOES strings.
pub fn iob2_to_bioes<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    let split = |t: &str| -> (char, String) {
        match t.split_once('-') {
            Some((p, ty)) => (p.chars().next().unwrap_or('O'), ty.to_owned()),
            None => ('O', String::new()),
        }
    };
    let parsed: Vec<(char, String)> = tags.iter().map(|t| split(t.as_ref())).collect();
    let mut out = Vec::with_capacity(parsed.len());
    for (k, (p, ty)) in parsed.iter().enumerate() {
        let continues = parsed
            .get(k + 1)
            .map(|(np, nty)| *np == 'I' && nty == ty)
            .unwrap_or(false);
        let prev_same = k > 0 && {
            let (pp, pty) = &parsed[k - 1];
            (*pp == 'B' || *pp == 'I') && pty == ty
        };
        let tag = match p {
            'B' if continues => format!("B-{ty}"),
            'B' => format!("S-{ty}"),
            // IOB1-style I without a preceding same-type tag starts an entity.
            'I' if !prev_same && continues => format!("B-{ty}"),
            'I' if !prev_same => format!("S-{ty}"),
            'I' if continues => format!("I-{ty}"),
            'I' => format!("E-{ty}"),
            _ => "O".to_owned(),
        };
        out.push(tag);
    }
    out
}
