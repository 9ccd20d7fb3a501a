//! Hashed sparse linear scoring.
//!
//! Feature strings are never materialized: each template is hashed as a
//! sequence of byte slices with FNV-1a (64 bit) and finished with the
//! SplitMix64 finalizer. A feature id is the low `bits` bits of that hash. A
//! weight slot for `(feature, label)` is `(id ^ mix64(label + 1)) & mask`,
//! so every label sees its own pseudo-random permutation of the hash space.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{usage, Error, Result};
use crate::numerics::LogScore;

/// Tag stored in model files; bump whenever a template changes.
pub const TEMPLATE_VERSION: &str = "hashfeat-v1";

pub const DEFAULT_HASH_BITS: u32 = 20;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hashes a sequence of parts, separated so that `["ab", "c"]` and
/// `["a", "bc"]` differ.
pub fn hash_parts(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix64(h)
}

/// Hashed feature ids with parallel values. Ids are unique within a vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVec {
    ids: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureVec {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.ids.iter().copied().zip(self.values.iter().copied())
    }
}

struct Builder {
    mask: u64,
    fv: FeatureVec,
}

impl Builder {
    fn new(bits: u32) -> Self {
        Builder {
            mask: (1u64 << bits) - 1,
            fv: FeatureVec::default(),
        }
    }

    fn add_value(&mut self, parts: &[&str], value: f64) {
        let bytes: Vec<&[u8]> = parts.iter().map(|p| p.as_bytes()).collect();
        let id = (hash_parts(&bytes) & self.mask) as u32;
        match self.fv.ids.iter().position(|&x| x == id) {
            Some(k) => self.fv.values[k] += value,
            None => {
                self.fv.ids.push(id);
                self.fv.values.push(value);
            }
        }
    }

    fn add(&mut self, parts: &[&str]) {
        // Identical template strings collapse to one feature of value 1;
        // distinct strings colliding in the hash space add up.
        let bytes: Vec<&[u8]> = parts.iter().map(|p| p.as_bytes()).collect();
        let id = (hash_parts(&bytes) & self.mask) as u32;
        if !self.fv.ids.contains(&id) {
            self.fv.ids.push(id);
            self.fv.values.push(1.0);
        }
    }

    fn finish(self) -> FeatureVec {
        self.fv
    }
}

/// Hashed id of one template instance, as produced by the extractors.
pub fn feature_id(parts: &[&str], bits: u32) -> u32 {
    let bytes: Vec<&[u8]> = parts.iter().map(|p| p.as_bytes()).collect();
    (hash_parts(&bytes) & ((1u64 << bits) - 1)) as u32
}

/// Coarse orthographic shape: `X` upper, `x` lower, `d` digit, `-` other,
/// with runs collapsed.
fn shape(tok: &str) -> String {
    let mut out = String::new();
    for c in tok.chars() {
        let s = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_ascii_digit() {
            'd'
        } else {
            '-'
        };
        if !out.ends_with(s) {
            out.push(s);
        }
    }
    out
}

fn prefixes(tok: &str) -> Vec<&str> {
    let ends: Vec<usize> = tok
        .char_indices()
        .map(|(i, c)| i + c.len_utf8())
        .take(3)
        .collect();
    let mut out: Vec<&str> = ends.iter().map(|&e| &tok[..e]).collect();
    out.dedup();
    out
}

fn suffixes(tok: &str) -> Vec<&str> {
    let starts: Vec<usize> = tok.char_indices().map(|(i, _)| i).rev().take(3).collect();
    let mut out: Vec<&str> = starts.iter().map(|&s| &tok[s..]).collect();
    out.dedup();
    out
}

const BOS: &str = "<s>";
const EOS: &str = "</s>";
const ROOT: &str = "<root>";

fn signed_bucket(d: isize) -> &'static str {
    const POS: [&str; 7] = ["+1", "+2", "+3", "+4", "+5..7", "+8..15", "+16.."];
    const NEG: [&str; 7] = ["-1", "-2", "-3", "-4", "-5..7", "-8..15", "-16.."];
    let a = d.unsigned_abs();
    let k = match a {
        0 => return "0",
        1..=4 => a - 1,
        5..=7 => 4,
        8..=15 => 5,
        _ => 6,
    };
    if d > 0 {
        POS[k]
    } else {
        NEG[k]
    }
}

fn length_bucket(len: usize) -> &'static str {
    match len {
        0 => "0",
        1 => "1",
        2 => "2",
        3 => "3",
        4 => "4",
        5..=6 => "5..6",
        7..=10 => "7..10",
        _ => "11..",
    }
}

/// What a feature vector describes. Token positions are 0-based; arc and
/// span positions are 1-based with head 0 the synthetic root.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Descriptor {
    Token(usize),
    Arc { head: usize, dep: usize },
    Span { start: usize, end: usize },
    Sibling { head: usize, dep: usize, other: usize },
}

/// Bounds-checked feature extraction for any descriptor.
pub fn featurize(tokens: &[String], d: Descriptor, bits: u32) -> Result<FeatureVec> {
    let n = tokens.len();
    match d {
        Descriptor::Token(i) if i < n => Ok(token_features(tokens, i, bits)),
        Descriptor::Arc { head, dep } if dep >= 1 && dep <= n && head <= n && head != dep => {
            Ok(arc_features(tokens, head, dep, bits))
        }
        Descriptor::Span { start, end } if start >= 1 && start <= end && end <= n => {
            Ok(span_features(tokens, start, end, bits))
        }
        Descriptor::Sibling { head, dep, other }
            if head <= n
                && dep >= 1
                && dep <= n
                && other >= 1
                && other <= n
                && dep != other
                && head != dep
                && head != other =>
        {
            Ok(sibling_features(tokens, head, dep, other, bits))
        }
        _ => usage(format!("descriptor {d:?} out of bounds for {n} tokens")),
    }
}

/// Token templates: identity, lowercase, shape, prefixes and suffixes up to
/// three characters, and the neighboring tokens.
pub fn token_features(tokens: &[String], i: usize, bits: u32) -> FeatureVec {
    let mut b = Builder::new(bits);
    let tok = tokens[i].as_str();
    let lower = tok.to_lowercase();
    b.add(&["w", tok]);
    b.add(&["lw", &lower]);
    b.add(&["shape", &shape(tok)]);
    for p in prefixes(tok) {
        b.add(&["pre", p]);
    }
    for s in suffixes(tok) {
        b.add(&["suf", s]);
    }
    let prev = if i == 0 { BOS } else { tokens[i - 1].as_str() };
    let next = tokens.get(i + 1).map(String::as_str).unwrap_or(EOS);
    b.add(&["w-1", prev]);
    b.add(&["w+1", next]);
    b.finish()
}

fn word(tokens: &[String], pos: usize) -> &str {
    if pos == 0 {
        ROOT
    } else {
        tokens[pos - 1].as_str()
    }
}

/// Arc templates for `head -> dep`.
pub fn arc_features(tokens: &[String], head: usize, dep: usize, bits: u32) -> FeatureVec {
    let mut b = Builder::new(bits);
    let h = word(tokens, head);
    let d = word(tokens, dep);
    let dist = if head == 0 {
        "root"
    } else {
        signed_bucket(head as isize - dep as isize)
    };
    let hs = if head == 0 { ROOT.to_owned() } else { shape(h) };
    let dsuf = suffixes(d).last().copied().unwrap_or("");
    b.add(&["a.h", h]);
    b.add(&["a.d", d]);
    b.add(&["a.hd", h, d]);
    b.add(&["a.dist", dist]);
    b.add(&["a.dist.h", dist, h]);
    b.add(&["a.dist.d", dist, d]);
    b.add(&["a.shape", &hs, &shape(d)]);
    b.add(&["a.suf", dist, dsuf]);
    b.finish()
}

/// Span templates: boundary tokens, their outside neighbors, the length
/// bucket, and a bag of covered tokens.
pub fn span_features(tokens: &[String], start: usize, end: usize, bits: u32) -> FeatureVec {
    let mut b = Builder::new(bits);
    let first = tokens[start - 1].as_str();
    let last = tokens[end - 1].as_str();
    let prev = if start == 1 { BOS } else { tokens[start - 2].as_str() };
    let next = tokens.get(end).map(String::as_str).unwrap_or(EOS);
    let len = length_bucket(end - start + 1);
    b.add(&["s.len", len]);
    b.add(&["s.first", first]);
    b.add(&["s.last", last]);
    b.add(&["s.fl", first, last]);
    b.add(&["s.prev", prev]);
    b.add(&["s.next", next]);
    b.add(&["s.shape", &shape(first), len]);
    for tok in &tokens[start - 1..end] {
        b.add_value(&["s.in", tok], 1.0);
    }
    b.finish()
}

/// Sibling templates for two dependents `dep` and `other` sharing `head`.
pub fn sibling_features(
    tokens: &[String],
    head: usize,
    dep: usize,
    other: usize,
    bits: u32,
) -> FeatureVec {
    let mut b = Builder::new(bits);
    let h = word(tokens, head);
    let d = word(tokens, dep);
    let o = word(tokens, other);
    let gap = signed_bucket(other as isize - dep as isize);
    let side = |x: usize| if head == 0 || x > head { "R" } else { "L" };
    let sides = format!("{}{}", side(dep), side(other));
    b.add(&["sib.bias"]);
    b.add(&["sib.do", d, o]);
    b.add(&["sib.gap", gap, &sides]);
    b.add(&["sib.h", h, &sides]);
    b.add(&["sib.shape", &shape(d), &shape(o)]);
    b.finish()
}

/// Flat weight vector addressed by hashed feature ids, plus one bias per
/// output label.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseParams {
    bits: u32,
    weights: Vec<f64>,
    bias: Vec<f64>,
    // Slots written since the last `apply_and_clear`, when used as a
    // gradient buffer. May hold duplicates.
    touched: Vec<u32>,
}

impl SparseParams {
    pub fn new(bits: u32, n_labels: usize) -> Self {
        assert!((1..=30).contains(&bits), "hash bits must be in 1..=30");
        SparseParams {
            bits,
            weights: vec![0.0; 1usize << bits],
            bias: vec![0.0; n_labels],
            touched: Vec::new(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SparseParams::new(self.bits, self.bias.len())
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn n_labels(&self) -> usize {
        self.bias.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn slot(&self, id: u32, label: usize) -> usize {
        let mask = (1u64 << self.bits) - 1;
        ((id as u64 ^ mix64(label as u64 + 1)) & mask) as usize
    }

    /// `Σ w[slot(id, label)]·v + bias[label]`.
    #[inline]
    pub fn score(&self, f: &FeatureVec, label: usize) -> LogScore {
        let mut s = self.bias[label];
        for (id, v) in f.iter() {
            s += self.weights[self.slot(id, label)] * v;
        }
        s
    }

    /// Scores every label at once.
    pub fn score_all(&self, f: &FeatureVec) -> Vec<LogScore> {
        (0..self.bias.len()).map(|l| self.score(f, l)).collect()
    }

    /// Adds `coef·v` at each slot addressed by `(f, label)` and `coef` to the
    /// label bias.
    #[inline]
    pub fn accumulate(&mut self, f: &FeatureVec, label: usize, coef: f64) {
        if coef == 0.0 {
            return;
        }
        for (id, v) in f.iter() {
            let s = self.slot(id, label);
            if self.weights[s] == 0.0 {
                self.touched.push(s as u32);
            }
            self.weights[s] += coef * v;
        }
        self.bias[label] += coef;
    }

    /// `self -= step · grad`, then zeroes `grad` (only its touched slots).
    pub fn apply_and_clear(&mut self, grad: &mut SparseParams, step: f64) {
        for &s in &grad.touched {
            let s = s as usize;
            let g = grad.weights[s];
            if g != 0.0 {
                self.weights[s] -= step * g;
                grad.weights[s] = 0.0;
            }
        }
        grad.touched.clear();
        for (b, g) in self.bias.iter_mut().zip(grad.bias.iter_mut()) {
            *b -= step * *g;
            *g = 0.0;
        }
    }

    /// Slots holding a nonzero value (sorted, deduplicated).
    pub fn nonzero_slots(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.touched.iter().map(|&s| s as usize).collect();
        v.sort_unstable();
        v.dedup();
        v.retain(|&s| self.weights[s] != 0.0);
        if v.is_empty() {
            v = (0..self.weights.len()).filter(|&s| self.weights[s] != 0.0).collect();
        }
        v
    }
}

/// Accumulates `coef × feature value` into `grad` for the slots `(f, label)`
/// address: the gradient of `coef · score(params, f, label)`.
pub fn accumulate_grad(grad: &mut SparseParams, f: &FeatureVec, label: usize, coef: f64) {
    grad.accumulate(f, label, coef);
}

/// `score(params, f, label)` as a free function.
pub fn score(params: &SparseParams, f: &FeatureVec, label: usize) -> Result<LogScore> {
    if label >= params.n_labels() {
        return usage(format!("label {label} >= {}", params.n_labels()));
    }
    Ok(params.score(f, label))
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    hash_bits: u32,
    weights: String,
    bias: Vec<f64>,
}

impl Serialize for SparseParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.weights.len() * 8);
        for w in &self.weights {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        ParamsRepr {
            hash_bits: self.bits,
            weights: B64.encode(bytes),
            bias: self.bias.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SparseParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = ParamsRepr::deserialize(d)?;
        let bytes = B64.decode(r.weights.as_bytes()).map_err(D::Error::custom)?;
        if !(1..=30).contains(&r.hash_bits) || bytes.len() != 8usize << r.hash_bits {
            return Err(D::Error::custom(Error::Usage(
                "weight block size does not match hash bits".into(),
            )));
        }
        let weights = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(SparseParams {
            bits: r.hash_bits,
            weights,
            bias: r.bias,
            touched: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn featurize_is_deterministic() {
        let t = toks("The cat sat on the mat");
        for i in 0..t.len() {
            let a = featurize(&t, Descriptor::Token(i), 16).unwrap();
            let b = featurize(&t, Descriptor::Token(i), 16).unwrap();
            assert_eq!(a, b);
            assert!(a.ids().iter().all(|&id| id < (1 << 16)));
        }
    }

    #[test]
    fn single_char_affixes_deduplicated() {
        let t = toks("a");
        let f = token_features(&t, 0, 20);
        let pre = (hash_parts(&[b"pre", b"a"]) & ((1 << 20) - 1)) as u32;
        let suf = (hash_parts(&[b"suf", b"a"]) & ((1 << 20) - 1)) as u32;
        assert!(f.ids().contains(&pre));
        assert!(f.ids().contains(&suf));
        // w, lw, shape, pre, suf, w-1, w+1
        assert_eq!(f.len(), 7);
        assert_eq!(prefixes("a"), ["a"]);
        assert_eq!(prefixes("abcd"), ["a", "ab", "abc"]);
        assert_eq!(suffixes("abcd"), ["d", "cd", "bcd"]);
    }

    #[test]
    fn distinct_tokens_distinct_ids() {
        let a = token_features(&toks("apple"), 0, 20);
        let b = token_features(&toks("pear"), 0, 20);
        assert_ne!(a.ids()[0], b.ids()[0]);
    }

    #[test]
    fn out_of_bounds_descriptor() {
        let t = toks("a b");
        assert!(featurize(&t, Descriptor::Token(2), 10).is_err());
        assert!(featurize(&t, Descriptor::Arc { head: 1, dep: 1 }, 10).is_err());
        assert!(featurize(&t, Descriptor::Arc { head: 3, dep: 1 }, 10).is_err());
        assert!(featurize(&t, Descriptor::Span { start: 2, end: 1 }, 10).is_err());
        assert!(featurize(&t, Descriptor::Span { start: 1, end: 2 }, 10).is_ok());
        assert!(featurize(&t, Descriptor::Arc { head: 0, dep: 2 }, 10).is_ok());
    }

    #[test]
    fn zero_weights_score_zero() {
        let p = SparseParams::new(12, 3);
        let f = token_features(&toks("x y"), 1, 12);
        assert_eq!(p.score_all(&f), vec![0.0; 3]);
    }

    #[test]
    fn one_hot_weight() {
        let mut p = SparseParams::new(12, 2);
        let f = FeatureVec {
            ids: vec![77],
            values: vec![1.0],
        };
        let s = p.slot(77, 1);
        p.weights_mut()[s] = 2.5;
        assert_eq!(score(&p, &f, 1).unwrap(), 2.5);
        assert!(score(&p, &f, 2).is_err());
    }

    #[test]
    fn score_matches_direct_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bits = 10;
        let mut p = SparseParams::new(bits, 4);
        for w in p.weights_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        for b in p.bias_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        for _ in 0..50 {
            let k = rng.random_range(1..8);
            let f = FeatureVec {
                ids: (0..k).map(|_| rng.random_range(0..1u32 << bits)).collect(),
                values: (0..k).map(|_| rng.random_range(-2.0..2.0)).collect(),
            };
            let label = rng.random_range(0..4);
            // Independent re-evaluation: explicit salt, explicit mask.
            let salt = mix64(label as u64 + 1);
            let mut want = p.bias()[label];
            for (&id, &v) in f.ids().iter().zip(f.values()) {
                let slot = ((id as u64) ^ salt) % (1u64 << bits);
                want += p.weights()[slot as usize] * v;
            }
            assert!((p.score(&f, label) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_is_linear() {
        let f = token_features(&toks("Alpha beta"), 0, 12);
        let mut g1 = SparseParams::new(12, 2);
        accumulate_grad(&mut g1, &f, 1, 0.3);
        accumulate_grad(&mut g1, &f, 1, 0.45);
        let mut g2 = SparseParams::new(12, 2);
        accumulate_grad(&mut g2, &f, 1, 0.75);
        for (a, b) in g1.weights().iter().zip(g2.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut g3 = SparseParams::new(12, 2);
        accumulate_grad(&mut g3, &f, 0, 0.0);
        assert!(g3.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn gradient_of_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = toks("Some words here");
        let f = span_features(&t, 1, 3, 12);
        let mut p = SparseParams::new(12, 3);
        for w in p.weights_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let coef = 1.7;
        let mut g = p.zeros_like();
        accumulate_grad(&mut g, &f, 2, coef);
        let eps = 1e-5;
        for slot in g.nonzero_slots() {
            let orig = p.weights()[slot];
            p.weights_mut()[slot] = orig + eps;
            let up = coef * p.score(&f, 2);
            p.weights_mut()[slot] = orig - eps;
            let down = coef * p.score(&f, 2);
            p.weights_mut()[slot] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - g.weights()[slot]).abs() <= 1e-4 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn apply_and_clear_updates_only_touched() {
        let f = token_features(&toks("x"), 0, 10);
        let mut p = SparseParams::new(10, 2);
        let mut g = p.zeros_like();
        g.accumulate(&f, 0, 2.0);
        p.apply_and_clear(&mut g, 0.5);
        assert!(g.weights().iter().all(|&w| w == 0.0));
        assert_eq!(p.score(&f, 0), -(f.len() as f64) - 1.0);
    }

    #[test]
    fn serde_roundtrip() {
        let mut p = SparseParams::new(8, 2);
        p.weights_mut()[3] = 1.25;
        p.bias_mut()[1] = -0.5;
        let s = serde_json::to_string(&p).unwrap();
        let q: SparseParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p.weights(), q.weights());
        assert_eq!(p.bias(), q.bias());
    }
}
