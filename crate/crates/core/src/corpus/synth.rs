//! Synthetic corpora sampled from planted models.
//!
//! Each task plants a model of the matching family with hashed features
//! (so the planted model doubles as an exact teacher) and samples gold
//! structures from it: chain tags by forward-filtering backward-sampling,
//! heads and relations as independent categoricals per token, spans from
//! the suffix-sum span sampler.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::{
    spans_to_bioes, AlphabetRole, BioesRole, BioesScheme, Corpus, Gold, HeadAssignment, LabelAlphabet,
    Provenance, SentenceRecord, TagSequence,
};
use crate::chain_crf::{sample, ChainCrf};
use crate::error::{usage, Error, Result};
use crate::head_parser::{head_softmax, HeadSelector};
use crate::model::AnyModel;
use crate::scorer::{feature_id, SparseParams};
use crate::span_ner::{sample_spans, SpanModel};
use crate::token_maxent::row_log_softmax;

const TYPE_NAMES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];
const NOISE: f64 = 0.1;
const WORD_BONUS: f64 = 4.0;
// Probability mass of O-class words in sampled sentences.
const O_MASS: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    Chain,
    Heads,
    Spans,
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Chain => "chain",
            SynthTask::Heads => "heads",
            SynthTask::Spans => "spans",
        })
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(SynthTask::Chain),
            "heads" => Ok(SynthTask::Heads),
            "spans" => Ok(SynthTask::Spans),
            _ => usage(format!("unknown synthetic task {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub task: SynthTask,
    pub n_sentences: usize,
    pub max_len: usize,
    /// Entity types (chain, spans), plain tags (chain with `plain_tags`) or
    /// relations (heads).
    pub labels: usize,
    pub vocab: usize,
    /// Chain task only: unconstrained tags `L0..` instead of BIOES.
    pub plain_tags: bool,
    pub hash_bits: u32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(task: SynthTask, n_sentences: usize, max_len: usize, labels: usize, seed: u64) -> Self {
        SynthConfig {
            task,
            n_sentences,
            max_len,
            labels,
            vocab: 400,
            plain_tags: false,
            hash_bits: 18,
            seed,
        }
    }
}

/// A sampled corpus and the model it was sampled from.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub corpus: Corpus,
    pub planted: AnyModel,
}

/// Vocabulary words with their class: `None` for O-like filler words,
/// `Some(k)` for words tied to label class `k`.
struct Vocab {
    words: Vec<String>,
    class: Vec<Option<usize>>,
    picker: WeightedIndex<f64>,
}

impl Vocab {
    fn new<R: Rng>(size: usize, classes: usize, with_o: bool, rng: &mut R) -> Self {
        const ONSETS: &[u8] = b"bdfgklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        let n_o = if with_o { size.div_ceil(2) } else { 0 };
        let mut seen = HashSet::new();
        let mut words = Vec::with_capacity(size);
        let mut class = Vec::with_capacity(size);
        while words.len() < size {
            let syllables = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(ONSETS[rng.random_range(0..ONSETS.len())] as char);
                w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
            }
            let k = words.len();
            let c = if k < n_o { None } else { Some((k - n_o) % classes) };
            if c.is_some() {
                let mut cs = w.chars();
                let first = cs.next().expect("non-empty word").to_ascii_uppercase();
                w = std::iter::once(first).chain(cs).collect();
            }
            if seen.insert(w.clone()) {
                words.push(w);
                class.push(c);
            }
        }
        let n_e = size - n_o;
        let weights: Vec<f64> = class
            .iter()
            .map(|c| match (c, n_o > 0 && n_e > 0) {
                (None, true) => O_MASS / n_o as f64,
                (Some(_), true) => (1.0 - O_MASS) / n_e as f64,
                _ => 1.0,
            })
            .collect();
        let picker = WeightedIndex::new(&weights).expect("positive weights");
        Vocab { words, class, picker }
    }

    fn sentence<R: Rng>(&self, max_len: usize, rng: &mut R) -> Vec<String> {
        let n = rng.random_range(max_len.min(3)..=max_len);
        (0..n).map(|_| self.words[self.picker.sample(rng)].clone()).collect()
    }
}

fn fill_noise<R: Rng>(p: &mut SparseParams, rng: &mut R, normal: &Normal<f64>) {
    for w in p.weights_mut() {
        *w = normal.sample(rng);
    }
}

fn add_at(p: &mut SparseParams, parts: &[&str], label: usize, v: f64) {
    let slot = p.slot(feature_id(parts, p.bits()), label);
    p.weights_mut()[slot] += v;
}

fn type_alphabet(n: usize) -> LabelAlphabet {
    let names: Vec<String> = (0..n)
        .map(|k| TYPE_NAMES.get(k).map(|s| s.to_string()).unwrap_or_else(|| format!("T{k}")))
        .collect();
    LabelAlphabet::from_labels(AlphabetRole::EntityTypes, &names)
}

fn plant_chain<R: Rng>(cfg: &SynthConfig, vocab: &Vocab, rng: &mut R) -> Result<ChainCrf> {
    let noise = Normal::new(0.0, NOISE).expect("valid normal");
    let (tags, class_of): (LabelAlphabet, Vec<Option<usize>>) = if cfg.plain_tags {
        let names: Vec<String> = (0..cfg.labels).map(|k| format!("L{k}")).collect();
        (LabelAlphabet::from_labels(AlphabetRole::Tags, &names), (0..cfg.labels).map(Some).collect())
    } else {
        let tags = BioesScheme::canonical_tags(&type_alphabet(cfg.labels));
        let scheme = BioesScheme::from_tags(&tags)?;
        let classes = (0..tags.len())
            .map(|t| match scheme.role(t) {
                Some(BioesRole::Outside) | None => None,
                Some(BioesRole::Begin(l) | BioesRole::Inside(l) | BioesRole::End(l) | BioesRole::Single(l)) => Some(l),
            })
            .collect();
        (tags, classes)
    };
    let mut crf = ChainCrf::new(tags, cfg.hash_bits);
    fill_noise(&mut crf.emit, rng, &noise);
    for (w, c) in vocab.words.iter().zip(&vocab.class) {
        for (t, tc) in class_of.iter().enumerate() {
            if tc == c {
                add_at(&mut crf.emit, &["w", w], t, WORD_BONUS);
            }
        }
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let l = crf.num_labels();
    crf.trans = ndarray::Array2::from_shape_simple_fn((l, l), || unit.sample(rng));
    crf.start = Array1::from_shape_simple_fn(l, || 0.5 * unit.sample(rng));
    crf.stop = Array1::from_shape_simple_fn(l, || 0.5 * unit.sample(rng));
    if cfg.plain_tags {
        Ok(crf)
    } else {
        crf.with_bioes_mask()
    }
}

fn plant_heads<R: Rng>(cfg: &SynthConfig, vocab: &Vocab, rng: &mut R) -> HeadSelector {
    let noise = Normal::new(0.0, NOISE).expect("valid normal");
    let names: Vec<String> = (0..cfg.labels).map(|k| format!("rel{k}")).collect();
    let mut m = HeadSelector::new(LabelAlphabet::from_labels(AlphabetRole::Relations, &names), cfg.hash_bits);
    fill_noise(&mut m.arc, rng, &noise);
    fill_noise(&mut m.rel, rng, &noise);
    for (dist, bonus) in [("-1", 2.0), ("+1", 2.0), ("-2", 1.0), ("+2", 1.0), ("root", 1.0)] {
        add_at(&mut m.arc, &["a.dist", dist], 0, bonus);
    }
    for (w, c) in vocab.words.iter().zip(&vocab.class) {
        let r = c.unwrap_or(0) % cfg.labels;
        add_at(&mut m.rel, &["w", w], r, WORD_BONUS);
    }
    m
}

fn plant_spans<R: Rng>(cfg: &SynthConfig, vocab: &Vocab, rng: &mut R) -> SpanModel {
    let noise = Normal::new(0.0, NOISE).expect("valid normal");
    let mut m = SpanModel::new(type_alphabet(cfg.labels), cfg.hash_bits);
    fill_noise(&mut m.params, rng, &noise);
    // Per-word boundary affinities are drawn at random so that span
    // decisions stay uncertain given the words.
    let affinity = Normal::new(0.0, 1.0).expect("valid normal");
    for l in 0..cfg.labels {
        for (len, bonus) in [("2", 0.5), ("3", 0.0), ("4", -1.0), ("5..6", -2.0), ("7..10", -3.0), ("11..", -4.0)] {
            add_at(&mut m.params, &["s.len", len], l, bonus);
        }
        for (w, c) in vocab.words.iter().zip(&vocab.class) {
            let mean = match c {
                Some(k) if *k == l => 1.0,
                Some(_) => -0.5,
                None => -1.5,
            };
            add_at(&mut m.params, &["s.first", w], l, mean + affinity.sample(rng));
            add_at(&mut m.params, &["s.last", w], l, mean + affinity.sample(rng));
        }
    }
    m
}

/// Draws a tag sequence for `tokens` from a chain model.
pub fn sample_tags<R: Rng + ?Sized>(crf: &ChainCrf, tokens: &[String], rng: &mut R) -> Result<TagSequence> {
    Ok(TagSequence(sample(&crf.lattice(&crf.features(tokens)), rng)?))
}

fn categorical<R: Rng + ?Sized>(p: ndarray::ArrayView1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Draws heads and relations for `tokens`, each token independently.
pub fn sample_heads<R: Rng + ?Sized>(m: &HeadSelector, tokens: &[String], rng: &mut R) -> Result<HeadAssignment> {
    let f = m.features(tokens);
    let heads_p = head_softmax(&m.arc_scores(&f))?;
    let rels_p = row_log_softmax(&m.rel_scores(&f))?.mapv(f64::exp);
    let mut heads = Vec::with_capacity(tokens.len());
    let mut rels = Vec::with_capacity(tokens.len());
    for i in 0..tokens.len() {
        heads.push(categorical(heads_p.row(i), rng));
        rels.push(categorical(rels_p.row(i), rng));
    }
    Ok(HeadAssignment { heads, rels })
}

/// Samples a corpus. Identical configs give identical corpora and models.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_sentences == 0 || cfg.max_len == 0 || cfg.labels == 0 || cfg.vocab == 0 {
        return usage("synthetic sizes must all be at least 1");
    }
    if !(1..=30).contains(&cfg.hash_bits) {
        return usage("hash bits must be in 1..=30");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let with_o = !(cfg.task == SynthTask::Chain && cfg.plain_tags) && cfg.task != SynthTask::Heads;
    let vocab = Vocab::new(cfg.vocab, cfg.labels, with_o, &mut rng);
    let mut records = Vec::with_capacity(cfg.n_sentences);
    let (labels, planted) = match cfg.task {
        SynthTask::Chain => {
            let crf = plant_chain(cfg, &vocab, &mut rng)?;
            for _ in 0..cfg.n_sentences {
                let tokens = vocab.sentence(cfg.max_len, &mut rng);
                let tags = sample_tags(&crf, &tokens, &mut rng)?;
                records.push(SentenceRecord::new(tokens, Some(Gold::Tags(tags)), Provenance::Labeled)?);
            }
            (crf.tags.clone(), AnyModel::NerCrf(crf))
        }
        SynthTask::Heads => {
            let m = plant_heads(cfg, &vocab, &mut rng);
            for _ in 0..cfg.n_sentences {
                let tokens = vocab.sentence(cfg.max_len, &mut rng);
                let h = sample_heads(&m, &tokens, &mut rng)?;
                records.push(SentenceRecord::new(tokens, Some(Gold::Heads(h)), Provenance::Labeled)?);
            }
            (m.rels.clone(), AnyModel::Dep1st(m))
        }
        SynthTask::Spans => {
            let m = plant_spans(cfg, &vocab, &mut rng);
            let tags = m.bioes_tags();
            let scheme = BioesScheme::from_tags(&tags)?;
            for _ in 0..cfg.n_sentences {
                let tokens = vocab.sentence(cfg.max_len, &mut rng);
                let spans = sample_spans(&m.span_scores(&m.features(&tokens)), &mut rng)?;
                let t = spans_to_bioes(&spans, tokens.len(), &scheme)?;
                records.push(SentenceRecord::new(tokens, Some(Gold::Tags(t)), Provenance::Labeled)?);
            }
            (tags, AnyModel::NerSpan(m))
        }
    };
    Ok(SynthData {
        corpus: Corpus { records, labels },
        planted,
    })
}

/// Splits a corpus into consecutive train/dev/test parts in the ratio
/// 3:1:1.
pub fn split_3_1_1(corpus: &Corpus) -> (Corpus, Corpus, Corpus) {
    let n = corpus.records.len();
    let a = n * 3 / 5;
    let b = a + n / 5;
    let part = |r: std::ops::Range<usize>| Corpus {
        records: corpus.records[r].to_vec(),
        labels: corpus.labels.clone(),
    };
    (part(0..a), part(a..b), part(b..n))
}

/// The same sentences without gold structures.
pub fn strip_gold(corpus: &Corpus) -> Corpus {
    Corpus {
        records: corpus
            .records
            .iter()
            .map(|r| SentenceRecord {
                tokens: r.tokens.clone(),
                gold: None,
                provenance: r.provenance,
            })
            .collect(),
        labels: corpus.labels.clone(),
    }
}
