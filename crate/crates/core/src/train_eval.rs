//! Mini-batch SGD for teachers and students, evaluation metrics and run
//! manifests.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{bioes_to_spans, BioesScheme, Corpus, Gold, HeadAssignment, LabelAlphabet, Span, SpanSet};
use crate::distill::{lambda_schedule, AnnealConfig, KdCase, MarginalTable, TemperatureConfig};
use crate::error::{usage, Error, Result};
use crate::model::{pseudo_label, student_family, teacher_family, teacher_marginal_table, AnyModel, Family, Feats};
use crate::scorer::TEMPLATE_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch decay: epoch `e` (0-based) uses `lr / (1 + lr_decay · e)`.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.1,
            lr_decay: 0.0,
            batch_size: 32,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub case: KdCase,
    pub temp: TemperatureConfig,
    pub anneal_rate: f64,
}

/// A teacher and how to distill from it.
#[derive(Clone, Copy, Debug)]
pub struct Distillation<'a> {
    pub teacher: &'a AnyModel,
    pub config: &'a DistillConfig,
}

/// Corpus-level evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "kebab-case")]
pub enum EvalReport {
    /// Micro-averaged exact span-and-type match.
    EntityF1 {
        precision: f64,
        recall: f64,
        f1: f64,
        correct: usize,
        predicted: usize,
        gold: usize,
    },
    /// Attachment scores over all tokens, punctuation included.
    Attachment { uas: f64, las: f64, tokens: usize },
    /// Token accuracy, for tag sets that are not BIOES.
    TagAccuracy { accuracy: f64, tokens: usize },
}

impl EvalReport {
    /// The model-selection metric: F1, LAS or accuracy.
    pub fn primary(&self) -> f64 {
        match self {
            EvalReport::EntityF1 { f1, .. } => *f1,
            EvalReport::Attachment { las, .. } => *las,
            EvalReport::TagAccuracy { accuracy, .. } => *accuracy,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EvalReport::EntityF1 { .. } => "entity-f1",
            EvalReport::Attachment { .. } => "las",
            EvalReport::TagAccuracy { .. } => "tag-accuracy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_end: Option<f64>,
    pub train_loss: f64,
    pub target_loss: f64,
    pub kd_loss: Option<f64>,
    pub dev_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub family: Family,
    pub case: Option<String>,
    pub seed: u64,
    pub train: TrainConfig,
    pub temperature: Option<f64>,
    pub temperature_mode: Option<String>,
    pub temperature_student_side: Option<bool>,
    pub anneal_rate: Option<f64>,
    pub hash_bits: u32,
    pub template_version: String,
    pub deterministic: bool,
    pub train_sentences: usize,
    pub pseudo_labeled_sentences: usize,
    pub dev_sentences: usize,
    pub history: Vec<EpochRecord>,
    /// 0 when the initial model was never beaten.
    pub best_epoch: usize,
    pub dev: Option<EvalReport>,
    pub test: Option<EvalReport>,
}

impl RunManifest {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Metric history, one row per epoch.
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.history {
            w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: AnyModel,
    pub manifest: RunManifest,
}

struct Example {
    feats: Feats,
    gold: Gold,
    table: Option<MarginalTable>,
}

/// Precision, recall and F1 with their counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Micro-averaged exact-match F1 over aligned sentences. Undefined ratios
/// are reported as 0.
pub fn entity_f1(pred: &[SpanSet], gold: &[SpanSet]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return usage(format!("{} predicted vs {} gold sentences", pred.len(), gold.len()));
    }
    let (mut correct, mut predicted, mut total) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let gs: HashSet<&Span> = g.spans().iter().collect();
        correct += p.spans().iter().filter(|s| gs.contains(s)).count();
        predicted += p.len();
        total += g.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, total);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
        correct,
        predicted,
        gold: total,
    })
}

/// [`entity_f1`] on BIOES tag sequences sharing one scheme.
pub fn entity_f1_tags(
    pred: &[crate::corpus::TagSequence],
    gold: &[crate::corpus::TagSequence],
    scheme: &BioesScheme,
) -> Result<Prf> {
    let p: Vec<SpanSet> = pred.iter().map(|t| bioes_to_spans(t, scheme)).collect();
    let g: Vec<SpanSet> = gold.iter().map(|t| bioes_to_spans(t, scheme)).collect();
    entity_f1(&p, &g)
}

/// Corpus-level (UAS, LAS) over all tokens.
pub fn uas_las(pred: &[HeadAssignment], gold: &[HeadAssignment]) -> Result<(f64, f64)> {
    if pred.len() != gold.len() {
        return usage(format!("{} predicted vs {} gold sentences", pred.len(), gold.len()));
    }
    let (mut tokens, mut heads, mut labeled) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        if p.heads.len() != g.heads.len() || p.rels.len() != g.rels.len() {
            return usage("predicted and gold sentence lengths differ");
        }
        for i in 0..g.heads.len() {
            tokens += 1;
            if p.heads[i] == g.heads[i] {
                heads += 1;
                if p.rels[i] == g.rels[i] {
                    labeled += 1;
                }
            }
        }
    }
    if tokens == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((heads as f64 / tokens as f64, labeled as f64 / tokens as f64))
}

// Spans re-expressed over a shared type alphabet, so predictions and gold
// from different label spaces compare by type name.
fn named_spans(spans: &SpanSet, types: &LabelAlphabet, shared: &mut LabelAlphabet) -> SpanSet {
    let out = spans
        .spans()
        .iter()
        .map(|s| Span::new(s.start, s.end, shared.intern(types.label(s.label).expect("type id"))))
        .collect();
    SpanSet::new(out, spans.spans().iter().map(|s| s.end).max().unwrap_or(0)).expect("disjoint spans")
}

fn spans_of(gold: &Gold, labels: &LabelAlphabet, shared: &mut LabelAlphabet) -> Result<SpanSet> {
    match gold {
        Gold::Tags(t) => {
            let scheme = BioesScheme::from_tags(labels)?;
            Ok(named_spans(&bioes_to_spans(t, &scheme), scheme.types(), shared))
        }
        Gold::Spans(s) => Ok(named_spans(s, labels, shared)),
        Gold::Heads(_) => usage("dependency structures have no entity spans"),
    }
}

/// Evaluates `model` on every gold-annotated record of `corpus`.
pub fn evaluate(model: &AnyModel, corpus: &Corpus) -> Result<EvalReport> {
    let feats: Vec<(Feats, &Gold)> = corpus
        .records
        .iter()
        .filter_map(|r| r.gold.as_ref().map(|g| (model.features(&r.tokens), g)))
        .collect();
    evaluate_prepared(model, &feats, &corpus.labels)
}

fn evaluate_prepared(model: &AnyModel, data: &[(Feats, &Gold)], labels: &LabelAlphabet) -> Result<EvalReport> {
    if model.family().is_dependency() {
        let mut pred = Vec::with_capacity(data.len());
        let mut gold = Vec::with_capacity(data.len());
        for (f, g) in data {
            let g = model.align_gold(g, labels)?;
            match (model.predict(f)?, g) {
                (Gold::Heads(p), Gold::Heads(g)) => {
                    pred.push(p);
                    gold.push(g);
                }
                _ => return usage("expected dependency structures"),
            }
        }
        let (uas, las) = uas_las(&pred, &gold)?;
        let tokens = gold.iter().map(|g| g.heads.len()).sum();
        return Ok(EvalReport::Attachment { uas, las, tokens });
    }
    let model_labels = model.labels();
    let bioes = match model {
        AnyModel::NerSpan(_) => true,
        _ => BioesScheme::from_tags(model_labels).is_ok(),
    };
    if !bioes {
        let (mut right, mut tokens) = (0usize, 0usize);
        for (f, g) in data {
            if let (Gold::Tags(p), Gold::Tags(g)) = (model.predict(f)?, model.align_gold(g, labels)?) {
                tokens += g.0.len();
                right += p.0.iter().zip(&g.0).filter(|(a, b)| a == b).count();
            }
        }
        let accuracy = if tokens == 0 { 0.0 } else { right as f64 / tokens as f64 };
        return Ok(EvalReport::TagAccuracy { accuracy, tokens });
    }
    let mut shared = LabelAlphabet::new(crate::corpus::AlphabetRole::EntityTypes);
    let mut pred = Vec::with_capacity(data.len());
    let mut gold = Vec::with_capacity(data.len());
    for (f, g) in data {
        pred.push(spans_of(&model.predict(f)?, model_labels, &mut shared)?);
        gold.push(spans_of(g, labels, &mut shared)?);
    }
    let prf = entity_f1(&pred, &gold)?;
    Ok(EvalReport::EntityF1 {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        correct: prf.correct,
        predicted: prf.predicted,
        gold: prf.gold,
    })
}

/// Concatenates two corpora, re-expressing `b`'s gold ids in the merged
/// alphabet.
pub fn merge_corpora(a: &Corpus, b: &Corpus) -> Corpus {
    let b = b.remap(&a.labels);
    let mut records = a.records.clone();
    records.extend(b.records);
    Corpus {
        records,
        labels: b.labels,
    }
}

/// Labels every sentence of `corpus` with the teacher's top-1 structure.
/// The result's alphabet is the teacher's output alphabet.
pub fn pseudo_label_corpus(teacher: &AnyModel, corpus: &Corpus) -> Result<Corpus> {
    let records = corpus
        .records
        .iter()
        .map(|r| pseudo_label(teacher, &r.tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        records,
        labels: teacher.output_labels(),
    })
}

fn check_distillation(student: &AnyModel, d: &Distillation<'_>) -> Result<()> {
    let case = d.config.case;
    if d.teacher.family() != teacher_family(case) {
        return usage(format!(
            "case {case} needs a {} teacher, got {}",
            teacher_family(case),
            d.teacher.family()
        ));
    }
    if student.family() != student_family(case) {
        return usage(format!(
            "case {case} trains a {} student, got {}",
            student_family(case),
            student.family()
        ));
    }
    if student.labels() != &d.teacher.output_labels() {
        return usage("student and teacher label alphabets differ");
    }
    Ok(())
}

/// Trains `model` in place of a copy and returns the best-dev checkpoint.
/// When distilling, every sentence contributes
/// `λ(step)·L_KD + (1 − λ(step))·L_target`.
pub fn train(
    model: AnyModel,
    train_data: &Corpus,
    dev: Option<&Corpus>,
    distill: Option<Distillation<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_data.records.is_empty() {
        return usage("training data is empty");
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) || !(cfg.lr_decay >= 0.0) {
        return usage("batch size and learning rate must be positive, decay non-negative");
    }
    if let Some(d) = &distill {
        check_distillation(&model, d)?;
    }
    let mut examples = Vec::with_capacity(train_data.records.len());
    for r in &train_data.records {
        let gold = r
            .gold
            .as_ref()
            .ok_or_else(|| Error::Usage("training records need gold or pseudo-gold structures".into()))?;
        let table = match &distill {
            Some(d) => Some(teacher_marginal_table(d.config.case, d.teacher, &r.tokens, &d.config.temp)?),
            None => None,
        };
        examples.push(Example {
            feats: model.features(&r.tokens),
            gold: model.align_gold(gold, &train_data.labels)?,
            table,
        });
    }
    let dev_data: Vec<(Feats, &Gold)> = dev
        .map(|c| {
            c.records
                .iter()
                .filter_map(|r| r.gold.as_ref().map(|g| (model.features(&r.tokens), g)))
                .collect()
        })
        .unwrap_or_default();
    let dev_labels = dev.map(|c| c.labels.clone());

    let batches = examples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let anneal = match &distill {
        Some(d) => Some(AnnealConfig::new(d.config.anneal_rate, total_steps.max(1))?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut model = model;
    let mut grad = model.zeros_like();
    let eval = |m: &AnyModel| -> Result<Option<EvalReport>> {
        match &dev_labels {
            Some(l) if !dev_data.is_empty() => Ok(Some(evaluate_prepared(m, &dev_data, l)?)),
            _ => Ok(None),
        }
    };
    let mut best = model.clone();
    let mut best_report = eval(&model)?;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr / (1.0 + cfg.lr_decay * epoch as f64);
        order.shuffle(&mut rng);
        let (mut total, mut target_sum, mut kd_sum) = (0.0, 0.0, 0.0);
        let mut lambda = None;
        for batch in order.chunks(cfg.batch_size) {
            let coef = 1.0 / batch.len() as f64;
            let lam = anneal.as_ref().map(|a| lambda_schedule(step, a));
            for &k in batch {
                let ex = &examples[k];
                match (lam, &distill, &ex.table) {
                    (Some(l), Some(d), Some(table)) => {
                        let kd = if l > 0.0 {
                            model.kd_loss(&ex.feats, table, &d.config.temp, coef * l, &mut grad)?
                        } else {
                            0.0
                        };
                        let tgt = if l < 1.0 {
                            model.target_loss(&ex.feats, &ex.gold, coef * (1.0 - l), &mut grad)?
                        } else {
                            0.0
                        };
                        kd_sum += kd;
                        target_sum += tgt;
                        total += l * kd + (1.0 - l) * tgt;
                    }
                    _ => {
                        let tgt = model.target_loss(&ex.feats, &ex.gold, coef, &mut grad)?;
                        target_sum += tgt;
                        total += tgt;
                    }
                }
            }
            model.apply_and_clear(&mut grad, lr)?;
            lambda = lam;
            step += 1;
        }
        let n = examples.len() as f64;
        if !total.is_finite() {
            return Err(Error::Degenerate(format!("training loss diverged in epoch {}", epoch + 1)));
        }
        let report = eval(&model)?;
        let dev_metric = report.as_ref().map(EvalReport::primary);
        let improved = match (&report, &best_report) {
            (Some(r), Some(b)) => r.primary() > b.primary(),
            _ => true,
        };
        if improved {
            best = model.clone();
            best_report = report;
            best_epoch = epoch + 1;
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            lambda_end: lambda,
            train_loss: total / n,
            target_loss: target_sum / n,
            kd_loss: distill.as_ref().map(|_| kd_sum / n),
            dev_metric,
        });
    }
    let pseudo = train_data
        .records
        .iter()
        .filter(|r| r.provenance == crate::corpus::Provenance::PseudoLabeled)
        .count();
    let manifest = RunManifest {
        family: best.family(),
        case: distill.as_ref().map(|d| d.config.case.tag().to_owned()),
        seed: cfg.seed,
        train: cfg.clone(),
        temperature: distill.as_ref().map(|d| d.config.temp.t),
        temperature_mode: distill.as_ref().map(|d| format!("{:?}", d.config.temp.mode).to_lowercase()),
        temperature_student_side: distill.as_ref().map(|d| d.config.temp.student_side),
        anneal_rate: distill.as_ref().map(|d| d.config.anneal_rate),
        hash_bits: best.hash_bits(),
        template_version: TEMPLATE_VERSION.to_owned(),
        deterministic: true,
        train_sentences: train_data.records.len(),
        pseudo_labeled_sentences: pseudo,
        dev_sentences: dev_data.len(),
        history,
        best_epoch,
        dev: best_report,
        test: None,
    };
    Ok(TrainOutcome { model: best, manifest })
}

/// Flat run configuration, as read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub family: Option<String>,
    pub case: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub hash_bits: Option<u32>,
    pub temperature: Option<f64>,
    pub temperature_mode: Option<String>,
    pub temperature_student_side: Option<bool>,
    pub anneal_rate: Option<f64>,
    pub bioes_mask: Option<bool>,
    pub mfvi_iterations: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("bad run config: {e}")))
    }

    /// Training settings, with defaults for anything unset.
    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            lr: self.lr.unwrap_or(d.lr),
            lr_decay: self.lr_decay.unwrap_or(d.lr_decay),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    /// Distillation settings for `case`; temperature defaults to 1 in
    /// local mode and the anneal rate to 1.
    pub fn distill_config(&self, case: KdCase) -> Result<DistillConfig> {
        let mode = match &self.temperature_mode {
            Some(m) => m.parse()?,
            None => crate::distill::TempMode::Local,
        };
        let mut temp = TemperatureConfig::new(self.temperature.unwrap_or(1.0), mode)?;
        temp.student_side = self.temperature_student_side.unwrap_or(false);
        Ok(DistillConfig {
            case,
            temp,
            anneal_rate: self.anneal_rate.unwrap_or(1.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate, SynthConfig, SynthTask};
    use crate::corpus::TagSequence;

    fn sp(v: &[(usize, usize, usize)]) -> SpanSet {
        SpanSet::new(v.iter().map(|&(a, b, l)| Span::new(a, b, l)).collect(), 10).unwrap()
    }

    #[test]
    fn f1_examples() {
        let g = vec![sp(&[(1, 2, 0), (4, 4, 1)])];
        let p = entity_f1(&g, &g).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = entity_f1(&[SpanSet::empty()], &g).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let p = entity_f1(&[sp(&[(1, 2, 0), (6, 7, 0)])], &g).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn attachment_examples() {
        let g = vec![HeadAssignment { heads: vec![2, 0], rels: vec![0, 1] }];
        assert_eq!(uas_las(&g, &g).unwrap(), (1.0, 1.0));
        let wrong_rels = vec![HeadAssignment { heads: vec![2, 0], rels: vec![1, 0] }];
        assert_eq!(uas_las(&wrong_rels, &g).unwrap(), (1.0, 0.0));
        let half = vec![HeadAssignment { heads: vec![2, 1], rels: vec![0, 1] }];
        assert_eq!(uas_las(&half, &g).unwrap(), (0.5, 0.5));
        let short = vec![HeadAssignment { heads: vec![0], rels: vec![0] }];
        assert!(matches!(uas_las(&short, &g), Err(Error::Usage(_))));
    }

    #[test]
    fn tag_f1_goes_through_spans() {
        let tags = BioesScheme::canonical_tags(&LabelAlphabet::from_labels(
            crate::corpus::AlphabetRole::EntityTypes,
            &["PER"],
        ));
        let s = BioesScheme::from_tags(&tags).unwrap();
        let id = |n: &str| tags.id(n).unwrap();
        let gold = TagSequence(vec![id("B-PER"), id("E-PER"), id("O")]);
        // An unanchored fragment is dropped, so nothing is predicted.
        let pred = TagSequence(vec![id("I-PER"), id("E-PER"), id("O")]);
        let p = entity_f1_tags(&[pred], &[gold], &s).unwrap();
        assert_eq!((p.predicted, p.gold, p.f1), (0, 1, 0.0));
    }

    fn chain_data(n: usize, seed: u64) -> crate::corpus::synth::SynthData {
        let mut c = SynthConfig::new(SynthTask::Chain, n, 6, 1, seed);
        c.vocab = 30;
        c.hash_bits = 12;
        generate(&c).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let d = chain_data(10, 1);
        let m = AnyModel::new(Family::NerMaxent, d.corpus.labels.clone(), 12);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train(m.clone(), &d.corpus, Some(&d.corpus), None, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.manifest.history.is_empty());
    }

    #[test]
    fn same_seed_same_manifest() {
        let d = chain_data(40, 2);
        let crf = d.planted.clone();
        let dc = DistillConfig {
            case: KdCase::Crf2MaxEnt,
            temp: TemperatureConfig::new(2.0, crate::distill::TempMode::Local).unwrap(),
            anneal_rate: 1.0,
        };
        let run = || {
            let m = AnyModel::new(Family::NerMaxent, d.corpus.labels.clone(), 12);
            let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 7, ..TrainConfig::default() };
            let dist = Distillation { teacher: &crf, config: &dc };
            train(m, &d.corpus, Some(&d.corpus), Some(dist), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.model, b.model);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.manifest.write_json(&mut x).unwrap();
        b.manifest.write_json(&mut y).unwrap();
        assert_eq!(x, y);
        let mut csv = Vec::new();
        a.manifest.write_history_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let d = chain_data(10, 3);
        for family in [Family::NerCrf, Family::NerMaxent] {
            let m = AnyModel::new(family, d.corpus.labels.clone(), 12);
            let cfg = TrainConfig { epochs: 8, lr: 0.01, batch_size: 32, seed: 1, lr_decay: 0.0 };
            let out = train(m, &d.corpus, None, None, &cfg).unwrap();
            let losses: Vec<f64> = out.manifest.history.iter().map(|r| r.train_loss).collect();
            for w in losses.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{losses:?}");
            }
        }
    }

    #[test]
    fn family_case_mismatch_is_usage_error() {
        let d = chain_data(5, 4);
        let dc = DistillConfig {
            case: KdCase::Crf2Crf,
            temp: TemperatureConfig::identity(),
            anneal_rate: 1.0,
        };
        let m = AnyModel::new(Family::NerMaxent, d.corpus.labels.clone(), 12);
        let dist = Distillation { teacher: &d.planted, config: &dc };
        let r = train(m, &d.corpus, None, Some(dist), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn run_config_parses_flat_toml() {
        let c = RunConfig::from_toml("epochs = 3\nlr = 0.05\ntemperature = 2.0\ntemperature_mode = \"local\"\n").unwrap();
        assert_eq!(c.train_config().epochs, 3);
        let d = c.distill_config(KdCase::Crf2MaxEnt).unwrap();
        assert_eq!(d.temp.t, 2.0);
        assert!(RunConfig::from_toml("nonsense = 1").is_err());
    }
}
