//! Model families behind one enum, their JSON file format, and the
//! per-case glue between teachers, students and the KD losses.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::chain_crf::{viterbi, ChainCrf};
use crate::corpus::{
    bioes_to_spans, spans_to_bioes, BioesScheme, Gold, HeadAssignment, LabelAlphabet, Provenance,
    SentenceRecord, SpanSet, TagSequence,
};
use crate::distill::{self, KdCase, MarginalTable, TemperatureConfig};
use crate::error::{usage, Error, Result};
use crate::head_parser::{
    arc_marginal_table, decode_heads, first_order_distributions, head_softmax, joint_log_softmax,
    mfvi_second_order, ArcDistributions, ArcTagger, HeadFeatures, HeadSelector, SiblingFeatures,
    SiblingParser,
};
use crate::scorer::{FeatureVec, TEMPLATE_VERSION};
use crate::span_ner::{SpanFeatures, SpanModel};
use crate::token_maxent::{row_log_softmax, TokenMaxEnt};

/// Model family names as used on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    NerCrf,
    NerMaxent,
    NerSpan,
    #[serde(rename = "dep-1st")]
    Dep1st,
    #[serde(rename = "dep-2nd")]
    Dep2nd,
    DepTagger,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::NerCrf,
        Family::NerMaxent,
        Family::NerSpan,
        Family::Dep1st,
        Family::Dep2nd,
        Family::DepTagger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::NerCrf => "ner-crf",
            Family::NerMaxent => "ner-maxent",
            Family::NerSpan => "ner-span",
            Family::Dep1st => "dep-1st",
            Family::Dep2nd => "dep-2nd",
            Family::DepTagger => "dep-tagger",
        }
    }

    pub fn is_dependency(self) -> bool {
        matches!(self, Family::Dep1st | Family::Dep2nd | Family::DepTagger)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown model family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "kebab-case")]
pub enum AnyModel {
    NerCrf(ChainCrf),
    NerMaxent(TokenMaxEnt),
    NerSpan(SpanModel),
    #[serde(rename = "dep-1st")]
    Dep1st(HeadSelector),
    #[serde(rename = "dep-2nd")]
    Dep2nd(SiblingParser),
    DepTagger(ArcTagger),
}

/// Cached per-sentence features for one model.
#[derive(Clone, Debug)]
pub enum Feats {
    Tokens(Vec<FeatureVec>),
    Spans(SpanFeatures),
    Heads(HeadFeatures),
    Siblings(HeadFeatures, SiblingFeatures),
}

fn feats_mismatch<T>() -> Result<T> {
    usage("features were built for a different model family")
}

impl AnyModel {
    /// A zero-initialized model whose outputs are `labels` (tags, entity
    /// types or relations, depending on the family).
    pub fn new(family: Family, labels: LabelAlphabet, bits: u32) -> Self {
        match family {
            Family::NerCrf => AnyModel::NerCrf(ChainCrf::new(labels, bits)),
            Family::NerMaxent => AnyModel::NerMaxent(TokenMaxEnt::new(labels, bits)),
            Family::NerSpan => AnyModel::NerSpan(SpanModel::new(labels, bits)),
            Family::Dep1st => AnyModel::Dep1st(HeadSelector::new(labels, bits)),
            Family::Dep2nd => AnyModel::Dep2nd(SiblingParser::new(labels, bits)),
            Family::DepTagger => AnyModel::DepTagger(ArcTagger::new(labels, bits)),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            AnyModel::NerCrf(_) => Family::NerCrf,
            AnyModel::NerMaxent(_) => Family::NerMaxent,
            AnyModel::NerSpan(_) => Family::NerSpan,
            AnyModel::Dep1st(_) => Family::Dep1st,
            AnyModel::Dep2nd(_) => Family::Dep2nd,
            AnyModel::DepTagger(_) => Family::DepTagger,
        }
    }

    pub fn hash_bits(&self) -> u32 {
        match self {
            AnyModel::NerCrf(m) => m.emit.bits(),
            AnyModel::NerMaxent(m) => m.emit.bits(),
            AnyModel::NerSpan(m) => m.params.bits(),
            AnyModel::Dep1st(m) => m.arc.bits(),
            AnyModel::Dep2nd(m) => m.sib.bits(),
            AnyModel::DepTagger(m) => m.params.bits(),
        }
    }

    /// The alphabet gold structures are expressed in.
    pub fn labels(&self) -> &LabelAlphabet {
        match self {
            AnyModel::NerCrf(m) => &m.tags,
            AnyModel::NerMaxent(m) => &m.tags,
            AnyModel::NerSpan(m) => &m.types,
            AnyModel::Dep1st(m) => &m.rels,
            AnyModel::Dep2nd(m) => &m.base.rels,
            AnyModel::DepTagger(m) => &m.rels,
        }
    }

    /// The alphabet of decoded output written to files: tags for taggers,
    /// canonical BIOES tags for the span model, relations for parsers.
    pub fn output_labels(&self) -> LabelAlphabet {
        match self {
            AnyModel::NerSpan(m) => m.bioes_tags(),
            other => other.labels().clone(),
        }
    }

    pub fn features(&self, tokens: &[String]) -> Feats {
        match self {
            AnyModel::NerCrf(m) => Feats::Tokens(m.features(tokens)),
            AnyModel::NerMaxent(m) => Feats::Tokens(m.features(tokens)),
            AnyModel::NerSpan(m) => Feats::Spans(m.features(tokens)),
            AnyModel::Dep1st(m) => Feats::Heads(m.features(tokens)),
            AnyModel::Dep2nd(m) => {
                let (h, s) = m.features(tokens);
                Feats::Siblings(h, s)
            }
            AnyModel::DepTagger(m) => Feats::Heads(m.features(tokens)),
        }
    }

    /// Re-expresses a gold structure whose ids refer to `source` in this
    /// model's label space. NER tags become spans for the span model.
    pub fn align_gold(&self, gold: &Gold, source: &LabelAlphabet) -> Result<Gold> {
        let target = self.labels();
        let map = |id: usize| -> Result<usize> {
            let name = source
                .label(id)
                .ok_or_else(|| Error::Usage(format!("label id {id} not in source alphabet")))?;
            target
                .id(name)
                .ok_or_else(|| Error::Usage(format!("label {name:?} unknown to the model")))
        };
        match (self, gold) {
            (AnyModel::NerCrf(_) | AnyModel::NerMaxent(_), Gold::Tags(t)) => {
                Ok(Gold::Tags(TagSequence(t.0.iter().map(|&i| map(i)).collect::<Result<_>>()?)))
            }
            (AnyModel::NerSpan(_), Gold::Tags(t)) => {
                let scheme = BioesScheme::from_tags(source)?;
                let spans = bioes_to_spans(t, &scheme);
                let types = scheme.types();
                let mut out = Vec::with_capacity(spans.len());
                for sp in spans.spans() {
                    let name = types.label(sp.label).expect("scheme type");
                    let id = target
                        .id(name)
                        .ok_or_else(|| Error::Usage(format!("entity type {name:?} unknown to the model")))?;
                    out.push(crate::corpus::Span::new(sp.start, sp.end, id));
                }
                Ok(Gold::Spans(SpanSet::new(out, t.0.len())?))
            }
            (AnyModel::NerSpan(_), Gold::Spans(s)) => {
                let spans = s
                    .spans()
                    .iter()
                    .map(|sp| Ok(crate::corpus::Span::new(sp.start, sp.end, map(sp.label)?)))
                    .collect::<Result<Vec<_>>>()?;
                let n = spans.iter().map(|sp| sp.end).max().unwrap_or(0);
                Ok(Gold::Spans(SpanSet::new(spans, n)?))
            }
            (AnyModel::Dep1st(_) | AnyModel::Dep2nd(_) | AnyModel::DepTagger(_), Gold::Heads(h)) => {
                Ok(Gold::Heads(HeadAssignment {
                    heads: h.heads.clone(),
                    rels: h.rels.iter().map(|&r| map(r)).collect::<Result<_>>()?,
                }))
            }
            _ => usage(format!("{} models cannot train on this kind of gold structure", self.family())),
        }
    }

    /// Negative log-likelihood of `gold` (in this model's label space),
    /// adding `coef ×` its gradient into `grad`.
    pub fn target_loss(&self, feats: &Feats, gold: &Gold, coef: f64, grad: &mut AnyModel) -> Result<f64> {
        match (self, feats, gold, grad) {
            (AnyModel::NerCrf(m), Feats::Tokens(f), Gold::Tags(t), AnyModel::NerCrf(g)) => m.target_loss(f, t, coef, g),
            (AnyModel::NerMaxent(m), Feats::Tokens(f), Gold::Tags(t), AnyModel::NerMaxent(g)) => {
                m.target_loss(f, t, coef, g)
            }
            (AnyModel::NerSpan(m), Feats::Spans(f), Gold::Spans(s), AnyModel::NerSpan(g)) => m.target_loss(f, s, coef, g),
            (AnyModel::Dep1st(m), Feats::Heads(f), Gold::Heads(h), AnyModel::Dep1st(g)) => m.target_loss(f, h, coef, g),
            (AnyModel::Dep2nd(m), Feats::Siblings(f, s), Gold::Heads(h), AnyModel::Dep2nd(g)) => {
                m.target_loss(f, s, h, coef, g)
            }
            (AnyModel::DepTagger(m), Feats::Heads(f), Gold::Heads(h), AnyModel::DepTagger(g)) => {
                m.target_loss(f, h, coef, g)
            }
            _ => usage("model, features, gold structure and gradient buffer disagree in family"),
        }
    }

    /// KD loss of this (student) model against a teacher table, adding
    /// `coef ×` its gradient into `grad`. CRF students use the global
    /// factorized loss, all others the per-site cross-entropy.
    pub fn kd_loss(
        &self,
        feats: &Feats,
        table: &MarginalTable,
        temp: &TemperatureConfig,
        coef: f64,
        grad: &mut AnyModel,
    ) -> Result<f64> {
        let sf = temp.student_factor();
        match (self, feats, table, grad) {
            (AnyModel::NerCrf(m), Feats::Tokens(f), MarginalTable::Pairwise(_), AnyModel::NerCrf(g)) => {
                let lat = m.lattice(f).scaled(sf);
                let (loss, d) = distill::kd_loss_global(table, &lat)?;
                m.backprop(f, &d, coef * sf, g);
                Ok(loss)
            }
            (AnyModel::NerMaxent(m), Feats::Tokens(f), MarginalTable::Unary(t), AnyModel::NerMaxent(g)) => {
                let logp = row_log_softmax(&(m.scores(f) * sf))?;
                let (loss, d) = distill::kd_loss_local(t, &logp)?;
                m.backprop(f, &d, coef * sf, g);
                Ok(loss)
            }
            (AnyModel::DepTagger(m), Feats::Heads(f), MarginalTable::Arcs(t), AnyModel::DepTagger(g)) => {
                let logp = joint_log_softmax(&m.scores(f).mapv(|v| v * sf))?;
                let (loss, d) = distill::kd_loss_local_arcs(t, &logp)?;
                m.backprop(f, &d, coef * sf, g);
                Ok(loss)
            }
            _ => usage("student family does not match the teacher table"),
        }
    }

    /// Decoded structure in this model's label space (span models return
    /// spans).
    pub fn predict(&self, feats: &Feats) -> Result<Gold> {
        match (self, feats) {
            (AnyModel::NerCrf(m), Feats::Tokens(f)) => Ok(Gold::Tags(m.decode(f))),
            (AnyModel::NerMaxent(m), Feats::Tokens(f)) => Ok(Gold::Tags(m.decode(f)?)),
            (AnyModel::NerSpan(m), Feats::Spans(f)) => Ok(Gold::Spans(m.decode(f))),
            (AnyModel::Dep1st(m), Feats::Heads(f)) => Ok(Gold::Heads(decode_heads(&m.distributions(f)?))),
            (AnyModel::Dep2nd(m), Feats::Siblings(f, s)) => Ok(Gold::Heads(decode_heads(&m.distributions(f, s)?))),
            (AnyModel::DepTagger(m), Feats::Heads(f)) => Ok(Gold::Heads(m.decode(f)?)),
            _ => feats_mismatch(),
        }
    }

    pub fn zeros_like(&self) -> AnyModel {
        match self {
            AnyModel::NerCrf(m) => AnyModel::NerCrf(m.zeros_like()),
            AnyModel::NerMaxent(m) => AnyModel::NerMaxent(m.zeros_like()),
            AnyModel::NerSpan(m) => AnyModel::NerSpan(m.zeros_like()),
            AnyModel::Dep1st(m) => AnyModel::Dep1st(m.zeros_like()),
            AnyModel::Dep2nd(m) => AnyModel::Dep2nd(m.zeros_like()),
            AnyModel::DepTagger(m) => AnyModel::DepTagger(m.zeros_like()),
        }
    }

    /// `self −= step · grad`, then zeroes `grad`.
    pub fn apply_and_clear(&mut self, grad: &mut AnyModel, step: f64) -> Result<()> {
        match (self, grad) {
            (AnyModel::NerCrf(m), AnyModel::NerCrf(g)) => m.apply_and_clear(g, step),
            (AnyModel::NerMaxent(m), AnyModel::NerMaxent(g)) => m.apply_and_clear(g, step),
            (AnyModel::NerSpan(m), AnyModel::NerSpan(g)) => m.apply_and_clear(g, step),
            (AnyModel::Dep1st(m), AnyModel::Dep1st(g)) => m.apply_and_clear(g, step),
            (AnyModel::Dep2nd(m), AnyModel::Dep2nd(g)) => m.apply_and_clear(g, step),
            (AnyModel::DepTagger(m), AnyModel::DepTagger(g)) => m.apply_and_clear(g, step),
            _ => return usage("gradient buffer belongs to another family"),
        }
        Ok(())
    }

    /// Mutable views of every parameter block, for finite-difference checks
    /// and bulk initialization.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            AnyModel::NerCrf(m) => vec![
                m.emit.weights_mut(),
                m.trans.as_slice_mut().expect("standard layout"),
                m.start.as_slice_mut().expect("standard layout"),
                m.stop.as_slice_mut().expect("standard layout"),
            ],
            AnyModel::NerMaxent(m) => vec![m.emit.weights_mut()],
            AnyModel::NerSpan(m) => vec![m.params.weights_mut()],
            AnyModel::Dep1st(m) => vec![m.arc.weights_mut(), m.rel.weights_mut()],
            AnyModel::Dep2nd(m) => vec![m.base.arc.weights_mut(), m.base.rel.weights_mut(), m.sib.weights_mut()],
            AnyModel::DepTagger(m) => vec![m.params.weights_mut()],
        }
    }

    /// Read-only counterpart of [`AnyModel::param_blocks_mut`].
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        match self {
            AnyModel::NerCrf(m) => vec![
                m.emit.weights(),
                m.trans.as_slice().expect("standard layout"),
                m.start.as_slice().expect("standard layout"),
                m.stop.as_slice().expect("standard layout"),
            ],
            AnyModel::NerMaxent(m) => vec![m.emit.weights()],
            AnyModel::NerSpan(m) => vec![m.params.weights()],
            AnyModel::Dep1st(m) => vec![m.arc.weights(), m.rel.weights()],
            AnyModel::Dep2nd(m) => vec![m.base.arc.weights(), m.base.rel.weights(), m.sib.weights()],
            AnyModel::DepTagger(m) => vec![m.params.weights()],
        }
    }
}

/// The teacher family each KD case requires.
pub fn teacher_family(case: KdCase) -> Family {
    match case {
        KdCase::Crf2Crf | KdCase::Crf2MaxEnt => Family::NerCrf,
        KdCase::Heads2Heads => Family::Dep1st,
        KdCase::Sibling2Heads => Family::Dep2nd,
        KdCase::MaxEnt2Crf => Family::NerMaxent,
        KdCase::Span2Bioes => Family::NerSpan,
    }
}

/// The student family each KD case trains.
pub fn student_family(case: KdCase) -> Family {
    match case {
        KdCase::Crf2Crf | KdCase::MaxEnt2Crf => Family::NerCrf,
        KdCase::Crf2MaxEnt | KdCase::Span2Bioes => Family::NerMaxent,
        KdCase::Heads2Heads | KdCase::Sibling2Heads => Family::DepTagger,
    }
}

fn check_case(case: KdCase, teacher: &AnyModel) -> Result<()> {
    let want = teacher_family(case);
    if teacher.family() != want {
        return usage(format!(
            "case {case} needs a {want} teacher, got {}",
            teacher.family()
        ));
    }
    Ok(())
}

/// A zero-initialized student for `case` sharing the teacher's output space.
pub fn new_student(case: KdCase, teacher: &AnyModel, bits: u32) -> Result<AnyModel> {
    check_case(case, teacher)?;
    Ok(AnyModel::new(student_family(case), teacher.output_labels(), bits))
}

/// Teacher marginals over the student's substructures for one sentence.
pub fn teacher_marginal_table(
    case: KdCase,
    teacher: &AnyModel,
    tokens: &[String],
    temp: &TemperatureConfig,
) -> Result<MarginalTable> {
    check_case(case, teacher)?;
    let feats = teacher.features(tokens);
    let g = temp.global_factor();
    match (case, teacher, &feats) {
        (KdCase::Crf2Crf, AnyModel::NerCrf(m), Feats::Tokens(f)) => distill::crf_pairwise_table(&m.lattice(f), temp),
        (KdCase::Crf2MaxEnt, AnyModel::NerCrf(m), Feats::Tokens(f)) => distill::crf_unary_table(&m.lattice(f), temp),
        (KdCase::MaxEnt2Crf, AnyModel::NerMaxent(m), Feats::Tokens(f)) => {
            distill::maxent_pairwise_table(&m.scores(f), temp)
        }
        (KdCase::Heads2Heads, AnyModel::Dep1st(m), Feats::Heads(f)) => {
            let d = first_order_distributions(&(m.arc_scores(f) * g), &(m.rel_scores(f) * g))?;
            Ok(distill::arc_table(&d, temp))
        }
        (KdCase::Sibling2Heads, AnyModel::Dep2nd(m), Feats::Siblings(f, s)) => {
            let arc = m.base.arc_scores(f) * g;
            let sib = m.sib_scores(s) * g;
            let d = ArcDistributions {
                head_rows: mfvi_second_order(&arc, &sib, m.iterations)?,
                rel_rows: row_log_softmax(&(m.base.rel_scores(f) * g))?.mapv(f64::exp),
            };
            Ok(distill::arc_table(&d, temp))
        }
        (KdCase::Span2Bioes, AnyModel::NerSpan(m), Feats::Spans(f)) => {
            distill::span_bioes_table(&m.span_scores(f), temp)
        }
        _ => feats_mismatch(),
    }
}

/// The teacher's own full-structure log-scores, as consumed by the oracle:
/// a lattice for chain teachers, per-token joint arc log-probabilities for
/// head teachers, a span table for the span teacher. Global temperature is
/// folded in.
pub enum TeacherScores {
    Chain(crate::chain_crf::ChainLattice),
    Heads(Array3<f64>),
    Spans(crate::span_ner::SpanScoreTable),
}

pub fn teacher_scores(teacher: &AnyModel, tokens: &[String], temp: &TemperatureConfig) -> Result<TeacherScores> {
    let feats = teacher.features(tokens);
    let g = temp.global_factor();
    match (teacher, &feats) {
        (AnyModel::NerCrf(m), Feats::Tokens(f)) => Ok(TeacherScores::Chain(m.lattice(f).scaled(g))),
        (AnyModel::NerMaxent(m), Feats::Tokens(f)) => {
            let n = f.len();
            let l = m.num_labels();
            let logp = row_log_softmax(&(m.scores(f) * g))?;
            Ok(TeacherScores::Chain(crate::chain_crf::ChainLattice {
                emissions: logp,
                transitions: Array3::zeros((n.saturating_sub(1), l, l)),
                start: ndarray::Array1::zeros(l),
                stop: ndarray::Array1::zeros(l),
            }))
        }
        (AnyModel::Dep1st(m), Feats::Heads(f)) => {
            let d = first_order_distributions(&(m.arc_scores(f) * g), &(m.rel_scores(f) * g))?;
            Ok(TeacherScores::Heads(arc_marginal_table(&d).mapv(f64::ln)))
        }
        (AnyModel::Dep2nd(m), Feats::Siblings(f, s)) => {
            let d = ArcDistributions {
                head_rows: mfvi_second_order(&(m.base.arc_scores(f) * g), &(m.sib_scores(s) * g), m.iterations)?,
                rel_rows: row_log_softmax(&(m.base.rel_scores(f) * g))?.mapv(f64::exp),
            };
            Ok(TeacherScores::Heads(arc_marginal_table(&d).mapv(f64::ln)))
        }
        (AnyModel::NerSpan(m), Feats::Spans(f)) => Ok(TeacherScores::Spans(m.span_scores(f).scaled(g))),
        _ => usage(format!("{} models are not teachers", teacher.family())),
    }
}

/// Top-1 prediction of the teacher as a pseudo-labeled record. Span
/// teachers emit BIOES tags in [`AnyModel::output_labels`] order.
pub fn pseudo_label(teacher: &AnyModel, tokens: &[String]) -> Result<SentenceRecord> {
    let feats = teacher.features(tokens);
    let gold = match (teacher, &feats) {
        (AnyModel::NerCrf(m), Feats::Tokens(f)) => Gold::Tags(viterbi(&m.lattice(f))),
        (AnyModel::NerSpan(m), Feats::Spans(f)) => {
            let scheme = BioesScheme::from_tags(&m.bioes_tags())?;
            Gold::Tags(spans_to_bioes(&m.decode(f), tokens.len(), &scheme)?)
        }
        (m, f) => m.predict(f)?,
    };
    SentenceRecord::new(tokens.to_vec(), Some(gold), Provenance::PseudoLabeled)
}

/// Head-row distributions of a head teacher, for inspection.
pub fn head_distributions(model: &AnyModel, tokens: &[String]) -> Result<ArcDistributions> {
    match (model, &model.features(tokens)) {
        (AnyModel::Dep1st(m), Feats::Heads(f)) => m.distributions(f),
        (AnyModel::Dep2nd(m), Feats::Siblings(f, s)) => m.distributions(f, s),
        (AnyModel::DepTagger(m), Feats::Heads(f)) => m.distributions(f),
        _ => usage("not a dependency model"),
    }
}

/// First-order head probabilities from raw arc scores.
pub fn head_rows(arc: &Array2<f64>) -> Result<Array2<f64>> {
    head_softmax(arc)
}

/// Top-level model document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub template_version: String,
    pub hash_bits: u32,
    pub model: AnyModel,
}

impl ModelFile {
    pub fn new(model: AnyModel) -> Self {
        ModelFile {
            template_version: TEMPLATE_VERSION.to_owned(),
            hash_bits: model.hash_bits(),
            model,
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let f: ModelFile = serde_json::from_reader(input)?;
        if f.template_version != TEMPLATE_VERSION {
            return usage(format!(
                "model uses feature templates {:?}, this build has {:?}",
                f.template_version, TEMPLATE_VERSION
            ));
        }
        if f.hash_bits != f.model.hash_bits() {
            return usage("model header and weights disagree on the hash size");
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AlphabetRole;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn model_file_roundtrip() {
        let tags = LabelAlphabet::from_labels(AlphabetRole::Tags, &["O", "S-PER"]);
        let mut m = AnyModel::new(Family::NerCrf, tags, 6);
        m.param_blocks_mut()[0][3] = 1.25;
        m.param_blocks_mut()[1][1] = -0.5;
        let mut buf = Vec::new();
        ModelFile::new(m.clone()).write(&mut buf).unwrap();
        let back = ModelFile::read(buf.as_slice()).unwrap();
        assert_eq!(back.model, m);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"family\":\"ner-crf\""));
        assert!(text.contains("hashfeat-v1"));
    }

    #[test]
    fn case_family_mismatch_is_usage_error() {
        let tags = LabelAlphabet::from_labels(AlphabetRole::Tags, &["O", "S-PER"]);
        let maxent = AnyModel::new(Family::NerMaxent, tags, 6);
        let err = teacher_marginal_table(KdCase::Crf2Crf, &maxent, &toks("a b"), &TemperatureConfig::identity());
        assert!(matches!(err, Err(Error::Usage(_))));
        assert!(new_student(KdCase::Crf2Crf, &maxent, 6).is_err());
        assert!(new_student(KdCase::MaxEnt2Crf, &maxent, 6).is_ok());
    }

    #[test]
    fn span_teacher_table_small() {
        let types = LabelAlphabet::from_labels(AlphabetRole::EntityTypes, &["X"]);
        let teacher = AnyModel::new(Family::NerSpan, types, 6);
        let t = teacher_marginal_table(KdCase::Span2Bioes, &teacher, &toks("a b"), &TemperatureConfig::identity()).unwrap();
        match t {
            MarginalTable::Unary(u) => {
                let want = [0.4, 0.2, 0.0, 0.0, 0.4];
                for (g, w) in u.row(0).iter().zip(want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn pseudo_label_is_deterministic() {
        let tags = LabelAlphabet::from_labels(AlphabetRole::Tags, &["O", "S-PER"]);
        let mut m = AnyModel::new(Family::NerCrf, tags, 6);
        for (k, w) in m.param_blocks_mut()[0].iter_mut().enumerate() {
            *w = ((k * 7919) % 13) as f64 / 13.0 - 0.5;
        }
        let a = pseudo_label(&m, &toks("Ann met Bob")).unwrap();
        let b = pseudo_label(&m, &toks("Ann met Bob")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.provenance, Provenance::PseudoLabeled);
    }
}
