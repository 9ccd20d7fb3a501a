//! Structural knowledge distillation: teacher substructure marginals, the
//! factorized KD losses, temperature and teacher annealing.
//!
//! For a globally normalized student the cross-entropy against the teacher
//! factorizes over the student's substructures `u`:
//!
//! ```text
//! L_KD = −Σ_u P_t(u|x) · Score_s(u, x) + log Z_s(x)
//! ```
//!
//! and for a locally normalized student it reduces to a sum of per-site
//! cross-entropies `−Σ_u P_t(u|x) · log P_s(u|x)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::chain_crf::{self, ChainLattice, ChainMarginals};
use crate::corpus::{HeadAssignment, TagSequence};
use crate::error::{usage, Error, Result};
use crate::numerics::{argmax, lse, LOG_ZERO};

/// The six teacher/student pairings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KdCase {
    /// CRF → CRF, pairwise marginals.
    #[serde(rename = "1a")]
    Crf2Crf,
    /// First-order head selector → sequence-labeling parser, arc marginals.
    #[serde(rename = "1b")]
    Heads2Heads,
    /// CRF → MaxEnt, unary marginals.
    #[serde(rename = "2a")]
    Crf2MaxEnt,
    /// Mean-field second-order parser → sequence-labeling parser.
    #[serde(rename = "2b")]
    Sibling2Heads,
    /// MaxEnt → CRF, products of token marginals.
    #[serde(rename = "3")]
    MaxEnt2Crf,
    /// Span model → BIOES MaxEnt, BIOES marginals.
    #[serde(rename = "4")]
    Span2Bioes,
}

impl KdCase {
    pub const ALL: [KdCase; 6] = [
        KdCase::Crf2Crf,
        KdCase::Heads2Heads,
        KdCase::Crf2MaxEnt,
        KdCase::Sibling2Heads,
        KdCase::MaxEnt2Crf,
        KdCase::Span2Bioes,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            KdCase::Crf2Crf => "1a",
            KdCase::Heads2Heads => "1b",
            KdCase::Crf2MaxEnt => "2a",
            KdCase::Sibling2Heads => "2b",
            KdCase::MaxEnt2Crf => "3",
            KdCase::Span2Bioes => "4",
        }
    }

    /// Whether the student is globally normalized (uses [`kd_loss_global`]).
    pub fn global_student(self) -> bool {
        matches!(self, KdCase::Crf2Crf | KdCase::MaxEnt2Crf)
    }
}

impl fmt::Display for KdCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for KdCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KdCase::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| Error::Usage(format!("unknown KD case {s:?}; expected one of 1a 1b 2a 2b 3 4")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TempMode {
    /// Divide every teacher score entering marginalization.
    Global,
    /// Soften each marginal distribution after marginalization.
    Local,
}

impl FromStr for TempMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(TempMode::Global),
            "local" => Ok(TempMode::Local),
            _ => usage(format!("unknown temperature mode {s:?}; expected local or global")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub t: f64,
    pub mode: TempMode,
    /// Also divide the student's scores by `t` inside the KD term.
    #[serde(default)]
    pub student_side: bool,
}

impl TemperatureConfig {
    pub fn new(t: f64, mode: TempMode) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return usage(format!("temperature must be positive and finite, got {t}"));
        }
        Ok(TemperatureConfig {
            t,
            mode,
            student_side: false,
        })
    }

    pub fn identity() -> Self {
        TemperatureConfig {
            t: 1.0,
            mode: TempMode::Local,
            student_side: false,
        }
    }

    /// Factor applied to teacher scores before marginalization.
    pub fn global_factor(&self) -> f64 {
        match self.mode {
            TempMode::Global => 1.0 / self.t,
            TempMode::Local => 1.0,
        }
    }

    /// Factor applied to student scores inside the KD term.
    pub fn student_factor(&self) -> f64 {
        if self.student_side {
            1.0 / self.t
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub rate: f64,
    pub total_steps: usize,
}

impl AnnealConfig {
    pub fn new(rate: f64, total_steps: usize) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return usage(format!("anneal rate must be positive and finite, got {rate}"));
        }
        if total_steps == 0 {
            return usage("anneal total_steps must be positive");
        }
        Ok(AnnealConfig { rate, total_steps })
    }
}

/// KD interpolation weight `clamp(1 − rate · step / total_steps, 0, 1)`.
pub fn lambda_schedule(step: usize, cfg: &AnnealConfig) -> f64 {
    (1.0 - cfg.rate * step as f64 / cfg.total_steps as f64).clamp(0.0, 1.0)
}

/// Teacher probabilities over one sentence's student substructures.
#[derive(Clone, Debug, PartialEq)]
pub enum MarginalTable {
    /// Adjacent-label pairs. Row 0 of `unary` is the `(START, y₁)` pair.
    Pairwise(ChainMarginals),
    /// One label distribution per token (plain or BIOES tags).
    Unary(Array2<f64>),
    /// `n × (n+1) × R` joint head/relation probabilities per token.
    Arcs(Array3<f64>),
}

impl MarginalTable {
    pub fn len(&self) -> usize {
        match self {
            MarginalTable::Pairwise(m) => m.unary.nrows(),
            MarginalTable::Unary(u) => u.nrows(),
            MarginalTable::Arcs(a) => a.dim().0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest absolute entry-wise difference; `None` if the shapes differ.
    pub fn max_abs_diff(&self, other: &MarginalTable) -> Option<f64> {
        let diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        match (self, other) {
            (MarginalTable::Pairwise(a), MarginalTable::Pairwise(b))
                if a.pairwise.dim() == b.pairwise.dim() && a.unary.dim() == b.unary.dim() =>
            {
                let p = diff(&a.pairwise.iter().copied().collect::<Vec<_>>(), &b.pairwise.iter().copied().collect::<Vec<_>>());
                let u = diff(&a.unary.iter().copied().collect::<Vec<_>>(), &b.unary.iter().copied().collect::<Vec<_>>());
                Some(p.max(u))
            }
            (MarginalTable::Unary(a), MarginalTable::Unary(b)) if a.dim() == b.dim() => {
                Some(diff(&a.iter().copied().collect::<Vec<_>>(), &b.iter().copied().collect::<Vec<_>>()))
            }
            (MarginalTable::Arcs(a), MarginalTable::Arcs(b)) if a.dim() == b.dim() => {
                Some(diff(&a.iter().copied().collect::<Vec<_>>(), &b.iter().copied().collect::<Vec<_>>()))
            }
            _ => None,
        }
    }
}

/// `softmax(ln p / T)` over one support; zero entries stay exactly zero.
fn temper(p: &mut [f64], t: f64) {
    let logits: Vec<f64> = p
        .iter()
        .map(|&v| if v > 0.0 { v.ln() / t } else { LOG_ZERO })
        .collect();
    let z = lse(logits.iter().copied());
    if !z.is_finite() {
        return;
    }
    for (dst, l) in p.iter_mut().zip(logits) {
        *dst = if l == LOG_ZERO { 0.0 } else { (l - z).exp() };
    }
}

/// Local temperature: renormalizes `p^(1/T)` over every support of the
/// table (each pairwise slice, each unary row, each token's arc block).
/// Global temperature is applied to scores before marginalization and
/// leaves a finished table untouched.
pub fn apply_temperature(table: &MarginalTable, temp: &TemperatureConfig) -> MarginalTable {
    if temp.mode == TempMode::Global || temp.t == 1.0 {
        return table.clone();
    }
    let mut out = table.clone();
    match &mut out {
        MarginalTable::Pairwise(m) => {
            for mut slice in m.pairwise.outer_iter_mut() {
                temper(slice.as_slice_mut().expect("standard layout"), temp.t);
            }
            for mut row in m.unary.rows_mut() {
                temper(row.as_slice_mut().expect("standard layout"), temp.t);
            }
        }
        MarginalTable::Unary(u) => {
            for mut row in u.rows_mut() {
                temper(row.as_slice_mut().expect("standard layout"), temp.t);
            }
        }
        MarginalTable::Arcs(a) => {
            for mut block in a.outer_iter_mut() {
                temper(block.as_slice_mut().expect("standard layout"), temp.t);
            }
        }
    }
    out
}

/// Case 1a teacher table: chain pairwise marginals of a CRF lattice.
pub fn crf_pairwise_table(lat: &ChainLattice, temp: &TemperatureConfig) -> Result<MarginalTable> {
    let m = chain_crf::pairwise_marginals(&lat.scaled(temp.global_factor()))?;
    Ok(apply_temperature(&MarginalTable::Pairwise(m), temp))
}

/// Case 2a teacher table: chain unary marginals of a CRF lattice.
pub fn crf_unary_table(lat: &ChainLattice, temp: &TemperatureConfig) -> Result<MarginalTable> {
    let u = chain_crf::unary_marginals(&lat.scaled(temp.global_factor()))?;
    Ok(apply_temperature(&MarginalTable::Unary(u), temp))
}

/// Case 3 teacher table: pair products of MaxEnt token rows, given the
/// teacher's `n × L` token scores.
pub fn maxent_pairwise_table(scores: &Array2<f64>, temp: &TemperatureConfig) -> Result<MarginalTable> {
    let f = temp.global_factor();
    let d = crate::token_maxent::TokenDistributions::from_scores(&scores.mapv(|v| v * f))?;
    let d = match apply_temperature(&MarginalTable::Unary(d.rows), temp) {
        MarginalTable::Unary(rows) => crate::token_maxent::TokenDistributions { rows },
        _ => unreachable!(),
    };
    Ok(MarginalTable::Pairwise(crate::token_maxent::pair_marginals_from_tokens(&d)))
}

/// Cases 1b/2b teacher table: `P(hᵢ = j) · P(lᵢ = r)`.
pub fn arc_table(d: &crate::head_parser::ArcDistributions, temp: &TemperatureConfig) -> MarginalTable {
    apply_temperature(&MarginalTable::Arcs(crate::head_parser::arc_marginal_table(d)), temp)
}

/// Case 4 teacher table: BIOES marginals of a span score table, columns in
/// canonical BIOES order.
pub fn span_bioes_table(t: &crate::span_ner::SpanScoreTable, temp: &TemperatureConfig) -> Result<MarginalTable> {
    let rows = crate::span_ner::bioes_marginals(&t.scaled(temp.global_factor()))?;
    Ok(apply_temperature(&MarginalTable::Unary(rows), temp))
}

/// Per-site cross-entropy `−Σ_sites Σ_k t[k] · logp[k]` and its gradient
/// with respect to the student's site scores, `softmax − t`.
///
/// `student_logp` rows must be normalized log-distributions. Entries where
/// the teacher puts zero mass contribute nothing to the loss, so a student
/// `−∞` there is harmless.
pub fn kd_loss_local(teacher: &Array2<f64>, student_logp: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if teacher.dim() != student_logp.dim() {
        return usage(format!(
            "teacher table {:?} and student distributions {:?} differ in shape",
            teacher.dim(),
            student_logp.dim()
        ));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(teacher.dim());
    for ((t_row, s_row), mut g_row) in teacher
        .rows()
        .into_iter()
        .zip(student_logp.rows())
        .zip(grad.rows_mut())
    {
        for ((&t, &s), g) in t_row.iter().zip(s_row.iter()).zip(g_row.iter_mut()) {
            if t > 0.0 {
                loss -= t * s;
            }
            *g = s.exp() - t;
        }
    }
    Ok((loss, grad))
}

/// [`kd_loss_local`] over per-token `(head, relation)` blocks.
pub fn kd_loss_local_arcs(teacher: &Array3<f64>, student_logp: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    if teacher.dim() != student_logp.dim() {
        return usage(format!(
            "teacher arcs {:?} and student arcs {:?} differ in shape",
            teacher.dim(),
            student_logp.dim()
        ));
    }
    let (n, m, r) = teacher.dim();
    let flat = |a: &Array3<f64>| a.to_shape((n, m * r)).expect("contiguous").to_owned();
    let (loss, g) = kd_loss_local(&flat(teacher), &flat(student_logp))?;
    Ok((loss, g.into_shape_with_order((n, m, r)).expect("same size")))
}

/// Teacher weight on each student substructure score, in lattice shape:
/// the `(START, y₁)` pair feeds `start` and the first emission, pair slice
/// `i` feeds transition `i` and emission `i+1`, and `stop` is absorbed into
/// the last pair (the column sums of its slice, or the `START` pair row when
/// `n = 1`).
fn teacher_weights(table: &ChainMarginals, n: usize) -> ChainLattice {
    let first = table.unary.row(0).to_owned();
    let mut w = ChainLattice {
        emissions: Array2::zeros((n, first.len())),
        transitions: table.pairwise.clone(),
        start: first.clone(),
        stop: first.clone(),
    };
    w.emissions.row_mut(0).assign(&first);
    for i in 1..n {
        let col = table.pairwise.index_axis(Axis(0), i - 1).sum_axis(Axis(0));
        w.emissions.row_mut(i).assign(&col);
        if i == n - 1 {
            w.stop = col;
        }
    }
    w
}

/// Factorized global KD loss for a CRF student and its gradient with respect
/// to every lattice score (student marginal minus teacher weight).
pub fn kd_loss_global(table: &MarginalTable, student: &ChainLattice) -> Result<(f64, ChainLattice)> {
    let m = match table {
        MarginalTable::Pairwise(m) => m,
        _ => return usage("global KD needs a pairwise teacher table"),
    };
    let n = student.len();
    let l = student.num_labels();
    if m.unary.dim() != (n, l) || m.pairwise.dim() != (n - 1, l, l) {
        return usage(format!(
            "teacher table ({:?}, {:?}) does not match a {n} × {l} student lattice",
            m.pairwise.dim(),
            m.unary.dim()
        ));
    }
    let w = teacher_weights(m, n);
    // −Σ_u P_t(u) Score_s(u), skipping zero-probability substructures so a
    // forbidden (−∞) student score never meets a zero weight.
    fn dot<'a>(p: impl Iterator<Item = &'a f64>, s: impl Iterator<Item = &'a f64>) -> f64 {
        p.zip(s).filter(|(&p, _)| p > 0.0).map(|(p, s)| p * s).sum()
    }
    let expected = dot(w.emissions.iter(), student.emissions.iter())
        + dot(w.transitions.iter(), student.transitions.iter())
        + dot(w.start.iter(), student.start.iter())
        + dot(w.stop.iter(), student.stop.iter());
    let log_z = chain_crf::log_partition(student);
    let sm = chain_crf::pairwise_marginals(student)?;
    let mut grad = chain_crf::marginals_as_lattice(&sm);
    grad.emissions -= &w.emissions;
    grad.transitions -= &w.transitions;
    grad.start -= &w.start;
    grad.stop -= &w.stop;
    Ok((log_z - expected, grad))
}

/// Per-site mode of a table, ties toward the lowest id.
#[derive(Clone, Debug, PartialEq)]
pub enum Decoded {
    Tags(TagSequence),
    Heads(HeadAssignment),
}

/// Takes the mode of each site's marginal distribution.
pub fn decode_from_marginals(table: &MarginalTable) -> Decoded {
    let rows = |u: &Array2<f64>| {
        TagSequence(
            u.rows()
                .into_iter()
                .map(|r| argmax(&r.to_vec()))
                .collect(),
        )
    };
    match table {
        MarginalTable::Pairwise(m) => Decoded::Tags(rows(&m.unary)),
        MarginalTable::Unary(u) => Decoded::Tags(rows(u)),
        MarginalTable::Arcs(a) => {
            let (n, _, r) = a.dim();
            let mut heads = Vec::with_capacity(n);
            let mut rels = Vec::with_capacity(n);
            for i in 0..n {
                let flat: Vec<f64> = a.index_axis(Axis(0), i).iter().copied().collect();
                let best = argmax(&flat);
                heads.push(best / r);
                rels.push(best % r);
            }
            Decoded::Heads(HeadAssignment { heads, rels })
        }
    }
}
