//! Self-checks runnable from the command line: dynamic programs against
//! brute-force enumeration, KD losses against enumerated cross-entropies,
//! and analytic gradients against central finite differences.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chain_crf::{log_partition, nll_and_grad, pairwise_marginals, viterbi, ChainLattice};
use crate::corpus::{AlphabetRole, Gold, HeadAssignment, LabelAlphabet, TagSequence};
use crate::distill::{
    self, apply_temperature, crf_pairwise_table, crf_unary_table, kd_loss_global, kd_loss_local, kd_loss_local_arcs,
    maxent_pairwise_table, KdCase, MarginalTable, TempMode, TemperatureConfig,
};
use crate::error::{usage, Error, Result};
use crate::head_parser::{
    arc_marginal_table, first_order_distributions, head_nll_and_grad, joint_log_softmax, mfvi_nll_and_grad,
    mfvi_second_order, ArcDistributions,
};
use crate::model::{new_student, teacher_family, teacher_marginal_table, AnyModel, Family};
use crate::numerics::{argmax, LOG_ZERO};
use crate::oracle::{
    arc_log_prob, enumerate, exact_entropy, exact_kd_cross_entropy, exact_marginals, exact_partition, local_log_prob,
    ScoreSource, Structure, Substructures,
};
use crate::span_ner::{
    bioes_marginals, decode_spans, span_log_partition, span_log_partition_prefix, span_nll_and_grad,
    SpanScoreTable,
};
use crate::token_maxent::{local_nll_and_grad, pair_marginals_from_tokens, row_log_softmax, TokenDistributions};

/// Absolute tolerance of every DP-versus-enumeration identity.
pub const IDENTITY_TOL: f64 = 1e-9;
/// Relative tolerance of finite-difference gradient checks.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Tolerance of self-distillation stationarity.
pub const STATIONARY_TOL: f64 = 1e-7;
/// Local temperature 1 must reproduce the table to this precision.
pub const TEMP_IDENTITY_TOL: f64 = 1e-12;
/// Local and global temperature must differ by more than this.
pub const TEMP_DIFFER_MIN: f64 = 1e-6;
/// Coordinates checked per gradient check.
pub const GRAD_COORDS: usize = 50;
const FD_STEP: f64 = 1e-5;
// Gradient entries smaller than this are not sampled: their relative error
// is dominated by finite-difference round-off.
const GRAD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Chain,
    Spans,
    Heads,
    Kd,
    Grad,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Chain, Suite::Spans, Suite::Heads, Suite::Kd, Suite::Grad];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Chain => "chain",
            Suite::Spans => "spans",
            Suite::Heads => "heads",
            Suite::Kd => "kd",
            Suite::Grad => "grad",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown suite {s:?}")))
    }
}

/// Whether a measured value must stay below or exceed the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bound {
    AtMost,
    Above,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub instances: usize,
    /// Worst error (or, for `Above`, the smallest margin) observed.
    pub value: f64,
    pub bound: Bound,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(suite: Suite, name: &str, instances: usize, value: f64, threshold: f64) -> Self {
        Check {
            suite,
            name: name.to_owned(),
            instances,
            value,
            bound: Bound::AtMost,
            threshold,
            passed: value <= threshold,
        }
    }

    fn above(suite: Suite, name: &str, instances: usize, value: f64, threshold: f64) -> Self {
        Check {
            suite,
            name: name.to_owned(),
            instances,
            value,
            bound: Bound::Above,
            threshold,
            passed: value > threshold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Runs one suite (or all) over `instances` random instances per check.
pub fn run(suite: Suite, instances: usize, seed: u64) -> Result<VerifyReport> {
    if instances == 0 {
        return usage("at least one instance per check");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerifyReport::default();
    let suites: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    for s in suites {
        let checks = match s {
            Suite::Chain => chain_suite(instances, &mut rng)?,
            Suite::Spans => span_suite(instances, &mut rng)?,
            Suite::Heads => head_suite(instances, &mut rng)?,
            Suite::Kd => kd_suite(instances, &mut rng)?,
            Suite::Grad => grad_suite(&mut rng)?,
            Suite::All => unreachable!(),
        };
        report.checks.extend(checks);
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-2.0..2.0)
}

/// Random chain lattice with `n ∈ 1..=5` and `L ∈ 1..=3`.
pub fn random_lattice(rng: &mut ChaCha8Rng, n: usize, l: usize) -> ChainLattice {
    ChainLattice {
        emissions: Array2::from_shape_simple_fn((n, l), || uniform(rng)),
        transitions: Array3::from_shape_simple_fn((n - 1, l, l), || uniform(rng)),
        start: Array1::from_shape_simple_fn(l, || uniform(rng)),
        stop: Array1::from_shape_simple_fn(l, || uniform(rng)),
    }
}

fn random_arc(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n + 1), |(i, j)| if j == i + 1 { LOG_ZERO } else { uniform(rng) })
}

fn random_joint(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Array3<f64> {
    Array3::from_shape_fn((n, n + 1, r), |(i, j, _)| if j == i + 1 { LOG_ZERO } else { uniform(rng) })
}

fn random_spans(rng: &mut ChaCha8Rng, n: usize, l: usize) -> SpanScoreTable {
    SpanScoreTable::from_fn(n, l, |_, _, _| uniform(rng))
}

fn max_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn chain_suite(k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let s = Suite::Chain;
    let (mut z_err, mut pair_err, mut uni_err, mut vit_err, mut maxent_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..k {
        let n = rng.random_range(1..=5);
        let l = rng.random_range(1..=3);
        let lat = random_lattice(rng, n, l);
        let e = enumerate(ScoreSource::Chain(&lat))?;
        z_err = z_err.max((log_partition(&lat) - exact_partition(&e)).abs());
        let m = pairwise_marginals(&lat)?;
        if let MarginalTable::Pairwise(x) = exact_marginals(&e, Substructures::Pairwise)? {
            pair_err = pair_err.max(max_diff(&m.pairwise, &x.pairwise));
            uni_err = uni_err.max(max_diff(&m.unary, &x.unary));
        }
        let best = e.structures.iter().map(|(_, sc)| *sc).fold(f64::NEG_INFINITY, f64::max);
        vit_err = vit_err.max((lat.sequence_score(&viterbi(&lat).0) - best).abs());

        let scores = Array2::from_shape_simple_fn((n, l), || uniform(rng));
        let d = TokenDistributions::from_scores(&scores)?;
        let pm = pair_marginals_from_tokens(&d);
        let as_chain = maxent_lattice(&scores)?;
        if let MarginalTable::Pairwise(x) = exact_marginals(&enumerate(ScoreSource::Chain(&as_chain))?, Substructures::Pairwise)? {
            maxent_err = maxent_err.max(max_diff(&pm.pairwise, &x.pairwise)).max(max_diff(&pm.unary, &x.unary));
        }
    }
    Ok(vec![
        Check::at_most(s, "chain.log-partition", k, z_err, IDENTITY_TOL),
        Check::at_most(s, "chain.pairwise-marginals", k, pair_err, IDENTITY_TOL),
        Check::at_most(s, "chain.unary-marginals", k, uni_err, IDENTITY_TOL),
        Check::at_most(s, "chain.viterbi-score", k, vit_err, IDENTITY_TOL),
        Check::at_most(s, "chain.maxent-pair-products", k, maxent_err, IDENTITY_TOL),
    ])
}

/// A MaxEnt model as a chain: per-token log-probabilities, no transitions.
pub fn maxent_lattice(scores: &Array2<f64>) -> Result<ChainLattice> {
    let (n, l) = scores.dim();
    Ok(ChainLattice {
        emissions: row_log_softmax(scores)?,
        transitions: Array3::zeros((n.saturating_sub(1), l, l)),
        start: Array1::zeros(l),
        stop: Array1::zeros(l),
    })
}

fn span_suite(k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let s = Suite::Spans;
    let (mut z_err, mut zp_err, mut b_err, mut edge, mut dec_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..k {
        let n = rng.random_range(1..=6);
        let l = rng.random_range(1..=2);
        let t = random_spans(rng, n, l);
        let e = enumerate(ScoreSource::Spans(&t))?;
        let z = exact_partition(&e);
        z_err = z_err.max((span_log_partition(&t) - z).abs());
        zp_err = zp_err.max((span_log_partition_prefix(&t) - z).abs());
        let bm = bioes_marginals(&t)?;
        if let MarginalTable::Unary(x) = exact_marginals(&e, Substructures::Bioes)? {
            b_err = b_err.max(max_diff(&bm, &x));
        }
        for ty in 0..l {
            let (b, i, e_col) = (1 + 4 * ty, 2 + 4 * ty, 3 + 4 * ty);
            for v in [bm[[n - 1, b]], bm[[0, i]], bm[[n - 1, i]], bm[[0, e_col]]] {
                edge = edge.max(v.abs());
            }
        }
        let best = e.structures.iter().map(|(_, sc)| *sc).fold(f64::NEG_INFINITY, f64::max);
        dec_err = dec_err.max((t.structure_score(&decode_spans(&t)) - best).abs());
    }
    Ok(vec![
        Check::at_most(s, "spans.log-partition-suffix", k, z_err, IDENTITY_TOL),
        Check::at_most(s, "spans.log-partition-prefix", k, zp_err, IDENTITY_TOL),
        Check::at_most(s, "spans.bioes-marginals", k, b_err, IDENTITY_TOL),
        Check::at_most(s, "spans.edge-marginals-zero", k, edge, 0.0),
        Check::at_most(s, "spans.decode-score", k, dec_err, IDENTITY_TOL),
    ])
}

fn head_suite(k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let s = Suite::Heads;
    let (mut arc_err, mut mf_norm, mut mf_first) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..k {
        let n = rng.random_range(1..=4);
        let r = rng.random_range(1..=2);
        let arc = random_arc(rng, n);
        let rel = Array2::from_shape_simple_fn((n, r), || uniform(rng));
        let d = first_order_distributions(&arc, &rel)?;
        let joint = Array3::from_shape_fn((n, n + 1, r), |(i, j, l)| arc[[i, j]] + rel[[i, l]]);
        let e = enumerate(ScoreSource::Heads(&joint))?;
        if let MarginalTable::Arcs(x) = exact_marginals(&e, Substructures::Arcs)? {
            arc_err = arc_err.max(max_diff(&arc_marginal_table(&d), &x));
        }
        let sib = Array3::from_shape_simple_fn((n, n, n + 1), || uniform(rng));
        let q = mfvi_second_order(&arc, &sib, 3)?;
        for row in q.rows() {
            mf_norm = mf_norm.max((row.sum() - 1.0).abs());
        }
        let q0 = mfvi_second_order(&arc, &Array3::zeros((n, n, n + 1)), 3)?;
        mf_first = mf_first.max(max_diff(&q0, &d.head_rows));
    }
    Ok(vec![
        Check::at_most(s, "heads.arc-marginals", k, arc_err, IDENTITY_TOL),
        Check::at_most(s, "heads.mfvi-rows-normalized", k, mf_norm, IDENTITY_TOL),
        Check::at_most(s, "heads.mfvi-without-siblings-is-first-order", k, mf_first, IDENTITY_TOL),
    ])
}

/// Factorized KD loss and the enumerated cross-entropy for one random
/// teacher/student pair of `case`.
pub fn kd_identity_instance(case: KdCase, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let id = TemperatureConfig::identity();
    match case {
        KdCase::Crf2Crf | KdCase::MaxEnt2Crf => {
            let n = rng.random_range(1..=5);
            let l = rng.random_range(1..=3);
            let (table, teacher) = if case == KdCase::Crf2Crf {
                let t = random_lattice(rng, n, l);
                (crf_pairwise_table(&t, &id)?, t)
            } else {
                let sc = Array2::from_shape_simple_fn((n, l), || uniform(rng));
                (maxent_pairwise_table(&sc, &id)?, maxent_lattice(&sc)?)
            };
            let student = random_lattice(rng, n, l);
            let (loss, _) = kd_loss_global(&table, &student)?;
            let z = log_partition(&student);
            let exact = exact_kd_cross_entropy(&enumerate(ScoreSource::Chain(&teacher))?, |y| match y {
                Structure::Tags(t) => student.sequence_score(t) - z,
                _ => f64::NAN,
            });
            Ok((loss, exact))
        }
        KdCase::Crf2MaxEnt => {
            let n = rng.random_range(1..=5);
            let l = rng.random_range(1..=3);
            let t = random_lattice(rng, n, l);
            let table = match crf_unary_table(&t, &id)? {
                MarginalTable::Unary(u) => u,
                _ => unreachable!(),
            };
            let logp = row_log_softmax(&Array2::from_shape_simple_fn((n, l), || uniform(rng)))?;
            let (loss, _) = kd_loss_local(&table, &logp)?;
            let exact = exact_kd_cross_entropy(&enumerate(ScoreSource::Chain(&t))?, |y| local_log_prob(&logp, y));
            Ok((loss, exact))
        }
        KdCase::Heads2Heads | KdCase::Sibling2Heads => {
            let n = rng.random_range(1..=4);
            let r = rng.random_range(1..=2);
            let arc = random_arc(rng, n);
            let rel = Array2::from_shape_simple_fn((n, r), || uniform(rng));
            let d = if case == KdCase::Heads2Heads {
                first_order_distributions(&arc, &rel)?
            } else {
                let sib = Array3::from_shape_simple_fn((n, n, n + 1), || uniform(rng));
                ArcDistributions {
                    head_rows: mfvi_second_order(&arc, &sib, 3)?,
                    rel_rows: row_log_softmax(&rel)?.mapv(f64::exp),
                }
            };
            let table = match distill::arc_table(&d, &id) {
                MarginalTable::Arcs(a) => a,
                _ => unreachable!(),
            };
            let logp = joint_log_softmax(&random_joint(rng, n, r))?;
            let (loss, _) = kd_loss_local_arcs(&table, &logp)?;
            let teacher_logp = arc_marginal_table(&d).mapv(f64::ln);
            let exact =
                exact_kd_cross_entropy(&enumerate(ScoreSource::Heads(&teacher_logp))?, |y| arc_log_prob(&logp, y));
            Ok((loss, exact))
        }
        KdCase::Span2Bioes => {
            let n = rng.random_range(1..=6);
            let l = rng.random_range(1..=2);
            let t = random_spans(rng, n, l);
            let table = match distill::span_bioes_table(&t, &id)? {
                MarginalTable::Unary(u) => u,
                _ => unreachable!(),
            };
            let logp = row_log_softmax(&Array2::from_shape_simple_fn((n, 1 + 4 * l), || uniform(rng)))?;
            let (loss, _) = kd_loss_local(&table, &logp)?;
            let exact = exact_kd_cross_entropy(&enumerate(ScoreSource::Spans(&t))?, |y| local_log_prob(&logp, y));
            Ok((loss, exact))
        }
    }
}

/// Self-distillation for Case 1a: KD gradient norm and
/// `|loss − teacher entropy|`.
pub fn self_distill_crf(rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let n = rng.random_range(1..=5);
    let l = rng.random_range(1..=3);
    let lat = random_lattice(rng, n, l);
    let table = crf_pairwise_table(&lat, &TemperatureConfig::identity())?;
    let (loss, g) = kd_loss_global(&table, &lat)?;
    let norm = lattice_values(&g).iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = exact_entropy(&enumerate(ScoreSource::Chain(&lat))?);
    Ok((norm, (loss - h).abs()))
}

/// Self-distillation for Case 1b, student logits set to the teacher's log
/// arc marginals.
pub fn self_distill_heads(rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let n = rng.random_range(1..=4);
    let r = rng.random_range(1..=2);
    let arc = random_arc(rng, n);
    let rel = Array2::from_shape_simple_fn((n, r), || uniform(rng));
    let d = first_order_distributions(&arc, &rel)?;
    let table = match distill::arc_table(&d, &TemperatureConfig::identity()) {
        MarginalTable::Arcs(a) => a,
        _ => unreachable!(),
    };
    let logits = arc_marginal_table(&d).mapv(f64::ln);
    let (loss, g) = kd_loss_local_arcs(&table, &joint_log_softmax(&logits)?)?;
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = exact_entropy(&enumerate(ScoreSource::Heads(&logits))?);
    Ok((norm, (loss - h).abs()))
}

fn site_argmaxes(t: &MarginalTable) -> Vec<usize> {
    match t {
        MarginalTable::Pairwise(m) => m
            .pairwise
            .outer_iter()
            .map(|s| argmax(&s.iter().copied().collect::<Vec<_>>()))
            .chain(m.unary.rows().into_iter().map(|r| argmax(&r.to_vec())))
            .collect(),
        MarginalTable::Unary(u) => u.rows().into_iter().map(|r| argmax(&r.to_vec())).collect(),
        MarginalTable::Arcs(a) => a.outer_iter().map(|b| argmax(&b.iter().copied().collect::<Vec<_>>())).collect(),
    }
}

/// Temperature checks: (local T=1 deviation, local-vs-global difference on
/// a fixed chain teacher, number of argmax changes under local T ∈ 1..=5).
pub fn temperature_checks(k: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64, usize)> {
    let one = TemperatureConfig::new(1.0, TempMode::Local)?;
    let mut identity_err = 0.0f64;
    let mut argmax_changes = 0usize;
    for _ in 0..k {
        let n = rng.random_range(1..=5);
        let l = rng.random_range(1..=3);
        let lat = random_lattice(rng, n, l);
        let nh = rng.random_range(1..=4);
        let r = rng.random_range(1..=2);
        let arc = random_arc(rng, nh);
        let rel = Array2::from_shape_simple_fn((nh, r), || uniform(rng));
        let tables = [
            crf_pairwise_table(&lat, &TemperatureConfig::identity())?,
            crf_unary_table(&lat, &TemperatureConfig::identity())?,
            distill::arc_table(&first_order_distributions(&arc, &rel)?, &TemperatureConfig::identity()),
        ];
        for t in &tables {
            identity_err = identity_err.max(apply_temperature(t, &one).max_abs_diff(t).unwrap_or(f64::INFINITY));
            let base = site_argmaxes(t);
            for temp in 2..=5 {
                let hot = apply_temperature(t, &TemperatureConfig::new(temp as f64, TempMode::Local)?);
                argmax_changes += site_argmaxes(&hot).iter().zip(&base).filter(|(a, b)| a != b).count();
            }
        }
    }
    // Three positions, two labels, transitions favoring a repeated label.
    let lat = ChainLattice {
        emissions: Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0]).expect("shape"),
        transitions: Array3::from_shape_fn((2, 2, 2), |(_, a, b)| if a == b { 1.5 } else { -0.5 }),
        start: Array1::zeros(2),
        stop: Array1::zeros(2),
    };
    let local = crf_pairwise_table(&lat, &TemperatureConfig::new(2.0, TempMode::Local)?)?;
    let global = crf_pairwise_table(&lat, &TemperatureConfig::new(2.0, TempMode::Global)?)?;
    let differ = local.max_abs_diff(&global).unwrap_or(0.0);
    Ok((identity_err, differ, argmax_changes))
}

fn kd_suite(k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let s = Suite::Kd;
    let mut out = Vec::new();
    for case in KdCase::ALL {
        let mut worst = 0.0f64;
        for _ in 0..k {
            let (loss, exact) = kd_identity_instance(case, rng)?;
            worst = worst.max((loss - exact).abs());
        }
        out.push(Check::at_most(s, &format!("kd.identity.case-{}", case.tag()), k, worst, IDENTITY_TOL));
    }
    let (mut g1, mut h1, mut g2, mut h2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..k {
        let (g, h) = self_distill_crf(rng)?;
        g1 = g1.max(g);
        h1 = h1.max(h);
        let (g, h) = self_distill_heads(rng)?;
        g2 = g2.max(g);
        h2 = h2.max(h);
    }
    out.push(Check::at_most(s, "kd.self-distill.case-1a.grad-norm", k, g1, STATIONARY_TOL));
    out.push(Check::at_most(s, "kd.self-distill.case-1a.entropy", k, h1, STATIONARY_TOL));
    out.push(Check::at_most(s, "kd.self-distill.case-1b.grad-norm", k, g2, STATIONARY_TOL));
    out.push(Check::at_most(s, "kd.self-distill.case-1b.entropy", k, h2, STATIONARY_TOL));
    let (identity, differ, changes) = temperature_checks(k, rng)?;
    out.push(Check::at_most(s, "kd.temperature.local-identity", k, identity, TEMP_IDENTITY_TOL));
    out.push(Check::above(s, "kd.temperature.local-vs-global", 1, differ, TEMP_DIFFER_MIN));
    out.push(Check::at_most(s, "kd.temperature.argmax-invariance", k, changes as f64, 0.0));
    Ok(out)
}

fn lattice_values(l: &ChainLattice) -> Vec<f64> {
    l.emissions
        .iter()
        .chain(l.transitions.iter())
        .chain(l.start.iter())
        .chain(l.stop.iter())
        .copied()
        .collect()
}

fn lattice_from(template: &ChainLattice, v: &[f64]) -> ChainLattice {
    let (n, l) = template.emissions.dim();
    let (a, b) = (n * l, n * l + (n - 1) * l * l);
    ChainLattice {
        emissions: Array2::from_shape_vec((n, l), v[..a].to_vec()).expect("shape"),
        transitions: Array3::from_shape_vec((n - 1, l, l), v[a..b].to_vec()).expect("shape"),
        start: Array1::from(v[b..b + l].to_vec()),
        stop: Array1::from(v[b + l..b + 2 * l].to_vec()),
    }
}

/// Relative error between an analytic derivative and a central difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

/// Worst relative error over `coords` of a flat parameter vector.
fn fd_flat(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], grad: &[f64], coords: &[usize]) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut y = x.to_vec();
    for &c in coords {
        y[c] = x[c] + FD_STEP;
        let up = f(&y)?;
        y[c] = x[c] - FD_STEP;
        let down = f(&y)?;
        y[c] = x[c];
        worst = worst.max(relative_error(grad[c], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

fn eligible(grad: &[f64]) -> Vec<usize> {
    (0..grad.len()).filter(|&c| grad[c].abs() >= GRAD_FLOOR && grad[c].is_finite()).collect()
}

/// Parameters, analytic gradient and the loss as a function of the
/// parameters.
type RawCheck = (Vec<f64>, Vec<f64>, Box<dyn Fn(&[f64]) -> Result<f64>>);

/// Repeats raw (table-level) gradient checks on fresh random instances
/// until at least [`GRAD_COORDS`] coordinates have been compared.
fn raw_fd(
    rng: &mut ChaCha8Rng,
    make: &dyn Fn(&mut ChaCha8Rng) -> Result<RawCheck>,
) -> Result<(usize, f64)> {
    let (mut done, mut worst) = (0usize, 0.0f64);
    let mut attempts = 0;
    while done < GRAD_COORDS {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Invariant("gradient check found no usable coordinates".into()));
        }
        let (x, g, f) = make(rng)?;
        let pool = eligible(&g);
        let take = pool.len().min(10);
        if take == 0 {
            continue;
        }
        let coords: Vec<usize> = sample(rng, pool.len(), take).into_iter().map(|k| pool[k]).collect();
        worst = worst.max(fd_flat(&*f, &x, &g, &coords)?);
        done += take;
    }
    Ok((done, worst))
}

fn raw_chain_nll(rng: &mut ChaCha8Rng) -> Result<RawCheck> {
    let n = rng.random_range(2..=5);
    let l = rng.random_range(2..=3);
    let lat = random_lattice(rng, n, l);
    let gold = TagSequence((0..n).map(|_| rng.random_range(0..l)).collect());
    let (_, g) = nll_and_grad(&lat, &gold)?;
    let tmpl = lat.clone();
    Ok((
        lattice_values(&lat),
        lattice_values(&g),
        Box::new(move |v| Ok(nll_and_grad(&lattice_from(&tmpl, v), &gold)?.0)),
    ))
}

fn raw_maxent_nll(rng: &mut ChaCha8Rng) -> Result<RawCheck> {
    let n = rng.random_range(1..=5);
    let l = rng.random_range(2..=4);
    let sc = Array2::from_shape_simple_fn((n, l), || uniform(rng));
    let gold = TagSequence((0..n).map(|_| rng.random_range(0..l)).collect());
    let (_, g) = local_nll_and_grad(&sc, &gold)?;
    Ok((
        sc.iter().copied().collect(),
        g.iter().copied().collect(),
        Box::new(move |v| Ok(local_nll_and_grad(&Array2::from_shape_vec((n, l), v.to_vec()).expect("shape"), &gold)?.0)),
    ))
}

fn raw_kd_local(rng: &mut ChaCha8Rng) -> Result<RawCheck> {
    let n = rng.random_range(1..=5);
    let l = rng.random_range(2..=4);
    let teacher = row_log_softmax(&Array2::from_shape_simple_fn((n, l), || uniform(rng)))?.mapv(f64::exp);
    let sc = Array2::from_shape_simple_fn((n, l), || uniform(rng));
    let (_, g) = kd_loss_local(&teacher, &row_log_softmax(&sc)?)?;
    Ok((
        sc.iter().copied().collect(),
        g.iter().copied().collect(),
        Box::new(move |v| {
            let s = Array2::from_shape_vec((n, l), v.to_vec()).expect("shape");
            Ok(kd_loss_local(&teacher, &row_log_softmax(&s)?)?.0)
        }),
    ))
}

fn raw_kd_global(rng: &mut ChaCha8Rng) -> Result<RawCheck> {
    let n = rng.random_range(1..=5);
    let l = rng.random_range(2..=3);
    let table = crf_pairwise_table(&random_lattice(rng, n, l), &TemperatureConfig::identity())?;
    let student = random_lattice(rng, n, l);
    let (_, g) = kd_loss_global(&table, &student)?;
    let tmpl = student.clone();
    Ok((
        lattice_values(&student),
        lattice_values(&g),
        Box::new(move |v| Ok(kd_loss_global(&table, &lattice_from(&tmpl, v))?.0)),
    ))
}

fn raw_kd_arcs(rng: &mut ChaCha8Rng) -> Result<RawCheck> {
    let n = rng.random_range(1..=4);
    let r = rng.random_range(1..=2);
    let d = first_order_distributions(&random_arc(rng, n), &Array2::from_shape_simple_fn((n, r), || uniform(rng)))?;
    let teacher = arc_marginal_table(&d);
    let sc = random_joint(rng, n, r);
    let (_, g) = kd_loss_local_arcs(&teacher, &joint_log_softmax(&sc)?)?;
    Ok((
        sc.iter().copied().collect(),
        g.iter().copied().collect(),
        Box::new(move |v| {
            let s = Array3::from_shape_vec((n, n + 1, r), v.to_vec()).expect("shape");
            Ok(kd_loss_local_arcs(&teacher, &joint_log_softmax(&s)?)?.0)
        }),
    ))
}

fn raw_span_nll(rng: &mut ChaCha8Rng) -> Result<RawCheck> {
    let n = rng.random_range(1..=6);
    let l = rng.random_range(1..=2);
    let t = random_spans(rng, n, l);
    let gold = crate::span_ner::sample_spans(&t, rng)?;
    let (_, g) = span_nll_and_grad(&t, &gold)?;
    let entries = t.num_entries();
    let flat = |x: &SpanScoreTable| -> Vec<f64> {
        let mut v = Vec::with_capacity(entries);
        for i in 1..=n {
            for j in i..=n {
                for k in 0..l {
                    v.push(x.get(i, j, k));
                }
            }
        }
        v
    };
    let (xv, gv) = (flat(&t), flat(&g));
    Ok((
        xv,
        gv,
        Box::new(move |v| {
            let mut it = v.iter();
            let t = SpanScoreTable::from_fn(n, l, |_, _, _| *it.next().expect("entry"));
            Ok(span_nll_and_grad(&t, &gold)?.0)
        }),
    ))
}

fn raw_head_nll(rng: &mut ChaCha8Rng) -> Result<RawCheck> {
    let n = rng.random_range(1..=5);
    let arc = random_arc(rng, n);
    let gold: Vec<usize> = (0..n).map(|i| loop {
        let h = rng.random_range(0..=n);
        if h != i + 1 {
            break h;
        }
    }).collect();
    let (_, g) = head_nll_and_grad(&arc, &gold)?;
    Ok((
        arc.iter().copied().collect(),
        g.iter().copied().collect(),
        Box::new(move |v| Ok(head_nll_and_grad(&Array2::from_shape_vec((n, n + 1), v.to_vec()).expect("shape"), &gold)?.0)),
    ))
}

fn raw_mfvi_nll(rng: &mut ChaCha8Rng) -> Result<RawCheck> {
    let n = rng.random_range(2..=4);
    let arc = random_arc(rng, n);
    let sib = Array3::from_shape_simple_fn((n, n, n + 1), || uniform(rng));
    let gold: Vec<usize> = (0..n).map(|i| loop {
        let h = rng.random_range(0..=n);
        if h != i + 1 {
            break h;
        }
    }).collect();
    let (_, darc, dsib) = mfvi_nll_and_grad(&arc, &sib, 3, &gold)?;
    let na = arc.len();
    let x: Vec<f64> = arc.iter().chain(sib.iter()).copied().collect();
    let g: Vec<f64> = darc.iter().chain(dsib.iter()).copied().collect();
    Ok((
        x,
        g,
        Box::new(move |v| {
            let a = Array2::from_shape_vec((n, n + 1), v[..na].to_vec()).expect("shape");
            let s = Array3::from_shape_vec((n, n, n + 1), v[na..].to_vec()).expect("shape");
            Ok(mfvi_nll_and_grad(&a, &s, 3, &gold)?.0)
        }),
    ))
}

const VOCAB: [&str; 10] = ["Ana", "met", "Bo", "in", "Rome", "at", "noon", "the", "Lee", "left"];

fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_owned()).collect()
}

fn randomize(m: &mut AnyModel, rng: &mut ChaCha8Rng, scale: f64) {
    for block in m.param_blocks_mut() {
        for w in block.iter_mut() {
            *w = scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn flat_params(m: &AnyModel) -> Vec<(usize, usize)> {
    m.param_blocks()
        .iter()
        .enumerate()
        .flat_map(|(b, blk)| (0..blk.len()).map(move |k| (b, k)))
        .collect()
}

fn model_param(m: &AnyModel, c: (usize, usize)) -> f64 {
    m.param_blocks()[c.0][c.1]
}

fn set_param(m: &mut AnyModel, c: (usize, usize), v: f64) {
    m.param_blocks_mut()[c.0][c.1] = v;
}

const MODEL_BITS: u32 = 10;

/// A random teacher of `case`'s family with small hashed weights.
pub fn random_teacher(case: KdCase, rng: &mut ChaCha8Rng) -> AnyModel {
    let labels = match teacher_family(case) {
        Family::NerCrf | Family::NerMaxent => {
            LabelAlphabet::from_labels(AlphabetRole::Tags, &["O", "B-PER", "I-PER", "E-PER", "S-PER"])
        }
        Family::NerSpan => LabelAlphabet::from_labels(AlphabetRole::EntityTypes, &["PER", "LOC"]),
        _ => LabelAlphabet::from_labels(AlphabetRole::Relations, &["nsubj", "obj", "root"]),
    };
    let mut m = AnyModel::new(teacher_family(case), labels, MODEL_BITS);
    randomize(&mut m, rng, 0.5);
    m
}

/// End-to-end gradient check of `λ·L_KD + (1−λ)·L_target` for `case`
/// through the student's hashed features. Returns (coordinates, worst
/// relative error).
pub fn pipeline_fd(case: KdCase, temp: &TemperatureConfig, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let teacher = random_teacher(case, rng);
    let mut student = new_student(case, &teacher, MODEL_BITS)?;
    randomize(&mut student, rng, 0.5);
    let n = 6;
    let tokens = random_tokens(rng, n);
    let table = teacher_marginal_table(case, &teacher, &tokens, temp)?;
    let gold = match crate::model::pseudo_label(&teacher, &tokens)?.gold {
        Some(g) => student.align_gold(&g, &teacher.output_labels())?,
        None => return Err(Error::Invariant("teacher produced no structure".into())),
    };
    let lambda = 0.6;
    let loss = |m: &AnyModel, grad: &mut AnyModel| -> Result<f64> {
        let f = m.features(&tokens);
        let kd = m.kd_loss(&f, &table, temp, lambda, grad)?;
        let tg = m.target_loss(&f, &gold, 1.0 - lambda, grad)?;
        Ok(lambda * kd + (1.0 - lambda) * tg)
    };
    model_fd(&mut student, &loss, rng)
}

/// Gradient check of a model's target loss on a random gold structure.
pub fn target_fd(family: Family, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let labels = match family {
        Family::NerCrf | Family::NerMaxent => {
            LabelAlphabet::from_labels(AlphabetRole::Tags, &["O", "B-PER", "I-PER", "E-PER", "S-PER"])
        }
        Family::NerSpan => LabelAlphabet::from_labels(AlphabetRole::EntityTypes, &["PER", "LOC"]),
        _ => LabelAlphabet::from_labels(AlphabetRole::Relations, &["nsubj", "obj", "root"]),
    };
    let mut m = AnyModel::new(family, labels, MODEL_BITS);
    randomize(&mut m, rng, 0.5);
    let n = 5;
    let tokens = random_tokens(rng, n);
    let l = m.labels().len();
    let gold = match family {
        Family::NerCrf | Family::NerMaxent => Gold::Tags(TagSequence((0..n).map(|_| rng.random_range(0..l)).collect())),
        Family::NerSpan => Gold::Spans(crate::span_ner::sample_spans(&random_spans(rng, n, l), rng)?),
        _ => Gold::Heads(HeadAssignment {
            heads: (0..n).map(|i| (i + 2) % (n + 1)).collect(),
            rels: (0..n).map(|_| rng.random_range(0..l)).collect(),
        }),
    };
    let loss = |m: &AnyModel, grad: &mut AnyModel| -> Result<f64> { m.target_loss(&m.features(&tokens), &gold, 1.0, grad) };
    model_fd(&mut m, &loss, rng)
}

fn model_fd(
    m: &mut AnyModel,
    loss: &dyn Fn(&AnyModel, &mut AnyModel) -> Result<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64)> {
    let mut grad = m.zeros_like();
    loss(m, &mut grad)?;
    let all = flat_params(&grad);
    let pool: Vec<(usize, usize)> = all
        .into_iter()
        .filter(|&c| model_param(&grad, c).abs() >= GRAD_FLOOR)
        .collect();
    if pool.len() < GRAD_COORDS {
        return Err(Error::Invariant(format!(
            "only {} usable gradient coordinates, need {GRAD_COORDS}",
            pool.len()
        )));
    }
    let coords: Vec<(usize, usize)> = sample(rng, pool.len(), GRAD_COORDS).into_iter().map(|k| pool[k]).collect();
    let mut worst = 0.0f64;
    let mut scratch = m.zeros_like();
    for c in coords {
        let x = model_param(m, c);
        set_param(m, c, x + FD_STEP);
        let up = loss(m, &mut scratch)?;
        set_param(m, c, x - FD_STEP);
        let down = loss(m, &mut scratch)?;
        set_param(m, c, x);
        scratch = m.zeros_like();
        worst = worst.max(relative_error(model_param(&grad, c), (up - down) / (2.0 * FD_STEP)));
    }
    Ok((GRAD_COORDS, worst))
}

fn grad_suite(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let s = Suite::Grad;
    let mut out = Vec::new();
    type Maker = fn(&mut ChaCha8Rng) -> Result<RawCheck>;
    let raw: [(&str, Maker); 8] = [
        ("grad.chain-nll", raw_chain_nll),
        ("grad.maxent-nll", raw_maxent_nll),
        ("grad.kd-local", raw_kd_local),
        ("grad.kd-global", raw_kd_global),
        ("grad.kd-local-arcs", raw_kd_arcs),
        ("grad.span-nll", raw_span_nll),
        ("grad.head-nll", raw_head_nll),
        ("grad.mfvi-nll", raw_mfvi_nll),
    ];
    for (name, make) in raw {
        let (k, worst) = raw_fd(rng, &make)?;
        out.push(Check::at_most(s, name, k, worst, GRAD_REL_TOL));
    }
    let local = TemperatureConfig::new(2.0, TempMode::Local)?;
    for case in KdCase::ALL {
        let (k, worst) = pipeline_fd(case, &local, rng)?;
        out.push(Check::at_most(s, &format!("grad.pipeline.case-{}", case.tag()), k, worst, GRAD_REL_TOL));
    }
    let mut both = TemperatureConfig::new(2.0, TempMode::Global)?;
    both.student_side = true;
    for case in [KdCase::Crf2Crf, KdCase::Crf2MaxEnt, KdCase::Heads2Heads] {
        let (k, worst) = pipeline_fd(case, &both, rng)?;
        out.push(Check::at_most(
            s,
            &format!("grad.pipeline.case-{}.student-temperature", case.tag()),
            k,
            worst,
            GRAD_REL_TOL,
        ));
    }
    for family in Family::ALL {
        let (k, worst) = target_fd(family, rng)?;
        out.push(Check::at_most(s, &format!("grad.target.{family}"), k, worst, GRAD_REL_TOL));
    }
    Ok(out)
}
