//! Head-selection dependency models without a tree constraint.
//!
//! Token `i` (1-based) picks a head `j ∈ {0..n} \ {i}` where 0 is the
//! synthetic root. Matrices indexed by token use row `i − 1` and column `j`,
//! so the excluded self-loop sits at column `row + 1`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::corpus::{HeadAssignment, LabelAlphabet};
use crate::error::{usage, Error, Result};
use crate::numerics::{argmax, lse, LOG_ZERO};
use crate::scorer::{arc_features, sibling_features, token_features, FeatureVec, SparseParams};
use crate::token_maxent::row_log_softmax;

/// Default number of mean-field iterations.
pub const DEFAULT_MFVI_ITERATIONS: usize = 3;

/// Per-token head and relation distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcDistributions {
    /// `n × (n+1)`, column 0 is the root, `head_rows[i−1][i] = 0`.
    pub head_rows: Array2<f64>,
    /// `n × R`
    pub rel_rows: Array2<f64>,
}

fn check_arc_shape(arc: &Array2<f64>) -> Result<()> {
    let (n, m) = arc.dim();
    if n == 0 || m != n + 1 {
        return usage(format!("arc score matrix must be n × (n+1), got {n} × {m}"));
    }
    Ok(())
}

/// Log-softmax of each row over its admissible heads; the self-loop column
/// is `−∞`.
pub fn head_log_softmax(arc: &Array2<f64>) -> Result<Array2<f64>> {
    check_arc_shape(arc)?;
    let n = arc.nrows();
    let mut out = Array2::from_elem((n, n + 1), LOG_ZERO);
    for i in 0..n {
        let z = lse((0..=n).filter(|&j| j != i + 1).map(|j| arc[[i, j]]));
        if !z.is_finite() {
            return Err(Error::Degenerate(format!("token {} has no admissible head", i + 1)));
        }
        for j in (0..=n).filter(|&j| j != i + 1) {
            out[[i, j]] = arc[[i, j]] - z;
        }
    }
    Ok(out)
}

/// Head probabilities with the self-loop stored as an exact 0.
pub fn head_softmax(arc: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(head_log_softmax(arc)?.mapv(f64::exp))
}

/// Separate softmaxes over heads and over relations.
pub fn first_order_distributions(arc: &Array2<f64>, rel: &Array2<f64>) -> Result<ArcDistributions> {
    if rel.nrows() != arc.nrows() {
        return usage("arc and relation score rows differ");
    }
    Ok(ArcDistributions {
        head_rows: head_softmax(arc)?,
        rel_rows: row_log_softmax(rel)?.mapv(f64::exp),
    })
}

/// `P(hᵢ = j) · P(lᵢ = r)` for 1-based token `i`.
pub fn arc_marginal(d: &ArcDistributions, i: usize, j: usize, r: usize) -> Result<f64> {
    let n = d.head_rows.nrows();
    if i == 0 || i > n || j > n || r >= d.rel_rows.ncols() {
        return usage(format!("arc ({j} -> {i}, {r}) out of range"));
    }
    if j == i {
        return usage(format!("token {i} cannot head itself"));
    }
    Ok(d.head_rows[[i - 1, j]] * d.rel_rows[[i - 1, r]])
}

/// All arc marginals as an `n × (n+1) × R` table.
pub fn arc_marginal_table(d: &ArcDistributions) -> Array3<f64> {
    let (n, m) = d.head_rows.dim();
    let r = d.rel_rows.ncols();
    Array3::from_shape_fn((n, m, r), |(i, j, l)| d.head_rows[[i, j]] * d.rel_rows[[i, l]])
}

/// Per-token argmax head and relation, ties toward the smaller index.
pub fn decode_heads(d: &ArcDistributions) -> HeadAssignment {
    let n = d.head_rows.nrows();
    let mut heads = Vec::with_capacity(n);
    let mut rels = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = d.head_rows.row(i).to_vec();
        // The self-loop holds 0 and can only win if every head is 0.
        let mut masked = row.clone();
        masked[i + 1] = f64::NEG_INFINITY;
        heads.push(argmax(&masked));
        rels.push(argmax(&d.rel_rows.row(i).to_vec()));
    }
    HeadAssignment { heads, rels }
}

/// Sibling scores `sib[[i, k, j]]`: dependents `i` and `k` (0-based rows)
/// sharing head `j`. Inadmissible entries are ignored.
fn sib_admissible(i: usize, k: usize, j: usize) -> bool {
    i != k && j != i + 1 && j != k + 1
}

fn check_sib_shape(arc: &Array2<f64>, sib: &Array3<f64>) -> Result<()> {
    check_arc_shape(arc)?;
    let n = arc.nrows();
    if sib.dim() != (n, n, n + 1) {
        return usage(format!("sibling tensor must be {n} × {n} × {}, got {:?}", n + 1, sib.dim()));
    }
    Ok(())
}

fn mfvi_logits(arc: &Array2<f64>, sib: &Array3<f64>, q: &Array2<f64>) -> Array2<f64> {
    let n = arc.nrows();
    let mut logits = arc.clone();
    for i in 0..n {
        for j in 0..=n {
            if j == i + 1 {
                continue;
            }
            let mut m = 0.0;
            for k in 0..n {
                if sib_admissible(i, k, j) {
                    m += sib[[i, k, j]] * q[[k, j]];
                }
            }
            logits[[i, j]] += m;
        }
    }
    logits
}

/// Every mean-field iterate `Q⁰..Q^K`.
fn mfvi_trace(arc: &Array2<f64>, sib: &Array3<f64>, iterations: usize) -> Result<Vec<Array2<f64>>> {
    check_sib_shape(arc, sib)?;
    let mut qs = vec![head_softmax(arc)?];
    for t in 0..iterations {
        let logits = mfvi_logits(arc, sib, &qs[t]);
        qs.push(head_softmax(&logits)?);
    }
    Ok(qs)
}

/// Mean-field head distributions for arc plus sibling scores:
/// `Q^{t+1}ᵢ(j) ∝ exp(arc[i][j] + Σ_{k≠i} sib(i,k,j) · Q^tₖ(j))`.
pub fn mfvi_second_order(arc: &Array2<f64>, sib: &Array3<f64>, iterations: usize) -> Result<Array2<f64>> {
    Ok(mfvi_trace(arc, sib, iterations)?.pop().expect("at least Q⁰"))
}

/// Negative log-likelihood of gold heads under the final mean-field
/// iterate, with gradients w.r.t. arc and sibling scores obtained by
/// differentiating through the unrolled updates.
pub fn mfvi_nll_and_grad(
    arc: &Array2<f64>,
    sib: &Array3<f64>,
    iterations: usize,
    gold_heads: &[usize],
) -> Result<(f64, Array2<f64>, Array3<f64>)> {
    let qs = mfvi_trace(arc, sib, iterations)?;
    let n = arc.nrows();
    if gold_heads.len() != n {
        return usage("gold head count differs from sentence length");
    }
    let last = &qs[iterations];
    let mut loss = 0.0;
    let mut g = last.clone();
    for (i, &h) in gold_heads.iter().enumerate() {
        if h > n || h == i + 1 {
            return usage(format!("invalid gold head {h} for token {}", i + 1));
        }
        loss -= last[[i, h]].ln();
        g[[i, h]] -= 1.0;
    }
    let mut darc = Array2::zeros((n, n + 1));
    let mut dsib = Array3::zeros((n, n, n + 1));
    for t in (0..iterations).rev() {
        let q = &qs[t];
        darc += &g;
        let mut dq = Array2::<f64>::zeros((n, n + 1));
        for i in 0..n {
            for k in 0..n {
                for j in 0..=n {
                    if sib_admissible(i, k, j) {
                        dsib[[i, k, j]] += g[[i, j]] * q[[k, j]];
                        dq[[k, j]] += g[[i, j]] * sib[[i, k, j]];
                    }
                }
            }
        }
        for k in 0..n {
            let inner: f64 = (0..=n).map(|j| dq[[k, j]] * q[[k, j]]).sum();
            for j in 0..=n {
                g[[k, j]] = q[[k, j]] * (dq[[k, j]] - inner);
            }
        }
    }
    darc += &g;
    for i in 0..n {
        darc[[i, i + 1]] = 0.0;
    }
    Ok((loss, darc, dsib))
}

/// `−Σ log softmax(row)[gold]` over admissible heads with gradient
/// softmax minus one-hot.
pub fn head_nll_and_grad(arc: &Array2<f64>, gold_heads: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (loss, darc, _) = mfvi_nll_and_grad(arc, &Array3::zeros((arc.nrows(), arc.nrows(), arc.ncols())), 0, gold_heads)?;
    Ok((loss, darc))
}

/// Cached features of one sentence for head models.
#[derive(Clone, Debug)]
pub struct HeadFeatures {
    pub n: usize,
    /// Arc features indexed `[(dep − 1) * (n + 1) + head]`; the self-loop
    /// slot holds an empty vector.
    pub arcs: Vec<FeatureVec>,
    /// Token features for relation scoring.
    pub tokens: Vec<FeatureVec>,
}

impl HeadFeatures {
    pub fn new(tokens: &[String], bits: u32) -> Self {
        let n = tokens.len();
        let mut arcs = Vec::with_capacity(n * (n + 1));
        for dep in 1..=n {
            for head in 0..=n {
                arcs.push(if head == dep {
                    FeatureVec::default()
                } else {
                    arc_features(tokens, head, dep, bits)
                });
            }
        }
        HeadFeatures {
            n,
            arcs,
            tokens: (0..n).map(|i| token_features(tokens, i, bits)).collect(),
        }
    }

    pub fn arc(&self, row: usize, head: usize) -> &FeatureVec {
        &self.arcs[row * (self.n + 1) + head]
    }
}

/// Sibling features indexed `[(i * n + k) * (n + 1) + j]`.
#[derive(Clone, Debug)]
pub struct SiblingFeatures {
    pub n: usize,
    pub sibs: Vec<FeatureVec>,
}

impl SiblingFeatures {
    pub fn new(tokens: &[String], bits: u32) -> Self {
        let n = tokens.len();
        let mut sibs = Vec::with_capacity(n * n * (n + 1));
        for i in 0..n {
            for k in 0..n {
                for j in 0..=n {
                    sibs.push(if sib_admissible(i, k, j) {
                        sibling_features(tokens, j, i + 1, k + 1, bits)
                    } else {
                        FeatureVec::default()
                    });
                }
            }
        }
        SiblingFeatures { n, sibs }
    }

    pub fn get(&self, i: usize, k: usize, j: usize) -> &FeatureVec {
        &self.sibs[(i * self.n + k) * (self.n + 1) + j]
    }
}

/// First-order head selector: arc scores and relation scores normalized
/// separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSelector {
    pub rels: LabelAlphabet,
    pub arc: SparseParams,
    pub rel: SparseParams,
}

impl HeadSelector {
    pub fn new(rels: LabelAlphabet, bits: u32) -> Self {
        HeadSelector {
            arc: SparseParams::new(bits, 1),
            rel: SparseParams::new(bits, rels.len()),
            rels,
        }
    }

    pub fn features(&self, tokens: &[String]) -> HeadFeatures {
        HeadFeatures::new(tokens, self.arc.bits())
    }

    pub fn arc_scores(&self, f: &HeadFeatures) -> Array2<f64> {
        let n = f.n;
        Array2::from_shape_fn((n, n + 1), |(i, j)| {
            if j == i + 1 {
                LOG_ZERO
            } else {
                self.arc.score(f.arc(i, j), 0)
            }
        })
    }

    pub fn rel_scores(&self, f: &HeadFeatures) -> Array2<f64> {
        let r = self.rels.len();
        Array2::from_shape_fn((f.n, r), |(i, l)| self.rel.score(&f.tokens[i], l))
    }

    pub fn distributions(&self, f: &HeadFeatures) -> Result<ArcDistributions> {
        first_order_distributions(&self.arc_scores(f), &self.rel_scores(f))
    }

    pub fn backprop(&self, f: &HeadFeatures, darc: &Array2<f64>, drel: &Array2<f64>, coef: f64, grad: &mut HeadSelector) {
        for i in 0..f.n {
            for j in 0..=f.n {
                if j != i + 1 && darc[[i, j]] != 0.0 {
                    grad.arc.accumulate(f.arc(i, j), 0, coef * darc[[i, j]]);
                }
            }
            for (l, &d) in drel.row(i).iter().enumerate() {
                grad.rel.accumulate(&f.tokens[i], l, coef * d);
            }
        }
    }

    pub fn target_loss(&self, f: &HeadFeatures, gold: &HeadAssignment, coef: f64, grad: &mut HeadSelector) -> Result<f64> {
        let (lh, darc) = head_nll_and_grad(&self.arc_scores(f), &gold.heads)?;
        let (lr, drel) = crate::token_maxent::local_nll_and_grad(
            &self.rel_scores(f),
            &crate::corpus::TagSequence(gold.rels.clone()),
        )?;
        self.backprop(f, &darc, &drel, coef, grad);
        Ok(lh + lr)
    }

    pub fn zeros_like(&self) -> Self {
        HeadSelector {
            rels: self.rels.clone(),
            arc: self.arc.zeros_like(),
            rel: self.rel.zeros_like(),
        }
    }

    pub fn apply_and_clear(&mut self, grad: &mut HeadSelector, step: f64) {
        self.arc.apply_and_clear(&mut grad.arc, step);
        self.rel.apply_and_clear(&mut grad.rel, step);
    }
}

/// Second-order head selector: first-order scores plus sibling factors,
/// with head distributions from mean-field inference. Relations stay
/// first-order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiblingParser {
    pub base: HeadSelector,
    pub sib: SparseParams,
    pub iterations: usize,
}

impl SiblingParser {
    pub fn new(rels: LabelAlphabet, bits: u32) -> Self {
        SiblingParser {
            base: HeadSelector::new(rels, bits),
            sib: SparseParams::new(bits, 1),
            iterations: DEFAULT_MFVI_ITERATIONS,
        }
    }

    pub fn features(&self, tokens: &[String]) -> (HeadFeatures, SiblingFeatures) {
        let bits = self.sib.bits();
        (HeadFeatures::new(tokens, bits), SiblingFeatures::new(tokens, bits))
    }

    pub fn sib_scores(&self, s: &SiblingFeatures) -> Array3<f64> {
        let n = s.n;
        Array3::from_shape_fn((n, n, n + 1), |(i, k, j)| {
            if sib_admissible(i, k, j) {
                self.sib.score(s.get(i, k, j), 0)
            } else {
                0.0
            }
        })
    }

    pub fn distributions(&self, f: &HeadFeatures, s: &SiblingFeatures) -> Result<ArcDistributions> {
        let arc = self.base.arc_scores(f);
        Ok(ArcDistributions {
            head_rows: mfvi_second_order(&arc, &self.sib_scores(s), self.iterations)?,
            rel_rows: row_log_softmax(&self.base.rel_scores(f))?.mapv(f64::exp),
        })
    }

    pub fn target_loss(
        &self,
        f: &HeadFeatures,
        s: &SiblingFeatures,
        gold: &HeadAssignment,
        coef: f64,
        grad: &mut SiblingParser,
    ) -> Result<f64> {
        let arc = self.base.arc_scores(f);
        let sib = self.sib_scores(s);
        let (lh, darc, dsib) = mfvi_nll_and_grad(&arc, &sib, self.iterations, &gold.heads)?;
        let (lr, drel) = crate::token_maxent::local_nll_and_grad(
            &self.base.rel_scores(f),
            &crate::corpus::TagSequence(gold.rels.clone()),
        )?;
        self.base.backprop(f, &darc, &drel, coef, &mut grad.base);
        let n = f.n;
        for i in 0..n {
            for k in 0..n {
                for j in 0..=n {
                    if sib_admissible(i, k, j) && dsib[[i, k, j]] != 0.0 {
                        grad.sib.accumulate(s.get(i, k, j), 0, coef * dsib[[i, k, j]]);
                    }
                }
            }
        }
        Ok(lh + lr)
    }

    pub fn zeros_like(&self) -> Self {
        SiblingParser {
            base: self.base.zeros_like(),
            sib: self.sib.zeros_like(),
            iterations: self.iterations,
        }
    }

    pub fn apply_and_clear(&mut self, grad: &mut SiblingParser, step: f64) {
        self.base.apply_and_clear(&mut grad.base, step);
        self.sib.apply_and_clear(&mut grad.sib, step);
    }
}

/// Sequence-labeling parser: one joint softmax per token over all
/// `(head, relation)` pairs, scored with relation-conditioned arc features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcTagger {
    pub rels: LabelAlphabet,
    pub params: SparseParams,
}

impl ArcTagger {
    pub fn new(rels: LabelAlphabet, bits: u32) -> Self {
        ArcTagger {
            params: SparseParams::new(bits, rels.len()),
            rels,
        }
    }

    pub fn features(&self, tokens: &[String]) -> HeadFeatures {
        HeadFeatures::new(tokens, self.params.bits())
    }

    /// `n × (n+1) × R` joint scores, `−∞` on the self-loop.
    pub fn scores(&self, f: &HeadFeatures) -> Array3<f64> {
        let n = f.n;
        let r = self.rels.len();
        Array3::from_shape_fn((n, n + 1, r), |(i, j, l)| {
            if j == i + 1 {
                LOG_ZERO
            } else {
                self.params.score(f.arc(i, j), l)
            }
        })
    }

    /// Per-token joint log-probabilities over `(head, relation)`.
    pub fn log_probs(&self, f: &HeadFeatures) -> Result<Array3<f64>> {
        joint_log_softmax(&self.scores(f))
    }

    pub fn distributions(&self, f: &HeadFeatures) -> Result<ArcDistributions> {
        Ok(joint_to_distributions(&self.log_probs(f)?.mapv(f64::exp)))
    }

    pub fn backprop(&self, f: &HeadFeatures, dscores: &Array3<f64>, coef: f64, grad: &mut ArcTagger) {
        let (n, _, r) = dscores.dim();
        for i in 0..n {
            for j in 0..=n {
                if j == i + 1 {
                    continue;
                }
                for l in 0..r {
                    let d = dscores[[i, j, l]];
                    if d != 0.0 {
                        grad.params.accumulate(f.arc(i, j), l, coef * d);
                    }
                }
            }
        }
    }

    pub fn target_loss(&self, f: &HeadFeatures, gold: &HeadAssignment, coef: f64, grad: &mut ArcTagger) -> Result<f64> {
        let logp = self.log_probs(f)?;
        let n = f.n;
        if gold.heads.len() != n || gold.rels.len() != n {
            return usage("gold length differs from sentence length");
        }
        let mut d = logp.mapv(f64::exp);
        let mut loss = 0.0;
        for i in 0..n {
            let (h, r) = (gold.heads[i], gold.rels[i]);
            if h > n || h == i + 1 || r >= self.rels.len() {
                return usage(format!("invalid gold arc ({h}, {r}) for token {}", i + 1));
            }
            loss -= logp[[i, h, r]];
            d[[i, h, r]] -= 1.0;
        }
        self.backprop(f, &d, coef, grad);
        Ok(loss)
    }

    pub fn decode(&self, f: &HeadFeatures) -> Result<HeadAssignment> {
        let logp = self.log_probs(f)?;
        let (n, m, r) = logp.dim();
        let mut heads = Vec::with_capacity(n);
        let mut rels = Vec::with_capacity(n);
        for i in 0..n {
            let flat: Vec<f64> = (0..m * r).map(|x| logp[[i, x / r, x % r]]).collect();
            let best = argmax(&flat);
            heads.push(best / r);
            rels.push(best % r);
        }
        Ok(HeadAssignment { heads, rels })
    }

    pub fn zeros_like(&self) -> Self {
        ArcTagger {
            rels: self.rels.clone(),
            params: self.params.zeros_like(),
        }
    }

    pub fn apply_and_clear(&mut self, grad: &mut ArcTagger, step: f64) {
        self.params.apply_and_clear(&mut grad.params, step);
    }
}

/// Log-softmax of each token's `(head, relation)` block.
pub fn joint_log_softmax(scores: &Array3<f64>) -> Result<Array3<f64>> {
    let (n, m, r) = scores.dim();
    let mut out = Array3::from_elem((n, m, r), LOG_ZERO);
    for i in 0..n {
        let block = scores.index_axis(ndarray::Axis(0), i);
        let z = lse(block.iter().copied());
        if !z.is_finite() {
            return Err(Error::Degenerate(format!("token {} has no admissible arc", i + 1)));
        }
        for j in 0..m {
            for l in 0..r {
                let v = scores[[i, j, l]];
                out[[i, j, l]] = if v == LOG_ZERO { LOG_ZERO } else { v - z };
            }
        }
    }
    Ok(out)
}

/// Head and relation marginals of a joint per-token table.
pub fn joint_to_distributions(p: &Array3<f64>) -> ArcDistributions {
    ArcDistributions {
        head_rows: p.sum_axis(ndarray::Axis(2)),
        rel_rows: p.sum_axis(ndarray::Axis(1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AlphabetRole;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_arc(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n + 1), |(i, j)| {
            if j == i + 1 {
                LOG_ZERO
            } else {
                rng.random_range(-2.0..2.0)
            }
        })
    }

    fn random_sib(rng: &mut ChaCha8Rng, n: usize) -> Array3<f64> {
        Array3::from_shape_fn((n, n, n + 1), |_| rng.random_range(-2.0..2.0))
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn zero_scores_uniform_heads() {
        let arc = Array2::zeros((2, 3));
        let d = first_order_distributions(&arc, &Array2::zeros((2, 2))).unwrap();
        assert_eq!(d.head_rows.row(0).to_vec(), [0.5, 0.0, 0.5]);
        assert_eq!(d.head_rows.row(1).to_vec(), [0.5, 0.5, 0.0]);
        let one = first_order_distributions(&Array2::zeros((1, 2)), &Array2::zeros((1, 1))).unwrap();
        assert_eq!(one.head_rows.row(0).to_vec(), [1.0, 0.0]);
    }

    #[test]
    fn selector_rows_match_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rels = LabelAlphabet::from_labels(AlphabetRole::Relations, &["a", "b"]);
        let mut m = HeadSelector::new(rels, 8);
        for w in m.arc.weights_mut().iter_mut().chain(m.rel.weights_mut()) {
            *w = rng.random_range(-1.0..1.0);
        }
        let t = toks("dogs bark loudly");
        let d = m.distributions(&m.features(&t)).unwrap();
        for dep in 1..=3 {
            let e: Vec<f64> = (0..=3)
                .map(|h| {
                    if h == dep {
                        0.0
                    } else {
                        let f = arc_features(&t, h, dep, 8);
                        f.iter().map(|(id, v)| v * m.arc.weights()[m.arc.slot(id, 0)]).sum::<f64>().exp()
                    }
                })
                .collect();
            let z: f64 = e.iter().sum();
            for h in 0..=3 {
                assert!((d.head_rows[[dep - 1, h]] - e[h] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn arc_marginal_examples() {
        let d = ArcDistributions {
            head_rows: Array2::from_shape_vec((2, 3), vec![0.5, 0.0, 0.5, 0.5, 0.5, 0.0]).unwrap(),
            rel_rows: Array2::from_elem((2, 2), 0.5),
        };
        assert_eq!(arc_marginal(&d, 1, 2, 1).unwrap(), 0.25);
        assert!(arc_marginal(&d, 2, 2, 0).is_err());
        let sure = ArcDistributions {
            head_rows: Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(),
            rel_rows: Array2::from_elem((1, 1), 1.0),
        };
        assert_eq!(arc_marginal(&sure, 1, 0, 0).unwrap(), 1.0);
    }

    #[test]
    fn arc_marginals_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in 1..6 {
            let rel = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
            let d = first_order_distributions(&random_arc(&mut rng, n), &rel).unwrap();
            let t = arc_marginal_table(&d);
            for i in 0..n {
                let s: f64 = t.index_axis(ndarray::Axis(0), i).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mfvi_reduces_to_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let arc = random_arc(&mut rng, 4);
        let first = head_softmax(&arc).unwrap();
        let sib = random_sib(&mut rng, 4);
        assert_eq!(mfvi_second_order(&arc, &sib, 0).unwrap(), first);
        for k in 0..5 {
            assert_eq!(mfvi_second_order(&arc, &(&sib * 0.0), k).unwrap(), first);
        }
    }

    #[test]
    fn mfvi_matches_step_by_step_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 3;
        let arc = random_arc(&mut rng, n);
        let sib = random_sib(&mut rng, n);
        // Plain re-evaluation with explicit loops and exp-normalization.
        let norm = |logits: &dyn Fn(usize, usize) -> f64| {
            let mut q = vec![vec![0.0; n + 1]; n];
            for i in 0..n {
                let e: Vec<f64> = (0..=n).map(|j| if j == i + 1 { 0.0 } else { logits(i, j).exp() }).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=n {
                    q[i][j] = e[j] / z;
                }
            }
            q
        };
        let mut q = norm(&|i, j| arc[[i, j]]);
        for _ in 0..3 {
            let prev = q.clone();
            q = norm(&|i, j| {
                let mut s = arc[[i, j]];
                for k in 0..n {
                    if k != i && j != k + 1 {
                        s += sib[[i, k, j]] * prev[k][j];
                    }
                }
                s
            });
        }
        let got = mfvi_second_order(&arc, &sib, 3).unwrap();
        for i in 0..n {
            let s: f64 = got.row(i).sum();
            assert!((s - 1.0).abs() < 1e-9);
            for j in 0..=n {
                assert!((got[[i, j]] - q[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mfvi_rows_stay_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arc = random_arc(&mut rng, 5);
        let sib = random_sib(&mut rng, 5) * 3.0;
        for k in 0..6 {
            let q = mfvi_second_order(&arc, &sib, k).unwrap();
            for i in 0..5 {
                assert!((q.row(i).sum() - 1.0).abs() < 1e-9);
                assert!(q.row(i).iter().all(|&p| p >= 0.0));
                assert_eq!(q[[i, i + 1]], 0.0);
            }
        }
    }

    #[test]
    fn mfvi_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 3;
        let arc = random_arc(&mut rng, n);
        let sib = random_sib(&mut rng, n);
        let gold = [2, 0, 2];
        let (_, darc, dsib) = mfvi_nll_and_grad(&arc, &sib, 3, &gold).unwrap();
        let f = |a: &Array2<f64>, s: &Array3<f64>| mfvi_nll_and_grad(a, s, 3, &gold).unwrap().0;
        let eps = 1e-5;
        for i in 0..n {
            for j in 0..=n {
                if j == i + 1 {
                    continue;
                }
                let mut up = arc.clone();
                up[[i, j]] += eps;
                let mut dn = arc.clone();
                dn[[i, j]] -= eps;
                let fd = (f(&up, &sib) - f(&dn, &sib)) / (2.0 * eps);
                assert!((fd - darc[[i, j]]).abs() <= 1e-4 * fd.abs().max(1e-6));
                for k in 0..n {
                    if !sib_admissible(i, k, j) {
                        continue;
                    }
                    let mut up = sib.clone();
                    up[[i, k, j]] += eps;
                    let mut dn = sib.clone();
                    dn[[i, k, j]] -= eps;
                    let fd = (f(&arc, &up) - f(&arc, &dn)) / (2.0 * eps);
                    assert!((fd - dsib[[i, k, j]]).abs() <= 1e-4 * fd.abs().max(1e-6));
                }
            }
        }
    }

    #[test]
    fn decode_examples() {
        let d = ArcDistributions {
            head_rows: Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap(),
            rel_rows: Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        };
        let a = decode_heads(&d);
        assert_eq!(a.heads, [2, 0]);
        assert_eq!(a.rels, [1, 0]);
        let u = first_order_distributions(&Array2::zeros((3, 4)), &Array2::zeros((3, 2))).unwrap();
        assert_eq!(decode_heads(&u).heads, [0, 0, 0]);
        assert_eq!(decode_heads(&u).rels, [0, 0, 0]);
    }

    #[test]
    fn decode_matches_row_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 5;
        let rel = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
        let d = first_order_distributions(&random_arc(&mut rng, n), &rel).unwrap();
        let a = decode_heads(&d);
        for i in 0..n {
            let mut best = 0;
            for j in 0..=n {
                if d.head_rows[[i, j]] > d.head_rows[[i, best]] {
                    best = j;
                }
            }
            assert_eq!(a.heads[i], best);
        }
    }

    #[test]
    fn arc_tagger_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rels = LabelAlphabet::from_labels(AlphabetRole::Relations, &["x", "y"]);
        let mut m = ArcTagger::new(rels, 8);
        for w in m.params.weights_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let t = toks("a big dog");
        let f = m.features(&t);
        let gold = HeadAssignment { heads: vec![3, 3, 0], rels: vec![0, 1, 1] };
        let mut g = m.zeros_like();
        m.target_loss(&f, &gold, 1.0, &mut g).unwrap();
        let loss = |mm: &ArcTagger| mm.target_loss(&f, &gold, 1.0, &mut mm.zeros_like()).unwrap();
        let eps = 1e-5;
        for slot in g.params.nonzero_slots().into_iter().take(50) {
            let mut up = m.clone();
            up.params.weights_mut()[slot] += eps;
            let mut dn = m.clone();
            dn.params.weights_mut()[slot] -= eps;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * eps);
            assert!((fd - g.params.weights()[slot]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
    }
}
