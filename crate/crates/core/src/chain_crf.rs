//! Exact inference for linear-chain CRFs.
//!
//! A lattice over `n` positions and `L` labels scores a tag sequence `y` as
//!
//! ```text
//! start[y₁] + Σᵢ emit[i][yᵢ] + Σᵢ trans[i-1][yᵢ₋₁][yᵢ] + stop[yₙ]
//! ```
//!
//! Emissions are absorbed into the incoming transition, so the pairwise
//! substructures are `(START, y₁)` followed by `(yᵢ₋₁, yᵢ)` for `i ≥ 2`.
//! All recursions run in log space.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BioesRole, BioesScheme, LabelAlphabet, TagSequence};
use crate::error::{usage, Error, Result};
use crate::numerics::{lse, LogScore, LOG_ZERO};
use crate::scorer::{token_features, FeatureVec, SparseParams};

/// Emission, transition and boundary scores of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainLattice {
    /// `n × L`
    pub emissions: Array2<f64>,
    /// `(n-1) × L × L`; entry `[i][a][b]` scores `a` at position `i` followed
    /// by `b` at position `i+1` (0-based).
    pub transitions: Array3<f64>,
    pub start: Array1<f64>,
    pub stop: Array1<f64>,
}

fn check_scores<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for &v in values {
        if v.is_nan() || v == f64::INFINITY {
            return usage("lattice scores must be finite or negative infinity");
        }
    }
    Ok(())
}

impl ChainLattice {
    pub fn new(
        emissions: Array2<f64>,
        transitions: Array3<f64>,
        start: Array1<f64>,
        stop: Array1<f64>,
    ) -> Result<Self> {
        let (n, l) = emissions.dim();
        if n == 0 || l == 0 {
            return usage("lattice needs at least one position and one label");
        }
        if transitions.dim() != (n - 1, l, l) || start.len() != l || stop.len() != l {
            return usage(format!(
                "inconsistent lattice shapes: emissions {:?}, transitions {:?}, start {}, stop {}",
                emissions.dim(),
                transitions.dim(),
                start.len(),
                stop.len()
            ));
        }
        check_scores(emissions.iter())?;
        check_scores(transitions.iter())?;
        check_scores(start.iter())?;
        check_scores(stop.iter())?;
        Ok(ChainLattice {
            emissions,
            transitions,
            start,
            stop,
        })
    }

    pub fn zeros(n: usize, labels: usize) -> Self {
        ChainLattice {
            emissions: Array2::zeros((n, labels)),
            transitions: Array3::zeros((n.saturating_sub(1), labels, labels)),
            start: Array1::zeros(labels),
            stop: Array1::zeros(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.emissions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.emissions.ncols()
    }

    /// Every score multiplied by `factor` (`−∞` stays `−∞`).
    pub fn scaled(&self, factor: f64) -> Self {
        let f = |v: f64| if v == LOG_ZERO { v } else { v * factor };
        ChainLattice {
            emissions: self.emissions.mapv(f),
            transitions: self.transitions.mapv(f),
            start: self.start.mapv(f),
            stop: self.stop.mapv(f),
        }
    }

    /// Total score of one tag sequence.
    pub fn sequence_score(&self, tags: &[usize]) -> LogScore {
        let n = self.len();
        let mut s = self.start[tags[0]] + self.stop[tags[n - 1]];
        for (i, &t) in tags.iter().enumerate() {
            s += self.emissions[[i, t]];
            if i > 0 {
                s += self.transitions[[i - 1, tags[i - 1], t]];
            }
        }
        s
    }

    fn check_gold(&self, gold: &TagSequence) -> Result<()> {
        if gold.0.len() != self.len() {
            return usage(format!("gold has {} tags for {} positions", gold.0.len(), self.len()));
        }
        if let Some(&bad) = gold.0.iter().find(|&&t| t >= self.num_labels()) {
            return usage(format!("gold tag {bad} >= {}", self.num_labels()));
        }
        Ok(())
    }
}

/// Pairwise and unary marginals of a chain distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMarginals {
    /// `(n-1) × L × L`
    pub pairwise: Array3<f64>,
    /// `n × L`
    pub unary: Array2<f64>,
}

/// Forward scores: `alpha[i][b]` sums all prefixes ending in `b` at `i`,
/// including the emission at `i`.
pub fn forward(lat: &ChainLattice) -> Array2<f64> {
    let (n, l) = lat.emissions.dim();
    let mut alpha = Array2::from_elem((n, l), LOG_ZERO);
    for b in 0..l {
        alpha[[0, b]] = lat.start[b] + lat.emissions[[0, b]];
    }
    for i in 1..n {
        for b in 0..l {
            let s = lse((0..l).map(|a| alpha[[i - 1, a]] + lat.transitions[[i - 1, a, b]]));
            alpha[[i, b]] = s + lat.emissions[[i, b]];
        }
    }
    alpha
}

/// Backward scores: `beta[i][a]` sums all suffixes after position `i`
/// given `a` at `i`, including the stop score.
pub fn backward(lat: &ChainLattice) -> Array2<f64> {
    let (n, l) = lat.emissions.dim();
    let mut beta = Array2::from_elem((n, l), LOG_ZERO);
    for a in 0..l {
        beta[[n - 1, a]] = lat.stop[a];
    }
    for i in (0..n - 1).rev() {
        for a in 0..l {
            beta[[i, a]] = lse((0..l).map(|b| {
                lat.transitions[[i, a, b]] + lat.emissions[[i + 1, b]] + beta[[i + 1, b]]
            }));
        }
    }
    beta
}

/// `log Z` by the forward recursion.
pub fn log_partition(lat: &ChainLattice) -> LogScore {
    let alpha = forward(lat);
    let n = lat.len();
    lse((0..lat.num_labels()).map(|b| alpha[[n - 1, b]] + lat.stop[b]))
}

fn finite_partition(lat: &ChainLattice, alpha: &Array2<f64>) -> Result<f64> {
    let n = lat.len();
    let z = lse((0..lat.num_labels()).map(|b| alpha[[n - 1, b]] + lat.stop[b]));
    if !z.is_finite() {
        return Err(Error::Degenerate("every tag sequence has zero weight".into()));
    }
    Ok(z)
}

/// Forward-backward marginals. Pairwise entries are
/// `α(a at i−1) · exp(trans + emit) · β(b at i) / Z`; unary rows are
/// `α · β / Z`.
pub fn pairwise_marginals(lat: &ChainLattice) -> Result<ChainMarginals> {
    let (n, l) = lat.emissions.dim();
    let alpha = forward(lat);
    let beta = backward(lat);
    let z = finite_partition(lat, &alpha)?;
    let mut pairwise = Array3::zeros((n - 1, l, l));
    for i in 1..n {
        for a in 0..l {
            for b in 0..l {
                let v = alpha[[i - 1, a]]
                    + lat.transitions[[i - 1, a, b]]
                    + lat.emissions[[i, b]]
                    + beta[[i, b]]
                    - z;
                pairwise[[i - 1, a, b]] = v.exp();
            }
        }
    }
    let unary = Array2::from_shape_fn((n, l), |(i, b)| (alpha[[i, b]] + beta[[i, b]] - z).exp());
    Ok(ChainMarginals { pairwise, unary })
}

/// Per-position label marginals, `P(yᵢ = b) ∝ α(b) β(b)`.
pub fn unary_marginals(lat: &ChainLattice) -> Result<Array2<f64>> {
    let (n, l) = lat.emissions.dim();
    let alpha = forward(lat);
    let beta = backward(lat);
    let z = finite_partition(lat, &alpha)?;
    Ok(Array2::from_shape_fn((n, l), |(i, b)| {
        (alpha[[i, b]] + beta[[i, b]] - z).exp()
    }))
}

/// Highest-scoring tag sequence. Ties go to the lowest label id, both at
/// each backpointer and at the final position.
pub fn viterbi(lat: &ChainLattice) -> TagSequence {
    let (n, l) = lat.emissions.dim();
    let mut delta = Array2::from_elem((n, l), LOG_ZERO);
    let mut back = Array2::<usize>::zeros((n, l));
    for b in 0..l {
        delta[[0, b]] = lat.start[b] + lat.emissions[[0, b]];
    }
    for i in 1..n {
        for b in 0..l {
            let mut best = 0;
            let mut best_s = delta[[i - 1, 0]] + lat.transitions[[i - 1, 0, b]];
            for a in 1..l {
                let s = delta[[i - 1, a]] + lat.transitions[[i - 1, a, b]];
                if s > best_s {
                    best = a;
                    best_s = s;
                }
            }
            delta[[i, b]] = best_s + lat.emissions[[i, b]];
            back[[i, b]] = best;
        }
    }
    let mut last = 0;
    let mut last_s = delta[[n - 1, 0]] + lat.stop[0];
    for b in 1..l {
        let s = delta[[n - 1, b]] + lat.stop[b];
        if s > last_s {
            last = b;
            last_s = s;
        }
    }
    let mut tags = vec![0; n];
    tags[n - 1] = last;
    for i in (1..n).rev() {
        tags[i - 1] = back[[i, tags[i]]];
    }
    TagSequence(tags)
}

/// `−Score(gold) + log Z` and its gradient with respect to every lattice
/// score (marginal minus gold indicator), returned in lattice shape.
pub fn nll_and_grad(lat: &ChainLattice, gold: &TagSequence) -> Result<(f64, ChainLattice)> {
    lat.check_gold(gold)?;
    let m = pairwise_marginals(lat)?;
    let z = log_partition(lat);
    let loss = z - lat.sequence_score(&gold.0);
    let mut grad = marginals_as_lattice(&m);
    let g = &gold.0;
    let n = lat.len();
    grad.start[g[0]] -= 1.0;
    grad.stop[g[n - 1]] -= 1.0;
    for i in 0..n {
        grad.emissions[[i, g[i]]] -= 1.0;
        if i > 0 {
            grad.transitions[[i - 1, g[i - 1], g[i]]] -= 1.0;
        }
    }
    Ok((loss, grad))
}

/// Expected feature counts in lattice shape: the gradient of `log Z`.
pub fn marginals_as_lattice(m: &ChainMarginals) -> ChainLattice {
    let n = m.unary.nrows();
    ChainLattice {
        emissions: m.unary.clone(),
        transitions: m.pairwise.clone(),
        start: m.unary.row(0).to_owned(),
        stop: m.unary.row(n - 1).to_owned(),
    }
}

/// Draws one tag sequence exactly from the lattice's Gibbs distribution by
/// forward filtering, backward sampling.
pub fn sample<R: Rng + ?Sized>(lat: &ChainLattice, rng: &mut R) -> Result<Vec<usize>> {
    let (n, l) = lat.emissions.dim();
    let alpha = forward(lat);
    finite_partition(lat, &alpha)?;
    let draw = |rng: &mut R, logits: &[f64]| -> usize {
        let z = lse(logits.iter().copied());
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &v) in logits.iter().enumerate() {
            acc += (v - z).exp();
            if u < acc {
                return k;
            }
        }
        // Rounding left `u` above the cumulative sum; take the last
        // label with mass.
        logits.iter().rposition(|&v| v > LOG_ZERO).unwrap_or(0)
    };
    let mut tags = vec![0; n];
    let last: Vec<f64> = (0..l).map(|b| alpha[[n - 1, b]] + lat.stop[b]).collect();
    tags[n - 1] = draw(rng, &last);
    for i in (0..n - 1).rev() {
        let next = tags[i + 1];
        let logits: Vec<f64> = (0..l)
            .map(|a| alpha[[i, a]] + lat.transitions[[i, a, next]])
            .collect();
        tags[i] = draw(rng, &logits);
    }
    Ok(tags)
}

/// Whether `b` may follow `a` in BIOES (`None` is the sentence boundary).
pub fn bioes_allowed(a: Option<BioesRole>, b: Option<BioesRole>) -> bool {
    use BioesRole::*;
    let open = |r: BioesRole| match r {
        Begin(t) | Inside(t) => Some(t),
        _ => None,
    };
    match (a.and_then(open), b) {
        (Some(t), Some(Inside(u))) | (Some(t), Some(End(u))) => t == u,
        (Some(_), _) => false,
        (None, Some(Inside(_))) | (None, Some(End(_))) => false,
        (None, _) => true,
    }
}

/// Linear-chain CRF with hashed emission features and dense label-pair
/// transition, start and stop scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainCrf {
    pub tags: LabelAlphabet,
    pub emit: SparseParams,
    pub trans: Array2<f64>,
    pub start: Array1<f64>,
    pub stop: Array1<f64>,
    /// Forbid invalid BIOES transitions with `−∞` scores.
    #[serde(default)]
    pub bioes_mask: bool,
}

impl ChainCrf {
    pub fn new(tags: LabelAlphabet, bits: u32) -> Self {
        let l = tags.len();
        ChainCrf {
            emit: SparseParams::new(bits, l),
            trans: Array2::zeros((l, l)),
            start: Array1::zeros(l),
            stop: Array1::zeros(l),
            tags,
            bioes_mask: false,
        }
    }

    /// Enables BIOES transition masking. Fails if the tag alphabet is not
    /// BIOES.
    pub fn with_bioes_mask(mut self) -> Result<Self> {
        BioesScheme::from_tags(&self.tags)?;
        self.bioes_mask = true;
        Ok(self)
    }

    pub fn num_labels(&self) -> usize {
        self.tags.len()
    }

    pub fn features(&self, tokens: &[String]) -> Vec<FeatureVec> {
        (0..tokens.len())
            .map(|i| token_features(tokens, i, self.emit.bits()))
            .collect()
    }

    fn masks(&self) -> Option<(Array2<bool>, Array1<bool>, Array1<bool>)> {
        if !self.bioes_mask {
            return None;
        }
        let scheme = BioesScheme::from_tags(&self.tags).ok()?;
        let l = self.num_labels();
        let role = |k: usize| scheme.role(k);
        Some((
            Array2::from_shape_fn((l, l), |(a, b)| bioes_allowed(role(a), role(b))),
            Array1::from_shape_fn(l, |b| bioes_allowed(None, role(b))),
            Array1::from_shape_fn(l, |a| bioes_allowed(role(a), None)),
        ))
    }

    /// Builds the sentence lattice from cached token features.
    pub fn lattice(&self, feats: &[FeatureVec]) -> ChainLattice {
        let n = feats.len();
        let l = self.num_labels();
        let mut emissions = Array2::zeros((n, l));
        for (i, f) in feats.iter().enumerate() {
            for b in 0..l {
                emissions[[i, b]] = self.emit.score(f, b);
            }
        }
        let mut trans = self.trans.clone();
        let mut start = self.start.clone();
        let mut stop = self.stop.clone();
        if let Some((tm, sm, em)) = self.masks() {
            trans.zip_mut_with(&tm, |v, &ok| {
                if !ok {
                    *v = LOG_ZERO
                }
            });
            start.zip_mut_with(&sm, |v, &ok| {
                if !ok {
                    *v = LOG_ZERO
                }
            });
            stop.zip_mut_with(&em, |v, &ok| {
                if !ok {
                    *v = LOG_ZERO
                }
            });
        }
        let transitions = Array3::from_shape_fn((n.saturating_sub(1), l, l), |(_, a, b)| trans[[a, b]]);
        ChainLattice {
            emissions,
            transitions,
            start,
            stop,
        }
    }

    /// Pushes a lattice-shaped gradient (scaled by `coef`) into `grad`.
    pub fn backprop(&self, feats: &[FeatureVec], dlat: &ChainLattice, coef: f64, grad: &mut ChainCrf) {
        let l = self.num_labels();
        for (i, f) in feats.iter().enumerate() {
            for b in 0..l {
                grad.emit.accumulate(f, b, coef * dlat.emissions[[i, b]]);
            }
        }
        for t in dlat.transitions.outer_iter() {
            grad.trans.scaled_add(coef, &t);
        }
        grad.start.scaled_add(coef, &dlat.start);
        grad.stop.scaled_add(coef, &dlat.stop);
    }

    pub fn zeros_like(&self) -> Self {
        ChainCrf {
            tags: self.tags.clone(),
            emit: self.emit.zeros_like(),
            trans: Array2::zeros(self.trans.dim()),
            start: Array1::zeros(self.start.len()),
            stop: Array1::zeros(self.stop.len()),
            bioes_mask: self.bioes_mask,
        }
    }

    pub fn apply_and_clear(&mut self, grad: &mut ChainCrf, step: f64) {
        self.emit.apply_and_clear(&mut grad.emit, step);
        self.trans.scaled_add(-step, &grad.trans);
        self.start.scaled_add(-step, &grad.start);
        self.stop.scaled_add(-step, &grad.stop);
        grad.trans.fill(0.0);
        grad.start.fill(0.0);
        grad.stop.fill(0.0);
    }

    /// Negative log-likelihood of `gold`, accumulating `coef ×` its gradient.
    pub fn target_loss(
        &self,
        feats: &[FeatureVec],
        gold: &TagSequence,
        coef: f64,
        grad: &mut ChainCrf,
    ) -> Result<f64> {
        let lat = self.lattice(feats);
        let (loss, dlat) = nll_and_grad(&lat, gold)?;
        self.backprop(feats, &dlat, coef, grad);
        Ok(loss)
    }

    pub fn decode(&self, feats: &[FeatureVec]) -> TagSequence {
        viterbi(&self.lattice(feats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(rng: &mut ChaCha8Rng, n: usize, l: usize) -> ChainLattice {
        let mut u = || rng.random_range(-2.0..2.0);
        ChainLattice::new(
            Array2::from_shape_fn((n, l), |_| u()),
            Array3::from_shape_fn((n - 1, l, l), |_| u()),
            Array1::from_shape_fn(l, |_| u()),
            Array1::from_shape_fn(l, |_| u()),
        )
        .unwrap()
    }

    // Independent enumeration over all Lⁿ sequences, kept local to the test.
    fn all_sequences(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |b| {
                        let mut q = p.clone();
                        q.push(b);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn uniform_partitions() {
        assert!((log_partition(&ChainLattice::zeros(1, 2)) - 2f64.ln()).abs() < 1e-15);
        assert!((log_partition(&ChainLattice::zeros(2, 2)) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_marginals() {
        let m = pairwise_marginals(&ChainLattice::zeros(4, 3)).unwrap();
        assert!(m.pairwise.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-12));
        assert!(m.unary.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
        let u = unary_marginals(&ChainLattice::zeros(3, 4)).unwrap();
        assert!(u.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn forbidden_transition_has_zero_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lat = random_lattice(&mut rng, 3, 2);
        lat.transitions[[1, 0, 1]] = LOG_ZERO;
        let m = pairwise_marginals(&lat).unwrap();
        assert_eq!(m.pairwise[[1, 0, 1]], 0.0);
    }

    #[test]
    fn single_position_is_softmax() {
        let lat = ChainLattice::new(
            Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap(),
            Array3::zeros((0, 3, 3)),
            Array1::from(vec![0.1, 0.2, 0.3]),
            Array1::from(vec![-0.3, 0.0, 0.4]),
        )
        .unwrap();
        let u = unary_marginals(&lat).unwrap();
        let logits = [0.5 + 0.1 - 0.3, -1.0 + 0.2, 2.0 + 0.3 + 0.4];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        for b in 0..3 {
            assert!((u[[0, b]] - logits[b].exp() / z).abs() < 1e-14);
        }
        let m = pairwise_marginals(&lat).unwrap();
        assert_eq!(m.pairwise.dim(), (0, 3, 3));
    }

    #[test]
    fn partition_and_marginals_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(1..6);
            let l = rng.random_range(1..4);
            let lat = random_lattice_any(&mut rng, n, l);
            let seqs = all_sequences(n, l);
            let scores: Vec<f64> = seqs.iter().map(|s| lat.sequence_score(s)).collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z = mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
            assert!((log_partition(&lat) - z).abs() < 1e-9);
            let m = pairwise_marginals(&lat).unwrap();
            let mut unary = Array2::<f64>::zeros((n, l));
            let mut pair = Array3::<f64>::zeros((n.saturating_sub(1), l, l));
            for (s, sc) in seqs.iter().zip(&scores) {
                let p = (sc - z).exp();
                for i in 0..n {
                    unary[[i, s[i]]] += p;
                    if i > 0 {
                        pair[[i - 1, s[i - 1], s[i]]] += p;
                    }
                }
            }
            for (a, b) in m.unary.iter().zip(unary.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in m.pairwise.iter().zip(pair.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn random_lattice_any(rng: &mut ChaCha8Rng, n: usize, l: usize) -> ChainLattice {
        if n >= 2 {
            random_lattice(rng, n, l)
        } else {
            let mut u = || rng.random_range(-2.0..2.0);
            ChainLattice::new(
                Array2::from_shape_fn((1, l), |_| u()),
                Array3::zeros((0, l, l)),
                Array1::from_shape_fn(l, |_| u()),
                Array1::from_shape_fn(l, |_| u()),
            )
            .unwrap()
        }
    }

    #[test]
    fn marginal_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = rng.random_range(2..9);
            let l = rng.random_range(1..6);
            let lat = random_lattice(&mut rng, n, l);
            let m = pairwise_marginals(&lat).unwrap();
            let u = unary_marginals(&lat).unwrap();
            for i in 1..n {
                for b in 0..l {
                    let col: f64 = (0..l).map(|a| m.pairwise[[i - 1, a, b]]).sum();
                    assert!((col - u[[i, b]]).abs() < 1e-9);
                }
                for a in 0..l {
                    let row: f64 = (0..l).map(|b| m.pairwise[[i - 1, a, b]]).sum();
                    assert!((row - u[[i - 1, a]]).abs() < 1e-9);
                }
                let total: f64 = m.pairwise.index_axis(ndarray::Axis(0), i - 1).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn emission_shift_moves_only_log_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lat = random_lattice(&mut rng, 5, 3);
        let mut shifted = lat.clone();
        shifted.emissions.row_mut(2).mapv_inplace(|v| v + 1.75);
        assert!((log_partition(&shifted) - log_partition(&lat) - 1.75).abs() < 1e-9);
        let a = pairwise_marginals(&lat).unwrap();
        let b = pairwise_marginals(&shifted).unwrap();
        for (x, y) in a.pairwise.iter().zip(b.pairwise.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_examples() {
        let mut lat = ChainLattice::zeros(4, 3);
        let want = [2, 0, 1, 1];
        for (i, &w) in want.iter().enumerate() {
            lat.emissions[[i, w]] = 10.0;
        }
        assert_eq!(viterbi(&lat).0, want);
        assert_eq!(viterbi(&ChainLattice::zeros(5, 3)).0, vec![0; 5]);
    }

    #[test]
    fn viterbi_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let lat = random_lattice(&mut rng, 5, 3);
            let best = all_sequences(5, 3)
                .into_iter()
                .max_by(|a, b| lat.sequence_score(a).total_cmp(&lat.sequence_score(b)))
                .unwrap();
            assert_eq!(viterbi(&lat).0, best);
        }
    }

    #[test]
    fn nll_examples() {
        let (loss, _) = nll_and_grad(&ChainLattice::zeros(4, 3), &TagSequence(vec![0, 1, 2, 0])).unwrap();
        assert!((loss - 4.0 * 3f64.ln()).abs() < 1e-12);
        let mut lat = ChainLattice::zeros(3, 2);
        for i in 0..3 {
            lat.emissions[[i, 1]] = 60.0;
        }
        let (loss, _) = nll_and_grad(&lat, &TagSequence(vec![1, 1, 1])).unwrap();
        assert!(loss < 1e-20);
        assert!(nll_and_grad(&lat, &TagSequence(vec![1, 2, 1])).is_err());
        assert!(nll_and_grad(&lat, &TagSequence(vec![1, 1])).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let lat = random_lattice(&mut rng, 4, 3);
        let gold = TagSequence(vec![2, 0, 0, 1]);
        let (_, g) = nll_and_grad(&lat, &gold).unwrap();
        let eps = 1e-5;
        let f = |l: &ChainLattice| nll_and_grad(l, &gold).unwrap().0;
        for i in 0..4 {
            for b in 0..3 {
                let mut up = lat.clone();
                up.emissions[[i, b]] += eps;
                let mut dn = lat.clone();
                dn.emissions[[i, b]] -= eps;
                let fd = (f(&up) - f(&dn)) / (2.0 * eps);
                assert!((fd - g.emissions[[i, b]]).abs() <= 1e-4 * fd.abs().max(1e-6));
            }
        }
        for a in 0..3 {
            let mut up = lat.clone();
            up.transitions[[1, a, 2]] += eps;
            let mut dn = lat.clone();
            dn.transitions[[1, a, 2]] -= eps;
            let fd = (f(&up) - f(&dn)) / (2.0 * eps);
            assert!((fd - g.transitions[[1, a, 2]]).abs() <= 1e-4 * fd.abs().max(1e-6));
            let mut up = lat.clone();
            up.stop[a] += eps;
            let mut dn = lat.clone();
            dn.stop[a] -= eps;
            let fd = (f(&up) - f(&dn)) / (2.0 * eps);
            assert!((fd - g.stop[a]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
    }

    #[test]
    fn bioes_transition_rules() {
        use BioesRole::*;
        assert!(bioes_allowed(None, Some(Begin(0))));
        assert!(!bioes_allowed(None, Some(Inside(0))));
        assert!(bioes_allowed(Some(Begin(0)), Some(End(0))));
        assert!(!bioes_allowed(Some(Begin(0)), Some(End(1))));
        assert!(!bioes_allowed(Some(Begin(0)), Some(Outside)));
        assert!(!bioes_allowed(Some(Inside(1)), None));
        assert!(bioes_allowed(Some(End(0)), Some(Single(1))));
        assert!(bioes_allowed(Some(Outside), None));
    }

    #[test]
    fn masked_crf_decodes_valid_bioes() {
        use crate::corpus::{AlphabetRole, BioesScheme};
        let types = LabelAlphabet::from_labels(AlphabetRole::EntityTypes, &["PER"]);
        let tags = BioesScheme::canonical_tags(&types);
        let mut crf = ChainCrf::new(tags.clone(), 10).with_bioes_mask().unwrap();
        // Bias everything toward I-PER; the mask must still force validity.
        crf.emit.bias_mut()[tags.id("I-PER").unwrap()] = 5.0;
        let toks: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let feats = crf.features(&toks);
        let out = crf.decode(&feats);
        let names: Vec<&str> = out.0.iter().map(|&t| tags.label(t).unwrap()).collect();
        assert_eq!(names, ["B-PER", "I-PER", "E-PER"]);
    }
}
