//! Span-factored NER: a Gibbs distribution over flat sets of labeled spans
//! whose score is the sum of independent span scores.
//!
//! With `e(i,j,l) = exp s(i,j,l)` and 1-based positions,
//!
//! ```text
//! F(i) = F(i+1) + Σ_{j≥i} Σ_l e(i,j,l) · F(j+1),   F(n+1) = 1
//! B(i) = B(i−1) + Σ_{k≤i} Σ_l e(k,i,l) · B(k−1),   B(0)   = 1
//! Z    = F(1) = B(n)
//! ```
//!
//! `F(i)` sums every structure over positions `i..n` and `B(i)` every
//! structure over `1..i`, so a span `(k, j, l)` has marginal
//! `B(k−1) · e(k,j,l) · F(j+1) / Z`.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BioesScheme, LabelAlphabet, Span, SpanSet};
use crate::error::{usage, Error, Result};
use crate::numerics::{lse, LogScore, LOG_ZERO};
use crate::scorer::{span_features, FeatureVec, SparseParams};

/// Scores `s(i, j, l)` for `1 ≤ i ≤ j ≤ n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanScoreTable {
    n: usize,
    types: usize,
    /// `[i−1][j−1][l]`; entries with `j < i` are unused.
    s: Array3<f64>,
}

impl SpanScoreTable {
    pub fn zeros(n: usize, types: usize) -> Self {
        SpanScoreTable {
            n,
            types,
            s: Array3::zeros((n, n, types)),
        }
    }

    pub fn from_fn(n: usize, types: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = SpanScoreTable::zeros(n, types);
        for i in 1..=n {
            for j in i..=n {
                for l in 0..types {
                    t.s[[i - 1, j - 1, l]] = f(i, j, l);
                }
            }
        }
        t
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_types(&self) -> usize {
        self.types
    }

    /// Number of stored `(i, j, l)` entries.
    pub fn num_entries(&self) -> usize {
        self.n * (self.n + 1) / 2 * self.types
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.s[[i - 1, j - 1, l]]
    }

    pub fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        self.s[[i - 1, j - 1, l]] = v;
    }

    /// Every score multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        SpanScoreTable {
            n: self.n,
            types: self.types,
            s: self.s.mapv(|v| v * factor),
        }
    }

    /// Total score of a span set.
    pub fn structure_score(&self, spans: &SpanSet) -> LogScore {
        spans.spans().iter().map(|sp| self.get(sp.start, sp.end, sp.label)).sum()
    }
}

/// Log suffix sums `log F(i)` for `i ∈ 1..=n+1` (index 0 unused).
pub fn suffix_log_sums(t: &SpanScoreTable) -> Vec<f64> {
    let n = t.n;
    let mut f = vec![LOG_ZERO; n + 2];
    f[n + 1] = 0.0;
    for i in (1..=n).rev() {
        let take = lse((i..=n).flat_map(|j| {
            let fj = f[j + 1];
            (0..t.types).map(move |l| t.get(i, j, l) + fj)
        }));
        f[i] = crate::numerics::log_add(f[i + 1], take);
    }
    f
}

/// Log prefix sums `log B(i)` for `i ∈ 0..=n`.
pub fn prefix_log_sums(t: &SpanScoreTable) -> Vec<f64> {
    let n = t.n;
    let mut b = vec![LOG_ZERO; n + 1];
    b[0] = 0.0;
    for i in 1..=n {
        let take = lse((1..=i).flat_map(|k| {
            let bk = b[k - 1];
            (0..t.types).map(move |l| t.get(k, i, l) + bk)
        }));
        b[i] = crate::numerics::log_add(b[i - 1], take);
    }
    b
}

/// `log Z` by the suffix recursion.
pub fn span_log_partition(t: &SpanScoreTable) -> LogScore {
    suffix_log_sums(t)[1]
}

/// `log Z` by the prefix recursion.
pub fn span_log_partition_prefix(t: &SpanScoreTable) -> LogScore {
    prefix_log_sums(t)[t.n]
}

/// Marginal probability of every span, `[i−1][j−1][l]`, zero for `j < i`.
pub fn span_marginals(t: &SpanScoreTable) -> Result<Array3<f64>> {
    let n = t.n;
    let f = suffix_log_sums(t);
    let b = prefix_log_sums(t);
    let z = f[1];
    if !z.is_finite() {
        return Err(Error::Degenerate("span partition function is not finite".into()));
    }
    let mut mu = Array3::zeros((n, n, t.types));
    for i in 1..=n {
        for j in i..=n {
            for l in 0..t.types {
                mu[[i - 1, j - 1, l]] = (b[i - 1] + t.get(i, j, l) + f[j + 1] - z).exp();
            }
        }
    }
    Ok(mu)
}

/// Column of a BIOES role in the canonical tag order `O, B-t, I-t, E-t, S-t, …`.
fn col_o() -> usize {
    0
}
fn col_b(l: usize) -> usize {
    1 + 4 * l
}
fn col_i(l: usize) -> usize {
    2 + 4 * l
}
fn col_e(l: usize) -> usize {
    3 + 4 * l
}
fn col_s(l: usize) -> usize {
    4 + 4 * l
}

/// Per-position BIOES tag marginals, `n × (1 + 4|L|)` in the column order of
/// [`BioesScheme::canonical_tags`]. Entries no structure can produce (for
/// example `B` at the last position) are exactly 0.
pub fn bioes_marginals(t: &SpanScoreTable) -> Result<Array2<f64>> {
    let n = t.n;
    let ty = t.types;
    let f = suffix_log_sums(t);
    let b = prefix_log_sums(t);
    let z = f[1];
    let mu = span_marginals(t)?;
    let mut rows = Array2::zeros((n, 1 + 4 * ty));
    for i in 1..=n {
        rows[[i - 1, col_o()]] = (b[i - 1] + f[i + 1] - z).exp();
        for l in 0..ty {
            rows[[i - 1, col_s(l)]] = mu[[i - 1, i - 1, l]];
        }
    }
    for k in 1..=n {
        for j in k + 1..=n {
            for l in 0..ty {
                let m = mu[[k - 1, j - 1, l]];
                rows[[k - 1, col_b(l)]] += m;
                rows[[j - 1, col_e(l)]] += m;
                for p in k + 1..j {
                    rows[[p - 1, col_i(l)]] += m;
                }
            }
        }
    }
    Ok(rows)
}

/// Best-scoring span set. Only strictly positive-score spans can be
/// selected; among equal totals the set with fewer spans wins, then the one
/// taking a span at the leftmost position, then the shorter span, then the
/// lower type id.
pub fn decode_spans(t: &SpanScoreTable) -> SpanSet {
    let n = t.n;
    // (score, span count, choice) for suffix starting at i; choice None = skip.
    let mut best: Vec<(f64, usize, Option<(usize, usize)>)> = vec![(0.0, 0, None); n + 2];
    for i in (1..=n).rev() {
        let mut cur = (best[i + 1].0, best[i + 1].1, None);
        for j in i..=n {
            for l in 0..t.types {
                let cand = (t.get(i, j, l) + best[j + 1].0, best[j + 1].1 + 1);
                let better = cand.0 > cur.0
                    || (cand.0 == cur.0 && cand.1 < cur.1)
                    || (cand.0 == cur.0 && cand.1 == cur.1 && cur.2.is_none());
                if better {
                    cur = (cand.0, cand.1, Some((j, l)));
                }
            }
        }
        best[i] = cur;
    }
    let mut spans = Vec::new();
    let mut i = 1;
    while i <= n {
        match best[i].2 {
            Some((j, l)) => {
                spans.push(Span::new(i, j, l));
                i = j + 1;
            }
            None => i += 1,
        }
    }
    SpanSet::new(spans, n).expect("decoded spans are disjoint")
}

/// `−Score(gold) + log Z` and its gradient, span marginal minus gold
/// indicator, as a table.
pub fn span_nll_and_grad(t: &SpanScoreTable, gold: &SpanSet) -> Result<(f64, SpanScoreTable)> {
    for sp in gold.spans() {
        if sp.end > t.n || sp.label >= t.types {
            return usage(format!("gold span {sp:?} outside the score table"));
        }
    }
    let mu = span_marginals(t)?;
    let loss = span_log_partition(t) - t.structure_score(gold);
    let mut g = SpanScoreTable {
        n: t.n,
        types: t.types,
        s: mu,
    };
    for sp in gold.spans() {
        g.s[[sp.start - 1, sp.end - 1, sp.label]] -= 1.0;
    }
    Ok((loss, g))
}

/// Draws one span set exactly from the Gibbs distribution, walking left to
/// right with the suffix sums.
pub fn sample_spans<R: Rng + ?Sized>(t: &SpanScoreTable, rng: &mut R) -> Result<SpanSet> {
    let n = t.n;
    let f = suffix_log_sums(t);
    if !f[1].is_finite() {
        return Err(Error::Degenerate("span partition function is not finite".into()));
    }
    let mut spans = Vec::new();
    let mut i = 1;
    while i <= n {
        let u: f64 = rng.random();
        let mut acc = (f[i + 1] - f[i]).exp();
        let mut choice = None;
        if u >= acc {
            'outer: for j in i..=n {
                for l in 0..t.types {
                    acc += (t.get(i, j, l) + f[j + 1] - f[i]).exp();
                    if u < acc {
                        choice = Some((j, l));
                        break 'outer;
                    }
                }
            }
        }
        match choice {
            Some((j, l)) => {
                spans.push(Span::new(i, j, l));
                i = j + 1;
            }
            None => i += 1,
        }
    }
    SpanSet::new(spans, n)
}

/// Cached span features, indexed `[(i−1) * n + (j−1)]` for `i ≤ j`.
#[derive(Clone, Debug)]
pub struct SpanFeatures {
    pub n: usize,
    pub spans: Vec<FeatureVec>,
}

impl SpanFeatures {
    pub fn new(tokens: &[String], bits: u32) -> Self {
        let n = tokens.len();
        let mut spans = vec![FeatureVec::default(); n * n];
        for i in 1..=n {
            for j in i..=n {
                spans[(i - 1) * n + (j - 1)] = span_features(tokens, i, j, bits);
            }
        }
        SpanFeatures { n, spans }
    }

    pub fn get(&self, i: usize, j: usize) -> &FeatureVec {
        &self.spans[(i - 1) * self.n + (j - 1)]
    }
}

/// Globally normalized span-set model over hashed span features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanModel {
    pub types: LabelAlphabet,
    pub params: SparseParams,
}

impl SpanModel {
    pub fn new(types: LabelAlphabet, bits: u32) -> Self {
        SpanModel {
            params: SparseParams::new(bits, types.len()),
            types,
        }
    }

    /// BIOES tag alphabet matching the columns of [`bioes_marginals`].
    pub fn bioes_tags(&self) -> LabelAlphabet {
        BioesScheme::canonical_tags(&self.types)
    }

    pub fn features(&self, tokens: &[String]) -> SpanFeatures {
        SpanFeatures::new(tokens, self.params.bits())
    }

    pub fn span_scores(&self, f: &SpanFeatures) -> SpanScoreTable {
        SpanScoreTable::from_fn(f.n, self.types.len(), |i, j, l| self.params.score(f.get(i, j), l))
    }

    pub fn backprop(&self, f: &SpanFeatures, d: &SpanScoreTable, coef: f64, grad: &mut SpanModel) {
        for i in 1..=f.n {
            for j in i..=f.n {
                for l in 0..self.types.len() {
                    let v = d.get(i, j, l);
                    if v != 0.0 {
                        grad.params.accumulate(f.get(i, j), l, coef * v);
                    }
                }
            }
        }
    }

    pub fn target_loss(&self, f: &SpanFeatures, gold: &SpanSet, coef: f64, grad: &mut SpanModel) -> Result<f64> {
        let (loss, d) = span_nll_and_grad(&self.span_scores(f), gold)?;
        self.backprop(f, &d, coef, grad);
        Ok(loss)
    }

    pub fn decode(&self, f: &SpanFeatures) -> SpanSet {
        decode_spans(&self.span_scores(f))
    }

    pub fn zeros_like(&self) -> Self {
        SpanModel {
            types: self.types.clone(),
            params: self.params.zeros_like(),
        }
    }

    pub fn apply_and_clear(&mut self, grad: &mut SpanModel, step: f64) {
        self.params.apply_and_clear(&mut grad.params, step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // All flat labeled span sets over 1..=n, built independently of the DP.
    fn all_span_sets(n: usize, types: usize) -> Vec<Vec<Span>> {
        fn rec(pos: usize, n: usize, types: usize, cur: &mut Vec<Span>, out: &mut Vec<Vec<Span>>) {
            if pos > n {
                out.push(cur.clone());
                return;
            }
            rec(pos + 1, n, types, cur, out);
            for end in pos..=n {
                for l in 0..types {
                    cur.push(Span::new(pos, end, l));
                    rec(end + 1, n, types, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(1, n, types, &mut Vec::new(), &mut out);
        out
    }

    fn random_table(rng: &mut ChaCha8Rng, n: usize, types: usize) -> SpanScoreTable {
        SpanScoreTable::from_fn(n, types, |_, _, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn small_partitions() {
        assert!((span_log_partition(&SpanScoreTable::zeros(1, 1)) - 2f64.ln()).abs() < 1e-15);
        assert!((span_log_partition(&SpanScoreTable::zeros(2, 1)) - 5f64.ln()).abs() < 1e-15);
        assert_eq!(SpanScoreTable::zeros(1, 2).num_entries(), 2);
    }

    #[test]
    fn small_bioes_rows() {
        let r = bioes_marginals(&SpanScoreTable::zeros(1, 1)).unwrap();
        assert_eq!(r.row(0).to_vec(), [0.5, 0.0, 0.0, 0.0, 0.5]);
        let r = bioes_marginals(&SpanScoreTable::zeros(2, 1)).unwrap();
        let want = [0.4, 0.2, 0.0, 0.0, 0.4];
        for (g, w) in r.row(0).iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.random_range(1..7);
            let ty = rng.random_range(1..4);
            let t = random_table(&mut rng, n, ty);
            let sets = all_span_sets(n, ty);
            let scores: Vec<f64> = sets.iter().map(|s| s.iter().map(|sp| t.get(sp.start, sp.end, sp.label)).sum()).collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z = mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
            assert!((span_log_partition(&t) - z).abs() < 1e-9);
            assert!((span_log_partition_prefix(&t) - z).abs() < 1e-9);
            let mut want = Array2::<f64>::zeros((n, 1 + 4 * ty));
            for (set, sc) in sets.iter().zip(&scores) {
                let p = (sc - z).exp();
                let mut tag = vec![0usize; n];
                for sp in set {
                    if sp.start == sp.end {
                        tag[sp.start - 1] = 4 + 4 * sp.label;
                    } else {
                        tag[sp.start - 1] = 1 + 4 * sp.label;
                        for q in sp.start + 1..sp.end {
                            tag[q - 1] = 2 + 4 * sp.label;
                        }
                        tag[sp.end - 1] = 3 + 4 * sp.label;
                    }
                }
                for (i, &c) in tag.iter().enumerate() {
                    want[[i, c]] += p;
                }
            }
            let got = bioes_marginals(&t).unwrap();
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-9);
            }
            for i in 0..n {
                assert!((got.row(i).sum() - 1.0).abs() < 1e-9);
            }
            for l in 0..ty {
                assert_eq!(got[[n - 1, 1 + 4 * l]].to_bits(), 0);
                assert_eq!(got[[0, 2 + 4 * l]].to_bits(), 0);
                assert_eq!(got[[n - 1, 2 + 4 * l]].to_bits(), 0);
                assert_eq!(got[[0, 3 + 4 * l]].to_bits(), 0);
            }
        }
    }

    #[test]
    fn decode_examples() {
        let neg = SpanScoreTable::from_fn(4, 2, |_, _, _| -1.0);
        assert!(decode_spans(&neg).is_empty());
        let mut t = neg.clone();
        t.set(2, 3, 1, 5.0);
        assert_eq!(decode_spans(&t).spans(), &[Span::new(2, 3, 1)]);
        assert!(decode_spans(&SpanScoreTable::zeros(3, 1)).is_empty());
    }

    #[test]
    fn decode_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..30 {
            let t = random_table(&mut rng, 5, 2);
            let best = all_span_sets(5, 2)
                .into_iter()
                .max_by(|a, b| {
                    let sa: f64 = a.iter().map(|sp| t.get(sp.start, sp.end, sp.label)).sum();
                    let sb: f64 = b.iter().map(|sp| t.get(sp.start, sp.end, sp.label)).sum();
                    sa.total_cmp(&sb)
                })
                .unwrap();
            assert_eq!(decode_spans(&t).spans(), SpanSet::new(best, 5).unwrap().spans());
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let t = random_table(&mut rng, 4, 2);
        let gold = SpanSet::new(vec![Span::new(1, 2, 1), Span::new(4, 4, 0)], 4).unwrap();
        let (_, g) = span_nll_and_grad(&t, &gold).unwrap();
        let eps = 1e-5;
        for i in 1..=4 {
            for j in i..=4 {
                for l in 0..2 {
                    let mut up = t.clone();
                    up.set(i, j, l, t.get(i, j, l) + eps);
                    let mut dn = t.clone();
                    dn.set(i, j, l, t.get(i, j, l) - eps);
                    let fd = (span_nll_and_grad(&up, &gold).unwrap().0 - span_nll_and_grad(&dn, &gold).unwrap().0) / (2.0 * eps);
                    assert!((fd - g.get(i, j, l)).abs() <= 1e-4 * fd.abs().max(1e-6));
                }
            }
        }
    }

    #[test]
    fn sampler_frequencies_follow_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let t = random_table(&mut rng, 3, 1);
        let rows = bioes_marginals(&t).unwrap();
        let draws = 20_000;
        let mut counts = Array2::<f64>::zeros(rows.dim());
        let scheme_tags = SpanModel::new(LabelAlphabet::from_labels(crate::corpus::AlphabetRole::EntityTypes, &["X"]), 4).bioes_tags();
        let scheme = BioesScheme::from_tags(&scheme_tags).unwrap();
        for _ in 0..draws {
            let s = sample_spans(&t, &mut rng).unwrap();
            let tags = crate::corpus::spans_to_bioes(&s, 3, &scheme).unwrap();
            for (i, &c) in tags.0.iter().enumerate() {
                counts[[i, c]] += 1.0;
            }
        }
        for (c, p) in counts.iter().zip(rows.iter()) {
            let sd = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((c / draws as f64 - p).abs() <= 3.0 * sd + 1e-12);
        }
    }
}
