//! Token-wise locally normalized classifier: one independent softmax per
//! position.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::chain_crf::ChainMarginals;
use crate::corpus::{LabelAlphabet, TagSequence};
use crate::error::{usage, Result};
use crate::numerics::{argmax, log_softmax};
use crate::scorer::{token_features, FeatureVec, SparseParams};

/// `n × L` matrix of per-token label probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistributions {
    pub rows: Array2<f64>,
}

impl TokenDistributions {
    /// Row-wise softmax of an `n × L` score matrix.
    pub fn from_scores(scores: &Array2<f64>) -> Result<Self> {
        Ok(TokenDistributions {
            rows: row_log_softmax(scores)?.mapv(f64::exp),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Per-row argmax, ties toward the lowest id.
    pub fn decode(&self) -> TagSequence {
        TagSequence(
            self.rows
                .rows()
                .into_iter()
                .map(|r| argmax(r.as_slice().expect("standard layout")))
                .collect(),
        )
    }
}

pub(crate) fn row_log_softmax(scores: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(scores.dim());
    for (i, row) in scores.rows().into_iter().enumerate() {
        let ls = log_softmax(&row.to_vec())?;
        out.row_mut(i).assign(&ndarray::Array1::from(ls));
    }
    Ok(out)
}

/// Pair marginals of a product of independent token distributions:
/// `pairwise[i−1][a][b] = rows[i−1][a] · rows[i][b]`.
pub fn pair_marginals_from_tokens(d: &TokenDistributions) -> ChainMarginals {
    let (n, l) = d.rows.dim();
    let pairwise = Array3::from_shape_fn((n.saturating_sub(1), l, l), |(i, a, b)| {
        d.rows[[i, a]] * d.rows[[i + 1, b]]
    });
    ChainMarginals {
        pairwise,
        unary: d.rows.clone(),
    }
}

/// `Σᵢ −log softmax(scoresᵢ)[goldᵢ]` and its gradient, softmax minus one-hot.
pub fn local_nll_and_grad(scores: &Array2<f64>, gold: &TagSequence) -> Result<(f64, Array2<f64>)> {
    let (n, l) = scores.dim();
    if gold.0.len() != n {
        return usage(format!("gold has {} tags for {} positions", gold.0.len(), n));
    }
    if let Some(&bad) = gold.0.iter().find(|&&t| t >= l) {
        return usage(format!("gold tag {bad} >= {l}"));
    }
    let logp = row_log_softmax(scores)?;
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &g) in gold.0.iter().enumerate() {
        loss -= logp[[i, g]];
        grad[[i, g]] -= 1.0;
    }
    Ok((loss, grad))
}

/// MaxEnt tagger over hashed token features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenMaxEnt {
    pub tags: LabelAlphabet,
    pub emit: SparseParams,
}

impl TokenMaxEnt {
    pub fn new(tags: LabelAlphabet, bits: u32) -> Self {
        TokenMaxEnt {
            emit: SparseParams::new(bits, tags.len()),
            tags,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.tags.len()
    }

    pub fn features(&self, tokens: &[String]) -> Vec<FeatureVec> {
        (0..tokens.len())
            .map(|i| token_features(tokens, i, self.emit.bits()))
            .collect()
    }

    pub fn scores(&self, feats: &[FeatureVec]) -> Array2<f64> {
        let l = self.num_labels();
        let mut s = Array2::zeros((feats.len(), l));
        for (i, f) in feats.iter().enumerate() {
            for b in 0..l {
                s[[i, b]] = self.emit.score(f, b);
            }
        }
        s
    }

    pub fn distributions(&self, feats: &[FeatureVec]) -> Result<TokenDistributions> {
        TokenDistributions::from_scores(&self.scores(feats))
    }

    pub fn token_distributions(&self, tokens: &[String]) -> Result<TokenDistributions> {
        self.distributions(&self.features(tokens))
    }

    pub fn backprop(&self, feats: &[FeatureVec], dscores: &Array2<f64>, coef: f64, grad: &mut TokenMaxEnt) {
        for (i, f) in feats.iter().enumerate() {
            for (b, &d) in dscores.row(i).iter().enumerate() {
                grad.emit.accumulate(f, b, coef * d);
            }
        }
    }

    pub fn target_loss(
        &self,
        feats: &[FeatureVec],
        gold: &TagSequence,
        coef: f64,
        grad: &mut TokenMaxEnt,
    ) -> Result<f64> {
        let (loss, d) = local_nll_and_grad(&self.scores(feats), gold)?;
        self.backprop(feats, &d, coef, grad);
        Ok(loss)
    }

    pub fn decode(&self, feats: &[FeatureVec]) -> Result<TagSequence> {
        Ok(self.distributions(feats)?.decode())
    }

    pub fn zeros_like(&self) -> Self {
        TokenMaxEnt {
            tags: self.tags.clone(),
            emit: self.emit.zeros_like(),
        }
    }

    pub fn apply_and_clear(&mut self, grad: &mut TokenMaxEnt, step: f64) {
        self.emit.apply_and_clear(&mut grad.emit, step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AlphabetRole;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn alphabet(n: usize) -> LabelAlphabet {
        let names: Vec<String> = (0..n).map(|k| format!("T{k}")).collect();
        LabelAlphabet::from_labels(AlphabetRole::Tags, &names)
    }

    fn random_model(rng: &mut ChaCha8Rng, l: usize) -> TokenMaxEnt {
        let mut m = TokenMaxEnt::new(alphabet(l), 8);
        for w in m.emit.weights_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        for b in m.emit.bias_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn zero_weights_uniform_rows() {
        let m = TokenMaxEnt::new(alphabet(4), 8);
        let d = m.token_distributions(&toks("a b c")).unwrap();
        assert!(d.rows.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let m1 = TokenMaxEnt::new(alphabet(1), 8);
        let d = m1.token_distributions(&toks("a b")).unwrap();
        assert!(d.rows.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn rows_match_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 3);
        let t = toks("the Cat sat");
        let d = m.token_distributions(&t).unwrap();
        for i in 0..3 {
            let f = token_features(&t, i, 8);
            let mut e = [0.0; 3];
            for (b, slot) in e.iter_mut().enumerate() {
                let mut s = m.emit.bias()[b];
                for (id, v) in f.iter() {
                    s += v * m.emit.weights()[m.emit.slot(id, b)];
                }
                *slot = s.exp();
            }
            let z: f64 = e.iter().sum();
            for b in 0..3 {
                assert!((d.rows[[i, b]] - e[b] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nll_examples() {
        let m = TokenMaxEnt::new(alphabet(3), 8);
        let t = toks("x y z w");
        let mut g = m.zeros_like();
        let loss = m
            .target_loss(&m.features(&t), &TagSequence(vec![0, 2, 1, 1]), 1.0, &mut g)
            .unwrap();
        assert!((loss - 4.0 * 3f64.ln()).abs() < 1e-12);

        let mut s = Array2::zeros((2, 2));
        s[[0, 1]] = 60.0;
        s[[1, 0]] = 60.0;
        let (loss, _) = local_nll_and_grad(&s, &TagSequence(vec![1, 0])).unwrap();
        assert!(loss < 1e-20);
        assert!(local_nll_and_grad(&s, &TagSequence(vec![1, 2])).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_model(&mut rng, 3);
        let t = toks("Anna went to Paris");
        let feats = m.features(&t);
        let gold = TagSequence(vec![1, 0, 0, 2]);
        let mut g = m.zeros_like();
        m.target_loss(&feats, &gold, 1.0, &mut g).unwrap();
        let eps = 1e-5;
        let loss = |mm: &TokenMaxEnt| {
            let mut scratch = mm.zeros_like();
            mm.target_loss(&feats, &gold, 1.0, &mut scratch).unwrap()
        };
        let mut slots: Vec<(usize, usize)> = feats
            .iter()
            .flat_map(|f| f.ids().to_vec())
            .flat_map(|id| (0..3).map(move |b| (id as usize, b)))
            .map(|(id, b)| (m.emit.slot(id as u32, b), b))
            .collect();
        slots.sort();
        slots.dedup();
        for &(slot, _) in slots.iter().take(50) {
            let mut up = m.clone();
            up.emit.weights_mut()[slot] += eps;
            let mut dn = m.clone();
            dn.emit.weights_mut()[slot] -= eps;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * eps);
            let an = g.emit.weights()[slot];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-6), "slot {slot}: {fd} vs {an}");
        }
    }

    #[test]
    fn pair_products() {
        let u = TokenDistributions {
            rows: Array2::from_elem((3, 2), 0.5),
        };
        let m = pair_marginals_from_tokens(&u);
        assert!(m.pairwise.iter().all(|&p| p == 0.25));
        let mut one_hot = Array2::zeros((3, 3));
        one_hot[[0, 2]] = 1.0;
        one_hot[[1, 0]] = 1.0;
        one_hot[[2, 1]] = 1.0;
        let m = pair_marginals_from_tokens(&TokenDistributions { rows: one_hot });
        assert_eq!(m.pairwise[[0, 2, 0]], 1.0);
        assert_eq!(m.pairwise[[1, 0, 1]], 1.0);
        assert_eq!(m.pairwise.sum(), 2.0);
    }

    proptest! {
        #[test]
        fn pair_products_marginalize(raw in prop::collection::vec(-5.0f64..5.0, 4 * 3)) {
            let d = TokenDistributions::from_scores(&Array2::from_shape_vec((4, 3), raw).unwrap()).unwrap();
            let m = pair_marginals_from_tokens(&d);
            for i in 0..3 {
                prop_assert!((m.pairwise.index_axis(ndarray::Axis(0), i).sum() - 1.0).abs() < 1e-12);
                for a in 0..3 {
                    let row: f64 = (0..3).map(|b| m.pairwise[[i, a, b]]).sum();
                    prop_assert!((row - d.rows[[i, a]]).abs() < 1e-12);
                    let col: f64 = (0..3).map(|b| m.pairwise[[i, b, a]]).sum();
                    prop_assert!((col - d.rows[[i + 1, a]]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn rows_invariant_to_position_shift(raw in prop::collection::vec(-5.0f64..5.0, 6), c in -30.0f64..30.0) {
            let s = Array2::from_shape_vec((2, 3), raw).unwrap();
            let mut t = s.clone();
            t.row_mut(1).mapv_inplace(|v| v + c);
            let a = TokenDistributions::from_scores(&s).unwrap();
            let b = TokenDistributions::from_scores(&t).unwrap();
            for (x, y) in a.rows.iter().zip(b.rows.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
