//! Brute-force reference values by exhaustive enumeration.
//!
//! Nothing here calls the dynamic programs it is used to check. Structure
//! scores are re-derived from raw lattice and table entries, and sums run in
//! reverse enumeration order with their own max shift.

use std::collections::HashMap;

use ndarray::{Array2, Array3};

use crate::chain_crf::{ChainLattice, ChainMarginals};
use crate::distill::MarginalTable;
use crate::error::{usage, Error, Result};
use crate::span_ner::SpanScoreTable;

/// Largest enumeration the oracle will build.
pub const ENUMERATION_BOUND: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Chain,
    Heads,
    Spans,
}

/// One complete output structure.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Structure {
    /// Tag per position.
    Tags(Vec<usize>),
    /// `(head, relation)` per token.
    Heads(Vec<(usize, usize)>),
    /// `(start, end, type)` triples, left to right.
    Spans(Vec<(usize, usize, usize)>),
}

/// Where structure scores come from.
#[derive(Clone, Copy, Debug)]
pub enum ScoreSource<'a> {
    Chain(&'a ChainLattice),
    /// Per-token log-scores of every `(head, relation)` choice,
    /// `n × (n+1) × R`; the self-loop column is never enumerated.
    Heads(&'a Array3<f64>),
    Spans(&'a SpanScoreTable),
}

/// Every structure of one sentence with its unnormalized log-score.
#[derive(Clone, Debug)]
pub struct StructureEnumeration {
    pub task: Task,
    pub n: usize,
    /// Labels per position (chain), relations (heads) or entity types (spans).
    pub labels: usize,
    pub structures: Vec<(Structure, f64)>,
}

/// Closed-form structure count.
pub fn count(task: Task, n: usize, labels: usize) -> u128 {
    let l = labels as u128;
    match task {
        Task::Chain => l.saturating_pow(n as u32),
        Task::Heads => (n as u128 * l).saturating_pow(n as u32),
        Task::Spans => {
            // c(m) = c(m−1) + L · Σ_{j=1..m} c(m−j)
            let mut c = vec![1u128];
            for m in 1..=n {
                let tail: u128 = c.iter().fold(0u128, |a, &x| a.saturating_add(x));
                c.push(c[m - 1].saturating_add(l.saturating_mul(tail)));
            }
            c[n]
        }
    }
}

/// Builds the enumeration, refusing if it would exceed [`ENUMERATION_BOUND`].
pub fn enumerate(source: ScoreSource<'_>) -> Result<StructureEnumeration> {
    let (task, n, labels) = match source {
        ScoreSource::Chain(lat) => (Task::Chain, lat.emissions.nrows(), lat.emissions.ncols()),
        ScoreSource::Heads(s) => {
            let (n, m, r) = s.dim();
            if m != n + 1 {
                return usage("head score source must be n × (n+1) × R");
            }
            (Task::Heads, n, r)
        }
        ScoreSource::Spans(t) => (Task::Spans, t.len(), t.num_types()),
    };
    let total = count(task, n, labels);
    if total > ENUMERATION_BOUND {
        return Err(Error::TooLarge {
            count: total,
            bound: ENUMERATION_BOUND,
        });
    }
    let structures = match source {
        ScoreSource::Chain(lat) => enumerate_chain(lat),
        ScoreSource::Heads(s) => enumerate_heads(s),
        ScoreSource::Spans(t) => enumerate_spans(t),
    };
    debug_assert_eq!(structures.len() as u128, total);
    Ok(StructureEnumeration {
        task,
        n,
        labels,
        structures,
    })
}

fn enumerate_chain(lat: &ChainLattice) -> Vec<(Structure, f64)> {
    let (n, l) = lat.emissions.dim();
    let total = l.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        // Mixed-radix digits, most significant first.
        let mut tags = vec![0; n];
        let mut c = code;
        for k in (0..n).rev() {
            tags[k] = c % l;
            c /= l;
        }
        let mut score = lat.start[tags[0]];
        for k in 0..n {
            score += lat.emissions[[k, tags[k]]];
        }
        for k in 1..n {
            score += lat.transitions[[k - 1, tags[k - 1], tags[k]]];
        }
        score += lat.stop[tags[n - 1]];
        out.push((Structure::Tags(tags), score));
    }
    out
}

fn enumerate_heads(s: &Array3<f64>) -> Vec<(Structure, f64)> {
    let (n, _, r) = s.dim();
    // Choices for token k: every (head, rel) with head ≠ k + 1.
    let choices: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|k| {
            (0..=n)
                .filter(|&h| h != k + 1)
                .flat_map(|h| (0..r).map(move |l| (h, l)))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        let arcs: Vec<(usize, usize)> = (0..n).map(|k| choices[k][idx[k]]).collect();
        let score = arcs.iter().enumerate().map(|(k, &(h, l))| s[[k, h, l]]).sum();
        out.push((Structure::Heads(arcs), score));
        let mut k = n;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < choices[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn enumerate_spans(t: &SpanScoreTable) -> Vec<(Structure, f64)> {
    let n = t.len();
    let ty = t.num_types();
    let mut out = Vec::new();
    let mut stack: Vec<(usize, Vec<(usize, usize, usize)>)> = vec![(1, Vec::new())];
    while let Some((pos, spans)) = stack.pop() {
        if pos > n {
            let score = spans.iter().map(|&(i, j, l)| t.get(i, j, l)).sum();
            out.push((Structure::Spans(spans), score));
            continue;
        }
        stack.push((pos + 1, spans.clone()));
        for end in pos..=n {
            for l in 0..ty {
                let mut next = spans.clone();
                next.push((pos, end, l));
                stack.push((end + 1, next));
            }
        }
    }
    out
}

/// `log Σ exp(vᵢ)` accumulated from the last entry to the first.
fn reverse_log_sum(values: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in values.iter().rev() {
        if *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut acc = 0.0;
    for v in values.iter().rev() {
        acc += (v - max).exp();
    }
    max + acc.ln()
}

/// `log Z` by direct summation.
pub fn exact_partition(e: &StructureEnumeration) -> f64 {
    let scores: Vec<f64> = e.structures.iter().map(|(_, s)| *s).collect();
    reverse_log_sum(&scores)
}

/// Normalized probability of every enumerated structure.
pub fn probabilities(e: &StructureEnumeration) -> Vec<f64> {
    let z = exact_partition(e);
    e.structures.iter().map(|(_, s)| (s - z).exp()).collect()
}

/// `log P(y)` keyed by structure.
pub fn log_probabilities(e: &StructureEnumeration) -> HashMap<Structure, f64> {
    let z = exact_partition(e);
    e.structures.iter().map(|(y, s)| (y.clone(), s - z)).collect()
}

/// The substructure space to marginalize onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Substructures {
    /// Adjacent-label pairs plus per-position labels (chain).
    Pairwise,
    /// Per-position labels (chain).
    Unary,
    /// Per-token `(head, relation)` (heads).
    Arcs,
    /// Per-position BIOES tags in canonical order (spans).
    Bioes,
}

/// BIOES tag column of every position for a span structure, in the order
/// `O, B-t, I-t, E-t, S-t, …`.
pub fn span_structure_tags(n: usize, spans: &[(usize, usize, usize)]) -> Vec<usize> {
    let mut tags = vec![0; n];
    for &(i, j, l) in spans {
        if i == j {
            tags[i - 1] = 4 * l + 4;
            continue;
        }
        for (p, tag) in tags.iter_mut().enumerate().take(j).skip(i - 1) {
            let pos = p + 1;
            *tag = 4 * l + if pos == i { 1 } else if pos == j { 3 } else { 2 };
        }
    }
    tags
}

/// Substructure marginals by summing structure probabilities.
pub fn exact_marginals(e: &StructureEnumeration, space: Substructures) -> Result<MarginalTable> {
    let n = e.n;
    let l = e.labels;
    let probs = probabilities(e);
    match (e.task, space) {
        (Task::Chain, Substructures::Pairwise) | (Task::Chain, Substructures::Unary) => {
            let mut unary = Array2::zeros((n, l));
            let mut pairwise = Array3::zeros((n.saturating_sub(1), l, l));
            for ((y, _), p) in e.structures.iter().zip(&probs).rev() {
                if let Structure::Tags(t) = y {
                    for k in 0..n {
                        unary[[k, t[k]]] += p;
                        if k > 0 {
                            pairwise[[k - 1, t[k - 1], t[k]]] += p;
                        }
                    }
                }
            }
            Ok(if space == Substructures::Pairwise {
                MarginalTable::Pairwise(ChainMarginals { pairwise, unary })
            } else {
                MarginalTable::Unary(unary)
            })
        }
        (Task::Heads, Substructures::Arcs) => {
            let mut arcs = Array3::zeros((n, n + 1, l));
            for ((y, _), p) in e.structures.iter().zip(&probs).rev() {
                if let Structure::Heads(a) = y {
                    for (k, &(h, r)) in a.iter().enumerate() {
                        arcs[[k, h, r]] += p;
                    }
                }
            }
            Ok(MarginalTable::Arcs(arcs))
        }
        (Task::Spans, Substructures::Bioes) => {
            let mut rows = Array2::zeros((n, 1 + 4 * l));
            for ((y, _), p) in e.structures.iter().zip(&probs).rev() {
                if let Structure::Spans(s) = y {
                    for (k, c) in span_structure_tags(n, s).into_iter().enumerate() {
                        rows[[k, c]] += p;
                    }
                }
            }
            Ok(MarginalTable::Unary(rows))
        }
        _ => usage(format!("{space:?} is not a substructure space of {:?}", e.task)),
    }
}

/// `−Σ_y P_t(y) · log P_s(y)` over the teacher's structures, with the
/// student's log-probability supplied per structure.
pub fn exact_kd_cross_entropy(teacher: &StructureEnumeration, student_log_prob: impl Fn(&Structure) -> f64) -> f64 {
    let probs = probabilities(teacher);
    let mut acc = 0.0;
    for ((y, _), p) in teacher.structures.iter().zip(&probs).rev() {
        if *p > 0.0 {
            acc -= p * student_log_prob(y);
        }
    }
    acc
}

/// Entropy of the enumerated distribution.
pub fn exact_entropy(e: &StructureEnumeration) -> f64 {
    let z = exact_partition(e);
    let mut acc = 0.0;
    for (_, s) in e.structures.iter().rev() {
        let lp = s - z;
        if lp > f64::NEG_INFINITY {
            acc -= lp.exp() * lp;
        }
    }
    acc
}

/// Student log-probability under independent per-site distributions: for
/// tag structures `logp[k][tag]`, for span structures the BIOES tag of each
/// position.
pub fn local_log_prob(logp: &Array2<f64>, y: &Structure) -> f64 {
    match y {
        Structure::Tags(t) => t.iter().enumerate().map(|(k, &c)| logp[[k, c]]).sum(),
        Structure::Spans(s) => span_structure_tags(logp.nrows(), s)
            .into_iter()
            .enumerate()
            .map(|(k, c)| logp[[k, c]])
            .sum(),
        Structure::Heads(_) => f64::NAN,
    }
}

/// Student log-probability under independent per-token joint arc
/// distributions `n × (n+1) × R`.
pub fn arc_log_prob(logp: &Array3<f64>, y: &Structure) -> f64 {
    match y {
        Structure::Heads(a) => a.iter().enumerate().map(|(k, &(h, r))| logp[[k, h, r]]).sum(),
        _ => f64::NAN,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        assert_eq!(count(Task::Chain, 2, 2), 4);
        assert_eq!(count(Task::Spans, 1, 1), 2);
        assert_eq!(count(Task::Spans, 2, 1), 5);
        assert_eq!(count(Task::Heads, 2, 3), 36);
        // c(m) = c(m−1) + Σ_{j≤m} c(j−1): 1, 2, 5, 13, 34, 89, 233, 610, 1597
        let want = [1u128, 2, 5, 13, 34, 89, 233, 610, 1597];
        for (m, &w) in want.iter().enumerate() {
            assert_eq!(count(Task::Spans, m, 1), w);
        }
    }

    #[test]
    fn enumeration_sizes_match_counts() {
        for n in 1..=8 {
            let e = enumerate(ScoreSource::Spans(&SpanScoreTable::zeros(n, 1))).unwrap();
            assert_eq!(e.structures.len() as u128, count(Task::Spans, n, 1));
        }
        let e = enumerate(ScoreSource::Chain(&ChainLattice::zeros(3, 3))).unwrap();
        assert_eq!(e.structures.len(), 27);
        let e = enumerate(ScoreSource::Heads(&Array3::zeros((2, 3, 2)))).unwrap();
        assert_eq!(e.structures.len(), 16);
    }

    #[test]
    fn refuses_large_instances() {
        let err = enumerate(ScoreSource::Chain(&ChainLattice::zeros(13, 3))).unwrap_err();
        assert!(matches!(err, Error::TooLarge { count: 1_594_323, .. }));
    }

    #[test]
    fn uniform_chain() {
        let e = enumerate(ScoreSource::Chain(&ChainLattice::zeros(4, 3))).unwrap();
        assert!((exact_partition(&e) - 4.0 * 3f64.ln()).abs() < 1e-12);
        match exact_marginals(&e, Substructures::Unary).unwrap() {
            MarginalTable::Unary(u) => assert!(u.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12)),
            _ => panic!(),
        }
    }

    #[test]
    fn self_cross_entropy_is_entropy() {
        let mut lat = ChainLattice::zeros(3, 2);
        lat.emissions[[1, 0]] = 1.3;
        lat.transitions[[0, 1, 1]] = -0.4;
        let e = enumerate(ScoreSource::Chain(&lat)).unwrap();
        let lp = log_probabilities(&e);
        let ce = exact_kd_cross_entropy(&e, |y| lp[y]);
        assert!((ce - exact_entropy(&e)).abs() < 1e-12);
    }

    #[test]
    fn span_tags_columns() {
        assert_eq!(span_structure_tags(4, &[(1, 1, 0), (2, 4, 1)]), [4, 5, 6, 7]);
        assert_eq!(span_structure_tags(2, &[]), [0, 0]);
    }
}
