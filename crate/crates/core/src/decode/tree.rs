//! Maximum spanning arborescence decoding of basic trees.

use crate::numeric::Tensor;
use crate::scorer::{argmax, softmax, ScoreKind, ScoreTensor};

use super::DecodeError;

/// Floor applied to `1 - P(∅)` before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Chu-Liu/Edmonds over a square matrix `w[h][d]` with node 0 as root.
/// Returns `heads[d]` for every node, `heads[0]` unused.
fn cle_square(w: &[Vec<f64>]) -> Result<Vec<usize>, DecodeError> {
    let m = w.len();
    let mut heads = vec![0usize; m];
    for d in 1..m {
        let mut best: Option<usize> = None;
        for h in 0..m {
            if h == d || w[h][d] == f64::NEG_INFINITY {
                continue;
            }
            if best.map_or(true, |b| w[h][d] > w[b][d]) {
                best = Some(h);
            }
        }
        heads[d] = best.ok_or(DecodeError::Infeasible { dependent: d })?;
    }

    let Some(cycle) = find_cycle(&heads) else {
        return Ok(heads);
    };

    // Contract the cycle into one node placed last; other nodes keep their
    // relative order so that tie-breaking stays index-ordered.
    let in_cycle: Vec<bool> = (0..m).map(|v| cycle.contains(&v)).collect();
    let outside: Vec<usize> = (0..m).filter(|&v| !in_cycle[v]).collect();
    let c = outside.len();
    let mut sub = vec![vec![f64::NEG_INFINITY; c + 1]; c + 1];
    let mut enter = vec![0usize; c + 1];
    let mut leave = vec![0usize; c + 1];
    for (i, &u) in outside.iter().enumerate() {
        for (j, &v) in outside.iter().enumerate() {
            sub[i][j] = w[u][v];
        }
        for &v in &cycle {
            let into = w[u][v] - w[heads[v]][v];
            if into > sub[i][c] {
                sub[i][c] = into;
                enter[i] = v;
            }
            if w[v][u] > sub[c][i] {
                sub[c][i] = w[v][u];
                leave[i] = v;
            }
        }
    }
    for (i, _) in outside.iter().enumerate() {
        sub[i][i] = f64::NEG_INFINITY;
    }

    let sub_heads = cle_square(&sub).map_err(|e| match e {
        DecodeError::Infeasible { dependent } if dependent == c => DecodeError::Infeasible {
            dependent: cycle[0],
        },
        DecodeError::Infeasible { dependent } => DecodeError::Infeasible {
            dependent: outside[dependent],
        },
        other => other,
    })?;

    let mut result = heads.clone();
    for (j, &v) in outside.iter().enumerate().skip(1) {
        let h = sub_heads[j];
        result[v] = if h == c { leave[j] } else { outside[h] };
    }
    let from = sub_heads[c];
    result[enter[from]] = outside[from];
    Ok(result)
}

/// Nodes of some cycle in `heads` (node 0 is the root and has no head).
fn find_cycle(heads: &[usize]) -> Option<Vec<usize>> {
    let m = heads.len();
    let mut state = vec![0u8; m];
    state[0] = 2;
    for start in 1..m {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = heads[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&p| p == v).expect("node on current path");
            let mut cycle = path[pos..].to_vec();
            cycle.sort_unstable();
            return Some(cycle);
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

fn square(weights: &Tensor) -> Vec<Vec<f64>> {
    let n = weights.cols();
    let mut w = vec![vec![f64::NEG_INFINITY; n + 1]; n + 1];
    for h in 0..=n {
        for d in 1..=n {
            if h != d {
                w[h][d] = weights.at2(h, d - 1);
            }
        }
    }
    w
}

/// Total weight of a head assignment over an `(n+1) x n` matrix.
pub fn tree_weight(weights: &Tensor, heads: &[usize]) -> f64 {
    heads.iter().enumerate().map(|(d, &h)| weights.at2(h, d)).sum()
}

/// Maximum spanning arborescence rooted at 0 over `weights[h][d-1]`.
/// Self-loops are ignored and `-inf` marks a forbidden edge. With
/// `single_root` exactly one token attaches to the root. Returns the head
/// of each token, 0 for the root.
pub fn cle_mst(weights: &Tensor, single_root: bool) -> Result<Vec<usize>, DecodeError> {
    let n = weights.cols();
    assert_eq!(weights.rows(), n + 1, "weights must be (n+1) x n");
    if n == 0 {
        return Ok(Vec::new());
    }
    let w = square(weights);
    let unconstrained = cle_square(&w)?;
    let root_children = unconstrained[1..].iter().filter(|&&h| h == 0).count();
    if !single_root || root_children == 1 {
        return Ok(unconstrained[1..].to_vec());
    }

    // Exact search: fix each possible root child in turn.
    let mut best: Option<(f64, Vec<usize>)> = None;
    for child in 1..=n {
        if w[0][child] == f64::NEG_INFINITY {
            continue;
        }
        let mut constrained = w.clone();
        for d in 1..=n {
            if d != child {
                constrained[0][d] = f64::NEG_INFINITY;
            }
        }
        let Ok(heads) = cle_square(&constrained) else {
            continue;
        };
        let heads = heads[1..].to_vec();
        let score = tree_weight(weights, &heads);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, heads));
        }
    }
    best.map(|(_, h)| h).ok_or(DecodeError::NoSingleRootTree)
}

/// Per-dependent log-softmax over candidate heads, self excluded.
pub fn head_log_probs(arc: &ScoreTensor) -> Tensor {
    let n = arc.n();
    let mut out = Tensor::filled(&[n + 1, n], f64::NEG_INFINITY);
    for d in 0..n {
        let cands: Vec<usize> = (0..=n).filter(|&h| h != d + 1).collect();
        let scores: Vec<f64> = cands.iter().map(|&h| arc.at(h, d, 0)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        for (&h, s) in cands.iter().zip(&scores) {
            out.data_mut()[h * n + d] = s - lse;
        }
    }
    out
}

/// `log(max(1 - P(∅), floor))` per cell, self cells `-inf`.
pub fn edge_log_probs_unfactorized(labels: &ScoreTensor, null: usize) -> Tensor {
    let n = labels.n();
    let mut out = Tensor::filled(&[n + 1, n], f64::NEG_INFINITY);
    for h in 0..=n {
        for d in 0..n {
            if h == d + 1 {
                continue;
            }
            let p = softmax(labels.cell(h, d));
            let exists: f64 = p.iter().enumerate().filter(|(c, _)| *c != null).map(|(_, v)| v).sum();
            out.data_mut()[h * n + d] = exists.max(PROB_FLOOR).ln();
        }
    }
    out
}

/// Best label channel at a cell, skipping `exclude`.
pub(crate) fn best_label(labels: &ScoreTensor, h: usize, d: usize, exclude: Option<usize>) -> usize {
    let cell = labels.cell(h, d);
    match exclude {
        None => argmax(cell),
        Some(x) => {
            let mut best: Option<usize> = None;
            for (c, &v) in cell.iter().enumerate() {
                if c != x && best.map_or(true, |b| v > cell[b]) {
                    best = Some(c);
                }
            }
            best.expect("at least one non-null label")
        }
    }
}

/// Heads (0 = root) and label indices of a decoded tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedTree {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn decode_tree_factorized(arc: &ScoreTensor, labels: &ScoreTensor, single_root: bool) -> Result<DecodedTree, DecodeError> {
    check(arc, ScoreKind::ArcTree)?;
    check(labels, ScoreKind::Label)?;
    same_length(arc, labels)?;
    let heads = cle_mst(&head_log_probs(arc), single_root)?;
    let labels = heads
        .iter()
        .enumerate()
        .map(|(d, &h)| best_label(labels, h, d, None))
        .collect();
    Ok(DecodedTree { heads, labels })
}

pub fn decode_tree_unfactorized(labels: &ScoreTensor, null: usize, single_root: bool) -> Result<DecodedTree, DecodeError> {
    check(labels, ScoreKind::LabelWithNull)?;
    if labels.n() > 0 && labels.k() < 2 {
        return Err(DecodeError::NoLabels);
    }
    let heads = cle_mst(&edge_log_probs_unfactorized(labels, null), single_root)?;
    let labels = heads
        .iter()
        .enumerate()
        .map(|(d, &h)| best_label(labels, h, d, Some(null)))
        .collect();
    Ok(DecodedTree { heads, labels })
}

pub(crate) fn check(t: &ScoreTensor, kind: ScoreKind) -> Result<(), DecodeError> {
    if t.kind() != kind {
        return Err(DecodeError::WrongKind {
            expected: kind,
            found: t.kind(),
        });
    }
    Ok(())
}

pub(crate) fn same_length(a: &ScoreTensor, b: &ScoreTensor) -> Result<(), DecodeError> {
    if a.n() != b.n() {
        return Err(DecodeError::LengthMismatch(a.n(), b.n()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::oracle::{brute_force_best, is_tree};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        let mut t = Tensor::zeros(&[n + 1, n]);
        for h in 0..=n {
            for d in 0..n {
                t.data_mut()[h * n + d] = f(h, d + 1);
            }
        }
        t
    }

    #[test]
    fn single_token() {
        assert_eq!(cle_mst(&weights(1, |_, _| 0.0), true).unwrap(), vec![0]);
    }

    #[test]
    fn two_token_example() {
        let w = weights(2, |h, d| match (h, d) {
            (0, 1) => 5.0,
            (0, 2) => 1.0,
            (1, 2) => 4.0,
            (2, 1) => 3.0,
            _ => 0.0,
        });
        let heads = cle_mst(&w, false).unwrap();
        assert_eq!(heads, vec![0, 1]);
        assert_eq!(tree_weight(&w, &heads), 9.0);
    }

    #[test]
    fn contraction_needed() {
        // 1 and 2 prefer each other; the cycle must be broken.
        let w = weights(3, |h, d| match (h, d) {
            (1, 2) | (2, 1) => 10.0,
            (0, 1) => 1.0,
            (0, 2) => 2.0,
            (2, 3) => 5.0,
            _ => f64::NEG_INFINITY,
        });
        let heads = cle_mst(&w, false).unwrap();
        assert_eq!(heads, vec![2, 0, 2]);
    }

    #[test]
    fn single_root_enforced() {
        let w = weights(3, |h, _| if h == 0 { 10.0 } else { 1.0 });
        let free = cle_mst(&w, false).unwrap();
        assert_eq!(free, vec![0, 0, 0]);
        let single = cle_mst(&w, true).unwrap();
        assert_eq!(single.iter().filter(|&&h| h == 0).count(), 1);
        assert_eq!(single, vec![0, 1, 1]);
    }

    #[test]
    fn infeasible_reports_dependent() {
        let w = weights(2, |h, d| if d == 2 { f64::NEG_INFINITY } else { h as f64 });
        assert_eq!(cle_mst(&w, false), Err(DecodeError::Infeasible { dependent: 2 }));
        // Each token only reachable from the other: no arborescence.
        let w = weights(2, |h, _| if h == 0 { f64::NEG_INFINITY } else { 1.0 });
        assert!(matches!(cle_mst(&w, false), Err(DecodeError::Infeasible { .. })));
    }

    #[test]
    fn one_hot_arc_scores_return_that_tree() {
        let gold = [2usize, 0, 2, 3];
        let n = gold.len();
        let arc = ScoreTensor::from_fn(ScoreKind::ArcTree, n, 1, |h, d, _| if gold[d] == h { 20.0 } else { -20.0 });
        let labels = ScoreTensor::from_fn(ScoreKind::Label, n, 3, |_, _, c| if c == 1 { 5.0 } else { 0.0 });
        let t = decode_tree_factorized(&arc, &labels, true).unwrap();
        assert_eq!(t.heads, gold);
        assert_eq!(t.labels, vec![1; n]);
    }

    #[test]
    fn unfactorized_prefers_low_null_cell() {
        let n = 2;
        let labels = ScoreTensor::from_fn(ScoreKind::LabelWithNull, n, 2, |h, d, c| {
            let p_null: f64 = if (h, d) == (2, 0) { 0.01 } else { 0.99 };
            if c == 0 {
                p_null.ln()
            } else {
                (1.0 - p_null).ln()
            }
        });
        let w = edge_log_probs_unfactorized(&labels, 0);
        assert!((w.at2(2, 0) - 0.99f64.ln()).abs() < 1e-12);
        assert!((w.at2(1, 1) - 0.01f64.ln()).abs() < 1e-12);
        let t = decode_tree_unfactorized(&labels, 0, true).unwrap();
        assert_eq!(t.heads[0], 2);
        assert!(t.labels.iter().all(|&l| l != 0));
    }

    #[test]
    fn unfactorized_degenerate_uniform() {
        let labels = ScoreTensor::from_fn(ScoreKind::LabelWithNull, 3, 3, |_, _, c| if c == 0 { f64::NEG_INFINITY } else { 0.0 });
        let a = decode_tree_unfactorized(&labels, 0, true).unwrap();
        let b = decode_tree_unfactorized(&labels, 0, true).unwrap();
        assert_eq!(a, b);
        assert!(is_tree(&a.heads, true));
    }

    #[test]
    fn brute_force_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..400 {
            let n = 1 + i % 4;
            let w = weights(n, |_, _| rng.gen_range(-5.0..5.0));
            for single in [false, true] {
                let heads = cle_mst(&w, single).unwrap();
                assert!(is_tree(&heads, single));
                let (best, _) = brute_force_best(n, &|h, d| w.at2(h, d), single).unwrap();
                assert!((tree_weight(&w, &heads) - best).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn shifting_weights_keeps_argmax(seed in 0u64..5000, shift in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..7);
            let w = weights(n, |_, _| rng.gen_range(-3.0..3.0));
            let shifted = Tensor::new(w.shape().to_vec(), w.data().iter().map(|v| v + shift).collect());
            let a = cle_mst(&w, true).unwrap();
            let b = cle_mst(&shifted, true).unwrap();
            prop_assert!((tree_weight(&w, &a) - tree_weight(&w, &b)).abs() < 1e-9);
        }

        #[test]
        fn at_least_greedy_when_greedy_is_tree(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..8);
            let w = weights(n, |_, _| rng.gen_range(-3.0..3.0));
            let greedy: Vec<usize> = (0..n)
                .map(|d| (0..=n).filter(|&h| h != d + 1).fold(None, |b: Option<usize>, h| match b {
                    Some(b) if w.at2(b, d) >= w.at2(h, d) => Some(b),
                    _ => Some(h),
                }).unwrap())
                .collect();
            let heads = cle_mst(&w, false).unwrap();
            prop_assert!(is_tree(&heads, false));
            if is_tree(&greedy, false) {
                prop_assert!(tree_weight(&w, &heads) >= tree_weight(&w, &greedy) - 1e-12);
            }
        }
    }
}
